//! Stage orchestration over a run directory.

pub mod compute;
pub mod config;
pub mod stages;

pub use config::{parse_sweep, Boundary, ClientMode, PipelineConfig, Sweep, SweepParam};
pub use stages::{parse_stages, HeldOut, PersonaStep, Pipeline, Role, RunOptions, Stage, StageManifest, StageStatus};
