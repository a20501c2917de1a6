//! Persona aggregation, doppelganger transfer, fusion, losses and training.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod aggregate;
pub mod loss;
pub mod net;
pub mod train;
pub mod transfer;

pub use aggregate::{aggregate_personas, AggregateOutput};
pub use loss::{bpr_loss, bpr_term, fuse_representations};
pub use net::{LossParts, MultiTapModel, Scorer, SourceReps, Triple};
pub use train::{evaluate, evaluate_with, train_model, train_source, train_target, EpochRecord, TrainOutcome};
pub use transfer::{direct_alignment_loss, doppelganger_embed, dpl_loss, info_nce, DoppelgangerState, InfoNce};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    #[default]
    SelfAttn,
    Mean,
    Concat,
}

impl AggregationMode {
    pub const ALL: [AggregationMode; 3] = [AggregationMode::SelfAttn, AggregationMode::Mean, AggregationMode::Concat];

    pub fn name(self) -> &'static str {
        match self {
            AggregationMode::SelfAttn => "self_attn",
            AggregationMode::Mean => "mean",
            AggregationMode::Concat => "concat",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    #[default]
    Doppelganger,
    DirectId,
    DirectPersona,
    DirectBoth,
    None,
}

impl TransferMode {
    pub const ALL: [TransferMode; 5] = [
        TransferMode::Doppelganger,
        TransferMode::DirectId,
        TransferMode::DirectPersona,
        TransferMode::DirectBoth,
        TransferMode::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransferMode::Doppelganger => "doppelganger",
            TransferMode::DirectId => "direct_id",
            TransferMode::DirectPersona => "direct_persona",
            TransferMode::DirectBoth => "direct_both",
            TransferMode::None => "none",
        }
    }
}

macro_rules! named_enum {
    ($t:ty, $kind:literal) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $t {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                <$t>::ALL
                    .into_iter()
                    .find(|m| m.name() == s.to_ascii_lowercase().replace('-', "_"))
                    .ok_or_else(|| Error::Unknown {
                        kind: $kind,
                        name: s.to_string(),
                    })
            }
        }
    };
}

named_enum!(AggregationMode, "aggregation mode");
named_enum!(TransferMode, "transfer mode");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub negatives: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub patience: usize,
    pub aggregation: AggregationMode,
    pub transfer: TransferMode,
    /// Persona embedding width `h`; `None` keeps the encoder width.
    pub persona_dim: Option<usize>,
    pub fusion_dim: usize,
    pub init_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.4,
            tau: 0.5,
            batch_size: 1024,
            negatives: 1,
            lr: 1e-3,
            weight_decay: 1e-4,
            dropout: 0.1,
            epochs: 100,
            patience: 10,
            aggregation: AggregationMode::SelfAttn,
            transfer: TransferMode::Doppelganger,
            persona_dim: None,
            fusion_dim: 128,
            init_std: crate::diffkit::INIT_STD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be a finite nonnegative number");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if self.batch_size == 0 || self.negatives == 0 || self.fusion_dim == 0 {
            return bad("batch_size, negatives and fusion_dim must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.persona_dim == Some(0) {
            return bad("persona_dim must be positive");
        }
        Ok(())
    }
}
