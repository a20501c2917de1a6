//! Cross-domain recommendation with multi-criteria personas and
//! target-adaptive doppelganger transfer.

pub mod corpus;
pub mod diffkit;
pub mod error;
pub mod eval;
pub mod fixture;
pub mod gcn;
pub mod idh;
pub mod model;
pub mod persona;
pub mod pipeline;
pub mod quantile;

pub use error::{Error, Result};
