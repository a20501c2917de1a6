//! Persona construction: the per-user label database, prompt payloads,
//! generator and encoder clients, content-addressed caches and encoding.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod cache;
pub mod client;
pub mod db;
pub mod encode;
pub mod generate;
pub mod prompt;

pub use cache::Cache;
pub use client::{
    CallCounter, EncoderClient, GeneratorClient, HashingEncoder, OfflineGenerator, RemoteEncoder,
    RemoteGenerator, RemoteSettings,
};
pub use db::{build_persona_db, build_persona_dbs, category_diversity, category_familiarity_labels, PersonaDb};
pub use encode::{encode_item_semantics, encode_personas, PersonaEmbeddingSet};
pub use generate::{build_domain_description, generate_personas, parse_persona_response, PersonaText, Provenance};
pub use prompt::{PersonaRequest, PromptAssets};

/// The five persona criteria in prompt order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Criterion {
    #[serde(rename = "PS")]
    Ps,
    #[serde(rename = "QP")]
    Qp,
    #[serde(rename = "PB")]
    Pb,
    #[serde(rename = "CF")]
    Cf,
    #[serde(rename = "CD")]
    Cd,
}

impl Criterion {
    pub const ALL: [Criterion; 5] = [Criterion::Ps, Criterion::Qp, Criterion::Pb, Criterion::Cf, Criterion::Cd];

    pub fn code(self) -> &'static str {
        match self {
            Criterion::Ps => "PS",
            Criterion::Qp => "QP",
            Criterion::Pb => "PB",
            Criterion::Cf => "CF",
            Criterion::Cd => "CD",
        }
    }

    /// Key of this criterion in the structured generator output.
    pub fn output_key(self) -> &'static str {
        match self {
            Criterion::Ps => "price_centric",
            Criterion::Qp => "quality_centric",
            Criterion::Pb => "popularity_centric",
            Criterion::Cf => "category_familiarity",
            Criterion::Cd => "category_diversity",
        }
    }

    /// Accepted output keys, in lookup order.
    pub fn output_aliases(self) -> &'static [&'static str] {
        match self {
            Criterion::Ps => &["price_centric"],
            Criterion::Qp => &["quality_centric"],
            Criterion::Pb => &["popularity_centric"],
            Criterion::Cf => &["category_familiarity", "category_preference"],
            Criterion::Cd => &["category_diversity"],
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.code().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Unknown {
                kind: "criterion",
                name: s.to_string(),
            })
    }
}
