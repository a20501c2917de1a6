//! The single structured run configuration.

use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::Averaging;
use crate::fixture::{DomainFiles, BOUNDARY};
use crate::gcn::GcnConfig;
use crate::idh::ItemCriterion;
use crate::model::{AggregationMode, TrainConfig, TransferMode};
use crate::persona::client::RemoteSettings;
use crate::quantile::OrdinalLabel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainInput {
    pub name: String,
    pub interactions: PathBuf,
    pub metadata: PathBuf,
}

/// Either seconds since the epoch or an ISO-8601 date / date-time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Boundary {
    Timestamp(i64),
    Date(String),
}

impl Boundary {
    pub fn seconds(&self) -> Result<i64> {
        match self {
            Boundary::Timestamp(t) => Ok(*t),
            Boundary::Date(s) => parse_iso(s),
        }
    }
}

/// `YYYY-MM-DD` is read as midnight UTC.
pub fn parse_iso(s: &str) -> Result<i64> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Ok(dt.timestamp());
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map(|d| d.and_hms_opt(0, 0, 0).expect("midnight exists").and_utc().timestamp())
        .map_err(|e| Error::Config(format!("boundary `{s}` is not an ISO date: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub boundary: Boundary,
    pub valid_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            boundary: Boundary::Date("2019-01-01".into()),
            valid_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdhConfig {
    /// Criteria analyzed; Medium matrices are available but not reported
    /// by default.
    pub criteria: Vec<ItemCriterion>,
    pub labels: Vec<OrdinalLabel>,
}

impl Default for IdhConfig {
    fn default() -> Self {
        Self {
            criteria: ItemCriterion::ALL.to_vec(),
            labels: vec![OrdinalLabel::High, OrdinalLabel::Low],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClientMode {
    #[default]
    Offline,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PersonaConfig {
    pub client: ClientMode,
    /// Width of persona text vectors.
    pub persona_dim: usize,
    /// Width of item semantic vectors.
    pub item_dim: usize,
    pub encoder_seed: u64,
    pub chunk: usize,
    pub remote: RemoteSettings,
}

impl Default for PersonaConfig {
    fn default() -> Self {
        Self {
            client: ClientMode::Offline,
            persona_dim: 256,
            item_dim: 128,
            encoder_seed: 0,
            chunk: crate::persona::encode::DEFAULT_CHUNK,
            remote: RemoteSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub averaging: Averaging,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![5, 10],
            averaging: Averaging::PerInteraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    /// Aggregation modes compared under the configured transfer mode.
    pub aggregations: Vec<AggregationMode>,
    /// Transfer modes compared under the configured aggregation mode.
    pub transfers: Vec<TransferMode>,
    /// Seeds of every ablation run; empty means the first pipeline seed.
    pub seeds: Vec<u64>,
    /// Grids such as `lambda=0:2:0.2`.
    pub sweeps: Vec<String>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            aggregations: AggregationMode::ALL.to_vec(),
            transfers: TransferMode::ALL.to_vec(),
            seeds: Vec::new(),
            sweeps: vec!["lambda=0:2:0.2".into(), "tau=0.1:1:0.1".into()],
        }
    }
}

/// Hyperparameter that a sweep may vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Lambda,
    Tau,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::Tau => "tau",
        }
    }

    pub fn apply(self, cfg: &mut TrainConfig, value: f64) {
        match self {
            SweepParam::Lambda => cfg.lambda = value,
            SweepParam::Tau => cfg.tau = value,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

/// Parses `name=start:end:step`; both ends are included when the step
/// divides the range.
pub fn parse_sweep(spec: &str) -> Result<Sweep> {
    let bad = |why: &str| Error::Config(format!("sweep `{spec}`: {why}"));
    let (name, range) = spec.split_once('=').ok_or_else(|| bad("expected name=start:end:step"))?;
    let param = match name.trim() {
        "lambda" => SweepParam::Lambda,
        "tau" => SweepParam::Tau,
        other => return Err(bad(&format!("unknown parameter `{other}`"))),
    };
    let parts: Vec<f64> = range
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad("bounds must be numbers")))
        .collect::<Result<_>>()?;
    let [start, end, step] = parts[..] else {
        return Err(bad("expected three fields start:end:step"));
    };
    if !step.is_finite() || step <= 0.0 || !start.is_finite() || !end.is_finite() || end < start {
        return Err(bad("need a positive step and start <= end"));
    }
    // Tolerance absorbs float error in (end - start) / step.
    let n = ((end - start) / step + 1e-9).floor() as usize;
    let values = (0..=n)
        .map(|k| ((start + k as f64 * step) * 1e9).round() / 1e9)
        .collect();
    let sweep = Sweep { param, values };
    if param == SweepParam::Tau && sweep.values.iter().any(|&t| t <= 0.0) {
        return Err(bad("tau must stay positive"));
    }
    Ok(sweep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    pub source: DomainInput,
    pub target: DomainInput,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub idh: IdhConfig,
    #[serde(default)]
    pub persona: PersonaConfig,
    #[serde(default)]
    pub pretrain: GcnConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub ablate: AblateConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_cache_dir() -> PathBuf {
    PathBuf::from("cache")
}

impl PipelineConfig {
    /// Reads a TOML file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.output_dir,
            &mut self.cache_dir,
            &mut self.source.interactions,
            &mut self.source.metadata,
            &mut self.target.interactions,
            &mut self.target.metadata,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks every section; no stage runs on an invalid config.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if self.source.name == self.target.name {
            return bad("source and target domains need distinct names".into());
        }
        self.split.boundary.seconds()?;
        if !(self.split.valid_fraction > 0.0 && self.split.valid_fraction < 1.0) {
            return bad(format!("valid_fraction {} must lie in (0, 1)", self.split.valid_fraction));
        }
        if self.idh.criteria.is_empty() || self.idh.labels.is_empty() {
            return bad("idh needs at least one criterion and one label".into());
        }
        if self.persona.persona_dim == 0 || self.persona.item_dim == 0 || self.persona.chunk == 0 {
            return bad("persona dimensions and chunk size must be positive".into());
        }
        let g = &self.pretrain;
        if g.dim == 0 || g.epochs == 0 || g.batch_size == 0 || g.negatives == 0 || !g.lr.is_finite() || g.lr <= 0.0 {
            return bad("pretrain needs positive dim, epochs, batch size, negatives and lr".into());
        }
        self.train.validate()?;
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return bad("eval.ks must be nonempty positive cutoffs".into());
        }
        if !self.eval.ks.contains(&5) {
            return bad("eval.ks must include 5, the early-stopping cutoff".into());
        }
        for s in &self.ablate.sweeps {
            parse_sweep(s)?;
        }
        Ok(())
    }

    pub fn ablation_seeds(&self) -> Vec<u64> {
        if self.ablate.seeds.is_empty() {
            vec![self.seeds[0]]
        } else {
            self.ablate.seeds.clone()
        }
    }

    /// Canonical JSON of the config with locations replaced by content:
    /// input files become their SHA-256 and output/cache directories are
    /// dropped, so equal hashes mean equal inputs and settings.
    pub fn canonical(&self) -> Result<Value> {
        let mut v = serde_json::to_value(self)?;
        let obj = v.as_object_mut().expect("struct serializes to an object");
        obj.remove("output_dir");
        obj.remove("cache_dir");
        for (role, input) in [("source", &self.source), ("target", &self.target)] {
            obj.insert(
                role.into(),
                serde_json::json!({
                    "name": input.name,
                    "interactions": file_sha256(&input.interactions)?,
                    "metadata": file_sha256(&input.metadata)?,
                }),
            );
        }
        Ok(v)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(&self.canonical()?)?.as_bytes()))
    }

    /// Settings for the planted fixture written by [`crate::fixture::write_fixture`],
    /// scaled so the five-seed run fits a desk-scale time budget.
    pub fn for_fixture(source: &DomainFiles, target: &DomainFiles, output_dir: PathBuf, cache_dir: PathBuf) -> Self {
        let input = |f: &DomainFiles| DomainInput {
            name: f.domain.clone(),
            interactions: f.interactions.clone(),
            metadata: f.metadata.clone(),
        };
        Self {
            seeds: default_seeds(),
            output_dir,
            cache_dir,
            source: input(source),
            target: input(target),
            split: SplitConfig {
                boundary: Boundary::Timestamp(BOUNDARY),
                valid_fraction: 0.5,
            },
            idh: IdhConfig::default(),
            persona: PersonaConfig {
                persona_dim: 64,
                item_dim: 32,
                ..PersonaConfig::default()
            },
            pretrain: GcnConfig {
                dim: 32,
                epochs: 60,
                batch_size: 256,
                lr: 5e-3,
                ..GcnConfig::default()
            },
            train: TrainConfig {
                batch_size: 128,
                lr: 5e-3,
                fusion_dim: 32,
                epochs: 60,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_grid_counts() {
        let s = parse_sweep("lambda=0:2:0.2").unwrap();
        assert_eq!(s.values.len(), 11);
        assert_eq!(s.values[3], 0.6);
        assert_eq!(*s.values.last().unwrap(), 2.0);
        assert_eq!(parse_sweep("tau=0.1:1:0.1").unwrap().values.len(), 10);
        assert_eq!(parse_sweep("lambda=1:1:0.5").unwrap().values, [1.0]);
        for bad in ["lambda", "lr=0:1:0.1", "lambda=0:1", "lambda=1:0:0.1", "lambda=0:1:0", "tau=0:1:0.5"] {
            assert!(parse_sweep(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn iso_boundaries() {
        assert_eq!(parse_iso("2019-01-01").unwrap(), 1_546_300_800);
        assert_eq!(parse_iso("2019-01-01T00:00:00Z").unwrap(), 1_546_300_800);
        assert!(parse_iso("yesterday").is_err());
        assert_eq!(Boundary::Timestamp(5).seconds().unwrap(), 5);
    }

    #[test]
    fn toml_round_trip_and_hash_ignores_locations() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = crate::fixture::write_fixture(
            dir.path(),
            &crate::fixture::FixtureConfig {
                overlap_users: 10,
                ..Default::default()
            },
        )
        .unwrap();
        let a = PipelineConfig::for_fixture(&s, &t, "out/a".into(), "cache/a".into());
        a.validate().unwrap();
        let parsed: PipelineConfig = toml::from_str(&a.to_toml().unwrap()).unwrap();
        assert_eq!(parsed, a);
        let b = PipelineConfig {
            output_dir: "elsewhere".into(),
            cache_dir: "c2".into(),
            ..a.clone()
        };
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        let c = PipelineConfig {
            seeds: vec![9],
            ..a.clone()
        };
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn validation_rejects_bad_sections() {
        let input = DomainInput {
            name: "a".into(),
            interactions: "i".into(),
            metadata: "m".into(),
        };
        let base = PipelineConfig {
            seeds: vec![1],
            output_dir: "o".into(),
            cache_dir: "c".into(),
            source: input.clone(),
            target: DomainInput {
                name: "b".into(),
                ..input
            },
            split: SplitConfig::default(),
            idh: IdhConfig::default(),
            persona: PersonaConfig::default(),
            pretrain: GcnConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
        };
        base.validate().unwrap();
        let mut c = base.clone();
        c.seeds = vec![1, 1];
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.eval.ks = vec![10];
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.ablate.sweeps = vec!["dropout=0:1:0.1".into()];
        assert!(c.validate().is_err());
        let mut c = base;
        c.train.tau = 0.0;
        assert!(c.validate().is_err());
    }
}
