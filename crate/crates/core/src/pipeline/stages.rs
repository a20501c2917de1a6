//! Stage graph, run-directory layout and resumable execution.
//!
//! Every stage writes into `<output_dir>/<stage>/` and finishes by writing
//! `manifest.json`, which lists the SHA-256 of every file it produced. A
//! stage counts as complete when its manifest carries the current stage
//! hash and every listed file still has the recorded digest; complete
//! stages are skipped without touching their files.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::compute::{persona_dbs, persona_texts, persona_vectors, run_seed, train_plus_valid, DomainSide, Encoders, PersonaVectors};
use super::config::{parse_sweep, sha256_hex, ClientMode, PipelineConfig};
use crate::corpus::{build_domain_pair, load_domain, time_split, write_jsonl, DomainDataset, SplitBundle};
use crate::diffkit::{checkpoint, Tensor};
use crate::error::{Error, Result};
use crate::eval::{aggregate_seeds, EvalResult, MetricReport};
use crate::gcn::{pretrain_id_embeddings, IdEmbeddingTable};
use crate::idh::{export_idh_report, preservation_matrix, IdhAnalysis, ItemCriterion};
use crate::model::{evaluate_with, train_source, AggregationMode, MultiTapModel, TrainConfig, TrainOutcome};
use crate::persona::client::{HashingEncoder, OfflineGenerator, RemoteEncoder, RemoteGenerator};
use crate::persona::{Cache, Criterion, EncoderClient, GeneratorClient, PersonaDb, PersonaEmbeddingSet, PersonaText};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Ingest,
    Split,
    Idh,
    Persona,
    Pretrain,
    Train,
    Eval,
    Ablate,
}

impl Stage {
    /// Execution order; every stage comes after its dependencies.
    pub const ALL: [Stage; 8] = [
        Stage::Ingest,
        Stage::Split,
        Stage::Idh,
        Stage::Persona,
        Stage::Pretrain,
        Stage::Train,
        Stage::Eval,
        Stage::Ablate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Split => "split",
            Stage::Idh => "idh",
            Stage::Persona => "persona",
            Stage::Pretrain => "pretrain",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Ablate => "ablate",
        }
    }

    pub fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Ingest => &[],
            Stage::Split => &[Stage::Ingest],
            Stage::Idh => &[Stage::Split],
            Stage::Persona => &[Stage::Idh],
            Stage::Pretrain => &[Stage::Split],
            Stage::Train | Stage::Ablate => &[Stage::Persona, Stage::Pretrain],
            Stage::Eval => &[Stage::Train],
        }
    }

    /// Transitive dependencies in execution order.
    pub fn closure(self) -> Vec<Stage> {
        let mut seen = BTreeSet::new();
        let mut todo = self.deps().to_vec();
        while let Some(s) = todo.pop() {
            if seen.insert(s) {
                todo.extend_from_slice(s.deps());
            }
        }
        Stage::ALL.into_iter().filter(|s| seen.contains(s)).collect()
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s.trim())
            .ok_or_else(|| Error::Unknown {
                kind: "stage",
                name: s.to_string(),
            })
    }
}

/// Parses a comma-separated stage list; `all` expands to every stage.
pub fn parse_stages(list: &str) -> Result<Vec<Stage>> {
    if list.trim() == "all" {
        return Ok(Stage::ALL.to_vec());
    }
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Role {
    Source,
    Target,
}

impl Role {
    pub const BOTH: [Role; 2] = [Role::Source, Role::Target];

    pub fn name(self) -> &'static str {
        match self {
            Role::Source => "source",
            Role::Target => "target",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Sub-steps of the persona stage, runnable one at a time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PersonaStep {
    Build,
    Generate,
    Encode,
}

impl PersonaStep {
    pub fn name(self) -> &'static str {
        match self {
            PersonaStep::Build => "build",
            PersonaStep::Generate => "generate",
            PersonaStep::Encode => "encode",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub config_hash: String,
    pub stage_hash: String,
    pub seed: u64,
    pub seeds: Vec<u64>,
    /// Relative path to SHA-256 of every file the stage wrote.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Remote clients run only when this is set and the config asks for them.
    pub allow_remote: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageStatus {
    pub stage: String,
    pub executed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub source: String,
    pub target: String,
    pub source_users: usize,
    pub target_users: usize,
    pub source_items: usize,
    pub target_items: usize,
    pub overlap: usize,
    pub overlap_users: Vec<String>,
}

/// One line of the ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub grid: String,
    pub parameter: String,
    pub value: String,
    pub seeds: Vec<u64>,
    pub report: Vec<MetricReport>,
}

pub const MANIFEST: &str = "manifest.json";

pub struct Pipeline {
    cfg: PipelineConfig,
    canonical: Value,
    hash: String,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, opts: RunOptions) -> Result<Self> {
        cfg.validate()?;
        if cfg.persona.client == ClientMode::Remote && !opts.allow_remote {
            return Err(Error::Config(
                "config selects remote persona clients; pass the explicit remote flag to allow network calls".into(),
            ));
        }
        let canonical = cfg.canonical()?;
        let hash = sha256_hex(serde_json::to_string(&canonical)?.as_bytes());
        Ok(Self {
            cfg,
            canonical,
            hash,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn root(&self) -> &Path {
        &self.cfg.output_dir
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root().join(stage.name())
    }

    /// Hash of the settings a stage reads plus the hashes of its inputs.
    pub fn stage_hash(&self, stage: Stage) -> Result<String> {
        let c = &self.cfg;
        let settings = match stage {
            Stage::Ingest => json!({"source": self.canonical["source"], "target": self.canonical["target"]}),
            Stage::Split => json!({"boundary": c.split.boundary.seconds()?, "valid_fraction": c.split.valid_fraction}),
            Stage::Idh => serde_json::to_value(&c.idh)?,
            Stage::Persona => serde_json::to_value(&c.persona)?,
            Stage::Pretrain => json!({"pretrain": c.pretrain, "seeds": c.seeds}),
            Stage::Train => json!({"train": c.train, "seeds": c.seeds, "ks": c.eval.ks}),
            Stage::Eval => json!({"eval": c.eval, "seeds": c.seeds}),
            Stage::Ablate => json!({
                "ablate": c.ablate,
                "seeds": c.ablation_seeds(),
                "pretrain": c.pretrain,
                "train": c.train,
                "eval": c.eval,
            }),
        };
        let deps = stage.deps().iter().map(|d| self.stage_hash(*d)).collect::<Result<Vec<_>>>()?;
        let body = json!({"stage": stage.name(), "settings": settings, "deps": deps});
        Ok(sha256_hex(serde_json::to_string(&body)?.as_bytes()))
    }

    pub fn manifest(&self, stage: Stage) -> Result<Option<StageManifest>> {
        let path = self.stage_dir(stage).join(MANIFEST);
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(read_json(&path)?))
    }

    /// Whether the stage's artifacts exist, match the current settings and
    /// are unmodified.
    pub fn is_complete(&self, stage: Stage) -> Result<bool> {
        let Some(m) = self.manifest(stage)? else {
            return Ok(false);
        };
        if m.stage_hash != self.stage_hash(stage)? {
            return Ok(false);
        }
        let dir = self.stage_dir(stage);
        for (rel, digest) in &m.outputs {
            match std::fs::read(dir.join(rel)) {
                Ok(bytes) if &sha256_hex(&bytes) == digest => {}
                _ => return Ok(false),
            }
        }
        Ok(true)
    }

    /// Runs the requested stages in dependency order. A dependency that is
    /// neither requested nor complete aborts the run before any work.
    pub fn run(&self, stages: &[Stage]) -> Result<Vec<StageStatus>> {
        let wanted: BTreeSet<Stage> = stages.iter().copied().collect();
        for &s in &wanted {
            self.check_dependencies(s, &wanted)?;
        }
        let mut out = Vec::new();
        for s in Stage::ALL.into_iter().filter(|s| wanted.contains(s)) {
            let executed = if self.is_complete(s)? {
                log::info!("stage {s}: up to date");
                false
            } else {
                log::info!("stage {s}: running");
                self.execute(s)?;
                true
            };
            out.push(StageStatus {
                stage: s.name().to_string(),
                executed,
            });
        }
        Ok(out)
    }

    /// Reports the earliest transitive dependency that is missing.
    pub fn check_dependencies(&self, stage: Stage, scheduled: &BTreeSet<Stage>) -> Result<()> {
        for dep in stage.closure() {
            if !scheduled.contains(&dep) && !self.is_complete(dep)? {
                return Err(Error::MissingDependency {
                    stage: stage.name().to_string(),
                    dependency: dep.name().to_string(),
                });
            }
        }
        Ok(())
    }

    fn execute(&self, stage: Stage) -> Result<()> {
        let dir = self.stage_dir(stage);
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::create_dir_all(&dir)?;
        match stage {
            Stage::Ingest => self.ingest(&dir)?,
            Stage::Split => self.split_stage(&dir)?,
            Stage::Idh => self.idh(&dir)?,
            Stage::Persona => {
                for role in Role::BOTH {
                    for step in [PersonaStep::Build, PersonaStep::Generate, PersonaStep::Encode] {
                        self.persona_step(role, step)?;
                    }
                }
            }
            Stage::Pretrain => self.pretrain(&dir)?,
            Stage::Train => self.train(&dir)?,
            Stage::Eval => self.eval(&dir)?,
            Stage::Ablate => {
                let rows = self.ablation_rows()?;
                write_ablation_csv(&dir.join("ablation.csv"), &rows, &self.cfg.eval.ks)?;
            }
        }
        self.write_manifest(stage)
    }

    fn write_manifest(&self, stage: Stage) -> Result<()> {
        let dir = self.stage_dir(stage);
        let mut outputs = BTreeMap::new();
        for rel in list_files(&dir)? {
            if rel != MANIFEST {
                outputs.insert(rel.clone(), sha256_hex(&std::fs::read(dir.join(&rel))?));
            }
        }
        let m = StageManifest {
            stage: stage.name().to_string(),
            config_hash: self.hash.clone(),
            stage_hash: self.stage_hash(stage)?,
            seed: self.cfg.seeds[0],
            seeds: self.cfg.seeds.clone(),
            outputs,
        };
        write_json(&dir.join(MANIFEST), &m)
    }

    fn role_input(&self, role: Role) -> &super::config::DomainInput {
        match role {
            Role::Source => &self.cfg.source,
            Role::Target => &self.cfg.target,
        }
    }

    fn ingest(&self, dir: &Path) -> Result<()> {
        let load = |r: Role| {
            let i = self.role_input(r);
            load_domain(&i.interactions, &i.metadata, &i.name)
        };
        let pair = build_domain_pair(load(Role::Source)?, load(Role::Target)?)?;
        for (role, ds) in [(Role::Source, &pair.source), (Role::Target, &pair.target)] {
            ds.write_jsonl(
                &dir.join(format!("{role}.interactions.jsonl")),
                &dir.join(format!("{role}.meta.jsonl")),
            )?;
        }
        let summary = IngestSummary {
            source: pair.source.domain_id().to_string(),
            target: pair.target.domain_id().to_string(),
            source_users: pair.source.users().len(),
            target_users: pair.target.users().len(),
            source_items: pair.source.items().len(),
            target_items: pair.target.items().len(),
            overlap: pair.overlap.len(),
            overlap_users: pair.overlap.iter().cloned().collect(),
        };
        write_json(&dir.join("overlap.json"), &summary)
    }

    pub fn dataset(&self, role: Role) -> Result<DomainDataset> {
        let dir = self.stage_dir(Stage::Ingest);
        load_domain(
            &dir.join(format!("{role}.interactions.jsonl")),
            &dir.join(format!("{role}.meta.jsonl")),
            &self.role_input(role).name,
        )
    }

    pub fn ingest_summary(&self) -> Result<IngestSummary> {
        read_json(&self.stage_dir(Stage::Ingest).join("overlap.json"))
    }

    fn split_stage(&self, dir: &Path) -> Result<()> {
        let boundary = self.cfg.split.boundary.seconds()?;
        let mut summary = BTreeMap::new();
        for role in Role::BOTH {
            let ds = self.dataset(role)?;
            let split = time_split(&ds, boundary, self.cfg.split.valid_fraction)?;
            summary.insert(
                role.name(),
                json!({
                    "train": split.train.len(),
                    "valid": split.valid.len(),
                    "test": split.test.len(),
                    "dropped": split.dropped,
                }),
            );
            write_json(&dir.join(format!("{role}.json")), &split)?;
        }
        write_json(&dir.join("summary.json"), &summary)
    }

    pub fn split(&self, role: Role) -> Result<SplitBundle> {
        read_json(&self.stage_dir(Stage::Split).join(format!("{role}.json")))
    }

    /// The domain restricted to its train interactions.
    pub fn train_dataset(&self, role: Role) -> Result<DomainDataset> {
        self.dataset(role)?.with_interactions(self.split(role)?.train)
    }

    fn idh(&self, dir: &Path) -> Result<()> {
        for role in Role::BOTH {
            self.idh_report(role, &dir.join(role.name()))?;
        }
        Ok(())
    }

    /// Preservation reports of one domain's train history, one CSV per
    /// configured criterion and label.
    pub fn idh_report(&self, role: Role, out: &Path) -> Result<Vec<PathBuf>> {
        let train = self.train_dataset(role)?;
        let analysis = IdhAnalysis::run(&train, &self.cfg.idh.criteria)?;
        let mut matrices = Vec::new();
        for &c in &self.cfg.idh.criteria {
            for &g in &self.cfg.idh.labels {
                matrices.push(preservation_matrix(analysis.labels_for(c)?, c, g));
            }
        }
        export_idh_report(&matrices, out)
    }

    /// Accepts `source`, `target` or either configured domain name.
    pub fn role_of(&self, domain: &str) -> Result<Role> {
        for role in Role::BOTH {
            if domain.eq_ignore_ascii_case(role.name()) || domain.eq_ignore_ascii_case(&self.role_input(role).name) {
                return Ok(role);
            }
        }
        Err(Error::Unknown {
            kind: "domain",
            name: domain.to_string(),
        })
    }

    fn persona_dir(&self, role: Role) -> PathBuf {
        self.stage_dir(Stage::Persona).join(role.name())
    }

    fn cache(&self) -> Cache {
        Cache::new(&self.cfg.cache_dir)
    }

    fn generator(&self) -> Result<Box<dyn GeneratorClient>> {
        Ok(match self.cfg.persona.client {
            ClientMode::Offline => Box::new(OfflineGenerator::default()),
            ClientMode::Remote => Box::new(RemoteGenerator::new(self.cfg.persona.remote.clone())?),
        })
    }

    fn encoders(&self) -> Result<(Box<dyn EncoderClient>, Box<dyn EncoderClient>)> {
        let p = &self.cfg.persona;
        Ok(match p.client {
            ClientMode::Offline => (
                Box::new(HashingEncoder::new(p.persona_dim, p.encoder_seed)?),
                Box::new(HashingEncoder::new(p.item_dim, p.encoder_seed)?),
            ),
            ClientMode::Remote => (
                Box::new(RemoteEncoder::new(p.remote.clone(), p.persona_dim)?),
                Box::new(RemoteEncoder::new(p.remote.clone(), p.item_dim)?),
            ),
        })
    }

    /// Remote calls are bounded by the configured parallelism; offline
    /// work uses the global pool.
    fn with_pool<T: Send>(&self, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
        match self.cfg.persona.client {
            ClientMode::Offline => f(),
            ClientMode::Remote => rayon::ThreadPoolBuilder::new()
                .num_threads(self.cfg.persona.remote.parallelism.max(1))
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?
                .install(f),
        }
    }

    /// Runs one persona sub-step for one domain. Each step reads the
    /// artifacts of the previous one.
    pub fn persona_step(&self, role: Role, step: PersonaStep) -> Result<()> {
        for dep in Stage::Persona.closure() {
            if !self.is_complete(dep)? {
                return Err(Error::MissingDependency {
                    stage: Stage::Persona.name().into(),
                    dependency: dep.name().into(),
                });
            }
        }
        let dir = self.persona_dir(role);
        std::fs::create_dir_all(&dir)?;
        let train = self.train_dataset(role)?;
        let need = |file: &str, producer: &str| -> Result<PathBuf> {
            let p = dir.join(file);
            if p.exists() {
                Ok(p)
            } else {
                Err(Error::MissingDependency {
                    stage: format!("persona {}", step.name()),
                    dependency: format!("persona {producer}"),
                })
            }
        };
        match step {
            PersonaStep::Build => {
                let (_, dbs) = persona_dbs(&train)?;
                write_jsonl(&dir.join("dbs.jsonl"), &dbs)
            }
            PersonaStep::Generate => {
                let dbs: Vec<PersonaDb> = read_jsonl(&need("dbs.jsonl", "build")?)?;
                let idh = IdhAnalysis::run(&train, &ItemCriterion::ALL)?;
                let generator = self.generator()?;
                let cache = self.cache();
                let (description, texts) =
                    self.with_pool(|| persona_texts(&train, &idh, &dbs, generator.as_ref(), Some(&cache)))?;
                write_json(&dir.join("description.json"), &json!({ "description": description }))?;
                write_jsonl(&dir.join("personas.jsonl"), &texts)
            }
            PersonaStep::Encode => {
                let texts: Vec<PersonaText> = read_jsonl(&need("personas.jsonl", "generate")?)?;
                let desc: Value = read_json(&need("description.json", "generate")?)?;
                let description = desc["description"]
                    .as_str()
                    .ok_or_else(|| Error::Config("description.json lacks a description".into()))?;
                let (pe, ie) = self.encoders()?;
                let encoders = Encoders {
                    persona: pe.as_ref(),
                    item: ie.as_ref(),
                };
                let cache = self.cache();
                let (personas, semantics) =
                    persona_vectors(&train, &texts, description, encoders, Some(&cache), self.cfg.persona.chunk)?;
                save_vectors(
                    &dir.join("vectors.ckpt"),
                    &personas,
                    &semantics,
                    self.cfg.persona.encoder_seed,
                    &self.hash,
                )
            }
        }
    }

    pub fn domain_side(&self, role: Role) -> Result<DomainSide> {
        let (personas, semantics) = load_vectors(&self.persona_dir(role).join("vectors.ckpt"))?;
        Ok(DomainSide {
            split: self.split(role)?,
            personas,
            semantics,
        })
    }

    fn pretrain_path(&self, role: Role, seed: u64) -> PathBuf {
        self.stage_dir(Stage::Pretrain).join(format!("{role}.seed{seed}.ckpt"))
    }

    fn pretrain(&self, _dir: &Path) -> Result<()> {
        for role in Role::BOTH {
            self.pretrain_role(role)?;
        }
        Ok(())
    }

    /// Pretrains one domain's ID embeddings for every pipeline seed.
    pub fn pretrain_role(&self, role: Role) -> Result<Vec<PathBuf>> {
        let split = self.split(role)?;
        let dir = self.stage_dir(Stage::Pretrain);
        let mut written = Vec::new();
        for &seed in &self.cfg.seeds {
            let out = pretrain_id_embeddings(&split.train, &split.valid, &self.cfg.pretrain, seed)?;
            let path = self.pretrain_path(role, seed);
            out.table.save(&path, seed, &self.hash)?;
            write_jsonl(&dir.join(format!("{role}.seed{seed}.log.jsonl")), &out.history)?;
            written.push(path);
        }
        Ok(written)
    }

    /// Pretrained ID table of a seed; seeds outside the pipeline seed list
    /// (ablation-only seeds) are pretrained in memory.
    pub fn ids(&self, role: Role, seed: u64) -> Result<IdEmbeddingTable> {
        let path = self.pretrain_path(role, seed);
        if path.exists() {
            return IdEmbeddingTable::load(&path);
        }
        let split = self.split(role)?;
        Ok(pretrain_id_embeddings(&split.train, &split.valid, &self.cfg.pretrain, seed)?.table)
    }

    fn overlap(&self) -> Result<BTreeSet<String>> {
        Ok(self.ingest_summary()?.overlap_users.into_iter().collect())
    }

    pub fn checkpoint_path(&self, role: Role, seed: u64) -> PathBuf {
        self.stage_dir(Stage::Train).join(format!("seed{seed}")).join(format!("{role}.ckpt"))
    }

    fn train(&self, dir: &Path) -> Result<()> {
        let src = self.domain_side(Role::Source)?;
        let tgt = self.domain_side(Role::Target)?;
        let overlap = self.overlap()?;
        for &seed in &self.cfg.seeds {
            let run = run_seed(
                &src,
                &tgt,
                &overlap,
                &self.ids(Role::Source, seed)?,
                &self.ids(Role::Target, seed)?,
                &self.cfg.train,
                seed,
                &self.cfg.eval.ks,
                None,
            )?;
            let seed_dir = dir.join(format!("seed{seed}"));
            for (role, out) in [(Role::Source, &run.source), (Role::Target, &run.target)] {
                checkpoint::save(&self.checkpoint_path(role, seed), &out.model.store.snapshot(), seed, &self.hash)?;
                write_jsonl(&seed_dir.join(format!("{role}.metrics.jsonl")), &out.history)?;
            }
            write_json(
                &seed_dir.join("summary.json"),
                &json!({
                    "seed": seed,
                    "source_best_epoch": run.source.best_epoch,
                    "target_best_epoch": run.target.best_epoch,
                    "target_best_valid_hr5": run.target.best_valid_hr5,
                    "transfer_users": run.target.model.transfer_population(),
                }),
            )?;
        }
        Ok(())
    }

    /// Rebuilds a trained model from its checkpoint.
    pub fn load_model(&self, role: Role, seed: u64, path: &Path) -> Result<MultiTapModel> {
        let side = self.domain_side(role)?;
        let ids = self.ids(role, seed)?;
        let mut model = MultiTapModel::new(
            &side.personas,
            &side.semantics,
            &ids,
            &self.cfg.train,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )?;
        model.load_parameters(&checkpoint::load(path)?)?;
        Ok(model)
    }

    /// Evaluates a checkpoint written by the train stage. The role follows
    /// the file name (`source.ckpt` or `target.ckpt`) and the seed comes
    /// from its manifest.
    pub fn evaluate_checkpoint(&self, path: &Path, heldout: HeldOut, ks: &[usize]) -> Result<EvalResult> {
        let role = match path.file_stem().and_then(|s| s.to_str()) {
            Some("source") => Role::Source,
            _ => Role::Target,
        };
        let seed = checkpoint::load_manifest(path)?.seed;
        let model = self.load_model(role, seed, path)?;
        let split = self.split(role)?;
        let (seen, events) = match heldout {
            HeldOut::Valid => (split.train.clone(), &split.valid),
            HeldOut::Test => (train_plus_valid(&split), &split.test),
        };
        evaluate_with(&model, &seen, events, ks, self.cfg.eval.averaging)
    }

    fn eval(&self, dir: &Path) -> Result<()> {
        let mut per_seed = Vec::new();
        for &seed in &self.cfg.seeds {
            let res = self.evaluate_checkpoint(&self.checkpoint_path(Role::Target, seed), HeldOut::Test, &self.cfg.eval.ks)?;
            write_json(&dir.join(format!("seed{seed}.json")), &res)?;
            per_seed.push(res);
        }
        write_json(&dir.join("report.json"), &aggregate_seeds(&per_seed))
    }

    pub fn report(&self) -> Result<Vec<MetricReport>> {
        read_json(&self.stage_dir(Stage::Eval).join("report.json"))
    }

    /// Runs every configured ablation grid. Source models depend only on
    /// the aggregation mode and seed, so they are trained once per pair.
    pub fn ablation_rows(&self) -> Result<Vec<AblationRow>> {
        let c = &self.cfg;
        let seeds = c.ablation_seeds();
        let mut runs: Vec<(String, String, String, TrainConfig)> = Vec::new();
        for &a in &c.ablate.aggregations {
            let cfg = TrainConfig {
                aggregation: a,
                ..c.train.clone()
            };
            runs.push(("aggregation".into(), "aggregation".into(), a.name().into(), cfg));
        }
        for &t in &c.ablate.transfers {
            let cfg = TrainConfig {
                transfer: t,
                ..c.train.clone()
            };
            runs.push(("transfer".into(), "transfer".into(), t.name().into(), cfg));
        }
        for spec in &c.ablate.sweeps {
            let sweep = parse_sweep(spec)?;
            for &v in &sweep.values {
                let mut cfg = c.train.clone();
                sweep.param.apply(&mut cfg, v);
                runs.push(("sweep".into(), sweep.param.name().into(), v.to_string(), cfg));
            }
        }

        let src = self.domain_side(Role::Source)?;
        let tgt = self.domain_side(Role::Target)?;
        let overlap = self.overlap()?;
        let mut ids: BTreeMap<u64, (IdEmbeddingTable, IdEmbeddingTable)> = BTreeMap::new();
        for &seed in &seeds {
            ids.insert(seed, (self.ids(Role::Source, seed)?, self.ids(Role::Target, seed)?));
        }
        let mut sources: BTreeMap<(AggregationMode, u64), TrainOutcome> = BTreeMap::new();
        let mut rows = Vec::new();
        for (grid, parameter, value, cfg) in runs {
            log::info!("ablation {grid} {parameter}={value}");
            let mut results = Vec::new();
            for &seed in &seeds {
                let (sid, tid) = &ids[&seed];
                let key = (cfg.aggregation, seed);
                if let Entry::Vacant(slot) = sources.entry(key) {
                    slot.insert(train_source(&src.personas, &src.semantics, sid, &src.split.train, &src.split.valid, &cfg, seed)?);
                }
                let run = run_seed(&src, &tgt, &overlap, sid, tid, &cfg, seed, &c.eval.ks, Some(sources[&key].clone()))?;
                results.push(run.test);
            }
            rows.push(AblationRow {
                grid,
                parameter,
                value,
                seeds: seeds.clone(),
                report: aggregate_seeds(&results),
            });
        }
        Ok(rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeldOut {
    Valid,
    Test,
}

impl FromStr for HeldOut {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valid" => Ok(HeldOut::Valid),
            "test" => Ok(HeldOut::Test),
            _ => Err(Error::Unknown {
                kind: "split",
                name: s.to_string(),
            }),
        }
    }
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow], ks: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["grid".to_string(), "parameter".into(), "value".into(), "seeds".into()];
    for k in ks {
        for m in ["hr", "ndcg"] {
            header.push(format!("{m}@{k}_mean"));
            header.push(format!("{m}@{k}_std"));
        }
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.grid.clone(),
            r.parameter.clone(),
            r.value.clone(),
            r.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" "),
        ];
        for &k in ks {
            for m in ["HR", "NDCG"] {
                let row = r.report.iter().find(|x| x.metric == m && x.k == k);
                rec.push(row.map_or(String::new(), |x| x.mean.to_string()));
                rec.push(row.map_or(String::new(), |x| x.std.to_string()));
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Persona rows are stored as `persona.<user>` with one row per criterion
/// in [`Criterion::ALL`] order; item rows as `item.<item>`.
pub fn save_vectors(
    path: &Path,
    personas: &BTreeMap<String, PersonaEmbeddingSet>,
    semantics: &BTreeMap<String, Vec<f64>>,
    seed: u64,
    config_hash: &str,
) -> Result<()> {
    let mut tensors = BTreeMap::new();
    for (user, set) in personas {
        let rows: Vec<Vec<f64>> = Criterion::ALL
            .iter()
            .map(|c| {
                set.vectors
                    .get(c)
                    .cloned()
                    .ok_or_else(|| Error::MissingCriterion(c.code().to_string()))
            })
            .collect::<Result<_>>()?;
        tensors.insert(format!("persona.{user}"), Tensor::from_rows(&rows)?);
    }
    for (item, v) in semantics {
        tensors.insert(format!("item.{item}"), Tensor::new(vec![v.len()], v.clone())?);
    }
    checkpoint::save(path, &tensors, seed, config_hash)?;
    Ok(())
}

pub fn load_vectors(path: &Path) -> Result<PersonaVectors> {
    let mut personas = BTreeMap::new();
    let mut semantics = BTreeMap::new();
    for (name, t) in checkpoint::load(path)? {
        if let Some(user) = name.strip_prefix("persona.") {
            if t.rows() != Criterion::ALL.len() {
                return Err(Error::Checkpoint(format!("{name}: expected {} rows", Criterion::ALL.len())));
            }
            let vectors = Criterion::ALL
                .iter()
                .enumerate()
                .map(|(k, c)| (*c, t.row(k).to_vec()))
                .collect();
            personas.insert(
                user.to_string(),
                PersonaEmbeddingSet {
                    user_id: user.to_string(),
                    vectors,
                    dim: t.cols(),
                },
            );
        } else if let Some(item) = name.strip_prefix("item.") {
            semantics.insert(item.to_string(), t.data().to_vec());
        } else {
            return Err(Error::Checkpoint(format!("unexpected tensor `{name}`")));
        }
    }
    Ok((personas, semantics))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    checkpoint::write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Files under `dir`, relative and `/`-separated, sorted.
fn list_files(dir: &Path) -> Result<Vec<String>> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(base, &path, out)?;
            } else {
                let rel = path.strip_prefix(base).expect("walk stays under base");
                let parts: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
                out.push(parts.join("/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}
