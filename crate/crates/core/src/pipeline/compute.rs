//! In-memory building blocks shared by the stages and the acceptance suite.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::corpus::{DomainDataset, InteractionRecord, SplitBundle};
use crate::error::{Error, Result};
use crate::eval::EvalResult;
use crate::gcn::{pretrain_id_embeddings, GcnConfig, IdEmbeddingTable};
use crate::idh::{IdhAnalysis, ItemCriterion};
use crate::model::{evaluate, train_source, train_target, TrainConfig, TrainOutcome};
use crate::persona::prompt::build_persona_request;
use crate::persona::{
    build_domain_description, build_persona_dbs, encode_item_semantics, encode_personas, generate_personas, Cache,
    EncoderClient, GeneratorClient, PersonaDb, PersonaEmbeddingSet, PersonaText, PromptAssets,
};

/// Personas and item semantics of one domain, built from its train history.
#[derive(Debug, Clone)]
pub struct PersonaLayer {
    pub description: String,
    pub dbs: Vec<PersonaDb>,
    pub texts: Vec<PersonaText>,
    pub personas: BTreeMap<String, PersonaEmbeddingSet>,
    pub semantics: BTreeMap<String, Vec<f64>>,
}

/// Step one of the persona layer: IDH labels and the persona databases.
pub fn persona_dbs(train: &DomainDataset) -> Result<(IdhAnalysis, Vec<PersonaDb>)> {
    let idh = IdhAnalysis::run(train, &ItemCriterion::ALL)?;
    let dbs = build_persona_dbs(train, &idh)?;
    Ok((idh, dbs))
}

/// Step two: the domain description and the per-user persona texts.
/// Generator calls run in parallel and are collected in user order.
pub fn persona_texts(
    train: &DomainDataset,
    idh: &IdhAnalysis,
    dbs: &[PersonaDb],
    generator: &dyn GeneratorClient,
    cache: Option<&Cache>,
) -> Result<(String, Vec<PersonaText>)> {
    let (description, config_texts) = build_domain_description(train, generator, cache)?;
    let assets = PromptAssets::new(train, description.clone(), config_texts);
    let texts = dbs
        .par_iter()
        .map(|db| {
            let req = build_persona_request(db, train, idh, &description)?;
            generate_personas(&req, &assets, generator, cache)
        })
        .collect::<Result<_>>()?;
    Ok((description, texts))
}

/// Step three: persona vectors keyed by user and item semantic vectors.
pub fn persona_vectors(
    train: &DomainDataset,
    texts: &[PersonaText],
    description: &str,
    encoders: Encoders<'_>,
    cache: Option<&Cache>,
    chunk: usize,
) -> Result<PersonaVectors> {
    let personas = encode_personas(texts, encoders.persona, cache, chunk)?
        .into_iter()
        .map(|p| (p.user_id.clone(), p))
        .collect();
    let items: Vec<_> = train.items().values().collect();
    let semantics = encode_item_semantics(&items, description, encoders.item, cache, chunk)?;
    Ok((personas, semantics))
}

/// Persona texts and item texts may use encoders of different widths.
#[derive(Clone, Copy)]
pub struct Encoders<'a> {
    pub persona: &'a dyn EncoderClient,
    pub item: &'a dyn EncoderClient,
}

pub type PersonaVectors = (BTreeMap<String, PersonaEmbeddingSet>, BTreeMap<String, Vec<f64>>);

/// All three persona steps in one call.
pub fn build_persona_layer(
    train: &DomainDataset,
    generator: &dyn GeneratorClient,
    encoders: Encoders<'_>,
    cache: Option<&Cache>,
    chunk: usize,
) -> Result<PersonaLayer> {
    let (idh, dbs) = persona_dbs(train)?;
    let (description, texts) = persona_texts(train, &idh, &dbs, generator, cache)?;
    let (personas, semantics) = persona_vectors(train, &texts, &description, encoders, cache, chunk)?;
    Ok(PersonaLayer {
        description,
        dbs,
        texts,
        personas,
        semantics,
    })
}

/// One domain after splitting and persona encoding.
#[derive(Debug, Clone)]
pub struct DomainSide {
    pub split: SplitBundle,
    pub personas: BTreeMap<String, PersonaEmbeddingSet>,
    pub semantics: BTreeMap<String, Vec<f64>>,
}

impl DomainSide {
    pub fn pretrain(&self, cfg: &GcnConfig, seed: u64) -> Result<IdEmbeddingTable> {
        Ok(pretrain_id_embeddings(&self.split.train, &self.split.valid, cfg, seed)?.table)
    }
}

/// Everything one seed produces.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub source: TrainOutcome,
    pub target: TrainOutcome,
    pub test: EvalResult,
}

/// Overlapping users that both trained models know, ascending.
pub fn transfer_users(
    overlap: &BTreeSet<String>,
    source: &BTreeMap<String, PersonaEmbeddingSet>,
    target: &BTreeMap<String, PersonaEmbeddingSet>,
) -> Vec<String> {
    overlap
        .iter()
        .filter(|u| source.contains_key(*u) && target.contains_key(*u))
        .cloned()
        .collect()
}

/// Trains the source model (reused when given) and then the target model,
/// and evaluates the target on its test split.
#[allow(clippy::too_many_arguments)]
pub fn run_seed(
    source: &DomainSide,
    target: &DomainSide,
    overlap: &BTreeSet<String>,
    source_ids: &IdEmbeddingTable,
    target_ids: &IdEmbeddingTable,
    cfg: &TrainConfig,
    seed: u64,
    ks: &[usize],
    trained_source: Option<TrainOutcome>,
) -> Result<SeedRun> {
    let src = match trained_source {
        Some(s) => s,
        None => train_source(
            &source.personas,
            &source.semantics,
            source_ids,
            &source.split.train,
            &source.split.valid,
            cfg,
            seed,
        )?,
    };
    let users = transfer_users(overlap, &source.personas, &target.personas);
    if users.is_empty() && cfg.lambda > 0.0 && cfg.transfer != crate::model::TransferMode::None {
        return Err(Error::EmptyInput("no overlapping users with personas in both domains".into()));
    }
    let reps = src.model.source_reps(&users)?;
    let tgt = train_target(
        &target.personas,
        &target.semantics,
        target_ids,
        Some(&reps),
        &target.split.train,
        &target.split.valid,
        cfg,
        seed,
    )?;
    let test = evaluate(&tgt.model, &train_plus_valid(&target.split), &target.split.test, ks)?;
    Ok(SeedRun {
        source: src,
        target: tgt,
        test,
    })
}

/// Items seen before the test events: train and validation history.
pub fn train_plus_valid(split: &SplitBundle) -> Vec<InteractionRecord> {
    split.train.iter().chain(&split.valid).cloned().collect()
}
