use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{MultiTapModel, SourceReps, Triple};
use super::{TrainConfig, TransferMode};
use crate::corpus::InteractionRecord;
use crate::diffkit::{adam_step, AdamConfig};
use crate::error::{Error, Result};
use crate::eval::{full_ranking_eval, Averaging, Catalog, EvalResult};
use crate::gcn::{sample_negative, IdEmbeddingTable};
use crate::persona::PersonaEmbeddingSet;

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_rec: f64,
    pub l_dpl: f64,
    pub valid_hr5: f64,
    pub valid_ndcg5: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters restored to the best validation epoch.
    pub model: MultiTapModel,
    pub best_epoch: usize,
    pub best_valid_hr5: f64,
    pub history: Vec<EpochRecord>,
}

/// Full-ranking metrics of `model` on `heldout`, excluding train items,
/// averaged per held-out interaction.
pub fn evaluate(
    model: &MultiTapModel,
    train: &[InteractionRecord],
    heldout: &[InteractionRecord],
    ks: &[usize],
) -> Result<EvalResult> {
    evaluate_with(model, train, heldout, ks, Averaging::PerInteraction)
}

pub fn evaluate_with(
    model: &MultiTapModel,
    train: &[InteractionRecord],
    heldout: &[InteractionRecord],
    ks: &[usize],
    averaging: Averaging,
) -> Result<EvalResult> {
    let scorer = model.scorer()?;
    let catalog = Catalog::new(model.items().iter().cloned());
    let mut seen: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for r in train {
        seen.entry(r.user.clone()).or_default().insert(r.item.clone());
    }
    full_ranking_eval(
        |u| scorer.scores(u),
        &catalog,
        heldout,
        &seen,
        ks,
        averaging,
    )
}

/// Runs Adam over shuffled positive pairs with uniform negatives, keeping
/// the parameters of the best validation epoch.
pub fn train_model(
    mut model: MultiTapModel,
    train: &[InteractionRecord],
    valid: &[InteractionRecord],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let adam = AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    adam.validate()?;

    let mut pairs = BTreeSet::new();
    let mut dropped = 0usize;
    for r in train {
        match (model.user_idx(&r.user), model.item_idx(&r.item)) {
            (Some(u), Some(i)) => {
                pairs.insert((u, i));
            }
            _ => dropped += 1,
        }
    }
    if dropped > 0 {
        log::warn!("{dropped} train events reference users or items unknown to the model");
    }
    if pairs.is_empty() {
        return Err(Error::EmptyInput("no trainable positive pairs".into()));
    }
    let mut seen: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); model.users().len()];
    for &(u, i) in &pairs {
        seen[u].insert(i);
    }
    let n_items = model.items().len();
    let mut order: Vec<(usize, usize)> = pairs.into_iter().collect();

    let mut best = (0usize, f64::NEG_INFINITY, model.store.snapshot());
    let mut history = Vec::new();
    let mut since_best = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        let (mut rec_sum, mut dpl_sum, mut batches, mut dpl_batches) = (0.0, 0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut triples: Vec<Triple> = Vec::with_capacity(chunk.len() * cfg.negatives);
            for &(u, i) in chunk {
                for _ in 0..cfg.negatives {
                    if let Some(j) = sample_negative(rng, n_items, &seen[u]) {
                        triples.push((u, i, j));
                    }
                }
            }
            if triples.is_empty() {
                continue;
            }
            let parts = model.loss_and_grad(&triples, cfg.transfer, cfg.lambda, cfg.tau, Some((cfg.dropout, &mut *rng)))?;
            if !parts.total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    loss: parts.total,
                });
            }
            rec_sum += parts.rec;
            batches += 1;
            if parts.anchors >= 2 {
                dpl_sum += parts.dpl;
                dpl_batches += 1;
            }
            adam_step(&mut model.store, &adam)?;
        }
        let metrics = if valid.is_empty() {
            None
        } else {
            Some(evaluate(&model, train, valid, &[5])?)
        };
        let rec = EpochRecord {
            epoch,
            l_rec: rec_sum / batches.max(1) as f64,
            l_dpl: dpl_sum / dpl_batches.max(1) as f64,
            valid_hr5: metrics.as_ref().map_or(0.0, |m| m.hr_at(5)),
            valid_ndcg5: metrics.as_ref().map_or(0.0, |m| m.ndcg_at(5)),
        };
        log::debug!(
            "epoch {epoch}: L_rec {:.5} L_dpl {:.5} valid HR@5 {:.4}",
            rec.l_rec,
            rec.l_dpl,
            rec.valid_hr5
        );
        let hr = rec.valid_hr5;
        history.push(rec);
        // Without validation events the last epoch is kept.
        if hr > best.1 || valid.is_empty() {
            best = (epoch, hr, model.store.snapshot());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    model.store.restore(&best.2);
    Ok(TrainOutcome {
        model,
        best_epoch: best.0,
        best_valid_hr5: best.1,
        history,
    })
}

/// Source-side prerequisite: the same network trained alone on the source
/// domain, with no transfer term.
pub fn train_source(
    personas: &BTreeMap<String, PersonaEmbeddingSet>,
    item_semantics: &BTreeMap<String, Vec<f64>>,
    ids: &IdEmbeddingTable,
    train: &[InteractionRecord],
    valid: &[InteractionRecord],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        transfer: TransferMode::None,
        lambda: 0.0,
        ..cfg.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = MultiTapModel::new(personas, item_semantics, ids, &cfg, &mut rng)?;
    train_model(model, train, valid, &cfg, &mut rng)
}

/// Target training with the contrastive term against frozen source rows.
/// Transfer with `lambda > 0` needs at least one linked overlapping user.
#[allow(clippy::too_many_arguments)]
pub fn train_target(
    personas: &BTreeMap<String, PersonaEmbeddingSet>,
    item_semantics: &BTreeMap<String, Vec<f64>>,
    ids: &IdEmbeddingTable,
    source: Option<&SourceReps>,
    train: &[InteractionRecord],
    valid: &[InteractionRecord],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = MultiTapModel::new(personas, item_semantics, ids, cfg, &mut rng)?;
    let wants_transfer = cfg.transfer != TransferMode::None && cfg.lambda > 0.0;
    let linked = match source {
        Some(s) => model.attach_source(s)?,
        None => 0,
    };
    if wants_transfer && linked == 0 {
        return Err(Error::EmptyInput(
            "no overlapping users link the target model to source representations".into(),
        ));
    }
    train_model(model, train, valid, cfg, &mut rng)
}
