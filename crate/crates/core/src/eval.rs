//! Full-ranking top-K evaluation.
//!
//! Every catalog item the user has not interacted with in train is a
//! candidate. The catalog is held in ascending item-id order so that ties
//! are broken toward the smaller id by index comparison.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::InteractionRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    #[default]
    PerInteraction,
    PerUser,
}

/// 1-based rank of `positive` among the non-excluded entries of `scores`.
/// Higher scores rank first; equal scores rank the smaller index first.
pub fn rank_of(scores: &[f64], positive: usize, excluded: &BTreeSet<usize>) -> usize {
    let s = scores[positive];
    1 + scores
        .iter()
        .enumerate()
        .filter(|(j, &v)| *j != positive && !excluded.contains(j) && (v > s || (v == s && *j < positive)))
        .count()
}

pub fn hit_at(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Ranking metrics of one model on one held-out split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub units: usize,
    /// Held-out events not evaluated: unknown user, item outside the
    /// catalog, item already seen in train, or no candidates.
    pub skipped: usize,
}

impl EvalResult {
    pub fn hr_at(&self, k: usize) -> f64 {
        self.hr.get(&k).copied().unwrap_or(0.0)
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.ndcg.get(&k).copied().unwrap_or(0.0)
    }
}

/// Catalog of candidate items, sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    items: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Catalog {
    pub fn new(items: impl IntoIterator<Item = String>) -> Self {
        let set: BTreeSet<String> = items.into_iter().collect();
        let items: Vec<String> = set.into_iter().collect();
        let index = items.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Self { items, index }
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn index(&self, item: &str) -> Option<usize> {
        self.index.get(item).copied()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Scores every held-out event. `score_all(user)` returns one score per
/// catalog item in catalog order, or `None` when the model cannot score
/// the user. `seen` holds each user's train items.
pub fn full_ranking_eval<F>(
    score_all: F,
    catalog: &Catalog,
    heldout: &[InteractionRecord],
    seen: &BTreeMap<String, BTreeSet<String>>,
    ks: &[usize],
    averaging: Averaging,
) -> Result<EvalResult>
where
    F: Fn(&str) -> Option<Vec<f64>> + Sync,
{
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("cutoffs must be a nonempty list of positive K".into()));
    }
    let mut by_user: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in heldout {
        by_user.entry(&r.user).or_default().push(&r.item);
    }
    let users: Vec<(&str, Vec<&str>)> = by_user.into_iter().collect();
    let empty = BTreeSet::new();

    // Per user: the ranks of evaluable positives and the skip count.
    let per_user: Vec<(Vec<usize>, usize)> = users
        .par_iter()
        .map(|(user, items)| {
            let seen_items = seen.get(*user).unwrap_or(&empty);
            let excluded: BTreeSet<usize> = seen_items.iter().filter_map(|i| catalog.index(i)).collect();
            if excluded.len() >= catalog.len() {
                return (Vec::new(), items.len());
            }
            let Some(scores) = score_all(user) else {
                return (Vec::new(), items.len());
            };
            let mut ranks = Vec::new();
            let mut skipped = 0;
            for item in items {
                match catalog.index(item) {
                    Some(p) if !excluded.contains(&p) => ranks.push(rank_of(&scores, p, &excluded)),
                    _ => skipped += 1,
                }
            }
            (ranks, skipped)
        })
        .collect();

    let mut hr: BTreeMap<usize, f64> = ks.iter().map(|&k| (k, 0.0)).collect();
    let mut ndcg = hr.clone();
    let mut units = 0usize;
    let mut weight_total = 0.0;
    let mut skipped = 0usize;
    for (ranks, s) in &per_user {
        skipped += s;
        if ranks.is_empty() {
            continue;
        }
        units += ranks.len();
        let w = match averaging {
            Averaging::PerInteraction => 1.0,
            Averaging::PerUser => 1.0 / ranks.len() as f64,
        };
        weight_total += w * ranks.len() as f64;
        for &k in ks {
            *hr.get_mut(&k).expect("k") += w * ranks.iter().map(|&r| hit_at(r, k)).sum::<f64>();
            *ndcg.get_mut(&k).expect("k") += w * ranks.iter().map(|&r| ndcg_at(r, k)).sum::<f64>();
        }
    }
    if skipped > 0 {
        log::warn!("evaluation skipped {skipped} held-out events");
    }
    if weight_total > 0.0 {
        hr.values_mut().for_each(|v| *v /= weight_total);
        ndcg.values_mut().for_each(|v| *v /= weight_total);
    }
    Ok(EvalResult {
        hr,
        ndcg,
        units,
        skipped,
    })
}

/// One row of the multi-seed report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

/// Sample mean and standard deviation (`n - 1` denominator; 0 for one seed).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// HR rows for every K, then NDCG rows, aggregated over the given seeds.
pub fn aggregate_seeds(per_seed: &[EvalResult]) -> Vec<MetricReport> {
    let ks: BTreeSet<usize> = per_seed.iter().flat_map(|r| r.hr.keys().copied()).collect();
    let mut rows = Vec::new();
    for (metric, pick) in [
        ("HR", EvalResult::hr_at as fn(&EvalResult, usize) -> f64),
        ("NDCG", EvalResult::ndcg_at),
    ] {
        for &k in &ks {
            let vals: Vec<f64> = per_seed.iter().map(|r| pick(r, k)).collect();
            let (mean, std) = mean_std(&vals);
            rows.push(MetricReport {
                metric: metric.to_string(),
                k,
                mean,
                std,
                per_seed: vals,
            });
        }
    }
    rows
}

/// Popularity ranking: every user gets the train interaction counts.
pub fn popularity_scores(catalog: &Catalog, train: &[InteractionRecord]) -> Vec<f64> {
    let mut counts = vec![0.0; catalog.len()];
    for r in train {
        if let Some(i) = catalog.index(&r.item) {
            counts[i] += 1.0;
        }
    }
    counts
}
