//! Helpers shared by the integration tests: a brute-force IDH oracle over
//! raw events, a seeded random corpus and the four-user training toy.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use multitap::corpus::{DomainDataset, InteractionRecord, ItemMeta};
use multitap::diffkit::Tensor;
use multitap::gcn::IdEmbeddingTable;
use multitap::idh::ItemCriterion;
use multitap::model::{AggregationMode, SourceReps, TrainConfig, TransferMode, Triple};
use multitap::persona::{Criterion, PersonaEmbeddingSet};
use multitap::quantile::OrdinalLabel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random catalog and event log. Prices, ratings and counts come from
/// small grids so ties are common; a few items have no price, and some
/// (user, item) pairs repeat at later timestamps.
pub fn random_corpus(seed: u64, users: usize, categories: usize, per_category: usize, events: usize) -> DomainDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::new();
    for c in 0..categories {
        for k in 0..per_category {
            items.push(ItemMeta {
                item: format!("c{c}i{k:02}"),
                title: format!("item {k}"),
                category: format!("cat{c}"),
                price: rng.random_bool(0.9).then(|| 5.0 * rng.random_range(1..7) as f64),
                avg_rating: 0.5 * rng.random_range(2..11) as f64,
                rating_count: rng.random_range(0..40),
                description: None,
            });
        }
    }
    let mut log = Vec::with_capacity(events);
    for t in 0..events {
        let item = if t > 0 && rng.random_bool(0.1) {
            // Repeat an earlier purchase of some user.
            let prev: &InteractionRecord = &log[rng.random_range(0..log.len())];
            prev.clone()
        } else {
            InteractionRecord {
                user: format!("u{:03}", rng.random_range(0..users)),
                item: items[rng.random_range(0..items.len())].item.clone(),
                rating: 4.0,
                ts: 0,
            }
        };
        log.push(InteractionRecord { ts: t as i64, ..item });
    }
    DomainDataset::new("Oracle", log, items).expect("valid corpus")
}

/// Values at 1-based ranks `ceil(N/3)` and `ceil(2N/3)` of the sorted values.
fn tertile_cuts(values: &[f64]) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    (v[n.div_ceil(3) - 1], v[(2 * n).div_ceil(3) - 1])
}

fn tertile_bin(x: f64, (lo, hi): (f64, f64)) -> u8 {
    match x {
        x if x < lo => 1,
        x if x < hi => 2,
        _ => 3,
    }
}

#[derive(Debug, Default)]
pub struct IdhOracle {
    /// (criterion, category) -> cut points.
    pub cuts: BTreeMap<(ItemCriterion, String), (f64, f64)>,
    /// (criterion, item) -> bin.
    pub bins: BTreeMap<(ItemCriterion, String), u8>,
    /// (criterion, category, user) -> mean bin.
    pub scores: BTreeMap<(ItemCriterion, String, String), f64>,
    pub labels: BTreeMap<(ItemCriterion, String, String), OrdinalLabel>,
    /// (criterion, label, base, compared) -> (kept, support).
    pub cells: BTreeMap<(ItemCriterion, OrdinalLabel, String, String), (usize, usize)>,
}

/// Recomputes every IDH quantity from the raw event log and catalog. A
/// repeated purchase counts once toward a user's item set.
pub fn idh_oracle(ds: &DomainDataset) -> IdhOracle {
    let mut out = IdhOracle::default();
    let catalog: Vec<&ItemMeta> = ds.items().values().collect();
    let cats: BTreeSet<&str> = catalog.iter().map(|m| m.category.as_str()).collect();
    let mut bought: BTreeMap<(&str, &str), BTreeSet<&str>> = BTreeMap::new();
    for r in ds.interactions() {
        let cat = ds.items()[&r.item].category.as_str();
        bought.entry((r.user.as_str(), cat)).or_default().insert(r.item.as_str());
    }
    for crit in ItemCriterion::ALL {
        for &cat in &cats {
            let valued: Vec<(&str, f64)> = catalog
                .iter()
                .filter(|m| m.category == cat)
                .filter_map(|m| crit.value(m).map(|v| (m.item.as_str(), v)))
                .collect();
            if valued.is_empty() {
                continue;
            }
            let cuts = tertile_cuts(&valued.iter().map(|p| p.1).collect::<Vec<_>>());
            out.cuts.insert((crit, cat.to_string()), cuts);
            for (item, v) in valued {
                out.bins.insert((crit, item.to_string()), tertile_bin(v, cuts));
            }
        }
        for (&(user, cat), items) in &bought {
            let bins: Vec<u8> = items.iter().filter_map(|i| out.bins.get(&(crit, i.to_string())).copied()).collect();
            if bins.is_empty() {
                continue;
            }
            let mean = bins.iter().map(|&b| u32::from(b)).sum::<u32>() as f64 / bins.len() as f64;
            out.scores.insert((crit, cat.to_string(), user.to_string()), mean);
        }
        for &cat in &cats {
            let users: Vec<(&String, f64)> = out
                .scores
                .iter()
                .filter(|((c, k, _), _)| *c == crit && k == cat)
                .map(|((_, _, u), &s)| (u, s))
                .collect();
            if users.is_empty() {
                continue;
            }
            let cuts = tertile_cuts(&users.iter().map(|p| p.1).collect::<Vec<_>>());
            let labels: Vec<_> = users
                .into_iter()
                .map(|(u, s)| {
                    let label = [OrdinalLabel::Low, OrdinalLabel::Medium, OrdinalLabel::High][tertile_bin(s, cuts) as usize - 1];
                    ((crit, cat.to_string(), u.clone()), label)
                })
                .collect();
            out.labels.extend(labels);
        }
        let labeled: BTreeSet<&str> = out
            .labels
            .keys()
            .filter(|(c, _, _)| *c == crit)
            .map(|(_, k, _)| k.as_str())
            .collect();
        let users: BTreeSet<&str> = bought.keys().map(|(u, _)| *u).collect();
        for g in [OrdinalLabel::Low, OrdinalLabel::Medium, OrdinalLabel::High] {
            for &base in &labeled {
                for &cmp in &labeled {
                    let (mut kept, mut support) = (0, 0);
                    for &u in &users {
                        let lb = out.labels.get(&(crit, base.to_string(), u.to_string()));
                        let lc = out.labels.get(&(crit, cmp.to_string(), u.to_string()));
                        if let (Some(&lb), Some(&lc)) = (lb, lc) {
                            if lb == g {
                                support += 1;
                                kept += usize::from(lc == g);
                            }
                        }
                    }
                    out.cells.insert((crit, g, base.to_string(), cmp.to_string()), (kept, support));
                }
            }
        }
    }
    out
}

pub struct Toy {
    pub personas: BTreeMap<String, PersonaEmbeddingSet>,
    pub semantics: BTreeMap<String, Vec<f64>>,
    pub ids: IdEmbeddingTable,
    pub source: SourceReps,
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Four users and six items with persona width 4, semantic width 3 and ID
/// width 3; every user also has source rows.
pub fn toy(seed: u64) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users: Vec<String> = (0..4).map(|u| format!("u{u}")).collect();
    let items: Vec<String> = (0..6).map(|i| format!("i{i}")).collect();
    let personas = users
        .iter()
        .map(|u| {
            let set = PersonaEmbeddingSet {
                user_id: u.clone(),
                vectors: Criterion::ALL.iter().map(|c| (*c, rand_vec(&mut rng, 4))).collect(),
                dim: 4,
            };
            (u.clone(), set)
        })
        .collect();
    let semantics = items.iter().map(|i| (i.clone(), rand_vec(&mut rng, 3))).collect();
    let ids = IdEmbeddingTable {
        users: users.clone(),
        items: items.clone(),
        user: Tensor::randn(&[4, 3], 0.5, &mut rng),
        item: Tensor::randn(&[6, 3], 0.5, &mut rng),
    };
    let source = SourceReps {
        users: users.clone(),
        h: Tensor::randn(&[4, 4], 0.5, &mut rng),
        v: Tensor::randn(&[4, 3], 0.5, &mut rng),
    };
    Toy {
        personas,
        semantics,
        ids,
        source,
    }
}

/// Dropout off so the loss is a deterministic function of the parameters.
pub fn toy_cfg(aggregation: AggregationMode, transfer: TransferMode) -> TrainConfig {
    TrainConfig {
        aggregation,
        transfer,
        fusion_dim: 5,
        init_std: 0.5,
        dropout: 0.0,
        ..TrainConfig::default()
    }
}

pub const TOY_TRIPLES: [Triple; 6] = [(0, 0, 1), (1, 2, 3), (2, 4, 5), (3, 1, 0), (0, 3, 5), (2, 2, 1)];
