//! Deterministic planted two-domain corpus.
//!
//! Every item carries a price, quality and popularity tier. Every user has
//! one latent preferred tier per attribute, shared by both domains, and an
//! independent category affinity per domain. A `heterogeneity` share of
//! (user, category) cells redraws the price tier, so preferences are not
//! uniform across categories. The source domain is dense, the target sparse.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DomainDataset, InteractionRecord, ItemMeta};
use crate::error::{Error, Result};

/// Events before this time are training history.
pub const BOUNDARY: i64 = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureConfig {
    pub seed: u64,
    pub overlap_users: usize,
    pub source_only_users: usize,
    pub target_only_users: usize,
    pub items_per_category: usize,
    pub source_events: usize,
    pub target_events: usize,
    /// Post-boundary events per user and domain.
    pub heldout_events: usize,
    pub heterogeneity: f64,
    /// Inverse temperature of the tier-distance choice model.
    pub sharpness: f64,
    pub unpriced_fraction: f64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            overlap_users: 200,
            source_only_users: 40,
            target_only_users: 0,
            items_per_category: 30,
            source_events: 24,
            target_events: 4,
            heldout_events: 2,
            heterogeneity: 0.2,
            sharpness: 2.5,
            unpriced_fraction: 0.05,
        }
    }
}

pub const SOURCE_DOMAIN: &str = "Gadgets";
pub const TARGET_DOMAIN: &str = "Kitchen";
const SOURCE_CATEGORIES: [&str; 4] = ["Audio", "Cameras", "Laptops", "Phones"];
const TARGET_CATEGORIES: [&str; 4] = ["Appliances", "Cookware", "Cutlery", "Storage"];

#[derive(Debug, Clone)]
struct Item {
    meta: ItemMeta,
    tiers: [usize; 3],
}

#[derive(Debug, Clone)]
struct Taste {
    tiers: [usize; 3],
}

#[derive(Debug, Clone)]
pub struct FixturePair {
    pub source: DomainDataset,
    pub target: DomainDataset,
    pub boundary: i64,
    /// Planted (price, quality, popularity) tier of every user, 0 = low.
    pub latent: BTreeMap<String, [usize; 3]>,
}

fn catalog(rng: &mut ChaCha8Rng, prefix: &str, cats: &[&str], cfg: &FixtureConfig) -> Vec<Item> {
    let mut out = Vec::new();
    for (ci, cat) in cats.iter().enumerate() {
        let base = 20.0 * (ci + 1) as f64;
        for k in 0..cfg.items_per_category {
            let tiers = [k % 3, (k / 3) % 3, (k / 9) % 3].map(|t| (t + rng.random_range(0..3)) % 3);
            let [p, q, b] = tiers;
            let price = (!rng.random_bool(cfg.unpriced_fraction))
                .then(|| base * (1.0 + 1.5 * p as f64) * rng.random_range(0.85..1.15));
            let meta = ItemMeta {
                item: format!("{prefix}{ci}{k:03}"),
                title: format!("{cat} item {k}"),
                category: cat.to_string(),
                price,
                avg_rating: (2.6 + 0.8 * q as f64 + rng.random_range(-0.25..0.25)).clamp(1.0, 5.0),
                rating_count: (10f64.powi(1 + b as i32) * rng.random_range(0.6..1.6)) as u64,
                description: Some(format!("A {} {cat} product.", ["budget", "mid-range", "premium"][p])),
            };
            out.push(Item { meta, tiers });
        }
    }
    out
}

/// Draws `n` distinct items for one user, each by category affinity and
/// then by tier distance.
fn draw_items(
    rng: &mut ChaCha8Rng,
    items: &[Item],
    n_cats: usize,
    affinity: &[f64],
    taste: &[Taste],
    sharpness: f64,
    n: usize,
) -> Vec<(usize, f64)> {
    let per_cat = items.len() / n_cats;
    let mut taken = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    let total_aff: f64 = affinity.iter().sum();
    while out.len() < n && taken.len() < items.len() {
        let mut x = rng.random_range(0.0..total_aff);
        let mut c = 0;
        while c + 1 < n_cats && x >= affinity[c] {
            x -= affinity[c];
            c += 1;
        }
        let want = &taste[c].tiers;
        let weights: Vec<f64> = (0..per_cat)
            .map(|k| {
                let it = &items[c * per_cat + k];
                if taken.contains(&(c * per_cat + k)) {
                    return 0.0;
                }
                let dist: usize = it.tiers.iter().zip(want).map(|(a, b)| a.abs_diff(*b)).sum();
                (-sharpness * dist as f64).exp()
            })
            .collect();
        let z: f64 = weights.iter().sum();
        if z == 0.0 {
            continue;
        }
        let mut x = rng.random_range(0.0..z);
        let mut k = 0;
        while k + 1 < per_cat && x >= weights[k] {
            x -= weights[k];
            k += 1;
        }
        let idx = c * per_cat + k;
        taken.insert(idx);
        let dist: usize = items[idx].tiers.iter().zip(want).map(|(a, b)| a.abs_diff(*b)).sum();
        out.push((idx, (5.0 - dist as f64).max(1.0)));
    }
    out
}

struct DomainSpec<'a> {
    name: &'a str,
    prefix: &'a str,
    categories: &'a [&'a str],
    events: usize,
}

fn domain(
    rng: &mut ChaCha8Rng,
    spec: &DomainSpec<'_>,
    users: &[(String, [usize; 3])],
    cfg: &FixtureConfig,
) -> Result<DomainDataset> {
    let items = catalog(rng, spec.prefix, spec.categories, cfg);
    let n_cats = spec.categories.len();
    let mut inter = Vec::new();
    for (uk, (user, latent)) in users.iter().enumerate() {
        let affinity: Vec<f64> = (0..n_cats).map(|_| rng.random_range(0.05f64..1.0).powi(2)).collect();
        let taste: Vec<Taste> = (0..n_cats)
            .map(|_| {
                let mut tiers = *latent;
                if rng.random_bool(cfg.heterogeneity) {
                    tiers[0] = *[0usize, 1, 2].choose(rng).expect("nonempty");
                }
                Taste { tiers }
            })
            .collect();
        let total = spec.events + cfg.heldout_events;
        let picks = draw_items(rng, &items, n_cats, &affinity, &taste, cfg.sharpness, total);
        let offset = (uk % 7) as i64;
        for (k, (idx, rating)) in picks.into_iter().enumerate() {
            let ts = if k < spec.events {
                10 * k as i64 + offset
            } else {
                BOUNDARY + 10 * (k - spec.events) as i64 + offset
            };
            inter.push(InteractionRecord {
                user: user.clone(),
                item: items[idx].meta.item.clone(),
                rating,
                ts,
            });
        }
    }
    DomainDataset::new(spec.name, inter, items.into_iter().map(|i| i.meta))
}

/// Generates both domains. Overlapping users come first in id order.
pub fn generate(cfg: &FixtureConfig) -> Result<FixturePair> {
    if cfg.overlap_users == 0 || cfg.items_per_category < 3 || cfg.target_events == 0 || cfg.heldout_events == 0 {
        return Err(Error::Config(
            "fixture needs overlapping users, three items per category and nonzero event counts".into(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.heterogeneity) || !(0.0..1.0).contains(&cfg.unpriced_fraction) {
        return Err(Error::Config("heterogeneity and unpriced_fraction must be probabilities".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let latent = |prefix: &str, n: usize, rng: &mut ChaCha8Rng| -> Vec<(String, [usize; 3])> {
        (0..n)
            .map(|k| (format!("{prefix}{k:04}"), [0; 3].map(|_| rng.random_range(0..3))))
            .collect()
    };
    let overlap = latent("o", cfg.overlap_users, &mut rng);
    let src_only = latent("s", cfg.source_only_users, &mut rng);
    let tgt_only = latent("t", cfg.target_only_users, &mut rng);
    let src_users: Vec<_> = overlap.iter().chain(&src_only).cloned().collect();
    let tgt_users: Vec<_> = overlap.iter().chain(&tgt_only).cloned().collect();
    let source = domain(
        &mut rng,
        &DomainSpec {
            name: SOURCE_DOMAIN,
            prefix: "G",
            categories: &SOURCE_CATEGORIES,
            events: cfg.source_events,
        },
        &src_users,
        cfg,
    )?;
    let target = domain(
        &mut rng,
        &DomainSpec {
            name: TARGET_DOMAIN,
            prefix: "K",
            categories: &TARGET_CATEGORIES,
            events: cfg.target_events,
        },
        &tgt_users,
        cfg,
    )?;
    let latent = src_users.iter().chain(&tgt_only).cloned().collect();
    Ok(FixturePair {
        source,
        target,
        boundary: BOUNDARY,
        latent,
    })
}

/// File locations of a written fixture domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainFiles {
    pub domain: String,
    pub interactions: PathBuf,
    pub metadata: PathBuf,
}

/// Writes both domains as JSONL under `dir` and returns their paths,
/// source first.
pub fn write_fixture(dir: &Path, cfg: &FixtureConfig) -> Result<(DomainFiles, DomainFiles)> {
    std::fs::create_dir_all(dir)?;
    let pair = generate(cfg)?;
    let write = |ds: &DomainDataset| -> Result<DomainFiles> {
        let name = ds.domain_id().to_ascii_lowercase();
        let files = DomainFiles {
            domain: ds.domain_id().to_string(),
            interactions: dir.join(format!("{name}.interactions.jsonl")),
            metadata: dir.join(format!("{name}.meta.jsonl")),
        };
        ds.write_jsonl(&files.interactions, &files.metadata)?;
        Ok(files)
    };
    Ok((write(&pair.source)?, write(&pair.target)?))
}
