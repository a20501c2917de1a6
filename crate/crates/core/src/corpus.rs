//! Interaction logs, item catalogs, and time-aware splits.
//!
//! A [`DomainDataset`] owns one domain's interaction events and item
//! catalog together with the grouped views every later stage reads:
//! the per-user item sets, the per-(user, category) item sets and event
//! counts, and the domain's user/item/category sets.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One (user, item, rating, timestamp) event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user: String,
    pub item: String,
    pub rating: f64,
    pub ts: i64,
}

impl InteractionRecord {
    fn check(&self) -> std::result::Result<(), String> {
        if !(1.0..=5.0).contains(&self.rating) {
            return Err(format!("rating {} outside [1, 5]", self.rating));
        }
        if self.ts < 0 {
            return Err(format!("timestamp {} is negative", self.ts));
        }
        Ok(())
    }
}

/// Category field as it appears in metadata files: a single tag or a list
/// of tags, of which the first is the primary category.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum CategoryField {
    One(String),
    Many(Vec<String>),
}

#[derive(Debug, Clone, Deserialize)]
struct RawItemMeta {
    item: String,
    #[serde(default)]
    title: String,
    category: CategoryField,
    #[serde(default)]
    price: Option<f64>,
    avg_rating: f64,
    rating_count: u64,
    #[serde(default)]
    description: Option<String>,
}

/// Item metadata. `category` is the item's single (primary) category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub item: String,
    pub title: String,
    pub category: String,
    pub price: Option<f64>,
    pub avg_rating: f64,
    pub rating_count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl ItemMeta {
    fn from_raw(raw: RawItemMeta) -> std::result::Result<Self, String> {
        let category = match raw.category {
            CategoryField::One(c) => c,
            CategoryField::Many(tags) => tags
                .into_iter()
                .next()
                .ok_or_else(|| "empty category list".to_string())?,
        };
        if category.is_empty() {
            return Err("empty category".into());
        }
        if let Some(p) = raw.price {
            if !(p.is_finite() && p >= 0.0) {
                return Err(format!("price {p} must be a nonnegative number"));
            }
        }
        if !(1.0..=5.0).contains(&raw.avg_rating) {
            return Err(format!("avg_rating {} outside [1, 5]", raw.avg_rating));
        }
        Ok(Self {
            item: raw.item,
            title: raw.title,
            category,
            price: raw.price,
            avg_rating: raw.avg_rating,
            rating_count: raw.rating_count,
            description: raw.description,
        })
    }
}

/// Items of one user inside one category plus the number of events behind them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CategoryView {
    pub items: BTreeSet<String>,
    pub events: usize,
}

/// Grouped views over a dataset's interactions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Views {
    pub users: BTreeSet<String>,
    pub categories: BTreeSet<String>,
    pub user_items: BTreeMap<String, BTreeSet<String>>,
    pub user_categories: BTreeMap<String, BTreeMap<String, CategoryView>>,
    pub item_events: BTreeMap<String, usize>,
}

#[derive(Debug, Clone)]
pub struct DomainDataset {
    domain_id: String,
    interactions: Vec<InteractionRecord>,
    items: BTreeMap<String, ItemMeta>,
    views: Views,
}

impl DomainDataset {
    /// Builds a dataset from in-memory parts, validating every record.
    pub fn new(
        domain_id: impl Into<String>,
        interactions: Vec<InteractionRecord>,
        items: impl IntoIterator<Item = ItemMeta>,
    ) -> Result<Self> {
        let items: BTreeMap<String, ItemMeta> =
            items.into_iter().map(|m| (m.item.clone(), m)).collect();
        let origin = Path::new("<memory>");
        validate_interactions(origin, &interactions, &items)?;
        Ok(Self::assemble(domain_id.into(), interactions, items))
    }

    fn assemble(
        domain_id: String,
        interactions: Vec<InteractionRecord>,
        items: BTreeMap<String, ItemMeta>,
    ) -> Self {
        let mut ds = Self {
            domain_id,
            interactions,
            items,
            views: Views::default(),
        };
        ds.views = index_views(&ds.interactions, &ds.items);
        ds
    }

    /// Same catalog, different event log (e.g. the train part of a split).
    pub fn with_interactions(&self, interactions: Vec<InteractionRecord>) -> Result<Self> {
        validate_interactions(Path::new("<memory>"), &interactions, &self.items)?;
        Ok(Self::assemble(
            self.domain_id.clone(),
            interactions,
            self.items.clone(),
        ))
    }

    pub fn domain_id(&self) -> &str {
        &self.domain_id
    }

    pub fn interactions(&self) -> &[InteractionRecord] {
        &self.interactions
    }

    pub fn items(&self) -> &BTreeMap<String, ItemMeta> {
        &self.items
    }

    pub fn item(&self, id: &str) -> Option<&ItemMeta> {
        self.items.get(id)
    }

    pub fn views(&self) -> &Views {
        &self.views
    }

    pub fn users(&self) -> &BTreeSet<String> {
        &self.views.users
    }

    pub fn categories(&self) -> &BTreeSet<String> {
        &self.views.categories
    }

    /// `I_{u,c}`; `None` when the user never touched the category.
    pub fn user_category(&self, user: &str, category: &str) -> Option<&CategoryView> {
        self.views.user_categories.get(user)?.get(category)
    }

    /// Catalog items grouped by category.
    pub fn items_by_category(&self) -> BTreeMap<&str, Vec<&ItemMeta>> {
        let mut out: BTreeMap<&str, Vec<&ItemMeta>> = BTreeMap::new();
        for meta in self.items.values() {
            out.entry(meta.category.as_str()).or_default().push(meta);
        }
        out
    }

    /// Time range `[min_ts, max_ts]` of the event log.
    pub fn time_range(&self) -> Option<(i64, i64)> {
        let min = self.interactions.iter().map(|r| r.ts).min()?;
        let max = self.interactions.iter().map(|r| r.ts).max()?;
        Some((min, max))
    }

    pub fn write_jsonl(&self, interactions_path: &Path, metadata_path: &Path) -> Result<()> {
        write_jsonl(interactions_path, &self.interactions)?;
        write_jsonl(metadata_path, self.items.values())?;
        Ok(())
    }
}

/// Materializes the grouped views from raw events.
pub fn index_views(
    interactions: &[InteractionRecord],
    items: &BTreeMap<String, ItemMeta>,
) -> Views {
    let mut views = Views {
        categories: items.values().map(|m| m.category.clone()).collect(),
        ..Views::default()
    };
    for rec in interactions {
        // Records are validated before indexing.
        let Some(meta) = items.get(&rec.item) else {
            continue;
        };
        views.users.insert(rec.user.clone());
        views
            .user_items
            .entry(rec.user.clone())
            .or_default()
            .insert(rec.item.clone());
        let cv = views
            .user_categories
            .entry(rec.user.clone())
            .or_default()
            .entry(meta.category.clone())
            .or_default();
        cv.items.insert(rec.item.clone());
        cv.events += 1;
        *views.item_events.entry(rec.item.clone()).or_default() += 1;
    }
    views
}

fn validate_interactions(
    path: &Path,
    interactions: &[InteractionRecord],
    items: &BTreeMap<String, ItemMeta>,
) -> Result<()> {
    for (idx, rec) in interactions.iter().enumerate() {
        rec.check().map_err(|constraint| Error::InvalidRecord {
            path: path.to_path_buf(),
            line: idx + 1,
            constraint,
        })?;
    }
    check_references(
        path,
        interactions.iter().enumerate().map(|(i, r)| (i + 1, r)),
        items,
    )
}

/// Unknown-item and duplicate-triple checks; `line` is the caller's numbering.
fn check_references<'a>(
    path: &Path,
    interactions: impl Iterator<Item = (usize, &'a InteractionRecord)>,
    items: &BTreeMap<String, ItemMeta>,
) -> Result<()> {
    let mut seen: HashSet<(&str, &str, i64)> = HashSet::new();
    for (line, rec) in interactions {
        if !items.contains_key(&rec.item) {
            return Err(Error::UnknownItem {
                path: path.to_path_buf(),
                line,
                item: rec.item.clone(),
            });
        }
        if !seen.insert((rec.user.as_str(), rec.item.as_str(), rec.ts)) {
            return Err(Error::DuplicateTriple {
                path: path.to_path_buf(),
                line,
                user: rec.user.clone(),
                item: rec.item.clone(),
                ts: rec.ts,
            });
        }
    }
    Ok(())
}

fn read_jsonl_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push((idx + 1, line));
    }
    Ok(out)
}

pub fn read_interactions(path: &Path) -> Result<Vec<InteractionRecord>> {
    Ok(read_numbered_interactions(path)?
        .into_iter()
        .map(|(_, r)| r)
        .collect())
}

fn read_numbered_interactions(path: &Path) -> Result<Vec<(usize, InteractionRecord)>> {
    let mut out = Vec::new();
    for (line_no, line) in read_jsonl_lines(path)? {
        let rec: InteractionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        rec.check().map_err(|constraint| Error::InvalidRecord {
            path: path.to_path_buf(),
            line: line_no,
            constraint,
        })?;
        out.push((line_no, rec));
    }
    Ok(out)
}

pub fn read_metadata(path: &Path) -> Result<Vec<ItemMeta>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (line_no, line) in read_jsonl_lines(path)? {
        let raw: RawItemMeta = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        let meta = ItemMeta::from_raw(raw).map_err(|constraint| Error::InvalidRecord {
            path: path.to_path_buf(),
            line: line_no,
            constraint,
        })?;
        if !seen.insert(meta.item.clone()) {
            return Err(Error::InvalidRecord {
                path: path.to_path_buf(),
                line: line_no,
                constraint: format!("duplicate metadata for item `{}`", meta.item),
            });
        }
        out.push(meta);
    }
    Ok(out)
}

pub fn write_jsonl<'a, T, I>(path: &Path, rows: I) -> Result<()>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Loads one domain from its interaction and metadata JSONL files.
pub fn load_domain(
    interactions_path: &Path,
    metadata_path: &Path,
    domain_id: &str,
) -> Result<DomainDataset> {
    let items: BTreeMap<String, ItemMeta> = read_metadata(metadata_path)?
        .into_iter()
        .map(|m| (m.item.clone(), m))
        .collect();
    let numbered = read_numbered_interactions(interactions_path)?;
    check_references(
        interactions_path,
        numbered.iter().map(|(n, r)| (*n, r)),
        &items,
    )?;
    let interactions = numbered.into_iter().map(|(_, r)| r).collect();
    Ok(DomainDataset::assemble(
        domain_id.to_string(),
        interactions,
        items,
    ))
}

/// Two domains and their overlapping users `U_o = U_s ∩ U_t`.
#[derive(Debug, Clone)]
pub struct DomainPair {
    pub source: DomainDataset,
    pub target: DomainDataset,
    pub overlap: BTreeSet<String>,
}

pub fn build_domain_pair(source: DomainDataset, target: DomainDataset) -> Result<DomainPair> {
    let overlap: BTreeSet<String> = source
        .users()
        .intersection(target.users())
        .cloned()
        .collect();
    if overlap.is_empty() {
        return Err(Error::EmptyOverlap {
            source_domain: source.domain_id().to_string(),
            target_domain: target.domain_id().to_string(),
        });
    }
    Ok(DomainPair {
        source,
        target,
        overlap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitBundle {
    pub train: Vec<InteractionRecord>,
    pub valid: Vec<InteractionRecord>,
    pub test: Vec<InteractionRecord>,
    pub boundary_time: i64,
    /// Post-boundary events of users never seen before the boundary.
    pub dropped: usize,
}

/// Splits a domain at `boundary_time`.
///
/// Events before the boundary form the train set. Later events of users
/// that also appear in train are ordered per user by `(ts, item)`; the
/// first `floor(valid_fraction * n)` go to validation and the rest to test.
pub fn time_split(
    dataset: &DomainDataset,
    boundary_time: i64,
    valid_fraction: f64,
) -> Result<SplitBundle> {
    if !(valid_fraction > 0.0 && valid_fraction < 1.0) {
        return Err(Error::Config(format!(
            "valid_fraction {valid_fraction} must lie in (0, 1)"
        )));
    }
    let (min_ts, max_ts) = dataset
        .time_range()
        .ok_or_else(|| Error::DegenerateSplit("dataset has no interactions".into()))?;
    if boundary_time <= min_ts || boundary_time > max_ts {
        return Err(Error::DegenerateSplit(format!(
            "boundary {boundary_time} outside data range ({min_ts}, {max_ts}]"
        )));
    }

    let mut train = Vec::new();
    let mut later: BTreeMap<&str, Vec<&InteractionRecord>> = BTreeMap::new();
    for rec in dataset.interactions() {
        if rec.ts < boundary_time {
            train.push(rec.clone());
        } else {
            later.entry(rec.user.as_str()).or_default().push(rec);
        }
    }
    let train_users: HashSet<&str> = train.iter().map(|r| r.user.as_str()).collect();

    let mut valid = Vec::new();
    let mut test = Vec::new();
    let mut dropped = 0;
    for (user, mut events) in later {
        if !train_users.contains(user) {
            dropped += events.len();
            continue;
        }
        events.sort_by(|a, b| a.ts.cmp(&b.ts).then_with(|| a.item.cmp(&b.item)));
        let n_valid = (valid_fraction * events.len() as f64).floor() as usize;
        for (k, rec) in events.into_iter().enumerate() {
            if k < n_valid {
                valid.push(rec.clone());
            } else {
                test.push(rec.clone());
            }
        }
    }

    if train.is_empty() {
        return Err(Error::DegenerateSplit("empty train set".into()));
    }
    if test.is_empty() {
        return Err(Error::DegenerateSplit("empty test set".into()));
    }
    Ok(SplitBundle {
        train,
        valid,
        test,
        boundary_time,
        dropped,
    })
}
