//! Intra-domain heterogeneity analysis.
//!
//! Items are binned per category into tertiles of a metadata criterion,
//! users get a per-category preference score (the mean bin of the items
//! they touched), scores are discretized into Low/Medium/High by the
//! tertiles of the per-category score distribution, and conditional
//! preservation ratios measure how often a label survives a move from a
//! base category to a compared category.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{DomainDataset, ItemMeta};
use crate::error::{Error, Result};
use crate::quantile::{OrdinalLabel, Tertiles};

/// Item-metadata preference criteria.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemCriterion {
    /// Price sensitivity, from item price.
    Ps,
    /// Quality preference, from average rating.
    Qp,
    /// Popularity bias, from rating count.
    Pb,
}

impl ItemCriterion {
    pub const ALL: [ItemCriterion; 3] = [ItemCriterion::Ps, ItemCriterion::Qp, ItemCriterion::Pb];

    pub fn code(self) -> &'static str {
        match self {
            ItemCriterion::Ps => "ps",
            ItemCriterion::Qp => "qp",
            ItemCriterion::Pb => "pb",
        }
    }

    /// The raw metadata value this criterion reads, if present.
    pub fn value(self, meta: &ItemMeta) -> Option<f64> {
        match self {
            ItemCriterion::Ps => meta.price,
            ItemCriterion::Qp => Some(meta.avg_rating),
            ItemCriterion::Pb => Some(meta.rating_count as f64),
        }
    }
}

impl fmt::Display for ItemCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for ItemCriterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ps" | "price" => Ok(ItemCriterion::Ps),
            "qp" | "quality" | "rating" => Ok(ItemCriterion::Qp),
            "pb" | "popularity" => Ok(ItemCriterion::Pb),
            _ => Err(Error::Unknown {
                kind: "criterion",
                name: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinAssignment {
    pub category: String,
    pub criterion: ItemCriterion,
    pub thresholds: Tertiles,
    pub bins: BTreeMap<String, u8>,
}

/// Bins one category's items by the tertiles of their criterion values.
/// Items without a value are left unbinned.
pub fn bin_items(items: &[&ItemMeta], criterion: ItemCriterion) -> Result<BinAssignment> {
    let category = items
        .first()
        .map(|m| m.category.clone())
        .ok_or_else(|| Error::EmptyInput("no items to bin".into()))?;
    if let Some(other) = items.iter().find(|m| m.category != category) {
        return Err(Error::Shape(format!(
            "bin_items got categories `{category}` and `{}`",
            other.category
        )));
    }
    let valued: Vec<(&str, f64)> = items
        .iter()
        .filter_map(|m| criterion.value(m).map(|v| (m.item.as_str(), v)))
        .collect();
    if valued.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no {criterion} values in category `{category}`"
        )));
    }
    let thresholds = Tertiles::from_values(valued.iter().map(|&(_, v)| v))?;
    let bins = valued
        .into_iter()
        .map(|(id, v)| (id.to_string(), thresholds.bin(v)))
        .collect();
    Ok(BinAssignment {
        category,
        criterion,
        thresholds,
        bins,
    })
}

/// Mean bin of the user's interacted items in the category. Unbinned items
/// are skipped.
pub fn preference_score(
    user: &str,
    category: &str,
    bins: &BinAssignment,
    dataset: &DomainDataset,
) -> Result<f64> {
    let view = dataset.user_category(user, category).ok_or_else(|| {
        Error::EmptyInput(format!("user `{user}` has no items in `{category}`"))
    })?;
    let mut sum = 0u64;
    let mut n = 0u64;
    for item in &view.items {
        if let Some(&b) = bins.bins.get(item) {
            sum += u64::from(b);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyInput(format!(
            "no {} values among items of user `{user}` in `{category}`",
            bins.criterion
        )));
    }
    Ok(sum as f64 / n as f64)
}

/// `s_{u,c}^{(k)}` keyed by criterion, then category, then user.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrefScoreTable {
    pub scores: BTreeMap<ItemCriterion, BTreeMap<String, BTreeMap<String, f64>>>,
}

impl PrefScoreTable {
    pub fn get(&self, criterion: ItemCriterion, category: &str) -> Option<&BTreeMap<String, f64>> {
        self.scores.get(&criterion)?.get(category)
    }
}

/// Labels every scored user in `category` by the tertiles of the
/// category's score distribution.
pub fn preference_labels(
    scores: &PrefScoreTable,
    category: &str,
    criterion: ItemCriterion,
) -> Result<BTreeMap<String, OrdinalLabel>> {
    let per_user = scores
        .get(criterion, category)
        .filter(|m| !m.is_empty())
        .ok_or_else(|| {
            Error::EmptyInput(format!("no {criterion} scores in category `{category}`"))
        })?;
    let tertiles = Tertiles::from_values(per_user.values().copied())?;
    Ok(per_user
        .iter()
        .map(|(u, &s)| (u.clone(), tertiles.label(s)))
        .collect())
}

/// category -> user -> label, for one criterion.
pub type CategoryLabels = BTreeMap<String, BTreeMap<String, OrdinalLabel>>;

/// Bins, scores, and labels for a set of criteria over one dataset.
#[derive(Debug, Clone, Default)]
pub struct IdhAnalysis {
    pub bins: BTreeMap<ItemCriterion, BTreeMap<String, BinAssignment>>,
    pub scores: PrefScoreTable,
    pub labels: BTreeMap<ItemCriterion, CategoryLabels>,
}

impl IdhAnalysis {
    pub fn run(dataset: &DomainDataset, criteria: &[ItemCriterion]) -> Result<Self> {
        let by_category = dataset.items_by_category();
        let mut out = IdhAnalysis::default();
        for &criterion in criteria {
            let mut bins = BTreeMap::new();
            for (category, items) in &by_category {
                // A category where nobody has a value simply carries no signal.
                if items.iter().all(|m| criterion.value(m).is_none()) {
                    continue;
                }
                bins.insert(category.to_string(), bin_items(items, criterion)?);
            }

            let mut cat_scores: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
            for (user, cats) in &dataset.views().user_categories {
                for (category, view) in cats {
                    let Some(ba) = bins.get(category) else { continue };
                    if view.items.iter().all(|i| !ba.bins.contains_key(i)) {
                        continue;
                    }
                    let s = preference_score(user, category, ba, dataset)?;
                    cat_scores
                        .entry(category.clone())
                        .or_default()
                        .insert(user.clone(), s);
                }
            }
            out.scores.scores.insert(criterion, cat_scores);

            let mut labels = CategoryLabels::new();
            for category in out.scores.scores[&criterion].keys() {
                labels.insert(
                    category.clone(),
                    preference_labels(&out.scores, category, criterion)?,
                );
            }
            out.labels.insert(criterion, labels);
            out.bins.insert(criterion, bins);
        }
        Ok(out)
    }

    pub fn labels_for(&self, criterion: ItemCriterion) -> Result<&CategoryLabels> {
        self.labels
            .get(&criterion)
            .ok_or_else(|| Error::MissingLabels(criterion.code().to_uppercase()))
    }

    /// Bin of an item under a criterion, if it was binned.
    pub fn item_bin(&self, criterion: ItemCriterion, meta: &ItemMeta) -> Option<u8> {
        self.bins
            .get(&criterion)?
            .get(&meta.category)?
            .bins
            .get(&meta.item)
            .copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreservationCell {
    /// Users labeled `g` in both categories.
    pub kept: usize,
    /// Users labeled `g` in the base category.
    pub support: usize,
}

impl PreservationCell {
    pub fn ratio(&self) -> Option<f64> {
        (self.support > 0).then(|| self.kept as f64 / self.support as f64)
    }
}

/// `R_g^{(k)}(c_b -> c_t)` for every ordered category pair, keyed `(base, compared)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreservationMatrix {
    pub criterion: ItemCriterion,
    pub label: OrdinalLabel,
    pub cells: BTreeMap<(String, String), PreservationCell>,
}

impl PreservationMatrix {
    pub fn ratio(&self, base: &str, compared: &str) -> Option<f64> {
        self.cells
            .get(&(base.to_string(), compared.to_string()))?
            .ratio()
    }
}

/// Counts, over users labeled in both categories, how many labeled `g` in
/// the base category keep `g` in the compared category.
pub fn preservation_matrix(
    labels: &CategoryLabels,
    criterion: ItemCriterion,
    g: OrdinalLabel,
) -> PreservationMatrix {
    let mut cells = BTreeMap::new();
    for (base, base_labels) in labels {
        for (compared, cmp_labels) in labels {
            let mut cell = PreservationCell { kept: 0, support: 0 };
            for (user, &lb) in base_labels {
                let Some(&lt) = cmp_labels.get(user) else { continue };
                if lb == g {
                    cell.support += 1;
                    if lt == g {
                        cell.kept += 1;
                    }
                }
            }
            cells.insert((base.clone(), compared.clone()), cell);
        }
    }
    PreservationMatrix {
        criterion,
        label: g,
        cells,
    }
}

#[derive(Debug, Serialize)]
struct ReportRow<'a> {
    base_category: &'a str,
    compared_category: &'a str,
    ratio: f64,
    support: usize,
}

#[derive(Debug, Serialize)]
struct OmittedCell<'a> {
    base_category: &'a str,
    compared_category: &'a str,
    support: usize,
}

#[derive(Debug, Serialize)]
struct ReportSummary<'a> {
    criterion: &'a str,
    label: &'a str,
    rows: usize,
    omitted: Vec<OmittedCell<'a>>,
}

/// Writes `<criterion>_<label>.csv` plus a `<criterion>_<label>.summary.json`
/// sidecar per matrix. Cells without base-category users are omitted from
/// the CSV and listed in the sidecar.
pub fn export_idh_report(matrices: &[PreservationMatrix], out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for m in matrices {
        let stem = format!("{}_{}", m.criterion.code(), m.label.name());
        let csv_path = out.join(format!("{stem}.csv"));
        let mut w = csv::Writer::from_path(&csv_path)?;
        let mut omitted = Vec::new();
        let mut rows = 0;
        for ((base, compared), cell) in &m.cells {
            match cell.ratio() {
                Some(ratio) => {
                    w.serialize(ReportRow {
                        base_category: base,
                        compared_category: compared,
                        ratio,
                        support: cell.support,
                    })?;
                    rows += 1;
                }
                None => omitted.push(OmittedCell {
                    base_category: base,
                    compared_category: compared,
                    support: cell.support,
                }),
            }
        }
        if rows == 0 {
            // Header-only CSV still documents the schema.
            w.write_record(["base_category", "compared_category", "ratio", "support"])?;
        }
        w.flush()?;
        written.push(csv_path);

        let summary = ReportSummary {
            criterion: m.criterion.code(),
            label: m.label.name(),
            rows,
            omitted,
        };
        let summary_path = out.join(format!("{stem}.summary.json"));
        std::fs::write(&summary_path, serde_json::to_vec_pretty(&summary)?)?;
        written.push(summary_path);
    }
    Ok(written)
}
