//! Prompt assets and the JSON payloads handed to the generator.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::db::PersonaDb;
use super::Criterion;
use crate::corpus::DomainDataset;
use crate::error::{Error, Result};
use crate::idh::{IdhAnalysis, ItemCriterion};
use crate::quantile::OrdinalLabel;

const ASSETS: &str = include_str!("../../assets/prompts.toml");

/// Items drawn from each ranking when sampling the domain catalog.
pub const DESCRIPTION_SAMPLE_PER_LIST: usize = 50;
/// Purchases included in each persona request.
pub const HISTORY_LEN: usize = 30;

#[derive(Debug, Clone, PartialEq, Deserialize)]
struct AssetFile {
    persona_instruction: String,
    description_instruction: String,
    templates: TemplateFile,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
struct TemplateFile {
    #[serde(rename = "PS")]
    ps: LabelTemplates,
    #[serde(rename = "QP")]
    qp: LabelTemplates,
    #[serde(rename = "PB")]
    pb: LabelTemplates,
    #[serde(rename = "CF")]
    cf: LabelTemplates,
    #[serde(rename = "CD")]
    cd: LabelTemplates,
    description: DescriptionTemplate,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct LabelTemplates {
    #[serde(rename = "H")]
    pub high: String,
    #[serde(rename = "M")]
    pub medium: String,
    #[serde(rename = "L")]
    pub low: String,
    #[serde(default)]
    pub missing: Option<String>,
}

impl LabelTemplates {
    pub fn for_label(&self, label: OrdinalLabel) -> &str {
        match label {
            OrdinalLabel::High => &self.high,
            OrdinalLabel::Medium => &self.medium,
            OrdinalLabel::Low => &self.low,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
struct DescriptionTemplate {
    text: String,
}

/// Sentence patterns of the offline generator.
#[derive(Debug, Clone, PartialEq)]
pub struct Templates {
    by_criterion: BTreeMap<Criterion, LabelTemplates>,
    description: String,
}

impl Templates {
    pub fn bundled() -> Self {
        let f = bundled_file();
        let t = f.templates;
        Self {
            by_criterion: [
                (Criterion::Ps, t.ps),
                (Criterion::Qp, t.qp),
                (Criterion::Pb, t.pb),
                (Criterion::Cf, t.cf),
                (Criterion::Cd, t.cd),
            ]
            .into(),
            description: t.description.text,
        }
    }

    pub fn criterion(&self, c: Criterion) -> &LabelTemplates {
        &self.by_criterion[&c]
    }

    pub fn description(&self) -> &str {
        &self.description
    }
}

fn bundled_file() -> AssetFile {
    toml::from_str(ASSETS).expect("bundled prompt assets parse")
}

/// Fills `{name}` placeholders.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

/// Everything the generator sees besides the per-user payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptAssets {
    pub domain: String,
    pub domain_description: String,
    pub persona_instruction: String,
    pub description_instruction: String,
    /// Item id to `(title, category)`.
    pub item_snippets: BTreeMap<String, (String, String)>,
    pub domain_config_texts: Vec<String>,
}

impl PromptAssets {
    pub fn new(dataset: &DomainDataset, domain_description: String, config_texts: Vec<String>) -> Self {
        let f = bundled_file();
        Self {
            domain: dataset.domain_id().to_string(),
            domain_description,
            persona_instruction: f.persona_instruction,
            description_instruction: f.description_instruction,
            item_snippets: dataset
                .items()
                .values()
                .map(|m| (m.item.clone(), (m.title.clone(), m.category.clone())))
                .collect(),
            domain_config_texts: config_texts,
        }
    }

    pub fn bundled_persona_instruction() -> String {
        bundled_file().persona_instruction
    }

    pub fn bundled_description_instruction() -> String {
        bundled_file().description_instruction
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub item_id: String,
    pub title: String,
    pub category: String,
    pub average_rating: f64,
    pub rating_number: u64,
    pub user_rating: f64,
    /// Price level of the item inside its category; null when unpriced.
    pub cat_item_price_tag: Option<OrdinalLabel>,
}

/// Per-user generator payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaRequest {
    #[serde(rename = "Domain")]
    pub domain: String,
    #[serde(rename = "Domain description")]
    pub domain_description: String,
    #[serde(rename = "User ID")]
    pub user_id: String,
    pub category_price_level: BTreeMap<String, OrdinalLabel>,
    pub category_rating_level: BTreeMap<String, OrdinalLabel>,
    pub category_popularity_level: BTreeMap<String, OrdinalLabel>,
    pub category_familiarity_level: BTreeMap<String, OrdinalLabel>,
    pub overall_category_diversity: OrdinalLabel,
    #[serde(rename = "History")]
    pub history: Vec<HistoryEntry>,
}

/// Assembles the payload from the user's database row and their most recent
/// train events (oldest first, at most [`HISTORY_LEN`]).
pub fn build_persona_request(
    db: &PersonaDb,
    dataset: &DomainDataset,
    idh: &IdhAnalysis,
    domain_description: &str,
) -> Result<PersonaRequest> {
    let mut events: Vec<_> = dataset
        .interactions()
        .iter()
        .filter(|r| r.user == db.user_id)
        .collect();
    events.sort_by(|a, b| b.ts.cmp(&a.ts).then_with(|| a.item.cmp(&b.item)));
    events.truncate(HISTORY_LEN);
    events.reverse();
    let history = events
        .into_iter()
        .map(|r| {
            let m = dataset.item(&r.item).ok_or_else(|| Error::Unknown {
                kind: "item",
                name: r.item.clone(),
            })?;
            Ok(HistoryEntry {
                item_id: m.item.clone(),
                title: m.title.clone(),
                category: m.category.clone(),
                average_rating: m.avg_rating,
                rating_number: m.rating_count,
                user_rating: r.rating,
                cat_item_price_tag: idh.item_bin(ItemCriterion::Ps, m).map(OrdinalLabel::from_bin),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PersonaRequest {
        domain: dataset.domain_id().to_string(),
        domain_description: domain_description.to_string(),
        user_id: db.user_id.clone(),
        category_price_level: db.price.clone(),
        category_rating_level: db.rating.clone(),
        category_popularity_level: db.popularity.clone(),
        category_familiarity_level: db.familiarity.clone(),
        overall_category_diversity: db.diversity,
        history,
    })
}

/// Representative items for the domain description: the most-interacted
/// items, then the best-rated ones, then more of the interaction ranking
/// until `2 * per_list` items or the catalog runs out.
pub fn sample_description_items(dataset: &DomainDataset, per_list: usize) -> Vec<String> {
    let events = &dataset.views().item_events;
    let count = |id: &str| events.get(id).copied().unwrap_or(0);
    let mut by_events: Vec<&str> = dataset.items().keys().map(String::as_str).collect();
    by_events.sort_by(|a, b| count(b).cmp(&count(a)).then_with(|| a.cmp(b)));
    let mut by_rating: Vec<&str> = by_events.clone();
    by_rating.sort_by(|a, b| {
        let (ma, mb) = (&dataset.items()[*a], &dataset.items()[*b]);
        mb.avg_rating
            .total_cmp(&ma.avg_rating)
            .then_with(|| mb.rating_count.cmp(&ma.rating_count))
            .then_with(|| a.cmp(b))
    });
    let target = (2 * per_list).min(by_events.len());
    let mut chosen: Vec<String> = Vec::with_capacity(target);
    let mut seen = BTreeSet::new();
    let mut push = |id: &str, chosen: &mut Vec<String>| {
        if seen.insert(id.to_string()) {
            chosen.push(id.to_string());
        }
    };
    for id in by_events.iter().take(per_list) {
        push(id, &mut chosen);
    }
    for id in by_rating.iter().take(per_list) {
        push(id, &mut chosen);
    }
    for id in &by_events {
        if chosen.len() >= target {
            break;
        }
        push(id, &mut chosen);
    }
    chosen.truncate(target);
    chosen
}

/// `domain || title || category || description` for each sampled item.
pub fn domain_config_texts(dataset: &DomainDataset, items: &[String]) -> Vec<String> {
    items
        .iter()
        .filter_map(|id| dataset.item(id))
        .map(|m| {
            format!(
                "{} || {} || {} || {}",
                dataset.domain_id(),
                m.title,
                m.category,
                m.description.as_deref().unwrap_or("")
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptionRequest {
    #[serde(rename = "Domain")]
    pub domain: String,
    /// Item id to `title || category || description`.
    pub sampled_item_list: BTreeMap<String, String>,
}

pub fn build_description_request(dataset: &DomainDataset, items: &[String]) -> DescriptionRequest {
    DescriptionRequest {
        domain: dataset.domain_id().to_string(),
        sampled_item_list: items
            .iter()
            .filter_map(|id| dataset.item(id))
            .map(|m| {
                (
                    m.item.clone(),
                    format!(
                        "{} || {} || {}",
                        m.title,
                        m.category,
                        m.description.as_deref().unwrap_or("")
                    ),
                )
            })
            .collect(),
    }
}
