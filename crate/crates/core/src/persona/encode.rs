use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::cache::Cache;
use super::client::EncoderClient;
use super::generate::PersonaText;
use super::Criterion;
use crate::corpus::ItemMeta;
use crate::error::{Error, Result};

pub const DEFAULT_CHUNK: usize = 256;

/// Criterion vectors of one user, all of dimension `dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaEmbeddingSet {
    pub user_id: String,
    pub vectors: BTreeMap<Criterion, Vec<f64>>,
    pub dim: usize,
}

/// Encodes texts with deduplication and caching; the encoder sees only
/// uncached distinct texts, `chunk` at a time.
pub fn encode_texts(
    texts: &[String],
    encoder: &dyn EncoderClient,
    cache: Option<&Cache>,
    chunk: usize,
) -> Result<Vec<Vec<f64>>> {
    let id = encoder.id();
    let mut known: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut missing: BTreeSet<&str> = BTreeSet::new();
    for t in texts {
        if known.contains_key(t.as_str()) || missing.contains(t.as_str()) {
            continue;
        }
        let hit = match cache {
            Some(c) => c.get_vector("embedding", &Cache::key(&[&id, t]))?,
            None => None,
        };
        match hit {
            Some(v) => {
                known.insert(t, v);
            }
            None => {
                missing.insert(t);
            }
        }
    }
    let missing: Vec<&str> = missing.into_iter().collect();
    for batch in missing.chunks(chunk.max(1)) {
        let owned: Vec<String> = batch.iter().map(|s| s.to_string()).collect();
        let vecs = encoder.encode_batch(&owned)?;
        if vecs.len() != batch.len() {
            return Err(Error::MalformedResponse(format!(
                "encoder returned {} vectors for {} texts",
                vecs.len(),
                batch.len()
            )));
        }
        for (t, v) in batch.iter().zip(vecs) {
            if v.len() != encoder.dim() {
                return Err(Error::Shape(format!("encoder vector of length {}, expected {}", v.len(), encoder.dim())));
            }
            if let Some(c) = cache {
                c.put_vector("embedding", &Cache::key(&[&id, t]), &v)?;
            }
            known.insert(t, v);
        }
    }
    Ok(texts.iter().map(|t| known[t.as_str()].clone()).collect())
}

pub fn encode_personas(
    personas: &[PersonaText],
    encoder: &dyn EncoderClient,
    cache: Option<&Cache>,
    chunk: usize,
) -> Result<Vec<PersonaEmbeddingSet>> {
    let mut flat = Vec::with_capacity(personas.len() * Criterion::ALL.len());
    for p in personas {
        for c in Criterion::ALL {
            let t = p
                .texts
                .get(&c)
                .ok_or_else(|| Error::MissingCriterion(format!("{} for user {}", c.output_key(), p.user_id)))?;
            flat.push(t.clone());
        }
    }
    let vecs = encode_texts(&flat, encoder, cache, chunk)?;
    let mut it = vecs.into_iter();
    Ok(personas
        .iter()
        .map(|p| PersonaEmbeddingSet {
            user_id: p.user_id.clone(),
            vectors: Criterion::ALL.iter().map(|&c| (c, it.next().expect("one per text"))).collect(),
            dim: encoder.dim(),
        })
        .collect())
}

/// Item input text: the domain description followed by the category.
pub fn item_semantic_text(meta: &ItemMeta, domain_description: &str) -> String {
    format!("{domain_description} || {}", meta.category)
}

pub fn encode_item_semantics(
    items: &[&ItemMeta],
    domain_description: &str,
    encoder: &dyn EncoderClient,
    cache: Option<&Cache>,
    chunk: usize,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let texts: Vec<String> = items.iter().map(|m| item_semantic_text(m, domain_description)).collect();
    let vecs = encode_texts(&texts, encoder, cache, chunk)?;
    Ok(items.iter().map(|m| m.item.clone()).zip(vecs).collect())
}
