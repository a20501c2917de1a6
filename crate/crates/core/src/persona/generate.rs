use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::cache::Cache;
use super::client::GeneratorClient;
pub use super::client::Provenance;
use super::prompt::{
    build_description_request, domain_config_texts, sample_description_items, PersonaRequest, PromptAssets,
    DESCRIPTION_SAMPLE_PER_LIST,
};
use super::Criterion;
use crate::corpus::DomainDataset;
use crate::error::{Error, Result};

pub const PERSONA_TEMPERATURE: f64 = 0.7;
pub const DESCRIPTION_TEMPERATURE: f64 = 1.0;

/// The five criterion texts of one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaText {
    pub user_id: String,
    pub texts: BTreeMap<Criterion, String>,
    pub provenance: Provenance,
    pub cache_key: String,
}

impl PersonaText {
    /// Structured output form, as stored in the cache.
    pub fn to_output_json(&self) -> Value {
        let profiles: serde_json::Map<String, Value> = self
            .texts
            .iter()
            .map(|(c, t)| (c.output_key().to_string(), json!({ "persona": t })))
            .collect();
        json!({"User ID": self.user_id, "Profiles": profiles})
    }
}

/// Parses the raw text, then retries on the outermost `{...}` span.
fn parse_json_lenient(raw: &str) -> Result<Value> {
    if let Ok(v) = serde_json::from_str(raw) {
        return Ok(v);
    }
    let span = match (raw.find('{'), raw.rfind('}')) {
        (Some(a), Some(b)) if a < b => &raw[a..=b],
        _ => return Err(Error::MalformedResponse("no JSON object in response".into())),
    };
    serde_json::from_str(span).map_err(|e| Error::MalformedResponse(e.to_string()))
}

/// Extracts the five persona texts from a generator response.
pub fn parse_persona_response(raw: &str) -> Result<BTreeMap<Criterion, String>> {
    let v = parse_json_lenient(raw)?;
    let profiles = v
        .get("Profiles")
        .and_then(Value::as_object)
        .ok_or_else(|| Error::MalformedResponse("missing \"Profiles\" object".into()))?;
    let mut out = BTreeMap::new();
    for c in Criterion::ALL {
        let entry = c
            .output_aliases()
            .iter()
            .find_map(|k| profiles.get(*k))
            .ok_or_else(|| Error::MissingCriterion(c.output_key().into()))?;
        let text = match entry {
            Value::String(s) => s.as_str(),
            other => other.get("persona").and_then(Value::as_str).unwrap_or(""),
        };
        if text.trim().is_empty() {
            return Err(Error::MissingCriterion(c.output_key().into()));
        }
        out.insert(c, text.to_string());
    }
    Ok(out)
}

/// One generator call for all five criteria, memoized by content hash.
pub fn generate_personas(
    request: &PersonaRequest,
    assets: &PromptAssets,
    client: &dyn GeneratorClient,
    cache: Option<&Cache>,
) -> Result<PersonaText> {
    let payload = serde_json::to_string(request)?;
    let key = Cache::key(&[
        "persona",
        &client.id(),
        &PERSONA_TEMPERATURE.to_string(),
        &assets.persona_instruction,
        &payload,
    ]);
    if let Some(hit) = cache.map(|c| c.get_text("persona", &key)).transpose()?.flatten() {
        return Ok(PersonaText {
            user_id: request.user_id.clone(),
            texts: parse_persona_response(&hit)?,
            provenance: client.provenance(),
            cache_key: key,
        });
    }
    let raw = client.generate(&assets.persona_instruction, &payload, PERSONA_TEMPERATURE)?;
    let out = PersonaText {
        user_id: request.user_id.clone(),
        texts: parse_persona_response(&raw)?,
        provenance: client.provenance(),
        cache_key: key,
    };
    if let Some(c) = cache {
        c.put_text("persona", &out.cache_key, &serde_json::to_string_pretty(&out.to_output_json())?)?;
    }
    Ok(out)
}

/// Domain summary from a sample of the catalog. Returns the description and
/// the configuration texts it was built from.
pub fn build_domain_description(
    dataset: &DomainDataset,
    client: &dyn GeneratorClient,
    cache: Option<&Cache>,
) -> Result<(String, Vec<String>)> {
    let items = sample_description_items(dataset, DESCRIPTION_SAMPLE_PER_LIST);
    let texts = domain_config_texts(dataset, &items);
    let instruction = PromptAssets::bundled_description_instruction();
    let payload = serde_json::to_string(&build_description_request(dataset, &items))?;
    let key = Cache::key(&[
        "description",
        &client.id(),
        &DESCRIPTION_TEMPERATURE.to_string(),
        &instruction,
        &payload,
    ]);
    let raw = match cache.map(|c| c.get_text("description", &key)).transpose()?.flatten() {
        Some(hit) => hit,
        None => {
            let raw = client.generate(&instruction, &payload, DESCRIPTION_TEMPERATURE)?;
            parse_description(&raw)?;
            if let Some(c) = cache {
                c.put_text("description", &key, &raw)?;
            }
            raw
        }
    };
    Ok((parse_description(&raw)?, texts))
}

fn parse_description(raw: &str) -> Result<String> {
    let v = parse_json_lenient(raw)?;
    v.pointer("/Domain Profile/Domain Description")
        .and_then(Value::as_str)
        .filter(|s| !s.trim().is_empty())
        .map(str::to_string)
        .ok_or_else(|| Error::MalformedResponse("missing Domain Profile / Domain Description".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = r#"{"User ID": "u", "Profiles": {
        "price_centric": {"persona": "p"}, "quality_centric": {"persona": "q"},
        "popularity_centric": {"persona": "b"}, "category_preference": {"persona": "f"},
        "category_diversity": {"persona": "d"}}}"#;

    #[test]
    fn parses_with_alias_and_wrapped_text() {
        let t = parse_persona_response(FULL).unwrap();
        assert_eq!(t[&Criterion::Cf], "f");
        let wrapped = format!("Sure, here it is:\n```json\n{FULL}\n```");
        assert_eq!(parse_persona_response(&wrapped).unwrap(), t);
    }

    #[test]
    fn missing_key_is_reported() {
        let broken = FULL.replace("\"category_diversity\"", "\"other\"");
        match parse_persona_response(&broken) {
            Err(Error::MissingCriterion(k)) => assert_eq!(k, "category_diversity"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_persona_response("no json here"),
            Err(Error::MalformedResponse(_))
        ));
    }
}
