//! Generator and encoder clients.
//!
//! Offline clients are pure functions of their inputs. Remote clients talk
//! to an OpenAI-compatible HTTP API and retry failed calls with exponential
//! backoff.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::prompt::{render, Templates};
use super::Criterion;
use crate::error::{Error, Result};
use crate::quantile::OrdinalLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Llm,
    Template,
}

pub trait GeneratorClient: Send + Sync {
    /// One completion for a system instruction and a user payload.
    fn generate(&self, system: &str, user: &str, temperature: f64) -> Result<String>;
    /// Stable identity folded into cache keys.
    fn id(&self) -> String;
    fn provenance(&self) -> Provenance {
        Provenance::Llm
    }
}

pub trait EncoderClient: Send + Sync {
    /// One vector per input text, in order.
    fn encode_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
    fn dim(&self) -> usize;
    fn id(&self) -> String;
}

/// Counts calls reaching the wrapped client.
#[derive(Debug, Clone)]
pub struct CallCounter<C> {
    inner: C,
    calls: Arc<AtomicUsize>,
}

impl<C> CallCounter<C> {
    pub fn new(inner: C) -> Self {
        Self {
            inner,
            calls: Arc::new(AtomicUsize::new(0)),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<C: GeneratorClient> GeneratorClient for CallCounter<C> {
    fn generate(&self, system: &str, user: &str, temperature: f64) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.generate(system, user, temperature)
    }

    fn id(&self) -> String {
        self.inner.id()
    }

    fn provenance(&self) -> Provenance {
        self.inner.provenance()
    }
}

impl<C: EncoderClient> EncoderClient for CallCounter<C> {
    fn encode_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.encode_batch(texts)
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn id(&self) -> String {
        self.inner.id()
    }
}

/// Template verbalizer standing in for a language model. It reads the same
/// JSON payloads a remote model would receive.
#[derive(Debug, Clone)]
pub struct OfflineGenerator {
    templates: Templates,
}

impl Default for OfflineGenerator {
    fn default() -> Self {
        Self {
            templates: Templates::bundled(),
        }
    }
}

fn label_map(v: &Value, key: &str) -> Result<BTreeMap<String, OrdinalLabel>> {
    match v.get(key) {
        None | Some(Value::Null) => Ok(BTreeMap::new()),
        Some(m) => serde_json::from_value(m.clone()).map_err(|e| Error::MalformedResponse(format!("{key}: {e}"))),
    }
}

impl OfflineGenerator {
    fn personas(&self, payload: &Value) -> Result<String> {
        let user = payload.get("User ID").and_then(Value::as_str).unwrap_or_default();
        let domain = payload.get("Domain").and_then(Value::as_str).unwrap_or_default();
        let price = label_map(payload, "category_price_level")?;
        let rating = label_map(payload, "category_rating_level")?;
        let popularity = label_map(payload, "category_popularity_level")?;
        let familiarity = label_map(payload, "category_familiarity_level")?;
        let diversity: OrdinalLabel = payload
            .get("overall_category_diversity")
            .cloned()
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| Error::MalformedResponse(format!("overall_category_diversity: {e}")))?
            .ok_or_else(|| Error::MissingCriterion("overall_category_diversity".into()))?;

        let categories: Vec<&String> = familiarity
            .keys()
            .chain(rating.keys())
            .chain(popularity.keys())
            .chain(price.keys())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let per_category = |c: Criterion, labels: &BTreeMap<String, OrdinalLabel>| -> String {
            let t = self.templates.criterion(c);
            categories
                .iter()
                .filter_map(|cat| {
                    let pattern = match labels.get(*cat) {
                        Some(l) => t.for_label(*l),
                        None => t.missing.as_deref()?,
                    };
                    Some(render(pattern, &[("category", cat)]))
                })
                .collect::<Vec<_>>()
                .join(" ")
        };
        let texts = [
            (Criterion::Ps, per_category(Criterion::Ps, &price)),
            (Criterion::Qp, per_category(Criterion::Qp, &rating)),
            (Criterion::Pb, per_category(Criterion::Pb, &popularity)),
            (Criterion::Cf, per_category(Criterion::Cf, &familiarity)),
            (
                Criterion::Cd,
                render(self.templates.criterion(Criterion::Cd).for_label(diversity), &[("domain", domain)]),
            ),
        ];
        let profiles: serde_json::Map<String, Value> = texts
            .into_iter()
            .map(|(c, t)| (c.output_key().to_string(), json!({ "persona": t })))
            .collect();
        Ok(serde_json::to_string(&json!({"User ID": user, "Profiles": profiles}))?)
    }

    fn description(&self, payload: &Value) -> Result<String> {
        let domain = payload.get("Domain").and_then(Value::as_str).unwrap_or_default();
        let list = payload
            .get("sampled_item_list")
            .and_then(Value::as_object)
            .ok_or_else(|| Error::MalformedResponse("sampled_item_list".into()))?;
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for v in list.values() {
            let cat = v.as_str().and_then(|s| s.split(" || ").nth(1)).unwrap_or("");
            if !cat.is_empty() {
                *counts.entry(cat).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let top: Vec<&str> = ranked.iter().take(3).map(|(c, _)| *c).collect();
        let top = if top.is_empty() { "assorted goods".to_string() } else { top.join(", ") };
        let text = render(
            self.templates.description(),
            &[("domain", domain), ("count", &list.len().to_string()), ("categories", &top)],
        );
        Ok(serde_json::to_string(
            &json!({"Domain": domain, "Domain Profile": {"Domain Description": text}}),
        )?)
    }
}

impl GeneratorClient for OfflineGenerator {
    fn generate(&self, _system: &str, user: &str, _temperature: f64) -> Result<String> {
        let payload: Value = serde_json::from_str(user)?;
        if payload.get("sampled_item_list").is_some() {
            self.description(&payload)
        } else if payload.get("category_familiarity_level").is_some() {
            self.personas(&payload)
        } else {
            Err(Error::Client("offline generator does not recognize this payload".into()))
        }
    }

    fn id(&self) -> String {
        "offline-template-v1".into()
    }

    fn provenance(&self) -> Provenance {
        Provenance::Template
    }
}

/// Signed feature hashing over lowercase alphanumeric tokens, token bigrams
/// and whole sentences, L2-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct HashingEncoder {
    dim: usize,
    seed: u64,
}

impl HashingEncoder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("encoder dimension must be positive".into()));
        }
        Ok(Self { dim, seed })
    }

    fn features(text: &str) -> Vec<String> {
        let mut feats = Vec::new();
        for sentence in text.split(['.', '!', '?']) {
            let toks: Vec<String> = sentence
                .split(|c: char| !c.is_alphanumeric())
                .filter(|t| !t.is_empty())
                .map(str::to_lowercase)
                .collect();
            if toks.is_empty() {
                continue;
            }
            for w in toks.windows(2) {
                feats.push(format!("b:{} {}", w[0], w[1]));
            }
            feats.push(format!("s:{}", toks.join(" ")));
            feats.extend(toks.into_iter().map(|t| format!("u:{t}")));
        }
        if feats.is_empty() {
            feats.push("<empty>".into());
        }
        feats
    }

    pub fn encode_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for f in Self::features(text) {
            let mut h = Sha256::new();
            h.update(self.seed.to_le_bytes());
            h.update(f.as_bytes());
            let d = h.finalize();
            let idx = u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) % self.dim as u64;
            let sign = if d[8] & 1 == 0 { 1.0 } else { -1.0 };
            v[idx as usize] += sign;
        }
        let n = crate::diffkit::norm(&v);
        if n == 0.0 {
            // Every feature cancelled; fall back to a fixed coordinate.
            v[0] = 1.0;
        } else {
            v.iter_mut().for_each(|x| *x /= n);
        }
        v
    }
}

impl EncoderClient for HashingEncoder {
    fn encode_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(texts.iter().map(|t| self.encode_one(t)).collect())
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn id(&self) -> String {
        format!("hashing-v1-d{}-s{}", self.dim, self.seed)
    }
}

/// Connection settings shared by the remote clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteSettings {
    /// Base URL, e.g. `https://api.openai.com/v1`.
    pub endpoint: String,
    pub chat_model: String,
    pub embedding_model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub attempts: u32,
    pub backoff_ms: u64,
    pub parallelism: usize,
}

impl Default for RemoteSettings {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1".into(),
            chat_model: "gpt-4o".into(),
            embedding_model: "text-embedding-3-large".into(),
            api_key_env: "MULTITAP_API_KEY".into(),
            timeout_secs: 120,
            attempts: 3,
            backoff_ms: 1000,
            parallelism: 4,
        }
    }
}

impl RemoteSettings {
    fn api_key(&self) -> Result<String> {
        std::env::var(&self.api_key_env)
            .map_err(|_| Error::Config(format!("environment variable {} is not set", self.api_key_env)))
    }

    fn agent(&self) -> ureq::Agent {
        ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(self.timeout_secs)))
            .build()
            .into()
    }
}

/// Runs `f` up to `attempts` times, sleeping `base * 2^k` between tries.
pub fn with_retries<T>(attempts: u32, base: Duration, mut f: impl FnMut() -> Result<T>) -> Result<T> {
    let attempts = attempts.max(1);
    let mut last = None;
    for k in 0..attempts {
        match f() {
            Ok(v) => return Ok(v),
            Err(e) => {
                log::warn!("remote call failed (attempt {}/{attempts}): {e}", k + 1);
                last = Some(e);
                if k + 1 < attempts {
                    std::thread::sleep(base * 2u32.pow(k));
                }
            }
        }
    }
    Err(last.expect("at least one attempt"))
}

fn post_json(agent: &ureq::Agent, url: &str, key: &str, body: &Value) -> Result<Value> {
    let mut resp = agent
        .post(url)
        .header("Authorization", &format!("Bearer {key}"))
        .send_json(body)
        .map_err(|e| Error::Client(format!("POST {url}: {e}")))?;
    resp.body_mut()
        .read_json::<Value>()
        .map_err(|e| Error::MalformedResponse(format!("{url}: {e}")))
}

pub struct RemoteGenerator {
    settings: RemoteSettings,
    key: String,
    agent: ureq::Agent,
}

impl RemoteGenerator {
    pub fn new(settings: RemoteSettings) -> Result<Self> {
        let key = settings.api_key()?;
        Ok(Self::with_key(settings, key))
    }

    pub fn with_key(settings: RemoteSettings, key: String) -> Self {
        let agent = settings.agent();
        Self { settings, key, agent }
    }
}

impl GeneratorClient for RemoteGenerator {
    fn generate(&self, system: &str, user: &str, temperature: f64) -> Result<String> {
        let url = format!("{}/chat/completions", self.settings.endpoint.trim_end_matches('/'));
        let body = json!({
            "model": self.settings.chat_model,
            "temperature": temperature,
            "response_format": {"type": "json_object"},
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        });
        with_retries(self.settings.attempts, Duration::from_millis(self.settings.backoff_ms), || {
            let v = post_json(&self.agent, &url, &self.key, &body)?;
            v.pointer("/choices/0/message/content")
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| Error::MalformedResponse("no choices[0].message.content".into()))
        })
    }

    fn id(&self) -> String {
        format!("remote:{}@{}", self.settings.chat_model, self.settings.endpoint)
    }
}

pub struct RemoteEncoder {
    settings: RemoteSettings,
    key: String,
    agent: ureq::Agent,
    dim: usize,
}

impl RemoteEncoder {
    pub fn new(settings: RemoteSettings, dim: usize) -> Result<Self> {
        let key = settings.api_key()?;
        Ok(Self::with_key(settings, key, dim))
    }

    pub fn with_key(settings: RemoteSettings, key: String, dim: usize) -> Self {
        let agent = settings.agent();
        Self {
            settings,
            key,
            agent,
            dim,
        }
    }
}

impl EncoderClient for RemoteEncoder {
    fn encode_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let url = format!("{}/embeddings", self.settings.endpoint.trim_end_matches('/'));
        let body = json!({
            "model": self.settings.embedding_model,
            "input": texts,
            "dimensions": self.dim,
        });
        with_retries(self.settings.attempts, Duration::from_millis(self.settings.backoff_ms), || {
            let v = post_json(&self.agent, &url, &self.key, &body)?;
            #[derive(Deserialize)]
            struct Row {
                index: usize,
                embedding: Vec<f64>,
            }
            let rows: Vec<Row> = serde_json::from_value(v.get("data").cloned().unwrap_or(Value::Null))
                .map_err(|e| Error::MalformedResponse(format!("embedding data: {e}")))?;
            let mut out = vec![Vec::new(); texts.len()];
            for r in rows {
                if r.index >= texts.len() {
                    return Err(Error::MalformedResponse(format!("embedding index {}", r.index)));
                }
                out[r.index] = r.embedding;
            }
            if let Some(bad) = out.iter().find(|v| v.len() != self.dim) {
                return Err(Error::Shape(format!(
                    "embedding has {} dimensions, expected {}",
                    bad.len(),
                    self.dim
                )));
            }
            Ok(out)
        })
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn id(&self) -> String {
        format!("remote:{}@{}:d{}", self.settings.embedding_model, self.settings.endpoint, self.dim)
    }
}
