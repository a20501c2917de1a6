use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use multitap::corpus::{DomainDataset, InteractionRecord, ItemMeta};
use multitap::idh::{IdhAnalysis, ItemCriterion};
use multitap::persona::client::Provenance;
use multitap::persona::prompt::build_persona_request;
use multitap::persona::{
    build_domain_description, build_persona_dbs, category_diversity, category_familiarity_labels, generate_personas,
    Cache, CallCounter, Criterion, EncoderClient, GeneratorClient, OfflineGenerator, PromptAssets, RemoteEncoder,
    RemoteGenerator, RemoteSettings,
};
use multitap::quantile::OrdinalLabel;
use multitap::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 30 users, 4 categories, prices missing for category "D".
fn synthetic(seed: u64) -> DomainDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cats = ["A", "B", "C", "D"];
    let items: Vec<ItemMeta> = (0..40)
        .map(|k| ItemMeta {
            item: format!("i{k:02}"),
            title: format!("Item {k}"),
            category: cats[k % 4].to_string(),
            price: (k % 4 != 3).then(|| 5.0 + rng.random_range(0.0..100.0)),
            avg_rating: 1.0 + rng.random_range(0.0..4.0),
            rating_count: rng.random_range(1..500),
            description: Some(format!("about item {k}")),
        })
        .collect();
    let mut inter = Vec::new();
    for u in 0..30 {
        let n = rng.random_range(1..12);
        for t in 0..n {
            inter.push(InteractionRecord {
                user: format!("u{u:02}"),
                item: format!("i{:02}", rng.random_range(0..40)),
                rating: rng.random_range(1..=5) as f64,
                ts: (t * 10 + u) as i64,
            });
        }
    }
    inter.sort_by(|a, b| (&a.user, &a.item, a.ts).cmp(&(&b.user, &b.item, b.ts)));
    inter.dedup_by(|a, b| a.user == b.user && a.item == b.item && a.ts == b.ts);
    DomainDataset::new("Toys", inter, items).unwrap()
}

/// Counting oracle for a nearest-rank tertile label.
fn oracle_label(all: &[usize], x: usize) -> OrdinalLabel {
    let mut s = all.to_vec();
    s.sort_unstable();
    let n = s.len();
    let r1 = (1..=n).find(|r| 3 * r >= n).unwrap();
    let r2 = (1..=n).find(|r| 3 * r >= 2 * n).unwrap();
    if x < s[r1 - 1] {
        OrdinalLabel::Low
    } else if x < s[r2 - 1] {
        OrdinalLabel::Medium
    } else {
        OrdinalLabel::High
    }
}

#[test]
fn diversity_and_familiarity_match_enumeration() {
    let ds = synthetic(1);
    let mut cats_of: BTreeMap<&str, std::collections::BTreeSet<&str>> = BTreeMap::new();
    let mut events: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for r in ds.interactions() {
        let c = ds.item(&r.item).unwrap().category.as_str();
        cats_of.entry(&r.user).or_default().insert(c);
        *events.entry((c, &r.user)).or_default() += 1;
    }
    let xs: Vec<usize> = cats_of.values().map(|s| s.len()).collect();
    let cd = category_diversity(&ds).unwrap();
    for (u, s) in &cats_of {
        assert_eq!(cd[*u], (s.len(), oracle_label(&xs, s.len())));
    }
    let cf = category_familiarity_labels(&ds).unwrap();
    for (&(c, u), &n) in &events {
        let col: Vec<usize> = events.iter().filter(|((c2, _), _)| *c2 == c).map(|(_, &v)| v).collect();
        assert_eq!(cf[c][u], oracle_label(&col, n), "{c}/{u}");
    }
}

#[test]
fn coverage_and_offline_generation() {
    let ds = synthetic(2);
    let idh = IdhAnalysis::run(&ds, &ItemCriterion::ALL).unwrap();
    let dbs = build_persona_dbs(&ds, &idh).unwrap();
    let gen = OfflineGenerator::default();
    let (desc, texts) = build_domain_description(&ds, &gen, None).unwrap();
    assert_eq!(texts.len(), 40);
    assert_eq!(build_domain_description(&ds, &gen, None).unwrap().0, desc);
    let assets = PromptAssets::new(&ds, desc.clone(), texts);

    for db in &dbs {
        let cats: Vec<&str> = db.categories().collect();
        assert_eq!(db.rating.len(), cats.len());
        assert_eq!(db.popularity.len(), cats.len());
        // Every category but the unpriced one carries a price label.
        let priced: Vec<&str> = cats.iter().copied().filter(|c| *c != "D").collect();
        assert_eq!(db.price.keys().map(String::as_str).collect::<Vec<_>>(), priced);
        let req = build_persona_request(db, &ds, &idh, &desc).unwrap();
        let p = generate_personas(&req, &assets, &gen, None).unwrap();
        assert_eq!(p.provenance, Provenance::Template);
        assert_eq!(p.texts.len(), 5);
        assert!(p.texts.values().all(|t| !t.is_empty()));
        for (cat, label) in &db.price {
            if *label == OrdinalLabel::High {
                assert!(p.texts[&Criterion::Ps].contains(&format!("prefers higher-priced items in {cat}")));
            }
        }
        if db.familiarity.contains_key("D") {
            assert!(p.texts[&Criterion::Ps].contains("no price signal in D"));
        }
    }
}

#[test]
fn cache_hit_makes_no_second_call() {
    let ds = synthetic(3);
    let idh = IdhAnalysis::run(&ds, &ItemCriterion::ALL).unwrap();
    let dbs = build_persona_dbs(&ds, &idh).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cache = Cache::new(dir.path());
    let gen = CallCounter::new(OfflineGenerator::default());
    let assets = PromptAssets::new(&ds, "d".into(), vec![]);
    let req = build_persona_request(&dbs[0], &ds, &idh, "d").unwrap();
    let a = generate_personas(&req, &assets, &gen, Some(&cache)).unwrap();
    let b = generate_personas(&req, &assets, &gen, Some(&cache)).unwrap();
    assert_eq!(gen.calls(), 1);
    assert_eq!(a, b);
    let fresh = generate_personas(&req, &assets, &OfflineGenerator::default(), None).unwrap();
    assert_eq!(fresh.texts, a.texts);
}

/// Serves canned `(status, body)` replies in order, one per connection,
/// recording request bodies.
fn mock_server(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let h = thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(String::from_utf8(buf).unwrap());
            let mut s = stream;
            write!(
                s,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
            s.flush().unwrap();
        }
    });
    (url, seen, h)
}

fn settings(url: &str) -> RemoteSettings {
    RemoteSettings {
        endpoint: url.to_string(),
        backoff_ms: 1,
        timeout_secs: 10,
        ..RemoteSettings::default()
    }
}

#[test]
fn remote_generator_retries_then_succeeds() {
    let content = r#"{"User ID":"u","Profiles":{"price_centric":{"persona":"p"}}}"#;
    let ok = serde_json::json!({"choices": [{"message": {"content": content}}]}).to_string();
    let (url, seen, h) = mock_server(vec![(500, "{}".into()), (200, ok)]);
    let g = RemoteGenerator::with_key(settings(&url), "k".into());
    let out = g.generate("sys", "{\"a\":1}", 0.7).unwrap();
    h.join().unwrap();
    assert_eq!(out, content);
    let bodies = seen.lock().unwrap();
    assert_eq!(bodies.len(), 2);
    let sent: serde_json::Value = serde_json::from_str(&bodies[1]).unwrap();
    assert_eq!(sent["temperature"], 0.7);
    assert_eq!(sent["messages"][0]["role"], "system");
}

#[test]
fn remote_generator_gives_up_after_three_attempts() {
    let (url, seen, h) = mock_server(vec![(503, "{}".into()); 3]);
    let g = RemoteGenerator::with_key(settings(&url), "k".into());
    assert!(matches!(g.generate("s", "u", 1.0), Err(Error::Client(_))));
    h.join().unwrap();
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn remote_encoder_orders_by_index_and_checks_dims() {
    let body = serde_json::json!({"data": [
        {"index": 1, "embedding": [0.0, 1.0]},
        {"index": 0, "embedding": [1.0, 0.0]},
    ]})
    .to_string();
    let (url, _, h) = mock_server(vec![(200, body)]);
    let e = RemoteEncoder::with_key(settings(&url), "k".into(), 2);
    let v = e.encode_batch(&["a".into(), "b".into()]).unwrap();
    h.join().unwrap();
    assert_eq!(v, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);

    let bad = serde_json::json!({"data": [{"index": 0, "embedding": [1.0]}]}).to_string();
    let (url, _, h) = mock_server(vec![(200, bad.clone()), (200, bad.clone()), (200, bad)]);
    let e = RemoteEncoder::with_key(settings(&url), "k".into(), 2);
    assert!(e.encode_batch(&["a".into()]).is_err());
    h.join().unwrap();
}

#[test]
fn missing_api_key_is_a_config_error() {
    let s = RemoteSettings {
        api_key_env: "MULTITAP_TEST_KEY_THAT_IS_NOT_SET".into(),
        ..RemoteSettings::default()
    };
    assert!(matches!(RemoteGenerator::new(s), Err(Error::Config(_))));
}
