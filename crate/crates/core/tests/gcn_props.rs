#![allow(clippy::needless_range_loop)]

use std::collections::BTreeSet;

use multitap::corpus::InteractionRecord;
use multitap::diffkit::Tensor;
use multitap::eval::{full_ranking_eval, popularity_scores, Averaging, Catalog};
use multitap::gcn::{normalized_adjacency, pretrain_id_embeddings, propagate, BipartiteGraph, GcnConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_graph(seed: u64, nu: usize, ni: usize, p: f64) -> BipartiteGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = BTreeSet::new();
    for u in 0..nu {
        for i in 0..ni {
            if rng.random::<f64>() < p {
                pairs.insert((format!("u{u:02}"), format!("i{i:02}")));
            }
        }
    }
    if pairs.is_empty() {
        pairs.insert(("u00".to_string(), "i00".to_string()));
    }
    BipartiteGraph::from_pairs(pairs).unwrap()
}

/// Dense `Â` built from degree counts of the edge list.
fn dense_adjacency(g: &BipartiteGraph) -> Vec<Vec<f64>> {
    let nu = g.users().len();
    let n = g.n_nodes();
    let mut deg = vec![0.0f64; n];
    for &(u, i) in g.edges() {
        deg[u] += 1.0;
        deg[nu + i] += 1.0;
    }
    let mut a = vec![vec![0.0; n]; n];
    for &(u, i) in g.edges() {
        let w = 1.0 / (deg[u] * deg[nu + i]).sqrt();
        a[u][nu + i] = w;
        a[nu + i][u] = w;
    }
    a
}

fn dense_propagate(a: &[Vec<f64>], e: &[Vec<f64>], layers: usize) -> Vec<Vec<f64>> {
    let n = a.len();
    let d = e[0].len();
    let mut acc = e.to_vec();
    let mut cur = e.to_vec();
    for _ in 0..layers {
        let mut next = vec![vec![0.0; d]; n];
        for r in 0..n {
            for c in 0..n {
                for k in 0..d {
                    next[r][k] += a[r][c] * cur[c][k];
                }
            }
        }
        for r in 0..n {
            for k in 0..d {
                acc[r][k] += next[r][k];
            }
        }
        cur = next;
    }
    for row in &mut acc {
        for v in row {
            *v /= (layers + 1) as f64;
        }
    }
    acc
}

#[test]
fn adjacency_matches_dense_build_exactly() {
    let g = random_graph(8, 8, 8, 0.35);
    assert_eq!(normalized_adjacency(&g).to_dense(), dense_adjacency(&g));
}

#[test]
fn three_layers_on_ten_nodes() {
    let g = random_graph(10, 5, 5, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let e = Tensor::randn(&[g.n_nodes(), 3], 1.0, &mut rng);
    let got = propagate(&e, &normalized_adjacency(&g), 3);
    let rows: Vec<Vec<f64>> = (0..g.n_nodes()).map(|r| e.row(r).to_vec()).collect();
    let want = dense_propagate(&dense_adjacency(&g), &rows, 3);
    for r in 0..g.n_nodes() {
        for k in 0..3 {
            assert!((got.get2(r, k) - want[r][k]).abs() < 1e-10);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sparse_equals_dense(seed in any::<u64>(), nu in 1usize..25, ni in 1usize..25, layers in 0usize..5) {
        let g = random_graph(seed, nu, ni, 0.3);
        prop_assume!(g.n_nodes() <= 50);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let e = Tensor::randn(&[g.n_nodes(), 4], 1.0, &mut rng);
        let adj = normalized_adjacency(&g);
        let got = propagate(&e, &adj, layers);
        let rows: Vec<Vec<f64>> = (0..g.n_nodes()).map(|r| e.row(r).to_vec()).collect();
        let want = dense_propagate(&dense_adjacency(&g), &rows, layers);
        for r in 0..g.n_nodes() {
            for k in 0..4 {
                prop_assert!((got.get2(r, k) - want[r][k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_layers_is_identity_and_propagation_is_linear(seed in any::<u64>(), alpha in -5.0f64..5.0) {
        let g = random_graph(seed, 6, 7, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = Tensor::randn(&[g.n_nodes(), 3], 1.0, &mut rng);
        let adj = normalized_adjacency(&g);
        prop_assert_eq!(propagate(&e, &adj, 0), e.clone());
        let mut scaled = e.clone();
        scaled.scale(alpha);
        let lhs = propagate(&scaled, &adj, 3);
        let mut rhs = propagate(&e, &adj, 3);
        rhs.scale(alpha);
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-9);
    }
}

/// Four blocks of 50 users; each block draws from its own 10-item slice of
/// a 40-item catalog, with a few globally popular off-block items.
fn blocked_corpus(seed: u64) -> (Vec<InteractionRecord>, Vec<InteractionRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut valid = Vec::new();
    for u in 0..200 {
        let block = u / 50;
        let mut items = BTreeSet::new();
        while items.len() < 6 {
            items.insert(block * 10 + rng.random_range(0..10));
        }
        let popular = 40 + rng.random_range(0..2);
        let user = format!("u{u:03}");
        let mk = |i: usize, ts| InteractionRecord {
            user: user.clone(),
            item: format!("i{i:02}"),
            rating: 5.0,
            ts,
        };
        let items: Vec<usize> = items.into_iter().collect();
        for (t, &i) in items[..5].iter().enumerate() {
            train.push(mk(i, t as i64));
        }
        train.push(mk(popular, 9));
        valid.push(mk(items[5], 10));
    }
    (train, valid)
}

#[test]
fn pretraining_beats_popularity_and_is_deterministic() {
    let (train, valid) = blocked_corpus(4);
    let cfg = GcnConfig {
        dim: 16,
        epochs: 40,
        lr: 0.01,
        batch_size: 256,
        ..GcnConfig::default()
    };
    let a = pretrain_id_embeddings(&train, &valid, &cfg, 11).unwrap();
    let b = pretrain_id_embeddings(&train, &valid, &cfg, 11).unwrap();
    assert_eq!(a.table, b.table);
    assert_eq!(a.history, b.history);

    let catalog = Catalog::new(a.table.items.iter().cloned());
    let mut seen = std::collections::BTreeMap::<String, BTreeSet<String>>::new();
    for r in &train {
        seen.entry(r.user.clone()).or_default().insert(r.item.clone());
    }
    let pop = popularity_scores(&catalog, &train);
    let pop_hr = full_ranking_eval(|_| Some(pop.clone()), &catalog, &valid, &seen, &[5], Averaging::PerInteraction)
        .unwrap()
        .hr_at(5);
    assert!(
        a.best_valid_hr5 > pop_hr,
        "lightgcn {} vs popularity {pop_hr}",
        a.best_valid_hr5
    );
}

#[test]
fn checkpoint_round_trip() {
    let (train, valid) = blocked_corpus(5);
    let cfg = GcnConfig {
        dim: 4,
        epochs: 2,
        ..GcnConfig::default()
    };
    let out = pretrain_id_embeddings(&train, &valid, &cfg, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("seed_1.ckpt");
    out.table.save(&p, 1, "h").unwrap();
    let back = multitap::gcn::IdEmbeddingTable::load(&p).unwrap();
    assert_eq!(back, out.table);
}
