//! LightGCN backbone: layer-averaged propagation over the symmetrically
//! normalized user-item graph, trained with BPR.
//!
//! Node order is users (ascending id) followed by items (ascending id).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::InteractionRecord;
use crate::diffkit::{adam_step, checkpoint, dot, log_sigmoid, sigmoid, AdamConfig, ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::eval::{full_ranking_eval, Averaging, Catalog};

#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteGraph {
    users: Vec<String>,
    items: Vec<String>,
    user_index: BTreeMap<String, usize>,
    item_index: BTreeMap<String, usize>,
    /// Deduplicated `(user, item)` index pairs, sorted.
    edges: Vec<(usize, usize)>,
    user_degree: Vec<usize>,
    item_degree: Vec<usize>,
}

impl BipartiteGraph {
    /// Only nodes with at least one edge are indexed.
    pub fn from_interactions(interactions: &[InteractionRecord]) -> Result<Self> {
        let pairs: BTreeSet<(&str, &str)> = interactions
            .iter()
            .map(|r| (r.user.as_str(), r.item.as_str()))
            .collect();
        Self::from_pairs(pairs.iter().map(|&(u, i)| (u.to_string(), i.to_string())))
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let pairs: BTreeSet<(String, String)> = pairs.into_iter().collect();
        if pairs.is_empty() {
            return Err(Error::EmptyInput("graph with no edges".into()));
        }
        let users: Vec<String> = pairs.iter().map(|(u, _)| u.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        let items: Vec<String> = pairs.iter().map(|(_, i)| i.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        let user_index: BTreeMap<String, usize> = users.iter().enumerate().map(|(k, u)| (u.clone(), k)).collect();
        let item_index: BTreeMap<String, usize> = items.iter().enumerate().map(|(k, i)| (i.clone(), k)).collect();
        let mut edges: Vec<(usize, usize)> = pairs.iter().map(|(u, i)| (user_index[u], item_index[i])).collect();
        edges.sort_unstable();
        let mut user_degree = vec![0; users.len()];
        let mut item_degree = vec![0; items.len()];
        for &(u, i) in &edges {
            user_degree[u] += 1;
            item_degree[i] += 1;
        }
        Ok(Self {
            users,
            items,
            user_index,
            item_index,
            edges,
            user_degree,
            item_degree,
        })
    }

    pub fn users(&self) -> &[String] {
        &self.users
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn user_idx(&self, user: &str) -> Option<usize> {
        self.user_index.get(user).copied()
    }

    pub fn item_idx(&self, item: &str) -> Option<usize> {
        self.item_index.get(item).copied()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn user_degree(&self) -> &[usize] {
        &self.user_degree
    }

    pub fn item_degree(&self) -> &[usize] {
        &self.item_degree
    }

    pub fn n_nodes(&self) -> usize {
        self.users.len() + self.items.len()
    }
}

/// Symmetric `(U+I) x (U+I)` matrix in CSR form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col: Vec<usize>,
    val: Vec<f64>,
}

impl SparseMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.val.len()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let lo = self.row_ptr[r];
        let hi = self.row_ptr[r + 1];
        match self.col[lo..hi].binary_search(&c) {
            Ok(k) => self.val[lo + k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (r, row) in d.iter_mut().enumerate() {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                row[self.col[k]] = self.val[k];
            }
        }
        d
    }

    /// `A x` for an `n x d` tensor, parallel over output rows.
    pub fn multiply(&self, x: &Tensor) -> Tensor {
        let d = x.cols();
        let mut out = Tensor::zeros(&[self.n, d]);
        out.data_mut()
            .par_chunks_mut(d.max(1))
            .enumerate()
            .for_each(|(r, row)| {
                for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                    let a = self.val[k];
                    for (o, v) in row.iter_mut().zip(x.row(self.col[k])) {
                        *o += a * v;
                    }
                }
            });
        out
    }
}

/// `Â` with `1/sqrt(deg(u) deg(i))` on each observed edge, no self-loops.
pub fn normalized_adjacency(graph: &BipartiteGraph) -> SparseMatrix {
    let nu = graph.users.len();
    let n = graph.n_nodes();
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for &(u, i) in &graph.edges {
        let w = 1.0 / ((graph.user_degree[u] * graph.item_degree[i]) as f64).sqrt();
        rows[u].push((nu + i, w));
        rows[nu + i].push((u, w));
    }
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col = Vec::new();
    let mut val = Vec::new();
    row_ptr.push(0);
    for mut r in rows {
        r.sort_by_key(|&(c, _)| c);
        for (c, v) in r {
            col.push(c);
            val.push(v);
        }
        row_ptr.push(col.len());
    }
    SparseMatrix { n, row_ptr, col, val }
}

/// Mean over layers `0..=L` of `Â^l E`.
pub fn propagate(e: &Tensor, adj: &SparseMatrix, layers: usize) -> Tensor {
    let mut acc = e.clone();
    let mut cur = e.clone();
    for _ in 0..layers {
        cur = adj.multiply(&cur);
        acc.add_assign(&cur).expect("same shape");
    }
    acc.scale(1.0 / (layers + 1) as f64);
    acc
}

/// Adjoint of [`propagate`]; `Â` is symmetric, so it is the same map.
pub fn propagate_backward(grad: &Tensor, adj: &SparseMatrix, layers: usize) -> Tensor {
    propagate(grad, adj, layers)
}

/// Propagated ID embeddings keyed by entity id.
#[derive(Debug, Clone, PartialEq)]
pub struct IdEmbeddingTable {
    pub users: Vec<String>,
    pub items: Vec<String>,
    pub user: Tensor,
    pub item: Tensor,
}

impl IdEmbeddingTable {
    pub fn dim(&self) -> usize {
        self.user.cols()
    }

    pub fn user_vec(&self, user: &str) -> Option<&[f64]> {
        self.users.binary_search_by(|u| u.as_str().cmp(user)).ok().map(|k| self.user.row(k))
    }

    pub fn item_vec(&self, item: &str) -> Option<&[f64]> {
        self.items.binary_search_by(|i| i.as_str().cmp(item)).ok().map(|k| self.item.row(k))
    }

    pub fn score(&self, user: &str, item: &str) -> Option<f64> {
        Some(dot(self.user_vec(user)?, self.item_vec(item)?))
    }

    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert("id.user".into(), self.user.clone());
        m.insert("id.item".into(), self.item.clone());
        m
    }

    /// Ids are stored in a JSON sidecar next to the checkpoint.
    pub fn save(&self, path: &Path, seed: u64, config_hash: &str) -> Result<()> {
        checkpoint::save(path, &self.to_tensors(), seed, config_hash)?;
        let ids = serde_json::json!({"users": self.users, "items": self.items});
        checkpoint::write_atomic(&path.with_extension("ids.json"), serde_json::to_string(&ids)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut t = checkpoint::load(path)?;
        #[derive(Deserialize)]
        struct Ids {
            users: Vec<String>,
            items: Vec<String>,
        }
        let ids: Ids = serde_json::from_str(&std::fs::read_to_string(path.with_extension("ids.json"))?)?;
        let take = |t: &mut BTreeMap<String, Tensor>, k: &str| {
            t.remove(k).ok_or_else(|| Error::Checkpoint(format!("missing tensor {k}")))
        };
        let user = take(&mut t, "id.user")?;
        let item = take(&mut t, "id.item")?;
        if user.rows() != ids.users.len() || item.rows() != ids.items.len() {
            return Err(Error::Checkpoint("id sidecar does not match tensor rows".into()));
        }
        Ok(Self {
            users: ids.users,
            items: ids.items,
            user,
            item,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GcnConfig {
    pub dim: usize,
    pub layers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub negatives: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub init_std: f64,
}

impl Default for GcnConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            layers: 3,
            epochs: 100,
            batch_size: 1024,
            negatives: 1,
            lr: 1e-3,
            weight_decay: 1e-4,
            patience: 10,
            init_std: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub valid_hr5: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub table: IdEmbeddingTable,
    pub best_epoch: usize,
    pub best_valid_hr5: f64,
    pub history: Vec<EpochLog>,
}

/// Uniform draw over items absent from `seen`; `None` if there are none.
pub(crate) fn sample_negative<R: Rng + ?Sized>(rng: &mut R, n_items: usize, seen: &BTreeSet<usize>) -> Option<usize> {
    if seen.len() >= n_items {
        return None;
    }
    loop {
        let j = rng.random_range(0..n_items);
        if !seen.contains(&j) {
            return Some(j);
        }
    }
}

fn table_from(graph: &BipartiteGraph, out: &Tensor) -> IdEmbeddingTable {
    let nu = graph.users.len();
    let idx_u: Vec<usize> = (0..nu).collect();
    let idx_i: Vec<usize> = (nu..graph.n_nodes()).collect();
    IdEmbeddingTable {
        users: graph.users.clone(),
        items: graph.items.clone(),
        user: out.gather_rows(&idx_u),
        item: out.gather_rows(&idx_i),
    }
}

/// HR@5 of dot-product scores on held-out events, train items excluded.
pub fn valid_hr5(table: &IdEmbeddingTable, train: &[InteractionRecord], valid: &[InteractionRecord]) -> Result<f64> {
    if valid.is_empty() {
        return Ok(0.0);
    }
    let catalog = Catalog::new(table.items.iter().cloned());
    let mut seen: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for r in train {
        seen.entry(r.user.clone()).or_default().insert(r.item.clone());
    }
    let res = full_ranking_eval(
        |u| {
            let uv = table.user_vec(u)?;
            Some((0..table.items.len()).map(|k| dot(uv, table.item.row(k))).collect())
        },
        &catalog,
        valid,
        &seen,
        &[5],
        Averaging::PerInteraction,
    )?;
    Ok(res.hr_at(5))
}

/// BPR-trains layer-0 embeddings through the propagation and returns the
/// propagated table from the best validation epoch.
pub fn pretrain_id_embeddings(
    train: &[InteractionRecord],
    valid: &[InteractionRecord],
    cfg: &GcnConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    let graph = BipartiteGraph::from_interactions(train)?;
    let adj = normalized_adjacency(&graph);
    let nu = graph.users.len();
    let ni = graph.items.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    store.insert("emb", Tensor::randn(&[graph.n_nodes(), cfg.dim], cfg.init_std, &mut rng));
    let adam = AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    adam.validate()?;

    let mut seen: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); nu];
    for &(u, i) in graph.edges() {
        seen[u].insert(i);
    }
    let mut order: Vec<(usize, usize)> = graph.edges().to_vec();
    let batch = cfg.batch_size.max(1);

    let mut best = (0usize, f64::NEG_INFINITY, store.snapshot());
    let mut history = Vec::new();
    let mut since_best = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_terms = 0usize;
        for chunk in order.chunks(batch) {
            let mut triples = Vec::with_capacity(chunk.len() * cfg.negatives);
            for &(u, i) in chunk {
                for _ in 0..cfg.negatives {
                    if let Some(j) = sample_negative(&mut rng, ni, &seen[u]) {
                        triples.push((u, i, j));
                    }
                }
            }
            if triples.is_empty() {
                continue;
            }
            let x = propagate(store.value("emb"), &adj, cfg.layers);
            let mut dx = Tensor::zeros(x.shape());
            let scale = 1.0 / triples.len() as f64;
            let mut loss = 0.0;
            for &(u, i, j) in &triples {
                let (xu, xi, xj) = (x.row(u), x.row(nu + i), x.row(nu + j));
                let diff = dot(xu, xi) - dot(xu, xj);
                loss -= log_sigmoid(diff);
                // d(-log σ(diff))/d diff = -(1 - σ(diff))
                let g = -(1.0 - sigmoid(diff)) * scale;
                let du: Vec<f64> = xi.iter().zip(xj).map(|(a, b)| g * (a - b)).collect();
                let di: Vec<f64> = xu.iter().map(|a| g * a).collect();
                for (d, v) in dx.row_mut(u).iter_mut().zip(&du) {
                    *d += v;
                }
                for (d, v) in dx.row_mut(nu + i).iter_mut().zip(&di) {
                    *d += v;
                }
                for (d, v) in dx.row_mut(nu + j).iter_mut().zip(&di) {
                    *d -= v;
                }
            }
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            epoch_loss += loss;
            n_terms += triples.len();
            let de = propagate_backward(&dx, &adj, cfg.layers);
            store.accumulate("emb", &de)?;
            adam_step(&mut store, &adam)?;
        }
        let mean_loss = epoch_loss / n_terms.max(1) as f64;
        let table = table_from(&graph, &propagate(store.value("emb"), &adj, cfg.layers));
        let hr = valid_hr5(&table, train, valid)?;
        log::debug!("gcn epoch {epoch}: loss {mean_loss:.5} valid HR@5 {hr:.4}");
        history.push(EpochLog {
            epoch,
            loss: mean_loss,
            valid_hr5: hr,
        });
        // Without validation events the last epoch is kept.
        if hr > best.1 || valid.is_empty() {
            best = (epoch, hr, store.snapshot());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    store.restore(&best.2);
    let table = table_from(&graph, &propagate(store.value("emb"), &adj, cfg.layers));
    Ok(PretrainOutcome {
        table,
        best_epoch: best.0,
        best_valid_hr5: best.1,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(p: &[(&str, &str)]) -> BipartiteGraph {
        BipartiteGraph::from_pairs(p.iter().map(|(u, i)| (u.to_string(), i.to_string()))).unwrap()
    }

    #[test]
    fn degree_normalization() {
        let g = pairs(&[("u", "i")]);
        let a = normalized_adjacency(&g);
        assert_eq!((a.get(0, 1), a.get(1, 0)), (1.0, 1.0));

        let g = pairs(&[("u", "a"), ("u", "b"), ("u", "c"), ("u", "d")]);
        let a = normalized_adjacency(&g);
        assert_eq!(a.get(0, 1), 0.5);
        assert_eq!(a.nnz(), 8);
    }

    #[test]
    fn duplicate_edges_collapse() {
        let g = pairs(&[("u", "i"), ("u", "i"), ("v", "i")]);
        assert_eq!(g.edges().len(), 2);
        assert_eq!(g.item_degree(), &[2]);
    }

    #[test]
    fn square_graph_one_layer() {
        // u1-i1, u1-i2, u2-i1: deg u1=2, u2=1, i1=2, i2=1.
        let g = pairs(&[("u1", "i1"), ("u1", "i2"), ("u2", "i1")]);
        let a = normalized_adjacency(&g);
        let e = Tensor::matrix(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = propagate(&e, &a, 1);
        let h = 0.5f64;
        let r = 1.0 / 2f64.sqrt();
        // Â e by hand, rows ordered u1, u2, i1, i2.
        let ae = [h * 3.0 + r * 4.0, r * 3.0, h * 1.0 + r * 2.0, r * 1.0];
        for ((o, x), y) in out.data().iter().zip(e.data()).zip(ae) {
            assert_eq!(*o, (x + y) / 2.0);
        }
    }

    #[test]
    fn separable_single_user() {
        let train = vec![
            InteractionRecord { user: "u".into(), item: "A".into(), rating: 5.0, ts: 1 },
            InteractionRecord { user: "w".into(), item: "B".into(), rating: 5.0, ts: 1 },
        ];
        let cfg = GcnConfig {
            dim: 8,
            epochs: 30,
            lr: 0.05,
            ..GcnConfig::default()
        };
        let out = pretrain_id_embeddings(&train, &[], &cfg, 3).unwrap();
        let t = out.table;
        assert!(t.score("u", "A").unwrap() > t.score("u", "B").unwrap());
    }
}
