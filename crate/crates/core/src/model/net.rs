//! The trainable recommender: aggregated personas and item semantics fused
//! with ID embeddings, scored by dot product.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use super::aggregate::{aggregate_backward, aggregate_forward, init_aggregator, stack_personas};
use super::loss::{bpr_term, bpr_term_grad};
use super::transfer::info_nce;
use super::{AggregationMode, TrainConfig, TransferMode};
use crate::diffkit::{
    affine, affine_backward, attention_backward, concat_cols, dot, scaled_dot_attention, split_cols, Attention,
    ParameterStore, Tensor,
};
use crate::error::{Error, Result};
use crate::gcn::IdEmbeddingTable;
use crate::persona::PersonaEmbeddingSet;

pub const FUSE_USER_W: &str = "fuse.user.w";
pub const FUSE_USER_B: &str = "fuse.user.b";
pub const FUSE_ITEM_W: &str = "fuse.item.w";
pub const FUSE_ITEM_B: &str = "fuse.item.b";
pub const ID_USER: &str = "id.user";
pub const ID_ITEM: &str = "id.item";

/// Frozen source-side persona (`h`) and ID (`v`) rows of overlapping users,
/// in ascending user order.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceReps {
    pub users: Vec<String>,
    pub h: Tensor,
    pub v: Tensor,
}

impl SourceReps {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

/// Source rows restricted to users the target model knows.
#[derive(Debug, Clone)]
struct TransferLink {
    /// Target user index to row of `h`/`v`.
    rows: BTreeMap<usize, usize>,
    h: Tensor,
    v: Tensor,
}

/// Loss components of one batch, each averaged over its own terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub rec: f64,
    pub dpl: f64,
    pub total: f64,
    pub anchors: usize,
}

/// A `(user, positive item, negative item)` triple of model indices.
pub type Triple = (usize, usize, usize);

#[derive(Debug, Clone)]
pub struct MultiTapModel {
    pub aggregation: AggregationMode,
    users: Vec<String>,
    items: Vec<String>,
    user_index: BTreeMap<String, usize>,
    item_index: BTreeMap<String, usize>,
    personas: Vec<Tensor>,
    semantics: Tensor,
    persona_dim: usize,
    link: Option<TransferLink>,
    pub store: ParameterStore,
}

impl MultiTapModel {
    /// Users come from the persona table, items from the semantic table.
    /// ID rows start from the pretrained backbone; entities it lacks get
    /// small random rows so that cosine terms stay defined.
    pub fn new<R: Rng + ?Sized>(
        personas: &BTreeMap<String, PersonaEmbeddingSet>,
        item_semantics: &BTreeMap<String, Vec<f64>>,
        ids: &IdEmbeddingTable,
        cfg: &TrainConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if personas.is_empty() || item_semantics.is_empty() {
            return Err(Error::EmptyInput("model needs users with personas and items with semantics".into()));
        }
        let users: Vec<String> = personas.keys().cloned().collect();
        let items: Vec<String> = item_semantics.keys().cloned().collect();
        let stacked: Vec<Tensor> = personas.values().map(stack_personas).collect::<Result<_>>()?;
        let n = stacked[0].cols();
        if let Some(bad) = stacked.iter().position(|s| s.cols() != n) {
            return Err(Error::Shape(format!("persona width of {} differs from {n}", users[bad])));
        }
        let m = item_semantics.values().next().map_or(0, Vec::len);
        let sem_rows: Vec<Vec<f64>> = item_semantics.values().cloned().collect();
        if sem_rows.iter().any(|r| r.len() != m) || m == 0 {
            return Err(Error::Shape("item semantic vectors must share a positive width".into()));
        }
        let semantics = Tensor::from_rows(&sem_rows)?;
        let h = cfg.persona_dim.unwrap_or(n);
        let d = ids.dim();

        let mut store = ParameterStore::new();
        init_aggregator(&mut store, cfg.aggregation, n, h, cfg.init_std, rng);
        store.insert(FUSE_USER_W, Tensor::randn(&[h + d, cfg.fusion_dim], cfg.init_std, rng));
        store.insert(FUSE_USER_B, Tensor::zeros(&[cfg.fusion_dim]));
        store.insert(FUSE_ITEM_W, Tensor::randn(&[m + d, cfg.fusion_dim], cfg.init_std, rng));
        store.insert(FUSE_ITEM_B, Tensor::zeros(&[cfg.fusion_dim]));
        store.insert(ID_USER, id_rows(&users, |u| ids.user_vec(u), d, cfg.init_std, rng));
        store.insert(ID_ITEM, id_rows(&items, |i| ids.item_vec(i), d, cfg.init_std, rng));

        Ok(Self {
            aggregation: cfg.aggregation,
            user_index: users.iter().enumerate().map(|(k, u)| (u.clone(), k)).collect(),
            item_index: items.iter().enumerate().map(|(k, i)| (i.clone(), k)).collect(),
            users,
            items,
            personas: stacked,
            semantics,
            persona_dim: h,
            link: None,
            store,
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

    pub fn persona_dim(&self) -> usize {
        self.persona_dim
    }

    /// Connects frozen source rows. Returns the number of linked users,
    /// which is the transfer population.
    pub fn attach_source(&mut self, source: &SourceReps) -> Result<usize> {
        if source.h.cols() != self.persona_dim {
            return Err(Error::Shape(format!(
                "source persona width {} vs target {}",
                source.h.cols(),
                self.persona_dim
            )));
        }
        if source.v.cols() != self.store.value(ID_USER).cols() {
            return Err(Error::Shape("source and target ID widths differ".into()));
        }
        let mut rows = BTreeMap::new();
        let mut keep = Vec::new();
        for (r, u) in source.users.iter().enumerate() {
            if let Some(t) = self.user_idx(u) {
                rows.insert(t, keep.len());
                keep.push(r);
            }
        }
        let n = keep.len();
        self.link = Some(TransferLink {
            rows,
            h: source.h.gather_rows(&keep),
            v: source.v.gather_rows(&keep),
        });
        Ok(n)
    }

    /// Overwrites every parameter from `tensors`; names and shapes must
    /// match the model exactly.
    pub fn load_parameters(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let ours: BTreeSet<&str> = self.store.names().collect();
        let theirs: BTreeSet<&str> = tensors.keys().map(String::as_str).collect();
        if ours != theirs {
            return Err(Error::Checkpoint(format!(
                "parameter names differ: model has {ours:?}, checkpoint has {theirs:?}"
            )));
        }
        for (name, t) in tensors {
            if t.shape() != self.store.value(name).shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    self.store.value(name).shape()
                )));
            }
        }
        self.store.restore(tensors);
        Ok(())
    }

    pub fn transfer_population(&self) -> usize {
        self.link.as_ref().map_or(0, |l| l.rows.len())
    }

    /// Aggregated persona rows of the given users, without dropout.
    pub fn persona_reprs(&self, users: &[usize]) -> Result<Tensor> {
        let stacked: Vec<&Tensor> = users.iter().map(|&u| &self.personas[u]).collect();
        Ok(aggregate_forward::<rand_chacha::ChaCha8Rng>(&self.store, self.aggregation, &stacked, None)?.h)
    }

    /// Frozen source-side view of this model for the given user names.
    pub fn source_reps(&self, users: &[String]) -> Result<SourceReps> {
        let idx: Vec<usize> = users
            .iter()
            .map(|u| self.user_idx(u).ok_or_else(|| Error::NotOverlapping(u.clone())))
            .collect::<Result<_>>()?;
        Ok(SourceReps {
            users: users.to_vec(),
            h: self.persona_reprs(&idx)?,
            v: self.store.value(ID_USER).gather_rows(&idx),
        })
    }

    /// Fused user and item rows for the full population, for ranking.
    pub fn scorer(&self) -> Result<Scorer> {
        let all_u: Vec<usize> = (0..self.users.len()).collect();
        let h = self.persona_reprs(&all_u)?;
        let zu = affine(
            &concat_cols(&h, self.store.value(ID_USER))?,
            self.store.value(FUSE_USER_W),
            self.store.value(FUSE_USER_B),
        )?;
        let zi = affine(
            &concat_cols(&self.semantics, self.store.value(ID_ITEM))?,
            self.store.value(FUSE_ITEM_W),
            self.store.value(FUSE_ITEM_B),
        )?;
        Ok(Scorer {
            user_index: self.user_index.clone(),
            zu,
            zi,
        })
    }

    /// Forward and backward over one batch. Gradients of
    /// `mean BPR + lambda * mean contrastive` accumulate into the store.
    /// The contrastive value is still reported when `lambda == 0`, but
    /// contributes no gradient.
    pub fn loss_and_grad<R: Rng + ?Sized>(
        &mut self,
        triples: &[Triple],
        transfer: TransferMode,
        lambda: f64,
        tau: f64,
        dropout: Option<(f64, &mut R)>,
    ) -> Result<LossParts> {
        if triples.is_empty() {
            return Err(Error::EmptyInput("training batch".into()));
        }
        let bu: Vec<usize> = triples.iter().map(|t| t.0).collect::<BTreeSet<_>>().into_iter().collect();
        let bi: Vec<usize> = triples
            .iter()
            .flat_map(|t| [t.1, t.2])
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let lu: BTreeMap<usize, usize> = bu.iter().enumerate().map(|(k, &u)| (u, k)).collect();
        let li: BTreeMap<usize, usize> = bi.iter().enumerate().map(|(k, &i)| (i, k)).collect();

        let stacked: Vec<&Tensor> = bu.iter().map(|&u| &self.personas[u]).collect();
        let agg = aggregate_forward(&self.store, self.aggregation, &stacked, dropout)?;
        let vu = self.store.value(ID_USER).gather_rows(&bu);
        let xu = concat_cols(&agg.h, &vu)?;
        let zu = affine(&xu, self.store.value(FUSE_USER_W), self.store.value(FUSE_USER_B))?;
        let si = self.semantics.gather_rows(&bi);
        let vi = self.store.value(ID_ITEM).gather_rows(&bi);
        let xi = concat_cols(&si, &vi)?;
        let zi = affine(&xi, self.store.value(FUSE_ITEM_W), self.store.value(FUSE_ITEM_B))?;

        let mut dzu = Tensor::zeros(zu.shape());
        let mut dzi = Tensor::zeros(zi.shape());
        let scale = 1.0 / triples.len() as f64;
        let mut rec = 0.0;
        for &(u, p, q) in triples {
            let (a, b, c) = (lu[&u], li[&p], li[&q]);
            let diff = dot(zu.row(a), zi.row(b)) - dot(zu.row(a), zi.row(c));
            rec += bpr_term(diff);
            let g = bpr_term_grad(diff) * scale;
            for ((d, x), y) in dzu.row_mut(a).iter_mut().zip(zi.row(b)).zip(zi.row(c)) {
                *d += g * (x - y);
            }
            let zrow = zu.row(a).to_vec();
            dzi.row_mut(b).iter_mut().zip(&zrow).for_each(|(d, z)| *d += g * z);
            dzi.row_mut(c).iter_mut().zip(&zrow).for_each(|(d, z)| *d -= g * z);
        }
        rec *= scale;

        let mut dh = Tensor::zeros(agg.h.shape());
        let mut dvu = Tensor::zeros(vu.shape());
        let (dpl, anchors) = self.contrastive(transfer, lambda, tau, &bu, &agg.h, &vu, &mut dh, &mut dvu)?;

        let gu = affine_backward(&xu, self.store.value(FUSE_USER_W), &dzu);
        self.store.accumulate(FUSE_USER_W, &gu.dw)?;
        self.store.accumulate(FUSE_USER_B, &gu.db)?;
        let (dh_fuse, dv_fuse) = split_cols(&gu.dx, self.persona_dim);
        dh.add_assign(&dh_fuse)?;
        dvu.add_assign(&dv_fuse)?;
        aggregate_backward(&mut self.store, self.aggregation, &stacked, &agg, &dh)?;
        self.store.accumulate_rows(ID_USER, &bu, &dvu);

        let gi = affine_backward(&xi, self.store.value(FUSE_ITEM_W), &dzi);
        self.store.accumulate(FUSE_ITEM_W, &gi.dw)?;
        self.store.accumulate(FUSE_ITEM_B, &gi.db)?;
        let (_, dvi) = split_cols(&gi.dx, si.cols());
        self.store.accumulate_rows(ID_ITEM, &bi, &dvi);

        Ok(LossParts {
            rec,
            dpl,
            total: rec + lambda * dpl,
            anchors,
        })
    }

    /// Mean contrastive term over linked batch users; adds its gradient
    /// (scaled by `lambda`) into `dh` and `dv`.
    #[allow(clippy::too_many_arguments)]
    fn contrastive(
        &self,
        transfer: TransferMode,
        lambda: f64,
        tau: f64,
        bu: &[usize],
        h: &Tensor,
        vu: &Tensor,
        dh: &mut Tensor,
        dv: &mut Tensor,
    ) -> Result<(f64, usize)> {
        let Some(link) = self.link.as_ref().filter(|_| transfer != TransferMode::None) else {
            return Ok((0.0, 0));
        };
        // (batch-local row, source row) of every linked batch user.
        let anchors: Vec<(usize, usize)> = bu
            .iter()
            .enumerate()
            .filter_map(|(k, u)| link.rows.get(u).map(|&r| (k, r)))
            .collect();
        if anchors.len() < 2 {
            return Ok((0.0, anchors.len()));
        }
        let w = lambda / anchors.len() as f64;
        let hp = self.persona_dim;
        let (loss, x_grads) = match transfer {
            TransferMode::Doppelganger => {
                let att: Vec<Attention> = anchors
                    .iter()
                    .map(|&(k, _)| scaled_dot_attention(h.row(k), &link.h, &link.h))
                    .collect::<Result<_>>()?;
                let x: Vec<Vec<f64>> = anchors.iter().map(|&(k, _)| h.row(k).to_vec()).collect();
                let y: Vec<Vec<f64>> = att.iter().map(|a| a.out.clone()).collect();
                let nce = info_nce(&x, &y, tau)?;
                if lambda > 0.0 {
                    // The doppelganger depends on its query, so positives
                    // pass gradient back into the querying user's persona.
                    for (b, &(k, _)) in anchors.iter().enumerate() {
                        let dout: Vec<f64> = nce.d_positives[b].iter().map(|g| g * w).collect();
                        let g = attention_backward(h.row(k), &link.h, &link.h, &att[b], &dout);
                        dh.row_mut(k).iter_mut().zip(&g.dquery).for_each(|(d, x)| *d += x);
                    }
                }
                (nce.loss, nce.d_anchors)
            }
            TransferMode::DirectPersona | TransferMode::DirectId | TransferMode::DirectBoth => {
                let view = |k: usize, src: Option<usize>| -> Vec<f64> {
                    let (hv, vv) = match src {
                        Some(r) => (link.h.row(r), link.v.row(r)),
                        None => (h.row(k), vu.row(k)),
                    };
                    match transfer {
                        TransferMode::DirectId => vv.to_vec(),
                        TransferMode::DirectPersona => hv.to_vec(),
                        _ => hv.iter().chain(vv).copied().collect(),
                    }
                };
                let x: Vec<Vec<f64>> = anchors.iter().map(|&(k, _)| view(k, None)).collect();
                let y: Vec<Vec<f64>> = anchors.iter().map(|&(k, r)| view(k, Some(r))).collect();
                let nce = info_nce(&x, &y, tau)?;
                (nce.loss, nce.d_anchors)
            }
            TransferMode::None => unreachable!("filtered above"),
        };
        if lambda > 0.0 {
            for (a, &(k, _)) in anchors.iter().enumerate() {
                let g = &x_grads[a];
                let (gh, gv): (&[f64], &[f64]) = match transfer {
                    TransferMode::DirectId => (&[], g),
                    TransferMode::DirectBoth => g.split_at(hp),
                    _ => (g, &[]),
                };
                dh.row_mut(k).iter_mut().zip(gh).for_each(|(d, x)| *d += w * x);
                dv.row_mut(k).iter_mut().zip(gv).for_each(|(d, x)| *d += w * x);
            }
        }
        Ok((loss / anchors.len() as f64, anchors.len()))
    }
}

fn id_rows<'a, R: Rng + ?Sized>(
    names: &[String],
    lookup: impl Fn(&str) -> Option<&'a [f64]>,
    d: usize,
    std: f64,
    rng: &mut R,
) -> Tensor {
    let mut t = Tensor::zeros(&[names.len(), d]);
    for (k, name) in names.iter().enumerate() {
        match lookup(name) {
            Some(v) => t.row_mut(k).copy_from_slice(v),
            None => {
                let r = Tensor::randn(&[d], std, rng);
                t.row_mut(k).copy_from_slice(r.data());
            }
        }
    }
    t
}

/// Precomputed fused rows; item order is ascending item id.
#[derive(Debug, Clone)]
pub struct Scorer {
    user_index: BTreeMap<String, usize>,
    pub zu: Tensor,
    pub zi: Tensor,
}

impl Scorer {
    pub fn scores(&self, user: &str) -> Option<Vec<f64>> {
        let u = self.zu.row(*self.user_index.get(user)?);
        Some((0..self.zi.rows()).map(|i| dot(u, self.zi.row(i))).collect())
    }
}
