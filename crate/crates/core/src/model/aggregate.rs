//! Mask-token attention over the five criterion vectors, followed by a
//! GELU feed-forward layer and a projection.

use rand::Rng;

use super::AggregationMode;
use crate::diffkit::{
    affine, affine_backward, attention_backward, dropout_mask, gelu, gelu_grad, scaled_dot_attention, Attention,
    ParameterStore, Tensor,
};
use crate::error::{Error, Result};
use crate::persona::{Criterion, PersonaEmbeddingSet};

pub const MASK: &str = "agg.mask";
pub const FFN_W: &str = "agg.ffn.w";
pub const FFN_B: &str = "agg.ffn.b";
pub const PROJ_W: &str = "agg.proj.w";
pub const PROJ_B: &str = "agg.proj.b";

/// Number of stacked criterion vectors per user.
pub const K: usize = Criterion::ALL.len();

/// Registers aggregator parameters for persona width `n` and output width `h`.
pub fn init_aggregator<R: Rng + ?Sized>(
    store: &mut ParameterStore,
    mode: AggregationMode,
    n: usize,
    h: usize,
    std: f64,
    rng: &mut R,
) {
    let n_in = match mode {
        AggregationMode::Concat => K * n,
        _ => n,
    };
    store.insert(MASK, Tensor::randn(&[n], std, rng));
    store.insert(FFN_W, Tensor::randn(&[n_in, n], std, rng));
    store.insert(FFN_B, Tensor::zeros(&[n]));
    store.insert(PROJ_W, Tensor::randn(&[n, h], std, rng));
    store.insert(PROJ_B, Tensor::zeros(&[h]));
}

/// Stacks the criterion vectors in canonical order into a `5 x n` matrix.
pub fn stack_personas(set: &PersonaEmbeddingSet) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(K);
    for c in Criterion::ALL {
        let v = set
            .vectors
            .get(&c)
            .ok_or_else(|| Error::MissingCriterion(format!("{} for user {}", c.output_key(), set.user_id)))?;
        if v.len() != set.dim {
            return Err(Error::Shape(format!(
                "{} vector of user {} has length {}, expected {}",
                c.code(),
                set.user_id,
                v.len(),
                set.dim
            )));
        }
        rows.push(v.clone());
    }
    Tensor::from_rows(&rows)
}

/// Pre-FFN pooled vector; `None` weights outside self-attention mode.
fn pool(mode: AggregationMode, mask: &[f64], stacked: &Tensor) -> Result<(Vec<f64>, Option<Attention>)> {
    if stacked.cols() != mask.len() {
        return Err(Error::Shape(format!("persona width {} vs mask {}", stacked.cols(), mask.len())));
    }
    Ok(match mode {
        AggregationMode::SelfAttn => {
            let att = scaled_dot_attention(mask, stacked, stacked)?;
            (att.out.clone(), Some(att))
        }
        AggregationMode::Mean => {
            let mut out = vec![0.0; stacked.cols()];
            for k in 0..stacked.rows() {
                for (o, x) in out.iter_mut().zip(stacked.row(k)) {
                    *o += x;
                }
            }
            let k = stacked.rows() as f64;
            out.iter_mut().for_each(|o| *o /= k);
            (out, None)
        }
        AggregationMode::Concat => (stacked.data().to_vec(), None),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateOutput {
    /// Attention weights over the criteria, self-attention mode only.
    pub weights: Option<Vec<f64>>,
    pub pooled: Vec<f64>,
    pub h: Vec<f64>,
}

/// Aggregates one user's criterion vectors with the current parameters,
/// without dropout.
pub fn aggregate_personas(
    set: &PersonaEmbeddingSet,
    store: &ParameterStore,
    mode: AggregationMode,
) -> Result<AggregateOutput> {
    let stacked = stack_personas(set)?;
    let (pooled, att) = pool(mode, store.value(MASK).data(), &stacked)?;
    let pre = affine(&Tensor::vector(pooled.clone()), store.value(FFN_W), store.value(FFN_B))?;
    let hidden = Tensor::vector(pre.data().iter().map(|&x| gelu(x)).collect());
    let h = affine(&hidden, store.value(PROJ_W), store.value(PROJ_B))?;
    Ok(AggregateOutput {
        weights: att.map(|a| a.weights),
        pooled,
        h: h.into_data(),
    })
}

/// Intermediate values of a batched forward pass, kept for the backward.
#[derive(Debug, Clone)]
pub struct AggForward {
    pub pooled: Tensor,
    attention: Vec<Option<Attention>>,
    pre: Tensor,
    drop: Option<Vec<f64>>,
    hidden: Tensor,
    pub h: Tensor,
}

/// Batched aggregation of `stacked` users. Dropout on the hidden layer is
/// applied only when `dropout` is given with a positive rate.
pub fn aggregate_forward<R: Rng + ?Sized>(
    store: &ParameterStore,
    mode: AggregationMode,
    stacked: &[&Tensor],
    dropout: Option<(f64, &mut R)>,
) -> Result<AggForward> {
    if stacked.is_empty() {
        return Err(Error::EmptyInput("aggregation batch".into()));
    }
    let mask = store.value(MASK).data();
    let mut rows = Vec::with_capacity(stacked.len());
    let mut attention = Vec::with_capacity(stacked.len());
    for s in stacked {
        let (p, a) = pool(mode, mask, s)?;
        rows.push(p);
        attention.push(a);
    }
    let pooled = Tensor::from_rows(&rows)?;
    let pre = affine(&pooled, store.value(FFN_W), store.value(FFN_B))?;
    let mut hidden = pre.clone();
    hidden.data_mut().iter_mut().for_each(|x| *x = gelu(*x));
    let drop = match dropout {
        Some((p, rng)) if p > 0.0 => {
            let m = dropout_mask(hidden.len(), p, rng);
            hidden.data_mut().iter_mut().zip(&m).for_each(|(x, k)| *x *= k);
            Some(m)
        }
        _ => None,
    };
    let h = affine(&hidden, store.value(PROJ_W), store.value(PROJ_B))?;
    Ok(AggForward {
        pooled,
        attention,
        pre,
        drop,
        hidden,
        h,
    })
}

/// Accumulates aggregator gradients given `dh`, the gradient w.r.t. `fw.h`.
/// Persona inputs are frozen, so nothing flows past the pooling step
/// except into the mask token.
pub fn aggregate_backward(
    store: &mut ParameterStore,
    mode: AggregationMode,
    stacked: &[&Tensor],
    fw: &AggForward,
    dh: &Tensor,
) -> Result<()> {
    let proj = affine_backward(&fw.hidden, store.value(PROJ_W), dh);
    store.accumulate(PROJ_W, &proj.dw)?;
    store.accumulate(PROJ_B, &proj.db)?;
    let mut dpre = proj.dx;
    if let Some(m) = &fw.drop {
        dpre.data_mut().iter_mut().zip(m).for_each(|(g, k)| *g *= k);
    }
    dpre.data_mut()
        .iter_mut()
        .zip(fw.pre.data())
        .for_each(|(g, &x)| *g *= gelu_grad(x));
    let ffn = affine_backward(&fw.pooled, store.value(FFN_W), &dpre);
    store.accumulate(FFN_W, &ffn.dw)?;
    store.accumulate(FFN_B, &ffn.db)?;
    if mode == AggregationMode::SelfAttn {
        let mask = store.value(MASK).data().to_vec();
        let mut dmask = vec![0.0; mask.len()];
        for (i, s) in stacked.iter().enumerate() {
            let att = fw.attention[i].as_ref().expect("self-attention forward keeps weights");
            let g = attention_backward(&mask, s, s, att, ffn.dx.row(i));
            dmask.iter_mut().zip(&g.dquery).for_each(|(d, x)| *d += x);
        }
        store.accumulate(MASK, &Tensor::vector(dmask))?;
    }
    Ok(())
}
