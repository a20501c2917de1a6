//! Doppelganger construction and the in-batch contrastive objectives.

use std::collections::BTreeMap;

use super::TransferMode;
use crate::diffkit::{cosine_backward, cosine_similarity, logsumexp, scaled_dot_attention, softmax, Tensor};
use crate::error::{Error, Result};

/// A target user's doppelganger: attention over source persona rows of all
/// overlapping users, keyed in ascending user order.
#[derive(Debug, Clone, PartialEq)]
pub struct DoppelgangerState {
    pub user: String,
    pub keys: Vec<String>,
    pub weights: Vec<f64>,
    pub embedding: Vec<f64>,
}

/// Builds the doppelganger of `user` with its target persona as the query.
/// Overlap is the set of users present in both tables.
pub fn doppelganger_embed(
    user: &str,
    target: &BTreeMap<String, Vec<f64>>,
    source: &BTreeMap<String, Vec<f64>>,
) -> Result<DoppelgangerState> {
    if source.is_empty() {
        return Err(Error::EmptyInput("source persona table".into()));
    }
    let query = match (target.get(user), source.contains_key(user)) {
        (Some(q), true) => q,
        _ => return Err(Error::NotOverlapping(user.to_string())),
    };
    let keys: Vec<String> = source.keys().filter(|u| target.contains_key(*u)).cloned().collect();
    let rows: Vec<Vec<f64>> = keys.iter().map(|u| source[u].clone()).collect();
    let kv = Tensor::from_rows(&rows)?;
    let att = scaled_dot_attention(query, &kv, &kv)?;
    Ok(DoppelgangerState {
        user: user.to_string(),
        keys,
        weights: att.weights,
        embedding: att.out,
    })
}

/// Summed InfoNCE over anchors with in-batch negatives, and its gradients.
#[derive(Debug, Clone)]
pub struct InfoNce {
    pub loss: f64,
    /// Each term is nonnegative: the positive sits in its own denominator.
    pub per_anchor: Vec<f64>,
    pub d_anchors: Vec<Vec<f64>>,
    pub d_positives: Vec<Vec<f64>>,
}

/// `-sum_a log softmax_b(cos(x_a, y_b) / tau)[a]` with gradients w.r.t.
/// every anchor `x_a` and positive `y_b`.
pub fn info_nce(anchors: &[Vec<f64>], positives: &[Vec<f64>], tau: f64) -> Result<InfoNce> {
    let n = anchors.len();
    if n < 2 {
        return Err(Error::EmptyInput(format!("contrastive batch of {n} anchors needs at least 2")));
    }
    if positives.len() != n {
        return Err(Error::Shape(format!("{n} anchors vs {} positives", positives.len())));
    }
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::Config("tau must be positive".into()));
    }
    let mut sims = vec![vec![0.0; n]; n];
    for (a, row) in sims.iter_mut().enumerate() {
        for (b, s) in row.iter_mut().enumerate() {
            *s = cosine_similarity(&anchors[a], &positives[b])? / tau;
        }
    }
    let mut per_anchor = Vec::with_capacity(n);
    let mut d_anchors: Vec<Vec<f64>> = anchors.iter().map(|x| vec![0.0; x.len()]).collect();
    let mut d_positives: Vec<Vec<f64>> = positives.iter().map(|y| vec![0.0; y.len()]).collect();
    for a in 0..n {
        per_anchor.push((logsumexp(&sims[a]) - sims[a][a]).max(0.0));
        let p = softmax(&sims[a])?;
        for b in 0..n {
            let g = (p[b] - if a == b { 1.0 } else { 0.0 }) / tau;
            let (dx, dy) = cosine_backward(&anchors[a], &positives[b], g);
            d_anchors[a].iter_mut().zip(&dx).for_each(|(d, x)| *d += x);
            d_positives[b].iter_mut().zip(&dy).for_each(|(d, y)| *d += y);
        }
    }
    Ok(InfoNce {
        loss: per_anchor.iter().sum(),
        per_anchor,
        d_anchors,
        d_positives,
    })
}

/// Contrast of target personas against the doppelgangers of the batch.
pub fn dpl_loss(target: &[Vec<f64>], doppelgangers: &[Vec<f64>], tau: f64) -> Result<f64> {
    Ok(info_nce(target, doppelgangers, tau)?.loss)
}

/// The representation compared under a direct mode: ID vector, persona
/// vector, or `[h | v]`.
pub fn alignment_view(mode: TransferMode, h: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    match mode {
        TransferMode::DirectId => Ok(v.to_vec()),
        TransferMode::DirectPersona => Ok(h.to_vec()),
        TransferMode::DirectBoth => Ok(h.iter().chain(v).copied().collect()),
        other => Err(Error::Config(format!("{other} is not a direct alignment mode"))),
    }
}

/// Contrast of each user's target representation against the same user's
/// source representation. Slices are `(h, v)` pairs aligned by index.
pub fn direct_alignment_loss(
    mode: TransferMode,
    target: &[(Vec<f64>, Vec<f64>)],
    source: &[(Vec<f64>, Vec<f64>)],
    tau: f64,
) -> Result<f64> {
    let t: Vec<Vec<f64>> = target.iter().map(|(h, v)| alignment_view(mode, h, v)).collect::<Result<_>>()?;
    let s: Vec<Vec<f64>> = source.iter().map(|(h, v)| alignment_view(mode, h, v)).collect::<Result<_>>()?;
    Ok(info_nce(&t, &s, tau)?.loss)
}
