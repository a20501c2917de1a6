use crate::diffkit::{affine, log_sigmoid, sigmoid, Tensor};
use crate::error::{Error, Result};

/// Per-triple ranking loss for the score difference `pos - neg`.
pub fn bpr_term(diff: f64) -> f64 {
    -log_sigmoid(diff)
}

/// Derivative of [`bpr_term`] w.r.t. the difference.
pub fn bpr_term_grad(diff: f64) -> f64 {
    -sigmoid(-diff)
}

/// Summed loss over aligned positive and negative scores.
pub fn bpr_loss(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.len() != neg.len() {
        return Err(Error::Shape(format!("{} positive vs {} negative scores", pos.len(), neg.len())));
    }
    Ok(pos.iter().zip(neg).map(|(p, n)| bpr_term(p - n)).sum())
}

/// `[h | v] W + b` for one entity.
pub fn fuse_representations(h: &[f64], v: &[f64], w: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    if h.is_empty() || v.is_empty() {
        return Err(Error::EmptyInput("fusion needs both the semantic and the ID vector".into()));
    }
    let x: Vec<f64> = h.iter().chain(v).copied().collect();
    Ok(affine(&Tensor::vector(x), w, b)?.into_data())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equal_scores_cost_ln2() {
        assert!((bpr_term(0.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bpr_term(800.0) < 1e-300);
        assert!(bpr_term(-800.0).is_finite());
    }

    #[test]
    fn random_triples_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pos: Vec<f64> = (0..16).map(|_| rng.random_range(-4.0..4.0)).collect();
        let neg: Vec<f64> = (0..16).map(|_| rng.random_range(-4.0..4.0)).collect();
        let want: f64 = pos
            .iter()
            .zip(&neg)
            .map(|(p, n)| -(1.0 / (1.0 + (-(p - n)).exp())).ln())
            .sum();
        assert!((bpr_loss(&pos, &neg).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn grad_matches_difference_quotient() {
        for d in [-3.0, -0.2, 0.0, 1.5] {
            let num = (bpr_term(d + 1e-6) - bpr_term(d - 1e-6)) / 2e-6;
            assert!((num - bpr_term_grad(d)).abs() < 1e-8);
        }
    }

    #[test]
    fn fusion_shapes_and_constructed_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..128).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Tensor::randn(&[384, 128], 0.02, &mut rng);
        assert_eq!(fuse_representations(&h, &v, &w, &Tensor::zeros(&[128])).unwrap().len(), 128);

        let z = fuse_representations(&h, &v, &Tensor::zeros(&[384, 128]), &Tensor::zeros(&[128])).unwrap();
        assert!(z.iter().all(|&x| x == 0.0));

        // Zero block over h, identity over v.
        let mut sel = Tensor::zeros(&[384, 128]);
        for j in 0..128 {
            sel.data_mut()[(256 + j) * 128 + j] = 1.0;
        }
        assert_eq!(fuse_representations(&h, &v, &sel, &Tensor::zeros(&[128])).unwrap(), v);
        assert!(fuse_representations(&h, &[], &sel, &Tensor::zeros(&[128])).is_err());
    }
}
