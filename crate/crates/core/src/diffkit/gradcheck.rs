use super::store::ParameterStore;
use crate::error::Result;

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter, flat index, analytic and numeric gradient of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
    pub coordinates: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares the gradients `f` accumulates into `store` against central
/// differences `(f(θ+ε) - f(θ-ε)) / 2ε` on every coordinate.
///
/// `f` must return the loss and add its gradient into the store's slots;
/// slots are cleared before every call. Parameter values are restored.
pub fn grad_check<F>(store: &mut ParameterStore, mut f: F, eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParameterStore) -> Result<f64>,
{
    store.zero_grad();
    f(store)?;
    let analytic: Vec<(String, Vec<f64>)> = store
        .names()
        .map(|n| (n.to_string(), store.grad(n).data().to_vec()))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for (name, grads) in &analytic {
        for (idx, &a) in grads.iter().enumerate() {
            let orig = store.value(name).data()[idx];
            store.value_mut(name).data_mut()[idx] = orig + eps;
            store.zero_grad();
            let plus = f(store)?;
            store.value_mut(name).data_mut()[idx] = orig - eps;
            store.zero_grad();
            let minus = f(store)?;
            store.value_mut(name).data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((name.clone(), idx, a, numeric));
            }
        }
    }
    store.zero_grad();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::super::ops::*;
    use super::super::tensor::{dot, Tensor};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const EPS: f64 = 1e-5;

    fn store_with(params: &[(&str, Tensor)]) -> ParameterStore {
        let mut s = ParameterStore::new();
        for (n, t) in params {
            s.insert(*n, t.clone());
        }
        s
    }

    /// Weighted sum of a tensor, a linear probe that gives every output
    /// coordinate a distinct upstream gradient.
    fn probe(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[len], 1.0, &mut rng).into_data()
    }

    #[test]
    fn quadratic_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = store_with(&[("t", Tensor::randn(&[6], 1.0, &mut rng))]);
        let r = grad_check(
            &mut s,
            |s| {
                let v = s.value("t").clone();
                s.accumulate("t", &v)?;
                Ok(0.5 * dot(v.data(), v.data()))
            },
            EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");

        let r = grad_check(&mut s, |_| Ok(4.2), EPS).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.worst.unwrap().3, 0.0);
    }

    #[test]
    fn affine_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = store_with(&[
            ("x", Tensor::randn(&[3, 4], 1.0, &mut rng)),
            ("w", Tensor::randn(&[4, 2], 1.0, &mut rng)),
            ("b", Tensor::randn(&[2], 1.0, &mut rng)),
        ]);
        let c = probe(6, 9);
        let r = grad_check(
            &mut s,
            |s| {
                let y = affine(s.value("x"), s.value("w"), s.value("b"))?;
                let dy = Tensor::matrix(3, 2, c.clone())?;
                let g = affine_backward(s.value("x"), s.value("w"), &dy);
                s.accumulate("x", &g.dx)?;
                s.accumulate("w", &g.dw)?;
                s.accumulate("b", &g.db)?;
                Ok(dot(y.data(), &c))
            },
            EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn softmax_and_gelu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = store_with(&[("z", Tensor::randn(&[7], 1.5, &mut rng))]);
        let c = probe(7, 12);
        let r = grad_check(
            &mut s,
            |s| {
                let z = s.value("z").data().to_vec();
                let h: Vec<f64> = z.iter().map(|&v| gelu(v)).collect();
                let y = softmax(&h)?;
                let dh = softmax_backward(&y, &c);
                let dz: Vec<f64> = dh.iter().zip(&z).map(|(g, &v)| g * gelu_grad(v)).collect();
                s.accumulate("z", &Tensor::vector(dz))?;
                Ok(dot(&y, &c))
            },
            EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut s = store_with(&[
            ("q", Tensor::randn(&[5], 1.0, &mut rng)),
            ("k", Tensor::randn(&[4, 5], 1.0, &mut rng)),
            ("v", Tensor::randn(&[4, 5], 1.0, &mut rng)),
        ]);
        let c = probe(5, 22);
        let r = grad_check(
            &mut s,
            |s| {
                let q = s.value("q").data().to_vec();
                let att = scaled_dot_attention(&q, s.value("k"), s.value("v"))?;
                let g = attention_backward(&q, s.value("k"), s.value("v"), &att, &c);
                s.accumulate("q", &Tensor::vector(g.dquery))?;
                s.accumulate("k", &g.dkeys)?;
                s.accumulate("v", &g.dvalues)?;
                Ok(dot(&att.out, &c))
            },
            EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn cosine_and_log_sigmoid_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut s = store_with(&[
            ("a", Tensor::randn(&[6], 1.0, &mut rng)),
            ("b", Tensor::randn(&[6], 1.0, &mut rng)),
        ]);
        let r = grad_check(
            &mut s,
            |s| {
                let (a, b) = (s.value("a").data().to_vec(), s.value("b").data().to_vec());
                let c = cosine_similarity(&a, &b)?;
                let x = 3.0 * c;
                let loss = -log_sigmoid(x);
                let dc = -(1.0 - sigmoid(x)) * 3.0;
                let (da, db) = cosine_backward(&a, &b, dc);
                s.accumulate("a", &Tensor::vector(da))?;
                s.accumulate("b", &Tensor::vector(db))?;
                Ok(loss)
            },
            EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn concat_gradients_split_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut s = store_with(&[
            ("a", Tensor::randn(&[2, 3], 1.0, &mut rng)),
            ("b", Tensor::randn(&[2, 2], 1.0, &mut rng)),
            ("w", Tensor::randn(&[5, 1], 1.0, &mut rng)),
        ]);
        let r = grad_check(
            &mut s,
            |s| {
                let x = concat_cols(s.value("a"), s.value("b"))?;
                let zero = Tensor::zeros(&[1]);
                let y = affine(&x, s.value("w"), &zero)?;
                let dy = Tensor::matrix(2, 1, vec![1.0, -2.0])?;
                let g = affine_backward(&x, s.value("w"), &dy);
                let (da, db) = split_cols(&g.dx, 3);
                s.accumulate("a", &da)?;
                s.accumulate("b", &db)?;
                s.accumulate("w", &g.dw)?;
                Ok(y.data()[0] - 2.0 * y.data()[1])
            },
            EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
