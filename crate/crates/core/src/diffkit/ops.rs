//! Forward kernels and their hand-written adjoints.
//!
//! Every `*_backward` takes the upstream gradient of the op's output and
//! returns gradients for each differentiable input; callers accumulate
//! them into parameter slots.

use rand::Rng;

use super::tensor::{dot, norm, Tensor};
use crate::error::{Error, Result};

fn as_matrix_dims(x: &Tensor) -> (usize, usize) {
    match x.shape().len() {
        1 => (1, x.shape()[0]),
        _ => (x.shape()[0], x.shape()[1]),
    }
}

/// `x W + b` for `x: m x p`, `W: p x q`, `b: q`. A 1-D `x` is one row.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, p) = as_matrix_dims(x);
    if w.shape().len() != 2 || w.shape()[0] != p || b.len() != w.shape()[1] {
        return Err(Error::Shape(format!(
            "affine x{:?} W{:?} b{:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let q = w.shape()[1];
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut out = Vec::with_capacity(m * q);
    for i in 0..m {
        let mut row = bd.to_vec();
        let xi = &xd[i * p..(i + 1) * p];
        for (k, &xik) in xi.iter().enumerate() {
            if xik == 0.0 {
                continue;
            }
            let wk = &wd[k * q..(k + 1) * q];
            for (r, &wkj) in row.iter_mut().zip(wk) {
                *r += xik * wkj;
            }
        }
        out.extend(row);
    }
    Tensor::matrix(m, q, out)
}

#[derive(Debug, Clone)]
pub struct AffineGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Tensor,
}

pub fn affine_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> AffineGrads {
    let (m, p) = as_matrix_dims(x);
    let q = w.shape()[1];
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    let mut dx = vec![0.0; m * p];
    let mut dw = vec![0.0; p * q];
    let mut db = vec![0.0; q];
    for i in 0..m {
        let dyi = &dyd[i * q..(i + 1) * q];
        let xi = &xd[i * p..(i + 1) * p];
        for (d, g) in db.iter_mut().zip(dyi) {
            *d += g;
        }
        for k in 0..p {
            let wk = &wd[k * q..(k + 1) * q];
            dx[i * p + k] = dot(dyi, wk);
            let xik = xi[k];
            if xik != 0.0 {
                for (d, g) in dw[k * q..(k + 1) * q].iter_mut().zip(dyi) {
                    *d += xik * g;
                }
            }
        }
    }
    AffineGrads {
        dx: Tensor::new(x.shape().to_vec(), dx).expect("shape"),
        dw: Tensor::matrix(p, q, dw).expect("shape"),
        db: Tensor::vector(db),
    }
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyInput("softmax of an empty vector".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Gradient w.r.t. logits given the softmax output `y` and `dL/dy`.
pub fn softmax_backward(y: &[f64], dy: &[f64]) -> Vec<f64> {
    let s = dot(y, dy);
    y.iter().zip(dy).map(|(yi, gi)| yi * (gi - s)).collect()
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub weights: Vec<f64>,
    pub out: Vec<f64>,
}

/// Single-query attention: weights are the softmax of `q . k_j / sqrt(n)`
/// over key rows, output is the weighted sum of value rows.
pub fn scaled_dot_attention(query: &[f64], keys: &Tensor, values: &Tensor) -> Result<Attention> {
    let n = query.len();
    let k = keys.rows();
    if keys.shape().len() != 2 || keys.cols() != n || values.rows() != k || k == 0 {
        return Err(Error::Shape(format!(
            "attention q[{n}] K{:?} V{:?}",
            keys.shape(),
            values.shape()
        )));
    }
    let scale = (n as f64).sqrt();
    let logits: Vec<f64> = (0..k).map(|j| dot(query, keys.row(j)) / scale).collect();
    let weights = softmax(&logits)?;
    let mut out = vec![0.0; values.cols()];
    for (j, &a) in weights.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(values.row(j)) {
            *o += a * v;
        }
    }
    Ok(Attention { weights, out })
}

#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub dquery: Vec<f64>,
    pub dkeys: Tensor,
    pub dvalues: Tensor,
}

pub fn attention_backward(
    query: &[f64],
    keys: &Tensor,
    values: &Tensor,
    att: &Attention,
    dout: &[f64],
) -> AttentionGrads {
    let n = query.len();
    let k = keys.rows();
    let scale = (n as f64).sqrt();
    let mut dvalues = Tensor::zeros(values.shape());
    let mut dweights = vec![0.0; k];
    for (j, dw) in dweights.iter_mut().enumerate() {
        *dw = dot(dout, values.row(j));
        for (d, g) in dvalues.row_mut(j).iter_mut().zip(dout) {
            *d += att.weights[j] * g;
        }
    }
    let dlogits = softmax_backward(&att.weights, &dweights);
    let mut dquery = vec![0.0; n];
    let mut dkeys = Tensor::zeros(keys.shape());
    for (j, dl) in dlogits.iter().enumerate() {
        let g = dl / scale;
        if g == 0.0 {
            continue;
        }
        for (dq, kv) in dquery.iter_mut().zip(keys.row(j)) {
            *dq += g * kv;
        }
        for (dk, qv) in dkeys.row_mut(j).iter_mut().zip(query) {
            *dk += g * qv;
        }
    }
    AttentionGrads {
        dquery,
        dkeys,
        dvalues,
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine {} vs {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Gradients of `dsim * cos(a, b)` w.r.t. `a` and `b`.
pub fn cosine_backward(a: &[f64], b: &[f64], dsim: f64) -> (Vec<f64>, Vec<f64>) {
    let (na, nb) = (norm(a), norm(b));
    let c = dot(a, b) / (na * nb);
    let da = a
        .iter()
        .zip(b)
        .map(|(x, y)| dsim * (y / (na * nb) - c * x / (na * na)))
        .collect();
    let db = a
        .iter()
        .zip(b)
        .map(|(x, y)| dsim * (x / (na * nb) - c * y / (nb * nb)))
        .collect();
    (da, db)
}

/// `[a | b]` along columns.
pub fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ma, pa) = as_matrix_dims(a);
    let (mb, pb) = as_matrix_dims(b);
    if ma != mb {
        return Err(Error::Shape(format!("concat {ma} rows vs {mb} rows")));
    }
    let mut data = Vec::with_capacity(ma * (pa + pb));
    for i in 0..ma {
        data.extend_from_slice(&a.data()[i * pa..(i + 1) * pa]);
        data.extend_from_slice(&b.data()[i * pb..(i + 1) * pb]);
    }
    Tensor::matrix(ma, pa + pb, data)
}

/// Inverse of [`concat_cols`]: the first `left` columns and the rest.
pub fn split_cols(x: &Tensor, left: usize) -> (Tensor, Tensor) {
    let (m, p) = as_matrix_dims(x);
    let right = p - left;
    let mut a = Vec::with_capacity(m * left);
    let mut b = Vec::with_capacity(m * right);
    for i in 0..m {
        let row = &x.data()[i * p..(i + 1) * p];
        a.extend_from_slice(&row[..left]);
        b.extend_from_slice(&row[left..]);
    }
    (
        Tensor::matrix(m, left, a).expect("shape"),
        Tensor::matrix(m, right, b).expect("shape"),
    )
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Inverted-dropout mask: zeros with probability `p`, else `1 / (1 - p)`.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<f64> {
    if p <= 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let (m, p) = (x.rows(), x.cols());
        let q = w.cols();
        let mut out = Tensor::zeros(&[m, q]);
        for i in 0..m {
            for j in 0..q {
                let mut s = b.data()[j];
                for k in 0..p {
                    s += x.get2(i, k) * w.get2(k, j);
                }
                out.data_mut()[i * q + j] = s;
            }
        }
        out
    }

    #[test]
    fn affine_cases() {
        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
        let y = affine(&x, &Tensor::identity(3), &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y.data(), x.data());

        let y = affine(
            &Tensor::vector(vec![2.0]),
            &Tensor::matrix(1, 1, vec![3.0]).unwrap(),
            &Tensor::vector(vec![1.0]),
        )
        .unwrap();
        assert_eq!(y.data(), &[7.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[3], 1.0, &mut rng);
        let got = affine(&x, &w, &b).unwrap();
        assert!(got.max_abs_diff(&naive_matmul(&x, &w, &b)) < 1e-12);

        assert!(affine(&x, &Tensor::zeros(&[4, 3]), &b).is_err());
    }

    #[test]
    fn softmax_closed_forms() {
        let y = softmax(&[0.3; 5]).unwrap();
        assert!(y.iter().all(|v| (v - 0.2).abs() < 1e-15));
        let y = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert!((y[0] - 0.25).abs() < 1e-15 && (y[1] - 0.75).abs() < 1e-15);
        assert!(softmax(&[]).is_err());
        // Shift invariance and no overflow at large logits.
        let a = softmax(&[1000.0, 1001.0, 999.0]).unwrap();
        let b = softmax(&[0.0, 1.0, -1.0]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_single_key_and_uniform() {
        let keys = Tensor::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap();
        let vals = Tensor::from_rows(&[vec![3.0, 4.0, 5.0]]).unwrap();
        let a = scaled_dot_attention(&[1.0, 2.0, 3.0], &keys, &vals).unwrap();
        assert_eq!(a.weights, vec![1.0]);
        assert_eq!(a.out, vec![3.0, 4.0, 5.0]);

        let keys = Tensor::from_rows(&vec![vec![0.1, 0.2]; 5]).unwrap();
        let vals = Tensor::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![2.0, 2.0],
            vec![-1.0, 3.0],
            vec![0.0, 0.0],
        ])
        .unwrap();
        let a = scaled_dot_attention(&[5.0, -3.0], &keys, &vals).unwrap();
        assert!(a.weights.iter().all(|w| (w - 0.2).abs() < 1e-15));
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, -2.0], &[-1.0, 2.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) + 2f64.ln()).abs() < 1e-15);
        assert!(log_sigmoid(800.0).abs() < 1e-300);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
    }

    #[test]
    fn concat_split_inverse() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap();
        let c = concat_cols(&a, &b).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let (l, r) = split_cols(&c, 2);
        assert_eq!((l, r), (a, b));
    }
}
