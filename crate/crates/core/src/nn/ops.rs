//! Dense kernels shared by the eager API and the gradient tape.

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Norms below this are treated as zero by [`cosine`].
pub const COSINE_EPS: f64 = 1e-12;

/// Layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;

fn as_matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!("{what}: expected a matrix, got shape {s:?}"))),
    }
}

/// Matrix product of `(n × k)` and `(k × m)` operands.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = as_matrix(a, "matmul lhs")?;
    let (k2, m) = as_matrix(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::Shape(format!("matmul inner dimensions differ: {:?} x {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![0.0; n * m];
    matmul_into(a.data(), b.data(), &mut out, n, k, m);
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// `out += a · b` for row-major `a: n×k`, `b: k×m`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * m..(kk + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// `out += aᵀ · b` for `a: n×k`, `b: n×m`, `out: k×m`.
pub(crate) fn matmul_at_b_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for r in 0..n {
        let a_row = &a[r * k..(r + 1) * k];
        let b_row = &b[r * m..(r + 1) * m];
        for (i, &ari) in a_row.iter().enumerate() {
            let out_row = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += ari * bv;
            }
        }
    }
}

/// `out += a · bᵀ` for `a: n×m`, `b: k×m`, `out: n×k`.
pub(crate) fn matmul_a_bt_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, m: usize, k: usize) {
    for r in 0..n {
        let a_row = &a[r * m..(r + 1) * m];
        let out_row = &mut out[r * k..(r + 1) * k];
        for (i, o) in out_row.iter_mut().enumerate() {
            *o += dot(a_row, &b[i * m..(i + 1) * m]);
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent partial sums let the loop vectorize.
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    let mut acc = [0.0; 4];
    for (x, y) in ca.zip(cb) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// In-place max-subtracted softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Log-sum-exp of a row, computed around its maximum.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|v| v - lse).collect()
}

/// Softmax along `axis`.
pub fn softmax(v: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = v.shape().to_vec();
    let rank = shape.len().max(1);
    if axis >= rank {
        return Err(Error::Shape(format!("softmax axis {axis} out of range for {shape:?}")));
    }
    let dims: Vec<usize> = if shape.is_empty() { vec![1] } else { shape.clone() };
    let len = dims[axis];
    if len == 0 {
        return Err(Error::Shape("softmax over an empty axis".into()));
    }
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let mut out = v.data().to_vec();
    let mut buf = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = out[base + j * inner];
            }
            softmax_in_place(&mut buf);
            for (j, b) in buf.iter().enumerate() {
                out[base + j * inner] = *b;
            }
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Cosine similarity clamped to `[-1, 1]`; 0 when either norm is below [`COSINE_EPS`].
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("cosine of lengths {} and {}", u.len(), v.len())));
    }
    Ok(cosine_unchecked(u, v))
}

pub(crate) fn cosine_unchecked(u: &[f64], v: &[f64]) -> f64 {
    let (uu, vv) = (dot(u, u), dot(v, v));
    if uu.sqrt() < COSINE_EPS || vv.sqrt() < COSINE_EPS {
        return 0.0;
    }
    // sqrt(fl(x·x)) == x, so identical and antipodal rows give exactly ±1.
    (dot(u, v) / (uu * vv).sqrt()).clamp(-1.0, 1.0)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Mean negative log-likelihood over the positions where `mask` is set.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let weights = mask_weights(mask)?;
    weighted_cross_entropy(logits, targets, &weights)
}

/// Uniform `1 / count` weights over the selected positions.
pub(crate) fn mask_weights(mask: &[bool]) -> Result<Vec<f64>> {
    let count = mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Err(Error::DegenerateBatch("cross-entropy mask selects no position".into()));
    }
    let w = 1.0 / count as f64;
    Ok(mask.iter().map(|&m| if m { w } else { 0.0 }).collect())
}

pub(crate) fn check_ce_inputs(logits: &Tensor, targets: &[usize], weights: &[f64]) -> Result<()> {
    let rows = logits.rows();
    if logits.shape().len() != 2 || targets.len() != rows || weights.len() != rows {
        return Err(Error::Shape(format!(
            "cross-entropy: logits {:?}, {} targets, {} weights",
            logits.shape(),
            targets.len(),
            weights.len()
        )));
    }
    let vocab = logits.cols();
    if let Some(t) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::Input(format!("target {t} outside vocabulary of {vocab}")));
    }
    Ok(())
}

/// `Σᵢ wᵢ · (logsumexp(zᵢ) − zᵢ[tᵢ])`.
pub fn weighted_cross_entropy(logits: &Tensor, targets: &[usize], weights: &[f64]) -> Result<f64> {
    check_ce_inputs(logits, targets, weights)?;
    let mut loss = 0.0;
    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
        if w == 0.0 {
            continue;
        }
        let row = logits.row(i);
        loss += w * (log_sum_exp(row) - row[t]);
    }
    Ok(loss)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044_715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::SeededRng;
    use proptest::prelude::*;

    fn random_matrix(rng: &mut SeededRng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut rng = SeededRng::new(3);
        let m = random_matrix(&mut rng, 3, 3);
        let out = matmul(&Tensor::identity(3), &m).unwrap();
        assert!(out.bitwise_eq(&m));
    }

    #[test]
    fn small_matmul_by_hand() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = SeededRng::new(11);
        let a = random_matrix(&mut rng, 5, 4);
        let b = random_matrix(&mut rng, 4, 3);
        let out = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a.get(&[i, k]) * b.get(&[k, j]);
                }
                assert!((out.get(&[i, j]) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn transposed_kernels_agree_with_plain_matmul() {
        let mut rng = SeededRng::new(5);
        let a = random_matrix(&mut rng, 4, 3);
        let b = random_matrix(&mut rng, 4, 2);
        let mut at = vec![0.0; 12];
        for i in 0..4 {
            for j in 0..3 {
                at[j * 4 + i] = a.get(&[i, j]);
            }
        }
        let expected = matmul(&Tensor::matrix(3, 4, at).unwrap(), &b).unwrap();
        let mut out = vec![0.0; 6];
        matmul_at_b_into(a.data(), b.data(), &mut out, 4, 3, 2);
        for (x, y) in out.iter().zip(expected.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let c = random_matrix(&mut rng, 2, 3);
        let mut ct = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                ct[j * 2 + i] = c.get(&[i, j]);
            }
        }
        let expected = matmul(&a, &Tensor::matrix(3, 2, ct).unwrap()).unwrap();
        let mut out = vec![0.0; 8];
        matmul_a_bt_into(a.data(), c.data(), &mut out, 4, 3, 2);
        for (x, y) in out.iter().zip(expected.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_symmetric_pair() {
        let s = softmax(&Tensor::vector(vec![0.0, 0.0]).unwrap(), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_large_logit_is_stable() {
        let s = softmax(&Tensor::vector(vec![1000.0, 0.0]).unwrap(), 0).unwrap();
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!(s.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let s = softmax(&Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap(), 0).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
        for (i, x) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((s.data()[i] - x.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_along_first_axis() {
        let t = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 3.0]]).unwrap();
        let s = softmax(&t, 0).unwrap();
        assert_eq!(s.get(&[0, 0]), 0.5);
        assert!((s.get(&[0, 1]) + s.get(&[1, 1]) - 1.0).abs() < 1e-15);
        assert!(softmax(&t, 2).is_err());
    }

    #[test]
    fn cosine_basics() {
        let v = [0.3, -1.2, 2.0];
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let w: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
        assert!((cosine(&v, &w).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(matches!(cosine(&[1.0], &[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let logits = Tensor::zeros(&[3, 7]);
        let ce = cross_entropy(&logits, &[0, 3, 6], &[true, true, false]).unwrap();
        assert!((ce - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_is_near_zero() {
        let mut rows = vec![vec![0.0; 5]; 2];
        rows[0][2] = 50.0;
        rows[1][4] = 50.0;
        let logits = Tensor::from_rows(&rows).unwrap();
        let ce = cross_entropy(&logits, &[2, 4], &[true, true]).unwrap();
        assert!(ce < 1e-20);
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp_oracle() {
        let mut rng = SeededRng::new(19);
        let logits = random_matrix(&mut rng, 2, 3);
        let targets = [1, 2];
        let ce = cross_entropy(&logits, &targets, &[true, true]).unwrap();
        let mut expected = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let z: f64 = (0..3).map(|j| logits.get(&[i, j]).exp()).sum();
            expected += -(logits.get(&[i, t]).exp() / z).ln();
        }
        expected /= 2.0;
        assert!((ce - expected).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_empty_mask_is_degenerate() {
        let logits = Tensor::zeros(&[2, 3]);
        assert!(matches!(cross_entropy(&logits, &[0, 1], &[false, false]), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(v in prop::collection::vec(-1000.0f64..1000.0, 1..32)) {
            let s = softmax(&Tensor::vector(v).unwrap(), 0).unwrap();
            let total: f64 = s.data().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(s.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }

        #[test]
        fn cosine_symmetric_scaled_bounded(
            pair in (1usize..16).prop_flat_map(|n| (
                prop::collection::vec(-10.0f64..10.0, n),
                prop::collection::vec(-10.0f64..10.0, n),
            )),
            scale in 0.01f64..100.0,
        ) {
            let (u, v) = pair;
            let a = cosine(&u, &v).unwrap();
            let b = cosine(&v, &u).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!((-1.0..=1.0).contains(&a));
            let su: Vec<f64> = u.iter().map(|x| x * scale).collect();
            let c = cosine(&su, &v).unwrap();
            if l2_norm(&u) * scale.min(1.0) > 1e-9 && l2_norm(&v) > 1e-9 {
                prop_assert!((a - c).abs() < 1e-9);
            }
        }

        #[test]
        fn identical_and_antipodal_rows_are_exact(v in prop::collection::vec(-1e3f64..1e3, 1..64)) {
            prop_assume!(l2_norm(&v) > 1e-6);
            let neg: Vec<f64> = v.iter().map(|x| -x).collect();
            prop_assert_eq!(cosine(&v, &v).unwrap(), 1.0);
            prop_assert_eq!(cosine(&v, &neg).unwrap(), -1.0);
        }
    }
}
