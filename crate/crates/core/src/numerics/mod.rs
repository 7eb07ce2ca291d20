//! Deterministic differentiable compute substrate.
//!
//! Everything is dense f64 on [`Tensor2`]. Layers expose hand-derived
//! forward/backward pairs (no tape); [`grad_check`] validates every analytic
//! gradient against central differences.

mod gradcheck;
mod layers;
mod params;
mod tensor;

pub use gradcheck::grad_check;
pub use layers::{
    sinusoidal_embedding, FeedForward, FeedForwardCache, LayerNorm, LayerNormCache, Linear,
    LinearCache, PlainCrossAttention, PlainCrossAttentionCache, SelfAttention, SelfAttentionCache,
    TimeEmbed, TimeEmbedCache,
};
pub use params::{Adam, AdamConfig, Grads, ParamId, ParamStore};
pub use tensor::Tensor2;

use crate::error::{Error, Result};

/// Row-wise softmax of `scale * m`, stabilized by row-max subtraction.
pub fn softmax_rows(m: &Tensor2, scale: f64) -> Result<Tensor2> {
    if !m.is_finite() || !scale.is_finite() {
        return Err(Error::invalid("softmax_rows: non-finite input"));
    }
    let mut out = Tensor2::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let row = m.row(i);
        let mut max = f64::NEG_INFINITY;
        for &x in row {
            max = max.max(scale * x);
        }
        let out_row = out.row_mut(i);
        let mut sum = 0.0;
        for (o, &x) in out_row.iter_mut().zip(row) {
            let e = (scale * x - max).exp();
            *o = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for o in out_row.iter_mut() {
            *o *= inv;
        }
    }
    Ok(out)
}

/// Backward of `y = softmax_rows(x, scale)`: given y and dL/dy, returns dL/dx.
///
/// Per row: dx = scale * y ⊙ (dy − <dy, y>).
pub fn softmax_rows_backward(y: &Tensor2, dy: &Tensor2, scale: f64) -> Tensor2 {
    let mut dx = Tensor2::zeros(y.rows(), y.cols());
    for i in 0..y.rows() {
        let yr = y.row(i);
        let dyr = dy.row(i);
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        let dxr = dx.row_mut(i);
        for j in 0..yr.len() {
            dxr[j] = scale * yr[j] * (dyr[j] - dot);
        }
    }
    dx
}

/// `softmax_rows(q·kᵀ, scale) · v` — the shared primitive behind every
/// attention block and the Hopfield update.
pub fn attention(q: &Tensor2, k: &Tensor2, v: &Tensor2, scale: f64) -> Result<Tensor2> {
    if q.cols() != k.cols() {
        return Err(Error::shape(format!(
            "attention: query dim {} vs key dim {}",
            q.cols(),
            k.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(Error::shape(format!(
            "attention: {} keys vs {} values",
            k.rows(),
            v.rows()
        )));
    }
    let logits = q.matmul_nt(k)?;
    let probs = softmax_rows(&logits, scale)?;
    probs.matmul(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use proptest::prelude::*;

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let m = Tensor2::row_vector(&[0.0, 0.0, 0.0]);
        let y = softmax_rows(&m, 1.0).unwrap();
        for &p in y.row(0) {
            assert!((p - 1.0 / 3.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn softmax_saturates_at_large_margin() {
        let m = Tensor2::row_vector(&[60.0, -60.0]);
        let y = softmax_rows(&m, 1.0).unwrap();
        assert!((y.get(0, 0) - 1.0).abs() <= 1e-12);
        assert!(y.get(0, 1) <= 1e-12);
    }

    #[test]
    fn softmax_matches_scalar_closed_form() {
        // (1, 0) at scale 1: (e/(e+1), 1/(e+1)), evaluated independently.
        let e = std::f64::consts::E;
        let y = softmax_rows(&Tensor2::row_vector(&[1.0, 0.0]), 1.0).unwrap();
        assert!((y.get(0, 0) - e / (e + 1.0)).abs() <= 1e-12);
        assert!((y.get(0, 1) - 1.0 / (e + 1.0)).abs() <= 1e-12);
        assert!((y.get(0, 0) - 0.731_058_578_630_004_9).abs() <= 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let m = Tensor2::row_vector(&[f64::NAN, 0.0]);
        assert!(matches!(softmax_rows(&m, 1.0), Err(crate::Error::InvalidInput(_))));
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut rng = SeedStream::new(5);
        let x = Tensor2::randn(3, 4, 1.0, &mut rng);
        let w = Tensor2::randn(3, 4, 1.0, &mut rng);
        let scale = 0.7;
        // Scalar probe: L = sum(w ⊙ softmax(scale·x)).
        let y = softmax_rows(&x, scale).unwrap();
        let dx = softmax_rows_backward(&y, &w, scale);
        let eps = 1e-6;
        for i in 0..x.rows() {
            for j in 0..x.cols() {
                let mut xp = x.clone();
                xp.set(i, j, x.get(i, j) + eps);
                let mut xm = x.clone();
                xm.set(i, j, x.get(i, j) - eps);
                let lp = softmax_rows(&xp, scale)
                    .unwrap()
                    .zip_map(&w, |a, b| a * b)
                    .unwrap()
                    .sum();
                let lm = softmax_rows(&xm, scale)
                    .unwrap()
                    .zip_map(&w, |a, b| a * b)
                    .unwrap()
                    .sum();
                let num = (lp - lm) / (2.0 * eps);
                assert!(
                    (dx.get(i, j) - num).abs() <= 1e-7,
                    "({i},{j}): {} vs {num}",
                    dx.get(i, j)
                );
            }
        }
    }

    #[test]
    fn attention_single_matching_key_returns_value() {
        let q = Tensor2::row_vector(&[0.3, -0.7]);
        let k = q.clone();
        let v = Tensor2::row_vector(&[5.0, 6.0, 7.0]);
        for scale in [0.1, 1.0, 13.0] {
            let out = attention(&q, &k, &v, scale).unwrap();
            assert_eq!(out.row(0), v.row(0));
        }
    }

    #[test]
    fn attention_averages_identical_keys() {
        let q = Tensor2::row_vector(&[1.0, 2.0]);
        let k = Tensor2::from_vec(2, 2, vec![0.5, -0.5, 0.5, -0.5]).unwrap();
        let v = Tensor2::from_vec(2, 2, vec![1.0, 3.0, 5.0, 9.0]).unwrap();
        let out = attention(&q, &k, &v, 1.0).unwrap();
        assert!((out.get(0, 0) - 3.0).abs() <= 1e-12);
        assert!((out.get(0, 1) - 6.0).abs() <= 1e-12);
    }

    #[test]
    fn attention_matches_triple_loop_oracle() {
        let mut rng = SeedStream::new(7);
        let q = Tensor2::randn(2, 4, 1.0, &mut rng);
        let k = Tensor2::randn(3, 4, 1.0, &mut rng);
        let v = Tensor2::randn(3, 5, 1.0, &mut rng);
        let scale = 0.5;
        let fast = attention(&q, &k, &v, scale).unwrap();

        // Independent naive evaluation: explicit loops, no shared helpers.
        let mut slow = Tensor2::zeros(2, 5);
        for i in 0..2 {
            let mut logits = [0.0_f64; 3];
            for (r, logit) in logits.iter_mut().enumerate() {
                let mut dot = 0.0;
                for c in 0..4 {
                    dot += q.get(i, c) * k.get(r, c);
                }
                *logit = scale * dot;
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..5 {
                let mut acc = 0.0;
                for r in 0..3 {
                    acc += exps[r] / sum * v.get(r, j);
                }
                slow.set(i, j, acc);
            }
        }
        assert!(fast.sub(&slow).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn attention_rejects_dimension_mismatch() {
        let q = Tensor2::zeros(2, 3);
        let k = Tensor2::zeros(4, 2);
        let v = Tensor2::zeros(4, 5);
        assert!(matches!(attention(&q, &k, &v, 1.0), Err(crate::Error::Shape(_))));
        let k = Tensor2::zeros(4, 3);
        let v = Tensor2::zeros(3, 5);
        assert!(matches!(attention(&q, &k, &v, 1.0), Err(crate::Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(
            rows in 1usize..6, cols in 1usize..8, seed in 0u64..1000, scale in 0.01f64..4.0
        ) {
            let mut rng = SeedStream::new(seed);
            let m = Tensor2::randn(rows, cols, 3.0, &mut rng);
            let y = softmax_rows(&m, scale).unwrap();
            for i in 0..rows {
                let s: f64 = y.row(i).iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
                prop_assert!(y.row(i).iter().all(|&p| p >= 0.0));
            }
        }

        #[test]
        fn attention_invariant_to_joint_key_value_permutation(seed in 0u64..500) {
            let mut rng = SeedStream::new(seed);
            let q = Tensor2::randn(3, 4, 1.0, &mut rng);
            let k = Tensor2::randn(5, 4, 1.0, &mut rng);
            let v = Tensor2::randn(5, 2, 1.0, &mut rng);
            let base = attention(&q, &k, &v, 0.8).unwrap();

            let mut order: Vec<usize> = (0..5).collect();
            rng.shuffle(&mut order);
            let kp = Tensor2::from_fn(5, 4, |i, j| k.get(order[i], j));
            let vp = Tensor2::from_fn(5, 2, |i, j| v.get(order[i], j));
            let perm = attention(&q, &kp, &vp, 0.8).unwrap();
            prop_assert!(base.sub(&perm).unwrap().max_abs() <= 1e-12);
        }
    }
}
