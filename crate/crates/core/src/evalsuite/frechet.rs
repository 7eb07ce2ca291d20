//! Fréchet distance between feature distributions, with a self-contained
//! symmetric eigensolver for the covariance square roots.

use super::features::{feature_matrix, FeatureVector};
use crate::error::{Error, Result};
use crate::numerics::Tensor2;

/// Eigenvalues this far below zero are treated as covariance-estimation
/// noise and clipped; anything lower rejects the input.
const EIGEN_CLIP: f64 = -1e-8;

/// Cyclic Jacobi diagonalization of a symmetric matrix. Returns eigenvalues
/// and the orthonormal eigenvectors as columns, unsorted.
pub fn symmetric_eigen(a: &Tensor2) -> Result<(Vec<f64>, Tensor2)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape(format!("eigen needs a square matrix, got {:?}", a.shape())));
    }
    let scale = a.max_abs().max(1.0);
    for i in 0..n {
        for j in 0..i {
            if (a.get(i, j) - a.get(j, i)).abs() > 1e-9 * scale {
                return Err(Error::invalid(format!(
                    "matrix is not symmetric at ({i},{j}): {} vs {}",
                    a.get(i, j),
                    a.get(j, i)
                )));
            }
        }
    }
    let mut m = a.clone();
    let mut v = Tensor2::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 });
    let off = |m: &Tensor2| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m.get(i, j) * m.get(i, j);
                }
            }
        }
        s.sqrt()
    };
    let tol = 1e-14 * scale;
    for _ in 0..60 {
        if off(&m) <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq.abs() <= tol / (n * n) as f64 {
                    continue;
                }
                let tau = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    if off(&m) > 1e-10 * scale {
        return Err(Error::invalid("eigensolver failed to converge"));
    }
    Ok(((0..n).map(|i| m.get(i, i)).collect(), v))
}

fn clip_eigenvalue(l: f64, context: &str) -> Result<f64> {
    if l < EIGEN_CLIP {
        return Err(Error::invalid(format!("{context}: eigenvalue {l} below clip tolerance")));
    }
    Ok(l.max(0.0))
}

/// V·diag(√max(λ,0))·Vᵀ.
fn psd_sqrt(a: &Tensor2) -> Result<Tensor2> {
    let (eigs, v) = symmetric_eigen(a)?;
    let mut scaled = v.clone();
    for (j, &l) in eigs.iter().enumerate() {
        let root = clip_eigenvalue(l, "covariance square root")?.sqrt();
        for i in 0..scaled.rows() {
            scaled.set(i, j, scaled.get(i, j) * root);
        }
    }
    scaled.matmul_nt(&v)
}

/// Sample mean (row) and unbiased covariance of row-stacked samples.
pub fn mean_and_covariance(samples: &Tensor2) -> Result<(Tensor2, Tensor2)> {
    let (n, d) = samples.shape();
    if n < 2 {
        return Err(Error::invalid("covariance needs at least two samples"));
    }
    let mut mean = Tensor2::zeros(1, d);
    for i in 0..n {
        for j in 0..d {
            mean.set(0, j, mean.get(0, j) + samples.get(i, j));
        }
    }
    mean.scale_in_place(1.0 / n as f64);
    let centered = Tensor2::from_fn(n, d, |i, j| samples.get(i, j) - mean.get(0, j));
    let cov = centered.matmul_tn(&centered)?.scale(1.0 / (n - 1) as f64);
    Ok((mean, cov))
}

/// ‖μ_a−μ_b‖² + tr(Σ_a + Σ_b − 2(Σ_a^½ Σ_b Σ_a^½)^½).
pub fn frechet_from_moments(
    mean_a: &Tensor2,
    cov_a: &Tensor2,
    mean_b: &Tensor2,
    cov_b: &Tensor2,
) -> Result<f64> {
    let root_a = psd_sqrt(cov_a)?;
    let inner = root_a.matmul(cov_b)?.matmul(&root_a)?;
    // Symmetrize away the roundoff skew before diagonalizing.
    let inner_t = inner.transpose();
    let inner = inner.add(&inner_t)?.scale(0.5);
    let (eigs, _) = symmetric_eigen(&inner)?;
    let mut cross = 0.0;
    for l in eigs {
        cross += clip_eigenvalue(l, "cross-covariance term")?.sqrt();
    }
    let mut d2 = 0.0;
    for j in 0..mean_a.cols() {
        let d = mean_a.get(0, j) - mean_b.get(0, j);
        d2 += d * d;
    }
    for i in 0..cov_a.rows() {
        d2 += cov_a.get(i, i) + cov_b.get(i, i);
    }
    Ok(d2 - 2.0 * cross)
}

/// Fréchet distance between two row-stacked sample sets. Each set must hold
/// more samples than the feature dimension.
pub fn frechet_distance_rows(a: &Tensor2, b: &Tensor2) -> Result<f64> {
    let d = a.cols();
    if b.cols() != d {
        return Err(Error::shape("feature sets must share a dimension".to_string()));
    }
    for (name, set) in [("first", a), ("second", b)] {
        if set.rows() <= d {
            return Err(Error::invalid(format!(
                "{name} set has {} samples for dimension {d}; need more samples than dimensions",
                set.rows()
            )));
        }
        set.check_finite(name)?;
    }
    let (mean_a, cov_a) = mean_and_covariance(a)?;
    let (mean_b, cov_b) = mean_and_covariance(b)?;
    frechet_from_moments(&mean_a, &cov_a, &mean_b, &cov_b)
}

pub fn frechet_distance(feats_a: &[FeatureVector], feats_b: &[FeatureVector]) -> Result<f64> {
    frechet_distance_rows(&feature_matrix(feats_a)?, &feature_matrix(feats_b)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    #[test]
    fn eigen_reconstructs_a_known_symmetric_matrix() {
        let a = Tensor2::from_vec(3, 3, vec![4.0, 1.0, 0.5, 1.0, 3.0, -0.2, 0.5, -0.2, 2.0])
            .unwrap();
        let (eigs, v) = symmetric_eigen(&a).unwrap();
        let mut recon = Tensor2::zeros(3, 3);
        for k in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    recon.set(i, j, recon.get(i, j) + eigs[k] * v.get(i, k) * v.get(j, k));
                }
            }
        }
        assert!(recon.sub(&a).unwrap().max_abs() <= 1e-10);
        let sum: f64 = eigs.iter().sum();
        assert!((sum - 9.0).abs() <= 1e-10, "trace preserved");
        let gram = v.matmul_tn(&v).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram.get(i, j) - want).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let mut rng = SeedStream::new(1);
        let a = Tensor2::randn(20, 3, 1.0, &mut rng);
        let d = frechet_distance_rows(&a, &a).unwrap();
        assert!(d.abs() <= 1e-8, "got {d}");
    }

    #[test]
    fn unit_mean_shift_in_one_dimension_costs_exactly_one() {
        // Both sets have sample variance 1 under the unbiased estimator.
        let a = Tensor2::from_vec(3, 1, vec![-1.0, 0.0, 1.0]).unwrap();
        let b = Tensor2::from_vec(3, 1, vec![0.0, 1.0, 2.0]).unwrap();
        let d = frechet_distance_rows(&a, &b).unwrap();
        assert!((d - 1.0).abs() <= 1e-10, "got {d}");
    }

    #[test]
    fn distance_is_symmetric() {
        let mut rng = SeedStream::new(2);
        let a = Tensor2::randn(30, 4, 1.0, &mut rng);
        let b = Tensor2::randn(25, 4, 1.3, &mut rng);
        let ab = frechet_distance_rows(&a, &b).unwrap();
        let ba = frechet_distance_rows(&b, &a).unwrap();
        assert!((ab - ba).abs() <= 1e-9 * ab.abs().max(1.0));
        assert!(ab > 0.0);
    }

    #[test]
    fn undersized_sets_are_rejected() {
        let a = Tensor2::zeros(3, 3);
        let b = Tensor2::zeros(10, 3);
        assert!(frechet_distance_rows(&a, &b).is_err());
        assert!(frechet_distance_rows(&b, &a).is_err());
    }

    /// 2x2 helper: tr((Σa·Σb)^½) from the characteristic polynomial, an
    /// evaluation path independent of the Jacobi solver.
    fn cross_trace_2x2(sa: [[f64; 2]; 2], sb: [[f64; 2]; 2]) -> f64 {
        let p = [
            [sa[0][0] * sb[0][0] + sa[0][1] * sb[1][0], sa[0][0] * sb[0][1] + sa[0][1] * sb[1][1]],
            [sa[1][0] * sb[0][0] + sa[1][1] * sb[1][0], sa[1][0] * sb[0][1] + sa[1][1] * sb[1][1]],
        ];
        let trace = p[0][0] + p[1][1];
        let det = p[0][0] * p[1][1] - p[0][1] * p[1][0];
        let disc = (trace * trace - 4.0 * det).max(0.0).sqrt();
        let l1 = (trace + disc) / 2.0;
        let l2 = (trace - disc) / 2.0;
        l1.max(0.0).sqrt() + l2.max(0.0).sqrt()
    }

    #[test]
    fn sampled_two_dimensional_gaussians_match_the_closed_form() {
        let sa = [[1.0, 0.3], [0.3, 2.0]];
        let sb = [[1.5, -0.2], [-0.2, 0.5]];
        let (mu_a, mu_b): ([f64; 2], [f64; 2]) = ([0.0, 0.0], [1.0, -1.0]);
        let analytic = {
            let mean_term = (mu_a[0] - mu_b[0]).powi(2) + (mu_a[1] - mu_b[1]).powi(2);
            let trace_term = sa[0][0] + sa[1][1] + sb[0][0] + sb[1][1];
            mean_term + trace_term - 2.0 * cross_trace_2x2(sa, sb)
        };

        let chol = |s: [[f64; 2]; 2]| {
            let l00 = s[0][0].sqrt();
            let l10 = s[1][0] / l00;
            let l11 = (s[1][1] - l10 * l10).sqrt();
            [[l00, 0.0], [l10, l11]]
        };
        let n = 10_000;
        let mut rng = SeedStream::new(3);
        let mut make = |s: [[f64; 2]; 2], mu: [f64; 2]| {
            let l = chol(s);
            let mut out = Tensor2::zeros(n, 2);
            for i in 0..n {
                let (g0, g1) = (rng.normal(), rng.normal());
                out.set(i, 0, mu[0] + l[0][0] * g0);
                out.set(i, 1, mu[1] + l[1][0] * g0 + l[1][1] * g1);
            }
            out
        };
        let a = make(sa, mu_a);
        let b = make(sb, mu_b);
        let d = frechet_distance_rows(&a, &b).unwrap();
        assert!(
            (d - analytic).abs() <= 0.1 * analytic,
            "sampled {d} vs analytic {analytic}"
        );
    }

    #[test]
    fn rank_deficient_covariances_are_handled() {
        // Second coordinate is constant: covariance is PSD but singular.
        let a = Tensor2::from_fn(10, 2, |i, j| if j == 0 { i as f64 } else { 5.0 });
        let b = Tensor2::from_fn(12, 2, |i, j| if j == 0 { 1.5 * i as f64 } else { 5.0 });
        let d = frechet_distance_rows(&a, &b).unwrap();
        assert!(d.is_finite() && d >= -1e-8);
    }
}
