//! Handcrafted motion statistics standing in for a learned feature space.

use crate::error::{Error, Result};
use crate::numerics::Tensor2;
use crate::toymotion::{MotionSequence, CH_LIMB_L, CH_LIMB_R, D_M};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Bump when the feature list changes; metric values are only comparable
/// within one version.
pub const FEATURE_VERSION: u32 = 1;

/// Per-channel mean and variance, mean speed, dominant limb frequency,
/// limb oscillation amplitude.
pub const FEATURE_DIM: usize = 2 * D_M + 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: [f64; FEATURE_DIM],
}

impl FeatureVector {
    pub fn distance(&self, other: &FeatureVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Mean frame-to-frame Euclidean step over all channels.
fn mean_speed(m: &MotionSequence) -> f64 {
    let f = m.frames();
    let l = f.rows();
    if l < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..l - 1 {
        let mut s = 0.0;
        for j in 0..f.cols() {
            let d = f.get(i + 1, j) - f.get(i, j);
            s += d * d;
        }
        total += s.sqrt();
    }
    total / (l - 1) as f64
}

/// Power of the mean-removed signal at DFT bin k, naive evaluation.
fn dft_power(signal: &[f64], mean: f64, k: usize) -> f64 {
    let l = signal.len() as f64;
    let mut re = 0.0;
    let mut im = 0.0;
    for (t, &v) in signal.iter().enumerate() {
        let phase = -2.0 * PI * k as f64 * t as f64 / l;
        let x = v - mean;
        re += x * phase.cos();
        im += x * phase.sin();
    }
    re * re + im * im
}

/// Frequency in Hz with the most combined limb-channel power, DC excluded.
fn dominant_limb_frequency(m: &MotionSequence) -> f64 {
    let l = m.len();
    if l < 4 {
        return 0.0;
    }
    let left = m.channel(CH_LIMB_L);
    let right = m.channel(CH_LIMB_R);
    let mean_l = left.iter().sum::<f64>() / l as f64;
    let mean_r = right.iter().sum::<f64>() / l as f64;
    let mut best_k = 0;
    let mut best_p = 0.0;
    for k in 1..=l / 2 {
        let p = dft_power(&left, mean_l, k) + dft_power(&right, mean_r, k);
        if p > best_p {
            best_p = p;
            best_k = k;
        }
    }
    if best_p <= 1e-12 {
        return 0.0;
    }
    best_k as f64 * m.frame_rate() / l as f64
}

/// Half the peak-to-peak range, averaged over the two limb channels.
fn limb_amplitude(m: &MotionSequence) -> f64 {
    let mut total = 0.0;
    for ch in [CH_LIMB_L, CH_LIMB_R] {
        let vals = m.channel(ch);
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        total += (max - min) / 2.0;
    }
    total / 2.0
}

pub fn motion_features(m: &MotionSequence) -> FeatureVector {
    let f = m.frames();
    let l = f.rows() as f64;
    let mut values = [0.0; FEATURE_DIM];
    for j in 0..D_M {
        let mut mean = 0.0;
        for i in 0..f.rows() {
            mean += f.get(i, j);
        }
        mean /= l;
        let mut var = 0.0;
        for i in 0..f.rows() {
            let d = f.get(i, j) - mean;
            var += d * d;
        }
        values[j] = mean;
        values[D_M + j] = var / l;
    }
    values[2 * D_M] = mean_speed(m);
    values[2 * D_M + 1] = dominant_limb_frequency(m);
    values[2 * D_M + 2] = limb_amplitude(m);
    FeatureVector { values }
}

/// Stacks one feature vector per row.
pub fn feature_matrix(feats: &[FeatureVector]) -> Result<Tensor2> {
    if feats.is_empty() {
        return Err(Error::invalid("no feature vectors given"));
    }
    Ok(Tensor2::from_fn(feats.len(), FEATURE_DIM, |i, j| feats[i].values[j]))
}
