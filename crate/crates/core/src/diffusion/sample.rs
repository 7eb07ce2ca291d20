//! Reverse-process samplers over an evenly spaced timestep subsequence.

use super::{cfg_score, NoiseSchedule};
use crate::denoiser::{AgdConfig, ConceptEmbedding, Denoiser};
use crate::error::{Error, Result};
use crate::numerics::Tensor2;
use crate::rng::SeedStream;
use crate::toymotion::ConceptDescription;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum Substrate {
    Latent,
    Sequence,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    /// Stochastic reverse steps with the posterior variance.
    Ancestral,
    /// Zero-variance steps; the full trajectory is a function of the seed.
    DeterministicSubsequence,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub substrate: Substrate,
    pub steps: usize,
    pub guidance_weight: f64,
    pub sampler: SamplerKind,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            substrate: Substrate::Latent,
            steps: 50,
            guidance_weight: 5.0,
            sampler: SamplerKind::DeterministicSubsequence,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > schedule.len() {
            return Err(Error::Config(format!(
                "sampler steps {} outside 1..={}",
                self.steps,
                schedule.len()
            )));
        }
        if !(self.guidance_weight.is_finite() && self.guidance_weight >= 0.0) {
            return Err(Error::Config(format!(
                "guidance weight must be finite and >= 0, got {}",
                self.guidance_weight
            )));
        }
        Ok(())
    }
}

/// Evenly spaced timesteps from T down to 1, inclusive at both ends.
/// Per-step reverse-transition coefficients (x̂₀ weight, direction weight,
/// noise sigma). With consecutive steps the ancestral variance reduces to the
/// posterior variance β̃.
pub(crate) fn transition_coefs(ab: f64, ab_prev: f64, kind: SamplerKind) -> (f64, f64, f64) {
    let var = match kind {
        SamplerKind::Ancestral => ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).max(0.0),
        SamplerKind::DeterministicSubsequence => 0.0,
    };
    (ab_prev.sqrt(), (1.0 - ab_prev - var).max(0.0).sqrt(), var.sqrt())
}

pub(crate) fn timesteps(t_max: usize, steps: usize) -> Vec<usize> {
    if steps == 1 {
        return vec![t_max];
    }
    (0..steps)
        .map(|i| {
            let frac = i as f64 / (steps - 1) as f64;
            (t_max as f64 - frac * (t_max - 1) as f64).round() as usize
        })
        .collect()
}

/// Runs the reverse process from pure noise with an arbitrary guided score.
/// The score receives (x_t, t) and returns the predicted noise.
pub fn sample_with_score<F>(
    schedule: &NoiseSchedule,
    shape: (usize, usize),
    cfg: &SamplerConfig,
    mut score: F,
) -> Result<Tensor2>
where
    F: FnMut(&Tensor2, f64) -> Result<Tensor2>,
{
    cfg.validate(schedule)?;
    let (rows, cols) = shape;
    if rows == 0 || cols == 0 {
        return Err(Error::shape(format!("empty sample shape {shape:?}")));
    }
    let mut rng = SeedStream::new(cfg.seed).derive("sampler");
    let mut x = Tensor2::from_fn(rows, cols, |_, _| rng.normal());
    let ts = timesteps(schedule.len(), cfg.steps);
    for (k, &t) in ts.iter().enumerate() {
        let eps_hat = score(&x, t as f64)?;
        if eps_hat.shape() != shape {
            return Err(Error::shape(format!(
                "score returned {:?}, expected {shape:?}",
                eps_hat.shape()
            )));
        }
        let ab = schedule.alpha_bar(t);
        let ab_prev = match ts.get(k + 1) {
            Some(&prev_t) => schedule.alpha_bar(prev_t),
            None => 1.0,
        };
        let (x0_coef, dir_coef, sigma) = transition_coefs(ab, ab_prev, cfg.sampler);
        let sab = ab.sqrt();
        let s1m = (1.0 - ab).sqrt();
        x = Tensor2::from_fn(rows, cols, |i, j| {
            let xt = x.get(i, j);
            let e = eps_hat.get(i, j);
            let x0_hat = (xt - s1m * e) / sab;
            let noise = if sigma > 0.0 { rng.normal() } else { 0.0 };
            x0_coef * x0_hat + dir_coef * e + sigma * noise
        });
        if !x.is_finite() {
            return Err(Error::SamplingFailure {
                step: k,
                reason: format!("non-finite state at t = {t}"),
            });
        }
    }
    Ok(x)
}

/// Classifier-free guided sampling from a trained denoiser. Token refinement
/// applies to the conditional branch; the null branch has nothing to refine.
pub fn sample(
    den: &Denoiser,
    schedule: &NoiseSchedule,
    c: &ConceptEmbedding,
    shape: (usize, usize),
    cfg: &SamplerConfig,
    agd: AgdConfig,
) -> Result<Tensor2> {
    agd.validate()?;
    let null = den.embed_description(&ConceptDescription::empty());
    sample_with_score(schedule, shape, cfg, |x, t| {
        let eps_u = den.predict_eps(x, t, &null, AgdConfig::OFF)?;
        let eps_c = den.predict_eps(x, t, c, agd)?;
        cfg_score(&eps_u, &eps_c, cfg.guidance_weight)
    })
}
