//! Denoiser training: noise-prediction regression with condition dropout.

use super::{q_sample, NoiseSchedule};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Grads, Tensor2};
use crate::rng::SeedStream;
use crate::toymotion::ConceptDescription;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub lr_switch: f64,
    /// Probability of replacing the condition with the null embedding.
    pub uncond_rate: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 16,
            lr_initial: 1e-4,
            lr_final: 1e-5,
            lr_switch: 0.8,
            uncond_rate: 0.10,
            seed: 0,
            log_every: 100,
        }
    }
}

impl DiffusionTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch size must be positive".into()));
        }
        if !(self.lr_initial > 0.0 && self.lr_final > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lr_switch) {
            return Err(Error::Config(format!("lr switch {} outside [0, 1]", self.lr_switch)));
        }
        if !(0.0..=1.0).contains(&self.uncond_rate) {
            return Err(Error::Config(format!("uncond rate {} outside [0, 1]", self.uncond_rate)));
        }
        Ok(())
    }
}

/// Deterministic core of one training example: fixed timestep, noise draw,
/// and dropout decision. Returns the mean squared noise-prediction error.
pub fn training_step_at(
    den: &Denoiser,
    schedule: &NoiseSchedule,
    x0: &Tensor2,
    desc: &ConceptDescription,
    t: usize,
    eps: &Tensor2,
    drop_condition: bool,
    grads: &mut Grads,
) -> Result<f64> {
    let x_t = q_sample(x0, t, eps, schedule)?;
    let empty = ConceptDescription::empty();
    let desc_eff = if drop_condition { &empty } else { desc };
    let c = den.embed_description(desc_eff);
    let (pred, cache) = den.forward_cached(&x_t, t as f64, &c)?;
    let count = pred.len() as f64;
    let resid = pred.sub(eps)?;
    let loss = resid.data().iter().map(|r| r * r).sum::<f64>() / count;
    let d_pred = resid.scale(2.0 / count);
    let (_, dc) = den.backward(&cache, &d_pred, grads);
    den.embed_backward(desc_eff, &dc, grads);
    Ok(loss)
}

/// Samples the timestep, noise, and condition dropout from `rng`, then runs
/// the deterministic core.
pub fn training_step(
    den: &Denoiser,
    schedule: &NoiseSchedule,
    x0: &Tensor2,
    desc: &ConceptDescription,
    uncond_rate: f64,
    rng: &mut SeedStream,
    grads: &mut Grads,
) -> Result<f64> {
    let t = rng.below(schedule.len()) + 1;
    let eps = Tensor2::from_fn(x0.rows(), x0.cols(), |_, _| rng.normal());
    let drop = rng.chance(uncond_rate);
    training_step_at(den, schedule, x0, desc, t, &eps, drop, grads)
}

/// Trains on (clean tokens, description) pairs; items keep whatever width and
/// token count the denoiser was built for.
pub fn train_denoiser(
    den: &mut Denoiser,
    items: &[(Tensor2, ConceptDescription)],
    schedule: &NoiseSchedule,
    cfg: &DiffusionTrainConfig,
) -> Result<crate::vae::TrainLog> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::invalid("cannot train on an empty item set"));
    }
    let mut adam = Adam::new(&den.store, AdamConfig { lr: cfg.lr_initial, ..AdamConfig::default() });
    let mut batch_rng = SeedStream::new(cfg.seed).derive("diffusion-batches");
    let draw_root = SeedStream::new(cfg.seed).derive("diffusion-draws");
    let switch_step = ((cfg.steps as f64) * cfg.lr_switch).floor() as usize;
    let mut log = crate::vae::TrainLog::default();

    for step in 0..cfg.steps {
        if step == switch_step {
            adam.set_lr(cfg.lr_final);
        }
        let idx: Vec<usize> =
            (0..cfg.batch_size).map(|_| batch_rng.below(items.len())).collect();
        let den_ref: &Denoiser = den;
        let results: Vec<Result<(f64, Grads)>> = idx
            .par_iter()
            .enumerate()
            .map(|(k, &i)| {
                let (x0, desc) = &items[i];
                let mut rng = draw_root.derive_idx((step * cfg.batch_size + k) as u64);
                let mut g = Grads::zeros_like(&den_ref.store);
                let loss =
                    training_step(den_ref, schedule, x0, desc, cfg.uncond_rate, &mut rng, &mut g)?;
                Ok((loss, g))
            })
            .collect();

        let mut grads = Grads::zeros_like(&den.store);
        let mut batch_loss = 0.0;
        for r in results {
            let (loss, g) = r?;
            batch_loss += loss;
            grads.accumulate(&g);
        }
        batch_loss /= cfg.batch_size as f64;
        grads.scale(1.0 / cfg.batch_size as f64);
        if !batch_loss.is_finite() || !grads.is_finite() {
            return Err(Error::TrainingFailure { step, reason: "non-finite loss or gradient".into() });
        }
        adam.step(&mut den.store, &grads);

        if step % cfg.log_every.max(1) == 0 || step + 1 == cfg.steps {
            log.losses.push((step, batch_loss));
            log.final_loss = batch_loss;
        }
    }
    Ok(log)
}
