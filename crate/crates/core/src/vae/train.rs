//! VAE training loop: padded batches, per-item parallel gradients, AdamW.

use super::MotionVae;
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Grads, Tensor2};
use crate::rng::SeedStream;
use crate::toymotion::{Dataset, D_M};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct VaeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    /// Fraction of steps after which the learning rate drops to `lr_final`.
    pub lr_switch: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            lr_initial: 1e-4,
            lr_final: 1e-5,
            lr_switch: 0.8,
            seed: 0,
            log_every: 100,
        }
    }
}

impl VaeTrainConfig {
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
        Ok(())
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainLog {
    /// (step, mean batch loss) at each logging interval plus the final step.
    pub losses: Vec<(usize, f64)>,
    pub final_loss: f64,
}

/// Copies a motion into the first rows of a zero-padded frame tensor.
fn pad_frames(frames: &Tensor2, padded_len: usize) -> Tensor2 {
    let mut out = Tensor2::zeros(padded_len, D_M);
    for i in 0..frames.rows() {
        for j in 0..D_M {
            out.set(i, j, frames.get(i, j));
        }
    }
    out
}

pub fn train_vae(model: &mut MotionVae, dataset: &Dataset, cfg: &VaeTrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if dataset.records.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let mut adam = Adam::new(&model.store, AdamConfig { lr: cfg.lr_initial, ..AdamConfig::default() });
    let mut batch_rng = SeedStream::new(cfg.seed).derive("vae-batches");
    let noise_root = SeedStream::new(cfg.seed).derive("vae-noise");
    let switch_step = ((cfg.steps as f64) * cfg.lr_switch).floor() as usize;
    let (n, d) = (model.config.n_latent, model.config.d_model);
    let mut log = TrainLog::default();

    for step in 0..cfg.steps {
        if step == switch_step {
            adam.set_lr(cfg.lr_final);
        }
        let idx: Vec<usize> =
            (0..cfg.batch_size).map(|_| batch_rng.below(dataset.records.len())).collect();
        let padded_len =
            idx.iter().map(|&i| dataset.records[i].motion.len()).max().expect("non-empty batch");
        let items: Vec<(Tensor2, usize, Tensor2)> = idx
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let rec = &dataset.records[i];
                let mut noise_rng =
                    noise_root.derive_idx((step * cfg.batch_size + k) as u64);
                let eps = Tensor2::from_fn(n, d, |_, _| noise_rng.normal());
                (pad_frames(rec.motion.frames(), padded_len), rec.motion.len(), eps)
            })
            .collect();

        let model_ref: &MotionVae = model;
        let results: Vec<Result<(f64, Grads)>> = items
            .par_iter()
            .map(|(frames, valid, eps)| {
                let mut g = Grads::zeros_like(&model_ref.store);
                let loss = model_ref.item_loss_and_grads(frames, *valid, eps, &mut g)?;
                Ok((loss, g))
            })
            .collect();

        // Reduce in index order so the update is independent of scheduling.
        let mut grads = Grads::zeros_like(&model.store);
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
        adam.step(&mut model.store, &grads);

        if step % cfg.log_every.max(1) == 0 || step + 1 == cfg.steps {
            log.losses.push((step, batch_loss));
            log.final_loss = batch_loss;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymotion::{generate_dataset, GeneratorConfig};
    use crate::vae::VaeConfig;

    fn tiny_dataset(count: usize) -> Dataset {
        let cfg = GeneratorConfig {
            count,
            min_len: 40,
            max_len: 48,
            noise_level: 0.0,
            seed: 77,
            ..GeneratorConfig::default()
        };
        generate_dataset(&cfg).unwrap()
    }

    fn tiny_vae(seed: u64) -> MotionVae {
        let cfg = VaeConfig {
            n_latent: 2,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            ffn_hidden: 32,
            kl_weight: 1e-4,
        };
        MotionVae::new(cfg, seed).unwrap()
    }

    #[test]
    fn loss_drops_on_small_corpus() {
        let data = tiny_dataset(4);
        let mut vae = tiny_vae(3);
        let cfg = VaeTrainConfig {
            steps: 120,
            batch_size: 4,
            lr_initial: 3e-3,
            lr_final: 1e-3,
            lr_switch: 0.8,
            seed: 5,
            log_every: 10,
        };
        let log = train_vae(&mut vae, &data, &cfg).unwrap();
        let first = log.losses.first().unwrap().1;
        assert!(
            log.final_loss < 0.5 * first,
            "loss failed to halve: {first} -> {}",
            log.final_loss
        );
    }

    #[test]
    fn training_is_deterministic() {
        let data = tiny_dataset(3);
        let cfg = VaeTrainConfig {
            steps: 5,
            batch_size: 2,
            lr_initial: 1e-3,
            lr_final: 1e-3,
            lr_switch: 1.0,
            seed: 11,
            log_every: 1,
        };
        let mut a = tiny_vae(9);
        let mut b = tiny_vae(9);
        let la = train_vae(&mut a, &data, &cfg).unwrap();
        let lb = train_vae(&mut b, &data, &cfg).unwrap();
        assert_eq!(la.losses, lb.losses);
        for id in a.store.ids() {
            assert_eq!(a.store.value(id).data(), b.store.value(id).data());
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let data = Dataset { frame_rate: 20.0, records: Vec::new() };
        let mut vae = tiny_vae(1);
        assert!(train_vae(&mut vae, &data, &VaeTrainConfig::default()).is_err());
    }

    #[test]
    fn bad_configs_are_rejected() {
        let data = tiny_dataset(2);
        let mut vae = tiny_vae(1);
        let mut cfg = VaeTrainConfig::default();
        cfg.steps = 0;
        assert!(train_vae(&mut vae, &data, &cfg).is_err());
        cfg.steps = 1;
        cfg.lr_switch = 2.0;
        assert!(train_vae(&mut vae, &data, &cfg).is_err());
    }
}
