//! Run configuration: one auditable TOML document covering model profiles,
//! training, schedule, sampling, and composition defaults.

use crate::composer::Lambdas;
use crate::denoiser::{AgdConfig, DenoiserConfig};
use crate::diffusion::{
    make_schedule, DiffusionTrainConfig, NoiseSchedule, SamplerConfig, ScheduleKind, Substrate,
};
use crate::error::{Error, Result};
use crate::toymotion::D_M;
use crate::vae::{VaeConfig, VaeTrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub t_max: usize,
    pub kind: ScheduleKind,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.t_max, self.kind, self.beta_min, self.beta_max)
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { t_max: 1000, kind: ScheduleKind::Linear, beta_min: 1e-4, beta_max: 2e-2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    Desk,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub dataset: Option<String>,
    pub vae: VaeConfig,
    pub vae_train: VaeTrainConfig,
    pub denoiser: DenoiserConfig,
    pub diffusion_train: DiffusionTrainConfig,
    pub schedule: ScheduleConfig,
    pub sampler: SamplerConfig,
    pub lambdas: Lambdas,
    pub agd: AgdConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk(0)
    }
}

impl RunConfig {
    pub fn desk(seed: u64) -> Self {
        let vae = VaeConfig::default();
        let denoiser = DenoiserConfig::latent_desk(vae.n_latent, vae.d_model);
        Self {
            profile: Profile::Desk,
            seed,
            dataset: None,
            vae,
            vae_train: VaeTrainConfig { seed, ..Default::default() },
            denoiser,
            diffusion_train: DiffusionTrainConfig { seed, ..Default::default() },
            schedule: ScheduleConfig::default(),
            sampler: SamplerConfig { seed, ..Default::default() },
            lambdas: Lambdas::default(),
            agd: AgdConfig::compositional(),
        }
    }

    pub fn paper(seed: u64) -> Self {
        let vae = VaeConfig::paper_profile();
        let denoiser = DenoiserConfig {
            input_dim: vae.d_model,
            max_tokens: vae.n_latent,
            d_model: 256,
            n_layers: 9,
            n_heads: 4,
            ffn_hidden: 1024,
        };
        Self {
            profile: Profile::Paper,
            vae,
            denoiser,
            vae_train: VaeTrainConfig { steps: 300_000, seed, ..Default::default() },
            diffusion_train: DiffusionTrainConfig { steps: 300_000, seed, ..Default::default() },
            ..Self::desk(seed)
        }
    }

    /// Cross-field consistency on top of per-section validation.
    pub fn validate(&self) -> Result<()> {
        self.vae_train.validate()?;
        self.diffusion_train.validate()?;
        self.lambdas.validate()?;
        self.agd.validate()?;
        let schedule = self.schedule.build()?;
        self.sampler.validate(&schedule)?;
        match self.sampler.substrate {
            Substrate::Latent => {
                if self.denoiser.input_dim != self.vae.d_model {
                    return Err(Error::Config(format!(
                        "latent denoiser width {} must match vae d_model {}",
                        self.denoiser.input_dim, self.vae.d_model
                    )));
                }
                if self.denoiser.max_tokens != self.vae.n_latent {
                    return Err(Error::Config(format!(
                        "latent denoiser tokens {} must match vae n_latent {}",
                        self.denoiser.max_tokens, self.vae.n_latent
                    )));
                }
            }
            Substrate::Sequence => {
                if self.denoiser.input_dim != D_M {
                    return Err(Error::Config(format!(
                        "sequence denoiser width {} must match {D_M} channels",
                        self.denoiser.input_dim
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_toml()?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_and_paper_profiles_validate() {
        RunConfig::desk(3).validate().unwrap();
        RunConfig::paper(3).validate().unwrap();
    }

    #[test]
    fn toml_round_trips() {
        let cfg = RunConfig::desk(9);
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = RunConfig::desk(0).to_toml().unwrap();
        text.push_str("\nbogus_key = 1\n");
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn partial_configs_fill_in_desk_defaults() {
        let cfg = RunConfig::from_toml("seed = 7\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.profile, Profile::Desk);
        assert_eq!(cfg.vae, VaeConfig::default());
    }

    #[test]
    fn cross_field_mismatches_are_caught() {
        let mut cfg = RunConfig::desk(0);
        cfg.denoiser.input_dim = 32;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::desk(0);
        cfg.sampler.substrate = Substrate::Sequence;
        assert!(cfg.validate().is_err(), "desk denoiser is latent-shaped");

        let mut cfg = RunConfig::desk(0);
        cfg.lambdas.latent = 0.5;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::desk(0);
        cfg.schedule.beta_min = 0.0;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::desk(0);
        cfg.sampler.steps = 0;
        assert!(cfg.validate().is_err());
    }
}
