//! Self-augmentation: compose two-concept motions, fine-tune the denoiser on
//! them, and report the change in single-concept recall.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::composer::{compose_pipeline, CompositionSpec, CompositionTerm};
use crate::denoiser::Denoiser;
use crate::diffusion::{train_denoiser, DiffusionTrainConfig, SamplerConfig, Substrate};
use crate::error::{Error, Result};
use crate::evalsuite::{bootstrap_mean_ci, per_sample_hits};
use crate::io::checkpoint::DenoiserSnapshot;
use crate::io::config::RunConfig;
use crate::io::pipeline::{
    encode_dataset_with_scale, encode_motion, normalize_motion, per_sample_seed,
    single_concept_batch, snapshot_context,
};
use crate::numerics::Tensor2;
use crate::rng::SeedStream;
use crate::toymotion::{ConceptDescription, ConceptKind, ConceptToken, Dataset, MotionSequence};
use crate::vae::MotionVae;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Composed samples to add; zero keeps the model untouched.
    pub count: usize,
    pub length: usize,
    pub finetune_steps: usize,
    /// Factor on both learning-rate endpoints relative to the base run.
    pub lr_scale: f64,
    pub eval_per_concept: usize,
    pub bootstrap_resamples: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            count: 500,
            length: 96,
            finetune_steps: 300,
            lr_scale: 0.1,
            eval_per_concept: 20,
            bootstrap_resamples: 1000,
            confidence: 0.95,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_scale > 0.0 && self.lr_scale <= 1.0) {
            return Err(Error::Config(format!("lr scale {} outside (0, 1]", self.lr_scale)));
        }
        if self.eval_per_concept == 0 {
            return Err(Error::Config("need at least one eval sample per concept".into()));
        }
        if self.bootstrap_resamples == 0 {
            return Err(Error::Config("need at least one bootstrap resample".into()));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::Config(format!("confidence {} outside (0, 1)", self.confidence)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentReport {
    pub requested: usize,
    pub composed: usize,
    pub skipped: usize,
    pub failures: Vec<String>,
    pub finetuned: bool,
    pub recall_before: f64,
    pub ci_before: (f64, f64),
    pub recall_after: f64,
    pub ci_after: (f64, f64),
    pub delta: f64,
}

fn protocol_recall(
    den: &Denoiser,
    snapshot: &DenoiserSnapshot,
    vae: Option<&MotionVae>,
    run: &RunConfig,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<(f64, (f64, f64))> {
    let samples = single_concept_batch(
        den,
        snapshot,
        vae,
        &ConceptKind::all(),
        cfg.eval_per_concept,
        &run.sampler,
        run.agd,
        cfg.length,
        seed,
    )?;
    let hits = per_sample_hits(&samples);
    let recall = hits.iter().sum::<f64>() / hits.len() as f64;
    let ci = bootstrap_mean_ci(&hits, cfg.bootstrap_resamples, cfg.confidence, seed)?;
    Ok((recall, ci))
}

/// Draws two concept kinds from different families.
fn draw_pair(rng: &mut SeedStream) -> (ConceptKind, ConceptKind) {
    let all = ConceptKind::all();
    loop {
        let a = all[rng.below(all.len())];
        let b = all[rng.below(all.len())];
        if a.family() != b.family() {
            return (a, b);
        }
    }
}

/// Composes `count` two-concept motions, fine-tunes on the successes mixed
/// into the base dataset, and measures single-concept recall before and
/// after with the same evaluation seeds so the comparison is paired.
pub fn augment_denoiser(
    den: &mut Denoiser,
    snapshot: &DenoiserSnapshot,
    vae: Option<&MotionVae>,
    base: &Dataset,
    run: &RunConfig,
    cfg: &AugmentConfig,
) -> Result<AugmentReport> {
    cfg.validate()?;
    let eval_seed = SeedStream::new(cfg.seed).derive("augment-eval").next_u64();
    let (recall_before, ci_before) = protocol_recall(den, snapshot, vae, run, cfg, eval_seed)?;

    let mut pair_rng = SeedStream::new(cfg.seed).derive("augment-pairs");
    let specs: Vec<(u64, CompositionSpec)> = (0..cfg.count as u64)
        .map(|i| {
            let (a, b) = draw_pair(&mut pair_rng);
            let joint = ConceptDescription::new(vec![ConceptToken::unit(a), ConceptToken::unit(b)])
                .expect("distinct families");
            let spec = CompositionSpec {
                terms: vec![
                    CompositionTerm::conjoin(ConceptDescription::single(a), 1.0),
                    CompositionTerm::conjoin(ConceptDescription::single(b), 1.0),
                ],
                joint_desc: Some(joint),
                lambdas: run.lambdas,
                agd: run.agd,
                sampler: SamplerConfig {
                    seed: per_sample_seed(cfg.seed, "augment-sample", i),
                    ..run.sampler
                },
            };
            (i, spec)
        })
        .collect();

    let ctx = snapshot_context(snapshot, vae)?;
    let schedule = snapshot.schedule.build()?;
    let mut composed: Vec<(MotionSequence, ConceptDescription)> = Vec::new();
    let mut failures = Vec::new();
    let results: Vec<(u64, Result<(MotionSequence, ConceptDescription)>)> = specs
        .par_iter()
        .map(|(i, spec)| {
            let out = compose_pipeline(den, &schedule, spec, &ctx, cfg.length).map(|(m, _)| {
                (m, spec.joint_desc.clone().expect("joint description set above"))
            });
            (*i, out)
        })
        .collect();
    for (i, res) in results {
        match res {
            Ok(item) => composed.push(item),
            Err(e) => failures.push(format!("sample {i}: {e}")),
        }
    }

    let finetune = !composed.is_empty() && cfg.finetune_steps > 0;
    if finetune {
        let mut items: Vec<(Tensor2, ConceptDescription)> = match snapshot.substrate {
            Substrate::Latent => {
                let vae = vae.ok_or_else(|| {
                    Error::invalid("latent-substrate fine-tuning needs an autoencoder")
                })?;
                let mut items = encode_dataset_with_scale(vae, base, snapshot.latent_scale)?;
                for (m, d) in &composed {
                    items.push((encode_motion(vae, m, snapshot.latent_scale)?, d.clone()));
                }
                items
            }
            Substrate::Sequence => {
                let mut items: Vec<(Tensor2, ConceptDescription)> = base
                    .records
                    .iter()
                    .map(|r| {
                        (
                            normalize_motion(
                                &r.motion,
                                &snapshot.channel_mean,
                                &snapshot.channel_std,
                            ),
                            r.desc.clone(),
                        )
                    })
                    .collect();
                for (m, d) in &composed {
                    items.push((
                        normalize_motion(m, &snapshot.channel_mean, &snapshot.channel_std),
                        d.clone(),
                    ));
                }
                items
            }
        };
        items.shrink_to_fit();
        let ft = DiffusionTrainConfig {
            steps: cfg.finetune_steps,
            lr_initial: run.diffusion_train.lr_initial * cfg.lr_scale,
            lr_final: run.diffusion_train.lr_final * cfg.lr_scale,
            seed: SeedStream::new(cfg.seed).derive("augment-finetune").next_u64(),
            ..run.diffusion_train
        };
        train_denoiser(den, &items, &schedule, &ft)?;
    }

    let (recall_after, ci_after) = if finetune {
        protocol_recall(den, snapshot, vae, run, cfg, eval_seed)?
    } else {
        (recall_before, ci_before)
    };

    Ok(AugmentReport {
        requested: cfg.count,
        composed: composed.len(),
        skipped: failures.len(),
        failures,
        finetuned: finetune,
        recall_before,
        ci_before,
        recall_after,
        ci_after,
        delta: recall_after - recall_before,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::config::RunConfig;
    use crate::io::pipeline::train_denoiser_pipeline;
    use crate::toymotion::{generate_dataset, GeneratorConfig};
    use crate::vae::{MotionVae, VaeConfig};

    fn tiny_setup() -> (RunConfig, Dataset, MotionVae, Denoiser, DenoiserSnapshot) {
        let mut run = RunConfig::desk(3);
        run.vae = VaeConfig {
            n_latent: 2,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_hidden: 16,
            kl_weight: 1e-4,
        };
        run.denoiser.input_dim = 8;
        run.denoiser.max_tokens = 2;
        run.denoiser.d_model = 16;
        run.denoiser.n_layers = 1;
        run.denoiser.n_heads = 2;
        run.denoiser.ffn_hidden = 32;
        run.diffusion_train.steps = 3;
        run.diffusion_train.batch_size = 2;
        run.sampler.steps = 3;
        let ds =
            generate_dataset(&GeneratorConfig { count: 6, seed: 9, ..Default::default() }).unwrap();
        let vae = MotionVae::new(run.vae.clone(), 2).unwrap();
        let (den, snapshot, _) = train_denoiser_pipeline(&ds, Some(&vae), &run, None).unwrap();
        (run, ds, vae, den, snapshot)
    }

    fn tiny_cfg(count: usize) -> AugmentConfig {
        AugmentConfig {
            count,
            length: 48,
            finetune_steps: 2,
            lr_scale: 0.1,
            eval_per_concept: 1,
            bootstrap_resamples: 50,
            confidence: 0.95,
            seed: 4,
        }
    }

    #[test]
    fn zero_count_leaves_the_model_untouched() {
        let (run, ds, vae, mut den, snapshot) = tiny_setup();
        let before: Vec<f64> = den.store.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        let report =
            augment_denoiser(&mut den, &snapshot, Some(&vae), &ds, &run, &tiny_cfg(0)).unwrap();
        let after: Vec<f64> = den.store.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        assert_eq!(before, after);
        assert!(!report.finetuned);
        assert_eq!(report.requested, 0);
        assert_eq!(report.composed, 0);
        assert_eq!(report.delta, 0.0);
        assert_eq!(report.recall_after, report.recall_before);
        assert_eq!(report.ci_after, report.ci_before);
    }

    #[test]
    fn augmentation_composes_finetunes_and_reports() {
        let (run, ds, vae, mut den, snapshot) = tiny_setup();
        let before: Vec<f64> = den.store.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        let report =
            augment_denoiser(&mut den, &snapshot, Some(&vae), &ds, &run, &tiny_cfg(3)).unwrap();
        let after: Vec<f64> = den.store.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        assert_eq!(report.requested, 3);
        assert_eq!(report.composed + report.skipped, 3);
        assert!(report.finetuned);
        assert!(report.composed > 0);
        assert_ne!(before, after);
        assert!(report.ci_before.0 <= report.recall_before);
        assert!(report.recall_before <= report.ci_before.1);
        assert!((report.delta - (report.recall_after - report.recall_before)).abs() <= 1e-15);
    }

    #[test]
    fn augmentation_is_deterministic_for_a_fixed_seed() {
        let (run, ds, vae, den0, snapshot) = tiny_setup();
        let mut den_a = den0.clone();
        let mut den_b = den0;
        let ra =
            augment_denoiser(&mut den_a, &snapshot, Some(&vae), &ds, &run, &tiny_cfg(2)).unwrap();
        let rb =
            augment_denoiser(&mut den_b, &snapshot, Some(&vae), &ds, &run, &tiny_cfg(2)).unwrap();
        assert_eq!(ra.recall_before, rb.recall_before);
        assert_eq!(ra.recall_after, rb.recall_after);
        assert_eq!(ra.composed, rb.composed);
        let a: Vec<f64> = den_a.store.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        let b: Vec<f64> = den_b.store.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation_catches_bad_values() {
        assert!(AugmentConfig { lr_scale: 0.0, ..Default::default() }.validate().is_err());
        assert!(AugmentConfig { confidence: 1.0, ..Default::default() }.validate().is_err());
        assert!(AugmentConfig { eval_per_concept: 0, ..Default::default() }.validate().is_err());
        assert!(AugmentConfig { bootstrap_resamples: 0, ..Default::default() }.validate().is_err());
    }
}
