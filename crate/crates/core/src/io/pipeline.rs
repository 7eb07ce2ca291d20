//! Training and sampling pipelines shared by the CLI, the evaluation
//! protocol, and the augmentation loop.

use std::path::Path;

use rayon::prelude::*;

use crate::composer::{decode_sample, SubstrateContext};
use crate::denoiser::{AgdConfig, Denoiser};
use crate::diffusion::{sample, train_denoiser, SamplerConfig, Substrate};
use crate::error::{Error, Result};
use crate::io::checkpoint::{save_denoiser, save_vae, DenoiserSnapshot};
use crate::io::config::RunConfig;
use crate::numerics::Tensor2;
use crate::rng::SeedStream;
use crate::toymotion::{ConceptDescription, ConceptKind, Dataset, MotionSequence, D_M, FRAME_RATE};
use crate::vae::{train_vae, MotionVae, TrainLog};

/// Latent training items plus the scale that maps encodings to unit rms.
pub struct LatentItems {
    pub items: Vec<(Tensor2, ConceptDescription)>,
    pub scale: f64,
}

/// Deterministic latent for one motion: the posterior mean, scaled.
pub fn encode_motion(vae: &MotionVae, motion: &MotionSequence, scale: f64) -> Result<Tensor2> {
    let (posterior, _) = vae.encode_frames(motion.frames(), motion.len())?;
    Ok(posterior.mean.scale(scale))
}

/// Encodes every record at the given scale, in dataset order.
pub fn encode_dataset_with_scale(
    vae: &MotionVae,
    ds: &Dataset,
    scale: f64,
) -> Result<Vec<(Tensor2, ConceptDescription)>> {
    ds.records
        .par_iter()
        .map(|rec| Ok((encode_motion(vae, &rec.motion, scale)?, rec.desc.clone())))
        .collect()
}

/// Encodes the dataset and picks the scale that normalizes the pooled rms of
/// all latent entries to one.
pub fn encode_dataset_to_latents(vae: &MotionVae, ds: &Dataset) -> Result<LatentItems> {
    if ds.records.is_empty() {
        return Err(Error::invalid("cannot encode an empty dataset"));
    }
    let raw = encode_dataset_with_scale(vae, ds, 1.0)?;
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    for (z, _) in &raw {
        for v in z.data() {
            sum_sq += v * v;
        }
        count += z.data().len();
    }
    let rms = (sum_sq / count as f64).sqrt();
    if !rms.is_finite() || rms < 1e-12 {
        return Err(Error::State(format!("latent encodings are degenerate (rms {rms})")));
    }
    let scale = 1.0 / rms;
    let items = raw.into_iter().map(|(z, d)| (z.scale(scale), d)).collect();
    Ok(LatentItems { items, scale })
}

/// Per-channel normalized frames plus the statistics that undo it.
pub struct SequenceItems {
    pub items: Vec<(Tensor2, ConceptDescription)>,
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
}

/// Normalizes one motion with fixed statistics.
pub fn normalize_motion(motion: &MotionSequence, mean: &[f64], std: &[f64]) -> Tensor2 {
    let f = motion.frames();
    Tensor2::from_fn(f.rows(), D_M, |i, j| (f.get(i, j) - mean[j]) / std[j])
}

/// Pools per-channel statistics over every frame of every record, then
/// normalizes the records. A near-constant channel keeps std 1 so it stays
/// constant through the round trip.
pub fn normalize_dataset_frames(ds: &Dataset) -> Result<SequenceItems> {
    if ds.records.is_empty() {
        return Err(Error::invalid("cannot normalize an empty dataset"));
    }
    let mut mean = vec![0.0; D_M];
    let mut count = 0usize;
    for rec in &ds.records {
        let f = rec.motion.frames();
        for i in 0..f.rows() {
            for j in 0..D_M {
                mean[j] += f.get(i, j);
            }
        }
        count += f.rows();
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut var = vec![0.0; D_M];
    for rec in &ds.records {
        let f = rec.motion.frames();
        for i in 0..f.rows() {
            for j in 0..D_M {
                var[j] += (f.get(i, j) - mean[j]).powi(2);
            }
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|v| {
            let s = (v / count as f64).sqrt();
            if s < 1e-6 {
                1.0
            } else {
                s
            }
        })
        .collect();
    let items = ds
        .records
        .iter()
        .map(|rec| (normalize_motion(&rec.motion, &mean, &std), rec.desc.clone()))
        .collect();
    Ok(SequenceItems { items, channel_mean: mean, channel_std: std })
}

/// Trains a fresh motion autoencoder and optionally writes its checkpoint.
pub fn train_vae_pipeline(
    ds: &Dataset,
    run: &RunConfig,
    out: Option<&Path>,
) -> Result<(MotionVae, TrainLog)> {
    run.validate()?;
    let mut vae = MotionVae::new(run.vae.clone(), run.seed)?;
    let log = train_vae(&mut vae, ds, &run.vae_train)?;
    if let Some(path) = out {
        let rng = SeedStream::new(run.seed).state();
        save_vae(path, &vae, run.vae_train.steps as u64, rng)?;
    }
    Ok((vae, log))
}

/// Trains a denoiser on the configured substrate and optionally writes its
/// checkpoint. Latent substrate needs the autoencoder that defines the space.
pub fn train_denoiser_pipeline(
    ds: &Dataset,
    vae: Option<&MotionVae>,
    run: &RunConfig,
    out: Option<&Path>,
) -> Result<(Denoiser, DenoiserSnapshot, TrainLog)> {
    run.validate()?;
    let (items, snapshot) = match run.sampler.substrate {
        Substrate::Latent => {
            let vae = vae.ok_or_else(|| {
                Error::invalid("latent-substrate training needs an autoencoder")
            })?;
            let encoded = encode_dataset_to_latents(vae, ds)?;
            let snapshot = DenoiserSnapshot {
                config: run.denoiser.clone(),
                substrate: Substrate::Latent,
                latent_scale: encoded.scale,
                channel_mean: Vec::new(),
                channel_std: Vec::new(),
                schedule: run.schedule,
            };
            (encoded.items, snapshot)
        }
        Substrate::Sequence => {
            let seq = normalize_dataset_frames(ds)?;
            let snapshot = DenoiserSnapshot {
                config: run.denoiser.clone(),
                substrate: Substrate::Sequence,
                latent_scale: 1.0,
                channel_mean: seq.channel_mean.clone(),
                channel_std: seq.channel_std.clone(),
                schedule: run.schedule,
            };
            (seq.items, snapshot)
        }
    };
    let schedule = run.schedule.build()?;
    let mut den = Denoiser::new(run.denoiser.clone(), run.seed)?;
    let log = train_denoiser(&mut den, &items, &schedule, &run.diffusion_train)?;
    if let Some(path) = out {
        let rng = SeedStream::new(run.seed).state();
        save_denoiser(path, &den, &snapshot, run.diffusion_train.steps as u64, rng)?;
    }
    Ok((den, snapshot, log))
}

/// Builds the decode context a snapshot describes.
pub fn snapshot_context<'a>(
    snapshot: &DenoiserSnapshot,
    vae: Option<&'a MotionVae>,
) -> Result<SubstrateContext<'a>> {
    let ctx = match snapshot.substrate {
        Substrate::Latent => {
            let vae = vae.ok_or_else(|| {
                Error::invalid("latent-substrate sampling needs an autoencoder")
            })?;
            SubstrateContext::Latent { vae, latent_scale: snapshot.latent_scale }
        }
        Substrate::Sequence => SubstrateContext::Sequence {
            channel_mean: snapshot.channel_mean.clone(),
            channel_std: snapshot.channel_std.clone(),
            frame_rate: FRAME_RATE,
        },
    };
    ctx.validate()?;
    Ok(ctx)
}

/// Guided sampling of one motion for a single description.
pub fn sample_motion(
    den: &Denoiser,
    snapshot: &DenoiserSnapshot,
    vae: Option<&MotionVae>,
    desc: &ConceptDescription,
    sampler: &SamplerConfig,
    agd: AgdConfig,
    length: usize,
) -> Result<MotionSequence> {
    if sampler.substrate != snapshot.substrate {
        return Err(Error::Config("sampler substrate does not match the checkpoint".into()));
    }
    let ctx = snapshot_context(snapshot, vae)?;
    let schedule = snapshot.schedule.build()?;
    let shape = match snapshot.substrate {
        Substrate::Latent => (den.config.max_tokens, den.config.input_dim),
        Substrate::Sequence => (length, D_M),
    };
    let x = sample(den, &schedule, &den.embed_description(desc), shape, sampler, agd)?;
    decode_sample(&x, &ctx, length)
}

/// Collapses a seed hierarchy to the u64 used for one parallel sample.
pub fn per_sample_seed(base: u64, label: &str, idx: u64) -> u64 {
    SeedStream::new(base).derive(label).derive_idx(idx).next_u64()
}

/// Samples `per_concept` motions for each listed concept in parallel, each
/// from its own seed stream. Output order is (concept, repeat) row-major.
pub fn single_concept_batch(
    den: &Denoiser,
    snapshot: &DenoiserSnapshot,
    vae: Option<&MotionVae>,
    kinds: &[ConceptKind],
    per_concept: usize,
    sampler: &SamplerConfig,
    agd: AgdConfig,
    length: usize,
    seed: u64,
) -> Result<Vec<(MotionSequence, ConceptDescription)>> {
    if kinds.is_empty() || per_concept == 0 {
        return Err(Error::invalid("need at least one concept and one sample"));
    }
    let jobs: Vec<(usize, ConceptDescription)> = kinds
        .iter()
        .enumerate()
        .flat_map(|(ci, &kind)| {
            (0..per_concept).map(move |r| (ci * per_concept + r, ConceptDescription::single(kind)))
        })
        .collect();
    jobs.par_iter()
        .map(|(idx, desc)| {
            let cfg = SamplerConfig {
                seed: per_sample_seed(seed, "single-concept", *idx as u64),
                ..*sampler
            };
            Ok((sample_motion(den, snapshot, vae, desc, &cfg, agd, length)?, desc.clone()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymotion::{generate_dataset, GeneratorConfig};
    use crate::vae::VaeConfig;

    fn tiny_run() -> RunConfig {
        let mut run = RunConfig::desk(5);
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
        run.vae_train.steps = 3;
        run.vae_train.batch_size = 2;
        run.diffusion_train.steps = 3;
        run.diffusion_train.batch_size = 2;
        run.sampler.steps = 4;
        run
    }

    fn tiny_dataset() -> Dataset {
        generate_dataset(&GeneratorConfig { count: 6, seed: 2, ..Default::default() }).unwrap()
    }

    #[test]
    fn latent_encoding_normalizes_pooled_rms_to_one() {
        let run = tiny_run();
        let ds = tiny_dataset();
        let vae = MotionVae::new(run.vae.clone(), 3).unwrap();
        let enc = encode_dataset_to_latents(&vae, &ds).unwrap();
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for (z, _) in &enc.items {
            sum_sq += z.data().iter().map(|v| v * v).sum::<f64>();
            count += z.data().len();
        }
        let rms = (sum_sq / count as f64).sqrt();
        assert!((rms - 1.0).abs() <= 1e-12, "rms {rms}");
        assert_eq!(enc.items.len(), ds.records.len());
    }

    #[test]
    fn encoding_is_deterministic_and_scale_consistent() {
        let run = tiny_run();
        let ds = tiny_dataset();
        let vae = MotionVae::new(run.vae.clone(), 3).unwrap();
        let a = encode_dataset_to_latents(&vae, &ds).unwrap();
        let b = encode_dataset_to_latents(&vae, &ds).unwrap();
        assert_eq!(a.scale, b.scale);
        for ((za, _), (zb, _)) in a.items.iter().zip(&b.items) {
            assert_eq!(za.data(), zb.data());
        }
        let direct = encode_dataset_with_scale(&vae, &ds, a.scale).unwrap();
        for ((za, _), (zd, _)) in a.items.iter().zip(&direct) {
            assert_eq!(za.data(), zd.data());
        }
    }

    #[test]
    fn sequence_normalization_round_trips_through_the_stats() {
        let ds = tiny_dataset();
        let seq = normalize_dataset_frames(&ds).unwrap();
        let first = &ds.records[0];
        let norm = &seq.items[0].0;
        for i in 0..norm.rows() {
            for j in 0..D_M {
                let back = norm.get(i, j) * seq.channel_std[j] + seq.channel_mean[j];
                assert!((back - first.motion.frames().get(i, j)).abs() <= 1e-9);
            }
        }
        let mut pooled = 0.0;
        let mut count = 0usize;
        for (frames, _) in &seq.items {
            pooled += frames.data().iter().sum::<f64>();
            count += frames.data().len();
        }
        assert!(pooled.abs() / count as f64 <= 1e-9);
    }

    #[test]
    fn trained_pipelines_write_loadable_checkpoints() {
        let run = tiny_run();
        let ds = tiny_dataset();
        let dir = std::env::temp_dir().join("motive-pipeline-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let vae_path = dir.join("vae.ckpt");
        let den_path = dir.join("den.ckpt");

        let (vae, vae_log) = train_vae_pipeline(&ds, &run, Some(&vae_path)).unwrap();
        assert!(!vae_log.losses.is_empty());
        assert!(vae_log.final_loss.is_finite());
        let (loaded_vae, ckpt) = crate::io::load_vae(&vae_path).unwrap();
        assert_eq!(ckpt.step, run.vae_train.steps as u64);
        for id in ["enc_pos", "dec_pos"] {
            let a = vae.store.id(id).map(|p| vae.store.value(p).data().to_vec());
            let b = loaded_vae.store.id(id).map(|p| loaded_vae.store.value(p).data().to_vec());
            assert_eq!(a, b);
        }

        let (den, snapshot, den_log) =
            train_denoiser_pipeline(&ds, Some(&vae), &run, Some(&den_path)).unwrap();
        assert!(!den_log.losses.is_empty());
        assert!(den_log.final_loss.is_finite());
        assert!(snapshot.latent_scale > 0.0);
        let (loaded_den, loaded_snap, _) = crate::io::load_denoiser(&den_path).unwrap();
        assert_eq!(loaded_snap, snapshot);
        assert_eq!(loaded_den.config, den.config);
    }

    #[test]
    fn sampled_motions_are_seeded_and_well_formed() {
        let run = tiny_run();
        let ds = tiny_dataset();
        let vae = MotionVae::new(run.vae.clone(), 3).unwrap();
        let (den, snapshot, _) = train_denoiser_pipeline(&ds, Some(&vae), &run, None).unwrap();
        let desc = ConceptDescription::parse("direction:+x").unwrap();
        let m1 =
            sample_motion(&den, &snapshot, Some(&vae), &desc, &run.sampler, run.agd, 48).unwrap();
        let m2 =
            sample_motion(&den, &snapshot, Some(&vae), &desc, &run.sampler, run.agd, 48).unwrap();
        assert_eq!(m1.frames().data(), m2.frames().data());
        assert_eq!(m1.len(), 48);

        let kinds = [
            ConceptKind::Direction(crate::toymotion::DirectionMode::PlusX),
            ConceptKind::Bounce(crate::toymotion::BounceMode::Hop),
        ];
        let batch = single_concept_batch(
            &den,
            &snapshot,
            Some(&vae),
            &kinds,
            2,
            &run.sampler,
            run.agd,
            48,
            11,
        )
        .unwrap();
        assert_eq!(batch.len(), 4);
        assert_eq!(batch[0].1, ConceptDescription::single(kinds[0]));
        assert_eq!(batch[3].1, ConceptDescription::single(kinds[1]));
        assert_ne!(batch[0].0.frames().data(), batch[1].0.frames().data());
    }

    #[test]
    fn missing_autoencoder_is_reported() {
        let run = tiny_run();
        let ds = tiny_dataset();
        assert!(train_denoiser_pipeline(&ds, None, &run, None).is_err());
    }
}
