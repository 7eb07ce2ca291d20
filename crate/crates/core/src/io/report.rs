//! The seeded evaluation protocol and its report document.

use serde::{Deserialize, Serialize};

use crate::denoiser::{AgdConfig, Denoiser};
use crate::diffusion::SamplerConfig;
use crate::error::{Error, Result};
use crate::evalsuite::{
    concept_recall, diversity, frechet_distance, jerk_metric, motion_features, multimodality,
    transition_distance, RecallReport, FEATURE_VERSION,
};
use crate::io::checkpoint::DenoiserSnapshot;
use crate::io::pipeline::single_concept_batch;
use crate::toymotion::{ConceptKind, Dataset, MotionSequence};
use crate::vae::MotionVae;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub samples_per_concept: usize,
    pub diversity_pairs: usize,
    pub multimodality_subset: usize,
    pub length: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples_per_concept: 20,
            diversity_pairs: 100,
            multimodality_subset: 8,
            length: 96,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_concept < 2 {
            return Err(Error::invalid("need at least two samples per concept"));
        }
        if self.diversity_pairs == 0 {
            return Err(Error::invalid("need at least one diversity pair"));
        }
        if self.multimodality_subset == 0 {
            return Err(Error::invalid("need a positive multimodality subset"));
        }
        Ok(())
    }
}

/// All protocol metrics over one seeded batch of generated motions.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub feature_version: u32,
    pub seed: u64,
    pub samples: usize,
    pub recall: RecallReport,
    pub frechet: f64,
    pub diversity: f64,
    pub multimodality: f64,
    pub mean_transition: f64,
    pub mean_jerk: f64,
}

/// Runs the protocol: sample every concept kind, score recall against the
/// synthetic classifier, and compare feature statistics to the reference
/// dataset.
pub fn evaluate_model(
    den: &Denoiser,
    snapshot: &DenoiserSnapshot,
    vae: Option<&MotionVae>,
    reference: &Dataset,
    sampler: &SamplerConfig,
    agd: AgdConfig,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    if reference.records.is_empty() {
        return Err(Error::invalid("reference dataset is empty"));
    }
    let kinds = ConceptKind::all();
    let samples = single_concept_batch(
        den,
        snapshot,
        vae,
        &kinds,
        cfg.samples_per_concept,
        sampler,
        agd,
        cfg.length,
        cfg.seed,
    )?;
    let recall = concept_recall(&samples)?;

    let motions: Vec<&MotionSequence> = samples.iter().map(|(m, _)| m).collect();
    let gen_feats: Vec<_> = motions.iter().map(|m| motion_features(m)).collect();
    let ref_feats: Vec<_> =
        reference.records.iter().map(|r| motion_features(&r.motion)).collect::<Vec<_>>();
    let frechet = frechet_distance(&gen_feats, &ref_feats)?;

    let owned: Vec<MotionSequence> = motions.iter().map(|m| (*m).clone()).collect();
    let pairs = cfg.diversity_pairs.min(owned.len() * (owned.len() - 1) / 2);
    let diversity = diversity(&owned, pairs, cfg.seed)?;

    let groups: Vec<Vec<MotionSequence>> = (0..kinds.len())
        .map(|ci| {
            owned[ci * cfg.samples_per_concept..(ci + 1) * cfg.samples_per_concept].to_vec()
        })
        .collect();
    let multimodality = multimodality(&groups, cfg.multimodality_subset, cfg.seed)?;

    let mut transition = 0.0;
    let mut jerk = 0.0;
    for m in &owned {
        transition += transition_distance(m)?;
        jerk += jerk_metric(m)?;
    }
    transition /= owned.len() as f64;
    jerk /= owned.len() as f64;

    Ok(EvalReport {
        feature_version: FEATURE_VERSION,
        seed: cfg.seed,
        samples: samples.len(),
        recall,
        frechet,
        diversity,
        multimodality,
        mean_transition: transition,
        mean_jerk: jerk,
    })
}
