//! Score composition: combine several concept conditions into one guided
//! noise prediction, in latent space (weighted score deltas), in semantic
//! space (lockstep cross-attention merging), fused (weighted blend of both
//! plus a joint-text score), or along time (overlap stitching).

use crate::denoiser::{AgdConfig, ConceptEmbedding, Denoiser, MixTrace};
use crate::diffusion::{
    cfg_score, guided_combine, sample_with_score, timesteps, transition_coefs, NoiseSchedule,
    SamplerConfig, Substrate,
};
use crate::error::{Error, Result};
use crate::numerics::Tensor2;
use crate::rng::SeedStream;
use crate::toymotion::{ConceptDescription, MotionSequence, D_M};
use crate::vae::{LatentCode, MotionVae};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum Polarity {
    #[default]
    Conjoin,
    Negate,
}

fn unit_weight() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CompositionTerm {
    pub desc: ConceptDescription,
    #[serde(default = "unit_weight")]
    pub weight: f64,
    #[serde(default)]
    pub polarity: Polarity,
}

impl CompositionTerm {
    pub fn conjoin(desc: ConceptDescription, weight: f64) -> Self {
        Self { desc, weight, polarity: Polarity::Conjoin }
    }

    pub fn negate(desc: ConceptDescription, weight: f64) -> Self {
        Self { desc, weight, polarity: Polarity::Negate }
    }

    /// Signed weight entering the semantic merge: negation flips the sign.
    pub fn semantic_weight(&self) -> f64 {
        match self.polarity {
            Polarity::Conjoin => self.weight,
            Polarity::Negate => -self.weight,
        }
    }
}

/// Blend weights for the fused score; must be a convex combination.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Lambdas {
    pub latent: f64,
    pub semantic: f64,
    pub merged: f64,
}

impl Lambdas {
    pub fn validate(&self) -> Result<()> {
        for (name, l) in
            [("latent", self.latent), ("semantic", self.semantic), ("merged", self.merged)]
        {
            if !(l.is_finite() && l >= 0.0) {
                return Err(Error::Config(format!("lambda {name} must be finite and >= 0, got {l}")));
            }
        }
        let sum = self.latent + self.semantic + self.merged;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("lambdas must sum to 1, got {sum}")));
        }
        Ok(())
    }
}

impl Default for Lambdas {
    fn default() -> Self {
        Self { latent: 0.1, semantic: 0.7, merged: 0.2 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CompositionSpec {
    pub terms: Vec<CompositionTerm>,
    #[serde(default)]
    pub joint_desc: Option<ConceptDescription>,
    #[serde(default)]
    pub lambdas: Lambdas,
    #[serde(default)]
    pub agd: AgdConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
}

impl CompositionSpec {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize spec: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.terms.is_empty() {
            return Err(Error::invalid("composition needs at least one term"));
        }
        for t in &self.terms {
            if !t.weight.is_finite() {
                return Err(Error::invalid(format!("non-finite term weight {}", t.weight)));
            }
        }
        if !self.terms.iter().any(|t| t.polarity == Polarity::Conjoin) {
            return Err(Error::invalid("composition needs at least one conjoin term"));
        }
        self.lambdas.validate()?;
        if self.lambdas.merged > 0.0 && self.joint_desc.is_none() {
            return Err(Error::Config(
                "merged lambda is positive but no joint description was given".into(),
            ));
        }
        let semantic_sum: f64 = self.terms.iter().map(|t| t.semantic_weight()).sum();
        if self.lambdas.semantic > 0.0 && semantic_sum.abs() <= 1e-6 {
            return Err(Error::DegenerateWeights(format!(
                "semantic weights sum to {semantic_sum:.2e}; pure-negation mixes are ill-posed"
            )));
        }
        self.agd.validate()?;
        Ok(())
    }
}

/// Eq-style weighted conjunction: uncond + Σᵢ wᵢ(ε(cᵢ) − uncond), with the
/// unconditional score evaluated once.
pub fn latent_conjunction(
    den: &Denoiser,
    x: &Tensor2,
    t: f64,
    terms: &[CompositionTerm],
    agd: AgdConfig,
) -> Result<Tensor2> {
    if terms.is_empty() {
        return Err(Error::invalid("conjunction needs at least one term"));
    }
    if terms.iter().any(|t| t.polarity != Polarity::Conjoin) {
        return Err(Error::invalid("conjunction accepts only conjoin terms"));
    }
    let null = den.embed_description(&ConceptDescription::empty());
    let uncond = den.predict_eps(x, t, &null, AgdConfig::OFF)?;
    let scores: Vec<Tensor2> = terms
        .iter()
        .map(|term| den.predict_eps(x, t, &den.embed_description(&term.desc), agd))
        .collect::<Result<_>>()?;
    let weighted: Vec<(f64, &Tensor2)> =
        terms.iter().zip(&scores).map(|(term, s)| (term.weight, s)).collect();
    guided_combine(&uncond, &weighted)
}

/// Directional steering: uncond + w(ε(positive) − ε(negative)).
pub fn latent_negation(
    den: &Denoiser,
    x: &Tensor2,
    t: f64,
    positive: &ConceptDescription,
    negative: &ConceptDescription,
    w: f64,
    agd: AgdConfig,
) -> Result<Tensor2> {
    if !(w.is_finite() && w >= 0.0) {
        return Err(Error::invalid(format!("negation weight must be >= 0, got {w}")));
    }
    let null = den.embed_description(&ConceptDescription::empty());
    let mut out = den.predict_eps(x, t, &null, AgdConfig::OFF)?;
    let pos = den.predict_eps(x, t, &den.embed_description(positive), agd)?;
    let neg = den.predict_eps(x, t, &den.embed_description(negative), agd)?;
    out.axpy(w, &pos.sub(&neg)?)?;
    Ok(out)
}

/// Lockstep semantic merge: one denoiser branch per term, cross-attention
/// outputs averaged by signed weights at every layer. Returns the raw merged
/// score and the per-layer trace.
pub fn semantic_compose(
    den: &Denoiser,
    x: &Tensor2,
    t: f64,
    terms: &[CompositionTerm],
    agd: AgdConfig,
) -> Result<(Tensor2, MixTrace)> {
    if terms.is_empty() {
        return Err(Error::invalid("semantic merge needs at least one term"));
    }
    let embeds: Vec<ConceptEmbedding> =
        terms.iter().map(|term| den.embed_description(&term.desc)).collect();
    let branches: Vec<(f64, &ConceptEmbedding)> =
        terms.iter().zip(&embeds).map(|(term, e)| (term.semantic_weight(), e)).collect();
    den.predict_eps_mixed(x, t, &branches, agd)
}

/// Mixed-polarity latent branch: weighted conjunction over the conjoin terms,
/// plus per-negation deltas pointing from each negated concept toward the
/// strongest conjoin.
fn latent_branch(
    den: &Denoiser,
    x: &Tensor2,
    t: f64,
    terms: &[CompositionTerm],
    agd: AgdConfig,
    uncond: &Tensor2,
) -> Result<Tensor2> {
    let conjoins: Vec<&CompositionTerm> =
        terms.iter().filter(|t| t.polarity == Polarity::Conjoin).collect();
    let negates: Vec<&CompositionTerm> =
        terms.iter().filter(|t| t.polarity == Polarity::Negate).collect();
    let scores: Vec<Tensor2> = conjoins
        .iter()
        .map(|term| den.predict_eps(x, t, &den.embed_description(&term.desc), agd))
        .collect::<Result<_>>()?;
    let weighted: Vec<(f64, &Tensor2)> =
        conjoins.iter().zip(&scores).map(|(term, s)| (term.weight, s)).collect();
    let mut out = guided_combine(uncond, &weighted)?;
    if !negates.is_empty() {
        let strongest = conjoins
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.weight.partial_cmp(&b.1.weight).expect("finite weights"))
            .map(|(i, _)| i)
            .expect("validated: at least one conjoin");
        let reference = &scores[strongest];
        for term in negates {
            let neg = den.predict_eps(x, t, &den.embed_description(&term.desc), agd)?;
            out.axpy(term.weight, &reference.sub(&neg)?)?;
        }
    }
    Ok(out)
}

/// Per-branch scores behind one fused evaluation; `None` marks a branch whose
/// lambda is zero and which was therefore never computed.
#[derive(Clone, Debug)]
pub struct SefBreakdown {
    pub latent: Option<Tensor2>,
    pub semantic: Option<Tensor2>,
    pub merged: Option<Tensor2>,
    pub combined: Tensor2,
}

/// Fused score λ_l·latent + λ_s·semantic + λ_m·joint. The semantic and joint
/// branches are guided with the sampler's guidance weight; at weight 1 they
/// reduce to the raw conditional scores.
pub fn synergistic_fusion(
    den: &Denoiser,
    x: &Tensor2,
    t: f64,
    spec: &CompositionSpec,
) -> Result<SefBreakdown> {
    spec.validate()?;
    let l = &spec.lambdas;
    let w_g = spec.sampler.guidance_weight;
    let null = den.embed_description(&ConceptDescription::empty());
    let uncond = den.predict_eps(x, t, &null, AgdConfig::OFF)?;
    let mut combined = Tensor2::zeros(x.rows(), x.cols());

    let latent = if l.latent > 0.0 {
        let b = latent_branch(den, x, t, &spec.terms, spec.agd, &uncond)?;
        combined.axpy(l.latent, &b)?;
        Some(b)
    } else {
        None
    };
    let semantic = if l.semantic > 0.0 {
        let (raw, _) = semantic_compose(den, x, t, &spec.terms, spec.agd)?;
        let b = cfg_score(&uncond, &raw, w_g)?;
        combined.axpy(l.semantic, &b)?;
        Some(b)
    } else {
        None
    };
    let merged = if l.merged > 0.0 {
        let joint = spec.joint_desc.as_ref().expect("validated: joint desc present");
        let raw = den.predict_eps(x, t, &den.embed_description(joint), spec.agd)?;
        let b = cfg_score(&uncond, &raw, w_g)?;
        combined.axpy(l.merged, &b)?;
        Some(b)
    } else {
        None
    };
    Ok(SefBreakdown { latent, semantic, merged, combined })
}

/// Stitches two segment scores across an overlap of `n_overlap` rows: the
/// overlap gets tail₁ + head₂ − overlap_scores, everything else is copied.
pub fn temporal_compose(
    scores_1: &Tensor2,
    scores_2: &Tensor2,
    overlap_scores: &Tensor2,
    n_overlap: usize,
) -> Result<Tensor2> {
    let (l1, l2) = (scores_1.rows(), scores_2.rows());
    let d = scores_1.cols();
    if scores_2.cols() != d || overlap_scores.cols() != d {
        return Err(Error::shape("segment scores must share a width".to_string()));
    }
    if n_overlap > l1.min(l2) {
        return Err(Error::invalid(format!(
            "overlap {n_overlap} exceeds shorter segment of {} frames",
            l1.min(l2)
        )));
    }
    if overlap_scores.rows() != n_overlap {
        return Err(Error::shape(format!(
            "overlap scores have {} rows, expected {n_overlap}",
            overlap_scores.rows()
        )));
    }
    let total = l1 + l2 - n_overlap;
    let mut out = Tensor2::zeros(total, d);
    for i in 0..l1 - n_overlap {
        for j in 0..d {
            out.set(i, j, scores_1.get(i, j));
        }
    }
    for i in 0..n_overlap {
        let row = l1 - n_overlap + i;
        for j in 0..d {
            // Grouped so an overlap equal to the tail of segment 1 cancels exactly.
            let fused = scores_2.get(i, j) + (scores_1.get(row, j) - overlap_scores.get(i, j));
            out.set(row, j, fused);
        }
    }
    for i in n_overlap..l2 {
        let row = l1 - n_overlap + i;
        for j in 0..d {
            out.set(row, j, scores_2.get(i, j));
        }
    }
    Ok(out)
}

/// Seeds of the two per-segment noise streams used by `sample_stitched`.
/// Exposed so a stitched run can be compared against its standalone segments.
pub fn stitch_segment_seeds(seed: u64) -> (u64, u64) {
    let base = SeedStream::new(seed).derive("stitch");
    let mut s1 = base.derive_idx(0);
    let mut s2 = base.derive_idx(1);
    (s1.next_u64(), s2.next_u64())
}

fn copy_rows(x: &Tensor2, a: usize, b: usize) -> Tensor2 {
    Tensor2::from_fn(b - a, x.cols(), |i, j| x.get(a + i, j))
}

/// Two-segment stitched sampling on the sequence substrate. Each reverse step
/// fuses the guided per-segment scores with `temporal_compose`, using the
/// unconditional score on the overlap window as the correction term. Every
/// segment draws noise from its own stream, so with no overlap the output is
/// exactly the two segments sampled standalone under `stitch_segment_seeds`.
pub fn sample_stitched(
    den: &Denoiser,
    schedule: &NoiseSchedule,
    c1: &ConceptDescription,
    l1: usize,
    c2: &ConceptDescription,
    l2: usize,
    n_overlap: usize,
    cfg: &SamplerConfig,
    agd: AgdConfig,
) -> Result<Tensor2> {
    cfg.validate(schedule)?;
    agd.validate()?;
    if cfg.substrate != Substrate::Sequence {
        return Err(Error::invalid("stitched sampling runs on the sequence substrate"));
    }
    if l1 == 0 || l2 == 0 {
        return Err(Error::invalid("stitched segments must be non-empty"));
    }
    if n_overlap > l1.min(l2) {
        return Err(Error::invalid(format!(
            "overlap {n_overlap} exceeds shorter segment of {} frames",
            l1.min(l2)
        )));
    }
    let d = den.config.input_dim;
    let total = l1 + l2 - n_overlap;
    let (seed_1, seed_2) = stitch_segment_seeds(cfg.seed);
    let mut rng_1 = SeedStream::new(seed_1).derive("sampler");
    let mut rng_2 = SeedStream::new(seed_2).derive("sampler");
    let init_1 = Tensor2::from_fn(l1, d, |_, _| rng_1.normal());
    let init_2 = Tensor2::from_fn(l2, d, |_, _| rng_2.normal());
    // Overlap rows start from segment 1's noise; the rest of segment 2 keeps
    // its own stream positions so n_overlap = 0 discards nothing.
    let mut x = Tensor2::zeros(total, d);
    for i in 0..l1 {
        for j in 0..d {
            x.set(i, j, init_1.get(i, j));
        }
    }
    for i in n_overlap..l2 {
        for j in 0..d {
            x.set(l1 - n_overlap + i, j, init_2.get(i, j));
        }
    }

    let null = den.embed_description(&ConceptDescription::empty());
    let e1 = den.embed_description(c1);
    let e2 = den.embed_description(c2);
    let w = cfg.guidance_weight;
    let ts = timesteps(schedule.len(), cfg.steps);
    for (k, &t) in ts.iter().enumerate() {
        let w1 = copy_rows(&x, 0, l1);
        let w2 = copy_rows(&x, l1 - n_overlap, total);
        let u1 = den.predict_eps(&w1, t as f64, &null, AgdConfig::OFF)?;
        let s1 = cfg_score(&u1, &den.predict_eps(&w1, t as f64, &e1, agd)?, w)?;
        let u2 = den.predict_eps(&w2, t as f64, &null, AgdConfig::OFF)?;
        let s2 = cfg_score(&u2, &den.predict_eps(&w2, t as f64, &e2, agd)?, w)?;
        let eps_hat = if n_overlap == 0 {
            Tensor2::vstack(&s1, &s2)?
        } else {
            let ov = copy_rows(&x, l1 - n_overlap, l1);
            let s_ov = den.predict_eps(&ov, t as f64, &null, AgdConfig::OFF)?;
            temporal_compose(&s1, &s2, &s_ov, n_overlap)?
        };
        let ab = schedule.alpha_bar(t);
        let ab_prev = match ts.get(k + 1) {
            Some(&prev_t) => schedule.alpha_bar(prev_t),
            None => 1.0,
        };
        let (x0_coef, dir_coef, sigma) = transition_coefs(ab, ab_prev, cfg.sampler);
        let sab = ab.sqrt();
        let s1m = (1.0 - ab).sqrt();
        let (n1, n2) = if sigma > 0.0 {
            (
                Tensor2::from_fn(l1, d, |_, _| rng_1.normal()),
                Tensor2::from_fn(l2, d, |_, _| rng_2.normal()),
            )
        } else {
            (Tensor2::zeros(l1, d), Tensor2::zeros(l2, d))
        };
        x = Tensor2::from_fn(total, d, |i, j| {
            let xt = x.get(i, j);
            let e = eps_hat.get(i, j);
            let x0_hat = (xt - s1m * e) / sab;
            let noise = if i < l1 { n1.get(i, j) } else { n2.get(i - (l1 - n_overlap), j) };
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

/// Everything needed to turn a sampled tensor back into a motion.
pub enum SubstrateContext<'a> {
    Latent { vae: &'a MotionVae, latent_scale: f64 },
    Sequence { channel_mean: Vec<f64>, channel_std: Vec<f64>, frame_rate: f64 },
}

impl SubstrateContext<'_> {
    fn substrate(&self) -> Substrate {
        match self {
            SubstrateContext::Latent { .. } => Substrate::Latent,
            SubstrateContext::Sequence { .. } => Substrate::Sequence,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SubstrateContext::Latent { latent_scale, .. } => {
                if !(latent_scale.is_finite() && *latent_scale > 0.0) {
                    return Err(Error::Config(format!("bad latent scale {latent_scale}")));
                }
            }
            SubstrateContext::Sequence { channel_mean, channel_std, frame_rate } => {
                if channel_mean.len() != D_M || channel_std.len() != D_M {
                    return Err(Error::Config("channel stats must cover every channel".into()));
                }
                if channel_std.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
                    return Err(Error::Config("channel stds must be positive".into()));
                }
                if !(frame_rate.is_finite() && *frame_rate > 0.0) {
                    return Err(Error::Config(format!("bad frame rate {frame_rate}")));
                }
            }
        }
        Ok(())
    }
}

/// Per-step record of branch magnitudes, for run diagnostics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub t: usize,
    pub latent_norm: Option<f64>,
    pub semantic_norm: Option<f64>,
    pub merged_norm: Option<f64>,
    pub combined_norm: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComposeDiagnostics {
    pub lambdas: Lambdas,
    pub steps: Vec<StepDiagnostics>,
}

/// Fused-score sampling followed by decoding back to a motion. The sampled
/// object is a latent code (decoded by the VAE) or a normalized frame matrix
/// (denormalized directly), depending on the substrate.
pub fn compose_pipeline(
    den: &Denoiser,
    schedule: &NoiseSchedule,
    spec: &CompositionSpec,
    ctx: &SubstrateContext,
    length: usize,
) -> Result<(MotionSequence, ComposeDiagnostics)> {
    spec.validate()?;
    ctx.validate()?;
    spec.sampler.validate(schedule)?;
    if spec.sampler.substrate != ctx.substrate() {
        return Err(Error::Config(
            "sampler substrate does not match the decode context".into(),
        ));
    }
    let shape = match ctx {
        SubstrateContext::Latent { .. } => (den.config.max_tokens, den.config.input_dim),
        SubstrateContext::Sequence { .. } => (length, D_M),
    };
    let mut diag = ComposeDiagnostics { lambdas: spec.lambdas, steps: Vec::new() };
    let sampled = sample_with_score(schedule, shape, &spec.sampler, |x, t| {
        let b = synergistic_fusion(den, x, t, spec)?;
        diag.steps.push(StepDiagnostics {
            t: t as usize,
            latent_norm: b.latent.as_ref().map(Tensor2::frob_norm),
            semantic_norm: b.semantic.as_ref().map(Tensor2::frob_norm),
            merged_norm: b.merged.as_ref().map(Tensor2::frob_norm),
            combined_norm: b.combined.frob_norm(),
        });
        Ok(b.combined)
    })?;
    let motion = decode_sample(&sampled, ctx, length)?;
    Ok((motion, diag))
}

/// Maps a sampled tensor back to motion frames for the given substrate.
pub fn decode_sample(
    sampled: &Tensor2,
    ctx: &SubstrateContext,
    length: usize,
) -> Result<MotionSequence> {
    match ctx {
        SubstrateContext::Latent { vae, latent_scale } => {
            let z = LatentCode { z: sampled.scale(1.0 / latent_scale) };
            vae.decode(&z, length)
        }
        SubstrateContext::Sequence { channel_mean, channel_std, frame_rate } => {
            let frames = Tensor2::from_fn(sampled.rows(), D_M, |i, j| {
                sampled.get(i, j) * channel_std[j] + channel_mean[j]
            });
            MotionSequence::new(frames, *frame_rate)
        }
    }
}
