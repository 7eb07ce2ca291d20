//! Transformer VAE between motion sequences and N×d latent codes.
//!
//! The encoder prepends 2N learned distribution tokens to the projected frame
//! tokens; after the block stack, the first N carry the posterior mean and the
//! next N its log-variance. The decoder cross-attends learned position queries
//! to the latent rows. Variable-length batches are padded to the batch max and
//! masked, so padding can never touch the loss or the valid outputs.

mod train;

pub use train::{train_vae, TrainLog, VaeTrainConfig};

use crate::error::{Error, Result};
use crate::numerics::{
    FeedForward, FeedForwardCache, Grads, LayerNorm, LayerNormCache, Linear, LinearCache,
    ParamStore, PlainCrossAttention, PlainCrossAttentionCache, SelfAttention, SelfAttentionCache,
    Tensor2,
};
use crate::rng::SeedStream;
use crate::toymotion::{MotionSequence, D_M, MAX_LEN, MIN_LEN};
use serde::{Deserialize, Serialize};

pub const LOGVAR_MIN: f64 = -20.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub n_latent: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub kl_weight: f64,
}

impl Default for VaeConfig {
    /// Desk-scale profile: trains on CPU in minutes.
    fn default() -> Self {
        Self { n_latent: 5, d_model: 64, n_layers: 4, n_heads: 4, ffn_hidden: 256, kl_weight: 1e-4 }
    }
}

impl VaeConfig {
    /// Full-scale profile matching the reference hyperparameters.
    pub fn paper_profile() -> Self {
        Self {
            n_latent: 5,
            d_model: 256,
            n_layers: 9,
            n_heads: 4,
            ffn_hidden: 1024,
            kl_weight: 1e-4,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_latent == 0 || self.d_model == 0 || self.n_layers == 0 {
            return Err(Error::Config("latent count, width, and depth must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(Error::Config(format!("bad kl weight {}", self.kl_weight)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GaussianPosterior {
    pub mean: Tensor2,
    pub log_variance: Tensor2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub z: Tensor2,
}

/// z = mean + exp(½ log_variance) ⊙ ε with ε ~ N(0, I).
pub fn reparameterize(p: &GaussianPosterior, rng: &mut SeedStream) -> LatentCode {
    let mut z = p.mean.clone();
    for (zv, &lv) in z.data_mut().iter_mut().zip(p.log_variance.data()) {
        *zv += (0.5 * lv).exp() * rng.normal();
    }
    LatentCode { z }
}

/// KL(N(μ, σ²) ‖ N(0, I)) summed over entries: ½Σ(μ² + σ² − log σ² − 1).
pub fn kl_divergence(p: &GaussianPosterior) -> f64 {
    let mut kl = 0.0;
    for (&m, &lv) in p.mean.data().iter().zip(p.log_variance.data()) {
        kl += 0.5 * (m * m + lv.exp() - lv - 1.0);
    }
    kl
}

fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

fn smooth_l1_prime(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// Mean smooth-L1 over the first `valid` rows; padding rows contribute zero.
/// Returns the loss and its gradient wrt `recon` (zero on padding rows).
pub fn masked_smooth_l1(recon: &Tensor2, target: &Tensor2, valid: usize) -> Result<(f64, Tensor2)> {
    if recon.shape() != target.shape() {
        return Err(Error::shape(format!(
            "recon {:?} vs target {:?}",
            recon.shape(),
            target.shape()
        )));
    }
    if valid == 0 || valid > recon.rows() {
        return Err(Error::invalid(format!("valid {valid} outside 1..={}", recon.rows())));
    }
    let count = (valid * recon.cols()) as f64;
    let mut loss = 0.0;
    let mut grad = Tensor2::zeros(recon.rows(), recon.cols());
    for i in 0..valid {
        for j in 0..recon.cols() {
            let e = recon.get(i, j) - target.get(i, j);
            loss += smooth_l1(e);
            grad.set(i, j, smooth_l1_prime(e) / count);
        }
    }
    Ok((loss / count, grad))
}

/// Total objective: masked reconstruction + kl_weight · KL.
pub fn vae_loss(
    target: &Tensor2,
    recon: &Tensor2,
    p: &GaussianPosterior,
    valid: usize,
    kl_weight: f64,
) -> Result<f64> {
    let (recon_loss, _) = masked_smooth_l1(recon, target, valid)?;
    Ok(recon_loss + kl_weight * kl_divergence(p))
}

#[derive(Clone)]
struct EncoderBlock {
    ln1: LayerNorm,
    attn: SelfAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

struct EncoderBlockCache {
    ln1: LayerNormCache,
    attn: SelfAttentionCache,
    ln2: LayerNormCache,
    ffn: FeedForwardCache,
}

impl EncoderBlock {
    fn new(store: &mut ParamStore, prefix: &str, cfg: &VaeConfig, rng: &mut SeedStream) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{prefix}.ln1"), cfg.d_model)?,
            attn: SelfAttention::new(store, &format!("{prefix}.attn"), cfg.d_model, cfg.n_heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{prefix}.ln2"), cfg.d_model)?,
            ffn: FeedForward::new(store, &format!("{prefix}.ffn"), cfg.d_model, cfg.ffn_hidden, rng)?,
        })
    }

    fn forward(
        &self,
        store: &ParamStore,
        h: &mut Tensor2,
        valid: usize,
    ) -> Result<EncoderBlockCache> {
        let (a_in, ln1) = self.ln1.forward(store, h);
        let (a_out, attn) = self.attn.forward(store, &a_in, valid)?;
        h.add_assign(&a_out)?;
        let (f_in, ln2) = self.ln2.forward(store, h);
        let (f_out, ffn) = self.ffn.forward(store, &f_in)?;
        h.add_assign(&f_out)?;
        Ok(EncoderBlockCache { ln1, attn, ln2, ffn })
    }

    fn backward(
        &self,
        store: &ParamStore,
        cache: &EncoderBlockCache,
        dh: &mut Tensor2,
        grads: &mut Grads,
    ) {
        let df = self.ffn.backward(store, &cache.ffn, dh, grads);
        dh.add_assign(&self.ln2.backward(store, &cache.ln2, &df, grads)).expect("enc dh");
        let da = self.attn.backward(store, &cache.attn, dh, grads);
        dh.add_assign(&self.ln1.backward(store, &cache.ln1, &da, grads)).expect("enc dh");
    }
}

#[derive(Clone)]
struct DecoderBlock {
    ln1: LayerNorm,
    attn: SelfAttention,
    ln2: LayerNorm,
    cross: PlainCrossAttention,
    ln3: LayerNorm,
    ffn: FeedForward,
}

struct DecoderBlockCache {
    ln1: LayerNormCache,
    attn: SelfAttentionCache,
    ln2: LayerNormCache,
    cross: PlainCrossAttentionCache,
    ln3: LayerNormCache,
    ffn: FeedForwardCache,
}

impl DecoderBlock {
    fn new(store: &mut ParamStore, prefix: &str, cfg: &VaeConfig, rng: &mut SeedStream) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{prefix}.ln1"), cfg.d_model)?,
            attn: SelfAttention::new(store, &format!("{prefix}.attn"), cfg.d_model, cfg.n_heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{prefix}.ln2"), cfg.d_model)?,
            cross: PlainCrossAttention::new(
                store,
                &format!("{prefix}.cross"),
                cfg.d_model,
                cfg.n_heads,
                rng,
            )?,
            ln3: LayerNorm::new(store, &format!("{prefix}.ln3"), cfg.d_model)?,
            ffn: FeedForward::new(store, &format!("{prefix}.ffn"), cfg.d_model, cfg.ffn_hidden, rng)?,
        })
    }

    fn forward(
        &self,
        store: &ParamStore,
        h: &mut Tensor2,
        z: &Tensor2,
        valid: usize,
    ) -> Result<DecoderBlockCache> {
        let (a_in, ln1) = self.ln1.forward(store, h);
        let (a_out, attn) = self.attn.forward(store, &a_in, valid)?;
        h.add_assign(&a_out)?;
        let (c_in, ln2) = self.ln2.forward(store, h);
        let (c_out, cross) = self.cross.forward(store, &c_in, z)?;
        h.add_assign(&c_out)?;
        let (f_in, ln3) = self.ln3.forward(store, h);
        let (f_out, ffn) = self.ffn.forward(store, &f_in)?;
        h.add_assign(&f_out)?;
        Ok(DecoderBlockCache { ln1, attn, ln2, cross, ln3, ffn })
    }

    /// Returns the gradient contribution to z.
    fn backward(
        &self,
        store: &ParamStore,
        cache: &DecoderBlockCache,
        dh: &mut Tensor2,
        grads: &mut Grads,
    ) -> Tensor2 {
        let df = self.ffn.backward(store, &cache.ffn, dh, grads);
        dh.add_assign(&self.ln3.backward(store, &cache.ln3, &df, grads)).expect("dec dh");
        let (dc, dz) = self.cross.backward(store, &cache.cross, dh, grads);
        dh.add_assign(&self.ln2.backward(store, &cache.ln2, &dc, grads)).expect("dec dh");
        let da = self.attn.backward(store, &cache.attn, dh, grads);
        dh.add_assign(&self.ln1.backward(store, &cache.ln1, &da, grads)).expect("dec dh");
        dz
    }
}

pub struct EncodeCache {
    input: LinearCache,
    blocks: Vec<EncoderBlockCache>,
    ln_f: LayerNormCache,
    mean: LinearCache,
    logvar: LinearCache,
    logvar_pre: Tensor2,
    padded_len: usize,
}

pub struct DecodeCache {
    blocks: Vec<DecoderBlockCache>,
    ln_f: LayerNormCache,
    out: LinearCache,
    length: usize,
}

#[derive(Clone)]
pub struct MotionVae {
    pub config: VaeConfig,
    pub store: ParamStore,
    input_proj: Linear,
    enc_pos: crate::numerics::ParamId,
    dist_tokens: crate::numerics::ParamId,
    enc_blocks: Vec<EncoderBlock>,
    enc_ln_f: LayerNorm,
    mean_head: Linear,
    logvar_head: Linear,
    dec_pos: crate::numerics::ParamId,
    dec_blocks: Vec<DecoderBlock>,
    dec_ln_f: LayerNorm,
    out_proj: Linear,
}

impl MotionVae {
    pub fn new(config: VaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = SeedStream::new(seed).derive("vae-init");
        let d = config.d_model;
        let n = config.n_latent;
        let input_proj = Linear::new(&mut store, "enc.input", D_M, d, &mut rng)?;
        let enc_pos = store.register("enc.pos", Tensor2::randn(MAX_LEN, d, 0.02, &mut rng))?;
        let dist_tokens = store.register("enc.dist", Tensor2::randn(2 * n, d, 0.02, &mut rng))?;
        let mut enc_blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            enc_blocks.push(EncoderBlock::new(&mut store, &format!("enc.b{i}"), &config, &mut rng)?);
        }
        let enc_ln_f = LayerNorm::new(&mut store, "enc.lnf", d)?;
        let mean_head = Linear::new(&mut store, "enc.mean", d, d, &mut rng)?;
        let logvar_head = Linear::new(&mut store, "enc.logvar", d, d, &mut rng)?;
        let dec_pos = store.register("dec.pos", Tensor2::randn(MAX_LEN, d, 0.02, &mut rng))?;
        let mut dec_blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            dec_blocks.push(DecoderBlock::new(&mut store, &format!("dec.b{i}"), &config, &mut rng)?);
        }
        let dec_ln_f = LayerNorm::new(&mut store, "dec.lnf", d)?;
        let out_proj = Linear::new(&mut store, "dec.out", d, D_M, &mut rng)?;
        Ok(Self {
            config,
            store,
            input_proj,
            enc_pos,
            dist_tokens,
            enc_blocks,
            enc_ln_f,
            mean_head,
            logvar_head,
            dec_pos,
            dec_blocks,
            dec_ln_f,
            out_proj,
        })
    }

    fn check_lengths(&self, padded: usize, valid: usize) -> Result<()> {
        if !(MIN_LEN..=MAX_LEN).contains(&valid) {
            return Err(Error::invalid(format!("length {valid} outside [{MIN_LEN}, {MAX_LEN}]")));
        }
        if padded < valid || padded > MAX_LEN {
            return Err(Error::invalid(format!("padded length {padded} vs valid {valid}")));
        }
        Ok(())
    }

    /// Encodes padded frames; rows at and beyond `valid` are masked out of all
    /// attention, so their contents cannot influence the posterior.
    pub fn encode_frames(&self, frames: &Tensor2, valid: usize) -> Result<(GaussianPosterior, EncodeCache)> {
        self.check_lengths(frames.rows(), valid)?;
        if frames.cols() != D_M {
            return Err(Error::shape(format!("expected {D_M} channels, got {}", frames.cols())));
        }
        let n = self.config.n_latent;
        let lp = frames.rows();
        let (mut proj, input) = self.input_proj.forward(&self.store, frames)?;
        let pos = self.store.value(self.enc_pos);
        for i in 0..lp {
            let row = pos.row(i).to_vec();
            let dst = proj.row_mut(i);
            for (d, p) in dst.iter_mut().zip(&row) {
                *d += p;
            }
        }
        let mut h = Tensor2::vstack(self.store.value(self.dist_tokens), &proj)?;
        let valid_tokens = 2 * n + valid;
        let mut blocks = Vec::with_capacity(self.enc_blocks.len());
        for b in &self.enc_blocks {
            blocks.push(b.forward(&self.store, &mut h, valid_tokens)?);
        }
        let (hf, ln_f) = self.enc_ln_f.forward(&self.store, &h);
        let (mean, mean_c) = self.mean_head.forward(&self.store, &hf.slice_rows(0, n))?;
        let (logvar_pre, logvar_c) = self.logvar_head.forward(&self.store, &hf.slice_rows(n, 2 * n))?;
        let log_variance = logvar_pre.map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX));
        Ok((
            GaussianPosterior { mean, log_variance },
            EncodeCache {
                input,
                blocks,
                ln_f,
                mean: mean_c,
                logvar: logvar_c,
                logvar_pre,
                padded_len: lp,
            },
        ))
    }

    pub fn encode(&self, m: &MotionSequence) -> Result<GaussianPosterior> {
        Ok(self.encode_frames(m.frames(), m.len())?.0)
    }

    /// Accumulates parameter gradients for the encode pass. `d_mean` and
    /// `d_logvar` are gradients wrt the posterior outputs.
    pub fn encode_backward(
        &self,
        cache: &EncodeCache,
        d_mean: &Tensor2,
        d_logvar: &Tensor2,
        grads: &mut Grads,
    ) {
        let n = self.config.n_latent;
        let d = self.config.d_model;
        // Clamp is flat outside its interval; gradients stop there.
        let d_logvar_pre = d_logvar
            .zip_map(&cache.logvar_pre, |g, pre| {
                if (LOGVAR_MIN..=LOGVAR_MAX).contains(&pre) {
                    g
                } else {
                    0.0
                }
            })
            .expect("logvar shapes");
        let d_mean_in = self.mean_head.backward(&self.store, &cache.mean, d_mean, grads);
        let d_logvar_in = self.logvar_head.backward(&self.store, &cache.logvar, &d_logvar_pre, grads);
        let mut dh = Tensor2::zeros(2 * n + cache.padded_len, d);
        for i in 0..n {
            for j in 0..d {
                dh.set(i, j, d_mean_in.get(i, j));
                dh.set(n + i, j, d_logvar_in.get(i, j));
            }
        }
        let mut dh = self.enc_ln_f.backward(&self.store, &cache.ln_f, &dh, grads);
        for (b, c) in self.enc_blocks.iter().zip(cache.blocks.iter()).rev() {
            b.backward(&self.store, c, &mut dh, grads);
        }
        for i in 0..2 * n {
            grads.add_row(self.dist_tokens, i, dh.row(i));
        }
        let d_proj = dh.slice_rows(2 * n, 2 * n + cache.padded_len);
        for i in 0..cache.padded_len {
            grads.add_row(self.enc_pos, i, d_proj.row(i));
        }
        let _ = self.input_proj.backward(&self.store, &cache.input, &d_proj, grads);
    }

    /// Decodes `length` query positions against z; only the first `valid`
    /// rows are meaningful, the rest exist for batch padding.
    pub fn decode_frames(
        &self,
        z: &Tensor2,
        length: usize,
        valid: usize,
    ) -> Result<(Tensor2, DecodeCache)> {
        self.check_lengths(length, valid)?;
        let (n, d) = (self.config.n_latent, self.config.d_model);
        if z.shape() != (n, d) {
            return Err(Error::shape(format!("latent shape {:?}, expected ({n}, {d})", z.shape())));
        }
        let mut h = self.store.value(self.dec_pos).slice_rows(0, length);
        let mut blocks = Vec::with_capacity(self.dec_blocks.len());
        for b in &self.dec_blocks {
            blocks.push(b.forward(&self.store, &mut h, z, valid)?);
        }
        let (hf, ln_f) = self.dec_ln_f.forward(&self.store, &h);
        let (recon, out) = self.out_proj.forward(&self.store, &hf)?;
        Ok((recon, DecodeCache { blocks, ln_f, out, length }))
    }

    /// Returns (d_z, parameter gradients accumulated).
    pub fn decode_backward(&self, cache: &DecodeCache, d_recon: &Tensor2, grads: &mut Grads) -> Tensor2 {
        let dhf = self.out_proj.backward(&self.store, &cache.out, d_recon, grads);
        let mut dh = self.dec_ln_f.backward(&self.store, &cache.ln_f, &dhf, grads);
        let mut dz = Tensor2::zeros(self.config.n_latent, self.config.d_model);
        for (b, c) in self.dec_blocks.iter().zip(cache.blocks.iter()).rev() {
            let dz_b = b.backward(&self.store, c, &mut dh, grads);
            dz.add_assign(&dz_b).expect("dz shape");
        }
        for i in 0..cache.length {
            grads.add_row(self.dec_pos, i, dh.row(i));
        }
        dz
    }

    pub fn decode(&self, z: &LatentCode, length: usize) -> Result<MotionSequence> {
        let (frames, _) = self.decode_frames(&z.z, length, length)?;
        MotionSequence::new(frames, crate::toymotion::FRAME_RATE)
    }

    /// Full training objective for one padded item with an explicit noise
    /// draw. Returns the loss; gradients accumulate into `grads`.
    pub fn item_loss_and_grads(
        &self,
        frames: &Tensor2,
        valid: usize,
        eps: &Tensor2,
        grads: &mut Grads,
    ) -> Result<f64> {
        let (post, enc_cache) = self.encode_frames(frames, valid)?;
        if eps.shape() != post.mean.shape() {
            return Err(Error::shape("noise draw must match posterior shape"));
        }
        let mut z = post.mean.clone();
        for ((zv, &lv), &e) in
            z.data_mut().iter_mut().zip(post.log_variance.data()).zip(eps.data())
        {
            *zv += (0.5 * lv).exp() * e;
        }
        let (recon, dec_cache) = self.decode_frames(&z, frames.rows(), valid)?;
        let (recon_loss, d_recon) = masked_smooth_l1(&recon, frames, valid)?;
        let kl = kl_divergence(&post);
        let loss = recon_loss + self.config.kl_weight * kl;

        let dz = self.decode_backward(&dec_cache, &d_recon, grads);
        // Reparameterization: z = μ + exp(½v)ε ⇒ dμ = dz, dv = ½ exp(½v) ε dz.
        let mut d_mean = dz.clone();
        let mut d_logvar = Tensor2::zeros(dz.rows(), dz.cols());
        for idx in 0..dz.len() {
            let lv = post.log_variance.data()[idx];
            let e = eps.data()[idx];
            d_logvar.data_mut()[idx] = 0.5 * (0.5 * lv).exp() * e * dz.data()[idx];
        }
        // KL term: d/dμ = w·μ, d/dv = w·½(eᵛ − 1).
        let w = self.config.kl_weight;
        for idx in 0..d_mean.len() {
            let m = post.mean.data()[idx];
            let lv = post.log_variance.data()[idx];
            d_mean.data_mut()[idx] += w * m;
            d_logvar.data_mut()[idx] += w * 0.5 * (lv.exp() - 1.0);
        }
        self.encode_backward(&enc_cache, &d_mean, &d_logvar, grads);
        Ok(loss)
    }
}
