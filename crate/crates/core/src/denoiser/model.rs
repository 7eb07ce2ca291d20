//! Token-conditioned noise predictor over latent rows or raw frames.

use super::energy::{AgdConfig, EnergyCrossAttention, EnergyCrossAttentionCache};
use crate::error::{Error, Result};
use crate::numerics::{
    FeedForward, FeedForwardCache, Grads, LayerNorm, LayerNormCache, Linear, LinearCache,
    ParamId, ParamStore, SelfAttention, SelfAttentionCache, Tensor2, TimeEmbed, TimeEmbedCache,
};
use crate::rng::SeedStream;
use crate::toymotion::{ConceptDescription, D_M, MAX_LEN, NUM_TOKEN_KINDS};
use serde::{Deserialize, Serialize};

/// Row of the token table reserved for the unconditional embedding.
pub const NULL_TOKEN_ROW: usize = NUM_TOKEN_KINDS;

/// Concept tokens as rows; never empty (an empty description embeds to the
/// dedicated null row).
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptEmbedding {
    pub rows: Tensor2,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// Width of each input token: latent width or frame channels.
    pub input_dim: usize,
    /// Largest token count a forward pass may see.
    pub max_tokens: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
}

impl DenoiserConfig {
    /// Desk profile denoising latent codes of shape n_latent × d_latent.
    pub fn latent_desk(n_latent: usize, d_latent: usize) -> Self {
        Self {
            input_dim: d_latent,
            max_tokens: n_latent,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            ffn_hidden: 256,
        }
    }

    /// Desk profile denoising frame sequences directly.
    pub fn sequence_desk() -> Self {
        Self {
            input_dim: D_M,
            max_tokens: MAX_LEN,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            ffn_hidden: 256,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.max_tokens == 0 || self.d_model == 0 || self.n_layers == 0 {
            return Err(Error::Config("denoiser dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self::latent_desk(5, 64)
    }
}

#[derive(Clone)]
struct Block {
    ln1: LayerNorm,
    attn: SelfAttention,
    ln2: LayerNorm,
    wq: Linear,
    eca: EnergyCrossAttention,
    wo: Linear,
    ln3: LayerNorm,
    ffn: FeedForward,
}

struct BlockCache {
    ln1: LayerNormCache,
    attn: SelfAttentionCache,
    ln2: LayerNormCache,
    wq: LinearCache,
    eca: EnergyCrossAttentionCache,
    wo: LinearCache,
    ln3: LayerNormCache,
    ffn: FeedForwardCache,
}

impl Block {
    fn new(store: &mut ParamStore, prefix: &str, cfg: &DenoiserConfig, rng: &mut SeedStream) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{prefix}.ln1"), d)?,
            attn: SelfAttention::new(store, &format!("{prefix}.attn"), d, cfg.n_heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{prefix}.ln2"), d)?,
            wq: Linear::new(store, &format!("{prefix}.wq"), d, d, rng)?,
            eca: EnergyCrossAttention::new(store, &format!("{prefix}.eca"), d, rng)?,
            wo: Linear::new(store, &format!("{prefix}.wo"), d, d, rng)?,
            ln3: LayerNorm::new(store, &format!("{prefix}.ln3"), d)?,
            ffn: FeedForward::new(store, &format!("{prefix}.ffn"), d, cfg.ffn_hidden, rng)?,
        })
    }
}

pub struct ForwardCache {
    input: LinearCache,
    time: TimeEmbedCache,
    blocks: Vec<BlockCache>,
    ln_f: LayerNormCache,
    out: LinearCache,
    n_tokens: usize,
}

/// Per-layer record of branch cross-attention outputs and their merge.
#[derive(Clone, Debug)]
pub struct MixLayerTrace {
    pub branch_outputs: Vec<Tensor2>,
    pub merged: Tensor2,
}

#[derive(Clone, Debug, Default)]
pub struct MixTrace {
    pub layers: Vec<MixLayerTrace>,
}

#[derive(Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub store: ParamStore,
    token_table: ParamId,
    in_proj: Linear,
    pos: ParamId,
    time: TimeEmbed,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    out: Linear,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = SeedStream::new(seed).derive("denoiser-init");
        let d = config.d_model;
        let token_table = store.register(
            "cond.table",
            Tensor2::randn(NUM_TOKEN_KINDS + 1, d, 0.02, &mut rng),
        )?;
        let in_proj = Linear::new(&mut store, "in", config.input_dim, d, &mut rng)?;
        let pos = store.register("pos", Tensor2::randn(config.max_tokens, d, 0.02, &mut rng))?;
        let time = TimeEmbed::new(&mut store, "time", d, &mut rng)?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            blocks.push(Block::new(&mut store, &format!("b{i}"), &config, &mut rng)?);
        }
        let ln_f = LayerNorm::new(&mut store, "lnf", d)?;
        let out = Linear::new(&mut store, "out", d, config.input_dim, &mut rng)?;
        Ok(Self { config, store, token_table, in_proj, pos, time, blocks, ln_f, out })
    }

    /// Looks up each token's table row and scales it by the token magnitude;
    /// an empty description embeds to the null row alone.
    pub fn embed_description(&self, desc: &ConceptDescription) -> ConceptEmbedding {
        let table = self.store.value(self.token_table);
        let d = self.config.d_model;
        if desc.is_empty() {
            let mut rows = Tensor2::zeros(1, d);
            rows.row_mut(0).copy_from_slice(table.row(NULL_TOKEN_ROW));
            return ConceptEmbedding { rows };
        }
        let tokens = desc.tokens();
        let mut rows = Tensor2::zeros(tokens.len(), d);
        for (i, tok) in tokens.iter().enumerate() {
            let src = table.row(tok.kind.table_index());
            for (dst, &s) in rows.row_mut(i).iter_mut().zip(src) {
                *dst = tok.magnitude * s;
            }
        }
        ConceptEmbedding { rows }
    }

    /// Routes a gradient wrt the embedding rows back into the token table.
    pub fn embed_backward(&self, desc: &ConceptDescription, d_rows: &Tensor2, grads: &mut Grads) {
        if desc.is_empty() {
            grads.add_row(self.token_table, NULL_TOKEN_ROW, d_rows.row(0));
            return;
        }
        for (i, tok) in desc.tokens().iter().enumerate() {
            let scaled: Vec<f64> = d_rows.row(i).iter().map(|g| g * tok.magnitude).collect();
            grads.add_row(self.token_table, tok.kind.table_index(), &scaled);
        }
    }

    fn check_input(&self, x: &Tensor2, t: f64) -> Result<()> {
        if x.rows() == 0 || x.rows() > self.config.max_tokens {
            return Err(Error::shape(format!(
                "{} tokens outside 1..={}",
                x.rows(),
                self.config.max_tokens
            )));
        }
        if x.cols() != self.config.input_dim {
            return Err(Error::shape(format!(
                "token width {} != {}",
                x.cols(),
                self.config.input_dim
            )));
        }
        if !t.is_finite() || t < 0.0 {
            return Err(Error::invalid(format!("bad timestep {t}")));
        }
        Ok(())
    }

    fn embed_input(&self, x: &Tensor2, t: f64) -> Result<(Tensor2, LinearCache, TimeEmbedCache)> {
        let (mut h, input) = self.in_proj.forward(&self.store, x)?;
        let pos = self.store.value(self.pos);
        let (trow, time) = self.time.forward(&self.store, t)?;
        for i in 0..h.rows() {
            let p = pos.row(i);
            let tr = trow.row(0);
            let row = h.row_mut(i);
            for j in 0..row.len() {
                row[j] += p[j] + tr[j];
            }
        }
        Ok((h, input, time))
    }

    /// Training-path forward with caches; token refinement stays off so the
    /// gradient is exact.
    pub fn forward_cached(
        &self,
        x: &Tensor2,
        t: f64,
        c: &ConceptEmbedding,
    ) -> Result<(Tensor2, ForwardCache)> {
        self.check_input(x, t)?;
        let n = x.rows();
        let (mut h, input, time) = self.embed_input(x, t)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (a_in, ln1) = b.ln1.forward(&self.store, &h);
            let (a_out, attn) = b.attn.forward(&self.store, &a_in, n)?;
            h.add_assign(&a_out)?;
            let (q_in, ln2) = b.ln2.forward(&self.store, &h);
            let (q, wq) = b.wq.forward(&self.store, &q_in)?;
            let (att, _, eca) = b.eca.forward(&self.store, &q, &c.rows, AgdConfig::OFF)?;
            let (o, wo) = b.wo.forward(&self.store, &att)?;
            h.add_assign(&o)?;
            let (f_in, ln3) = b.ln3.forward(&self.store, &h);
            let (f_out, ffn) = b.ffn.forward(&self.store, &f_in)?;
            h.add_assign(&f_out)?;
            blocks.push(BlockCache { ln1, attn, ln2, wq, eca, wo, ln3, ffn });
        }
        let (hf, ln_f) = self.ln_f.forward(&self.store, &h);
        let (eps, out) = self.out.forward(&self.store, &hf)?;
        Ok((eps, ForwardCache { input, time, blocks, ln_f, out, n_tokens: n }))
    }

    /// Returns (d_x, d_concept_rows); parameter gradients accumulate in place.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_eps: &Tensor2,
        grads: &mut Grads,
    ) -> (Tensor2, Tensor2) {
        let dhf = self.out.backward(&self.store, &cache.out, d_eps, grads);
        let mut dh = self.ln_f.backward(&self.store, &cache.ln_f, &dhf, grads);
        let mut dc_total: Option<Tensor2> = None;
        for (b, bc) in self.blocks.iter().zip(cache.blocks.iter()).rev() {
            let df = b.ffn.backward(&self.store, &bc.ffn, &dh, grads);
            dh.add_assign(&b.ln3.backward(&self.store, &bc.ln3, &df, grads)).expect("dh");
            let d_att = b.wo.backward(&self.store, &bc.wo, &dh, grads);
            let (dq, dc) = b.eca.backward(&self.store, &bc.eca, &d_att, grads);
            match &mut dc_total {
                Some(acc) => acc.add_assign(&dc).expect("dc"),
                None => dc_total = Some(dc),
            }
            let d_qin = b.wq.backward(&self.store, &bc.wq, &dq, grads);
            dh.add_assign(&b.ln2.backward(&self.store, &bc.ln2, &d_qin, grads)).expect("dh");
            let da = b.attn.backward(&self.store, &bc.attn, &dh, grads);
            dh.add_assign(&b.ln1.backward(&self.store, &bc.ln1, &da, grads)).expect("dh");
        }
        let mut d_time = Tensor2::zeros(1, self.config.d_model);
        for i in 0..cache.n_tokens {
            grads.add_row(self.pos, i, dh.row(i));
            let tr = d_time.row_mut(0);
            for (a, b) in tr.iter_mut().zip(dh.row(i)) {
                *a += b;
            }
        }
        self.time.backward(&self.store, &cache.time, &d_time, grads);
        let dx = self.in_proj.backward(&self.store, &cache.input, &dh, grads);
        (dx, dc_total.expect("at least one block"))
    }

    /// Predicted noise for one condition; `agd` refines the concept tokens
    /// between layers at inference time.
    pub fn predict_eps(
        &self,
        x: &Tensor2,
        t: f64,
        c: &ConceptEmbedding,
        agd: AgdConfig,
    ) -> Result<Tensor2> {
        Ok(self.predict_eps_mixed(x, t, &[(1.0, c)], agd)?.0)
    }

    /// Runs one shared trunk over several concept branches, merging the
    /// cross-attention outputs by normalized weights at every layer.
    pub fn predict_eps_mixed(
        &self,
        x: &Tensor2,
        t: f64,
        branches: &[(f64, &ConceptEmbedding)],
        agd: AgdConfig,
    ) -> Result<(Tensor2, MixTrace)> {
        self.check_input(x, t)?;
        agd.validate()?;
        if branches.is_empty() {
            return Err(Error::invalid("need at least one concept branch"));
        }
        let total: f64 = branches.iter().map(|(w, _)| w).sum();
        if total.abs() <= 1e-6 {
            return Err(Error::DegenerateWeights(format!(
                "branch weights sum to {total:.2e}; merge would blow up"
            )));
        }
        let n = x.rows();
        let (mut h, _, _) = self.embed_input(x, t)?;
        let mut concepts: Vec<Tensor2> = branches.iter().map(|(_, c)| c.rows.clone()).collect();
        let mut trace = MixTrace::default();
        for b in &self.blocks {
            let (a_in, _) = b.ln1.forward(&self.store, &h);
            let (a_out, _) = b.attn.forward(&self.store, &a_in, n)?;
            h.add_assign(&a_out)?;
            let (q_in, _) = b.ln2.forward(&self.store, &h);
            let (q, _) = b.wq.forward(&self.store, &q_in)?;
            let mut branch_outputs = Vec::with_capacity(branches.len());
            let mut merged = Tensor2::zeros(n, self.config.d_model);
            for (i, (w, _)) in branches.iter().enumerate() {
                let (att, refined, _) = b.eca.forward(&self.store, &q, &concepts[i], agd)?;
                merged.axpy(w / total, &att)?;
                branch_outputs.push(att);
                concepts[i] = refined;
            }
            trace.layers.push(MixLayerTrace { branch_outputs, merged: merged.clone() });
            let (o, _) = b.wo.forward(&self.store, &merged)?;
            h.add_assign(&o)?;
            let (f_in, _) = b.ln3.forward(&self.store, &h);
            let (f_out, _) = b.ffn.forward(&self.store, &f_in)?;
            h.add_assign(&f_out)?;
        }
        let (hf, _) = self.ln_f.forward(&self.store, &h);
        let (eps, _) = self.out.forward(&self.store, &hf)?;
        Ok((eps, trace))
    }
}
