//! Transformer building blocks with hand-derived reverse-mode gradients.
//!
//! Each layer registers its parameters in a [`ParamStore`] under a name prefix,
//! returns an explicit cache from `forward`, and consumes that cache in
//! `backward`. Backward passes return the gradient wrt the layer input and
//! accumulate parameter gradients into a [`Grads`] buffer. Derivations are noted
//! inline where the algebra is not obvious.

use crate::error::Result;
use crate::numerics::params::{Grads, ParamId, ParamStore};
use crate::numerics::tensor::Tensor2;
use crate::numerics::{softmax_rows, softmax_rows_backward};
use crate::rng::SeedStream;

const MASK_NEG: f64 = -1e30;

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

// d/dx [x·σ(x)] = σ(x)·(1 + x·(1 − σ(x)))
#[inline]
fn silu_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn column_sums(m: &Tensor2) -> Tensor2 {
    let mut out = Tensor2::zeros(1, m.cols());
    for i in 0..m.rows() {
        let row = m.row(i);
        let acc = out.row_mut(0);
        for (a, &b) in acc.iter_mut().zip(row) {
            *a += b;
        }
    }
    out
}

// ── Linear ──────────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

pub struct LinearCache {
    x: Tensor2,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut SeedStream,
    ) -> Result<Self> {
        let std = 1.0 / (d_in as f64).sqrt();
        let w = store.register(&format!("{prefix}.w"), Tensor2::randn(d_in, d_out, std, rng))?;
        let b = store.register(&format!("{prefix}.b"), Tensor2::zeros(1, d_out))?;
        Ok(Self { w, b, d_in, d_out })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor2) -> Result<(Tensor2, LinearCache)> {
        let mut y = x.matmul(store.value(self.w))?;
        y.add_row_broadcast(store.value(self.b).row(0));
        Ok((y, LinearCache { x: x.clone() }))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &LinearCache,
        dy: &Tensor2,
        grads: &mut Grads,
    ) -> Tensor2 {
        grads.add(self.w, &cache.x.matmul_tn(dy).expect("linear dW"));
        grads.add(self.b, &column_sums(dy));
        dy.matmul_nt(store.value(self.w)).expect("linear dx")
    }
}

// ── LayerNorm ───────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

pub struct LayerNormCache {
    x_hat: Tensor2,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        let gamma = store.register(&format!("{prefix}.gamma"), Tensor2::filled(1, d, 1.0))?;
        let beta = store.register(&format!("{prefix}.beta"), Tensor2::zeros(1, d))?;
        Ok(Self { gamma, beta, eps: 1e-5 })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor2) -> (Tensor2, LayerNormCache) {
        let d = x.cols();
        let gamma = store.value(self.gamma).row(0);
        let beta = store.value(self.beta).row(0);
        let mut y = Tensor2::zeros(x.rows(), d);
        let mut x_hat = Tensor2::zeros(x.rows(), d);
        let mut inv_std = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + self.eps).sqrt();
            inv_std.push(inv);
            let xh = x_hat.row_mut(i);
            let yr = y.row_mut(i);
            for j in 0..d {
                xh[j] = (row[j] - mean) * inv;
                yr[j] = gamma[j] * xh[j] + beta[j];
            }
        }
        (y, LayerNormCache { x_hat, inv_std })
    }

    // With x̂ the normalized input: dx = inv_std · (dx̂ − mean(dx̂) − x̂·mean(dx̂ ⊙ x̂)).
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &LayerNormCache,
        dy: &Tensor2,
        grads: &mut Grads,
    ) -> Tensor2 {
        let d = dy.cols();
        let gamma = store.value(self.gamma).row(0);
        let mut dx = Tensor2::zeros(dy.rows(), d);
        let mut dgamma = vec![0.0; d];
        let mut dbeta = vec![0.0; d];
        for i in 0..dy.rows() {
            let dyr = dy.row(i);
            let xh = cache.x_hat.row(i);
            let inv = cache.inv_std[i];
            let mut sum_dxh = 0.0;
            let mut sum_dxh_xh = 0.0;
            let mut dxh = vec![0.0; d];
            for j in 0..d {
                dgamma[j] += dyr[j] * xh[j];
                dbeta[j] += dyr[j];
                dxh[j] = dyr[j] * gamma[j];
                sum_dxh += dxh[j];
                sum_dxh_xh += dxh[j] * xh[j];
            }
            let m1 = sum_dxh / d as f64;
            let m2 = sum_dxh_xh / d as f64;
            let dxr = dx.row_mut(i);
            for j in 0..d {
                dxr[j] = inv * (dxh[j] - m1 - xh[j] * m2);
            }
        }
        grads.add_row(self.gamma, 0, &dgamma);
        grads.add_row(self.beta, 0, &dbeta);
        dx
    }
}

// ── Multi-head self-attention ───────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d: usize,
}

pub struct SelfAttentionCache {
    cq: LinearCache,
    ck: LinearCache,
    cv: LinearCache,
    co: LinearCache,
    q: Tensor2,
    k: Tensor2,
    v: Tensor2,
    probs: Vec<Tensor2>,
    valid: usize,
}

fn head_slice(m: &Tensor2, head: usize, dh: usize) -> Tensor2 {
    Tensor2::from_fn(m.rows(), dh, |i, j| m.get(i, head * dh + j))
}

fn head_place(dst: &mut Tensor2, src: &Tensor2, head: usize, dh: usize) {
    for i in 0..src.rows() {
        for j in 0..dh {
            dst.set(i, head * dh + j, src.get(i, j));
        }
    }
}

impl SelfAttention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        rng: &mut SeedStream,
    ) -> Result<Self> {
        assert!(d % heads == 0, "model width {d} not divisible by {heads} heads");
        Ok(Self {
            wq: Linear::new(store, &format!("{prefix}.q"), d, d, rng)?,
            wk: Linear::new(store, &format!("{prefix}.k"), d, d, rng)?,
            wv: Linear::new(store, &format!("{prefix}.v"), d, d, rng)?,
            wo: Linear::new(store, &format!("{prefix}.o"), d, d, rng)?,
            heads,
            d,
        })
    }

    /// `valid` marks how many leading rows are real tokens; keys beyond it are
    /// masked out of every softmax. Query rows beyond `valid` still produce
    /// output, but downstream losses mask them.
    pub fn forward(
        &self,
        store: &ParamStore,
        x: &Tensor2,
        valid: usize,
    ) -> Result<(Tensor2, SelfAttentionCache)> {
        let n = x.rows();
        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (q, cq) = self.wq.forward(store, x)?;
        let (k, ck) = self.wk.forward(store, x)?;
        let (v, cv) = self.wv.forward(store, x)?;
        let mut merged = Tensor2::zeros(n, self.d);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = head_slice(&q, h, dh);
            let kh = head_slice(&k, h, dh);
            let vh = head_slice(&v, h, dh);
            let mut logits = qh.matmul_nt(&kh)?;
            if valid < n {
                for i in 0..n {
                    let row = logits.row_mut(i);
                    for item in row.iter_mut().take(n).skip(valid) {
                        *item = MASK_NEG;
                    }
                }
            }
            let p = softmax_rows(&logits, scale)?;
            let oh = p.matmul(&vh)?;
            head_place(&mut merged, &oh, h, dh);
            probs.push(p);
        }
        let (y, co) = self.wo.forward(store, &merged)?;
        Ok((y, SelfAttentionCache { cq, ck, cv, co, q, k, v, probs, valid }))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &SelfAttentionCache,
        dy: &Tensor2,
        grads: &mut Grads,
    ) -> Tensor2 {
        let n = dy.rows();
        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let d_merged = self.wo.backward(store, &cache.co, dy, grads);
        let mut dq = Tensor2::zeros(n, self.d);
        let mut dk = Tensor2::zeros(n, self.d);
        let mut dv = Tensor2::zeros(n, self.d);
        for h in 0..self.heads {
            let doh = head_slice(&d_merged, h, dh);
            let p = &cache.probs[h];
            let kh = head_slice(&cache.k, h, dh);
            let vh = head_slice(&cache.v, h, dh);
            let qh = head_slice(&cache.q, h, dh);
            // o = p·v ⇒ dp = do·vᵀ, dv = pᵀ·do
            let dp = doh.matmul_nt(&vh).expect("dp");
            let dvh = p.matmul_tn(&doh).expect("dv");
            // p = softmax(scale·q·kᵀ); masked columns have p = 0, so their
            // gradient contribution vanishes without special casing.
            let ds = softmax_rows_backward(p, &dp, scale);
            let dqh = ds.matmul(&kh).expect("dq");
            let dkh = ds.matmul_tn(&qh).expect("dk");
            head_place(&mut dq, &dqh, h, dh);
            head_place(&mut dk, &dkh, h, dh);
            head_place(&mut dv, &dvh, h, dh);
        }
        let mut dx = self.wq.backward(store, &cache.cq, &dq, grads);
        dx.add_assign(&self.wk.backward(store, &cache.ck, &dk, grads)).expect("dx shape");
        dx.add_assign(&self.wv.backward(store, &cache.cv, &dv, grads)).expect("dx shape");
        let _ = cache.valid;
        dx
    }
}

// ── Multi-head cross-attention (plain; used by the VAE decoder) ─────────────

#[derive(Clone, Debug)]
pub struct PlainCrossAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d: usize,
}

pub struct PlainCrossAttentionCache {
    cq: LinearCache,
    ck: LinearCache,
    cv: LinearCache,
    co: LinearCache,
    q: Tensor2,
    k: Tensor2,
    v: Tensor2,
    probs: Vec<Tensor2>,
}

impl PlainCrossAttention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        rng: &mut SeedStream,
    ) -> Result<Self> {
        assert!(d % heads == 0, "model width {d} not divisible by {heads} heads");
        Ok(Self {
            wq: Linear::new(store, &format!("{prefix}.q"), d, d, rng)?,
            wk: Linear::new(store, &format!("{prefix}.k"), d, d, rng)?,
            wv: Linear::new(store, &format!("{prefix}.v"), d, d, rng)?,
            wo: Linear::new(store, &format!("{prefix}.o"), d, d, rng)?,
            heads,
            d,
        })
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        x: &Tensor2,
        context: &Tensor2,
    ) -> Result<(Tensor2, PlainCrossAttentionCache)> {
        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (q, cq) = self.wq.forward(store, x)?;
        let (k, ck) = self.wk.forward(store, context)?;
        let (v, cv) = self.wv.forward(store, context)?;
        let mut merged = Tensor2::zeros(x.rows(), self.d);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = head_slice(&q, h, dh);
            let kh = head_slice(&k, h, dh);
            let vh = head_slice(&v, h, dh);
            let p = softmax_rows(&qh.matmul_nt(&kh)?, scale)?;
            let oh = p.matmul(&vh)?;
            head_place(&mut merged, &oh, h, dh);
            probs.push(p);
        }
        let (y, co) = self.wo.forward(store, &merged)?;
        Ok((y, PlainCrossAttentionCache { cq, ck, cv, co, q, k, v, probs }))
    }

    /// Returns (d_x, d_context).
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &PlainCrossAttentionCache,
        dy: &Tensor2,
        grads: &mut Grads,
    ) -> (Tensor2, Tensor2) {
        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let d_merged = self.wo.backward(store, &cache.co, dy, grads);
        let nq = dy.rows();
        let nk = cache.k.rows();
        let mut dq = Tensor2::zeros(nq, self.d);
        let mut dk = Tensor2::zeros(nk, self.d);
        let mut dv = Tensor2::zeros(nk, self.d);
        for h in 0..self.heads {
            let doh = head_slice(&d_merged, h, dh);
            let p = &cache.probs[h];
            let kh = head_slice(&cache.k, h, dh);
            let vh = head_slice(&cache.v, h, dh);
            let qh = head_slice(&cache.q, h, dh);
            let dp = doh.matmul_nt(&vh).expect("dp");
            let dvh = p.matmul_tn(&doh).expect("dv");
            let ds = softmax_rows_backward(p, &dp, scale);
            let dqh = ds.matmul(&kh).expect("dq");
            let dkh = ds.matmul_tn(&qh).expect("dk");
            head_place(&mut dq, &dqh, h, dh);
            head_place(&mut dk, &dkh, h, dh);
            head_place(&mut dv, &dvh, h, dh);
        }
        let dx = self.wq.backward(store, &cache.cq, &dq, grads);
        let mut dctx = self.wk.backward(store, &cache.ck, &dk, grads);
        dctx.add_assign(&self.wv.backward(store, &cache.cv, &dv, grads)).expect("dctx shape");
        (dx, dctx)
    }
}

// ── Feed-forward (SiLU) ─────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub w1: Linear,
    pub w2: Linear,
}

pub struct FeedForwardCache {
    c1: LinearCache,
    c2: LinearCache,
    pre: Tensor2,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        hidden: usize,
        rng: &mut SeedStream,
    ) -> Result<Self> {
        Ok(Self {
            w1: Linear::new(store, &format!("{prefix}.w1"), d, hidden, rng)?,
            w2: Linear::new(store, &format!("{prefix}.w2"), hidden, d, rng)?,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor2) -> Result<(Tensor2, FeedForwardCache)> {
        let (pre, c1) = self.w1.forward(store, x)?;
        let act = pre.map(silu);
        let (y, c2) = self.w2.forward(store, &act)?;
        Ok((y, FeedForwardCache { c1, c2, pre }))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &FeedForwardCache,
        dy: &Tensor2,
        grads: &mut Grads,
    ) -> Tensor2 {
        let dact = self.w2.backward(store, &cache.c2, dy, grads);
        let dpre = dact.zip_map(&cache.pre, |g, u| g * silu_prime(u)).expect("ffn dpre");
        self.w1.backward(store, &cache.c1, &dpre, grads)
    }
}

// ── Timestep embedding ──────────────────────────────────────────────────────

/// Fixed sinusoidal embedding of a scalar step index.
pub fn sinusoidal_embedding(t: f64, d: usize) -> Tensor2 {
    let mut out = Tensor2::zeros(1, d);
    let half = d / 2;
    let row = out.row_mut(0);
    for i in 0..half {
        let freq = (10_000.0_f64).powf(-(i as f64) / half as f64);
        row[2 * i] = (t * freq).sin();
        row[2 * i + 1] = (t * freq).cos();
    }
    out
}

/// Sinusoidal base through a two-layer SiLU MLP; output is broadcast-added to
/// every token row by the caller.
#[derive(Clone, Debug)]
pub struct TimeEmbed {
    pub w1: Linear,
    pub w2: Linear,
    pub d: usize,
}

pub struct TimeEmbedCache {
    c1: LinearCache,
    c2: LinearCache,
    pre: Tensor2,
}

impl TimeEmbed {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut SeedStream) -> Result<Self> {
        Ok(Self {
            w1: Linear::new(store, &format!("{prefix}.w1"), d, d, rng)?,
            w2: Linear::new(store, &format!("{prefix}.w2"), d, d, rng)?,
            d,
        })
    }

    pub fn forward(&self, store: &ParamStore, t: f64) -> Result<(Tensor2, TimeEmbedCache)> {
        let base = sinusoidal_embedding(t, self.d);
        let (pre, c1) = self.w1.forward(store, &base)?;
        let act = pre.map(silu);
        let (y, c2) = self.w2.forward(store, &act)?;
        Ok((y, TimeEmbedCache { c1, c2, pre }))
    }

    /// `dy` is the summed gradient over all token rows (1×d).
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &TimeEmbedCache,
        dy: &Tensor2,
        grads: &mut Grads,
    ) {
        let dact = self.w2.backward(store, &cache.c2, dy, grads);
        let dpre = dact.zip_map(&cache.pre, |g, u| g * silu_prime(u)).expect("time dpre");
        // Sinusoidal base is constant; its gradient stops here.
        let _ = self.w1.backward(store, &cache.c1, &dpre, grads);
    }
}
