//! Energy view of attention: pattern retrieval, its guidance gradients, and
//! the energy-based cross-attention layer built on them.

use crate::error::{Error, Result};
use crate::numerics::{softmax_rows, softmax_rows_backward, Grads, ParamId, ParamStore, Tensor2};
use crate::rng::SeedStream;
use serde::{Deserialize, Serialize};

/// Step sizes for attention-gradient descent on the concept tokens.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AgdConfig {
    pub gamma_attn: f64,
    pub gamma_reg: f64,
}

impl AgdConfig {
    pub const OFF: AgdConfig = AgdConfig { gamma_attn: 0.0, gamma_reg: 0.0 };

    /// Step sizes tuned for two-concept composition.
    pub fn compositional() -> Self {
        Self { gamma_attn: 4e-4, gamma_reg: 4e-4 }
    }

    /// Step sizes tuned for dense multi-concept prompts.
    pub fn multi_concept() -> Self {
        Self { gamma_attn: 1e-3, gamma_reg: 2e-3 }
    }

    pub fn is_off(&self) -> bool {
        self.gamma_attn == 0.0 && self.gamma_reg == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        for (name, g) in [("gamma_attn", self.gamma_attn), ("gamma_reg", self.gamma_reg)] {
            if !(g.is_finite() && g >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {g}")));
            }
        }
        Ok(())
    }
}

impl Default for AgdConfig {
    fn default() -> Self {
        Self::OFF
    }
}

fn check_pattern_query(patterns: &Tensor2, xi: &Tensor2, alpha: f64) -> Result<()> {
    if patterns.rows() == 0 {
        return Err(Error::invalid("need at least one pattern"));
    }
    if xi.rows() != 1 || xi.cols() != patterns.cols() {
        return Err(Error::shape(format!(
            "state {:?} incompatible with patterns {:?}",
            xi.shape(),
            patterns.shape()
        )));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    Ok(())
}

/// E(ξ) = −α⁻¹ log Σᵢ exp(α⟨xᵢ, ξ⟩) + ½‖ξ‖² with patterns xᵢ as rows.
pub fn hopfield_energy(patterns: &Tensor2, xi: &Tensor2, alpha: f64) -> Result<f64> {
    check_pattern_query(patterns, xi, alpha)?;
    let scores = xi.matmul_nt(patterns)?;
    let mut max = f64::NEG_INFINITY;
    for &s in scores.data() {
        max = max.max(alpha * s);
    }
    let mut sum = 0.0;
    for &s in scores.data() {
        sum += (alpha * s - max).exp();
    }
    let lse = max + sum.ln();
    let sq: f64 = xi.data().iter().map(|v| v * v).sum();
    Ok(-lse / alpha + 0.5 * sq)
}

/// One retrieval step ξ ← ξ − γ(ξ − Xᵀsoftmax(αXξ)). At γ = 1 this is exactly
/// attention with the patterns serving as both keys and values.
pub fn hopfield_update(
    patterns: &Tensor2,
    xi: &Tensor2,
    gamma: f64,
    alpha: f64,
) -> Result<Tensor2> {
    check_pattern_query(patterns, xi, alpha)?;
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    let weights = softmax_rows(&xi.matmul_nt(patterns)?, alpha)?;
    let retrieved = weights.matmul(patterns)?;
    Ok(xi.zip_map(&retrieved, |x, r| x - gamma * (x - r))?)
}

/// Alignment energy −α⁻¹ Σᵢ log Σⱼ exp(α kᵢ·qⱼ); low when every key sits near
/// some query direction.
pub fn energy_alignment(k: &Tensor2, q: &Tensor2, alpha: f64) -> Result<f64> {
    if k.cols() != q.cols() {
        return Err(Error::shape(format!("keys {:?} vs queries {:?}", k.shape(), q.shape())));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    let logits = k.matmul_nt(q)?;
    let mut total = 0.0;
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(alpha * v));
        let sum: f64 = row.iter().map(|&v| (alpha * v - max).exp()).sum();
        total += max + sum.ln();
    }
    Ok(-total / alpha)
}

/// −∇_K of [`energy_alignment`]: softmax(αKQᵀ)Q, the direction pulling each
/// key toward the queries it already attends to.
pub fn alignment_descent(k: &Tensor2, q: &Tensor2, alpha: f64) -> Result<Tensor2> {
    softmax_rows(&k.matmul_nt(q)?, alpha)?.matmul(q)
}

/// Spread energy Σⱼ log Σₘ exp(K′ⱼₘ) with K′ = ½KᵀK; high when key columns
/// crowd the same directions.
pub fn energy_reg(k: &Tensor2) -> Result<f64> {
    let kp = k.matmul_tn(k)?.scale(0.5);
    let mut total = 0.0;
    for i in 0..kp.rows() {
        let row = kp.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        total += max + sum.ln();
    }
    Ok(total)
}

/// ∇_K of [`energy_reg`]: ½K(P + Pᵀ) with P = softmax over rows of ½KᵀK.
pub fn reg_gradient(k: &Tensor2) -> Result<Tensor2> {
    let p = softmax_rows(&k.matmul_tn(k)?.scale(0.5), 1.0)?;
    let sym = p.add(&p.transpose())?;
    Ok(k.matmul(&sym)?.scale(0.5))
}

/// Cross-attention whose keys and values are concept tokens, with an optional
/// guidance step that moves the tokens down both energy terms.
#[derive(Clone)]
pub struct EnergyCrossAttention {
    wk: ParamId,
    wv: ParamId,
    d: usize,
}

pub struct EnergyCrossAttentionCache {
    q: Tensor2,
    c: Tensor2,
    v: Tensor2,
    p: Tensor2,
    agd_off: bool,
}

impl EnergyCrossAttention {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut SeedStream) -> Result<Self> {
        let std = 1.0 / (d as f64).sqrt();
        let wk = store.register(&format!("{prefix}.wk"), Tensor2::randn(d, d, std, rng))?;
        let wv = store.register(&format!("{prefix}.wv"), Tensor2::randn(d, d, std, rng))?;
        Ok(Self { wk, wv, d })
    }

    /// Returns the attended output for the queries and the (possibly refined)
    /// concept tokens to hand to the next layer.
    pub fn forward(
        &self,
        store: &ParamStore,
        q: &Tensor2,
        c: &Tensor2,
        agd: AgdConfig,
    ) -> Result<(Tensor2, Tensor2, EnergyCrossAttentionCache)> {
        agd.validate()?;
        if q.cols() != self.d || c.cols() != self.d {
            return Err(Error::shape(format!(
                "queries {:?} / concepts {:?} incompatible with width {}",
                q.shape(),
                c.shape(),
                self.d
            )));
        }
        let alpha = 1.0 / (self.d as f64).sqrt();
        let k = c.matmul(store.value(self.wk))?;
        let v = c.matmul(store.value(self.wv))?;
        let p = softmax_rows(&q.matmul_nt(&k)?, alpha)?;
        let out = p.matmul(&v)?;
        let refined = if agd.is_off() {
            c.clone()
        } else {
            // Both terms are chained through K = cW_K, hence the W_Kᵀ factor.
            let attn = alignment_descent(&k, q, alpha)?;
            let reg = reg_gradient(&k)?;
            let wk_t = store.value(self.wk).transpose();
            let mut refined = c.clone();
            refined.axpy(agd.gamma_attn, &attn.matmul(&wk_t)?)?;
            refined.axpy(-agd.gamma_reg, &reg.matmul(&wk_t)?)?;
            refined
        };
        let cache =
            EnergyCrossAttentionCache { q: q.clone(), c: c.clone(), v, p, agd_off: agd.is_off() };
        Ok((out, refined, cache))
    }

    /// Training-path gradients; the refinement step is inference-only, so the
    /// cache must come from an unguided forward pass.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &EnergyCrossAttentionCache,
        d_out: &Tensor2,
        grads: &mut Grads,
    ) -> (Tensor2, Tensor2) {
        assert!(cache.agd_off, "no gradient path through token refinement");
        let alpha = 1.0 / (self.d as f64).sqrt();
        let k = cache.c.matmul(store.value(self.wk)).expect("eca k");
        let dv = cache.p.matmul_tn(d_out).expect("eca dv");
        let dp = d_out.matmul_nt(&cache.v).expect("eca dp");
        let dlogits = softmax_rows_backward(&cache.p, &dp, alpha);
        let dq = dlogits.matmul(&k).expect("eca dq");
        let dk = dlogits.matmul_tn(&cache.q).expect("eca dk");
        grads.add(self.wk, &cache.c.matmul_tn(&dk).expect("eca dwk"));
        grads.add(self.wv, &cache.c.matmul_tn(&dv).expect("eca dwv"));
        let mut dc = dk.matmul_nt(store.value(self.wk)).expect("eca dc");
        dc.add_assign(&dv.matmul_nt(store.value(self.wv)).expect("eca dc v")).expect("eca dc");
        (dq, dc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{attention, grad_check};

    fn rng(seed: u64) -> SeedStream {
        SeedStream::new(seed)
    }

    #[test]
    fn energy_matches_scalar_loop() {
        let mut r = rng(1);
        for _ in 0..20 {
            let patterns = Tensor2::randn(6, 4, 1.0, &mut r);
            let xi = Tensor2::randn(1, 4, 1.0, &mut r);
            let alpha = 0.3 + r.uniform() * 2.0;
            let got = hopfield_energy(&patterns, &xi, alpha).unwrap();

            let mut sum = 0.0;
            for i in 0..patterns.rows() {
                let mut dot = 0.0;
                for j in 0..patterns.cols() {
                    dot += patterns.get(i, j) * xi.get(0, j);
                }
                sum += (alpha * dot).exp();
            }
            let mut sq = 0.0;
            for j in 0..xi.cols() {
                sq += xi.get(0, j) * xi.get(0, j);
            }
            let want = -sum.ln() / alpha + 0.5 * sq;
            assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn unit_step_update_is_attention_with_patterns_as_values() {
        let mut r = rng(2);
        for _ in 0..50 {
            let d = 3 + r.below(6);
            let np = 1 + r.below(8);
            let patterns = Tensor2::randn(np, d, 1.0, &mut r);
            let xi = Tensor2::randn(1, d, 1.0, &mut r);
            let alpha = 1.0 / (d as f64).sqrt();
            let upd = hopfield_update(&patterns, &xi, 1.0, alpha).unwrap();
            let att = attention(&xi, &patterns, &patterns, alpha).unwrap();
            for (a, b) in upd.data().iter().zip(att.data()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn update_never_raises_energy() {
        // Linearizing the concave term bounds E by a quadratic minimized at
        // the retrieved point, so every γ in [0, 1] step is non-increasing.
        let mut r = rng(3);
        for case in 0..200 {
            let patterns = Tensor2::randn(5, 4, 1.0, &mut r);
            let xi = Tensor2::randn(1, 4, 1.5, &mut r);
            let alpha = 0.2 + r.uniform() * 3.0;
            let gamma = (case % 10 + 1) as f64 / 10.0;
            let e0 = hopfield_energy(&patterns, &xi, alpha).unwrap();
            let xi1 = hopfield_update(&patterns, &xi, gamma, alpha).unwrap();
            let e1 = hopfield_energy(&patterns, &xi1, alpha).unwrap();
            assert!(e1 <= e0 + 1e-12, "energy rose {e0} -> {e1} at gamma {gamma}");
        }
    }

    #[test]
    fn iterated_updates_reach_a_fixed_point() {
        let mut r = rng(4);
        let patterns = Tensor2::randn(4, 5, 1.0, &mut r);
        let mut xi = Tensor2::randn(1, 5, 1.0, &mut r);
        let mut last = f64::INFINITY;
        for _ in 0..300 {
            let next = hopfield_update(&patterns, &xi, 0.5, 2.0).unwrap();
            last = next.sub(&xi).unwrap().max_abs();
            xi = next;
        }
        assert!(last <= 1e-10, "iteration still moving by {last}");
    }

    #[test]
    fn alignment_gradient_passes_finite_differences() {
        let mut r = rng(5);
        let q = Tensor2::randn(3, 4, 1.0, &mut r);
        let k0 = Tensor2::randn(5, 4, 1.0, &mut r);
        let alpha = 0.7;
        let mut store = ParamStore::new();
        let kid = store.register("k", k0).unwrap();
        let err = grad_check(&mut store, &[kid], 1e-5, |s, grads| {
            let k = s.value(kid);
            if let Some(g) = grads {
                g.add(kid, &alignment_descent(k, &q, alpha)?.scale(-1.0));
            }
            energy_alignment(k, &q, alpha)
        })
        .unwrap();
        assert!(err <= 1e-6, "alignment gradient off by {err}");
    }

    #[test]
    fn reg_gradient_passes_finite_differences() {
        let mut r = rng(6);
        let k0 = Tensor2::randn(5, 4, 1.0, &mut r);
        let mut store = ParamStore::new();
        let kid = store.register("k", k0).unwrap();
        let err = grad_check(&mut store, &[kid], 1e-5, |s, grads| {
            let k = s.value(kid);
            if let Some(g) = grads {
                g.add(kid, &reg_gradient(k)?);
            }
            energy_reg(k)
        })
        .unwrap();
        assert!(err <= 1e-6, "reg gradient off by {err}");
    }

    #[test]
    fn refinement_descends_each_energy_term() {
        let mut r = rng(7);
        let mut store = ParamStore::new();
        let eca = EnergyCrossAttention::new(&mut store, "eca", 8, &mut r).unwrap();
        let q = Tensor2::randn(4, 8, 1.0, &mut r);
        let c = Tensor2::randn(3, 8, 1.0, &mut r);
        let alpha = 1.0 / 8f64.sqrt();
        let k = |c: &Tensor2| c.matmul(store.value(eca.wk)).unwrap();

        let attn_only = AgdConfig { gamma_attn: 1e-4, gamma_reg: 0.0 };
        let (_, refined, _) = eca.forward(&store, &q, &c, attn_only).unwrap();
        let before = energy_alignment(&k(&c), &q, alpha).unwrap();
        let after = energy_alignment(&k(&refined), &q, alpha).unwrap();
        assert!(after < before, "alignment energy rose {before} -> {after}");

        let reg_only = AgdConfig { gamma_attn: 0.0, gamma_reg: 1e-4 };
        let (_, refined, _) = eca.forward(&store, &q, &c, reg_only).unwrap();
        let before = energy_reg(&k(&c)).unwrap();
        let after = energy_reg(&k(&refined)).unwrap();
        assert!(after < before, "reg energy rose {before} -> {after}");
    }

    #[test]
    fn agd_off_returns_concepts_untouched() {
        let mut r = rng(8);
        let mut store = ParamStore::new();
        let eca = EnergyCrossAttention::new(&mut store, "eca", 8, &mut r).unwrap();
        let q = Tensor2::randn(2, 8, 1.0, &mut r);
        let c = Tensor2::randn(3, 8, 1.0, &mut r);
        let (_, refined, _) = eca.forward(&store, &q, &c, AgdConfig::OFF).unwrap();
        assert_eq!(refined.data(), c.data());
    }

    #[test]
    fn cross_attention_gradients_pass_finite_differences() {
        let mut r = rng(9);
        let d = 6;
        let mut store = ParamStore::new();
        let eca = EnergyCrossAttention::new(&mut store, "eca", d, &mut r).unwrap();
        let qid = store.register("q", Tensor2::randn(3, d, 1.0, &mut r)).unwrap();
        let cid = store.register("c", Tensor2::randn(4, d, 1.0, &mut r)).unwrap();
        let w = Tensor2::randn(3, d, 1.0, &mut r);
        let ids: Vec<_> = store.ids().collect();
        let err = grad_check(&mut store, &ids, 1e-5, |s, grads| {
            let (out, _, cache) = eca.forward(s, s.value(qid), s.value(cid), AgdConfig::OFF)?;
            if let Some(g) = grads {
                let (dq, dc) = eca.backward(s, &cache, &w, g);
                g.add(qid, &dq);
                g.add(cid, &dc);
            }
            Ok(out.zip_map(&w, |a, b| a * b)?.sum())
        })
        .unwrap();
        assert!(err <= 1e-6, "cross-attention gradients off by {err}");
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let p = Tensor2::zeros(2, 3);
        let xi = Tensor2::zeros(1, 3);
        assert!(hopfield_energy(&p, &xi, 0.0).is_err());
        assert!(hopfield_energy(&Tensor2::zeros(0, 3), &xi, 1.0).is_err());
        assert!(hopfield_update(&p, &xi, 1.5, 1.0).is_err());
        assert!(hopfield_update(&p, &Tensor2::zeros(2, 3), 0.5, 1.0).is_err());
        assert!(AgdConfig { gamma_attn: -0.1, gamma_reg: 0.0 }.validate().is_err());
    }
}
