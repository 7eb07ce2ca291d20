//! Noise schedules, the forward corruption process, and score guidance.

mod sample;
mod train;

pub use sample::{sample, sample_with_score, SamplerConfig, SamplerKind, Substrate};
pub(crate) use sample::{timesteps, transition_coefs};
pub use train::{train_denoiser, training_step, training_step_at, DiffusionTrainConfig};

use crate::error::{Error, Result};
use crate::numerics::Tensor2;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Linear,
    ScaledLinear,
}

/// Discrete-time noise schedule; all accessors are 1-indexed in t.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_var: Vec<f64>,
}

pub fn make_schedule(
    t_max: usize,
    kind: ScheduleKind,
    beta_min: f64,
    beta_max: f64,
) -> Result<NoiseSchedule> {
    if t_max == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_min < beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let frac = |i: usize| {
        if t_max == 1 {
            0.0
        } else {
            i as f64 / (t_max - 1) as f64
        }
    };
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            (0..t_max).map(|i| beta_min + frac(i) * (beta_max - beta_min)).collect()
        }
        ScheduleKind::ScaledLinear => {
            let (lo, hi) = (beta_min.sqrt(), beta_max.sqrt());
            (0..t_max)
                .map(|i| {
                    let s = lo + frac(i) * (hi - lo);
                    s * s
                })
                .collect()
        }
    };
    let mut alpha_bars = Vec::with_capacity(t_max);
    let mut prod = 1.0;
    for &b in &betas {
        prod *= 1.0 - b;
        alpha_bars.push(prod);
    }
    let mut posterior_var = Vec::with_capacity(t_max);
    for t in 1..=t_max {
        let prev = if t == 1 { 1.0 } else { alpha_bars[t - 2] };
        posterior_var.push((1.0 - prev) / (1.0 - alpha_bars[t - 1]) * betas[t - 1]);
    }
    Ok(NoiseSchedule { betas, alpha_bars, posterior_var })
}

impl NoiseSchedule {
    /// T = 1000, linear betas from 1e-4 to 0.02.
    pub fn default_linear() -> Self {
        make_schedule(1000, ScheduleKind::Linear, 1e-4, 2e-2).expect("valid defaults")
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::invalid(format!("timestep {t} outside 1..={}", self.len())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// ᾱ before step t; ᾱ₀ = 1 by convention.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t <= 1 {
            1.0
        } else {
            self.alpha_bars[t - 2]
        }
    }

    /// Reverse-process variance β̃_t; zero at t = 1.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_var[t - 1]
    }
}

/// Forward corruption x_t = √ᾱ_t x₀ + √(1−ᾱ_t) ε for a given noise draw.
pub fn q_sample(x0: &Tensor2, t: usize, eps: &Tensor2, schedule: &NoiseSchedule) -> Result<Tensor2> {
    schedule.check_t(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::shape(format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape())));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// uncond + Σᵢ wᵢ (termᵢ − uncond): shared combiner for every guided score.
pub fn guided_combine(uncond: &Tensor2, terms: &[(f64, &Tensor2)]) -> Result<Tensor2> {
    let mut out = uncond.clone();
    for (w, term) in terms {
        if term.shape() != uncond.shape() {
            return Err(Error::shape(format!(
                "guidance term {:?} vs base {:?}",
                term.shape(),
                uncond.shape()
            )));
        }
        out.axpy(*w, &term.sub(uncond)?)?;
    }
    Ok(out)
}

/// Classifier-free guidance with a single condition.
pub fn cfg_score(uncond: &Tensor2, cond: &Tensor2, w: f64) -> Result<Tensor2> {
    guided_combine(uncond, &[(w, cond)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    #[test]
    fn schedule_endpoints_and_monotonicity() {
        let s = NoiseSchedule::default_linear();
        assert_eq!(s.len(), 1000);
        assert!((s.beta(1) - 1e-4).abs() <= 1e-18);
        assert!((s.beta(1000) - 2e-2).abs() <= 1e-18);
        for t in 2..=1000 {
            assert!(s.beta(t) > s.beta(t - 1));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(s.alpha_bar(1000) < 0.01, "terminal signal {}", s.alpha_bar(1000));
        assert_eq!(s.posterior_variance(1), 0.0);
    }

    #[test]
    fn alpha_bar_matches_hand_product() {
        let s = make_schedule(4, ScheduleKind::Linear, 0.1, 0.4).unwrap();
        // betas are 0.1, 0.2, 0.3, 0.4 exactly.
        assert!((s.beta(2) - 0.2).abs() <= 1e-15);
        let want = 0.9 * 0.8 * 0.7;
        assert!((s.alpha_bar(3) - want).abs() <= 1e-15);
        let post = (1.0 - 0.9 * 0.8) / (1.0 - want) * 0.3;
        assert!((s.posterior_variance(3) - post).abs() <= 1e-15);
    }

    #[test]
    fn scaled_linear_interpolates_in_sqrt_space() {
        let s = make_schedule(3, ScheduleKind::ScaledLinear, 0.01, 0.09).unwrap();
        assert!((s.beta(1) - 0.01).abs() <= 1e-15);
        assert!((s.beta(3) - 0.09).abs() <= 1e-15);
        let mid = (0.1 + 0.3) / 2.0;
        assert!((s.beta(2) - mid * mid).abs() <= 1e-15);
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        assert!(make_schedule(0, ScheduleKind::Linear, 0.1, 0.2).is_err());
        assert!(make_schedule(10, ScheduleKind::Linear, 0.0, 0.2).is_err());
        assert!(make_schedule(10, ScheduleKind::Linear, 0.3, 0.2).is_err());
        assert!(make_schedule(10, ScheduleKind::Linear, 0.3, 1.0).is_err());
    }

    #[test]
    fn q_sample_moments_match_schedule() {
        let s = NoiseSchedule::default_linear();
        let x0 = Tensor2::filled(1, 1, 2.0);
        let t = 400;
        let mut rng = SeedStream::new(3);
        let draws = 20_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..draws {
            let eps = Tensor2::from_fn(1, 1, |_, _| rng.normal());
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            sum += xt.get(0, 0);
            sq += xt.get(0, 0) * xt.get(0, 0);
        }
        let mean = sum / draws as f64;
        let var = sq / draws as f64 - mean * mean;
        let want_mean = s.alpha_bar(t).sqrt() * 2.0;
        let want_var = 1.0 - s.alpha_bar(t);
        assert!((mean - want_mean).abs() < 0.02, "mean {mean} vs {want_mean}");
        assert!((var - want_var).abs() / want_var < 0.05, "var {var} vs {want_var}");
    }

    #[test]
    fn q_sample_validates_inputs() {
        let s = make_schedule(10, ScheduleKind::Linear, 0.01, 0.02).unwrap();
        let x = Tensor2::zeros(2, 2);
        assert!(q_sample(&x, 0, &x, &s).is_err());
        assert!(q_sample(&x, 11, &x, &s).is_err());
        assert!(q_sample(&x, 5, &Tensor2::zeros(1, 2), &s).is_err());
    }

    #[test]
    fn cfg_interpolates_and_extrapolates() {
        let u = Tensor2::filled(1, 3, 1.0);
        let c = Tensor2::filled(1, 3, 3.0);
        assert_eq!(cfg_score(&u, &c, 0.0).unwrap().data(), u.data());
        assert_eq!(cfg_score(&u, &c, 1.0).unwrap().data(), c.data());
        let g = cfg_score(&u, &c, 5.0).unwrap();
        assert!(g.data().iter().all(|&v| (v - 11.0).abs() <= 1e-12));
    }

    #[test]
    fn guided_combine_is_affine_in_each_weight() {
        let mut rng = SeedStream::new(4);
        let u = Tensor2::randn(2, 3, 1.0, &mut rng);
        let a = Tensor2::randn(2, 3, 1.0, &mut rng);
        let b = Tensor2::randn(2, 3, 1.0, &mut rng);
        let w = 1.3;
        let g1 = guided_combine(&u, &[(w, &a), (0.4, &b)]).unwrap();
        let g2 = guided_combine(&u, &[(2.0 * w, &a), (0.4, &b)]).unwrap();
        let diff = g2.sub(&g1).unwrap();
        let want = a.sub(&u).unwrap().scale(w);
        assert!(diff.sub(&want).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn single_term_combine_is_cfg() {
        let mut rng = SeedStream::new(5);
        let u = Tensor2::randn(2, 3, 1.0, &mut rng);
        let c = Tensor2::randn(2, 3, 1.0, &mut rng);
        let a = cfg_score(&u, &c, 2.5).unwrap();
        let b = guided_combine(&u, &[(2.5, &c)]).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
