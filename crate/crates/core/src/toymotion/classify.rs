//! Analytic oracle classifiers, one detector per concept kind.
//!
//! Every detector reduces its channel to a scalar statistic and squashes it
//! through a sigmoid centred at half the weakest in-domain signal (magnitude
//! 0.5), so noise-free generated motions always land on the correct side of
//! 0.5 with margin. Thresholds are calibrated against the generator constants
//! in the parent module; `calibration` tests below enforce the contract.

use super::{
    BounceMode, ConceptKind, ConceptToken, DirectionMode, LimbMode, MotionSequence, AMP_DOWN,
    AMP_HOP, AMP_RAISE, AMP_WAVE, CH_BOUNCE, CH_HEADING, CH_LIMB_L, CH_LIMB_R, CH_POS_X, CH_POS_Y,
    OMEGA_HOP, OMEGA_WAVE, SPEED, TURN_RATE,
};

// Velocity detector: least-squares slope of a position channel.
const THRESH_VEL: f64 = SPEED * 0.5 / 2.0;
const SHARP_VEL: f64 = THRESH_VEL / 3.0;

// Turn detector: |heading slope| × (L−1), minimum at magnitude 0.5, L = 40.
const THRESH_TURN: f64 = TURN_RATE * 0.5 * 39.0 / 2.0;
const SHARP_TURN: f64 = THRESH_TURN / 4.0;

// Held-limb detectors: mean over the second half of the clip.
const THRESH_RAISE: f64 = AMP_RAISE * 0.5 / 2.0;
const SHARP_RAISE: f64 = 0.05;
const THRESH_DOWN: f64 = AMP_DOWN * 0.5 / 2.0;
const SHARP_DOWN: f64 = 0.04;

// Wave detector: oscillation amplitude of the differenced channel at the wave
// frequency; differencing suppresses the raise/down ramps.
const WAVE_DIFF_GAIN: f64 = 1.0; // 2·sin(ω/2) applied below
const THRESH_WAVE: f64 = AMP_WAVE * 0.5 * WAVE_DIFF_GAIN / 2.0;
const SHARP_WAVE: f64 = THRESH_WAVE / 3.0;

// Hop detector: mean-removed oscillation amplitude at the hop frequency; the
// hop waveform a·(1−cos)/2 carries a cosine of amplitude a/2.
const THRESH_HOP: f64 = AMP_HOP * 0.5 / 2.0 / 2.0;
const SHARP_HOP: f64 = THRESH_HOP / 3.0;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Least-squares slope of `xs` against the frame index.
fn slope(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let t_mean = (n - 1.0) / 2.0;
    let x_mean = xs.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, &x) in xs.iter().enumerate() {
        let dt = t as f64 - t_mean;
        num += dt * (x - x_mean);
        den += dt * dt;
    }
    num / den
}

/// Amplitude of the mean-removed signal at angular frequency `omega`
/// (single-bin discrete Fourier projection).
fn oscillation_amplitude(xs: &[f64], omega: f64) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let mut re = 0.0;
    let mut im = 0.0;
    for (t, &x) in xs.iter().enumerate() {
        let a = omega * t as f64;
        re += (x - mean) * a.cos();
        im += (x - mean) * a.sin();
    }
    2.0 / n * (re * re + im * im).sqrt()
}

fn second_half_mean(xs: &[f64]) -> f64 {
    let half = &xs[xs.len() / 2..];
    half.iter().sum::<f64>() / half.len() as f64
}

fn diff(xs: &[f64]) -> Vec<f64> {
    xs.windows(2).map(|w| w[1] - w[0]).collect()
}

/// Net turn over the clip, from the heading channel's regression slope.
fn net_turn(m: &MotionSequence) -> f64 {
    let h = m.channel(CH_HEADING);
    slope(&h) * (m.len() - 1) as f64
}

fn straight_score(m: &MotionSequence, channel: usize, sign: f64) -> f64 {
    let v = sign * slope(&m.channel(channel));
    let moving = sigmoid((v - THRESH_VEL) / SHARP_VEL);
    let not_turning = sigmoid((THRESH_TURN - net_turn(m).abs()) / SHARP_TURN);
    moving * not_turning
}

fn limb_score(m: &MotionSequence, channel: usize, mode: LimbMode) -> f64 {
    let xs = m.channel(channel);
    match mode {
        LimbMode::Raise => sigmoid((second_half_mean(&xs) - THRESH_RAISE) / SHARP_RAISE),
        LimbMode::Down => sigmoid((-second_half_mean(&xs) - THRESH_DOWN) / SHARP_DOWN),
        LimbMode::Wave => {
            let amp = oscillation_amplitude(&diff(&xs), OMEGA_WAVE);
            let signal = amp / (2.0 * (OMEGA_WAVE / 2.0).sin());
            sigmoid((signal - THRESH_WAVE) / SHARP_WAVE)
        }
    }
}

fn hop_score(m: &MotionSequence) -> f64 {
    let amp = oscillation_amplitude(&m.channel(CH_BOUNCE), OMEGA_HOP);
    sigmoid((amp - THRESH_HOP) / SHARP_HOP)
}

/// Scores how strongly `m` exhibits the behaviour of `token.kind`, in [0, 1];
/// ≥ 0.5 reads as "present". The probe's magnitude is ignored: detection is
/// about the behaviour's presence, not its strength.
pub fn concept_classifier(m: &MotionSequence, token: &ConceptToken) -> f64 {
    match token.kind {
        ConceptKind::Direction(DirectionMode::PlusX) => straight_score(m, CH_POS_X, 1.0),
        ConceptKind::Direction(DirectionMode::MinusX) => straight_score(m, CH_POS_X, -1.0),
        ConceptKind::Direction(DirectionMode::PlusY) => straight_score(m, CH_POS_Y, 1.0),
        ConceptKind::Direction(DirectionMode::MinusY) => straight_score(m, CH_POS_Y, -1.0),
        ConceptKind::Direction(DirectionMode::Circle) => {
            sigmoid((net_turn(m).abs() - THRESH_TURN) / SHARP_TURN)
        }
        ConceptKind::LeftLimb(mode) => limb_score(m, CH_LIMB_L, mode),
        ConceptKind::RightLimb(mode) => limb_score(m, CH_LIMB_R, mode),
        ConceptKind::Bounce(BounceMode::Hop) => hop_score(m),
        ConceptKind::Bounce(BounceMode::None) => 1.0 - hop_score(m),
    }
}

#[cfg(test)]
mod tests {
    use super::super::{synthesize_motion, ConceptDescription, Family, GeneratorConfig};
    use super::*;
    use crate::rng::SeedStream;

    fn probe(kind: ConceptKind) -> ConceptToken {
        ConceptToken::unit(kind)
    }

    fn synth(text: &str, len: usize, noise: f64, seed: u64) -> MotionSequence {
        synthesize_motion(&ConceptDescription::parse(text).unwrap(), len, noise, seed).unwrap()
    }

    #[test]
    fn direction_scores_separate_cleanly() {
        let m = synth("direction:+x", 64, 0.0, 3);
        assert!(concept_classifier(&m, &probe(ConceptKind::Direction(DirectionMode::PlusX))) >= 0.9);
        assert!(
            concept_classifier(&m, &probe(ConceptKind::Direction(DirectionMode::MinusX))) <= 0.1
        );
        assert!(
            concept_classifier(&m, &probe(ConceptKind::Direction(DirectionMode::Circle))) <= 0.1
        );
    }

    #[test]
    fn constant_motion_has_no_wave() {
        let m = synth("bounce:none", 64, 0.0, 4);
        assert!(concept_classifier(&m, &probe(ConceptKind::LeftLimb(LimbMode::Wave))) <= 0.1);
        assert!(concept_classifier(&m, &probe(ConceptKind::Bounce(BounceMode::None))) >= 0.9);
    }

    #[test]
    fn circle_does_not_masquerade_as_straight_travel() {
        for seed in 0..20 {
            let m = synth("direction:circle", 80, 0.0, seed);
            for mode in [
                DirectionMode::PlusX,
                DirectionMode::MinusX,
                DirectionMode::PlusY,
                DirectionMode::MinusY,
            ] {
                let s = concept_classifier(&m, &probe(ConceptKind::Direction(mode)));
                assert!(s < 0.5, "circle seed {seed} scored {s} on {mode:?}");
            }
            assert!(
                concept_classifier(&m, &probe(ConceptKind::Direction(DirectionMode::Circle)))
                    >= 0.9
            );
        }
    }

    /// Random noise-free generator output must classify perfectly on every
    /// probe; at noise 0.1 at least 95% of verdicts must hold. This is the
    /// calibration contract the rest of the evaluation stack leans on.
    #[test]
    fn calibration_on_generated_corpus() {
        let cfg = GeneratorConfig {
            count: 1000,
            min_len: 40,
            max_len: 196,
            noise_level: 0.0,
            seed: 1234,
            family_weights: [0.85, 0.6, 0.6, 0.5],
        };
        let clean = super::super::generate_dataset(&cfg).unwrap();
        let mut clean_errors = 0usize;
        let mut checks = 0usize;
        for rec in &clean.records {
            for kind in ConceptKind::all() {
                let present = rec.desc.implies(kind);
                let score = concept_classifier(&rec.motion, &probe(kind));
                checks += 1;
                if (score >= 0.5) != present {
                    clean_errors += 1;
                }
            }
        }
        assert_eq!(clean_errors, 0, "noise-free calibration failed {clean_errors}/{checks}");

        let noisy_cfg = GeneratorConfig { noise_level: 0.1, seed: 4321, ..cfg };
        let noisy = super::super::generate_dataset(&noisy_cfg).unwrap();
        let mut noisy_errors = 0usize;
        let mut noisy_checks = 0usize;
        for rec in &noisy.records {
            for kind in ConceptKind::all() {
                let present = rec.desc.implies(kind);
                let score = concept_classifier(&rec.motion, &probe(kind));
                noisy_checks += 1;
                if (score >= 0.5) != present {
                    noisy_errors += 1;
                }
            }
        }
        let accuracy = 1.0 - noisy_errors as f64 / noisy_checks as f64;
        assert!(accuracy >= 0.95, "noisy calibration accuracy {accuracy}");
    }

    #[test]
    fn every_family_detects_its_own_weakest_signal() {
        // Magnitude 0.5 is the hardest in-domain case; noise-free scores must
        // still clear 0.5 comfortably.
        let cases = [
            ("direction:-y@0.5", ConceptKind::Direction(DirectionMode::MinusY)),
            ("direction:circle@0.5", ConceptKind::Direction(DirectionMode::Circle)),
            ("left-limb:raise@0.5", ConceptKind::LeftLimb(LimbMode::Raise)),
            ("left-limb:down@0.5", ConceptKind::LeftLimb(LimbMode::Down)),
            ("right-limb:wave@0.5", ConceptKind::RightLimb(LimbMode::Wave)),
            ("bounce:hop@0.5", ConceptKind::Bounce(BounceMode::Hop)),
        ];
        for (text, kind) in cases {
            for seed in 0..10 {
                let m = synth(text, 40, 0.0, 100 + seed);
                let s = concept_classifier(&m, &probe(kind));
                assert!(s >= 0.7, "{text} seed {seed} scored {s}");
            }
        }
    }

    #[test]
    fn scores_stay_in_unit_interval() {
        let mut rng = SeedStream::new(77);
        for _ in 0..20 {
            let seed = rng.next_u64();
            let m = synth("direction:circle@1.5,left-limb:wave@1.5,bounce:hop@1.5", 120, 0.2, seed);
            for kind in ConceptKind::all() {
                let s = concept_classifier(&m, &probe(kind));
                assert!((0.0..=1.0).contains(&s), "score {s} out of range");
            }
        }
    }

    #[test]
    fn probes_ignore_other_families() {
        let m = synth("direction:+x,right-limb:down,bounce:hop", 90, 0.0, 8);
        assert!(concept_classifier(&m, &probe(ConceptKind::RightLimb(LimbMode::Down))) >= 0.9);
        assert!(concept_classifier(&m, &probe(ConceptKind::LeftLimb(LimbMode::Down))) <= 0.1);
        assert!(concept_classifier(&m, &probe(ConceptKind::Bounce(BounceMode::Hop))) >= 0.9);
        let _ = Family::Direction;
    }
}
