//! Ground-truth motion generator.

use super::{
    wrap_angle, BounceMode, ConceptDescription, ConceptKind, DirectionMode, LimbMode,
    MotionSequence, AMP_DOWN, AMP_HOP, AMP_RAISE, AMP_WAVE, CH_BOUNCE, CH_HEADING, CH_LIMB_L,
    CH_LIMB_R, CH_POS_X, CH_POS_Y, D_M, FRAME_RATE, MAX_LEN, MIN_LEN, NOISE_SCALE, OMEGA_HOP,
    OMEGA_WAVE, RAMP_FRAMES, SPEED, TURN_RATE,
};
use crate::error::{Error, Result};
use crate::numerics::Tensor2;
use crate::rng::SeedStream;
use std::f64::consts::PI;

/// Margin kept between any heading value and the ±π wrap point so that noise
/// never flips a heading across the discontinuity.
const HEADING_MARGIN: f64 = 0.2;

/// Generates a motion realizing `desc`. Randomness (start position, phases,
/// noise) comes from per-family streams of `seed`, so editing one family's
/// token never perturbs another family's channels.
pub fn synthesize_motion(
    desc: &ConceptDescription,
    length: usize,
    noise_level: f64,
    seed: u64,
) -> Result<MotionSequence> {
    if !(MIN_LEN..=MAX_LEN).contains(&length) {
        return Err(Error::invalid(format!("length {length} outside [{MIN_LEN}, {MAX_LEN}]")));
    }
    if !(0.0..=0.2).contains(&noise_level) {
        return Err(Error::invalid(format!("noise level {noise_level} outside [0, 0.2]")));
    }
    if desc.is_empty() {
        return Err(Error::invalid("cannot synthesize from an empty description"));
    }

    let root = SeedStream::new(seed);
    let mut frames = Tensor2::zeros(length, D_M);

    write_direction(desc, length, &root, &mut frames);
    write_limb(desc, length, &root, &mut frames, CH_LIMB_L);
    write_limb(desc, length, &root, &mut frames, CH_LIMB_R);
    write_bounce(desc, length, &root, &mut frames);

    if noise_level > 0.0 {
        let mut noise = root.derive("noise");
        for ch in 0..D_M {
            let sigma = noise_level * NOISE_SCALE[ch];
            for t in 0..length {
                let v = frames.get(t, ch) + sigma * noise.normal();
                frames.set(t, ch, v);
            }
        }
        for t in 0..length {
            frames.set(t, CH_HEADING, wrap_angle(frames.get(t, CH_HEADING)));
        }
    }

    // Quantize to 32-bit so dataset files round-trip exactly.
    for v in frames.data_mut() {
        *v = *v as f32 as f64;
    }
    MotionSequence::new(frames, FRAME_RATE)
}

fn write_direction(desc: &ConceptDescription, length: usize, root: &SeedStream, out: &mut Tensor2) {
    let mut rng = root.derive("direction");
    let x0 = rng.uniform_in(-1.0, 1.0);
    let y0 = rng.uniform_in(-1.0, 1.0);
    let token = desc.tokens().iter().find(|t| matches!(t.kind, ConceptKind::Direction(_)));
    match token.map(|t| (t.kind, t.magnitude)) {
        None => {
            let heading = rng.uniform_in(-0.3, 0.3);
            for t in 0..length {
                out.set(t, CH_POS_X, x0);
                out.set(t, CH_POS_Y, y0);
                out.set(t, CH_HEADING, heading);
            }
        }
        Some((ConceptKind::Direction(DirectionMode::Circle), mag)) => {
            let turn_rate = TURN_RATE * mag;
            let total_turn = turn_rate * (length - 1) as f64;
            let spin = if rng.chance(0.5) { 1.0 } else { -1.0 };
            let h0 = if spin > 0.0 {
                rng.uniform_in(-PI + HEADING_MARGIN, PI - HEADING_MARGIN - total_turn)
            } else {
                rng.uniform_in(-PI + HEADING_MARGIN + total_turn, PI - HEADING_MARGIN)
            };
            let speed = SPEED * mag;
            let (mut x, mut y) = (x0, y0);
            for t in 0..length {
                let heading = h0 + spin * turn_rate * t as f64;
                out.set(t, CH_POS_X, x);
                out.set(t, CH_POS_Y, y);
                out.set(t, CH_HEADING, heading);
                x += speed * heading.cos();
                y += speed * heading.sin();
            }
        }
        Some((ConceptKind::Direction(mode), mag)) => {
            // Travel axes are exact so that cross-axis classifiers see zero
            // signal; the heading channel is a nominal facing kept away from
            // the ±π wrap.
            let (dx, dy, heading) = match mode {
                DirectionMode::PlusX => (1.0, 0.0, 0.0),
                DirectionMode::MinusX => (-1.0, 0.0, 2.8),
                DirectionMode::PlusY => (0.0, 1.0, PI / 2.0),
                DirectionMode::MinusY => (0.0, -1.0, -PI / 2.0),
                DirectionMode::Circle => unreachable!(),
            };
            let speed = SPEED * mag;
            for t in 0..length {
                out.set(t, CH_POS_X, x0 + dx * speed * t as f64);
                out.set(t, CH_POS_Y, y0 + dy * speed * t as f64);
                out.set(t, CH_HEADING, heading);
            }
        }
        Some(_) => unreachable!(),
    }
}

fn write_limb(
    desc: &ConceptDescription,
    length: usize,
    root: &SeedStream,
    out: &mut Tensor2,
    channel: usize,
) {
    let label = if channel == CH_LIMB_L { "limb-left" } else { "limb-right" };
    let mut rng = root.derive(label);
    let phase = rng.uniform_in(0.0, 2.0 * PI);
    let token = desc.tokens().iter().find(|t| match t.kind {
        ConceptKind::LeftLimb(_) => channel == CH_LIMB_L,
        ConceptKind::RightLimb(_) => channel == CH_LIMB_R,
        _ => false,
    });
    let Some(token) = token else {
        return; // neutral limb stays at zero
    };
    let mode = match token.kind {
        ConceptKind::LeftLimb(m) | ConceptKind::RightLimb(m) => m,
        _ => unreachable!(),
    };
    let mag = token.magnitude;
    for t in 0..length {
        let v = match mode {
            LimbMode::Raise => AMP_RAISE * mag * ramp(t),
            LimbMode::Down => -AMP_DOWN * mag * ramp(t),
            LimbMode::Wave => AMP_WAVE * mag * (OMEGA_WAVE * t as f64 + phase).sin(),
        };
        out.set(t, channel, v);
    }
}

fn ramp(t: usize) -> f64 {
    (t as f64 / RAMP_FRAMES as f64).min(1.0)
}

fn write_bounce(desc: &ConceptDescription, length: usize, root: &SeedStream, out: &mut Tensor2) {
    let mut rng = root.derive("bounce");
    let phase = rng.uniform_in(0.0, 2.0 * PI);
    let hop = desc
        .tokens()
        .iter()
        .find(|t| matches!(t.kind, ConceptKind::Bounce(BounceMode::Hop)));
    let Some(token) = hop else {
        return; // bounce:none and absent bounce both stay at zero
    };
    let amp = AMP_HOP * token.magnitude;
    for t in 0..length {
        let v = amp * (1.0 - (OMEGA_HOP * t as f64 + phase).cos()) / 2.0;
        out.set(t, CH_BOUNCE, v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desc(text: &str) -> ConceptDescription {
        ConceptDescription::parse(text).unwrap()
    }

    #[test]
    fn plus_x_walks_with_constant_step() {
        let m = synthesize_motion(&desc("direction:+x@1.0"), 64, 0.0, 9).unwrap();
        let xs = m.channel(CH_POS_X);
        let ys = m.channel(CH_POS_Y);
        for t in 1..64 {
            let step = xs[t] - xs[t - 1];
            assert!(step > 0.0, "x not strictly increasing at {t}");
            assert!((step - SPEED).abs() <= 1e-5, "step {step} drifted");
            assert!((ys[t] - ys[0]).abs() <= 1e-9, "y moved");
        }
    }

    #[test]
    fn wave_is_a_pure_sinusoid_and_leaves_position_neutral() {
        let m = synthesize_motion(&desc("left-limb:wave"), 64, 0.0, 10).unwrap();
        let limb = m.channel(CH_LIMB_L);
        let max = limb.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
        assert!((max - AMP_WAVE).abs() <= 0.05, "amplitude {max}");
        // Three samples determine phase and amplitude; the rest must follow.
        let xs = m.channel(CH_POS_X);
        assert!(xs.iter().all(|&x| (x - xs[0]).abs() <= 1e-9));
        let mean = limb.iter().sum::<f64>() / 64.0;
        assert!(mean.abs() <= 0.1, "wave mean {mean}");
    }

    #[test]
    fn neutral_description_is_constant_everywhere() {
        let m = synthesize_motion(&desc("bounce:none"), 48, 0.0, 11).unwrap();
        for ch in 0..D_M {
            let v = m.channel(ch);
            assert!(v.iter().all(|&x| (x - v[0]).abs() <= 1e-12), "channel {ch} moved");
        }
    }

    #[test]
    fn same_seed_reproduces_bit_identically() {
        let d = desc("direction:circle@1.3,right-limb:raise,bounce:hop");
        let a = synthesize_motion(&d, 77, 0.1, 42).unwrap();
        let b = synthesize_motion(&d, 77, 0.1, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn families_write_disjoint_channels() {
        // Swapping the limb token must leave every non-limb channel untouched.
        let a = synthesize_motion(&desc("direction:+y,left-limb:raise"), 60, 0.0, 5).unwrap();
        let b = synthesize_motion(&desc("direction:+y,left-limb:wave"), 60, 0.0, 5).unwrap();
        for ch in [CH_POS_X, CH_POS_Y, CH_HEADING, CH_LIMB_R, CH_BOUNCE] {
            assert_eq!(a.channel(ch), b.channel(ch), "channel {ch} leaked");
        }
        assert_ne!(a.channel(CH_LIMB_L), b.channel(CH_LIMB_L));
        // And swapping the direction token must leave limb phases alone.
        let c = synthesize_motion(&desc("direction:circle,left-limb:raise"), 60, 0.0, 5).unwrap();
        assert_eq!(a.channel(CH_LIMB_L), c.channel(CH_LIMB_L));
    }

    #[test]
    fn circle_heading_never_wraps() {
        for seed in 0..50 {
            let m = synthesize_motion(&desc("direction:circle@1.5"), 196, 0.2, seed).unwrap();
            let h = m.channel(CH_HEADING);
            for t in 1..h.len() {
                assert!((h[t] - h[t - 1]).abs() < 1.0, "wrap jump at seed {seed} frame {t}");
            }
        }
    }

    #[test]
    fn invalid_requests_are_rejected() {
        let d = desc("direction:+x");
        assert!(synthesize_motion(&d, 20, 0.0, 1).is_err());
        assert!(synthesize_motion(&d, 64, 0.5, 1).is_err());
        assert!(synthesize_motion(&ConceptDescription::empty(), 64, 0.0, 1).is_err());
    }
}
