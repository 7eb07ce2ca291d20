//! Procedural concept-motion domain: synthesis, oracle classifiers, datasets.
//!
//! A motion is an L×6 channel matrix sampled at a fixed frame rate:
//!
//! | channel | meaning            |
//! |---------|--------------------|
//! | 0       | position x         |
//! | 1       | position y         |
//! | 2       | heading angle, rad |
//! | 3       | left-limb angle    |
//! | 4       | right-limb angle   |
//! | 5       | bounce offset      |
//!
//! Concept families write disjoint channel groups (direction → 0..3, limbs →
//! 3/4, bounce → 5), so the ground truth behind any composed motion is
//! machine-checkable by the analytic classifiers in [`classify`].

mod classify;
mod dataset;
mod synth;

pub use classify::concept_classifier;
pub use dataset::{
    generate_dataset, make_dataset, read_dataset, write_dataset, Dataset, DatasetRecord,
    GeneratorConfig,
};
pub use synth::synthesize_motion;

use crate::error::{Error, Result};
use crate::numerics::Tensor2;
use std::f64::consts::PI;
use std::fmt;

pub const D_M: usize = 6;
pub const MIN_LEN: usize = 40;
pub const MAX_LEN: usize = 196;
pub const FRAME_RATE: f64 = 20.0;

pub const CH_POS_X: usize = 0;
pub const CH_POS_Y: usize = 1;
pub const CH_HEADING: usize = 2;
pub const CH_LIMB_L: usize = 3;
pub const CH_LIMB_R: usize = 4;
pub const CH_BOUNCE: usize = 5;

/// Distinct (family, mode) pairs; the embedding table indexes by this.
pub const NUM_TOKEN_KINDS: usize = 13;

// Shared generator constants; classifier thresholds in `classify` are
// calibrated against these and must move with them.
pub(crate) const SPEED: f64 = 0.01;
pub(crate) const TURN_RATE: f64 = 2.0 * PI / 600.0;
pub(crate) const RAMP_FRAMES: usize = 20;
pub(crate) const AMP_RAISE: f64 = 1.0;
pub(crate) const AMP_DOWN: f64 = 0.8;
pub(crate) const AMP_WAVE: f64 = 0.6;
pub(crate) const AMP_HOP: f64 = 0.25;
pub(crate) const OMEGA_WAVE: f64 = 2.0 * PI / 12.0;
pub(crate) const OMEGA_HOP: f64 = 2.0 * PI / 16.0;
pub(crate) const NOISE_SCALE: [f64; D_M] = [0.3, 0.3, 0.08, 0.25, 0.25, 0.08];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Direction,
    LeftLimb,
    RightLimb,
    Bounce,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Direction => "direction",
            Family::LeftLimb => "left-limb",
            Family::RightLimb => "right-limb",
            Family::Bounce => "bounce",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DirectionMode {
    PlusX,
    MinusX,
    PlusY,
    MinusY,
    Circle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LimbMode {
    Raise,
    Wave,
    Down,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BounceMode {
    Hop,
    None,
}

/// A (family, mode) pair; invalid pairings are unrepresentable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConceptKind {
    Direction(DirectionMode),
    LeftLimb(LimbMode),
    RightLimb(LimbMode),
    Bounce(BounceMode),
}

impl ConceptKind {
    pub fn family(self) -> Family {
        match self {
            ConceptKind::Direction(_) => Family::Direction,
            ConceptKind::LeftLimb(_) => Family::LeftLimb,
            ConceptKind::RightLimb(_) => Family::RightLimb,
            ConceptKind::Bounce(_) => Family::Bounce,
        }
    }

    pub fn mode_name(self) -> &'static str {
        match self {
            ConceptKind::Direction(DirectionMode::PlusX) => "+x",
            ConceptKind::Direction(DirectionMode::MinusX) => "-x",
            ConceptKind::Direction(DirectionMode::PlusY) => "+y",
            ConceptKind::Direction(DirectionMode::MinusY) => "-y",
            ConceptKind::Direction(DirectionMode::Circle) => "circle",
            ConceptKind::LeftLimb(m) | ConceptKind::RightLimb(m) => match m {
                LimbMode::Raise => "raise",
                LimbMode::Wave => "wave",
                LimbMode::Down => "down",
            },
            ConceptKind::Bounce(BounceMode::Hop) => "hop",
            ConceptKind::Bounce(BounceMode::None) => "none",
        }
    }

    /// Stable index into the embedding table, 0..NUM_TOKEN_KINDS.
    pub fn table_index(self) -> usize {
        match self {
            ConceptKind::Direction(DirectionMode::PlusX) => 0,
            ConceptKind::Direction(DirectionMode::MinusX) => 1,
            ConceptKind::Direction(DirectionMode::PlusY) => 2,
            ConceptKind::Direction(DirectionMode::MinusY) => 3,
            ConceptKind::Direction(DirectionMode::Circle) => 4,
            ConceptKind::LeftLimb(LimbMode::Raise) => 5,
            ConceptKind::LeftLimb(LimbMode::Wave) => 6,
            ConceptKind::LeftLimb(LimbMode::Down) => 7,
            ConceptKind::RightLimb(LimbMode::Raise) => 8,
            ConceptKind::RightLimb(LimbMode::Wave) => 9,
            ConceptKind::RightLimb(LimbMode::Down) => 10,
            ConceptKind::Bounce(BounceMode::Hop) => 11,
            ConceptKind::Bounce(BounceMode::None) => 12,
        }
    }

    pub fn all() -> [ConceptKind; NUM_TOKEN_KINDS] {
        [
            ConceptKind::Direction(DirectionMode::PlusX),
            ConceptKind::Direction(DirectionMode::MinusX),
            ConceptKind::Direction(DirectionMode::PlusY),
            ConceptKind::Direction(DirectionMode::MinusY),
            ConceptKind::Direction(DirectionMode::Circle),
            ConceptKind::LeftLimb(LimbMode::Raise),
            ConceptKind::LeftLimb(LimbMode::Wave),
            ConceptKind::LeftLimb(LimbMode::Down),
            ConceptKind::RightLimb(LimbMode::Raise),
            ConceptKind::RightLimb(LimbMode::Wave),
            ConceptKind::RightLimb(LimbMode::Down),
            ConceptKind::Bounce(BounceMode::Hop),
            ConceptKind::Bounce(BounceMode::None),
        ]
    }

    fn parse(family: &str, mode: &str) -> Result<Self> {
        let kind = match family {
            "direction" => ConceptKind::Direction(match mode {
                "+x" => DirectionMode::PlusX,
                "-x" => DirectionMode::MinusX,
                "+y" => DirectionMode::PlusY,
                "-y" => DirectionMode::MinusY,
                "circle" => DirectionMode::Circle,
                _ => return Err(Error::invalid(format!("unknown direction mode '{mode}'"))),
            }),
            "left-limb" | "right-limb" => {
                let m = match mode {
                    "raise" => LimbMode::Raise,
                    "wave" => LimbMode::Wave,
                    "down" => LimbMode::Down,
                    _ => return Err(Error::invalid(format!("unknown limb mode '{mode}'"))),
                };
                if family == "left-limb" {
                    ConceptKind::LeftLimb(m)
                } else {
                    ConceptKind::RightLimb(m)
                }
            }
            "bounce" => ConceptKind::Bounce(match mode {
                "hop" => BounceMode::Hop,
                "none" => BounceMode::None,
                _ => return Err(Error::invalid(format!("unknown bounce mode '{mode}'"))),
            }),
            _ => return Err(Error::invalid(format!("unknown concept family '{family}'"))),
        };
        Ok(kind)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConceptToken {
    pub kind: ConceptKind,
    pub magnitude: f64,
}

impl ConceptToken {
    pub fn new(kind: ConceptKind, magnitude: f64) -> Result<Self> {
        if !(0.5..=1.5).contains(&magnitude) {
            return Err(Error::invalid(format!(
                "magnitude {magnitude} outside [0.5, 1.5] for {}:{}",
                kind.family().name(),
                kind.mode_name()
            )));
        }
        Ok(Self { kind, magnitude })
    }

    pub fn unit(kind: ConceptKind) -> Self {
        Self { kind, magnitude: 1.0 }
    }
}

impl fmt::Display for ConceptToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}@{}", self.kind.family().name(), self.kind.mode_name(), self.magnitude)
    }
}

/// Ordered, family-unique token list. Empty means "unconditional".
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ConceptDescription {
    tokens: Vec<ConceptToken>,
}

impl ConceptDescription {
    pub fn new(tokens: Vec<ConceptToken>) -> Result<Self> {
        if tokens.len() > 4 {
            return Err(Error::invalid(format!("{} tokens exceed the 4-family cap", tokens.len())));
        }
        for (i, a) in tokens.iter().enumerate() {
            for b in tokens.iter().skip(i + 1) {
                if a.kind.family() == b.kind.family() {
                    return Err(Error::invalid(format!(
                        "duplicate family '{}' in description",
                        a.kind.family().name()
                    )));
                }
            }
        }
        Ok(Self { tokens })
    }

    pub fn empty() -> Self {
        Self { tokens: Vec::new() }
    }

    pub fn single(kind: ConceptKind) -> Self {
        Self { tokens: vec![ConceptToken::unit(kind)] }
    }

    pub fn tokens(&self) -> &[ConceptToken] {
        &self.tokens
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token_for(&self, family: Family) -> Option<&ConceptToken> {
        self.tokens.iter().find(|t| t.kind.family() == family)
    }

    /// True when `kind` behaviour is present in motions generated from this
    /// description. An absent bounce family behaves as `bounce:none`.
    pub fn implies(&self, kind: ConceptKind) -> bool {
        match kind {
            ConceptKind::Bounce(BounceMode::None) => {
                !self.tokens.iter().any(|t| t.kind == ConceptKind::Bounce(BounceMode::Hop))
            }
            k => self.tokens.iter().any(|t| t.kind == k),
        }
    }

    /// Parses `family:mode[@magnitude]` items separated by commas.
    /// An empty or all-whitespace string parses to the unconditional
    /// description.
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        if text.is_empty() {
            return Ok(Self::empty());
        }
        let mut tokens = Vec::new();
        for item in text.split(',') {
            let item = item.trim();
            let (head, mag) = match item.split_once('@') {
                Some((h, m)) => {
                    let mag: f64 = m.trim().parse().map_err(|_| {
                        Error::invalid(format!("bad magnitude '{m}' in token '{item}'"))
                    })?;
                    (h, mag)
                }
                None => (item, 1.0),
            };
            let (family, mode) = head
                .split_once(':')
                .ok_or_else(|| Error::invalid(format!("token '{item}' is not family:mode")))?;
            tokens.push(ConceptToken::new(ConceptKind::parse(family.trim(), mode.trim())?, mag)?);
        }
        Self::new(tokens)
    }
}

impl serde::Serialize for ConceptDescription {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for ConceptDescription {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Self::parse(&text).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for ConceptDescription {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for t in &self.tokens {
            if !first {
                write!(f, ",")?;
            }
            write!(f, "{t}")?;
            first = false;
        }
        Ok(())
    }
}

/// Maps any finite angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    // In-range angles pass through unchanged so wrapping is idempotent and
    // serialized motions reload bit-exactly.
    if a > -PI && a <= PI {
        return a;
    }
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    frames: Tensor2,
    frame_rate: f64,
}

impl MotionSequence {
    /// Wraps the heading channel into (−π, π] and validates shape and
    /// finiteness.
    pub fn new(mut frames: Tensor2, frame_rate: f64) -> Result<Self> {
        if frames.cols() != D_M {
            return Err(Error::shape(format!("motion needs {D_M} channels, got {}", frames.cols())));
        }
        let len = frames.rows();
        if !(MIN_LEN..=MAX_LEN).contains(&len) {
            return Err(Error::invalid(format!("length {len} outside [{MIN_LEN}, {MAX_LEN}]")));
        }
        if !(frame_rate > 0.0 && frame_rate.is_finite()) {
            return Err(Error::invalid(format!("frame rate {frame_rate} must be positive")));
        }
        frames.check_finite("motion frames")?;
        for i in 0..len {
            let h = frames.get(i, CH_HEADING);
            frames.set(i, CH_HEADING, wrap_angle(h));
        }
        Ok(Self { frames, frame_rate })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn frames(&self) -> &Tensor2 {
        &self.frames
    }

    pub fn channel(&self, ch: usize) -> Vec<f64> {
        assert!(ch < D_M, "channel {ch} out of range");
        (0..self.len()).map(|i| self.frames.get(i, ch)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn description_parser_round_trips() {
        let d = ConceptDescription::parse("direction:+x@1.25, left-limb:wave, bounce:hop@0.5")
            .unwrap();
        assert_eq!(d.tokens().len(), 3);
        assert_eq!(d.tokens()[0].kind, ConceptKind::Direction(DirectionMode::PlusX));
        assert_eq!(d.tokens()[0].magnitude, 1.25);
        assert_eq!(d.tokens()[1].magnitude, 1.0);
        let text = d.to_string();
        assert_eq!(ConceptDescription::parse(&text).unwrap(), d);
    }

    #[test]
    fn empty_text_is_unconditional() {
        assert!(ConceptDescription::parse("  ").unwrap().is_empty());
    }

    #[test]
    fn duplicate_family_is_rejected() {
        assert!(ConceptDescription::parse("direction:+x,direction:-x").is_err());
    }

    #[test]
    fn bad_tokens_are_rejected() {
        assert!(ConceptDescription::parse("direction:up").is_err());
        assert!(ConceptDescription::parse("arm:wave").is_err());
        assert!(ConceptDescription::parse("direction:+x@9").is_err());
        assert!(ConceptDescription::parse("direction").is_err());
    }

    #[test]
    fn table_indices_are_a_bijection() {
        let mut seen = [false; NUM_TOKEN_KINDS];
        for kind in ConceptKind::all() {
            let idx = kind.table_index();
            assert!(!seen[idx]);
            seen[idx] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn wrap_angle_lands_in_half_open_interval() {
        for &a in &[0.0, PI, -PI, 3.5 * PI, -3.5 * PI, 123.456] {
            let w = wrap_angle(a);
            assert!(w > -PI && w <= PI + 1e-15, "{a} wrapped to {w}");
            assert!(((a - w) / (2.0 * PI)).round() * 2.0 * PI - (a - w) < 1e-9);
        }
    }

    #[test]
    fn motion_validates_length_and_channels() {
        assert!(MotionSequence::new(Tensor2::zeros(10, D_M), FRAME_RATE).is_err());
        assert!(MotionSequence::new(Tensor2::zeros(40, 5), FRAME_RATE).is_err());
        assert!(MotionSequence::new(Tensor2::zeros(40, D_M), FRAME_RATE).is_ok());
    }

    #[test]
    fn implied_kinds_cover_absent_bounce() {
        let d = ConceptDescription::parse("direction:+x").unwrap();
        assert!(d.implies(ConceptKind::Direction(DirectionMode::PlusX)));
        assert!(!d.implies(ConceptKind::Direction(DirectionMode::MinusX)));
        assert!(d.implies(ConceptKind::Bounce(BounceMode::None)));
        let h = ConceptDescription::parse("bounce:hop").unwrap();
        assert!(!h.implies(ConceptKind::Bounce(BounceMode::None)));
    }
}
