//! Dataset generation and the versioned binary container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "MOTDSET1" | version u32 | d_m u32 | frame_rate f32 | count u64
//! per record: length u32 | frames length×d_m f32 row-major
//!             | token count u8 | per token: family u8, mode u8, magnitude f32
//! ```
//!
//! A human-readable `<path>.idx` sidecar lists one description per line.

use super::{
    synthesize_motion, BounceMode, ConceptDescription, ConceptKind, ConceptToken, DirectionMode,
    LimbMode, MotionSequence, D_M, FRAME_RATE, MAX_LEN, MIN_LEN,
};
use crate::error::{Error, Result};
use crate::numerics::Tensor2;
use crate::rng::SeedStream;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"MOTDSET1";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct GeneratorConfig {
    pub count: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub noise_level: f64,
    pub seed: u64,
    /// Inclusion probability per family: direction, left limb, right limb,
    /// bounce. A draw that selects no family falls back to `bounce:none`.
    pub family_weights: [f64; 4],
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            count: 1000,
            min_len: 40,
            max_len: 112,
            noise_level: 0.05,
            seed: 0,
            family_weights: [0.85, 0.6, 0.6, 0.5],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub motion: MotionSequence,
    pub desc: ConceptDescription,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub frame_rate: f64,
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn sample_description(rng: &mut SeedStream, weights: &[f64; 4]) -> ConceptDescription {
    let mut tokens = Vec::new();
    let direction_modes = [
        DirectionMode::PlusX,
        DirectionMode::MinusX,
        DirectionMode::PlusY,
        DirectionMode::MinusY,
        DirectionMode::Circle,
    ];
    let limb_modes = [LimbMode::Raise, LimbMode::Wave, LimbMode::Down];
    let magnitude = |rng: &mut SeedStream| rng.uniform_in(0.5, 1.5) as f32 as f64;
    if rng.chance(weights[0]) {
        let mode = direction_modes[rng.below(direction_modes.len())];
        tokens.push(ConceptToken::new(ConceptKind::Direction(mode), magnitude(rng)).unwrap());
    }
    if rng.chance(weights[1]) {
        let mode = limb_modes[rng.below(limb_modes.len())];
        tokens.push(ConceptToken::new(ConceptKind::LeftLimb(mode), magnitude(rng)).unwrap());
    }
    if rng.chance(weights[2]) {
        let mode = limb_modes[rng.below(limb_modes.len())];
        tokens.push(ConceptToken::new(ConceptKind::RightLimb(mode), magnitude(rng)).unwrap());
    }
    if rng.chance(weights[3]) {
        let mode = if rng.chance(0.7) { BounceMode::Hop } else { BounceMode::None };
        tokens.push(ConceptToken::new(ConceptKind::Bounce(mode), magnitude(rng)).unwrap());
    }
    if tokens.is_empty() {
        tokens.push(ConceptToken::unit(ConceptKind::Bounce(BounceMode::None)));
    }
    ConceptDescription::new(tokens).expect("sampled families are unique")
}

/// Generates `config.count` (motion, description) pairs in memory.
pub fn generate_dataset(config: &GeneratorConfig) -> Result<Dataset> {
    if config.min_len < MIN_LEN || config.max_len > MAX_LEN || config.min_len > config.max_len {
        return Err(Error::invalid(format!(
            "length range [{}, {}] outside [{MIN_LEN}, {MAX_LEN}]",
            config.min_len, config.max_len
        )));
    }
    for &w in &config.family_weights {
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::invalid(format!("family weight {w} outside [0, 1]")));
        }
    }
    let root = SeedStream::new(config.seed);
    let mut records = Vec::with_capacity(config.count);
    for i in 0..config.count {
        let mut rec_rng = root.derive_idx(i as u64);
        let length =
            config.min_len + rec_rng.below(config.max_len - config.min_len + 1);
        let desc = sample_description(&mut rec_rng, &config.family_weights);
        let motion_seed = rec_rng.next_u64();
        let motion = synthesize_motion(&desc, length, config.noise_level, motion_seed)?;
        records.push(DatasetRecord { motion, desc });
    }
    Ok(Dataset { frame_rate: FRAME_RATE, records })
}

/// Generates and writes a dataset in one step.
pub fn make_dataset(config: &GeneratorConfig, out: &Path) -> Result<Dataset> {
    let ds = generate_dataset(config)?;
    write_dataset(&ds, out)?;
    Ok(ds)
}

fn family_code(kind: ConceptKind) -> (u8, u8) {
    match kind {
        ConceptKind::Direction(m) => (0, m as u8),
        ConceptKind::LeftLimb(m) => (1, m as u8),
        ConceptKind::RightLimb(m) => (2, m as u8),
        ConceptKind::Bounce(m) => (3, m as u8),
    }
}

fn decode_kind(family: u8, mode: u8) -> Result<ConceptKind> {
    let bad = || Error::Format(format!("invalid token code {family}/{mode}"));
    Ok(match family {
        0 => ConceptKind::Direction(match mode {
            0 => DirectionMode::PlusX,
            1 => DirectionMode::MinusX,
            2 => DirectionMode::PlusY,
            3 => DirectionMode::MinusY,
            4 => DirectionMode::Circle,
            _ => return Err(bad()),
        }),
        1 | 2 => {
            let m = match mode {
                0 => LimbMode::Raise,
                1 => LimbMode::Wave,
                2 => LimbMode::Down,
                _ => return Err(bad()),
            };
            if family == 1 {
                ConceptKind::LeftLimb(m)
            } else {
                ConceptKind::RightLimb(m)
            }
        }
        3 => ConceptKind::Bounce(match mode {
            0 => BounceMode::Hop,
            1 => BounceMode::None,
            _ => return Err(bad()),
        }),
        _ => return Err(bad()),
    })
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(D_M as u32).to_le_bytes())?;
    w.write_all(&(ds.frame_rate as f32).to_le_bytes())?;
    w.write_all(&(ds.records.len() as u64).to_le_bytes())?;
    for rec in &ds.records {
        w.write_all(&(rec.motion.len() as u32).to_le_bytes())?;
        for &v in rec.motion.frames().data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        let tokens = rec.desc.tokens();
        w.write_all(&[tokens.len() as u8])?;
        for t in tokens {
            let (fam, mode) = family_code(t.kind);
            w.write_all(&[fam, mode])?;
            w.write_all(&(t.magnitude as f32).to_le_bytes())?;
        }
    }
    w.flush()?;

    let idx_path = sidecar_path(path);
    let mut idx = BufWriter::new(File::create(idx_path)?);
    for (i, rec) in ds.records.iter().enumerate() {
        writeln!(idx, "{i}\tL={}\t{}", rec.motion.len(), rec.desc)?;
    }
    idx.flush()?;
    Ok(())
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".idx");
    os.into()
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let magic: [u8; 8] = read_exact(&mut r)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a motion dataset file".into()));
    }
    let version = u32::from_le_bytes(read_exact(&mut r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let d_m = u32::from_le_bytes(read_exact(&mut r)?) as usize;
    if d_m != D_M {
        return Err(Error::Format(format!("dataset has {d_m} channels, expected {D_M}")));
    }
    let frame_rate = f32::from_le_bytes(read_exact(&mut r)?) as f64;
    let count = u64::from_le_bytes(read_exact(&mut r)?) as usize;
    let mut records = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let length = u32::from_le_bytes(read_exact(&mut r)?) as usize;
        if !(MIN_LEN..=MAX_LEN).contains(&length) {
            return Err(Error::Format(format!("record length {length} out of range")));
        }
        let mut frames = Tensor2::zeros(length, D_M);
        for v in frames.data_mut() {
            *v = f32::from_le_bytes(read_exact(&mut r)?) as f64;
        }
        let n_tokens = read_exact::<1>(&mut r)?[0] as usize;
        let mut tokens = Vec::with_capacity(n_tokens);
        for _ in 0..n_tokens {
            let [fam, mode] = read_exact::<2>(&mut r)?;
            let magnitude = f32::from_le_bytes(read_exact(&mut r)?) as f64;
            tokens.push(ConceptToken::new(decode_kind(fam, mode)?, magnitude)?);
        }
        records.push(DatasetRecord {
            motion: MotionSequence::new(frames, frame_rate)?,
            desc: ConceptDescription::new(tokens)?,
        });
    }
    let mut trailer = [0u8; 1];
    if r.read(&mut trailer)? != 0 {
        return Err(Error::Format("trailing bytes after last record".into()));
    }
    Ok(Dataset { frame_rate, records })
}
