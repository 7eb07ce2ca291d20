//! Binary checkpoint format: header, config snapshot, named parameter
//! tensors in canonical order, training step, and RNG state. Tensor bytes
//! are exact f64 bits, so a loaded model reproduces outputs bit-identically.

use super::config::ScheduleConfig;
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::Substrate;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor2};
use crate::rng::RngState;
use crate::vae::{MotionVae, VaeConfig};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"MOTVCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Vae,
    LatentDenoiser,
    SequenceDenoiser,
}

impl ModelKind {
    fn code(self) -> u8 {
        match self {
            ModelKind::Vae => 1,
            ModelKind::LatentDenoiser => 2,
            ModelKind::SequenceDenoiser => 3,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(ModelKind::Vae),
            2 => Ok(ModelKind::LatentDenoiser),
            3 => Ok(ModelKind::SequenceDenoiser),
            other => Err(Error::Format(format!("unknown model kind {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Vae => "vae",
            ModelKind::LatentDenoiser => "latent-denoiser",
            ModelKind::SequenceDenoiser => "sequence-denoiser",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub step: u64,
    pub rng: RngState,
    pub config_toml: String,
    pub tensors: BTreeMap<String, Tensor2>,
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn write_string(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    Ok(w.write_all(s.as_bytes())?)
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 64 << 20 {
        return Err(Error::Format(format!("unreasonable string length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("non-UTF-8 string in checkpoint".into()))
}

impl Checkpoint {
    pub fn from_store(
        kind: ModelKind,
        step: u64,
        rng: RngState,
        config_toml: String,
        store: &ParamStore,
    ) -> Self {
        let mut tensors = BTreeMap::new();
        for id in store.ids() {
            tensors.insert(store.name(id).to_string(), store.value(id).clone());
        }
        Self { kind, step, rng, config_toml, tensors }
    }

    /// Loads every tensor into the store; the store must declare exactly the
    /// checkpoint's tensor names and shapes.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, model declares {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, tensor) in &self.tensors {
            store.load_named(name, tensor.clone())?;
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        write_u32(w, VERSION)?;
        w.write_all(&[self.kind.code()])?;
        write_u64(w, self.step)?;
        write_u64(w, self.rng.seed)?;
        write_u64(w, self.rng.stream)?;
        w.write_all(&self.rng.word_pos.to_le_bytes())?;
        write_string(w, &self.config_toml)?;
        write_u32(w, self.tensors.len() as u32)?;
        for (name, tensor) in &self.tensors {
            write_string(w, name)?;
            write_u32(w, tensor.rows() as u32)?;
            write_u32(w, tensor.cols() as u32)?;
            for &v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut kind = [0u8; 1];
        r.read_exact(&mut kind)?;
        let kind = ModelKind::from_code(kind[0])?;
        let step = read_u64(r)?;
        let seed = read_u64(r)?;
        let stream = read_u64(r)?;
        let mut wp = [0u8; 16];
        r.read_exact(&mut wp)?;
        let rng = RngState { seed, stream, word_pos: u128::from_le_bytes(wp) };
        let config_toml = read_string(r)?;
        let count = read_u32(r)? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = read_string(r)?;
            let rows = read_u32(r)? as usize;
            let cols = read_u32(r)? as usize;
            if rows.saturating_mul(cols) > 256 << 20 {
                return Err(Error::Format(format!("unreasonable tensor {rows}x{cols}")));
            }
            let mut data = vec![0.0f64; rows * cols];
            let mut buf = [0u8; 8];
            for v in &mut data {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            if tensors.insert(name.clone(), Tensor2::from_vec(rows, cols, data)?).is_some() {
                return Err(Error::Format(format!("duplicate tensor {name}")));
            }
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { kind, step, rng, config_toml, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        self.write_to(&mut bytes)?;
        Ok(std::fs::write(path, bytes)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

/// Pipeline metadata saved alongside denoiser weights: substrate, the data
/// normalization the model was trained under, and the noise schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserSnapshot {
    pub config: DenoiserConfig,
    pub substrate: Substrate,
    pub latent_scale: f64,
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
    pub schedule: ScheduleConfig,
}

impl DenoiserSnapshot {
    fn kind(&self) -> ModelKind {
        match self.substrate {
            Substrate::Latent => ModelKind::LatentDenoiser,
            Substrate::Sequence => ModelKind::SequenceDenoiser,
        }
    }
}

pub fn save_vae(path: &Path, vae: &MotionVae, step: u64, rng: RngState) -> Result<()> {
    let config_toml = toml::to_string_pretty(&vae.config)
        .map_err(|e| Error::Format(format!("config snapshot: {e}")))?;
    Checkpoint::from_store(ModelKind::Vae, step, rng, config_toml, &vae.store).save(path)
}

pub fn load_vae(path: &Path) -> Result<(MotionVae, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.kind != ModelKind::Vae {
        return Err(Error::Format(format!("expected a vae checkpoint, got {}", ckpt.kind.name())));
    }
    let config: VaeConfig = toml::from_str(&ckpt.config_toml)
        .map_err(|e| Error::Format(format!("config snapshot: {e}")))?;
    let mut vae = MotionVae::new(config, 0)?;
    ckpt.load_into(&mut vae.store)?;
    Ok((vae, ckpt))
}

pub fn save_denoiser(
    path: &Path,
    den: &Denoiser,
    snapshot: &DenoiserSnapshot,
    step: u64,
    rng: RngState,
) -> Result<()> {
    if snapshot.config != den.config {
        return Err(Error::invalid("snapshot config does not match the model"));
    }
    let config_toml = toml::to_string_pretty(snapshot)
        .map_err(|e| Error::Format(format!("config snapshot: {e}")))?;
    Checkpoint::from_store(snapshot.kind(), step, rng, config_toml, &den.store).save(path)
}

pub fn load_denoiser(path: &Path) -> Result<(Denoiser, DenoiserSnapshot, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.kind == ModelKind::Vae {
        return Err(Error::Format("expected a denoiser checkpoint, got vae".into()));
    }
    let snapshot: DenoiserSnapshot = toml::from_str(&ckpt.config_toml)
        .map_err(|e| Error::Format(format!("config snapshot: {e}")))?;
    if snapshot.kind() != ckpt.kind {
        return Err(Error::Format("substrate tag disagrees with model kind".into()));
    }
    let mut den = Denoiser::new(snapshot.config.clone(), 0)?;
    ckpt.load_into(&mut den.store)?;
    Ok((den, snapshot, ckpt))
}
