//! JSON file format for individual motions (datasets use the binary format
//! in the motion-domain module).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor2;
use crate::toymotion::{ConceptDescription, MotionSequence, D_M};

pub const MOTION_FORMAT: &str = "motion-v1";

/// A single sampled motion with the description it was generated from.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MotionFile {
    format: String,
    desc: String,
    frame_rate: f64,
    frames: Vec<Vec<f64>>,
}

fn frames_to_rows(frames: &Tensor2) -> Vec<Vec<f64>> {
    (0..frames.rows()).map(|i| (0..frames.cols()).map(|j| frames.get(i, j)).collect()).collect()
}

fn rows_to_frames(rows: &[Vec<f64>]) -> Result<Tensor2> {
    if rows.is_empty() {
        return Err(Error::Format("motion has no frames".into()));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != D_M {
            return Err(Error::Format(format!(
                "frame {i} has {} channels, expected {D_M}",
                row.len()
            )));
        }
    }
    Ok(Tensor2::from_fn(rows.len(), D_M, |i, j| rows[i][j]))
}

/// Serializes any document as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("json encode: {e}")))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn save_motion(path: &Path, motion: &MotionSequence, desc: &ConceptDescription) -> Result<()> {
    let file = MotionFile {
        format: MOTION_FORMAT.to_string(),
        desc: desc.to_string(),
        frame_rate: motion.frame_rate(),
        frames: frames_to_rows(motion.frames()),
    };
    write_json(path, &file)
}

pub fn load_motion(path: &Path) -> Result<(MotionSequence, ConceptDescription)> {
    let text = fs::read_to_string(path)?;
    let file: MotionFile = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if file.format != MOTION_FORMAT {
        return Err(Error::Format(format!(
            "unsupported motion format '{}', expected '{MOTION_FORMAT}'",
            file.format
        )));
    }
    let motion = MotionSequence::new(rows_to_frames(&file.frames)?, file.frame_rate)?;
    let desc = ConceptDescription::parse(&file.desc)?;
    Ok((motion, desc))
}
