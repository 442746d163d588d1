//! The single structured record an evaluation run emits, and PNG contact sheets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::control::{ControlReport, DriftReport};
use super::elo::EloRating;
use super::sweep::SweepRow;
use crate::error::{Error, Result};
use crate::worldsim::{Chunk, Frame};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Digest of the evaluation settings (sampler, trials, seeds, oracle).
    pub config_hash: String,
    pub checkpoint_id: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub control: Vec<ControlReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub elo: Vec<EloRating>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub drift: Vec<DriftReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepRow>,
    /// Contact sheets written next to the record.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sheets: Vec<String>,
}

impl EvalReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
    }
}

const GAP: usize = 1;
const GAP_RGB: [u8; 3] = [255, 255, 255];

/// One row per rollout, its frames laid out left to right, separated by
/// one-pixel white lines. Short rows are padded with white.
pub fn contact_sheet(rollouts: &[Vec<Chunk>]) -> Result<Frame> {
    let first = rollouts
        .iter()
        .flat_map(|r| r.iter())
        .flat_map(|c| c.frames.first())
        .next()
        .ok_or_else(|| Error::Evaluation("contact sheet needs at least one frame".into()))?;
    let (h, w) = (first.height, first.width);
    let cols = rollouts.iter().map(|r| r.iter().map(Chunk::len).sum::<usize>()).max().unwrap_or(0);
    let (sh, sw) = (rollouts.len() * (h + GAP) - GAP, cols * (w + GAP) - GAP);
    let mut sheet = Frame::new(sh, sw);
    sheet.pixels.chunks_exact_mut(3).for_each(|p| p.copy_from_slice(&GAP_RGB));
    for (r, rollout) in rollouts.iter().enumerate() {
        for (c, frame) in rollout.iter().flat_map(|ch| ch.frames.iter()).enumerate() {
            if (frame.height, frame.width) != (h, w) {
                return Err(Error::Shape(format!("frame {}x{} on a {h}x{w} sheet", frame.height, frame.width)));
            }
            let (top, left) = (r * (h + GAP), c * (w + GAP));
            for y in 0..h {
                let src = &frame.pixels[y * w * 3..(y + 1) * w * 3];
                let at = ((top + y) * sw + left) * 3;
                sheet.pixels[at..at + w * 3].copy_from_slice(src);
            }
        }
    }
    Ok(sheet)
}
