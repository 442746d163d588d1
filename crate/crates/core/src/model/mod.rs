//! The chunk-wise diffusion transformer.
//!
//! A chunk pair is tokenized as `[condition tokens | target tokens]`. Condition
//! tokens attend only among themselves; target tokens attend to everything. Each
//! token group carries its own diffusion timestep, and the action reaches the
//! network through one of three [`InjectionStrategy`] variants.

mod checkpoint;
mod denoiser;
pub mod layers;
mod layout;
mod params;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC};
pub use denoiser::{DenoiserInput, ForwardCache};
pub use layout::{
    build_attention_mask, patchify, patchify_chunk, positional_encoding, unpatchify_chunk, TokenLayout,
};
pub use params::{ActionParams, BlockParams, CrossParams, DenoiserParameters, Linear, ModulationParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionStrategy {
    /// Action embedding added to the timestep embedding before the per-block
    /// scale/shift/gate heads.
    Adaln,
    /// Action embedding appended to the sequence as an extra token.
    SelfAttnToken,
    /// A cross-attention layer after self-attention in every block, with the
    /// action embedding as the only key/value token.
    CrossAttn,
}

impl InjectionStrategy {
    pub const ALL: [InjectionStrategy; 3] =
        [InjectionStrategy::Adaln, InjectionStrategy::SelfAttnToken, InjectionStrategy::CrossAttn];

    pub fn as_str(self) -> &'static str {
        match self {
            InjectionStrategy::Adaln => "adaln",
            InjectionStrategy::SelfAttnToken => "self_attn_token",
            InjectionStrategy::CrossAttn => "cross_attn",
        }
    }
}

impl fmt::Display for InjectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InjectionStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        InjectionStrategy::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown injection strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub height: usize,
    pub width: usize,
    /// Frames per chunk.
    pub chunk_len: usize,
    pub patch: usize,
    /// Model width.
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    /// `None` before the action module is attached (stage-1 models).
    pub action: Option<InjectionStrategy>,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            height: 32,
            width: 32,
            chunk_len: 4,
            patch: 8,
            dim: 192,
            heads: 6,
            layers: 6,
            mlp_ratio: 4,
            action: Some(InjectionStrategy::Adaln),
        }
    }
}

impl DenoiserConfig {
    /// Single-core configuration matching [`crate::WorldConfig::reduced`].
    pub fn reduced() -> Self {
        DenoiserConfig { height: 16, width: 16, patch: 4, dim: 64, heads: 4, layers: 3, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return bad(format!("patch {} must divide {}x{}", self.patch, self.height, self.width));
        }
        if self.chunk_len == 0 || self.layers == 0 || self.mlp_ratio == 0 {
            return bad("chunk length, layers and mlp ratio must be positive".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 || self.dim % 2 != 0 || self.dim < 8 {
            return bad(format!("width {} must be even, at least 8 and divisible by {} heads", self.dim, self.heads));
        }
        Ok(())
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout::new(self.height, self.width, self.chunk_len, self.patch)
            .expect("validated configuration")
    }

    /// Values per token: `patch · patch · 3`.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    /// Values in one chunk: `C · H · W · 3`.
    pub fn chunk_values(&self) -> usize {
        self.chunk_len * self.height * self.width * 3
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Checks that a checkpoint's architecture can be used under `self`.
    pub fn ensure_compatible(&self, other: &DenoiserConfig) -> Result<()> {
        if self.action != other.action {
            return Err(Error::ConfigMismatch(format!(
                "injection strategy {} vs {}",
                other.action.map_or("none", InjectionStrategy::as_str),
                self.action.map_or("none", InjectionStrategy::as_str)
            )));
        }
        let arch = |c: &DenoiserConfig| (c.height, c.width, c.patch, c.dim, c.heads, c.layers, c.mlp_ratio);
        if arch(self) != arch(other) {
            return Err(Error::ConfigMismatch(format!("architecture {:?} vs {:?}", arch(other), arch(self))));
        }
        Ok(())
    }
}
