//! Procedural 2D world: entity kinematics, a follow-camera renderer and the
//! episode/dataset generators for the game, real and generic-motion domains.

mod amplitude;
mod dataset;
mod episode;
mod render;

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::action::ActionCommand;
use crate::error::{Error, Result};
use crate::seed::splitmix64;

pub use amplitude::{motion_amplitude, transition_flow_magnitude};
pub use dataset::{load_dataset, load_episode, save_dataset, write_episode_file, read_episode_file, Dataset, Manifest, ManifestEntry};
pub use episode::{generate_corpus, generate_episode, CorpusSpec, EpisodeConfig, WanderPolicy};
pub use render::{render_chunk, render_frame, Palette, Scene, Texture, BODY_RADIUS, TEXTURE_PERIOD, TIP_OFFSET, TIP_RADIUS};

/// Frame geometry and chunking shared by every dataset and model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WorldConfig {
    pub height: usize,
    pub width: usize,
    /// Frames per chunk.
    pub chunk_len: usize,
    /// Chunks per episode.
    pub chunks: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig { height: 32, width: 32, chunk_len: 4, chunks: 8 }
    }
}

impl WorldConfig {
    /// The 16×16 configuration used for single-core training runs.
    pub fn reduced() -> Self {
        WorldConfig { height: 16, width: 16, ..WorldConfig::default() }
    }

    /// Pixels per world unit. The visible field is always 32 units wide.
    pub fn scale(&self) -> f64 {
        self.width as f64 / 32.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk_len < 1 || self.chunks < 1 {
            return Err(Error::InvalidConfig(format!(
                "chunk length ({}) and chunk count ({}) must be at least 1",
                self.chunk_len, self.chunks
            )));
        }
        if self.height != self.width || self.height < 8 || self.height % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "frames must be square with an even side of at least 8 (got {}x{})",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn frame_bytes(&self) -> usize {
        self.height * self.width * 3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    GameCar,
    RealVehicle,
    RealBicycle,
    RealPedestrian,
}

impl EntityKind {
    pub const ALL: [EntityKind; 4] = [
        EntityKind::GameCar,
        EntityKind::RealVehicle,
        EntityKind::RealBicycle,
        EntityKind::RealPedestrian,
    ];
    pub const REAL: [EntityKind; 3] =
        [EntityKind::RealVehicle, EntityKind::RealBicycle, EntityKind::RealPedestrian];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::GameCar => "game_car",
            EntityKind::RealVehicle => "real_vehicle",
            EntityKind::RealBicycle => "real_bicycle",
            EntityKind::RealPedestrian => "real_pedestrian",
        }
    }

    pub fn domain(self) -> Domain {
        match self {
            EntityKind::GameCar => Domain::Game,
            _ => Domain::Real,
        }
    }

    pub fn spec(self) -> EntitySpec {
        EntitySpec::default_for(self)
    }

    pub(crate) fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        EntityKind::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::UnknownEntity(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Game,
    Real,
    /// Stage-1 generic-motion corpus. Has no controllable entity.
    Generic,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Game => "game",
            Domain::Real => "real",
            Domain::Generic => "generic",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "game" => Ok(Domain::Game),
            "real" => Ok(Domain::Real),
            "generic" => Ok(Domain::Generic),
            other => Err(Error::UnknownDomain(other.to_string())),
        }
    }
}

/// Checks that an entity may appear in a domain.
pub fn check_entity_domain(entity: EntityKind, domain: Domain) -> Result<()> {
    if entity.domain() == domain {
        Ok(())
    } else {
        Err(Error::EntityDomainMismatch {
            entity: entity.to_string(),
            domain: domain.to_string(),
        })
    }
}

pub type Rgb = [u8; 3];

/// Kinematics and appearance of one controllable entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntitySpec {
    pub kind: EntityKind,
    /// World units per frame.
    pub speed: f64,
    /// Radians per frame.
    pub turn_rate: f64,
    pub body_color: Rgb,
    pub tip_color: Rgb,
    pub style: Domain,
    /// Maximum relative speed perturbation per frame.
    pub gait_jitter: f64,
}

impl EntitySpec {
    pub fn default_for(kind: EntityKind) -> Self {
        let (speed, turn_deg, body_color, tip_color, gait_jitter): (f64, f64, Rgb, Rgb, f64) = match kind {
            EntityKind::GameCar => (2.0, 10.0, [230, 30, 30], [255, 235, 40], 0.0),
            EntityKind::RealVehicle => (1.0, 6.0, [25, 35, 225], [20, 225, 235], 0.0),
            EntityKind::RealBicycle => (1.2, 9.0, [205, 20, 205], [255, 255, 255], 0.0),
            EntityKind::RealPedestrian => (1.5, 15.0, [255, 130, 0], [0, 0, 0], 0.15),
        };
        EntitySpec {
            kind,
            speed,
            turn_rate: turn_deg.to_radians(),
            body_color,
            tip_color,
            style: kind.domain(),
            gait_jitter,
        }
    }

    pub fn with_kinematics(mut self, speed: f64, turn_rate: f64) -> Self {
        self.speed = speed;
        self.turn_rate = turn_rate;
        self
    }
}

/// Latent simulator state behind one rendered frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    /// World units, y axis pointing up.
    pub position: [f64; 2],
    /// Radians in [0, 2π), counter-clockwise from +x.
    pub heading: f64,
    /// Displacement applied by the last step, world units per frame.
    pub speed: f64,
    pub entity: EntityKind,
    pub domain: Domain,
    pub rng_state: u64,
}

impl WorldState {
    pub fn new(entity: EntityKind, position: [f64; 2], heading: f64, seed: u64) -> Self {
        WorldState {
            position,
            heading: normalize_angle(heading),
            speed: entity.spec().speed,
            entity,
            domain: entity.domain(),
            rng_state: seed,
        }
    }
}

pub fn normalize_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(TAU);
    if t >= TAU {
        0.0
    } else {
        t
    }
}

/// Signed angular difference `to - from`, wrapped into (-π, π].
pub fn angle_diff(to: f64, from: f64) -> f64 {
    let d = (to - from).rem_euclid(TAU);
    if d > std::f64::consts::PI {
        d - TAU
    } else {
        d
    }
}

/// Advances the world by one frame under a real command.
///
/// Turns are applied first; the position then moves along the post-turn heading.
pub fn step_dynamics(state: &WorldState, action: ActionCommand, spec: &EntitySpec) -> Result<WorldState> {
    action.require_command()?;
    let mut next = *state;
    next.heading = match action {
        ActionCommand::Left => normalize_angle(state.heading + spec.turn_rate),
        ActionCommand::Right => normalize_angle(state.heading - spec.turn_rate),
        _ => state.heading,
    };
    let mut speed = spec.speed;
    if spec.gait_jitter > 0.0 {
        next.rng_state = splitmix64(state.rng_state);
        let u = (next.rng_state >> 11) as f64 / (1u64 << 53) as f64;
        speed *= 1.0 + spec.gait_jitter * (2.0 * u - 1.0);
    }
    next.speed = speed;
    next.position = [
        state.position[0] + speed * next.heading.cos(),
        state.position[1] + speed * next.heading.sin(),
    ];
    Ok(next)
}

/// Fixed-size RGB frame, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Frame {
    pub fn new(height: usize, width: usize) -> Self {
        Frame { height, width, pixels: vec![0; height * width * 3] }
    }

    pub fn from_pixels(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} bytes for a {height}x{width} frame",
                pixels.len()
            )));
        }
        Ok(Frame { height, width, pixels })
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> Rgb {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: Rgb) {
        let i = (row * self.width + col) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Lossless 8-bit RGB PNG.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let png_err = |e: png::EncodingError| Error::Format(format!("png encode: {e}"));
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(&self.pixels).map_err(png_err)?;
        writer.finish().map_err(png_err)?;
        Ok(out)
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let png_err = |e: png::DecodingError| Error::Format(format!("png decode: {e}"));
        let mut reader = png::Decoder::new(std::io::Cursor::new(bytes)).read_info().map_err(png_err)?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(png_err)?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Format(format!("expected 8-bit RGB, got {:?}/{:?}", info.color_type, info.bit_depth)));
        }
        buf.truncate(info.buffer_size());
        Frame::from_pixels(info.height as usize, info.width as usize, buf)
    }
}

/// A fixed-length run of frames: the unit of conditioning and generation.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Chunk {
    pub frames: Vec<Frame>,
}

impl Chunk {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::Shape("empty chunk".into()))?;
        if frames.iter().any(|f| f.height != first.height || f.width != first.width) {
            return Err(Error::Shape("frames in a chunk differ in size".into()));
        }
        Ok(Chunk { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn last_frame(&self) -> &Frame {
        self.frames.last().expect("chunks are non-empty")
    }

    /// Pixels mapped to [-1, 1], frame-major HWC.
    pub fn to_signed(&self) -> Vec<f32> {
        self.frames
            .iter()
            .flat_map(|f| f.pixels.iter().map(|&p| p as f32 / 127.5 - 1.0))
            .collect()
    }

    /// Inverse of [`Chunk::to_signed`]; values are clamped and rounded.
    pub fn from_signed(values: &[f32], frames: usize, height: usize, width: usize) -> Result<Self> {
        let per = height * width * 3;
        if values.len() != frames * per {
            return Err(Error::Shape(format!(
                "{} values for {frames} frames of {height}x{width}",
                values.len()
            )));
        }
        let frames = values
            .chunks(per)
            .map(|f| Frame {
                height,
                width,
                pixels: f
                    .iter()
                    .map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
                    .collect(),
            })
            .collect();
        Chunk::new(frames)
    }
}

/// One generated episode and its simulator ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub chunks: Vec<Chunk>,
    /// Present iff the domain is labeled (game); `chunks.len() - 1` entries.
    pub actions: Option<Vec<ActionCommand>>,
    pub entity: Option<EntityKind>,
    pub domain: Domain,
    pub seed: u64,
    /// One state per frame, in frame order.
    pub true_states: Vec<WorldState>,
}

impl EpisodeRecord {
    pub fn chunk_len(&self) -> usize {
        self.chunks.first().map_or(0, Chunk::len)
    }

    /// True states of chunk `k`.
    pub fn chunk_states(&self, k: usize) -> &[WorldState] {
        let c = self.chunk_len();
        &self.true_states[k * c..(k + 1) * c]
    }
}
