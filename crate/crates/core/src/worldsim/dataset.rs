//! On-disk datasets: a JSON `manifest` plus one `RPL1` binary file per episode.
//!
//! Episode file layout (all integers little-endian):
//!
//! ```text
//! "RPL1" | K u32 | C u32 | H u32 | W u32
//! K·C·H·W·3 frame bytes, episode order
//! K−1 action codes (0 forward, 1 left, 2 right), labeled episodes only
//! K·C true-state records of four f64: x, y, heading, speed
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Chunk, Domain, EntityKind, EpisodeRecord, Frame, WorldConfig, WorldState};
use crate::action::ActionCommand;
use crate::error::{Error, Result};

pub const EPISODE_MAGIC: &[u8; 4] = b"RPL1";
const STATE_FIELDS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub entity: Option<EntityKind>,
    pub domain: Domain,
    #[serde(rename = "K")]
    pub chunks: usize,
    #[serde(rename = "C")]
    pub chunk_len: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub seed: u64,
    pub actions: Option<Vec<ActionCommand>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub episodes: Vec<ManifestEntry>,
}

/// Episodes held in memory, all sharing one frame geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub world: WorldConfig,
    pub episodes: Vec<EpisodeRecord>,
}

impl Dataset {
    pub fn new(episodes: Vec<EpisodeRecord>) -> Result<Self> {
        let first = episodes.first().ok_or(Error::EmptyDataset)?;
        let world = WorldConfig {
            height: first.chunks[0].height(),
            width: first.chunks[0].width(),
            chunk_len: first.chunk_len(),
            chunks: first.chunks.len(),
        };
        for ep in &episodes {
            let c = &ep.chunks[0];
            if c.height() != world.height || c.width() != world.width || ep.chunk_len() != world.chunk_len {
                return Err(Error::Shape("episodes in a dataset must share frame geometry".into()));
            }
        }
        Ok(Dataset { world, episodes })
    }

    pub fn merge(mut self, other: Dataset) -> Result<Self> {
        self.episodes.extend(other.episodes);
        Dataset::new(self.episodes)
    }
}

fn episode_id(index: usize, ep: &EpisodeRecord) -> String {
    let who = ep.entity.map_or("generic", EntityKind::as_str);
    format!("{index:06}_{who}")
}

pub fn write_episode_file(path: &Path, ep: &EpisodeRecord) -> Result<()> {
    let c = ep.chunk_len();
    let (h, w) = (ep.chunks[0].height(), ep.chunks[0].width());
    let mut buf = Vec::with_capacity(20 + ep.chunks.len() * c * h * w * 3);
    buf.extend_from_slice(EPISODE_MAGIC);
    for v in [ep.chunks.len(), c, h, w] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for chunk in &ep.chunks {
        for f in &chunk.frames {
            buf.extend_from_slice(&f.pixels);
        }
    }
    if let Some(actions) = &ep.actions {
        buf.extend(actions.iter().map(|a| a.code().expect("labels are commands")));
    }
    for s in &ep.true_states {
        for v in [s.position[0], s.position[1], s.heading, s.speed] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Raw contents of an episode file.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeFile {
    pub world: WorldConfig,
    pub chunks: Vec<Chunk>,
    pub actions: Option<Vec<ActionCommand>>,
    /// x, y, heading, speed per frame.
    pub states: Vec<[f64; 4]>,
}

pub fn read_episode_file(path: &Path, labeled: bool) -> Result<EpisodeFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_episode(&bytes, labeled)
}

pub(crate) fn parse_episode(bytes: &[u8], labeled: bool) -> Result<EpisodeFile> {
    if bytes.len() < 20 {
        return Err(Error::Truncated("episode header".into()));
    }
    if &bytes[..4] != EPISODE_MAGIC {
        return Err(Error::Version {
            expected: "RPL1".into(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (k, c, h, w) = (field(0), field(1), field(2), field(3));
    let world = WorldConfig { height: h, width: w, chunk_len: c, chunks: k };
    let frame = h * w * 3;
    let n_frames = k * c;
    let n_actions = if labeled { k.saturating_sub(1) } else { 0 };
    let mut expected = 20 + n_frames * frame + n_actions + n_frames * STATE_FIELDS * 8;
    // generated transcripts carry no simulator states
    if bytes.len() == expected - n_frames * STATE_FIELDS * 8 {
        expected = bytes.len();
    }
    if bytes.len() < expected {
        return Err(Error::Truncated(format!("{} of {expected} episode bytes", bytes.len())));
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - expected)));
    }
    let mut at = 20;
    let mut frames = Vec::with_capacity(n_frames);
    for _ in 0..n_frames {
        frames.push(Frame::from_pixels(h, w, bytes[at..at + frame].to_vec())?);
        at += frame;
    }
    let mut chunks = Vec::with_capacity(k);
    let mut it = frames.into_iter();
    for _ in 0..k {
        chunks.push(Chunk::new(it.by_ref().take(c).collect())?);
    }
    let actions = if labeled {
        let a = bytes[at..at + n_actions]
            .iter()
            .map(|&b| ActionCommand::from_code(b))
            .collect::<Result<Vec<_>>>()?;
        at += n_actions;
        Some(a)
    } else {
        None
    };
    let states = bytes[at..]
        .chunks_exact(STATE_FIELDS * 8)
        .map(|rec| {
            let mut out = [0.0; STATE_FIELDS];
            for (i, v) in out.iter_mut().enumerate() {
                *v = f64::from_le_bytes(rec[i * 8..i * 8 + 8].try_into().unwrap());
            }
            out
        })
        .collect();
    Ok(EpisodeFile { world, chunks, actions, states })
}

pub fn save_dataset(dir: &Path, episodes: &[EpisodeRecord]) -> Result<Manifest> {
    let ep_dir = dir.join("episodes");
    fs::create_dir_all(&ep_dir).map_err(|e| Error::io(&ep_dir, e))?;
    let mut entries = Vec::with_capacity(episodes.len());
    for (i, ep) in episodes.iter().enumerate() {
        let id = episode_id(i, ep);
        write_episode_file(&ep_dir.join(format!("{id}.rpl")), ep)?;
        entries.push(ManifestEntry {
            id,
            entity: ep.entity,
            domain: ep.domain,
            chunks: ep.chunks.len(),
            chunk_len: ep.chunk_len(),
            height: ep.chunks[0].height(),
            width: ep.chunks[0].width(),
            seed: ep.seed,
            actions: ep.actions.clone(),
        });
    }
    let manifest = Manifest { version: 1, episodes: entries };
    let path = dir.join("manifest");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn episode_path(dir: &Path, entry: &ManifestEntry) -> PathBuf {
    dir.join("episodes").join(format!("{}.rpl", entry.id))
}

pub fn load_episode(dir: &Path, entry: &ManifestEntry) -> Result<EpisodeRecord> {
    let file = read_episode_file(&episode_path(dir, entry), entry.actions.is_some())?;
    let w = file.world;
    if (w.chunks, w.chunk_len, w.height, w.width)
        != (entry.chunks, entry.chunk_len, entry.height, entry.width)
    {
        return Err(Error::Format(format!("episode {} disagrees with its manifest entry", entry.id)));
    }
    if file.actions != entry.actions {
        return Err(Error::Integrity(format!("episode {} action labels differ from manifest", entry.id)));
    }
    let entity = entry.entity.unwrap_or(EntityKind::GameCar);
    let true_states = file
        .states
        .iter()
        .map(|s| WorldState {
            position: [s[0], s[1]],
            heading: s[2],
            speed: s[3],
            entity,
            domain: entry.domain,
            rng_state: 0,
        })
        .collect();
    Ok(EpisodeRecord {
        chunks: file.chunks,
        actions: file.actions,
        entity: entry.entity,
        domain: entry.domain,
        seed: entry.seed,
        true_states,
    })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let episodes = manifest
        .episodes
        .iter()
        .map(|entry| load_episode(dir, entry))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(episodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldsim::{generate_episode, EpisodeConfig};

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let world = WorldConfig { chunks: 3, ..WorldConfig::reduced() };
        let eps = vec![
            generate_episode(&EpisodeConfig::new(EntityKind::GameCar, world), 1).unwrap(),
            generate_episode(&EpisodeConfig::new(EntityKind::RealBicycle, world), 2).unwrap(),
        ];
        save_dataset(dir.path(), &eps).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        for (a, b) in eps.iter().zip(&ds.episodes) {
            assert_eq!(a.chunks, b.chunks);
            assert_eq!(a.actions, b.actions);
            let strip = |s: &WorldState| (s.position, s.heading, s.speed);
            assert!(a.true_states.iter().map(strip).eq(b.true_states.iter().map(strip)));
        }
    }

    #[test]
    fn header_layout_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let world = WorldConfig { chunks: 2, chunk_len: 1, height: 8, width: 8 };
        let ep = generate_episode(&EpisodeConfig::new(EntityKind::GameCar, world), 4).unwrap();
        let path = dir.path().join("e.rpl");
        write_episode_file(&path, &ep).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"RPL1");
        assert_eq!(&bytes[4..20], &[2, 0, 0, 0, 1, 0, 0, 0, 8, 0, 0, 0, 8, 0, 0, 0]);
        assert_eq!(bytes.len(), 20 + 2 * 192 + 1 + 2 * 32);
        assert_eq!(bytes[20 + 2 * 192], ep.actions.as_ref().unwrap()[0].code().unwrap());
        assert!(matches!(parse_episode(&bytes[..bytes.len() - 1], true), Err(Error::Truncated(_))));
        let mut bad = bytes.clone();
        bad[3] = b'9';
        assert!(matches!(parse_episode(&bad, true), Err(Error::Version { .. })));
    }
}
