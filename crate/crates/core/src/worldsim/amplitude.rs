use std::collections::BTreeMap;

use super::render::BODY_RADIUS;
use super::{angle_diff, EntityKind, EpisodeRecord, WorldConfig, WorldState};
use crate::error::{Error, Result};

/// Mean ground-truth flow magnitude (world units) over the pixels of one frame
/// transition. Entity pixels move rigidly with the entity; background pixels
/// carry the camera scroll.
pub fn transition_flow_magnitude(prev: &WorldState, next: &WorldState, world: &WorldConfig) -> f64 {
    let scale = world.scale();
    let t = [next.position[0] - prev.position[0], next.position[1] - prev.position[1]];
    let scroll = t[0].hypot(t[1]);
    let dtheta = angle_diff(next.heading, prev.heading);
    let (sin, cos) = dtheta.sin_cos();
    let mut total = 0.0;
    for row in 0..world.height {
        let oy = (world.height as f64 / 2.0 - (row as f64 + 0.5)) / scale;
        for col in 0..world.width {
            let ox = (col as f64 + 0.5 - world.width as f64 / 2.0) / scale;
            total += if ox * ox + oy * oy <= BODY_RADIUS * BODY_RADIUS {
                let fx = t[0] + (cos - 1.0) * ox - sin * oy;
                let fy = t[1] + sin * ox + (cos - 1.0) * oy;
                fx.hypot(fy)
            } else {
                scroll
            };
        }
    }
    total / (world.height * world.width) as f64
}

/// Average flow magnitude per entity, over every frame transition of every episode.
pub fn motion_amplitude(episodes: &[EpisodeRecord]) -> Result<BTreeMap<EntityKind, f64>> {
    let mut sums: BTreeMap<EntityKind, (f64, usize)> = BTreeMap::new();
    for ep in episodes {
        let Some(entity) = ep.entity else { continue };
        let Some(first) = ep.chunks.first() else { continue };
        let world = WorldConfig {
            height: first.height(),
            width: first.width(),
            chunk_len: ep.chunk_len(),
            chunks: ep.chunks.len(),
        };
        let acc = sums.entry(entity).or_default();
        for pair in ep.true_states.windows(2) {
            acc.0 += transition_flow_magnitude(&pair[0], &pair[1], &world);
            acc.1 += 1;
        }
    }
    let out: BTreeMap<_, _> = sums
        .into_iter()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(e, (s, n))| (e, s / n as f64))
        .collect();
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}
