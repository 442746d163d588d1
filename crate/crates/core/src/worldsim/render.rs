//! Follow-camera renderer. The entity is always drawn at the frame centre; motion
//! shows up as the background texture scrolling opposite to the entity velocity.

use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Chunk, Domain, EntitySpec, Frame, Rgb, WorldConfig, WorldState};
use crate::error::{Error, Result};
use crate::seed;

/// Spatial period of every background texture, world units. The visible field is
/// 32 units wide, so frames always hold exactly two periods.
pub const TEXTURE_PERIOD: f64 = 16.0;
pub const BODY_RADIUS: f64 = 9.0;
pub const TIP_OFFSET: f64 = 5.2;
pub const TIP_RADIUS: f64 = 2.2;
const SUPERSAMPLE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub low: [f64; 3],
    pub high: [f64; 3],
}

impl Palette {
    /// Base palette of a domain, before per-episode jitter.
    pub fn base(domain: Domain) -> Palette {
        match domain {
            Domain::Game => Palette { low: [60.0, 66.0, 76.0], high: [92.0, 140.0, 70.0] },
            Domain::Real => Palette { low: [168.0, 136.0, 100.0], high: [128.0, 168.0, 205.0] },
            Domain::Generic => Palette { low: [110.0, 110.0, 110.0], high: [170.0, 170.0, 150.0] },
        }
    }

    fn lerp(&self, w: f64) -> [f64; 3] {
        [0, 1, 2].map(|c| self.low[c] + (self.high[c] - self.low[c]) * w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Wave {
    fx: i32,
    fy: i32,
    amp: f64,
    phase: f64,
}

/// Seeded periodic texture: a small sum of plane waves blended between two colours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    waves: Vec<Wave>,
    pub palette: Palette,
}

impl Texture {
    pub fn generate(domain: Domain, seed: u64) -> Texture {
        let mut rng = seed::rng(seed, &[seed::tag("texture")]);
        let (count, max_freq, amp_lo, amp_hi) = match domain {
            Domain::Game => (2, 1, 0.22, 0.32),
            Domain::Real => (4, 2, 0.12, 0.2),
            Domain::Generic => (3, 2, 0.15, 0.25),
        };
        let mut waves: Vec<Wave> = Vec::with_capacity(count);
        while waves.len() < count {
            let fx = rng.random_range(-max_freq..=max_freq);
            let fy = rng.random_range(-max_freq..=max_freq);
            if fx == 0 && fy == 0 {
                continue;
            }
            // the first two waves must span the plane so any scroll is visible
            if waves.len() == 1 && fx * waves[0].fy == fy * waves[0].fx {
                continue;
            }
            waves.push(Wave {
                fx,
                fy,
                amp: rng.random_range(amp_lo..amp_hi),
                phase: rng.random_range(0.0..TAU),
            });
        }
        let mut palette = Palette::base(domain);
        let jitter = if domain == Domain::Generic { 40.0 } else { 8.0 };
        for c in 0..3 {
            palette.low[c] += rng.random_range(-jitter..jitter);
            palette.high[c] += rng.random_range(-jitter..jitter);
        }
        Texture { waves, palette }
    }

    /// Blend weight in [0, 1] at a world position.
    pub fn weight(&self, x: f64, y: f64) -> f64 {
        let k = TAU / TEXTURE_PERIOD;
        let v: f64 = self
            .waves
            .iter()
            .map(|w| w.amp * (k * (w.fx as f64 * x + w.fy as f64 * y) + w.phase).cos())
            .sum();
        (0.5 + v).clamp(0.0, 1.0)
    }

    pub fn color(&self, x: f64, y: f64) -> [f64; 3] {
        self.palette.lerp(self.weight(x, y))
    }
}

/// A coloured disk drifting across the generic-motion corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sprite {
    /// Screen-relative start position, world units from the top-left corner.
    pub origin: [f64; 2],
    /// Screen-relative velocity, world units per frame.
    pub velocity: [f64; 2],
    pub radius: f64,
    pub color: Rgb,
}

/// Everything about an episode's look that does not change frame to frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub domain: Domain,
    pub texture: Texture,
    pub sprites: Vec<Sprite>,
}

impl Scene {
    pub fn new(domain: Domain, seed: u64) -> Scene {
        Scene { domain, texture: Texture::generate(domain, seed), sprites: Vec::new() }
    }
}

/// What the camera sees at one instant.
#[derive(Debug, Clone, Copy)]
pub struct View<'a> {
    pub camera: [f64; 2],
    pub heading: f64,
    pub entity: Option<&'a EntitySpec>,
    pub frame_index: usize,
}

fn to_rgb(c: [f64; 3]) -> Rgb {
    c.map(|v| v.round().clamp(0.0, 255.0) as u8)
}

/// Fraction of a pixel (given by its centre offset in world units) covered by the tip disk.
fn tip_coverage(ox: f64, oy: f64, tip: [f64; 2], pixel_units: f64) -> f64 {
    let reach = TIP_RADIUS + pixel_units;
    if (ox - tip[0]).abs() > reach || (oy - tip[1]).abs() > reach {
        return 0.0;
    }
    let mut hits = 0usize;
    let r2 = TIP_RADIUS * TIP_RADIUS;
    for sy in 0..SUPERSAMPLE {
        for sx in 0..SUPERSAMPLE {
            let dx = ((sx as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5) * pixel_units;
            let dy = ((sy as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5) * pixel_units;
            let px = ox + dx - tip[0];
            let py = oy + dy - tip[1];
            if px * px + py * py <= r2 {
                hits += 1;
            }
        }
    }
    hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
}

pub fn render_view(view: &View<'_>, scene: &Scene, config: &WorldConfig) -> Frame {
    let scale = config.scale();
    let pixel_units = 1.0 / scale;
    let (h, w) = (config.height, config.width);
    let field = w as f64 / scale;
    let mut frame = Frame::new(h, w);
    let tip = [TIP_OFFSET * view.heading.cos(), TIP_OFFSET * view.heading.sin()];
    for row in 0..h {
        let oy = (h as f64 / 2.0 - (row as f64 + 0.5)) / scale;
        for col in 0..w {
            let ox = (col as f64 + 0.5 - w as f64 / 2.0) / scale;
            let mut color = scene.texture.color(view.camera[0] + ox, view.camera[1] + oy);
            for s in &scene.sprites {
                // sprites live on a torus the size of the visible field
                let sx = (s.origin[0] + s.velocity[0] * view.frame_index as f64).rem_euclid(field);
                let sy = (s.origin[1] + s.velocity[1] * view.frame_index as f64).rem_euclid(field);
                let px = (ox + field / 2.0 - sx + field / 2.0).rem_euclid(field) - field / 2.0;
                let py = (field / 2.0 - oy - sy + field / 2.0).rem_euclid(field) - field / 2.0;
                if px * px + py * py <= s.radius * s.radius {
                    color = s.color.map(f64::from);
                }
            }
            if let Some(spec) = view.entity {
                if ox * ox + oy * oy <= BODY_RADIUS * BODY_RADIUS {
                    let cov = tip_coverage(ox, oy, tip, pixel_units);
                    color = [0, 1, 2].map(|c| {
                        spec.body_color[c] as f64 * (1.0 - cov) + spec.tip_color[c] as f64 * cov
                    });
                }
            }
            frame.set_pixel(row, col, to_rgb(color));
        }
    }
    frame
}

/// Renders one entity frame from its true state.
pub fn render_frame(state: &WorldState, spec: &EntitySpec, scene: &Scene, config: &WorldConfig) -> Frame {
    render_view(
        &View { camera: state.position, heading: state.heading, entity: Some(spec), frame_index: 0 },
        scene,
        config,
    )
}

pub fn render_chunk(
    states: &[WorldState],
    spec: &EntitySpec,
    scene: &Scene,
    config: &WorldConfig,
) -> Result<Chunk> {
    let first = states.first().ok_or_else(|| Error::Shape("no states to render".into()))?;
    if states.iter().any(|s| s.entity != first.entity || s.domain != first.domain) {
        return Err(Error::Shape("states in one chunk must share entity and domain".into()));
    }
    Chunk::new(states.iter().map(|s| render_frame(s, spec, scene, config)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::ActionCommand;
    use crate::worldsim::{step_dynamics, EntityKind};

    fn segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
        let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
        let len2: f64 = ab.iter().map(|v| v * v).sum();
        let t = if len2 == 0.0 { 0.0 } else { (ap.iter().zip(&ab).map(|(x, y)| x * y).sum::<f64>() / len2).clamp(0.0, 1.0) };
        (0..3).map(|c| (ap[c] - t * ab[c]).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn entity_colors_far_from_backgrounds() {
        // sample every background blend in both styled domains, with worst-case jitter
        for e in EntityKind::ALL {
            let spec = e.spec();
            let body = spec.body_color.map(f64::from);
            let tip = spec.tip_color.map(f64::from);
            for d in [Domain::Game, Domain::Real] {
                let p = Palette::base(d);
                for i in 0..=20 {
                    let c = p.lerp(i as f64 / 20.0);
                    let dist = segment_distance(c, body, tip);
                    assert!(dist > 80.0, "{e} vs {d} background: {dist}");
                }
            }
        }
    }

    #[test]
    fn static_states_render_identical_frames() {
        let cfg = WorldConfig::default();
        let spec = EntityKind::GameCar.spec();
        let s = WorldState::new(EntityKind::GameCar, [3.0, 4.0], 1.0, 0);
        let scene = Scene::new(Domain::Game, 5);
        let chunk = render_chunk(&[s; 4], &spec, &scene, &cfg).unwrap();
        assert!(chunk.frames.windows(2).all(|w| w[0] == w[1]));
    }

    fn background_peak(a: &Frame, b: &Frame, max_shift: i64) -> (i64, i64) {
        // exhaustive cross-correlation over background pixels (outside the body disk)
        let n = a.width as i64;
        let centre = n as f64 / 2.0;
        let r = BODY_RADIUS * n as f64 / 32.0 + 1.0;
        let lum = |f: &Frame, row: i64, col: i64| -> f64 {
            let p = f.pixel(row.rem_euclid(n) as usize, col.rem_euclid(n) as usize);
            p.iter().map(|&v| v as f64).sum::<f64>()
        };
        let is_bg = |row: i64, col: i64| {
            let dy = row.rem_euclid(n) as f64 + 0.5 - centre;
            let dx = col.rem_euclid(n) as f64 + 0.5 - centre;
            dx * dx + dy * dy > r * r
        };
        let mean_a: f64 = (0..n).flat_map(|r| (0..n).map(move |c| (r, c))).map(|(r, c)| lum(a, r, c)).sum::<f64>() / (n * n) as f64;
        let mut best = (f64::MIN, (0, 0));
        for dy in -max_shift..=max_shift {
            for dx in -max_shift..=max_shift {
                let mut score = 0.0;
                for row in 0..n {
                    for col in 0..n {
                        if is_bg(row, col) && is_bg(row - dy, col - dx) {
                            score += (lum(b, row, col) - mean_a) * (lum(a, row - dy, col - dx) - mean_a);
                        }
                    }
                }
                if score > best.0 {
                    best = (score, (dx, dy));
                }
            }
        }
        best.1
    }

    #[test]
    fn forward_motion_scrolls_background_backwards() {
        let cfg = WorldConfig::default();
        let spec = EntityKind::GameCar.spec().with_kinematics(2.0, 0.1);
        let scene = Scene::new(Domain::Game, 11);
        let s0 = WorldState::new(EntityKind::GameCar, [10.0, 7.0], 0.0, 0);
        let s1 = step_dynamics(&s0, ActionCommand::Forward, &spec).unwrap();
        let a = render_frame(&s0, &spec, &scene, &cfg);
        let b = render_frame(&s1, &spec, &scene, &cfg);
        assert_eq!(background_peak(&a, &b, 4), (-2, 0));
    }

    #[test]
    fn tip_rotates_with_heading() {
        let cfg = WorldConfig::default();
        let spec = EntityKind::GameCar.spec();
        let scene = Scene::new(Domain::Game, 3);
        let mut s = WorldState::new(EntityKind::GameCar, [0.0, 0.0], 0.3, 0);
        let tip_angle = |f: &Frame| {
            let body = spec.body_color.map(f64::from);
            let tip = spec.tip_color.map(f64::from);
            let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
            for row in 0..f.height {
                for col in 0..f.width {
                    let p = f.pixel(row, col).map(f64::from);
                    // projection onto body→tip
                    let num: f64 = (0..3).map(|c| (p[c] - body[c]) * (tip[c] - body[c])).sum();
                    let den: f64 = (0..3).map(|c| (tip[c] - body[c]).powi(2)).sum();
                    let w = (num / den).clamp(0.0, 1.0);
                    if segment_distance(p, body, tip) < 30.0 && w > 0.0 {
                        sx += w * (col as f64 + 0.5 - 16.0);
                        sy += w * (16.0 - row as f64 - 0.5);
                        sw += w;
                    }
                }
            }
            (sy / sw).atan2(sx / sw)
        };
        let mut prev = tip_angle(&render_frame(&s, &spec, &scene, &cfg));
        for _ in 0..6 {
            s = step_dynamics(&s, ActionCommand::Left, &spec).unwrap();
            let now = tip_angle(&render_frame(&s, &spec, &scene, &cfg));
            let d = crate::worldsim::angle_diff(now, prev);
            assert!((d - spec.turn_rate).abs() < 1f64.to_radians(), "step rotated {}", d.to_degrees());
            prev = now;
        }
    }

    #[test]
    fn style_separation() {
        let cfg = WorldConfig::default();
        let hist = |domain: Domain, entity: EntityKind| {
            let mut h = vec![0.0; 64];
            let spec = entity.spec();
            for seed in 0..20 {
                let scene = Scene::new(domain, seed);
                let s = WorldState::new(entity, [seed as f64 * 3.1, 2.0], 0.5, seed);
                let f = render_frame(&s, &spec, &scene, &cfg);
                for px in f.pixels.chunks(3) {
                    let bin = (px[0] as usize / 64) * 16 + (px[1] as usize / 64) * 4 + px[2] as usize / 64;
                    h[bin] += 1.0;
                }
            }
            let total: f64 = h.iter().sum();
            h.into_iter().map(|v| v / total).collect::<Vec<_>>()
        };
        let g = hist(Domain::Game, EntityKind::GameCar);
        let r = hist(Domain::Real, EntityKind::RealBicycle);
        let l1: f64 = g.iter().zip(&r).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
        assert!(l1 >= 0.2, "style separation {l1}");
    }
}
