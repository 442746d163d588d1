//! Pixel-level state estimation: entity heading from the tip blob and background
//! displacement from a masked Fourier fit of the background.

use std::f64::consts::{PI, TAU};

use nalgebra::{Complex, DMatrix, DVector};

use serde::{Deserialize, Serialize};

use crate::action::ActionCommand;
use crate::worldsim::{angle_diff, Chunk, EntitySpec, Frame, WorldConfig, BODY_RADIUS, TIP_RADIUS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    /// Largest RGB distance to the body→tip colour segment counted as entity.
    pub color_threshold: f64,
    /// Accepted entity area as fractions of the rendered disk area.
    pub min_area: f64,
    pub max_area: f64,
    /// Components smaller than this many pixels are ignored as specks.
    pub min_speck: usize,
    /// Minimum tip mass as a fraction of the rendered tip area.
    pub min_tip: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { color_threshold: 48.0, min_area: 0.6, max_area: 1.4, min_speck: 3, min_tip: 0.3 }
    }
}

impl OracleConfig {
    /// `[A_min, A_max]` in pixels for frames of `world`.
    pub fn area_bounds(&self, world: &WorldConfig) -> (f64, f64) {
        let r = BODY_RADIUS * world.scale();
        let area = PI * r * r;
        (self.min_area * area, self.max_area * area)
    }
}

/// Per-frame estimate of one chunk. `displacements[i]` is the background shift in
/// pixels from the frame before frame `i` (the anchor for `i = 0`) to frame `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleEstimate {
    pub headings: Vec<f64>,
    pub displacements: Vec<[f64; 2]>,
    pub anchor_heading: Option<f64>,
    pub valid: bool,
}

impl OracleEstimate {
    /// Unwrapped heading change from the anchor (or first frame) to the last frame.
    pub fn heading_change(&self) -> f64 {
        let mut prev = match self.anchor_heading.or_else(|| self.headings.first().copied()) {
            Some(h) => h,
            None => return 0.0,
        };
        let mut total = 0.0;
        for &h in &self.headings {
            total += angle_diff(h, prev);
            prev = h;
        }
        total
    }

    /// Length of the summed background displacement, in pixels.
    pub fn total_displacement(&self) -> f64 {
        let s = self.displacements.iter().fold([0.0, 0.0], |a, d| [a[0] + d[0], a[1] + d[1]]);
        s[0].hypot(s[1])
    }
}

fn segment_projection(p: [f64; 3], body: [f64; 3], tip: [f64; 3]) -> (f64, f64) {
    let ab = [tip[0] - body[0], tip[1] - body[1], tip[2] - body[2]];
    let ap = [p[0] - body[0], p[1] - body[1], p[2] - body[2]];
    let len2: f64 = ab.iter().map(|v| v * v).sum();
    let t = (ap.iter().zip(&ab).map(|(x, y)| x * y).sum::<f64>() / len2).clamp(0.0, 1.0);
    let dist = (0..3).map(|c| (ap[c] - t * ab[c]).powi(2)).sum::<f64>().sqrt();
    (dist, t)
}

/// Heading of the single entity in `frame`, or `None` when detection fails.
pub fn estimate_heading(frame: &Frame, spec: &EntitySpec, world: &WorldConfig, cfg: &OracleConfig) -> Option<f64> {
    let (h, w) = (frame.height, frame.width);
    let body = spec.body_color.map(f64::from);
    let tip = spec.tip_color.map(f64::from);
    let mut member = vec![false; h * w];
    let mut weight = vec![0.0; h * w];
    for row in 0..h {
        for col in 0..w {
            let (dist, t) = segment_projection(frame.pixel(row, col).map(f64::from), body, tip);
            if dist <= cfg.color_threshold {
                member[row * w + col] = true;
                weight[row * w + col] = t;
            }
        }
    }
    let (amin, amax) = cfg.area_bounds(world);
    let mut label = vec![usize::MAX; h * w];
    let mut chosen: Option<Vec<usize>> = None;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !member[start] || label[start] != usize::MAX {
            continue;
        }
        let mut pixels = Vec::new();
        label[start] = start;
        stack.push(start);
        while let Some(i) = stack.pop() {
            pixels.push(i);
            let (r, c) = (i / w, i % w);
            let mut visit = |j: usize| {
                if member[j] && label[j] == usize::MAX {
                    label[j] = start;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        if pixels.len() < cfg.min_speck {
            continue;
        }
        let area = pixels.len() as f64;
        if area < amin || area > amax || chosen.is_some() {
            return None;
        }
        chosen = Some(pixels);
    }
    let pixels = chosen?;
    let centre = |i: usize| ((i % w) as f64 + 0.5, h as f64 - (i / w) as f64 - 0.5);
    let n = pixels.len() as f64;
    let (cx, cy) = pixels.iter().fold((0.0, 0.0), |(x, y), &i| (x + centre(i).0 / n, y + centre(i).1 / n));
    let (mut tx, mut ty, mut tw) = (0.0, 0.0, 0.0);
    for &i in &pixels {
        let (x, y) = centre(i);
        tx += weight[i] * x;
        ty += weight[i] * y;
        tw += weight[i];
    }
    let tip_area = PI * (TIP_RADIUS * world.scale()).powi(2);
    if tw < cfg.min_tip * tip_area {
        return None;
    }
    let (dx, dy) = (tx / tw - cx, ty / tw - cy);
    if dx.hypot(dy) < 1e-9 {
        return None;
    }
    Some(crate::worldsim::normalize_angle(dy.atan2(dx)))
}

fn luma(frame: &Frame) -> Vec<f64> {
    frame.pixels.chunks_exact(3).map(|p| p.iter().map(|&v| v as f64).sum::<f64>() / 3.0).collect()
}

/// Spatial frequencies, in cycles per frame, of every background texture: each
/// texture repeats twice across the field and carries at most two cycles per period.
const FRAME_FREQS: [i32; 5] = [-4, -2, 0, 2, 4];

/// One representative of each conjugate pair of non-zero frequencies.
fn half_plane() -> Vec<(i32, i32)> {
    let mut out = Vec::new();
    for &kx in &FRAME_FREQS {
        for &ky in &FRAME_FREQS {
            if kx > 0 || (kx == 0 && ky > 0) {
                out.push((kx, ky));
            }
        }
    }
    out
}

/// Least-squares Fourier coefficients `C_k` of the frame's luma outside the central
/// entity disk, such that `luma(p) ≈ c_0 + Σ Re(C_k · e^{2πi k·p/n})` with `p` in
/// image coordinates (x right, y down).
fn fit_background(frame: &Frame, world: &WorldConfig) -> Vec<Complex<f64>> {
    let n = frame.width;
    let freqs = half_plane();
    let excl = BODY_RADIUS * world.scale() + 1.0;
    let centre = n as f64 / 2.0;
    let values = luma(frame);
    let cols = 1 + 2 * freqs.len();
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    for r in 0..n {
        for c in 0..n {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            if (x - centre).powi(2) + (y - centre).powi(2) <= excl * excl {
                continue;
            }
            rows.push(1.0);
            for &(kx, ky) in &freqs {
                let phi = TAU * (kx as f64 * x + ky as f64 * y) / n as f64;
                rows.push(phi.cos());
                rows.push(phi.sin());
            }
            rhs.push(values[r * n + c]);
        }
    }
    let a = DMatrix::from_row_slice(rhs.len(), cols, &rows);
    let y = DVector::from_vec(rhs);
    let mut normal = a.transpose() * &a;
    for i in 0..cols {
        normal[(i, i)] += 1e-6;
    }
    let theta = match normal.cholesky() {
        Some(ch) => ch.solve(&(a.transpose() * y)),
        None => return vec![Complex::new(0.0, 0.0); freqs.len()],
    };
    (0..freqs.len()).map(|j| Complex::new(theta[1 + 2 * j], -theta[2 + 2 * j])).collect()
}

/// Background shift `(dx, dy)` in pixels (x right, y up) of the image content from
/// `a` to `b`.
///
/// Both frames are projected onto the texture's Fourier basis with the entity disk
/// masked out; a shift `s` rotates each coefficient by `e^{−2πi k·s/n}`. The shift
/// minimising the coefficient mismatch is found on a quarter-pixel grid within
/// `±n/8` (half the shortest aliasing period) and refined by parabolic fits.
pub fn background_displacement(a: &Frame, b: &Frame, world: &WorldConfig) -> [f64; 2] {
    let n = a.width as f64;
    let freqs = half_plane();
    let (ca, cb) = (fit_background(a, world), fit_background(b, world));
    // a faint pull toward small shifts breaks ties between aliased optima
    let energy: f64 = ca.iter().chain(&cb).map(|c| c.norm_sqr()).sum();
    let cost = |s: [f64; 2]| -> f64 {
        1e-3 * energy * (s[0] * s[0] + s[1] * s[1]) / (n * n)
            + freqs
            .iter()
            .zip(ca.iter().zip(&cb))
            .map(|(&(kx, ky), (&x, &y))| {
                let psi = TAU * (kx as f64 * s[0] + ky as f64 * s[1]) / n;
                (y - x * Complex::from_polar(1.0, -psi)).norm_sqr()
            })
            .sum::<f64>()
    };
    let reach = n / 8.0;
    let steps = (reach / 0.25).round() as i64;
    let mut best = ([0.0, 0.0], f64::INFINITY);
    for i in -steps..=steps {
        for j in -steps..=steps {
            let s = [i as f64 * 0.25, j as f64 * 0.25];
            let v = cost(s);
            if v < best.1 {
                best = (s, v);
            }
        }
    }
    let mut s = best.0;
    for step in [0.25, 0.1, 0.05, 0.02] {
        for axis in 0..2 {
            let (mut lo, mut hi) = (s, s);
            lo[axis] -= step;
            hi[axis] += step;
            s[axis] += step * parabola(cost(lo), cost(s), cost(hi));
        }
    }
    [s[0], -s[1]]
}

fn parabola(l: f64, c: f64, r: f64) -> f64 {
    let den = l - 2.0 * c + r;
    if !den.is_finite() || den <= 1e-12 {
        0.0
    } else {
        (0.5 * (l - r) / den).clamp(-1.0, 1.0)
    }
}

/// Estimates headings for every frame of `chunk` and background shifts between
/// consecutive frames, starting from `anchor` when given.
pub fn estimate_state(chunk: &Chunk, anchor: Option<&Frame>, spec: &EntitySpec, world: &WorldConfig, cfg: &OracleConfig) -> OracleEstimate {
    let mut valid = true;
    let mut headings = Vec::with_capacity(chunk.len());
    for f in &chunk.frames {
        match estimate_heading(f, spec, world, cfg) {
            Some(h) => headings.push(h),
            None => {
                valid = false;
                headings.push(f64::NAN);
            }
        }
    }
    let anchor_heading = anchor.map(|a| estimate_heading(a, spec, world, cfg));
    if anchor_heading == Some(None) {
        valid = false;
    }
    let mut displacements = Vec::with_capacity(chunk.len());
    let mut prev = anchor;
    for f in &chunk.frames {
        if let Some(p) = prev {
            displacements.push(background_displacement(p, f, world));
        }
        prev = Some(f);
    }
    OracleEstimate { headings, displacements, anchor_heading: anchor_heading.flatten(), valid }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Success,
    Fail,
    Invalid,
}

/// Judges one chunk against its commanded action. With `τ = 0.5·C·turn_rate`, a
/// left turn needs `Δθ ≥ τ`, a right turn `Δθ ≤ −τ`, and forward `|Δθ| < τ` with
/// at least half the commanded distance travelled.
pub fn judge_control(estimate: &OracleEstimate, action: ActionCommand, spec: &EntitySpec, world: &WorldConfig) -> Verdict {
    if !estimate.valid {
        return Verdict::Invalid;
    }
    let c = estimate.headings.len() as f64;
    let tau = 0.5 * c * spec.turn_rate;
    let dtheta = estimate.heading_change();
    let ok = match action {
        ActionCommand::Left => dtheta >= tau,
        ActionCommand::Right => dtheta <= -tau,
        ActionCommand::Forward => {
            dtheta.abs() < tau && estimate.total_displacement() / world.scale() >= 0.5 * c * spec.speed
        }
        ActionCommand::Zero => false,
    };
    if ok {
        Verdict::Success
    } else {
        Verdict::Fail
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use crate::worldsim::{generate_episode, EntityKind, EpisodeConfig};
    use rand::Rng;

    #[test]
    fn heading_error_within_two_degrees() {
        for world in [WorldConfig::default(), WorldConfig::reduced()] {
            for e in EntityKind::ALL {
                let ep = generate_episode(&EpisodeConfig::new(e, world), 3).unwrap();
                let spec = e.spec();
                for (f, s) in ep.chunks.iter().flat_map(|c| &c.frames).zip(&ep.true_states) {
                    let h = estimate_heading(f, &spec, &world, &OracleConfig::default()).expect("detected");
                    let err = angle_diff(h, s.heading).abs().to_degrees();
                    assert!(err <= 2.0, "{e} at {}px: {err}", world.width);
                }
            }
        }
    }

    #[test]
    fn forward_displacement_is_speed() {
        for world in [WorldConfig::default(), WorldConfig::reduced()] {
            let spec = EntityKind::GameCar.spec();
            let ep = generate_episode(&EpisodeConfig::new(EntityKind::GameCar, world), 8).unwrap();
            let actions = ep.actions.as_ref().unwrap();
            for (k, a) in actions.iter().enumerate() {
                if *a != ActionCommand::Forward {
                    continue;
                }
                let est = estimate_state(&ep.chunks[k + 1], Some(ep.chunks[k].last_frame()), &spec, &world, &OracleConfig::default());
                for d in &est.displacements {
                    let px = d[0].hypot(d[1]);
                    assert!((px - spec.speed * world.scale()).abs() <= 0.5 * world.scale(), "{px}");
                }
            }
        }
    }

    #[test]
    fn noise_is_invalid() {
        let world = WorldConfig::default();
        let mut rng = seed::rng(1, &[]);
        let frames = (0..4)
            .map(|_| Frame::from_pixels(32, 32, (0..32 * 32 * 3).map(|_| rng.random()).collect()).unwrap())
            .collect();
        let chunk = Chunk::new(frames).unwrap();
        let est = estimate_state(&chunk, None, &EntityKind::GameCar.spec(), &world, &OracleConfig::default());
        assert!(!est.valid);
        assert_eq!(judge_control(&est, ActionCommand::Left, &EntityKind::GameCar.spec(), &world), Verdict::Invalid);
    }

    #[test]
    fn ground_truth_chunks_are_judged_correctly() {
        let world = WorldConfig::default();
        let spec = EntityKind::GameCar.spec();
        let ep = generate_episode(&EpisodeConfig::new(EntityKind::GameCar, world), 4).unwrap();
        for (k, &a) in ep.actions.as_ref().unwrap().iter().enumerate() {
            let est = estimate_state(&ep.chunks[k + 1], Some(ep.chunks[k].last_frame()), &spec, &world, &OracleConfig::default());
            assert_eq!(judge_control(&est, a, &spec, &world), Verdict::Success);
            if a == ActionCommand::Forward {
                assert_eq!(judge_control(&est, ActionCommand::Left, &spec, &world), Verdict::Fail);
            }
        }
    }
}
