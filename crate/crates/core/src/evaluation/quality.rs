//! Reference-free and reference-based visual quality for generated chunks.

use serde::{Deserialize, Serialize};

use super::oracle::{background_displacement, estimate_heading, OracleConfig};
use crate::error::{Error, Result};
use crate::worldsim::{generate_episode, Chunk, Domain, EntityKind, EntitySpec, EpisodeConfig, Frame, WorldConfig, BODY_RADIUS};

/// Levels per channel of the palette histogram (4³ = 64 bins).
const LEVELS: usize = 4;
pub const HISTOGRAM_BINS: usize = LEVELS * LEVELS * LEVELS;

/// Motion-compensated mean absolute difference that maps to zero consistency.
pub const MAD_SCALE: f64 = 0.25;

/// Normalised colour histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram(pub Vec<f64>);

impl Histogram {
    pub fn of_frames<'a>(frames: impl IntoIterator<Item = &'a Frame>) -> Histogram {
        let mut bins = vec![0.0; HISTOGRAM_BINS];
        let mut n = 0.0;
        for f in frames {
            for p in f.pixels.chunks_exact(3) {
                let q = |v: u8| v as usize * LEVELS / 256;
                bins[(q(p[0]) * LEVELS + q(p[1])) * LEVELS + q(p[2])] += 1.0;
                n += 1.0;
            }
        }
        if n > 0.0 {
            bins.iter_mut().for_each(|b| *b /= n);
        }
        Histogram(bins)
    }

    /// Half the L1 distance, in `[0, 1]`.
    pub fn distance(&self, other: &Histogram) -> f64 {
        0.5 * self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }
}

/// Mean luma gradient magnitude in `[0, 1]` pixel units (forward differences).
pub fn gradient_energy(frame: &Frame) -> f64 {
    let (h, w) = (frame.height, frame.width);
    let luma = |r: usize, c: usize| frame.pixel(r, c).iter().map(|&v| v as f64).sum::<f64>() / (3.0 * 255.0);
    let mut total = 0.0;
    for r in 0..h - 1 {
        for c in 0..w - 1 {
            let gx = luma(r, c + 1) - luma(r, c);
            let gy = luma(r + 1, c) - luma(r, c);
            total += gx.hypot(gy);
        }
    }
    total / ((h - 1) * (w - 1)).max(1) as f64
}

/// Mean absolute difference between `b` and `a` after undoing the background
/// scroll; the central entity disk is compared in place.
pub fn compensated_mad(a: &Frame, b: &Frame, world: &WorldConfig) -> f64 {
    let shift = background_displacement(a, b, world);
    let n = a.width;
    let centre = n as f64 / 2.0;
    let radius = BODY_RADIUS * world.scale();
    let mut total = 0.0;
    for r in 0..n {
        for c in 0..n {
            let (dx, dy) = (c as f64 + 0.5 - centre, r as f64 + 0.5 - centre);
            let src = if dx * dx + dy * dy <= radius * radius {
                a.pixel(r, c).map(f64::from)
            } else {
                // image x follows +dx, image rows follow −dy
                sample_rgb(a, r as f64 + shift[1], c as f64 - shift[0])
            };
            let dst = b.pixel(r, c);
            total += (0..3).map(|k| (dst[k] as f64 - src[k]).abs()).sum::<f64>() / 3.0;
        }
    }
    total / (n * n) as f64 / 255.0
}

fn sample_rgb(f: &Frame, row: f64, col: f64) -> [f64; 3] {
    let n = f.width as i64;
    let (r0, c0) = (row.floor(), col.floor());
    let (fr, fc) = (row - r0, col - c0);
    let at = |r: i64, c: i64| f.pixel(r.rem_euclid(n) as usize, c.rem_euclid(n) as usize).map(f64::from);
    let (r0, c0) = (r0 as i64, c0 as i64);
    let (a, b, c, d) = (at(r0, c0), at(r0, c0 + 1), at(r0 + 1, c0), at(r0 + 1, c0 + 1));
    [0, 1, 2].map(|k| (1.0 - fr) * ((1.0 - fc) * a[k] + fc * b[k]) + fr * ((1.0 - fc) * c[k] + fc * d[k]))
}

/// Ground-truth statistics of one domain, the yardstick for generated chunks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainReference {
    pub domain: Domain,
    pub histogram: Histogram,
    pub gradient: f64,
}

impl DomainReference {
    /// Built from `episodes` simulator episodes of each entity in `domain`.
    pub fn build(domain: Domain, world: &WorldConfig, episodes: usize, seed: u64) -> Result<Self> {
        let entities: Vec<_> = EntityKind::ALL.into_iter().filter(|e| e.domain() == domain).collect();
        if entities.is_empty() || episodes == 0 {
            return Err(Error::Evaluation(format!("no reference entities for the {} domain", domain.as_str())));
        }
        let mut frames = Vec::new();
        for e in entities {
            for i in 0..episodes {
                let ep = generate_episode(&EpisodeConfig::new(e, *world), seed.wrapping_add(i as u64))?;
                frames.extend(ep.chunks.into_iter().flat_map(|c| c.frames));
            }
        }
        let gradient = frames.iter().map(gradient_energy).sum::<f64>() / frames.len() as f64;
        Ok(DomainReference { domain, histogram: Histogram::of_frames(&frames), gradient })
    }
}

/// Per-chunk quality. Every field is in `[0, 1]`; drift is lower-is-better, the rest
/// higher-is-better.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct QualityReport {
    pub palette_drift: f64,
    pub sharpness: f64,
    pub temporal_consistency: f64,
    pub oracle_validity_rate: f64,
}

/// Weights of the composite score, in field order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositeWeights(pub [f64; 4]);

impl Default for CompositeWeights {
    fn default() -> Self {
        CompositeWeights([1.0; 4])
    }
}

impl QualityReport {
    pub fn composite(&self) -> f64 {
        self.composite_with(&CompositeWeights::default())
    }

    /// Weighted mean of `1 − drift`, sharpness, consistency and validity.
    pub fn composite_with(&self, w: &CompositeWeights) -> f64 {
        let v = [1.0 - self.palette_drift, self.sharpness, self.temporal_consistency, self.oracle_validity_rate];
        v.iter().zip(&w.0).map(|(x, w)| x * w).sum::<f64>() / w.0.iter().sum::<f64>()
    }

    pub fn mean(reports: &[QualityReport]) -> QualityReport {
        let n = reports.len().max(1) as f64;
        reports.iter().fold(QualityReport::default(), |acc, r| QualityReport {
            palette_drift: acc.palette_drift + r.palette_drift / n,
            sharpness: acc.sharpness + r.sharpness / n,
            temporal_consistency: acc.temporal_consistency + r.temporal_consistency / n,
            oracle_validity_rate: acc.oracle_validity_rate + r.oracle_validity_rate / n,
        })
    }
}

/// Mean temporal consistency over consecutive frame pairs, starting from `anchor`.
pub fn temporal_consistency(chunk: &Chunk, anchor: Option<&Frame>, world: &WorldConfig) -> f64 {
    let mut prev = anchor;
    let mut scores = Vec::new();
    for f in &chunk.frames {
        if let Some(p) = prev {
            scores.push((1.0 - compensated_mad(p, f, world) / MAD_SCALE).clamp(0.0, 1.0));
        }
        prev = Some(f);
    }
    if scores.is_empty() {
        1.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

pub fn assess_chunk(
    chunk: &Chunk,
    anchor: Option<&Frame>,
    spec: &EntitySpec,
    reference: &DomainReference,
    world: &WorldConfig,
    oracle: &OracleConfig,
) -> QualityReport {
    let sharp = chunk.frames.iter().map(gradient_energy).sum::<f64>() / chunk.len() as f64;
    let valid = chunk.frames.iter().filter(|f| estimate_heading(f, spec, world, oracle).is_some()).count();
    QualityReport {
        palette_drift: Histogram::of_frames(&chunk.frames).distance(&reference.histogram),
        sharpness: if reference.gradient > 0.0 { (sharp / reference.gradient).min(1.0) } else { 0.0 },
        temporal_consistency: temporal_consistency(chunk, anchor, world),
        oracle_validity_rate: valid as f64 / chunk.len() as f64,
    }
}

/// Share of the histogram distance budget pointing at `toward` rather than `own`:
/// `d_own / (d_own + d_toward)`. 0 means identical to `own`, 1 identical to `toward`.
pub fn palette_affinity(chunks: &[Chunk], own: &DomainReference, toward: &DomainReference) -> f64 {
    let h = Histogram::of_frames(chunks.iter().flat_map(|c| &c.frames));
    let (a, b) = (h.distance(&own.histogram), h.distance(&toward.histogram));
    if a + b == 0.0 {
        0.5
    } else {
        a / (a + b)
    }
}
