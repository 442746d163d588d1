use crate::error::{Error, Result};
use crate::tensor::Real;

/// Token geometry for one `(condition chunk, target chunk)` pair.
///
/// Condition tokens occupy temporal slots `[0, C)` and target tokens `[C, 2C)`;
/// within a frame, patches are flattened in raster order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub n_cond: usize,
    pub n_tgt: usize,
    pub patch: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub chunk_len: usize,
}

impl TokenLayout {
    pub fn new(height: usize, width: usize, chunk_len: usize, patch: usize) -> Result<Self> {
        if patch == 0 || height % patch != 0 || width % patch != 0 {
            return Err(Error::Shape(format!("patch {patch} does not divide {height}x{width}")));
        }
        let (grid_h, grid_w) = (height / patch, width / patch);
        let n = chunk_len * grid_h * grid_w;
        Ok(TokenLayout { n_cond: n, n_tgt: n, patch, grid_h, grid_w, chunk_len })
    }

    /// Layout with an explicit token split, for mask experiments.
    pub fn with_counts(n_cond: usize, n_tgt: usize) -> Self {
        TokenLayout { n_cond, n_tgt, patch: 1, grid_h: 1, grid_w: 1, chunk_len: n_cond.max(1) }
    }

    pub fn tokens(&self) -> usize {
        self.n_cond + self.n_tgt
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// `(temporal slot, grid row, grid column)` of token `i`.
    pub fn position(&self, i: usize) -> (usize, usize, usize) {
        let per = self.tokens_per_frame();
        let slot = i / per;
        let within = i % per;
        (slot, within / self.grid_w, within % self.grid_w)
    }

    pub fn is_condition(&self, i: usize) -> bool {
        i < self.n_cond
    }

    pub fn height(&self) -> usize {
        self.grid_h * self.patch
    }

    pub fn width(&self) -> usize {
        self.grid_w * self.patch
    }
}

/// Tokens of one chunk (`C·H·W·3` values, frame-major HWC) as `[C·gh·gw × p·p·3]`.
pub fn patchify_chunk<T: Real>(layout: &TokenLayout, values: &[T]) -> Result<Vec<T>> {
    let (h, w, p) = (layout.height(), layout.width(), layout.patch);
    let c = layout.chunk_len;
    if values.len() != c * h * w * 3 {
        return Err(Error::Shape(format!("{} values for a {c}x{h}x{w} chunk", values.len())));
    }
    let mut out = Vec::with_capacity(values.len());
    for f in 0..c {
        for gy in 0..layout.grid_h {
            for gx in 0..layout.grid_w {
                for py in 0..p {
                    let row = gy * p + py;
                    let start = ((f * h + row) * w + gx * p) * 3;
                    out.extend_from_slice(&values[start..start + p * 3]);
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`patchify_chunk`].
pub fn unpatchify_chunk<T: Real>(layout: &TokenLayout, tokens: &[T]) -> Result<Vec<T>> {
    let (h, w, p) = (layout.height(), layout.width(), layout.patch);
    let c = layout.chunk_len;
    if tokens.len() != c * h * w * 3 {
        return Err(Error::Shape(format!("{} token values for a {c}x{h}x{w} chunk", tokens.len())));
    }
    let mut out = vec![T::zero(); tokens.len()];
    let mut at = 0;
    for f in 0..c {
        for gy in 0..layout.grid_h {
            for gx in 0..layout.grid_w {
                for py in 0..p {
                    let row = gy * p + py;
                    let start = ((f * h + row) * w + gx * p) * 3;
                    out[start..start + p * 3].copy_from_slice(&tokens[at..at + p * 3]);
                    at += p * 3;
                }
            }
        }
    }
    Ok(out)
}

/// Token sequence `[condition | target]` for one chunk pair.
pub fn patchify<T: Real>(layout: &TokenLayout, cond: &[T], target: &[T]) -> Result<Vec<T>> {
    if cond.len() != target.len() {
        return Err(Error::Shape(format!(
            "condition chunk has {} values, target {}",
            cond.len(),
            target.len()
        )));
    }
    let mut out = patchify_chunk(layout, cond)?;
    out.extend(patchify_chunk(layout, target)?);
    Ok(out)
}

fn sincos<T: Real>(pos: usize, dim: usize, out: &mut Vec<T>) {
    let half = dim / 2;
    for i in 0..half {
        let freq = (-(100f64.ln()) * i as f64 / half as f64).exp();
        out.push(T::lit((pos as f64 * freq).sin()));
    }
    for i in 0..half {
        let freq = (-(100f64.ln()) * i as f64 / half as f64).exp();
        out.push(T::lit((pos as f64 * freq).cos()));
    }
}

/// Widths of the temporal and the two spatial parts of the positional code.
pub(crate) fn encoding_split(dim: usize) -> (usize, usize) {
    let spatial = (3 * dim / 8) & !1;
    (dim - 2 * spatial, spatial)
}

/// Factorized sinusoidal `(t, y, x)` encoding, `[tokens × dim]`: the temporal
/// code followed by the row code and the column code.
pub fn positional_encoding<T: Real>(layout: &TokenLayout, dim: usize) -> Vec<T> {
    let (dt, ds) = encoding_split(dim);
    let mut out = Vec::with_capacity(layout.tokens() * dim);
    for i in 0..layout.tokens() {
        let (slot, gy, gx) = layout.position(i);
        sincos(slot, dt, &mut out);
        sincos(gy, ds, &mut out);
        sincos(gx, ds, &mut out);
    }
    out
}

/// Row-major `[n × n]` boolean mask; `mask[i·n + j]` allows token `i` to attend to `j`.
pub fn build_attention_mask(layout: &TokenLayout) -> Vec<bool> {
    let n = layout.tokens();
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            mask[i * n + j] = !layout.is_condition(i) || layout.is_condition(j);
        }
    }
    mask
}
