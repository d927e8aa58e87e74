//! Dense numeric primitives: feature maps, pixel matrices, adaptive average
//! pooling, cosine similarity and mean embeddings.
//!
//! All arithmetic is `f64`; the on-disk bank format is `f32`.

use crate::error::{Error, Result};

/// Norm threshold below which cosine similarity is defined as zero.
pub const COSINE_EPS: f64 = 1e-12;

/// One image's activations at one backbone layer, stored row-major as
/// `(row, column, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::invalid(format!(
                "feature map dims must be positive, got {h}x{w}x{c}"
            )));
        }
        if data.len() != h * w * c {
            return Err(Error::invalid(format!(
                "feature map {h}x{w}x{c} needs {} values, got {}",
                h * w * c,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "feature map value at index {pos} is not finite"
            )));
        }
        Ok(Self { h, w, c, data })
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f64) -> Result<Self> {
        Self::new(h, w, c, vec![value; h * w * c])
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn pixel_count(&self) -> usize {
        self.h * self.w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.w + col) * self.c + ch]
    }

    /// Channel vector of the pixel at flat index `p = row * w + col`.
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.c..(p + 1) * self.c]
    }

    /// Reorders pixels so that output pixel `p` is input pixel `perm[p]`.
    pub fn permute_pixels(&self, perm: &[usize]) -> Result<Self> {
        let n = self.pixel_count();
        if perm.len() != n || !is_permutation(perm) {
            return Err(Error::invalid(
                "pixel permutation has wrong length or repeats",
            ));
        }
        let mut data = Vec::with_capacity(self.data.len());
        for &src in perm {
            data.extend_from_slice(self.pixel(src));
        }
        Ok(Self { data, ..*self })
    }
}

/// Row-per-pixel view of a feature map (`n = h·w` rows of `c` channels).
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMatrix {
    n: usize,
    c: usize,
    data: Vec<f64>,
}

impl PixelMatrix {
    pub fn new(n: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || c == 0 {
            return Err(Error::invalid(format!(
                "pixel matrix dims must be positive, got {n}x{c}"
            )));
        }
        if data.len() != n * c {
            return Err(Error::invalid(format!(
                "pixel matrix {n}x{c} needs {} values, got {}",
                n * c,
                data.len()
            )));
        }
        Ok(Self { n, c, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::invalid("pixel matrix rows have unequal lengths"));
        }
        Self::new(rows.len(), c, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.c..(i + 1) * self.c]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.c)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

pub(crate) fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

/// Adaptive average pooling with the usual floor/ceil region rule: output
/// cell `i` covers input rows `[⌊i·h/out_h⌋, ⌈(i+1)·h/out_h⌉)`.
pub fn adaptive_avg_pool(m: &FeatureMap, out_h: usize, out_w: usize) -> Result<FeatureMap> {
    if out_h == 0 || out_w == 0 || out_h > m.h || out_w > m.w {
        return Err(Error::invalid(format!(
            "cannot pool {}x{} map to {out_h}x{out_w}",
            m.h, m.w
        )));
    }
    if out_h == m.h && out_w == m.w {
        return Ok(m.clone());
    }
    let c = m.c;
    let mut out = vec![0.0; out_h * out_w * c];
    for i in 0..out_h {
        let (r0, r1) = pool_bounds(i, m.h, out_h);
        for j in 0..out_w {
            let (c0, c1) = pool_bounds(j, m.w, out_w);
            let cell = &mut out[(i * out_w + j) * c..(i * out_w + j + 1) * c];
            for r in r0..r1 {
                for col in c0..c1 {
                    let px = m.pixel(r * m.w + col);
                    for (acc, v) in cell.iter_mut().zip(px) {
                        *acc += v;
                    }
                }
            }
            let count = ((r1 - r0) * (c1 - c0)) as f64;
            for acc in cell.iter_mut() {
                *acc /= count;
            }
        }
    }
    FeatureMap::new(out_h, out_w, c, out)
}

fn pool_bounds(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

/// Reshape `h×w×c` to `hw×c`; row `i·w + j` is the pixel at `(i, j)`.
pub fn flatten_spatial(m: &FeatureMap) -> PixelMatrix {
    PixelMatrix {
        n: m.h * m.w,
        c: m.c,
        data: m.data.clone(),
    }
}

/// Inverse of [`flatten_spatial`].
pub fn unflatten_spatial(p: &PixelMatrix, h: usize, w: usize) -> Result<FeatureMap> {
    if h * w != p.n {
        return Err(Error::invalid(format!(
            "cannot unflatten {} rows into {h}x{w}",
            p.n
        )));
    }
    FeatureMap::new(h, w, p.c, p.data.clone())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; zero when either norm is below [`COSINE_EPS`].
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(format!(
            "cosine needs equal non-empty lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(cosine_unchecked(a, b))
}

pub(crate) fn cosine_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na < COSINE_EPS || nb < COSINE_EPS {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Per-channel mean over all spatial positions.
pub fn mean_embedding(m: &FeatureMap) -> Vec<f64> {
    let mut acc = vec![0.0; m.c];
    for px in m.data.chunks_exact(m.c) {
        for (a, v) in acc.iter_mut().zip(px) {
            *a += v;
        }
    }
    let n = m.pixel_count() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}
