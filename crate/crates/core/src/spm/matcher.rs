use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::PixelMatrix;

pub const MATCHER_MAGIC: &[u8; 4] = b"MPAR";
const MATCHER_VERSION: u32 = 1;

/// Residual bottleneck MLP for one layer: `v + relu(relu(v·W1 + b1)·W2 + b2)`.
///
/// `w1` is `c × hidden` and `w2` is `hidden × c`, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MatcherParams {
    pub c: usize,
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl MatcherParams {
    /// Bottleneck width: half the channels, at least one.
    pub fn hidden_for(c: usize) -> usize {
        (c / 2).max(1)
    }

    pub fn zeros(c: usize) -> Self {
        let hidden = Self::hidden_for(c);
        Self {
            c,
            hidden,
            w1: vec![0.0; c * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * c],
            b2: vec![0.0; c],
        }
    }

    /// Weights uniform in `±1/√fan_in`, zero biases.
    pub fn init(c: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(c);
        let a1 = 1.0 / (c as f64).sqrt();
        let a2 = 1.0 / (p.hidden as f64).sqrt();
        p.w1.iter_mut().for_each(|w| *w = rng.random_range(-a1..a1));
        p.w2.iter_mut().for_each(|w| *w = rng.random_range(-a2..a2));
        p
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// All parameters in storage order `W1, b1, W2, b2`.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
    }

    fn check(&self) -> Result<()> {
        let ok = self.c >= 1
            && self.hidden == Self::hidden_for(self.c)
            && self.w1.len() == self.c * self.hidden
            && self.b1.len() == self.hidden
            && self.w2.len() == self.hidden * self.c
            && self.b2.len() == self.c;
        if !ok {
            return Err(Error::invalid(format!(
                "matcher parameter shapes inconsistent with c = {}",
                self.c
            )));
        }
        if self.values().any(|v| !v.is_finite()) {
            return Err(Error::invalid("matcher parameters must be finite"));
        }
        Ok(())
    }

    /// Forward pass for one row, keeping pre-activations for the backward pass.
    pub(crate) fn forward_row(&self, v: &[f64]) -> RowCache {
        let (c, hid) = (self.c, self.hidden);
        let mut z1 = self.b1.clone();
        for (k, &x) in v.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let w = &self.w1[k * hid..(k + 1) * hid];
            for (z, &wk) in z1.iter_mut().zip(w) {
                *z += x * wk;
            }
        }
        let mut z2 = self.b2.clone();
        for (u, &z) in z1.iter().enumerate() {
            let a = z.max(0.0);
            if a == 0.0 {
                continue;
            }
            let w = &self.w2[u * c..(u + 1) * c];
            for (zz, &wu) in z2.iter_mut().zip(w) {
                *zz += a * wu;
            }
        }
        let out = v.iter().zip(&z2).map(|(x, z)| x + z.max(0.0)).collect();
        RowCache { z1, z2, out }
    }
}

/// Pre-activations and output of one matcher row.
#[derive(Debug, Clone)]
pub(crate) struct RowCache {
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
    pub out: Vec<f64>,
}

pub fn matcher_forward(x: &PixelMatrix, p: &MatcherParams) -> Result<PixelMatrix> {
    p.check()?;
    if x.c() != p.c {
        return Err(Error::invalid(format!(
            "matcher for {} channels applied to {}-channel pixels",
            p.c,
            x.c()
        )));
    }
    let mut data = Vec::with_capacity(x.data().len());
    for row in x.rows() {
        data.extend(p.forward_row(row).out);
    }
    PixelMatrix::new(x.n(), x.c(), data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMatcher {
    pub layer_id: u32,
    pub params: MatcherParams,
}

/// One matcher per backbone layer; no sharing across layers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatcherSet {
    pub layers: Vec<LayerMatcher>,
}

impl MatcherSet {
    pub fn zeros(layers: &[(u32, usize)]) -> Self {
        Self {
            layers: layers
                .iter()
                .map(|&(layer_id, c)| LayerMatcher {
                    layer_id,
                    params: MatcherParams::zeros(c),
                })
                .collect(),
        }
    }

    pub fn init(layers: &[(u32, usize)], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            layers: layers
                .iter()
                .map(|&(layer_id, c)| LayerMatcher {
                    layer_id,
                    params: MatcherParams::init(c, &mut rng),
                })
                .collect(),
        }
    }

    pub fn get(&self, layer_id: u32) -> Option<&MatcherParams> {
        self.layers
            .iter()
            .find(|l| l.layer_id == layer_id)
            .map(|l| &l.params)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.params.param_count()).sum()
    }
}

/// `MPAR` encoding: 16-byte header (magic, version u32, layer_count u32,
/// reserved u32 = 0), then per layer `layer_id u32, c u32` followed by
/// `W1, b1, W2, b2` as little-endian `f32`.
pub fn encode_matchers(set: &MatcherSet) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MATCHER_MAGIC);
    out.extend_from_slice(&MATCHER_VERSION.to_le_bytes());
    out.extend_from_slice(&(set.layers.len() as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for l in &set.layers {
        l.params.check()?;
        out.extend_from_slice(&l.layer_id.to_le_bytes());
        out.extend_from_slice(&(l.params.c as u32).to_le_bytes());
        for &v in l.params.values() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_matchers(bytes: &[u8]) -> Result<MatcherSet> {
    let mut pos = 0usize;
    let mut take = |len: usize| -> Result<&[u8]> {
        let end = pos + len;
        if end > bytes.len() {
            return Err(Error::Truncated {
                offset: pos,
                message: format!("matcher file needs {len} more bytes"),
            });
        }
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    let u32_at = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]);

    if take(4)? != MATCHER_MAGIC {
        return Err(Error::Format("bad matcher magic, expected \"MPAR\"".into()));
    }
    let version = u32_at(take(4)?);
    if version != MATCHER_VERSION {
        return Err(Error::Format(format!(
            "unsupported matcher version {version}"
        )));
    }
    let layer_count = u32_at(take(4)?) as usize;
    if u32_at(take(4)?) != 0 {
        return Err(Error::Format("reserved header field must be zero".into()));
    }
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let layer_id = u32_at(take(4)?);
        let c = u32_at(take(4)?) as usize;
        if c == 0 {
            return Err(Error::Format(format!("layer {layer_id} has zero channels")));
        }
        let mut params = MatcherParams::zeros(c);
        let raw = take(4 * params.param_count())?;
        for (dst, b) in params.values_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
        }
        params
            .check()
            .map_err(|e| Error::Format(format!("layer {layer_id}: {e}")))?;
        layers.push(LayerMatcher { layer_id, params });
    }
    if pos != bytes.len() {
        return Err(Error::Format("trailing bytes after matcher payload".into()));
    }
    Ok(MatcherSet { layers })
}

pub fn write_matchers(set: &MatcherSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_matchers(set)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_matchers(path: impl AsRef<Path>) -> Result<MatcherSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matchers(&bytes)
}
