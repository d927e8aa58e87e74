//! Feature banks: per-layer feature maps for a labelled image set, their
//! `FBNK` version 1 binary encoding, and a seeded synthetic generator.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FBNK" | version u32 = 1 | layer_count u32 | image_count u32 | class_count u32
//! labels: image_count × u32
//! per layer: layer_id u32 | h u32 | w u32 | c u32 | image_count·h·w·c × f32
//! ```
//!
//! Payload is image-major, then row-major `(row, col, channel)`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

pub const BANK_MAGIC: &[u8; 4] = b"FBNK";
pub const BANK_VERSION: u32 = 1;

/// All images' maps at one backbone layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BankLayer {
    pub layer_id: u32,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub maps: Vec<FeatureMap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    pub layers: Vec<BankLayer>,
    pub labels: Vec<u32>,
    pub class_count: u32,
}

impl FeatureBank {
    pub fn image_count(&self) -> usize {
        self.labels.len()
    }

    pub fn layer(&self, layer_id: u32) -> Option<&BankLayer> {
        self.layers.iter().find(|l| l.layer_id == layer_id)
    }

    pub fn layer_ids(&self) -> Vec<u32> {
        self.layers.iter().map(|l| l.layer_id).collect()
    }

    /// Image indices grouped by label, each group in ascending index order.
    pub fn images_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.class_count as usize];
        for (i, &l) in self.labels.iter().enumerate() {
            if let Some(g) = groups.get_mut(l as usize) {
                g.push(i);
            }
        }
        groups
    }

    /// Checks the structural invariants: non-empty layer list, one map per
    /// image in every layer, uniform dims within a layer, labels in range.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Format("feature bank has no layers".into()));
        }
        let n = self.labels.len();
        for layer in &self.layers {
            if layer.maps.len() != n {
                return Err(Error::Validation(format!(
                    "layer {} holds {} maps but the bank has {n} labels",
                    layer.layer_id,
                    layer.maps.len()
                )));
            }
            if let Some(m) = layer
                .maps
                .iter()
                .find(|m| m.dims() != (layer.h, layer.w, layer.c))
            {
                return Err(Error::Validation(format!(
                    "layer {} declares {}x{}x{} but holds a {:?} map",
                    layer.layer_id,
                    layer.h,
                    layer.w,
                    layer.c,
                    m.dims()
                )));
            }
        }
        let mut ids: Vec<u32> = self.layer_ids();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.layers.len() {
            return Err(Error::Validation("duplicate layer ids".into()));
        }
        if let Some((i, l)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l >= self.class_count)
        {
            return Err(Error::Validation(format!(
                "label {l} of image {i} is outside [0, {})",
                self.class_count
            )));
        }
        Ok(())
    }
}

pub fn encode_bank(bank: &FeatureBank) -> Result<Vec<u8>> {
    bank.validate()?;
    let payload: usize = bank
        .layers
        .iter()
        .map(|l| 16 + 4 * l.maps.len() * l.h * l.w * l.c)
        .sum();
    let mut out = Vec::with_capacity(20 + 4 * bank.labels.len() + payload);
    out.extend_from_slice(BANK_MAGIC);
    put_u32(&mut out, BANK_VERSION);
    put_u32(&mut out, to_u32(bank.layers.len())?);
    put_u32(&mut out, to_u32(bank.labels.len())?);
    put_u32(&mut out, bank.class_count);
    for &l in &bank.labels {
        put_u32(&mut out, l);
    }
    for layer in &bank.layers {
        put_u32(&mut out, layer.layer_id);
        put_u32(&mut out, to_u32(layer.h)?);
        put_u32(&mut out, to_u32(layer.w)?);
        put_u32(&mut out, to_u32(layer.c)?);
        for m in &layer.maps {
            for &v in m.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_bank(bytes: &[u8]) -> Result<FeatureBank> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != BANK_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"FBNK\"",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.u32("version")?;
    if version != BANK_VERSION {
        return Err(Error::Format(format!("unsupported bank version {version}")));
    }
    let layer_count = r.u32("layer_count")? as usize;
    let image_count = r.u32("image_count")? as usize;
    let class_count = r.u32("class_count")?;
    let labels = (0..image_count)
        .map(|_| r.u32("labels"))
        .collect::<Result<Vec<_>>>()?;
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let layer_id = r.u32("layer_id")?;
        let h = r.u32("h")? as usize;
        let w = r.u32("w")? as usize;
        let c = r.u32("c")? as usize;
        let per_image = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(c))
            .ok_or_else(|| Error::Format(format!("layer {layer_id} dims overflow")))?;
        let mut maps = Vec::with_capacity(image_count);
        for _ in 0..image_count {
            let raw = r.take(4 * per_image, "payload")?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            let m = FeatureMap::new(h, w, c, data)
                .map_err(|e| Error::Format(format!("layer {layer_id}: {e}")))?;
            maps.push(m);
        }
        layers.push(BankLayer {
            layer_id,
            h,
            w,
            c,
            maps,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload at offset {}",
            bytes.len() - r.pos,
            r.pos
        )));
    }
    let bank = FeatureBank {
        layers,
        labels,
        class_count,
    };
    bank.validate()?;
    Ok(bank)
}

/// Writes `bank` to `path`. Nothing is written if the bank is invalid.
pub fn write_bank(bank: &FeatureBank, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_bank(bank)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bank(path: impl AsRef<Path>) -> Result<FeatureBank> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bank(&bytes)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                offset: self.pos,
                message: format!(
                    "truncated while reading {what}: need {len} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Shape of one generated layer, written `id:HxWxC` on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub layer_id: u32,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl FromStr for LayerShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("layer shape {s:?} is not of the form id:HxWxC"));
        let (id, dims) = s.trim().split_once(':').ok_or_else(bad)?;
        let dims: Vec<usize> = dims
            .split('x')
            .map(|d| d.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        let [h, w, c] = dims[..] else {
            return Err(bad());
        };
        if h == 0 || w == 0 || c == 0 {
            return Err(bad());
        }
        Ok(LayerShape {
            layer_id: id.trim().parse().map_err(|_| bad())?,
            h,
            w,
            c,
        })
    }
}

impl fmt::Display for LayerShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}x{}x{}", self.layer_id, self.h, self.w, self.c)
    }
}

/// Parameters of a synthetic bank: Gaussian class prototypes plus Gaussian
/// per-image noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub images_per_class: usize,
    pub layers: Vec<LayerShape>,
    pub prototype_scale: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

/// Generates a bank whose images are `prototype_scale·P_class +
/// noise_scale·ε` with standard-normal `P` and `ε`. Labels are class-major.
///
/// Values are rounded to `f32` so the in-memory bank equals its own
/// serialized round trip.
pub fn gen_synthetic_bank(spec: &SyntheticSpec) -> Result<FeatureBank> {
    if spec.class_count == 0 || spec.images_per_class == 0 || spec.layers.is_empty() {
        return Err(Error::Config(
            "synthetic bank needs at least one class, image and layer".into(),
        ));
    }
    if spec.prototype_scale.is_nan()
        || spec.prototype_scale <= 0.0
        || spec.noise_scale.is_nan()
        || spec.noise_scale < 0.0
    {
        return Err(Error::Config(
            "synthetic bank needs prototype_scale > 0 and noise_scale >= 0".into(),
        ));
    }
    let class_count =
        u32::try_from(spec.class_count).map_err(|_| Error::Config("too many classes".into()))?;
    let labels: Vec<u32> = (0..class_count)
        .flat_map(|c| std::iter::repeat_n(c, spec.images_per_class))
        .collect();

    let mut layers = Vec::with_capacity(spec.layers.len());
    for (li, shape) in spec.layers.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(li as u64);
        let len = shape.h * shape.w * shape.c;
        let prototypes: Vec<Vec<f64>> = (0..spec.class_count)
            .map(|_| {
                (0..len)
                    .map(|_| spec.prototype_scale * sample_normal(&mut rng))
                    .collect()
            })
            .collect();
        let mut maps = Vec::with_capacity(labels.len());
        for &label in &labels {
            let data = prototypes[label as usize]
                .iter()
                .map(|&p| {
                    let v = p + spec.noise_scale * sample_normal(&mut rng);
                    v as f32 as f64
                })
                .collect();
            maps.push(FeatureMap::new(shape.h, shape.w, shape.c, data)?);
        }
        layers.push(BankLayer {
            layer_id: shape.layer_id,
            h: shape.h,
            w: shape.w,
            c: shape.c,
            maps,
        });
    }
    let bank = FeatureBank {
        layers,
        labels,
        class_count,
    };
    bank.validate()?;
    Ok(bank)
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}
