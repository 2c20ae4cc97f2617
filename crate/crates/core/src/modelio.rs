//! Weight containers, IDX datasets and plan images.
//!
//! Weight container (`LNW1`, little-endian):
//!
//! ```text
//! "LNW1" | u32 version = 1 | u32 manifest_len | manifest JSON (UTF-8)
//! u32 layer_count
//! per layer:
//!   u8 kind (0 dense, 1 conv2d, 2 maxpool) | u8 activation (0 none, 1 relu, 2 sigmoid, 3 tanh)
//!   u16 name_len | name | u8 rank | rank x u32 dims
//!   u32 weight_count | f32 weights | u32 bias_count | f32 biases
//! 32-byte SHA-256 of everything before it
//! ```
//!
//! Dims are `[out, in]` for dense (row-major `W`), `[kh, kw, cin, cout]` for
//! conv2d and `[ph, pw]` for pooling.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compiler::{ActivationKind, NetworkPlan};
use crate::error::{Error, Result};
use crate::formats::{Code, NumericFormat, Rounding};

pub const CONTAINER_VERSION: u32 = 1;
pub const PLAN_VERSION: u32 = 1;
const WEIGHT_MAGIC: &[u8; 4] = b"LNW1";
const PLAN_MAGIC: &[u8; 4] = b"LNP1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Dense,
    Conv2d,
    MaxPool,
}

impl LayerKind {
    fn tag(self) -> u8 {
        match self {
            LayerKind::Dense => 0,
            LayerKind::Conv2d => 1,
            LayerKind::MaxPool => 2,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        Some(match t {
            0 => LayerKind::Dense,
            1 => LayerKind::Conv2d,
            2 => LayerKind::MaxPool,
            _ => return None,
        })
    }
}

fn activation_tag(a: Option<ActivationKind>) -> u8 {
    match a {
        None => 0,
        Some(ActivationKind::Relu) => 1,
        Some(ActivationKind::Sigmoid) => 2,
        Some(ActivationKind::Tanh) => 3,
    }
}

fn activation_from_tag(t: u8) -> Option<Option<ActivationKind>> {
    Some(match t {
        0 => None,
        1 => Some(ActivationKind::Relu),
        2 => Some(ActivationKind::Sigmoid),
        3 => Some(ActivationKind::Tanh),
        _ => return None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub kind: LayerKind,
    pub activation: Option<ActivationKind>,
    pub name: String,
    pub dims: Vec<usize>,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl LayerRecord {
    pub fn dense(name: &str, out: usize, inp: usize, weights: Vec<f32>, bias: Vec<f32>) -> Self {
        LayerRecord {
            kind: LayerKind::Dense,
            activation: None,
            name: name.into(),
            dims: vec![out, inp],
            weights,
            bias,
        }
    }

    pub fn conv2d(name: &str, k: usize, cin: usize, cout: usize, weights: Vec<f32>, bias: Vec<f32>) -> Self {
        LayerRecord {
            kind: LayerKind::Conv2d,
            activation: None,
            name: name.into(),
            dims: vec![k, k, cin, cout],
            weights,
            bias,
        }
    }

    pub fn maxpool(name: &str, ph: usize, pw: usize) -> Self {
        LayerRecord {
            kind: LayerKind::MaxPool,
            activation: None,
            name: name.into(),
            dims: vec![ph, pw],
            weights: Vec::new(),
            bias: Vec::new(),
        }
    }

    pub fn with_activation(mut self, a: ActivationKind) -> Self {
        self.activation = Some(a);
        self
    }

    /// Output shape for an input of `shape`; checks the record's own sizes.
    pub fn output_shape(&self, shape: &[usize]) -> Result<Vec<usize>> {
        let bad = |msg: String| Err(Error::Compile(format!("layer '{}': {msg}", self.name)));
        match self.kind {
            LayerKind::Dense => {
                let [out, inp] = self.dims[..] else {
                    return bad(format!("dense dims must be [out, in], got {:?}", self.dims));
                };
                let q: usize = shape.iter().product();
                if q != inp {
                    return bad(format!("expects {inp} inputs but receives shape {shape:?}"));
                }
                if self.weights.len() != out * inp || self.bias.len() != out {
                    return bad(format!(
                        "{} weights / {} biases do not match [{out}, {inp}]",
                        self.weights.len(),
                        self.bias.len()
                    ));
                }
                Ok(vec![out])
            }
            LayerKind::Conv2d => {
                let [kh, kw, cin, cout] = self.dims[..] else {
                    return bad(format!("conv dims must be [kh, kw, cin, cout], got {:?}", self.dims));
                };
                if kh != kw || kh % 2 == 0 {
                    return bad(format!("kernel must be square with odd side, got {kh}x{kw}"));
                }
                let [h, w, c] = shape[..] else {
                    return bad(format!("needs an [h, w, c] input, got {shape:?}"));
                };
                if c != cin {
                    return bad(format!("expects {cin} channels, input has {c}"));
                }
                if self.weights.len() != kh * kw * cin * cout || self.bias.len() != cout {
                    return bad("weight or bias count does not match dims".into());
                }
                Ok(vec![h, w, cout])
            }
            LayerKind::MaxPool => {
                let [ph, pw] = self.dims[..] else {
                    return bad(format!("pool dims must be [ph, pw], got {:?}", self.dims));
                };
                let [h, w, c] = shape[..] else {
                    return bad(format!("needs an [h, w, c] input, got {shape:?}"));
                };
                if ph == 0 || pw == 0 || h < ph || w < pw {
                    return bad(format!("window {ph}x{pw} does not fit {h}x{w}"));
                }
                Ok(vec![h / ph, w / pw, c])
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub arch: String,
    pub input_shape: Vec<usize>,
    /// Format of the first layer's input (e.g. `u3`, `u8`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_format: Option<String>,
    /// Per-layer format tags keyed by layer name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub formats: BTreeMap<String, String>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightContainer {
    pub manifest: Manifest,
    pub layers: Vec<LayerRecord>,
}

impl WeightContainer {
    pub fn input_format(&self) -> Result<Option<NumericFormat>> {
        self.manifest
            .input_format
            .as_deref()
            .map(str::parse)
            .transpose()
    }

    /// Output shape of every layer; errors name the layer that breaks the chain.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.manifest.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            shape = l.output_shape(&shape)?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    /// Bytes of f32 weights and biases.
    pub fn payload_bytes(&self) -> usize {
        self.layers
            .iter()
            .map(|l| 4 * (l.weights.len() + l.bias.len()))
            .sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut b = Vec::with_capacity(self.payload_bytes() + 1024);
        b.extend_from_slice(WEIGHT_MAGIC);
        b.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        let manifest = serde_json::to_vec(&self.manifest)
            .map_err(|e| Error::Config(format!("manifest: {e}")))?;
        b.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        b.extend_from_slice(&manifest);
        b.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            b.push(l.kind.tag());
            b.push(activation_tag(l.activation));
            let name = l.name.as_bytes();
            if name.len() > u16::MAX as usize || l.dims.len() > u8::MAX as usize {
                return Err(Error::Config(format!("layer '{}' name or rank too long", l.name)));
            }
            b.extend_from_slice(&(name.len() as u16).to_le_bytes());
            b.extend_from_slice(name);
            b.push(l.dims.len() as u8);
            for &d in &l.dims {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for t in [&l.weights, &l.bias] {
                b.extend_from_slice(&(t.len() as u32).to_le_bytes());
                for v in t.iter() {
                    b.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        Ok(b)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + 32 {
            return Err(Error::parse(bytes.len() as u64, "file too short for a weight container"));
        }
        if &bytes[..4] != WEIGHT_MAGIC {
            return Err(Error::parse(0, "bad magic, expected LNW1"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CONTAINER_VERSION {
            return Err(Error::Version(version));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checksum);
        }
        let mut r = Reader::new(body);
        r.pos = 8;
        let mlen = r.u32()? as usize;
        let at = r.pos;
        let manifest: Manifest = serde_json::from_slice(r.take(mlen)?)
            .map_err(|e| Error::parse(at as u64, format!("manifest: {e}")))?;
        let count = r.u32()? as usize;
        let mut layers = Vec::new();
        for _ in 0..count {
            let at = r.pos as u64;
            let kind = LayerKind::from_tag(r.u8()?)
                .ok_or_else(|| Error::parse(at, "unknown layer kind"))?;
            let activation = activation_from_tag(r.u8()?)
                .ok_or_else(|| Error::parse(at + 1, "unknown activation"))?;
            let nlen = r.u16()? as usize;
            let at = r.pos as u64;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::parse(at, "layer name is not UTF-8"))?;
            let rank = r.u8()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let weights = r.f32s()?;
            let bias = r.f32s()?;
            layers.push(LayerRecord {
                kind,
                activation,
                name,
                dims,
                weights,
                bias,
            });
        }
        if r.pos != body.len() {
            return Err(Error::parse(r.pos as u64, "trailing bytes after last layer"));
        }
        Ok(WeightContainer { manifest, layers })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Bounds-checked little-endian reader; every error carries the byte offset.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::parse(
                self.pos as u64,
                format!("need {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.u32()? as usize;
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::parse(self.pos as u64, "length overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Labeled 8-bit images.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxDataset {
    pub rows: usize,
    pub cols: usize,
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
}

impl IdxDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.pixels();
        &self.images[i * n..(i + 1) * n]
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> IdxDataset {
        let n = n.min(self.len());
        IdxDataset {
            rows: self.rows,
            cols: self.cols,
            images: self.images[..n * self.pixels()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

fn idx_header(r: &mut Reader<'_>, magic: u32) -> Result<Vec<usize>> {
    let m = u32::from_be_bytes(r.take(4)?.try_into().unwrap());
    if m != magic {
        return Err(Error::parse(0, format!("bad IDX magic {m:#010x}, expected {magic:#010x}")));
    }
    let rank = (magic & 0xff) as usize;
    (0..rank)
        .map(|_| Ok(u32::from_be_bytes(r.take(4)?.try_into().unwrap()) as usize))
        .collect()
}

/// Parses an IDX image file (magic `0x00000803`).
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut r = Reader::new(bytes);
    let dims = idx_header(&mut r, 0x0803)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let total = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::parse(4, "image dimensions overflow"))?;
    let data = r.take(total)?.to_vec();
    Ok((rows, cols, data))
}

/// Parses an IDX label file (magic `0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = Reader::new(bytes);
    let dims = idx_header(&mut r, 0x0801)?;
    Ok(r.take(dims[0])?.to_vec())
}

pub fn read_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<IdxDataset> {
    let (rows, cols, images) = parse_idx_images(&std::fs::read(images)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels)?)?;
    if images.len() != labels.len() * rows * cols {
        return Err(Error::Domain(format!(
            "{} images but {} labels",
            images.len() / (rows * cols).max(1),
            labels.len()
        )));
    }
    if let Some(i) = labels.iter().position(|&l| l >= 10) {
        return Err(Error::Domain(format!("label {} at index {i} is not a digit class", labels[i])));
    }
    Ok(IdxDataset {
        rows,
        cols,
        images,
        labels,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Dataset root: `$LUTNET_DATA_DIR`, else `./data`.
pub fn data_dir() -> PathBuf {
    std::env::var_os("LUTNET_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Loads `<root>/<name>/{train,t10k}-{images-idx3,labels-idx1}-ubyte`.
pub fn load_split(root: &Path, name: &str, split: Split) -> Result<IdxDataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let dir = root.join(name);
    let images = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let labels = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    if !images.exists() || !labels.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!(
                "dataset files not found under {} (run scripts/fetch_datasets.py or set LUTNET_DATA_DIR)",
                dir.display()
            ),
        )));
    }
    read_idx(images, labels)
}

/// Pixels scaled to `p / 255` and rounded to nearest even in `format`.
pub fn pixel_codes(pixels: &[u8], format: NumericFormat) -> Vec<Code> {
    let table: Vec<Code> = (0..=255u32)
        .map(|p| {
            format
                .quantize(p as f64 / 255.0, Rounding::NearestEven)
                .expect("finite pixel value")
        })
        .collect();
    pixels.iter().map(|&p| table[p as usize]).collect()
}

/// Plan image: `"LNP1" | u32 version | u64 len | CBOR plan | SHA-256`.
pub fn plan_to_bytes(plan: &NetworkPlan) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    ciborium::into_writer(plan, &mut payload)
        .map_err(|e| Error::Run(format!("plan serialization failed: {e}")))?;
    let mut b = Vec::with_capacity(payload.len() + 48);
    b.extend_from_slice(PLAN_MAGIC);
    b.extend_from_slice(&PLAN_VERSION.to_le_bytes());
    b.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    b.extend_from_slice(&payload);
    let digest = Sha256::digest(&b);
    b.extend_from_slice(&digest);
    Ok(b)
}

pub fn plan_from_bytes(bytes: &[u8]) -> Result<NetworkPlan> {
    if bytes.len() < 16 + 32 {
        return Err(Error::parse(bytes.len() as u64, "file too short for a plan image"));
    }
    if &bytes[..4] != PLAN_MAGIC {
        return Err(Error::parse(0, "bad magic, expected LNP1"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != PLAN_VERSION {
        return Err(Error::Version(version));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum);
    }
    let len = u64::from_le_bytes(body[8..16].try_into().unwrap());
    if len != (body.len() - 16) as u64 {
        return Err(Error::parse(8, "payload length does not match file size"));
    }
    ciborium::from_reader(&body[16..]).map_err(|e| Error::parse(16, format!("plan payload: {e}")))
}

pub fn save_plan(plan: &NetworkPlan, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, plan_to_bytes(plan)?)?;
    Ok(())
}

pub fn load_plan(path: impl AsRef<Path>) -> Result<NetworkPlan> {
    plan_from_bytes(&std::fs::read(path)?)
}
