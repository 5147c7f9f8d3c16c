//! Lossy delta codecs and their binary container (`DLTC`).
//!
//! Two codecs compress a weight-delta [`TensorMap`]:
//!
//! - **DARE** ([`dare_compress`]): each element is independently dropped with
//!   probability `sparse_rate` and the survivors are rescaled by
//!   `1 / (1 - sparse_rate)`, which keeps the decoded delta unbiased. The
//!   drop mask comes from a counter-based RNG keyed by `(seed, tensor name,
//!   element index)`, so it is a pure function of the config — never of the
//!   values — and can be recomputed element by element.
//! - **BitDelta** ([`bitdelta_compress`]): each tensor collapses to one sign
//!   bit per element plus a single scale `alpha = mean |delta|`, the scale
//!   that minimizes the l2 reconstruction error for a fixed sign pattern.
//!
//! Container layout, integers little-endian:
//!
//! ```text
//! magic  b"DLTC"
//! u32    version (= 1)
//! u8     codec tag (0 = DARE, 1 = BITDELTA)
//! u32    tensor count
//! per tensor, in canonical order:
//!   u16 name length, [u8] name, u8 rank, u64 * rank dims
//!   DARE:     u64 sparse-rate-as-f64-bits, u64 seed, u64 nnz,
//!             nnz * u64 ascending element indices, nnz * f32 values
//!   BITDELTA: f64 alpha, ceil(n/8) bytes of sign bits
//!             (LSB-first within each byte, 1 = positive, pad bits zero)
//! u64    CRC-64 of every preceding byte
//! ```

mod bitdelta;
mod dare;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::tensor::{TensorError, TensorMap};

pub use bitdelta::{bitdelta_compress, bitdelta_decompress};
pub use dare::{dare_compress, dare_decompress};
pub(crate) use dare::kept_indices;

pub(crate) const CONTAINER_MAGIC: &[u8; 4] = b"DLTC";
const TAG_DARE: u8 = 0;
const TAG_BITDELTA: u8 = 1;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("sparse_rate must be finite and in [0, 1), got {0}")]
    InvalidSparseRate(f64),
    #[error("expected a {expected} payload, got {got}")]
    WrongCodec { expected: Codec, got: Codec },
    #[error("cannot compress an empty tensor map")]
    EmptyInput,
    #[error("tensor {name:?}: rescaled value at index {index} overflows f32")]
    ValueOverflow { name: String, index: usize },
    #[error("corrupt container: {0}")]
    CorruptContainer(String),
    #[error(transparent)]
    Format(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Which codec a payload was produced by.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Codec {
    Dare,
    BitDelta,
}

impl fmt::Display for Codec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Codec::Dare => "dare",
            Codec::BitDelta => "bitdelta",
        })
    }
}

impl FromStr for Codec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dare" => Ok(Codec::Dare),
            "bitdelta" => Ok(Codec::BitDelta),
            other => Err(format!("unknown codec {other:?} (expected dare|bitdelta)")),
        }
    }
}

/// Codec choice plus its configuration, as passed around by callers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CodecSpec {
    Dare(DareCodecConfig),
    BitDelta,
}

impl CodecSpec {
    #[must_use]
    pub fn codec(&self) -> Codec {
        match self {
            CodecSpec::Dare(_) => Codec::Dare,
            CodecSpec::BitDelta => Codec::BitDelta,
        }
    }

    /// Sparse rate for reporting; BitDelta has none and reports 0.
    #[must_use]
    pub fn sparse_rate(&self) -> f64 {
        match self {
            CodecSpec::Dare(cfg) => cfg.sparse_rate,
            CodecSpec::BitDelta => 0.0,
        }
    }

    /// Mask seed for reporting; BitDelta has none and reports 0.
    #[must_use]
    pub fn seed(&self) -> u64 {
        match self {
            CodecSpec::Dare(cfg) => cfg.seed,
            CodecSpec::BitDelta => 0,
        }
    }

    /// Compress `delta` with this codec.
    pub fn compress(&self, delta: &TensorMap) -> Result<CompressedDelta, CodecError> {
        match self {
            CodecSpec::Dare(cfg) => dare_compress(delta, *cfg),
            CodecSpec::BitDelta => bitdelta_compress(delta),
        }
    }
}

/// DARE configuration: drop probability and mask seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DareCodecConfig {
    pub sparse_rate: f64,
    pub seed: u64,
}

impl DareCodecConfig {
    pub fn validate(&self) -> Result<(), CodecError> {
        if !self.sparse_rate.is_finite() || !(0.0..1.0).contains(&self.sparse_rate) {
            return Err(CodecError::InvalidSparseRate(self.sparse_rate));
        }
        Ok(())
    }
}

/// One DARE-compressed tensor: the surviving (already rescaled) values at
/// strictly ascending flat indices.
#[derive(Debug, Clone, PartialEq)]
pub struct DareTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub indices: Vec<u64>,
    pub values: Vec<f32>,
}

impl DareTensor {
    #[must_use]
    pub fn elements(&self) -> usize {
        self.shape.iter().product()
    }
}

/// One BitDelta-compressed tensor: a scale and one sign bit per element.
#[derive(Debug, Clone, PartialEq)]
pub struct BitDeltaTensor {
    pub name: String,
    pub shape: Vec<usize>,
    /// `mean |delta|` computed in f64, rounded to f32 precision so that
    /// compress -> decode -> compress reproduces identical bytes.
    pub scale: f64,
    /// LSB-first packed sign bits; 1 = positive. Pad bits are zero.
    pub bits: Vec<u8>,
}

impl BitDeltaTensor {
    #[must_use]
    pub fn elements(&self) -> usize {
        self.shape.iter().product()
    }

    /// Sign of element `i`: `+1.0` where the stored bit is set, else `-1.0`.
    #[must_use]
    pub fn sign(&self, i: usize) -> f32 {
        if self.bits[i / 8] >> (i % 8) & 1 == 1 {
            1.0
        } else {
            -1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DareCompressed {
    pub config: DareCodecConfig,
    pub tensors: Vec<DareTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BitDeltaCompressed {
    pub tensors: Vec<BitDeltaTensor>,
}

/// A compressed weight delta, ready for the wire.
#[derive(Debug, Clone, PartialEq)]
pub enum CompressedDelta {
    Dare(DareCompressed),
    BitDelta(BitDeltaCompressed),
}

impl CompressedDelta {
    #[must_use]
    pub fn codec(&self) -> Codec {
        match self {
            CompressedDelta::Dare(_) => Codec::Dare,
            CompressedDelta::BitDelta(_) => Codec::BitDelta,
        }
    }

    /// Decode back to a dense map with whichever codec produced the payload.
    pub fn decode(&self) -> Result<TensorMap, CodecError> {
        match self {
            CompressedDelta::Dare(_) => dare_decompress(self),
            CompressedDelta::BitDelta(_) => bitdelta_decompress(self),
        }
    }

    /// Tensor names and shapes in stored (canonical) order.
    pub fn tensor_shapes(&self) -> impl Iterator<Item = (&str, &[usize])> {
        let iter: Box<dyn Iterator<Item = (&str, &[usize])>> = match self {
            CompressedDelta::Dare(d) => Box::new(
                d.tensors
                    .iter()
                    .map(|t| (t.name.as_str(), t.shape.as_slice())),
            ),
            CompressedDelta::BitDelta(b) => Box::new(
                b.tensors
                    .iter()
                    .map(|t| (t.name.as_str(), t.shape.as_slice())),
            ),
        };
        iter
    }

    /// Serialize to the `DLTC` byte format.
    #[must_use]
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.storage_bits() as usize / 8);
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&checkpoint::FORMAT_VERSION.to_le_bytes());
        match self {
            CompressedDelta::Dare(d) => {
                out.push(TAG_DARE);
                out.extend_from_slice(&(d.tensors.len() as u32).to_le_bytes());
                for t in &d.tensors {
                    write_tensor_prefix(&mut out, &t.name, &t.shape);
                    out.extend_from_slice(&d.config.sparse_rate.to_bits().to_le_bytes());
                    out.extend_from_slice(&d.config.seed.to_le_bytes());
                    out.extend_from_slice(&(t.indices.len() as u64).to_le_bytes());
                    for &i in &t.indices {
                        out.extend_from_slice(&i.to_le_bytes());
                    }
                    for &v in &t.values {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
            CompressedDelta::BitDelta(b) => {
                out.push(TAG_BITDELTA);
                out.extend_from_slice(&(b.tensors.len() as u32).to_le_bytes());
                for t in &b.tensors {
                    write_tensor_prefix(&mut out, &t.name, &t.shape);
                    out.extend_from_slice(&t.scale.to_bits().to_le_bytes());
                    out.extend_from_slice(&t.bits);
                }
            }
        }
        let crc = checkpoint::crc64(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parse the `DLTC` byte format, verifying checksum and every invariant.
    pub fn from_bytes(buf: &[u8]) -> Result<Self, CodecError> {
        let body = checkpoint::split_checked_body(buf, 13).map_err(CodecError::Format)?;
        let mut r = checkpoint::Reader::new(body);
        let magic = r.take(4, "magic").map_err(CodecError::Format)?;
        if magic != CONTAINER_MAGIC {
            return Err(CodecError::CorruptContainer(format!(
                "bad magic {magic:02x?}, expected {CONTAINER_MAGIC:02x?}"
            )));
        }
        let version = r.u32("version").map_err(CodecError::Format)?;
        if version != checkpoint::FORMAT_VERSION {
            return Err(CodecError::CorruptContainer(format!(
                "unsupported version {version}"
            )));
        }
        let tag = r.u8("codec tag").map_err(CodecError::Format)?;
        let count = r.u32("tensor count").map_err(CodecError::Format)?;
        let parsed = match tag {
            TAG_DARE => parse_dare(&mut r, count)?,
            TAG_BITDELTA => parse_bitdelta(&mut r, count)?,
            other => {
                return Err(CodecError::CorruptContainer(format!(
                    "unknown codec tag {other}"
                )))
            }
        };
        if !r.is_done() {
            return Err(CodecError::CorruptContainer(format!(
                "{} trailing bytes after last tensor",
                r.remaining()
            )));
        }
        Ok(parsed)
    }

    /// Save to `path` atomically.
    pub fn save(&self, path: &Path) -> Result<(), CodecError> {
        checkpoint::atomic_write(path, &self.to_bytes()).map_err(|source| CodecError::Io {
            path: path.to_owned(),
            source,
        })
    }

    /// Load and parse a container from `path`.
    pub fn load(path: &Path) -> Result<Self, CodecError> {
        let buf = std::fs::read(path).map_err(|source| CodecError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_bytes(&buf)
    }

    /// Exact serialized size in bits: per-tensor payloads (96 bits per kept
    /// DARE value; one sign bit per element plus a 64-bit scale for BitDelta)
    /// plus every header, index, and checksum byte of the container format.
    #[must_use]
    pub fn storage_bits(&self) -> u64 {
        let container = 8 * (4 + 4 + 1 + 4) as u64; // magic, version, tag, count
        let trailer = 64u64; // crc
        let body: u64 = match self {
            CompressedDelta::Dare(d) => d
                .tensors
                .iter()
                .map(|t| {
                    tensor_prefix_bits(&t.name, &t.shape)
                        + 8 * (8 + 8 + 8) // sparse rate, seed, nnz
                        + t.indices.len() as u64 * (64 + 32)
                })
                .sum(),
            CompressedDelta::BitDelta(b) => b
                .tensors
                .iter()
                .map(|t| {
                    tensor_prefix_bits(&t.name, &t.shape)
                        + 64 // alpha
                        + 8 * (t.elements() as u64).div_ceil(8)
                })
                .sum(),
        };
        container + body + trailer
    }
}

/// Exact container size in bits; free-function form of
/// [`CompressedDelta::storage_bits`].
#[must_use]
pub fn storage_bits(c: &CompressedDelta) -> u64 {
    c.storage_bits()
}

fn write_tensor_prefix(out: &mut Vec<u8>, name: &str, shape: &[usize]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

fn tensor_prefix_bits(name: &str, shape: &[usize]) -> u64 {
    8 * (2 + name.len() as u64 + 1 + 8 * shape.len() as u64)
}

fn check_name_order(prev: Option<&str>, name: &str) -> Result<(), CodecError> {
    if let Some(p) = prev {
        if p >= name {
            return Err(CodecError::CorruptContainer(format!(
                "tensor names out of canonical order: {p:?} then {name:?}"
            )));
        }
    }
    Ok(())
}

fn parse_dare(r: &mut checkpoint::Reader<'_>, count: u32) -> Result<CompressedDelta, CodecError> {
    let mut config: Option<DareCodecConfig> = None;
    let mut tensors = Vec::with_capacity(count as usize);
    let mut prev_name: Option<String> = None;
    for _ in 0..count {
        let (name, shape, elems) = checkpoint::read_tensor_prefix(r)?;
        check_name_order(prev_name.as_deref(), &name)?;
        let sparse_rate = f64::from_bits(r.u64("sparse rate")?);
        let seed = r.u64("seed")?;
        let cfg = DareCodecConfig { sparse_rate, seed };
        cfg.validate()?;
        match config {
            None => config = Some(cfg),
            Some(c) if c == cfg => {}
            Some(c) => {
                return Err(CodecError::CorruptContainer(format!(
                    "tensor {name:?}: codec config {cfg:?} disagrees with earlier {c:?}"
                )))
            }
        }
        let nnz = r.u64("nnz")?;
        if nnz > elems as u64 {
            return Err(CodecError::CorruptContainer(format!(
                "tensor {name:?}: nnz {nnz} exceeds element count {elems}"
            )));
        }
        let nnz = nnz as usize;
        let mut indices = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            indices.push(r.u64("kept index")?);
        }
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(CodecError::CorruptContainer(format!(
                    "tensor {name:?}: kept indices not strictly ascending"
                )));
            }
        }
        if let Some(&last) = indices.last() {
            if last >= elems as u64 {
                return Err(CodecError::CorruptContainer(format!(
                    "tensor {name:?}: kept index {last} out of range for {elems} elements"
                )));
            }
        }
        let raw = r.take(nnz * 4, "kept values")?;
        let mut values = Vec::with_capacity(nnz);
        for (k, c) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(c.try_into().unwrap());
            if !v.is_finite() {
                return Err(CodecError::CorruptContainer(format!(
                    "tensor {name:?}: non-finite kept value at position {k}"
                )));
            }
            values.push(v);
        }
        prev_name = Some(name.clone());
        tensors.push(DareTensor {
            name,
            shape,
            indices,
            values,
        });
    }
    let config = config.ok_or(CodecError::EmptyInput)?;
    Ok(CompressedDelta::Dare(DareCompressed { config, tensors }))
}

fn parse_bitdelta(
    r: &mut checkpoint::Reader<'_>,
    count: u32,
) -> Result<CompressedDelta, CodecError> {
    if count == 0 {
        return Err(CodecError::EmptyInput);
    }
    let mut tensors = Vec::with_capacity(count as usize);
    let mut prev_name: Option<String> = None;
    for _ in 0..count {
        let (name, shape, elems) = checkpoint::read_tensor_prefix(r)?;
        check_name_order(prev_name.as_deref(), &name)?;
        let scale = f64::from_bits(r.u64("scale")?);
        if !scale.is_finite() || scale < 0.0 {
            return Err(CodecError::CorruptContainer(format!(
                "tensor {name:?}: invalid scale {scale}"
            )));
        }
        let nbytes = elems.div_ceil(8);
        let bits = r.take(nbytes, "sign bitfield")?.to_vec();
        if elems % 8 != 0 {
            let pad_mask = !0u8 << (elems % 8);
            if let Some(&last) = bits.last() {
                if last & pad_mask != 0 {
                    return Err(CodecError::CorruptContainer(format!(
                        "tensor {name:?}: nonzero padding bits in sign bitfield"
                    )));
                }
            }
        }
        prev_name = Some(name.clone());
        tensors.push(BitDeltaTensor {
            name,
            shape,
            scale,
            bits,
        });
    }
    Ok(CompressedDelta::BitDelta(BitDeltaCompressed { tensors }))
}
