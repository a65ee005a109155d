//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PINET1\n"                      magic, 7 bytes
//! u32 version                     currently 1
//! u32 spec_len, spec_len bytes    canonical spec text (UTF-8)
//! u32 count                       number of tensor records
//! count x {
//!   u32 name_len, name bytes
//!   u32 order, order x u64 extent
//!   prod(extents) x f64           row-major data
//! }
//! u64 checksum                    FNV-1a over every preceding byte
//! ```
//!
//! Every tensor of the chain is stored, frozen biases included, so a load
//! reconstructs the model exactly and a re-save is byte-identical.

use std::collections::BTreeSet;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use thiserror::Error;

use crate::polynet::{init_params, BlockParams, BlockSpec, ModelSpec, PolyChain, PolyError, PolyModel};
use crate::spec_doc::{format_spec, parse_spec, SpecError};
use crate::tensor::DenseTensor;

pub const MAGIC: &[u8; 7] = b"PINET1\n";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("{0} trailing bytes after the last record")]
    TrailingBytes(usize),
    #[error("embedded spec: {0}")]
    Spec(#[from] SpecError),
    #[error("tensor name is not UTF-8")]
    BadName,
    #[error("duplicate tensor '{0}'")]
    Duplicate(String),
    #[error("unknown tensor '{0}'")]
    Unknown(String),
    #[error("missing tensor '{0}'")]
    Missing(String),
    #[error("tensor '{name}': shape {found:?} does not match the spec's {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Poly(#[from] PolyError),
}

impl CheckpointError {
    /// True for corrupt or inconsistent content, false for I/O failures.
    pub fn is_integrity(&self) -> bool {
        !matches!(self, Self::Io { .. })
    }
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// The spec a chain was built from, recovered from its tensors.
pub fn spec_of(chain: &PolyChain, seed: u64) -> ModelSpec {
    let blocks = chain
        .blocks
        .iter()
        .map(|b| {
            let (rank, aux) = match &b.params {
                BlockParams::Ccp(p) => (p.rank(), None),
                BlockParams::Ncp(p) => (p.rank(), Some(p.aux_dim())),
                BlockParams::NcpSkip(p) => (p.ncp.rank(), Some(p.ncp.aux_dim())),
                BlockParams::Simple(_) => (0, None),
            };
            BlockSpec {
                variant: b.variant(),
                order: b.order(),
                rank,
                aux_dim: aux.filter(|&w| w != rank),
                output_dim: b.output_dim(),
                norm: Some(b.norm),
            }
        })
        .collect();
    ModelSpec {
        input_dim: chain.input_dim(),
        blocks,
        inner_bias: chain.inner_bias,
        seed,
    }
}

fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("length fits in u32").to_le_bytes());
}

/// Serializes `chain`, recording `seed` in the embedded spec.
pub fn encode(chain: &PolyChain, seed: u64) -> Vec<u8> {
    let spec = format_spec(&spec_of(chain, seed));
    let tensors = chain.named_tensors();
    let mut out = Vec::with_capacity(64 + spec.len() + tensors.iter().map(|(n, t)| 16 + n.len() + 8 * (t.order() + t.len())).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, spec.len());
    out.extend_from_slice(spec.as_bytes());
    put_u32(&mut out, tensors.len());
    for (name, t) in &tensors {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.order());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(CheckpointError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// A decoded checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub chain: PolyChain,
}

/// Parses and validates checkpoint bytes. The checksum is checked before
/// anything else, so truncation and bit flips surface as checksum errors.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let computed = checksum(body);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    let mut r = Reader { buf: body, pos: MAGIC.len() };
    let version = r.u32("version")? as u32;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let spec_len = r.u32("spec length")?;
    let text = std::str::from_utf8(r.take(spec_len, "spec")?).map_err(|_| SpecError::Missing("spec is not UTF-8".into()))?;
    let spec = parse_spec(text)?;
    let mut chain = init_params(&spec, spec.seed)?;
    let expected: Vec<(String, Vec<usize>)> = chain.named_tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();

    let count = r.u32("tensor count")?;
    let mut seen = BTreeSet::new();
    for _ in 0..count {
        let len = r.u32("tensor name length")?;
        let name = std::str::from_utf8(r.take(len, "tensor name")?).map_err(|_| CheckpointError::BadName)?.to_string();
        if !seen.insert(name.clone()) {
            return Err(CheckpointError::Duplicate(name));
        }
        let want = &expected.iter().find(|(n, _)| *n == name).ok_or_else(|| CheckpointError::Unknown(name.clone()))?.1;
        let order = r.u32("tensor order")?;
        let mut shape = Vec::with_capacity(order.min(8));
        for _ in 0..order {
            shape.push(r.u64("tensor extent")? as usize);
        }
        if &shape != want {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: want.clone(),
                found: shape,
            });
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8, "tensor data")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        chain.set_tensor(&name, DenseTensor::new(shape, data).map_err(PolyError::from)?)?;
    }
    if let Some((missing, _)) = expected.iter().find(|(n, _)| !seen.contains(n)) {
        return Err(CheckpointError::Missing(missing.clone()));
    }
    if r.pos != body.len() {
        return Err(CheckpointError::TrailingBytes(body.len() - r.pos));
    }
    let spec = spec_of(&chain, spec.seed);
    Ok(Checkpoint { spec, chain })
}

pub fn save(path: &Path, chain: &PolyChain, seed: u64) -> Result<()> {
    std::fs::write(path, encode(chain, seed)).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    decode(&bytes)
}
