//! File formats: FRG1 volumes, parameter checkpoints, run configuration and
//! the run manifest.
//!
//! FRG1 layout (all little-endian):
//!
//! | bytes | content                                   |
//! |-------|-------------------------------------------|
//! | 4     | magic `FRG1`                              |
//! | 1     | kind: 0 scalar, 1 vector, 2 label mask    |
//! | 12    | dims as three `u32`                       |
//! | 24    | spacing as three `f64`                    |
//! | 24    | origin as three `f64`                     |
//! | ...   | payload, x fastest                        |
//!
//! Scalars and vectors are stored as `f32` (vectors interleaved x, y, z per
//! node), masks as `u16`.

mod config;
mod manifest;

use std::fs;
use std::path::Path;

pub use config::{load_config, load_synth_spec, parse_config, parse_synth_spec, SynthSpec};
pub use manifest::{digest_file, write_loss_table, InputDigest, RunManifest, StageRecord};

use crate::error::{Error, Result};
use crate::net::{Activation, MlpParams, NetConfig};
use crate::volume::{GridSpec, LabelMask, VectorField3, Volume3};

pub const MAGIC: &[u8; 4] = b"FRG1";
pub const HEADER_LEN: usize = 4 + 1 + 12 + 24 + 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum VolumeKind {
    Scalar = 0,
    Vector = 1,
    Mask = 2,
}

impl VolumeKind {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(VolumeKind::Scalar),
            1 => Some(VolumeKind::Vector),
            2 => Some(VolumeKind::Mask),
            _ => None,
        }
    }

    fn bytes_per_node(self) -> usize {
        match self {
            VolumeKind::Scalar => 4,
            VolumeKind::Vector => 12,
            VolumeKind::Mask => 2,
        }
    }
}

/// Contents of an FRG1 file.
#[derive(Clone, Debug, PartialEq)]
pub enum VolumeFile {
    Scalar(Volume3),
    Vector(VectorField3),
    Mask(LabelMask),
}

impl VolumeFile {
    pub fn kind(&self) -> VolumeKind {
        match self {
            VolumeFile::Scalar(_) => VolumeKind::Scalar,
            VolumeFile::Vector(_) => VolumeKind::Vector,
            VolumeFile::Mask(_) => VolumeKind::Mask,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        match self {
            VolumeFile::Scalar(v) => v.grid(),
            VolumeFile::Vector(v) => v.grid(),
            VolumeFile::Mask(v) => v.grid(),
        }
    }
}

impl From<Volume3> for VolumeFile {
    fn from(v: Volume3) -> Self {
        VolumeFile::Scalar(v)
    }
}

impl From<VectorField3> for VolumeFile {
    fn from(v: VectorField3) -> Self {
        VolumeFile::Vector(v)
    }
}

impl From<LabelMask> for VolumeFile {
    fn from(v: LabelMask) -> Self {
        VolumeFile::Mask(v)
    }
}

pub fn encode_volume(file: &VolumeFile) -> Vec<u8> {
    let grid = file.grid();
    let mut out = Vec::with_capacity(HEADER_LEN + grid.len() * file.kind().bytes_per_node());
    out.extend_from_slice(MAGIC);
    out.push(file.kind() as u8);
    for d in grid.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in grid.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for o in grid.origin {
        out.extend_from_slice(&o.to_le_bytes());
    }
    match file {
        VolumeFile::Scalar(v) => {
            for &x in v.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        VolumeFile::Vector(v) => {
            for x in v.data() {
                for c in x {
                    out.extend_from_slice(&(*c as f32).to_le_bytes());
                }
            }
        }
        VolumeFile::Mask(v) => {
            for &x in v.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<VolumeFile> {
    let bad = |detail: String| Error::BadHeader {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf() });
    }
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("{} bytes is shorter than the {HEADER_LEN}-byte header", bytes.len())));
    }
    let kind = VolumeKind::from_byte(bytes[4]).ok_or_else(|| bad(format!("unknown kind byte {}", bytes[4])))?;
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let dims = [u32_at(5), u32_at(9), u32_at(13)];
    let spacing = [f64_at(17), f64_at(25), f64_at(33)];
    let origin = [f64_at(41), f64_at(49), f64_at(57)];
    let grid = GridSpec::new(dims, spacing, origin).map_err(|e| bad(e.to_string()))?;

    let payload = &bytes[HEADER_LEN..];
    let expected = grid
        .len()
        .checked_mul(kind.bytes_per_node())
        .ok_or_else(|| bad(format!("dims {dims:?} overflow")))?;
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            found: payload.len(),
            expected,
        });
    }
    if payload.len() != expected {
        return Err(Error::LengthMismatch {
            path: path.to_path_buf(),
            found: payload.len(),
            expected,
        });
    }
    let f32s = || {
        payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
    };
    let wrap = |e: Error| bad(e.to_string());
    Ok(match kind {
        VolumeKind::Scalar => VolumeFile::Scalar(Volume3::new(grid, f32s().collect()).map_err(wrap)?),
        VolumeKind::Vector => {
            let flat: Vec<f64> = f32s().collect();
            let data = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
            VolumeFile::Vector(VectorField3::new(grid, data).map_err(wrap)?)
        }
        VolumeKind::Mask => {
            let data = payload
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect();
            VolumeFile::Mask(LabelMask::new(grid, data).map_err(wrap)?)
        }
    })
}

pub fn write_volume(path: impl AsRef<Path>, file: &VolumeFile) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_volume(file)).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<VolumeFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes, path)
}

fn wrong_kind(path: &Path, found: VolumeKind, expected: VolumeKind) -> Error {
    Error::WrongKind {
        path: path.to_path_buf(),
        found: found as u8,
        expected: expected as u8,
    }
}

pub fn read_scalar(path: impl AsRef<Path>) -> Result<Volume3> {
    let path = path.as_ref();
    match read_volume(path)? {
        VolumeFile::Scalar(v) => Ok(v),
        other => Err(wrong_kind(path, other.kind(), VolumeKind::Scalar)),
    }
}

pub fn read_vector(path: impl AsRef<Path>) -> Result<VectorField3> {
    let path = path.as_ref();
    match read_volume(path)? {
        VolumeFile::Vector(v) => Ok(v),
        other => Err(wrong_kind(path, other.kind(), VolumeKind::Vector)),
    }
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    let path = path.as_ref();
    match read_volume(path)? {
        VolumeFile::Mask(v) => Ok(v),
        other => Err(wrong_kind(path, other.kind(), VolumeKind::Mask)),
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FRGP";
const CHECKPOINT_HEADER_LEN: usize = 4 + 4 + 1 + 8 + 8 + 8;

/// Header (magic, width `u32`, activation byte, sine frequency `f64`, seed
/// `u64`, parameter count `u64`) followed by `f64` parameters in layer order.
pub fn encode_checkpoint(params: &MlpParams) -> Vec<u8> {
    let cfg = params.config();
    let mut out = Vec::with_capacity(CHECKPOINT_HEADER_LEN + 8 * params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(cfg.hidden_width as u32).to_le_bytes());
    out.push(match cfg.activation {
        Activation::Sine => 0,
        Activation::Tanh => 1,
    });
    out.extend_from_slice(&cfg.sine_frequency.to_le_bytes());
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<MlpParams> {
    let bad = |detail: String| Error::BadHeader {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf() });
    }
    if bytes.len() < CHECKPOINT_HEADER_LEN {
        return Err(bad("checkpoint header truncated".into()));
    }
    let hidden_width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let activation = match bytes[8] {
        0 => Activation::Sine,
        1 => Activation::Tanh,
        b => return Err(bad(format!("unknown activation byte {b}"))),
    };
    let sine_frequency = f64::from_le_bytes(bytes[9..17].try_into().unwrap());
    let seed = u64::from_le_bytes(bytes[17..25].try_into().unwrap());
    let count = u64::from_le_bytes(bytes[25..33].try_into().unwrap()) as usize;
    let config = NetConfig {
        hidden_width,
        activation,
        sine_frequency,
        seed,
    };
    config.validate().map_err(|e| bad(e.to_string()))?;
    if count != config.param_count() {
        return Err(bad(format!(
            "{count} parameters recorded, width {hidden_width} needs {}",
            config.param_count()
        )));
    }
    let payload = &bytes[CHECKPOINT_HEADER_LEN..];
    let expected = count * 8;
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            found: payload.len(),
            expected,
        });
    }
    if payload.len() != expected {
        return Err(Error::LengthMismatch {
            path: path.to_path_buf(),
            found: payload.len(),
            expected,
        });
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    MlpParams::from_values(config, values).map_err(|e| bad(e.to_string()))
}

pub fn write_checkpoint(path: impl AsRef<Path>, params: &MlpParams) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<MlpParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
