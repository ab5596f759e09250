//! Binary checkpoint format.
//!
//! Little-endian throughout:
//!
//! | bytes | field |
//! |---|---|
//! | 8 | magic `MEDNCA01` |
//! | 4 | format version (u32) |
//! | 5 x 4 | n, h, img_channels, steps, scale_factor (u32) |
//! | 4 | fire_rate (f32) |
//! | ... | `b1` then `b2`, each as conv1_w, conv1_b, conv2_w, conv2_b, dense1_w, dense1_b, dense2_w (f32, row-major) |

use std::fs;
use std::path::Path;

use crate::engine::ResampleMode;
use crate::nca::{param_count, BackboneParams, NcaConfig};
use crate::pipeline::MedNcaModel;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MEDNCA01";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 8 + 4 + 5 * 4 + 4;
/// Largest `n` or `h` accepted when loading; guards against absurd lengths.
const MAX_WIDTH: u32 = 1 << 16;

/// Exact file size for a model with `n` channels and hidden width `h`.
pub fn expected_len(n: usize, h: usize) -> usize {
    HEADER_LEN + 2 * param_count(n, h) * 4
}

fn u32_field(name: &str, v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{name} = {v} does not fit in u32")))
}

pub fn encode(model: &MedNcaModel<f32>) -> Result<Vec<u8>> {
    model.validate()?;
    let c = &model.config;
    let mut out = Vec::with_capacity(expected_len(c.n, c.h));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, v) in [
        ("n", c.n),
        ("h", c.h),
        ("img_channels", c.img_channels),
        ("steps", c.steps),
        ("scale_factor", model.scale_factor),
    ] {
        out.extend_from_slice(&u32_field(name, v)?.to_le_bytes());
    }
    out.extend_from_slice(&(c.fire_rate as f32).to_le_bytes());
    for t in model.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<MedNcaModel<f32>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Checkpoint(format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len())));
    }
    let word = |i: usize| {
        let at = 8 + 4 * i;
        u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
    };
    let version = word(0);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let (n, h, img_channels, steps, scale_factor) = (word(1), word(2), word(3), word(4), word(5));
    if n > MAX_WIDTH || h > MAX_WIDTH {
        return Err(Error::Checkpoint(format!("implausible sizes n={n}, h={h}")));
    }
    let fire_rate = f32::from_le_bytes(bytes[HEADER_LEN - 4..HEADER_LEN].try_into().expect("4 bytes"));
    let (n, h) = (n as usize, h as usize);
    let want = expected_len(n, h);
    if bytes.len() != want {
        return Err(Error::Checkpoint(format!(
            "length {} does not match {want} expected for n={n}, h={h}",
            bytes.len()
        )));
    }
    let config =
        NcaConfig { n, h, img_channels: img_channels as usize, fire_rate: fire_rate as f64, steps: steps as usize };
    let mut model = MedNcaModel {
        b1: BackboneParams::zeros(n, h),
        b2: BackboneParams::zeros(n, h),
        config,
        scale_factor: scale_factor as usize,
        upscale: ResampleMode::Nearest,
    };
    let mut floats = bytes[HEADER_LEN..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    for t in model.tensors_mut() {
        for v in t.data_mut() {
            *v = floats.next().expect("length checked");
        }
    }
    model.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    if model.tensors().iter().any(|t| !t.is_finite()) {
        return Err(Error::Checkpoint("non-finite parameter".into()));
    }
    Ok(model)
}

pub fn save(path: &Path, model: &MedNcaModel<f32>) -> Result<()> {
    fs::write(path, encode(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<MedNcaModel<f32>> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
