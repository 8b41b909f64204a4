//! Checkpoint files: one line of JSON header, a `\n`, then the parameters as
//! raw little-endian floats in declaration order (weight then bias, layer by
//! layer).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_unet, Model, UNetConfig};
use crate::tensor::{Precision, Scalar};
use crate::{Error, Result};

const FORMAT: &str = "edgebias-unet-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub config: UNetConfig,
    pub precision: Precision,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: u64,
    pub parameters: Vec<ParamEntry>,
    /// Number of floats in the payload.
    pub payload_len: usize,
}

fn entries<T: Scalar>(model: &Model<T>) -> Vec<ParamEntry> {
    model
        .layers()
        .iter()
        .flat_map(|l| {
            let w = l.spec.weight_shape();
            [
                ParamEntry {
                    name: format!("{}.weight", l.name),
                    shape: vec![w.n, w.c, w.h, w.w],
                },
                ParamEntry {
                    name: format!("{}.bias", l.name),
                    shape: vec![l.bias.len()],
                },
            ]
        })
        .collect()
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, step: u64, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        format: FORMAT.to_string(),
        version: VERSION,
        config: model.config().clone(),
        precision: T::PRECISION,
        step,
        parameters: entries(model),
        payload_len: model.parameter_count(),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    bytes.reserve(header.payload_len * T::PRECISION.byte_width());
    for p in model.params() {
        for &v in p {
            v.write_le(&mut bytes);
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a checkpoint. When `expected` is given, its architecture (every
/// field except the init seed) must match the stored config.
pub fn load_checkpoint<T: Scalar>(
    path: &Path,
    expected: Option<&UNetConfig>,
) -> Result<(Model<T>, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes, expected)
}

pub(crate) fn parse_checkpoint<T: Scalar>(
    bytes: &[u8],
    expected: Option<&UNetConfig>,
) -> Result<(Model<T>, CheckpointHeader)> {
    let bad = |r: String| Error::format("checkpoint", r);
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(format!("header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(bad(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    if header.precision != T::PRECISION || header.config.precision != T::PRECISION {
        return Err(Error::Precision {
            expected: T::PRECISION.name(),
            found: header.precision.name(),
        });
    }
    if let Some(want) = expected {
        let strip = |c: &UNetConfig| UNetConfig { seed: 0, ..c.clone() };
        if strip(want) != strip(&header.config) {
            return Err(Error::config(format!(
                "checkpoint config {:?} does not match expected {:?}",
                header.config, want
            )));
        }
    }
    let mut model = build_unet::<T>(&header.config)?;
    if entries(&model) != header.parameters {
        return Err(bad("parameter shapes do not match the stored config".into()));
    }
    if header.payload_len != model.parameter_count() {
        return Err(bad(format!(
            "header declares {} floats, config needs {}",
            header.payload_len,
            model.parameter_count()
        )));
    }
    let width = T::PRECISION.byte_width();
    let payload = &bytes[nl + 1..];
    if payload.len() != header.payload_len * width {
        return Err(bad(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            header.payload_len * width
        )));
    }
    let mut chunks = payload.chunks_exact(width);
    for p in model.params_mut() {
        for v in p.iter_mut() {
            *v = T::read_le(chunks.next().expect("length checked"));
        }
    }
    Ok((model, header))
}
