//! Checkpoint format: one JSON header line (schema, architecture, named
//! parameter shapes), a newline, then every parameter buffer concatenated
//! as little-endian f64 in header order. Writing the same model twice
//! yields identical bytes, which the reproducibility checks rely on.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmentor::{Arch, Segmentor};
use crate::tensor::Tensor;

pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    widths: [usize; 4],
    strides: [usize; 4],
    classes: usize,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint(model: &Segmentor, path: &Path) -> Result<()> {
    let header = Header {
        schema_version: CHECKPOINT_SCHEMA,
        widths: model.arch.widths,
        strides: model.arch.strides,
        classes: model.arch.classes,
        params: model
            .params
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let mut bytes = serde_json::to_vec(&header).map_err(|e| Error::Format {
        what: "checkpoint header",
        detail: e.to_string(),
    })?;
    bytes.push(b'\n');
    for (_, t) in &model.params {
        for v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(Error::io(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Segmentor> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or(Error::Format {
        what: "checkpoint",
        detail: "missing header line".into(),
    })?;
    let header: Header = serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Format {
        what: "checkpoint header",
        detail: e.to_string(),
    })?;
    if header.schema_version != CHECKPOINT_SCHEMA {
        return Err(Error::Format {
            what: "checkpoint header",
            detail: format!(
                "schema_version {} unsupported (expected {CHECKPOINT_SCHEMA})",
                header.schema_version
            ),
        });
    }
    let arch = Arch {
        widths: header.widths,
        strides: header.strides,
        classes: header.classes,
    };
    arch.validate().map_err(|e| Error::Format {
        what: "checkpoint header",
        detail: e.to_string(),
    })?;
    // The header must describe exactly the architecture's parameter set.
    let expected = arch.param_shapes();
    if header.params.len() != expected.len() {
        return Err(Error::Format {
            what: "checkpoint header",
            detail: format!(
                "{} parameters listed, architecture has {}",
                header.params.len(),
                expected.len()
            ),
        });
    }
    for (entry, (name, shape)) in header.params.iter().zip(&expected) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::Format {
                what: "checkpoint header",
                detail: format!(
                    "parameter {} with shape {:?} does not match architecture's {name} {shape:?}",
                    entry.name, entry.shape
                ),
            });
        }
    }
    let total: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let body = &bytes[nl + 1..];
    if body.len() != total * 8 {
        return Err(Error::Format {
            what: "checkpoint body",
            detail: format!("{} bytes of data, expected {}", body.len(), total * 8),
        });
    }
    let mut params = Vec::with_capacity(expected.len());
    let mut offset = 0;
    for (name, shape) in expected {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = body[offset..offset + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += n * 8;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format {
                what: "checkpoint body",
                detail: format!("parameter {name} holds non-finite values"),
            });
        }
        params.push((name, Tensor::new(shape, data)?));
    }
    Ok(Segmentor { arch, params })
}
