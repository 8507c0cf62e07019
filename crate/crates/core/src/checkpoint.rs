//! Model checkpoints: a TOML header followed by raw little-endian `f64` data.
//!
//! ```text
//! format_version = 1
//! code = "hamming_7_4"
//! n = 7
//! k = 4
//! h = ["1110100", "1101010", "1011001"]
//! [model]
//! d_model = 16
//! ...
//! [[params]]
//! name = "embed.w"
//! shape = [10, 16]
//! offset = 0
//! ...
//! %%data%%
//! <raw bytes>
//! ```
//!
//! Offsets count `f64` entries from the start of the data section. The
//! parity-check matrix travels with the checkpoint, so loading does not
//! depend on where the code came from.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::gf2::{BinaryMatrix, ParityCheckMatrix};
use crate::model::{EccmModel, ModelConfig, ModelError};

pub const FORMAT_VERSION: u32 = 1;
const SEPARATOR: &[u8] = b"\n%%data%%\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub code: String,
    pub n: usize,
    pub k: usize,
    pub h: Vec<String>,
    pub model: ModelConfig,
    pub params: Vec<ManifestEntry>,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn header(model: &EccmModel) -> Header {
    let code = model.code();
    let h = (0..code.checks())
        .map(|r| code.matrix().row(r).iter().map(|&b| if b == 1 { '1' } else { '0' }).collect())
        .collect();
    let mut offset = 0;
    let params = model
        .store()
        .iter()
        .map(|p| {
            let e = ManifestEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                offset,
            };
            offset += p.tensor.numel();
            e
        })
        .collect();
    Header {
        format_version: FORMAT_VERSION,
        code: code.name().to_string(),
        n: code.n(),
        k: code.k(),
        h,
        model: *model.config(),
        params,
    }
}

pub fn to_bytes(model: &EccmModel) -> Result<Vec<u8>, ModelError> {
    let text = toml::to_string(&header(model)).map_err(|e| bad(e.to_string()))?;
    let mut out = text.into_bytes();
    out.extend_from_slice(SEPARATOR);
    for p in model.store().iter() {
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<EccmModel, ModelError> {
    let split = bytes
        .windows(SEPARATOR.len())
        .position(|w| w == SEPARATOR)
        .ok_or_else(|| bad("missing data separator"))?;
    let text = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8"))?;
    let header: Header = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", header.format_version)));
    }
    let rows: Vec<Vec<u8>> = header
        .h
        .iter()
        .map(|r| {
            r.chars()
                .map(|c| match c {
                    '0' => Ok(0),
                    '1' => Ok(1),
                    _ => Err(bad(format!("bad matrix character {c:?}"))),
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    let code = ParityCheckMatrix::new(BinaryMatrix::from_rows(&rows)?, header.code.clone())?;
    if (code.n(), code.k()) != (header.n, header.k) {
        return Err(bad(format!(
            "header says n={}, k={} but the matrix gives n={}, k={}",
            header.n,
            header.k,
            code.n(),
            code.k()
        )));
    }
    let mut model = EccmModel::new(code, header.model, 0)?;
    let data = &bytes[split + SEPARATOR.len()..];
    if data.len() % 8 != 0 {
        return Err(bad("data section is not a whole number of f64 values"));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let store = model.store_mut();
    if store.len() != header.params.len() {
        return Err(bad(format!(
            "manifest lists {} parameters, configuration builds {}",
            header.params.len(),
            store.len()
        )));
    }
    let mut expected_offset = 0;
    for (p, entry) in store.iter_mut().zip(&header.params) {
        if p.name != entry.name || p.tensor.shape() != entry.shape.as_slice() {
            return Err(bad(format!(
                "manifest entry {} {:?} does not match parameter {} {:?}",
                entry.name,
                entry.shape,
                p.name,
                p.tensor.shape()
            )));
        }
        let len = p.tensor.numel();
        if entry.offset != expected_offset || entry.offset + len > values.len() {
            return Err(bad(format!("bad offset for {}", entry.name)));
        }
        p.tensor = Tensor::new(entry.shape.clone(), values[entry.offset..entry.offset + len].to_vec())?;
        expected_offset += len;
    }
    if expected_offset != values.len() {
        return Err(bad("trailing data after the last parameter"));
    }
    Ok(model)
}

pub fn save(model: &EccmModel, path: &Path) -> Result<(), ModelError> {
    std::fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<EccmModel, ModelError> {
    from_bytes(&std::fs::read(path)?)
}
