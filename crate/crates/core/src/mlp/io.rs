//! Portable model container.
//!
//! Layout, all integers and floats little-endian:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 8    | magic `b"APPLNET\0"`                    |
//! | 8      | 4    | format version (`u32`, currently 1)     |
//! | 12     | 4    | input dim (`u32`)                       |
//! | 16     | 4    | hidden dim (`u32`)                      |
//! | 20     | 4    | output dim (`u32`, always 2)            |
//! | 24     | 8·P  | `w1, b1, w2, b2` row-major as `f64`     |
//!
//! Training metadata lives next to the model in `<file>.json`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::network::{Network, Shape, OUTPUT_DIM};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"APPLNET\0";
const VERSION: u32 = 1;

/// JSON sidecar written next to a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub positive_label: String,
    pub negative_label: String,
    pub seed: u64,
    pub train_samples: usize,
    pub validation_samples: usize,
    pub validation_houses: Vec<i64>,
    pub best_validation_loss: f64,
    pub iterations: usize,
    pub diverged_restarts: usize,
}

pub fn write_network<W: Write>(net: &Network, mut w: W) -> std::io::Result<()> {
    let shape = net.shape();
    w.write_all(MAGIC)?;
    for v in [VERSION, shape.input_dim as u32, shape.hidden_dim as u32, OUTPUT_DIM as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in net.to_flat() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_network<R: Read>(mut r: R) -> Result<Network> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Format(e.to_string()))?;
    if bytes.len() < 24 || &bytes[..8] != MAGIC {
        return Err(Error::Format("missing model header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    if word(0) != VERSION as usize {
        return Err(Error::Format(format!("unsupported version {}", word(0))));
    }
    if word(3) != OUTPUT_DIM {
        return Err(Error::Format(format!("expected 2 outputs, found {}", word(3))));
    }
    let shape = Shape {
        input_dim: word(1),
        hidden_dim: word(2),
    };
    if shape.input_dim == 0 || shape.hidden_dim == 0 {
        return Err(Error::Format("zero layer size".into()));
    }
    let body = &bytes[24..];
    if body.len() != 8 * shape.param_count() {
        return Err(Error::Format(format!(
            "expected {} weight bytes, found {}",
            8 * shape.param_count(),
            body.len()
        )));
    }
    let flat: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let net = Network::from_flat(shape, &flat)?;
    if !net.is_finite() {
        return Err(Error::Format("non-finite weights".into()));
    }
    Ok(net)
}

pub fn sidecar_path(model_path: &Path) -> PathBuf {
    let mut name = model_path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Writes the binary model and, when given, its JSON sidecar.
pub fn save_network(net: &Network, meta: Option<&ModelMetadata>, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + 8 * net.shape().param_count());
    write_network(net, &mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))?;
    if let Some(meta) = meta {
        let side = sidecar_path(path);
        fs::write(&side, serde_json::to_string_pretty(meta)? + "\n").map_err(|e| Error::io(&side, e))?;
    }
    Ok(())
}

pub fn load_network(path: &Path) -> Result<Network> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_network(std::io::BufReader::new(file))
}
