// SPDX-License-Identifier: MIT OR Apache-2.0

//! Weights file: a one-line magic, a one-line JSON manifest (config plus an
//! ordered tensor table of name, shape and byte offset into the data block),
//! then the raw little-endian `f32` data, row-major.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::ModelParameters;
use crate::error::{Error, Result};

const MAGIC: &str = "promptlens-weights v1";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

pub fn write_weights(params: &ModelParameters, mut out: impl Write) -> Result<()> {
    let mut offset = 0;
    let tensors = ModelParameters::tensor_shapes(&params.config)
        .into_iter()
        .map(|(name, shape)| {
            let entry = TensorEntry { name, offset, shape };
            offset += entry.shape.iter().product::<usize>() * 4;
            entry
        })
        .collect();
    let manifest = Manifest {
        config: params.config,
        tensors,
    };
    writeln!(out, "{MAGIC}")?;
    serde_json::to_writer(&mut out, &manifest)?;
    writeln!(out)?;
    let mut buf = Vec::with_capacity(offset);
    for tensor in params.tensors() {
        for v in tensor {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

pub fn read_weights(input: impl Read) -> Result<ModelParameters> {
    let mut reader = BufReader::new(input);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(Error::Weights(format!("missing `{MAGIC}` header")));
    }
    line.clear();
    reader.read_line(&mut line)?;
    let manifest: Manifest = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Weights(format!("bad manifest: {e}")))?;
    manifest.config.validate()?;
    let mut data = Vec::new();
    reader.read_to_end(&mut data)?;

    let expected = ModelParameters::tensor_shapes(&manifest.config);
    if manifest.tensors.len() != expected.len() {
        return Err(Error::Weights(format!(
            "manifest lists {} tensors, config implies {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    let mut tensors = Vec::with_capacity(expected.len());
    for (entry, (name, shape)) in manifest.tensors.iter().zip(expected) {
        if entry.name != name {
            return Err(Error::Weights(format!(
                "expected tensor `{name}`, found `{}`",
                entry.name
            )));
        }
        if entry.shape != shape {
            return Err(Error::ShapeMismatch {
                name,
                expected: shape,
                found: entry.shape.clone(),
            });
        }
        let len = shape.iter().product::<usize>() * 4;
        let bytes = data
            .get(entry.offset..entry.offset + len)
            .ok_or_else(|| Error::Weights(format!("tensor `{name}` runs past end of file")))?;
        tensors.push(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        );
    }
    ModelParameters::from_tensors(manifest.config, tensors)
}

pub fn save_weights(params: &ModelParameters, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_weights(params, std::io::BufWriter::new(file))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelParameters> {
    read_weights(std::fs::File::open(path)?)
}
