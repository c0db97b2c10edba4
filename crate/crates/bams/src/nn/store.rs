//! On-disk tensor container: a one-line JSON header describing names,
//! shapes, dtype and arbitrary metadata, followed by the raw little-endian
//! f64 bytes of each tensor in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

const MAGIC: &str = "bams.tensors";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    magic: String,
    version: u32,
    dtype: String,
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn write_tensors(
    path: &Path,
    tensors: &[(String, &Tensor)],
    meta: &serde_json::Value,
) -> Result<()> {
    let header = Header {
        magic: MAGIC.to_string(),
        version: VERSION,
        dtype: "f64".to_string(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta: meta.clone(),
    };
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for (_, t) in tensors {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<(Vec<(String, Tensor)>, serde_json::Value)> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut header_line = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        reader.read_exact(&mut byte).map_err(|_| {
            Error::Checkpoint(format!("{}: truncated header", path.display()))
        })?;
        if byte[0] == b'\n' {
            break;
        }
        header_line.push(byte[0]);
    }
    let header: Header = serde_json::from_slice(&header_line)?;
    if header.magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a tensor container (magic {:?})",
            path.display(),
            header.magic
        )));
    }
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported container version {}",
            path.display(),
            header.version
        )));
    }
    if header.dtype != "f64" {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported dtype {}",
            path.display(),
            header.dtype
        )));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        reader.read_exact(&mut bytes).map_err(|_| {
            Error::Checkpoint(format!(
                "{}: truncated data for tensor {}",
                path.display(),
                entry.name
            ))
        })?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
    }
    let mut trailing = Vec::new();
    reader.read_to_end(&mut trailing)?;
    if !trailing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{}: {} unexpected trailing bytes",
            path.display(),
            trailing.len()
        )));
    }
    Ok((tensors, header.meta))
}
