//! Tensor bundle file: a plain-text manifest followed by raw little-endian
//! `f64` payloads.
//!
//! ```text
//! extract-edit-tensors
//! format_version 1
//! tensors 2
//! enc.embed 204x64 0 104448
//! enc.l0.w_ih 64x192 104448 98304
//! end
//! <payload bytes>
//! ```
//!
//! Offsets and lengths are in bytes, relative to the first payload byte.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::kernel::params::ParamStore;
use crate::kernel::tensor::Tensor;
use crate::scalar::Scalar;

pub const MAGIC: &str = "extract-edit-tensors";
pub const FORMAT_VERSION: u32 = 1;

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

pub fn write_tensors<S: Scalar>(path: &Path, tensors: &[(String, &Tensor<S>)]) -> Result<()> {
    let mut header = format!("{MAGIC}\nformat_version {FORMAT_VERSION}\ntensors {}\n", tensors.len());
    let mut offset = 0usize;
    for (name, t) in tensors {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::Invalid(format!("tensor name {name:?} is not a single token")));
        }
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let bytes = t.len() * 8;
        header.push_str(&format!("{name} {} {offset} {bytes}\n", dims.join("x")));
        offset += bytes;
    }
    header.push_str("end\n");
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(header.as_bytes())?;
    for (_, t) in tensors {
        for v in t.data() {
            out.write_all(&v.to_f64_lossy().to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_tensors<S: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<S>)>> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    let mut next_line = |reader: &mut BufReader<std::fs::File>| -> Result<String> {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(format_err(path, "unexpected end of manifest"));
        }
        Ok(line.trim_end().to_string())
    };
    if next_line(&mut reader)? != MAGIC {
        return Err(format_err(path, "missing magic line"));
    }
    let version = next_line(&mut reader)?;
    match version.strip_prefix("format_version ").map(str::parse::<u32>) {
        Some(Ok(FORMAT_VERSION)) => {}
        _ => return Err(format_err(path, format!("unsupported version line {version:?}"))),
    }
    let count: usize = next_line(&mut reader)?
        .strip_prefix("tensors ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| format_err(path, "bad tensor count"))?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let l = next_line(&mut reader)?;
        let fields: Vec<&str> = l.split(' ').collect();
        let [name, dims, offset, bytes] = fields[..] else {
            return Err(format_err(path, format!("bad manifest line {l:?}")));
        };
        let shape: Vec<usize> = if dims.is_empty() {
            Vec::new()
        } else {
            dims.split('x')
                .map(|d| d.parse().map_err(|_| format_err(path, format!("bad shape {dims}"))))
                .collect::<Result<_>>()?
        };
        let offset: usize = offset.parse().map_err(|_| format_err(path, "bad offset"))?;
        let bytes: usize = bytes.parse().map_err(|_| format_err(path, "bad length"))?;
        if bytes != shape.iter().product::<usize>() * 8 {
            return Err(format_err(path, format!("length of {name} disagrees with its shape")));
        }
        entries.push((name.to_string(), shape, offset, bytes));
    }
    if next_line(&mut reader)? != "end" {
        return Err(format_err(path, "missing end marker"));
    }
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    let mut out = Vec::with_capacity(count);
    for (name, shape, offset, bytes) in entries {
        let raw = payload
            .get(offset..offset + bytes)
            .ok_or_else(|| format_err(path, format!("payload of {name} is truncated")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| S::from_f64_lossy(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save_params<S: Scalar>(store: &ParamStore<S>, path: &Path) -> Result<()> {
    let list: Vec<(String, &Tensor<S>)> = store.iter().map(|(_, n, t)| (n.to_string(), t)).collect();
    write_tensors(path, &list)
}

/// Loads values into an existing store; names and shapes must match exactly.
pub fn load_params<S: Scalar>(store: &mut ParamStore<S>, path: &Path) -> Result<()> {
    let tensors = read_tensors::<S>(path)?;
    if tensors.len() != store.len() {
        return Err(format_err(
            path,
            format!("expected {} tensors, found {}", store.len(), tensors.len()),
        ));
    }
    for (name, t) in tensors {
        let id = store
            .id_of(&name)
            .ok_or_else(|| format_err(path, format!("unknown parameter {name}")))?;
        if store.get(id).shape() != t.shape() {
            return Err(format_err(path, format!("shape mismatch for {name}")));
        }
        *store.get_mut(id) = t;
    }
    Ok(())
}
