//! Checkpoint serialization for parameter stores.
//!
//! Layout: one version byte, a little-endian u32 header length, a UTF-8
//! header, then all tensor data as little-endian f64.  Header lines are
//! either `meta <key> <value>` or `tensor <name> <dims> <offset> <0|1>`,
//! where `dims` is comma-separated (`-` for rank zero), `offset` counts
//! elements into the payload and the flag marks trainability.

use super::store::{ParamStore, Tensor};
use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

const VERSION: u8 = 1;

fn format_dims(shape: &[usize]) -> String {
    if shape.is_empty() {
        "-".to_string()
    } else {
        shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn parse_dims(field: &str) -> Option<Vec<usize>> {
    if field == "-" {
        return Some(Vec::new());
    }
    field.split(',').map(|d| d.parse().ok()).collect()
}

pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    let mut header = String::new();
    for (key, value) in meta {
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(Error::Checkpoint(format!("invalid meta key {key:?}")));
        }
        if value.contains('\n') {
            return Err(Error::Checkpoint(format!(
                "meta value for {key} contains a newline"
            )));
        }
        header.push_str(&format!("meta {key} {value}\n"));
    }
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (name, tensor, trainable) in store.iter() {
        header.push_str(&format!(
            "tensor {name} {} {offset} {}\n",
            format_dims(&tensor.shape),
            u8::from(trainable)
        ));
        for v in &tensor.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += tensor.data.len();
    }
    let header = header.into_bytes();
    let header_len = u32::try_from(header.len())
        .map_err(|_| Error::Checkpoint("header too large".into()))?;
    let mut bytes = Vec::with_capacity(5 + header.len() + payload.len());
    bytes.push(VERSION);
    bytes.extend_from_slice(&header_len.to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, BTreeMap<String, String>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 5 {
        return Err(Error::Checkpoint("file too short for a header".into()));
    }
    if bytes[0] != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {} (expected {VERSION})",
            bytes[0]
        )));
    }
    let header_len = u32::from_le_bytes(bytes[1..5].try_into().unwrap()) as usize;
    if 5 + header_len > bytes.len() {
        return Err(Error::Checkpoint(format!(
            "declared header of {header_len} bytes overruns the file"
        )));
    }
    let header = std::str::from_utf8(&bytes[5..5 + header_len])
        .map_err(|_| Error::Checkpoint("header is not valid UTF-8".into()))?;
    let payload = &bytes[5 + header_len..];
    if payload.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!(
            "payload of {} bytes is not a whole number of values",
            payload.len()
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut store = ParamStore::new();
    let mut meta = BTreeMap::new();
    let mut consumed = 0usize;
    for (lineno, line) in header.lines().enumerate() {
        let bad = || Error::Checkpoint(format!("malformed header line {}: {line:?}", lineno + 1));
        if let Some(rest) = line.strip_prefix("meta ") {
            let (key, value) = rest.split_once(' ').ok_or_else(bad)?;
            if key.is_empty() {
                return Err(bad());
            }
            meta.insert(key.to_string(), value.to_string());
        } else if let Some(rest) = line.strip_prefix("tensor ") {
            let fields: Vec<&str> = rest.split(' ').collect();
            if fields.len() != 4 {
                return Err(bad());
            }
            let name = fields[0];
            let shape = parse_dims(fields[1]).ok_or_else(bad)?;
            let offset: usize = fields[2].parse().map_err(|_| bad())?;
            let trainable = match fields[3] {
                "0" => false,
                "1" => true,
                _ => return Err(bad()),
            };
            let count: usize = shape.iter().product();
            let end = offset
                .checked_add(count)
                .ok_or_else(|| Error::Checkpoint("tensor extent overflows".into()))?;
            if end > values.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} extends past the payload ({end} > {})",
                    values.len()
                )));
            }
            store.insert(
                name,
                Tensor::from_vec(shape, values[offset..end].to_vec())?,
                trainable,
            )?;
            consumed += count;
        } else if !line.is_empty() {
            return Err(bad());
        }
    }
    if consumed != values.len() {
        return Err(Error::Checkpoint(format!(
            "payload holds {} values but tensors account for {consumed}",
            values.len()
        )));
    }
    Ok((store, meta))
}
