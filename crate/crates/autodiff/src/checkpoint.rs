//! Tensor container: `u64` little-endian manifest length, UTF-8 JSON manifest
//! mapping each name to `{shape, dtype, offset}`, then the raw little-endian
//! arrays. Offsets are relative to the first payload byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AutodiffError, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

fn err(msg: impl Into<String>) -> AutodiffError {
    AutodiffError::Checkpoint(msg.into())
}

pub fn encode_tensors(tensors: &BTreeMap<String, Tensor>) -> Result<Vec<u8>> {
    let mut manifest = BTreeMap::new();
    let mut payload = Vec::new();
    for (name, t) in tensors {
        manifest.insert(
            name.clone(),
            ManifestEntry { shape: t.shape().to_vec(), dtype: "f64".into(), offset: payload.len() as u64 },
        );
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(8 + header.len() + payload.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_tensors(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| err("missing manifest length"))?.try_into().unwrap();
    let header_len = u64::from_le_bytes(len_bytes);
    let header_end = 8u64.checked_add(header_len).filter(|&e| e <= bytes.len() as u64).ok_or_else(|| err("manifest length exceeds file"))?
        as usize;
    let manifest: BTreeMap<String, ManifestEntry> =
        serde_json::from_slice(&bytes[8..header_end]).map_err(|e| err(format!("manifest: {e}")))?;
    let payload = &bytes[header_end..];
    let mut spans: Vec<(u64, u64, &str)> = Vec::new();
    let mut out = BTreeMap::new();
    for (name, entry) in &manifest {
        if entry.dtype != "f64" {
            return Err(err(format!("`{name}`: unsupported dtype {}", entry.dtype)));
        }
        let count = entry
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| err(format!("`{name}`: shape overflows")))?;
        let nbytes = count.checked_mul(8).ok_or_else(|| err(format!("`{name}`: shape overflows")))?;
        let end = entry.offset.checked_add(nbytes).ok_or_else(|| err(format!("`{name}`: offset overflows")))?;
        if end > payload.len() as u64 {
            return Err(err(format!("`{name}`: array extends past end of file")));
        }
        spans.push((entry.offset, end, name));
        let data = payload[entry.offset as usize..end as usize]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.insert(name.clone(), Tensor::new(entry.shape.clone(), data).map_err(|e| err(format!("`{name}`: {e}")))?);
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(err(format!("arrays `{}` and `{}` overlap", w[0].2, w[1].2)));
        }
    }
    Ok(out)
}

pub fn write_tensors(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    fs::write(path, encode_tensors(tensors)?)?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    decode_tensors(&fs::read(path)?)
}

/// Collects parameter values of several stores, each under its own prefix.
pub fn collect_stores(stores: &[(&str, &ParamStore)]) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for (prefix, store) in stores {
        for p in store.iter() {
            let key = format!("{prefix}{}", p.name);
            if out.insert(key.clone(), p.value.clone()).is_some() {
                return Err(AutodiffError::DuplicateParameter(key));
            }
        }
    }
    Ok(out)
}

/// Overwrites every parameter of `store` with `tensors[prefix + name]`.
pub fn restore_store(store: &mut ParamStore, prefix: &str, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    for p in store.iter_mut() {
        let key = format!("{prefix}{}", p.name);
        let t = tensors.get(&key).ok_or_else(|| AutodiffError::UnknownParameter(key.clone()))?;
        if t.shape() != p.value.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "restore_store",
                left: p.value.shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
        p.value = t.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert("a.w".into(), Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, 1e-300, f64::MAX, 0.0]).unwrap());
        m.insert("b".into(), Tensor::scalar(std::f64::consts::PI));
        m
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = sample();
        assert_eq!(decode_tensors(&encode_tensors(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let bytes = encode_tensors(&sample()).unwrap();
        assert!(decode_tensors(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode_tensors(&bytes[..5]).is_err());
    }

    #[test]
    fn huge_shape_does_not_allocate() {
        let header = br#"{"x":{"shape":[4294967296,4294967296],"dtype":"f64","offset":0}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        assert!(decode_tensors(&bytes).is_err());
    }

    #[test]
    fn overlapping_arrays_are_rejected() {
        let header = br#"{"x":{"shape":[2],"dtype":"f64","offset":0},"y":{"shape":[2],"dtype":"f64","offset":8}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0u8; 24]);
        let e = decode_tensors(&bytes).unwrap_err().to_string();
        assert!(e.contains("overlap"), "{e}");
    }
}
