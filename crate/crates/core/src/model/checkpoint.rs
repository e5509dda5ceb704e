//! Checkpoint layout: a little-endian `u64` header length, a UTF-8 JSON
//! header, then every tensor as contiguous little-endian `f32` values.
//! Offsets in the header are byte positions relative to the end of the header.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParameters};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    step: u64,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(params: &ModelParameters, path: impl AsRef<Path>) -> Result<()> {
    let bytes = to_bytes(params)?;
    let path = path.as_ref();
    // write-then-rename so a crash never leaves a half-written checkpoint behind
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParameters> {
    from_bytes(&std::fs::read(path)?)
}

pub(crate) fn to_bytes(params: &ModelParameters) -> Result<Vec<u8>> {
    params.validate()?;
    let mut offset = 0u64;
    let tensors = params
        .tensors
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 4 * t.numel() as u64;
            e
        })
        .collect();
    let header = Header {
        version: CHECKPOINT_FORMAT_VERSION,
        config: params.config.clone(),
        step: params.step,
        metadata: params.metadata.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub(crate) fn from_bytes(bytes: &[u8]) -> Result<ModelParameters> {
    let truncated = |needed: u64| Error::CheckpointTruncated {
        needed,
        available: bytes.len() as u64,
    };
    let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| truncated(8))?.try_into().unwrap();
    let header_len = u64::from_le_bytes(len_bytes);
    let data_start = 8u64.checked_add(header_len).ok_or_else(|| truncated(u64::MAX))?;
    if data_start > bytes.len() as u64 {
        return Err(truncated(data_start));
    }
    let raw = &bytes[8..data_start as usize];
    let value: serde_json::Value =
        serde_json::from_slice(raw).map_err(|e| Error::CheckpointHeader(e.to_string()))?;
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == CHECKPOINT_FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::CheckpointVersion {
                found: v as u32,
                expected: CHECKPOINT_FORMAT_VERSION,
            })
        }
        None => return Err(Error::CheckpointHeader("missing `version`".into())),
    }
    let header: Header = serde_json::from_value(value).map_err(|e| Error::CheckpointHeader(e.to_string()))?;
    header.config.validate()?;

    let data = &bytes[data_start as usize..];
    let mut tensors = BTreeMap::new();
    for e in header.tensors {
        if e.dtype != "f32" {
            return Err(Error::CheckpointHeader(format!("tensor `{}` has unsupported dtype {}", e.name, e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let end = e.offset + 4 * n as u64;
        if end > data.len() as u64 {
            return Err(truncated(data_start + end));
        }
        let values = data[e.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if tensors.insert(e.name.clone(), Tensor::new(e.shape, values)?).is_some() {
            return Err(Error::CheckpointHeader(format!("duplicate tensor `{}`", e.name)));
        }
    }
    let params = ModelParameters {
        config: header.config,
        step: header.step,
        tensors,
        metadata: header.metadata,
    };
    params.validate()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    fn params() -> ModelParameters {
        let mut p = build_model::<f32>(&ModelConfig::toy_mt(20), 9).unwrap();
        p.step = 42;
        p.metadata.insert("vocab".into(), "abc".into());
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = params();
        let back = from_bytes(&to_bytes(&p).unwrap()).unwrap();
        assert_eq!(back, p);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&p, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), p);
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = to_bytes(&params()).unwrap();
        for cut in [4, 20, bytes.len() - 1] {
            let err = from_bytes(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, Error::CheckpointTruncated { .. } | Error::CheckpointHeader(_)),
                "{cut}: {err}"
            );
        }
        assert!(matches!(
            from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::CheckpointTruncated { .. })
        ));
    }

    fn rewrite_header(bytes: &[u8], f: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
        let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let mut h: serde_json::Value = serde_json::from_slice(&bytes[8..8 + len]).unwrap();
        f(&mut h);
        let json = serde_json::to_vec(&h).unwrap();
        let mut out = (json.len() as u64).to_le_bytes().to_vec();
        out.extend(json);
        out.extend_from_slice(&bytes[8 + len..]);
        out
    }

    #[test]
    fn version_and_shape_errors_are_distinct() {
        let bytes = to_bytes(&params()).unwrap();
        let v2 = rewrite_header(&bytes, |h| h["version"] = 2.into());
        assert!(matches!(
            from_bytes(&v2),
            Err(Error::CheckpointVersion { found: 2, expected: 1 })
        ));
        let bad_shape = rewrite_header(&bytes, |h| {
            let t = h["tensors"].as_array_mut().unwrap().iter_mut().find(|t| t["name"] == "decoder.output.bias").unwrap();
            t["shape"] = serde_json::json!([10]);
        });
        assert!(matches!(from_bytes(&bad_shape), Err(Error::ParamShape { .. })));
        let missing = rewrite_header(&bytes, |h| {
            h["tensors"].as_array_mut().unwrap().retain(|t| t["name"] != "decoder.final_norm.gamma");
        });
        assert!(matches!(from_bytes(&missing), Err(Error::MissingParam(n)) if n == "decoder.final_norm.gamma"));
        let garbage = rewrite_header(&bytes, |h| *h = serde_json::json!({"version": 1}));
        assert!(matches!(from_bytes(&garbage), Err(Error::CheckpointHeader(_))));
    }
}
