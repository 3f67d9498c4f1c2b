//! Checkpoint container: `u64` LE header length, a JSON header describing
//! every tensor, then the tensors as little-endian `f32`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::training::EpochRecord;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MTRECKPT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in `f32` elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub spec: ModelSpec,
    /// Run configuration the model was trained with, if any.
    #[serde(default)]
    pub run: serde_json::Value,
    #[serde(default)]
    pub history: Vec<EpochRecord>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub run: serde_json::Value,
    pub history: Vec<EpochRecord>,
}

pub fn to_bytes(model: &Model, run: &serde_json::Value, history: &[EpochRecord]) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut offset = 0;
    for t in model.params.tensors() {
        tensors.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset,
            len: t.len(),
        });
        offset += t.len();
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        spec: model.spec.clone(),
        run: run.clone(),
        history: history.to_vec(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.params.tensors() {
        for &v in &t.data {
            let f = v as f32;
            if f as f64 != v {
                return Err(Error::CorruptCheckpoint(format!("tensor `{}` holds a value off the f32 grid", t.name)));
            }
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing checkpoint signature"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if hlen > body.len() {
        return Err(corrupt("header extends past end of file"));
    }
    // read the version before the full header so future layouts get a version error
    let raw: serde_json::Value = serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(&format!("header: {e}")))?;
    let found = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| corrupt("header has no format_version"))?;
    if found != FORMAT_VERSION as u64 {
        return Err(Error::CheckpointVersion {
            found: found as u32,
            expected: FORMAT_VERSION,
        });
    }
    let header: CheckpointHeader = serde_json::from_value(raw).map_err(|e| corrupt(&format!("header: {e}")))?;
    let payload = &body[hlen..];
    let total: usize = header.tensors.iter().map(|t| t.len).sum();
    if payload.len() != 4 * total {
        return Err(corrupt(&format!("payload is {} bytes, header describes {}", payload.len(), 4 * total)));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        if t.shape.iter().product::<usize>() != t.len || 4 * (t.offset + t.len) > payload.len() {
            return Err(corrupt(&format!("tensor `{}` has an inconsistent extent", t.name)));
        }
        let data = payload[4 * t.offset..4 * (t.offset + t.len)]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        tensors.push((t.name.clone(), t.shape.clone(), data));
    }
    let mut model = Model::build(header.spec, 0)?;
    model.load_tensors(tensors)?;
    Ok(Checkpoint {
        model,
        run: header.run,
        history: header.history,
    })
}

pub fn save_checkpoint(model: &Model, run: &serde_json::Value, history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(model, run, history)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::tiny_model;
    use crate::heads::Variant;

    fn rewrite_header(bytes: &[u8], edit: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        edit(&mut header);
        let json = serde_json::to_vec(&header).unwrap();
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[16 + hlen..]);
        out
    }

    #[test]
    fn round_trip_is_bitwise() {
        for v in [Variant::M2TRec, Variant::TRecId] {
            let (model, data) = tiny_model(v, 8);
            let bytes = to_bytes(&model, &serde_json::json!({"seed": 8}), &[]).unwrap();
            let back = from_bytes(&bytes).unwrap();
            assert_eq!(back.run["seed"], 8);
            for (a, b) in model.params.tensors().iter().zip(back.model.params.tensors()) {
                assert_eq!(a.name, b.name);
                assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
            let table = model.item_table(&data.catalog).unwrap();
            let p = model.predict(&table, &[0, 1, 2]).unwrap();
            let q = back.model.predict(&table, &[0, 1, 2]).unwrap();
            assert_eq!(p.probs, q.probs);
            assert_eq!(to_bytes(&back.model, &back.run, &[]).unwrap(), bytes);
        }
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let (model, _) = tiny_model(Variant::MeTRec, 1);
        let bytes = to_bytes(&model, &serde_json::Value::Null, &[]).unwrap();
        for cut in [0, 10, 40, bytes.len() - 1] {
            assert!(matches!(from_bytes(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))), "cut {cut}");
        }
    }

    #[test]
    fn newer_version_is_rejected() {
        let (model, _) = tiny_model(Variant::MeTRec, 1);
        let bytes = to_bytes(&model, &serde_json::Value::Null, &[]).unwrap();
        let bumped = rewrite_header(&bytes, |h| h["format_version"] = (FORMAT_VERSION + 1).into());
        assert!(matches!(
            from_bytes(&bumped),
            Err(Error::CheckpointVersion { found, .. }) if found == FORMAT_VERSION + 1
        ));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (model, _) = tiny_model(Variant::MeTRec, 1);
        let bytes = to_bytes(&model, &serde_json::Value::Null, &[]).unwrap();
        let edited = rewrite_header(&bytes, |h| {
            let ffn = h["spec"]["transformer"]["ffn_hidden"].as_u64().unwrap();
            h["spec"]["transformer"]["ffn_hidden"] = (ffn + 1).into();
        });
        assert!(matches!(from_bytes(&edited), Err(Error::ShapeMismatch { .. })));
    }
}
