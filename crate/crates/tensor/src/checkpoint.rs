//! Parameter checkpoint container (`amc-ckpt-1`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "AMCCKPT\0"
//! header_len u64
//! header     header_len bytes of UTF-8 JSON:
//!            {"version":"amc-ckpt-1","tensors":{name: shape, ...},"meta":{...}}
//! payload    f64 values of every tensor, in header key order (sorted by name)
//! ```

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::params::ParamSet;
use crate::tensor::{shape_len, Tensor};

pub const MAGIC: &[u8; 8] = b"AMCCKPT\0";
pub const VERSION: &str = "amc-ckpt-1";
const MAX_HEADER: u64 = 64 << 20;

#[derive(Serialize, Deserialize)]
struct Header {
    version: String,
    tensors: BTreeMap<String, Vec<usize>>,
    #[serde(default)]
    meta: serde_json::Value,
}

pub fn encode(params: &ParamSet, meta: &serde_json::Value) -> Vec<u8> {
    let header = Header {
        version: VERSION.to_string(),
        tensors: params
            .iter()
            .map(|(k, t)| (k.to_string(), t.shape().to_vec()))
            .collect(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write(mut w: impl Write, params: &ParamSet, meta: &serde_json::Value) -> Result<()> {
    w.write_all(&encode(params, meta))?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

/// Decodes a checkpoint, returning its parameters and free-form metadata.
pub fn decode(bytes: &[u8]) -> Result<(ParamSet, serde_json::Value)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    if header_len > MAX_HEADER || header_len > (bytes.len() - 16) as u64 {
        return Err(bad("header length out of range"));
    }
    let body = &bytes[16..];
    let (json, payload) = body.split_at(header_len as usize);
    let header: Header =
        serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
    if header.version != VERSION {
        return Err(bad(format!("unsupported version {:?}", header.version)));
    }

    let mut total: usize = 0;
    for (name, shape) in &header.tensors {
        let n = shape_len(shape)
            .filter(|&n| n > 0 && !shape.contains(&0))
            .ok_or_else(|| bad(format!("bad shape for {name}")))?;
        total = total
            .checked_add(n)
            .ok_or_else(|| bad("payload size overflow"))?;
    }
    if total.checked_mul(8) != Some(payload.len()) {
        return Err(bad(format!(
            "payload is {} bytes, header describes {} values",
            payload.len(),
            total
        )));
    }

    let mut params = ParamSet::new();
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for (name, shape) in header.tensors {
        let n = shape_len(&shape).expect("checked above");
        let data: Vec<f64> = values.by_ref().take(n).collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok((params, header.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_truncated_and_foreign_input() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let bytes = encode(&p, &serde_json::json!({"method": "proto"}));
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"not a checkpoint at all").is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode(&wrong).is_err());
    }

    #[test]
    fn header_names_shapes_and_version() {
        let mut p = ParamSet::new();
        p.insert("b", Tensor::vector(vec![0.5]));
        let bytes = encode(&p, &serde_json::Value::Null);
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        assert_eq!(header["version"], "amc-ckpt-1");
        assert_eq!(header["tensors"]["b"], serde_json::json!([1]));
    }

    proptest! {
        #[test]
        fn roundtrip(entries in prop::collection::btree_map(
            "[a-z.]{1,12}",
            (1usize..4, 1usize..4).prop_flat_map(|(r, c)| {
                prop::collection::vec(-1e6f64..1e6, r * c).prop_map(move |d| (r, c, d))
            }),
            0..5,
        )) {
            let mut p = ParamSet::new();
            for (name, (r, c, d)) in &entries {
                p.insert(name.clone(), Tensor::matrix(*r, *c, d.clone()).unwrap());
            }
            let meta = serde_json::json!({"k": 1});
            let (back, m) = decode(&encode(&p, &meta)).unwrap();
            prop_assert_eq!(back, p);
            prop_assert_eq!(m, meta);
        }

        #[test]
        fn decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
            let _ = decode(&bytes);
        }
    }
}
