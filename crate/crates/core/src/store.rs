//! Checkpoint container I/O.
//!
//! Layout: an unsigned 64-bit little-endian header length `N`, then `N` bytes
//! of UTF-8 JSON, then the concatenated little-endian tensor payloads. The
//! header maps each tensor name to `{"dtype", "shape", "data_offsets"}` and may
//! carry a `"__metadata__"` string map. Offsets are relative to the start of the
//! payload section.
//!
//! Canonical output puts `__metadata__` first (omitted when empty), then the
//! tensors sorted by name with offsets assigned in that order, compact JSON and
//! no padding. Loaders accept any key order but require contiguous,
//! non-overlapping payloads that cover the data section exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use serde::de::{self, Deserializer, MapAccess, Visitor};
use serde::Deserialize;

use crate::scalar::{DType, Element};
use crate::tensor::{Checkpoint, Tensor, TensorData};

pub const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: {0}")]
    TruncatedPayload(String),
    #[error("tensor `{0}` contains non-finite values")]
    NonFinite(String),
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
}

impl StoreError {
    fn io(path: &Path, source: io::Error) -> Self {
        StoreError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, StoreError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| StoreError::io(path, e))?;
    decode(&bytes)
}

/// Writes the canonical encoding. Non-finite tensors are refused, since
/// loading would reject them.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), StoreError> {
    let path = path.as_ref();
    if let Some((name, _)) = ckpt.tensors.iter().find(|(_, t)| !t.all_finite()) {
        return Err(StoreError::NonFinite(name.clone()));
    }
    fs::write(path, encode(ckpt)).map_err(|e| StoreError::io(path, e))
}

/// Canonical serialization of a checkpoint.
pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let header = encode_header(ckpt);
    let payload_len: usize = ckpt
        .tensors
        .values()
        .map(|t| t.numel() * t.dtype().size_in_bytes())
        .sum();
    let mut out = Vec::with_capacity(8 + header.len() + payload_len);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for tensor in ckpt.tensors.values() {
        match tensor.data() {
            TensorData::F32(v) => v.iter().for_each(|x| x.write_le(&mut out)),
            TensorData::F64(v) => v.iter().for_each(|x| x.write_le(&mut out)),
        }
    }
    out
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

fn encode_header(ckpt: &Checkpoint) -> String {
    let mut entries = Vec::with_capacity(ckpt.tensors.len() + 1);
    if !ckpt.metadata.is_empty() {
        let meta = ckpt
            .metadata
            .iter()
            .map(|(k, v)| format!("{}:{}", json_str(k), json_str(v)))
            .collect::<Vec<_>>()
            .join(",");
        entries.push(format!("{}:{{{}}}", json_str(METADATA_KEY), meta));
    }
    let mut offset = 0usize;
    for (name, tensor) in &ckpt.tensors {
        let len = tensor.numel() * tensor.dtype().size_in_bytes();
        let shape = tensor
            .shape()
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        entries.push(format!(
            "{}:{{\"dtype\":\"{}\",\"shape\":[{}],\"data_offsets\":[{},{}]}}",
            json_str(name),
            tensor.dtype(),
            shape,
            offset,
            offset + len
        ));
        offset += len;
    }
    format!("{{{}}}", entries.join(","))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

enum RawItem {
    Metadata(BTreeMap<String, String>),
    Tensor(String, RawEntry),
}

/// Header entries in file order; a plain map would silently swallow duplicates.
struct RawHeader(Vec<RawItem>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct HeaderVisitor;

        impl<'de> Visitor<'de> for HeaderVisitor {
            type Value = RawHeader;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object of tensor entries")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<RawHeader, A::Error> {
                let mut items = Vec::new();
                while let Some(key) = map.next_key::<String>()? {
                    if key == METADATA_KEY {
                        items.push(RawItem::Metadata(map.next_value()?));
                    } else {
                        let entry: RawEntry = map
                            .next_value()
                            .map_err(|e| de::Error::custom(format!("tensor `{key}`: {e}")))?;
                        items.push(RawItem::Tensor(key, entry));
                    }
                }
                Ok(RawHeader(items))
            }
        }

        deserializer.deserialize_map(HeaderVisitor)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, StoreError> {
    if bytes.len() < 8 {
        return Err(StoreError::TruncatedPayload(format!(
            "file is {} bytes, shorter than the 8-byte length prefix",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|n| n.checked_add(8))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| {
            StoreError::TruncatedPayload(format!(
                "header declares {header_len} bytes but only {} follow",
                bytes.len() - 8
            ))
        })?;
    let header_text = std::str::from_utf8(&bytes[8..header_end])
        .map_err(|e| StoreError::MalformedHeader(format!("header is not UTF-8: {e}")))?;
    let RawHeader(items) = serde_json::from_str(header_text)
        .map_err(|e| StoreError::MalformedHeader(e.to_string()))?;
    let payload = &bytes[header_end..];

    let mut metadata = None;
    let mut specs: Vec<(String, DType, Vec<usize>, [usize; 2])> = Vec::new();
    for item in items {
        match item {
            RawItem::Metadata(m) => {
                if metadata.replace(m).is_some() {
                    return Err(StoreError::DuplicateName(METADATA_KEY.to_string()));
                }
            }
            RawItem::Tensor(name, entry) => {
                let dtype = DType::parse(&entry.dtype).ok_or_else(|| {
                    StoreError::MalformedHeader(format!(
                        "tensor `{name}` has unsupported dtype `{}`",
                        entry.dtype
                    ))
                })?;
                specs.push((name, dtype, entry.shape, entry.data_offsets));
            }
        }
    }

    let mut by_offset: Vec<usize> = (0..specs.len()).collect();
    by_offset.sort_by_key(|&i| (specs[i].3[0], specs[i].3[1]));
    let mut cursor = 0usize;
    for &i in &by_offset {
        let (name, dtype, shape, [begin, end]) = &specs[i];
        if begin > end {
            return Err(StoreError::MalformedHeader(format!(
                "tensor `{name}` has reversed offsets [{begin}, {end}]"
            )));
        }
        if *begin < cursor {
            return Err(StoreError::MalformedHeader(format!(
                "tensor `{name}` overlaps a preceding tensor at offset {begin}"
            )));
        }
        if *begin > cursor {
            return Err(StoreError::MalformedHeader(format!(
                "gap in payload before tensor `{name}` ({cursor}..{begin})"
            )));
        }
        let expected = shape
            .iter()
            .try_fold(dtype.size_in_bytes(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| StoreError::MalformedHeader(format!("tensor `{name}` is too large")))?;
        if end - begin != expected {
            return Err(StoreError::MalformedHeader(format!(
                "tensor `{name}` spans {} bytes but shape {shape:?} of {dtype} needs {expected}",
                end - begin
            )));
        }
        cursor = *end;
    }
    if cursor > payload.len() {
        return Err(StoreError::TruncatedPayload(format!(
            "header declares {cursor} payload bytes but only {} are present",
            payload.len()
        )));
    }
    if cursor < payload.len() {
        return Err(StoreError::MalformedHeader(format!(
            "{} trailing bytes after the last tensor",
            payload.len() - cursor
        )));
    }

    let mut ckpt = Checkpoint {
        tensors: BTreeMap::new(),
        metadata: metadata.unwrap_or_default(),
    };
    for (name, dtype, shape, [begin, end]) in specs {
        let raw = &payload[begin..end];
        let data = match dtype {
            DType::F32 => TensorData::F32(read_values::<f32>(raw)),
            DType::F64 => TensorData::F64(read_values::<f64>(raw)),
        };
        let tensor = Tensor::from_data(shape, data)
            .map_err(|e| StoreError::MalformedHeader(format!("tensor `{name}`: {e}")))?;
        if !tensor.all_finite() {
            return Err(StoreError::NonFinite(name));
        }
        if ckpt.tensors.contains_key(&name) {
            return Err(StoreError::DuplicateName(name));
        }
        ckpt.tensors.insert(name, tensor);
    }
    Ok(ckpt)
}

fn read_values<T: Element>(raw: &[u8]) -> Vec<T> {
    raw.chunks_exact(T::DTYPE.size_in_bytes())
        .map(T::read_le)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header_file(header: &str, payload: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn empty_checkpoint_is_minimal_container() {
        let bytes = encode(&Checkpoint::new());
        assert_eq!(bytes, header_file("{}", &[]));
        let back = decode(&bytes).unwrap();
        assert!(back.is_empty());
        assert!(back.metadata.is_empty());
    }

    #[test]
    fn file_size_is_prefix_plus_header_plus_payload() {
        let ckpt = Checkpoint::new().with_tensor(
            "w",
            Tensor::new(vec![2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap(),
        );
        let header = encode_header(&ckpt);
        assert_eq!(
            header,
            r#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}"#
        );
        assert_eq!(encode(&ckpt).len(), 8 + header.len() + 16);
    }

    #[test]
    fn metadata_comes_first_and_round_trips() {
        let mut ckpt = Checkpoint::new().with_tensor("a", Tensor::vector(vec![1.5]));
        ckpt.metadata.insert("method".into(), "varm".into());
        let header = encode_header(&ckpt);
        assert!(header.starts_with(r#"{"__metadata__":{"method":"varm"},"a""#));
        assert_eq!(decode(&encode(&ckpt)).unwrap(), ckpt);
    }

    #[test]
    fn overlapping_offsets_are_malformed() {
        let header = r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#;
        let err = decode(&header_file(header, &[0u8; 8])).unwrap_err();
        assert!(matches!(err, StoreError::MalformedHeader(ref m) if m.contains("overlaps")), "{err}");
    }

    #[test]
    fn short_payload_is_truncated() {
        let header = r#"{"a":{"dtype":"F64","shape":[2],"data_offsets":[0,16]}}"#;
        let err = decode(&header_file(header, &[0u8; 12])).unwrap_err();
        assert!(matches!(err, StoreError::TruncatedPayload(_)), "{err}");
    }

    #[test]
    fn header_longer_than_file_is_truncated() {
        let mut bytes = 100u64.to_le_bytes().to_vec();
        bytes.extend_from_slice(b"{}");
        assert!(matches!(decode(&bytes), Err(StoreError::TruncatedPayload(_))));
        assert!(matches!(decode(&[1, 2, 3]), Err(StoreError::TruncatedPayload(_))));
    }

    #[test]
    fn non_finite_tensors_are_not_saved() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = Checkpoint::new().with_tensor("w", Tensor::vector(vec![1.0, f64::INFINITY]));
        let err = save_checkpoint(&ckpt, dir.path().join("x.st")).unwrap_err();
        assert!(matches!(err, StoreError::NonFinite(ref n) if n == "w"));
        assert!(!dir.path().join("x.st").exists());
    }

    #[test]
    fn non_finite_payload_rejected() {
        let header = r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#;
        let err = decode(&header_file(header, &f32::NAN.to_le_bytes())).unwrap_err();
        assert!(matches!(err, StoreError::NonFinite(ref n) if n == "a"));
        let header = r#"{"a":{"dtype":"F64","shape":[1],"data_offsets":[0,8]}}"#;
        let err = decode(&header_file(header, &f64::INFINITY.to_le_bytes())).unwrap_err();
        assert!(matches!(err, StoreError::NonFinite(_)));
    }

    #[test]
    fn duplicate_names_rejected() {
        let header = r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"a":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#;
        let err = decode(&header_file(header, &[0u8; 8])).unwrap_err();
        assert!(matches!(err, StoreError::DuplicateName(ref n) if n == "a"), "{err}");
    }

    #[test]
    fn bad_json_and_dtype_are_malformed() {
        assert!(matches!(
            decode(&header_file("{not json", &[])),
            Err(StoreError::MalformedHeader(_))
        ));
        let header = r#"{"a":{"dtype":"BF16","shape":[1],"data_offsets":[0,2]}}"#;
        assert!(matches!(
            decode(&header_file(header, &[0u8; 2])),
            Err(StoreError::MalformedHeader(_))
        ));
    }

    #[test]
    fn gaps_and_trailing_bytes_are_malformed() {
        let header = r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#;
        assert!(matches!(
            decode(&header_file(header, &[0u8; 8])),
            Err(StoreError::MalformedHeader(_))
        ));
        let header = r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#;
        assert!(matches!(
            decode(&header_file(header, &[0u8; 6])),
            Err(StoreError::MalformedHeader(_))
        ));
    }

    #[test]
    fn non_canonical_key_order_is_accepted_and_canonicalized() {
        let header = r#"{"b":{"shape":[1],"data_offsets":[0,8],"dtype":"F64"},"a":{"dtype":"F64","shape":[1],"data_offsets":[8,16]}}"#;
        let mut payload = 2.0f64.to_le_bytes().to_vec();
        payload.extend_from_slice(&1.0f64.to_le_bytes());
        let ckpt = decode(&header_file(header, &payload)).unwrap();
        assert_eq!(ckpt.get("a").unwrap().get_f64(0), 1.0);
        assert_eq!(ckpt.get("b").unwrap().get_f64(0), 2.0);
        let canon = encode(&ckpt);
        assert_eq!(encode(&decode(&canon).unwrap()), canon);
    }

    #[test]
    fn save_and_load_through_filesystem() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.st");
        let ckpt = Checkpoint::new()
            .with_tensor("x", Tensor::new(vec![3], vec![1.0f32, -2.0, 0.25]).unwrap());
        save_checkpoint(&ckpt, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
        assert!(matches!(
            load_checkpoint(dir.path().join("missing.st")),
            Err(StoreError::Io { .. })
        ));
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        (prop::collection::vec(0usize..4, 0..3), any::<bool>()).prop_flat_map(|(shape, wide)| {
            let n: usize = shape.iter().product();
            let values = prop::collection::vec(-1e6f64..1e6, n);
            (Just(shape), Just(wide), values).prop_map(|(shape, wide, values)| {
                let dtype = if wide { DType::F64 } else { DType::F32 };
                Tensor::from_f64(dtype, shape, values).unwrap()
            })
        })
    }

    fn arb_checkpoint() -> impl Strategy<Value = Checkpoint> {
        (
            prop::collection::btree_map("[a-z.0-9\"\\\\é]{1,8}", arb_tensor(), 0..6),
            prop::collection::btree_map("[a-z_]{1,6}", ".{0,10}", 0..3),
        )
            .prop_map(|(tensors, metadata)| Checkpoint { tensors, metadata })
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(ckpt in arb_checkpoint()) {
            let bytes = encode(&ckpt);
            let back = decode(&bytes).unwrap();
            prop_assert!(back.tensors_bit_eq(&ckpt));
            prop_assert_eq!(&back.metadata, &ckpt.metadata);
            prop_assert_eq!(encode(&back), bytes);
        }
    }
}
