//! On-disk formats.
//!
//! # AdapterPack
//!
//! ```text
//! offset 0   magic       8 bytes  "LRPK0001"
//! offset 8   header_len  u64 little-endian
//! offset 16  header      header_len bytes of UTF-8 JSON
//! then       payload     row-major little-endian f32 tensors
//! ```
//!
//! The header is `{"adapters":[...],"tensors":[...]}`. Each adapter entry has
//! exactly the keys `d_in`, `d_out`, `name`, `rank`, `scale`; each tensor
//! entry has exactly `dtype` (`"f32"`), `name`, `nbytes`, `offset` and
//! `shape` (`[rows, cols]`). Adapter `i` owns the tensors named `"{i}.a"`
//! (`rank × d_in`) and `"{i}.b"` (`d_out × rank`). Offsets are relative to the
//! payload start, 8-byte aligned, ascending and non-overlapping. The canonical
//! writer stores tensors in adapter order, A before B, zero-padding only up to
//! the next 8-byte boundary.
//!
//! Vectors and matrices use plain JSON arrays. All emitted JSON has keys in
//! alphabetical order (struct fields are declared sorted) and no
//! insignificant whitespace.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::{LowRankAdapter, Matrix};

pub const PACK_MAGIC: &[u8; 8] = b"LRPK0001";
const PREAMBLE_LEN: usize = 16;
const ALIGN: u64 = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic: expected \"LRPK0001\", found {0:?}")]
    BadMagic(String),
    #[error("truncated file: need {needed} bytes, have {available}")]
    TruncatedFile { needed: u64, available: u64 },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("unknown header key '{0}'")]
    UnknownKey(String),
    #[error("unsupported dtype '{0}' (only f32)")]
    UnsupportedDtype(String),
    #[error("invalid tensor layout: {0}")]
    InvalidLayout(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in tensor '{0}'")]
    NonFiniteTensor(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("ragged rows: row {row} has {actual} entries, expected {expected}")]
    RaggedRows { row: usize, expected: usize, actual: usize },
    #[error("non-finite number at position {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    /// Reject unknown header keys and unreferenced tensors instead of
    /// warning about them.
    pub strict: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { strict: true }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PackHeader {
    adapters: Vec<AdapterMeta>,
    tensors: Vec<TensorMeta>,
    #[serde(flatten, skip_serializing)]
    extra: BTreeMap<String, Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdapterMeta {
    d_in: u64,
    d_out: u64,
    name: String,
    rank: u64,
    scale: f32,
    #[serde(flatten, skip_serializing)]
    extra: BTreeMap<String, Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    dtype: String,
    name: String,
    nbytes: u64,
    offset: u64,
    shape: Vec<u64>,
    #[serde(flatten, skip_serializing)]
    extra: BTreeMap<String, Value>,
}

fn align_up(x: u64) -> u64 {
    x.div_ceil(ALIGN) * ALIGN
}

/// Canonical pack bytes for `adapters`.
pub fn save_adapter_pack(adapters: &[LowRankAdapter]) -> Vec<u8> {
    let mut tensors = Vec::with_capacity(adapters.len() * 2);
    let mut payload: Vec<u8> = Vec::new();
    for (i, a) in adapters.iter().enumerate() {
        for (suffix, m) in [("a", a.factor_a()), ("b", a.factor_b())] {
            let offset = align_up(payload.len() as u64);
            payload.resize(offset as usize, 0);
            for v in m.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorMeta {
                dtype: "f32".into(),
                name: format!("{i}.{suffix}"),
                nbytes: (m.data().len() * 4) as u64,
                offset,
                shape: vec![m.rows() as u64, m.cols() as u64],
                extra: BTreeMap::new(),
            });
        }
    }
    let header = PackHeader {
        adapters: adapters
            .iter()
            .map(|a| AdapterMeta {
                d_in: a.d_in() as u64,
                d_out: a.d_out() as u64,
                name: a.name().to_string(),
                rank: a.rank() as u64,
                scale: a.scale(),
                extra: BTreeMap::new(),
            })
            .collect(),
        tensors,
        extra: BTreeMap::new(),
    };
    let header = serde_json::to_vec(&header).expect("pack header serializes");
    let mut out = Vec::with_capacity(PREAMBLE_LEN + header.len() + payload.len());
    out.extend_from_slice(PACK_MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

pub fn load_adapter_pack(bytes: &[u8]) -> Result<Vec<LowRankAdapter>, FormatError> {
    load_adapter_pack_with(bytes, LoadOptions::default())
}

fn unknown_keys(opts: LoadOptions, context: &str, extra: &BTreeMap<String, Value>) -> Result<(), FormatError> {
    if let Some(key) = extra.keys().next() {
        if opts.strict {
            return Err(FormatError::UnknownKey(format!("{context}{key}")));
        }
        for key in extra.keys() {
            log::warn!("ignoring unknown pack header key '{context}{key}'");
        }
    }
    Ok(())
}

struct TensorView<'a> {
    rows: usize,
    cols: usize,
    bytes: &'a [u8],
    used: bool,
}

pub fn load_adapter_pack_with(bytes: &[u8], opts: LoadOptions) -> Result<Vec<LowRankAdapter>, FormatError> {
    let available = bytes.len() as u64;
    if bytes.len() >= 8 && &bytes[..8] != PACK_MAGIC {
        return Err(FormatError::BadMagic(String::from_utf8_lossy(&bytes[..8]).into_owned()));
    }
    if bytes.len() < PREAMBLE_LEN {
        return Err(FormatError::TruncatedFile {
            needed: PREAMBLE_LEN as u64,
            available,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8-byte slice"));
    let header_end = (PREAMBLE_LEN as u64)
        .checked_add(header_len)
        .filter(|&end| end <= available);
    let Some(header_end) = header_end else {
        return Err(FormatError::TruncatedFile {
            needed: (PREAMBLE_LEN as u64).saturating_add(header_len),
            available,
        });
    };
    let header_end = header_end as usize;
    let header_text = std::str::from_utf8(&bytes[PREAMBLE_LEN..header_end])
        .map_err(|e| FormatError::InvalidHeader(format!("header is not UTF-8: {e}")))?;
    let header: PackHeader =
        serde_json::from_str(header_text).map_err(|e| FormatError::InvalidHeader(e.to_string()))?;
    let payload = &bytes[header_end..];
    let payload_len = payload.len() as u64;

    unknown_keys(opts, "", &header.extra)?;

    let mut views: BTreeMap<&str, TensorView<'_>> = BTreeMap::new();
    let mut prev_end = 0u64;
    for t in &header.tensors {
        unknown_keys(opts, &format!("tensors.{}.", t.name), &t.extra)?;
        if t.dtype != "f32" {
            return Err(FormatError::UnsupportedDtype(t.dtype.clone()));
        }
        let [rows, cols] = t.shape[..] else {
            return Err(FormatError::ShapeMismatch(format!(
                "tensor '{}' has rank-{} shape, expected [rows, cols]",
                t.name,
                t.shape.len()
            )));
        };
        let expected = rows.checked_mul(cols).and_then(|n| n.checked_mul(4));
        if expected != Some(t.nbytes) {
            return Err(FormatError::ShapeMismatch(format!(
                "tensor '{}' shape [{rows}, {cols}] does not match {} bytes",
                t.name, t.nbytes
            )));
        }
        if t.offset % ALIGN != 0 {
            return Err(FormatError::InvalidLayout(format!(
                "tensor '{}' offset {} is not 8-byte aligned",
                t.name, t.offset
            )));
        }
        if t.offset < prev_end {
            return Err(FormatError::InvalidLayout(format!(
                "tensor '{}' at offset {} overlaps or precedes the previous tensor ending at {prev_end}",
                t.name, t.offset
            )));
        }
        let end = t.offset.checked_add(t.nbytes).filter(|&e| e <= payload_len);
        let Some(end) = end else {
            return Err(FormatError::TruncatedFile {
                needed: header_end as u64 + t.offset.saturating_add(t.nbytes),
                available,
            });
        };
        prev_end = end;
        let view = TensorView {
            rows: rows as usize,
            cols: cols as usize,
            bytes: &payload[t.offset as usize..end as usize],
            used: false,
        };
        if views.insert(t.name.as_str(), view).is_some() {
            return Err(FormatError::InvalidHeader(format!(
                "duplicate tensor name '{}'",
                t.name
            )));
        }
    }

    let mut adapters = Vec::with_capacity(header.adapters.len().min(views.len()));
    for (i, meta) in header.adapters.iter().enumerate() {
        unknown_keys(opts, &format!("adapters.{i}."), &meta.extra)?;
        let a = take_tensor(&mut views, &format!("{i}.a"), meta.rank, meta.d_in)?;
        let b = take_tensor(&mut views, &format!("{i}.b"), meta.d_out, meta.rank)?;
        if !meta.scale.is_finite() {
            return Err(FormatError::NonFiniteTensor(format!("{}.scale", meta.name)));
        }
        let adapter = LowRankAdapter::new(meta.name.clone(), a, b, meta.scale)
            .map_err(|e| FormatError::ShapeMismatch(e.to_string()))?;
        adapters.push(adapter);
    }
    if let Some((name, _)) = views.iter().find(|(_, v)| !v.used) {
        if opts.strict {
            return Err(FormatError::InvalidHeader(format!(
                "tensor '{name}' is not referenced by any adapter"
            )));
        }
        log::warn!("ignoring unreferenced tensor '{name}'");
    }
    Ok(adapters)
}

fn take_tensor(
    views: &mut BTreeMap<&str, TensorView<'_>>,
    name: &str,
    rows: u64,
    cols: u64,
) -> Result<Matrix, FormatError> {
    let view = views
        .get_mut(name)
        .ok_or_else(|| FormatError::InvalidHeader(format!("missing tensor '{name}'")))?;
    if view.used {
        return Err(FormatError::InvalidHeader(format!("tensor '{name}' referenced twice")));
    }
    if (view.rows as u64, view.cols as u64) != (rows, cols) {
        return Err(FormatError::ShapeMismatch(format!(
            "tensor '{name}' is [{}, {}] but adapter metadata implies [{rows}, {cols}]",
            view.rows, view.cols
        )));
    }
    view.used = true;
    let data: Vec<f32> = view
        .bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(FormatError::NonFiniteTensor(name.to_string()));
    }
    Ok(Matrix::new(view.rows, view.cols, data).expect("length checked against shape"))
}

fn finite_f32(values: Vec<f64>, base: usize) -> Result<Vec<f32>, FormatError> {
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let x = v as f32;
            if x.is_finite() {
                Ok(x)
            } else {
                Err(FormatError::NonFinite(base + i))
            }
        })
        .collect()
}

/// Parses a JSON array of numbers.
pub fn load_vector(text: &str) -> Result<Vec<f32>, FormatError> {
    let values: Vec<f64> = serde_json::from_str(text).map_err(|e| FormatError::Parse(e.to_string()))?;
    finite_f32(values, 0)
}

/// Parses a JSON array of equal-length number arrays.
pub fn load_matrix(text: &str) -> Result<Matrix, FormatError> {
    let rows: Vec<Vec<f64>> = serde_json::from_str(text).map_err(|e| FormatError::Parse(e.to_string()))?;
    let cols = rows.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(rows.len() * cols);
    for (r, row) in rows.iter().enumerate() {
        if row.len() != cols {
            return Err(FormatError::RaggedRows {
                row: r,
                expected: cols,
                actual: row.len(),
            });
        }
        data.extend(finite_f32(row.clone(), r * cols)?);
    }
    Ok(Matrix::new(rows.len(), cols, data).expect("row lengths checked"))
}

pub fn vector_to_json(v: &[f32]) -> String {
    serde_json::to_string(v).expect("f32 slices serialize")
}

pub fn matrix_to_json(m: &Matrix) -> String {
    serde_json::to_string(&m.to_rows()).expect("f32 rows serialize")
}

/// Compact JSON. Types written through this function declare their fields in
/// alphabetical order and use `BTreeMap` for maps, so keys come out sorted.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> String {
    serde_json::to_string(value).expect("report types serialize")
}

/// Writes via a temporary file in the destination directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    use std::io::Write;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_stream, StreamKey};
    use proptest::prelude::*;

    fn pack_with_header(header: &str, payload: &[u8]) -> Vec<u8> {
        let mut out = PACK_MAGIC.to_vec();
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    fn sample_adapters() -> Vec<LowRankAdapter> {
        let mut st = derive_stream(StreamKey::new(3, 0, 0, 0));
        vec![
            LowRankAdapter::random("style", 5, 7, 1, &mut st).unwrap(),
            LowRankAdapter::random("object", 5, 7, 3, &mut st).unwrap(),
        ]
    }

    #[test]
    fn round_trip_preserves_ranks_and_bytes() {
        let adapters = sample_adapters();
        let bytes = save_adapter_pack(&adapters);
        let back = load_adapter_pack(&bytes).unwrap();
        assert_eq!(back, adapters);
        assert_eq!(back[0].rank(), 1);
        assert_eq!(back[1].rank(), 3);
        assert_eq!(save_adapter_pack(&back), bytes);
    }

    #[test]
    fn header_layout_is_canonical() {
        let bytes = save_adapter_pack(&sample_adapters());
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[16..16 + len]).unwrap();
        assert!(header.starts_with(r#"{"adapters":[{"d_in":5,"d_out":7,"name":"style","rank":1,"scale":1.0}"#));
        // A of adapter 0 is 1x5 = 20 bytes, so B starts at the next 8-byte boundary.
        assert!(header.contains(r#"{"dtype":"f32","name":"0.b","nbytes":28,"offset":24,"shape":[7,1]}"#));
    }

    #[test]
    fn empty_pack_is_header_only() {
        let bytes = save_adapter_pack(&[]);
        assert_eq!(&bytes[16..], br#"{"adapters":[],"tensors":[]}"#);
        assert!(load_adapter_pack(&bytes).unwrap().is_empty());
    }

    #[test]
    fn bad_magic() {
        let mut bytes = save_adapter_pack(&sample_adapters());
        bytes[..8].copy_from_slice(b"LRPK0000");
        assert!(matches!(load_adapter_pack(&bytes), Err(FormatError::BadMagic(_))));
    }

    #[test]
    fn declared_shape_disagrees_with_nbytes() {
        let header = r#"{"adapters":[],"tensors":[{"dtype":"f32","name":"t","nbytes":12,"offset":0,"shape":[2,2]}]}"#;
        let bytes = pack_with_header(header, &[0u8; 12]);
        assert!(matches!(load_adapter_pack(&bytes), Err(FormatError::ShapeMismatch(_))));
    }

    #[test]
    fn huge_header_len_is_truncation_not_allocation() {
        let mut bytes = PACK_MAGIC.to_vec();
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(
            load_adapter_pack(&bytes),
            Err(FormatError::TruncatedFile { .. })
        ));
    }

    #[test]
    fn lenient_mode_ignores_unknown_keys() {
        let header = r#"{"adapters":[],"comment":"x","tensors":[]}"#;
        let bytes = pack_with_header(header, &[]);
        assert!(matches!(load_adapter_pack(&bytes), Err(FormatError::UnknownKey(k)) if k == "comment"));
        let got = load_adapter_pack_with(&bytes, LoadOptions { strict: false }).unwrap();
        assert!(got.is_empty());
    }

    #[test]
    fn vector_and_matrix_text() {
        assert_eq!(load_vector("[1.0, 2.5]").unwrap(), vec![1.0, 2.5]);
        assert_eq!(load_matrix("[[1,0],[0,1]]").unwrap(), Matrix::identity(2));
        assert_eq!(
            load_matrix("[[1],[2,3]]"),
            Err(FormatError::RaggedRows {
                row: 1,
                expected: 1,
                actual: 2
            })
        );
        assert!(matches!(load_vector("[1, "), Err(FormatError::Parse(_))));
        assert!(matches!(load_vector("[1e39]"), Err(FormatError::NonFinite(0))));
        assert_eq!(vector_to_json(&[1.0, 0.1, -2.5]), "[1.0,0.1,-2.5]");
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.json");
        write_atomic(&path, b"first").unwrap();
        write_atomic(&path, b"second").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"second");
    }

    proptest! {
        #[test]
        fn save_load_save_is_identity(seed in any::<u64>(), k in 0usize..4) {
            let mut st = derive_stream(StreamKey::new(seed, 5, 0, 0));
            let adapters: Vec<_> = (0..k)
                .map(|j| {
                    let d_in = 1 + (st.next_u64() % 9) as usize;
                    let d_out = 1 + (st.next_u64() % 9) as usize;
                    let r = 1 + (st.next_u64() % d_in.min(d_out) as u64) as usize;
                    let a = Matrix::random(r, d_in, &mut st);
                    let b = Matrix::random(d_out, r, &mut st);
                    LowRankAdapter::new(format!("a{j}"), a, b, st.uniform_f32(0.1, 4.0)).unwrap()
                })
                .collect();
            let bytes = save_adapter_pack(&adapters);
            let loaded = load_adapter_pack(&bytes).unwrap();
            prop_assert_eq!(&loaded, &adapters);
            prop_assert_eq!(save_adapter_pack(&loaded), bytes);
        }

        #[test]
        fn loader_never_panics_on_garbage(tail in proptest::collection::vec(any::<u8>(), 0..64), cut in 0usize..400) {
            let mut bytes = save_adapter_pack(&sample_adapters());
            bytes.truncate(cut.min(bytes.len()));
            bytes.extend(tail);
            let _ = load_adapter_pack(&bytes);
        }
    }
}
