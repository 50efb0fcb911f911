//! The `.uwt` container: named f32 tensors in a flat binary file.
//!
//! Layout:
//!
//! ```text
//! [u64 little-endian header length N]
//! [N bytes UTF-8 JSON: {"name": {"dtype":"f32","shape":[..],"offset":o,"nbytes":b}, ..}]
//! [payload: concatenated little-endian IEEE-754 binary32 values]
//! ```
//!
//! Offsets are relative to the payload start and must tile it exactly, with
//! no gaps, overlaps, or trailing bytes. Names are written in lexicographic
//! order with contiguous offsets, so serializing the same archive twice
//! yields identical bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::mat::Mat;
use crate::{Error, Result};

/// One named tensor: a shape and its row-major f32 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn from_mat(m: &Mat) -> Self {
        Tensor {
            shape: vec![m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
        }
    }

    pub fn to_mat(&self) -> Result<Mat> {
        if self.shape.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "expected 2-d tensor, found shape {:?}",
                self.shape
            )));
        }
        Ok(Mat::from_vec(self.shape[0], self.shape[1], self.data.clone()))
    }

    pub fn num_elements(&self) -> usize {
        self.shape.iter().product()
    }
}

/// An ordered collection of named tensors; the single persistence format for
/// weights, score tables, masks, and embeddings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    entries: BTreeMap<String, Tensor>,
    allow_nonfinite: bool,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Archives carrying NaN/Inf must be explicitly flagged; everything this
    /// crate persists is finite, so the flag exists only for diagnostics.
    pub fn with_allow_nonfinite(mut self, allow: bool) -> Self {
        self.allow_nonfinite = allow;
        self
    }

    pub fn allow_nonfinite(&self) -> bool {
        self.allow_nonfinite
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        if name.is_empty() {
            return Err(Error::EmptyTensorName);
        }
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateTensor(name.to_string()));
        }
        if shape.contains(&0) {
            return Err(Error::ShapeSizeMismatch {
                name: name.to_string(),
                shape,
                len: data.len(),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeSizeMismatch {
                name: name.to_string(),
                shape,
                len: data.len(),
            });
        }
        if !self.allow_nonfinite && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.entries.insert(name.to_string(), Tensor { shape, data });
        Ok(())
    }

    pub fn insert_mat(&mut self, name: &str, m: &Mat) -> Result<()> {
        self.insert(name, vec![m.rows(), m.cols()], m.as_slice().to_vec())
    }

    pub fn insert_vec(&mut self, name: &str, v: &[f32]) -> Result<()> {
        self.insert(name, vec![v.len()], v.to_vec())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

/// Serializes the archive, returning the total byte count written.
pub fn write_archive<W: Write>(archive: &TensorArchive, mut dest: W) -> Result<u64> {
    // Re-validate: entries are checked on insert, but archives can also be
    // assembled field-by-field by other constructors in this crate.
    let mut header = BTreeMap::new();
    let mut offset: u64 = 0;
    for (name, tensor) in archive.entries.iter() {
        if !archive.allow_nonfinite && tensor.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name.clone()));
        }
        let nbytes = (tensor.data.len() * 4) as u64;
        header.insert(
            name.as_str(),
            HeaderEntry {
                dtype: "f32".to_string(),
                shape: tensor.shape.clone(),
                offset,
                nbytes,
            },
        );
        offset += nbytes;
    }
    let header_bytes = serde_json::to_vec(&header)?;
    dest.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    dest.write_all(&header_bytes)?;
    let mut written = 8 + header_bytes.len() as u64;
    for tensor in archive.entries.values() {
        for v in &tensor.data {
            dest.write_all(&v.to_le_bytes())?;
        }
        written += (tensor.data.len() * 4) as u64;
    }
    Ok(written)
}

/// Serializes to an in-memory buffer.
pub fn write_archive_bytes(archive: &TensorArchive) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_archive(archive, &mut buf)?;
    Ok(buf)
}

/// Parses an archive, re-validating every invariant. Values must be finite.
pub fn read_archive<R: Read>(source: R) -> Result<TensorArchive> {
    read_archive_with(source, false)
}

/// Parses an archive; with `allow_nonfinite` NaN/Inf payloads round-trip.
pub fn read_archive_with<R: Read>(mut source: R, allow_nonfinite: bool) -> Result<TensorArchive> {
    let mut len_bytes = [0u8; 8];
    read_exact_or_truncated(&mut source, &mut len_bytes, "header length")?;
    let header_len = u64::from_le_bytes(len_bytes);

    // Bounded read: a hostile header length must not trigger a giant
    // allocation before any bytes exist to back it.
    let mut header_bytes = Vec::new();
    source
        .by_ref()
        .take(header_len)
        .read_to_end(&mut header_bytes)?;
    if (header_bytes.len() as u64) < header_len {
        return Err(Error::Truncated(format!(
            "header: declared {header_len} bytes, found {}",
            header_bytes.len()
        )));
    }
    let header: BTreeMap<String, HeaderEntry> = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;

    let mut payload = Vec::new();
    source.read_to_end(&mut payload)?;

    // Validate per-entry metadata first.
    for (name, entry) in &header {
        if name.is_empty() {
            return Err(Error::EmptyTensorName);
        }
        if entry.dtype != "f32" {
            return Err(Error::UnsupportedDtype {
                name: name.clone(),
                dtype: entry.dtype.clone(),
            });
        }
        if entry.shape.contains(&0) {
            return Err(Error::ShapeSizeMismatch {
                name: name.clone(),
                shape: entry.shape.clone(),
                len: (entry.nbytes / 4) as usize,
            });
        }
        let elems = entry
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::MalformedHeader(format!("shape overflow for {name:?}")))?;
        let expect_bytes = (elems as u64)
            .checked_mul(4)
            .ok_or_else(|| Error::MalformedHeader(format!("size overflow for {name:?}")))?;
        if expect_bytes != entry.nbytes {
            return Err(Error::ShapeSizeMismatch {
                name: name.clone(),
                shape: entry.shape.clone(),
                len: (entry.nbytes / 4) as usize,
            });
        }
    }

    // Offsets must tile the payload exactly.
    let mut spans: Vec<(&String, u64, u64)> = header
        .iter()
        .map(|(name, e)| (name, e.offset, e.nbytes))
        .collect();
    spans.sort_by_key(|&(_, offset, _)| offset);
    let mut cursor: u64 = 0;
    for (name, offset, nbytes) in &spans {
        if *offset != cursor {
            return Err(Error::PayloadLayout(format!(
                "tensor {name:?} at offset {offset}, expected {cursor} (overlap or gap)"
            )));
        }
        cursor = offset
            .checked_add(*nbytes)
            .ok_or_else(|| Error::MalformedHeader(format!("offset overflow for {name:?}")))?;
    }
    if cursor > payload.len() as u64 {
        return Err(Error::Truncated(format!(
            "payload: declared {cursor} bytes, found {}",
            payload.len()
        )));
    }
    if cursor < payload.len() as u64 {
        return Err(Error::PayloadLayout(format!(
            "payload has {} trailing bytes",
            payload.len() as u64 - cursor
        )));
    }

    let mut archive = TensorArchive::new().with_allow_nonfinite(allow_nonfinite);
    for (name, entry) in &header {
        let start = entry.offset as usize;
        let end = start + entry.nbytes as usize;
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        archive.insert(name, entry.shape.clone(), data)?;
    }
    Ok(archive)
}

fn read_exact_or_truncated<R: Read>(source: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match source.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(Error::Truncated(format!(
                    "{what}: needed {} bytes, found {filled}",
                    buf.len()
                )))
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

/// A single discrepancy found by [`validate_archive`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mismatch {
    /// Expected tensor absent from the archive.
    Missing(String),
    /// Archive tensor not in the expected map.
    Extra(String),
    /// Present under the right name but with the wrong shape.
    Shape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
}

/// Reports every missing, extra, or wrongly shaped tensor. Never errors.
pub fn validate_archive(
    archive: &TensorArchive,
    expected: &BTreeMap<String, Vec<usize>>,
) -> Vec<Mismatch> {
    let mut out = Vec::new();
    for (name, shape) in expected {
        match archive.get(name) {
            None => out.push(Mismatch::Missing(name.clone())),
            Some(t) if &t.shape != shape => out.push(Mismatch::Shape {
                name: name.clone(),
                expected: shape.clone(),
                actual: t.shape.clone(),
            }),
            Some(_) => {}
        }
    }
    for name in archive.names() {
        if !expected.contains_key(name) {
            out.push(Mismatch::Extra(name.to_string()));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_tensor_archive() -> TensorArchive {
        let mut a = TensorArchive::new();
        a.insert("w", vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        a
    }

    #[test]
    fn empty_archive_is_ten_bytes() {
        let a = TensorArchive::new();
        let bytes = write_archive_bytes(&a).unwrap();
        assert_eq!(bytes.len(), 8 + "{}".len());
        assert_eq!(&bytes[8..], b"{}");
        let back = read_archive(&bytes[..]).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn single_tensor_sizes() {
        let a = one_tensor_archive();
        let bytes = write_archive_bytes(&a).unwrap();
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[8..8 + header_len]).unwrap();
        assert!(header.contains("\"nbytes\":16"), "header: {header}");
        assert_eq!(bytes.len() - 8 - header_len, 16);
    }

    #[test]
    fn three_tensor_roundtrip_is_bit_exact() {
        let mut a = TensorArchive::new();
        a.insert("b", vec![3], vec![-0.0, 1.5, f32::MIN_POSITIVE])
            .unwrap();
        a.insert("a", vec![1, 2], vec![1.0e-38, -7.25]).unwrap();
        a.insert("c", vec![2, 1, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let bytes = write_archive_bytes(&a).unwrap();
        let back = read_archive(&bytes[..]).unwrap();
        assert_eq!(back.len(), 3);
        for (name, t) in a.iter() {
            let r = back.get(name).unwrap();
            assert_eq!(r.shape, t.shape);
            let same_bits = r
                .data
                .iter()
                .zip(&t.data)
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same_bits, "tensor {name} changed bits");
        }
    }

    #[test]
    fn header_is_deterministic_and_sorted() {
        let mut a = TensorArchive::new();
        a.insert("zz", vec![1], vec![1.0]).unwrap();
        a.insert("aa", vec![1], vec![2.0]).unwrap();
        let b1 = write_archive_bytes(&a).unwrap();
        let b2 = write_archive_bytes(&a).unwrap();
        assert_eq!(b1, b2);
        let header_len = u64::from_le_bytes(b1[..8].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&b1[8..8 + header_len]).unwrap();
        let aa = header.find("\"aa\"").unwrap();
        let zz = header.find("\"zz\"").unwrap();
        assert!(aa < zz, "names not sorted: {header}");
    }

    #[test]
    fn rejects_duplicate_and_empty_names() {
        let mut a = one_tensor_archive();
        assert!(matches!(
            a.insert("w", vec![1], vec![0.0]),
            Err(Error::DuplicateTensor(_))
        ));
        assert!(matches!(
            a.insert("", vec![1], vec![0.0]),
            Err(Error::EmptyTensorName)
        ));
    }

    #[test]
    fn rejects_nonfinite_without_flag() {
        let mut a = TensorArchive::new();
        assert!(matches!(
            a.insert("n", vec![1], vec![f32::NAN]),
            Err(Error::NonFinite(_))
        ));
        let mut flagged = TensorArchive::new().with_allow_nonfinite(true);
        flagged.insert("n", vec![2], vec![f32::NAN, f32::INFINITY]).unwrap();
        let bytes = write_archive_bytes(&flagged).unwrap();
        assert!(matches!(read_archive(&bytes[..]), Err(Error::NonFinite(_))));
        let back = read_archive_with(&bytes[..], true).unwrap();
        assert!(back.get("n").unwrap().data[0].is_nan());
    }

    #[test]
    fn rejects_shape_size_mismatch() {
        let mut a = TensorArchive::new();
        assert!(matches!(
            a.insert("w", vec![2, 2], vec![1.0, 2.0]),
            Err(Error::ShapeSizeMismatch { .. })
        ));
        // Same check on the read path: forge a header declaring nbytes=8 for
        // a [2,2] tensor.
        let header = br#"{"w":{"dtype":"f32","shape":[2,2],"offset":0,"nbytes":8}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0u8; 8]);
        assert!(matches!(
            read_archive(&bytes[..]),
            Err(Error::ShapeSizeMismatch { .. })
        ));
    }

    #[test]
    fn rejects_truncated_payload() {
        let a = one_tensor_archive();
        let bytes = write_archive_bytes(&a).unwrap();
        assert!(matches!(
            read_archive(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated(_))
        ));
    }

    #[test]
    fn rejects_gap_overlap_trailing_and_bad_dtype() {
        let make = |header: &[u8], payload_len: usize| {
            let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
            bytes.extend_from_slice(header);
            bytes.extend_from_slice(&vec![0u8; payload_len]);
            bytes
        };
        // gap: second tensor starts at 8 instead of 4
        let gap = make(
            br#"{"a":{"dtype":"f32","shape":[1],"offset":0,"nbytes":4},"b":{"dtype":"f32","shape":[1],"offset":8,"nbytes":4}}"#,
            12,
        );
        assert!(matches!(read_archive(&gap[..]), Err(Error::PayloadLayout(_))));
        // overlap
        let overlap = make(
            br#"{"a":{"dtype":"f32","shape":[2],"offset":0,"nbytes":8},"b":{"dtype":"f32","shape":[1],"offset":4,"nbytes":4}}"#,
            12,
        );
        assert!(matches!(
            read_archive(&overlap[..]),
            Err(Error::PayloadLayout(_))
        ));
        // trailing bytes after the declared payload
        let trailing = make(
            br#"{"a":{"dtype":"f32","shape":[1],"offset":0,"nbytes":4}}"#,
            8,
        );
        assert!(matches!(
            read_archive(&trailing[..]),
            Err(Error::PayloadLayout(_))
        ));
        // dtype other than f32
        let dtype = make(
            br#"{"a":{"dtype":"f64","shape":[1],"offset":0,"nbytes":8}}"#,
            8,
        );
        assert!(matches!(
            read_archive(&dtype[..]),
            Err(Error::UnsupportedDtype { .. })
        ));
        // malformed JSON
        let mut bad = (3u64).to_le_bytes().to_vec();
        bad.extend_from_slice(b"{x}");
        assert!(matches!(
            read_archive(&bad[..]),
            Err(Error::MalformedHeader(_))
        ));
    }

    #[test]
    fn validate_reports_missing_extra_and_shape() {
        let a = one_tensor_archive();
        let mut expected = BTreeMap::new();
        expected.insert("w".to_string(), vec![2, 2]);
        assert!(validate_archive(&a, &expected).is_empty());

        expected.insert("text.block0.out.weight".to_string(), vec![4, 4]);
        let report = validate_archive(&a, &expected);
        assert_eq!(
            report,
            vec![Mismatch::Missing("text.block0.out.weight".to_string())]
        );

        let mut expected = BTreeMap::new();
        expected.insert("w".to_string(), vec![8, 4]);
        let report = validate_archive(&a, &expected);
        assert!(matches!(&report[0], Mismatch::Shape { name, .. } if name == "w"));

        let expected = BTreeMap::new();
        let report = validate_archive(&a, &expected);
        assert_eq!(report, vec![Mismatch::Extra("w".to_string())]);
    }
}
