//! DFD1 dataset files and CSV import.
//!
//! DFD1 layout, all integers little-endian:
//!
//! ```text
//! magic      b"DFD1"
//! version    u32
//! rows       u64
//! dim        u64
//! height     u32   (0 when the rows have no spatial shape)
//! width      u32
//! channels   u32
//! label_off  u64   byte offset of the label section
//! split_off  u64   byte offset of the split section, 0 if absent
//! note_len   u32
//! note       note_len bytes of UTF-8
//! features   rows * dim f32
//! labels     rows u8
//! splits     rows u8 (1 train, 2 val, 3 test), optional
//! ```

use std::fs;
use std::io::Read;
use std::path::Path;

use ndarray::Array2;

use super::{Dataset, SpatialShape, SplitTag};
use crate::error::{Error, Result};

pub const DFD_MAGIC: &[u8; 4] = b"DFD1";
pub const DFD_VERSION: u32 = 1;

const FIXED_HEADER: usize = 4 + 4 + 8 + 8 + 4 * 3 + 8 + 8 + 4;

pub fn encode_dfd(d: &Dataset) -> Vec<u8> {
    let rows = d.len();
    let dim = d.dim();
    let note = d.note().as_bytes();
    let header_len = FIXED_HEADER + note.len();
    let label_off = header_len + rows * dim * 4;
    let split_off = if d.splits().is_some() { label_off + rows } else { 0 };
    let (h, w, c) = d
        .spatial_shape()
        .map(|s| (s.height, s.width, s.channels))
        .unwrap_or((0, 0, 0));

    let mut out = Vec::with_capacity(label_off + 2 * rows);
    out.extend_from_slice(DFD_MAGIC);
    out.extend_from_slice(&DFD_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(dim as u64).to_le_bytes());
    for v in [h, w, c] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(label_off as u64).to_le_bytes());
    out.extend_from_slice(&(split_off as u64).to_le_bytes());
    out.extend_from_slice(&(note.len() as u32).to_le_bytes());
    out.extend_from_slice(note);
    for v in d.features().iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out.extend(d.labels().iter().map(|&y| y as u8));
    if let Some(splits) = d.splits() {
        out.extend(splits.iter().map(|t| t.code()));
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("DFD1 file truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_dfd(buf: &[u8]) -> Result<Dataset> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(4)? != DFD_MAGIC {
        return Err(Error::Format("not a DFD1 dataset (bad magic)".into()));
    }
    let version = cur.u32()?;
    if version != DFD_VERSION {
        return Err(Error::Format(format!("unsupported DFD1 version {version}")));
    }
    let rows = cur.u64()? as usize;
    let dim = cur.u64()? as usize;
    let (h, w, c) = (cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize);
    let label_off = cur.u64()? as usize;
    let split_off = cur.u64()? as usize;
    let note_len = cur.u32()? as usize;
    let note = String::from_utf8(cur.take(note_len)?.to_vec())
        .map_err(|_| Error::Format("DFD1 note is not UTF-8".into()))?;
    let feature_bytes = rows
        .checked_mul(dim)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::Format("DFD1 size overflow".into()))?;
    let raw = cur.take(feature_bytes)?;
    let values: Vec<f64> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    cur.pos = label_off;
    let labels: Vec<usize> = cur.take(rows)?.iter().map(|&b| b as usize).collect();
    let spatial = (h * w * c > 0).then_some(SpatialShape { height: h, width: w, channels: c });
    let features = Array2::from_shape_vec((rows, dim), values)
        .map_err(|e| Error::Format(format!("DFD1 feature block: {e}")))?;
    let dataset = Dataset::new(features, labels, spatial, note)?;
    if split_off == 0 {
        return Ok(dataset);
    }
    cur.pos = split_off;
    let splits = cur
        .take(rows)?
        .iter()
        .map(|&b| SplitTag::from_code(b).ok_or_else(|| Error::Format(format!("bad split code {b}"))))
        .collect::<Result<Vec<_>>>()?;
    dataset.with_splits(splits)
}

pub fn write_dfd(d: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode_dfd(d))?;
    Ok(())
}

pub fn read_dfd(path: &Path) -> Result<Dataset> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_dfd(&buf)
}

/// Reads `f0,..,f{D-1},label` rows. Column order after the header is taken
/// from the header names; extra columns are rejected.
pub fn read_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err(0))?;
    let headers = reader.headers().map_err(csv_err(0))?.clone();
    let label_col = headers
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| Error::Parse { row: 0, reason: "missing 'label' column".into() })?;
    let mut feature_cols = Vec::new();
    for d in 0..headers.len() - 1 {
        let name = format!("f{d}");
        let col = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse { row: 0, reason: format!("missing column {name}") })?;
        feature_cols.push(col);
    }
    let dim = feature_cols.len();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(csv_err(row))?;
        for &col in &feature_cols {
            let v: f64 = record[col]
                .trim()
                .parse()
                .map_err(|_| Error::Parse { row, reason: format!("bad feature value '{}'", &record[col]) })?;
            values.push(v);
        }
        let label = match record[label_col].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(Error::Parse { row, reason: format!("label '{other}' is not 0 or 1") }),
        };
        labels.push(label);
    }
    let features = Array2::from_shape_vec((labels.len(), dim), values)
        .map_err(|e| Error::Format(e.to_string()))?;
    Dataset::new(features, labels, None, format!("csv import from {}", path.display()))
}

fn csv_err(row: usize) -> impl Fn(csv::Error) -> Error {
    move |e| Error::Parse { row, reason: e.to_string() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, split, SynthSpec};
    use proptest::prelude::*;

    #[test]
    fn header_starts_with_magic_and_version() {
        let d = generate(&SynthSpec::blobs(50, 4, 0.1, 3)).unwrap();
        let bytes = encode_dfd(&d);
        assert_eq!(&bytes[..4], b"DFD1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 50);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let d = generate(&SynthSpec::blobs(50, 4, 0.1, 3)).unwrap();
        let mut bytes = encode_dfd(&d);
        assert!(decode_dfd(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(matches!(decode_dfd(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn csv_import_reads_features_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ext.csv");
        fs::write(&path, "f0,f1,label\n0.5,1.5,1\n-2,3,0\n").unwrap();
        let d = read_csv(&path).unwrap();
        assert_eq!(d.dim(), 2);
        assert_eq!(d.labels(), &[1, 0]);
        assert_eq!(d.features()[[1, 0]], -2.0);

        fs::write(&path, "f0,f1,label\n0.5,1.5,1\n-2,x,0\n").unwrap();
        assert!(matches!(read_csv(&path), Err(Error::Parse { row: 2, .. })));
        fs::write(&path, "f0,f1,label\n0.5,1.5,2\n").unwrap();
        assert!(matches!(read_csv(&path), Err(Error::Parse { row: 1, .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn dfd_round_trip(n in 30usize..120, seed in 0u64..1000, image in proptest::bool::ANY) {
            let spec = if image {
                SynthSpec::image(n, 4, 4, 0.2, seed)
            } else {
                SynthSpec::blobs(n, 3, 0.2, seed)
            };
            let mut d = generate(&SynthSpec { positive_fraction: 0.3, ..spec }).unwrap();
            if seed % 2 == 0 {
                d = split(&d, seed).unwrap();
            }
            let back = decode_dfd(&encode_dfd(&d)).unwrap();
            prop_assert_eq!(back, d);
        }
    }
}
