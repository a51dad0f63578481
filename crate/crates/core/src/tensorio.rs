//! GCT1 tensor files and the JSON dataset manifest.
//!
//! Layout of a GCT1 file (all integers little-endian, no padding):
//!
//! | offset | size      | field                          |
//! |--------|-----------|--------------------------------|
//! | 0      | 4         | magic `"GCT1"`                 |
//! | 4      | 1         | dtype code (`0x01` = f32)      |
//! | 5      | 1         | ndim                           |
//! | 6      | 4 × ndim  | dims, `u32` each               |
//! | ...    | 4 × numel | row-major `f32` payload        |
//!
//! Nothing may follow the payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: [u8; 4] = *b"GCT1";
pub const DTYPE_F32: u8 = 0x01;

/// Dense row-major `f32` array.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorF32 {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl TensorF32 {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        validate_shape(&shape)?;
        let numel = numel(&shape)?;
        if numel != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} holds {numel} elements but data has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        validate_shape(&shape)?;
        let n = numel(&shape)?;
        Ok(Self { shape, data: vec![0.0; n] })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<f32>) {
        (self.shape, self.data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Bitwise equality; distinguishes `-0.0` from `0.0` and compares NaN payloads.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::InvalidShape("shape must have at least one dimension".into()));
    }
    if shape.len() > u8::MAX as usize {
        return Err(Error::InvalidShape(format!("{} dimensions exceed the u8 ndim field", shape.len())));
    }
    if let Some(d) = shape.iter().find(|&&d| d == 0 || d > u32::MAX as usize) {
        return Err(Error::InvalidShape(format!("dimension {d} outside 1..=u32::MAX")));
    }
    Ok(())
}

fn numel(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::InvalidShape(format!("element count of {shape:?} overflows")))
}

pub fn write_tensor<W: Write>(t: &TensorF32, mut sink: W) -> Result<()> {
    validate_shape(&t.shape)?;
    if numel(&t.shape)? != t.data.len() {
        return Err(Error::InvalidShape("shape/data length mismatch".into()));
    }
    let mut header = Vec::with_capacity(6 + 4 * t.shape.len());
    header.extend_from_slice(&TENSOR_MAGIC);
    header.push(DTYPE_F32);
    header.push(t.shape.len() as u8);
    for &d in &t.shape {
        header.extend_from_slice(&(d as u32).to_le_bytes());
    }
    sink.write_all(&header)?;
    let mut payload = Vec::with_capacity(4 * t.data.len());
    for v in &t.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&payload)?;
    sink.flush()?;
    Ok(())
}

fn read_exact_or<R: Read>(src: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    src.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(what.to_string()),
        _ => Error::Io(e),
    })
}

pub fn read_tensor<R: Read>(mut source: R) -> Result<TensorF32> {
    let mut magic = [0u8; 4];
    read_exact_or(&mut source, &mut magic, "magic")?;
    if magic != TENSOR_MAGIC {
        return Err(Error::BadMagic { expected: TENSOR_MAGIC, found: magic });
    }
    let mut head = [0u8; 2];
    read_exact_or(&mut source, &mut head, "header")?;
    if head[0] != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(head[0]));
    }
    let ndim = head[1] as usize;
    if ndim == 0 {
        return Err(Error::InvalidShape("ndim is zero".into()));
    }
    let mut dims = vec![0u8; 4 * ndim];
    read_exact_or(&mut source, &mut dims, "dims")?;
    let shape: Vec<usize> =
        dims.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize).collect();
    validate_shape(&shape)?;
    let n = numel(&shape)?;
    let bytes = n.checked_mul(4).ok_or_else(|| Error::InvalidShape("payload size overflows".into()))?;

    // Read incrementally so a bogus header cannot force a huge allocation.
    let mut payload = Vec::new();
    let got = source.by_ref().take(bytes as u64).read_to_end(&mut payload)?;
    if got < bytes {
        return Err(Error::Truncated(format!("payload declares {n} elements, found {} bytes of {bytes}", got)));
    }
    let mut probe = [0u8; 1];
    if source.read(&mut probe)? != 0 {
        return Err(Error::TrailingBytes);
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(TensorF32 { shape, data })
}

pub fn save_tensor(t: &TensorF32, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path)?;
    write_tensor(t, BufWriter::new(file))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<TensorF32> {
    let file = File::open(path)?;
    read_tensor(BufReader::new(file))
}

/// One manifest entry: a tensor file and its class index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub path: PathBuf,
    pub label: usize,
}

/// Labelled list of per-sample tensor files.
///
/// Relative sample paths are resolved against the directory holding the
/// manifest file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub samples: Vec<SampleEntry>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(classes: Vec<String>, samples: Vec<SampleEntry>) -> Result<Self> {
        let m = Self { classes, samples, base_dir: PathBuf::new() };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Manifest("no classes declared".into()));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.label >= self.classes.len() {
                return Err(Error::Manifest(format!(
                    "sample {i} ({}) has label {} but only {} classes exist",
                    s.path.display(),
                    s.label,
                    self.classes.len()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn resolve(&self, entry: &SampleEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.base_dir.join(&entry.path)
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut m: Self =
            serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Manifest(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    /// Reads every sample tensor in manifest order.
    pub fn read_tensors(&self) -> Result<Vec<(TensorF32, usize)>> {
        self.samples
            .iter()
            .map(|s| {
                let p = self.resolve(s);
                let t = load_tensor(&p).map_err(|e| match e {
                    Error::Io(io) => Error::Manifest(format!("{}: {io}", p.display())),
                    other => other,
                })?;
                Ok((t, s.label))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encode(t: &TensorF32) -> Vec<u8> {
        let mut buf = Vec::new();
        write_tensor(t, &mut buf).unwrap();
        buf
    }

    #[test]
    fn two_by_two_layout() {
        let t = TensorF32::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let buf = encode(&t);
        assert_eq!(&buf[..4], b"GCT1");
        assert_eq!(buf[4], 0x01);
        assert_eq!(buf[5], 2);
        assert_eq!(&buf[6..14], &[2, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(buf.len(), 4 + 2 + 8 + 16);
        assert_eq!(&buf[14..18], &1.0f32.to_le_bytes());
        assert!(read_tensor(&buf[..]).unwrap().bit_eq(&t));
    }

    #[test]
    fn minimal_file() {
        let t = TensorF32::new(vec![1], vec![0.0]).unwrap();
        let buf = encode(&t);
        assert_eq!(buf, [b'G', b'C', b'T', b'1', 1, 1, 1, 0, 0, 0, 0, 0, 0, 0]);
        assert!(read_tensor(&buf[..]).unwrap().bit_eq(&t));
    }

    #[test]
    fn rejects_bad_magic() {
        let mut buf = encode(&TensorF32::new(vec![1], vec![1.0]).unwrap());
        buf[..4].copy_from_slice(b"XXXX");
        assert!(matches!(read_tensor(&buf[..]), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn rejects_unknown_dtype() {
        let mut buf = encode(&TensorF32::new(vec![1], vec![1.0]).unwrap());
        buf[4] = 0x02;
        assert!(matches!(read_tensor(&buf[..]), Err(Error::UnsupportedDtype(2))));
    }

    #[test]
    fn rejects_short_payload() {
        let buf = encode(&TensorF32::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let short = &buf[..buf.len() - 4];
        assert!(matches!(read_tensor(short), Err(Error::Truncated(_))));
    }

    #[test]
    fn rejects_trailing_bytes() {
        let mut buf = encode(&TensorF32::new(vec![1], vec![1.0]).unwrap());
        buf.push(0);
        assert!(matches!(read_tensor(&buf[..]), Err(Error::TrailingBytes)));
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(TensorF32::new(vec![], vec![]).is_err());
        assert!(TensorF32::new(vec![2, 0], vec![]).is_err());
        assert!(TensorF32::new(vec![3], vec![1.0]).is_err());
    }

    #[test]
    fn manifest_labels_checked() {
        let bad = DatasetManifest::new(vec!["a".into()], vec![SampleEntry { path: "x.gct".into(), label: 1 }]);
        assert!(matches!(bad, Err(Error::Manifest(_))));
        let json = r#"{"classes":["a","b"],"samples":[{"path":"s0.gct","label":1}]}"#;
        let m: DatasetManifest = serde_json::from_str(json).unwrap();
        m.validate().unwrap();
        assert_eq!(m.samples[0].label, 1);
    }
}
