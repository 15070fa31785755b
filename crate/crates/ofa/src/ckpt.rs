//! Checkpoint container: a text manifest (one JSON meta line plus a tensor
//! directory of name/shape/offset) followed by the raw little-endian f64
//! payload. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("bad checkpoint manifest: {0}")]
    BadManifest(String),
    #[error("payload length mismatch: expected {want} f64 values, got {got}")]
    PayloadMismatch { want: usize, got: usize },
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

const MAGIC: &str = "OFACKPT1";

#[derive(Debug, Clone)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

/// Named f64 tensors plus a free-form JSON meta record.
#[derive(Debug, Clone)]
pub struct TensorFile {
    pub meta: serde_json::Value,
    entries: Vec<TensorEntry>,
    payload: Vec<f64>,
}

impl TensorFile {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, entries: Vec::new(), payload: Vec::new() }
    }

    pub fn push(&mut self, name: &str, rows: usize, cols: usize, values: &[f64]) {
        assert_eq!(values.len(), rows * cols, "tensor {name} payload length");
        self.entries.push(TensorEntry {
            name: name.to_string(),
            rows,
            cols,
            offset: self.payload.len(),
        });
        self.payload.extend_from_slice(values);
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Result<(usize, usize, &[f64]), CkptError> {
        let e = self
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| CkptError::MissingTensor(name.to_string()))?;
        Ok((e.rows, e.cols, &self.payload[e.offset..e.offset + e.rows * e.cols]))
    }

    pub fn save(&self, path: &Path) -> Result<(), CkptError> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "{}", serde_json::to_string(&self.meta)?)?;
        writeln!(w, "tensors {}", self.entries.len())?;
        for e in &self.entries {
            writeln!(w, "{} {} {} {}", e.name, e.rows, e.cols, e.offset)?;
        }
        writeln!(w, "payload {}", self.payload.len())?;
        for v in &self.payload {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CkptError> {
        let mut r = BufReader::new(File::open(path)?);
        let magic = read_line(&mut r)?;
        if magic != MAGIC {
            return Err(CkptError::BadManifest(format!("bad magic {magic:?}")));
        }
        let meta: serde_json::Value = serde_json::from_str(&read_line(&mut r)?)?;
        let tline = read_line(&mut r)?;
        let count: usize = tline
            .strip_prefix("tensors ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CkptError::BadManifest(tline.clone()))?;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let line = read_line(&mut r)?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(CkptError::BadManifest(line));
            }
            let bad = || CkptError::BadManifest(line.clone());
            entries.push(TensorEntry {
                name: parts[0].to_string(),
                rows: parts[1].parse().map_err(|_| bad())?,
                cols: parts[2].parse().map_err(|_| bad())?,
                offset: parts[3].parse().map_err(|_| bad())?,
            });
        }
        let pline = read_line(&mut r)?;
        let total: usize = pline
            .strip_prefix("payload ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CkptError::BadManifest(pline.clone()))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != total * 8 {
            return Err(CkptError::PayloadMismatch { want: total, got: bytes.len() / 8 });
        }
        let payload: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect();
        for e in &entries {
            if e.offset + e.rows * e.cols > payload.len() {
                return Err(CkptError::BadManifest(format!("tensor {} overruns payload", e.name)));
            }
        }
        Ok(Self { meta, entries, payload })
    }
}

fn read_line<R: Read>(r: &mut R) -> Result<String, CkptError> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(CkptError::BadManifest("unexpected end of manifest".into()));
        }
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
    }
    String::from_utf8(line).map_err(|_| CkptError::BadManifest("manifest is not utf-8".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let mut tf = TensorFile::new(serde_json::json!({"epoch": 3, "note": "x"}));
        tf.push("a", 2, 3, &[1.0, -2.5, 3.25e-300, 0.0, -0.0, f64::MIN_POSITIVE]);
        tf.push("b", 1, 1, &[42.0]);
        tf.save(&path).unwrap();
        let back = TensorFile::load(&path).unwrap();
        assert_eq!(back.meta["epoch"], 3);
        let (r, c, v) = back.get("a").unwrap();
        assert_eq!((r, c), (2, 3));
        let (_, _, orig) = tf.get("a").unwrap();
        for (x, y) in v.iter().zip(orig) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert!(matches!(back.get("zzz"), Err(CkptError::MissingTensor(_))));
    }

    #[test]
    fn truncated_payload_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let mut tf = TensorFile::new(serde_json::json!({}));
        tf.push("a", 1, 4, &[1.0, 2.0, 3.0, 4.0]);
        tf.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(TensorFile::load(&path), Err(CkptError::PayloadMismatch { .. })));
    }
}
