//! On-disk formats: `VVOL1` volumes/masks and `VMAT1` square matrices.
//!
//! A VVOL file is a single text header line
//! `VVOL1 <D> <H> <W> <dtype> <sz> <sy> <sx>\n` with dtype `f32` (scalar
//! volumes) or `u8` (label masks), followed immediately by the raw
//! little-endian payload of D*H*W elements in z-major/y/x order.
//! A VMAT file is `VMAT1 <N> <N> f32\n` plus a row-major little-endian f32
//! payload. Save/load round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::volgrid::{SegMask, VolError, Volume};

#[derive(Debug, Error)]
pub enum VvolError {
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("payload length mismatch: expected {want} bytes, got {got}")]
    PayloadMismatch { want: usize, got: usize },
    #[error(transparent)]
    Volume(#[from] VolError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const VOL_MAGIC: &str = "VVOL1";
const MAT_MAGIC: &str = "VMAT1";

pub fn save_volume(volume: &Volume, path: &Path) -> Result<(), VvolError> {
    let mut w = BufWriter::new(File::create(path)?);
    let [d, h, wd] = volume.dims();
    let [sz, sy, sx] = volume.spacing();
    writeln!(w, "{VOL_MAGIC} {d} {h} {wd} f32 {sz} {sy} {sx}")?;
    for v in volume.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<Volume, VvolError> {
    let mut r = BufReader::new(File::open(path)?);
    let hdr = read_header_line(&mut r)?;
    let (dims, dtype, spacing) = parse_vol_header(&hdr)?;
    if dtype != "f32" {
        return Err(VvolError::BadHeader(format!("expected dtype f32, got {dtype}")));
    }
    let n = dims[0] * dims[1] * dims[2];
    let bytes = read_payload(&mut r, n * 4)?;
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Volume::new(dims, spacing, data)?)
}

pub fn save_mask(mask: &SegMask, path: &Path) -> Result<(), VvolError> {
    let mut w = BufWriter::new(File::create(path)?);
    let [d, h, wd] = mask.dims();
    writeln!(w, "{VOL_MAGIC} {d} {h} {wd} u8 1 1 1")?;
    w.write_all(mask.labels())?;
    w.flush()?;
    Ok(())
}

pub fn load_mask(path: &Path) -> Result<SegMask, VvolError> {
    let mut r = BufReader::new(File::open(path)?);
    let hdr = read_header_line(&mut r)?;
    let (dims, dtype, _) = parse_vol_header(&hdr)?;
    if dtype != "u8" {
        return Err(VvolError::BadHeader(format!("expected dtype u8, got {dtype}")));
    }
    let n = dims[0] * dims[1] * dims[2];
    let labels = read_payload(&mut r, n)?;
    Ok(SegMask::new(dims, labels, u8::MAX)?)
}

/// Save a square row-major matrix as `VMAT1 <N> <N> f32` (values narrowed to f32).
pub fn save_matrix(n: usize, values: &[f64], path: &Path) -> Result<(), VvolError> {
    assert_eq!(values.len(), n * n, "matrix payload must be N*N");
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{MAT_MAGIC} {n} {n} f32")?;
    for v in values {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_matrix(path: &Path) -> Result<(usize, Vec<f32>), VvolError> {
    let mut r = BufReader::new(File::open(path)?);
    let hdr = read_header_line(&mut r)?;
    let parts: Vec<&str> = hdr.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != MAT_MAGIC || parts[3] != "f32" {
        return Err(VvolError::BadHeader(hdr));
    }
    let rows: usize = parts[1].parse().map_err(|_| VvolError::BadHeader(hdr.clone()))?;
    let cols: usize = parts[2].parse().map_err(|_| VvolError::BadHeader(hdr.clone()))?;
    if rows != cols {
        return Err(VvolError::BadHeader(hdr));
    }
    let bytes = read_payload(&mut r, rows * cols * 4)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((rows, data))
}

fn read_header_line<R: Read>(r: &mut R) -> Result<String, VvolError> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte)?;
        if n == 0 {
            return Err(VvolError::BadHeader("unexpected end of file in header".into()));
        }
        if byte[0] == b'\n' {
            break;
        }
        if line.len() > 256 {
            return Err(VvolError::BadHeader("header line too long".into()));
        }
        line.push(byte[0]);
    }
    String::from_utf8(line).map_err(|_| VvolError::BadHeader("header is not utf-8".into()))
}

fn parse_vol_header(hdr: &str) -> Result<([usize; 3], String, [f32; 3]), VvolError> {
    let parts: Vec<&str> = hdr.split_whitespace().collect();
    if parts.len() != 8 || parts[0] != VOL_MAGIC {
        return Err(VvolError::BadHeader(hdr.to_string()));
    }
    let bad = || VvolError::BadHeader(hdr.to_string());
    let d: usize = parts[1].parse().map_err(|_| bad())?;
    let h: usize = parts[2].parse().map_err(|_| bad())?;
    let w: usize = parts[3].parse().map_err(|_| bad())?;
    let dtype = parts[4].to_string();
    let sz: f32 = parts[5].parse().map_err(|_| bad())?;
    let sy: f32 = parts[6].parse().map_err(|_| bad())?;
    let sx: f32 = parts[7].parse().map_err(|_| bad())?;
    Ok(([d, h, w], dtype, [sz, sy, sx]))
}

fn read_payload<R: Read>(r: &mut R, want: usize) -> Result<Vec<u8>, VvolError> {
    let mut bytes = Vec::with_capacity(want);
    r.read_to_end(&mut bytes)?;
    if bytes.len() != want {
        return Err(VvolError::PayloadMismatch { want, got: bytes.len() });
    }
    Ok(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn volume_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vvol");
        let data = vec![0.0f32, -1.5, 3.25e-7, 1234.5, f32::MIN_POSITIVE, 8.0, -0.0, 2.0];
        let vol = Volume::new([2, 2, 2], [1.0, 0.5, 2.0], data.clone()).unwrap();
        save_volume(&vol, &path).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back.dims(), [2, 2, 2]);
        assert_eq!(back.spacing(), [1.0, 0.5, 2.0]);
        for (a, b) in back.data().iter().zip(data.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn mask_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vvol");
        let labels = vec![0u8, 1, 2, 255, 0, 3, 7, 1];
        let mask = SegMask::new([2, 2, 2], labels.clone(), u8::MAX).unwrap();
        save_mask(&mask, &path).unwrap();
        let back = load_mask(&path).unwrap();
        assert_eq!(back.labels(), &labels[..]);
    }

    #[test]
    fn truncated_payload_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.vvol");
        let vol = Volume::zeros([2, 2, 2]);
        save_volume(&vol, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_volume(&path), Err(VvolError::PayloadMismatch { .. })));
    }

    #[test]
    fn tiny_header_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.vvol");
        let mut f = File::create(&path).unwrap();
        writeln!(f, "VVOL1 2 2 2 f32 1 1 1").unwrap();
        for v in [1.0f32; 8] {
            f.write_all(&v.to_le_bytes()).unwrap();
        }
        let vol = load_volume(&path).unwrap();
        assert_eq!(vol.dims(), [2, 2, 2]);
        assert!(vol.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn bad_magic_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.vvol");
        std::fs::write(&path, b"NOPE 1 1 1 f32 1 1 1\n\0\0\0\0").unwrap();
        assert!(matches!(load_volume(&path), Err(VvolError::BadHeader(_))));
    }

    #[test]
    fn matrix_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vmat");
        let values = vec![0.25f64, 0.75, 1.0, 0.0];
        save_matrix(2, &values, &path).unwrap();
        let (n, back) = load_matrix(&path).unwrap();
        assert_eq!(n, 2);
        for (a, b) in back.iter().zip(values.iter()) {
            assert_eq!(*a, *b as f32);
        }
    }

    proptest! {
        #[test]
        fn volume_roundtrip_random(data in proptest::collection::vec(-1e6f32..1e6, 24)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.vvol");
            let vol = Volume::new([2, 3, 4], [1.0, 1.0, 1.0], data.clone()).unwrap();
            save_volume(&vol, &path).unwrap();
            let back = load_volume(&path).unwrap();
            prop_assert_eq!(back.data(), &data[..]);
        }
    }
}
