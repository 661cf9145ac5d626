//! "UTD1" binary tensor dumps: magic `UTD1`, little-endian u32 rank,
//! rank x u32 dims, then the f32 payload. Used for golden files, checkpoints,
//! and cross-run comparisons.

use super::Tensor;
use std::io::{self, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"UTD1";

#[derive(Debug, thiserror::Error)]
pub enum UtdError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes {0:?}, expected \"UTD1\"")]
    BadMagic([u8; 4]),
    #[error("payload length mismatch: shape {shape:?} wants {expected} f32s, file holds {got}")]
    PayloadLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
}

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor) -> Result<(), UtdError> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor, UtdError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(UtdError::BadMagic(magic));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let rank = u32::from_le_bytes(buf4) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut buf4)?;
        shape.push(u32::from_le_bytes(buf4) as usize);
    }
    let expected: usize = shape.iter().product();
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != expected * 4 {
        return Err(UtdError::PayloadLength {
            shape,
            expected,
            got: payload.len() / 4,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::new(shape, data).expect("length checked above"))
}

pub fn save(path: &Path, t: &Tensor) -> Result<(), UtdError> {
    let f = std::fs::File::create(path)?;
    write_tensor(std::io::BufWriter::new(f), t)
}

pub fn load(path: &Path) -> Result<Tensor, UtdError> {
    let f = std::fs::File::open(path)?;
    read_tensor(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_pinned() {
        let t = Tensor::new([2, 1], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[0..4], b"UTD1");
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1u32.to_le_bytes());
        assert_eq!(&buf[16..20], &1.0f32.to_le_bytes());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let buf = b"NOPE\x01\x00\x00\x00\x01\x00\x00\x00\x00\x00\x80\x3f".to_vec();
        assert!(matches!(
            read_tensor(&buf[..]),
            Err(UtdError::BadMagic(_))
        ));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let t = Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(matches!(
            read_tensor(&buf[..]),
            Err(UtdError::Io(_)) | Err(UtdError::PayloadLength { .. })
        ));
    }
}
