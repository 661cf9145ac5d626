//! Binary netpbm raster IO: 8-bit P5 (grayscale) and P6 (RGB), maxval 255.
//! Parse failures carry the byte offset that broke the parser.

use crate::tensor::Tensor;
use std::io::Write;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum NetpbmError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic at byte 0: expected P5 or P6, found {found:?}")]
    BadMagic { found: String },
    #[error("malformed header token at byte {offset}: {detail}")]
    Header { offset: usize, detail: String },
    #[error("unsupported maxval {maxval} at byte {offset} (only 255)")]
    Maxval { offset: usize, maxval: u32 },
    #[error("truncated payload at byte {offset}: expected {expected} bytes, found {found}")]
    Truncated {
        offset: usize,
        expected: usize,
        found: usize,
    },
}

struct HeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderParser<'a> {
    /// Skip whitespace and `#` comments (which run to end of line).
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn read_u32(&mut self) -> Result<u32, NetpbmError> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(NetpbmError::Header {
                offset: start,
                detail: "expected a decimal integer".into(),
            });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or(NetpbmError::Header {
                offset: start,
                detail: "integer out of range".into(),
            })
    }
}

/// Decode a P5/P6 buffer into `([1,H,W]` or `[3,H,W], channels)` scaled to
/// `[0,1]`.
pub fn decode(bytes: &[u8]) -> Result<Tensor, NetpbmError> {
    if bytes.len() < 2 {
        return Err(NetpbmError::BadMagic {
            found: String::from_utf8_lossy(bytes).into_owned(),
        });
    }
    let channels = match &bytes[0..2] {
        b"P5" => 1usize,
        b"P6" => 3usize,
        other => {
            return Err(NetpbmError::BadMagic {
                found: String::from_utf8_lossy(other).into_owned(),
            })
        }
    };
    let mut parser = HeaderParser { bytes, pos: 2 };
    let width = parser.read_u32()? as usize;
    let height = parser.read_u32()? as usize;
    let maxval_offset = {
        parser.skip_separators();
        parser.pos
    };
    let maxval = parser.read_u32()?;
    if maxval != 255 {
        return Err(NetpbmError::Maxval {
            offset: maxval_offset,
            maxval,
        });
    }
    // Exactly one whitespace byte separates the header from the payload.
    if parser.pos >= bytes.len() || !bytes[parser.pos].is_ascii_whitespace() {
        return Err(NetpbmError::Header {
            offset: parser.pos,
            detail: "expected single whitespace before payload".into(),
        });
    }
    let payload_start = parser.pos + 1;
    let expected = width * height * channels;
    let payload = &bytes[payload_start.min(bytes.len())..];
    if payload.len() < expected {
        return Err(NetpbmError::Truncated {
            offset: payload_start + payload.len(),
            expected,
            found: payload.len(),
        });
    }
    // Interleaved rows to planar channels.
    let mut data = vec![0.0f32; expected];
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                data[(c * height + y) * width + x] =
                    payload[(y * width + x) * channels + c] as f32 / 255.0;
            }
        }
    }
    Ok(Tensor::new(vec![channels, height, width], data).expect("sized above"))
}

pub fn load(path: &Path) -> Result<Tensor, NetpbmError> {
    decode(&std::fs::read(path)?)
}

/// Load a P5 mask, binarised at byte value > 127.
pub fn load_mask(path: &Path) -> Result<Tensor, NetpbmError> {
    let t = load(path)?;
    let shape = t.shape().to_vec();
    let data = t
        .data()
        .iter()
        .map(|&v| if v > 127.0 / 255.0 { 1.0 } else { 0.0 })
        .collect();
    Ok(Tensor::new(shape, data).expect("same shape"))
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encode `[1,H,W]` as P5 or `[3,H,W]` as P6.
pub fn encode(t: &Tensor) -> Vec<u8> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    assert!(c == 1 || c == 3, "netpbm wants 1 or 3 channels, got {c}");
    let magic: &[u8] = if c == 1 { b"P5" } else { b"P6" };
    let mut out = Vec::with_capacity(20 + c * h * w);
    out.extend_from_slice(magic);
    out.extend_from_slice(format!("\n{w} {h}\n255\n").as_bytes());
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.push(quantize(t.data()[(ch * h + y) * w + x]));
            }
        }
    }
    out
}

pub fn save(path: &Path, t: &Tensor) -> Result<(), NetpbmError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(t))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p5_2x2_hand_case() {
        let bytes = b"P5\n2 2\n255\n\x00\xff\xff\x00";
        let t = decode(bytes).unwrap();
        assert_eq!(t.shape(), &[1, 2, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn p6_all_white_1x1() {
        let bytes = b"P6\n1 1\n255\n\xff\xff\xff";
        let t = decode(bytes).unwrap();
        assert_eq!(t.shape(), &[3, 1, 1]);
        assert_eq!(t.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let bytes = b"P5 # a comment\n# another\n2 1\n255\n\x80\x40";
        let t = decode(bytes).unwrap();
        assert_eq!(t.shape(), &[1, 1, 2]);
    }

    #[test]
    fn bad_magic_reports_what_it_found() {
        let err = decode(b"P3\n1 1\n255\n   ").unwrap_err();
        assert!(matches!(err, NetpbmError::BadMagic { .. }));
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let err = decode(b"P5\n2 2\n255\n\x00\x01").unwrap_err();
        match err {
            NetpbmError::Truncated { expected, found, .. } => {
                assert_eq!(expected, 4);
                assert_eq!(found, 2);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn maxval_other_than_255_rejected() {
        let err = decode(b"P5\n1 1\n65535\n\x00\x00").unwrap_err();
        assert!(matches!(err, NetpbmError::Maxval { maxval: 65535, .. }));
    }

    #[test]
    fn round_trip_is_identity_for_8bit_data() {
        let mut r = crate::rng::stream(3, "netpbm");
        for &c in &[1usize, 3] {
            let data: Vec<f32> = (0..c * 5 * 4)
                .map(|_| rand::Rng::random_range(&mut r, 0..=255u8) as f32 / 255.0)
                .collect();
            let t = Tensor::new(vec![c, 5, 4], data).unwrap();
            let back = decode(&encode(&t)).unwrap();
            assert_eq!(back.shape(), t.shape());
            assert_eq!(back.data(), t.data());
        }
    }

    #[test]
    fn mask_binarisation_threshold() {
        let bytes = b"P5\n3 1\n255\n\x00\x7f\x80";
        let dir = std::env::temp_dir().join(format!("ugcanet-pbm-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.pgm");
        std::fs::write(&path, bytes).unwrap();
        let t = load_mask(&path).unwrap();
        assert_eq!(t.data(), &[0.0, 0.0, 1.0]);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
