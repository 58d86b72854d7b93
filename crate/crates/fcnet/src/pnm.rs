//! Binary PGM (P5) and PPM (P6) images with maxval 255.

use std::io::{Read, Write};
use std::path::Path;

use fcnet_core::Tensor;

use crate::error::FormatError;

/// 8-bit raster with 1 (gray) or 3 (RGB) channels, row-major, interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    /// `[H, W]` in [0, 1] (gray) or `[H, W, 3]` (RGB).
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&p| p as f64 / 255.0).collect();
        let shape: Vec<usize> = if self.channels == 1 {
            vec![self.height, self.width]
        } else {
            vec![self.height, self.width, self.channels]
        };
        Tensor::new(&shape, data).expect("raster dimensions are positive")
    }

    /// Quantise `[H, W]` or `[H, W, 3]` values in [0, 1] to 8 bits.
    pub fn from_tensor(t: &Tensor) -> Result<Self, FormatError> {
        let (height, width, channels) = match *t.shape() {
            [h, w] => (h, w, 1),
            [h, w, 3] => (h, w, 3),
            ref s => {
                return Err(FormatError::Invalid(format!(
                    "cannot store tensor of shape {s:?} as an image"
                )))
            }
        };
        let pixels = t
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    /// Binary mask: 255 where `bits` is set.
    pub fn from_mask(bits: &[bool], height: usize, width: usize) -> Self {
        Self {
            width,
            height,
            channels: 1,
            pixels: bits.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut pos = 0;
        let magic = next_token(bytes, &mut pos)?;
        let channels = match magic.as_str() {
            "P5" => 1,
            "P6" => 3,
            other => return Err(FormatError::Invalid(format!("unsupported image magic {other:?}"))),
        };
        let width = parse_dim(&next_token(bytes, &mut pos)?)?;
        let height = parse_dim(&next_token(bytes, &mut pos)?)?;
        let maxval = next_token(bytes, &mut pos)?;
        if maxval != "255" {
            return Err(FormatError::Invalid(format!("maxval must be 255, got {maxval}")));
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let need = width * height * channels;
        let body = bytes.get(pos..).unwrap_or(&[]);
        if body.len() < need {
            return Err(FormatError::Invalid(format!(
                "raster truncated: need {need} bytes, found {}",
                body.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels: body[..need].to_vec(),
        })
    }

    pub fn read(path: &Path) -> Result<Self, FormatError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| FormatError::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<(), FormatError> {
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&self.encode()))
            .map_err(|e| FormatError::io(path, e))
    }
}

fn parse_dim(s: &str) -> Result<usize, FormatError> {
    match s.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(FormatError::Invalid(format!("bad image dimension {s:?}"))),
    }
}

/// Header token, skipping whitespace and `#` comments.
fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String, FormatError> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            Some(_) => break,
            None => return Err(FormatError::Invalid("image header truncated".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_round_trip() {
        let r = Raster {
            width: 3,
            height: 2,
            channels: 1,
            pixels: vec![0, 1, 2, 253, 254, 255],
        };
        assert_eq!(Raster::decode(&r.encode()).unwrap(), r);
    }

    #[test]
    fn rgb_header_with_comment() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[10, 20, 30]);
        let r = Raster::decode(&bytes).unwrap();
        assert_eq!((r.width, r.height, r.channels), (1, 1, 3));
        assert_eq!(r.pixels, vec![10, 20, 30]);
    }

    #[test]
    fn pixel_bytes_that_look_like_whitespace_survive() {
        let r = Raster {
            width: 2,
            height: 1,
            channels: 1,
            pixels: vec![b'\n', b' '],
        };
        assert_eq!(Raster::decode(&r.encode()).unwrap(), r);
    }

    #[test]
    fn rejects_other_maxval_and_truncation() {
        assert!(Raster::decode(b"P5\n1 1\n65535\n\0\0").is_err());
        assert!(Raster::decode(b"P5\n2 2\n255\n\0").is_err());
        assert!(Raster::decode(b"P3\n1 1\n255\n0").is_err());
    }

    #[test]
    fn tensor_quantisation_round_trips_8bit_values() {
        let t = Tensor::new(&[1, 2, 3], vec![0.0, 1.0, 0.5, 0.2, 0.4, 0.6]).unwrap();
        let r = Raster::from_tensor(&t).unwrap();
        let back = r.to_tensor();
        assert!(back.max_abs_diff(&t) <= 0.5 / 255.0 + 1e-12);
        assert_eq!(Raster::from_tensor(&back).unwrap(), r);
    }
}
