//! HDR RGB images and the Portable FloatMap codec.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major RGB float image, row 0 at the top.
#[derive(Clone, Debug, PartialEq)]
pub struct HdrImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f32; 3]>,
}

impl HdrImage {
    pub fn new(width: usize, height: usize) -> Self {
        HdrImage {
            width,
            height,
            pixels: vec![[0.0; 3]; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<[f32; 3]>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::shape(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(HdrImage {
            width,
            height,
            pixels,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: [f32; 3]) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> HdrImage {
        HdrImage {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|p| [f(p[0]), f(p[1]), f(p[2])]).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.pixels.iter().flatten().all(|v| v.is_finite())
    }

    /// Encodes as PFM: `PF\n<w> <h>\n-1.0\n`, then little-endian RGB rows
    /// from the bottom row up.
    pub fn to_pfm_bytes(&self) -> Result<Vec<u8>> {
        if !self.all_finite() {
            return Err(Error::non_finite("PFM pixel data"));
        }
        let header = format!("PF\n{} {}\n-1.0\n", self.width, self.height);
        let mut out = Vec::with_capacity(header.len() + self.pixels.len() * 12);
        out.extend_from_slice(header.as_bytes());
        for y in (0..self.height).rev() {
            for p in &self.pixels[y * self.width..(y + 1) * self.width] {
                for c in p {
                    out.extend_from_slice(&c.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    /// Decodes colour (`PF`) or greyscale (`Pf`, replicated to RGB) PFM data
    /// of either byte order.
    pub fn from_pfm_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::format(origin, reason);
        let mut pos = 0;
        let mut tokens = Vec::with_capacity(4);
        while tokens.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            let tok = std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?;
            tokens.push(tok.to_string());
        }
        // exactly one whitespace byte separates the header from the payload
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(bad("missing header terminator"));
        }
        pos += 1;
        let channels = match tokens[0].as_str() {
            "PF" => 3,
            "Pf" => 1,
            other => return Err(bad(&format!("unknown magic {other:?}"))),
        };
        let width: usize = tokens[1].parse().map_err(|_| bad("bad width"))?;
        let height: usize = tokens[2].parse().map_err(|_| bad("bad height"))?;
        let scale: f32 = tokens[3].parse().map_err(|_| bad("bad scale"))?;
        if scale == 0.0 || !scale.is_finite() {
            return Err(bad("scale must be finite and non-zero"));
        }
        let little = scale < 0.0;
        let need = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(channels * 4))
            .ok_or_else(|| bad("image dimensions overflow"))?;
        let payload = &bytes[pos..];
        if payload.len() < need {
            return Err(bad(&format!(
                "truncated payload: {} of {need} bytes",
                payload.len()
            )));
        }
        if payload.len() > need {
            return Err(bad("trailing bytes after payload"));
        }
        let read = |i: usize| {
            let b = [
                payload[4 * i],
                payload[4 * i + 1],
                payload[4 * i + 2],
                payload[4 * i + 3],
            ];
            if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        };
        let mut img = HdrImage::new(width, height);
        for row in 0..height {
            let y = height - 1 - row;
            for x in 0..width {
                let base = (row * width + x) * channels;
                let px = if channels == 3 {
                    [read(base), read(base + 1), read(base + 2)]
                } else {
                    let v = read(base);
                    [v, v, v]
                };
                img.set(x, y, px);
            }
        }
        Ok(img)
    }
}

pub fn write_pfm(path: &Path, image: &HdrImage) -> Result<()> {
    let bytes = image.to_pfm_bytes()?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<HdrImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    HdrImage::from_pfm_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_pixel_layout() {
        let img = HdrImage::from_pixels(1, 1, vec![[0.5, 1.0, 2.0]]).unwrap();
        let bytes = img.to_pfm_bytes().unwrap();
        let header = b"PF\n1 1\n-1.0\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len() - header.len(), 12);
        assert_eq!(&bytes[header.len()..header.len() + 4], &0.5f32.to_le_bytes());
        let back = HdrImage::from_pfm_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn rows_are_stored_bottom_up() {
        let img = HdrImage::from_pixels(1, 2, vec![[1.0; 3], [2.0; 3]]).unwrap();
        let bytes = img.to_pfm_bytes().unwrap();
        let off = b"PF\n1 2\n-1.0\n".len();
        assert_eq!(&bytes[off..off + 4], &2.0f32.to_le_bytes());
    }

    #[test]
    fn nan_is_rejected_on_write() {
        let img = HdrImage::from_pixels(1, 1, vec![[f32::NAN, 0.0, 0.0]]).unwrap();
        assert!(matches!(img.to_pfm_bytes(), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn malformed_inputs_are_descriptive() {
        let p = Path::new("x.pfm");
        let e = HdrImage::from_pfm_bytes(b"P6\n1 1\n255\n", p).unwrap_err();
        assert!(e.to_string().contains("magic"), "{e}");
        let e = HdrImage::from_pfm_bytes(b"PF\n2 2\n-1.0\n\0\0\0\0", p).unwrap_err();
        assert!(e.to_string().contains("truncated payload"), "{e}");
        let e = HdrImage::from_pfm_bytes(b"PF\n2", p).unwrap_err();
        assert!(e.to_string().contains("truncated header"), "{e}");
        let e = HdrImage::from_pfm_bytes(b"PF\nx 2\n-1.0\n", p).unwrap_err();
        assert!(e.to_string().contains("width"), "{e}");
    }

    #[test]
    fn big_endian_greyscale_is_accepted() {
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&1.5f32.to_be_bytes());
        bytes.extend_from_slice(&(-3.0f32).to_be_bytes());
        let img = HdrImage::from_pfm_bytes(&bytes, Path::new("g.pfm")).unwrap();
        assert_eq!(img.get(0, 0), [1.5; 3]);
        assert_eq!(img.get(1, 0), [-3.0; 3]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn round_trip_is_identity(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
            let mut state = seed;
            let pixels = (0..w * h).map(|_| {
                let mut next = || {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    f32::from_bits(((state >> 33) as u32) & 0x7f7f_ffff) * if state & 1 == 0 { 1.0 } else { -1.0 }
                };
                [next(), next(), next()]
            }).collect();
            let img = HdrImage::from_pixels(w, h, pixels).unwrap();
            let back = HdrImage::from_pfm_bytes(&img.to_pfm_bytes().unwrap(), Path::new("m")).unwrap();
            prop_assert_eq!(back.to_pfm_bytes().unwrap(), img.to_pfm_bytes().unwrap());
            prop_assert_eq!(back, img);
        }
    }
}
