//! Binary greyscale PGM (`P5`) reading and writing.
//!
//! Images are stored 16-bit (maxval 65535, big-endian samples), masks 8-bit
//! with values 0 or 255.

use std::fs;
use std::path::Path;

use crate::{Error, Result, Tensor};

pub const IMAGE_MAXVAL: u16 = 65535;
pub const MASK_MAXVAL: u16 = 255;

/// Raw decoded PGM samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

impl Pgm {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval > 255 {
            for s in &self.samples {
                out.extend_from_slice(&s.to_be_bytes());
            }
        } else {
            out.extend(self.samples.iter().map(|&s| s as u8));
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Pgm(m.to_string());
        if bytes.len() < 2 || &bytes[..2] != b"P5" {
            return Err(bad("malformed header: missing P5 magic"));
        }
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for field in &mut fields {
            // Whitespace and comments between header tokens.
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    _ => break,
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            if start == pos {
                return Err(bad("malformed header: expected a number"));
            }
            let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
            *field = text.parse().map_err(|_| bad("malformed header: number out of range"))?;
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(bad("malformed header: missing separator before payload"));
        }
        pos += 1;
        let [width, height, maxval] = fields;
        if width == 0 || height == 0 {
            return Err(bad("malformed header: zero dimension"));
        }
        if maxval == 0 || maxval > 65535 {
            return Err(Error::Pgm(format!("unexpected maxval {maxval}")));
        }
        let bytes_per = if maxval > 255 { 2 } else { 1 };
        let n = width.checked_mul(height).ok_or_else(|| bad("malformed header: size overflow"))?;
        let payload = &bytes[pos..];
        if payload.len() < n * bytes_per {
            return Err(Error::Pgm(format!("truncated payload: {} of {} bytes", payload.len(), n * bytes_per)));
        }
        let samples: Vec<u16> = if bytes_per == 2 {
            payload[..2 * n].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        } else {
            payload[..n].iter().map(|&b| b as u16).collect()
        };
        if samples.iter().any(|&s| s as usize > maxval) {
            return Err(bad("sample exceeds maxval"));
        }
        Ok(Self { width, height, maxval: maxval as u16, samples })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Pgm(m) => Error::Pgm(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

fn plane(t: &Tensor<f32>) -> Result<(usize, usize)> {
    match t.shape() {
        [1, h, w] => Ok((*h, *w)),
        [h, w] => Ok((*h, *w)),
        s => Err(Error::Shape(format!("expected a single-channel image, got {s:?}"))),
    }
}

/// Quantise an image in `[0, 1]` to 16 bits.
pub fn image_to_pgm(image: &Tensor<f32>) -> Result<Pgm> {
    let (height, width) = plane(image)?;
    if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Invalid("image values must lie in [0, 1]".into()));
    }
    let samples = image.data().iter().map(|&v| (v as f64 * IMAGE_MAXVAL as f64).round() as u16).collect();
    Ok(Pgm { width, height, maxval: IMAGE_MAXVAL, samples })
}

/// Greyscale image `[1, H, W]` with values `sample / maxval`.
pub fn pgm_to_image(pgm: &Pgm) -> Tensor<f32> {
    let m = pgm.maxval as f64;
    let data = pgm.samples.iter().map(|&s| (s as f64 / m) as f32).collect();
    Tensor::from_vec(&[1, pgm.height, pgm.width], data).expect("shape")
}

pub fn mask_to_pgm(mask: &Tensor<f32>) -> Result<Pgm> {
    let (height, width) = plane(mask)?;
    let samples = mask
        .data()
        .iter()
        .map(|&v| match v {
            0.0 => Ok(0),
            1.0 => Ok(MASK_MAXVAL),
            _ => Err(Error::Invalid("mask values must be 0 or 1".into())),
        })
        .collect::<Result<_>>()?;
    Ok(Pgm { width, height, maxval: MASK_MAXVAL, samples })
}

/// Binary mask `[1, H, W]`; only 0 and maxval are accepted.
pub fn pgm_to_mask(pgm: &Pgm) -> Result<Tensor<f32>> {
    let data = pgm
        .samples
        .iter()
        .map(|&s| match s {
            0 => Ok(0.0),
            s if s == pgm.maxval => Ok(1.0),
            s => Err(Error::Pgm(format!("mask sample {s} is neither 0 nor {}", pgm.maxval))),
        })
        .collect::<Result<_>>()?;
    Ok(Tensor::from_vec(&[1, pgm.height, pgm.width], data)?)
}

pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    image_to_pgm(image)?.write(path)
}

pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    Ok(pgm_to_image(&Pgm::read(path)?))
}

pub fn write_mask(path: &Path, mask: &Tensor<f32>) -> Result<()> {
    mask_to_pgm(mask)?.write(path)
}

pub fn read_mask(path: &Path) -> Result<Tensor<f32>> {
    pgm_to_mask(&Pgm::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_bytes() {
        let img = Tensor::from_vec(&[1, 2, 2], vec![0.0, 1.0, 0.5, 0.25]).unwrap();
        let bytes = image_to_pgm(&img).unwrap().encode();
        let mut expected = b"P5\n2 2\n65535\n".to_vec();
        // 0.5 * 65535 = 32767.5 rounds to 0x8000, 0.25 * 65535 = 16383.75 to 0x4000.
        expected.extend_from_slice(&[0x00, 0x00, 0xff, 0xff, 0x80, 0x00, 0x40, 0x00]);
        assert_eq!(bytes, expected);
    }

    #[test]
    fn decode_errors() {
        assert!(Pgm::decode(b"P6\n2 2\n255\n0000").is_err());
        assert!(Pgm::decode(b"P5\n2 x\n255\n0000").is_err());
        let e = Pgm::decode(b"P5\n2 2\n255\n000").unwrap_err();
        assert!(e.to_string().contains("truncated"), "{e}");
        let e = Pgm::decode(b"P5\n2 2\n70000\n00000000").unwrap_err();
        assert!(e.to_string().contains("maxval"), "{e}");
        assert!(Pgm::decode(b"P5\n2 2\n0\n0000").is_err());
    }

    #[test]
    fn header_comments_are_skipped() {
        let p = Pgm::decode(b"P5\n# made by hand\n1 2\n255\n\x00\xff").unwrap();
        assert_eq!((p.width, p.height, p.samples.clone()), (1, 2, vec![0, 255]));
    }

    #[test]
    fn mask_round_trip_and_rejects_grey() {
        let m = Tensor::from_vec(&[1, 1, 3], vec![1.0, 0.0, 1.0]).unwrap();
        let p = mask_to_pgm(&m).unwrap();
        assert_eq!(p.encode(), b"P5\n3 1\n255\n\xff\x00\xff");
        assert_eq!(pgm_to_mask(&Pgm::decode(&p.encode()).unwrap()).unwrap(), m);
        let grey = Pgm { width: 1, height: 1, maxval: 255, samples: vec![7] };
        assert!(pgm_to_mask(&grey).is_err());
    }
}
