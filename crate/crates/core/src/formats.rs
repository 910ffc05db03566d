//! Image files: 8-bit PNG for images, albedos and masks; portable float
//! maps for shading.

use std::path::Path;

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("malformed float map: {0}")]
    Pfm(String),
    #[error("cannot write tensor of shape {0:?} as an image")]
    Shape(Vec<usize>),
}

/// `[0, 1]` value to an 8-bit code, rounding to nearest.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds every value to the nearest 8-bit level.
pub fn quantize_tensor(t: &Tensor) -> Tensor {
    t.map(|v| quantize(v) as f32 / 255.0)
}

fn planar(shape: &[usize], channels: usize) -> Result<(usize, usize), FormatError> {
    match *shape {
        [c, h, w] if c == channels && h > 0 && w > 0 => Ok((h, w)),
        _ => Err(FormatError::Shape(shape.to_vec())),
    }
}

/// Reads any 8-bit raster as `[3, H, W]` in `[0, 1]`.
pub fn read_rgb(path: impl AsRef<Path>) -> Result<Tensor, FormatError> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    }))
}

pub fn write_rgb(path: impl AsRef<Path>, img: &Tensor) -> Result<(), FormatError> {
    let (h, w) = planar(img.shape(), 3)?;
    let d = img.data();
    let mut raw = vec![0u8; h * w * 3];
    for p in 0..h * w {
        for c in 0..3 {
            raw[p * 3 + c] = quantize(d[c * h * w + p]);
        }
    }
    image::RgbImage::from_raw(w as u32, h as u32, raw)
        .expect("buffer sized from shape")
        .save(path)?;
    Ok(())
}

/// Reads a binary mask as `[1, H, W]` of zeros and ones.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Tensor, FormatError> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.as_raw().iter().map(|&v| if v >= 128 { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::new(&[1, h, w], data).expect("size from image"))
}

pub fn write_mask(path: impl AsRef<Path>, mask: &Tensor) -> Result<(), FormatError> {
    let (h, w) = planar(mask.shape(), 1)?;
    let raw = mask.data().iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect();
    image::GrayImage::from_raw(w as u32, h as u32, raw)
        .expect("buffer sized from shape")
        .save(path)?;
    Ok(())
}

/// Serializes `[3, H, W]` or `[1, H, W]` as a little-endian float map.
pub fn encode_pfm(img: &Tensor) -> Result<Vec<u8>, FormatError> {
    let (c, h, w) = match *img.shape() {
        [c @ (1 | 3), h, w] if h > 0 && w > 0 => (c, h, w),
        _ => return Err(FormatError::Shape(img.shape().to_vec())),
    };
    let tag = if c == 3 { "PF" } else { "Pf" };
    let mut out = format!("{tag}\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(c * h * w * 4);
    let d = img.data();
    for y in (0..h).rev() {
        for x in 0..w {
            for k in 0..c {
                out.extend_from_slice(&d[(k * h + y) * w + x].to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Parses a float map (either byte order) into `[C, H, W]`.
pub fn decode_pfm(bytes: &[u8]) -> Result<Tensor, FormatError> {
    let bad = |m: &str| FormatError::Pfm(m.to_string());
    // the header is three whitespace-separated tokens after the tag, ending
    // with exactly one whitespace byte before the raster
    let mut pos = 0;
    let mut token = || -> Result<&[u8], FormatError> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos || pos >= bytes.len() {
            return Err(bad("truncated header"));
        }
        Ok(&bytes[start..pos])
    };
    let channels = match token()? {
        b"PF" => 3,
        b"Pf" => 1,
        _ => return Err(bad("missing PF/Pf tag")),
    };
    let num = |t: &[u8]| -> Result<usize, FormatError> {
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .filter(|&v: &usize| v > 0)
            .ok_or_else(|| bad("invalid dimensions"))
    };
    let w = num(token()?)?;
    let h = num(token()?)?;
    let scale: f32 = std::str::from_utf8(token()?)
        .ok()
        .and_then(|s| s.parse().ok())
        .filter(|v: &f32| v.is_finite() && *v != 0.0)
        .ok_or_else(|| bad("invalid scale"))?;
    let body = &bytes[pos + 1..];
    let count = w
        .checked_mul(h)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| bad("dimensions overflow"))?;
    if body.len() / 4 != count || body.len() % 4 != 0 {
        return Err(FormatError::Pfm(format!(
            "expected {} raster bytes, found {}",
            count.saturating_mul(4),
            body.len()
        )));
    }
    let little = scale < 0.0;
    let mut data = vec![0.0f32; count];
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let b: [u8; 4] = chunk.try_into().expect("chunk of 4");
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let (k, p) = (i % channels, i / channels);
        let (y, x) = (h - 1 - p / w, p % w);
        data[(k * h + y) * w + x] = v;
    }
    Ok(Tensor::new(&[channels, h, w], data).expect("size checked"))
}

pub fn write_pfm(path: impl AsRef<Path>, img: &Tensor) -> Result<(), FormatError> {
    std::fs::write(path, encode_pfm(img)?)?;
    Ok(())
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<Tensor, FormatError> {
    decode_pfm(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_and_layout() {
        let img = Tensor::from_fn(&[3, 2, 3], |i| i as f32 * 0.5 - 1.0);
        let bytes = encode_pfm(&img).unwrap();
        assert!(bytes.starts_with(b"PF\n3 2\n-1.0\n"));
        // first stored pixel is the bottom-left one
        let first = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
        assert_eq!(first, img.data()[3]);
        assert_eq!(decode_pfm(&bytes).unwrap(), img);

        let gray = Tensor::from_fn(&[1, 2, 2], |i| i as f32);
        assert_eq!(decode_pfm(&encode_pfm(&gray).unwrap()).unwrap(), gray);
    }

    #[test]
    fn pfm_big_endian() {
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        for v in [1.5f32, -2.0] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        assert_eq!(decode_pfm(&bytes).unwrap().data(), &[1.5, -2.0]);
    }

    #[test]
    fn pfm_rejects_garbage() {
        assert!(decode_pfm(b"").is_err());
        assert!(decode_pfm(b"P6\n1 1\n255\n").is_err());
        assert!(decode_pfm(b"PF\n1 1\n-1.0\n\0\0").is_err());
        assert!(decode_pfm(b"PF\n0 1\n-1.0\n").is_err());
        assert!(decode_pfm(b"PF\n99999999999 99999999999\n-1.0\n").is_err());
    }

    #[test]
    fn png_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::from_fn(&[3, 4, 5], |i| (i as f32 * 0.013).min(1.0));
        let p = dir.path().join("a.png");
        write_rgb(&p, &img).unwrap();
        let back = read_rgb(&p).unwrap();
        assert_eq!(back, quantize_tensor(&img));
        assert!(back
            .data()
            .iter()
            .zip(img.data())
            .all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-7));

        let mask = Tensor::from_fn(&[1, 4, 5], |i| (i % 3 == 0) as u8 as f32);
        let mp = dir.path().join("m.png");
        write_mask(&mp, &mask).unwrap();
        assert_eq!(read_mask(&mp).unwrap(), mask);
        assert!(write_rgb(dir.path().join("x.png"), &mask).is_err());
    }
}
