//! Binary Netpbm codecs: P6 for RGB images, P5 for class-id masks.
//!
//! Images are `[3, H, W]` tensors in `[0, 1]`, quantised to 8 bits on write. Masks store the
//! class id directly as the pixel value.

use std::path::Path;

use langseg_core::{ClassMask, Tensor};

use crate::error::{self, AppError, Result};

fn quantise(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(langseg_core::Error::Dimension(format!("PPM needs 3 channels, got {c}")).into());
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    let plane = h * w;
    out.reserve(3 * plane);
    for i in 0..plane {
        out.extend([quantise(d[i]), quantise(d[plane + i]), quantise(d[2 * plane + i])]);
    }
    Ok(out)
}

pub fn encode_pgm(mask: &ClassMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend_from_slice(mask.ids());
    out
}

/// Header fields plus the offset where raster data begins.
struct Header {
    width: usize,
    height: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> std::result::Result<Header, String> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format!("missing {} magic", String::from_utf8_lossy(magic)));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        // whitespace and comments
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
            return Err("truncated or malformed header".into());
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|e| format!("header field: {e}"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("header must end with a single whitespace byte".into());
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err("zero image dimension".into());
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}; only 8-bit files are read"));
    }
    Ok(Header {
        width,
        height,
        offset: pos + 1,
    })
}

fn raster<'a>(bytes: &'a [u8], h: &Header, channels: usize) -> std::result::Result<&'a [u8], String> {
    let need = h.width * h.height * channels;
    let data = &bytes[h.offset..];
    if data.len() < need {
        return Err(format!("raster truncated: {} of {need} bytes", data.len()));
    }
    Ok(&data[..need])
}

/// Decodes P6 into a `[3, H, W]` tensor with values `byte / 255`.
pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let h = parse_header(bytes, b"P6")?;
    let px = raster(bytes, &h, 3)?;
    let plane = h.width * h.height;
    let mut data = vec![0.0; 3 * plane];
    for (i, rgb) in px.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f64::from(rgb[c]) / 255.0;
        }
    }
    Tensor::new(&[3, h.height, h.width], data).map_err(|e| e.to_string())
}

pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<ClassMask, String> {
    let h = parse_header(bytes, b"P5")?;
    let px = raster(bytes, &h, 1)?;
    ClassMask::new(h.height, h.width, px.to_vec()).map_err(|e| e.to_string())
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    error::write(path, &encode_ppm(image)?)
}

pub fn write_pgm(path: &Path, mask: &ClassMask) -> Result<()> {
    error::write(path, &encode_pgm(mask))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&error::read(path)?).map_err(|m| AppError::format(path, m))
}

pub fn read_pgm(path: &Path) -> Result<ClassMask> {
    decode_pgm(&error::read(path)?).map_err(|m| AppError::format(path, m))
}
