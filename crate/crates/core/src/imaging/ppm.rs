use std::path::Path;

use super::Image;
use crate::error::{Error, Result};

fn codec(msg: impl Into<String>) -> Error {
    Error::Codec(msg.into())
}

/// Decodes a binary `P6` file with maxval 255.
pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        // Skip whitespace and comments.
        while pos < bytes.len() {
            if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(codec("truncated PPM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| codec("PPM header is not ASCII"))?);
        if fields.len() == 1 && fields[0] != "P6" {
            return Err(codec(format!("unsupported magic {:?}, expected P6", fields[0])));
        }
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(codec("truncated PPM header"));
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| codec(format!("bad PPM header field {s:?}")));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(codec(format!("unsupported maxval {maxval}, expected 255")));
    }
    if w == 0 || h == 0 {
        return Err(codec("PPM has zero size"));
    }
    let n = w * h * 3;
    let raster = bytes.get(pos..pos + n).ok_or_else(|| codec("truncated PPM pixel data"))?;
    Image::new(h, w, 3, raster.iter().map(|&b| b as f32 / 255.0).collect())
}

/// Encodes as `P6`; gray images are replicated to three channels.
pub fn encode_ppm(img: &Image) -> Result<Vec<u8>> {
    let rgb = match img.channels() {
        3 => img.clone(),
        1 => img.select_channels(&[0, 0, 0])?,
        c => return Err(codec(format!("cannot encode a {c}-channel image as PPM"))),
    };
    let mut out = format!("P6\n{} {}\n255\n", rgb.width(), rgb.height()).into_bytes();
    out.extend(rgb.pixels().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    decode_ppm(&bytes).map_err(|e| codec(format!("{}: {e}", path.display())))
}

pub fn write_ppm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    std::fs::write(path, encode_ppm(img)?)?;
    Ok(())
}
