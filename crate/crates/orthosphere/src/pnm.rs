//! Binary portable graymap (P5) and pixmap (P6) images, max value 255.

use orthosphere_core::analysis::Heatmap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PnmKind {
    Gray,
    Rgb,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pnm {
    pub kind: PnmKind,
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub data: Vec<u8>,
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// P5 of a heatmap, one byte per value.
pub fn heatmap_pgm(map: &Heatmap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    out.extend(map.values.iter().map(|&v| to_byte(v)));
    out
}

/// Blue-to-red color ramp.
pub fn colormap(v: f64) -> [f64; 3] {
    let ch = |c: f64| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// P6 of `map` colored and alpha-blended at 0.5 over a channel-major RGB
/// image in `[0, 1]` of the same size.
pub fn overlay_ppm(map: &Heatmap, rgb: &[f32]) -> Result<Vec<u8>> {
    let p = map.width * map.height;
    if rgb.len() != 3 * p {
        return Err(Error::Format(format!(
            "overlay needs a 3x{}x{} image, got {} values",
            map.height,
            map.width,
            rgb.len()
        )));
    }
    let mut out = format!("P6\n{} {}\n255\n", map.width, map.height).into_bytes();
    for (i, &v) in map.values.iter().enumerate() {
        let color = colormap(v);
        for (c, col) in color.iter().enumerate() {
            out.push(to_byte(0.5 * rgb[c * p + i] as f64 + 0.5 * col));
        }
    }
    Ok(out)
}

/// Parses a binary P5 or P6 file with 8-bit samples.
pub fn parse(bytes: &[u8]) -> Result<Pnm> {
    let bad = |what: &str| Error::Format(format!("pnm: {what}"));
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    // exactly one whitespace byte separates the header from the samples
    pos += 1;
    let kind = match tokens[0] {
        "P5" => PnmKind::Gray,
        "P6" => PnmKind::Rgb,
        m => return Err(bad(&format!("unsupported magic {m:?}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad number {s:?}")));
    let (width, height, maxval) = (num(tokens[1])?, num(tokens[2])?, num(tokens[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad(&format!("unsupported max value {maxval}")));
    }
    let channels = if kind == PnmKind::Rgb { 3 } else { 1 };
    let expected = width * height * channels;
    let data = bytes.get(pos..).unwrap_or_default();
    if data.len() != expected {
        return Err(bad(&format!("{width}x{height} needs {expected} sample bytes, found {}", data.len())));
    }
    Ok(Pnm { kind, width, height, maxval: maxval as u16, data: data.to_vec() })
}
