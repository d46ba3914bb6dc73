//! Portable graymap / pixmap readers and writers, plus the raw tensor
//! format: magic "DPIM1", u32 n, u32 H, u32 W, then n*H*W little-endian f32
//! in [0, 1].

use crate::error::{Error, Result};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

pub const RAW_MAGIC: &[u8; 5] = b"DPIM1";

/// A stack of grayscale images with a common size, pixels in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayStack {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl GrayStack {
    pub fn image(&self, i: usize) -> &[f32] {
        let len = self.height * self.width;
        &self.pixels[i * len..(i + 1) * len]
    }
}

pub fn write_raw(stack: &GrayStack, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(17 + stack.pixels.len() * 4);
    buf.extend_from_slice(RAW_MAGIC);
    buf.extend_from_slice(&(stack.n as u32).to_le_bytes());
    buf.extend_from_slice(&(stack.height as u32).to_le_bytes());
    buf.extend_from_slice(&(stack.width as u32).to_le_bytes());
    for &v in &stack.pixels {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_raw(path: &Path) -> Result<GrayStack> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; 17];
    file.read_exact(&mut head).map_err(|e| Error::io(path, e))?;
    if &head[..5] != RAW_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "bad magic, expected DPIM1".into(),
        });
    }
    let n = u32::from_le_bytes(head[5..9].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(head[9..13].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(head[13..17].try_into().unwrap()) as usize;
    let mut body = Vec::new();
    file.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    let want = n * height * width * 4;
    if body.len() != want {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected {want} payload bytes, found {}", body.len()),
        });
    }
    let pixels = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(GrayStack {
        n,
        height,
        width,
        pixels,
    })
}

fn next_pnm_token(reader: &mut impl BufRead) -> std::io::Result<String> {
    let mut token = String::new();
    let mut in_comment = false;
    loop {
        let mut byte = [0u8; 1];
        if reader.read(&mut byte)? == 0 {
            break;
        }
        let c = byte[0] as char;
        if in_comment {
            if c == '\n' {
                in_comment = false;
            }
            continue;
        }
        if c == '#' {
            in_comment = true;
            continue;
        }
        if c.is_whitespace() {
            if token.is_empty() {
                continue;
            }
            break;
        }
        token.push(c);
    }
    Ok(token)
}

/// Reads a PGM (P2 ascii or P5 binary) as one grayscale image in [0, 1].
/// A PPM (P3/P6) is accepted and converted to luminance.
pub fn read_pnm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let magic = next_pnm_token(&mut reader).map_err(|e| Error::io(path, e))?;
    let channels = match magic.as_str() {
        "P2" | "P5" => 1,
        "P3" | "P6" => 3,
        other => return Err(bad(format!("unsupported PNM magic '{other}'"))),
    };
    let binary = magic == "P5" || magic == "P6";
    let parse = |tok: String, what: &str| {
        tok.parse::<usize>()
            .map_err(|_| bad(format!("bad {what} '{tok}'")))
    };
    let width = parse(next_pnm_token(&mut reader).map_err(|e| Error::io(path, e))?, "width")?;
    let height = parse(next_pnm_token(&mut reader).map_err(|e| Error::io(path, e))?, "height")?;
    let maxval = parse(next_pnm_token(&mut reader).map_err(|e| Error::io(path, e))?, "maxval")?;
    if width == 0 || height == 0 {
        return Err(bad("zero-sized image".into()));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(bad(format!("unsupported maxval {maxval}")));
    }
    let count = width * height * channels;
    let mut samples = Vec::with_capacity(count);
    if binary {
        let wide = maxval > 255;
        let mut body = Vec::new();
        reader.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
        let need = count * if wide { 2 } else { 1 };
        if body.len() < need {
            return Err(bad(format!("truncated body: {} < {need}", body.len())));
        }
        if wide {
            for c in body[..need].chunks_exact(2) {
                samples.push(u16::from_be_bytes([c[0], c[1]]) as f32);
            }
        } else {
            samples.extend(body[..need].iter().map(|&b| b as f32));
        }
    } else {
        for _ in 0..count {
            let tok = next_pnm_token(&mut reader).map_err(|e| Error::io(path, e))?;
            if tok.is_empty() {
                return Err(bad("truncated ascii body".into()));
            }
            samples.push(parse(tok, "sample")? as f32);
        }
    }
    let scale = 1.0 / maxval as f32;
    let gray: Vec<f32> = if channels == 1 {
        samples.iter().map(|&v| v * scale).collect()
    } else {
        samples
            .chunks_exact(3)
            .map(|rgb| (0.2126 * rgb[0] + 0.7152 * rgb[1] + 0.0722 * rgb[2]) * scale)
            .collect()
    };
    Ok((height, width, gray))
}

/// Writes one grayscale image as binary PGM (maxval 255).
pub fn write_pgm(height: usize, width: usize, pixels: &[f32], path: &Path) -> Result<()> {
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend(
        pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Writes an RGB image as binary PPM (maxval 255); `rgb` is HxWx3 row-major.
pub fn write_ppm(height: usize, width: usize, rgb: &[f32], path: &Path) -> Result<()> {
    let mut buf = format!("P6\n{width} {height}\n255\n").into_bytes();
    buf.extend(rgb.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Bilinear resize; averages source boxes when shrinking so downscales do not
/// alias.
pub fn resize(src: &[f32], sh: usize, sw: usize, th: usize, tw: usize) -> Vec<f32> {
    if sh == th && sw == tw {
        return src.to_vec();
    }
    let mut out = vec![0.0f32; th * tw];
    let scale_y = sh as f64 / th as f64;
    let scale_x = sw as f64 / tw as f64;
    let area_avg = scale_y > 1.0 || scale_x > 1.0;
    for ty in 0..th {
        for tx in 0..tw {
            let v = if area_avg {
                // average the contributing source box
                let y0 = (ty as f64 * scale_y).floor() as usize;
                let y1 = (((ty + 1) as f64 * scale_y).ceil() as usize).min(sh).max(y0 + 1);
                let x0 = (tx as f64 * scale_x).floor() as usize;
                let x1 = (((tx + 1) as f64 * scale_x).ceil() as usize).min(sw).max(x0 + 1);
                let mut acc = 0.0f64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += src[y * sw + x] as f64;
                    }
                }
                (acc / ((y1 - y0) * (x1 - x0)) as f64) as f32
            } else {
                // bilinear
                let fy = (ty as f64 + 0.5) * scale_y - 0.5;
                let fx = (tx as f64 + 0.5) * scale_x - 0.5;
                let y0 = fy.floor().max(0.0) as usize;
                let x0 = fx.floor().max(0.0) as usize;
                let y1 = (y0 + 1).min(sh - 1);
                let x1 = (x0 + 1).min(sw - 1);
                let wy = (fy - y0 as f64).clamp(0.0, 1.0);
                let wx = (fx - x0 as f64).clamp(0.0, 1.0);
                let a = src[y0 * sw + x0] as f64;
                let b = src[y0 * sw + x1] as f64;
                let c = src[y1 * sw + x0] as f64;
                let d = src[y1 * sw + x1] as f64;
                ((a * (1.0 - wx) + b * wx) * (1.0 - wy) + (c * (1.0 - wx) + d * wx) * wy) as f32
            };
            out[ty * tw + tx] = v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imgs.dpim");
        let stack = GrayStack {
            n: 2,
            height: 3,
            width: 2,
            pixels: (0..12).map(|i| i as f32 / 11.0).collect(),
        };
        write_raw(&stack, &path).unwrap();
        let back = read_raw(&path).unwrap();
        assert_eq!(stack, back);
    }

    #[test]
    fn pgm_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let pixels: Vec<f32> = (0..16).map(|i| i as f32 / 15.0).collect();
        write_pgm(4, 4, &pixels, &path).unwrap();
        let (h, w, back) = read_pnm(&path).unwrap();
        assert_eq!((h, w), (4, 4));
        for (a, b) in pixels.iter().zip(&back) {
            assert!((a - b).abs() < 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn ascii_pgm_with_comments_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        std::fs::write(&path, "P2\n# comment\n2 2\n255\n0 128\n# another\n255 64\n").unwrap();
        let (h, w, px) = read_pnm(&path).unwrap();
        assert_eq!((h, w), (2, 2));
        assert!((px[1] - 128.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn resize_constant_image_stays_constant() {
        let src = vec![0.5f32; 256 * 256];
        let down = resize(&src, 256, 256, 128, 128);
        assert_eq!(down.len(), 128 * 128);
        for &v in &down {
            assert!((v - 0.5).abs() < 1e-6);
        }
        let up = resize(&src, 256, 256, 300, 300);
        for &v in &up {
            assert!((v - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.dpim");
        std::fs::write(&path, b"NOPE!xxxxxxxxxxxxxxx").unwrap();
        assert!(read_raw(&path).is_err());
    }
}
