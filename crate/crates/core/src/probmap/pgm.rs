//! Binary PGM (P5) encoding. Probability maps use 16-bit samples with
//! maxval 65535; masks use maxval 1.

use std::fs;
use std::path::Path;

use super::{BinaryMask, ProbMap2D};
use crate::error::{Error, Result};

struct Header {
    width: usize,
    height: usize,
    maxval: u32,
    data_offset: usize,
}

fn encode(width: usize, height: usize, maxval: u32, samples: impl Iterator<Item = u32>) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n{maxval}\n").into_bytes();
    let wide = maxval > 255;
    out.reserve(width * height * if wide { 2 } else { 1 });
    for s in samples {
        if wide {
            out.extend_from_slice(&(s as u16).to_be_bytes());
        } else {
            out.push(s as u8);
        }
    }
    out
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::format(0, "missing P5 magic number"));
    }
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // Whitespace and `#` comments may separate header tokens.
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
            let name = ["width", "height", "maxval"][i];
            return Err(Error::format(pos, format!("expected {name}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(start, "header number out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format(pos, "expected a single whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::format(2, "zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(pos - 1, format!("maxval {maxval} outside 1..=65535")));
    }
    let header = Header {
        width: width as usize,
        height: height as usize,
        maxval: maxval as u32,
        data_offset: pos,
    };
    let sample_bytes = if header.maxval > 255 { 2 } else { 1 };
    let needed = header.width * header.height * sample_bytes;
    if bytes.len() - pos < needed {
        return Err(Error::format(
            bytes.len(),
            format!("truncated raster: need {needed} bytes after header, found {}", bytes.len() - pos),
        ));
    }
    Ok(header)
}

fn decode(bytes: &[u8]) -> Result<(Header, Vec<u32>)> {
    let h = parse_header(bytes)?;
    let data = &bytes[h.data_offset..];
    let n = h.width * h.height;
    let samples: Vec<u32> = if h.maxval > 255 {
        data[..2 * n]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
            .collect()
    } else {
        data[..n].iter().map(|&b| b as u32).collect()
    };
    if let Some(i) = samples.iter().position(|&s| s > h.maxval) {
        let width = if h.maxval > 255 { 2 } else { 1 };
        return Err(Error::format(h.data_offset + i * width, "sample exceeds maxval"));
    }
    Ok((h, samples))
}

pub fn encode_prob_map(map: &ProbMap2D) -> Vec<u8> {
    encode(
        map.width,
        map.height,
        65535,
        map.values.iter().map(|&p| (p.clamp(0.0, 1.0) * 65535.0).round() as u32),
    )
}

pub fn decode_prob_map(bytes: &[u8]) -> Result<ProbMap2D> {
    let (h, samples) = decode(bytes)?;
    let scale = h.maxval as f64;
    Ok(ProbMap2D {
        width: h.width,
        height: h.height,
        values: samples.into_iter().map(|s| s as f64 / scale).collect(),
    })
}

pub fn save_prob_map(map: &ProbMap2D, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_prob_map(map))?;
    Ok(())
}

pub fn load_prob_map(path: impl AsRef<Path>) -> Result<ProbMap2D> {
    decode_prob_map(&fs::read(path)?)
}

pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(mask.width, mask.height, 1, mask.bits.iter().map(|&b| u32::from(b)));
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let (h, samples) = decode(&fs::read(path)?)?;
    Ok(BinaryMask {
        width: h.width,
        height: h.height,
        bits: samples.into_iter().map(|s| 2 * s >= h.maxval).collect(),
    })
}
