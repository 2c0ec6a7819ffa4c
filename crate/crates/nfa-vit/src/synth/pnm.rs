//! Binary PPM (P6) images and PGM (P5) masks, maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Quantize an RGB [3, H, W] tensor in [0, 1] to a binary P6 file.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let hw = h * w;
    let d = image.data();
    let mut bytes = Vec::with_capacity(hw * 3 + 32);
    bytes.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    for i in 0..hw {
        for c in 0..3 {
            bytes.push((d[c * hw + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Binary mask (0 / 255) as P5.
pub fn write_pgm(path: &Path, mask: &Tensor) -> Result<()> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut bytes = Vec::with_capacity(h * w + 32);
    bytes.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    for &v in mask.data() {
        bytes.push(if v > 0.5 { 255 } else { 0 });
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

struct Header {
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8], magic: &str, path: &Path) -> Result<Header> {
    let err = |reason: &str| Error::format(path.display().to_string(), reason.to_string());
    let mut pos = 0usize;
    let mut fields: Vec<String> = Vec::new();
    // magic, width, height, maxval separated by whitespace (no comments
    // are ever written by this crate; reject them rather than guess).
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != magic {
        return Err(err(&format!("expected {magic} magic, got {}", fields[0])));
    }
    if fields[3] != "255" {
        return Err(err("maxval must be 255"));
    }
    let width: usize = fields[1].parse().map_err(|_| err("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| err("bad height"))?;
    Ok(Header {
        width,
        height,
        data_start: pos + 1,
    })
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let hd = parse_header(&bytes, "P6", path)?;
    let hw = hd.width * hd.height;
    let payload = &bytes[hd.data_start..];
    if payload.len() != hw * 3 {
        return Err(Error::format(
            path.display().to_string(),
            format!("expected {} payload bytes, got {}", hw * 3, payload.len()),
        ));
    }
    let mut data = vec![0.0f32; 3 * hw];
    for i in 0..hw {
        for c in 0..3 {
            data[c * hw + i] = payload[i * 3 + c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, hd.height, hd.width], data)
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let hd = parse_header(&bytes, "P5", path)?;
    let hw = hd.width * hd.height;
    let payload = &bytes[hd.data_start..];
    if payload.len() != hw {
        return Err(Error::format(
            path.display().to_string(),
            format!("expected {hw} payload bytes, got {}", payload.len()),
        ));
    }
    let data: Vec<f32> = payload.iter().map(|&b| if b > 127 { 1.0 } else { 0.0 }).collect();
    Tensor::new(vec![hd.height, hd.width], data)
}
