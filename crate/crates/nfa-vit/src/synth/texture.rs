//! Procedural texture, fingerprint and region-mask synthesis. Everything
//! is a pure function of (size, seed).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SALT_TEXTURE: u64 = 0x7465_7874;
const SALT_FINGERPRINT: u64 = 0x6669_7072;
const SALT_MASK: u64 = 0x6d61_736b;
const SALT_FORGE: u64 = 0x666f_7267;

/// Amplitude of the per-image high-frequency fingerprint field.
pub const FINGERPRINT_AMPLITUDE: f32 = 0.02;

fn sub_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt)
}

/// Bilinearly interpolated random lattice with `cells` cells per axis.
fn value_noise(h: usize, w: usize, cells: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let lat = cells + 1;
    let lattice: Vec<f32> = (0..lat * lat).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        let fy = y as f32 / h as f32 * cells as f32;
        let y0 = (fy.floor() as usize).min(cells - 1);
        let wy = fy - y0 as f32;
        for x in 0..w {
            let fx = x as f32 / w as f32 * cells as f32;
            let x0 = (fx.floor() as usize).min(cells - 1);
            let wx = fx - x0 as f32;
            let v00 = lattice[y0 * lat + x0];
            let v01 = lattice[y0 * lat + x0 + 1];
            let v10 = lattice[(y0 + 1) * lat + x0];
            let v11 = lattice[(y0 + 1) * lat + x0 + 1];
            let top = v00 + (v01 - v00) * wx;
            let bot = v10 + (v11 - v10) * wx;
            out[y * w + x] = top + (bot - top) * wy;
        }
    }
    out
}

/// Multi-octave value-noise luminance field in roughly [0.15, 0.85].
/// Octave amplitudes vary per seed so that global residual statistics
/// differ image to image (keeps the trivial global detector imperfect).
fn texture_field(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let octaves = [(4usize, 0.5f32), (8, 0.25), (16, 0.15), (32, 0.10)];
    let mut acc = vec![0.0f32; h * w];
    for &(cells, base_amp) in &octaves {
        let amp = base_amp * rng.gen_range(0.25..1.0);
        let field = value_noise(h, w, cells.min(h / 2).max(1), rng);
        for (a, f) in acc.iter_mut().zip(&field) {
            *a += amp * f;
        }
    }
    acc.iter().map(|v| 0.5 + 0.45 * v).collect()
}

/// White-noise fingerprint field of the given amplitude.
fn fingerprint_field(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..h * w)
        .map(|_| rng.gen_range(-1.0f32..1.0) * FINGERPRINT_AMPLITUDE)
        .collect()
}

fn compose_image(
    h: usize,
    w: usize,
    lum: &[f32],
    tint: &[[f32; 2]; 3],
    chroma: &[f32],
    fp: &[f32],
) -> Tensor {
    let mut data = vec![0.0f32; 3 * h * w];
    for c in 0..3 {
        let (gain, bias) = (tint[c][0], tint[c][1]);
        for i in 0..h * w {
            let v = lum[i] * gain + bias + 0.05 * chroma[i] * (c as f32 - 1.0) + fp[i];
            data[c * h * w + i] = v.clamp(0.0, 1.0);
        }
    }
    Tensor::new(vec![3, h, w], data).expect("image shape")
}

struct TextureParts {
    lum: Vec<f32>,
    tint: [[f32; 2]; 3],
    chroma: Vec<f32>,
}

fn texture_parts(h: usize, w: usize, seed: u64) -> TextureParts {
    let mut rng = sub_rng(seed, SALT_TEXTURE);
    let lum = texture_field(h, w, &mut rng);
    let mut tint = [[1.0f32, 0.0f32]; 3];
    for t in tint.iter_mut() {
        t[0] = rng.gen_range(0.8..1.0);
        t[1] = rng.gen_range(-0.05..0.05);
    }
    let chroma = value_noise(h, w, 8.min(h / 2).max(1), &mut rng);
    TextureParts { lum, tint, chroma }
}

/// Deterministic base image: multi-octave texture plus the per-seed
/// fingerprint, clipped to [0, 1].
pub fn gen_base_image(h: usize, w: usize, seed: u64) -> Tensor {
    let parts = texture_parts(h, w, seed);
    let fp = fingerprint_field(h, w, &mut sub_rng(seed, SALT_FINGERPRINT));
    compose_image(h, w, &parts.lum, &parts.tint, &parts.chroma, &fp)
}

/// Region geometry families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionKind {
    Object,
    Stuff,
    Background,
    /// Real sample: no forged region.
    None,
}

impl RegionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RegionKind::Object => "object",
            RegionKind::Stuff => "stuff",
            RegionKind::Background => "background",
            RegionKind::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "object" => RegionKind::Object,
            "stuff" => RegionKind::Stuff,
            "background" => RegionKind::Background,
            "none" => RegionKind::None,
            other => return Err(Error::Value(format!("unknown region kind {other}"))),
        })
    }

    /// Legal target-area range (lo, hi], per kind.
    pub fn area_range(&self) -> Option<(f64, f64)> {
        match self {
            RegionKind::Object => Some((0.05, 0.2)),
            RegionKind::Stuff => Some((0.2, 0.8)),
            RegionKind::Background => Some((0.3, 0.95)),
            RegionKind::None => None,
        }
    }
}

/// Mark exactly `count` pixels: those with the smallest field values
/// (ties to the lower index), giving an exact achieved area.
fn threshold_smallest(field: &[f32], count: usize) -> Vec<f32> {
    let mut order: Vec<usize> = (0..field.len()).collect();
    if count < field.len() {
        order.select_nth_unstable_by(count - 1, |&a, &b| {
            field[a].partial_cmp(&field[b]).unwrap().then(a.cmp(&b))
        });
    }
    let mut mask = vec![0.0f32; field.len()];
    for &i in &order[..count] {
        mask[i] = 1.0;
    }
    mask
}

fn blob_field(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let cy = rng.gen_range(0.3..0.7) * h as f32;
    let cx = rng.gen_range(0.3..0.7) * w as f32;
    let wobble = value_noise(h, w, 4.min(h / 2).max(1), rng);
    let scale = (h.min(w)) as f32;
    let mut field = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let dy = (y as f32 - cy) / scale;
            let dx = (x as f32 - cx) / scale;
            field[y * w + x] = (dy * dy + dx * dx).sqrt() + 0.08 * wobble[y * w + x];
        }
    }
    field
}

/// Binary [H, W] region mask of the requested kind and target area.
/// Object: one smooth blob. Stuff: thresholded low-frequency field.
/// Background: exact complement of an object blob.
pub fn gen_region_mask(kind: RegionKind, target_area: f64, h: usize, w: usize, seed: u64) -> Result<Tensor> {
    let (lo, hi) = kind
        .area_range()
        .ok_or_else(|| Error::Value("gen_region_mask: kind none has no region".into()))?;
    if !(target_area > lo && target_area <= hi) {
        return Err(Error::Value(format!(
            "gen_region_mask: area {target_area} outside ({lo}, {hi}] for {}",
            kind.as_str()
        )));
    }
    let mut rng = sub_rng(seed, SALT_MASK);
    let total = h * w;
    let data = match kind {
        RegionKind::Object => {
            let field = blob_field(h, w, &mut rng);
            let count = ((target_area * total as f64).round() as usize).clamp(1, total);
            threshold_smallest(&field, count)
        }
        RegionKind::Stuff => {
            let field = value_noise(h, w, 4.min(h / 2).max(1), &mut rng);
            let count = ((target_area * total as f64).round() as usize).clamp(1, total);
            threshold_smallest(&field, count)
        }
        RegionKind::Background => {
            let field = blob_field(h, w, &mut rng);
            let blob_count =
                (((1.0 - target_area) * total as f64).round() as usize).clamp(1, total - 1);
            let blob = threshold_smallest(&field, blob_count);
            blob.iter().map(|&v| 1.0 - v).collect()
        }
        RegionKind::None => unreachable!(),
    };
    Tensor::new(vec![h, w], data)
}

/// Chebyshev distance (capped at `cap`) from each pixel to the nearest
/// pixel where `inside` differs; used to feather the paste boundary.
fn capped_distance(mask: &[f32], h: usize, w: usize, to_value: f32, cap: usize) -> Vec<u8> {
    let mut dist = vec![cap as u8; h * w];
    for i in 0..h * w {
        if mask[i] == to_value {
            dist[i] = 0;
        }
    }
    for d in 1..=cap as u8 {
        for y in 0..h {
            for x in 0..w {
                if dist[y * w + x] < d {
                    continue;
                }
                let mut near = false;
                'scan: for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (ny, nx) = (y as isize + dy, x as isize + dx);
                        if ny >= 0 && ny < h as isize && nx >= 0 && nx < w as isize {
                            if dist[ny as usize * w + nx as usize] == d - 1 {
                                near = true;
                                break 'scan;
                            }
                        }
                    }
                }
                if near && dist[y * w + x] > d {
                    dist[y * w + x] = d;
                }
            }
        }
    }
    dist
}

fn box_blur_3x3(src: &[f32], h: usize, w: usize) -> Vec<f32> {
    let reflect = |i: isize, len: usize| -> usize {
        let len = len as isize;
        let mut i = i;
        if i < 0 {
            i = -i;
        }
        if i >= len {
            i = 2 * (len - 1) - i;
        }
        i as usize
    };
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    acc += src[reflect(y as isize + dy, h) * w + reflect(x as isize + dx, w)];
                }
            }
            out[y * w + x] = acc / 9.0;
        }
    }
    out
}

/// Re-render the masked region with the same texture but a different
/// fingerprint seed, box-blur it (generator denoising stand-in), and blend
/// across a 2-pixel feathered boundary. Pixels away from the region are
/// bitwise-unchanged.
pub fn forge_region(base: &Tensor, base_seed: u64, mask: &Tensor, forge_seed: u64) -> Result<Tensor> {
    let (h, w) = (base.shape()[1], base.shape()[2]);
    if mask.shape() != [h, w] {
        return Err(Error::Shape(format!(
            "forge_region: mask {:?} does not match image {h}x{w}",
            mask.shape()
        )));
    }
    if !mask.data().iter().any(|&v| v > 0.5) {
        return Err(Error::Value("forge_region: empty mask".into()));
    }
    // Same texture family and macro content, different fingerprint.
    let parts = texture_parts(h, w, base_seed);
    let fp = fingerprint_field(h, w, &mut sub_rng(forge_seed, SALT_FORGE));
    let rendered = compose_image(h, w, &parts.lum, &parts.tint, &parts.chroma, &fp);

    let hw = h * w;
    let mut blurred = vec![0.0f32; 3 * hw];
    for c in 0..3 {
        let plane = box_blur_3x3(&rendered.data()[c * hw..(c + 1) * hw], h, w);
        blurred[c * hw..(c + 1) * hw].copy_from_slice(&plane);
    }

    // Signed feather: alpha 1 two pixels inside, alpha 0 two pixels outside.
    let dist_to_in = capped_distance(mask.data(), h, w, 1.0, 3);
    let dist_to_out = capped_distance(mask.data(), h, w, 0.0, 3);
    let mut out = base.data().to_vec();
    for i in 0..hw {
        let signed = if mask.data()[i] > 0.5 {
            dist_to_out[i] as f32
        } else {
            -(dist_to_in[i] as f32)
        };
        let alpha = ((signed + 2.0) / 4.0).clamp(0.0, 1.0);
        if alpha == 0.0 {
            continue;
        }
        for c in 0..3 {
            let idx = c * hw + i;
            out[idx] = if alpha == 1.0 {
                blurred[idx]
            } else {
                alpha * blurred[idx] + (1.0 - alpha) * base.data()[idx]
            };
        }
    }
    Tensor::new(vec![3, h, w], out)
}
