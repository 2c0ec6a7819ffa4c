//! Deterministic image degradations: seeded Gaussian noise, truncated
//! Gaussian blur, and an 8x8 block-DCT JPEG-luma approximation with the
//! standard luminance quantization table.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PerturbKind {
    GaussNoise,
    GaussBlur,
    Jpeg,
}

impl PerturbKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PerturbKind::GaussNoise => "gauss_noise",
            PerturbKind::GaussBlur => "gauss_blur",
            PerturbKind::Jpeg => "jpeg",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "gauss_noise" => PerturbKind::GaussNoise,
            "gauss_blur" => PerturbKind::GaussBlur,
            "jpeg" => PerturbKind::Jpeg,
            other => return Err(Error::Config(format!("unknown perturbation {other}"))),
        })
    }
}

/// Apply one protocol degradation. Severities: noise/blur sigma in {1, 3}
/// (0-255 intensity scale for noise, kernel sigma for blur), JPEG quality
/// in {95, 75}.
pub fn perturb(image: &Tensor, kind: PerturbKind, severity: u32, seed: u64) -> Result<Tensor> {
    match kind {
        PerturbKind::GaussNoise => {
            if severity != 1 && severity != 3 {
                return Err(Error::Config(format!(
                    "gauss_noise severity must be 1 or 3, got {severity}"
                )));
            }
            Ok(gauss_noise(image, severity as f32 / 255.0, seed))
        }
        PerturbKind::GaussBlur => {
            if severity != 1 && severity != 3 {
                return Err(Error::Config(format!(
                    "gauss_blur severity must be 1 or 3, got {severity}"
                )));
            }
            Ok(gauss_blur(image, severity as f32))
        }
        PerturbKind::Jpeg => {
            if severity != 95 && severity != 75 {
                return Err(Error::Config(format!(
                    "jpeg quality must be 95 or 75, got {severity}"
                )));
            }
            jpeg_luma_approx(image, severity)
        }
    }
}

/// Seeded additive Gaussian noise (Box-Muller), clipped to [0, 1].
pub fn gauss_noise(image: &Tensor, sigma: f32, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spare: Option<f32> = None;
    let mut normal = move || -> f32 {
        if let Some(v) = spare.take() {
            return v;
        }
        let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
        let u2: f32 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f32::consts::PI * u2;
        spare = Some(r * theta.sin());
        r * theta.cos()
    };
    let data = image
        .data()
        .iter()
        .map(|&v| (v + sigma * normal()).clamp(0.0, 1.0))
        .collect();
    Tensor::new(image.shape().to_vec(), data).expect("same shape")
}

fn reflect(i: isize, len: usize) -> usize {
    let len = len as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= len {
        i = 2 * (len - 1) - i;
    }
    i as usize
}

/// Separable truncated Gaussian blur, radius ceil(3 sigma), reflect padded.
pub fn gauss_blur(image: &Tensor, sigma: f32) -> Tensor {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-(i * i) as f32 / (2.0 * sigma * sigma)).exp());
    }
    let sum: f32 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= sum;
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let hw = h * w;
    let src = image.data();
    let mut tmp = vec![0.0f32; c * hw];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f32;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let sx = reflect(x as isize + ki as isize - radius, w);
                    acc += kv * src[ch * hw + y * w + sx];
                }
                tmp[ch * hw + y * w + x] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; c * hw];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f32;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let sy = reflect(y as isize + ki as isize - radius, h);
                    acc += kv * tmp[ch * hw + sy * w + x];
                }
                out[ch * hw + y * w + x] = acc;
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out).expect("same shape")
}

/// The standard JPEG luminance quantization table.
const LUMA_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Quality-scaled table: floor((t * s + 50) / 100), s = 5000/q below 50
/// else 200 - 2q, clamped to at least 1.
fn scaled_table(quality: u32) -> [f32; 64] {
    let s = if quality < 50 {
        5000 / quality
    } else {
        200 - 2 * quality
    };
    let mut out = [0.0f32; 64];
    for (o, &t) in out.iter_mut().zip(&LUMA_TABLE) {
        *o = (((t as u32 * s + 50) / 100).max(1)) as f32;
    }
    out
}

fn dct_basis() -> [[f32; 8]; 8] {
    let mut basis = [[0.0f32; 8]; 8];
    for (k, row) in basis.iter_mut().enumerate() {
        let ck = if k == 0 {
            (1.0f64 / 8.0).sqrt()
        } else {
            (2.0f64 / 8.0).sqrt()
        };
        for (n, v) in row.iter_mut().enumerate() {
            *v = (ck
                * (std::f64::consts::PI * (2.0 * n as f64 + 1.0) * k as f64 / 16.0).cos())
                as f32;
        }
    }
    basis
}

/// Deterministic JPEG approximation: luma-only 8x8 block DCT quantization
/// with the standard table; chroma passes through untouched.
pub fn jpeg_luma_approx(image: &Tensor, quality: u32) -> Result<Tensor> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if c != 3 {
        return Err(Error::Shape(format!("jpeg: expected 3 channels, got {c}")));
    }
    let hw = h * w;
    let d = image.data();
    // RGB -> YCbCr (JFIF full range, 0..255 domain).
    let mut y = vec![0.0f32; hw];
    let mut cb = vec![0.0f32; hw];
    let mut cr = vec![0.0f32; hw];
    for i in 0..hw {
        let (r, g, b) = (d[i] * 255.0, d[hw + i] * 255.0, d[2 * hw + i] * 255.0);
        y[i] = 0.299 * r + 0.587 * g + 0.114 * b;
        cb[i] = 128.0 - 0.168_736 * r - 0.331_264 * g + 0.5 * b;
        cr[i] = 128.0 + 0.5 * r - 0.418_688 * g - 0.081_312 * b;
    }
    // Pad to multiples of 8 by edge replication.
    let (ph, pw) = (h.div_ceil(8) * 8, w.div_ceil(8) * 8);
    let mut ypad = vec![0.0f32; ph * pw];
    for yy in 0..ph {
        for xx in 0..pw {
            ypad[yy * pw + xx] = y[yy.min(h - 1) * w + xx.min(w - 1)];
        }
    }
    let table = scaled_table(quality);
    let basis = dct_basis();
    let mut block = [0.0f32; 64];
    let mut coef = [0.0f32; 64];
    for by in (0..ph).step_by(8) {
        for bx in (0..pw).step_by(8) {
            for r in 0..8 {
                for cc in 0..8 {
                    block[r * 8 + cc] = ypad[(by + r) * pw + bx + cc] - 128.0;
                }
            }
            // 2-D DCT-II: C = B * block * B^T.
            let mut tmp = [0.0f32; 64];
            for k in 0..8 {
                for n in 0..8 {
                    let mut acc = 0.0f32;
                    for m in 0..8 {
                        acc += basis[k][m] * block[m * 8 + n];
                    }
                    tmp[k * 8 + n] = acc;
                }
            }
            for k in 0..8 {
                for l in 0..8 {
                    let mut acc = 0.0f32;
                    for m in 0..8 {
                        acc += tmp[k * 8 + m] * basis[l][m];
                    }
                    coef[k * 8 + l] = acc;
                }
            }
            for i in 0..64 {
                coef[i] = (coef[i] / table[i]).round() * table[i];
            }
            // Inverse: block = B^T * C * B.
            for k in 0..8 {
                for n in 0..8 {
                    let mut acc = 0.0f32;
                    for m in 0..8 {
                        acc += basis[m][k] * coef[m * 8 + n];
                    }
                    tmp[k * 8 + n] = acc;
                }
            }
            for r in 0..8 {
                for cc in 0..8 {
                    let mut acc = 0.0f32;
                    for m in 0..8 {
                        acc += tmp[r * 8 + m] * basis[m][cc];
                    }
                    ypad[(by + r) * pw + bx + cc] = acc + 128.0;
                }
            }
        }
    }
    // Back to RGB, clipped.
    let mut out = vec![0.0f32; 3 * hw];
    for i in 0..hw {
        let (yy, xx) = (i / w, i % w);
        let yv = ypad[yy * pw + xx];
        let (cbv, crv) = (cb[i] - 128.0, cr[i] - 128.0);
        let r = yv + 1.402 * crv;
        let g = yv - 0.344_136 * cbv - 0.714_136 * crv;
        let b = yv + 1.772 * cbv;
        out[i] = (r / 255.0).clamp(0.0, 1.0);
        out[hw + i] = (g / 255.0).clamp(0.0, 1.0);
        out[2 * hw + i] = (b / 255.0).clamp(0.0, 1.0);
    }
    Tensor::new(vec![3, h, w], out)
}
