//! Noise-residual extraction.
//!
//! A fixed Laplacian high-pass filter stands in for a learned noise
//! fingerprint network: forged regions (re-rendered and denoised) carry
//! weaker high-frequency residuals than camera-like regions, which is the
//! property the masked attention downstream relies on. The extractor is
//! pluggable via [`NoiseExtractor`].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-pixel noise residual of an image, same spatial size, zero mean.
#[derive(Clone, Debug)]
pub struct NoiseTrace {
    /// [1, H, W] residual map.
    pub map: Tensor,
    pub extractor_id: String,
}

/// Anything that can turn an RGB image into a residual trace.
pub trait NoiseExtractor: Send + Sync {
    fn id(&self) -> &str;
    fn extract(&self, image: &Tensor) -> Result<NoiseTrace>;
}

/// The default extractor: channel-averaged grayscale convolved with the
/// 3x3 kernel [[-1,-1,-1],[-1,8,-1],[-1,-1,-1]] / 8, reflect padded, then
/// mean-removed so the trace is zero-mean for any input.
#[derive(Default, Clone)]
pub struct LaplacianExtractor;

impl NoiseExtractor for LaplacianExtractor {
    fn id(&self) -> &str {
        "laplacian-highpass-3x3"
    }

    fn extract(&self, image: &Tensor) -> Result<NoiseTrace> {
        extract_noise(image)
    }
}

/// Reflect index (border not repeated): -1 -> 1, len -> len - 2.
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

/// High-pass residual trace of an RGB image in [0, 1]. Linear in the image,
/// deterministic, zero-mean.
pub fn extract_noise(image: &Tensor) -> Result<NoiseTrace> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::Shape(format!(
            "extract_noise: expected [3, H, W] image, got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if h < 3 || w < 3 {
        return Err(Error::Shape(format!(
            "extract_noise: image {h}x{w} smaller than the 3x3 kernel"
        )));
    }
    let d = image.data();
    let hw = h * w;
    let mut gray = vec![0.0f32; hw];
    for i in 0..hw {
        gray[i] = (d[i] + d[hw + i] + d[2 * hw + i]) / 3.0;
    }

    let mut out = vec![0.0f32; hw];
    for y in 0..h {
        for x in 0..w {
            let mut acc = gray[y * w + x];
            let mut ring = 0.0f32;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    ring += gray[reflect(y as isize + dy, h) * w + reflect(x as isize + dx, w)];
                }
            }
            acc = (8.0 * acc - ring) / 8.0;
            out[y * w + x] = acc;
        }
    }
    // Remove the (border-induced) DC component so the trace is exactly
    // zero-mean regardless of input.
    let mean = out.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
    for v in out.iter_mut() {
        *v -= mean as f32;
    }
    Ok(NoiseTrace {
        map: Tensor::new(vec![1, h, w], out)?,
        extractor_id: "laplacian-highpass-3x3".to_string(),
    })
}

/// Mean absolute trace value inside vs outside a binary [H, W] mask.
pub fn noise_statistics(trace: &NoiseTrace, mask: &Tensor) -> Result<(f32, f32)> {
    let (h, w) = (trace.map.shape()[1], trace.map.shape()[2]);
    if mask.shape() != [h, w] {
        return Err(Error::Shape(format!(
            "noise_statistics: mask {:?} does not match trace {h}x{w}",
            mask.shape()
        )));
    }
    let t = trace.map.data();
    let m = mask.data();
    let (mut sum_in, mut n_in, mut sum_out, mut n_out) = (0.0f64, 0usize, 0.0f64, 0usize);
    for i in 0..h * w {
        if m[i] > 0.5 {
            sum_in += t[i].abs() as f64;
            n_in += 1;
        } else {
            sum_out += t[i].abs() as f64;
            n_out += 1;
        }
    }
    if n_in == 0 || n_out == 0 {
        return Err(Error::Value(
            "noise_statistics: mask must contain both classes".into(),
        ));
    }
    Ok(((sum_in / n_in as f64) as f32, (sum_out / n_out as f64) as f32))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_from(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> Tensor {
        Tensor::from_fn(vec![3, h, w], |i| {
            let (y, x) = ((i % (h * w)) / w, i % w);
            f(y, x)
        })
    }

    #[test]
    fn constant_image_gives_zero_trace() {
        let img = Tensor::full(vec![3, 8, 8], 0.4);
        let trace = extract_noise(&img).unwrap();
        assert!(trace.map.data().iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn interior_delta_stamps_the_kernel() {
        let img = image_from(9, 9, |y, x| if y == 4 && x == 4 { 1.0 } else { 0.0 });
        let trace = extract_noise(&img).unwrap();
        let t = trace.map.data();
        // An interior white pixel stamps the kernel: 1.0 at center, -1/8 on
        // the ring; the stamp sums to zero so mean removal is a no-op.
        assert!((t[4 * 9 + 4] - 1.0).abs() < 1e-6);
        for (dy, dx) in [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)] {
            let v = t[((4 + dy) * 9 + (4 + dx)) as usize];
            assert!((v + 0.125).abs() < 1e-6, "ring value {v}");
        }
        assert!(t[0].abs() < 1e-6);
    }

    #[test]
    fn extractor_is_linear() {
        let a = image_from(8, 8, |y, x| 0.1 + 0.05 * ((y * 3 + x) % 7) as f32);
        let b = image_from(8, 8, |y, x| 0.02 * ((y + 2 * x) % 5) as f32);
        let sum = Tensor::from_fn(vec![3, 8, 8], |i| a.data()[i] + b.data()[i]);
        let ta = extract_noise(&a).unwrap();
        let tb = extract_noise(&b).unwrap();
        let ts = extract_noise(&sum).unwrap();
        for i in 0..64 {
            let lhs = ta.map.data()[i] + tb.map.data()[i];
            assert!((lhs - ts.map.data()[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn trace_is_zero_mean_for_any_input() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let img = Tensor::from_fn(vec![3, 12, 16], |_| rng.gen_range(0.0..1.0));
            let trace = extract_noise(&img).unwrap();
            let mean: f64 =
                trace.map.data().iter().map(|&v| v as f64).sum::<f64>() / (12.0 * 16.0);
            assert!(mean.abs() <= 1e-4, "mean {mean}");
        }
        // Adversarial border-heavy input.
        let img = image_from(16, 16, |y, x| {
            if y == 0 || x == 0 || y == 15 || x == 15 {
                1.0
            } else {
                0.0
            }
        });
        let trace = extract_noise(&img).unwrap();
        let mean: f64 = trace.map.data().iter().map(|&v| v as f64).sum::<f64>() / 256.0;
        assert!(mean.abs() <= 1e-4);
    }

    #[test]
    fn shift_equivariant_on_interiors() {
        // A pattern whose support stays >= 2 px from every border in both
        // placements; interior trace values must translate exactly.
        let pat = |y: usize, x: usize| -> f32 {
            if (3..6).contains(&y) && (3..6).contains(&x) {
                0.5 + 0.1 * ((y * 3 + x) % 4) as f32
            } else {
                0.1
            }
        };
        let a = image_from(12, 12, pat);
        let b = image_from(12, 12, |y, x| {
            if y >= 2 && x >= 1 {
                pat(y - 2, x - 1)
            } else {
                0.1
            }
        });
        let ta = extract_noise(&a).unwrap();
        let tb = extract_noise(&b).unwrap();
        for y in 2..10 {
            for x in 2..10 {
                let va = ta.map.data()[y * 12 + x];
                let vb = tb.map.data()[(y + 2) * 12 + (x + 1)];
                assert_eq!(va.to_bits(), vb.to_bits(), "at ({y},{x})");
            }
        }
    }

    #[test]
    fn rejects_tiny_images() {
        let img = Tensor::zeros(vec![3, 2, 5]);
        assert!(matches!(extract_noise(&img), Err(Error::Shape(_))));
    }

    #[test]
    fn statistics_trivials() {
        let trace = NoiseTrace {
            map: Tensor::zeros(vec![1, 4, 4]),
            extractor_id: "test".into(),
        };
        let mask = Tensor::from_fn(vec![4, 4], |i| if i < 8 { 1.0 } else { 0.0 });
        assert_eq!(noise_statistics(&trace, &mask).unwrap(), (0.0, 0.0));

        let ones = NoiseTrace {
            map: Tensor::full(vec![1, 4, 4], 1.0),
            extractor_id: "test".into(),
        };
        assert_eq!(noise_statistics(&ones, &mask).unwrap(), (1.0, 1.0));

        let single = Tensor::full(vec![4, 4], 1.0);
        assert!(matches!(
            noise_statistics(&ones, &single),
            Err(Error::Value(_))
        ));
    }
}
