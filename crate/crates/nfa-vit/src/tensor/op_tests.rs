//! Op-level tests: hand cases, independent oracles, and gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn assert_close(a: &[f32], b: &[f32], tol: f32) {
    assert_eq!(a.len(), b.len());
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        assert!(
            (x - y).abs() <= tol,
            "element {i}: {x} vs {y} (tol {tol})"
        );
    }
}

// ── matmul ──────────────────────────────────────────────────────────────

#[test]
fn matmul_identity() {
    let mut tape = Tape::new();
    let i2 = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let b = Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
    let c = tape.matmul(&i2, &b).unwrap();
    assert_eq!(c.data(), &[3.0, 4.0, 5.0, 6.0]);
}

#[test]
fn matmul_hand_product() {
    let mut tape = Tape::new();
    let a = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
    let b = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
    let c = tape.matmul(&a, &b).unwrap();
    assert_eq!(c.data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = Tensor::from_fn(vec![4, 5], |_| rng.gen_range(-1.0..1.0));
    let b = Tensor::from_fn(vec![5, 3], |_| rng.gen_range(-1.0..1.0));
    let mut tape = Tape::new();
    let c = tape.matmul(&a, &b).unwrap();
    // Independent element-by-element triple loop.
    let mut expect = vec![0.0f32; 4 * 3];
    for i in 0..4 {
        for j in 0..3 {
            let mut s = 0.0;
            for p in 0..5 {
                s += a.data()[i * 5 + p] * b.data()[p * 3 + j];
            }
            expect[i * 3 + j] = s;
        }
    }
    assert_close(c.data(), &expect, 1e-6);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = Tensor::zeros(vec![2, 3]);
    let b = Tensor::zeros(vec![4, 2]);
    let err = tape.matmul(&a, &b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

// ── softmax ─────────────────────────────────────────────────────────────

#[test]
fn softmax_uniform_logits() {
    let mut tape = Tape::new();
    let x = Tensor::zeros(vec![1, 4]);
    let y = tape.softmax_lastdim(&x, None).unwrap();
    assert_close(y.data(), &[0.25; 4], 1e-7);
}

#[test]
fn softmax_single_allowed_entry() {
    let mut tape = Tape::new();
    let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
    let m = Tensor::new(vec![1, 2], vec![0.0, f32::NEG_INFINITY]).unwrap();
    let y = tape.softmax_lastdim(&x, Some(&m)).unwrap();
    assert_eq!(y.data(), &[1.0, 0.0]);
}

#[test]
fn softmax_matches_scalar_oracle() {
    let mut tape = Tape::new();
    let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    let y = tape.softmax_lastdim(&x, None).unwrap();
    let exps: Vec<f32> = [1.0f32, 2.0, 3.0].iter().map(|v| v.exp()).collect();
    let sum: f32 = exps.iter().sum();
    let expect: Vec<f32> = exps.iter().map(|e| e / sum).collect();
    assert_close(y.data(), &expect, 1e-6);
}

#[test]
fn softmax_fully_masked_row_is_zeros() {
    let mut tape = Tape::new();
    let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let m = Tensor::new(
        vec![2, 2],
        vec![f32::NEG_INFINITY, f32::NEG_INFINITY, 0.0, 0.0],
    )
    .unwrap();
    let y = tape.softmax_lastdim(&x, Some(&m)).unwrap();
    assert_eq!(&y.data()[..2], &[0.0, 0.0]);
    assert!((y.data()[2] + y.data()[3] - 1.0).abs() < 1e-6);
}

#[test]
fn softmax_rejects_non_sentinel_mask() {
    let mut tape = Tape::new();
    let x = Tensor::zeros(vec![1, 2]);
    let m = Tensor::new(vec![1, 2], vec![0.0, -1.0]).unwrap();
    assert!(matches!(
        tape.softmax_lastdim(&x, Some(&m)),
        Err(Error::Value(_))
    ));
}

#[test]
fn softmax_rows_sum_to_one_and_stay_in_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::from_fn(vec![6, 8], |_| rng.gen_range(-5.0..5.0));
    let mut tape = Tape::new();
    let y = tape.softmax_lastdim(&x, None).unwrap();
    for r in 0..6 {
        let row = &y.data()[r * 8..(r + 1) * 8];
        let s: f32 = row.iter().sum();
        assert!((s - 1.0).abs() <= 1e-6);
        assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

// ── layer norm ──────────────────────────────────────────────────────────

#[test]
fn layer_norm_constant_row_collapses_to_bias() {
    let mut tape = Tape::new();
    let x = Tensor::full(vec![1, 4], 5.0);
    let g = Tensor::full(vec![4], 1.0);
    let b = Tensor::zeros(vec![4]);
    let y = tape.layer_norm(&x, &g, &b, 1e-5).unwrap();
    assert_close(y.data(), &[0.0; 4], 1e-6);
}

#[test]
fn layer_norm_two_point_row() {
    let mut tape = Tape::new();
    let x = Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap();
    let g = Tensor::full(vec![2], 1.0);
    let b = Tensor::zeros(vec![2]);
    let y = tape.layer_norm(&x, &g, &b, 1e-5).unwrap();
    assert_close(y.data(), &[-1.0, 1.0], 1e-4);
}

#[test]
fn layer_norm_zero_gain_gives_bias() {
    let mut tape = Tape::new();
    let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap();
    let g = Tensor::zeros(vec![3]);
    let b = Tensor::new(vec![3], vec![0.7, -0.2, 0.1]).unwrap();
    let y = tape.layer_norm(&x, &g, &b, 1e-5).unwrap();
    assert_close(&y.data()[..3], &[0.7, -0.2, 0.1], 1e-7);
    assert_close(&y.data()[3..], &[0.7, -0.2, 0.1], 1e-7);
}

#[test]
fn layer_norm_output_mean_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::from_fn(vec![5, 7], |_| rng.gen_range(-2.0..2.0));
    let g = Tensor::full(vec![7], 1.0);
    let b = Tensor::zeros(vec![7]);
    let mut tape = Tape::new();
    let y = tape.layer_norm(&x, &g, &b, 1e-6).unwrap();
    for r in 0..5 {
        let mean: f32 = y.data()[r * 7..(r + 1) * 7].iter().sum::<f32>() / 7.0;
        assert!(mean.abs() <= 1e-5);
    }
}

// ── gelu ────────────────────────────────────────────────────────────────

#[test]
fn gelu_values() {
    let mut tape = Tape::new();
    let x = Tensor::new(vec![3], vec![0.0, 8.0, 1.0]).unwrap();
    let y = tape.gelu(&x);
    assert_eq!(y.data()[0], 0.0);
    assert!((y.data()[1] - 8.0).abs() < 1e-3);
    // Scalar oracle of the tanh formula at x = 1.
    let inner = (2.0f64 / std::f64::consts::PI).sqrt() * (1.0 + 0.044715);
    let expect = 0.5 * (1.0 + inner.tanh());
    assert!((y.data()[2] as f64 - expect).abs() < 1e-6);
}

#[test]
fn gelu_is_monotone_on_nonnegatives_and_bounded_dip_below() {
    // The tanh-form GELU dips slightly for negative inputs (min about -0.17
    // near x = -0.75); it is monotone nondecreasing from there up.
    let xs: Vec<f32> = (-8..80).map(|i| i as f32 * 0.1).collect();
    let mut tape = Tape::new();
    let y = tape.gelu(&Tensor::new(vec![xs.len()], xs).unwrap());
    for w in y.data().windows(2) {
        assert!(w[1] >= w[0] - 1e-6);
    }
    let neg: Vec<f32> = (-80..0).map(|i| i as f32 * 0.1).collect();
    let yn = tape.gelu(&Tensor::new(vec![neg.len()], neg).unwrap());
    assert!(yn.data().iter().all(|&v| v > -0.2 && v <= 0.0));
}

// ── bilinear upsample ───────────────────────────────────────────────────

#[test]
fn upsample_constant_stays_constant() {
    let mut tape = Tape::new();
    let x = Tensor::full(vec![1, 3, 3], 3.0);
    let y = tape.bilinear_upsample(&x, 2).unwrap();
    assert_eq!(y.shape(), &[1, 6, 6]);
    assert_close(y.data(), &vec![3.0; 36], 1e-6);
}

#[test]
fn upsample_factor_one_is_identity() {
    let mut tape = Tape::new();
    let x = Tensor::from_fn(vec![2, 3, 3], |i| i as f32 * 0.3);
    let y = tape.bilinear_upsample(&x, 1).unwrap();
    assert!(x.bitwise_eq(&y.detach()) || x.data() == y.data());
}

#[test]
fn upsample_matches_per_pixel_oracle() {
    let x = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let mut tape = Tape::new();
    let y = tape.bilinear_upsample(&x, 2).unwrap();
    // Independent align-corners-false formula per output pixel.
    let src = [[0.0f32, 1.0], [2.0, 3.0]];
    let mut expect = vec![0.0f32; 16];
    for oy in 0..4usize {
        for ox in 0..4usize {
            let fy = ((oy as f32 + 0.5) / 2.0 - 0.5).clamp(0.0, 1.0);
            let fx = ((ox as f32 + 0.5) / 2.0 - 0.5).clamp(0.0, 1.0);
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(1), (x0 + 1).min(1));
            let (wy, wx) = (fy - y0 as f32, fx - x0 as f32);
            expect[oy * 4 + ox] = src[y0][x0] * (1.0 - wy) * (1.0 - wx)
                + src[y0][x1] * (1.0 - wy) * wx
                + src[y1][x0] * wy * (1.0 - wx)
                + src[y1][x1] * wy * wx;
        }
    }
    assert_close(y.data(), &expect, 1e-6);
}

#[test]
fn upsample_rejects_factor_zero() {
    let mut tape = Tape::new();
    let x = Tensor::zeros(vec![1, 2, 2]);
    assert!(tape.bilinear_upsample(&x, 0).is_err());
}

// ── bce ─────────────────────────────────────────────────────────────────

#[test]
fn bce_zero_logit_half_target_is_ln2() {
    let mut tape = Tape::new();
    let z = Tensor::zeros(vec![1]);
    let t = Tensor::new(vec![1], vec![0.5]).unwrap();
    let l = tape.bce_with_logits(&z, &t).unwrap();
    assert!((l.item().unwrap() - std::f32::consts::LN_2).abs() < 1e-6);
}

#[test]
fn bce_saturated_correct_is_near_zero() {
    let mut tape = Tape::new();
    let z = Tensor::new(vec![1], vec![20.0]).unwrap();
    let t = Tensor::new(vec![1], vec![1.0]).unwrap();
    let l = tape.bce_with_logits(&z, &t).unwrap();
    assert!(l.item().unwrap() < 1e-6);
}

#[test]
fn bce_matches_naive_sigmoid_oracle() {
    let mut tape = Tape::new();
    let z = Tensor::new(vec![2], vec![0.5, -0.3]).unwrap();
    let t = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
    let l = tape.bce_with_logits(&z, &t).unwrap();
    // Naive sigmoid + log oracle.
    let mut expect = 0.0f64;
    for (&zv, &tv) in [0.5f32, -0.3].iter().zip([1.0f32, 0.0].iter()) {
        let p = 1.0 / (1.0 + (-zv as f64).exp());
        expect += -(tv as f64) * p.ln() - (1.0 - tv as f64) * (1.0 - p).ln();
    }
    expect /= 2.0;
    assert!((l.item().unwrap() as f64 - expect).abs() < 1e-6);
}

#[test]
fn bce_rejects_out_of_range_target() {
    let mut tape = Tape::new();
    let z = Tensor::zeros(vec![1]);
    let t = Tensor::new(vec![1], vec![1.5]).unwrap();
    assert!(matches!(
        tape.bce_with_logits(&z, &t),
        Err(Error::Value(_))
    ));
}

#[test]
fn bce_is_nonnegative() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let z = Tensor::from_fn(vec![4], |_| rng.gen_range(-10.0..10.0));
        let t = Tensor::from_fn(vec![4], |_| rng.gen_range(0.0..=1.0));
        let mut tape = Tape::new();
        let l = tape.bce_with_logits(&z, &t).unwrap();
        assert!(l.item().unwrap() >= 0.0);
    }
}

// ── backward ────────────────────────────────────────────────────────────

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::new();
    let p = tape.leaf(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let loss = tape.sum_all(&p);
    let grads = tape.backward(&loss).unwrap();
    assert_eq!(grads.wrt(&p), vec![1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_sum_of_squares() {
    let mut tape = Tape::new();
    let p = tape.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let sq = tape.mul(&p, &p).unwrap();
    let loss = tape.sum_all(&sq);
    let grads = tape.backward(&loss).unwrap();
    assert_close(&grads.wrt(&p), &[2.0, 4.0], 1e-6);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let p = tape.leaf(&Tensor::zeros(vec![2]));
    let y = tape.scale(&p, 2.0);
    assert!(matches!(tape.backward(&y), Err(Error::Shape(_))));
}

#[test]
fn backward_rejects_off_tape_loss() {
    let tape = Tape::new();
    let loss = Tensor::scalar(1.0);
    assert!(tape.backward(&loss).is_err());
}

#[test]
fn unreachable_leaf_gets_zero_gradient() {
    let mut tape = Tape::new();
    let used = tape.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let unused = tape.leaf(&Tensor::new(vec![2], vec![5.0, 6.0]).unwrap());
    let loss = tape.sum_all(&used);
    let grads = tape.backward(&loss).unwrap();
    assert_eq!(grads.wrt(&unused), vec![0.0, 0.0]);
}

#[test]
fn every_op_matches_finite_differences() {
    let results = crate::selfcheck::op_gradient_checks(None);
    let failures: Vec<_> = results.iter().filter(|r| !r.passed).collect();
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn injected_fault_is_caught_and_named() {
    let results = crate::selfcheck::op_gradient_checks(Some("matmul"));
    let bad: Vec<_> = results.iter().filter(|r| !r.passed).collect();
    assert!(!bad.is_empty());
    assert!(bad.iter().any(|r| r.name.contains("matmul")));
}

#[test]
fn replay_is_bitwise_deterministic() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = Tensor::from_fn(vec![4, 4], |_| rng.gen_range(-1.0..1.0));
        let mut tape = Tape::new();
        let leaf = tape.leaf(&x);
        let s = tape.softmax_lastdim(&leaf, None).unwrap();
        let m = tape.matmul(&s, &leaf).unwrap();
        let g = tape.gelu(&m);
        let loss = tape.mean_all(&g);
        let grads = tape.backward(&loss).unwrap();
        (loss.data().to_vec(), grads.wrt(&leaf))
    };
    let (l1, g1) = build();
    let (l2, g2) = build();
    assert_eq!(l1[0].to_bits(), l2[0].to_bits());
    for (a, b) in g1.iter().zip(&g2) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

// ── optimizer and schedule ──────────────────────────────────────────────

#[test]
fn adam_zero_grad_zero_decay_is_identity() {
    let mut params = ParamSet::new();
    params.add("w", Tensor::new(vec![2], vec![0.3, -0.8]).unwrap()).unwrap();
    let mut state = AdamState::new(&params, 1e-3, 0.0);
    let grads = GradBuffer::zeros_like(&params);
    state.apply(&mut params, &grads, 1e-3).unwrap();
    assert_eq!(params.by_name("w").unwrap().value.data(), &[0.3, -0.8]);
}

#[test]
fn adam_lr_zero_is_identity() {
    let mut params = ParamSet::new();
    params.add("w", Tensor::new(vec![2], vec![0.3, -0.8]).unwrap()).unwrap();
    let mut state = AdamState::new(&params, 1e-3, 0.0);
    let mut grads = GradBuffer::zeros_like(&params);
    grads.grads[0] = vec![1.0, -2.0];
    state.apply(&mut params, &grads, 0.0).unwrap();
    assert_eq!(params.by_name("w").unwrap().value.data(), &[0.3, -0.8]);
    assert_eq!(state.step, 1);
}

#[test]
fn adam_single_step_matches_hand_computation() {
    let mut params = ParamSet::new();
    params.add("w", Tensor::new(vec![1], vec![0.5]).unwrap()).unwrap();
    let mut state = AdamState::new(&params, 0.1, 0.0);
    let mut grads = GradBuffer::zeros_like(&params);
    grads.grads[0] = vec![0.2];
    state.apply(&mut params, &grads, 0.1).unwrap();
    // Hand: m = 0.1*0.2/... m = (1-b1)*g = 0.02, v = (1-b2)*g^2 = 0.00004 * ... precisely:
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let g = 0.2f64;
    let m = (1.0 - b1) * g;
    let v = (1.0 - b2) * g * g;
    let m_hat = m / (1.0 - b1);
    let v_hat = v / (1.0 - b2);
    let expect = 0.5 - 0.1 * m_hat / (v_hat.sqrt() + eps);
    let got = params.by_name("w").unwrap().value.data()[0] as f64;
    assert!((got - expect).abs() < 1e-7, "{got} vs {expect}");
}

#[test]
fn adam_weight_decay_shrinks_params_monotonically() {
    let mut params = ParamSet::new();
    params.add("w", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
    let mut state = AdamState::new(&params, 0.1, 1e-6);
    let grads = GradBuffer::zeros_like(&params);
    let mut prev = 1.0f32;
    for _ in 0..5 {
        state.apply(&mut params, &grads, 0.1).unwrap();
        let now = params.by_name("w").unwrap().value.data()[0];
        assert!(now < prev && now > 0.0);
        prev = now;
    }
}

#[test]
fn lr_schedule_endpoints_and_midpoint() {
    let base = 5e-3f32;
    assert!((lr_schedule(10, 110, 10, base).unwrap() - base).abs() < 1e-9);
    assert!(lr_schedule(110, 110, 10, base).unwrap().abs() < 1e-9);
    let mid = lr_schedule(60, 110, 10, base).unwrap();
    assert!((mid - base / 2.0).abs() < 1e-6);
    // Linear ramp below warmup.
    assert!((lr_schedule(5, 110, 10, base).unwrap() - base * 0.5).abs() < 1e-9);
    assert_eq!(lr_schedule(0, 110, 10, base).unwrap(), 0.0);
}

#[test]
fn lr_schedule_rejects_bad_warmup() {
    assert!(matches!(
        lr_schedule(0, 10, 10, 1e-3),
        Err(Error::Config(_))
    ));
}

// ── misc op sanity ──────────────────────────────────────────────────────

#[test]
fn transpose_round_trip() {
    let x = Tensor::from_fn(vec![3, 5], |i| i as f32);
    let mut tape = Tape::new();
    let t = tape.transpose(&x).unwrap();
    let tt = tape.transpose(&t).unwrap();
    assert_eq!(tt.data(), x.data());
}

#[test]
fn slice_concat_round_trip() {
    let x = Tensor::from_fn(vec![2, 6], |i| i as f32);
    let mut tape = Tape::new();
    let a = tape.slice_cols(&x, 0, 2).unwrap();
    let b = tape.slice_cols(&x, 2, 4).unwrap();
    let back = tape.concat_cols(&[a, b]).unwrap();
    assert_eq!(back.data(), x.data());
}

#[test]
fn tokens_grid_round_trip() {
    let x = Tensor::from_fn(vec![6, 4], |i| i as f32);
    let mut tape = Tape::new();
    let g = tape.tokens_to_grid(&x, 2, 3).unwrap();
    assert_eq!(g.shape(), &[4, 2, 3]);
    let back = tape.grid_to_tokens(&g).unwrap();
    assert_eq!(back.data(), x.data());
}

#[test]
fn unfold_stride_equals_grid() {
    let x = Tensor::from_fn(vec![2, 2, 2], |i| i as f32);
    let mut tape = Tape::new();
    let u = tape.unfold_patches(&x, 2).unwrap();
    assert_eq!(u.shape(), &[1, 8]);
    let err = tape.unfold_patches(&x, 3).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}
