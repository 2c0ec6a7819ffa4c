//! Model-level tests: encoder contracts, decoder behavior, loss values,
//! determinism, checkpoint round-trips, and the end-to-end gradient check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::attention::NoiseMask;
use crate::noise::NoiseTrace;
use crate::selfcheck;
use crate::tensor::Tape;

fn fwd_ctx<'a>(tape: &'a mut Tape, binding: &'a mut Binding, params: &'a ParamSet) -> Fwd<'a> {
    Fwd {
        tape,
        params,
        binding,
    }
}

fn rand_image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![3, h, w], |_| rng.gen_range(0.0..1.0))
}

#[test]
fn noise_encoder_zero_trace_exports_uniform_attention() {
    let model = NfaVit::new(ModelConfig::minimal(), 1).unwrap();
    let trace = NoiseTrace {
        map: Tensor::zeros(vec![1, 32, 32]),
        extractor_id: "test".into(),
    };
    let mut tape = Tape::new();
    let mut binding = Binding::new(&model.params);
    let mut fw = fwd_ctx(&mut tape, &mut binding, &model.params);
    let (_, attns) = model.noise_encoder_forward(&mut fw, &trace).unwrap();
    assert_eq!(attns.len(), 4);
    for (i, a) in attns.iter().enumerate() {
        let n = a.shape()[1];
        for &v in a.data() {
            assert!(
                (v - 1.0 / n as f32).abs() < 1e-6,
                "stage {i}: {v} vs uniform {}",
                1.0 / n as f32
            );
        }
    }
}

#[test]
fn noise_encoder_attention_rows_sum_to_one_and_heads_match() {
    let model = NfaVit::new(ModelConfig::minimal(), 2).unwrap();
    let img = rand_image(32, 32, 3);
    let trace = crate::noise::extract_noise(&img).unwrap();
    let mut tape = Tape::new();
    let mut binding = Binding::new(&model.params);
    let mut fw = fwd_ctx(&mut tape, &mut binding, &model.params);
    let (_, attns) = model.noise_encoder_forward(&mut fw, &trace).unwrap();
    for (i, a) in attns.iter().enumerate() {
        assert_eq!(a.shape()[0], model.config.heads[i], "stage {i} head count");
        let n = a.shape()[1];
        for h in 0..a.shape()[0] {
            for q in 0..n {
                let row = &a.data()[(h * n + q) * n..(h * n + q + 1) * n];
                let sum: f32 = row.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-6, "stage {i} head {h} row {q}: {sum}");
            }
        }
    }
}

#[test]
fn image_encoder_all_true_masks_match_dense_reference_bitwise() {
    let model = NfaVit::new(ModelConfig::minimal(), 4).unwrap();
    let img = rand_image(32, 32, 5);
    let token_counts = [64usize, 16, 4, 1];
    let masks: Vec<NoiseMask> = (0..4)
        .map(|i| NoiseMask::all_true(model.config.heads[i], token_counts[i]))
        .collect();

    let run = |final_layers: ImageFinalLayers| -> StagePyramid {
        let mut tape = Tape::new();
        let mut binding = Binding::new(&model.params);
        let mut fw = fwd_ctx(&mut tape, &mut binding, &model.params);
        model
            .image_encoder_forward(&mut fw, &img, final_layers, None)
            .unwrap()
    };
    let masked = run(ImageFinalLayers::Masked(&masks));
    let dense = run(ImageFinalLayers::Dense);
    for (i, (m, d)) in masked.iter().zip(&dense).enumerate() {
        assert!(
            m.tokens.detach().bitwise_eq(&d.tokens.detach()),
            "stage {i} differs"
        );
    }
}

#[test]
fn image_encoder_pyramid_shapes() {
    let model = NfaVit::new(ModelConfig::minimal(), 6).unwrap();
    let img = rand_image(64, 32, 7);
    let mut tape = Tape::new();
    let mut binding = Binding::new(&model.params);
    let mut fw = fwd_ctx(&mut tape, &mut binding, &model.params);
    let pyr = model
        .image_encoder_forward(&mut fw, &img, ImageFinalLayers::Sparse, None)
        .unwrap();
    let expect = [(16, 8), (8, 4), (4, 2), (2, 1)];
    for (i, s) in pyr.iter().enumerate() {
        assert_eq!((s.h, s.w), expect[i], "stage {i}");
        assert_eq!(s.tokens.shape(), &[s.h * s.w, model.config.image_dims[i]]);
    }
}

fn set_gamma(model: &mut NfaVit, index: usize, value: f32) {
    let name = format!("decoder.gamma{}", index + 1);
    for q in model.params.iter_mut() {
        if q.name == name {
            q.value.data_mut()[0] = value;
        }
    }
}

fn toy_pyramid(model: &NfaVit, seed: u64, perturb_stage: Option<usize>) -> StagePyramid {
    let sizes = [(8usize, 8usize), (4, 4), (2, 2), (1, 1)];
    (0..4)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + i as u64);
            let mut t = Tensor::from_fn(
                vec![sizes[i].0 * sizes[i].1, model.config.image_dims[i]],
                |_| rng.gen_range(-1.0..1.0),
            );
            if perturb_stage == Some(i) {
                t.data_mut()[0] += 0.5;
            }
            StageOut {
                tokens: t,
                h: sizes[i].0,
                w: sizes[i].1,
            }
        })
        .collect()
}

fn run_decoder(model: &NfaVit, pyr: &StagePyramid) -> Tensor {
    let mut tape = Tape::new();
    let mut binding = Binding::new(&model.params);
    let mut fw = fwd_ctx(&mut tape, &mut binding, &model.params);
    model
        .weighted_decoder(&mut fw, pyr, (32, 32))
        .unwrap()
        .detach()
}

#[test]
fn decoder_gamma_selects_stages() {
    let mut model = NfaVit::new(ModelConfig::minimal(), 8).unwrap();
    // gamma = (1, 0, 0, 0): output must ignore F2..F4 entirely.
    for i in 1..4 {
        set_gamma(&mut model, i, 0.0);
    }
    let base = run_decoder(&model, &toy_pyramid(&model, 100, None));
    for stage in 1..4 {
        let out = run_decoder(&model, &toy_pyramid(&model, 100, Some(stage)));
        assert!(base.bitwise_eq(&out), "stage {stage} leaked through zero gamma");
    }
    let out = run_decoder(&model, &toy_pyramid(&model, 100, Some(0)));
    assert!(!base.bitwise_eq(&out), "stage 1 must matter");
}

#[test]
fn decoder_zero_gamma_outputs_constant_bias_map() {
    let mut model = NfaVit::new(ModelConfig::minimal(), 9).unwrap();
    for i in 0..4 {
        set_gamma(&mut model, i, 0.0);
    }
    let out = run_decoder(&model, &toy_pyramid(&model, 200, None));
    let first = out.data()[0];
    assert!(out.data().iter().all(|&v| (v - first).abs() < 1e-6));
    // The constant equals the fuse bias pushed through the head.
    let fuse_b = model.params.by_name("decoder.fuse.b").unwrap().value.clone();
    let head_w = model.params.by_name("decoder.head.w").unwrap().value.clone();
    let head_b = model.params.by_name("decoder.head.b").unwrap().value.clone();
    let mut expect = head_b.data()[0];
    for j in 0..fuse_b.numel() {
        expect += fuse_b.data()[j] * head_w.data()[j];
    }
    assert!((first - expect).abs() < 1e-5, "{first} vs {expect}");
}

#[test]
fn decoder_is_linear_in_gamma() {
    let pyr_model = NfaVit::new(ModelConfig::minimal(), 10).unwrap();
    let pyr = toy_pyramid(&pyr_model, 300, None);
    let run_with_gamma = |g: f32| -> Vec<f32> {
        let mut m = NfaVit::new(ModelConfig::minimal(), 10).unwrap();
        for i in 0..4 {
            set_gamma(&mut m, i, g);
        }
        run_decoder(&m, &pyr).data().to_vec()
    };
    let at0 = run_with_gamma(0.0);
    let at1 = run_with_gamma(1.0);
    let at2 = run_with_gamma(2.0);
    for i in 0..at0.len() {
        let lhs = at2[i] - at0[i];
        let rhs = 2.0 * (at1[i] - at0[i]);
        assert!((lhs - rhs).abs() < 1e-4, "pixel {i}: {lhs} vs {rhs}");
    }
}

#[test]
fn cls_head_zero_features_zero_logit() {
    let model = NfaVit::new(ModelConfig::minimal(), 11).unwrap();
    let f4 = StageOut {
        tokens: Tensor::zeros(vec![4, model.config.image_dims[3]]),
        h: 2,
        w: 2,
    };
    let mut tape = Tape::new();
    let mut binding = Binding::new(&model.params);
    let mut fw = fwd_ctx(&mut tape, &mut binding, &model.params);
    let logit = model.cls_head(&mut fw, &f4).unwrap();
    assert_eq!(logit.data()[0], 0.0);
}

#[test]
fn cls_head_pooling_is_permutation_invariant_with_1x1_kernels() {
    let mut cfg = ModelConfig::minimal();
    cfg.cls_kernel = 1;
    let model = NfaVit::new(cfg, 12).unwrap();
    let dim = model.config.image_dims[3];
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let tokens = Tensor::from_fn(vec![4, dim], |_| rng.gen_range(-1.0..1.0));
    let permuted = {
        let perm = [2usize, 0, 3, 1];
        Tensor::from_fn(vec![4, dim], |i| {
            let (t, c) = (i / dim, i % dim);
            tokens.data()[perm[t] * dim + c]
        })
    };
    let run = |toks: Tensor| -> f32 {
        let mut tape = Tape::new();
        let mut binding = Binding::new(&model.params);
        let mut fw = fwd_ctx(&mut tape, &mut binding, &model.params);
        model
            .cls_head(
                &mut fw,
                &StageOut {
                    tokens: toks,
                    h: 2,
                    w: 2,
                },
            )
            .unwrap()
            .data()[0]
    };
    let a = run(tokens);
    let b = run(permuted);
    assert!((a - b).abs() < 1e-6, "{a} vs {b}");
}

#[test]
fn naa_block_is_identity_when_projections_are_zeroed() {
    let mut model = NfaVit::new(ModelConfig::minimal(), 14).unwrap();
    for p in model.params.iter_mut() {
        if p.name.contains(".out_proj.") || p.name.contains(".mlp.fc2.") {
            p.value.data_mut().fill(0.0);
        }
    }
    let block = &model.image_stages[0].blocks[0];
    let mask = NoiseMask::all_true(model.config.heads[0], 6);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = Tensor::from_fn(vec![6, model.config.image_dims[0]], |_| {
        rng.gen_range(-1.0..1.0)
    });
    let mut tape = Tape::new();
    let mut binding = Binding::new(&model.params);
    let mut fw = fwd_ctx(&mut tape, &mut binding, &model.params);
    let (y, _) = block
        .forward(
            &mut fw,
            &x,
            &crate::attention::AttnMode::Naa {
                mask: &mask,
                post_softmax: false,
            },
            false,
        )
        .unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn forward_is_deterministic_and_shapes_match() {
    let model = NfaVit::new(ModelConfig::minimal(), 16).unwrap();
    let img = rand_image(32, 32, 17);
    let (o1, _, _) = model.forward(&img).unwrap();
    let (o2, _, _) = model.forward(&img).unwrap();
    assert!(o1.mask_logits.detach().bitwise_eq(&o2.mask_logits.detach()));
    assert_eq!(
        o1.cls_logit.data()[0].to_bits(),
        o2.cls_logit.data()[0].to_bits()
    );
    assert_eq!(o1.mask_logits.shape(), &[1, 32, 32]);
    assert!(o1.mask_logits.is_finite());
}

#[test]
fn forward_rejects_bad_sizes() {
    let model = NfaVit::new(ModelConfig::minimal(), 18).unwrap();
    let img = rand_image(33, 32, 19);
    assert!(model.forward(&img).is_err());
}

#[test]
fn untrained_model_scores_near_chance() {
    // Balanced tiny batch, 10 seeds: the median AUC must sit in the
    // chance band [0.3, 0.7].
    use crate::synth::{generate_sample, CorpusSpec};
    let spec = CorpusSpec {
        train: 20,
        val: 1,
        test: 1,
        image_size: 32,
        ..CorpusSpec::default()
    };
    let samples: Vec<_> = (0..20)
        .map(|i| generate_sample(&spec, i, i).unwrap())
        .collect();
    let mut aucs = Vec::new();
    for seed in 0..10u64 {
        let model = NfaVit::new(ModelConfig::minimal(), 1000 + seed).unwrap();
        let scores: Vec<(f64, u8)> = samples
            .iter()
            .map(|s| {
                let (p, _) = model.predict(&s.image).unwrap();
                (p as f64, s.label)
            })
            .collect();
        aucs.push(crate::metrics::auc_scores(&scores).unwrap());
    }
    aucs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = aucs[aucs.len() / 2];
    assert!((0.3..=0.7).contains(&median), "median auc {median}");
}

#[test]
fn loss_values_match_closed_forms() {
    let model = NfaVit::new(ModelConfig::minimal(), 20).unwrap();
    let mut tape = Tape::new();
    // Saturated perfect predictions.
    let mask = Tensor::from_fn(vec![4, 4], |i| if i < 8 { 1.0 } else { 0.0 });
    let out = ModelOutput {
        mask_logits: Tensor::from_fn(vec![1, 4, 4], |i| if i < 8 { 30.0 } else { -30.0 }),
        cls_logit: Tensor::new(vec![1], vec![30.0]).unwrap(),
    };
    let l = model.loss(&mut tape, &out, 1.0, &mask).unwrap();
    assert!(l.item().unwrap() < 1e-5);

    // All-zero logits, y = 0, half-ones mask: ln 2 + ln 2.
    let out = ModelOutput {
        mask_logits: Tensor::zeros(vec![1, 4, 4]),
        cls_logit: Tensor::zeros(vec![1]),
    };
    let l = model.loss(&mut tape, &out, 0.0, &mask).unwrap();
    let expect = 2.0 * std::f32::consts::LN_2;
    assert!((l.item().unwrap() - expect).abs() < 1e-6);

    // Random case equals the sum of two independent BCE oracles.
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let logits = Tensor::from_fn(vec![1, 4, 4], |_| rng.gen_range(-2.0..2.0));
    let cls = Tensor::new(vec![1], vec![rng.gen_range(-2.0..2.0)]).unwrap();
    let gt = Tensor::from_fn(vec![4, 4], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
    let out = ModelOutput {
        mask_logits: logits.clone(),
        cls_logit: cls.clone(),
    };
    let l = model.loss(&mut tape, &out, 1.0, &gt).unwrap().item().unwrap() as f64;
    let bce = |z: f64, t: f64| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
    let mut seg = 0.0f64;
    for i in 0..16 {
        seg += bce(logits.data()[i] as f64, gt.data()[i] as f64);
    }
    seg /= 16.0;
    let cls_l = bce(cls.data()[0] as f64, 1.0);
    assert!((l - (seg + cls_l)).abs() < 1e-6);
}

#[test]
fn loss_rejects_mismatched_mask() {
    let model = NfaVit::new(ModelConfig::minimal(), 22).unwrap();
    let mut tape = Tape::new();
    let out = ModelOutput {
        mask_logits: Tensor::zeros(vec![1, 4, 4]),
        cls_logit: Tensor::zeros(vec![1]),
    };
    let bad_mask = Tensor::zeros(vec![8, 8]);
    assert!(model.loss(&mut tape, &out, 0.0, &bad_mask).is_err());
}

#[test]
fn gamma_gradients_flow() {
    let model = NfaVit::new(ModelConfig::minimal(), 23).unwrap();
    let img = rand_image(32, 32, 24);
    let mask = Tensor::from_fn(vec![32, 32], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
    let mut tape = Tape::new();
    let mut binding = Binding::new(&model.params);
    let loss = {
        let mut fw = fwd_ctx(&mut tape, &mut binding, &model.params);
        let out = model.forward_on(&mut fw, &img).unwrap();
        model.loss(fw.tape, &out, 1.0, &mask).unwrap()
    };
    let mut grads = tape.backward(&loss).unwrap();
    let buf = binding.export(&model.params, &mut grads);
    for i in 0..4 {
        let name = format!("decoder.gamma{}", i + 1);
        let (idx, _) = model
            .params
            .iter()
            .enumerate()
            .find(|(_, p)| p.name == name)
            .unwrap();
        assert!(buf.grads[idx][0] != 0.0, "{name} gradient is zero");
    }
}

#[test]
fn noise_branch_parameters_get_zero_gradients_under_masking() {
    // The mask hand-off is gradient-opaque, so in the full configuration
    // the noise branch is unreachable from the loss.
    let model = NfaVit::new(ModelConfig::minimal(), 25).unwrap();
    let img = rand_image(32, 32, 26);
    let mask = Tensor::from_fn(vec![32, 32], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let mut tape = Tape::new();
    let mut binding = Binding::new(&model.params);
    let loss = {
        let mut fw = fwd_ctx(&mut tape, &mut binding, &model.params);
        let out = model.forward_on(&mut fw, &img).unwrap();
        model.loss(fw.tape, &out, 1.0, &mask).unwrap()
    };
    let mut grads = tape.backward(&loss).unwrap();
    let buf = binding.export(&model.params, &mut grads);
    for (i, p) in model.params.iter().enumerate() {
        if p.name.starts_with("noise_enc.") {
            assert!(
                buf.grads[i].iter().all(|&g| g == 0.0),
                "{} should be unreachable",
                p.name
            );
        }
    }
}

#[test]
fn fusion_variant_gives_noise_branch_gradients() {
    let cfg = ModelConfig::minimal().with_ablation(Ablation::Noise);
    let model = NfaVit::new(cfg, 27).unwrap();
    let img = rand_image(32, 32, 28);
    let mask = Tensor::from_fn(vec![32, 32], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let mut tape = Tape::new();
    let mut binding = Binding::new(&model.params);
    let loss = {
        let mut fw = fwd_ctx(&mut tape, &mut binding, &model.params);
        let out = model.forward_on(&mut fw, &img).unwrap();
        model.loss(fw.tape, &out, 1.0, &mask).unwrap()
    };
    let mut grads = tape.backward(&loss).unwrap();
    let buf = binding.export(&model.params, &mut grads);
    let total: f32 = model
        .params
        .iter()
        .enumerate()
        .filter(|(_, p)| p.name.starts_with("noise_enc."))
        .map(|(i, _)| buf.grads[i].iter().map(|g| g.abs()).sum::<f32>())
        .sum();
    assert!(total > 0.0, "fusion must train the noise branch");
}

#[test]
fn checkpoint_round_trip_reproduces_outputs_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let model = NfaVit::new(ModelConfig::minimal(), 29).unwrap();
    let img = rand_image(32, 32, 30);
    let (before, _, _) = model.forward(&img).unwrap();
    save_checkpoint(&model, dir.path()).unwrap();
    let loaded = load_checkpoint(dir.path()).unwrap();
    assert_eq!(loaded.config, model.config);
    let (after, _, _) = loaded.forward(&img).unwrap();
    assert!(before
        .mask_logits
        .detach()
        .bitwise_eq(&after.mask_logits.detach()));
    assert_eq!(
        before.cls_logit.data()[0].to_bits(),
        after.cls_logit.data()[0].to_bits()
    );
}

#[test]
fn ablation_flags_control_components() {
    assert!(
        NfaVit::new(ModelConfig::minimal().with_ablation(Ablation::None), 31)
            .unwrap()
            .params
            .iter()
            .all(|p| !p.name.starts_with("noise_enc."))
    );
    let full = NfaVit::new(ModelConfig::minimal(), 32).unwrap();
    assert!(full.params.iter().any(|p| p.name.starts_with("noise_enc.")));
    assert!(full.params.iter().any(|p| p.name.starts_with("decoder.gamma")));
    let nowd = NfaVit::new(ModelConfig::minimal().with_ablation(Ablation::NoiseNaa), 33).unwrap();
    assert!(!nowd.params.iter().any(|p| p.name.starts_with("decoder.gamma")));
    // NAA without noise is rejected.
    let mut bad = ModelConfig::minimal();
    bad.use_noise = false;
    bad.use_naa = true;
    assert!(NfaVit::new(bad, 34).is_err());
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let (mut model, image, label, mask) = selfcheck::model_gradient_scenario().unwrap();
    let failures = selfcheck::model_gradient_failures(
        &mut model,
        &image,
        label,
        &mask,
        selfcheck::MODEL_FD_STEP,
        None,
    )
    .unwrap();
    assert!(
        failures.is_empty(),
        "{} failures; first five: {:?}",
        failures.len(),
        &failures[..failures.len().min(5)]
    );
}

#[test]
fn train_with_zero_lr_keeps_parameters() {
    use crate::synth::{generate_sample, CorpusSpec};
    let spec = CorpusSpec {
        train: 4,
        val: 2,
        test: 1,
        image_size: 32,
        ..CorpusSpec::default()
    };
    let train_set: Vec<_> = (0..4).map(|i| generate_sample(&spec, i, i).unwrap()).collect();
    let val_set: Vec<_> = (0..2)
        .map(|i| generate_sample(&spec, i, 100 + i).unwrap())
        .collect();
    let mut model = NfaVit::new(ModelConfig::minimal(), 35).unwrap();
    let before: Vec<Vec<f32>> = model.params.iter().map(|p| p.value.data().to_vec()).collect();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 2,
        lr: 0.0,
        weight_decay: 0.0,
        warmup_frac: 0.0,
        seed: 1,
        threads: 1,
    };
    train(&mut model, &train_set, &val_set, &cfg, None).unwrap();
    for (p, b) in model.params.iter().zip(&before) {
        assert_eq!(p.value.data(), b.as_slice(), "{} changed", p.name);
    }
}

#[test]
fn overfit_single_batch_loss_decreases() {
    use crate::synth::{generate_sample, CorpusSpec};
    let spec = CorpusSpec {
        train: 4,
        val: 2,
        test: 1,
        image_size: 32,
        ..CorpusSpec::default()
    };
    let batch: Vec<_> = (0..4).map(|i| generate_sample(&spec, i, i).unwrap()).collect();
    let mut deltas = Vec::new();
    for seed in 0..3u64 {
        let mut model = NfaVit::new(ModelConfig::minimal(), 400 + seed).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 4,
            lr: 1e-3,
            weight_decay: 0.0,
            warmup_frac: 0.0,
            seed,
            threads: 1,
        };
        let report = train(&mut model, &batch, &batch, &cfg, None).unwrap();
        let first = report.epochs.first().unwrap().train_loss;
        let last = report.epochs.last().unwrap().train_loss;
        deltas.push(last - first);
    }
    deltas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = deltas[1];
    assert!(median <= 0.0, "median loss delta {median} over 3 seeds");
}

#[test]
fn default_training_config_matches_published_recipe() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.lr, 5e-3);
    assert_eq!(cfg.weight_decay, 1e-6);
    assert_eq!(cfg.epochs, 30);
    assert_eq!(ModelConfig::toy_default().top_k_ratio, 0.25);
}
