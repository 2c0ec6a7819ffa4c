//! Seeded training loop: Adam with warmup/cosine schedule, per-epoch
//! validation metrics, best-validation-IoU checkpointing.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::NfaVit;
use crate::error::{Error, Result};
use crate::metrics::{compute_summary, predict_records};
use crate::synth::ForgerySample;
use crate::tensor::{lr_schedule, AdamState, Binding, Fwd, GradBuffer, Tensor};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    /// Fraction of total steps spent on the linear warmup ramp.
    pub warmup_frac: f64,
    pub seed: u64,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            lr: 5e-3,
            weight_decay: 1e-6,
            warmup_frac: 0.05,
            seed: 42,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_iou: f64,
    pub val_f1: f64,
    pub val_auc: f64,
    pub val_gen_r50: f64,
    pub val_real_r50: f64,
}

pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_iou: f64,
}

impl TrainReport {
    /// Per-epoch CSV with the fixed log header.
    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("epoch,train_loss,val_iou,val_f1,val_auc,val_gen_r50,val_real_r50\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                e.epoch, e.train_loss, e.val_iou, e.val_f1, e.val_auc, e.val_gen_r50, e.val_real_r50
            ));
        }
        s
    }
}

fn sample_grads(model: &NfaVit, sample: &ForgerySample) -> Result<(f64, GradBuffer)> {
    let mut tape = crate::tensor::Tape::new();
    let mut binding = Binding::new(&model.params);
    let loss = {
        let mut fw = Fwd {
            tape: &mut tape,
            params: &model.params,
            binding: &mut binding,
        };
        let out = model.forward_on(&mut fw, &sample.image)?;
        model.loss(fw.tape, &out, sample.label as f32, &sample.mask)?
    };
    let loss_val = loss.item()? as f64;
    let mut grads = tape.backward(&loss)?;
    Ok((loss_val, binding.export(&model.params, &mut grads)))
}

/// Train in place. The model is left at the best-validation-IoU parameters;
/// when `checkpoint_dir` is given the best checkpoint is saved there too.
pub fn train(
    model: &mut NfaVit,
    train_set: &[ForgerySample],
    val_set: &[ForgerySample],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Value("train: empty train or val split".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("train: batch_size and epochs must be >= 1".into()));
    }
    let batches_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches_per_epoch) as u64;
    let warmup_steps = ((total_steps as f64) * cfg.warmup_frac).floor() as u64;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("train: cannot build thread pool: {e}")))?;

    let mut adam = AdamState::new(&model.params, cfg.lr, cfg.weight_decay);
    let mut step = 0u64;
    let mut best_val_iou = f64::MIN;
    let mut best_epoch = 0usize;
    let mut best_params: Vec<Tensor> = model.params.iter().map(|p| p.value.clone()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let lr_now = lr_schedule(step, total_steps, warmup_steps, cfg.lr)?;
            // One tape per sample; results are reduced in sample order so the
            // outcome is identical for any thread count.
            let results: Vec<(f64, GradBuffer)> = pool.install(|| {
                chunk
                    .par_iter()
                    .map(|&i| sample_grads(model, &train_set[i]))
                    .collect::<Result<Vec<_>>>()
            })?;
            let mut batch = GradBuffer::zeros_like(&model.params);
            let scale = 1.0 / chunk.len() as f32;
            for (loss, g) in &results {
                epoch_loss += loss;
                batch.add_scaled(g, scale);
            }
            adam.apply(&mut model.params, &batch, lr_now)?;
            step += 1;
        }
        let train_loss = epoch_loss / train_set.len() as f64;

        let records = predict_records(model, val_set, &pool)?;
        let val = compute_summary(&records);
        logs.push(EpochLog {
            epoch,
            train_loss,
            val_iou: val.mean_iou,
            val_f1: val.image_f1,
            val_auc: val.auc,
            val_gen_r50: val.gen_r50,
            val_real_r50: val.real_r50,
        });
        if val.mean_iou > best_val_iou {
            best_val_iou = val.mean_iou;
            best_epoch = epoch;
            best_params = model.params.iter().map(|p| p.value.clone()).collect();
        }
    }

    for (p, best) in model.params.iter_mut().zip(best_params) {
        p.value = best;
    }
    if let Some(dir) = checkpoint_dir {
        super::save_checkpoint(model, dir)?;
    }
    Ok(TrainReport {
        epochs: logs,
        best_epoch,
        best_val_iou,
    })
}
