//! The training loop.
//!
//! Each step samples a batch of pairs (single-threaded, so the sample
//! stream depends only on the seed), evaluates per-sample gradients in
//! parallel against a shared read-only parameter snapshot, then reduces
//! gradients and batch-norm statistics in sample order and applies one SGD
//! update. All reductions are order-fixed, so results do not depend on the
//! worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sample::{sample_pair, TrainPair};
use super::{loss, lr_schedule, sgd_step, SgdState, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{derive_seed, Fwd, Model, ModelConfig, ModelParams};
use crate::sim::LoadedSequence;
use crate::tensor::BnStats;

const STREAM_SAMPLER: u64 = 1;
const STREAM_DROPOUT: u64 = 2;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub giou_term: f64,
    pub l1_term: f64,
}

pub struct TrainResult {
    pub params: ModelParams<f64>,
    pub log: Vec<TrainLogRecord>,
}

struct SampleOut {
    grads: Vec<f64>,
    bn: Vec<(String, BnStats<f64>)>,
    loss: f64,
    giou_term: f64,
    l1_term: f64,
}

fn run_sample(
    params: &ModelParams<f64>,
    pair: &TrainPair,
    dropout_seed: u64,
    cfg: &TrainConfig,
) -> Result<SampleOut> {
    let model = Model::bind(params, true)?;
    let mut fwd = Fwd::train(dropout_seed);
    let out = model.forward_pair(&pair.template, &pair.search, &mut fwd)?;
    let terms = loss(&out.bbox, &pair.gt_crop, &cfg.loss)?;
    let value = terms.total.item();
    if !value.is_finite() {
        return Err(Error::Train("non-finite loss".into()));
    }
    terms.total.backward().map_err(Error::Tensor)?;
    Ok(SampleOut {
        grads: model.grad_flat(),
        bn: fwd.bn_updates,
        loss: value,
        giou_term: terms.giou_term,
        l1_term: terms.l1_term,
    })
}

/// Train from scratch on the given sequences. `on_epoch` fires after every
/// epoch with the current parameters (checkpointing hook).
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    sequences: &[LoadedSequence],
    mut on_epoch: impl FnMut(usize, &ModelParams<f64>) -> Result<()>,
) -> Result<TrainResult> {
    model_cfg.validate()?;
    cfg.validate()?;
    let usable: Vec<LoadedSequence> = sequences
        .iter()
        .filter(|s| s.inputs.len() >= 2)
        .cloned()
        .collect();
    if usable.is_empty() {
        return Err(Error::Train(
            "dataset has no sequence with at least 2 frames".into(),
        ));
    }
    for s in &usable {
        let ch = s.inputs.first().map(|v| v.channels).unwrap_or(0);
        if ch != model_cfg.input_channels {
            return Err(Error::Train(format!(
                "sequence {} has {ch} input channels, model expects {}",
                s.name, model_cfg.input_channels
            )));
        }
    }

    let mut params = ModelParams::<f64>::init(model_cfg, cfg.seed)?;
    let mut sgd = SgdState::new(&params);
    let mut sampler = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SAMPLER, 0));
    let mut log = Vec::with_capacity(cfg.total_steps());

    let steps_per_epoch = cfg.steps_per_epoch();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        for _ in 0..steps_per_epoch {
            let lr = lr_schedule(step, cfg);
            let batch: Vec<TrainPair> = (0..cfg.batch_size)
                .map(|_| sample_pair(&usable, model_cfg, cfg, &mut sampler))
                .collect::<Result<_>>()?;

            let outs: Vec<SampleOut> = batch
                .par_iter()
                .enumerate()
                .map(|(i, pair)| {
                    let seed = derive_seed(
                        cfg.seed,
                        STREAM_DROPOUT,
                        (step * cfg.batch_size + i) as u64,
                    );
                    run_sample(&params, pair, seed, cfg)
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::Train(format!("step {step}: {e}")))?;

            let inv_b = 1.0 / cfg.batch_size as f64;
            let mut grads = vec![0.0f64; params.weight_len()];
            let mut mean_loss = 0.0;
            let mut mean_giou = 0.0;
            let mut mean_l1 = 0.0;
            for out in &outs {
                for (g, s) in grads.iter_mut().zip(&out.grads) {
                    *g += s * inv_b;
                }
                mean_loss += out.loss * inv_b;
                mean_giou += out.giou_term * inv_b;
                mean_l1 += out.l1_term * inv_b;
            }
            if !mean_loss.is_finite() {
                return Err(Error::Train(format!("non-finite loss at step {step}")));
            }
            // running batch-norm state advances once per sample, in order
            for out in &outs {
                for (name, stats) in &out.bn {
                    apply_bn_update(&mut params, name, stats)?;
                }
            }
            sgd_step(
                &mut params,
                &grads,
                &mut sgd,
                lr,
                cfg.momentum,
                cfg.weight_decay,
                cfg.clip_norm,
            )
            .map_err(|e| Error::Train(format!("step {step}: {e}")))?;

            log.push(TrainLogRecord {
                step,
                epoch,
                lr,
                loss: mean_loss,
                giou_term: mean_giou,
                l1_term: mean_l1,
            });
            step += 1;
        }
        on_epoch(epoch, &params)?;
    }
    Ok(TrainResult { params, log })
}

fn apply_bn_update(
    params: &mut ModelParams<f64>,
    bn_name: &str,
    stats: &BnStats<f64>,
) -> Result<()> {
    let keep = 1.0 - BN_MOMENTUM;
    let mean_name = format!("{bn_name}.running_mean");
    let var_name = format!("{bn_name}.running_var");
    let entry = params
        .entry_mut(&mean_name)
        .ok_or_else(|| Error::Train(format!("missing buffer {mean_name}")))?;
    for (r, &b) in entry.data.iter_mut().zip(&stats.mean) {
        *r = keep * *r + BN_MOMENTUM * b;
    }
    let entry = params
        .entry_mut(&var_name)
        .ok_or_else(|| Error::Train(format!("missing buffer {var_name}")))?;
    for (r, &b) in entry.data.iter_mut().zip(&stats.var) {
        *r = keep * *r + BN_MOMENTUM * b;
    }
    Ok(())
}
