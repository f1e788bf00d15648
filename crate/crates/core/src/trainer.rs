//! Two-stage training orchestration.
//!
//! Each step samples a batch with replacement from a counter-based rng
//! keyed on `(seed, step)`, augments and plans masks per sample with rngs
//! keyed on `(seed, step, slot)`, runs forward/backward, and applies one
//! AdamW update. Because nothing carries hidden rng state between steps,
//! a run can be checkpointed and resumed bit-exactly.

use crate::config::{Stage, TrainConfig};
use crate::data::{DatasetManifest, ImageSample};
use crate::error::Error;
use crate::model::MvltModel;
use crate::objectives::{
    finetune_ce_nodes, finetune_loss_from_ce, mixed_batch_loss, GradVec, LabeledSample,
    LossToggles, LossWeights, MixedBatch, PretrainLossReport, UnlabeledSample,
};
use crate::optim::{adamw_step, clip_global_norm, lr_at, AdamWState};
use crate::rng::{self, tag};
use crate::tensor::Tape;
use crate::text::{encode_label, sample_text_mask};
use crate::vision::{patchify, random_resized_crop, rotate_small, sample_patch_mask};
use crate::Result;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Rotation bound for fine-tuning augmentation, degrees.
const FINETUNE_ROTATION_DEGREES: f64 = 10.0;
/// Crop parameters for pretraining augmentation.
const CROP_SCALE: (f64, f64) = (0.85, 1.0);
const CROP_ASPECT: (f64, f64) = (3.5, 5.0);

/// One JSON log line. Pretraining lines carry the loss-term fields
/// (`null` for terms the run disables); fine-tuning lines additionally
/// carry the per-iteration CE means and leave the pretraining terms null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogLine {
    pub step: u64,
    #[serde(flatten)]
    pub report: PretrainLossReport,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ce_per_iter: Option<Vec<f64>>,
}

/// In-memory training data; images are loaded once up front.
#[derive(Debug, Clone, Default)]
pub struct PretrainData {
    pub labeled: Vec<ImageSample>,
    pub unlabeled: Vec<ImageSample>,
}

impl PretrainData {
    pub fn load(
        labeled: &DatasetManifest,
        unlabeled: Option<&DatasetManifest>,
    ) -> Result<PretrainData> {
        if labeled.is_empty() {
            return Err(Error::Data("labeled manifest is empty".into()));
        }
        if !labeled.labeled {
            return Err(Error::Data(
                "pretraining needs a labeled manifest for the supervised batch".into(),
            ));
        }
        let mut data = PretrainData::default();
        for i in 0..labeled.len() {
            data.labeled.push(labeled.load_image(i)?);
        }
        if let Some(ur) = unlabeled {
            // Label-stripped on principle: whatever the source manifest
            // carried, these samples feed only the reconstruction loss.
            let ur = ur.strip_labels();
            for i in 0..ur.len() {
                data.unlabeled.push(ur.load_image(i)?);
            }
        }
        Ok(data)
    }
}

/// Optional periodic checkpointing during a run.
#[derive(Debug, Clone, Copy)]
pub struct CkptSink<'a> {
    pub dir: &'a Path,
    pub every: u64,
}

fn labeled_sample(
    model: &MvltModel,
    cfg: &TrainConfig,
    image: &ImageSample,
    seed: u64,
    step: u64,
    slot: u64,
) -> Result<LabeledSample> {
    let mc = &model.config;
    let mut r = rng::stream(seed, &[tag::SAMPLE, step, slot]);
    let image = if cfg.augment {
        random_resized_crop(image, &mut r, CROP_SCALE, CROP_ASPECT)
    } else {
        image.clone()
    };
    let patches = patchify(&image, mc.p)?;
    let patch_plan = sample_patch_mask(mc.num_patches(), mc.patch_mask_ratio, &mut r);
    let word = image
        .label
        .as_deref()
        .ok_or_else(|| Error::Data("labeled sample without label".into()))?;
    let targets = encode_label(word, mc.l)?;
    let text_plan_explicit =
        sample_text_mask(targets.word_len, mc.text_mask_ratio_explicit, mc.l, &mut r);
    Ok(LabeledSample {
        patches,
        targets,
        patch_plan,
        text_plan_explicit,
    })
}

fn unlabeled_sample(
    model: &MvltModel,
    cfg: &TrainConfig,
    image: &ImageSample,
    seed: u64,
    step: u64,
    slot: u64,
) -> Result<UnlabeledSample> {
    let mc = &model.config;
    let mut r = rng::stream(seed, &[tag::SAMPLE, step, slot]);
    let image = if cfg.augment {
        random_resized_crop(image, &mut r, CROP_SCALE, CROP_ASPECT)
    } else {
        image.clone()
    };
    let patches = patchify(&image, mc.p)?;
    let patch_plan = sample_patch_mask(mc.num_patches(), mc.patch_mask_ratio, &mut r);
    Ok(UnlabeledSample {
        patches,
        patch_plan,
    })
}

/// Draw the step's mixed batch (indices with replacement, then per-slot
/// augmentation and mask plans).
pub fn draw_pretrain_batch(
    model: &MvltModel,
    data: &PretrainData,
    cfg: &TrainConfig,
    step: u64,
) -> Result<MixedBatch> {
    let mut batch_rng = rng::stream(cfg.seed, &[tag::BATCH, step]);
    let labeled_idx: Vec<usize> = (0..cfg.batch_labeled)
        .map(|_| batch_rng.gen_range(0..data.labeled.len()))
        .collect();
    let unlabeled_idx: Vec<usize> = (0..cfg.batch_unlabeled)
        .map(|_| batch_rng.gen_range(0..data.unlabeled.len()))
        .collect();

    let mut batch = MixedBatch::default();
    for (slot, &idx) in labeled_idx.iter().enumerate() {
        batch.labeled.push(labeled_sample(
            model,
            cfg,
            &data.labeled[idx],
            cfg.seed,
            step,
            slot as u64,
        )?);
    }
    for (j, &idx) in unlabeled_idx.iter().enumerate() {
        let slot = (cfg.batch_labeled + j) as u64;
        batch.unlabeled.push(unlabeled_sample(
            model,
            cfg,
            &data.unlabeled[idx],
            cfg.seed,
            step,
            slot,
        )?);
    }
    Ok(batch)
}

fn apply_update(
    model: &mut MvltModel,
    opt: &mut AdamWState,
    cfg: &TrainConfig,
    grads: GradVec,
    lr: f64,
) {
    model.store.accumulate_grads(&grads);
    model.store.ensure_grads();
    if let Some(max_norm) = cfg.grad_clip {
        clip_global_norm(&mut model.store, max_norm);
    }
    let sched = cfg.schedule();
    adamw_step(&mut model.store, opt, lr, &sched, model.config.enc_depth);
}

fn should_log(cfg: &TrainConfig, step: u64, end: u64) -> bool {
    let every = cfg.log_every.max(1);
    step % every == 0 || step + 1 == end
}

fn maybe_checkpoint(
    model: &MvltModel,
    opt: &AdamWState,
    cfg: &TrainConfig,
    ckpt: Option<CkptSink>,
    step: u64,
) -> Result<()> {
    if let Some(sink) = ckpt {
        if sink.every > 0 && (step + 1) % sink.every == 0 {
            let path = sink.dir.join(format!("step{:06}.ckpt", step + 1));
            crate::checkpoint::save_checkpoint(model, Some(opt), cfg.seed, step + 1, &path)?;
        }
    }
    Ok(())
}

/// Pretraining steps `start..end` (both within `cfg.steps`).
///
/// Each step: sample batch, crop-augment, draw patch plans and the two
/// text plans, run both decoding views, backward, AdamW with the cosine
/// schedule. No gradient clipping unless configured.
pub fn pretrain(
    model: &mut MvltModel,
    opt: &mut AdamWState,
    data: &PretrainData,
    cfg: &TrainConfig,
    start: u64,
    end: u64,
    ckpt: Option<CkptSink>,
) -> Result<Vec<TrainLogLine>> {
    cfg.validate(Stage::Pretrain)?;
    if data.labeled.is_empty() {
        return Err(Error::Data("no labeled samples to pretrain on".into()));
    }
    if cfg.batch_unlabeled > 0 && data.unlabeled.is_empty() {
        return Err(Error::Data(
            "batch_unlabeled > 0 but no unlabeled dataset was provided".into(),
        ));
    }
    let weights = LossWeights::from(&model.config);
    let toggles = LossToggles::from(cfg);
    let mut log = Vec::new();
    for step in start..end {
        let lr = lr_at(step, &cfg.schedule());
        let batch = draw_pretrain_batch(model, data, cfg, step)?;
        let (report, grads) = mixed_batch_loss(model, &batch, &weights, &toggles)?;
        apply_update(model, opt, cfg, grads, lr);
        if should_log(cfg, step, end) {
            log.push(TrainLogLine {
                step,
                report: report.clone(),
                lr,
                ce_per_iter: None,
            });
        }
        maybe_checkpoint(model, opt, cfg, ckpt, step)?;
    }
    Ok(log)
}

/// Fine-tuning steps `start..end`: full-image encode, iterative correction
/// with `K` (0 when the iteration toggle is off), CE objective over the
/// iterations, global-norm clip, AdamW with layer-wise lr multipliers.
pub fn finetune(
    model: &mut MvltModel,
    opt: &mut AdamWState,
    data: &[ImageSample],
    cfg: &TrainConfig,
    start: u64,
    end: u64,
    ckpt: Option<CkptSink>,
) -> Result<Vec<TrainLogLine>> {
    cfg.validate(Stage::Finetune)?;
    if data.is_empty() {
        return Err(Error::Data("no labeled samples to fine-tune on".into()));
    }
    let k = cfg.effective_k();
    let mut log = Vec::new();
    for step in start..end {
        let lr = lr_at(step, &cfg.schedule());
        let mut batch_rng = rng::stream(cfg.seed, &[tag::BATCH, step]);
        let idx: Vec<usize> = (0..cfg.batch_labeled)
            .map(|_| batch_rng.gen_range(0..data.len()))
            .collect();

        struct SampleResult {
            ce: Vec<f64>,
            total: f64,
            grads: GradVec,
        }
        let n1 = idx.len() as f64;
        let results: Vec<Result<SampleResult>> = idx
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| {
                let mut r = rng::stream(cfg.seed, &[tag::SAMPLE, step, slot as u64]);
                let image = if cfg.augment {
                    rotate_small(&data[i], &mut r, FINETUNE_ROTATION_DEGREES)
                } else {
                    data[i].clone()
                };
                let word = image
                    .label
                    .as_deref()
                    .ok_or_else(|| Error::Data("fine-tuning sample without label".into()))?;
                let targets = encode_label(word, model.config.l)?;
                let patches = patchify(&image, model.config.p)?;
                let mut tape = Tape::new(&model.store);
                let encoded = model.encode_full(&mut tape, &patches);
                let logits = model.iterative_correct(&mut tape, encoded, k);
                let ce_nodes = finetune_ce_nodes(&mut tape, &logits, &targets.indices);
                let loss = finetune_loss_from_ce(&mut tape, &ce_nodes, cfg.finetune_loss_variant)?;
                let ce = ce_nodes.iter().map(|&n| tape.value(n)[0]).collect();
                let total = tape.value(loss)[0];
                let contribution = tape.scale(loss, 1.0 / n1);
                tape.backward(contribution);
                Ok(SampleResult {
                    ce,
                    total,
                    grads: tape.into_param_grads(),
                })
            })
            .collect();

        let mut grads: GradVec = vec![None; model.store.len()];
        let mut ce_sum = vec![0.0; k + 1];
        let mut total_sum = 0.0;
        for r in results {
            let r = r?;
            for (slot, g) in grads.iter_mut().zip(r.grads) {
                match (slot.as_mut(), g) {
                    (Some(acc), Some(g)) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    (None, Some(g)) => *slot = Some(g),
                    _ => {}
                }
            }
            for (s, c) in ce_sum.iter_mut().zip(&r.ce) {
                *s += c;
            }
            total_sum += r.total;
        }
        apply_update(model, opt, cfg, grads, lr);

        if should_log(cfg, step, end) {
            let report = PretrainLossReport {
                l_v1: None,
                l_t1: None,
                l_v2: None,
                l_t2: None,
                l_ur: None,
                total: total_sum / n1,
            };
            log.push(TrainLogLine {
                step,
                report,
                lr,
                ce_per_iter: Some(ce_sum.iter().map(|s| s / n1).collect()),
            });
        }
        maybe_checkpoint(model, opt, cfg, ckpt, step)?;
    }
    Ok(log)
}

/// Load every image of a labeled manifest (fine-tuning keeps labels).
pub fn load_labeled_images(manifest: &DatasetManifest) -> Result<Vec<ImageSample>> {
    if !manifest.labeled {
        return Err(Error::Data(
            "fine-tuning needs a labeled manifest".into(),
        ));
    }
    (0..manifest.len()).map(|i| manifest.load_image(i)).collect()
}
