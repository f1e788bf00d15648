//! Finite-difference verification of the full pretraining gradient.
//!
//! Builds a tiny model, draws one fixed random batch with all four loss
//! terms active, and compares every analytic parameter gradient against a
//! central difference with h = 1e-5 in 64-bit arithmetic. Value and
//! gradient come from the same graph builder, so the check exercises the
//! whole path: masked encoding, both decoding views, and the weighted
//! loss combination.

use crate::config::ModelConfig;
use crate::model::MvltModel;
use crate::objectives::{
    pretrain_batch_node, LabeledSample, LossToggles, LossWeights, MixedBatch,
};
use crate::rng::{self, tag};
use crate::tensor::Tape;
use crate::text::{sample_text_mask, CharTargets};
use crate::vision::{patchify, sample_patch_mask};
use crate::Result;
use rand::Rng;
use serde::Serialize;

const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    /// Max over parameters of ‖analytic − numeric‖ / max(1e-8, ‖numeric‖).
    pub max_rel_err: f64,
    pub worst_param: String,
    /// Element with the largest absolute disagreement inside that
    /// parameter, for diagnostics.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub scalars_checked: usize,
    pub elapsed_secs: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Tolerance on the per-parameter gradient-vector relative error
/// `‖analytic − numeric‖₂ / max(1e-8, ‖numeric‖₂)`.
///
/// The comparison is per parameter tensor rather than per scalar element:
/// an element whose true gradient is ~1e-9 cannot beat a 1e-12 absolute
/// bar through a central difference at h = 1e-5 (truncation error alone is
/// ~h² ≈ 1e-10), while the vector form stays far below the tolerance
/// unless a backward rule is actually wrong.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn fixed_batch(model: &MvltModel, seed: u64, samples: usize) -> MixedBatch {
    let cfg = &model.config;
    let mut batch = MixedBatch::default();
    for s in 0..samples {
        let mut r = rng::stream(seed, &[tag::GRADCHECK, s as u64]);
        let image = crate::data::ImageSample {
            pixels: (0..cfg.h * cfg.w * cfg.c).map(|_| r.gen_range(0.0..1.0)).collect(),
            h: cfg.h,
            w: cfg.w,
            c: cfg.c,
            label: None,
            sample_id: String::new(),
        };
        let patches = patchify(&image, cfg.p).expect("config validated");
        let patch_plan = sample_patch_mask(cfg.num_patches(), cfg.patch_mask_ratio, &mut r);
        // Random class targets directly: the micro config's class count
        // is smaller than the real charset.
        let word_len = cfg.l - 1;
        let eos = cfg.m - 1;
        let mut indices: Vec<usize> = (0..word_len).map(|_| r.gen_range(0..eos)).collect();
        indices.resize(cfg.l, eos);
        let targets = CharTargets { indices, word_len };
        let text_plan_explicit =
            sample_text_mask(word_len, cfg.text_mask_ratio_explicit, cfg.l, &mut r);
        batch.labeled.push(LabeledSample {
            patches,
            targets,
            patch_plan,
            text_plan_explicit,
        });
    }
    batch
}

/// Run the check. All four loss terms are active simultaneously.
pub fn gradcheck(config: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    let start = std::time::Instant::now();
    let mut model = MvltModel::new(config.clone(), seed)?;
    let batch = fixed_batch(&model, seed, 2);
    let weights = LossWeights::from(&model.config);
    let toggles = LossToggles::all();

    let analytic: Vec<Option<Vec<f64>>> = {
        let mut tape = Tape::new(&model.store);
        let loss = pretrain_batch_node(&mut tape, &model, &batch, &weights, &toggles)?;
        tape.backward(loss);
        tape.into_param_grads()
    };

    let mut worst = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        scalars_checked: 0,
        elapsed_secs: 0.0,
        tolerance: GRADCHECK_TOLERANCE,
        pass: true,
    };

    let names: Vec<String> = model.store.iter().map(|(_, p)| p.name.clone()).collect();
    let param_sizes: Vec<usize> = model
        .store
        .iter()
        .map(|(_, p)| p.tensor.data.len())
        .collect();

    // Smallest derivative change a central difference can resolve: the
    // loss itself is quantized to f64, so each difference carries up to
    // ~ulp(loss)/(2h) of noise per element regardless of the gradient's
    // size. Parameters whose entire disagreement sits below this floor
    // are unmeasurably small, not wrong.
    let loss_scale = batch_loss_value(&model, &batch, &weights, &toggles)?.abs();
    let elem_floor = 8.0 * (loss_scale * f64::EPSILON) / (2.0 * FD_STEP);

    for pid in 0..param_sizes.len() {
        let mut diff_sq = 0.0;
        let mut numeric_sq = 0.0;
        let mut elem_worst = (0.0f64, 0usize, 0.0f64, 0.0f64);
        for i in 0..param_sizes[pid] {
            let orig = model.store.get(pid).tensor.data[i];
            model.store.get_mut(pid).tensor.data[i] = orig + FD_STEP;
            let plus = batch_loss_value(&model, &batch, &weights, &toggles)?;
            model.store.get_mut(pid).tensor.data[i] = orig - FD_STEP;
            let minus = batch_loss_value(&model, &batch, &weights, &toggles)?;
            model.store.get_mut(pid).tensor.data[i] = orig;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[pid].as_ref().map_or(0.0, |g| g[i]);
            diff_sq += (a - numeric) * (a - numeric);
            numeric_sq += numeric * numeric;
            if (a - numeric).abs() > elem_worst.0 {
                elem_worst = ((a - numeric).abs(), i, a, numeric);
            }
            worst.scalars_checked += 1;
        }
        let noise_floor = (param_sizes[pid] as f64).sqrt() * elem_floor;
        if diff_sq.sqrt() <= noise_floor {
            continue;
        }
        let rel = diff_sq.sqrt() / numeric_sq.sqrt().max(1e-8);
        if rel > worst.max_rel_err {
            worst.max_rel_err = rel;
            worst.worst_param = names[pid].clone();
            worst.worst_index = elem_worst.1;
            worst.analytic = elem_worst.2;
            worst.numeric = elem_worst.3;
        }
    }
    worst.elapsed_secs = start.elapsed().as_secs_f64();
    worst.pass = worst.max_rel_err <= GRADCHECK_TOLERANCE;
    Ok(worst)
}

fn batch_loss_value(
    model: &MvltModel,
    batch: &MixedBatch,
    weights: &LossWeights,
    toggles: &LossToggles,
) -> Result<f64> {
    let mut tape = Tape::new(&model.store);
    let loss = pretrain_batch_node(&mut tape, model, batch, weights, toggles)?;
    Ok(tape.value(loss)[0])
}
