//! Loss computation: the four-term pretraining objective over the two
//! decoding views, the fine-tuning objective over correction iterations,
//! and the unlabeled reconstruction loss with mixed-batch composition.

use crate::config::{LossVariant, ModelConfig, TrainConfig};
use crate::error::Error;
use crate::model::{text_tokens, DecoderOutput, MvltModel, TextInput};
use crate::tensor::{NodeId, Tape};
use crate::text::{CharTargets, TextMaskPlan};
use crate::vision::{PatchMaskPlan, PatchSequence};
use crate::Result;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Trade-off weights on the four pretraining terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

impl From<&ModelConfig> for LossWeights {
    fn from(cfg: &ModelConfig) -> Self {
        LossWeights {
            alpha: cfg.alpha,
            beta: cfg.beta,
            gamma: cfg.gamma,
            epsilon: cfg.epsilon,
        }
    }
}

/// Which pretraining terms are active (the ablation switches).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossToggles {
    pub v1: bool,
    pub t1: bool,
    pub v2: bool,
    pub t2: bool,
}

impl LossToggles {
    pub fn all() -> Self {
        LossToggles {
            v1: true,
            t1: true,
            v2: true,
            t2: true,
        }
    }

    pub fn explicit_view_needed(&self) -> bool {
        self.v1 || self.t1
    }

    pub fn implicit_view_needed(&self) -> bool {
        self.v2 || self.t2
    }

    pub fn any_text(&self) -> bool {
        self.t1 || self.t2
    }
}

impl From<&TrainConfig> for LossToggles {
    fn from(cfg: &TrainConfig) -> Self {
        LossToggles {
            v1: cfg.enable_v1,
            t1: cfg.enable_t1,
            v2: cfg.enable_v2,
            t2: cfg.enable_t2,
        }
    }
}

/// Scalar values of the pretraining terms for one step; absent terms are
/// serialized as null. `total` combines the present terms exactly as
/// `α·L_v1 + β·L_v2 + γ·L_t1 + ε·L_t2 (+ L_ur)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainLossReport {
    #[serde(rename = "L_v1")]
    pub l_v1: Option<f64>,
    #[serde(rename = "L_t1")]
    pub l_t1: Option<f64>,
    #[serde(rename = "L_v2")]
    pub l_v2: Option<f64>,
    #[serde(rename = "L_t2")]
    pub l_t2: Option<f64>,
    #[serde(rename = "L_ur")]
    pub l_ur: Option<f64>,
    pub total: f64,
}

impl PretrainLossReport {
    pub fn combine(
        weights: &LossWeights,
        l_v1: Option<f64>,
        l_t1: Option<f64>,
        l_v2: Option<f64>,
        l_t2: Option<f64>,
        l_ur: Option<f64>,
    ) -> Self {
        let mut total = 0.0;
        if let Some(v) = l_v1 {
            total += weights.alpha * v;
        }
        if let Some(v) = l_v2 {
            total += weights.beta * v;
        }
        if let Some(v) = l_t1 {
            total += weights.gamma * v;
        }
        if let Some(v) = l_t2 {
            total += weights.epsilon * v;
        }
        if let Some(v) = l_ur {
            total += v;
        }
        PretrainLossReport {
            l_v1,
            l_t1,
            l_v2,
            l_t2,
            l_ur,
            total,
        }
    }
}

/// One labeled sample ready for the loss: patches plus target indices and
/// the two mask plans it was drawn with.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub patches: PatchSequence,
    pub targets: CharTargets,
    pub patch_plan: PatchMaskPlan,
    pub text_plan_explicit: TextMaskPlan,
}

/// An unlabeled sample: patches and a patch plan, nothing else — there is
/// no label slot, so no text loss can ever read one.
#[derive(Debug, Clone)]
pub struct UnlabeledSample {
    pub patches: PatchSequence,
    pub patch_plan: PatchMaskPlan,
}

/// A training batch of `N1` labeled and `N2` unlabeled samples.
#[derive(Debug, Clone, Default)]
pub struct MixedBatch {
    pub labeled: Vec<LabeledSample>,
    pub unlabeled: Vec<UnlabeledSample>,
}

/// Pixel values of the masked patches, in plan order.
pub fn masked_pixel_targets(patches: &PatchSequence, plan: &PatchMaskPlan) -> Vec<f64> {
    let plen = patches.patch_len;
    let mut out = Vec::with_capacity(plan.masked.len() * plen);
    for &i in &plan.masked {
        out.extend_from_slice(&patches.data[i * plen..(i + 1) * plen]);
    }
    out
}

/// MSE over masked-patch pixels only; unmasked reconstructions never enter.
pub fn masked_mse(tape: &mut Tape, v_m: NodeId, y_m: &[f64]) -> NodeId {
    let shape = tape.shape(v_m).to_vec();
    let target = tape.constant(shape, y_m.to_vec());
    tape.mse(v_m, target)
}

/// Term nodes for one labeled sample's pretraining loss.
#[derive(Debug, Clone, Copy, Default)]
pub struct PretrainTerms {
    pub l_v1: Option<NodeId>,
    pub l_t1: Option<NodeId>,
    pub l_v2: Option<NodeId>,
    pub l_t2: Option<NodeId>,
}

impl PretrainTerms {
    /// The weighted combination `α·L_v1 + β·L_v2 + γ·L_t1 + ε·L_t2` over
    /// whichever terms exist; `None` when every toggle is off.
    pub fn total(&self, tape: &mut Tape, weights: &LossWeights) -> Option<NodeId> {
        let mut terms = Vec::new();
        if let Some(v) = self.l_v1 {
            terms.push((weights.alpha, v));
        }
        if let Some(v) = self.l_v2 {
            terms.push((weights.beta, v));
        }
        if let Some(v) = self.l_t1 {
            terms.push((weights.gamma, v));
        }
        if let Some(v) = self.l_t2 {
            terms.push((weights.epsilon, v));
        }
        (!terms.is_empty()).then(|| tape.weighted_sum(&terms))
    }
}

/// Build the pretraining loss terms for the two decoding views.
///
/// The explicit view scores reconstruction over masked patches and CE over
/// its masked text positions; the implicit view likewise, with every text
/// position masked. Views whose terms are all toggled off may be absent.
pub fn pretrain_loss(
    tape: &mut Tape,
    explicit: Option<&DecoderOutput>,
    implicit: Option<&DecoderOutput>,
    sample: &LabeledSample,
    toggles: &LossToggles,
) -> PretrainTerms {
    let y_m = masked_pixel_targets(&sample.patches, &sample.patch_plan);
    let mut terms = PretrainTerms::default();
    if toggles.v1 || toggles.t1 {
        let out = explicit.expect("explicit view required by active toggles");
        if toggles.v1 {
            let v_m = out.v_m.expect("masked patches present");
            terms.l_v1 = Some(masked_mse(tape, v_m, &y_m));
        }
        if toggles.t1 {
            let t_m = out.t_m.expect("masked text present");
            let masked_targets: Vec<usize> = sample
                .text_plan_explicit
                .masked
                .iter()
                .map(|&i| sample.targets.indices[i])
                .collect();
            terms.l_t1 = Some(tape.cross_entropy(t_m, &masked_targets));
        }
    }
    if toggles.v2 || toggles.t2 {
        let out = implicit.expect("implicit view required by active toggles");
        if toggles.v2 {
            let v_m = out.v_m.expect("masked patches present");
            terms.l_v2 = Some(masked_mse(tape, v_m, &y_m));
        }
        if toggles.t2 {
            let t_m = out.t_m.expect("masked text present");
            terms.l_t2 = Some(tape.cross_entropy(t_m, &sample.targets.indices));
        }
    }
    terms
}

/// Run both decoding views (as the toggles require) for one labeled sample
/// and return the term nodes.
pub fn labeled_sample_terms(
    tape: &mut Tape,
    model: &MvltModel,
    sample: &LabeledSample,
    toggles: &LossToggles,
) -> PretrainTerms {
    let encoded = model.encode_masked(tape, &sample.patches, &sample.patch_plan);
    let explicit = toggles.explicit_view_needed().then(|| {
        let tokens = text_tokens(
            &sample.targets.indices,
            &sample.text_plan_explicit,
            model.mask_token_id(),
        );
        model.decode(
            tape,
            encoded,
            &sample.patch_plan,
            TextInput::Tokens(&tokens),
            &sample.text_plan_explicit,
        )
    });
    let implicit = toggles.implicit_view_needed().then(|| {
        let plan = TextMaskPlan::full(model.config.l);
        let tokens = vec![model.mask_token_id(); model.config.l];
        model.decode(
            tape,
            encoded,
            &sample.patch_plan,
            TextInput::Tokens(&tokens),
            &plan,
        )
    });
    pretrain_loss(tape, explicit.as_ref(), implicit.as_ref(), sample, toggles)
}

/// Reconstruction loss for one unlabeled sample: an all-masked-text decode
/// scored only on masked-patch MSE. No text term exists on this path.
pub fn unlabeled_sample_loss(
    tape: &mut Tape,
    model: &MvltModel,
    sample: &UnlabeledSample,
) -> NodeId {
    let encoded = model.encode_masked(tape, &sample.patches, &sample.patch_plan);
    let plan = TextMaskPlan::full(model.config.l);
    let tokens = vec![model.mask_token_id(); model.config.l];
    let out = model.decode(
        tape,
        encoded,
        &sample.patch_plan,
        TextInput::Tokens(&tokens),
        &plan,
    );
    let y_m = masked_pixel_targets(&sample.patches, &sample.patch_plan);
    masked_mse(tape, out.v_m.expect("masked patches present"), &y_m)
}

/// Build the whole batch loss on one tape and return the scalar node:
/// mean of the per-sample weighted totals over labeled samples plus mean
/// of the reconstruction loss over unlabeled samples. Used by the gradient
/// checker, where value and gradient must come from the same node.
pub fn pretrain_batch_node(
    tape: &mut Tape,
    model: &MvltModel,
    batch: &MixedBatch,
    weights: &LossWeights,
    toggles: &LossToggles,
) -> Result<NodeId> {
    validate_batch(batch, toggles)?;
    let mut contributions: Vec<(f64, NodeId)> = Vec::new();
    let n1 = batch.labeled.len() as f64;
    for sample in &batch.labeled {
        let terms = labeled_sample_terms(tape, model, sample, toggles);
        if let Some(total) = terms.total(tape, weights) {
            contributions.push((1.0 / n1, total));
        }
    }
    let n2 = batch.unlabeled.len() as f64;
    for sample in &batch.unlabeled {
        let ur = unlabeled_sample_loss(tape, model, sample);
        contributions.push((1.0 / n2, ur));
    }
    Ok(if contributions.is_empty() {
        tape.scalar_const(0.0)
    } else {
        tape.weighted_sum(&contributions)
    })
}

fn validate_batch(batch: &MixedBatch, toggles: &LossToggles) -> Result<()> {
    if batch.labeled.is_empty() && toggles.any_text() {
        return Err(Error::Config(
            "text losses are enabled but the batch has no labeled samples".into(),
        ));
    }
    Ok(())
}

/// Per-parameter gradients indexed by `ParamId`.
pub type GradVec = Vec<Option<Vec<f64>>>;

fn merge_grads(into: &mut GradVec, from: GradVec) {
    for (slot, g) in into.iter_mut().zip(from) {
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
}

/// Full pretraining loss and gradients over a mixed batch.
///
/// Samples run on independent tapes (in parallel); each sample's backward
/// is seeded with its batch weight, and the per-sample gradients are
/// reduced in sample order, so the result is identical regardless of
/// thread count. The report carries the batch-mean value of each active
/// term, with the total recombined from those means.
pub fn mixed_batch_loss(
    model: &MvltModel,
    batch: &MixedBatch,
    weights: &LossWeights,
    toggles: &LossToggles,
) -> Result<(PretrainLossReport, GradVec)> {
    validate_batch(batch, toggles)?;
    let n1 = batch.labeled.len() as f64;
    let n2 = batch.unlabeled.len() as f64;

    struct LabeledResult {
        values: [Option<f64>; 4],
        grads: GradVec,
    }

    let labeled: Vec<LabeledResult> = batch
        .labeled
        .par_iter()
        .map(|sample| {
            let mut tape = Tape::new(&model.store);
            let terms = labeled_sample_terms(&mut tape, model, sample, toggles);
            let values = [
                terms.l_v1.map(|id| tape.value(id)[0]),
                terms.l_t1.map(|id| tape.value(id)[0]),
                terms.l_v2.map(|id| tape.value(id)[0]),
                terms.l_t2.map(|id| tape.value(id)[0]),
            ];
            let grads = if let Some(total) = terms.total(&mut tape, weights) {
                let contribution = tape.scale(total, 1.0 / n1);
                tape.backward(contribution);
                tape.into_param_grads()
            } else {
                vec![None; model.store.len()]
            };
            LabeledResult { values, grads }
        })
        .collect();

    let unlabeled: Vec<(f64, GradVec)> = batch
        .unlabeled
        .par_iter()
        .map(|sample| {
            let mut tape = Tape::new(&model.store);
            let ur = unlabeled_sample_loss(&mut tape, model, sample);
            let value = tape.value(ur)[0];
            let contribution = tape.scale(ur, 1.0 / n2);
            tape.backward(contribution);
            (value, tape.into_param_grads())
        })
        .collect();

    let mut grads: GradVec = vec![None; model.store.len()];
    for r in &labeled {
        merge_grads(&mut grads, r.grads.clone());
    }
    for (_, g) in &unlabeled {
        merge_grads(&mut grads, g.clone());
    }

    let mean_term = |idx: usize| -> Option<f64> {
        let mut sum = 0.0;
        let mut any = false;
        for r in &labeled {
            match r.values[idx] {
                Some(v) => {
                    sum += v;
                    any = true;
                }
                None => return None,
            }
        }
        (any).then(|| sum / n1)
    };
    let l_ur = (!unlabeled.is_empty())
        .then(|| unlabeled.iter().map(|(v, _)| v).sum::<f64>() / n2);
    let report = PretrainLossReport::combine(
        weights,
        mean_term(0),
        mean_term(1),
        mean_term(2),
        mean_term(3),
        l_ur,
    );
    Ok((report, grads))
}

/// Per-iteration cross entropies against the same targets.
pub fn finetune_ce_nodes(tape: &mut Tape, logits: &[NodeId], targets: &[usize]) -> Vec<NodeId> {
    logits
        .iter()
        .map(|&t| tape.cross_entropy(t, targets))
        .collect()
}

/// Combine per-iteration CE terms into the fine-tuning objective.
pub fn finetune_loss_from_ce(
    tape: &mut Tape,
    ce: &[NodeId],
    variant: LossVariant,
) -> Result<NodeId> {
    assert!(!ce.is_empty(), "finetune loss needs at least one decode");
    let k = ce.len() - 1;
    if k == 0 {
        return Ok(ce[0]);
    }
    let iter_weight = match variant {
        LossVariant::Paper => {
            if k == 1 {
                return Err(Error::Config(
                    "K=1 makes the iteration weight 1/(2(K-1)) divide by zero".into(),
                ));
            }
            1.0 / (2.0 * (k as f64 - 1.0))
        }
        LossVariant::Averaged => 1.0 / (2.0 * k as f64),
    };
    let mut terms = vec![(0.5, ce[0])];
    terms.extend(ce[1..].iter().map(|&c| (iter_weight, c)));
    Ok(tape.weighted_sum(&terms))
}

/// Fine-tuning objective over the `K+1` iteration logits.
///
/// `K = 0` is plain CE on the single decode. For `K ≥ 2` the paper-form
/// weights are ½ on iteration 0 and `1/(2(K−1))` on each of iterations
/// 1..K (summing to more than 1 by design); the averaged variant divides
/// the sum by `2K` instead. `K = 1` under the paper form is a
/// configuration error.
pub fn finetune_loss(
    tape: &mut Tape,
    logits: &[NodeId],
    targets: &[usize],
    variant: LossVariant,
) -> Result<NodeId> {
    let ce = finetune_ce_nodes(tape, logits, targets);
    finetune_loss_from_ce(tape, &ce, variant)
}
