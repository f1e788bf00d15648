//! AdamW with decoupled weight decay, cosine-warmup schedule, layer-wise
//! learning-rate decay, and global-norm gradient clipping.

use crate::param::{LayerGroup, ParamKind, ParameterStore};

const ADAM_EPS: f64 = 1e-8;

/// Learning-rate schedule plus the optimizer hyperparameters that ride
/// along with it for a training stage.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub grad_clip: Option<f64>,
    pub layer_decay: Option<f64>,
}

impl LrSchedule {
    pub fn validate(&self) -> crate::Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(crate::Error::Config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.base_lr <= 0.0 {
            return Err(crate::Error::Config(format!(
                "base_lr must be positive, got {}",
                self.base_lr
            )));
        }
        Ok(())
    }
}

/// Linear ramp 0 → base over the warmup, then cosine decay to 0 at
/// `total_steps`.
pub fn lr_at(step: u64, sched: &LrSchedule) -> f64 {
    debug_assert!(step <= sched.total_steps);
    if step < sched.warmup_steps {
        return sched.base_lr * step as f64 / sched.warmup_steps as f64;
    }
    let span = sched.total_steps - sched.warmup_steps;
    if span == 0 {
        return sched.base_lr;
    }
    let progress = (step - sched.warmup_steps) as f64 / span as f64;
    sched.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Per-parameter multiplier for layer-wise lr decay. Only the fine-tuning
/// stage sets `layer_decay`; pretraining passes `None` and everything gets 1.
pub fn layer_multiplier(group: LayerGroup, layer_decay: Option<f64>, enc_depth: usize) -> f64 {
    let Some(d) = layer_decay else { return 1.0 };
    match group {
        LayerGroup::Input => d.powi(enc_depth as i32 + 1),
        LayerGroup::EncoderBlock(i) => d.powi((enc_depth - i) as i32),
        LayerGroup::Head => 1.0,
    }
}

/// Per-parameter first/second moments plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamWState {
    pub fn new(store: &ParameterStore) -> Self {
        let m = store
            .iter()
            .map(|(_, p)| vec![0.0; p.tensor.data.len()])
            .collect::<Vec<_>>();
        AdamWState { v: m.clone(), m, t: 0 }
    }
}

/// One AdamW update over every parameter in the store.
///
/// Decoupled decay scales the parameter by `1 − lr·wd` before the moment
/// update is applied, and only for plain weight matrices — biases, norm
/// affines, and embedding tables are exempt. Gradients are consumed
/// (cleared) by the step. Panics if a trainable parameter has no gradient.
pub fn adamw_step(
    store: &mut ParameterStore,
    state: &mut AdamWState,
    lr_t: f64,
    sched: &LrSchedule,
    enc_depth: usize,
) {
    state.t += 1;
    let bias1 = 1.0 - sched.beta1.powi(state.t as i32);
    let bias2 = 1.0 - sched.beta2.powi(state.t as i32);
    for (pid, param) in store.iter_mut() {
        let grad = param.tensor.grad.take().unwrap_or_else(|| {
            panic!(
                "adamw contract violation: missing gradient for parameter {:?}",
                param.name
            )
        });
        let lr = lr_t * layer_multiplier(param.group, sched.layer_decay, enc_depth);
        let decay = param.kind == ParamKind::Matrix && sched.weight_decay != 0.0;
        let m = &mut state.m[pid];
        let v = &mut state.v[pid];
        for ((p, &g), (mi, vi)) in param
            .tensor
            .data
            .iter_mut()
            .zip(&grad)
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            if decay {
                *p *= 1.0 - lr * sched.weight_decay;
            }
            *mi = sched.beta1 * *mi + (1.0 - sched.beta1) * g;
            *vi = sched.beta2 * *vi + (1.0 - sched.beta2) * g * g;
            let m_hat = *mi / bias1;
            let v_hat = *vi / bias2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// Scale all gradients so the global L2 norm is at most `max_norm`.
/// Returns the scale that was applied (1.0 when under the limit).
pub fn clip_global_norm(store: &mut ParameterStore, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for (_, param) in store.iter() {
        if let Some(g) = &param.tensor.grad {
            for &x in g {
                sq += x * x;
            }
        }
    }
    let norm = sq.sqrt();
    if norm <= max_norm {
        return 1.0;
    }
    let scale = max_norm / norm;
    for (_, param) in store.iter_mut() {
        if let Some(g) = &mut param.tensor.grad {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    scale
}
