//! Adam with inverse-square-root warmup, gradient clipping and the epoch loop.

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{Batch, PAD};
use crate::error::{Error, Result};
use crate::eval::{GradientReport, LayerGroups, WeightTrace};
use crate::model::{batch_loss, Model};
use crate::rng::{derive, Stream};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub warmup_steps: u64,
    /// Multiplier on the schedule.
    pub lr_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub label_smoothing: f64,
    pub epochs: usize,
    /// Padded target cells per batch.
    pub batch_tokens: usize,
    pub seed: u64,
    /// Gradient norms and fusion weights are recorded every this many steps.
    pub log_every: u64,
    /// Stop once teacher-forced validation accuracy reaches this value.
    pub target_valid_acc: Option<f64>,
    /// A run whose epoch loss exceeds this multiple of the first epoch's
    /// loss (from epoch 5 on) is reported as diverged.
    pub divergence_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            warmup_steps: 4000,
            lr_factor: 1.0,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            clip_norm: 1.0,
            label_smoothing: 0.1,
            epochs: 20,
            batch_tokens: 4096,
            seed: 1,
            log_every: 10,
            target_valid_acc: None,
            divergence_factor: 2.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.warmup_steps < 1 {
            errs.push("warmup_steps must be at least 1".to_string());
        }
        if !(self.lr_factor > 0.0) {
            errs.push("lr_factor must be positive".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                errs.push(format!("{name} must be in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            errs.push("adam_eps must be positive".into());
        }
        if !(self.clip_norm >= 0.0) {
            errs.push("clip_norm must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            errs.push("label_smoothing must be in [0, 1)".into());
        }
        if self.batch_tokens == 0 {
            errs.push("batch_tokens must be positive".into());
        }
        if self.log_every == 0 {
            errs.push("log_every must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// `D^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn lr_at_step(step: u64, d_model: usize, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<F> {
    /// Optimizer updates applied so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    /// Dropout and batch order derive from this plus step/epoch.
    pub seed: u64,
    pub best_valid: Option<f64>,
}

impl<F: Scalar> TrainState<F> {
    pub fn new(store: &ParamStore<F>, seed: u64) -> Self {
        let zeros = || -> Vec<Tensor<F>> {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape().to_vec()))
                .collect()
        };
        TrainState {
            step: 0,
            epoch: 0,
            m: zeros(),
            v: zeros(),
            seed,
            best_valid: None,
        }
    }
}

/// One bias-corrected Adam update from the gradients held in `store`.
pub fn adam_step<F: Scalar>(
    store: &mut ParamStore<F>,
    state: &mut TrainState<F>,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    if let Some(name) = store.find_non_finite_grad() {
        return Err(Error::NonFiniteGradient { param: name.to_string() });
    }
    if state.m.len() != store.len() {
        return Err(Error::Parameter(format!(
            "optimizer state has {} moments for {} parameters",
            state.m.len(),
            store.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (fb1, fb2) = (F::from_f64_lossy(b1), F::from_f64_lossy(b2));
    let (ob1, ob2) = (F::from_f64_lossy(1.0 - b1), F::from_f64_lossy(1.0 - b2));
    let step_size = F::from_f64_lossy(lr / c1);
    let inv_sqrt_c2 = F::from_f64_lossy(1.0 / c2.sqrt());
    let eps = F::from_f64_lossy(eps);
    for (i, p) in store.params_mut().iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = &p.grad;
        let w = p.value.data_mut();
        for j in 0..w.len() {
            m[j] = fb1 * m[j] + ob1 * g[j];
            v[j] = fb2 * v[j] + ob2 * g[j] * g[j];
            w[j] -= step_size * m[j] / (v[j].sqrt() * inv_sqrt_c2 + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub step: u64,
    pub epoch: usize,
    /// Last observed loss (NaN when the forward pass itself failed).
    pub loss: f64,
    pub reason: String,
    /// Per-layer gradient norms at the last logged step, if any.
    pub last_gradients: Option<GradientReport>,
}

fn diverged(state_step: u64, epoch: usize, loss: f64, reason: String, grads: Option<GradientReport>) -> Error {
    Error::Diverged(Box::new(DivergenceReport {
        step: state_step,
        epoch,
        loss,
        reason,
        last_gradients: grads,
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    /// Token-weighted mean of the training loss.
    pub mean_loss: f64,
    pub steps: usize,
    pub tokens: usize,
    /// Learning rate of the epoch's last update.
    pub lr: f64,
    /// Pre-clipping gradient norms at logged steps.
    pub gradients: Vec<GradientReport>,
    pub weights: Vec<WeightTrace>,
    /// Mixture weights at the end of the epoch (`[1]` without fusion).
    pub psi: Vec<f64>,
}

/// Mixture weights as currently learned.
pub fn current_psi<F: Scalar>(model: &Model<F>) -> Vec<f64> {
    model.fusion_weights().map(|w| w.psi).unwrap_or_else(|| vec![1.0])
}

/// One pass over `batches`: forward, multi-level loss, backward, clip, Adam,
/// zero grads. Dropout masks derive from `(seed, step)`.
pub fn train_epoch<F: Scalar>(
    model: &mut Model<F>,
    batches: &[Batch],
    state: &mut TrainState<F>,
    cfg: &TrainConfig,
) -> Result<EpochReport> {
    if batches.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let groups = LayerGroups::of(model);
    let d_model = model.config().d_model;
    let mut loss_sum = 0.0;
    let mut tokens = 0usize;
    let mut lr = 0.0;
    let mut gradients: Vec<GradientReport> = Vec::new();
    let mut weights = Vec::new();
    let epoch = state.epoch + 1;
    for batch in batches {
        let next = state.step + 1;
        let mut tape = Tape::train(derive(state.seed, Stream::Dropout, next));
        let (loss, _) = match batch_loss(model, &mut tape, batch, cfg.label_smoothing) {
            Ok(r) => r,
            Err(Error::NonFinite { op }) => {
                return Err(diverged(
                    next,
                    epoch,
                    f64::NAN,
                    format!("non-finite value in forward pass ({op})"),
                    gradients.last().cloned(),
                ))
            }
            Err(e) => return Err(e),
        };
        let loss_value = tape.value(loss).data()[0].as_f64();
        model.store_mut().zero_grad();
        match tape.backward_into(loss, model.store_mut()) {
            Ok(_) => {}
            Err(Error::NonFinite { op }) => {
                return Err(diverged(
                    next,
                    epoch,
                    loss_value,
                    format!("non-finite gradient in backward pass ({op})"),
                    gradients.last().cloned(),
                ))
            }
            Err(e) => return Err(e),
        }
        let logged = next % cfg.log_every == 0 || next == 1;
        if logged {
            gradients.push(groups.report(model, next));
        }
        if cfg.clip_norm > 0.0 {
            model.store_mut().clip_grad_norm(cfg.clip_norm);
        }
        lr = cfg.lr_factor * lr_at_step(next, d_model, cfg.warmup_steps);
        match adam_step(model.store_mut(), state, lr, (cfg.beta1, cfg.beta2), cfg.adam_eps) {
            Ok(()) => {}
            Err(Error::NonFiniteGradient { param }) => {
                return Err(diverged(
                    next,
                    epoch,
                    loss_value,
                    format!("non-finite gradient in `{param}`"),
                    gradients.last().cloned(),
                ))
            }
            Err(e) => return Err(e),
        }
        model.store_mut().zero_grad();
        if logged {
            if let Some(t) = WeightTrace::capture(model, next) {
                weights.push(t);
            }
        }
        let n = batch.target_tokens();
        loss_sum += loss_value * n as f64;
        tokens += n;
    }
    state.epoch = epoch;
    let psi = current_psi(model);
    let total: f64 = psi.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("mixture weights sum to {total}")));
    }
    Ok(EpochReport {
        epoch,
        mean_loss: loss_sum / tokens.max(1) as f64,
        steps: batches.len(),
        tokens,
        lr,
        gradients,
        weights,
        psi,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Token-weighted multi-level loss without label smoothing.
    pub loss: f64,
    /// Teacher-forced argmax accuracy of the fused distribution.
    pub token_acc: f64,
}

/// Eval-mode loss and teacher-forced accuracy over `batches`.
pub fn evaluate<F: Scalar>(model: &Model<F>, batches: &[Batch]) -> Result<EvalReport> {
    let mut loss_sum = 0.0;
    let mut tokens = 0usize;
    let mut correct = 0usize;
    for batch in batches {
        let mut tape = Tape::eval();
        let (loss, pred) = batch_loss(model, &mut tape, batch, 0.0)?;
        let n = batch.target_tokens();
        loss_sum += tape.value(loss).data()[0].as_f64() * n as f64;
        tokens += n;
        let lp = pred.fused_log_probs(&tape);
        let v = pred.vocab;
        for (r, &t) in batch.tgt_out.ids.iter().enumerate() {
            if t == PAD {
                continue;
            }
            if argmax(&lp[r * v..(r + 1) * v]) == t as usize {
                correct += 1;
            }
        }
    }
    if tokens == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(EvalReport {
        loss: loss_sum / tokens as f64,
        token_acc: correct as f64 / tokens as f64,
    })
}

/// First index of the maximum (smaller index wins ties).
pub(crate) fn argmax<F: PartialOrd + Copy>(xs: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Flags a run whose loss has blown past `factor ×` its first-epoch loss.
pub fn check_runaway(history: &[f64], factor: f64, min_epochs: usize) -> Option<String> {
    let first = *history.first()?;
    let last = *history.last()?;
    if !last.is_finite() {
        return Some("loss is not finite".into());
    }
    if history.len() >= min_epochs && last > factor * first {
        return Some(format!("epoch loss {last:.4} exceeds {factor} x initial {first:.4}"));
    }
    None
}
