//! Online test-time adaptation: no-adapt, entropy minimization (Tent),
//! gradient-clipped variants, and sharpness-aware reliable entropy
//! minimization with model recovery (SAR).
//!
//! SAR per step: filter samples by entropy, take the gradient at the current
//! weights, climb to the worst nearby weights within radius rho, re-filter,
//! and descend with the gradient taken there. A moving average of the
//! perturbed entropy triggers a reset to the pre-adaptation snapshot when it
//! drops below the recovery threshold (a collapsing model is overconfident).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{argmax_rows, features_to_tensor, ForwardMode, Model, ModelError};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid probability row {row}: {reason}")]
    BadProbabilityRow { row: usize, reason: String },
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("clip threshold missing for {0}")]
    MissingClipThreshold(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Noadapt,
    Tent,
    Sar,
    ClipValue,
    ClipNorm,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Noadapt => "noadapt",
            Method::Tent => "tent",
            Method::Sar => "sar",
            Method::ClipValue => "clip_value",
            Method::ClipNorm => "clip_norm",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        [
            Method::Noadapt,
            Method::Tent,
            Method::Sar,
            Method::ClipValue,
            Method::ClipNorm,
        ]
        .into_iter()
        .find(|m| m.name() == s)
    }
}

/// Learning-rate rescaling family for small batch sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrFamily {
    ResnetLike,
    VitLike,
}

/// Batch-size dependent learning rate: resnet-like scales linearly below 32
/// and saturates there; vit-like scales linearly up to 64.
pub fn lr_for_batch(base_lr: f64, batch_size: usize, family: LrFamily) -> f64 {
    let b = batch_size as f64;
    match family {
        LrFamily::ResnetLike => {
            if batch_size < 32 {
                base_lr / 32.0 * b
            } else {
                base_lr
            }
        }
        LrFamily::VitLike => {
            if batch_size < 64 {
                base_lr / 64.0 * b
            } else {
                base_lr
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub method: Method,
    /// Entropy filter threshold E0; `None` means 0.4 * ln C.
    pub entropy_threshold: Option<f64>,
    /// Perturbation radius rho.
    pub rho: f64,
    /// Base learning rate before batch-size rescaling.
    pub lr: f64,
    pub momentum: f64,
    /// Recovery threshold e0 on the entropy moving average.
    pub reset_threshold: f64,
    /// Moving-average factor for e_m.
    pub ema: f64,
    pub recovery: bool,
    pub clip_value: Option<f64>,
    pub clip_norm: Option<f64>,
    pub family: LrFamily,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            method: Method::Sar,
            entropy_threshold: None,
            rho: 0.05,
            lr: 0.1,
            momentum: 0.9,
            reset_threshold: 0.2,
            ema: 0.9,
            recovery: true,
            clip_value: None,
            clip_norm: None,
            family: LrFamily::ResnetLike,
        }
    }
}

impl AdaptConfig {
    pub fn entropy_threshold(&self, class_count: usize) -> f64 {
        self.entropy_threshold
            .unwrap_or(0.4 * (class_count as f64).ln())
    }

    pub fn validate(&self, class_count: usize) -> Result<(), AdaptError> {
        let max_ent = (class_count as f64).ln();
        let e0 = self.entropy_threshold(class_count);
        if !(e0 > 0.0 && e0 <= max_ent) {
            return Err(AdaptError::BadConfig(format!(
                "entropy threshold {e0} outside (0, ln C = {max_ent}]"
            )));
        }
        if !(self.rho >= 0.0) {
            return Err(AdaptError::BadConfig(format!("rho {} < 0", self.rho)));
        }
        if !(self.reset_threshold >= 0.0) {
            return Err(AdaptError::BadConfig(format!(
                "reset threshold {} < 0",
                self.reset_threshold
            )));
        }
        if !(self.ema >= 0.0 && self.ema < 1.0) {
            return Err(AdaptError::BadConfig(format!(
                "ema factor {} outside [0, 1)",
                self.ema
            )));
        }
        Ok(())
    }
}

/// Online adaptation state: snapshot of the initial trainable parameters,
/// momentum buffers, the entropy moving average, and counters.
pub struct AdaptState {
    theta0: Vec<Vec<f64>>,
    momentum: Vec<Vec<f64>>,
    /// Unset before the first executed update.
    pub e_m: Option<f64>,
    pub update_count: u64,
    pub backward_count: u64,
    pub recovery_count: u64,
    /// Batches where S1 was nonempty but the re-filtered mask came back empty.
    pub empty_second_mask_count: u64,
    /// Updates where the first-pass gradient was exactly zero with rho > 0.
    pub zero_gradient_count: u64,
}

impl AdaptState {
    pub fn new(model: &Model) -> Self {
        let params = model.trainable_params();
        AdaptState {
            theta0: params.iter().map(|p| p.data()).collect(),
            momentum: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            e_m: None,
            update_count: 0,
            backward_count: 0,
            recovery_count: 0,
            empty_second_mask_count: 0,
            zero_gradient_count: 0,
        }
    }

    pub fn theta0(&self) -> &[Vec<f64>] {
        &self.theta0
    }

    pub fn momentum_buffers(&self) -> &[Vec<f64>] {
        &self.momentum
    }
}

/// Shannon entropy per probability row, with 0 log 0 := 0.
pub fn entropy(probs: &[f64], class_count: usize) -> Result<Vec<f64>, AdaptError> {
    let mut out = Vec::with_capacity(probs.len() / class_count);
    for (i, row) in probs.chunks(class_count).enumerate() {
        let mut sum = 0.0;
        let mut ent = 0.0;
        for &p in row {
            if !(p >= 0.0) || !p.is_finite() {
                return Err(AdaptError::BadProbabilityRow {
                    row: i,
                    reason: format!("entry {p}"),
                });
            }
            sum += p;
            if p > 0.0 {
                ent -= p * p.ln();
            }
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(AdaptError::BadProbabilityRow {
                row: i,
                reason: format!("sums to {sum}"),
            });
        }
        out.push(ent.max(0.0));
    }
    Ok(out)
}

/// Selects samples whose entropy is strictly below the threshold.
pub fn reliable_mask(entropies: &[f64], threshold: f64) -> Vec<bool> {
    entropies.iter().map(|e| *e < threshold).collect()
}

/// SAM ascent direction: rho * g / ||g||_2 over the concatenated trainable
/// gradient. `None` when the gradient is exactly zero with rho > 0 (the
/// perturbation is undefined there).
pub struct Perturbation {
    pub epsilon: Vec<Vec<f64>>,
}

pub fn sam_perturbation(grads: &[Vec<f64>], rho: f64) -> Option<Perturbation> {
    if rho == 0.0 {
        return Some(Perturbation {
            epsilon: grads.iter().map(|g| vec![0.0; g.len()]).collect(),
        });
    }
    let norm: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm == 0.0 {
        return None;
    }
    Some(Perturbation {
        epsilon: grads
            .iter()
            .map(|g| g.iter().map(|v| rho * v / norm).collect())
            .collect(),
    })
}

/// Raw outcome of one adaptation step, before metrics are folded in.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// Argmax predictions from the pre-update forward pass.
    pub predictions: Vec<usize>,
    /// Mean entropy over all batch samples, pre-update.
    pub mean_entropy: f64,
    /// |S1|: samples passing the entropy filter (batch size for Tent/clip).
    pub selected: usize,
    /// |S2|: samples still passing at the perturbed weights (SAR only).
    pub selected2: usize,
    /// Global l2 norm of the first-pass trainable gradient.
    pub grad_norm: f64,
    pub recovered: bool,
    /// True when no parameter update was applied.
    pub skipped: bool,
}

// Adapted runs always use current-batch statistics; for batch norm this is
// exactly the Tent-style test-time mode, for GN/LN the mode is irrelevant.
fn adapt_forward_mode(_model: &Model) -> ForwardMode {
    ForwardMode::TestBatch
}

struct ForwardPass {
    tape: Tape,
    logits: Tensor,
    #[allow(dead_code)]
    probs: Vec<f64>,
    entropies: Vec<f64>,
}

fn forward_pass(model: &Model, batch: &Tensor) -> Result<ForwardPass, AdaptError> {
    let tape = Tape::new();
    let logits = model.forward(&tape, batch, adapt_forward_mode(model))?;
    let probs_t = tape.softmax_rows(&logits)?;
    let probs = probs_t.data();
    let entropies = entropy(&probs, model.class_count)?;
    Ok(ForwardPass {
        tape,
        logits,
        probs,
        entropies,
    })
}

/// Mean entropy over the selected logit rows, on the tape:
/// mean(lse) - sum(probs .* logits) / k.
fn mean_entropy_loss(
    tape: &Tape,
    logits: &Tensor,
    rows: &[usize],
) -> Result<Tensor, TensorError> {
    let selected = if rows.len() == logits.shape()[0] {
        logits.clone()
    } else {
        tape.select_rows(logits, rows)?
    };
    let lse = tape.logsumexp_rows(&selected)?;
    let probs = tape.softmax_rows(&selected)?;
    let pz = tape.mul(&probs, &selected)?;
    let m1 = tape.mean_all(&lse)?;
    let s = tape.sum_all(&pz)?;
    let s = tape.scale(&s, 1.0 / rows.len() as f64)?;
    tape.sub(&m1, &s)
}

fn collect_grads(params: &[Tensor]) -> Vec<Vec<f64>> {
    params.iter().map(|p| p.grad()).collect()
}

fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

fn sgd_momentum_update(
    params: &[Tensor],
    grads: &[Vec<f64>],
    state: &mut AdaptState,
    lr: f64,
    momentum: f64,
) {
    for ((p, g), m) in params.iter().zip(grads).zip(state.momentum.iter_mut()) {
        let mut step = vec![0.0; g.len()];
        for k in 0..g.len() {
            m[k] = momentum * m[k] + g[k];
            step[k] = lr * m[k];
        }
        p.sub_assign_data(&step);
    }
}

fn mean_over(entropies: &[f64], rows: &[usize]) -> f64 {
    rows.iter().map(|&i| entropies[i]).sum::<f64>() / rows.len() as f64
}

fn check_batch(batch: &[Vec<f64>]) -> Result<Tensor, AdaptError> {
    if batch.is_empty() {
        return Err(AdaptError::EmptyBatch);
    }
    Ok(features_to_tensor(batch))
}

/// Pure evaluation step; records predictions only.
pub fn noadapt_step(model: &Model, batch: &[Vec<f64>]) -> Result<StepOutcome, AdaptError> {
    let x = check_batch(batch)?;
    let tape = Tape::new();
    let logits = model.forward(&tape, &x, model.eval_mode())?;
    let probs = tape.softmax_rows(&logits)?.data();
    let entropies = entropy(&probs, model.class_count)?;
    Ok(StepOutcome {
        predictions: argmax_rows(&logits.data(), model.class_count),
        mean_entropy: entropies.iter().sum::<f64>() / entropies.len() as f64,
        selected: 0,
        selected2: 0,
        grad_norm: 0.0,
        recovered: false,
        skipped: true,
    })
}

/// One Tent step: one SGD-momentum update on the mean entropy of the whole
/// batch. Predictions are recorded before the update.
pub fn tent_step(
    model: &Model,
    batch: &[Vec<f64>],
    cfg: &AdaptConfig,
    state: &mut AdaptState,
) -> Result<StepOutcome, AdaptError> {
    tent_like_step(model, batch, cfg, state, GradTransform::None)
}

/// Gradient-clipped Tent baselines.
#[derive(Debug, Clone, Copy)]
pub enum ClipMode {
    ByValue,
    ByNorm,
}

pub fn clip_step(
    model: &Model,
    batch: &[Vec<f64>],
    cfg: &AdaptConfig,
    state: &mut AdaptState,
    mode: ClipMode,
) -> Result<StepOutcome, AdaptError> {
    let transform = match mode {
        ClipMode::ByValue => GradTransform::ClipValue(
            cfg.clip_value
                .ok_or(AdaptError::MissingClipThreshold("clip_value"))?,
        ),
        ClipMode::ByNorm => GradTransform::ClipNorm(
            cfg.clip_norm
                .ok_or(AdaptError::MissingClipThreshold("clip_norm"))?,
        ),
    };
    tent_like_step(model, batch, cfg, state, transform)
}

enum GradTransform {
    None,
    ClipValue(f64),
    ClipNorm(f64),
}

fn tent_like_step(
    model: &Model,
    batch: &[Vec<f64>],
    cfg: &AdaptConfig,
    state: &mut AdaptState,
    transform: GradTransform,
) -> Result<StepOutcome, AdaptError> {
    let x = check_batch(batch)?;
    let pass = forward_pass(model, &x)?;
    let predictions = argmax_rows(&pass.logits.data(), model.class_count);
    let all_rows: Vec<usize> = (0..batch.len()).collect();
    let loss = mean_entropy_loss(&pass.tape, &pass.logits, &all_rows)?;

    let params = model.trainable_params();
    for p in &params {
        p.zero_grad();
    }
    pass.tape.backward(&loss)?;
    state.backward_count += 1;
    let mut grads = collect_grads(&params);
    let grad_norm = global_norm(&grads);
    match transform {
        GradTransform::None => {}
        GradTransform::ClipValue(delta) => {
            for g in grads.iter_mut() {
                for v in g.iter_mut() {
                    *v = v.clamp(-delta, delta);
                }
            }
        }
        GradTransform::ClipNorm(delta) => {
            let norm = global_norm(&grads);
            if norm > delta && norm > 0.0 {
                let f = delta / norm;
                for g in grads.iter_mut() {
                    for v in g.iter_mut() {
                        *v *= f;
                    }
                }
            }
        }
    }
    let lr = lr_for_batch(cfg.lr, batch.len(), cfg.family);
    sgd_momentum_update(&params, &grads, state, lr, cfg.momentum);
    state.update_count += 1;

    Ok(StepOutcome {
        predictions,
        mean_entropy: pass.entropies.iter().sum::<f64>() / pass.entropies.len() as f64,
        selected: batch.len(),
        selected2: 0,
        grad_norm,
        recovered: false,
        skipped: false,
    })
}

/// One SAR step (two-pass sharpness-aware update over filtered samples,
/// followed by the recovery check).
pub fn sar_step(
    model: &Model,
    batch: &[Vec<f64>],
    cfg: &AdaptConfig,
    state: &mut AdaptState,
) -> Result<StepOutcome, AdaptError> {
    let x = check_batch(batch)?;
    let threshold = cfg.entropy_threshold(model.class_count);
    let params = model.trainable_params();

    // pass 1: predict, filter, gradient at the current weights
    let pass1 = forward_pass(model, &x)?;
    let predictions = argmax_rows(&pass1.logits.data(), model.class_count);
    let mean_entropy = pass1.entropies.iter().sum::<f64>() / pass1.entropies.len() as f64;
    let mask1 = reliable_mask(&pass1.entropies, threshold);
    let s1: Vec<usize> = mask1
        .iter()
        .enumerate()
        .filter(|(_, m)| **m)
        .map(|(i, _)| i)
        .collect();
    let mut outcome = StepOutcome {
        predictions,
        mean_entropy,
        selected: s1.len(),
        selected2: 0,
        grad_norm: 0.0,
        recovered: false,
        skipped: true,
    };
    if s1.is_empty() {
        return Ok(outcome);
    }

    let loss1 = mean_entropy_loss(&pass1.tape, &pass1.logits, &s1)?;
    for p in &params {
        p.zero_grad();
    }
    pass1.tape.backward(&loss1)?;
    let grads1 = collect_grads(&params);
    outcome.grad_norm = global_norm(&grads1);

    let lr = lr_for_batch(cfg.lr, batch.len(), cfg.family);
    match sam_perturbation(&grads1, cfg.rho) {
        Some(perturbation) => {
            // pass 2: gradient at the perturbed weights, re-filtered within S1.
            // The pre-perturbation values are snapshotted so removal is
            // bit-exact (adding then subtracting eps is not, in floats).
            let unperturbed: Vec<Vec<f64>> = params.iter().map(|p| p.data()).collect();
            for (p, eps) in params.iter().zip(&perturbation.epsilon) {
                p.add_assign_data(eps);
            }
            let pass2 = forward_pass(model, &x)?;
            let s2: Vec<usize> = s1
                .iter()
                .copied()
                .filter(|&i| pass2.entropies[i] < threshold)
                .collect();
            if s2.is_empty() {
                for (p, orig) in params.iter().zip(&unperturbed) {
                    p.set_data(orig);
                }
                state.empty_second_mask_count += 1;
                return Ok(outcome);
            }
            let loss2 = mean_entropy_loss(&pass2.tape, &pass2.logits, &s2)?;
            for p in &params {
                p.zero_grad();
            }
            pass2.tape.backward(&loss2)?;
            let grads2 = collect_grads(&params);
            // remove the perturbation exactly before descending
            for (p, orig) in params.iter().zip(&unperturbed) {
                p.set_data(orig);
            }
            sgd_momentum_update(&params, &grads2, state, lr, cfg.momentum);
            outcome.selected2 = s2.len();

            let perturbed_mean = mean_over(&pass2.entropies, &s2);
            state.e_m = Some(match state.e_m {
                Some(e) => cfg.ema * e + (1.0 - cfg.ema) * perturbed_mean,
                None => perturbed_mean,
            });
        }
        None => {
            // zero gradient with rho > 0: plain filtered entropy step
            state.zero_gradient_count += 1;
            sgd_momentum_update(&params, &grads1, state, lr, cfg.momentum);
            outcome.selected2 = s1.len();
            let plain_mean = mean_over(&pass1.entropies, &s1);
            state.e_m = Some(match state.e_m {
                Some(e) => cfg.ema * e + (1.0 - cfg.ema) * plain_mean,
                None => plain_mean,
            });
        }
    }
    state.update_count += 1;
    state.backward_count += 2;
    outcome.skipped = false;

    if cfg.recovery {
        outcome.recovered = maybe_recover(model, cfg, state);
    }
    Ok(outcome)
}

/// Resets the trainable parameters to the pre-adaptation snapshot when the
/// entropy moving average has dropped below the recovery threshold. Momentum
/// buffers are zeroed so stale velocity cannot push straight back toward the
/// collapsed region.
pub fn maybe_recover(model: &Model, cfg: &AdaptConfig, state: &mut AdaptState) -> bool {
    let fire = matches!(state.e_m, Some(e) if e < cfg.reset_threshold);
    if !fire {
        return false;
    }
    let params = model.trainable_params();
    for (p, t0) in params.iter().zip(&state.theta0) {
        p.set_data(t0);
    }
    for m in state.momentum.iter_mut() {
        for v in m.iter_mut() {
            *v = 0.0;
        }
    }
    state.e_m = None;
    state.recovery_count += 1;
    true
}

/// Dispatches one step of the configured method.
pub fn adapt_step(
    model: &Model,
    batch: &[Vec<f64>],
    cfg: &AdaptConfig,
    state: &mut AdaptState,
) -> Result<StepOutcome, AdaptError> {
    match cfg.method {
        Method::Noadapt => noadapt_step(model, batch),
        Method::Tent => tent_step(model, batch, cfg, state),
        Method::Sar => sar_step(model, batch, cfg, state),
        Method::ClipValue => clip_step(model, batch, cfg, state, ClipMode::ByValue),
        Method::ClipNorm => clip_step(model, batch, cfg, state, ClipMode::ByNorm),
    }
}
