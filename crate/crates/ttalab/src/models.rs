//! Small MLP classifiers with pluggable normalization layers.
//!
//! Architecture: input -> [Linear -> Norm -> ReLU] x 3 (width 64) -> Linear
//! to C logits. At test time only the affine parameters (gamma, beta) of
//! non-frozen norm layers are trainable; weights and biases never are.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::shiftgen::Dataset;
use crate::tensor::{NormUnit, Tape, Tensor, TensorError};

pub const NORM_EPS: f64 = 1e-5;
pub const HIDDEN_WIDTH: usize = 64;
pub const HIDDEN_BLOCKS: usize = 3;
pub const DEFAULT_GROUPS: usize = 8;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("group count {groups} does not divide width {width}")]
    BadGroupCount { groups: usize, width: usize },
    #[error("running statistics are only defined for batch norm")]
    RunningModeUnsupported,
    #[error("input width {got} does not match model input width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error(
        "pretraining reached accuracy {accuracy:.4} < {target:.2} within {epochs} epochs"
    )]
    PretrainTargetMissed {
        accuracy: f64,
        target: f64,
        epochs: usize,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// Normalization flavor of a hidden block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    /// Normalize per feature over the current batch (test-time batch norm).
    BatchTest,
    /// Normalize per sample over contiguous feature groups.
    Group(usize),
    /// Normalize per sample over all features; same as Group(1).
    Layer,
}

impl NormKind {
    fn unit(&self, width: usize) -> Result<NormUnit, ModelError> {
        match self {
            NormKind::BatchTest => Ok(NormUnit::PerFeature),
            NormKind::Group(g) => {
                if *g == 0 || width % g != 0 {
                    return Err(ModelError::BadGroupCount {
                        groups: *g,
                        width,
                    });
                }
                Ok(NormUnit::PerSample { groups: *g })
            }
            NormKind::Layer => Ok(NormUnit::PerSample { groups: 1 }),
        }
    }
}

/// Forward statistics mode for normalization layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Batch statistics during source training.
    TrainBatch,
    /// Batch statistics at test time (Tent-style batch norm).
    TestBatch,
    /// Stored pretraining statistics (batch norm only).
    Running,
}

/// Per-layer scale and shift, the only test-time trainable parameters.
pub struct AffineParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl AffineParams {
    pub fn identity(width: usize) -> Self {
        AffineParams {
            gamma: Tensor::from_vec(vec![width], vec![1.0; width]).unwrap(),
            beta: Tensor::from_vec(vec![width], vec![0.0; width]).unwrap(),
        }
    }
}

pub struct NormLayer {
    pub kind: NormKind,
    pub affine: AffineParams,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub frozen: bool,
    pub width: usize,
}

pub struct Linear {
    pub weight: Tensor, // [in, out]
    pub bias: Tensor,   // [out]
}

pub struct Model {
    pub input_dim: usize,
    pub class_count: usize,
    pub blocks: Vec<(Linear, NormLayer)>,
    pub head: Linear,
}

/// Applies one normalization layer to a `[B, width]` activation.
pub fn norm_forward(
    tape: &Tape,
    x: &Tensor,
    kind: NormKind,
    affine: &AffineParams,
    running: Option<(&[f64], &[f64])>,
    mode: ForwardMode,
) -> Result<Tensor, ModelError> {
    let width = x.shape()[1];
    let normalized = match mode {
        ForwardMode::TrainBatch | ForwardMode::TestBatch => {
            let unit = kind.unit(width)?;
            tape.standardize(x, unit, NORM_EPS)?
        }
        ForwardMode::Running => {
            if kind != NormKind::BatchTest {
                return Err(ModelError::RunningModeUnsupported);
            }
            let (mean, var) = running.expect("running statistics missing");
            let neg_mean = Tensor::from_vec(vec![width], mean.iter().map(|m| -m).collect())?;
            let inv = Tensor::from_vec(
                vec![width],
                var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect(),
            )?;
            let centered = tape.add_row(x, &neg_mean)?;
            tape.mul_row(&centered, &inv)?
        }
    };
    let scaled = tape.mul_row(&normalized, &affine.gamma)?;
    Ok(tape.add_row(&scaled, &affine.beta)?)
}

impl Model {
    /// Fresh untrained model with identity affine parameters and seeded
    /// He-style weight init. The deepest norm layer is frozen when
    /// `freeze_top` is set.
    pub fn new(
        input_dim: usize,
        class_count: usize,
        kind: NormKind,
        freeze_top: bool,
        seed: u64,
    ) -> Result<Self, ModelError> {
        kind.unit(HIDDEN_WIDTH)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f64656c);
        let mut linear = |fan_in: usize, fan_out: usize| -> Linear {
            let scale = (2.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-1.0..1.0) * scale)
                .collect();
            Linear {
                weight: Tensor::from_vec(vec![fan_in, fan_out], w).unwrap(),
                bias: Tensor::from_vec(vec![fan_out], vec![0.0; fan_out]).unwrap(),
            }
        };
        let mut blocks = Vec::new();
        let mut in_dim = input_dim;
        for b in 0..HIDDEN_BLOCKS {
            let lin = linear(in_dim, HIDDEN_WIDTH);
            let norm = NormLayer {
                kind,
                affine: AffineParams::identity(HIDDEN_WIDTH),
                running_mean: vec![0.0; HIDDEN_WIDTH],
                running_var: vec![1.0; HIDDEN_WIDTH],
                frozen: freeze_top && b == HIDDEN_BLOCKS - 1,
                width: HIDDEN_WIDTH,
            };
            blocks.push((lin, norm));
            in_dim = HIDDEN_WIDTH;
        }
        let head = linear(in_dim, class_count);
        Ok(Model {
            input_dim,
            class_count,
            blocks,
            head,
        })
    }

    /// Forward pass to logits. Records on the tape when trainable parameters
    /// require grad.
    pub fn forward(
        &self,
        tape: &Tape,
        batch: &Tensor,
        mode: ForwardMode,
    ) -> Result<Tensor, ModelError> {
        let shape = batch.shape();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(ModelError::WidthMismatch {
                expected: self.input_dim,
                got: *shape.last().unwrap_or(&0),
            });
        }
        if shape[0] == 0 {
            return Err(ModelError::EmptyBatch);
        }
        let mut h = batch.clone();
        for (lin, norm) in &self.blocks {
            h = tape.matmul(&h, &lin.weight)?;
            h = tape.add_row(&h, &lin.bias)?;
            h = norm_forward(
                tape,
                &h,
                norm.kind,
                &norm.affine,
                Some((&norm.running_mean, &norm.running_var)),
                mode,
            )?;
            h = tape.relu(&h)?;
        }
        let z = tape.matmul(&h, &self.head.weight)?;
        Ok(tape.add_row(&z, &self.head.bias)?)
    }

    /// All parameters (weights, biases, affines), for source training.
    pub fn all_params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for (lin, norm) in &self.blocks {
            out.push(lin.weight.clone());
            out.push(lin.bias.clone());
            out.push(norm.affine.gamma.clone());
            out.push(norm.affine.beta.clone());
        }
        out.push(self.head.weight.clone());
        out.push(self.head.bias.clone());
        out
    }

    /// Gamma and beta of the non-frozen norm layers, in layer order. These are
    /// the only parameters adapted at test time.
    pub fn trainable_params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for (_, norm) in &self.blocks {
            if !norm.frozen {
                out.push(norm.affine.gamma.clone());
                out.push(norm.affine.beta.clone());
            }
        }
        out
    }

    /// Marks only the adaptation-trainable parameters as requiring grad.
    pub fn set_adaptation_trainable(&self) {
        for p in self.all_params() {
            p.set_requires_grad(false);
        }
        for p in self.trainable_params() {
            p.set_requires_grad(true);
        }
    }

    pub fn set_all_trainable(&self) {
        for p in self.all_params() {
            p.set_requires_grad(true);
        }
    }

    /// Deep copy with fresh tensor handles.
    pub fn clone_model(&self) -> Model {
        let clone_linear = |l: &Linear| Linear {
            weight: Tensor::from_vec(l.weight.shape(), l.weight.data()).unwrap(),
            bias: Tensor::from_vec(l.bias.shape(), l.bias.data()).unwrap(),
        };
        Model {
            input_dim: self.input_dim,
            class_count: self.class_count,
            blocks: self
                .blocks
                .iter()
                .map(|(lin, norm)| {
                    (
                        clone_linear(lin),
                        NormLayer {
                            kind: norm.kind,
                            affine: AffineParams {
                                gamma: Tensor::from_vec(
                                    norm.affine.gamma.shape(),
                                    norm.affine.gamma.data(),
                                )
                                .unwrap(),
                                beta: Tensor::from_vec(
                                    norm.affine.beta.shape(),
                                    norm.affine.beta.data(),
                                )
                                .unwrap(),
                            },
                            running_mean: norm.running_mean.clone(),
                            running_var: norm.running_var.clone(),
                            frozen: norm.frozen,
                            width: norm.width,
                        },
                    )
                })
                .collect(),
            head: clone_linear(&self.head),
        }
    }

    pub fn predict(&self, batch: &Tensor, mode: ForwardMode) -> Result<Vec<usize>, ModelError> {
        let tape = Tape::new();
        let logits = self.forward(&tape, batch, mode)?;
        Ok(argmax_rows(&logits.data(), self.class_count))
    }

    /// Evaluation mode for a non-adapted model: running stats for batch norm,
    /// batch-agnostic forward otherwise.
    pub fn eval_mode(&self) -> ForwardMode {
        match self.blocks[0].1.kind {
            NormKind::BatchTest => ForwardMode::Running,
            _ => ForwardMode::TestBatch,
        }
    }
}

pub fn argmax_rows(logits: &[f64], class_count: usize) -> Vec<usize> {
    logits
        .chunks(class_count)
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap()
        })
        .collect()
}

fn batch_tensor(features: &[Vec<f64>]) -> Tensor {
    let dim = features[0].len();
    let flat: Vec<f64> = features.iter().flatten().copied().collect();
    Tensor::from_vec(vec![features.len(), dim], flat).unwrap()
}

/// Mean cross-entropy of logits against integer labels, on the tape.
fn cross_entropy(
    tape: &Tape,
    logits: &Tensor,
    labels: &[usize],
) -> Result<Tensor, TensorError> {
    let lse = tape.logsumexp_rows(logits)?;
    let picked = tape.pick_cols(logits, labels)?;
    let diff = tape.sub(&lse, &picked)?;
    tape.mean_all(&diff)
}

pub const PRETRAIN_TARGET: f64 = 0.95;

/// Source training with SGD + momentum on cross-entropy. Deterministic for a
/// given seed. Records running statistics for batch norm layers over a final
/// full pass and fails when the accuracy target is missed.
pub fn pretrain(
    model: &mut Model,
    train: &Dataset,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<(), ModelError> {
    model.set_all_trainable();
    let params = model.all_params();
    let mut momentum: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.numel()]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70726574);
    let n = train.features.len();
    let batch_size = 64.min(n);
    let mut order: Vec<usize> = (0..n).collect();

    for _ in 0..epochs {
        // Fisher-Yates with the run RNG keeps epochs reproducible.
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(batch_size) {
            if chunk.len() < 2 {
                continue; // batch statistics need at least two samples
            }
            let feats: Vec<Vec<f64>> = chunk.iter().map(|&i| train.features[i].clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let batch = batch_tensor(&feats);
            let tape = Tape::new();
            let logits = model.forward(&tape, &batch, ForwardMode::TrainBatch)?;
            let loss = cross_entropy(&tape, &logits, &labels)?;
            for p in &params {
                p.zero_grad();
            }
            tape.backward(&loss)?;
            for (p, m) in params.iter().zip(momentum.iter_mut()) {
                let g = p.grad();
                let mut step = vec![0.0; g.len()];
                for k in 0..g.len() {
                    m[k] = 0.9 * m[k] + g[k];
                    step[k] = lr * m[k];
                }
                p.sub_assign_data(&step);
            }
        }
    }

    record_running_stats(model, train)?;
    let accuracy = evaluate(model, train)?;
    for p in &params {
        p.set_requires_grad(false);
        p.zero_grad();
    }
    if accuracy < PRETRAIN_TARGET {
        return Err(ModelError::PretrainTargetMissed {
            accuracy,
            target: PRETRAIN_TARGET,
            epochs,
        });
    }
    Ok(())
}

/// Population mean/variance of each pre-norm activation over the full dataset.
pub fn record_running_stats(model: &mut Model, data: &Dataset) -> Result<(), ModelError> {
    let batch = batch_tensor(&data.features);
    let tape = Tape::new();
    let mut h = batch;
    for (lin, norm) in &mut model.blocks {
        h = tape.matmul(&h, &lin.weight)?;
        h = tape.add_row(&h, &lin.bias)?;
        let d = h.data();
        let rows = h.shape()[0];
        let width = norm.width;
        let mut mean = vec![0.0; width];
        let mut var = vec![0.0; width];
        for j in 0..width {
            let col: Vec<f64> = (0..rows).map(|i| d[i * width + j]).collect();
            let m = col.iter().sum::<f64>() / rows as f64;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / rows as f64;
            mean[j] = m;
            var[j] = v;
        }
        norm.running_mean = mean;
        norm.running_var = var;
        h = norm_forward(
            &tape,
            &h,
            norm.kind,
            &norm.affine,
            Some((&norm.running_mean, &norm.running_var)),
            ForwardMode::TrainBatch,
        )?;
        h = tape.relu(&h)?;
    }
    Ok(())
}

/// Accuracy of the model on a labeled dataset in evaluation mode.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64, ModelError> {
    let batch = batch_tensor(&data.features);
    let preds = model.predict(&batch, model.eval_mode())?;
    let correct = preds
        .iter()
        .zip(&data.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / data.labels.len() as f64)
}

// --- Checkpointing ---------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct LinearDump {
    weight_shape: Vec<usize>,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct NormDump {
    kind: NormKind,
    gamma: Vec<f64>,
    beta: Vec<f64>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    frozen: bool,
    width: usize,
}

/// Versioned structured dump of a model. JSON floats round-trip exactly, so
/// save/load is bit-exact for finite values.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    version: u32,
    input_dim: usize,
    class_count: usize,
    blocks: Vec<(LinearDump, NormDump)>,
    head: LinearDump,
}

const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        let dump_linear = |l: &Linear| LinearDump {
            weight_shape: l.weight.shape(),
            weight: l.weight.data(),
            bias: l.bias.data(),
        };
        Checkpoint {
            version: CHECKPOINT_VERSION,
            input_dim: model.input_dim,
            class_count: model.class_count,
            blocks: model
                .blocks
                .iter()
                .map(|(lin, norm)| {
                    (
                        dump_linear(lin),
                        NormDump {
                            kind: norm.kind,
                            gamma: norm.affine.gamma.data(),
                            beta: norm.affine.beta.data(),
                            running_mean: norm.running_mean.clone(),
                            running_var: norm.running_var.clone(),
                            frozen: norm.frozen,
                            width: norm.width,
                        },
                    )
                })
                .collect(),
            head: dump_linear(&model.head),
        }
    }

    pub fn into_model(self) -> Result<Model, ModelError> {
        if self.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        let load_linear = |l: LinearDump| -> Result<Linear, ModelError> {
            let out = l.weight_shape[1];
            Ok(Linear {
                weight: Tensor::from_vec(l.weight_shape.clone(), l.weight)?,
                bias: Tensor::from_vec(vec![out], l.bias)?,
            })
        };
        let mut blocks = Vec::new();
        for (lin, norm) in self.blocks {
            blocks.push((
                load_linear(lin)?,
                NormLayer {
                    kind: norm.kind,
                    affine: AffineParams {
                        gamma: Tensor::from_vec(vec![norm.width], norm.gamma)?,
                        beta: Tensor::from_vec(vec![norm.width], norm.beta)?,
                    },
                    running_mean: norm.running_mean,
                    running_var: norm.running_var,
                    frozen: norm.frozen,
                    width: norm.width,
                },
            ));
        }
        Ok(Model {
            input_dim: self.input_dim,
            class_count: self.class_count,
            blocks,
            head: load_linear(self.head)?,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ModelError> {
        let json = serde_json::to_string(self)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        std::fs::write(path, json)
            .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ModelError> {
        let json = std::fs::read_to_string(path)
            .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&json).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }
}

pub fn features_to_tensor(features: &[Vec<f64>]) -> Tensor {
    batch_tensor(features)
}
