//! Per-step metrics, collapse detection, loss-surface grids, and output
//! serialization.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapt::entropy;
use crate::models::{features_to_tensor, Model, ModelError};
use crate::tensor::Tape;

pub const COLLAPSE_WINDOW: usize = 200;
pub const COLLAPSE_THRESHOLD: f64 = 0.8;

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("predictions ({predictions}) and labels ({labels}) differ in length")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("grid resolution must be odd and >= 3, got {0}")]
    BadResolution(usize),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("serialization: {0}")]
    Serde(String),
}

/// One row of the per-step trace CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub batch_size: usize,
    pub selected: usize,
    pub selected2: usize,
    pub mean_entropy: f64,
    pub grad_norm: f64,
    /// Cumulative accuracy over all samples seen so far (pre-update
    /// predictions).
    pub accuracy: f64,
    /// Modal-class fraction over the trailing prediction window.
    pub modal_fraction: f64,
    pub recovered: bool,
    pub skipped: bool,
}

/// Running accuracy plus a trailing window of predictions for collapse
/// detection.
pub struct MetricsAccumulator {
    seen: usize,
    correct: usize,
    window: VecDeque<usize>,
    window_cap: usize,
    class_count: usize,
    per_kind: std::collections::BTreeMap<String, (usize, usize)>,
    collapse_fired: bool,
}

impl MetricsAccumulator {
    pub fn new(class_count: usize) -> Self {
        MetricsAccumulator {
            seen: 0,
            correct: 0,
            window: VecDeque::with_capacity(COLLAPSE_WINDOW),
            window_cap: COLLAPSE_WINDOW,
            class_count,
            per_kind: Default::default(),
            collapse_fired: false,
        }
    }

    pub fn with_window(class_count: usize, window: usize) -> Self {
        MetricsAccumulator {
            window_cap: window.max(1),
            ..MetricsAccumulator::new(class_count)
        }
    }

    /// Folds one batch of pre-update predictions against hidden labels.
    pub fn update(
        &mut self,
        predictions: &[usize],
        labels: &[usize],
    ) -> Result<(), TelemetryError> {
        if predictions.len() != labels.len() {
            return Err(TelemetryError::LengthMismatch {
                predictions: predictions.len(),
                labels: labels.len(),
            });
        }
        for (&p, &l) in predictions.iter().zip(labels) {
            self.seen += 1;
            if p == l {
                self.correct += 1;
            }
            if self.window.len() == self.window_cap {
                self.window.pop_front();
            }
            self.window.push_back(p);
        }
        // Only a full window is meaningful: the first few predictions of a
        // run would otherwise trivially dominate.
        if self.window.len() == self.window_cap
            && detect_collapse(self.window.make_contiguous(), COLLAPSE_THRESHOLD)
        {
            self.collapse_fired = true;
        }
        Ok(())
    }

    /// Same as [`update`] but also attributes correctness per corruption kind.
    pub fn update_with_kinds(
        &mut self,
        predictions: &[usize],
        labels: &[usize],
        kinds: &[&str],
    ) -> Result<(), TelemetryError> {
        self.update(predictions, labels)?;
        for ((&p, &l), kind) in predictions.iter().zip(labels).zip(kinds) {
            let slot = self.per_kind.entry(kind.to_string()).or_insert((0, 0));
            slot.1 += 1;
            if p == l {
                slot.0 += 1;
            }
        }
        Ok(())
    }

    pub fn accuracy(&self) -> f64 {
        if self.seen == 0 {
            0.0
        } else {
            self.correct as f64 / self.seen as f64
        }
    }

    pub fn modal_fraction(&mut self) -> f64 {
        modal_fraction(self.window.make_contiguous(), self.class_count)
    }

    pub fn collapse_fired(&self) -> bool {
        self.collapse_fired
    }

    pub fn samples_seen(&self) -> usize {
        self.seen
    }

    pub fn per_corruption_accuracy(&self) -> std::collections::BTreeMap<String, f64> {
        self.per_kind
            .iter()
            .map(|(k, (c, n))| (k.clone(), *c as f64 / (*n).max(1) as f64))
            .collect()
    }
}

pub fn modal_fraction(window: &[usize], class_count: usize) -> f64 {
    if window.is_empty() {
        return 0.0;
    }
    let mut counts = vec![0usize; class_count];
    for &p in window {
        if p < class_count {
            counts[p] += 1;
        }
    }
    *counts.iter().max().unwrap() as f64 / window.len() as f64
}

/// True iff the modal class holds at least `threshold` of the window.
pub fn detect_collapse(window: &[usize], threshold: f64) -> bool {
    if window.is_empty() {
        return false;
    }
    let max = window.iter().max().unwrap() + 1;
    modal_fraction(window, max) >= threshold
}

/// Global l2 norm over concatenated trainable gradients.
pub fn grad_norm(grads: &[Vec<f64>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Mean batch entropy evaluated on a 2-d grid of weight perturbations along
/// two seeded random directions (filter-normalized per trainable tensor).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossSurfaceGrid {
    pub radius: f64,
    pub resolution: usize,
    pub seed: u64,
    /// values[i][j] = mean entropy at theta + alpha_i * d1 + alpha_j * d2.
    pub values: Vec<Vec<f64>>,
}

pub fn loss_surface_grid(
    model: &Model,
    batch: &[Vec<f64>],
    seed: u64,
    radius: f64,
    resolution: usize,
) -> Result<LossSurfaceGrid, TelemetryError> {
    if resolution < 3 || resolution % 2 == 0 {
        return Err(TelemetryError::BadResolution(resolution));
    }
    let params = model.trainable_params();
    let saved: Vec<Vec<f64>> = params.iter().map(|p| p.data()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x73757266);
    let direction = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        params
            .iter()
            .map(|p| {
                let d: Vec<f64> = (0..p.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let dn = grad_norm(&[d.clone()]).max(1e-12);
                let pn = grad_norm(&[p.data()]).max(1e-12);
                // filter normalization: direction chunk rescaled to the
                // tensor's own norm
                d.into_iter().map(|v| v / dn * pn).collect()
            })
            .collect()
    };
    let d1 = direction(&mut rng);
    let d2 = direction(&mut rng);

    let x = features_to_tensor(batch);
    let mut values = vec![vec![0.0; resolution]; resolution];
    let half = (resolution / 2) as isize;
    for i in 0..resolution {
        let ai = (i as isize - half) as f64 / half as f64 * radius;
        for j in 0..resolution {
            let aj = (j as isize - half) as f64 / half as f64 * radius;
            for (((p, base), e1), e2) in params.iter().zip(&saved).zip(&d1).zip(&d2) {
                let moved: Vec<f64> = base
                    .iter()
                    .zip(e1)
                    .zip(e2)
                    .map(|((b, v1), v2)| b + ai * v1 + aj * v2)
                    .collect();
                p.set_data(&moved);
            }
            let tape = Tape::new();
            let logits = model.forward(&tape, &x, crate::models::ForwardMode::TestBatch)?;
            let probs = tape
                .softmax_rows(&logits)
                .map_err(ModelError::from)?
                .data();
            let ents = entropy(&probs, model.class_count)
                .map_err(|e| TelemetryError::Serde(e.to_string()))?;
            values[i][j] = ents.iter().sum::<f64>() / ents.len() as f64;
        }
    }
    for (p, base) in params.iter().zip(&saved) {
        p.set_data(base);
    }
    Ok(LossSurfaceGrid {
        radius,
        resolution,
        seed,
        values,
    })
}

/// Final per-run summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub norm: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub final_accuracy: f64,
    pub per_corruption_accuracy: std::collections::BTreeMap<String, f64>,
    pub update_count: u64,
    pub backward_count: u64,
    pub recovery_count: u64,
    pub collapse: bool,
    pub samples_seen: usize,
    /// Not serialized: wall-clock time would break byte-identical reruns.
    #[serde(skip)]
    pub duration_seconds: f64,
}

fn io_err(path: &Path, source: std::io::Error) -> TelemetryError {
    TelemetryError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub const TRACE_HEADER: &str =
    "step,batch_size,selected,selected2,mean_entropy,grad_norm,accuracy,modal_fraction,recovered,skipped";

/// Writes the per-step trace CSV with a fixed column order.
pub fn write_trace_csv(path: &Path, traces: &[StepTrace]) -> Result<(), TelemetryError> {
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "{TRACE_HEADER}").map_err(|e| io_err(path, e))?;
    for t in traces {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            t.step,
            t.batch_size,
            t.selected,
            t.selected2,
            t.mean_entropy,
            t.grad_norm,
            t.accuracy,
            t.modal_fraction,
            t.recovered,
            t.skipped
        )
        .map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

pub fn write_report_json(path: &Path, report: &RunReport) -> Result<(), TelemetryError> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| TelemetryError::Serde(e.to_string()))?;
    std::fs::write(path, json).map_err(|e| io_err(path, e))
}

pub fn read_report_json(path: &Path) -> Result<RunReport, TelemetryError> {
    let json = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&json).map_err(|e| TelemetryError::Serde(e.to_string()))
}

/// Loss-surface grid as a CSV matrix with a one-line metadata header.
pub fn write_surface_csv(path: &Path, grid: &LossSurfaceGrid) -> Result<(), TelemetryError> {
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(
        w,
        "# radius={} resolution={} seed={}",
        grid.radius, grid.resolution, grid.seed
    )
    .map_err(|e| io_err(path, e))?;
    for row in &grid.values {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(",")).map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::NormKind;

    #[test]
    fn accuracy_all_correct() {
        let mut acc = MetricsAccumulator::new(4);
        acc.update(&[1, 2, 3], &[1, 2, 3]).unwrap();
        assert_eq!(acc.accuracy(), 1.0);
    }

    #[test]
    fn accuracy_alternating_is_half() {
        let mut acc = MetricsAccumulator::new(2);
        for i in 0..50 {
            acc.update(&[0, 0], &[0, 1]).unwrap();
            let _ = i;
        }
        assert_eq!(acc.accuracy(), 0.5);
        assert_eq!(acc.samples_seen(), 100);
    }

    #[test]
    fn length_mismatch_rejected() {
        let mut acc = MetricsAccumulator::new(2);
        assert!(matches!(
            acc.update(&[0, 1], &[0]),
            Err(TelemetryError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn modal_fraction_identical_window_is_one() {
        let mut acc = MetricsAccumulator::new(4);
        acc.update(&[2; 50], &[0; 50]).unwrap();
        assert_eq!(acc.modal_fraction(), 1.0);
    }

    #[test]
    fn collapse_detection_cases() {
        let uniform: Vec<usize> = (0..200).map(|i| i % 10).collect();
        assert!(!detect_collapse(&uniform, 0.8));
        let mostly: Vec<usize> = (0..200).map(|i| if i % 10 == 0 { 1 } else { 7 }).collect();
        assert!(detect_collapse(&mostly, 0.8)); // 90% class 7
        let mut one_dissent = vec![3usize; 200];
        one_dissent[17] = 1;
        assert!(!detect_collapse(&one_dissent, 1.0));
        assert!(detect_collapse(&vec![3usize; 200], 1.0));
    }

    #[test]
    fn collapse_is_monotone_in_modal_count() {
        let mut window: Vec<usize> = (0..100).map(|i| if i < 80 { 5 } else { i % 4 }).collect();
        assert!(detect_collapse(&window, 0.8));
        // appending more modal predictions never flips true -> false
        for _ in 0..50 {
            window.remove(window.iter().position(|&p| p != 5).unwrap_or(0));
            window.push(5);
            assert!(detect_collapse(&window, 0.8));
        }
    }

    #[test]
    fn grad_norm_pythagorean() {
        assert_eq!(grad_norm(&[vec![3.0, 4.0]]), 5.0);
        assert_eq!(grad_norm(&[vec![0.0, 0.0]]), 0.0);
    }

    #[test]
    fn grad_norm_is_global_over_tensors() {
        // oracle: concatenate, then norm
        let a = vec![3.0];
        let b = vec![4.0];
        let concat: Vec<f64> = a.iter().chain(&b).copied().collect();
        let oracle = concat.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((grad_norm(&[a, b]) - oracle).abs() < 1e-12);
        assert_eq!(oracle, 5.0);
    }

    #[test]
    fn surface_grid_center_is_unperturbed_entropy() {
        let model = Model::new(6, 4, NormKind::Group(2), false, 5).unwrap();
        model.set_adaptation_trainable();
        let batch: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..6).map(|j| ((i * 6 + j) as f64 * 0.31).sin()).collect())
            .collect();
        let before: Vec<Vec<f64>> = model.trainable_params().iter().map(|p| p.data()).collect();
        let grid = loss_surface_grid(&model, &batch, 11, 0.5, 5).unwrap();
        let x = features_to_tensor(&batch);
        let tape = Tape::new();
        let logits = model
            .forward(&tape, &x, crate::models::ForwardMode::TestBatch)
            .unwrap();
        let probs = tape.softmax_rows(&logits).unwrap().data();
        let ents = entropy(&probs, 4).unwrap();
        let center = ents.iter().sum::<f64>() / ents.len() as f64;
        assert!((grid.values[2][2] - center).abs() < 1e-12);
        for row in &grid.values {
            for v in row {
                assert!(v.is_finite());
            }
        }
        // model restored bit-exact
        let after: Vec<Vec<f64>> = model.trainable_params().iter().map(|p| p.data()).collect();
        for (b, a) in before.iter().zip(&after) {
            for (x, y) in b.iter().zip(a) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn surface_grid_rejects_even_or_tiny_resolution() {
        let model = Model::new(6, 4, NormKind::Layer, false, 5).unwrap();
        model.set_adaptation_trainable();
        let batch = vec![vec![0.0; 6]; 2];
        assert!(loss_surface_grid(&model, &batch, 0, 1.0, 4).is_err());
        assert!(loss_surface_grid(&model, &batch, 0, 1.0, 1).is_err());
    }

    #[test]
    fn empty_trace_csv_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_trace_csv(&path, &[]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, format!("{TRACE_HEADER}\n"));
    }

    #[test]
    fn trace_csv_reparse_recovers_final_accuracy() {
        let traces: Vec<StepTrace> = (1..=5)
            .map(|i| StepTrace {
                step: i,
                batch_size: 4,
                selected: 2,
                selected2: 1,
                mean_entropy: 0.5 + i as f64 * 0.01,
                grad_norm: 0.1,
                accuracy: i as f64 / 10.0,
                modal_fraction: 0.25,
                recovered: false,
                skipped: false,
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_trace_csv(&path, &traces).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let last = text.lines().last().unwrap();
        let fields: Vec<&str> = last.split(',').collect();
        let parsed: f64 = fields[6].parse().unwrap();
        assert!((parsed - 0.5).abs() < 1e-12);
    }
}
