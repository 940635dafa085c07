//! Experiment orchestration: build source data, pretrain or load a model,
//! assemble the wild stream, adapt online, and emit traces and reports.

use crate::adapt::{adapt_step, AdaptError, AdaptState, Method};
use crate::config::{ConfigError, ExperimentConfig};
use crate::models::{pretrain, Checkpoint, Model, ModelError};
use crate::shiftgen::{build_stream, gen_source, SourceData, StreamError};
use crate::telemetry::{
    write_report_json, write_trace_csv, MetricsAccumulator, RunReport, StepTrace, TelemetryError,
};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::PathBuf;
use thiserror::Error;

/// Runner failures, split so the CLI can distinguish bad input (exit 2) from
/// runtime trouble (exit 1).
#[derive(Debug, Error)]
pub enum RunError {
    #[error("validation: {0}")]
    Validation(String),
    #[error("runtime: {0}")]
    Runtime(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Validation(_) => 2,
            RunError::Runtime(_) => 1,
        }
    }
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => RunError::Runtime(e.to_string()),
            _ => RunError::Validation(e.to_string()),
        }
    }
}

impl From<StreamError> for RunError {
    fn from(e: StreamError) -> Self {
        RunError::Validation(e.to_string())
    }
}

impl From<ModelError> for RunError {
    fn from(e: ModelError) -> Self {
        match e {
            // an epoch/lr budget that cannot reach the accuracy target is a
            // configuration problem, not a runtime fault
            ModelError::PretrainTargetMissed { .. } => RunError::Validation(e.to_string()),
            _ => RunError::Runtime(e.to_string()),
        }
    }
}

impl From<AdaptError> for RunError {
    fn from(e: AdaptError) -> Self {
        RunError::Runtime(e.to_string())
    }
}

impl From<TelemetryError> for RunError {
    fn from(e: TelemetryError) -> Self {
        RunError::Runtime(e.to_string())
    }
}

/// One finished (seed, method) run with its on-disk artifact paths.
#[derive(Debug)]
pub struct RunOutput {
    pub report: RunReport,
    pub traces: Vec<StepTrace>,
    pub trace_path: PathBuf,
    pub report_path: PathBuf,
}

/// Loads the checkpoint or pretrains the source model, per config.
pub fn prepare_model(cfg: &ExperimentConfig, source: &SourceData) -> Result<Model, RunError> {
    if !cfg.model.pretrain {
        let path = cfg
            .model
            .checkpoint
            .as_ref()
            .ok_or_else(|| RunError::Validation("no checkpoint to load".into()))?;
        if !path.exists() {
            return Err(RunError::Validation(format!(
                "checkpoint {} does not exist",
                path.display()
            )));
        }
        return Ok(Checkpoint::load(path)?.into_model()?);
    }
    let mut model = Model::new(
        source.train.dim,
        source.train.class_count,
        cfg.norm_kind(),
        cfg.model.freeze_top,
        cfg.source.seed,
    )?;
    pretrain(
        &mut model,
        &source.train,
        cfg.model.pretrain_epochs,
        cfg.model.pretrain_lr,
        cfg.source.seed,
    )?;
    if let Some(path) = &cfg.model.checkpoint {
        Checkpoint::from_model(&model).save(path)?;
    }
    Ok(model)
}

/// Config echo embedded in each report: the experiment as actually run for
/// that seed (stream seeded with the run seed, single-element seed list).
fn config_echo(cfg: &ExperimentConfig, seed: u64) -> serde_json::Value {
    let mut echo = cfg.clone();
    echo.stream.seed = seed;
    echo.seeds = vec![seed];
    serde_json::to_value(&echo).expect("config serializes")
}

/// Runs the configured experiment once per seed, writing one trace CSV and
/// one report JSON per run into the output directory.
pub fn run(cfg: &ExperimentConfig) -> Result<Vec<RunOutput>, RunError> {
    cfg.validate()?;
    let out_dir = cfg.resolved_out_dir();
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| RunError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;

    let source = gen_source(&cfg.source)?;
    let base_model = prepare_model(cfg, &source)?;
    let method = cfg.adapt.method;

    let mut outputs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let started = std::time::Instant::now();
        let mut stream_spec = cfg.stream.clone();
        stream_spec.seed = seed;
        let stream = build_stream(&stream_spec, &source.test, source.within_class_std)?;

        let model = base_model.clone_model();
        model.set_adaptation_trainable();
        let mut state = AdaptState::new(&model);
        let mut metrics = MetricsAccumulator::new(model.class_count);
        let mut traces = Vec::with_capacity(stream.batches.len());

        for batch in &stream.batches {
            let outcome = adapt_step(&model, &batch.features, &cfg.adapt, &mut state)?;
            let kinds: Vec<&str> = batch.kinds.iter().map(|k| k.name()).collect();
            metrics.update_with_kinds(&outcome.predictions, &batch.labels, &kinds)?;
            traces.push(StepTrace {
                step: batch.step,
                batch_size: batch.labels.len(),
                selected: outcome.selected,
                selected2: outcome.selected2,
                mean_entropy: outcome.mean_entropy,
                grad_norm: outcome.grad_norm,
                accuracy: metrics.accuracy(),
                modal_fraction: metrics.modal_fraction(),
                recovered: outcome.recovered,
                skipped: outcome.skipped,
            });
        }

        let expected_backward = match method {
            Method::Sar => 2 * state.update_count,
            Method::Noadapt | Method::Tent | Method::ClipValue | Method::ClipNorm => {
                state.update_count
            }
        };
        if state.backward_count != expected_backward {
            return Err(RunError::Runtime(format!(
                "backward accounting violated: {} backward passes for {} updates ({})",
                state.backward_count,
                state.update_count,
                method.name()
            )));
        }

        let report = RunReport {
            method: method.name().to_string(),
            norm: cfg.model.norm.name().to_string(),
            seed,
            config: config_echo(cfg, seed),
            final_accuracy: metrics.accuracy(),
            per_corruption_accuracy: metrics.per_corruption_accuracy(),
            update_count: state.update_count,
            backward_count: state.backward_count,
            recovery_count: state.recovery_count,
            collapse: metrics.collapse_fired(),
            samples_seen: metrics.samples_seen(),
            duration_seconds: started.elapsed().as_secs_f64(),
        };

        let stem = format!("{}_{}_seed{}", report.method, report.norm, seed);
        let trace_path = out_dir.join(format!("{stem}.csv"));
        let report_path = out_dir.join(format!("{stem}.json"));
        write_trace_csv(&trace_path, &traces)?;
        write_report_json(&report_path, &report)?;
        outputs.push(RunOutput {
            report,
            traces,
            trace_path,
            report_path,
        });
    }
    Ok(outputs)
}

/// Per-method aggregate over seeds.
#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    /// Sample standard deviation (n − 1 denominator); 0 for a single seed.
    pub stdev_accuracy: f64,
    pub per_corruption_mean: BTreeMap<String, f64>,
    pub collapse_count: usize,
    pub recovery_total: u64,
}

/// Cross-method comparison over a shared stream configuration.
#[derive(Debug, Clone, Serialize)]
pub struct CompareSummary {
    pub methods: BTreeMap<String, MethodSummary>,
}

pub fn mean_stdev(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let stdev = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, stdev)
}

/// Stream identity for the fair-comparison check: the echoed source and
/// stream configs with the per-run seed field removed.
fn stream_identity(report: &RunReport) -> serde_json::Value {
    let mut stream = report.config.get("stream").cloned().unwrap_or_default();
    if let Some(obj) = stream.as_object_mut() {
        obj.remove("seed");
    }
    serde_json::json!({
        "source": report.config.get("source").cloned().unwrap_or_default(),
        "stream": stream,
    })
}

/// Aggregates reports into per-method mean ± stdev accuracy. Rejects reports
/// whose streams differ — methods are only comparable on the same streams.
pub fn compare(reports: &[RunReport]) -> Result<CompareSummary, RunError> {
    let first = reports
        .first()
        .ok_or_else(|| RunError::Validation("compare needs at least one report".into()))?;
    let identity = stream_identity(first);
    for r in &reports[1..] {
        if stream_identity(r) != identity {
            return Err(RunError::Validation(format!(
                "heterogeneous streams: report for {}/seed {} was produced on a different stream config",
                r.method, r.seed
            )));
        }
    }

    let mut groups: BTreeMap<String, Vec<&RunReport>> = BTreeMap::new();
    for r in reports {
        groups.entry(r.method.clone()).or_default().push(r);
    }

    let mut methods = BTreeMap::new();
    for (name, group) in groups {
        let accuracies: Vec<f64> = group.iter().map(|r| r.final_accuracy).collect();
        let (mean_accuracy, stdev_accuracy) = mean_stdev(&accuracies);
        let mut per_kind: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for r in &group {
            for (k, v) in &r.per_corruption_accuracy {
                let slot = per_kind.entry(k.clone()).or_insert((0.0, 0));
                slot.0 += v;
                slot.1 += 1;
            }
        }
        methods.insert(
            name,
            MethodSummary {
                seeds: group.iter().map(|r| r.seed).collect(),
                accuracies,
                mean_accuracy,
                stdev_accuracy,
                per_corruption_mean: per_kind
                    .into_iter()
                    .map(|(k, (s, n))| (k, s / n as f64))
                    .collect(),
                collapse_count: group.iter().filter(|r| r.collapse).count(),
                recovery_total: group.iter().map(|r| r.recovery_count).sum(),
            },
        );
    }
    Ok(CompareSummary { methods })
}

impl CompareSummary {
    /// Aligned-text rendering of the comparison table.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>5} {:>10} {:>9} {:>9} {:>10}\n",
            "method", "seeds", "mean_acc", "stdev", "collapse", "recoveries"
        ));
        for (name, m) in &self.methods {
            out.push_str(&format!(
                "{:<12} {:>5} {:>10.4} {:>9.4} {:>9} {:>10}\n",
                name,
                m.seeds.len(),
                m.mean_accuracy,
                m.stdev_accuracy,
                m.collapse_count,
                m.recovery_total
            ));
        }
        let mixed: Vec<(&String, &MethodSummary)> = self
            .methods
            .iter()
            .filter(|(_, m)| m.per_corruption_mean.len() > 1)
            .collect();
        if !mixed.is_empty() {
            out.push_str("\nper-corruption mean accuracy:\n");
            for (name, m) in mixed {
                for (kind, acc) in &m.per_corruption_mean {
                    out.push_str(&format!("{:<12} {:<16} {:>10.4}\n", name, kind, acc));
                }
            }
        }
        out
    }
}
