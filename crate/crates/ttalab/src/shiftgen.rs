//! Synthetic source data, severity-scaled corruptions, and wild test-stream
//! assembly: mixed shifts, controlled batch sizes, and online imbalanced
//! label distribution shifts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("need at least 2 samples per class, got {0}")]
    TooFewSamples(usize),
    #[error("invalid source spec: {0}")]
    BadSourceSpec(String),
    #[error("severity must be in 1..=5, got {0}")]
    BadSeverity(u8),
    #[error("imbalance ratio must be >= 1 (or inf), got {0}")]
    BadImbalanceRatio(f64),
    #[error("step index {t} out of range 1..={total}")]
    BadStepIndex { t: usize, total: usize },
    #[error("batch size {batch} exceeds stream length {len}")]
    BatchTooLarge { batch: usize, len: usize },
    #[error("stream needs at least one corruption kind")]
    NoCorruptions,
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Gaussian-cluster source: class c is an isotropic unit Gaussian around a
/// seeded center of norm `separation`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SourceSpec {
    pub class_count: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub separation: f64,
    pub seed: u64,
}

impl Default for SourceSpec {
    fn default() -> Self {
        SourceSpec {
            class_count: 10,
            dim: 32,
            n_per_class: 500,
            separation: 4.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub dim: usize,
    pub class_count: usize,
}

#[derive(Debug, Clone)]
pub struct SourceData {
    pub train: Dataset,
    pub test: Dataset,
    /// Mean per-coordinate standard deviation within a class, measured on the
    /// train split. Corruption magnitudes are scaled by this.
    pub within_class_std: f64,
}

const TRAIN_FRACTION: f64 = 0.8;

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per call keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Deterministic labeled dataset with disjoint train/test splits.
pub fn gen_source(spec: &SourceSpec) -> Result<SourceData, StreamError> {
    if spec.class_count < 2 {
        return Err(StreamError::BadSourceSpec(format!(
            "class_count must be >= 2, got {}",
            spec.class_count
        )));
    }
    if spec.dim < 2 {
        return Err(StreamError::BadSourceSpec(format!(
            "dim must be >= 2, got {}",
            spec.dim
        )));
    }
    if spec.n_per_class < 2 {
        return Err(StreamError::TooFewSamples(spec.n_per_class));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x736f75726365);
    let mut centers = Vec::with_capacity(spec.class_count);
    for _ in 0..spec.class_count {
        let mut dir: Vec<f64> = (0..spec.dim).map(|_| gaussian(&mut rng)).collect();
        let norm: f64 = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in dir.iter_mut() {
            *v = *v / norm * spec.separation;
        }
        centers.push(dir);
    }

    let n_train = ((spec.n_per_class as f64) * TRAIN_FRACTION).round() as usize;
    let mut train = Dataset {
        features: Vec::new(),
        labels: Vec::new(),
        dim: spec.dim,
        class_count: spec.class_count,
    };
    let mut test = train.clone();
    for (c, center) in centers.iter().enumerate() {
        for i in 0..spec.n_per_class {
            let x: Vec<f64> = center.iter().map(|m| m + gaussian(&mut rng)).collect();
            let (ds, _) = if i < n_train {
                (&mut train, ())
            } else {
                (&mut test, ())
            };
            ds.features.push(x);
            ds.labels.push(c);
        }
    }

    // within-class per-coordinate std, averaged over classes and coordinates
    let mut acc = 0.0;
    let mut count = 0usize;
    for c in 0..spec.class_count {
        let rows: Vec<&Vec<f64>> = train
            .features
            .iter()
            .zip(&train.labels)
            .filter(|(_, l)| **l == c)
            .map(|(f, _)| f)
            .collect();
        for j in 0..spec.dim {
            let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / col.len() as f64;
            acc += var.sqrt();
            count += 1;
        }
    }
    Ok(SourceData {
        train,
        test,
        within_class_std: acc / count as f64,
    })
}

/// Vector-space corruption family. Severity 1..=5 is strictly monotone in
/// magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    FeatureScale,
    ConstantShift,
    FeatureDropout,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::FeatureScale,
        CorruptionKind::ConstantShift,
        CorruptionKind::FeatureDropout,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::FeatureScale => "feature_scale",
            CorruptionKind::ConstantShift => "constant_shift",
            CorruptionKind::FeatureDropout => "feature_dropout",
        }
    }

    pub fn parse(s: &str) -> Option<CorruptionKind> {
        CorruptionKind::ALL.iter().copied().find(|k| k.name() == s)
    }

    fn id(&self) -> u64 {
        match self {
            CorruptionKind::GaussianNoise => 1,
            CorruptionKind::FeatureScale => 2,
            CorruptionKind::ConstantShift => 3,
            CorruptionKind::FeatureDropout => 4,
        }
    }
}

const NOISE_SIGMA: [f64; 5] = [0.25, 0.5, 1.0, 1.5, 2.0];
const SCALE_FACTOR: [f64; 5] = [0.8, 0.6, 0.45, 0.3, 0.2];
const SHIFT_MAGNITUDE: [f64; 5] = [0.5, 1.0, 2.0, 3.0, 4.0];
const DROPOUT_FRACTION: [f64; 5] = [0.10, 0.20, 0.35, 0.50, 0.65];

fn mix_seed(seed: u64, index: u64, kind: u64) -> u64 {
    // splitmix64-style mixing
    let mut z = seed
        .wrapping_add(index.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(kind.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Fixed unit direction used by `constant_shift`, derived from the stream
/// seed only.
pub fn shift_direction(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0, 99));
    let mut dir: Vec<f64> = (0..dim).map(|_| gaussian(&mut rng)).collect();
    let norm: f64 = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    for v in dir.iter_mut() {
        *v /= norm;
    }
    dir
}

/// Applies one corruption. Deterministic per (stream seed, sample index,
/// kind). `std_scale` is the source within-class std.
pub fn corrupt(
    x: &[f64],
    kind: CorruptionKind,
    severity: u8,
    std_scale: f64,
    stream_seed: u64,
    sample_index: u64,
) -> Result<Vec<f64>, StreamError> {
    if !(1..=5).contains(&severity) {
        return Err(StreamError::BadSeverity(severity));
    }
    let level = (severity - 1) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(stream_seed, sample_index, kind.id()));
    let out = match kind {
        CorruptionKind::GaussianNoise => {
            let sigma = NOISE_SIGMA[level] * std_scale;
            x.iter().map(|v| v + sigma * gaussian(&mut rng)).collect()
        }
        CorruptionKind::FeatureScale => {
            let f = SCALE_FACTOR[level];
            x.iter().map(|v| v * f).collect()
        }
        CorruptionKind::ConstantShift => {
            let b = SHIFT_MAGNITUDE[level] * std_scale;
            let dir = shift_direction(x.len(), stream_seed);
            x.iter().zip(&dir).map(|(v, d)| v + b * d).collect()
        }
        CorruptionKind::FeatureDropout => {
            let keep_out = (DROPOUT_FRACTION[level] * x.len() as f64).round() as usize;
            let mut idx: Vec<usize> = (0..x.len()).collect();
            for i in (1..idx.len()).rev() {
                let j = rng.gen_range(0..=i);
                idx.swap(i, j);
            }
            let mut out = x.to_vec();
            for &i in idx.iter().take(keep_out) {
                out[i] = 0.0;
            }
            out
        }
    };
    Ok(out)
}

/// Time-varying label marginal with a dominant class.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDistribution {
    pub q: Vec<f64>,
    pub q_max: f64,
    pub q_min: f64,
}

/// Dominant-class distribution at step `t` (1-based): q_max = r/(r+C-1) for
/// the step's class, q_min for the rest; r = inf gives a one-hot vector.
pub fn label_dist(t: usize, class_count: usize, ratio: f64) -> Result<LabelDistribution, StreamError> {
    if !(ratio >= 1.0) {
        return Err(StreamError::BadImbalanceRatio(ratio));
    }
    if t < 1 || t > class_count {
        return Err(StreamError::BadStepIndex {
            t,
            total: class_count,
        });
    }
    let c = class_count as f64;
    let (q_max, q_min) = if ratio.is_infinite() {
        (1.0, 0.0)
    } else {
        let q_max = ratio / (ratio + c - 1.0);
        (q_max, (1.0 - q_max) / (c - 1.0))
    };
    let mut q = vec![q_min; class_count];
    q[t - 1] = q_max;
    Ok(LabelDistribution { q, q_max, q_min })
}

/// Full description of a wild test stream.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct StreamSpec {
    pub kinds: Vec<CorruptionKind>,
    pub severity: u8,
    pub batch_size: usize,
    /// q_max/q_min; f64::INFINITY means class-ordered arrival. Serialized as
    /// the string "inf" in that case (JSON has no infinity literal).
    #[serde(with = "imbalance_serde")]
    pub imbalance_ratio: f64,
    /// Samples drawn per time-step.
    pub m_per_step: usize,
    /// Number of time-steps; defaults to the class count.
    pub steps: Option<usize>,
    pub seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        StreamSpec {
            kinds: vec![CorruptionKind::GaussianNoise],
            severity: 3,
            batch_size: 64,
            imbalance_ratio: 1.0,
            m_per_step: 100,
            steps: None,
            seed: 0,
        }
    }
}

/// Serde helper so imbalance ratios survive JSON: finite ratios are plain
/// numbers, infinity is the string "inf".
mod imbalance_serde {
    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t.trim().eq_ignore_ascii_case("inf") => Ok(f64::INFINITY),
            Repr::Text(t) => Err(D::Error::custom(format!(
                "imbalance_ratio must be a number or \"inf\", got {t:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StreamBatch {
    pub step: usize,
    pub features: Vec<Vec<f64>>,
    /// Ground truth, for metrics only; never shown to adaptation.
    pub labels: Vec<usize>,
    pub kinds: Vec<CorruptionKind>,
}

#[derive(Debug, Clone)]
pub struct Stream {
    pub spec: StreamSpec,
    pub batches: Vec<StreamBatch>,
}

impl Stream {
    pub fn total_samples(&self) -> usize {
        self.batches.iter().map(|b| b.labels.len()).sum()
    }
}

/// Assembles the ordered corrupted stream from a clean test split.
///
/// Class identities are pre-shuffled before assignment to time-steps. Within
/// a step, samples are drawn per the step's label distribution without
/// replacement until a class pool is exhausted, then with replacement. Mixed
/// mode assigns each sample a corruption kind uniformly at random.
pub fn build_stream(
    spec: &StreamSpec,
    test: &Dataset,
    within_class_std: f64,
) -> Result<Stream, StreamError> {
    if spec.kinds.is_empty() {
        return Err(StreamError::NoCorruptions);
    }
    if !(spec.imbalance_ratio >= 1.0) {
        return Err(StreamError::BadImbalanceRatio(spec.imbalance_ratio));
    }
    if !(1..=5).contains(&spec.severity) {
        return Err(StreamError::BadSeverity(spec.severity));
    }
    let class_count = test.class_count;
    let steps = spec.steps.unwrap_or(class_count).min(class_count).max(1);
    let total = spec.m_per_step * steps;
    if spec.batch_size == 0 || spec.batch_size > total {
        return Err(StreamError::BatchTooLarge {
            batch: spec.batch_size,
            len: total,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 1, 7));
    // pre-shuffle which class dominates each step
    let mut class_order: Vec<usize> = (0..class_count).collect();
    for i in (1..class_order.len()).rev() {
        let j = rng.gen_range(0..=i);
        class_order.swap(i, j);
    }
    // shuffled per-class pools of test-split indices
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for (i, &l) in test.labels.iter().enumerate() {
        pools[l].push(i);
    }
    let full_pools = pools.clone();
    for pool in pools.iter_mut() {
        for i in (1..pool.len()).rev() {
            let j = rng.gen_range(0..=i);
            pool.swap(i, j);
        }
    }

    let mut ordered: Vec<(usize, usize, CorruptionKind)> = Vec::with_capacity(total); // (step, test index, kind)
    for t in 1..=steps {
        let dist = label_dist(t, class_count, spec.imbalance_ratio)?;
        for _ in 0..spec.m_per_step {
            // class of this draw, through the pre-shuffled order
            let u: f64 = rng.gen_range(0.0..1.0);
            let mut acc = 0.0;
            let mut slot = class_count - 1;
            for (c, qc) in dist.q.iter().enumerate() {
                acc += qc;
                if u < acc {
                    slot = c;
                    break;
                }
            }
            let class = class_order[slot];
            let idx = match pools[class].pop() {
                Some(i) => i,
                None => {
                    // pool exhausted: draw with replacement from the full pool
                    let full = &full_pools[class];
                    full[rng.gen_range(0..full.len())]
                }
            };
            let kind = if spec.kinds.len() == 1 {
                spec.kinds[0]
            } else {
                spec.kinds[rng.gen_range(0..spec.kinds.len())]
            };
            ordered.push((t, idx, kind));
        }
    }

    let mut batches = Vec::new();
    for (bi, chunk) in ordered.chunks(spec.batch_size).enumerate() {
        let mut features = Vec::with_capacity(chunk.len());
        let mut labels = Vec::with_capacity(chunk.len());
        let mut kinds = Vec::with_capacity(chunk.len());
        for (offset, (step, idx, kind)) in chunk.iter().enumerate() {
            let sample_index = (bi * spec.batch_size + offset) as u64;
            let x = corrupt(
                &test.features[*idx],
                *kind,
                spec.severity,
                within_class_std,
                spec.seed,
                sample_index,
            )?;
            features.push(x);
            labels.push(test.labels[*idx]);
            kinds.push(*kind);
            debug_assert!(*step >= 1);
        }
        batches.push(StreamBatch {
            step: chunk[0].0,
            features,
            labels,
            kinds,
        });
    }
    Ok(Stream {
        spec: spec.clone(),
        batches,
    })
}

/// Line-delimited audit dump: step, batch index, kind, severity, hidden
/// label, then the feature vector.
pub fn dump_stream<W: Write>(stream: &Stream, mut w: W) -> std::io::Result<()> {
    for (bi, batch) in stream.batches.iter().enumerate() {
        for i in 0..batch.labels.len() {
            let feats: Vec<String> = batch.features[i].iter().map(|v| v.to_string()).collect();
            writeln!(
                w,
                "{},{},{},{},{},{}",
                batch.step,
                bi,
                batch.kinds[i].name(),
                stream.spec.severity,
                batch.labels[i],
                feats.join(" ")
            )?;
        }
    }
    Ok(())
}
