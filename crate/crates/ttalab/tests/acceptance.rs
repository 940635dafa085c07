//! End-to-end acceptance suite. Each test prints one pass/fail line for its
//! criterion (run with `--nocapture` to see them on success).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Instant;
use ttalab::adapt::{
    adapt_step, entropy, maybe_recover, sam_perturbation, sar_step, AdaptConfig, AdaptState,
    Method,
};
use ttalab::config::{ExperimentConfig, NormName};
use ttalab::models::{
    norm_forward, pretrain, AffineParams, Checkpoint, ForwardMode, Model, NormKind,
};
use ttalab::runner::run;
use ttalab::shiftgen::{build_stream, gen_source, label_dist, SourceSpec, StreamSpec};
use ttalab::tensor::{finite_diff_check, NormUnit, Tape, Tensor};

// ---------------------------------------------------------------------------
// harness

fn criterion(n: u32, desc: &str, check: impl FnOnce() -> Result<String, String>) {
    match check() {
        Ok(detail) => println!("[criterion {n:2}] PASS — {desc} ({detail})"),
        Err(why) => {
            println!("[criterion {n:2}] FAIL — {desc}: {why}");
            panic!("criterion {n} failed: {why}");
        }
    }
}

/// Pretrained checkpoints shared across criteria, built once per norm kind.
fn checkpoint_path(norm: NormName) -> PathBuf {
    static LOCK: Mutex<()> = Mutex::new(());
    let _guard = LOCK.lock().unwrap();
    let dir = std::env::temp_dir().join(format!("ttalab-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join(format!("{}.ckpt.json", norm.name()));
    if !path.exists() {
        let source = gen_source(&SourceSpec::default()).unwrap();
        let cfg = ExperimentConfig::default();
        let mut model = Model::new(
            source.train.dim,
            source.train.class_count,
            norm.to_kind(cfg.model.group_count),
            cfg.model.freeze_top,
            cfg.source.seed,
        )
        .unwrap();
        pretrain(
            &mut model,
            &source.train,
            cfg.model.pretrain_epochs,
            cfg.model.pretrain_lr,
            cfg.source.seed,
        )
        .unwrap();
        Checkpoint::from_model(&model).save(&path).unwrap();
    }
    path
}

/// Experiment config using the shared checkpoint for `norm`.
fn base_config(norm: NormName, out: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.model.norm = norm;
    cfg.model.checkpoint = Some(checkpoint_path(norm));
    cfg.model.pretrain = false;
    cfg.out_dir = Some(out.to_path_buf());
    cfg.seeds = vec![0, 1, 2];
    cfg
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect()
}

fn bits(v: &[Vec<f64>]) -> Vec<Vec<u64>> {
    v.iter()
        .map(|p| p.iter().map(|x| x.to_bits()).collect())
        .collect()
}

// ---------------------------------------------------------------------------
// criteria

#[test]
fn criterion_01_autodiff_correctness() {
    criterion(1, "autodiff matches finite differences", || {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst = 0.0f64;
        for case in 0..20u64 {
            let d = rng.gen_range(3..=6);
            let w = 2 * rng.gen_range(3..=4); // even width, group width >= 3
            let c = rng.gen_range(2..=5);
            let b = rng.gen_range(3..=6);
            let unit = match case % 3 {
                0 => NormUnit::PerFeature,
                1 => NormUnit::PerSample { groups: 2 },
                _ => NormUnit::PerSample { groups: 1 },
            };
            let param_count = d * w + w + w + w + w * c + c;
            assert!(param_count <= 1000, "config exceeds the parameter budget");

            let rand_t = |rng: &mut ChaCha8Rng, shape: Vec<usize>| {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let t = Tensor::from_vec(shape, data).unwrap();
                t.set_requires_grad(true);
                t
            };
            let w1 = rand_t(&mut rng, vec![d, w]);
            let b1 = rand_t(&mut rng, vec![w]);
            let gamma = rand_t(&mut rng, vec![w]);
            let beta = rand_t(&mut rng, vec![w]);
            let w2 = rand_t(&mut rng, vec![w, c]);
            let b2 = rand_t(&mut rng, vec![c]);
            // Batch standardization is exactly invariant to a pre-norm bias
            // (the usual reason BN layers follow bias-free linears), which
            // makes the finite-difference ratio 0/0; drop it for that unit.
            let params: Vec<Tensor> = if unit == NormUnit::PerFeature {
                vec![w1, gamma, beta, w2, b2]
            } else {
                vec![w1, b1, gamma, beta, w2, b2]
            };
            // mean-entropy loss through linear → norm → affine → relu → linear
            let (w1, b1, gamma, beta, w2, b2, use_b1) = match params.as_slice() {
                [w1, gamma, beta, w2, b2] => {
                    (w1, w2 /* unused slot */, gamma, beta, w2, b2, false)
                }
                [w1, b1, gamma, beta, w2, b2] => (w1, b1, gamma, beta, w2, b2, true),
                _ => unreachable!(),
            };
            let forward = |x: &Tensor| -> Result<(Tape, Tensor, Tensor), _> {
                let tape = Tape::new();
                let mut h = tape.matmul(x, w1)?;
                if use_b1 {
                    h = tape.add_row(&h, b1)?;
                }
                let n = tape.standardize(&h, unit, 1e-5)?;
                let pre = tape.add_row(&tape.mul_row(&n, gamma)?, beta)?;
                let h = tape.relu(&pre)?;
                let z = tape.add_row(&tape.matmul(&h, w2)?, b2)?;
                Ok((tape, pre, z))
            };

            // Finite differences are meaningless across a relu kink; draw
            // inputs until every pre-relu activation has a safe margin.
            let x = loop {
                let cand = Tensor::from_vec(
                    vec![b, d],
                    (0..b * d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                )
                .unwrap();
                let (_, pre, _) = forward(&cand).unwrap();
                if pre.data().iter().all(|v: &f64| v.abs() > 1e-3) {
                    break cand;
                }
            };

            let loss_fn = || {
                let (tape, _, z) = forward(&x)?;
                let lse = tape.logsumexp_rows(&z)?;
                let probs = tape.softmax_rows(&z)?;
                let pz = tape.sum_all(&tape.mul(&probs, &z)?)?;
                let loss = tape.sub(&tape.mean_all(&lse)?, &tape.scale(&pz, 1.0 / b as f64)?)?;
                Ok((tape, loss))
            };
            let err = finite_diff_check(loss_fn, &params, 1e-5).map_err(|e| e.to_string())?;
            worst = worst.max(err);
        }
        let elapsed = started.elapsed().as_secs_f64();
        if worst >= 1e-4 {
            return Err(format!("max relative error {worst:.3e} >= 1e-4"));
        }
        if elapsed >= 30.0 {
            return Err(format!("took {elapsed:.1}s >= 30s"));
        }
        Ok(format!("max rel err {worst:.3e} in {elapsed:.2}s"))
    });
}

#[test]
fn criterion_02_norm_layer_statistics() {
    criterion(2, "norm-layer statistics and batch agnosticism", || {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let (b, w) = (16, 8);
        let data: Vec<f64> = (0..b * w).map(|_| rng.gen_range(-3.0..3.0) * 3.0).collect();
        let x = Tensor::from_vec(vec![b, w], data.clone()).unwrap();
        let identity = AffineParams::identity(w);

        // per-unit standardization: |mean| < 1e-6 and |var - 1| < 1e-3
        for (kind, desc) in [
            (NormKind::BatchTest, "bn"),
            (NormKind::Group(2), "gn"),
            (NormKind::Layer, "ln"),
        ] {
            let tape = Tape::new();
            let y = norm_forward(&tape, &x, kind, &identity, None, ForwardMode::TestBatch)
                .map_err(|e| e.to_string())?;
            let yd = y.data();
            let units: Vec<Vec<f64>> = match kind {
                NormKind::BatchTest => (0..w)
                    .map(|j| (0..b).map(|i| yd[i * w + j]).collect())
                    .collect(),
                NormKind::Group(g) => {
                    let gw = w / g;
                    (0..b * g)
                        .map(|u| {
                            let (i, k) = (u / g, u % g);
                            (0..gw).map(|j| yd[i * w + k * gw + j]).collect()
                        })
                        .collect()
                }
                NormKind::Layer => (0..b).map(|i| yd[i * w..(i + 1) * w].to_vec()).collect(),
            };
            for unit in units {
                let n = unit.len() as f64;
                let mean = unit.iter().sum::<f64>() / n;
                let var = unit.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                if mean.abs() >= 1e-6 {
                    return Err(format!("{desc} unit mean {mean:.3e} >= 1e-6"));
                }
                if (var - 1.0).abs() >= 1e-3 {
                    return Err(format!("{desc} unit var deviates: {var}"));
                }
            }
        }

        // Group(1) ≡ Layer
        let tape = Tape::new();
        let g1 = norm_forward(&tape, &x, NormKind::Group(1), &identity, None, ForwardMode::TestBatch)
            .map_err(|e| e.to_string())?;
        let ln = norm_forward(&tape, &x, NormKind::Layer, &identity, None, ForwardMode::TestBatch)
            .map_err(|e| e.to_string())?;
        for (a, b) in g1.data().iter().zip(ln.data()) {
            if (a - b).abs() >= 1e-12 {
                return Err("Group(1) differs from Layer".into());
            }
        }

        // GN/LN ignore co-batch composition: permuting rows permutes outputs
        let perm: Vec<usize> = (0..b).rev().collect();
        let permuted: Vec<f64> = perm
            .iter()
            .flat_map(|&i| data[i * w..(i + 1) * w].to_vec())
            .collect();
        let xp = Tensor::from_vec(vec![b, w], permuted).unwrap();
        for kind in [NormKind::Group(2), NormKind::Layer] {
            let tape = Tape::new();
            let y = norm_forward(&tape, &x, kind, &identity, None, ForwardMode::TestBatch)
                .map_err(|e| e.to_string())?;
            let yp = norm_forward(&tape, &xp, kind, &identity, None, ForwardMode::TestBatch)
                .map_err(|e| e.to_string())?;
            let (yd, ypd) = (y.data(), yp.data());
            for (row, &src) in perm.iter().enumerate() {
                for j in 0..w {
                    if (yd[src * w + j] - ypd[row * w + j]).abs() >= 1e-12 {
                        return Err(format!("{kind:?} output depends on co-batch samples"));
                    }
                }
            }
        }
        Ok("bn/gn/ln unit stats, Group(1)≡Layer, permutation invariance".into())
    });
}

#[test]
fn criterion_03_perturbation_norm() {
    criterion(3, "SAM perturbation has l2 norm rho", || {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..100 {
            let grads: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..17).map(|_| rng.gen_range(-4.0..4.0)).collect())
                .collect();
            let p = sam_perturbation(&grads, 0.05).ok_or("nonzero gradient rejected")?;
            let norm: f64 = p
                .epsilon
                .iter()
                .flat_map(|e| e.iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if (norm - 0.05).abs() >= 1e-9 {
                return Err(format!("|eps| = {norm} != 0.05"));
            }
            let zero = sam_perturbation(&grads, 0.0).ok_or("rho = 0 rejected")?;
            if zero.epsilon.iter().flatten().any(|&v| v != 0.0) {
                return Err("rho = 0 must give a zero perturbation".into());
            }
        }
        Ok("100 random gradients, |eps| within 1e-9 of rho".into())
    });
}

#[test]
fn criterion_04_rho_zero_filter_off_equals_tent() {
    criterion(4, "SAR(rho=0, filter off, no recovery) equals Tent", || {
        let class_count = 4;
        let make = || {
            let m = Model::new(8, class_count, NormKind::Group(8), false, 17).unwrap();
            m.set_adaptation_trainable();
            m
        };
        let (sar_model, tent_model) = (make(), make());
        let mut sar_state = AdaptState::new(&sar_model);
        let mut tent_state = AdaptState::new(&tent_model);
        let sar_cfg = AdaptConfig {
            method: Method::Sar,
            rho: 0.0,
            entropy_threshold: Some((class_count as f64).ln()),
            recovery: false,
            ..AdaptConfig::default()
        };
        let tent_cfg = AdaptConfig {
            method: Method::Tent,
            ..AdaptConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut worst = 0.0f64;
        for step in 0..50 {
            let batch = random_batch(&mut rng, 8, 8);
            sar_step(&sar_model, &batch, &sar_cfg, &mut sar_state).map_err(|e| e.to_string())?;
            ttalab::adapt::tent_step(&tent_model, &batch, &tent_cfg, &mut tent_state)
                .map_err(|e| e.to_string())?;
            for (a, b) in sar_model
                .trainable_params()
                .iter()
                .zip(tent_model.trainable_params())
            {
                for (x, y) in a.data().iter().zip(b.data()) {
                    let d = (x - y).abs();
                    worst = worst.max(d);
                    if d >= 1e-10 {
                        return Err(format!("params diverge by {d:.3e} at step {step}"));
                    }
                }
            }
        }
        Ok(format!("50 batches, max param divergence {worst:.3e}"))
    });
}

#[test]
fn criterion_05_filter_no_op() {
    criterion(5, "all-unreliable batch leaves SAR state untouched", || {
        let model = Model::new(8, 4, NormKind::Group(8), false, 17).unwrap();
        model.set_adaptation_trainable();
        let mut state = AdaptState::new(&model);
        state.e_m = Some(0.7);
        let cfg = AdaptConfig {
            method: Method::Sar,
            entropy_threshold: Some(1e-12), // nothing scores below this
            ..AdaptConfig::default()
        };
        let params_before = bits(&model
            .trainable_params()
            .iter()
            .map(|p| p.data())
            .collect::<Vec<_>>());
        let momentum_before = bits(state.momentum_buffers());
        let e_m_before = state.e_m;

        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let batch = random_batch(&mut rng, 8, 8);
        let outcome = sar_step(&model, &batch, &cfg, &mut state).map_err(|e| e.to_string())?;

        if outcome.selected != 0 || !outcome.skipped {
            return Err(format!(
                "expected an empty filter and a skipped step, got |S1| = {}",
                outcome.selected
            ));
        }
        let params_after = bits(&model
            .trainable_params()
            .iter()
            .map(|p| p.data())
            .collect::<Vec<_>>());
        if params_after != params_before {
            return Err("trainable parameters changed".into());
        }
        if bits(state.momentum_buffers()) != momentum_before {
            return Err("momentum buffers changed".into());
        }
        if state.e_m != e_m_before {
            return Err("entropy moving average changed".into());
        }
        if state.update_count != 0 || state.backward_count != 0 {
            return Err("counters advanced on a skipped batch".into());
        }
        Ok("params, momentum, and e_m bit-identical".into())
    });
}

#[test]
fn criterion_06_recovery_exactness() {
    criterion(6, "recovery restores the initial trainables exactly", || {
        let model = Model::new(8, 4, NormKind::Group(8), true, 17).unwrap();
        model.set_adaptation_trainable();
        let mut state = AdaptState::new(&model);
        let theta0 = bits(state.theta0());
        let frozen_before = bits(&model
            .all_params()
            .iter()
            .filter(|p| !p.requires_grad())
            .map(|p| p.data())
            .collect::<Vec<_>>());

        // drift the trainables with a few real updates
        let cfg = AdaptConfig {
            method: Method::Sar,
            entropy_threshold: Some((4f64).ln()),
            recovery: false,
            lr: 0.5,
            ..AdaptConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        for _ in 0..3 {
            let batch = random_batch(&mut rng, 8, 8);
            sar_step(&model, &batch, &cfg, &mut state).map_err(|e| e.to_string())?;
        }
        let drifted = bits(&model
            .trainable_params()
            .iter()
            .map(|p| p.data())
            .collect::<Vec<_>>());
        if drifted == theta0 {
            return Err("updates did not move the trainables; test is vacuous".into());
        }

        state.e_m = Some(0.1); // force e_m < e0 = 0.2
        if !maybe_recover(&model, &AdaptConfig::default(), &mut state) {
            return Err("recovery did not fire with e_m below the threshold".into());
        }
        let restored = bits(&model
            .trainable_params()
            .iter()
            .map(|p| p.data())
            .collect::<Vec<_>>());
        if restored != theta0 {
            return Err("trainables differ from the initial snapshot".into());
        }
        if state.momentum_buffers().iter().flatten().any(|&v| v != 0.0) {
            return Err("momentum buffers not zeroed".into());
        }
        let frozen_after = bits(&model
            .all_params()
            .iter()
            .filter(|p| !p.requires_grad())
            .map(|p| p.data())
            .collect::<Vec<_>>());
        if frozen_after != frozen_before {
            return Err("non-trainable parameters were touched".into());
        }
        if state.recovery_count != 1 || state.e_m.is_some() {
            return Err("recovery bookkeeping wrong".into());
        }
        Ok("bit-exact restore, momentum zeroed, frozen params untouched".into())
    });
}

#[test]
fn criterion_07_backward_accounting() {
    criterion(7, "SAR backward count is exactly 2x its update count", || {
        let source = gen_source(&SourceSpec::default()).map_err(|e| e.to_string())?;
        let model = Checkpoint::load(&checkpoint_path(NormName::Gn))
            .and_then(|c| c.into_model())
            .map_err(|e| e.to_string())?;
        model.set_adaptation_trainable();
        let spec = StreamSpec {
            m_per_step: 1000, // 10 steps x 1000 = 10^4 samples
            ..StreamSpec::default()
        };
        let stream =
            build_stream(&spec, &source.test, source.within_class_std).map_err(|e| e.to_string())?;
        if stream.total_samples() != 10_000 {
            return Err(format!("stream has {} samples", stream.total_samples()));
        }
        let cfg = AdaptConfig::default(); // SAR
        let mut state = AdaptState::new(&model);
        let mut nonempty_s1 = 0u64;
        for batch in &stream.batches {
            let outcome =
                adapt_step(&model, &batch.features, &cfg, &mut state).map_err(|e| e.to_string())?;
            if outcome.selected > 0 {
                nonempty_s1 += 1;
            }
        }
        if state.backward_count != 2 * state.update_count {
            return Err(format!(
                "backward {} != 2 x update {}",
                state.backward_count, state.update_count
            ));
        }
        if state.update_count != nonempty_s1 {
            return Err(format!(
                "update {} != nonempty-S1 batches {} (empty S2: {}, zero grad: {})",
                state.update_count,
                nonempty_s1,
                state.empty_second_mask_count,
                state.zero_gradient_count
            ));
        }
        Ok(format!(
            "{} updates, {} backwards over 10^4 samples",
            state.update_count, state.backward_count
        ))
    });
}

#[test]
fn criterion_08_entropy_identities() {
    criterion(8, "entropy identities", || {
        for c in [2usize, 10, 1000] {
            let uniform = vec![1.0 / c as f64; c];
            let e = entropy(&uniform, c).map_err(|e| e.to_string())?[0];
            if (e - (c as f64).ln()).abs() >= 1e-9 {
                return Err(format!("uniform-{c} entropy {e} != ln {c}"));
            }
        }
        let mut one_hot = vec![0.0; 10];
        one_hot[3] = 1.0;
        if entropy(&one_hot, 10).map_err(|e| e.to_string())?[0] != 0.0 {
            return Err("one-hot entropy is not exactly 0".into());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(88);
        for _ in 0..200 {
            let c = rng.gen_range(2..=20);
            let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.01..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            let e = entropy(&probs, c).map_err(|e| e.to_string())?[0];
            if !(0.0..=(c as f64).ln() + 1e-12).contains(&e) {
                return Err(format!("entropy {e} outside [0, ln {c}]"));
            }
        }
        Ok("uniform → ln C, one-hot → 0, range respected on 200 random rows".into())
    });
}

#[test]
fn criterion_09_label_shift_stream_validity() {
    criterion(9, "label-shift streams match their distributions", || {
        let source = gen_source(&SourceSpec::default()).map_err(|e| e.to_string())?;
        let c = source.test.class_count;

        // r = 1: uniform within 0.02 over 10^4 samples
        let spec = StreamSpec {
            m_per_step: 1000,
            imbalance_ratio: 1.0,
            ..StreamSpec::default()
        };
        let stream =
            build_stream(&spec, &source.test, source.within_class_std).map_err(|e| e.to_string())?;
        let mut counts = vec![0usize; c];
        for b in &stream.batches {
            for &l in &b.labels {
                counts[l] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        if total != 10_000 {
            return Err(format!("expected 10^4 samples, got {total}"));
        }
        for (class, &n) in counts.iter().enumerate() {
            let err = (n as f64 / total as f64 - 1.0 / c as f64).abs();
            if err >= 0.02 {
                return Err(format!("class {class} frequency off by {err:.4}"));
            }
        }

        // r = ∞: exact class order, every class exactly once
        let spec = StreamSpec {
            imbalance_ratio: f64::INFINITY,
            ..StreamSpec::default()
        };
        let stream =
            build_stream(&spec, &source.test, source.within_class_std).map_err(|e| e.to_string())?;
        // Batches may straddle step boundaries, so check the flattened
        // arrival sequence: m_per_step consecutive samples per class.
        let labels: Vec<usize> = stream
            .batches
            .iter()
            .flat_map(|b| b.labels.iter().copied())
            .collect();
        let mut step_classes: Vec<usize> = Vec::new();
        for (t, segment) in labels.chunks(spec.m_per_step).enumerate() {
            let class = segment[0];
            if segment.iter().any(|&l| l != class) {
                return Err(format!("step {t} mixes classes at r = inf"));
            }
            step_classes.push(class);
        }
        let mut seen = step_classes.clone();
        seen.sort_unstable();
        if seen != (0..c).collect::<Vec<_>>() {
            return Err("class-ordered stream does not cover every class once".into());
        }

        // q_max solves the ratio equation for r in {1, 4, 100}
        for r in [1.0, 4.0, 100.0] {
            let dist = label_dist(1, c, r).map_err(|e| e.to_string())?;
            let expected = r / (r + c as f64 - 1.0);
            if (dist.q_max - expected).abs() >= 1e-12 {
                return Err(format!("q_max({r}) = {} != {expected}", dist.q_max));
            }
            if (dist.q_max / dist.q_min - r).abs() >= 1e-9 {
                return Err(format!("q_max/q_min != {r}"));
            }
        }
        Ok("uniform freq within 0.02, exact class order at r=inf, q_max verified".into())
    });
}

#[test]
fn criterion_10_batch_size_failure_mode() {
    criterion(10, "small batches break test-time BN but not GN/LN", || {
        let started = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let seeds = [0u64, 1, 2];

        // per (norm, batch) accuracies over the 3 seeds, plus no-adapt per norm
        let accuracy = |norm: NormName, method: Method, batch: usize| -> Result<Vec<f64>, String> {
            let mut cfg = base_config(norm, dir.path());
            cfg.adapt.method = method;
            cfg.stream.batch_size = batch;
            let outputs = run(&cfg).map_err(|e| e.to_string())?;
            Ok(outputs.iter().map(|o| o.report.final_accuracy).collect())
        };
        let noadapt_bn = accuracy(NormName::Bn, Method::Noadapt, 64)?;
        let tent_bn_1 = accuracy(NormName::Bn, Method::Tent, 1)?;
        let tent_bn_2 = accuracy(NormName::Bn, Method::Tent, 2)?;
        let mut per_seed_ok = [true; 3];
        for s in 0..seeds.len() {
            per_seed_ok[s] &= tent_bn_1[s] < noadapt_bn[s] && tent_bn_2[s] < noadapt_bn[s];
        }
        for norm in [NormName::Gn, NormName::Ln] {
            let at_64 = accuracy(norm, Method::Tent, 64)?;
            let at_1 = accuracy(norm, Method::Tent, 1)?;
            let at_2 = accuracy(norm, Method::Tent, 2)?;
            for s in 0..seeds.len() {
                per_seed_ok[s] &=
                    (at_1[s] - at_64[s]).abs() <= 0.05 && (at_2[s] - at_64[s]).abs() <= 0.05;
            }
        }
        let holds = per_seed_ok.iter().filter(|&&ok| ok).count();
        let elapsed = started.elapsed().as_secs_f64();
        if holds < 2 {
            return Err(format!("directional claim holds in only {holds}/3 seeds"));
        }
        if elapsed >= 300.0 {
            return Err(format!("took {elapsed:.0}s >= 5 min"));
        }
        Ok(format!(
            "holds in {holds}/3 seeds; BN tent B=1 mean {:.3} vs no-adapt {:.3}; {elapsed:.0}s",
            tent_bn_1.iter().sum::<f64>() / 3.0,
            noadapt_bn.iter().sum::<f64>() / 3.0,
        ))
    });
}

#[test]
fn criterion_11_collapse_and_rescue() {
    criterion(11, "Tent collapses on the wild stream; SAR does not", || {
        let started = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let run_method = |method: Method| -> Result<Vec<_>, String> {
            let mut cfg = base_config(NormName::Gn, dir.path());
            cfg.stream.severity = 5;
            cfg.stream.imbalance_ratio = f64::INFINITY;
            cfg.adapt.method = method;
            cfg.adapt.lr = 2.0;
            let outputs = run(&cfg).map_err(|e| e.to_string())?;
            Ok(outputs.into_iter().map(|o| o.report).collect())
        };
        let noadapt = run_method(Method::Noadapt)?;
        let tent = run_method(Method::Tent)?;
        let sar = run_method(Method::Sar)?;

        let tent_collapses = tent.iter().filter(|r| r.collapse).count();
        if tent_collapses < 1 {
            return Err("Tent never triggered collapse detection".into());
        }
        if sar.iter().any(|r| r.collapse) {
            return Err("SAR triggered collapse detection".into());
        }
        for s in 0..3 {
            if sar[s].final_accuracy < tent[s].final_accuracy {
                return Err(format!(
                    "seed {s}: SAR {:.3} below Tent {:.3}",
                    sar[s].final_accuracy, tent[s].final_accuracy
                ));
            }
        }
        let beats_noadapt = (0..3)
            .filter(|&s| sar[s].final_accuracy >= noadapt[s].final_accuracy)
            .count();
        if beats_noadapt < 2 {
            return Err(format!("SAR >= no-adapt in only {beats_noadapt}/3 seeds"));
        }
        let elapsed = started.elapsed().as_secs_f64();
        if elapsed >= 300.0 {
            return Err(format!("took {elapsed:.0}s >= 5 min"));
        }
        Ok(format!(
            "Tent collapsed in {tent_collapses}/3 seeds, SAR never; SAR >= no-adapt in {beats_noadapt}/3; {elapsed:.0}s"
        ))
    });
}

#[test]
fn criterion_12_gradient_clip_dichotomy() {
    criterion(12, "clip threshold is either marginal or unstable", || {
        let dir = tempfile::tempdir().unwrap();
        let run_clip = |method: Method, clip_value: Option<f64>| -> Result<Vec<_>, String> {
            let mut cfg = base_config(NormName::Gn, dir.path());
            cfg.stream.severity = 5;
            cfg.stream.imbalance_ratio = f64::INFINITY;
            cfg.adapt.method = method;
            cfg.adapt.lr = 2.0;
            cfg.adapt.clip_value = clip_value;
            let outputs = run(&cfg).map_err(|e| e.to_string())?;
            Ok(outputs.into_iter().map(|o| o.report).collect())
        };
        let noadapt = run_clip(Method::Noadapt, None)?;
        let tiny = run_clip(Method::ClipValue, Some(1e-6))?;
        let large = run_clip(Method::ClipValue, Some(10.0))?;

        let mut holds = 0;
        for s in 0..3 {
            let marginal = (tiny[s].final_accuracy - noadapt[s].final_accuracy).abs() <= 0.02;
            let unstable = large[s].collapse;
            if marginal && unstable {
                holds += 1;
            }
        }
        if holds < 2 {
            return Err(format!("dichotomy holds in only {holds}/3 seeds"));
        }
        Ok(format!(
            "delta=1e-6 within 2 points of no-adapt and delta=10 collapses in {holds}/3 seeds"
        ))
    });
}

#[test]
fn criterion_13_byte_identical_reruns() {
    criterion(13, "seeded reruns are byte-identical", || {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_config(NormName::Gn, dir.path());
        cfg.adapt.method = Method::Sar;
        cfg.stream.m_per_step = 50;
        cfg.stream.batch_size = 16;
        cfg.seeds = vec![7];
        // identical config run twice into the same paths
        let first = run(&cfg).map_err(|e| e.to_string())?;
        let csv_first = std::fs::read(&first[0].trace_path).unwrap();
        let json_first = std::fs::read(&first[0].report_path).unwrap();
        let second = run(&cfg).map_err(|e| e.to_string())?;
        if std::fs::read(&second[0].trace_path).unwrap() != csv_first {
            return Err("trace CSVs differ between reruns".into());
        }
        if std::fs::read(&second[0].report_path).unwrap() != json_first {
            return Err("report JSONs differ between reruns".into());
        }
        Ok("trace CSV and report JSON byte-identical across reruns".into())
    });
}
