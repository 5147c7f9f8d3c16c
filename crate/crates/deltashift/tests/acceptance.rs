//! Acceptance gate: one test per release criterion, each printing a
//! `ACCEPT <n> <name>: PASS` line with its elapsed time on success.
//!
//! The criteria check the mathematical claims behind the method (projection
//! optimality, codec statistics, gradient fidelity, training dynamics,
//! method ordering, storage accounting, determinism) on seeded desk-scale
//! suites, each within a stated runtime budget.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use deltashift::codec::{
    dare_compress, dare_decompress, storage_bits, CodecSpec, CompressedDelta, DareCodecConfig,
};
use deltashift::dbms::{compute_base_vector, init_lambda1, BaseVector};
use deltashift::forward::{Activation, Batch, ForwardModel, Layer};
use deltashift::harness::{
    ablation_init, generate_suite, run_pipeline, storage_report, sweep_lambda_grid, task_codec,
    task_train_config, GridSpec, Method, SuiteConfig, SweepOptions, SyntheticSuite,
    LAMBDA_BITS_PER_TASK,
};
use deltashift::rng::SplitMix64;
use deltashift::tensor::{map_sub, Tensor, TensorMap};
use deltashift::train::{
    gradient, train_task_with_init, GradientMode, InitStrategy, LossContext, TrainConfig,
};

// ── Shared fixtures ─────────────────────────────────────────────────────────

/// The 20-task battery: 2-layer MLP tasks with a strong shared delta
/// component whose per-task magnitude varies, the regime the shifted-base
/// method is designed for. The widths keep enough parameters that a 99%-drop
/// mask retains a meaningful sample of the residual.
fn battery_config() -> SuiteConfig {
    SuiteConfig {
        tasks: 20,
        layer_widths: vec![32, 64, 8],
        shared_spread: 1.0,
        seed: 42,
        ..SuiteConfig::default()
    }
}

fn battery() -> &'static SyntheticSuite {
    static BATTERY: OnceLock<SyntheticSuite> = OnceLock::new();
    BATTERY.get_or_init(|| generate_suite(&battery_config()).expect("battery generates"))
}

/// Small demo suite for the fast structural criteria.
fn demo() -> &'static SyntheticSuite {
    static DEMO: OnceLock<SyntheticSuite> = OnceLock::new();
    DEMO.get_or_init(|| {
        generate_suite(&SuiteConfig {
            tasks: 4,
            layer_widths: vec![6, 10, 3],
            pool_size: 48,
            eval_size: 24,
            finetune_steps: 80,
            seed: 7,
            ..SuiteConfig::default()
        })
        .expect("demo generates")
    })
}

fn battery_train() -> TrainConfig {
    // steps 500, lr 1e-4, sample fraction 0.1, finite differences.
    TrainConfig::default()
}

fn dare(p: f64, seed: u64) -> CodecSpec {
    CodecSpec::Dare(DareCodecConfig {
        sparse_rate: p,
        seed,
    })
}

fn pass(n: u32, name: &str, started: Instant, budget: Duration) {
    let elapsed = started.elapsed();
    assert!(
        elapsed <= budget,
        "criterion {n} exceeded its {budget:?} budget: {elapsed:?}"
    );
    println!("ACCEPT {n:02} {name}: PASS ({elapsed:?})");
}

/// Random instance: pretrained weights, a finetuned model, and a base vector
/// built from two other finetuned models, all over one `len`-element tensor.
fn random_projection_instance(seed: u64, len: usize) -> (TensorMap, TensorMap, BaseVector) {
    let mut rng = SplitMix64::new(seed);
    let mut map_of = |scale: f64, around: Option<&TensorMap>| {
        let data: Vec<f32> = (0..len)
            .map(|i| {
                let base = around.map_or(0.0, |m| f64::from(m.tensors()[0].data()[i]));
                (base + scale * rng.next_normal()) as f32
            })
            .collect();
        TensorMap::from_tensors(vec![Tensor::new("w", vec![len], data).unwrap()]).unwrap()
    };
    let pre = map_of(0.3, None);
    let ft = map_of(0.5, Some(&pre));
    let donor_a = map_of(0.4, Some(&pre));
    let donor_b = map_of(0.4, Some(&pre));
    let base = compute_base_vector(&[donor_a, donor_b], &pre).unwrap();
    (pre, ft, base)
}

// ── Criteria ────────────────────────────────────────────────────────────────

#[test]
fn accept_01_projection_optimality() {
    let t0 = Instant::now();
    let instances: Vec<u64> = (0..200).collect();
    instances.par_iter().for_each(|&seed| {
        let len = 257 + (seed as usize % 91);
        let (pre, ft, base) = random_projection_instance(1000 + seed, len);
        let l1 = init_lambda1(&ft, &pre, &base).unwrap();

        let delta: Vec<f64> = ft
            .flatten()
            .iter()
            .zip(pre.flatten())
            .map(|(&f, p)| f64::from(f) - f64::from(p))
            .collect();
        let tau: Vec<f64> = base.decoded().flatten().iter().map(|&v| f64::from(v)).collect();
        let objective = |lambda: f64| -> f64 {
            delta
                .iter()
                .zip(&tau)
                .map(|(d, t)| (d - lambda * t) * (d - lambda * t))
                .sum()
        };

        // The closed form beats every cell of a dense grid.
        let at_init = objective(l1);
        for j in 0..10_000 {
            let lambda = -4.0 + 8.0 * j as f64 / 9_999.0;
            assert!(
                at_init <= objective(lambda),
                "seed {seed}: grid beat the closed form at lambda={lambda}"
            );
        }

        // Residual is orthogonal to the base direction.
        let residual_dot_tau: f64 = delta.iter().zip(&tau).map(|(d, t)| (d - l1 * t) * t).sum();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = norm(&delta) * norm(&tau);
        assert!(
            residual_dot_tau.abs() <= 1e-6 * scale,
            "seed {seed}: residual.tau = {residual_dot_tau} vs scale {scale}"
        );

        // Norm split: |delta|^2 = |residual|^2 + l1^2 |tau|^2.
        let res_sq: f64 = delta
            .iter()
            .zip(&tau)
            .map(|(d, t)| (d - l1 * t) * (d - l1 * t))
            .sum();
        let tau_sq: f64 = tau.iter().map(|t| t * t).sum();
        let delta_sq: f64 = delta.iter().map(|d| d * d).sum();
        assert!(
            (delta_sq - (res_sq + l1 * l1 * tau_sq)).abs() <= 1e-6 * delta_sq,
            "seed {seed}: norm split violated"
        );
    });
    pass(1, "projection_optimality", t0, Duration::from_secs(5));
}

#[test]
fn accept_02_paradigm_reduction() {
    let suite = demo();
    let t0 = Instant::now();
    let base = suite.base_vector().unwrap();
    let dir = tempfile::tempdir().unwrap();
    for (label, codec) in [("dare", dare(0.9, 5)), ("bitdelta", CodecSpec::BitDelta)] {
        for task in suite.tasks() {
            let codec_t = task_codec(&codec, &task.id);
            // Shifted pipeline at lambda1 = 0 ...
            let shifted =
                deltashift::dbms::compress_task(&task.finetuned, suite.pretrained(), &base, 0.0, &codec_t)
                    .unwrap();
            // ... versus plain compression of the raw delta.
            let vanilla = codec_t
                .compress(&map_sub(&task.finetuned, suite.pretrained()).unwrap())
                .unwrap();
            assert_eq!(shifted, vanilla, "{label}/{}", task.id);
            let a = dir.path().join(format!("{label}-{}-a.dltc", task.id));
            let b = dir.path().join(format!("{label}-{}-b.dltc", task.id));
            shifted.save(&a).unwrap();
            vanilla.save(&b).unwrap();
            assert_eq!(
                std::fs::read(&a).unwrap(),
                std::fs::read(&b).unwrap(),
                "{label}/{}: container files differ",
                task.id
            );
        }
    }
    pass(2, "paradigm_reduction", t0, Duration::from_secs(1));
}

#[test]
fn accept_03_dare_statistics() {
    let t0 = Instant::now();
    let n = 100_000usize;
    let mut rng = SplitMix64::new(33);
    let data: Vec<f32> = (0..n).map(|_| rng.next_normal() as f32).collect();
    let map =
        TensorMap::from_tensors(vec![Tensor::new("d", vec![n], data.clone()).unwrap()]).unwrap();
    let input_mean = data.iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64;
    let input_sq = data.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>();

    for p in [0.5, 0.9, 0.99] {
        let c = dare_compress(
            &map,
            DareCodecConfig {
                sparse_rate: p,
                seed: 1234,
            },
        )
        .unwrap();
        let CompressedDelta::Dare(d) = &c else {
            panic!("dare produced a non-dare container")
        };
        let kept = d.tensors[0].indices.len() as f64;
        // Keep count is Binomial(n, 1-p).
        let keep_sigma = (p * (1.0 - p) / n as f64).sqrt();
        let keep_rate = kept / n as f64;
        assert!(
            (keep_rate - (1.0 - p)).abs() <= 3.0 * keep_sigma,
            "p={p}: keep rate {keep_rate} vs expected {}",
            1.0 - p
        );
        // The decoded mean is an unbiased estimator of the input mean with
        // variance sum(x_i^2) * p/(1-p) / n^2.
        let decoded = dare_decompress(&c).unwrap();
        let dec_mean = decoded.tensors()[0]
            .data()
            .iter()
            .map(|&v| f64::from(v))
            .sum::<f64>()
            / n as f64;
        let mean_sigma = (input_sq * p / (1.0 - p)).sqrt() / n as f64;
        assert!(
            (dec_mean - input_mean).abs() <= 3.0 * mean_sigma,
            "p={p}: decoded mean {dec_mean} vs input mean {input_mean} (sigma {mean_sigma})"
        );
    }

    // p = 0 keeps everything, scales by 1, and round-trips bit-exactly.
    let c = dare_compress(
        &map,
        DareCodecConfig {
            sparse_rate: 0.0,
            seed: 1234,
        },
    )
    .unwrap();
    let decoded = dare_decompress(&c).unwrap();
    assert_eq!(decoded.tensors()[0].data(), &data[..]);
    pass(3, "dare_statistics", t0, Duration::from_secs(5));
}

#[test]
fn accept_04_bitdelta_optimality() {
    let t0 = Instant::now();
    let tensors: Vec<u64> = (0..100).collect();
    tensors.par_iter().for_each(|&seed| {
        let mut rng = SplitMix64::new(4000 + seed);
        let len = 200 + (seed as usize % 111);
        let scale = 0.1 + rng.next_f64();
        let data: Vec<f32> = (0..len).map(|_| (scale * rng.next_normal()) as f32).collect();
        let map =
            TensorMap::from_tensors(vec![Tensor::new("d", vec![len], data.clone()).unwrap()])
                .unwrap();
        let c = deltashift::codec::bitdelta_compress(&map).unwrap();
        let CompressedDelta::BitDelta(b) = &c else {
            panic!("bitdelta produced a non-bitdelta container")
        };
        let t = &b.tensors[0];

        let mean_abs =
            data.iter().map(|&v| f64::from(v).abs()).sum::<f64>() / len as f64;
        assert!(
            (t.scale - mean_abs).abs() <= 1e-6 * mean_abs,
            "seed {seed}: scale {} vs mean|delta| {mean_abs}",
            t.scale
        );

        // No scalar on a dense grid achieves a lower quantization error.
        let signs: Vec<f64> = (0..len).map(|i| f64::from(t.sign(i))).collect();
        let err = |a: f64| -> f64 {
            data.iter()
                .zip(&signs)
                .map(|(&d, s)| (f64::from(d) - a * s) * (f64::from(d) - a * s))
                .sum()
        };
        let at_alpha = err(t.scale);
        for j in 0..10_000 {
            let a = 2.0 * mean_abs * j as f64 / 9_999.0;
            assert!(
                at_alpha <= err(a),
                "seed {seed}: grid scale {a} beat the stored scale"
            );
        }
    });
    pass(4, "bitdelta_optimality", t0, Duration::from_secs(5));
}

#[test]
fn accept_05_gradient_fidelity() {
    let t0 = Instant::now();
    let model = ForwardModel {
        input_dim: 3,
        output_dim: 2,
        layers: vec![
            Layer::Linear {
                weight: "l0.weight".into(),
                bias: Some("l0.bias".into()),
            },
            Layer::Activation {
                kind: Activation::Tanh,
            },
            Layer::Linear {
                weight: "l1.weight".into(),
                bias: None,
            },
        ],
    };
    let instance = |seed: u64| {
        let mut rng = SplitMix64::new(seed);
        let mut map_of = |scale: f64, around: Option<&TensorMap>| {
            let mk = |name: &str, shape: Vec<usize>, rng: &mut SplitMix64, base: Option<&Tensor>| {
                let n: usize = shape.iter().product();
                let data: Vec<f32> = (0..n)
                    .map(|i| {
                        let b = base.map_or(0.0, |t| f64::from(t.data()[i]));
                        (b + scale * rng.next_normal()) as f32
                    })
                    .collect();
                Tensor::new(name, shape, data).unwrap()
            };
            let tensors = vec![
                mk("l0.weight", vec![5, 3], &mut rng, around.and_then(|m| m.get("l0.weight"))),
                mk("l0.bias", vec![5], &mut rng, around.and_then(|m| m.get("l0.bias"))),
                mk("l1.weight", vec![2, 5], &mut rng, around.and_then(|m| m.get("l1.weight"))),
            ];
            TensorMap::from_tensors(tensors).unwrap()
        };
        let pre = map_of(0.4, None);
        let ft = map_of(0.25, Some(&pre));
        let donor = map_of(0.25, Some(&pre));
        let base = compute_base_vector(&[donor, ft.clone()], &pre).unwrap();
        let batch = {
            let data: Vec<f32> = (0..8 * 3).map(|_| rng.next_normal() as f32).collect();
            Batch::new(8, 3, data).unwrap()
        };
        (pre, ft, base, batch)
    };

    let fd_step = 1e-5;
    let mut checked = 0usize;
    let mut seed = 0u64;
    while checked < 50 && seed < 300 {
        seed += 1;
        let (pre, ft, base, batch) = instance(50_000 + seed);
        let codec = if checked.is_multiple_of(2) {
            dare(0.5, seed)
        } else {
            CodecSpec::BitDelta
        };
        let (l1, l2) = (0.65, 0.8);
        if matches!(codec, CodecSpec::BitDelta) {
            // Stay clear of sign-flip boundaries of the residual.
            let delta: Vec<f64> = ft
                .flatten()
                .iter()
                .zip(pre.flatten())
                .map(|(&f, p)| f64::from(f) - f64::from(p))
                .collect();
            let tau: Vec<f64> =
                base.decoded().flatten().iter().map(|&v| f64::from(v)).collect();
            let min_dist = delta
                .iter()
                .zip(&tau)
                .filter(|(_, &t)| t != 0.0)
                .map(|(d, t)| (l1 - d / t).abs())
                .fold(f64::INFINITY, f64::min);
            if min_dist < 5.0 * fd_step {
                continue; // boundary inside the stencil: not a smooth point
            }
        }
        let ctx = LossContext::new(&model, &pre, &ft, &base, &codec, batch).unwrap();
        let (fd1, fd2) = gradient(&ctx, l1, l2, GradientMode::FiniteDiff, fd_step).unwrap();
        let (an1, an2) = gradient(&ctx, l1, l2, GradientMode::Analytic, fd_step).unwrap();
        for (i, (fd, an)) in [(fd1, an1), (fd2, an2)].into_iter().enumerate() {
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-10);
            assert!(
                rel <= 1e-4,
                "seed {seed} coord {i}: fd {fd} vs analytic {an} (rel {rel})"
            );
        }
        checked += 1;
    }
    assert_eq!(checked, 50, "not enough smooth instances found");
    pass(5, "gradient_fidelity", t0, Duration::from_secs(10));
}

#[test]
fn accept_06_training_sanity() {
    let suite = battery();
    let t0 = Instant::now();
    let codec = dare(0.99, suite.config().seed);
    let cfg = battery_train();
    let base = suite.base_vector().unwrap();
    let ok: usize = suite
        .tasks()
        .par_iter()
        .map(|task| {
            let out = train_task_with_init(
                &task.id,
                suite.model(),
                suite.pretrained(),
                &task.finetuned,
                &base,
                &task_codec(&codec, &task.id),
                &task.pool,
                &task_train_config(&cfg, &task.id),
                InitStrategy::Projection,
            )
            .unwrap();
            let first = out.trace.first().unwrap().loss;
            let last = out.trace.last().unwrap().loss;
            usize::from(last <= first)
        })
        .sum();
    assert!(
        ok * 100 >= suite.tasks().len() * 95,
        "loss non-increase on only {ok}/{} tasks",
        suite.tasks().len()
    );
    pass(6, "training_sanity", t0, Duration::from_secs(120));
}

#[test]
fn accept_07_method_ordering() {
    let suite = battery();
    let t0 = Instant::now();
    let cfg = battery_train();
    for (label, codec) in [
        ("dare_p99", dare(0.99, suite.config().seed)),
        ("bitdelta", CodecSpec::BitDelta),
    ] {
        let means = |method: Method| -> (f64, f64) {
            let run = run_pipeline(suite, &codec, method, &cfg).unwrap();
            let n = run.report.rows.len() as f64;
            (
                run.report.rows.iter().map(|r| r.rel_out_err).sum::<f64>() / n,
                run.report.rows.iter().map(|r| r.recon_l2).sum::<f64>() / n,
            )
        };
        let (vanilla, vanilla_l2) = means(Method::Vanilla);
        let (init, init_l2) = means(Method::DbmsInit);
        let (trained, _) = means(Method::DbmsTrained);
        println!("{label}: vanilla {vanilla:.4}, init {init:.4}, trained {trained:.4}");
        assert!(
            trained <= init && init <= vanilla,
            "{label}: ordering violated: trained {trained}, init {init}, vanilla {vanilla}"
        );
        assert!(
            trained <= 0.8 * vanilla,
            "{label}: trained {trained} not >= 20% better than vanilla {vanilla}"
        );
        // The shift also helps in plain weight space.
        assert!(
            init_l2 <= vanilla_l2,
            "{label}: mean recon_l2 ordering violated: init {init_l2} vs vanilla {vanilla_l2}"
        );
    }
    pass(7, "method_ordering", t0, Duration::from_secs(180));
}

#[test]
fn accept_08_init_ablation() {
    let suite = battery();
    let t0 = Instant::now();
    let codec = dare(0.99, suite.config().seed);
    let cfg = TrainConfig {
        steps: 100,
        ..battery_train()
    };
    let out = ablation_init(suite, &codec, &cfg, InitStrategy::Projection, InitStrategy::Ones)
        .unwrap();
    assert_eq!(out.step, 100);
    assert!(
        out.fraction_a_le_b >= 0.7,
        "projection init ahead at step 100 on only {:.0}% of tasks",
        100.0 * out.fraction_a_le_b
    );
    pass(8, "init_ablation", t0, Duration::from_secs(120));
}

#[test]
fn accept_09_heatmap_argmin() {
    let suite = battery();
    let t0 = Instant::now();
    let codec = dare(0.99, suite.config().seed);
    let grid = GridSpec {
        start: 0.0,
        end: 2.0,
        steps: 21,
    };
    let off_vanilla: usize = suite
        .tasks()
        .iter()
        .map(|task| {
            let sweep = sweep_lambda_grid(
                suite,
                &task.id,
                &codec,
                &grid,
                &grid,
                SweepOptions::default(),
            )
            .unwrap();
            let vanilla = sweep.vanilla_cell.expect("grid contains (0, 1)");
            usize::from(sweep.argmin() != vanilla)
        })
        .sum();
    assert!(
        off_vanilla >= 15,
        "argmin left the vanilla cell on only {off_vanilla}/20 tasks"
    );
    pass(9, "heatmap_argmin", t0, Duration::from_secs(180));
}

#[test]
fn accept_10_storage_accounting() {
    let suite = battery();
    // Cheap artifacts: storage size is method-independent, so init-only is
    // representative.
    let codec = dare(0.99, suite.config().seed);
    let run = run_pipeline(suite, &codec, Method::DbmsInit, &battery_train()).unwrap();
    let t0 = Instant::now();

    // Reported sizes equal the bit-exact serialized sizes.
    let dir = tempfile::tempdir().unwrap();
    for artifact in &run.artifacts {
        let path = dir.path().join(format!("{}.dltc", artifact.task_id));
        artifact.delta.save(&path).unwrap();
        let file_bits = 8 * std::fs::metadata(&path).unwrap().len();
        assert_eq!(file_bits, storage_bits(&artifact.delta), "{}", artifact.task_id);
    }
    let base_path = dir.path().join("base.dltc");
    run.base.compressed().save(&base_path).unwrap();
    assert_eq!(
        8 * std::fs::metadata(&base_path).unwrap().len(),
        storage_bits(run.base.compressed())
    );

    // Report totals are plain sums of those sizes.
    let report = storage_report(&run.artifacts, &run.base, suite.config().seed);
    let task_total: u64 = run.artifacts.iter().map(|a| storage_bits(&a.delta)).sum();
    assert_eq!(report.vanilla_total, task_total);
    assert_eq!(
        report.dbms_total,
        task_total + report.base_bits + LAMBDA_BITS_PER_TASK * 20
    );

    // For 8 tasks the whole method overhead is base bits + 128 per task.
    let report8 = storage_report(&run.artifacts[..8], &run.base, suite.config().seed);
    assert_eq!(
        report8.dbms_total - report8.vanilla_total,
        report8.base_bits + 8 * LAMBDA_BITS_PER_TASK
    );

    // The base vector stays within raw/32 plus independently-computed header
    // bits (container framing, per-tensor prefix + scale, byte padding).
    let mut raw_bits = 0u64;
    let mut header_bits = 104 + 64; // magic+version+tag+count, crc trailer
    for t in run.base.decoded().tensors() {
        let n = t.len() as u64;
        raw_bits += 32 * n;
        let prefix = 8 * (2 + t.name().len() as u64 + 1 + 8 * t.shape().len() as u64);
        let padding = 8 * n.div_ceil(8) - n;
        header_bits += prefix + 64 + padding;
    }
    assert!(
        storage_bits(run.base.compressed()) <= raw_bits / 32 + header_bits,
        "base vector larger than a 32x reduction plus headers"
    );
    pass(10, "storage_accounting", t0, Duration::from_secs(1));
}

#[test]
fn accept_11_determinism() {
    let suite = demo();
    let t0 = Instant::now();
    let codec = dare(0.9, suite.config().seed);
    let cfg = TrainConfig {
        steps: 50,
        ..TrainConfig::default()
    };

    // Suite files.
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    suite.save(da.path()).unwrap();
    suite.save(db.path()).unwrap();
    for name in [
        "suite.json",
        "pretrained.dlts",
        "tasks/task_000.finetuned.dlts",
        "tasks/task_003.eval.dlts",
    ] {
        assert_eq!(
            std::fs::read(da.path().join(name)).unwrap(),
            std::fs::read(db.path().join(name)).unwrap(),
            "{name} differs between saves"
        );
    }

    // Pipeline reruns: identical CSV and identical artifact files.
    let run_a = run_pipeline(suite, &codec, Method::DbmsTrained, &cfg).unwrap();
    let run_b = run_pipeline(suite, &codec, Method::DbmsTrained, &cfg).unwrap();
    assert_eq!(run_a.report.to_csv(), run_b.report.to_csv());
    for (a, b) in run_a.artifacts.iter().zip(&run_b.artifacts) {
        let pa = da.path().join("a.dltc");
        let ma = da.path().join("a.manifest");
        let pb = db.path().join("b.dltc");
        let mb = db.path().join("b.manifest");
        a.save(&pa, &ma).unwrap();
        b.save(&pb, &mb).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
        assert_eq!(std::fs::read(&ma).unwrap(), std::fs::read(&mb).unwrap());
    }

    // Sweep, ablation, and storage reports.
    let grid = GridSpec {
        start: 0.0,
        end: 2.0,
        steps: 5,
    };
    let sweep = |_: ()| {
        sweep_lambda_grid(suite, "task_001", &codec, &grid, &grid, SweepOptions::default())
            .unwrap()
            .to_csv()
    };
    assert_eq!(sweep(()), sweep(()));
    let ablate = |_: ()| {
        ablation_init(suite, &codec, &cfg, InitStrategy::Projection, InitStrategy::Ones)
            .unwrap()
            .to_csv()
    };
    assert_eq!(ablate(()), ablate(()));
    assert_eq!(
        storage_report(&run_a.artifacts, &run_a.base, 7).to_csv(),
        storage_report(&run_b.artifacts, &run_b.base, 7).to_csv()
    );
    pass(11, "determinism", t0, Duration::from_secs(60));
}
