//! Acceptance checks, one PASS/FAIL line per criterion.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant, SystemTime};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use cloudcast::bench::{append_raw_log, median, read_raw_log, run_benchmark, write_report_csv, BenchOptions, Phase};
use cloudcast::dataset::{merge_shuffle, split, ResourceSelector, SplitBundle, SplitOptions, WindowSample};
use cloudcast::evaluation::{
    breusch_pagan, calibration_curve, default_levels, diebold_mariano, pearson, point_metrics, qos_metrics, DmLoss,
};
use cloudcast::models::{
    build_model, gaussian_nll, gaussian_nll_with_grad, moment_match, predict_mixture, predict_samples, std_link,
    train, z_score, IntervalSide, ModelConfig, ModelKind, TrainOptions, TrainedModel,
};
use cloudcast::scenarios::{Scenario, ScenarioSpec};
use cloudcast::synth::{generate_trace, SynthSpec};
use cloudcast::trace::{read_trace_csv, TraceSeries};
use cloudcast::Error;

static REPORTED: AtomicBool = AtomicBool::new(false);

fn verdict(name: &str, ok: bool, detail: String) {
    println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    REPORTED.store(true, Ordering::SeqCst);
    assert!(ok, "{name}: {detail}");
}

fn cpu() -> ResourceSelector {
    ResourceSelector::Univariate("cpu".into())
}

fn month_bundle() -> SplitBundle {
    let series = generate_trace(&SynthSpec::default()).unwrap();
    assert_eq!(series.len(), 8352);
    split(&series, &cpu(), SplitOptions::default()).unwrap()
}

fn fit(kind: ModelKind, bundle: &SplitBundle) -> TrainedModel {
    let model = build_model(&ModelConfig::tiny(kind, 1), bundle.options.input_len).unwrap();
    let opts = TrainOptions {
        max_epochs: 60,
        patience: 10,
        seed: 7,
        learning_rate: None,
    };
    train(&model, &bundle.train, &bundle.val, &opts).unwrap()
}

fn targets(samples: &[WindowSample]) -> Vec<f64> {
    samples.iter().map(|s| s.target()[0]).collect()
}

fn qos_identity_and_brute_force_metrics() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_identity = 0.0f64;
    let mut worst_point = 0.0f64;
    let mut worst_pearson = 0.0f64;
    for _ in 0..10_000 {
        let n = rng.random_range(2..60);
        let actual: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
        let ub: Vec<f64> = actual.iter().map(|a| a + rng.random_range(-3.0..3.0)).collect();
        let q = qos_metrics(&ub, &actual, 95.0).unwrap();
        let identity = actual.iter().sum::<f64>() + q.op - q.up;
        worst_identity = worst_identity.max((q.tpr - identity).abs() / identity.abs().max(1e-12));

        let p = point_metrics(&ub, &actual).unwrap();
        let mut se = 0.0;
        let mut ae = 0.0;
        for i in 0..n {
            let d = ub[i] - actual[i];
            se += d * d;
            ae += d.abs();
        }
        worst_point = worst_point.max((p.mse - se / n as f64).abs()).max((p.mae - ae / n as f64).abs());

        let (mx, my) = (ub.iter().sum::<f64>() / n as f64, actual.iter().sum::<f64>() / n as f64);
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        let mut syy = 0.0;
        for i in 0..n {
            sxy += (ub[i] - mx) * (actual[i] - my);
            sxx += (ub[i] - mx).powi(2);
            syy += (actual[i] - my).powi(2);
        }
        let r = pearson(&ub, &actual).unwrap();
        worst_pearson = worst_pearson.max((r - sxy / (sxx * syy).sqrt()).abs());
    }
    let elapsed = start.elapsed();
    verdict(
        "qos_identity_and_brute_force_metrics",
        worst_identity <= 1e-6 && worst_point <= 1e-9 && worst_pearson <= 1e-9 && elapsed < Duration::from_secs(10),
        format!(
            "identity rel err {worst_identity:.2e}, point err {worst_point:.2e}, pearson err {worst_pearson:.2e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
}

fn z_scores() {
    let cases = [(0.95, 1.959964), (0.97, 2.170090), (0.99, 2.575829)];
    let worst = cases
        .iter()
        .map(|(c, z)| (z_score(*c, IntervalSide::TwoSided).unwrap() - z).abs())
        .fold(0.0, f64::max);
    verdict("z_scores", worst <= 1e-4, format!("max abs err {worst:.2e}"));
}

fn nll_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut worst_loss = 0.0f64;
    for _ in 0..100 {
        let t: f64 = rng.random_range(-2.0..2.0);
        let m: f64 = rng.random_range(-2.0..2.0);
        let raw: f64 = rng.random_range(-3.0..3.0);
        let (loss, dm, draw) = gaussian_nll_with_grad(t, m, raw);
        let reference = gaussian_nll(&[t], &[m], &[std_link(raw)]).unwrap();
        worst_loss = worst_loss.max((loss - reference).abs());
        let h = 1e-5;
        let fd_m = (gaussian_nll_with_grad(t, m + h, raw).0 - gaussian_nll_with_grad(t, m - h, raw).0) / (2.0 * h);
        let fd_r = (gaussian_nll_with_grad(t, m, raw + h).0 - gaussian_nll_with_grad(t, m, raw - h).0) / (2.0 * h);
        for (g, fd) in [(dm, fd_m), (draw, fd_r)] {
            worst = worst.max((g - fd).abs() / fd.abs().max(g.abs()).max(1e-3));
        }
    }
    verdict(
        "nll_gradient_matches_finite_differences",
        worst <= 1e-5 && worst_loss <= 1e-12,
        format!("max rel gradient err {worst:.2e}, loss err {worst_loss:.2e}"),
    );
}

fn distributional_calibration_on_month_trace() {
    let start = Instant::now();
    let bundle = month_bundle();
    let model = fit(ModelKind::Distributional, &bundle);
    let dist = predict_samples(&model, &bundle.test).unwrap();
    let curve = calibration_curve(&dist, &targets(&bundle.test)).unwrap();
    let elapsed = start.elapsed();
    verdict(
        "distributional_calibration_on_month_trace",
        curve.curve_mae <= 3.0 && elapsed <= Duration::from_secs(600),
        format!(
            "curve_mae {:.3} over {} levels, {} epochs, {:.1}s",
            curve.curve_mae,
            default_levels().len(),
            model.history.len(),
            elapsed.as_secs_f64()
        ),
    );
}

fn bayesian_mixture_moments() {
    let bundle = month_bundle();
    let model = fit(ModelKind::BayesianLastLayer, &bundle);
    let inputs: Vec<&[f64]> = bundle.test.iter().map(|s| s.input()).collect();
    let mixture = predict_mixture(&model, &inputs, model.config.epistemic_samples).unwrap();
    let dist = moment_match(&mixture);
    let std = dist.std.as_ref().unwrap();

    let mut min_gap = f64::INFINITY;
    let mut total_var_err = 0.0f64;
    for i in 0..mixture.rows() {
        let (means, vars) = mixture.components(i, 0);
        let s = means.len() as f64;
        let aleatory = vars.iter().sum::<f64>() / s;
        let second = means.iter().map(|m| m * m).sum::<f64>() / s;
        let first = means.iter().sum::<f64>() / s;
        let total = aleatory + second - first * first;
        let mm = std[i] * std[i];
        min_gap = min_gap.min(mm - aleatory);
        total_var_err = total_var_err.max((mm - total).abs());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst_mc = 0.0f64;
    let rows = mixture.rows();
    for i in [0, rows / 3, 2 * rows / 3, rows - 1] {
        let (means, vars) = mixture.components(i, 0);
        let draws: Vec<f64> = (0..100_000)
            .map(|_| {
                let k = rng.random_range(0..means.len());
                Normal::new(means[k], vars[k].sqrt()).unwrap().sample(&mut rng)
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        worst_mc = worst_mc.max((var - std[i] * std[i]).abs() / (std[i] * std[i]));
    }
    verdict(
        "bayesian_mixture_moments",
        min_gap >= -1e-15 && total_var_err <= 1e-9 && worst_mc <= 0.02,
        format!(
            "min(var - aleatory) {min_gap:.3e}, total variance err {total_var_err:.2e}, Monte Carlo rel err {:.2}%",
            100.0 * worst_mc
        ),
    );
}

fn fingerprint(s: &WindowSample) -> Vec<u64> {
    s.input().iter().chain(s.target()).map(|v| v.to_bits()).collect()
}

fn all_but_one_streams_exclude_the_target() {
    let universe = ["gc19a", "gc19b", "gc11", "ali18"];
    let options = SplitOptions {
        input_len: 48,
        ..SplitOptions::default()
    };
    let bundles: BTreeMap<String, SplitBundle> = universe
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let series = generate_trace(&SynthSpec {
                cluster_id: id.to_string(),
                length: 1500,
                seed: i as u64 + 1,
                ..SynthSpec::default()
            })
            .unwrap();
            (id.to_string(), split(&series, &cpu(), options).unwrap())
        })
        .collect();
    let leak_free = bundles.values().all(|b| b.check_leak_free().is_ok());
    let mut leaked = 0;
    let mut control_hits = 0;
    for k in universe {
        let spec = ScenarioSpec {
            scenario: Scenario::AllButOne,
            target_cluster: k.into(),
            cluster_universe: universe.iter().map(|s| s.to_string()).collect(),
            model_kind: ModelKind::Distributional,
            prediction_mode: cpu(),
            seeds: vec![0],
            fine_tune_opts: None,
            gc19_group: None,
        };
        let target = &bundles[k];
        let own: HashSet<Vec<u64>> = target
            .train
            .iter()
            .chain(&target.val)
            .chain(&target.test)
            .map(fingerprint)
            .collect();
        let sources: Vec<&SplitBundle> = spec.training_clusters().iter().map(|c| &bundles[c]).collect();
        let stream = merge_shuffle(&sources, 0).unwrap();
        assert!(!stream.clusters().contains(&k));
        leaked += stream
            .train
            .iter()
            .chain(&stream.val())
            .filter(|s| own.contains(&fingerprint(s)))
            .count();

        let all: Vec<&SplitBundle> = bundles.values().collect();
        let control = merge_shuffle(&all, 0).unwrap();
        control_hits += control.train.iter().filter(|s| own.contains(&fingerprint(s))).count();
    }
    verdict(
        "all_but_one_streams_exclude_the_target",
        leaked == 0 && leak_free && control_hits > 0,
        format!("{leaked} leaked samples over 4 targets, bundles leak-free: {leak_free}, control matches {control_hits}"),
    );
}

fn diebold_mariano_and_breusch_pagan_reference() {
    let a: Vec<f64> = (0..40)
        .map(|i| {
            let i = i as f64;
            0.5 * (0.7 * i).sin() + 0.1 * (1.3 * i).cos()
        })
        .collect();
    let b: Vec<f64> = (0..40)
        .map(|i| {
            let i = i as f64;
            0.6 * (0.7 * i + 0.2).sin() + 0.12 * (1.1 * i).cos() + 0.1
        })
        .collect();
    let dm_cases = [
        (DmLoss::Squared, 1, -3.414_627_185_893_343_2, 0.001_503_689_145_654_657),
        (DmLoss::Squared, 2, -2.748_708_013_963_115, 0.009_016_736_100_284_028),
        (DmLoss::Absolute, 3, -2.754_219_699_721_795_6, 0.008_890_986_155_657_601),
    ];
    let mut worst = 0.0f64;
    for (loss, h, stat, p) in dm_cases {
        let r = diebold_mariano(&a, &b, loss, h).unwrap();
        worst = worst.max((r.statistic - stat).abs()).max((r.p_value - p).abs());
    }
    let x1: Vec<f64> = (0..60).map(|j| (0.37 * j as f64).cos() + j as f64 / 60.0).collect();
    let x2: Vec<f64> = (0..60).map(|j| (1.1 * j as f64).sin().powi(2)).collect();
    let res: Vec<f64> = (0..60)
        .map(|j| {
            let jf = j as f64;
            (0.3 + 0.1 * x1[j] * x1[j]) * (2.3 * jf + 0.4).sin() + 0.05 * (0.9 * jf).cos()
        })
        .collect();
    let bp = breusch_pagan(&res, &[x1, x2]).unwrap();
    worst = worst
        .max((bp.statistic - 9.548_298_485_590_08).abs())
        .max((bp.p_value - 0.008_445_265_902_842_414).abs());
    let degenerate = matches!(diebold_mariano(&a, &a, DmLoss::Squared, 1), Err(Error::DegenerateTest(_)));
    verdict(
        "diebold_mariano_and_breusch_pagan_reference",
        worst <= 1e-6 && degenerate,
        format!("max abs err {worst:.2e}, degenerate case rejected: {degenerate}"),
    );
}

const SMOKE_CONFIG: &str = r#"{
  "synth": [
    {"cluster_id": "gc19a", "length": 1400, "seed": 1},
    {"cluster_id": "gc11", "length": 1400, "seed": 2}
  ],
  "split": {"input_len": 48},
  "model": {"preset": "tiny"},
  "train": {"max_epochs": 3, "patience": 2},
  "fine_tune": {"epochs": 2, "lr_factor": 0.1, "patience": 1},
  "seeds": [0],
  "bench": {"repetitions": 2, "warmup": 2, "max_epochs": 1, "finetune_epochs": 1}
}"#;

fn cli(workdir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_cloudcast"))
        .arg("--workdir")
        .arg(workdir)
        .arg("--config")
        .arg(workdir.join("config.json"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "cloudcast {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, SystemTime> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.clone(), fs::metadata(&p).unwrap().modified().unwrap());
            }
        }
    }
    out
}

fn cli_smoke_run_and_idempotent_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let work = tmp.path();
    fs::write(work.join("config.json"), SMOKE_CONFIG).unwrap();
    let steps = ["synth", "split", "scenario", "evaluate", "bench", "report"];
    let start = Instant::now();
    for step in steps {
        cli(work, &[step]);
    }
    let elapsed = start.elapsed();

    let report = work.join("experiments/report");
    let expected = [
        "point_summary.csv",
        "qos_summary.csv",
        "calibration_summary.csv",
        "summary.txt",
        "runtime.csv",
        "dm_tests.csv",
    ];
    let missing: Vec<&str> = expected
        .iter()
        .copied()
        .filter(|f| fs::metadata(report.join(f)).map(|m| m.len() == 0).unwrap_or(true))
        .collect();
    let svgs: Vec<String> = fs::read_dir(report.join("plots"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    let tpr_plots = svgs.iter().filter(|s| s.ends_with("_tpr_sr.svg")).count();
    let cal_plots = svgs.iter().filter(|s| s.ends_with("_calibration.svg")).count();

    let before = snapshot(work);
    let outputs: Vec<String> = steps.iter().map(|s| cli(work, &[s])).collect();
    let after = snapshot(work);
    let no_op = before == after
        && outputs.iter().all(|o| {
            o.contains("up to date") || o.contains(" 0 trained") || o.contains("(0 recomputed)")
        });
    verdict(
        "cli_smoke_run_and_idempotent_rerun",
        missing.is_empty() && tpr_plots > 0 && cal_plots > 0 && elapsed <= Duration::from_secs(300) && no_op,
        format!(
            "{:.1}s, missing {missing:?}, {tpr_plots} TPR-SR and {cal_plots} calibration plots, rerun no-op: {no_op}",
            elapsed.as_secs_f64()
        ),
    );
}

fn runtime_benchmark_protocol() {
    let series = generate_trace(&SynthSpec {
        length: 1500,
        ..SynthSpec::default()
    })
    .unwrap();
    let bundle = split(
        &series,
        &cpu(),
        SplitOptions {
            input_len: 48,
            ..SplitOptions::default()
        },
    )
    .unwrap();
    let config = ModelConfig::tiny(ModelKind::Point, 1);
    let train_opts = TrainOptions {
        max_epochs: 1,
        ..TrainOptions::default()
    };
    let model = train(&build_model(&config, 48).unwrap(), &bundle.train, &bundle.val, &train_opts).unwrap();
    let options = BenchOptions {
        repetitions: 10,
        train: train_opts,
        finetune_epochs: 1,
        ..BenchOptions::default()
    };
    let report = run_benchmark("lstm-cpu", &config, &model, &bundle, &options).unwrap();

    let cells = |phase: Phase| -> Vec<f64> { report.rows.iter().filter(|r| r.phase == phase).map(|r| r.cell).collect() };
    let layout_ok = cells(Phase::Training) == vec![20.0, 40.0, 60.0, 80.0]
        && cells(Phase::Finetune) == vec![6.0, 12.0, 18.0, 24.0]
        && cells(Phase::Inference).len() == 1
        && report
            .rows
            .iter()
            .all(|r| r.phase == Phase::Inference || r.runs.len() == 10);

    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw.jsonl");
    append_raw_log(&raw, &report).unwrap();
    let log = read_raw_log(&raw).unwrap();
    let mut worst = 0.0f64;
    for row in &report.rows {
        let runs: Vec<f64> = log
            .iter()
            .filter(|t| t.phase == row.phase && t.cell == row.cell)
            .map(|t| t.seconds)
            .collect();
        let summary = match row.phase {
            Phase::Inference => median(&runs),
            _ => runs.iter().sum::<f64>() / runs.len() as f64,
        };
        worst = worst.max((summary - row.seconds).abs() / row.seconds.max(1e-300));
    }
    let csv_path = tmp.path().join("runtime.csv");
    write_report_csv(&csv_path, &[report.clone()]).unwrap();
    let text = fs::read_to_string(&csv_path).unwrap();
    let header_cols = text.lines().next().unwrap().split(',').count();
    verdict(
        "runtime_benchmark_protocol",
        layout_ok && worst <= 1e-12 && header_cols == 2 + 2 * 9,
        format!("cell layout ok: {layout_ok}, recomputed summary rel err {worst:.2e}, {header_cols} CSV columns"),
    );
}

/// Runs on a preprocessed trace CSV named by `CLOUDCAST_REAL_TRACE`.
fn real_trace_calibration() {
    let Some(path) = std::env::var_os("CLOUDCAST_REAL_TRACE").map(PathBuf::from) else {
        println!("SKIP real_trace_calibration: CLOUDCAST_REAL_TRACE is not set");
        REPORTED.store(true, Ordering::SeqCst);
        return;
    };
    if !path.exists() {
        println!("SKIP real_trace_calibration: {} does not exist", path.display());
        REPORTED.store(true, Ordering::SeqCst);
        return;
    }
    let cluster = path.file_stem().unwrap().to_string_lossy().into_owned();
    let series: TraceSeries = read_trace_csv(&path, &cluster).unwrap();
    let bundle = split(&series, &cpu(), SplitOptions::default()).unwrap();
    let model = fit(ModelKind::Distributional, &bundle);
    let dist = predict_samples(&model, &bundle.test).unwrap();
    let curve = calibration_curve(&dist, &targets(&bundle.test)).unwrap();
    verdict(
        "real_trace_calibration",
        curve.curve_mae <= 3.0,
        format!("{cluster}: curve_mae {:.3}", curve.curve_mae),
    );
}

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let checks: [(&str, fn()); 10] = [
        ("qos_identity_and_brute_force_metrics", qos_identity_and_brute_force_metrics as fn()),
        ("z_scores", z_scores as fn()),
        ("nll_gradient_matches_finite_differences", nll_gradient_matches_finite_differences as fn()),
        ("distributional_calibration_on_month_trace", distributional_calibration_on_month_trace as fn()),
        ("bayesian_mixture_moments", bayesian_mixture_moments as fn()),
        ("all_but_one_streams_exclude_the_target", all_but_one_streams_exclude_the_target as fn()),
        ("diebold_mariano_and_breusch_pagan_reference", diebold_mariano_and_breusch_pagan_reference as fn()),
        ("cli_smoke_run_and_idempotent_rerun", cli_smoke_run_and_idempotent_rerun as fn()),
        ("runtime_benchmark_protocol", runtime_benchmark_protocol as fn()),
        ("real_trace_calibration", real_trace_calibration as fn()),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        REPORTED.store(false, Ordering::SeqCst);
        if std::panic::catch_unwind(check).is_err() {
            failed += 1;
            if !REPORTED.load(Ordering::SeqCst) {
                println!("FAIL {name}: aborted before reaching its verdict");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance checks failed");
        ExitCode::FAILURE
    }
}
