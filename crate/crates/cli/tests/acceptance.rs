//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails. Runs without the libtest harness so the
//! lines always reach the console.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use posbias::eval::position_gradient;
use posbias::experiment::SplitPlan;
use posbias::fusion::{brute_force_objective, epsilon_closed_form, Mixture};
use posbias::nnet::{finite_diff_check, Mlp};
use posbias::paperrepro::l2_sweep;
use posbias::{ModelKind, PositionCurve, TrainedModel};
use posbias_cli::pipeline::{slug, RunMetrics};
use posbias_cli::{run_pipeline, ExperimentConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BIN: &str = env!("CARGO_BIN_EXE_posbias");
const SEEDS: [u64; 3] = [1, 2, 3];
const GI_RATES: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn record(out: &mut Vec<Outcome>, name: &'static str, pass: bool, detail: String) {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    out.push(Outcome { name, pass, detail });
}

fn linear_example(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let output = Command::new(BIN).arg("repro-table1").output().expect("spawn posbias");
    let elapsed = start.elapsed();
    let text = String::from_utf8_lossy(&output.stdout);
    let row = |label: &str| -> Option<Vec<String>> {
        let line = text.lines().find(|l| l.starts_with(label))?;
        Some(
            line.split_whitespace()
                .rev()
                .take(3)
                .map(str::to_string)
                .collect::<Vec<_>>()
                .into_iter()
                .rev()
                .collect(),
        )
    };
    let gt = row("Ground-truth model");
    let over = row("Overestimation model");
    let want_gt = ["0.0000", "0.0110", "0.0110"].map(String::from).to_vec();
    let want_over = ["0.0004", "0.0093", "0.0097"].map(String::from).to_vec();
    let pass = output.status.success()
        && gt.as_ref() == Some(&want_gt)
        && over.as_ref() == Some(&want_over)
        && elapsed < Duration::from_secs(1);
    record(
        out,
        "linear example losses",
        pass,
        format!(
            "ground truth {gt:?}, overestimation {over:?}, {:.3} s (limit 1 s)",
            elapsed.as_secs_f64()
        ),
    );
}

fn closed_form_vs_grid(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let curve =
        |rng: &mut ChaCha8Rng| PositionCurve::from_values((0..10).map(|_| rng.random::<f64>()).collect()).unwrap();
    let (mut worst, mut clamped) = (0.0f64, 0);
    for _ in 0..100 {
        let (g, a, u) = (curve(&mut rng), curve(&mut rng), curve(&mut rng));
        let closed = epsilon_closed_form(&g, &a, &u).unwrap();
        if closed.unclamped_alpha != Some(closed.alpha) {
            clamped += 1;
        }
        let (mut best_alpha, mut best) = (0.0, f64::INFINITY);
        for i in 0..=10_000 {
            let alpha = i as f64 * 1e-4;
            let v = brute_force_objective(&g, &a, &u, alpha).unwrap();
            if v < best {
                best = v;
                best_alpha = alpha;
            }
        }
        worst = worst.max((closed.alpha - best_alpha).abs());
    }
    let elapsed = start.elapsed();
    record(
        out,
        "closed-form weight matches grid argmin",
        worst <= 1e-4 && elapsed < Duration::from_secs(5),
        format!(
            "max |closed - grid| = {worst:.2e} (limit 1e-4) over 100 triples, {clamped} clamped, {:.2} s (limit 5 s)",
            elapsed.as_secs_f64()
        ),
    );
}

fn gradient_check(out: &mut Vec<Outcome>) {
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let depth = rng.random_range(1..=3);
        let mut sizes = vec![rng.random_range(2..=16)];
        for _ in 1..depth {
            sizes.push(rng.random_range(2..=64));
        }
        sizes.push(1);
        let mut net = Mlp::init(&sizes, &mut rng).unwrap();
        for layer in net.layers_mut() {
            layer.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        let n = 16;
        let x = Array2::from_shape_fn((n, sizes[0]), |_| rng.random_range(-1.0..1.0));
        let y = Array1::from_shape_fn(n, |_| f64::from(rng.random::<bool>()));
        let err = finite_diff_check(&net, x.view(), y.view(), 1e-3, 1e-5, usize::MAX, seed).unwrap();
        worst = worst.max(err);
    }
    record(
        out,
        "analytic gradients match finite differences",
        worst < 1e-4,
        format!("max relative error {worst:.2e} over 10 random nets (limit 1e-4)"),
    );
}

fn desk_config(dir: &Path) -> ExperimentConfig {
    let mut kinds = vec!["base".to_string(), "st_psf".into(), "gi".into()];
    kinds.extend(GI_RATES.iter().map(|r| format!("gi:{r}")));
    ExperimentConfig {
        seeds: SEEDS.to_vec(),
        out: dir.to_path_buf(),
        kinds,
        l2_coeff: 1e-4,
        ..ExperimentConfig::default()
    }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn seed_values(metrics: &RunMetrics, name: &str, f: impl Fn(&posbias::eval::MetricsReport) -> f64) -> Vec<f64> {
    metrics
        .seeds
        .iter()
        .map(|s| f(&s.model(name).unwrap_or_else(|| panic!("{name} missing")).report))
        .collect()
}

fn desk_run(out: &mut Vec<Outcome>, dir: &Path) -> RunMetrics {
    let config = desk_config(dir);
    let start = Instant::now();
    let metrics = run_pipeline(&config, false).expect("desk run");
    let elapsed = start.elapsed();

    let st = seed_values(&metrics, "ST_PSF", |r| r.overestimation_ratio);
    let base = seed_values(&metrics, "BASE", |r| r.overestimation_ratio);
    let pass =
        mean(st.iter().copied()) > 1.1 && mean(base.iter().copied()) < 1.05 && elapsed < Duration::from_secs(900);
    record(
        out,
        "overestimation visible on desk-scale run",
        pass,
        format!(
            "ST_PSF ratio {:.3} (per seed {st:.3?}, need > 1.1), BASE ratio {:.3} (per seed {base:.3?}, need < 1.05), \
             {:.0} s for {} models x {} seeds (limit 900 s)",
            mean(st.iter().copied()),
            mean(base.iter().copied()),
            elapsed.as_secs_f64(),
            2 + GI_RATES.len(),
            SEEDS.len()
        ),
    );
    metrics
}

fn l2_trend(out: &mut Vec<Outcome>) {
    let config = ExperimentConfig::default();
    let lambdas = [1e-5, 1e-4, 1e-3];
    let report = l2_sweep(&lambdas, &config.plan(), &config.train_config(0), &SEEDS).expect("sweep");
    let ratios: Vec<f64> = report.mean_ratio.iter().map(|(_, r)| *r).collect();
    let pass = ratios.windows(2).all(|w| w[1] >= w[0]);
    record(
        out,
        "overestimation ratio non-decreasing in L2",
        pass,
        format!("mean ratio at lambda {lambdas:?} = {ratios:.3?}"),
    );
}

fn method_ordering(out: &mut Vec<Outcome>, m: &RunMetrics) {
    let auc = |name: &str| m.summary_for(name).unwrap().auc;
    let (gi, st, base) = (auc("GI"), auc("ST_PSF"), auc("BASE"));
    let alphas: Vec<f64> = m.seeds.iter().map(|s| s.fusion.as_ref().unwrap().alpha).collect();
    record(
        out,
        "mixture beats both members on test AUC",
        gi - st >= 0.002 && gi - base >= 0.002,
        format!(
            "AUC GI {gi:.4} vs ST_PSF {st:.4} (+{:.4}) and BASE {base:.4} (+{:.4}), need +0.002; alpha per seed {alphas:.3?}",
            gi - st,
            gi - base
        ),
    );
}

fn closed_form_efficiency(out: &mut Vec<Outcome>, m: &RunMetrics) {
    let gaps: Vec<f64> = m
        .seeds
        .iter()
        .map(|s| s.grid_test.as_ref().unwrap().best_auc - s.closed_form_test_auc.unwrap())
        .collect();
    let grid_best: Vec<f64> = m
        .seeds
        .iter()
        .map(|s| s.grid_test.as_ref().unwrap().best_alpha)
        .collect();
    record(
        out,
        "closed-form weight within 0.002 AUC of grid optimum",
        gaps.iter().all(|g| *g <= 0.002),
        format!("grid best AUC minus closed-form AUC per seed {gaps:.4?} (limit 0.002), grid-best alpha {grid_best:?}"),
    );
}

fn gradient_properties(out: &mut Vec<Outcome>, m: &RunMetrics, dir: &Path) {
    let base = seed_values(m, "BASE", |r| r.position_gradient);
    let base_zero = base.iter().all(|g| *g == 0.0);

    // Rebuild the mixture from the saved checkpoints and compare on fresh probes.
    let plan = SplitPlan {
        rs_users: 10,
        random_users: 2_000,
        ..SplitPlan::default()
    };
    let mut worst_mix = 0.0f64;
    for s in &m.seeds {
        let model_dir = dir.join(format!("seed-{}", s.seed)).join("models");
        let aware = TrainedModel::load(model_dir.join(format!("{}.json", slug("ST_PSF")))).unwrap();
        let unaware = TrainedModel::load(model_dir.join(format!("{}.json", slug("BASE")))).unwrap();
        let probe = plan.build(s.seed).unwrap().test.features().to_owned();
        let alpha = s.fusion.as_ref().unwrap().alpha;
        let mix = Mixture::new(&aware, &unaware, alpha).unwrap();
        let g_mix = position_gradient(&mix, probe.view()).unwrap();
        let g_aware = position_gradient(&aware, probe.view()).unwrap();
        worst_mix = worst_mix.max((g_mix - alpha * g_aware).abs());
        let reported = s.model("GI").unwrap();
        let g_st = s.model("ST_PSF").unwrap().report.position_gradient;
        worst_mix = worst_mix.max((reported.report.position_gradient - reported.alpha.unwrap() * g_st).abs());
    }

    let mut magnitudes = vec![mean(seed_values(m, "ST_PSF", |r| r.position_gradient)).abs()];
    for r in GI_RATES {
        let name = ModelKind::gi(r).unwrap().to_string();
        magnitudes.push(mean(seed_values(m, &name, |r| r.position_gradient)).abs());
    }
    let monotone = magnitudes.windows(2).all(|w| w[1] <= 1.1 * w[0]);
    record(
        out,
        "position-gradient properties",
        base_zero && worst_mix <= 1e-12 && monotone,
        format!(
            "BASE gradient per seed {base:?}; max |g_mix - alpha g_aware| = {worst_mix:.1e} (limit 1e-12); \
             |gradient| at rates [0, 0.25, 0.5, 0.75, 1] = {magnitudes:.5?} (each step may grow at most 10%)"
        ),
    );
}

fn determinism(out: &mut Vec<Outcome>) {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str| -> Vec<u8> {
        let dir = tmp.path().join(name);
        let status = Command::new(BIN)
            .args([
                "run",
                "--deterministic",
                "--seed",
                "5",
                "--rs-users",
                "1500",
                "--random-users",
                "600",
            ])
            .args([
                "--max-epochs",
                "3",
                "--kinds",
                "base,st_psf,gi,gi:0.5",
                "--probe-size",
                "500",
            ])
            .args(["--trace-every", "10", "--out"])
            .arg(&dir)
            .output()
            .expect("spawn posbias");
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        std::fs::read(dir.join("metrics.json")).unwrap()
    };
    let (a, b) = (run("first"), run("second"));
    record(
        out,
        "deterministic runs give byte-identical metrics",
        a == b && !a.is_empty(),
        format!("{} and {} bytes, identical: {}", a.len(), b.len(), a == b),
    );
}

fn main() {
    let mut outcomes = Vec::new();
    linear_example(&mut outcomes);
    closed_form_vs_grid(&mut outcomes);
    gradient_check(&mut outcomes);
    determinism(&mut outcomes);

    let tmp = tempfile::tempdir().unwrap();
    let metrics = desk_run(&mut outcomes, tmp.path());
    method_ordering(&mut outcomes, &metrics);
    closed_form_efficiency(&mut outcomes, &metrics);
    gradient_properties(&mut outcomes, &metrics, tmp.path());
    l2_trend(&mut outcomes);

    let failed: Vec<&Outcome> = outcomes.iter().filter(|o| !o.pass).collect();
    println!(
        "acceptance: {} passed, {} failed",
        outcomes.len() - failed.len(),
        failed.len()
    );
    for f in &failed {
        println!("  failed: {} ({})", f.name, f.detail);
    }
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
