//! Acceptance suite. Each test prints one `PASS`/`FAIL` line to stderr
//! (uncaptured) and then asserts. Run with
//! `cargo test -p factorial-flow-cli --test acceptance`.
//!
//! The benchmark-based checks share one pair of `bench` runs with the default
//! configuration. Set `FDNF_BLESS=1` to rewrite the golden reports.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use factorial_flow::factorize::{class_means, encode_batch, factor_span, manipulate_batch, shift_codes};
use factorial_flow::priors::{gaussian_log_density, LatentPartition};
use factorial_flow::synthetic::{FactorShape, SyntheticSpec};
use factorial_flow::trainer::{evaluate, nll, nll_and_grad};
use factorial_flow::{
    train, Checkpoint, FactorInfo, FlowConfig, FlowModel, LabeledDataset, Mode, PriorSpec, TrainConfig,
};
use fdnf_cli::commands::{self, BenchSummary};
use fdnf_cli::{Context, RunConfig, Split};
use ndarray::{s, Array2, Axis};
use proptest::prelude::{prop_assert, proptest, ProptestConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn report(name: &str, pass: bool, detail: &str, elapsed: Duration, budget_secs: u64) -> bool {
    let within = elapsed.as_secs_f64() <= budget_secs as f64;
    let ok = pass && within;
    let line = format!(
        "[acceptance] {name}: {} ({detail}; {:.1}s of {budget_secs}s budget)\n",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    ok
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || scale * rng.sample::<f64, _>(StandardNormal))
}

fn max_abs(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn trained_model(d: usize, seed: u64) -> FlowModel {
    let a = d / 4;
    let spec = SyntheticSpec::random(
        d,
        &[FactorShape::new("a", 3, a.max(1)), FactorShape::new("b", 3, a.max(1))],
        2.0,
        (0.1, 0.5),
        seed,
    )
    .unwrap();
    let data = spec.generate(40, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = FlowModel::for_training(FlowConfig::new(d, 6, 16), &mut rng).unwrap();
    let partition = LatentPartition::equal(["a", "b"], d).unwrap();
    let mut prior = PriorSpec::factorial(partition, &[3, 3], &mut rng).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 64,
        learning_rate: 3e-3,
        seed,
        ..TrainConfig::default()
    };
    train(&mut model, &mut prior, &data, &cfg, None, |_| Ok(())).unwrap();
    model
}

#[test]
fn round_trip_invertibility() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for (i, d) in [4usize, 8, 16].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
        let mut random = FlowModel::identity(FlowConfig::new(d, 6, 16)).unwrap();
        random.randomize(&mut rng, 0.5);
        let trained = trained_model(d, 200 + i as u64);
        for model in [random, trained] {
            let x = gaussian(&mut rng, 1000, d, 2.0);
            let (z, _) = model.inverse_batch(x.view()).unwrap();
            let back = model.forward_batch(z.view()).unwrap();
            worst = worst.max(max_abs(&back, &x));
        }
    }
    let pass = worst < 1e-8;
    assert!(report(
        "invertibility",
        pass,
        &format!("max |f(f^-1(x)) - x| = {worst:.2e}, need < 1e-8"),
        start.elapsed(),
        10
    ));
}

#[test]
fn log_det_matches_finite_differences() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for k in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + k);
        let d = rng.random_range(2..=8);
        let blocks = rng.random_range(1..=6);
        let mut model = FlowModel::identity(FlowConfig::new(d, blocks, 8)).unwrap();
        model.randomize(&mut rng, 0.5);
        let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let (_, analytic) = model.inverse(&x).unwrap();
        let numeric = model.log_det_numeric(&x, 1e-5).unwrap();
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(rel);
    }
    let pass = worst < 1e-4;
    assert!(report(
        "jacobian",
        pass,
        &format!("100 models, worst relative error {worst:.2e}, need < 1e-4"),
        start.elapsed(),
        30
    ));
}

#[test]
fn gradients_match_finite_differences() {
    let start = Instant::now();
    let h = 1e-5;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for (seed, mode) in [(1u64, Mode::Training), (2, Mode::Inference)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = FlowModel::identity(FlowConfig::new(6, 2, 5)).unwrap();
        model.randomize(&mut rng, 0.5);
        model.set_mode(mode);
        let partition = LatentPartition::new(["q", "s"], &[3, 3]).unwrap();
        let mut prior = PriorSpec::factorial(partition, &[3, 2], &mut rng).unwrap();
        let x = gaussian(&mut rng, 9, 6, 1.0);
        let q: Vec<usize> = (0..9).map(|i| i % 3).collect();
        let sp: Vec<usize> = (0..9).map(|i| (i / 3) % 2).collect();
        let labels: [&[usize]; 2] = [&q, &sp];
        let (_, g) = nll_and_grad(&model, &prior, x.view(), &labels).unwrap();
        for k in 0..model.num_params() {
            let orig = model.params()[k];
            model.params_mut()[k] = orig + h;
            let lp = nll(&model, &prior, x.view(), &labels).unwrap().nll;
            model.params_mut()[k] = orig - h;
            let lm = nll(&model, &prior, x.view(), &labels).unwrap().nll;
            model.params_mut()[k] = orig;
            worst = worst.max(rel(g.flow[k], (lp - lm) / (2.0 * h)));
            checked += 1;
        }
        let base = prior.flat_means();
        let analytic: Vec<f64> = g.means.iter().flat_map(|m| m.values.clone()).collect();
        for k in 0..base.len() {
            let mut p = base.clone();
            p[k] += h;
            prior.set_flat_means(&p);
            let lp = nll(&model, &prior, x.view(), &labels).unwrap().nll;
            p[k] -= 2.0 * h;
            prior.set_flat_means(&p);
            let lm = nll(&model, &prior, x.view(), &labels).unwrap().nll;
            prior.set_flat_means(&base);
            worst = worst.max(rel(analytic[k], (lp - lm) / (2.0 * h)));
            checked += 1;
        }
    }
    let pass = worst < 1e-4;
    assert!(report(
        "gradients",
        pass,
        &format!("{checked} parameters (training + inference mode), worst relative error {worst:.2e}, need < 1e-4"),
        start.elapsed(),
        60
    ));
}

#[test]
fn standard_flow_reaches_gaussian_entropy() {
    let start = Instant::now();
    let (d, n) = (4, 5000);
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let x = gaussian(&mut rng, n, d, 1.0);
    let data = LabeledDataset::new((0..n as u64).collect(), x, vec![FactorInfo::new("none", 1)], vec![vec![0; n]])
        .unwrap();
    let mut model = FlowModel::for_training(FlowConfig::new(d, 6, 32), &mut rng).unwrap();
    let mut prior = PriorSpec::standard(d);
    let cfg = TrainConfig {
        epochs: 20,
        seed: 44,
        ..TrainConfig::default()
    };
    train(&mut model, &mut prior, &data, &cfg, None, |_| Ok(())).unwrap();
    let entropy = 0.5 * d as f64 * (1.0 + (2.0 * std::f64::consts::PI).ln());
    let got = evaluate(&model, &prior, &data).unwrap().nll;
    let per_dim = (got - entropy).abs() / d as f64;
    assert!(report(
        "density estimation",
        per_dim < 0.1,
        &format!("NLL {got:.4} vs entropy {entropy:.4}: {per_dim:.4} nat/dim, need < 0.1"),
        start.elapsed(),
        120
    ));
}

#[test]
fn factorial_prior_is_sum_of_factor_densities() {
    let start = Instant::now();
    let worst = std::cell::Cell::new(0.0f64);
    let cases = std::cell::Cell::new(0usize);
    proptest!(ProptestConfig::with_cases(512), |(seed in 0u64..u64::MAX, factors in 1usize..5, extra in 0usize..6)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims: Vec<usize> = (0..factors).map(|_| rng.random_range(1..4 + extra)).collect();
        let classes: Vec<usize> = (0..factors).map(|_| rng.random_range(1..6)).collect();
        let names: Vec<String> = (0..factors).map(|f| format!("f{f}")).collect();
        let partition = LatentPartition::new(names, &dims).unwrap();
        let prior = PriorSpec::factorial(partition.clone(), &classes, &mut rng).unwrap();
        let labels: Vec<usize> = classes.iter().map(|&k| rng.random_range(0..k)).collect();
        let z: Vec<f64> = (0..partition.dim()).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let total = prior.log_prior(&z, &labels).unwrap();
        let sum: f64 = (0..factors)
            .map(|f| {
                let r = partition.range(f);
                gaussian_log_density(&z[r], prior.means()[f].mean(labels[f]))
            })
            .sum();
        worst.set(worst.get().max((total - sum).abs()));
        cases.set(cases.get() + 1);
        prop_assert!((total - sum).abs() < 1e-12);
    });
    let (worst, cases) = (worst.get(), cases.get());
    assert!(report(
        "factorial prior",
        worst < 1e-12,
        &format!("{cases} random partitions/labels, worst |log p - sum| = {worst:.2e}, need < 1e-12"),
        start.elapsed(),
        60
    ));
}

struct BenchRuns {
    first: BenchSummary,
    second: BenchSummary,
    first_files: (Vec<u8>, Vec<u8>),
    second_files: (Vec<u8>, Vec<u8>),
    first_dir: tempfile::TempDir,
    context: Context,
    first_secs: f64,
}

fn bench_runs() -> &'static BenchRuns {
    static RUNS: OnceLock<BenchRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let run = |dir: &tempfile::TempDir| {
            let config = RunConfig {
                out: dir.path().to_path_buf(),
                ..RunConfig::default()
            };
            let ctx = Context::new(config, false);
            let start = Instant::now();
            let summary = commands::bench(&ctx).expect("bench runs");
            let secs = start.elapsed().as_secs_f64();
            let files = (
                fs::read(dir.path().join("bench_report.md")).unwrap(),
                fs::read(dir.path().join("bench_report.csv")).unwrap(),
            );
            (summary, files, ctx, secs)
        };
        let first_dir = tempfile::tempdir().unwrap();
        let second_dir = tempfile::tempdir().unwrap();
        let (first, first_files, context, first_secs) = run(&first_dir);
        let (second, second_files, _, _) = run(&second_dir);
        BenchRuns {
            first,
            second,
            first_files,
            second_files,
            first_dir,
            context,
            first_secs,
        }
    })
}

#[test]
fn desk_benchmark_manipulation() {
    let runs = bench_runs();
    let rows = &runs.first.rows;
    let nf = &rows.iter().find(|(m, _)| m == "NF").unwrap().1;
    let fdnf = &rows.iter().find(|(m, _)| m == "f-DNF").unwrap().1;
    let mut pass = true;
    let mut detail = Vec::new();
    for (f, n) in fdnf.iter().zip(nf) {
        let other = f.others[0].delta.abs();
        let nf_other = n.others[0].delta.abs();
        let ok = f.delta_target >= 0.5 && other <= 0.1 && f.delta_target > n.delta_target && other < nf_other;
        pass &= ok;
        detail.push(format!(
            "{}: f-DNF {:.3}/{:+.3} vs NF {:.3}/{:+.3}",
            f.factor, f.delta_target, f.others[0].delta, n.delta_target, n.others[0].delta
        ));
    }
    let elapsed = Duration::from_secs_f64(runs.first_secs);
    assert!(report(
        "desk-scale manipulation",
        pass,
        &format!("{}; need f-DNF >= 0.5 / <= 0.1 and better than NF on both", detail.join("; ")),
        elapsed,
        900
    ));
}

#[test]
fn partial_code_class_structure() {
    let runs = bench_runs();
    let mut pass = true;
    let mut detail = Vec::new();
    for s in &runs.first.structure {
        if s.code == s.target {
            pass &= s.accuracy >= 0.9;
        } else {
            pass &= s.accuracy - s.chance <= 0.2;
        }
        detail.push(format!("z^{} -> {}: {:.3}", s.code, s.target, s.accuracy));
    }
    assert!(report(
        "class structure",
        pass,
        &format!("{}; need own >= 0.9, other within 0.2 of chance 0.2", detail.join(", ")),
        Duration::from_secs_f64(runs.first_secs),
        900
    ));
}

#[test]
fn latent_factor_isolation() {
    let runs = bench_runs();
    let start = Instant::now();
    let ctx = &runs.context;
    let ckpt = Checkpoint::load(&ctx.model_dir("fdnf").join(commands::CHECKPOINT_FILE)).unwrap();
    let train_set = LabeledDataset::load(&ctx.dataset_path(Split::Train)).unwrap();
    let test = LabeledDataset::load(&ctx.dataset_path(Split::Test)).unwrap();
    let z = encode_batch(&ckpt.model, test.features()).unwrap();
    let mut identical = true;
    let mut worst_round_trip = 0.0f64;
    for (fi, factor) in ["phone", "speaker"].into_iter().enumerate() {
        let other = factor_span(&ckpt.prior, ["speaker", "phone"][fi]);
        let means = class_means(&ckpt.model, &ckpt.prior, &train_set, factor).unwrap();
        for from in 0..5 {
            let rows: Vec<usize> = (0..test.len()).filter(|&i| test.labels(fi)[i] == from).collect();
            let zc = z.select(Axis(0), &rows);
            let x = test.features().select(Axis(0), &rows);
            for to in (0..5).filter(|&t| t != from) {
                let shifted = shift_codes(&means, zc.clone(), from, to).unwrap();
                identical &= shifted
                    .slice(s![.., other.clone()])
                    .iter()
                    .zip(zc.slice(s![.., other.clone()]))
                    .all(|(a, b)| a.to_bits() == b.to_bits());
                let moved = manipulate_batch(&ckpt.model, &means, x.view(), from, to).unwrap();
                let back = manipulate_batch(&ckpt.model, &means, moved.view(), to, from).unwrap();
                worst_round_trip = worst_round_trip.max(max_abs(&back, &x));
            }
        }
    }
    let pass = identical && worst_round_trip < 1e-6;
    assert!(report(
        "latent isolation",
        pass,
        &format!(
            "other partial code bit-identical: {identical}; worst c1->c2->c1 error {worst_round_trip:.2e}, need < 1e-6"
        ),
        start.elapsed(),
        60
    ));
}

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn matches_golden(name: &str, bytes: &[u8]) -> bool {
    let path = golden(name);
    if std::env::var_os("FDNF_BLESS").is_some() {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, bytes).unwrap();
    }
    fs::read(&path).map(|g| g == bytes).unwrap_or(false)
}

#[test]
fn bench_is_deterministic() {
    let runs = bench_runs();
    let start = Instant::now();
    let same_md = runs.first_files.0 == runs.second_files.0;
    let same_csv = runs.first_files.1 == runs.second_files.1;
    let same_summary = runs.first.markdown == runs.second.markdown && runs.first.csv == runs.second.csv;

    let eval_ctx = Context::new(
        RunConfig {
            out: runs.first_dir.path().to_path_buf(),
            ..RunConfig::default()
        },
        false,
    );
    let report_path = commands::eval(&eval_ctx, Some("fdnf")).unwrap();
    let eval_md = fs::read(&report_path).unwrap();
    let golden_bench = matches_golden("bench_report.md", &runs.first_files.0);
    let golden_eval = matches_golden("fdnf_report.md", &eval_md);

    let pass = same_md && same_csv && same_summary && golden_bench && golden_eval;
    assert!(report(
        "determinism",
        pass,
        &format!(
            "two bench runs byte-identical: md {same_md}, csv {same_csv}; golden bench report {golden_bench}; golden eval report {golden_eval}"
        ),
        start.elapsed() + Duration::from_secs_f64(2.0 * runs.first_secs),
        1800
    ));
}
