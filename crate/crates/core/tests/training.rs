use factorial_flow::priors::LatentPartition;
use factorial_flow::synthetic::{FactorShape, SyntheticSpec};
use factorial_flow::trainer::{evaluate, TrainState};
use factorial_flow::{train, Checkpoint, Error, FactorInfo, FlowConfig, FlowModel, LabeledDataset, PriorSpec, TrainConfig};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn small_factorial(seed: u64) -> (FlowModel, PriorSpec, LabeledDataset) {
    let spec = SyntheticSpec::random(
        6,
        &[FactorShape::new("a", 3, 2), FactorShape::new("b", 3, 2)],
        2.0,
        (0.1, 0.5),
        seed,
    )
    .unwrap();
    let data = spec.generate(20, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = FlowModel::for_training(FlowConfig::new(6, 2, 8), &mut rng).unwrap();
    let partition = LatentPartition::new(["a", "b"], &[3, 3]).unwrap();
    let prior = PriorSpec::factorial(partition, &[3, 3], &mut rng).unwrap();
    (model, prior, data)
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 32,
        learning_rate: 3e-3,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn run(model: &mut FlowModel, prior: &mut PriorSpec, data: &LabeledDataset, cfg: &TrainConfig, resume: Option<TrainState>) -> TrainState {
    train(model, prior, data, cfg, resume, |_| Ok(())).unwrap()
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let (mut model, mut prior, data) = small_factorial(1);
    let before = (model.params().to_vec(), prior.clone());
    let cfg = TrainConfig {
        learning_rate: 0.0,
        batch_size: data.len(),
        ..config(5)
    };
    let state = run(&mut model, &mut prior, &data, &cfg, None);
    assert_eq!(model.params(), &before.0[..]);
    assert_eq!(prior, before.1);
    let first = state.history[0].nll;
    for r in &state.history {
        assert!((r.nll - first).abs() < 1e-12, "{} vs {first}", r.nll);
    }
}

#[test]
fn training_is_deterministic() {
    let (mut m1, mut p1, data) = small_factorial(2);
    let (mut m2, mut p2) = (m1.clone(), p1.clone());
    let s1 = run(&mut m1, &mut p1, &data, &config(4), None);
    let s2 = run(&mut m2, &mut p2, &data, &config(4), None);
    assert_eq!(m1, m2);
    assert_eq!(p1, p2);
    assert_eq!(s1, s2);
}

#[test]
fn resume_from_checkpoint_matches_uninterrupted_run() {
    let (mut full, mut full_prior, data) = small_factorial(3);
    let (mut part, mut part_prior) = (full.clone(), full_prior.clone());
    let full_state = run(&mut full, &mut full_prior, &data, &config(4), None);

    let half = run(&mut part, &mut part_prior, &data, &config(2), None);
    let bytes = Checkpoint {
        model: part,
        prior: part_prior,
        state: Some(half),
    }
    .to_bytes();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    let (mut model, mut prior) = (ck.model, ck.prior);
    let resumed = run(&mut model, &mut prior, &data, &config(4), ck.state);

    assert_eq!(model.params(), full.params());
    assert_eq!(model, full);
    assert_eq!(prior, full_prior);
    assert_eq!(resumed, full_state);
    assert_eq!(resumed.last_nll(), full_state.history.last().map(|r| r.nll));
    assert!(resumed.best_nll().unwrap() <= resumed.last_nll().unwrap());
}

#[test]
fn divergence_restores_last_good_state() {
    let (mut model, mut prior, data) = small_factorial(4);
    let mut features = data.features().to_owned();
    features[[5, 0]] = 1e300;
    features[[6, 1]] = -1e300;
    let labels = (0..2).map(|f| data.labels(f).to_vec()).collect();
    let bad = LabeledDataset::new(data.ids().to_vec(), features, data.factors().to_vec(), labels).unwrap();
    let before = (model.clone(), prior.clone());
    let err = train(&mut model, &mut prior, &bad, &config(3), None, |_| Ok(())).unwrap_err();
    assert!(matches!(err, Error::Diverged { epoch: 0, .. }), "{err}");
    assert_eq!(model, before.0);
    assert_eq!(prior, before.1);
}

#[test]
fn callback_errors_stop_training() {
    let (mut model, mut prior, data) = small_factorial(5);
    let mut seen = Vec::new();
    let err = train(&mut model, &mut prior, &data, &config(5), None, |p| {
        seen.push(p.record.epoch);
        if p.record.epoch == 1 {
            Err(Error::Checkpoint("disk full".into()))
        } else {
            Ok(())
        }
    })
    .unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)));
    assert_eq!(seen, vec![0, 1]);
}

#[test]
fn terms_sum_to_total_in_history() {
    let (mut model, mut prior, data) = small_factorial(6);
    let state = run(&mut model, &mut prior, &data, &config(3), None);
    for r in &state.history {
        assert!((r.prior_term + r.entropy_term + r.nll).abs() < 1e-12);
    }
    let e = evaluate(&model, &prior, &data).unwrap();
    assert!((e.prior_term + e.entropy_term + e.nll).abs() < 1e-12);
}

#[test]
fn factorial_nll_decreases_over_first_epochs() {
    let spec = SyntheticSpec::desk_scale(7).unwrap();
    let data = spec.generate(200, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut model = FlowModel::for_training(FlowConfig::new(16, 6, 32), &mut rng).unwrap();
    let partition = LatentPartition::equal(["phone", "speaker"], 16).unwrap();
    let mut prior = PriorSpec::factorial(partition, &[5, 5], &mut rng).unwrap();
    let cfg = TrainConfig {
        epochs: 10,
        seed: 7,
        ..TrainConfig::default()
    };
    let state = run(&mut model, &mut prior, &data, &cfg, None);
    for w in state.history.windows(2) {
        assert!(w[1].nll - w[0].nll <= 0.01, "NLL rose from {} to {}", w[0].nll, w[1].nll);
    }
}

#[test]
fn standard_flow_reaches_gaussian_entropy() {
    let d = 4;
    let n = 5000;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(&mut rng));
    let data = LabeledDataset::new((0..n as u64).collect(), x, vec![FactorInfo::new("none", 1)], vec![vec![0; n]]).unwrap();
    let mut model = FlowModel::for_training(FlowConfig::new(d, 6, 32), &mut rng).unwrap();
    let mut prior = PriorSpec::standard(d);
    let cfg = TrainConfig {
        epochs: 10,
        seed: 21,
        ..TrainConfig::default()
    };
    run(&mut model, &mut prior, &data, &cfg, None);
    let entropy = 0.5 * d as f64 * (1.0 + (2.0 * std::f64::consts::PI).ln());
    let nll = evaluate(&model, &prior, &data).unwrap().nll;
    assert!(((nll - entropy) / d as f64).abs() < 0.1, "nll {nll} entropy {entropy}");
}

#[test]
fn mismatched_inputs_rejected() {
    let (mut model, mut prior, data) = small_factorial(8);
    let one = data.select(&[0]);
    assert!(train(&mut model, &mut prior, &one, &config(1), None, |_| Ok(())).is_err());
    let mut std_prior = PriorSpec::standard(5);
    assert!(matches!(
        train(&mut model, &mut std_prior, &data, &config(1), None, |_| Ok(())),
        Err(Error::DimensionMismatch { .. })
    ));
    let bad_resume = TrainState::default();
    assert!(train(&mut model, &mut prior, &data, &config(1), Some(bad_resume), |_| Ok(())).is_err());
}
