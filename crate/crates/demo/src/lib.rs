//! Browser demo: train a small flow on synthetic two-factor data, look at 2-D
//! projections of observations and codes, and move samples between classes.
//!
//! [`Session`] is plain Rust; [`DemoSession`] is its JavaScript face.

use factorial_flow::evaluation::{manipulation_eval, project_2d, train_classifier, ClassifierConfig, MlpClassifier};
use factorial_flow::factorize::{class_means, encode_batch, factor_span, manipulate_batch};
use factorial_flow::priors::{LatentPartition, Regime};
use factorial_flow::synthetic::{FactorShape, SyntheticSpec};
use factorial_flow::trainer::evaluate;
use factorial_flow::{train, FlowConfig, FlowModel, LabeledDataset, PriorSpec, TrainConfig, TrainState};
use ndarray::s;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

pub const DIM: usize = 8;
pub const CLASSES: usize = 3;
pub const FACTORS: [&str; 2] = ["phone", "speaker"];

pub struct Session {
    seed: u64,
    regime: Regime,
    train: LabeledDataset,
    test: LabeledDataset,
    model: FlowModel,
    prior: PriorSpec,
    state: Option<TrainState>,
    classifiers: Option<Vec<MlpClassifier>>,
}

/// Target and other-factor posteriors before and after manipulation,
/// averaged over all class pairs and samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub target_before: f64,
    pub target_after: f64,
    pub other_before: f64,
    pub other_after: f64,
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

impl Session {
    pub fn new(seed: u64, regime: &str) -> Result<Self, String> {
        let regime = Regime::parse(regime).ok_or_else(|| format!("unknown regime `{regime}`"))?;
        let spec = SyntheticSpec::random(
            DIM,
            &[FactorShape::new(FACTORS[0], CLASSES, 2), FactorShape::new(FACTORS[1], CLASSES, 2)],
            2.0,
            (0.1, 0.5),
            seed,
        )
        .map_err(err)?;
        let train = spec.generate(60, 0).map_err(err)?;
        let test = spec.generate(20, 1).map_err(err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(16);
        let model = FlowModel::for_training(FlowConfig::new(DIM, 4, 16), &mut rng).map_err(err)?;
        let prior = match regime {
            Regime::Standard => PriorSpec::standard(DIM),
            Regime::Discriminative => PriorSpec::discriminative(DIM, FACTORS[0], CLASSES, &mut rng).map_err(err)?,
            Regime::Factorial => {
                let partition = LatentPartition::equal(FACTORS, DIM).map_err(err)?;
                PriorSpec::factorial(partition, &[CLASSES, CLASSES], &mut rng).map_err(err)?
            }
        };
        Ok(Self {
            seed,
            regime,
            train,
            test,
            model,
            prior,
            state: None,
            classifiers: None,
        })
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn epochs_done(&self) -> usize {
        self.state.as_ref().map_or(0, |s| s.epochs_done)
    }

    /// Runs `epochs` more epochs; returns their mean training NLL.
    pub fn train(&mut self, epochs: usize) -> Result<Vec<f64>, String> {
        let done = self.epochs_done();
        let config = TrainConfig {
            epochs: done + epochs,
            batch_size: 64,
            learning_rate: 3e-3,
            seed: self.seed,
            ..TrainConfig::default()
        };
        let state = train(&mut self.model, &mut self.prior, &self.train, &config, self.state.take(), |_| Ok(()))
            .map_err(err)?;
        let nll = state.history[done..].iter().map(|r| r.nll).collect();
        self.state = Some(state);
        Ok(nll)
    }

    pub fn test_nll(&self) -> Result<f64, String> {
        Ok(evaluate(&self.model, &self.prior, &self.test).map_err(err)?.nll)
    }

    /// Class labels of the test samples for factor `factor` (0 or 1).
    pub fn labels(&self, factor: usize) -> Vec<u32> {
        self.test.labels(factor).iter().map(|&l| l as u32).collect()
    }

    /// PCA coordinates of the test set, interleaved `u, v`. `space` is `x`,
    /// `z`, or a factor name for that factor's partial code.
    pub fn projection(&self, space: &str) -> Result<Vec<f64>, String> {
        let coords = match space {
            "x" => project_2d(self.test.features()).map_err(err)?.coords,
            "z" => {
                let z = encode_batch(&self.model, self.test.features()).map_err(err)?;
                project_2d(z.view()).map_err(err)?.coords
            }
            name => {
                if self.regime != Regime::Factorial {
                    return Err("partial codes need the factorial prior".into());
                }
                if !FACTORS.contains(&name) {
                    return Err(format!("unknown space `{name}`"));
                }
                let z = encode_batch(&self.model, self.test.features()).map_err(err)?;
                let span = factor_span(&self.prior, name);
                project_2d(z.slice(s![.., span])).map_err(err)?.coords
            }
        };
        Ok(coords.into_raw_vec_and_offset().0)
    }

    /// Moves the test samples of class `from` to class `to` and returns the
    /// originals followed by the moved points, both in the `x` PCA basis.
    pub fn manipulate(&self, factor: &str, from: usize, to: usize) -> Result<Vec<f64>, String> {
        let fi = self.test.factor_index(factor).map_err(err)?;
        if from >= CLASSES || to >= CLASSES {
            return Err(format!("classes are 0..{CLASSES}"));
        }
        let rows: Vec<usize> = (0..self.test.len()).filter(|&i| self.test.labels(fi)[i] == from).collect();
        let subset = self.test.select(&rows);
        let means = class_means(&self.model, &self.prior, &self.train, factor).map_err(err)?;
        let moved = manipulate_batch(&self.model, &means, subset.features(), from, to).map_err(err)?;
        let basis = project_2d(self.test.features()).map_err(err)?;
        let before = basis.apply(subset.features()).map_err(err)?;
        let after = basis.apply(moved.view()).map_err(err)?;
        let mut out = before.into_raw_vec_and_offset().0;
        out.extend(after.into_raw_vec_and_offset().0);
        Ok(out)
    }

    fn classifiers(&mut self) -> Result<&[MlpClassifier], String> {
        if self.classifiers.is_none() {
            let trained = (0..FACTORS.len())
                .map(|f| {
                    let config = ClassifierConfig {
                        epochs: 30,
                        seed: self.seed + f as u64,
                        ..ClassifierConfig::default()
                    };
                    train_classifier(self.train.features(), self.train.labels(f), CLASSES, &config).map(|(c, _)| c)
                })
                .collect::<Result<Vec<_>, _>>()
                .map_err(err)?;
            self.classifiers = Some(trained);
        }
        Ok(self.classifiers.as_deref().expect("just set"))
    }

    /// Manipulation scores for `factor` on the test set.
    pub fn scores(&mut self, factor: &str) -> Result<Scores, String> {
        let means = class_means(&self.model, &self.prior, &self.train, factor).map_err(err)?;
        let classifiers = self.classifiers()?.to_vec();
        let r = manipulation_eval(&self.model, &means, &classifiers, &self.test, factor, false).map_err(err)?;
        Ok(Scores {
            target_before: r.target_before,
            target_after: r.target_after,
            other_before: r.others[0].before,
            other_after: r.others[0].after,
        })
    }
}

#[wasm_bindgen]
pub struct DemoSession {
    inner: Session,
}

fn js(e: String) -> JsError {
    JsError::new(&e)
}

#[wasm_bindgen]
impl DemoSession {
    /// `regime` is `nf`, `dnf` or `fdnf`.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, regime: &str) -> Result<DemoSession, JsError> {
        Session::new(seed as u64, regime).map(|inner| DemoSession { inner }).map_err(js)
    }

    pub fn train(&mut self, epochs: u32) -> Result<Vec<f64>, JsError> {
        self.inner.train(epochs as usize).map_err(js)
    }

    #[wasm_bindgen(js_name = epochsDone)]
    pub fn epochs_done(&self) -> u32 {
        self.inner.epochs_done() as u32
    }

    #[wasm_bindgen(js_name = testNll)]
    pub fn test_nll(&self) -> Result<f64, JsError> {
        self.inner.test_nll().map_err(js)
    }

    pub fn labels(&self, factor: u32) -> Vec<u32> {
        self.inner.labels(factor as usize)
    }

    pub fn projection(&self, space: &str) -> Result<Vec<f64>, JsError> {
        self.inner.projection(space).map_err(js)
    }

    pub fn manipulate(&self, factor: &str, from: u32, to: u32) -> Result<Vec<f64>, JsError> {
        self.inner.manipulate(factor, from as usize, to as usize).map_err(js)
    }

    /// `[target_before, target_after, other_before, other_after]`.
    pub fn scores(&mut self, factor: &str) -> Result<Vec<f64>, JsError> {
        let s = self.inner.scores(factor).map_err(js)?;
        Ok(vec![s.target_before, s.target_after, s.other_before, s.other_after])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn training_lowers_nll() {
        let mut s = Session::new(1, "fdnf").unwrap();
        let before = s.test_nll().unwrap();
        let history = s.train(5).unwrap();
        assert_eq!(history.len(), 5);
        assert_eq!(s.epochs_done(), 5);
        s.train(2).unwrap();
        assert_eq!(s.epochs_done(), 7);
        assert!(s.test_nll().unwrap() < before);
    }

    #[test]
    fn projections_have_two_coordinates_per_sample() {
        let s = Session::new(2, "fdnf").unwrap();
        let n = s.labels(0).len();
        for space in ["x", "z", "phone", "speaker"] {
            assert_eq!(s.projection(space).unwrap().len(), 2 * n);
        }
        assert!(s.projection("accent").is_err());
        let nf = Session::new(2, "nf").unwrap();
        assert!(nf.projection("phone").is_err());
        assert!(Session::new(2, "vae").is_err());
    }

    #[test]
    fn manipulation_returns_before_and_after() {
        let mut s = Session::new(3, "fdnf").unwrap();
        s.train(3).unwrap();
        let members = s.labels(0).iter().filter(|&&l| l == 1).count();
        let pts = s.manipulate("phone", 1, 1).unwrap();
        assert_eq!(pts.len(), 4 * members);
        let (a, b) = pts.split_at(2 * members);
        assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-8));
        assert!(s.manipulate("phone", 0, 5).is_err());
        let sc = s.scores("speaker").unwrap();
        for v in [sc.target_before, sc.target_after, sc.other_before, sc.other_after] {
            assert!((0.0..=1.0).contains(&v));
        }
    }
}
