use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::trainer::{adam_step, epoch_permutation, AdamState, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of each class held out for the reported validation accuracy.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 50,
            batch_size: 64,
            learning_rate: 3e-3,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierReport {
    pub train_accuracy: f64,
    pub validation_accuracy: Option<f64>,
    pub final_loss: f64,
}

/// One-hidden-layer tanh perceptron with a softmax output. Inputs are
/// standardised with statistics of the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpClassifier {
    input_dim: usize,
    hidden: usize,
    classes: usize,
    /// `w1 (H x I)`, `b1 (H)`, `w2 (C x H)`, `b2 (C)`.
    params: Vec<f64>,
    input_mean: Array1<f64>,
    input_scale: Array1<f64>,
}

struct Views<'a> {
    w1: ArrayView2<'a, f64>,
    b1: ArrayView1<'a, f64>,
    w2: ArrayView2<'a, f64>,
    b2: ArrayView1<'a, f64>,
}

impl MlpClassifier {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn offsets(&self) -> [usize; 4] {
        let (i, h, c) = (self.input_dim, self.hidden, self.classes);
        [0, h * i, h * i + h, h * i + h + c * h]
    }

    fn views<'a>(&self, params: &'a [f64]) -> Views<'a> {
        let [w1, b1, w2, b2] = self.offsets();
        Views {
            w1: ArrayView2::from_shape((self.hidden, self.input_dim), &params[w1..b1]).expect("layout"),
            b1: ArrayView1::from(&params[b1..w2]),
            w2: ArrayView2::from_shape((self.classes, self.hidden), &params[w2..b2]).expect("layout"),
            b2: ArrayView1::from(&params[b2..]),
        }
    }

    fn standardise(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &self.input_mean) / &self.input_scale
    }

    fn hidden_and_posteriors(&self, params: &[f64], xs: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let v = self.views(params);
        let mut h = xs.dot(&v.w1.t());
        h += &v.b1;
        h.mapv_inplace(f64::tanh);
        let mut logits = h.dot(&v.w2.t());
        logits += &v.b2;
        softmax_rows(&mut logits);
        (h, logits)
    }

    /// Class posteriors, one row per input.
    pub fn posteriors(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: x.ncols(),
            });
        }
        let xs = self.standardise(x);
        Ok(self.hidden_and_posteriors(&self.params, &xs).1)
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        Ok(self.posteriors(x)?.rows().into_iter().map(argmax).collect())
    }

    pub fn accuracy(&self, x: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(x)?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }

    /// Mean cross-entropy and its gradient over the parameter vector.
    fn loss_and_grad(&self, params: &[f64], xs: &Array2<f64>, labels: &[usize]) -> (f64, Vec<f64>) {
        let n = xs.nrows() as f64;
        let (h, p) = self.hidden_and_posteriors(params, xs);
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(i, &l)| p[[i, l]].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / n;
        let mut g_logits = p;
        for (i, &l) in labels.iter().enumerate() {
            g_logits[[i, l]] -= 1.0;
        }
        g_logits /= n;
        let v = self.views(params);
        let g_w2 = g_logits.t().dot(&h);
        let g_b2 = g_logits.sum_axis(Axis(0));
        let g_h = g_logits.dot(&v.w2) * &h.mapv(|a| 1.0 - a * a);
        let g_w1 = g_h.t().dot(xs);
        let g_b1 = g_h.sum_axis(Axis(0));
        let mut grad = Vec::with_capacity(params.len());
        grad.extend(g_w1.iter());
        grad.extend(g_b1.iter());
        grad.extend(g_w2.iter());
        grad.extend(g_b2.iter());
        (loss, grad)
    }
}

fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

pub(crate) fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Indices split per class: the first `round(fraction * count)` shuffled
/// members of each class are held out.
fn stratified_split(labels: &[usize], classes: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut held = Vec::new();
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        let k = ((members.len() as f64) * fraction).round() as usize;
        let k = k.min(members.len().saturating_sub(1));
        held.extend_from_slice(&members[..k]);
        train.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    held.sort_unstable();
    (train, held)
}

/// Cross-entropy training with Adam.
pub fn train_classifier(
    x: ArrayView2<f64>,
    labels: &[usize],
    classes: usize,
    config: &ClassifierConfig,
) -> Result<(MlpClassifier, ClassifierReport)> {
    if x.nrows() != labels.len() || x.nrows() == 0 {
        return Err(Error::InvalidConfig("classifier needs one label per non-empty input row".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange {
            factor: "classifier".into(),
            label: l,
            classes,
        });
    }
    let distinct = {
        let mut seen = vec![false; classes];
        labels.iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if classes < 2 || distinct < 2 {
        return Err(Error::InvalidConfig("classifier needs at least two populated classes".into()));
    }
    if config.hidden == 0 || config.batch_size == 0 || !(0.0..1.0).contains(&config.validation_fraction) {
        return Err(Error::InvalidConfig("invalid classifier configuration".into()));
    }

    let (train_idx, held_idx) = stratified_split(labels, classes, config.validation_fraction, config.seed);
    let xt = x.select(Axis(0), &train_idx);
    let lt: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();

    let input_mean = xt.mean_axis(Axis(0)).expect("non-empty");
    let input_scale = xt
        .var_axis(Axis(0), 0.0)
        .mapv(|v| if v > 1e-24 { v.sqrt() } else { 1.0 });

    let (i, h, c) = (x.ncols(), config.hidden, classes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6d6c_7000);
    let n1 = Normal::new(0.0, (1.0 / i as f64).sqrt()).expect("std");
    let n2 = Normal::new(0.0, (1.0 / h as f64).sqrt()).expect("std");
    let mut params = Vec::with_capacity(h * i + h + c * h + c);
    params.extend((0..h * i).map(|_| n1.sample(&mut rng)));
    params.extend(std::iter::repeat_n(0.0, h));
    params.extend((0..c * h).map(|_| n2.sample(&mut rng)));
    params.extend(std::iter::repeat_n(0.0, c));

    let mut model = MlpClassifier {
        input_dim: i,
        hidden: h,
        classes: c,
        params,
        input_mean,
        input_scale,
    };
    let xs = model.standardise(xt.view());
    let adam_cfg = TrainConfig {
        learning_rate: config.learning_rate,
        grad_clip: None,
        ..TrainConfig::default()
    };
    let mut state = AdamState::new(model.params.len());
    let mut last_loss = f64::NAN;
    for epoch in 0..config.epochs {
        let perm = epoch_permutation(xs.nrows(), config.seed, epoch);
        let mut total = 0.0;
        for chunk in perm.chunks(config.batch_size) {
            let xb = xs.select(Axis(0), chunk);
            let lb: Vec<usize> = chunk.iter().map(|&k| lt[k]).collect();
            let (loss, grad) = model.loss_and_grad(&model.params, &xb, &lb);
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: state.step,
                });
            }
            adam_step(&mut state, &mut model.params, &grad, &adam_cfg);
            total += loss * chunk.len() as f64;
        }
        last_loss = total / xs.nrows() as f64;
    }

    let train_accuracy = model.accuracy(xt.view(), &lt)?;
    let validation_accuracy = if held_idx.is_empty() {
        None
    } else {
        let xv = x.select(Axis(0), &held_idx);
        let lv: Vec<usize> = held_idx.iter().map(|&k| labels[k]).collect();
        Some(model.accuracy(xv.view(), &lv)?)
    };
    Ok((
        model,
        ClassifierReport {
            train_accuracy,
            validation_accuracy,
            final_loss: last_loss,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn blobs(n: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centres = [[-3.0, -3.0], [3.0, 3.0]];
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let x = Array2::from_shape_fn((n, 2), |(i, j)| {
            centres[labels[i]][j] + 0.5 * rng.sample::<f64, _>(StandardNormal)
        });
        (x, labels)
    }

    #[test]
    fn separable_blobs() {
        let (x, y) = blobs(400, 1);
        let cfg = ClassifierConfig {
            hidden: 8,
            epochs: 20,
            ..Default::default()
        };
        let (clf, report) = train_classifier(x.view(), &y, 2, &cfg).unwrap();
        assert!(report.train_accuracy > 0.99);
        let (xt, yt) = blobs(400, 2);
        assert!(clf.accuracy(xt.view(), &yt).unwrap() > 0.99);
    }

    #[test]
    fn single_class_rejected() {
        let x = Array2::zeros((4, 2));
        assert!(train_classifier(x.view(), &[0, 0, 0, 0], 2, &ClassifierConfig::default()).is_err());
        assert!(train_classifier(x.view(), &[0, 0, 0, 0], 1, &ClassifierConfig::default()).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (x, y) = blobs(12, 3);
        let cfg = ClassifierConfig {
            hidden: 3,
            epochs: 1,
            validation_fraction: 0.0,
            ..Default::default()
        };
        let (clf, _) = train_classifier(x.view(), &y, 2, &cfg).unwrap();
        let xs = clf.standardise(x.view());
        let (_, grad) = clf.loss_and_grad(&clf.params, &xs, &y);
        let h = 1e-6;
        for k in 0..clf.params.len() {
            let mut p = clf.params.clone();
            p[k] += h;
            let lp = clf.loss_and_grad(&p, &xs, &y).0;
            p[k] -= 2.0 * h;
            let lm = clf.loss_and_grad(&p, &xs, &y).0;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - grad[k]).abs() <= 1e-6 * (1.0 + fd.abs()), "{k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn stratified_split_keeps_every_class() {
        let labels: Vec<usize> = (0..50).map(|i| i % 5).collect();
        let (train, held) = stratified_split(&labels, 5, 0.2, 4);
        assert_eq!(train.len(), 40);
        assert_eq!(held.len(), 10);
        for c in 0..5 {
            assert_eq!(held.iter().filter(|&&i| labels[i] == c).count(), 2);
        }
    }

    proptest! {
        #[test]
        fn posteriors_lie_on_the_simplex(seed in any::<u64>(), scale in 0.1f64..1e3) {
            let (x, y) = blobs(20, 7);
            let cfg = ClassifierConfig { hidden: 4, epochs: 2, ..Default::default() };
            let (clf, _) = train_classifier(x.view(), &y, 2, &cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let probe = Array2::from_shape_fn((16, 2), |_| scale * rng.sample::<f64, _>(StandardNormal));
            let p = clf.posteriors(probe.view()).unwrap();
            for row in p.rows() {
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }
}
