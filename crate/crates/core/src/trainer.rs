//! Maximum-likelihood training of a flow and its prior means.
//!
//! The objective for a batch is the mean negative log-likelihood
//! `-(1/B) sum_i [log p(z_i | labels_i) + log|det d f^-1 / dx|(x_i)]`.
//! Gradients are exact: the prior term is differentiated in closed form and
//! the result is pushed back through the recorded flow tape.


use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::flow::{FlowModel, Mode, Tape};
use crate::priors::{ClassMeans, PriorSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 256,
            epochs: 30,
            seed: 0,
            checkpoint_every: 0,
            grad_clip: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("adam_epsilon must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 (batch norm needs batch statistics)");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Bias-corrected Adam update, with optional global-norm clipping of `grads`
/// applied first.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], config: &TrainConfig) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(state.m.len(), params.len(), "moment shape");
    let mut scale = 1.0;
    if let Some(clip) = config.grad_clip {
        let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > clip {
            scale = clip / norm;
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i] * scale;
        state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
        state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_epsilon);
    }
}

/// Mean objective over a batch, split into its two terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NllBreakdown {
    pub nll: f64,
    /// Mean log prior density of the codes.
    pub prior_term: f64,
    /// Mean log-determinant of the normalizing map.
    pub entropy_term: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub flow: Vec<f64>,
    pub means: Vec<ClassMeans>,
}

impl Gradients {
    /// Flow gradient followed by the flattened mean gradients (empty for a
    /// standard prior), matching [`TrainState`]'s moment layout.
    pub fn flatten(&self, prior: &PriorSpec) -> Vec<f64> {
        let mut out = self.flow.clone();
        if prior.trainable() {
            for m in &self.means {
                out.extend_from_slice(&m.values);
            }
        }
        out
    }
}

/// Label columns of `dataset` in the order of the prior's factors.
pub fn prior_labels<'a>(prior: &PriorSpec, dataset: &'a LabeledDataset) -> Result<Vec<&'a [usize]>> {
    let mut cols = Vec::new();
    for f in 0..prior.num_label_factors() {
        let name = &prior.partition().names()[f];
        let idx = dataset.factor_index(name)?;
        let classes = dataset.factors()[idx].classes;
        if classes > prior.means()[f].classes {
            return Err(Error::InvalidConfig(format!(
                "factor `{name}` has {classes} classes in the data but {} in the prior",
                prior.means()[f].classes
            )));
        }
        cols.push(dataset.labels(idx));
    }
    Ok(cols)
}

fn forward_backward(
    model: &FlowModel,
    prior: &PriorSpec,
    x: ArrayView2<f64>,
    labels: &[&[usize]],
) -> Result<(NllBreakdown, Gradients, Tape)> {
    let n = x.nrows();
    if n == 0 {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    if prior.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: prior.dim(),
        });
    }
    let tape = model.tape(x)?;
    let log_prior = prior.log_prior_batch(tape.z.view(), labels)?;
    let inv_n = 1.0 / n as f64;
    let prior_term = log_prior.sum() * inv_n;
    let entropy_term = tape.log_det.sum() * inv_n;
    let nll = -(prior_term + entropy_term);
    if !nll.is_finite() {
        return Err(Error::NonFinite {
            layer: model.layers().len(),
            stage: "loss",
        });
    }
    let mu = prior.mean_rows(n, labels)?;
    // d(-log N(z; mu, I))/dz = z - mu
    let g_z: Array2<f64> = (&tape.z - &mu) * inv_n;
    let g_ld = Array1::from_elem(n, -inv_n);
    let (flow, _) = model.backward(&tape, &g_z, &g_ld)?;
    let mut means = prior.prior_grad_means(tape.z.view(), labels)?;
    for m in &mut means {
        for v in &mut m.values {
            *v *= -inv_n;
        }
    }
    Ok((
        NllBreakdown {
            nll,
            prior_term,
            entropy_term,
        },
        Gradients { flow, means },
        tape,
    ))
}

/// Mean negative log-likelihood of a batch and its exact gradient w.r.t. every
/// flow parameter and every class mean. Batch-norm layers follow the model's
/// mode; running statistics are not touched.
pub fn nll_and_grad(
    model: &FlowModel,
    prior: &PriorSpec,
    x: ArrayView2<f64>,
    labels: &[&[usize]],
) -> Result<(NllBreakdown, Gradients)> {
    let (b, g, _) = forward_backward(model, prior, x, labels)?;
    Ok((b, g))
}

/// Objective without gradients, using the model's current mode.
pub fn nll(model: &FlowModel, prior: &PriorSpec, x: ArrayView2<f64>, labels: &[&[usize]]) -> Result<NllBreakdown> {
    let tape = model.tape(x)?;
    let log_prior = prior.log_prior_batch(tape.z.view(), labels)?;
    let inv_n = 1.0 / x.nrows() as f64;
    let prior_term = log_prior.sum() * inv_n;
    let entropy_term = tape.log_det.sum() * inv_n;
    Ok(NllBreakdown {
        nll: -(prior_term + entropy_term),
        prior_term,
        entropy_term,
    })
}

/// Inference-mode objective over a whole dataset.
pub fn evaluate(model: &FlowModel, prior: &PriorSpec, dataset: &LabeledDataset) -> Result<NllBreakdown> {
    let labels = prior_labels(prior, dataset)?;
    let mut frozen = model.clone();
    frozen.set_mode(Mode::Inference);
    nll(&frozen, prior, dataset.features(), &labels)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub nll: f64,
    pub prior_term: f64,
    pub entropy_term: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainState {
    pub adam: AdamState,
    pub epochs_done: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn last_nll(&self) -> Option<f64> {
        self.history.last().map(|r| r.nll)
    }

    /// Lowest per-epoch mean NLL seen so far.
    pub fn best_nll(&self) -> Option<f64> {
        self.history.iter().map(|r| r.nll).min_by(f64::total_cmp)
    }
}

/// Passed to the per-epoch callback of [`train`].
pub struct EpochProgress<'a> {
    pub record: EpochRecord,
    pub wall_secs: f64,
    pub model: &'a FlowModel,
    pub prior: &'a PriorSpec,
    pub state: &'a TrainState,
}

impl EpochProgress<'_> {
    /// `epoch, mean NLL, prior term, entropy term, wall time` as one line.
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} nll={:.6} prior={:.6} entropy={:.6} wall={:.3}s",
            self.record.epoch, self.record.nll, self.record.prior_term, self.record.entropy_term, self.wall_secs
        )
    }
}

/// Seeded permutation for one epoch; depends only on `(seed, epoch)`.
pub fn epoch_permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Trains `model` and the prior means with Adam until `config.epochs` epochs
/// have been completed (counting those already in `resume`).
///
/// On divergence the model, prior and optimizer are restored to the state at
/// the start of the failing epoch and [`Error::Diverged`] is returned.
pub fn train<F>(
    model: &mut FlowModel,
    prior: &mut PriorSpec,
    dataset: &LabeledDataset,
    config: &TrainConfig,
    resume: Option<TrainState>,
    mut on_epoch: F,
) -> Result<TrainState>
where
    F: FnMut(&EpochProgress) -> Result<()>,
{
    config.validate()?;
    if dataset.len() < 2 {
        return Err(Error::InvalidConfig("training needs at least 2 samples".into()));
    }
    if dataset.dim() != model.dim() || prior.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: if dataset.dim() != model.dim() { dataset.dim() } else { prior.dim() },
        });
    }
    let labels = prior_labels(prior, dataset)?;
    let n_flow = model.num_params();
    let n_total = n_flow + prior.num_mean_params();
    let mut state = resume.unwrap_or_else(|| TrainState {
        adam: AdamState::new(n_total),
        ..TrainState::default()
    });
    if state.adam.m.len() != n_total || state.adam.v.len() != n_total {
        return Err(Error::Checkpoint("optimizer state does not match the model".into()));
    }

    model.set_mode(Mode::Training);
    let result = run_epochs(model, prior, dataset, &labels, config, &mut state, &mut on_epoch);
    model.set_mode(Mode::Inference);
    result.map(|_| state)
}

#[cfg(not(target_arch = "wasm32"))]
fn stopwatch() -> impl Fn() -> f64 {
    let start = std::time::Instant::now();
    move || start.elapsed().as_secs_f64()
}

// No monotonic clock on bare wasm.
#[cfg(target_arch = "wasm32")]
fn stopwatch() -> impl Fn() -> f64 {
    || 0.0
}

fn run_epochs<F>(
    model: &mut FlowModel,
    prior: &mut PriorSpec,
    dataset: &LabeledDataset,
    labels: &[&[usize]],
    config: &TrainConfig,
    state: &mut TrainState,
    on_epoch: &mut F,
) -> Result<()>
where
    F: FnMut(&EpochProgress) -> Result<()>,
{
    let n_flow = model.num_params();
    let x = dataset.features();
    let mut packed = Vec::with_capacity(state.adam.m.len());
    while state.epochs_done < config.epochs {
        let epoch = state.epochs_done;
        let elapsed = stopwatch();
        let snapshot = (model.clone(), prior.clone(), state.adam.clone());
        let perm = epoch_permutation(dataset.len(), config.seed, epoch);
        let mut sum = NllBreakdown::default();
        let mut seen = 0usize;
        for chunk in perm.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let xb = x.select(Axis(0), chunk);
            let lb: Vec<Vec<usize>> = labels.iter().map(|col| chunk.iter().map(|&i| col[i]).collect()).collect();
            let lb_refs: Vec<&[usize]> = lb.iter().map(Vec::as_slice).collect();
            let outcome = forward_backward(model, prior, xb.view(), &lb_refs).and_then(|(b, g, tape)| {
                let flat = g.flatten(prior);
                if flat.iter().all(|v| v.is_finite()) {
                    Ok((b, flat, tape))
                } else {
                    Err(Error::NonFinite { layer: 0, stage: "gradient" })
                }
            });
            let (batch, grads, tape) = match outcome {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => {
                    let step = state.adam.step;
                    (*model, *prior, state.adam) = snapshot;
                    model.set_mode(Mode::Training);
                    return Err(Error::Diverged { epoch, step });
                }
                Err(e) => return Err(e),
            };
            model.update_running_stats(&tape);

            packed.clear();
            packed.extend_from_slice(model.params());
            packed.extend(prior.flat_means());
            adam_step(&mut state.adam, &mut packed, &grads, config);
            model.params_mut().copy_from_slice(&packed[..n_flow]);
            prior.set_flat_means(&packed[n_flow..]);

            let w = chunk.len() as f64;
            sum.prior_term += w * batch.prior_term;
            sum.entropy_term += w * batch.entropy_term;
            seen += chunk.len();
        }
        let seen = seen as f64;
        let record = EpochRecord {
            epoch,
            nll: -(sum.prior_term / seen + sum.entropy_term / seen),
            prior_term: sum.prior_term / seen,
            entropy_term: sum.entropy_term / seen,
        };
        state.history.push(record);
        state.epochs_done += 1;
        on_epoch(&EpochProgress {
            record,
            wall_secs: elapsed(),
            model,
            prior,
            state,
        })?;
    }
    Ok(())
}
