//! Invertible flow: a stack of (batch norm, affine coupling) blocks.
//!
//! Layers are stored in normalizing order (x -> z). `inverse` walks the stack
//! front to back and accumulates `log|det d f^-1 / dx|`; `forward` is the
//! generative map z -> x and walks it back to front.
//!
//! All trainable parameters live in one flat `Vec<f64>`; each layer records
//! the offset of its block. Batch-norm running statistics are layer state.

mod batch_norm;
mod coupling;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

pub use batch_norm::{BatchNormLayer, Mode, BN_EPSILON, BN_MOMENTUM};
pub use coupling::{CouplingLayer, LOG_SCALE_MAX};

use crate::error::{Error, Result};
use batch_norm::BatchNormCache;
use coupling::CouplingCache;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlowConfig {
    pub dim: usize,
    pub blocks: usize,
    pub hidden: usize,
}

impl FlowConfig {
    pub fn new(dim: usize, blocks: usize, hidden: usize) -> Self {
        Self {
            dim,
            blocks,
            hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::InvalidConfig(format!(
                "flow dimension must be at least 2, got {}",
                self.dim
            )));
        }
        if self.blocks == 0 || self.hidden == 0 {
            return Err(Error::InvalidConfig(
                "blocks and hidden width must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    BatchNorm(BatchNormLayer),
    Coupling(CouplingLayer),
}

impl Layer {
    pub fn num_params(&self) -> usize {
        match self {
            Layer::BatchNorm(l) => l.num_params(),
            Layer::Coupling(l) => l.num_params(),
        }
    }

    pub fn offset(&self) -> usize {
        match self {
            Layer::BatchNorm(l) => l.offset,
            Layer::Coupling(l) => l.offset,
        }
    }
}

#[derive(Clone, Debug)]
enum LayerCache {
    BatchNorm(BatchNormCache),
    Coupling(CouplingCache),
}

/// Recorded normalizing pass over a batch, ready for [`FlowModel::backward`].
#[derive(Clone, Debug)]
pub struct Tape {
    caches: Vec<LayerCache>,
    /// Latent codes, one row per sample.
    pub z: Array2<f64>,
    /// Total log-determinant per sample.
    pub log_det: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    dim: usize,
    layers: Vec<Layer>,
    params: Vec<f64>,
}

impl FlowModel {
    /// Identity-initialised model: zero coupling nets, `gamma = 1`, `beta = 0`
    /// and running statistics `(0, 1 - eps)`.
    pub fn identity(config: FlowConfig) -> Result<Self> {
        config.validate()?;
        let widths = vec![config.hidden; config.blocks];
        Ok(Self::with_hidden_widths(config.dim, &widths))
    }

    pub(crate) fn with_hidden_widths(dim: usize, hidden: &[usize]) -> Self {
        let mut layers = Vec::with_capacity(2 * hidden.len());
        let mut offset = 0;
        for (block, &h) in hidden.iter().enumerate() {
            let bn = BatchNormLayer::new(dim, offset);
            offset += bn.num_params();
            layers.push(Layer::BatchNorm(bn));
            let c = CouplingLayer::new(dim, block % 2, h, offset);
            offset += c.num_params();
            layers.push(Layer::Coupling(c));
        }
        let mut model = Self {
            dim,
            layers,
            params: vec![0.0; offset],
        };
        for layer in &model.layers {
            if let Layer::BatchNorm(bn) = layer {
                model.params[bn.offset..bn.offset + dim].fill(1.0);
            }
        }
        model
    }

    /// Starting point for training: identity map, with the first layer of
    /// every coupling net drawn from `N(0, 1/fan_in)` so gradients reach it.
    pub fn for_training<R: Rng + ?Sized>(config: FlowConfig, rng: &mut R) -> Result<Self> {
        let mut model = Self::identity(config)?;
        for layer in model.layers.clone() {
            if let Layer::Coupling(c) = layer {
                let fan_in = c.passthrough().len().max(1) as f64;
                let normal = Normal::new(0.0, fan_in.recip().sqrt()).expect("std > 0");
                for net in c.param_ranges() {
                    for v in &mut model.params[net[0].clone()] {
                        *v = normal.sample(rng);
                    }
                }
            }
        }
        Ok(model)
    }

    /// Draws every parameter and running statistic at random. Used to probe
    /// invariants away from the identity.
    pub fn randomize<R: Rng + ?Sized>(&mut self, rng: &mut R, scale: f64) {
        let weight = Normal::new(0.0, scale).expect("scale > 0");
        let gamma = Uniform::new(0.6, 1.5).expect("range");
        let var = Uniform::new(0.5, 2.0).expect("range");
        for layer in &mut self.layers {
            match layer {
                Layer::BatchNorm(bn) => {
                    let dim = bn.dim;
                    for v in &mut self.params[bn.offset..bn.offset + dim] {
                        *v = gamma.sample(rng);
                    }
                    for v in &mut self.params[bn.offset + dim..bn.offset + 2 * dim] {
                        *v = weight.sample(rng);
                    }
                    for d in 0..dim {
                        bn.running_mean[d] = weight.sample(rng);
                        bn.running_var[d] = var.sample(rng);
                    }
                }
                Layer::Coupling(c) => {
                    let range = c.offset..c.offset + c.num_params();
                    for v in &mut self.params[range] {
                        *v = weight.sample(rng);
                    }
                }
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> usize {
        self.layers.len() / 2
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn layer_params(&self, index: usize) -> &[f64] {
        let layer = &self.layers[index];
        &self.params[layer.offset()..layer.offset() + layer.num_params()]
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Coupling(c) => Some(c.hidden_width),
                _ => None,
            })
            .collect()
    }

    pub fn set_mode(&mut self, mode: Mode) {
        for layer in &mut self.layers {
            if let Layer::BatchNorm(bn) = layer {
                bn.mode = mode;
            }
        }
    }

    pub fn mode(&self) -> Mode {
        self.layers
            .iter()
            .find_map(|l| match l {
                Layer::BatchNorm(bn) => Some(bn.mode),
                _ => None,
            })
            .unwrap_or(Mode::Inference)
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got,
            });
        }
        Ok(())
    }

    fn check_stats(&self) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::BatchNorm(bn) = layer {
                bn.check_stats(i)?;
            }
        }
        Ok(())
    }

    /// Generative map `x = f(z)` using frozen batch-norm statistics.
    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        let z = Array2::from_shape_vec((1, z.len()), z.to_vec()).expect("row");
        Ok(self.forward_batch(z.view())?.into_raw_vec_and_offset().0)
    }

    /// `z = f^-1(x)` and `log|det d f^-1(x) / dx|`, frozen statistics.
    pub fn inverse(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let x = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row");
        let (z, ld) = self.inverse_batch(x.view())?;
        Ok((z.into_raw_vec_and_offset().0, ld[0]))
    }

    pub fn forward_batch(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_dim(z.ncols())?;
        self.check_stats()?;
        let mut x = z.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            match layer {
                Layer::BatchNorm(bn) => bn.generate_frozen(&self.params, &mut x),
                Layer::Coupling(c) => c.generate(&self.params, &mut x),
            }
            finite(&x, i, "forward")?;
        }
        Ok(x)
    }

    pub fn inverse_batch(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        let (z, per_layer) = self.inverse_layerwise(x)?;
        let mut total = Array1::zeros(z.nrows());
        for ld in &per_layer {
            total += ld;
        }
        Ok((z, total))
    }

    /// Like [`inverse_batch`](Self::inverse_batch) but keeps each layer's
    /// log-determinant contribution separate.
    pub fn inverse_layerwise(
        &self,
        x: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Vec<Array1<f64>>)> {
        self.check_dim(x.ncols())?;
        self.check_stats()?;
        let mut z = x.to_owned();
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let ld = match layer {
                Layer::BatchNorm(bn) => {
                    Array1::from_elem(z.nrows(), bn.normalize_frozen(&self.params, &mut z))
                }
                Layer::Coupling(c) => c.normalize(&self.params, &mut z),
            };
            finite(&z, i, "inverse")?;
            if !ld.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    layer: i,
                    stage: "log-determinant",
                });
            }
            per_layer.push(ld);
        }
        Ok((z, per_layer))
    }

    /// Central-difference Jacobian of `f^-1` at `x`, then `log|det|`.
    pub fn log_det_numeric(&self, x: &[f64], h: f64) -> Result<f64> {
        if !(h > 0.0) {
            return Err(Error::InvalidConfig(format!("step must be positive, got {h}")));
        }
        self.check_dim(x.len())?;
        let d = self.dim;
        let mut probes = Array2::zeros((2 * d, d));
        for j in 0..d {
            for k in 0..d {
                probes[[2 * j, k]] = x[k];
                probes[[2 * j + 1, k]] = x[k];
            }
            probes[[2 * j, j]] += h;
            probes[[2 * j + 1, j]] -= h;
        }
        let (z, _) = self.inverse_batch(probes.view())?;
        let jac = nalgebra::DMatrix::from_fn(d, d, |i, j| {
            (z[[2 * j, i]] - z[[2 * j + 1, i]]) / (2.0 * h)
        });
        let lu = jac.lu();
        let log_abs_det: f64 = lu.u().diagonal().iter().map(|u| u.abs().ln()).sum();
        if !log_abs_det.is_finite() {
            return Err(Error::SingularJacobian { log_abs_det });
        }
        Ok(log_abs_det)
    }

    /// Normalizing pass that records what [`backward`](Self::backward) needs.
    /// Batch-norm layers in training mode use batch statistics.
    pub fn tape(&self, x: ArrayView2<f64>) -> Result<Tape> {
        self.check_dim(x.ncols())?;
        self.check_stats()?;
        let mut z = x.to_owned();
        let mut log_det = Array1::zeros(z.nrows());
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::BatchNorm(bn) => {
                    let (y, ld, cache) = bn.normalize_batch(&self.params, z.view());
                    z = y;
                    log_det += ld;
                    caches.push(LayerCache::BatchNorm(cache));
                }
                Layer::Coupling(c) => {
                    let (y, ld, cache) = c.normalize_batch(&self.params, z.view());
                    z = y;
                    log_det += &ld;
                    caches.push(LayerCache::Coupling(cache));
                }
            }
            finite(&z, i, "inverse")?;
            if !log_det.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    layer: i,
                    stage: "log-determinant",
                });
            }
        }
        Ok(Tape { caches, z, log_det })
    }

    /// Reverse-mode pass over a tape. `g_z` is dL/dz per sample and `g_ld`
    /// dL/d(log_det) per sample. Returns the gradient over the flat parameter
    /// store and dL/dx.
    pub fn backward(
        &self,
        tape: &Tape,
        g_z: &Array2<f64>,
        g_ld: &Array1<f64>,
    ) -> Result<(Vec<f64>, Array2<f64>)> {
        let mut grad = vec![0.0; self.params.len()];
        let mut g = g_z.clone();
        for (i, (layer, cache)) in self.layers.iter().zip(&tape.caches).enumerate().rev() {
            g = match (layer, cache) {
                (Layer::BatchNorm(bn), LayerCache::BatchNorm(c)) => {
                    bn.backward(&self.params, c, &g, g_ld, &mut grad)
                }
                (Layer::Coupling(cl), LayerCache::Coupling(c)) => {
                    cl.backward(&self.params, c, &g, g_ld, &mut grad)
                }
                _ => unreachable!("tape recorded by a different model"),
            };
            finite(&g, i, "backward")?;
            let layer_grad = &grad[layer.offset()..layer.offset() + layer.num_params()];
            if !layer_grad.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    layer: i,
                    stage: "parameter gradient",
                });
            }
        }
        Ok((grad, g))
    }

    /// Folds the batch statistics recorded on `tape` into the running
    /// statistics (no-op for layers that ran in inference mode).
    pub fn update_running_stats(&mut self, tape: &Tape) {
        for (layer, cache) in self.layers.iter_mut().zip(&tape.caches) {
            if let (Layer::BatchNorm(bn), LayerCache::BatchNorm(c)) = (layer, cache) {
                bn.update_running(c);
            }
        }
    }
}

fn finite(a: &Array2<f64>, layer: usize, stage: &'static str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { layer, stage })
    }
}
