use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

/// Invertible batch normalisation acting in the normalizing (x -> z) direction:
/// `y = gamma * (x - mean) / sqrt(var + eps) + beta`.
///
/// `gamma` and `beta` live in the model's flat parameter store at `offset`
/// (`gamma` first, then `beta`). Running statistics are state, not parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormLayer {
    pub dim: usize,
    pub offset: usize,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
    pub mode: Mode,
}

#[derive(Clone, Debug)]
pub(crate) struct BatchNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    /// `Some((mean, var))` when batch statistics were used.
    batch_stats: Option<(Array1<f64>, Array1<f64>)>,
}

impl BatchNormLayer {
    pub fn new(dim: usize, offset: usize) -> Self {
        Self {
            dim,
            offset,
            running_mean: vec![0.0; dim],
            running_var: vec![1.0 - BN_EPSILON; dim],
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
            mode: Mode::Inference,
        }
    }

    pub fn num_params(&self) -> usize {
        2 * self.dim
    }

    pub fn gamma<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset..self.offset + self.dim]
    }

    pub fn beta<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset + self.dim..self.offset + 2 * self.dim]
    }

    pub(crate) fn check_stats(&self, layer: usize) -> Result<()> {
        let ok = self.epsilon > 0.0
            && self
                .running_mean
                .iter()
                .zip(&self.running_var)
                .all(|(m, v)| m.is_finite() && v.is_finite() && v + self.epsilon > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::UninitializedStatistics { layer })
        }
    }

    fn frozen_inv_std(&self) -> Array1<f64> {
        self.running_var
            .iter()
            .map(|v| 1.0 / (v + self.epsilon).sqrt())
            .collect()
    }

    /// log|det| of the normalizing map given the per-dimension inverse std.
    fn log_det(&self, params: &[f64], inv_std: &Array1<f64>) -> f64 {
        self.gamma(params)
            .iter()
            .zip(inv_std)
            .map(|(g, s)| g.abs().ln() + s.ln())
            .sum()
    }

    /// Normalizing map with frozen running statistics. Returns the (per-sample
    /// constant) log-determinant.
    pub(crate) fn normalize_frozen(&self, params: &[f64], x: &mut Array2<f64>) -> f64 {
        let inv_std = self.frozen_inv_std();
        let gamma = self.gamma(params);
        let beta = self.beta(params);
        for mut row in x.rows_mut() {
            for d in 0..self.dim {
                row[d] = gamma[d] * (row[d] - self.running_mean[d]) * inv_std[d] + beta[d];
            }
        }
        self.log_det(params, &inv_std)
    }

    /// Generative map (inverse of [`normalize_frozen`]).
    pub(crate) fn generate_frozen(&self, params: &[f64], y: &mut Array2<f64>) {
        let gamma = self.gamma(params);
        let beta = self.beta(params);
        let std: Vec<f64> = self
            .running_var
            .iter()
            .map(|v| (v + self.epsilon).sqrt())
            .collect();
        for mut row in y.rows_mut() {
            for d in 0..self.dim {
                row[d] = (row[d] - beta[d]) / gamma[d] * std[d] + self.running_mean[d];
            }
        }
    }

    /// Normalizing map over a batch honouring `mode`; keeps what backward needs.
    pub(crate) fn normalize_batch(
        &self,
        params: &[f64],
        x: ArrayView2<f64>,
    ) -> (Array2<f64>, f64, BatchNormCache) {
        let n = x.nrows() as f64;
        let (centre, inv_std, batch_stats) = match self.mode {
            Mode::Training => {
                let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
                let var = (&x - &mean).mapv(|v| v * v).sum_axis(Axis(0)) / n;
                let inv_std = var.mapv(|v| 1.0 / (v + self.epsilon).sqrt());
                (mean.clone(), inv_std, Some((mean, var)))
            }
            Mode::Inference => (
                Array1::from(self.running_mean.clone()),
                self.frozen_inv_std(),
                None,
            ),
        };
        let xhat = (&x - &centre) * &inv_std;
        let gamma = ndarray::ArrayView1::from(self.gamma(params));
        let beta = ndarray::ArrayView1::from(self.beta(params));
        let y = &xhat * &gamma + beta;
        let ld = self.log_det(params, &inv_std);
        (
            y,
            ld,
            BatchNormCache {
                xhat,
                inv_std,
                batch_stats,
            },
        )
    }

    /// Backward pass. `g_y` is dL/dy, `g_ld` is dL/d(log_det_i) per sample.
    /// Accumulates parameter gradients into `grad` (full flat store) and
    /// returns dL/dx.
    pub(crate) fn backward(
        &self,
        params: &[f64],
        cache: &BatchNormCache,
        g_y: &Array2<f64>,
        g_ld: &Array1<f64>,
        grad: &mut [f64],
    ) -> Array2<f64> {
        let gamma = ndarray::ArrayView1::from(self.gamma(params));
        let g_ld_sum = g_ld.sum();
        let n = g_y.nrows() as f64;

        let g_gamma = (g_y * &cache.xhat).sum_axis(Axis(0));
        let g_beta = g_y.sum_axis(Axis(0));
        for d in 0..self.dim {
            grad[self.offset + d] += g_gamma[d] + g_ld_sum / gamma[d];
            grad[self.offset + self.dim + d] += g_beta[d];
        }

        let g_xhat = g_y * &gamma;
        match cache.batch_stats {
            None => g_xhat * &cache.inv_std,
            Some(_) => {
                // Differentiate through the batch mean and variance, including
                // the -1/2 log(var + eps) log-determinant term.
                let mean_g = g_xhat.mean_axis(Axis(0)).expect("non-empty batch");
                let mean_gx = (&g_xhat * &cache.xhat)
                    .mean_axis(Axis(0))
                    .expect("non-empty batch");
                let mut g_x = &g_xhat - &mean_g - &(&cache.xhat * &mean_gx);
                g_x *= &cache.inv_std;
                g_x - &(&cache.xhat * &(&cache.inv_std * (g_ld_sum / n)))
            }
        }
    }

    pub(crate) fn update_running(&mut self, cache: &BatchNormCache) {
        if let Some((mean, var)) = &cache.batch_stats {
            for d in 0..self.dim {
                self.running_mean[d] =
                    (1.0 - self.momentum) * self.running_mean[d] + self.momentum * mean[d];
                self.running_var[d] =
                    (1.0 - self.momentum) * self.running_var[d] + self.momentum * var[d];
            }
        }
    }
}
