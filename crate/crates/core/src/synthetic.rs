//! Linear multi-factor generator: `x = sum_f M_f v_f + diag(noise) eps`, with
//! `v_f ~ N(mu_{f, class}, I)` and `eps ~ N(0, I)`.
//!
//! This is the shallow factor-analysis model the flow generalises; its output
//! has known per-cell covariance `sum_f M_f M_f^T + diag(noise)^2`.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};

use crate::data::{FactorInfo, LabeledDataset};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticFactor {
    pub name: String,
    pub classes: usize,
    /// `obs_dim x latent_width`.
    pub loading: Array2<f64>,
    /// `classes x latent_width`.
    pub class_means: Array2<f64>,
}

impl SyntheticFactor {
    pub fn latent_width(&self) -> usize {
        self.loading.ncols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub obs_dim: usize,
    pub factors: Vec<SyntheticFactor>,
    /// Diagonal of the noise scale matrix.
    pub noise: Vec<f64>,
    pub seed: u64,
}

/// Shape of one factor for [`SyntheticSpec::random`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FactorShape {
    pub name: String,
    pub classes: usize,
    pub latent_width: usize,
}

impl FactorShape {
    pub fn new(name: impl Into<String>, classes: usize, latent_width: usize) -> Self {
        Self {
            name: name.into(),
            classes,
            latent_width,
        }
    }
}

pub const DEFAULT_CLASS_MEAN_STD: f64 = 2.0;
pub const DEFAULT_NOISE_RANGE: (f64, f64) = (0.1, 0.5);

impl SyntheticSpec {
    /// Loadings `~ N(0, 1)`, class means `~ N(0, class_mean_std^2 I)`,
    /// noise scales uniform in `noise_range`; all drawn from `seed`.
    pub fn random(
        obs_dim: usize,
        shapes: &[FactorShape],
        class_mean_std: f64,
        noise_range: (f64, f64),
        seed: u64,
    ) -> Result<Self> {
        if obs_dim == 0 || shapes.is_empty() {
            return Err(Error::InvalidConfig("need obs_dim >= 1 and at least one factor".into()));
        }
        for s in shapes {
            if s.classes == 0 || s.latent_width == 0 {
                return Err(Error::InvalidConfig(format!(
                    "factor `{}` needs at least one class and one latent dimension",
                    s.name
                )));
            }
        }
        if !(class_mean_std > 0.0) || !(noise_range.0 > 0.0) || noise_range.1 < noise_range.0 {
            return Err(Error::InvalidConfig("invalid class-mean or noise scale".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mean_dist = Normal::new(0.0, class_mean_std).expect("std > 0");
        let factors = shapes
            .iter()
            .map(|s| SyntheticFactor {
                name: s.name.clone(),
                classes: s.classes,
                loading: Array2::from_shape_simple_fn((obs_dim, s.latent_width), || {
                    rng.sample(StandardNormal)
                }),
                class_means: Array2::from_shape_simple_fn((s.classes, s.latent_width), || {
                    mean_dist.sample(&mut rng)
                }),
            })
            .collect();
        let noise = if noise_range.1 > noise_range.0 {
            let u = Uniform::new(noise_range.0, noise_range.1).expect("range");
            (0..obs_dim).map(|_| u.sample(&mut rng)).collect()
        } else {
            vec![noise_range.0; obs_dim]
        };
        let spec = Self {
            obs_dim,
            factors,
            noise,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// 16-dimensional observations, two factors (`phone`, `speaker`) with 5
    /// classes and 4 latent dimensions each.
    pub fn desk_scale(seed: u64) -> Result<Self> {
        Self::random(
            16,
            &[FactorShape::new("phone", 5, 4), FactorShape::new("speaker", 5, 4)],
            DEFAULT_CLASS_MEAN_STD,
            DEFAULT_NOISE_RANGE,
            seed,
        )
    }

    /// Checks shapes, positive noise and full column rank of the loadings.
    /// An all-zero loading is accepted as a factor that does not reach the
    /// observations.
    pub fn validate(&self) -> Result<()> {
        if self.noise.len() != self.obs_dim || !self.noise.iter().all(|&d| d > 0.0 && d.is_finite()) {
            return Err(Error::InvalidConfig("noise scales must be positive and finite, one per dimension".into()));
        }
        let mut active = Vec::new();
        for f in &self.factors {
            if f.loading.nrows() != self.obs_dim || f.class_means.ncols() != f.latent_width() {
                return Err(Error::InvalidConfig(format!("factor `{}` has inconsistent shapes", f.name)));
            }
            if f.class_means.nrows() != f.classes || f.classes == 0 {
                return Err(Error::InvalidConfig(format!("factor `{}` has no class means", f.name)));
            }
            if f.loading.iter().all(|&v| v == 0.0) {
                continue;
            }
            if rank(&f.loading) < f.latent_width() {
                return Err(Error::RankDeficient(f.name.clone()));
            }
            active.push(f);
        }
        if active.len() > 1 {
            let width: usize = active.iter().map(|f| f.latent_width()).sum();
            let stacked = Array2::from_shape_fn((self.obs_dim, width), |(r, c)| {
                let mut c = c;
                for f in &active {
                    if c < f.latent_width() {
                        return f.loading[[r, c]];
                    }
                    c -= f.latent_width();
                }
                unreachable!()
            });
            if rank(&stacked) < width {
                let names: Vec<&str> = active.iter().map(|f| f.name.as_str()).collect();
                return Err(Error::RankDeficient(names.join("+")));
            }
        }
        Ok(())
    }

    /// Covariance of one `(class, class, ...)` cell:
    /// `sum_f M_f M_f^T + diag(noise)^2`.
    pub fn cell_covariance(&self) -> Array2<f64> {
        let mut cov = Array2::from_diag(&Array1::from_iter(self.noise.iter().map(|d| d * d)));
        for f in &self.factors {
            cov += &f.loading.dot(&f.loading.t());
        }
        cov
    }

    /// Draws `n_per_cell` samples for every combination of class labels.
    /// `stream` separates independent draws (e.g. train and test) from the
    /// same specification.
    pub fn generate(&self, n_per_cell: usize, stream: u64) -> Result<LabeledDataset> {
        if n_per_cell == 0 {
            return Err(Error::InvalidConfig("n_per_cell must be at least 1".into()));
        }
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream + 1);
        let cells: usize = self.factors.iter().map(|f| f.classes).product();
        let n = cells * n_per_cell;
        let mut features = Array2::zeros((n, self.obs_dim));
        let mut labels = vec![Vec::with_capacity(n); self.factors.len()];
        let mut cell = vec![0usize; self.factors.len()];
        let mut row = 0;
        for _ in 0..cells {
            for _ in 0..n_per_cell {
                let mut x = Array1::from_iter(
                    self.noise.iter().map(|d| d * rng.sample::<f64, _>(StandardNormal)),
                );
                for (f, factor) in self.factors.iter().enumerate() {
                    let mu = factor.class_means.row(cell[f]);
                    let v = Array1::from_iter(mu.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)));
                    x += &factor.loading.dot(&v);
                    labels[f].push(cell[f]);
                }
                features.row_mut(row).assign(&x);
                row += 1;
            }
            // odometer over the class grid, last factor fastest
            for f in (0..cell.len()).rev() {
                cell[f] += 1;
                if cell[f] < self.factors[f].classes {
                    break;
                }
                cell[f] = 0;
            }
        }
        let factors = self
            .factors
            .iter()
            .map(|f| FactorInfo::new(f.name.clone(), f.classes))
            .collect();
        LabeledDataset::new((0..n as u64).collect(), features, factors, labels)
    }
}

fn rank(m: &Array2<f64>) -> usize {
    let dm = nalgebra::DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| m[[r, c]]);
    let sv = dm.singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let tol = max * (m.nrows().max(m.ncols()) as f64) * f64::EPSILON * 1e3;
    sv.iter().filter(|&&s| s > tol).count()
}
