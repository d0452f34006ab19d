//! Latent priors: standard normal (NF), class-conditional (DNF) and
//! factorial class-conditional (factorial DNF). Covariance is always `I`.

use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Regime {
    Standard,
    Discriminative,
    Factorial,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Standard => "standard",
            Regime::Discriminative => "discriminative",
            Regime::Factorial => "factorial",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "standard" | "nf" => Some(Regime::Standard),
            "discriminative" | "dnf" => Some(Regime::Discriminative),
            "factorial" | "f-dnf" | "fdnf" => Some(Regime::Factorial),
            _ => None,
        }
    }
}

/// Named, contiguous, disjoint slices of the latent code.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentPartition {
    names: Vec<String>,
    dims: Vec<usize>,
}

impl LatentPartition {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>, dims: &[usize]) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() || names.len() != dims.len() {
            return Err(Error::InvalidPartition(format!(
                "{} factor names for {} widths",
                names.len(),
                dims.len()
            )));
        }
        if let Some(i) = dims.iter().position(|&w| w == 0) {
            return Err(Error::InvalidPartition(format!(
                "factor `{}` has zero width",
                names[i]
            )));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::InvalidPartition(format!("duplicate factor `{n}`")));
            }
        }
        Ok(Self {
            names,
            dims: dims.to_vec(),
        })
    }

    /// `n` factors of (near) equal width covering `dim`; earlier factors
    /// take the remainder.
    pub fn equal<S: Into<String>>(names: impl IntoIterator<Item = S>, dim: usize) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let n = names.len().max(1);
        let dims: Vec<usize> = (0..names.len())
            .map(|i| dim / n + usize::from(i < dim % n))
            .collect();
        Self::new(names, &dims)
    }

    pub fn dim(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn range(&self, factor: usize) -> Range<usize> {
        let start: usize = self.dims[..factor].iter().sum();
        start..start + self.dims[factor]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Class-mean vectors for one factor, row-major `classes x width`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMeans {
    pub classes: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ClassMeans {
    pub fn zeros(classes: usize, width: usize) -> Self {
        Self {
            classes,
            width,
            values: vec![0.0; classes * width],
        }
    }

    pub fn mean(&self, class: usize) -> &[f64] {
        &self.values[class * self.width..(class + 1) * self.width]
    }

    pub fn mean_mut(&mut self, class: usize) -> &mut [f64] {
        &mut self.values[class * self.width..(class + 1) * self.width]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorSpec {
    regime: Regime,
    partition: LatentPartition,
    means: Vec<ClassMeans>,
}

impl PriorSpec {
    pub fn standard(dim: usize) -> Self {
        Self {
            regime: Regime::Standard,
            partition: LatentPartition::new(["latent"], &[dim]).expect("dim >= 1"),
            means: vec![ClassMeans::zeros(1, dim)],
        }
    }

    /// Class-conditional prior tied to one labelled factor; means drawn
    /// i.i.d. from `N(0, 1)`.
    pub fn discriminative<R: Rng + ?Sized>(
        dim: usize,
        factor: &str,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let partition = LatentPartition::new([factor], &[dim])?;
        Self::random(Regime::Discriminative, partition, &[classes], rng)
    }

    pub fn factorial<R: Rng + ?Sized>(
        partition: LatentPartition,
        class_counts: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        Self::random(Regime::Factorial, partition, class_counts, rng)
    }

    fn random<R: Rng + ?Sized>(
        regime: Regime,
        partition: LatentPartition,
        class_counts: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let means = partition
            .dims()
            .iter()
            .zip(class_counts)
            .map(|(&w, &k)| ClassMeans {
                classes: k,
                width: w,
                values: (0..k * w).map(|_| StandardNormal.sample(rng)).collect(),
            })
            .collect();
        Self::from_parts(regime, partition, means)
    }

    pub fn from_parts(regime: Regime, partition: LatentPartition, means: Vec<ClassMeans>) -> Result<Self> {
        if means.len() != partition.len() {
            return Err(Error::InvalidPartition(format!(
                "{} mean tables for {} factors",
                means.len(),
                partition.len()
            )));
        }
        match regime {
            Regime::Standard | Regime::Discriminative if partition.len() != 1 => {
                return Err(Error::InvalidPartition(format!(
                    "{} prior takes a single factor",
                    regime.name()
                )))
            }
            _ => {}
        }
        for (i, m) in means.iter().enumerate() {
            if m.width != partition.dims()[i] || m.values.len() != m.classes * m.width {
                return Err(Error::InvalidPartition(format!(
                    "mean table for `{}` does not match its width",
                    partition.names()[i]
                )));
            }
            if m.classes == 0 {
                return Err(Error::InvalidPartition(format!(
                    "factor `{}` has no classes",
                    partition.names()[i]
                )));
            }
        }
        let mut spec = Self {
            regime,
            partition,
            means,
        };
        if regime == Regime::Standard {
            spec.means = vec![ClassMeans::zeros(1, spec.partition.dim())];
        }
        Ok(spec)
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn partition(&self) -> &LatentPartition {
        &self.partition
    }

    pub fn dim(&self) -> usize {
        self.partition.dim()
    }

    pub fn means(&self) -> &[ClassMeans] {
        &self.means
    }

    pub fn means_mut(&mut self) -> &mut [ClassMeans] {
        &mut self.means
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.means.iter().map(|m| m.classes).collect()
    }

    /// Whether the class means are free parameters.
    pub fn trainable(&self) -> bool {
        self.regime != Regime::Standard
    }

    /// Number of labels `log_prior` expects per sample.
    pub fn num_label_factors(&self) -> usize {
        match self.regime {
            Regime::Standard => 0,
            _ => self.partition.len(),
        }
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        if self.regime == Regime::Standard {
            return Ok(());
        }
        if labels.len() != self.partition.len() {
            return Err(Error::InvalidPartition(format!(
                "expected {} labels, got {}",
                self.partition.len(),
                labels.len()
            )));
        }
        for (f, (&label, m)) in labels.iter().zip(&self.means).enumerate() {
            if label >= m.classes {
                return Err(Error::LabelOutOfRange {
                    factor: self.partition.names()[f].clone(),
                    label,
                    classes: m.classes,
                });
            }
        }
        Ok(())
    }

    fn class_of(&self, labels: &[usize], factor: usize) -> usize {
        match self.regime {
            Regime::Standard => 0,
            _ => labels[factor],
        }
    }

    /// Full-length prior mean for the given labels (the concatenation of the
    /// per-factor class means).
    pub fn mean_for(&self, labels: &[usize]) -> Result<Vec<f64>> {
        self.check_labels(labels)?;
        let mut out = Vec::with_capacity(self.dim());
        for (f, m) in self.means.iter().enumerate() {
            out.extend_from_slice(m.mean(self.class_of(labels, f)));
        }
        Ok(out)
    }

    /// Per-factor terms `log N(z^f; mu_{label_f}, I)`.
    pub fn log_prior_terms(&self, z: &[f64], labels: &[usize]) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: z.len(),
            });
        }
        self.check_labels(labels)?;
        Ok((0..self.partition.len())
            .map(|f| {
                let mu = self.means[f].mean(self.class_of(labels, f));
                let zf = &z[self.partition.range(f)];
                gaussian_log_density(zf, mu)
            })
            .collect())
    }

    pub fn log_prior(&self, z: &[f64], labels: &[usize]) -> Result<f64> {
        Ok(self.log_prior_terms(z, labels)?.iter().sum())
    }

    /// Prior means for a batch, one row per sample. `labels[f][i]` is the
    /// class of sample `i` on prior factor `f`.
    pub fn mean_rows(&self, n: usize, labels: &[&[usize]]) -> Result<Array2<f64>> {
        let mut mu = Array2::zeros((n, self.dim()));
        let mut sample = vec![0; self.num_label_factors()];
        for i in 0..n {
            for (f, l) in sample.iter_mut().enumerate() {
                *l = labels.get(f).and_then(|ls| ls.get(i)).copied().ok_or_else(|| {
                    Error::InvalidPartition(format!("missing label for sample {i}"))
                })?;
            }
            let row = self.mean_for(&sample)?;
            mu.row_mut(i).assign(&Array1::from(row));
        }
        Ok(mu)
    }

    /// `log_prior` over a batch.
    pub fn log_prior_batch(&self, z: ArrayView2<f64>, labels: &[&[usize]]) -> Result<Array1<f64>> {
        if z.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: z.ncols(),
            });
        }
        let mu = self.mean_rows(z.nrows(), labels)?;
        let d = self.dim() as f64;
        Ok((&z - &mu)
            .rows()
            .into_iter()
            .map(|r| -0.5 * r.dot(&r) - d * HALF_LN_2PI)
            .collect())
    }

    /// Gradient of `sum_i log_prior(z_i)` w.r.t. every class mean:
    /// `sum_{i: label = y} (z_i^f - mu_y)`, laid out like [`ClassMeans`].
    pub fn prior_grad_means(&self, z: ArrayView2<f64>, labels: &[&[usize]]) -> Result<Vec<ClassMeans>> {
        if z.nrows() == 0 {
            return Err(Error::InvalidConfig("empty batch".into()));
        }
        if z.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: z.ncols(),
            });
        }
        let mut grads: Vec<ClassMeans> = self
            .means
            .iter()
            .map(|m| ClassMeans::zeros(m.classes, m.width))
            .collect();
        if !self.trainable() {
            return Ok(grads);
        }
        for i in 0..z.nrows() {
            let sample: Vec<usize> = labels.iter().map(|l| l[i]).collect();
            self.check_labels(&sample)?;
            for (f, g) in grads.iter_mut().enumerate() {
                let class = sample[f];
                let mu = self.means[f].mean(class);
                let range = self.partition.range(f);
                for (k, gk) in g.mean_mut(class).iter_mut().enumerate() {
                    *gk += z[[i, range.start + k]] - mu[k];
                }
            }
        }
        Ok(grads)
    }

    pub fn num_mean_params(&self) -> usize {
        if self.trainable() {
            self.means.iter().map(|m| m.values.len()).sum()
        } else {
            0
        }
    }

    pub fn flat_means(&self) -> Vec<f64> {
        if !self.trainable() {
            return Vec::new();
        }
        self.means.iter().flat_map(|m| m.values.iter().copied()).collect()
    }

    pub fn set_flat_means(&mut self, flat: &[f64]) {
        if !self.trainable() {
            return;
        }
        let mut offset = 0;
        for m in &mut self.means {
            let n = m.values.len();
            m.values.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }
}

/// `log N(z; mu, I)`.
pub fn gaussian_log_density(z: &[f64], mu: &[f64]) -> f64 {
    let sq: f64 = z.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * sq - z.len() as f64 * HALF_LN_2PI
}
