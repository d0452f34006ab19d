use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Top-two principal-component projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `N x 2`.
    pub coords: Array2<f64>,
    /// `2 x D`, unit rows; the largest-magnitude loading of each is positive.
    pub components: Array2<f64>,
    pub mean: Array1<f64>,
    pub explained_variance_ratio: [f64; 2],
}

impl Projection {
    /// Coordinates of new points in the same basis.
    pub fn apply(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                got: x.ncols(),
            });
        }
        Ok((&x - &self.mean).dot(&self.components.t()))
    }
}

pub fn project_2d(codes: ArrayView2<f64>) -> Result<Projection> {
    let (n, d) = codes.dim();
    if n < 2 {
        return Err(Error::InvalidConfig("projection needs at least 2 points".into()));
    }
    if d < 2 {
        return Err(Error::InvalidConfig("projection needs at least 2 dimensions".into()));
    }
    let mean = codes.mean_axis(Axis(0)).expect("n >= 2");
    let centred = &codes - &mean;
    let cov = centred.t().dot(&centred) / (n as f64 - 1.0);
    let total: f64 = cov.diag().sum();
    if !(total > 0.0) {
        return Err(Error::ZeroVariance);
    }
    let eig = nalgebra::SymmetricEigen::new(nalgebra::DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut components = Array2::zeros((2, d));
    let mut ratio = [0.0; 2];
    for (k, &idx) in order.iter().take(2).enumerate() {
        let v = eig.eigenvectors.column(idx);
        let pivot = (0..d).fold(0, |best, j| if v[j].abs() > v[best].abs() { j } else { best });
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components[[k, j]] = sign * v[j];
        }
        ratio[k] = eig.eigenvalues[idx].max(0.0) / total;
    }
    Ok(Projection {
        coords: centred.dot(&components.t()),
        components,
        mean,
        explained_variance_ratio: ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
        (&a - &b).mapv(|v| v * v).sum().sqrt()
    }

    #[test]
    fn planar_points_keep_pairwise_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // orthonormal pair in R^5
        let u = Array1::from(vec![1.0, 1.0, 0.0, 1.0, 0.0]) / 3f64.sqrt();
        let v = Array1::from(vec![1.0, -1.0, 1.0, 0.0, 2.0]) / 7f64.sqrt();
        assert!(u.dot(&v).abs() < 1e-15);
        let offset = Array1::from(vec![0.5, -2.0, 3.0, 0.0, 1.0]);
        let pts = Array2::from_shape_fn((30, 5), |_| 0.0);
        let mut pts = pts;
        for mut row in pts.rows_mut() {
            let a: f64 = 3.0 * rng.sample::<f64, _>(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            row.assign(&(&offset + &(&u * a) + &(&v * b)));
        }
        let p = project_2d(pts.view()).unwrap();
        for i in 0..30 {
            for j in 0..30 {
                let orig = dist(pts.row(i), pts.row(j));
                let proj = dist(p.coords.row(i), p.coords.row(j));
                assert!((orig - proj).abs() < 1e-8);
            }
        }
        assert!((p.explained_variance_ratio.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn apply_reproduces_fitted_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Array2::from_shape_simple_fn((30, 4), || rng.sample::<f64, _>(StandardNormal));
        let p = project_2d(x.view()).unwrap();
        let again = p.apply(x.view()).unwrap();
        assert!((&again - &p.coords).iter().all(|v| v.abs() < 1e-12));
        assert!(p.apply(Array2::zeros((1, 3)).view()).is_err());
    }

    #[test]
    fn isotropic_ratio_near_two_over_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = 10;
        let pts = Array2::from_shape_fn((20_000, d), |_| rng.sample::<f64, _>(StandardNormal));
        let p = project_2d(pts.view()).unwrap();
        let r = p.explained_variance_ratio[0] + p.explained_variance_ratio[1];
        // top eigenvalues of a sample covariance sit a few % above 1
        assert!((r - 2.0 / d as f64).abs() < 0.02, "{r}");
    }

    #[test]
    fn duplicates_and_sign_convention() {
        let pts = ndarray::array![[1.0, 2.0, 0.0], [1.0, 2.0, 0.0], [-1.0, 0.5, 2.0], [0.0, -3.0, 1.0]];
        let p = project_2d(pts.view()).unwrap();
        assert_eq!(p.coords.row(0), p.coords.row(1));
        for row in p.components.rows() {
            let pivot = row.iter().cloned().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(pivot > 0.0);
        }
    }

    #[test]
    fn degenerate_inputs_rejected() {
        assert!(matches!(project_2d(Array2::ones((5, 3)).view()), Err(Error::ZeroVariance)));
        assert!(project_2d(Array2::zeros((1, 3)).view()).is_err());
    }
}
