//! PCA whitening followed by min-max scaling into `[0, 1]`, applied to every
//! network input so that sigmoid units see unit-interval data.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::matrixio::{Envelope, FeatureMatrix, Persist};

/// Relative eigenvalue floor below which a direction is treated as degenerate.
const DEGENERATE_EIGEN: f64 = 1e-12;
/// Absolute output range below which a whitened row is treated as constant.
const DEGENERATE_RANGE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Whitener {
    /// Training mean, length d.
    pub mean: DVector<f64>,
    /// k×d, rows are principal directions scaled by `1/sqrt(eigenvalue + ridge)`.
    pub projection: DMatrix<f64>,
    /// Eigenvalues of the retained directions, descending.
    pub eigenvalues: Vec<f64>,
    /// Per-output minimum over the whitened training data.
    pub min: Vec<f64>,
    /// Per-output maximum over the whitened training data.
    pub max: Vec<f64>,
    pub ridge: f64,
}

/// Default ridge: `1e-8` times the mean eigenvalue of the covariance.
pub fn default_ridge(x: &FeatureMatrix) -> f64 {
    let c = linalg::covariance(&linalg::center(x, &linalg::row_means(x)));
    1e-8 * c.trace() / c.nrows().max(1) as f64
}

pub fn fit_whitener(x: &FeatureMatrix, target_dim: usize, ridge: Option<f64>) -> Result<Whitener> {
    let (d, n) = x.shape();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("whitening needs at least 2 samples, got {n}")));
    }
    if target_dim == 0 || target_dim > d.min(n) {
        return Err(Error::InvalidArgument(format!(
            "target_dim {target_dim} must be in 1..={} (min of {d} features and {n} samples)",
            d.min(n)
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("whitener input contains non-finite values".into()));
    }
    let mean = linalg::row_means(x);
    let centered = linalg::center(x, &mean);
    let cov = linalg::covariance(&centered);
    let total = cov.trace();
    if !(total > 0.0) {
        return Err(Error::Data("whitener input has zero total variance".into()));
    }
    let ridge = ridge.unwrap_or(1e-8 * total / d as f64);
    if !(ridge >= 0.0) {
        return Err(Error::InvalidArgument(format!("ridge must be non-negative, got {ridge}")));
    }
    let (vals, vecs) = linalg::sorted_symmetric_eigen(&cov);
    let top = vals[0].max(0.0);
    let mut projection = DMatrix::zeros(target_dim, d);
    let mut eigenvalues = Vec::with_capacity(target_dim);
    for k in 0..target_dim {
        let lam = vals[k].max(0.0);
        eigenvalues.push(lam);
        let denom = lam + ridge;
        if denom > DEGENERATE_EIGEN * top {
            let s = 1.0 / denom.sqrt();
            for j in 0..d {
                projection[(k, j)] = vecs[(j, k)] * s;
            }
        }
    }
    let raw = &projection * &centered;
    let mut min = Vec::with_capacity(target_dim);
    let mut max = Vec::with_capacity(target_dim);
    for row in raw.row_iter() {
        min.push(row.iter().copied().fold(f64::INFINITY, f64::min));
        max.push(row.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
    Ok(Whitener { mean, projection, eigenvalues, min, max, ridge })
}

impl Whitener {
    pub fn input_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.projection.nrows()
    }

    /// Whitened values before min-max scaling.
    pub fn whiten(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        if x.nrows() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "whitener expects {} rows, input has {}",
                self.input_dim(),
                x.nrows()
            )));
        }
        Ok(&self.projection * linalg::center(x, &self.mean))
    }

    /// Whitens and scales into `[0, 1]` with the training range; values outside
    /// the training range are clamped and constant outputs map to 0.5.
    pub fn apply(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        let mut w = self.whiten(x)?;
        for (i, mut row) in w.row_iter_mut().enumerate() {
            let range = self.max[i] - self.min[i];
            if !(range > DEGENERATE_RANGE) {
                row.fill(0.5);
            } else {
                for v in row.iter_mut() {
                    *v = ((*v - self.min[i]) / range).clamp(0.0, 1.0);
                }
            }
        }
        Ok(w)
    }
}

pub fn apply_whitener(w: &Whitener, x: &FeatureMatrix) -> Result<FeatureMatrix> {
    w.apply(x)
}

impl Persist for Whitener {
    const KIND: &'static str = "whitener";

    fn to_envelope(&self) -> Envelope {
        let mut env = Envelope::new(Self::KIND);
        env.real("ridge", self.ridge)
            .reals("eigenvalues", &self.eigenvalues)
            .reals("min", &self.min)
            .reals("max", &self.max)
            .matrix("mean", &DMatrix::from_column_slice(self.mean.len(), 1, self.mean.as_slice()))
            .matrix("projection", &self.projection);
        env
    }

    fn from_envelope(env: &Envelope) -> Result<Self> {
        let mean_m = env.get_matrix("mean")?;
        let projection = env.get_matrix("projection")?.clone();
        let w = Whitener {
            mean: DVector::from_column_slice(mean_m.as_slice()),
            eigenvalues: env.get_reals("eigenvalues")?,
            min: env.get_reals("min")?,
            max: env.get_reals("max")?,
            ridge: env.get_parsed("ridge")?,
            projection,
        };
        let k = w.output_dim();
        if w.mean.len() != w.input_dim() || w.min.len() != k || w.max.len() != k || w.eigenvalues.len() != k {
            return Err(Error::Data("whitener sections have inconsistent dimensions".into()));
        }
        Ok(w)
    }
}

/// One whitener per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct WhitenerPair {
    pub r: Whitener,
    pub d: Whitener,
}

impl WhitenerPair {
    pub fn fit(xr: &FeatureMatrix, xd: &FeatureMatrix, dim_r: usize, dim_d: usize) -> Result<Self> {
        Ok(WhitenerPair { r: fit_whitener(xr, dim_r, None)?, d: fit_whitener(xd, dim_d, None)? })
    }

    pub fn apply(&self, xr: &FeatureMatrix, xd: &FeatureMatrix) -> Result<(FeatureMatrix, FeatureMatrix)> {
        Ok((self.r.apply(xr)?, self.d.apply(xd)?))
    }

    pub(crate) fn to_envelope(&self) -> Envelope {
        let mut env = Envelope::new("whitener-pair");
        env.nest("r", &self.r.to_envelope()).nest("d", &self.d.to_envelope());
        env
    }

    pub(crate) fn from_envelope(env: &Envelope) -> Result<Self> {
        Ok(WhitenerPair {
            r: Whitener::from_envelope(&env.sub("r")?)?,
            d: Whitener::from_envelope(&env.sub("d")?)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(d: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(d, n, |_, _| rng.sample(StandardNormal))
    }

    fn cov_of(m: &DMatrix<f64>) -> DMatrix<f64> {
        linalg::covariance(&linalg::center(m, &linalg::row_means(m)))
    }

    #[test]
    fn whitened_covariance_is_identity() {
        let mix = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.0, 0.1, 1.0, 0.5, 0.0, -0.7, 0.4]);
        let x = mix * gaussian(3, 50, 1);
        let w = fit_whitener(&x, 3, Some(0.0)).unwrap();
        let c = cov_of(&w.whiten(&x).unwrap());
        assert!((c - DMatrix::identity(3, 3)).abs().max() < 1e-8);
    }

    #[test]
    fn axis_aligned_scaling() {
        // exact covariance diag(4, 1): columns ±(2,0), ±(0,1) scaled so (n-1) normalization matches
        let n = 4.0_f64;
        let a = ((n - 1.0) / 2.0).sqrt();
        let x = DMatrix::from_row_slice(2, 4, &[2.0 * a, -2.0 * a, 0.0, 0.0, 0.0, 0.0, a, -a]);
        let w = fit_whitener(&x, 2, Some(0.0)).unwrap();
        assert!((w.eigenvalues[0] - 4.0).abs() < 1e-12 && (w.eigenvalues[1] - 1.0).abs() < 1e-12);
        let expected = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 1.0]);
        assert!((&w.projection - expected).abs().max() < 1e-12);
    }

    #[test]
    fn constant_row_is_dropped_when_k_below_d() {
        let mut x = gaussian(3, 20, 2);
        x.row_mut(1).fill(7.0);
        let w = fit_whitener(&x, 2, None).unwrap();
        assert!(w.projection.column(1).abs().max() < 1e-12);
        let full = fit_whitener(&x, 3, Some(0.0)).unwrap();
        assert_eq!(full.eigenvalues[2], 0.0);
        assert!(full.apply(&x).unwrap().row(2).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn scaled_training_data_spans_unit_interval() {
        let x = gaussian(4, 30, 3);
        let w = fit_whitener(&x, 3, None).unwrap();
        let s = w.apply(&x).unwrap();
        for row in s.row_iter() {
            assert_eq!(row.min(), 0.0);
            assert_eq!(row.max(), 1.0);
        }
    }

    #[test]
    fn out_of_range_test_points_clamp() {
        let x = gaussian(2, 30, 4);
        let w = fit_whitener(&x, 2, None).unwrap();
        let far = DMatrix::from_column_slice(2, 2, &[1e3, 1e3, -1e3, -1e3]);
        let s = w.apply(&far).unwrap();
        assert!(s.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn errors() {
        let x = gaussian(3, 5, 5);
        assert!(fit_whitener(&x, 4, None).is_err());
        assert!(fit_whitener(&x, 0, None).is_err());
        assert!(fit_whitener(&DMatrix::from_element(3, 5, 1.0), 2, None).is_err());
        let w = fit_whitener(&x, 2, None).unwrap();
        assert!(w.apply(&gaussian(2, 3, 0)).is_err());
    }

    #[test]
    fn deterministic_and_persistable() {
        let x = gaussian(5, 40, 6);
        let a = fit_whitener(&x, 4, None).unwrap();
        let b = fit_whitener(&x, 4, None).unwrap();
        assert_eq!(a, b);
        let env = Envelope::parse(&a.to_envelope().render(&[]), std::path::Path::new("w")).unwrap();
        assert_eq!(Whitener::from_envelope(&env).unwrap(), a);
    }
}
