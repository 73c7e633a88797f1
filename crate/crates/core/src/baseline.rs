//! Linear baseline: canonical correlation projections for the shared part
//! and reconstruction ICA projections, trained with the correlation
//! projections held fixed, for the modality-specific part.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;
use crate::matrixio::{Envelope, FeatureMatrix, Persist};
use crate::optim::{self, MinimizeOptions, Objective, Status};
use crate::stack::{ComponentBlock, ComponentStack, ComponentTag};

#[derive(Debug, Clone, PartialEq)]
pub struct Cca {
    pub mean_r: DVector<f64>,
    pub mean_d: DVector<f64>,
    /// `k × d_r`
    pub w_r: DMatrix<f64>,
    /// `k × d_d`
    pub w_d: DMatrix<f64>,
    /// Descending, clamped to `[0, 1]`.
    pub correlations: Vec<f64>,
}

/// Default covariance ridge: `1e-6` times the mean eigenvalue.
pub fn default_cca_ridge(cov: &DMatrix<f64>) -> f64 {
    1e-6 * cov.trace() / cov.nrows().max(1) as f64
}

/// Canonical correlation analysis via the singular decomposition of the
/// whitened cross-covariance. `ridge = None` uses the default per modality.
pub fn cca_fit(xr: &FeatureMatrix, xd: &FeatureMatrix, k: usize, ridge: Option<f64>) -> Result<Cca> {
    let n = xr.ncols();
    if xd.ncols() != n {
        return Err(Error::Dimension(format!("modalities have {} and {} samples", n, xd.ncols())));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(format!("CCA needs at least 2 samples, got {n}")));
    }
    let kmax = xr.nrows().min(xd.nrows()).min(n - 1);
    if k == 0 || k > kmax {
        return Err(Error::InvalidArgument(format!("k={k} must be in 1..={kmax}")));
    }
    if let Some(r) = ridge {
        if !(r >= 0.0) {
            return Err(Error::InvalidArgument(format!("ridge must be non-negative, got {r}")));
        }
    }
    let mean_r = linalg::row_means(xr);
    let mean_d = linalg::row_means(xd);
    let cr = linalg::center(xr, &mean_r);
    let cd = linalg::center(xd, &mean_d);
    let regularized = |c: &DMatrix<f64>, name: &str| -> Result<DMatrix<f64>> {
        let mut cov = linalg::covariance(c);
        if !(cov.trace() > 0.0) {
            return Err(Error::Data(format!("modality {name} has zero variance")));
        }
        let r = ridge.unwrap_or_else(|| default_cca_ridge(&cov));
        for i in 0..cov.nrows() {
            cov[(i, i)] += r;
        }
        linalg::inv_sqrt_spd(&cov)
            .ok_or_else(|| Error::Numerical(format!("covariance of modality {name} is singular; use a positive ridge")))
    };
    let ir = regularized(&cr, "r")?;
    let id = regularized(&cd, "d")?;
    let t = &ir * linalg::cross_covariance(&cr, &cd) * &id;
    let svd = t.svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let mut w_r = DMatrix::zeros(k, xr.nrows());
    let mut w_d = DMatrix::zeros(k, xd.nrows());
    let mut correlations = Vec::with_capacity(k);
    for (j, &i) in order.iter().take(k).enumerate() {
        let mut a = &ir * u.column(i);
        let mut b = &id * vt.row(i).transpose();
        // flip the pair together so the correlation keeps its sign
        let peak = a.iter().copied().fold(0.0_f64, |p, v| if v.abs() > p.abs() { v } else { p });
        if peak < 0.0 {
            a = -a;
            b = -b;
        }
        w_r.set_row(j, &a.transpose());
        w_d.set_row(j, &b.transpose());
        correlations.push(svd.singular_values[i].clamp(0.0, 1.0));
    }
    Ok(Cca { mean_r, mean_d, w_r, w_d, correlations })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RicaHyper {
    /// Reconstruction weight.
    pub lambda: f64,
    /// Smoothing constant of the L1 term.
    pub epsilon: f64,
}

impl Default for RicaHyper {
    fn default() -> Self {
        RicaHyper { lambda: 1.0, epsilon: 1e-8 }
    }
}

/// RICA objective over `W_i` (`z × d`, column-major) with `W_c` fixed.
pub struct RicaObjective<'a> {
    /// Centered data, `d × m`.
    pub x: &'a DMatrix<f64>,
    pub w_c: &'a DMatrix<f64>,
    pub z: usize,
    pub hyper: RicaHyper,
    fixed: DMatrix<f64>,
}

impl<'a> RicaObjective<'a> {
    pub fn new(x: &'a DMatrix<f64>, w_c: &'a DMatrix<f64>, z: usize, hyper: RicaHyper) -> Result<Self> {
        if !(hyper.lambda > 0.0) || !(hyper.epsilon > 0.0) {
            return Err(Error::InvalidArgument("RICA lambda and epsilon must be positive".into()));
        }
        if w_c.ncols() != x.nrows() {
            return Err(Error::Dimension(format!("projection has {} columns, data has {} rows", w_c.ncols(), x.nrows())));
        }
        Ok(RicaObjective { x, w_c, z, hyper, fixed: w_c.tr_mul(w_c) })
    }
}

impl Objective for RicaObjective<'_> {
    fn evaluate(&self, w: &[f64], grad: &mut [f64]) -> f64 {
        let (d, m) = self.x.shape();
        let wi = DMatrix::from_column_slice(self.z, d, w);
        let mix = &self.fixed + wi.tr_mul(&wi);
        let e = &mix * self.x - self.x;
        let scale = self.hyper.lambda / m as f64;
        let s = &wi * self.x;
        let mut value = scale * e.norm_squared();
        let mut soft = s.clone();
        for v in soft.iter_mut() {
            let r = (*v * *v + self.hyper.epsilon).sqrt();
            value += r;
            *v /= r;
        }
        let ex = &e * self.x.transpose();
        let g = &wi * (&ex + ex.transpose()) * (2.0 * scale) + soft * self.x.transpose();
        grad.copy_from_slice(g.as_slice());
        value
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RicaFit {
    pub w_i: DMatrix<f64>,
    pub status: Status,
    pub trace: Vec<f64>,
}

/// Fits `z` modality-specific projections on centered data `x`.
pub fn rica_fit(
    x: &DMatrix<f64>,
    w_c: &DMatrix<f64>,
    hyper: &RicaHyper,
    z: usize,
    seed: u64,
    opts: &MinimizeOptions,
) -> Result<RicaFit> {
    let obj = RicaObjective::new(x, w_c, z, *hyper)?;
    let d = x.nrows();
    // W_i = 0 is a stationary point, so start from a small random matrix
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 0.1 / (d as f64).sqrt();
    let x0: Vec<f64> = (0..z * d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    let min = optim::minimize(&obj, &x0, opts)?;
    Ok(RicaFit { w_i: DMatrix::from_column_slice(z, d, &min.x), status: min.status, trace: min.trace })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CcaRicaModel {
    pub cca: Cca,
    pub w_ri: DMatrix<f64>,
    pub w_di: DMatrix<f64>,
    pub rica: RicaHyper,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CcaRicaTraining {
    pub model: CcaRicaModel,
    pub rica_r: RicaFit,
    pub rica_d: RicaFit,
}

pub fn ccarica_fit(
    xr: &FeatureMatrix,
    xd: &FeatureMatrix,
    k: usize,
    z: usize,
    ridge: Option<f64>,
    hyper: &RicaHyper,
    seed: u64,
    opts: &MinimizeOptions,
) -> Result<CcaRicaTraining> {
    if z == 0 {
        return Err(Error::InvalidArgument("z must be at least 1".into()));
    }
    let cca = cca_fit(xr, xd, k, ridge)?;
    let cr = linalg::center(xr, &cca.mean_r);
    let cd = linalg::center(xd, &cca.mean_d);
    let rica_r = rica_fit(&cr, &cca.w_r, hyper, z, seed, opts)?;
    let rica_d = rica_fit(&cd, &cca.w_d, hyper, z, seed.wrapping_add(1), opts)?;
    let model = CcaRicaModel { cca, w_ri: rica_r.w_i.clone(), w_di: rica_d.w_i.clone(), rica: *hyper };
    Ok(CcaRicaTraining { model, rica_r, rica_d })
}

/// Four blocks `Z_r, Y_r, Y_d, Z_d`; the specific pair and the shared pair
/// each form one layer group.
pub fn ccarica_factorize(m: &CcaRicaModel, xr: &FeatureMatrix, xd: &FeatureMatrix) -> Result<ComponentStack> {
    if xr.nrows() != m.cca.mean_r.len() || xd.nrows() != m.cca.mean_d.len() {
        return Err(Error::Dimension(format!(
            "model expects {}/{} rows, inputs have {}/{}",
            m.cca.mean_r.len(),
            m.cca.mean_d.len(),
            xr.nrows(),
            xd.nrows()
        )));
    }
    if xr.ncols() != xd.ncols() {
        return Err(Error::Dimension("modalities have different sample counts".into()));
    }
    let cr = linalg::center(xr, &m.cca.mean_r);
    let cd = linalg::center(xd, &m.cca.mean_d);
    let block = |tag, layer_group, matrix| ComponentBlock { tag, layer_group, matrix };
    ComponentStack::new(vec![
        block(ComponentTag::Zr(1), 0, &m.w_ri * &cr),
        block(ComponentTag::Yr, 1, &m.cca.w_r * &cr),
        block(ComponentTag::Yd, 1, &m.cca.w_d * &cd),
        block(ComponentTag::Zd(1), 0, &m.w_di * &cd),
    ])
}

impl Persist for CcaRicaModel {
    const KIND: &'static str = "cca-rica";

    fn to_envelope(&self) -> Envelope {
        let col = |v: &DVector<f64>| DMatrix::from_column_slice(v.len(), 1, v.as_slice());
        let mut env = Envelope::new(Self::KIND);
        env.reals("correlations", &self.cca.correlations)
            .real("rica_lambda", self.rica.lambda)
            .real("rica_epsilon", self.rica.epsilon)
            .matrix("mean_r", &col(&self.cca.mean_r))
            .matrix("mean_d", &col(&self.cca.mean_d))
            .matrix("W_rc", &self.cca.w_r)
            .matrix("W_dc", &self.cca.w_d)
            .matrix("W_ri", &self.w_ri)
            .matrix("W_di", &self.w_di);
        env
    }

    fn from_envelope(env: &Envelope) -> Result<Self> {
        let vec = |name: &str| -> Result<DVector<f64>> { Ok(DVector::from_column_slice(env.get_matrix(name)?.as_slice())) };
        let m = CcaRicaModel {
            cca: Cca {
                mean_r: vec("mean_r")?,
                mean_d: vec("mean_d")?,
                w_r: env.get_matrix("W_rc")?.clone(),
                w_d: env.get_matrix("W_dc")?.clone(),
                correlations: env.get_reals("correlations")?,
            },
            w_ri: env.get_matrix("W_ri")?.clone(),
            w_di: env.get_matrix("W_di")?.clone(),
            rica: RicaHyper { lambda: env.get_parsed("rica_lambda")?, epsilon: env.get_parsed("rica_epsilon")? },
        };
        let (dr, dd) = (m.cca.mean_r.len(), m.cca.mean_d.len());
        let k = m.cca.correlations.len();
        if m.cca.w_r.shape() != (k, dr)
            || m.cca.w_d.shape() != (k, dd)
            || m.w_ri.ncols() != dr
            || m.w_di.ncols() != dd
            || m.w_ri.nrows() != m.w_di.nrows()
        {
            return Err(Error::Data("cca-rica model sections have inconsistent dimensions".into()));
        }
        Ok(m)
    }
}
