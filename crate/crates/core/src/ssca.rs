//! Single shared-specific component analysis (SSCA) layer.
//!
//! Each modality `X_r`, `X_d` (columns are samples, entries in `[0, 1]`) is
//! mapped to a shared component `Y = σ(W X + b_Y)` and a specific component
//! `Z = σ(V X + b_Z)`, and reconstructed as `X̃ = σ(Q Y + U Z + b_X)`. The cost
//! pulls the two shared components together, keeps both inputs
//! reconstructible, decays the weights and pushes the mean activation of
//! every unit towards a sparsity target through a KL penalty.
//!
//! Training alternates between the shared-branch parameters (phase Y) and the
//! specific-branch parameters (phase Z); the reconstruction biases are free in
//! both phases.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrixio::{Envelope, FeatureMatrix, Persist};
use crate::optim::{self, MinimizeOptions, Status};

/// Smoothing added under the square root when `exact_norms` is set.
pub const NORM_EPS: f64 = 1e-16;
/// Row means are clamped to `[RHO_CLAMP, 1 - RHO_CLAMP]` before the KL term.
pub const RHO_CLAMP: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerDims {
    pub d_r: usize,
    pub d_d: usize,
    pub y_dim: usize,
    pub z_dim: usize,
}

impl LayerDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_r == 0 || self.d_d == 0 || self.y_dim == 0 || self.z_dim == 0 {
            return Err(Error::InvalidArgument(format!("layer dimensions must all be >= 1, got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SscaHyper {
    /// Weight decay.
    pub lambda: f64,
    pub zeta_r: f64,
    pub zeta_d: f64,
    pub alpha_r: f64,
    pub alpha_d: f64,
    pub beta_r: f64,
    pub beta_d: f64,
    pub rho_y: f64,
    pub rho_z: f64,
    /// Use smoothed unsquared Frobenius norms instead of `‖·‖²/(2n)` and
    /// `Σ‖W‖²/2`.
    pub exact_norms: bool,
}

impl Default for SscaHyper {
    fn default() -> Self {
        SscaHyper {
            lambda: 1e-4,
            zeta_r: 1.0,
            zeta_d: 1.0,
            alpha_r: 0.1,
            alpha_d: 0.1,
            beta_r: 0.1,
            beta_d: 0.1,
            rho_y: 0.05,
            rho_z: 0.05,
            exact_norms: false,
        }
    }
}

impl SscaHyper {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda, self.zeta_r, self.zeta_d, self.alpha_r, self.alpha_d, self.beta_r, self.beta_d];
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(format!("SSCA weights must be finite and >= 0: {self:?}")));
        }
        for rho in [self.rho_y, self.rho_z] {
            check_rho(rho)?;
        }
        Ok(())
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("sparsity target must lie in (0, 1), got {rho}")))
    }
}

/// Parameters of one layer. Weight matrices map inputs to components (`W`,
/// `V`) and components back to inputs (`Q`, `U`).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w_r: DMatrix<f64>,
    pub w_d: DMatrix<f64>,
    pub v_r: DMatrix<f64>,
    pub v_d: DMatrix<f64>,
    pub q_r: DMatrix<f64>,
    pub q_d: DMatrix<f64>,
    pub u_r: DMatrix<f64>,
    pub u_d: DMatrix<f64>,
    pub b_yr: DVector<f64>,
    pub b_yd: DVector<f64>,
    pub b_zr: DVector<f64>,
    pub b_zd: DVector<f64>,
    pub b_xr: DVector<f64>,
    pub b_xd: DVector<f64>,
}

/// Named parameter blocks, used for flattening.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Wr,
    Wd,
    Vr,
    Vd,
    Qr,
    Qd,
    Ur,
    Ud,
    BYr,
    BYd,
    BZr,
    BZd,
    BXr,
    BXd,
}

impl Slot {
    pub const ALL: [Slot; 14] = [
        Slot::Wr,
        Slot::Wd,
        Slot::Vr,
        Slot::Vd,
        Slot::Qr,
        Slot::Qd,
        Slot::Ur,
        Slot::Ud,
        Slot::BYr,
        Slot::BYd,
        Slot::BZr,
        Slot::BZd,
        Slot::BXr,
        Slot::BXd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Slot::Wr => "W_r",
            Slot::Wd => "W_d",
            Slot::Vr => "V_r",
            Slot::Vd => "V_d",
            Slot::Qr => "Q_r",
            Slot::Qd => "Q_d",
            Slot::Ur => "U_r",
            Slot::Ud => "U_d",
            Slot::BYr => "b_Yr",
            Slot::BYd => "b_Yd",
            Slot::BZr => "b_Zr",
            Slot::BZd => "b_Zd",
            Slot::BXr => "b_Xr",
            Slot::BXd => "b_Xd",
        }
    }
}

/// Which parameter subset an optimization step moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Shared branch: `W`, `Q`, `b_Y` and the reconstruction biases.
    Y,
    /// Specific branch: `V`, `U`, `b_Z` and the reconstruction biases.
    Z,
    All,
}

impl Phase {
    pub fn slots(self) -> &'static [Slot] {
        use Slot::*;
        match self {
            Phase::Y => &[Wr, Wd, Qr, Qd, BYr, BYd, BXr, BXd],
            Phase::Z => &[Vr, Vd, Ur, Ud, BZr, BZd, BXr, BXd],
            Phase::All => &Slot::ALL,
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "y" | "Y" => Ok(Phase::Y),
            "z" | "Z" => Ok(Phase::Z),
            "all" => Ok(Phase::All),
            _ => Err(Error::InvalidArgument(format!("unknown phase {s:?} (expected y, z or all)"))),
        }
    }
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let r = (6.0 / (rows + cols) as f64).sqrt();
    // column-major fill keeps the stream layout independent of nalgebra's iteration order
    let mut m = DMatrix::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            m[(i, j)] = rng.random_range(-r..r);
        }
    }
    m
}

impl LayerParams {
    pub fn zeros(dims: &LayerDims) -> Self {
        let LayerDims { d_r, d_d, y_dim: y, z_dim: z } = *dims;
        LayerParams {
            w_r: DMatrix::zeros(y, d_r),
            w_d: DMatrix::zeros(y, d_d),
            v_r: DMatrix::zeros(z, d_r),
            v_d: DMatrix::zeros(z, d_d),
            q_r: DMatrix::zeros(d_r, y),
            q_d: DMatrix::zeros(d_d, y),
            u_r: DMatrix::zeros(d_r, z),
            u_d: DMatrix::zeros(d_d, z),
            b_yr: DVector::zeros(y),
            b_yd: DVector::zeros(y),
            b_zr: DVector::zeros(z),
            b_zd: DVector::zeros(z),
            b_xr: DVector::zeros(d_r),
            b_xd: DVector::zeros(d_d),
        }
    }

    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, biases zero.
    /// Matrices are drawn in the order W_r, W_d, V_r, V_d, Q_r, Q_d, U_r, U_d.
    pub fn init(dims: &LayerDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let LayerDims { d_r, d_d, y_dim: y, z_dim: z } = *dims;
        let mut p = LayerParams::zeros(dims);
        p.w_r = glorot(&mut rng, y, d_r);
        p.w_d = glorot(&mut rng, y, d_d);
        p.v_r = glorot(&mut rng, z, d_r);
        p.v_d = glorot(&mut rng, z, d_d);
        p.q_r = glorot(&mut rng, d_r, y);
        p.q_d = glorot(&mut rng, d_d, y);
        p.u_r = glorot(&mut rng, d_r, z);
        p.u_d = glorot(&mut rng, d_d, z);
        p
    }

    pub fn dims(&self) -> LayerDims {
        LayerDims { d_r: self.w_r.ncols(), d_d: self.w_d.ncols(), y_dim: self.w_r.nrows(), z_dim: self.v_r.nrows() }
    }

    pub fn slot(&self, s: Slot) -> &[f64] {
        match s {
            Slot::Wr => self.w_r.as_slice(),
            Slot::Wd => self.w_d.as_slice(),
            Slot::Vr => self.v_r.as_slice(),
            Slot::Vd => self.v_d.as_slice(),
            Slot::Qr => self.q_r.as_slice(),
            Slot::Qd => self.q_d.as_slice(),
            Slot::Ur => self.u_r.as_slice(),
            Slot::Ud => self.u_d.as_slice(),
            Slot::BYr => self.b_yr.as_slice(),
            Slot::BYd => self.b_yd.as_slice(),
            Slot::BZr => self.b_zr.as_slice(),
            Slot::BZd => self.b_zd.as_slice(),
            Slot::BXr => self.b_xr.as_slice(),
            Slot::BXd => self.b_xd.as_slice(),
        }
    }

    pub fn slot_mut(&mut self, s: Slot) -> &mut [f64] {
        match s {
            Slot::Wr => self.w_r.as_mut_slice(),
            Slot::Wd => self.w_d.as_mut_slice(),
            Slot::Vr => self.v_r.as_mut_slice(),
            Slot::Vd => self.v_d.as_mut_slice(),
            Slot::Qr => self.q_r.as_mut_slice(),
            Slot::Qd => self.q_d.as_mut_slice(),
            Slot::Ur => self.u_r.as_mut_slice(),
            Slot::Ud => self.u_d.as_mut_slice(),
            Slot::BYr => self.b_yr.as_mut_slice(),
            Slot::BYd => self.b_yd.as_mut_slice(),
            Slot::BZr => self.b_zr.as_mut_slice(),
            Slot::BZd => self.b_zd.as_mut_slice(),
            Slot::BXr => self.b_xr.as_mut_slice(),
            Slot::BXd => self.b_xd.as_mut_slice(),
        }
    }

    /// Concatenation of the phase's blocks (each column-major).
    pub fn flatten(&self, phase: Phase) -> Vec<f64> {
        phase.slots().iter().flat_map(|&s| self.slot(s).iter().copied()).collect()
    }

    pub fn flat_len(&self, phase: Phase) -> usize {
        phase.slots().iter().map(|&s| self.slot(s).len()).sum()
    }

    pub fn set_flat(&mut self, phase: Phase, x: &[f64]) {
        let mut off = 0;
        for &s in phase.slots() {
            let dst = self.slot_mut(s);
            let n = dst.len();
            dst.copy_from_slice(&x[off..off + n]);
            off += n;
        }
        debug_assert_eq!(off, x.len());
    }

    fn weights(&self) -> [&DMatrix<f64>; 8] {
        [&self.w_r, &self.w_d, &self.v_r, &self.v_d, &self.q_r, &self.q_d, &self.u_r, &self.u_d]
    }

    pub fn is_finite(&self) -> bool {
        Slot::ALL.iter().all(|&s| self.slot(s).iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerFactorization {
    pub y_r: DMatrix<f64>,
    pub y_d: DMatrix<f64>,
    pub z_r: DMatrix<f64>,
    pub z_d: DMatrix<f64>,
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `σ(M X + b 1ᵀ)`
fn affine_sigmoid(m: &DMatrix<f64>, x: &DMatrix<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    let mut a = m * x;
    for mut col in a.column_iter_mut() {
        col += b;
    }
    a.apply(|v| *v = sigmoid(*v));
    a
}

fn check_inputs(p: &LayerParams, xr: &FeatureMatrix, xd: &FeatureMatrix) -> Result<()> {
    let dims = p.dims();
    if xr.nrows() != dims.d_r || xd.nrows() != dims.d_d {
        return Err(Error::Dimension(format!(
            "layer expects inputs with {} and {} rows, got {} and {}",
            dims.d_r,
            dims.d_d,
            xr.nrows(),
            xd.nrows()
        )));
    }
    if xr.ncols() != xd.ncols() {
        return Err(Error::Dimension(format!(
            "modalities have different sample counts ({} vs {})",
            xr.ncols(),
            xd.ncols()
        )));
    }
    if xr.iter().chain(xd.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Data("layer input contains non-finite values".into()));
    }
    Ok(())
}

pub fn forward(p: &LayerParams, xr: &FeatureMatrix, xd: &FeatureMatrix) -> Result<LayerFactorization> {
    check_inputs(p, xr, xd)?;
    Ok(forward_unchecked(p, xr, xd))
}

fn forward_unchecked(p: &LayerParams, xr: &FeatureMatrix, xd: &FeatureMatrix) -> LayerFactorization {
    LayerFactorization {
        y_r: affine_sigmoid(&p.w_r, xr, &p.b_yr),
        y_d: affine_sigmoid(&p.w_d, xd, &p.b_yd),
        z_r: affine_sigmoid(&p.v_r, xr, &p.b_zr),
        z_d: affine_sigmoid(&p.v_d, xd, &p.b_zd),
    }
}

fn reconstruct_one(
    q: &DMatrix<f64>,
    u: &DMatrix<f64>,
    b: &DVector<f64>,
    y: &DMatrix<f64>,
    z: &DMatrix<f64>,
) -> DMatrix<f64> {
    let mut a = q * y + u * z;
    for mut col in a.column_iter_mut() {
        col += b;
    }
    a.apply(|v| *v = sigmoid(*v));
    a
}

/// `(X̃_r, X̃_d)`
pub fn reconstruct(p: &LayerParams, f: &LayerFactorization) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let dims = p.dims();
    let ok = f.y_r.nrows() == dims.y_dim
        && f.y_d.nrows() == dims.y_dim
        && f.z_r.nrows() == dims.z_dim
        && f.z_d.nrows() == dims.z_dim
        && [f.y_d.ncols(), f.z_r.ncols(), f.z_d.ncols()].iter().all(|&c| c == f.y_r.ncols());
    if !ok {
        return Err(Error::Dimension("factorization shapes do not match the layer".into()));
    }
    Ok((
        reconstruct_one(&p.q_r, &p.u_r, &p.b_xr, &f.y_r, &f.z_r),
        reconstruct_one(&p.q_d, &p.u_d, &p.b_xd, &f.y_d, &f.z_d),
    ))
}

fn clamped_row_means(m: &DMatrix<f64>) -> Vec<(f64, bool)> {
    let n = m.ncols() as f64;
    m.row_iter()
        .map(|r| {
            let mean = r.iter().sum::<f64>() / n;
            let c = mean.clamp(RHO_CLAMP, 1.0 - RHO_CLAMP);
            (c, c != mean)
        })
        .collect()
}

fn kl(rho: f64, q: f64) -> f64 {
    rho * (rho / q).ln() + (1.0 - rho) * ((1.0 - rho) / (1.0 - q)).ln()
}

/// `Σ_j KL(ρ ‖ ρ̂_j)` where `ρ̂_j` is the (clamped) mean of row `j`.
pub fn sparsity_penalty(m: &DMatrix<f64>, rho: f64) -> Result<f64> {
    check_rho(rho)?;
    Ok(clamped_row_means(m).iter().map(|&(q, _)| kl(rho, q)).sum())
}

/// `∂Ψ/∂M`, each row constant; clamped rows get zero.
fn sparsity_grad(m: &DMatrix<f64>, rho: f64, weight: f64, out: &mut DMatrix<f64>) {
    let n = m.ncols() as f64;
    for (j, (q, clamped)) in clamped_row_means(m).into_iter().enumerate() {
        if clamped {
            continue;
        }
        let g = weight * (-rho / q + (1.0 - rho) / (1.0 - q)) / n;
        out.row_mut(j).add_scalar_mut(g);
    }
}

/// Weighted cost terms; [`CostBreakdown::total`] is their sum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CostBreakdown {
    pub similarity: f64,
    pub weight_decay: f64,
    pub reconstruction_r: f64,
    pub reconstruction_d: f64,
    pub sparsity_yr: f64,
    pub sparsity_yd: f64,
    pub sparsity_zr: f64,
    pub sparsity_zd: f64,
}

impl CostBreakdown {
    pub fn terms(&self) -> [(&'static str, f64); 8] {
        [
            ("similarity", self.similarity),
            ("weight_decay", self.weight_decay),
            ("reconstruction_r", self.reconstruction_r),
            ("reconstruction_d", self.reconstruction_d),
            ("sparsity_yr", self.sparsity_yr),
            ("sparsity_yd", self.sparsity_yd),
            ("sparsity_zr", self.sparsity_zr),
            ("sparsity_zd", self.sparsity_zd),
        ]
    }

    pub fn total(&self) -> f64 {
        self.terms().iter().map(|(_, v)| v).sum()
    }
}

/// Discrepancy between two matrices and its derivative scale: returns
/// `(Δ, c)` with `∂Δ/∂A = c (A − B)`.
fn discrepancy(diff_sq: f64, n: usize, exact: bool) -> (f64, f64) {
    if exact {
        let v = (diff_sq + NORM_EPS).sqrt();
        (v, 1.0 / v)
    } else {
        let n = n as f64;
        (diff_sq / (2.0 * n), 1.0 / n)
    }
}

fn diff_sq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

struct Evaluation {
    breakdown: CostBreakdown,
    grad: Option<LayerParams>,
}

fn evaluate(p: &LayerParams, xr: &FeatureMatrix, xd: &FeatureMatrix, h: &SscaHyper, want_grad: bool) -> Evaluation {
    let n = xr.ncols();
    let f = forward_unchecked(p, xr, xd);
    let xtr = reconstruct_one(&p.q_r, &p.u_r, &p.b_xr, &f.y_r, &f.z_r);
    let xtd = reconstruct_one(&p.q_d, &p.u_d, &p.b_xd, &f.y_d, &f.z_d);

    let (sim, sim_c) = discrepancy(diff_sq(&f.y_r, &f.y_d), n, h.exact_norms);
    let (rec_r, rec_r_c) = discrepancy(diff_sq(&xtr, xr), n, h.exact_norms);
    let (rec_d, rec_d_c) = discrepancy(diff_sq(&xtd, xd), n, h.exact_norms);
    let wsq: f64 = p.weights().iter().map(|w| w.norm_squared()).sum();
    let (reg, reg_c) = if h.exact_norms {
        let v = (wsq + NORM_EPS).sqrt();
        (v, 1.0 / v)
    } else {
        (0.5 * wsq, 1.0)
    };
    let rows = |m: &DMatrix<f64>, rho: f64| -> f64 { clamped_row_means(m).iter().map(|&(q, _)| kl(rho, q)).sum() };
    let breakdown = CostBreakdown {
        similarity: sim,
        weight_decay: h.lambda * reg,
        reconstruction_r: h.zeta_r * rec_r,
        reconstruction_d: h.zeta_d * rec_d,
        sparsity_yr: h.alpha_r * rows(&f.y_r, h.rho_y),
        sparsity_yd: h.alpha_d * rows(&f.y_d, h.rho_y),
        sparsity_zr: h.beta_r * rows(&f.z_r, h.rho_z),
        sparsity_zd: h.beta_d * rows(&f.z_d, h.rho_z),
    };
    if !want_grad {
        return Evaluation { breakdown, grad: None };
    }

    let mut g = LayerParams::zeros(&p.dims());

    // output-layer deltas: ∂J/∂(pre-activation of X̃)
    let mut delta_xr = (&xtr - xr) * (h.zeta_r * rec_r_c);
    delta_xr.zip_apply(&xtr, |d, s| *d *= s * (1.0 - s));
    let mut delta_xd = (&xtd - xd) * (h.zeta_d * rec_d_c);
    delta_xd.zip_apply(&xtd, |d, s| *d *= s * (1.0 - s));

    g.q_r = &delta_xr * f.y_r.transpose();
    g.u_r = &delta_xr * f.z_r.transpose();
    g.b_xr = row_sums(&delta_xr);
    g.q_d = &delta_xd * f.y_d.transpose();
    g.u_d = &delta_xd * f.z_d.transpose();
    g.b_xd = row_sums(&delta_xd);

    // ∂J/∂Y and ∂J/∂Z
    let sim_diff = (&f.y_r - &f.y_d) * sim_c;
    let mut gy_r = p.q_r.transpose() * &delta_xr + &sim_diff;
    let mut gy_d = p.q_d.transpose() * &delta_xd - &sim_diff;
    let mut gz_r = p.u_r.transpose() * &delta_xr;
    let mut gz_d = p.u_d.transpose() * &delta_xd;
    sparsity_grad(&f.y_r, h.rho_y, h.alpha_r, &mut gy_r);
    sparsity_grad(&f.y_d, h.rho_y, h.alpha_d, &mut gy_d);
    sparsity_grad(&f.z_r, h.rho_z, h.beta_r, &mut gz_r);
    sparsity_grad(&f.z_d, h.rho_z, h.beta_d, &mut gz_d);

    for (gm, act) in [(&mut gy_r, &f.y_r), (&mut gy_d, &f.y_d), (&mut gz_r, &f.z_r), (&mut gz_d, &f.z_d)] {
        gm.zip_apply(act, |d, s| *d *= s * (1.0 - s));
    }
    g.w_r = &gy_r * xr.transpose();
    g.b_yr = row_sums(&gy_r);
    g.w_d = &gy_d * xd.transpose();
    g.b_yd = row_sums(&gy_d);
    g.v_r = &gz_r * xr.transpose();
    g.b_zr = row_sums(&gz_r);
    g.v_d = &gz_d * xd.transpose();
    g.b_zd = row_sums(&gz_d);

    let decay = h.lambda * reg_c;
    for (gw, w) in [
        (&mut g.w_r, &p.w_r),
        (&mut g.w_d, &p.w_d),
        (&mut g.v_r, &p.v_r),
        (&mut g.v_d, &p.v_d),
        (&mut g.q_r, &p.q_r),
        (&mut g.q_d, &p.q_d),
        (&mut g.u_r, &p.u_r),
        (&mut g.u_d, &p.u_d),
    ] {
        gw.zip_apply(w, |gv, wv| *gv += decay * wv);
    }
    Evaluation { breakdown, grad: Some(g) }
}

fn row_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.nrows(), m.row_iter().map(|r| r.iter().sum()))
}

pub fn cost(p: &LayerParams, xr: &FeatureMatrix, xd: &FeatureMatrix, h: &SscaHyper) -> Result<(f64, CostBreakdown)> {
    check_inputs(p, xr, xd)?;
    h.validate()?;
    let b = evaluate(p, xr, xd, h, false).breakdown;
    Ok((b.total(), b))
}

/// Gradient of the cost over the phase's parameters, flattened in
/// [`Phase::slots`] order.
pub fn gradient(p: &LayerParams, xr: &FeatureMatrix, xd: &FeatureMatrix, h: &SscaHyper, phase: Phase) -> Result<Vec<f64>> {
    check_inputs(p, xr, xd)?;
    h.validate()?;
    let e = evaluate(p, xr, xd, h, true);
    Ok(e.grad.expect("gradient requested").flatten(phase))
}

/// The cost as a function of one phase's flattened parameters, the others held
/// at `base`.
pub struct PhaseObjective<'a> {
    pub base: LayerParams,
    pub xr: &'a FeatureMatrix,
    pub xd: &'a FeatureMatrix,
    pub hyper: SscaHyper,
    pub phase: Phase,
}

impl<'a> PhaseObjective<'a> {
    pub fn new(
        base: &LayerParams,
        xr: &'a FeatureMatrix,
        xd: &'a FeatureMatrix,
        hyper: &SscaHyper,
        phase: Phase,
    ) -> Result<Self> {
        check_inputs(base, xr, xd)?;
        hyper.validate()?;
        Ok(PhaseObjective { base: base.clone(), xr, xd, hyper: *hyper, phase })
    }

    pub fn point(&self) -> Vec<f64> {
        self.base.flatten(self.phase)
    }

    pub fn params_at(&self, x: &[f64]) -> LayerParams {
        let mut p = self.base.clone();
        p.set_flat(self.phase, x);
        p
    }
}

impl optim::Objective for PhaseObjective<'_> {
    fn evaluate(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let p = self.params_at(x);
        let e = evaluate(&p, self.xr, self.xd, &self.hyper, true);
        let g = e.grad.expect("gradient requested");
        let mut off = 0;
        for &s in self.phase.slots() {
            let src = g.slot(s);
            grad[off..off + src.len()].copy_from_slice(src);
            off += src.len();
        }
        e.breakdown.total()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    pub outer_rounds: usize,
    pub inner_max_iter: usize,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule { outer_rounds: 5, inner_max_iter: 200, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTraining {
    pub params: LayerParams,
    /// Cost at initialization, then after each phase.
    pub phase_costs: Vec<f64>,
    /// Every accepted optimizer value across all phases, in order.
    pub accepted: Vec<f64>,
    /// Optimizer status of each phase.
    pub statuses: Vec<Status>,
    /// Set when a line-search failure ended the alternation before
    /// `outer_rounds` were completed.
    pub stopped_early: bool,
}

/// Alternating phase-Y / phase-Z minimization from a seeded random start.
pub fn train_layer(
    xr: &FeatureMatrix,
    xd: &FeatureMatrix,
    h: &SscaHyper,
    dims: &LayerDims,
    schedule: &Schedule,
) -> Result<LayerTraining> {
    dims.validate()?;
    h.validate()?;
    if xr.iter().chain(xd.iter()).any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Data("layer inputs must be whitened and scaled into [0, 1]".into()));
    }
    let init = LayerParams::init(dims, schedule.seed);
    train_layer_from(init, xr, xd, h, schedule)
}

/// Same as [`train_layer`] but starting from given parameters.
pub fn train_layer_from(
    init: LayerParams,
    xr: &FeatureMatrix,
    xd: &FeatureMatrix,
    h: &SscaHyper,
    schedule: &Schedule,
) -> Result<LayerTraining> {
    let (c0, _) = cost(&init, xr, xd, h)?;
    if !c0.is_finite() {
        return Err(Error::Numerical("SSCA cost is not finite at initialization".into()));
    }
    let opts = MinimizeOptions { max_iterations: schedule.inner_max_iter, ..Default::default() };
    let mut params = init;
    let mut phase_costs = vec![c0];
    let mut accepted = vec![c0];
    let mut statuses = Vec::new();
    let mut stopped_early = false;
    for round in 0..schedule.outer_rounds {
        let mut failed = false;
        for phase in [Phase::Y, Phase::Z] {
            let obj = PhaseObjective::new(&params, xr, xd, h, phase)?;
            let r = match optim::minimize(&obj, &obj.point(), &opts) {
                Ok(r) => r,
                Err(e) if round == 0 => return Err(e),
                Err(_) => {
                    stopped_early = true;
                    break;
                }
            };
            params = obj.params_at(&r.x);
            accepted.extend_from_slice(&r.trace[1..]);
            phase_costs.push(r.value);
            statuses.push(r.status);
            failed |= r.status == Status::LineSearchFailed;
        }
        if stopped_early {
            break;
        }
        if failed && round + 1 < schedule.outer_rounds {
            stopped_early = true;
            break;
        }
    }
    Ok(LayerTraining { params, phase_costs, accepted, statuses, stopped_early })
}

/// `‖Y_r − Y_d‖_F / ‖Y_r‖_F`
pub fn similarity_residual(f: &LayerFactorization) -> f64 {
    diff_sq(&f.y_r, &f.y_d).sqrt() / f.y_r.norm()
}

/// A trained layer with the dimensions and hyperparameters it was built with.
#[derive(Debug, Clone, PartialEq)]
pub struct SscaLayer {
    pub dims: LayerDims,
    pub hyper: SscaHyper,
    pub params: LayerParams,
}

impl SscaLayer {
    pub fn forward(&self, xr: &FeatureMatrix, xd: &FeatureMatrix) -> Result<LayerFactorization> {
        forward(&self.params, xr, xd)
    }
}

pub(crate) fn hyper_to_envelope(h: &SscaHyper, env: &mut Envelope) {
    env.real("lambda", h.lambda)
        .real("zeta_r", h.zeta_r)
        .real("zeta_d", h.zeta_d)
        .real("alpha_r", h.alpha_r)
        .real("alpha_d", h.alpha_d)
        .real("beta_r", h.beta_r)
        .real("beta_d", h.beta_d)
        .real("rho_y", h.rho_y)
        .real("rho_z", h.rho_z)
        .field("exact_norms", h.exact_norms);
}

pub(crate) fn hyper_from_envelope(env: &Envelope) -> Result<SscaHyper> {
    Ok(SscaHyper {
        lambda: env.get_parsed("lambda")?,
        zeta_r: env.get_parsed("zeta_r")?,
        zeta_d: env.get_parsed("zeta_d")?,
        alpha_r: env.get_parsed("alpha_r")?,
        alpha_d: env.get_parsed("alpha_d")?,
        beta_r: env.get_parsed("beta_r")?,
        beta_d: env.get_parsed("beta_d")?,
        rho_y: env.get_parsed("rho_y")?,
        rho_z: env.get_parsed("rho_z")?,
        exact_norms: env.get_parsed("exact_norms")?,
    })
}

impl Persist for SscaLayer {
    const KIND: &'static str = "ssca-layer";

    fn to_envelope(&self) -> Envelope {
        let mut env = Envelope::new(Self::KIND);
        env.field("d_r", self.dims.d_r)
            .field("d_d", self.dims.d_d)
            .field("y_dim", self.dims.y_dim)
            .field("z_dim", self.dims.z_dim);
        hyper_to_envelope(&self.hyper, &mut env);
        for s in Slot::ALL {
            let v = self.params.slot(s);
            let m = match s {
                Slot::Wr => self.params.w_r.clone(),
                Slot::Wd => self.params.w_d.clone(),
                Slot::Vr => self.params.v_r.clone(),
                Slot::Vd => self.params.v_d.clone(),
                Slot::Qr => self.params.q_r.clone(),
                Slot::Qd => self.params.q_d.clone(),
                Slot::Ur => self.params.u_r.clone(),
                Slot::Ud => self.params.u_d.clone(),
                _ => DMatrix::from_column_slice(v.len(), 1, v),
            };
            env.matrix(s.name(), &m);
        }
        env
    }

    fn from_envelope(env: &Envelope) -> Result<Self> {
        let dims = LayerDims {
            d_r: env.get_parsed("d_r")?,
            d_d: env.get_parsed("d_d")?,
            y_dim: env.get_parsed("y_dim")?,
            z_dim: env.get_parsed("z_dim")?,
        };
        dims.validate()?;
        let hyper = hyper_from_envelope(env)?;
        let mut params = LayerParams::zeros(&dims);
        for s in Slot::ALL {
            let m = env.get_matrix(s.name())?;
            let dst = params.slot_mut(s);
            let expected_shape = match s {
                Slot::Wr => (dims.y_dim, dims.d_r),
                Slot::Wd => (dims.y_dim, dims.d_d),
                Slot::Vr => (dims.z_dim, dims.d_r),
                Slot::Vd => (dims.z_dim, dims.d_d),
                Slot::Qr => (dims.d_r, dims.y_dim),
                Slot::Qd => (dims.d_d, dims.y_dim),
                Slot::Ur => (dims.d_r, dims.z_dim),
                Slot::Ud => (dims.d_d, dims.z_dim),
                _ => (dst.len(), 1),
            };
            if m.shape() != expected_shape {
                return Err(Error::Data(format!(
                    "ssca-layer matrix {} has shape {:?}, expected {:?}",
                    s.name(),
                    m.shape(),
                    expected_shape
                )));
            }
            dst.copy_from_slice(m.as_slice());
        }
        Ok(SscaLayer { dims, hyper, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::grad_check;

    fn dims() -> LayerDims {
        LayerDims { d_r: 7, d_d: 6, y_dim: 4, z_dim: 3 }
    }

    fn unit_data(rows: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, n, |_, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn zero_params_give_half() {
        let p = LayerParams::zeros(&dims());
        let f = forward(&p, &unit_data(7, 5, 1), &unit_data(6, 5, 2)).unwrap();
        assert!(f.y_r.iter().chain(f.z_d.iter()).all(|&v| v == 0.5));
        let (a, b) = reconstruct(&p, &f).unwrap();
        assert!(a.iter().chain(b.iter()).all(|&v| v == 0.5));
    }

    #[test]
    fn scalar_forward() {
        let d = LayerDims { d_r: 1, d_d: 1, y_dim: 1, z_dim: 1 };
        let mut p = LayerParams::zeros(&d);
        p.w_r[(0, 0)] = 1.0;
        p.b_yr[0] = 3.0;
        let x = DMatrix::from_element(1, 1, 0.0);
        let f = forward(&p, &x, &x).unwrap();
        assert!((f.y_r[(0, 0)] - 0.952_574_126_822_433_4).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_cancellation() {
        let d = LayerDims { d_r: 1, d_d: 1, y_dim: 1, z_dim: 1 };
        let mut p = LayerParams::zeros(&d);
        p.q_r[(0, 0)] = 2.0;
        p.u_r[(0, 0)] = -2.0;
        let half = DMatrix::from_element(1, 1, 0.5);
        let f = LayerFactorization { y_r: half.clone(), y_d: half.clone(), z_r: half.clone(), z_d: half };
        let (xr, _) = reconstruct(&p, &f).unwrap();
        assert_eq!(xr[(0, 0)], 0.5);
    }

    #[test]
    fn kl_penalty_values() {
        let m = DMatrix::from_element(1, 4, 0.05);
        assert!(sparsity_penalty(&m, 0.05).unwrap().abs() < 1e-15);
        let m = DMatrix::from_element(1, 4, 0.5);
        let expected = 0.05 * 0.1f64.ln() + 0.95 * 1.9f64.ln();
        let v = sparsity_penalty(&m, 0.05).unwrap();
        assert!((v - expected).abs() < 1e-12 && (v - 0.49463).abs() < 1e-5, "{v}");
        assert!(sparsity_penalty(&m, 1.0).is_err());
        assert!(sparsity_penalty(&m, 0.0).is_err());
    }

    #[test]
    fn kl_penalty_grows_away_from_target() {
        let rho = 0.3;
        let at = |q: f64| sparsity_penalty(&DMatrix::from_element(1, 3, q), rho).unwrap();
        assert!(at(rho + 0.1) > at(rho) && at(rho + 0.2) > at(rho + 0.1));
        assert!(at(rho - 0.1) > at(rho) && at(rho - 0.2) > at(rho - 0.1));
    }

    #[test]
    fn identical_branches_cost_zero() {
        let d = LayerDims { d_r: 3, d_d: 3, y_dim: 2, z_dim: 2 };
        let mut p = LayerParams::init(&d, 3);
        p.w_d = p.w_r.clone();
        p.b_yd = p.b_yr.clone();
        let x = unit_data(3, 4, 5);
        let h = SscaHyper {
            lambda: 0.0,
            zeta_r: 0.0,
            zeta_d: 0.0,
            alpha_r: 0.0,
            alpha_d: 0.0,
            beta_r: 0.0,
            beta_d: 0.0,
            ..Default::default()
        };
        assert_eq!(cost(&p, &x, &x, &h).unwrap().0, 0.0);
    }

    #[test]
    fn weight_decay_only() {
        let d = LayerDims { d_r: 2, d_d: 2, y_dim: 2, z_dim: 2 };
        let mut p = LayerParams::zeros(&d);
        p.v_d[(1, 0)] = 3.0;
        let x = unit_data(2, 3, 0);
        let h = SscaHyper {
            lambda: 1.0,
            zeta_r: 0.0,
            zeta_d: 0.0,
            alpha_r: 0.0,
            alpha_d: 0.0,
            beta_r: 0.0,
            beta_d: 0.0,
            ..Default::default()
        };
        // Y_r = Y_d = 0.5 everywhere, so similarity vanishes
        assert_eq!(cost(&p, &x, &x, &h).unwrap().0, 4.5);
    }

    #[test]
    fn phase_layouts() {
        let p = LayerParams::init(&dims(), 0);
        let d = dims();
        let shared = 2 * d.y_dim * (d.d_r + d.d_d) + 2 * d.y_dim + d.d_r + d.d_d;
        let specific = 2 * d.z_dim * (d.d_r + d.d_d) + 2 * d.z_dim + d.d_r + d.d_d;
        assert_eq!(p.flat_len(Phase::Y), shared);
        assert_eq!(p.flat_len(Phase::Z), specific);
        let y = p.flatten(Phase::Y);
        // the V_r block is not part of phase Y: first V entry never appears at W's offsets
        assert!(!Phase::Y.slots().contains(&Slot::Vr));
        assert_eq!(&y[..p.w_r.len()], p.w_r.as_slice());
        let mut q = p.clone();
        q.set_flat(Phase::Y, &vec![0.0; shared]);
        assert_eq!(q.v_r, p.v_r);
        assert!(q.w_r.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn symmetric_point_weight_decay_gradient() {
        // X_r = X_d and identical shared branches: Y_r ≡ Y_d, so only weight
        // decay contributes to ∂/∂W_r when ζ = α = 0.
        let d = LayerDims { d_r: 3, d_d: 3, y_dim: 2, z_dim: 2 };
        let mut p = LayerParams::init(&d, 9);
        p.w_d = p.w_r.clone();
        let x = unit_data(3, 5, 1);
        let h = SscaHyper {
            lambda: 1.0,
            zeta_r: 0.0,
            zeta_d: 0.0,
            alpha_r: 0.0,
            alpha_d: 0.0,
            ..Default::default()
        };
        let g = gradient(&p, &x, &x, &h, Phase::Y).unwrap();
        assert_eq!(&g[..p.w_r.len()], p.w_r.as_slice());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let xr = unit_data(7, 5, 11);
        let xd = unit_data(6, 5, 12);
        for (i, phase) in [Phase::Y, Phase::Z, Phase::All].into_iter().enumerate() {
            for exact in [false, true] {
                let h = SscaHyper { exact_norms: exact, lambda: 0.01, ..Default::default() };
                let p = LayerParams::init(&dims(), i as u64);
                let obj = PhaseObjective::new(&p, &xr, &xd, &h, phase).unwrap();
                let x = obj.point();
                let r = grad_check(&obj, &x, 1e-5, x.len()).unwrap();
                assert!(r.max_relative_error < 1e-5, "{phase:?} exact={exact}: {}", r.max_relative_error);
            }
        }
    }

    #[test]
    fn cost_invariant_to_sample_permutation() {
        let xr = unit_data(7, 5, 1);
        let xd = unit_data(6, 5, 2);
        let p = LayerParams::init(&dims(), 4);
        let h = SscaHyper::default();
        let perm = [3, 0, 4, 1, 2];
        let pr = DMatrix::from_fn(7, 5, |i, j| xr[(i, perm[j])]);
        let pd = DMatrix::from_fn(6, 5, |i, j| xd[(i, perm[j])]);
        let a = cost(&p, &xr, &xd, &h).unwrap().0;
        let b = cost(&p, &pr, &pd, &h).unwrap().0;
        assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn shape_errors() {
        let p = LayerParams::zeros(&dims());
        assert!(forward(&p, &unit_data(6, 5, 0), &unit_data(6, 5, 0)).is_err());
        assert!(forward(&p, &unit_data(7, 5, 0), &unit_data(6, 4, 0)).is_err());
        let mut bad = unit_data(7, 5, 0);
        bad[(0, 0)] = f64::NAN;
        assert!(forward(&p, &bad, &unit_data(6, 5, 0)).is_err());
    }

    #[test]
    fn training_descends_and_is_deterministic() {
        let xr = unit_data(7, 12, 21);
        let xd = unit_data(6, 12, 22);
        let sched = Schedule { outer_rounds: 2, inner_max_iter: 30, seed: 5 };
        let h = SscaHyper::default();
        let a = train_layer(&xr, &xd, &h, &dims(), &sched).unwrap();
        let b = train_layer(&xr, &xd, &h, &dims(), &sched).unwrap();
        assert_eq!(a, b);
        assert!(a.phase_costs.windows(2).all(|w| w[1] <= w[0]));
        assert!(a.accepted.windows(2).all(|w| w[1] <= w[0]));
        assert!(a.phase_costs.last().unwrap() < &a.phase_costs[0]);
    }

    #[test]
    fn persist_round_trip() {
        let layer = SscaLayer { dims: dims(), hyper: SscaHyper::default(), params: LayerParams::init(&dims(), 1) };
        let env = Envelope::parse(&layer.to_envelope().render(&[]), std::path::Path::new("l")).unwrap();
        assert_eq!(SscaLayer::from_envelope(&env).unwrap(), layer);
    }
}
