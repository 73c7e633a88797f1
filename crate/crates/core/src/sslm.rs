//! Structured sparsity learning machine: a regression-to-indicator linear
//! classifier over a component stack, regularized by per-component and
//! per-layer group norms plus weight decay.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrixio::{Envelope, FeatureMatrix, LabelVector, Persist};
use crate::optim::{self, MinimizeOptions, Objective, Status};
use crate::stack::{ComponentTag, GroupStructure};

/// Smoothing constant of the group norms in the training objective.
pub const GROUP_EPS: f64 = 1e-8;
/// A group whose norm is below this fraction of the largest group norm is
/// reported as switched off.
pub const OFF_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gammas {
    /// Component-wise group norm weight.
    pub e: f64,
    /// Layer-wise group norm weight.
    pub l: f64,
    /// Weight decay.
    pub w: f64,
}

impl Default for Gammas {
    fn default() -> Self {
        Gammas { e: 1e-2, l: 1e-2, w: 1e-2 }
    }
}

impl Gammas {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma_e", self.e), ("gamma_l", self.l), ("gamma_w", self.w)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn total(&self) -> f64 {
        self.e + self.l + self.w
    }
}

/// One-hot class indicator, `c × n`.
pub fn class_assignment(labels: &LabelVector) -> DMatrix<f64> {
    let mut f = DMatrix::zeros(labels.num_classes, labels.len());
    for (j, &c) in labels.labels.iter().enumerate() {
        f[(c, j)] = 1.0;
    }
    f
}

fn check_structure(b: &DMatrix<f64>, s: &GroupStructure) -> Result<()> {
    s.validate()?;
    if s.total_rows != b.nrows() {
        return Err(Error::Dimension(format!(
            "group structure covers {} rows, B has {}",
            s.total_rows,
            b.nrows()
        )));
    }
    Ok(())
}

fn block_sq(b: &DMatrix<f64>, rows: &std::ops::Range<usize>, class: usize) -> f64 {
    rows.clone().map(|r| b[(r, class)] * b[(r, class)]).sum()
}

/// Sum over classes and components of the component's weight norm.
pub fn group_norm_ge(b: &DMatrix<f64>, s: &GroupStructure) -> Result<f64> {
    check_structure(b, s)?;
    Ok((0..b.ncols())
        .map(|i| s.groups.iter().map(|g| block_sq(b, &g.rows, i).sqrt()).sum::<f64>())
        .sum())
}

/// Sum over classes and layer groups of the joint norm of the group's blocks.
pub fn group_norm_gl(b: &DMatrix<f64>, s: &GroupStructure) -> Result<f64> {
    check_structure(b, s)?;
    let layers = s.layer_groups();
    Ok((0..b.ncols())
        .map(|i| {
            layers
                .iter()
                .map(|members| members.iter().map(|&g| block_sq(b, &s.groups[g].rows, i)).sum::<f64>().sqrt())
                .sum::<f64>()
        })
        .sum())
}

/// Smoothed training objective over `B` flattened column-major (`p × c`).
pub struct SslmObjective<'a> {
    pub a: &'a DMatrix<f64>,
    /// `n × c`, transposed class assignment.
    pub ft: DMatrix<f64>,
    pub structure: &'a GroupStructure,
    pub gammas: Gammas,
    /// Use the smoothed unsquared Frobenius norm for weight decay.
    pub exact_norms: bool,
    layers: Vec<Vec<usize>>,
}

impl<'a> SslmObjective<'a> {
    pub fn new(a: &'a DMatrix<f64>, f: &DMatrix<f64>, structure: &'a GroupStructure, gammas: Gammas, exact_norms: bool) -> Result<Self> {
        gammas.validate()?;
        if f.ncols() != a.ncols() {
            return Err(Error::Dimension(format!("{} samples in the stack but {} in the assignment", a.ncols(), f.ncols())));
        }
        if structure.total_rows != a.nrows() {
            return Err(Error::Dimension(format!(
                "group structure covers {} rows, stack has {}",
                structure.total_rows,
                a.nrows()
            )));
        }
        structure.validate()?;
        Ok(SslmObjective { a, ft: f.transpose(), structure, gammas, exact_norms, layers: structure.layer_groups() })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.a.nrows(), self.ft.ncols())
    }
}

impl Objective for SslmObjective<'_> {
    fn evaluate(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let (p, c) = self.shape();
        let b = DMatrix::from_column_slice(p, c, x);
        let resid = self.a.tr_mul(&b) - &self.ft;
        let mut value = resid.norm_squared();
        let mut g = (self.a * &resid) * 2.0;
        let eps2 = GROUP_EPS * GROUP_EPS;
        let gm = self.gammas;
        if gm.w > 0.0 {
            let sq = b.norm_squared();
            if self.exact_norms {
                let n = (sq + eps2).sqrt();
                value += gm.w * n;
                g += &b * (gm.w / n);
            } else {
                value += gm.w * sq;
                g += &b * (2.0 * gm.w);
            }
        }
        for i in 0..c {
            if gm.e > 0.0 {
                for grp in &self.structure.groups {
                    let n = (block_sq(&b, &grp.rows, i) + eps2).sqrt();
                    value += gm.e * n;
                    for r in grp.rows.clone() {
                        g[(r, i)] += gm.e * b[(r, i)] / n;
                    }
                }
            }
            if gm.l > 0.0 {
                for members in &self.layers {
                    let sq: f64 = members.iter().map(|&k| block_sq(&b, &self.structure.groups[k].rows, i)).sum();
                    let n = (sq + eps2).sqrt();
                    value += gm.l * n;
                    for &k in members {
                        for r in self.structure.groups[k].rows.clone() {
                            g[(r, i)] += gm.l * b[(r, i)] / n;
                        }
                    }
                }
            }
        }
        grad.copy_from_slice(g.as_slice());
        value
    }
}

/// Closed-form minimizer without group norms: `(A Aᵀ + γ_W I)⁻¹ A Fᵀ`.
/// Uses a pseudo-inverse when the system is singular.
pub fn ridge_solution(a: &DMatrix<f64>, f: &DMatrix<f64>, gamma_w: f64) -> Result<DMatrix<f64>> {
    let p = a.nrows();
    let lhs = a * a.transpose() + DMatrix::identity(p, p) * gamma_w;
    let rhs = a * f.transpose();
    if let Some(ch) = lhs.clone().cholesky() {
        return Ok(ch.solve(&rhs));
    }
    let svd = lhs.svd(true, true);
    let tol = 1e-12 * svd.singular_values.max().max(f64::MIN_POSITIVE);
    svd.solve(&rhs, tol).map_err(|e| Error::Numerical(format!("ridge solve failed: {e}")))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SslmOptions {
    pub gammas: Gammas,
    pub exact_norms: bool,
    /// Start from the ridge solution instead of zero.
    pub warm_start: bool,
    pub minimize: MinimizeOptions,
}

impl Default for SslmOptions {
    fn default() -> Self {
        SslmOptions {
            gammas: Gammas::default(),
            exact_norms: false,
            warm_start: true,
            minimize: MinimizeOptions { max_iterations: 2000, gradient_tolerance: 1e-8, ..MinimizeOptions::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SslmModel {
    /// `p × c` weights; column `i` scores class `i`.
    pub b: DMatrix<f64>,
    pub structure: GroupStructure,
    pub gammas: Gammas,
    pub exact_norms: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SslmTraining {
    pub model: SslmModel,
    pub status: Status,
    pub iterations: usize,
    /// Objective values over accepted optimizer steps.
    pub trace: Vec<f64>,
}

fn fit(a: &DMatrix<f64>, f: &DMatrix<f64>, structure: &GroupStructure, opts: &SslmOptions) -> Result<SslmTraining> {
    let obj = SslmObjective::new(a, f, structure, opts.gammas, opts.exact_norms)?;
    let (p, c) = obj.shape();
    let x0 = if opts.warm_start {
        ridge_solution(a, f, opts.gammas.w)?.as_slice().to_vec()
    } else {
        vec![0.0; p * c]
    };
    let min = optim::minimize(&obj, &x0, &opts.minimize)?;
    let b = DMatrix::from_column_slice(p, c, &min.x);
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("classifier weights became non-finite".into()));
    }
    Ok(SslmTraining {
        model: SslmModel { b, structure: structure.clone(), gammas: opts.gammas, exact_norms: opts.exact_norms },
        status: min.status,
        iterations: min.iterations,
        trace: min.trace,
    })
}

/// Trains on the stacked matrix `a` (`p × n`) with the given row grouping.
pub fn train_sslm(a: &DMatrix<f64>, labels: &LabelVector, structure: &GroupStructure, opts: &SslmOptions) -> Result<SslmTraining> {
    if labels.len() != a.ncols() {
        return Err(Error::Dimension(format!("{} labels for {} samples", labels.len(), a.ncols())));
    }
    let mut counts = vec![0usize; labels.num_classes];
    labels.labels.iter().for_each(|&c| counts[c] += 1);
    if let Some(c) = counts.iter().position(|&k| k == 0) {
        return Err(Error::Data(format!("class {c} has no training sample")));
    }
    fit(a, &class_assignment(labels), structure, opts)
}

/// Baseline classifier on plain concatenated features: one group, no group
/// norms.
pub fn train_concat(x: &FeatureMatrix, labels: &LabelVector, gamma_w: f64) -> Result<SslmTraining> {
    let opts = SslmOptions { gammas: Gammas { e: 0.0, l: 0.0, w: gamma_w }, ..SslmOptions::default() };
    train_sslm(x, labels, &GroupStructure::single(x.nrows(), ComponentTag::Named("X".into())), &opts)
}

fn argmax(scores: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, s) in scores.enumerate() {
        if s > best.1 || i == 0 {
            best = (i, s);
        }
    }
    best.0
}

impl SslmModel {
    pub fn num_classes(&self) -> usize {
        self.b.ncols()
    }

    /// Class with the largest score; the lowest index wins ties.
    pub fn classify(&self, a: &[f64]) -> Result<usize> {
        if a.len() != self.b.nrows() {
            return Err(Error::Dimension(format!("feature column has {} rows, model expects {}", a.len(), self.b.nrows())));
        }
        Ok(argmax(self.b.column_iter().map(|col| col.iter().zip(a).map(|(x, y)| x * y).sum())))
    }

    pub fn classify_batch(&self, a: &DMatrix<f64>) -> Result<Vec<usize>> {
        if a.nrows() != self.b.nrows() {
            return Err(Error::Dimension(format!("stack has {} rows, model expects {}", a.nrows(), self.b.nrows())));
        }
        let scores = a.tr_mul(&self.b);
        Ok(scores.row_iter().map(|r| argmax(r.iter().copied())).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Contribution {
    pub tag: ComponentTag,
    pub norm: f64,
    pub proportion: f64,
    /// Norm below `OFF_THRESHOLD` times the largest norm.
    pub off: bool,
}

/// Share of the weight norm carried by each component.
pub fn component_contributions(m: &SslmModel) -> Result<Vec<Contribution>> {
    check_structure(&m.b, &m.structure)?;
    let norms: Vec<f64> = m
        .structure
        .groups
        .iter()
        .map(|g| (0..m.b.ncols()).map(|i| block_sq(&m.b, &g.rows, i)).sum::<f64>().sqrt())
        .collect();
    let total: f64 = norms.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Data("classifier weights are all zero".into()));
    }
    let max = norms.iter().copied().fold(0.0, f64::max);
    Ok(m.structure
        .groups
        .iter()
        .zip(&norms)
        .map(|(g, &n)| Contribution { tag: g.tag.clone(), norm: n, proportion: n / total, off: n < OFF_THRESHOLD * max })
        .collect())
}

impl Persist for SslmModel {
    const KIND: &'static str = "sslm";

    fn to_envelope(&self) -> Envelope {
        let mut env = Envelope::new(Self::KIND);
        env.real("gamma_e", self.gammas.e)
            .real("gamma_l", self.gammas.l)
            .real("gamma_w", self.gammas.w)
            .field("exact_norms", self.exact_norms);
        self.structure.to_envelope(&mut env, "");
        env.matrix("B", &self.b);
        env
    }

    fn from_envelope(env: &Envelope) -> Result<Self> {
        let m = SslmModel {
            b: env.get_matrix("B")?.clone(),
            structure: GroupStructure::from_envelope(env, "")?,
            gammas: Gammas { e: env.get_parsed("gamma_e")?, l: env.get_parsed("gamma_l")?, w: env.get_parsed("gamma_w")? },
            exact_norms: env.get_parsed("exact_norms")?,
        };
        check_structure(&m.b, &m.structure)?;
        if m.b.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("classifier weights contain non-finite values".into()));
        }
        Ok(m)
    }
}

// ---------------------------------------------------------------------------
// Cross-validation

pub const DEFAULT_GRID: [f64; 6] = [0.0, 1e-3, 1e-2, 1e-1, 1.0, 10.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchMode {
    /// Every combination of the three value lists.
    Full,
    /// Sweep one knob at a time until no knob changes.
    Coordinate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvGrid {
    pub e: Vec<f64>,
    pub l: Vec<f64>,
    pub w: Vec<f64>,
    pub mode: SearchMode,
}

impl Default for CvGrid {
    fn default() -> Self {
        CvGrid { e: DEFAULT_GRID.to_vec(), l: DEFAULT_GRID.to_vec(), w: DEFAULT_GRID.to_vec(), mode: SearchMode::Full }
    }
}

impl CvGrid {
    /// Grid points in evaluation order: `w` varies fastest, then `l`, then `e`.
    pub fn points(&self) -> Vec<Gammas> {
        let mut out = Vec::with_capacity(self.e.len() * self.l.len() * self.w.len());
        for &e in &self.e {
            for &l in &self.l {
                for &w in &self.w {
                    out.push(Gammas { e, l, w });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub best: Gammas,
    pub best_accuracy: f64,
    /// Every evaluated point with its leave-one-out accuracy, in evaluation order.
    pub evaluated: Vec<(Gammas, f64)>,
}

/// Leave-one-out accuracy of one hyperparameter setting.
pub fn loo_accuracy(a: &DMatrix<f64>, labels: &LabelVector, structure: &GroupStructure, opts: &SslmOptions) -> Result<f64> {
    let n = a.ncols();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("cross-validation needs at least 2 samples, got {n}")));
    }
    let f = class_assignment(labels);
    let hits: Vec<Result<bool>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let keep: Vec<usize> = (0..n).filter(|&j| j != k).collect();
            let t = fit(&a.select_columns(&keep), &f.select_columns(&keep), structure, opts)?;
            let col: Vec<f64> = a.column(k).iter().copied().collect();
            Ok(t.model.classify(&col)? == labels.labels[k])
        })
        .collect();
    let mut correct = 0;
    for h in hits {
        correct += h? as usize;
    }
    Ok(correct as f64 / n as f64)
}

/// True if `cand` beats `cur`: higher accuracy, then larger total
/// regularization. Equal candidates keep the earlier one.
fn better(cand: (Gammas, f64), cur: (Gammas, f64)) -> bool {
    cand.1 > cur.1 || (cand.1 == cur.1 && cand.0.total() > cur.0.total())
}

pub fn cv_select_gammas(
    a: &DMatrix<f64>,
    labels: &LabelVector,
    structure: &GroupStructure,
    grid: &CvGrid,
    base: &SslmOptions,
) -> Result<CvResult> {
    if grid.e.is_empty() || grid.l.is_empty() || grid.w.is_empty() {
        return Err(Error::InvalidArgument("cross-validation grid is empty".into()));
    }
    if labels.len() != a.ncols() {
        return Err(Error::Dimension(format!("{} labels for {} samples", labels.len(), a.ncols())));
    }
    for g in grid.points() {
        g.validate()?;
    }
    let eval = |g: Gammas| loo_accuracy(a, labels, structure, &SslmOptions { gammas: g, ..*base });
    let mut evaluated: Vec<(Gammas, f64)> = Vec::new();
    match grid.mode {
        SearchMode::Full => {
            for g in grid.points() {
                evaluated.push((g, eval(g)?));
            }
        }
        SearchMode::Coordinate => {
            let mut cur = Gammas { e: grid.e[0], l: grid.l[0], w: grid.w[0] };
            let mut cur_acc = eval(cur)?;
            evaluated.push((cur, cur_acc));
            loop {
                let start = cur;
                for knob in 0..3 {
                    let values = [&grid.e, &grid.l, &grid.w][knob];
                    for &v in values {
                        let mut g = cur;
                        *[&mut g.e, &mut g.l, &mut g.w][knob] = v;
                        let acc = match evaluated.iter().find(|(p, _)| *p == g) {
                            Some(&(_, acc)) => acc,
                            None => {
                                let acc = eval(g)?;
                                evaluated.push((g, acc));
                                acc
                            }
                        };
                        if better((g, acc), (cur, cur_acc)) {
                            cur = g;
                            cur_acc = acc;
                        }
                    }
                }
                if cur == start {
                    break;
                }
            }
        }
    }
    let mut best = evaluated[0];
    for &cand in &evaluated[1..] {
        if better(cand, best) {
            best = cand;
        }
    }
    Ok(CvResult { best: best.0, best_accuracy: best.1, evaluated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stack::Group;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn structure(sizes: &[(usize, usize)]) -> GroupStructure {
        let mut start = 0;
        let groups = sizes
            .iter()
            .enumerate()
            .map(|(i, &(len, lg))| {
                let g = Group { tag: ComponentTag::Named(format!("g{i}")), layer_group: lg, rows: start..start + len };
                start += len;
                g
            })
            .collect();
        GroupStructure { groups, total_rows: start }
    }

    fn random(p: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(p, n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn group_norm_hand_values() {
        let s = structure(&[(2, 0), (2, 1)]);
        let b = DMatrix::from_column_slice(4, 1, &[3.0, 4.0, 0.0, 0.0]);
        assert_eq!(group_norm_ge(&b, &s).unwrap(), 5.0);
        assert_eq!(group_norm_ge(&(b.clone() * 2.0), &s).unwrap(), 10.0);
        assert_eq!(group_norm_ge(&DMatrix::zeros(4, 1), &s).unwrap(), 0.0);
        let paired = structure(&[(1, 0), (1, 0)]);
        let b2 = DMatrix::from_column_slice(2, 1, &[3.0, 4.0]);
        assert_eq!(group_norm_gl(&b2, &paired).unwrap(), 5.0);
        assert_eq!(group_norm_ge(&b2, &paired).unwrap(), 7.0);
        assert!(group_norm_ge(&b2, &s).is_err());
    }

    #[test]
    fn gl_never_exceeds_ge() {
        let s = structure(&[(2, 0), (3, 0), (1, 1), (2, 1), (2, 2)]);
        for seed in 0..20 {
            let b = random(10, 3, seed);
            assert!(group_norm_gl(&b, &s).unwrap() <= group_norm_ge(&b, &s).unwrap() + 1e-12);
        }
    }

    #[test]
    fn gradient_matches_differences() {
        let s = structure(&[(2, 0), (2, 0), (3, 1)]);
        let a = random(7, 6, 1);
        let labels = LabelVector::new(vec![0, 1, 2, 0, 1, 2], 3).unwrap();
        let f = class_assignment(&labels);
        for exact in [false, true] {
            let obj = SslmObjective::new(&a, &f, &s, Gammas { e: 0.3, l: 0.2, w: 0.1 }, exact).unwrap();
            let x: Vec<f64> = random(7, 3, 2).as_slice().to_vec();
            let chk = optim::grad_check(&obj, &x, 1e-6, 21).unwrap();
            assert!(chk.max_relative_error < 1e-5, "{chk:?}");
        }
    }

    #[test]
    fn ridge_oracle_from_zero_start() {
        let s = structure(&[(3, 0), (2, 1)]);
        let a = random(5, 30, 3);
        let labels = LabelVector::new((0..30).map(|j| j % 3).collect(), 3).unwrap();
        let opts = SslmOptions { gammas: Gammas { e: 0.0, l: 0.0, w: 0.5 }, warm_start: false, ..SslmOptions::default() };
        let t = train_sslm(&a, &labels, &s, &opts).unwrap();
        // normal equations solved independently by LU
        let f = class_assignment(&labels);
        let lhs = &a * a.transpose() + DMatrix::identity(5, 5) * 0.5;
        let oracle = lhs.lu().solve(&(&a * f.transpose())).unwrap();
        assert!((&t.model.b - &oracle).norm() / oracle.norm() < 1e-4);
        assert!(t.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn identity_fit_and_ties() {
        let a = DMatrix::identity(3, 3);
        let labels = LabelVector::new(vec![0, 1, 2], 3).unwrap();
        let opts = SslmOptions { gammas: Gammas { e: 0.0, l: 0.0, w: 1e-9 }, ..SslmOptions::default() };
        let m = train_sslm(&a, &labels, &GroupStructure::single(3, ComponentTag::Named("A".into())), &opts).unwrap().model;
        assert_eq!(m.classify(&[0.0, 1.0, 0.0]).unwrap(), 1);
        let tie = SslmModel { b: DMatrix::from_element(2, 3, 1.0), ..m.clone() };
        let tie = SslmModel { structure: GroupStructure::single(2, ComponentTag::Yr), ..tie };
        assert_eq!(tie.classify(&[1.0, 2.0]).unwrap(), 0);
        let batch = random(3, 9, 4);
        let per: Vec<usize> = (0..9).map(|j| m.classify(batch.column(j).as_slice()).unwrap()).collect();
        assert_eq!(m.classify_batch(&batch).unwrap(), per);
        let scaled = SslmModel { b: &m.b * 3.5, ..m.clone() };
        assert_eq!(scaled.classify_batch(&batch).unwrap(), per);
        assert!(m.classify(&[1.0]).is_err());
    }

    #[test]
    fn separable_training_accuracy() {
        let n = 40;
        let mut a = random(6, n, 5) * 0.1;
        let labels: Vec<usize> = (0..n).map(|j| j % 4).collect();
        for (j, &c) in labels.iter().enumerate() {
            a[(c, j)] += 1.0;
        }
        let labels = LabelVector::new(labels, 4).unwrap();
        let s = structure(&[(4, 0), (2, 1)]);
        let m = train_sslm(&a, &labels, &s, &SslmOptions { gammas: Gammas { e: 1e-3, l: 1e-3, w: 1e-3 }, ..Default::default() })
            .unwrap()
            .model;
        assert_eq!(m.classify_batch(&a).unwrap(), labels.labels);
    }

    #[test]
    fn ge_ladder_is_monotone() {
        let s = structure(&[(2, 0), (2, 1), (2, 2)]);
        let a = random(6, 24, 6);
        let labels = LabelVector::new((0..24).map(|j| j % 2).collect(), 2).unwrap();
        let mut prev = f64::INFINITY;
        for ge in [0.0, 0.1, 1.0, 10.0] {
            let opts = SslmOptions { gammas: Gammas { e: ge, l: 0.0, w: 0.01 }, ..Default::default() };
            let b = train_sslm(&a, &labels, &s, &opts).unwrap().model.b;
            let v = group_norm_ge(&b, &s).unwrap();
            assert!(v <= prev + 1e-9, "{v} > {prev}");
            prev = v;
        }
    }

    #[test]
    fn contributions_and_errors() {
        let s = structure(&[(2, 0), (1, 1), (1, 1)]);
        let b = DMatrix::from_row_slice(4, 2, &[3.0, 0.0, 0.0, 4.0, 0.0, 0.0, 1.0, 1.0]);
        let m = SslmModel { b, structure: s.clone(), gammas: Gammas::default(), exact_norms: false };
        let c = component_contributions(&m).unwrap();
        assert!((c.iter().map(|x| x.proportion).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(c[1].proportion, 0.0);
        assert!(c[1].off);
        let zero = SslmModel { b: DMatrix::zeros(4, 2), ..m.clone() };
        assert!(component_contributions(&zero).is_err());
        let env = Envelope::parse(&m.to_envelope().render(&[]), std::path::Path::new("m")).unwrap();
        assert_eq!(SslmModel::from_envelope(&env).unwrap(), m);
    }

    #[test]
    fn empty_class_rejected() {
        let labels = LabelVector::new(vec![0, 0, 2], 3).unwrap();
        let a = random(2, 3, 7);
        assert!(train_sslm(&a, &labels, &GroupStructure::single(2, ComponentTag::Yr), &SslmOptions::default()).is_err());
    }

    #[test]
    fn cv_tie_rules() {
        let a = random(3, 8, 8);
        let labels = LabelVector::new((0..8).map(|j| j % 2).collect(), 2).unwrap();
        let s = GroupStructure::single(3, ComponentTag::Yr);
        let one = CvGrid { e: vec![0.1], l: vec![0.0], w: vec![0.01], mode: SearchMode::Full };
        let r = cv_select_gammas(&a, &labels, &s, &one, &SslmOptions::default()).unwrap();
        assert_eq!(r.best, Gammas { e: 0.1, l: 0.0, w: 0.01 });
        assert!(better((Gammas { e: 1.0, l: 0.0, w: 0.0 }, 0.5), (Gammas { e: 0.0, l: 0.0, w: 0.0 }, 0.5)));
        assert!(!better((Gammas { e: 0.0, l: 0.0, w: 0.0 }, 0.5), (Gammas { e: 0.0, l: 0.0, w: 0.0 }, 0.5)));
        let coord = CvGrid { e: vec![0.0, 0.1], l: vec![0.0], w: vec![0.01, 0.1], mode: SearchMode::Coordinate };
        let a1 = cv_select_gammas(&a, &labels, &s, &coord, &SslmOptions::default()).unwrap();
        let a2 = cv_select_gammas(&a, &labels, &s, &coord, &SslmOptions::default()).unwrap();
        assert_eq!(a1, a2);
        let tiny = LabelVector::new(vec![0], 2).unwrap();
        assert!(cv_select_gammas(&a.columns(0, 1).into_owned(), &tiny, &s, &one, &SslmOptions::default()).is_err());
    }
}
