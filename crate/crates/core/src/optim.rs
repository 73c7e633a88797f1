//! Limited-memory BFGS with a strong-Wolfe line search, and a central
//! difference gradient checker.
//!
//! Every training routine in the crate goes through [`minimize`]. Objectives
//! must be continuously differentiable; non-smooth terms are smoothed by the
//! callers.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// A differentiable scalar function. `evaluate` writes the gradient into
/// `grad` (same length as `x`) and returns the value.
pub trait Objective {
    fn evaluate(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

impl<F> Objective for F
where
    F: Fn(&[f64], &mut [f64]) -> f64,
{
    fn evaluate(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self(x, grad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinimizeOptions {
    pub max_iterations: usize,
    /// Number of stored curvature pairs.
    pub memory: usize,
    /// Stop once the max-abs gradient entry falls to this value.
    pub gradient_tolerance: f64,
    /// Stop once an accepted step changes the value by at most this much,
    /// relative to `max(|f|, 1)`.
    pub value_tolerance: f64,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    /// Function evaluations allowed per line search.
    pub max_line_search: usize,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        MinimizeOptions {
            max_iterations: 200,
            memory: 10,
            gradient_tolerance: 1e-6,
            value_tolerance: 1e-12,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 40,
        }
    }
}

impl MinimizeOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "line search constants must satisfy 0 < c1 < c2 < 1, got c1={} c2={}",
                self.c1, self.c2
            )));
        }
        if self.memory == 0 {
            return Err(Error::InvalidArgument("L-BFGS memory must be at least 1".into()));
        }
        if self.max_line_search == 0 {
            return Err(Error::InvalidArgument("max_line_search must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Converged,
    MaxIterations,
    LineSearchFailed,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Converged => "converged",
            Status::MaxIterations => "max-iter",
            Status::LineSearchFailed => "line-search-failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub status: Status,
    /// Value at `x0` followed by the value after every accepted step.
    pub trace: Vec<f64>,
    pub evaluations: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Minimizer of the cubic interpolating `(x1, f1, g1)` and `(x2, f2, g2)`.
fn cubic_minimizer(x1: f64, f1: f64, g1: f64, x2: f64, f2: f64, g2: f64) -> Option<f64> {
    let d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    let disc = d1 * d1 - g1 * g2;
    if !(disc >= 0.0) {
        return None;
    }
    let d2 = (x2 - x1).signum() * disc.sqrt();
    let t = x2 - (x2 - x1) * (g2 + d2 - d1) / (g2 - g1 + 2.0 * d2);
    t.is_finite().then_some(t)
}

struct Probe {
    alpha: f64,
    value: f64,
    slope: f64,
    grad: Vec<f64>,
}

enum Search {
    Accepted(Probe),
    /// No strong-Wolfe point; carries the best sufficient-decrease point, if any.
    Failed(Option<Probe>),
}

struct LineSearch<'a, F: Objective + ?Sized> {
    f: &'a F,
    x: &'a [f64],
    dir: &'a [f64],
    f0: f64,
    slope0: f64,
    opts: &'a MinimizeOptions,
    evals: usize,
    best: Option<Probe>,
    trial: Vec<f64>,
}

impl<F: Objective + ?Sized> LineSearch<'_, F> {
    fn probe(&mut self, alpha: f64) -> Probe {
        for (t, (xi, di)) in self.trial.iter_mut().zip(self.x.iter().zip(self.dir)) {
            *t = xi + alpha * di;
        }
        let mut grad = vec![0.0; self.x.len()];
        let value = self.f.evaluate(&self.trial, &mut grad);
        self.evals += 1;
        let slope = dot(&grad, self.dir);
        let p = Probe { alpha, value, slope, grad };
        let ok = p.value.is_finite() && p.slope.is_finite() && all_finite(&p.grad);
        if ok && self.armijo(&p) && self.best.as_ref().is_none_or(|b| p.value < b.value) {
            self.best = Some(Probe { grad: p.grad.clone(), ..p });
        }
        p
    }

    fn armijo(&self, p: &Probe) -> bool {
        p.value <= self.f0 + self.opts.c1 * p.alpha * self.slope0
    }

    fn curvature(&self, p: &Probe) -> bool {
        p.slope.abs() <= -self.opts.c2 * self.slope0
    }

    fn finite(p: &Probe) -> bool {
        p.value.is_finite() && p.slope.is_finite() && all_finite(&p.grad)
    }

    fn run(mut self, alpha0: f64) -> (Search, usize) {
        let mut prev = Probe { alpha: 0.0, value: self.f0, slope: self.slope0, grad: Vec::new() };
        let mut alpha = alpha0;
        let mut first = true;
        while self.evals < self.opts.max_line_search {
            let p = self.probe(alpha);
            if !Self::finite(&p) {
                // overshoot into a non-finite region: pull back towards the last good step
                alpha = prev.alpha + 0.1 * (alpha - prev.alpha);
                continue;
            }
            if !self.armijo(&p) || (!first && p.value >= prev.value) {
                return self.zoom(prev, p);
            }
            if self.curvature(&p) {
                let evals = self.evals;
                return (Search::Accepted(p), evals);
            }
            if p.slope >= 0.0 {
                return self.zoom(p, prev);
            }
            let lo = p.alpha + 0.01 * (p.alpha - prev.alpha);
            let hi = 10.0 * p.alpha;
            let next = cubic_minimizer(prev.alpha, prev.value, prev.slope, p.alpha, p.value, p.slope)
                .filter(|t| *t > lo && *t < hi)
                .unwrap_or(hi.min(2.0 * p.alpha).max(lo));
            prev = p;
            alpha = next;
            first = false;
        }
        let evals = self.evals;
        (Search::Failed(self.best), evals)
    }

    fn zoom(mut self, mut lo: Probe, mut hi: Probe) -> (Search, usize) {
        while self.evals < self.opts.max_line_search {
            let (a, b) = (lo.alpha.min(hi.alpha), lo.alpha.max(hi.alpha));
            let width = b - a;
            if !(width > f64::EPSILON * b.max(1e-300)) {
                break;
            }
            let guard = 0.1 * width;
            let alpha = if hi.value.is_finite() && hi.slope.is_finite() {
                cubic_minimizer(lo.alpha, lo.value, lo.slope, hi.alpha, hi.value, hi.slope)
            } else {
                None
            }
            .filter(|t| *t > a + guard && *t < b - guard)
            .unwrap_or(0.5 * (a + b));
            let p = self.probe(alpha);
            if !Self::finite(&p) || !self.armijo(&p) || p.value >= lo.value {
                hi = p;
            } else {
                if self.curvature(&p) {
                    let evals = self.evals;
                    return (Search::Accepted(p), evals);
                }
                if p.slope * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = p;
            }
        }
        let evals = self.evals;
        (Search::Failed(self.best), evals)
    }
}

/// Two-loop recursion: returns `-H g` for the implicit inverse Hessian.
fn two_loop(g: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Minimizes `f` from `x0`. The returned point never has a larger value than
/// `x0`, and `trace` is non-increasing.
pub fn minimize<F: Objective + ?Sized>(f: &F, x0: &[f64], opts: &MinimizeOptions) -> Result<Minimum> {
    opts.validate()?;
    if !all_finite(x0) {
        return Err(Error::Numerical("initial point contains non-finite values".into()));
    }
    let m = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; m];
    let mut fx = f.evaluate(&x, &mut g);
    let mut evaluations = 1;
    if !fx.is_finite() || !all_finite(&g) {
        return Err(Error::Numerical(format!("objective is not finite at the initial point (value {fx})")));
    }
    let mut trace = vec![fx];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut iterations = 0;
    let mut status = Status::MaxIterations;
    if max_abs(&g) <= opts.gradient_tolerance {
        status = Status::Converged;
    }
    while status == Status::MaxIterations && iterations < opts.max_iterations {
        let mut dir = two_loop(&g, &pairs);
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) || !all_finite(&dir) {
            pairs.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let alpha0 = if pairs.is_empty() {
            (1.0 / g.iter().map(|v| v.abs()).sum::<f64>()).min(1.0)
        } else {
            1.0
        };
        let search = LineSearch {
            f,
            x: &x,
            dir: &dir,
            f0: fx,
            slope0: slope,
            opts,
            evals: 0,
            best: None,
            trial: vec![0.0; m],
        };
        let (outcome, evals) = search.run(alpha0);
        evaluations += evals;
        let (p, failed) = match outcome {
            Search::Accepted(p) => (p, false),
            Search::Failed(Some(p)) if p.value < fx => (p, true),
            Search::Failed(_) => {
                status = Status::LineSearchFailed;
                break;
            }
        };
        let s: Vec<f64> = dir.iter().map(|d| p.alpha * d).collect();
        let y: Vec<f64> = p.grad.iter().zip(&g).map(|(a, b)| a - b).collect();
        x.iter_mut().zip(&s).for_each(|(xi, si)| *xi += si);
        let prev = fx;
        fx = p.value;
        g = p.grad;
        trace.push(fx);
        iterations += 1;
        if failed {
            status = Status::LineSearchFailed;
            break;
        }
        let sy = dot(&s, &y);
        if sy > 1e-10 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if pairs.len() == opts.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        if max_abs(&g) <= opts.gradient_tolerance
            || (prev - fx).abs() <= opts.value_tolerance * prev.abs().max(fx.abs()).max(1.0)
        {
            status = Status::Converged;
        }
    }
    Ok(Minimum { x, value: fx, iterations, status, trace, evaluations })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// `(coordinate, analytic, numeric, relative error)` for every probe.
    pub probes: Vec<(usize, f64, f64, f64)>,
    pub max_relative_error: f64,
}

/// Compares the analytic gradient with central differences on `probes`
/// evenly spaced coordinates.
pub fn grad_check<F: Objective + ?Sized>(f: &F, x: &[f64], h: f64, probes: usize) -> Result<GradCheck> {
    let m = x.len();
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    if probes == 0 || probes > m {
        return Err(Error::InvalidArgument(format!("probes must be in 1..={m}, got {probes}")));
    }
    let mut grad = vec![0.0; m];
    let f0 = f.evaluate(x, &mut grad);
    if !f0.is_finite() || !all_finite(&grad) {
        return Err(Error::Numerical("objective is not finite at the check point".into()));
    }
    let mut scratch = vec![0.0; m];
    let mut xp = x.to_vec();
    let mut out = Vec::with_capacity(probes);
    let mut worst: f64 = 0.0;
    for k in 0..probes {
        let i = k * m / probes;
        xp[i] = x[i] + h;
        let fp = f.evaluate(&xp, &mut scratch);
        xp[i] = x[i] - h;
        let fm = f.evaluate(&xp, &mut scratch);
        xp[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numerical(format!("objective is not finite around coordinate {i}")));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let analytic = grad[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max(rel);
        out.push((i, analytic, numeric, rel));
    }
    Ok(GradCheck { probes: out, max_relative_error: worst })
}
