//! Box-constrained augmented-Lagrangian solver for smooth programs
//!
//! ```text
//! min f(z)  s.t.  g(z) ≥ 0,  lo ≤ z ≤ hi
//! ```
//!
//! Outer loop: Powell–Hestenes–Rockafellar multipliers with penalty growth.
//! Inner loop: projected L-BFGS with backtracking Armijo search.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

/// A smooth program. Residuals must already be scaled so that a unit change
/// is meaningful against `feas_tol`.
pub trait NlpProblem {
    fn dim(&self) -> usize;
    fn n_ineq(&self) -> usize;
    fn lower(&self) -> Vec<f64>;
    fn upper(&self) -> Vec<f64>;
    /// Objective value; residuals `g(z)` (feasible when `≥ 0`) go to `g`.
    fn eval(&mut self, z: &[f64], g: &mut [f64]) -> f64;
    /// `∇f + Σ w_i ∇g_i` at the point passed to the most recent `eval`.
    fn grad(&mut self, w: &[f64], out: &mut [f64]);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NlpOptions {
    pub feas_tol: f64,
    pub opt_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub rho0: f64,
    pub rho_growth: f64,
    pub rho_max: f64,
    pub memory: usize,
}

impl Default for NlpOptions {
    fn default() -> Self {
        Self {
            feas_tol: 1e-6,
            opt_tol: 1e-6,
            max_outer: 30,
            max_inner: 400,
            rho0: 10.0,
            rho_growth: 5.0,
            rho_max: 1e8,
            memory: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NlpStatus {
    Converged,
    MaxIter,
    InfeasibleDeclared,
}

impl NlpStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            NlpStatus::Converged => "converged",
            NlpStatus::MaxIter => "max_iter",
            NlpStatus::InfeasibleDeclared => "infeasible_declared",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlpResult {
    pub z: Vec<f64>,
    pub obj: f64,
    pub max_violation: f64,
    pub iterations: usize,
    pub outer: usize,
    pub status: NlpStatus,
    pub multipliers: Vec<f64>,
    /// Violation of the reported iterate after each outer iteration.
    pub violation_history: Vec<f64>,
}

fn project(z: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, l), h) in z.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(*l, *h);
    }
}

fn violation(g: &[f64]) -> f64 {
    g.iter().fold(0.0, |m, v| m.max(-v))
}

/// `‖P(z − ∇) − z‖∞`.
fn projected_grad_norm(z: &[f64], grad: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    z.iter()
        .zip(grad)
        .zip(lo.iter().zip(hi))
        .map(|((z, g), (l, h))| ((z - g).clamp(*l, *h) - z).abs())
        .fold(0.0, f64::max)
}

struct Lagrangian<'a, P: NlpProblem + ?Sized> {
    p: &'a mut P,
    lam: &'a [f64],
    rho: f64,
    g: Vec<f64>,
    w: Vec<f64>,
}

impl<P: NlpProblem + ?Sized> Lagrangian<'_, P> {
    /// Value of the PHR augmented Lagrangian; leaves `g` and weights at `z`.
    fn value(&mut self, z: &[f64]) -> f64 {
        let f = self.p.eval(z, &mut self.g);
        let mut v = f;
        for ((g, l), w) in self.g.iter().zip(self.lam).zip(self.w.iter_mut()) {
            let t = (l - self.rho * g).max(0.0);
            v += (t * t - l * l) / (2.0 * self.rho);
            *w = -t;
        }
        v
    }

    fn grad(&mut self, out: &mut [f64]) {
        self.p.grad(&self.w, out);
    }
}

enum InnerExit {
    Converged,
    Stalled,
    MaxIter,
}

/// Projected L-BFGS on the augmented Lagrangian from `z` (modified in place).
fn minimize_inner<P: NlpProblem + ?Sized>(
    al: &mut Lagrangian<'_, P>,
    z: &mut Vec<f64>,
    lo: &[f64],
    hi: &[f64],
    opts: &NlpOptions,
    tol: f64,
    iters: &mut usize,
) -> InnerExit {
    let n = z.len();
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut f = al.value(z);
    let mut grad = vec![0.0; n];
    al.grad(&mut grad);
    let mut d = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut grad_new = vec![0.0; n];
    let mut resets = 0;
    for _ in 0..opts.max_inner {
        if projected_grad_norm(z, &grad, lo, hi) <= tol {
            return InnerExit::Converged;
        }
        *iters += 1;
        // Variables held at a bound by the gradient are frozen this iteration.
        let free: Vec<bool> = (0..n)
            .map(|i| !((z[i] <= lo[i] && grad[i] > 0.0) || (z[i] >= hi[i] && grad[i] < 0.0)))
            .collect();
        for i in 0..n {
            d[i] = if free[i] { -grad[i] } else { 0.0 };
        }
        // Two-loop recursion restricted to the free set.
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, y, rho) in mem.iter().rev() {
            let a = rho * (0..n).filter(|&i| free[i]).map(|i| s[i] * d[i]).sum::<f64>();
            for i in 0..n {
                if free[i] {
                    d[i] -= a * y[i];
                }
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = mem.back() {
            let sy: f64 = (0..n).filter(|&i| free[i]).map(|i| s[i] * y[i]).sum();
            let yy: f64 = (0..n).filter(|&i| free[i]).map(|i| y[i] * y[i]).sum();
            if sy > 0.0 && yy > 0.0 {
                d.iter_mut().for_each(|v| *v *= sy / yy);
            }
        }
        for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
            let b = rho * (0..n).filter(|&i| free[i]).map(|i| y[i] * d[i]).sum::<f64>();
            for i in 0..n {
                if free[i] {
                    d[i] += (a - b) * s[i];
                }
            }
        }
        let slope: f64 = d.iter().zip(&grad).map(|(a, b)| a * b).sum();
        if !(slope < 0.0) {
            mem.clear();
            for i in 0..n {
                d[i] = if free[i] { -grad[i] } else { 0.0 };
            }
        }
        if mem.is_empty() {
            // First step: scale so the largest move is at most one unit.
            let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if dmax > 1.0 {
                d.iter_mut().for_each(|v| *v /= dmax);
            }
        }
        // Backtracking along the projected path.
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            for i in 0..n {
                trial[i] = z[i] + t * d[i];
            }
            project(&mut trial, lo, hi);
            let decrease: f64 = trial.iter().zip(z.iter()).zip(&grad).map(|((a, b), g)| (a - b) * g).sum();
            let ft = al.value(&trial);
            if ft.is_finite() && ft <= f + 1e-4 * decrease.min(0.0) && decrease <= 0.0 {
                accepted = Some(ft);
                break;
            }
            t *= 0.5;
        }
        let Some(ft) = accepted else {
            // Restore the problem's cached point before giving up or retrying.
            f = al.value(z);
            al.grad(&mut grad);
            if mem.is_empty() || resets >= 2 {
                return InnerExit::Stalled;
            }
            resets += 1;
            mem.clear();
            continue;
        };
        al.grad(&mut grad_new);
        let s: Vec<f64> = trial.iter().zip(z.iter()).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = grad_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        let yy: f64 = y.iter().map(|v| v * v).sum();
        let small_step = ss.sqrt() <= 1e-15 * (1.0 + z.iter().map(|v| v * v).sum::<f64>().sqrt());
        if sy > 1e-12 * (ss * yy).sqrt() {
            if mem.len() == opts.memory {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        let df = f - ft;
        z.copy_from_slice(&trial);
        grad.copy_from_slice(&grad_new);
        f = ft;
        if small_step || df.abs() <= 1e-15 * (1.0 + f.abs()) {
            if projected_grad_norm(z, &grad, lo, hi) <= tol {
                return InnerExit::Converged;
            }
            if resets >= 2 {
                return InnerExit::Stalled;
            }
            resets += 1;
        }
    }
    InnerExit::MaxIter
}

/// Solve from `z0` (projected into the box), optionally warm-starting the
/// multipliers.
pub fn solve<P: NlpProblem + ?Sized>(
    p: &mut P,
    z0: &[f64],
    lam0: Option<&[f64]>,
    opts: &NlpOptions,
) -> NlpResult {
    let (lo, hi) = (p.lower(), p.upper());
    let m = p.n_ineq();
    let mut z = z0.to_vec();
    project(&mut z, &lo, &hi);
    let mut lam = match lam0 {
        Some(l) if l.len() == m => l.iter().map(|v| v.max(0.0)).collect(),
        _ => vec![0.0; m],
    };
    let mut rho = opts.rho0;
    let mut iters = 0;
    let mut history = Vec::new();
    let mut best: Option<(Vec<f64>, f64, f64)> = None;
    let mut prev_viol = f64::INFINITY;
    let mut g = vec![0.0; m];
    let mut status = NlpStatus::MaxIter;
    let mut outer = 0;
    let tol = opts.opt_tol;

    while outer < opts.max_outer {
        outer += 1;
        let exit = {
            let mut al = Lagrangian {
                p: &mut *p,
                lam: &lam,
                rho,
                g: vec![0.0; m],
                w: vec![0.0; m],
            };
            minimize_inner(&mut al, &mut z, &lo, &hi, opts, tol, &mut iters)
        };
        let f = p.eval(&z, &mut g);
        let viol = violation(&g);
        history.push(viol);
        log::trace!("outer {outer}: rho {rho:.1e} viol {viol:.2e} obj {f:.6} iters {iters}");
        if viol <= opts.feas_tol && best.as_ref().is_none_or(|b| f < b.1) {
            best = Some((z.clone(), f, viol));
        }
        let stationary = matches!(exit, InnerExit::Converged | InnerExit::Stalled);
        // Multiplier change measures complementarity.
        let mut lam_change = 0.0f64;
        for (l, gi) in lam.iter_mut().zip(&g) {
            let next = (*l - rho * gi).max(0.0);
            lam_change = lam_change.max((next - *l).abs() / rho);
            *l = next;
        }
        if viol <= opts.feas_tol && stationary && lam_change <= opts.feas_tol.max(opts.opt_tol) {
            status = NlpStatus::Converged;
            break;
        }
        if viol > opts.feas_tol {
            if rho >= opts.rho_max && viol > 0.9 * prev_viol {
                status = NlpStatus::InfeasibleDeclared;
                break;
            }
            if viol > 0.25 * prev_viol || !prev_viol.is_finite() {
                rho = (rho * opts.rho_growth).min(opts.rho_max);
            }
        }
        prev_viol = viol;
    }

    let final_f = p.eval(&z, &mut g);
    let final_viol = violation(&g);
    let (z, obj, max_violation) = match (status, best) {
        (NlpStatus::Converged, _) => (z, final_f, final_viol),
        (_, Some(b)) if final_viol > opts.feas_tol || b.1 < final_f => b,
        _ => (z, final_f, final_viol),
    };
    NlpResult {
        z,
        obj,
        max_violation,
        iterations: iters,
        outer,
        status,
        multipliers: lam,
        violation_history: history,
    }
}

/// Receding-horizon warm start: drop the first input, append `u_terminal`.
pub fn shift_warm_start(prev_u: &[f64], u_terminal: &[f64]) -> Vec<f64> {
    let n_u = u_terminal.len();
    let mut out = Vec::with_capacity(prev_u.len());
    if prev_u.len() > n_u {
        out.extend_from_slice(&prev_u[n_u..]);
    }
    out.extend_from_slice(u_terminal);
    out
}

/// A program assembled from closures, mostly for tests and small oracles.
pub struct FnProblem<F, G>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
    G: FnMut(&[f64], &[f64], &mut [f64]),
{
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub m: usize,
    pub f: F,
    pub g: G,
    last: Vec<f64>,
}

impl<F, G> FnProblem<F, G>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
    G: FnMut(&[f64], &[f64], &mut [f64]),
{
    /// `f(z, g_out) -> value`; `g(z, w, grad_out)` writes `∇f + Σ w_i ∇g_i`.
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, m: usize, f: F, g: G) -> Self {
        let n = lo.len();
        Self { lo, hi, m, f, g, last: vec![0.0; n] }
    }
}

impl<F, G> NlpProblem for FnProblem<F, G>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
    G: FnMut(&[f64], &[f64], &mut [f64]),
{
    fn dim(&self) -> usize {
        self.lo.len()
    }
    fn n_ineq(&self) -> usize {
        self.m
    }
    fn lower(&self) -> Vec<f64> {
        self.lo.clone()
    }
    fn upper(&self) -> Vec<f64> {
        self.hi.clone()
    }
    fn eval(&mut self, z: &[f64], g: &mut [f64]) -> f64 {
        self.last.copy_from_slice(z);
        (self.f)(z, g)
    }
    fn grad(&mut self, w: &[f64], out: &mut [f64]) {
        (self.g)(&self.last, w, out)
    }
}
