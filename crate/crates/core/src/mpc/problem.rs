//! Single-shooting transcription of the exploration, pessimistic,
//! optimistic and certainty-equivalent (omniscient) problems.

use serde::Serialize;
use serde_json::json;

use super::cost::CostSpec;
use super::terminal::TerminalSet;
use crate::bayes::Learner;
use crate::confidence::{BoundsBuffer, BoundValue, ConfidenceSnapshot, OutputBox, StateBox};
use crate::dynamics::{GruModel, Rollout};
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::nlp::{self, NlpOptions, NlpProblem, NlpStatus};

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct MpcSettings {
    pub horizon: usize,
    pub eps: f64,
    pub alpha_nu: f64,
    /// Half-width of the optimistic parameter box in whitened coordinates,
    /// where the live confidence ellipsoid is the unit ball.
    pub theta_box: f64,
    pub nlp: NlpOptions,
    /// Options for the optimistic problem, whose inputs are never applied.
    pub optimistic_nlp: NlpOptions,
}

/// Constraint sets in model units.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct Sets {
    pub xbox: StateBox,
    pub ubox: StateBox,
    pub ybox: OutputBox,
}

/// Everything the learning problems read at one time step.
#[derive(Clone, Copy)]
pub struct MpcContext<'a> {
    pub model: &'a GruModel,
    pub learner: &'a Learner,
    pub bounds: &'a BoundsBuffer,
    pub sets: &'a Sets,
    pub cost: &'a CostSpec,
    pub terminal: &'a TerminalSet,
    pub settings: &'a MpcSettings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Exploration,
    Pessimistic,
    Optimistic,
    Omniscient,
}

impl ProblemKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProblemKind::Exploration => "exploration",
            ProblemKind::Pessimistic => "pessimistic",
            ProblemKind::Optimistic => "optimistic",
            ProblemKind::Omniscient => "omniscient",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MpcStatus {
    Converged,
    MaxIter,
    /// The solver failed but a supplied feasible candidate was returned.
    Fallback,
    /// The feasible set is empty (only reported for the optimistic problem).
    EmptySet,
}

impl MpcStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            MpcStatus::Converged => "converged",
            MpcStatus::MaxIter => "max_iter",
            MpcStatus::Fallback => "fallback",
            MpcStatus::EmptySet => "empty_set",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MpcSolution {
    pub kind: ProblemKind,
    pub u_seq: Vec<f64>,
    /// `(H + 1) * n_x`.
    pub x_pred: Vec<f64>,
    pub nu_seq: Vec<f64>,
    pub theta_opt: Vec<Vec<f64>>,
    pub cost: f64,
    pub status: MpcStatus,
    pub max_violation: f64,
    pub iterations: usize,
    #[serde(skip)]
    pub multipliers: Multipliers,
}

/// Constraint multipliers of a solve at absolute time `t`, reusable as a
/// warm start for the same problem kind at a later step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Multipliers {
    pub t: usize,
    pub values: Vec<f64>,
}

/// Per-step data cached by `eval` for the gradient pass.
#[derive(Debug, Clone, Default)]
struct StepCache {
    feature: Vec<f64>,
    /// `∂ℓ/∂y` of the stage (or terminal) cost.
    dl_dy: Vec<f64>,
    bounds: Vec<BoundValue>,
    /// Live posterior width per channel.
    width: Vec<f64>,
}

pub(crate) struct Shooting<'a> {
    kind: ProblemKind,
    model: &'a GruModel,
    cost: &'a CostSpec,
    bounds: Option<&'a BoundsBuffer>,
    live: Option<ConfidenceSnapshot>,
    /// Output parameters used by the prediction when not a decision variable.
    theta_fixed: Vec<Vec<f64>>,
    /// Optimistic problem: `θ_c = θ̄_c + T_c η_c` with `T_c` lower triangular,
    /// row-major, scaled to the confidence ellipsoid.
    theta_map: Vec<Vec<f64>>,
    x0: Vec<f64>,
    t: usize,
    horizon: usize,
    n_x: usize,
    n_u: usize,
    n_y: usize,
    lip: Vec<f64>,
    eps: f64,
    alpha_nu: f64,
    xbox: StateBox,
    xrange: Vec<f64>,
    yboxes: Vec<(Vec<f64>, Vec<f64>)>,
    yrange: Vec<f64>,
    terminal: Option<StateBox>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    obj_scale: f64,
    m: usize,
    roll: Rollout,
    cache: Vec<StepCache>,
    last_z: Vec<f64>,
}

fn box_ranges(b: &StateBox) -> Vec<f64> {
    b.lo.iter().zip(&b.hi).map(|(l, h)| (h - l).max(1e-12)).collect()
}

impl<'a> Shooting<'a> {
    fn new(
        kind: ProblemKind,
        model: &'a GruModel,
        cost: &'a CostSpec,
        sets: &Sets,
        settings: &MpcSettings,
        x0: &[f64],
        t: usize,
    ) -> Self {
        let horizon = settings.horizon;
        let n_y = sets.ybox.y_min.len();
        let lip = cost.lipschitz(n_y);
        let yboxes = (0..=horizon).map(|h| sets.ybox.at(t + h)).collect();
        let yrange = sets
            .ybox
            .y_min
            .iter()
            .zip(&sets.ybox.y_max)
            .map(|(a, b)| (b - a).max(1e-12))
            .collect();
        let obj_scale = (horizon as f64 * lip.iter().sum::<f64>()).max(1e-12);
        Self {
            kind,
            model,
            cost,
            bounds: None,
            live: None,
            theta_fixed: Vec::new(),
            theta_map: Vec::new(),
            x0: x0.to_vec(),
            t,
            horizon,
            n_x: model.n_x,
            n_u: model.n_u,
            n_y,
            lip,
            eps: settings.eps,
            alpha_nu: settings.alpha_nu,
            xrange: box_ranges(&sets.xbox),
            xbox: sets.xbox.clone(),
            yboxes,
            yrange,
            terminal: None,
            lo: Vec::new(),
            hi: Vec::new(),
            obj_scale,
            m: 0,
            roll: Rollout::default(),
            cache: vec![StepCache::default(); horizon + 1],
            last_z: Vec::new(),
        }
    }

    fn input_bounds(&mut self, ubox: &StateBox) {
        for _ in 0..self.horizon {
            self.lo.extend_from_slice(&ubox.lo);
            self.hi.extend_from_slice(&ubox.hi);
        }
    }

    fn n_inputs(&self) -> usize {
        self.horizon * self.n_u
    }

    fn n_theta(&self) -> usize {
        self.n_x + 1
    }

    fn theta_offset(&self) -> usize {
        self.n_inputs()
    }

    fn nu_offset(&self) -> usize {
        self.n_inputs()
    }

    fn count_residuals(&self) -> usize {
        let (h, nx, ny) = (self.horizon, self.n_x, self.n_y);
        let path = (h - 1) * (2 * nx + 2 * ny);
        let term = if self.terminal.is_some() { 2 * nx } else { 0 };
        match self.kind {
            ProblemKind::Pessimistic => path + term,
            ProblemKind::Exploration => path + term + h,
            ProblemKind::Optimistic => path + term + (h + 1) * 2 * ny,
            ProblemKind::Omniscient => h * (2 * nx + 2 * ny),
        }
    }

    pub(crate) fn pessimistic(ctx: &MpcContext<'a>, x0: &[f64], t: usize) -> Self {
        Self::learning(ProblemKind::Pessimistic, ctx, x0, t)
    }

    pub(crate) fn exploration(ctx: &MpcContext<'a>, x0: &[f64], t: usize) -> Self {
        Self::learning(ProblemKind::Exploration, ctx, x0, t)
    }

    #[cfg(test)]
    pub(crate) fn optimistic(ctx: &MpcContext<'a>, x0: &[f64], t: usize) -> Option<Self> {
        Some(Self::learning(ProblemKind::Optimistic, ctx, x0, t)).filter(|p| !p.lo.is_empty())
    }

    fn learning(kind: ProblemKind, ctx: &MpcContext<'a>, x0: &[f64], t: usize) -> Self {
        let mut p = Self::new(kind, ctx.model, ctx.cost, ctx.sets, ctx.settings, x0, t);
        p.bounds = Some(ctx.bounds);
        let live = ConfidenceSnapshot::from_learner(ctx.learner);
        p.theta_fixed = live.channels.iter().map(|c| c.theta_bar.clone()).collect();
        p.live = Some(live);
        let eps = ctx.settings.eps;
        match kind {
            ProblemKind::Optimistic => {
                p.terminal = ctx.terminal.shrunk(ctx.terminal.margin.min(2.0 * eps));
                if let (Some(ubox), Some(_)) = (ctx.sets.ubox.shrink(2.0 * eps), &p.terminal) {
                    p.input_bounds(&ubox);
                    let live = p.live.as_ref().expect("live snapshot set above");
                    p.theta_map = live.channels.iter().map(|c| whitening(&live.shapes[c.shape], c.beta * c.sigma)).collect();
                    let n = p.n_theta() * p.n_y;
                    p.lo.extend(std::iter::repeat_n(-ctx.settings.theta_box, n));
                    p.hi.extend(std::iter::repeat_n(ctx.settings.theta_box, n));
                }
            }
            _ => {
                p.terminal = Some(ctx.terminal.as_box());
                p.input_bounds(&ctx.sets.ubox);
                if kind == ProblemKind::Exploration {
                    p.lo.extend(std::iter::repeat_n(0.0, p.horizon));
                    p.hi.extend(std::iter::repeat_n(1.0, p.horizon));
                }
            }
        }
        p.m = p.count_residuals();
        p
    }

    pub(crate) fn omniscient(
        model: &'a GruModel,
        theta_star: &[Vec<f64>],
        sets: &Sets,
        cost: &'a CostSpec,
        settings: &MpcSettings,
        x0: &[f64],
        t: usize,
    ) -> Self {
        let mut p = Self::new(ProblemKind::Omniscient, model, cost, sets, settings, x0, t);
        p.theta_fixed = theta_star.to_vec();
        p.input_bounds(&sets.ubox);
        p.m = p.count_residuals();
        p
    }

    fn theta(&self, z: &[f64], c: usize) -> Vec<f64> {
        if self.kind == ProblemKind::Optimistic {
            let n = self.n_theta();
            let off = self.theta_offset() + c * n;
            let mut th = self.theta_fixed[c].clone();
            let t = &self.theta_map[c];
            for i in 0..n {
                th[i] += (0..=i).map(|j| t[i * n + j] * z[off + j]).sum::<f64>();
            }
            th
        } else {
            self.theta_fixed[c].clone()
        }
    }

    fn bound_grads(&self, h: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
        let b = self.bounds.expect("bounds are set for learning problems");
        b.value_grads(&self.cache[h].bounds[c], c, &self.cache[h].feature)
    }

    /// Largest live width over channels and its channel.
    fn max_width(&self, h: usize) -> (f64, usize) {
        let w = &self.cache[h].width;
        let mut best = (w[0], 0);
        for (c, v) in w.iter().enumerate().skip(1) {
            if *v > best.0 {
                best = (*v, c);
            }
        }
        best
    }

    /// Unscaled objective at `z` (requires a preceding `eval`).
    fn objective(&self, z: &[f64]) -> f64 {
        let mut j = 0.0;
        let mut g = vec![0.0; self.n_y];
        for h in 0..=self.horizon {
            let y: Vec<f64> = (0..self.n_y).map(|c| dot(&self.theta(z, c), &self.cache[h].feature)).collect();
            if h < self.horizon {
                j += self.cost.stage(self.t + h, &y, &mut g);
                match self.kind {
                    ProblemKind::Pessimistic => {
                        j += self.lip.iter().zip(&self.cache[h].width).map(|(l, w)| l * w).sum::<f64>();
                    }
                    ProblemKind::Exploration => {
                        j += self.alpha_nu * self.eps * z[self.nu_offset() + h];
                    }
                    _ => {}
                }
            } else {
                j += self.cost.terminal(&y, &mut g);
            }
        }
        j
    }

    /// Move multipliers solved at `prev.t` to this problem's time: per-step
    /// blocks slide towards the start, vacated blocks start at zero.
    fn shift_multipliers(&self, prev: &Multipliers) -> Option<Vec<f64>> {
        if prev.values.len() != self.m || prev.t > self.t {
            return None;
        }
        let s = self.t - prev.t;
        let (hz, nx, ny) = (self.horizon, self.n_x, self.n_y);
        let old = &prev.values;
        let mut out = vec![0.0; self.m];
        let slide = |out: &mut [f64], start: usize, blocks: usize, width: usize| {
            for b in 0..blocks.saturating_sub(s) {
                let (dst, src) = (start + b * width, start + (b + s) * width);
                out[dst..dst + width].copy_from_slice(&old[src..src + width]);
            }
            start + blocks * width
        };
        let path_blocks = if self.kind == ProblemKind::Omniscient { hz } else { hz - 1 };
        let mut i = slide(&mut out, 0, path_blocks, 2 * nx + 2 * ny);
        if self.terminal.is_some() {
            out[i..i + 2 * nx].copy_from_slice(&old[i..i + 2 * nx]);
            i += 2 * nx;
        }
        match self.kind {
            ProblemKind::Exploration => {
                slide(&mut out, i, hz, 1);
            }
            ProblemKind::Optimistic => {
                slide(&mut out, i, hz + 1, 2 * ny);
            }
            _ => {}
        }
        Some(out)
    }

    fn box_residuals(x: &[f64], b: &StateBox, range: &[f64], g: &mut [f64], i: &mut usize) {
        for j in 0..x.len() {
            g[*i] = (x[j] - b.lo[j]) / range[j];
            g[*i + 1] = (b.hi[j] - x[j]) / range[j];
            *i += 2;
        }
    }
}

impl NlpProblem for Shooting<'_> {
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
        self.last_z.clear();
        self.last_z.extend_from_slice(z);
        let nu_in = self.n_inputs();
        self.roll.recompute(self.model, &self.x0, &z[..nu_in]);
        let (hz, ny) = (self.horizon, self.n_y);
        let thetas: Vec<Vec<f64>> = (0..ny).map(|c| self.theta(z, c)).collect();
        for h in 0..=hz {
            let feature = self.roll.feature(h);
            let y: Vec<f64> = thetas.iter().map(|th| dot(th, &feature)).collect();
            let mut dl = vec![0.0; ny];
            if h < hz {
                self.cost.stage(self.t + h, &y, &mut dl);
            } else {
                self.cost.terminal(&y, &mut dl);
            }
            let cache = &mut self.cache[h];
            cache.dl_dy = dl;
            cache.width = match &self.live {
                Some(live) => live.mean_width(&feature).into_iter().map(|(_, w)| w).collect(),
                None => Vec::new(),
            };
            match self.bounds {
                Some(b) if self.kind == ProblemKind::Optimistic || (h >= 1 && h < hz) => {
                    b.values_into(&feature, &mut cache.bounds)
                }
                _ => cache.bounds.clear(),
            }
            cache.feature = feature;
        }

        let mut i = 0;
        let path_end = if self.kind == ProblemKind::Omniscient { hz } else { hz - 1 };
        for h in 1..=path_end {
            let x = self.roll.state(h).to_vec();
            Self::box_residuals(&x, &self.xbox, &self.xrange, g, &mut i);
            let (lo, hi) = &self.yboxes[h];
            for c in 0..ny {
                let r = self.yrange[c];
                match self.kind {
                    ProblemKind::Omniscient => {
                        let y = dot(&thetas[c], &self.cache[h].feature);
                        g[i] = (y - lo[c]) / r;
                        g[i + 1] = (hi[c] - y) / r;
                    }
                    ProblemKind::Optimistic => {
                        let b = &self.cache[h].bounds[c];
                        g[i] = (hi[c] - 2.0 * self.eps - b.lb) / r;
                        g[i + 1] = (b.ub - lo[c] - 2.0 * self.eps) / r;
                    }
                    _ => {
                        let b = &self.cache[h].bounds[c];
                        g[i] = (b.lb - lo[c]) / r;
                        g[i + 1] = (hi[c] - b.ub) / r;
                    }
                }
                i += 2;
            }
        }
        if let Some(tb) = &self.terminal {
            let x = self.roll.state(hz).to_vec();
            let range = box_ranges(tb);
            Self::box_residuals(&x, tb, &range, g, &mut i);
        }
        match self.kind {
            ProblemKind::Exploration => {
                for h in 0..hz {
                    let (w, _) = self.max_width(h);
                    g[i] = (w - self.eps) / self.eps + z[self.nu_offset() + h];
                    i += 1;
                }
            }
            ProblemKind::Optimistic => {
                for h in 0..=hz {
                    for c in 0..ny {
                        let b = &self.cache[h].bounds[c];
                        let y = dot(&thetas[c], &self.cache[h].feature);
                        g[i] = (y - b.lb) / self.yrange[c];
                        g[i + 1] = (b.ub - y) / self.yrange[c];
                        i += 2;
                    }
                }
            }
            _ => {}
        }
        debug_assert_eq!(i, self.m);
        self.objective(z) / self.obj_scale
    }

    fn grad(&mut self, w: &[f64], out: &mut [f64]) {
        let z = std::mem::take(&mut self.last_z);
        let (hz, nx, ny, nth) = (self.horizon, self.n_x, self.n_y, self.n_theta());
        out.iter_mut().for_each(|v| *v = 0.0);
        // Gradient with respect to each augmented feature f_h.
        let mut gf = vec![vec![0.0; nth]; hz + 1];
        let thetas: Vec<Vec<f64>> = (0..ny).map(|c| self.theta(&z, c)).collect();
        let inv = 1.0 / self.obj_scale;
        let live = self.live.as_ref();

        for h in 0..=hz {
            let feature = &self.cache[h].feature;
            for c in 0..ny {
                let d = self.cache[h].dl_dy[c] * inv;
                if d != 0.0 {
                    for j in 0..nth {
                        gf[h][j] += d * thetas[c][j];
                    }
                    if self.kind == ProblemKind::Optimistic {
                        let off = self.theta_offset() + c * nth;
                        for j in 0..nth {
                            out[off + j] += d * feature[j];
                        }
                    }
                }
            }
            if self.kind == ProblemKind::Pessimistic && h < hz {
                let live = live.expect("learning problem has a live snapshot");
                for c in 0..ny {
                    let (_, gw) = live.grads(c, feature);
                    for j in 0..nth {
                        gf[h][j] += self.lip[c] * inv * gw[j];
                    }
                }
            }
            if self.kind == ProblemKind::Exploration && h < hz {
                out[self.nu_offset() + h] += self.alpha_nu * self.eps * inv;
            }
        }

        // Constraint contributions, same order as `eval`.
        let mut i = 0;
        let path_end = if self.kind == ProblemKind::Omniscient { hz } else { hz - 1 };
        for h in 1..=path_end {
            for j in 0..nx {
                gf[h][j] += (w[i] - w[i + 1]) / self.xrange[j];
                i += 2;
            }
            for c in 0..ny {
                let r = self.yrange[c];
                let (a, b) = (w[i] / r, w[i + 1] / r);
                match self.kind {
                    ProblemKind::Omniscient => {
                        for j in 0..nth {
                            gf[h][j] += (a - b) * thetas[c][j];
                        }
                    }
                    _ if a == 0.0 && b == 0.0 => {}
                    kind => {
                        let (glb, gub) = self.bound_grads(h, c);
                        let s = if kind == ProblemKind::Optimistic { -1.0 } else { 1.0 };
                        for j in 0..nth {
                            gf[h][j] += s * (a * glb[j] - b * gub[j]);
                        }
                    }
                }
                i += 2;
            }
        }
        if let Some(tb) = &self.terminal {
            let range = box_ranges(tb);
            for j in 0..nx {
                gf[hz][j] += (w[i] - w[i + 1]) / range[j];
                i += 2;
            }
        }
        match self.kind {
            ProblemKind::Exploration => {
                let live = live.expect("learning problem has a live snapshot");
                for h in 0..hz {
                    if w[i] != 0.0 {
                        let (_, c) = self.max_width(h);
                        let (_, gw) = live.grads(c, &self.cache[h].feature);
                        for j in 0..nth {
                            gf[h][j] += w[i] / self.eps * gw[j];
                        }
                        out[self.nu_offset() + h] += w[i];
                    }
                    i += 1;
                }
            }
            ProblemKind::Optimistic => {
                for h in 0..=hz {
                    for c in 0..ny {
                        let r = self.yrange[c];
                        let (a, b) = (w[i] / r, w[i + 1] / r);
                        if a != 0.0 || b != 0.0 {
                            let (glb, gub) = self.bound_grads(h, c);
                            let feature = &self.cache[h].feature;
                            let off = self.theta_offset() + c * nth;
                            for j in 0..nth {
                                gf[h][j] += a * (thetas[c][j] - glb[j]) + b * (gub[j] - thetas[c][j]);
                                out[off + j] += (a - b) * feature[j];
                            }
                        }
                        i += 2;
                    }
                }
            }
            _ => {}
        }

        let mut adj = vec![0.0; (hz + 1) * nx];
        for h in 1..=hz {
            adj[h * nx..(h + 1) * nx].copy_from_slice(&gf[h][..nx]);
        }
        let du = self.roll.gradient(self.model, &adj);
        out[..du.len()].iter_mut().zip(&du).for_each(|(o, d)| *o += d);
        if self.kind == ProblemKind::Optimistic {
            // Pull the θ-gradient back to η: ∂/∂η = Tᵀ ∂/∂θ.
            for c in 0..ny {
                let off = self.theta_offset() + c * nth;
                let g = out[off..off + nth].to_vec();
                let t = &self.theta_map[c];
                for j in 0..nth {
                    out[off + j] = (j..nth).map(|i| t[i * nth + j] * g[i]).sum();
                }
            }
        }
        self.last_z = z;
    }
}

/// Lower-triangular `T` with `T Tᵀ = s² Σ`, row-major; a scaled identity
/// when `Σ` is not numerically positive definite.
fn whitening(sigma: &[f64], s: f64) -> Vec<f64> {
    let n = (sigma.len() as f64).sqrt().round() as usize;
    let l = nalgebra::Cholesky::new(crate::linalg::to_dmatrix(sigma, n))
        .map(|c| crate::linalg::from_dmatrix(&c.l()))
        .unwrap_or_else(|| {
            let d = (0..n).fold(0.0f64, |m, i| m.max(sigma[i * n + i])).sqrt();
            let mut t = crate::linalg::identity(n);
            t.iter_mut().for_each(|v| *v *= d);
            t
        });
    let s = if s > 0.0 && s.is_finite() { s } else { 1.0 };
    l.into_iter().map(|v| v * s).collect()
}

/// `η = T⁻¹ (θ − θ̄)` by forward substitution.
fn to_whitened(t: &[f64], theta_bar: &[f64], theta: &[f64]) -> Vec<f64> {
    let n = theta.len();
    let mut eta = vec![0.0; n];
    for i in 0..n {
        let acc: f64 = (0..i).map(|j| t[i * n + j] * eta[j]).sum();
        let d = t[i * n + i];
        eta[i] = if d != 0.0 { (theta[i] - theta_bar[i] - acc) / d } else { 0.0 };
    }
    eta
}

/// Outcome of a solve with retries over warm starts and fallback candidates.
struct Attempt {
    z: Vec<f64>,
    obj: f64,
    violation: f64,
    status: MpcStatus,
    iterations: usize,
    multipliers: Vec<f64>,
}

fn violation_at(p: &mut Shooting<'_>, z: &[f64]) -> (f64, f64) {
    let mut g = vec![0.0; p.n_ineq()];
    let f = p.eval(z, &mut g);
    (f, g.iter().fold(0.0f64, |m, v| m.max(-v)))
}

fn solve_with_retries(
    p: &mut Shooting<'_>,
    starts: &[Vec<f64>],
    candidates: &[Vec<f64>],
    lam: Option<&Multipliers>,
    opts: &NlpOptions,
) -> std::result::Result<Attempt, serde_json::Value> {
    let lam0 = lam.and_then(|l| p.shift_multipliers(l));
    let mut best: Option<Attempt> = None;
    let mut tried = Vec::new();
    let mut iterations = 0;
    for (n, z0) in starts.iter().enumerate() {
        let r = nlp::solve(p, z0, lam0.as_deref(), opts);
        log::trace!(
            "{} start {n}: {} it, {} outer, {}, violations {:?}",
            p.kind.as_str(),
            r.iterations,
            r.outer,
            r.status.as_str(),
            r.violation_history
        );
        iterations += r.iterations;
        tried.push(json!({
            "start": n,
            "status": r.status.as_str(),
            "violation": r.max_violation,
            "objective": r.obj,
        }));
        if r.max_violation <= opts.feas_tol && best.as_ref().is_none_or(|b| r.obj < b.obj) {
            let status = if r.status == NlpStatus::Converged { MpcStatus::Converged } else { MpcStatus::MaxIter };
            best = Some(Attempt {
                z: r.z,
                obj: r.obj,
                violation: r.max_violation,
                status,
                iterations,
                multipliers: r.multipliers,
            });
            // The primary start converging is the common case.
            if status == MpcStatus::Converged {
                break;
            }
        }
    }
    if let Some(mut b) = best {
        b.iterations = iterations;
        return Ok(b);
    }
    for z in candidates {
        let (f, v) = violation_at(p, z);
        if v <= opts.feas_tol && best.as_ref().is_none_or(|b| f < b.obj) {
            best = Some(Attempt {
                z: z.clone(),
                obj: f,
                violation: v,
                status: MpcStatus::Fallback,
                iterations,
                multipliers: Vec::new(),
            });
        }
    }
    best.ok_or_else(|| json!({ "attempts": tried }))
}

fn finish(p: &mut Shooting<'_>, a: Attempt) -> MpcSolution {
    let _ = violation_at(p, &a.z);
    let n_in = p.n_inputs();
    let mut nu_seq = Vec::new();
    if p.kind == ProblemKind::Exploration {
        nu_seq = (0..p.horizon).map(|h| (p.eps - p.max_width(h).0).max(0.0)).collect();
    }
    let theta_opt = if p.kind == ProblemKind::Optimistic {
        (0..p.n_y).map(|c| p.theta(&a.z, c)).collect()
    } else {
        Vec::new()
    };
    let cost = if p.kind == ProblemKind::Exploration {
        // Report the cost with the exact slack for the returned inputs.
        let mut z = a.z.clone();
        let off = p.nu_offset();
        for (h, nu) in nu_seq.iter().enumerate() {
            z[off + h] = nu / p.eps;
        }
        p.objective(&z)
    } else {
        p.objective(&a.z)
    };
    MpcSolution {
        kind: p.kind,
        u_seq: a.z[..n_in].to_vec(),
        x_pred: p.roll.states.clone(),
        nu_seq,
        theta_opt,
        cost,
        status: a.status,
        max_violation: a.violation,
        iterations: a.iterations,
        multipliers: Multipliers { t: p.t, values: a.multipliers },
    }
}

fn fault(kind: ProblemKind, t: usize, x0: &[f64], starts: &[Vec<f64>], detail: serde_json::Value) -> Error {
    Error::Infeasible {
        step: t,
        problem: kind.as_str(),
        detail: format!("no feasible solution from {} warm starts", starts.len()),
        dump: Box::new(json!({
            "problem": kind.as_str(),
            "t": t,
            "x0": x0,
            "warm_starts": starts,
            "solver": detail,
        })),
    }
}

fn input_starts(p: &Shooting<'_>, warm: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n_in = p.n_inputs();
    warm.iter().filter(|u| u.len() == n_in).cloned().collect()
}

/// Exploration problem: cost plus exact-penalty slack on `w(x_h) ≥ ε − ν_h`.
pub fn solve_exploration(
    ctx: &MpcContext<'_>,
    x_k: &[f64],
    t: usize,
    warm: &[Vec<f64>],
    lam: Option<&Multipliers>,
) -> Result<MpcSolution> {
    let mut p = Shooting::exploration(ctx, x_k, t);
    let starts: Vec<Vec<f64>> = input_starts(&p, warm)
        .into_iter()
        .map(|mut u| {
            u.extend(std::iter::repeat_n(1.0, p.horizon));
            u
        })
        .collect();
    match solve_with_retries(&mut p, &starts, &starts, lam, &ctx.settings.nlp) {
        Ok(a) => Ok(finish(&mut p, a)),
        Err(d) => Err(fault(ProblemKind::Exploration, t, x_k, &starts, d)),
    }
}

/// Pessimistic problem: cost plus `Σ_c L_c w_c` inside the pessimistic set.
pub fn solve_pessimistic(
    ctx: &MpcContext<'_>,
    x_k: &[f64],
    t: usize,
    warm: &[Vec<f64>],
    lam: Option<&Multipliers>,
) -> Result<MpcSolution> {
    let mut p = Shooting::pessimistic(ctx, x_k, t);
    let starts = input_starts(&p, warm);
    match solve_with_retries(&mut p, &starts, &starts, lam, &ctx.settings.nlp) {
        Ok(a) => Ok(finish(&mut p, a)),
        Err(d) => Err(fault(ProblemKind::Pessimistic, t, x_k, &starts, d)),
    }
}

fn empty_optimistic(p: &Shooting<'_>, x_k: &[f64]) -> MpcSolution {
    MpcSolution {
        kind: ProblemKind::Optimistic,
        u_seq: Vec::new(),
        x_pred: x_k.to_vec(),
        nu_seq: Vec::new(),
        theta_opt: p.theta_fixed.clone(),
        cost: f64::INFINITY,
        status: MpcStatus::EmptySet,
        max_violation: f64::INFINITY,
        iterations: 0,
        multipliers: Multipliers::default(),
    }
}

/// Optimistic problem over inputs and output parameters. Warm starts are
/// input sequences or full `[u, θ]` vectors. An empty feasible
/// set (initial state outside the optimistic set, or no solution found while
/// the initial state is outside the set's interior) yields `J^o = +∞`.
pub fn solve_optimistic(
    ctx: &MpcContext<'_>,
    x_k: &[f64],
    t: usize,
    warm: &[Vec<f64>],
    lam: Option<&Multipliers>,
) -> Result<MpcSolution> {
    let mut p = Shooting::learning(ProblemKind::Optimistic, ctx, x_k, t);
    if p.lo.is_empty() {
        return Ok(empty_optimistic(&p, x_k));
    }
    let start_mem = crate::confidence::in_optimistic_state_set_2eps(
        ctx.bounds,
        x_k,
        &ctx.sets.xbox,
        &ctx.sets.ybox,
        ctx.settings.eps,
        t,
    );
    if !start_mem.inside {
        return Ok(empty_optimistic(&p, x_k));
    }
    let (lo, hi) = (p.lo.clone(), p.hi.clone());
    let n_in = p.n_inputs();
    let nth = p.n_theta();
    let starts: Vec<Vec<f64>> = warm
        .iter()
        .filter(|z| z.len() == n_in || z.len() == lo.len())
        .map(|w| {
            let mut z = w[..n_in].to_vec();
            if w.len() == n_in {
                z.resize(lo.len(), 0.0);
            } else {
                for c in 0..p.n_y {
                    let th = &w[n_in + c * nth..n_in + (c + 1) * nth];
                    z.extend(to_whitened(&p.theta_map[c], &p.theta_fixed[c], th));
                }
            }
            for ((v, l), h) in z.iter_mut().zip(&lo).zip(&hi) {
                *v = v.clamp(*l, *h);
            }
            z
        })
        .collect();
    match solve_with_retries(&mut p, &starts, &starts, lam, &ctx.settings.optimistic_nlp) {
        Ok(a) => Ok(finish(&mut p, a)),
        Err(d) => Err(fault(ProblemKind::Optimistic, t, x_k, &starts, d)),
    }
}

/// Certainty-equivalent problem with known output parameters and the plain
/// output boxes on `h = 1..=H`.
#[allow(clippy::too_many_arguments)]
pub fn solve_omniscient(
    model: &GruModel,
    theta_star: &[Vec<f64>],
    sets: &Sets,
    cost: &CostSpec,
    settings: &MpcSettings,
    x_k: &[f64],
    t: usize,
    warm: &[Vec<f64>],
    lam: Option<&Multipliers>,
) -> Result<MpcSolution> {
    let mut p = Shooting::omniscient(model, theta_star, sets, cost, settings, x_k, t);
    let starts = input_starts(&p, warm);
    match solve_with_retries(&mut p, &starts, &starts, lam, &settings.nlp) {
        Ok(a) => Ok(finish(&mut p, a)),
        Err(d) => Err(fault(ProblemKind::Omniscient, t, x_k, &starts, d)),
    }
}

/// Evaluate an input sequence against a problem's constraints: returns the
/// unscaled objective and the largest scaled violation.
pub fn evaluate_pessimistic(ctx: &MpcContext<'_>, x_k: &[f64], t: usize, u_seq: &[f64]) -> (f64, f64) {
    let mut p = Shooting::pessimistic(ctx, x_k, t);
    let (_, v) = violation_at(&mut p, u_seq);
    (p.objective(u_seq), v)
}

/// Cost `Σ_h ℓ_{t+h}(θᵀx_h) + ℓ_T(θᵀx_H)` of an input sequence.
pub fn trajectory_cost(
    model: &GruModel,
    theta: &[Vec<f64>],
    cost: &CostSpec,
    x_k: &[f64],
    t: usize,
    u_seq: &[f64],
) -> f64 {
    let r = crate::dynamics::rollout(model, x_k, u_seq);
    let horizon = r.horizon();
    let mut g = vec![0.0; theta.len()];
    let mut j = 0.0;
    for h in 0..=horizon {
        let f = r.feature(h);
        let y: Vec<f64> = theta.iter().map(|th| dot(th, &f)).collect();
        j += if h < horizon { cost.stage(t + h, &y, &mut g) } else { cost.terminal(&y, &mut g) };
    }
    j
}

/// First `h ∈ [1, H−1]` whose slack is numerically zero, else `H`; the flag
/// reports the fallback branch.
pub fn h_star(nu: &[f64], eps: f64, horizon: usize) -> (usize, bool) {
    let tol = 1e-6 * eps;
    (1..horizon.min(nu.len()))
        .find(|&h| nu[h] <= tol)
        .map_or((horizon, true), |h| (h, false))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::bayes::BllPrior;
    use crate::confidence::RetentionPolicy;
    use crate::linalg::identity;
    use crate::mpc::cost::QuadraticCost;

    #[test]
    fn h_star_examples() {
        let eps = 0.1;
        assert_eq!(h_star(&[0.2, 0.0, 0.1, 0.0], eps, 4), (1, false));
        assert_eq!(h_star(&[0.2, 0.05, 0.0, 0.1], eps, 4), (2, false));
        assert_eq!(h_star(&[0.0, 0.05, 0.02, 0.1], eps, 4), (4, true));
    }

    /// Shared small instance: 2 states, 1 input, 1 output, quadratic cost.
    pub(crate) struct Toy {
        pub model: GruModel,
        pub learner: Learner,
        pub bounds: BoundsBuffer,
        pub sets: Sets,
        pub cost: CostSpec,
        pub terminal: TerminalSet,
        pub settings: MpcSettings,
    }

    impl Toy {
        pub fn ctx(&self) -> MpcContext<'_> {
            MpcContext {
                model: &self.model,
                learner: &self.learner,
                bounds: &self.bounds,
                sets: &self.sets,
                cost: &self.cost,
                terminal: &self.terminal,
                settings: &self.settings,
            }
        }
    }

    pub(crate) fn toy(lam0: f64, horizon: usize) -> Toy {
        let mut model = GruModel::zeros(2, 1);
        model.w_r = vec![1.2, -0.8];
        model.u_r = vec![0.3, 0.1, -0.2, 0.2];
        model.b_z = vec![-0.5, 0.3];
        model.w_z = vec![0.1, 0.0];
        let mut lambda0 = identity(3);
        lambda0.iter_mut().for_each(|v| *v *= lam0);
        let learner = Learner::new(vec![BllPrior {
            theta0: vec![0.3, 0.45, 0.0],
            lambda0,
            sigma2: 0.001,
            cap_c: 0.05,
            delta: 0.01,
        }])
        .unwrap();
        let bounds =
            BoundsBuffer::new(ConfidenceSnapshot::from_learner(&learner), 16, RetentionPolicy::default()).unwrap();
        let sets = Sets {
            xbox: StateBox::symmetric(2, 1.0),
            ubox: StateBox::symmetric(1, 1.0),
            ybox: OutputBox::fixed(vec![-1.0], vec![1.0]),
        };
        let cost = CostSpec::Quadratic(QuadraticCost {
            weights: vec![1.0],
            reference: vec![0.6],
            terminal_weights: vec![],
            y_lo: vec![-1.0],
            y_hi: vec![1.0],
        });
        let settings = MpcSettings {
            horizon,
            eps: 0.05,
            alpha_nu: 1e3 * 3.2 * 2.0,
            theta_box: 10.0,
            nlp: NlpOptions::default(),
            optimistic_nlp: NlpOptions::default(),
        };
        let terminal = crate::mpc::terminal::build_terminal_set(
            &model,
            &bounds,
            &sets.xbox,
            &sets.ubox,
            &sets.ybox,
            settings.eps,
            &crate::mpc::terminal::TerminalOptions { u_eq: Some(vec![0.0]), ..Default::default() },
        )
        .unwrap();
        Toy { model, learner, bounds, sets, cost, terminal, settings }
    }

    fn fd_check(p: &mut Shooting<'_>, z: &[f64]) {
        let m = p.n_ineq();
        let n = p.dim();
        let mut g = vec![0.0; m];
        // Random multiplier weights exercise every residual gradient.
        let w: Vec<f64> = (0..m).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect();
        let mut grad = vec![0.0; n];
        p.eval(z, &mut g);
        p.grad(&w, &mut grad);
        let merit = |p: &mut Shooting<'_>, z: &[f64]| {
            let mut g = vec![0.0; m];
            let f = p.eval(z, &mut g);
            f + g.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        for j in 0..n {
            let h = 1e-6;
            let mut zp = z.to_vec();
            let mut zm = z.to_vec();
            zp[j] += h;
            zm[j] -= h;
            let fd = (merit(p, &zp) - merit(p, &zm)) / (2.0 * h);
            assert!(
                (fd - grad[j]).abs() <= 1e-5 * (1.0 + fd.abs()),
                "{:?} coordinate {j}: fd {fd} vs {}",
                p.kind,
                grad[j]
            );
        }
    }

    #[test]
    fn shooting_gradients_match_finite_differences() {
        let toy = toy(0.5, 4);
        let ctx = toy.ctx();
        let x0 = [0.1, -0.2];
        let u = vec![0.3, -0.4, 0.5, 0.1];
        let mut p = Shooting::pessimistic(&ctx, &x0, 0);
        fd_check(&mut p, &u);
        let mut p = Shooting::exploration(&ctx, &x0, 0);
        let mut z = u.clone();
        z.extend([0.2, 0.5, 0.7, 0.1]);
        fd_check(&mut p, &z);
        let mut p = Shooting::optimistic(&ctx, &x0, 0).unwrap();
        let mut z = vec![0.3, -0.4, 0.5, 0.1];
        z.extend([0.35, 0.4, 0.02]);
        fd_check(&mut p, &z);
        let theta = vec![vec![0.9, 1.4, 0.1]];
        let mut p = Shooting::omniscient(&toy.model, &theta, &toy.sets, &toy.cost, &toy.settings, &x0, 0);
        fd_check(&mut p, &u);
    }
}

#[cfg(test)]
mod solve_tests {
    use super::tests::toy;
    use super::*;

    fn grid(n: usize) -> impl Iterator<Item = f64> {
        (0..n).map(move |i| -1.0 + 2.0 * i as f64 / (n - 1) as f64)
    }

    #[test]
    fn pessimistic_matches_grid_search() {
        let toy = toy(0.5, 2);
        let ctx = toy.ctx();
        let x0 = [0.1, -0.1];
        let sol = solve_pessimistic(&ctx, &x0, 0, &[vec![0.0, 0.0]], None).unwrap();
        assert!(sol.max_violation <= 1e-6);
        let mut best = f64::INFINITY;
        for a in grid(201) {
            for b in grid(201) {
                let (j, v) = evaluate_pessimistic(&ctx, &x0, 0, &[a, b]);
                if v <= 0.0 {
                    best = best.min(j);
                }
            }
        }
        assert!(sol.cost <= best + 1e-6, "{} vs grid {best}", sol.cost);
        assert!(sol.cost >= best - 1e-2);
    }

    #[test]
    fn omniscient_matches_grid_search() {
        let toy = toy(0.5, 2);
        let theta = vec![vec![0.9, 1.4, 0.1]];
        let x0 = [0.1, -0.1];
        let s = &toy.settings;
        let sol = solve_omniscient(&toy.model, &theta, &toy.sets, &toy.cost, s, &x0, 0, &[vec![0.0, 0.0]], None).unwrap();
        let mut best = f64::INFINITY;
        for a in grid(201) {
            for b in grid(201) {
                let r = crate::dynamics::rollout(&toy.model, &x0, &[a, b]);
                let feasible = (1..=2).all(|h| {
                    let y = dot(&theta[0], &r.feature(h));
                    toy.sets.xbox.contains(r.state(h)) && (-1.0..=1.0).contains(&y)
                });
                if feasible {
                    best = best.min(trajectory_cost(&toy.model, &theta, &toy.cost, &x0, 0, &[a, b]));
                }
            }
        }
        assert!(sol.cost <= best + 1e-6 && sol.cost >= best - 1e-2, "{} vs {best}", sol.cost);
    }

    #[test]
    fn predicted_states_follow_the_model() {
        let toy = toy(0.5, 5);
        let ctx = toy.ctx();
        let x0 = [0.2, 0.3];
        let sol = solve_pessimistic(&ctx, &x0, 0, &[vec![0.0; 5]], None).unwrap();
        let mut x = x0.to_vec();
        for h in 0..5 {
            x = toy.model.step(&x, &sol.u_seq[h..h + 1]);
            for i in 0..2 {
                assert_eq!(x[i], sol.x_pred[(h + 1) * 2 + i]);
            }
        }
    }

    #[test]
    fn pessimistic_cost_includes_width_penalty() {
        let toy = toy(0.5, 4);
        let ctx = toy.ctx();
        let x0 = [0.0, 0.0];
        let sol = solve_pessimistic(&ctx, &x0, 0, &[vec![0.0; 4]], None).unwrap();
        let theta: Vec<Vec<f64>> = toy.learner.posts.iter().map(|p| p.theta_bar.clone()).collect();
        let plain = trajectory_cost(&toy.model, &theta, &toy.cost, &x0, 0, &sol.u_seq);
        assert!(sol.cost > plain);
    }

    #[test]
    fn exploration_reaches_width_below_eps_when_learning_is_cheap() {
        // Wide prior: widths start above ε everywhere, so ν_0 = 0.
        let mut toy = toy(0.5, 3);
        toy.settings.eps = 0.02;
        let ctx = toy.ctx();
        let sol = solve_exploration(&ctx, &[0.0, 0.0], 0, &[vec![0.0; 3]], None).unwrap();
        assert_eq!(sol.nu_seq.len(), 3);
        assert!(sol.nu_seq.iter().all(|v| *v >= 0.0 && *v <= toy.settings.eps));
        let (h, fallback) = h_star(&sol.nu_seq, toy.settings.eps, 3);
        assert!(!fallback && h == 1);
    }

    #[test]
    fn exploration_minimizer_is_stable_under_doubled_penalty() {
        let mut toy = toy(20.0, 3);
        toy.settings.eps = 0.03;
        let a = solve_exploration(&toy.ctx(), &[0.3, -0.2], 0, &[vec![0.0; 3]], None).unwrap();
        toy.settings.alpha_nu *= 2.0;
        let b = solve_exploration(&toy.ctx(), &[0.3, -0.2], 0, &[vec![0.0; 3]], None).unwrap();
        for (x, y) in a.u_seq.iter().zip(&b.u_seq) {
            assert!((x - y).abs() < 1e-3, "{:?} vs {:?}", a.u_seq, b.u_seq);
        }
    }

    #[test]
    fn optimistic_reports_empty_set_outside() {
        let toy = toy(0.5, 3);
        let ctx = toy.ctx();
        // Far outside the state box.
        let sol = solve_optimistic(&ctx, &[1.5, 0.0], 0, &[vec![0.0; 3]], None).unwrap();
        assert_eq!(sol.status, MpcStatus::EmptySet);
        assert!(sol.cost.is_infinite());
    }

    #[test]
    fn optimistic_is_no_worse_than_pessimistic() {
        let toy = toy(0.5, 3);
        let ctx = toy.ctx();
        let x0 = [0.0, 0.0];
        let p = solve_pessimistic(&ctx, &x0, 0, &[vec![0.0; 3]], None).unwrap();
        let o = solve_optimistic(&ctx, &x0, 0, &[vec![0.0; 3]], None).unwrap();
        assert!(o.status != MpcStatus::EmptySet);
        assert!(o.cost <= p.cost + 1e-6, "{} vs {}", o.cost, p.cost);
    }

    #[test]
    fn fault_dump_when_nothing_is_feasible() {
        let mut toy = toy(0.5, 3);
        // Output box the model can never satisfy.
        toy.sets.ybox = OutputBox::fixed(vec![5.0], vec![6.0]);
        let err = solve_pessimistic(&toy.ctx(), &[0.0, 0.0], 7, &[vec![0.0; 3]], None).unwrap_err();
        match err {
            Error::Infeasible { step, problem, dump, .. } => {
                assert_eq!(step, 7);
                assert_eq!(problem, "pessimistic");
                assert!(dump.get("solver").is_some());
            }
            e => panic!("{e}"),
        }
    }
}
