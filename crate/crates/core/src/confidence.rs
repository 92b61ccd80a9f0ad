//! Running-intersection output bounds and set membership tests built on them.
//!
//! All quantities are in model (scaled) units and features are augmented
//! states `[x 1]`.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::bayes::Learner;
use crate::error::{check_len, Error, Result};
use crate::linalg::{dot, mat_vec, quad_form_sym};

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSnapshot {
    pub theta_bar: Vec<f64>,
    pub beta: f64,
    pub sigma: f64,
    /// Index into [`ConfidenceSnapshot::shapes`].
    pub shape: usize,
}

/// Frozen copy of the posterior at time `k`. Channels fed the same feature
/// stream from the same prior precision share one covariance shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceSnapshot {
    pub k: u64,
    pub shapes: Vec<Vec<f64>>,
    pub channels: Vec<ChannelSnapshot>,
}

impl ConfidenceSnapshot {
    pub fn from_learner(learner: &Learner) -> Self {
        let mut shapes: Vec<Vec<f64>> = Vec::new();
        let betas = learner.betas();
        let channels = learner
            .posts
            .iter()
            .zip(&learner.priors)
            .zip(betas)
            .map(|((post, prior), beta)| {
                let shape = match shapes.iter().position(|s| *s == post.lambda_inv) {
                    Some(i) => i,
                    None => {
                        shapes.push(post.lambda_inv.clone());
                        shapes.len() - 1
                    }
                };
                ChannelSnapshot {
                    theta_bar: post.theta_bar.clone(),
                    beta,
                    sigma: prior.sigma2.sqrt(),
                    shape,
                }
            })
            .collect();
        Self {
            k: learner.posts[0].k,
            shapes,
            channels,
        }
    }

    pub fn n_y(&self) -> usize {
        self.channels.len()
    }

    /// `(μ, w)` per channel at feature `x`.
    pub fn mean_width(&self, x: &[f64]) -> Vec<(f64, f64)> {
        let quads: Vec<f64> = self.shapes.iter().map(|s| quad_form_sym(s, x).max(0.0)).collect();
        self.channels
            .iter()
            .map(|c| (dot(&c.theta_bar, x), c.beta * c.sigma * quads[c.shape].sqrt()))
            .collect()
    }

    /// Gradients of `μ` and `w` of one channel with respect to the feature.
    pub(crate) fn grads(&self, c: usize, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let ch = &self.channels[c];
        let shape = &self.shapes[ch.shape];
        let mut ax = vec![0.0; x.len()];
        mat_vec(shape, x.len(), x, &mut ax);
        let q = dot(x, &ax);
        let scale = if q > 0.0 { ch.beta * ch.sigma / q.sqrt() } else { 0.0 };
        ax.iter_mut().for_each(|v| *v *= scale);
        (ch.theta_bar.clone(), ax)
    }
}

/// Per-channel bound evaluation with gradients through the active snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelBounds {
    pub lb: f64,
    pub ub: f64,
    pub grad_lb: Vec<f64>,
    pub grad_ub: Vec<f64>,
    /// `lb > ub` was detected and collapsed to the midpoint.
    pub collapsed: bool,
}

/// Bound values of one channel and the snapshots attaining them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct BoundValue {
    pub lb: f64,
    pub ub: f64,
    pub lb_src: usize,
    pub ub_src: usize,
    pub collapsed: bool,
}

/// When snapshots are retained permanently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionPolicy {
    pub explore_every: u64,
    pub goal_every: u64,
}

impl Default for RetentionPolicy {
    fn default() -> Self {
        Self {
            explore_every: 1,
            goal_every: 12,
        }
    }
}

impl RetentionPolicy {
    pub fn should_retain(&self, exploring: bool, k: u64) -> bool {
        let every = if exploring { self.explore_every } else { self.goal_every };
        every > 0 && k % every == 0
    }
}

/// Prior snapshot, a bounded queue of retained snapshots, and an optional
/// live snapshot of the current posterior.
#[derive(Debug)]
pub struct BoundsBuffer {
    prior: ConfidenceSnapshot,
    retained: VecDeque<ConfidenceSnapshot>,
    live: Option<ConfidenceSnapshot>,
    pub capacity: usize,
    pub policy: RetentionPolicy,
    inconsistencies: AtomicU64,
}

impl Clone for BoundsBuffer {
    fn clone(&self) -> Self {
        Self {
            prior: self.prior.clone(),
            retained: self.retained.clone(),
            live: self.live.clone(),
            capacity: self.capacity,
            policy: self.policy,
            inconsistencies: AtomicU64::new(self.inconsistencies.load(Ordering::Relaxed)),
        }
    }
}

impl BoundsBuffer {
    /// `capacity` counts all snapshots including the prior.
    pub fn new(prior: ConfidenceSnapshot, capacity: usize, policy: RetentionPolicy) -> Result<Self> {
        if capacity < 1 {
            return Err(Error::Config("bounds buffer capacity must be at least 1".into()));
        }
        Ok(Self {
            prior,
            retained: VecDeque::new(),
            live: None,
            capacity,
            policy,
            inconsistencies: AtomicU64::new(0),
        })
    }

    pub fn n_y(&self) -> usize {
        self.prior.n_y()
    }

    /// Number of permanently held snapshots (prior included).
    pub fn len(&self) -> usize {
        1 + self.retained.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn inconsistencies(&self) -> u64 {
        self.inconsistencies.load(Ordering::Relaxed)
    }

    /// Retain a snapshot, evicting the oldest non-prior one when full.
    /// Returns whether an eviction happened.
    pub fn push(&mut self, snap: ConfidenceSnapshot) -> bool {
        let mut evicted = false;
        if self.capacity == 1 {
            return false;
        }
        while 1 + self.retained.len() >= self.capacity {
            self.retained.pop_front();
            evicted = true;
        }
        self.retained.push_back(snap);
        evicted
    }

    /// Replace the live snapshot (not subject to capacity).
    pub fn set_live(&mut self, snap: Option<ConfidenceSnapshot>) {
        self.live = snap;
    }

    pub fn snapshots(&self) -> impl Iterator<Item = &ConfidenceSnapshot> {
        std::iter::once(&self.prior)
            .chain(self.retained.iter())
            .chain(self.live.iter())
    }

    /// Lower/upper bounds and their gradients at feature `x`.
    pub fn eval(&self, x: &[f64]) -> Vec<ChannelBounds> {
        let mut vals = Vec::new();
        self.values_into(x, &mut vals);
        vals.iter()
            .enumerate()
            .map(|(c, v)| {
                let (grad_lb, grad_ub) = self.value_grads(v, c, x);
                ChannelBounds {
                    lb: v.lb,
                    ub: v.ub,
                    grad_lb,
                    grad_ub,
                    collapsed: v.collapsed,
                }
            })
            .collect()
    }

    /// Bound values at `x` with the index of the active snapshot, without
    /// gradients.
    pub(crate) fn values_into(&self, x: &[f64], out: &mut Vec<BoundValue>) {
        out.clear();
        out.resize(
            self.n_y(),
            BoundValue {
                lb: f64::NEG_INFINITY,
                ub: f64::INFINITY,
                lb_src: 0,
                ub_src: 0,
                collapsed: false,
            },
        );
        let mut quads = Vec::new();
        for (j, snap) in self.snapshots().enumerate() {
            quads.clear();
            quads.extend(snap.shapes.iter().map(|s| quad_form_sym(s, x).max(0.0).sqrt()));
            for (ch, v) in snap.channels.iter().zip(out.iter_mut()) {
                let mu = dot(&ch.theta_bar, x);
                let w = ch.beta * ch.sigma * quads[ch.shape];
                if mu - w > v.lb {
                    v.lb = mu - w;
                    v.lb_src = j;
                }
                if mu + w < v.ub {
                    v.ub = mu + w;
                    v.ub_src = j;
                }
            }
        }
        for (c, v) in out.iter_mut().enumerate() {
            if v.lb > v.ub {
                self.inconsistencies.fetch_add(1, Ordering::Relaxed);
                log::warn!("inconsistent bounds on channel {c}: lb {} > ub {}; collapsing", v.lb, v.ub);
                let m = 0.5 * (v.lb + v.ub);
                v.lb = m;
                v.ub = m;
                v.collapsed = true;
            }
        }
    }

    /// Gradients of `lb` and `ub` of channel `c` at `x` for values from
    /// [`BoundsBuffer::values_into`].
    pub(crate) fn value_grads(&self, v: &BoundValue, c: usize, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let snap = |j: usize| self.snapshots().nth(j).expect("source index within buffer");
        let (gm, gw) = snap(v.lb_src).grads(c, x);
        let mut grad_lb: Vec<f64> = gm.iter().zip(&gw).map(|(m, w)| m - w).collect();
        let (gm, gw) = snap(v.ub_src).grads(c, x);
        let mut grad_ub: Vec<f64> = gm.iter().zip(&gw).map(|(m, w)| m + w).collect();
        if v.collapsed {
            for (a, b) in grad_lb.iter_mut().zip(grad_ub.iter_mut()) {
                let m = 0.5 * (*a + *b);
                *a = m;
                *b = m;
            }
        }
        (grad_lb, grad_ub)
    }
}

/// `(lb, ub)` per channel.
pub fn eval_bounds(buf: &BoundsBuffer, x: &[f64]) -> Vec<(f64, f64)> {
    buf.eval(x).into_iter().map(|b| (b.lb, b.ub)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl StateBox {
    pub fn symmetric(n: usize, r: f64) -> Self {
        Self {
            lo: vec![-r; n],
            hi: vec![r; n],
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (lo, hi))| *lo <= *v && *v <= *hi)
    }

    /// Per-coordinate shrink by `r` (returns `None` when empty).
    pub fn shrink(&self, r: f64) -> Option<Self> {
        let lo: Vec<f64> = self.lo.iter().map(|v| v + r).collect();
        let hi: Vec<f64> = self.hi.iter().map(|v| v - r).collect();
        lo.iter().zip(&hi).all(|(a, b)| a <= b).then_some(Self { lo, hi })
    }
}

/// A window of the (periodic) schedule overriding one channel's limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxWindow {
    pub channel: usize,
    /// First step of the window within the period.
    pub from: usize,
    /// One past the last step.
    pub to: usize,
    pub y_min: Option<f64>,
    pub y_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputBox {
    pub y_min: Vec<f64>,
    pub y_max: Vec<f64>,
    #[serde(default)]
    pub windows: Vec<BoxWindow>,
    /// Schedule period in steps (ignored without windows).
    #[serde(default)]
    pub period: usize,
}

impl OutputBox {
    pub fn fixed(y_min: Vec<f64>, y_max: Vec<f64>) -> Self {
        Self {
            y_min,
            y_max,
            windows: Vec::new(),
            period: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_len("y_max", self.y_min.len(), self.y_max.len())?;
        if !self.windows.is_empty() && self.period == 0 {
            return Err(Error::Config("scheduled output box needs a period".into()));
        }
        for w in &self.windows {
            if w.channel >= self.y_min.len() || w.from >= w.to || w.to > self.period {
                return Err(Error::Config("malformed output box window".into()));
            }
        }
        for t in 0..self.period.max(1) {
            let (lo, hi) = self.at(t);
            if lo.iter().zip(&hi).any(|(a, b)| a >= b) {
                return Err(Error::Config(format!("empty output box at step {t}")));
            }
        }
        Ok(())
    }

    /// Limits in force at time index `t`.
    pub fn at(&self, t: usize) -> (Vec<f64>, Vec<f64>) {
        let mut lo = self.y_min.clone();
        let mut hi = self.y_max.clone();
        if self.period > 0 {
            let s = t % self.period;
            for w in self.windows.iter().filter(|w| w.from <= s && s < w.to) {
                if let Some(v) = w.y_min {
                    lo[w.channel] = v;
                }
                if let Some(v) = w.y_max {
                    hi[w.channel] = v;
                }
            }
        }
        (lo, hi)
    }

    /// Intersection over the whole schedule.
    pub fn tightest(&self) -> (Vec<f64>, Vec<f64>) {
        let (mut lo, mut hi) = self.at(0);
        for t in 1..self.period {
            let (l, h) = self.at(t);
            for c in 0..lo.len() {
                lo[c] = lo[c].max(l[c]);
                hi[c] = hi[c].min(h[c]);
            }
        }
        (lo, hi)
    }

    pub fn contains(&self, t: usize, y: &[f64]) -> bool {
        let (lo, hi) = self.at(t);
        y.iter().zip(lo.iter().zip(&hi)).all(|(v, (l, h))| l <= v && v <= h)
    }
}

/// Membership verdict with signed margins (non-negative means satisfied):
/// state lower/upper margins first, then per channel the output pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Membership {
    pub inside: bool,
    pub margins: Vec<f64>,
}

fn state_margins(x: &[f64], xbox: &StateBox, out: &mut Vec<f64>) {
    for ((v, lo), hi) in x.iter().zip(&xbox.lo).zip(&xbox.hi) {
        out.push(v - lo);
        out.push(hi - v);
    }
}

fn verdict(margins: Vec<f64>) -> Membership {
    Membership {
        inside: margins.iter().all(|m| *m >= 0.0),
        margins,
    }
}

/// `x ∈ 𝒳` and `y_min ≤ lb(x)`, `ub(x) ≤ y_max` on every channel.
pub fn in_pessimistic_state_set(
    buf: &BoundsBuffer,
    x: &[f64],
    xbox: &StateBox,
    ybox: &OutputBox,
    t: usize,
) -> Membership {
    let mut margins = Vec::with_capacity(2 * x.len() + 2 * buf.n_y());
    state_margins(x, xbox, &mut margins);
    let (lo, hi) = ybox.at(t);
    for (c, b) in buf.eval(&crate::dynamics::augment(x)).into_iter().enumerate() {
        margins.push(b.lb - lo[c]);
        margins.push(hi[c] - b.ub);
    }
    verdict(margins)
}

/// `x ∈ 𝒳` and `lb(x) ≤ y_max − 2ε`, `ub(x) ≥ y_min + 2ε` on every channel.
pub fn in_optimistic_state_set_2eps(
    buf: &BoundsBuffer,
    x: &[f64],
    xbox: &StateBox,
    ybox: &OutputBox,
    eps: f64,
    t: usize,
) -> Membership {
    let mut margins = Vec::with_capacity(2 * x.len() + 2 * buf.n_y());
    state_margins(x, xbox, &mut margins);
    let (lo, hi) = ybox.at(t);
    for (c, b) in buf.eval(&crate::dynamics::augment(x)).into_iter().enumerate() {
        margins.push(hi[c] - 2.0 * eps - b.lb);
        margins.push(b.ub - lo[c] - 2.0 * eps);
    }
    verdict(margins)
}

/// `(θᵀx − lb(x), ub(x) − θᵀx)` for each feature in `xs`, on one channel.
pub fn theta_interval_residuals(
    buf: &BoundsBuffer,
    channel: usize,
    theta: &[f64],
    xs: &[Vec<f64>],
) -> Vec<(f64, f64)> {
    xs.iter()
        .map(|x| {
            let b = &buf.eval(x)[channel];
            let y = dot(theta, x);
            (y - b.lb, b.ub - y)
        })
        .collect()
}
