//! Box-shaped terminal set around a verified equilibrium.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::confidence::{in_pessimistic_state_set, BoundsBuffer, OutputBox, StateBox};
use crate::dynamics::{GruModel, StepScratch};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalSet {
    pub x_eq: Vec<f64>,
    pub u_eq: Vec<f64>,
    pub half_widths: Vec<f64>,
    /// Verified contraction margin: one step under `u_eq` maps the box into
    /// the box shrunk by this amount.
    pub margin: f64,
}

impl TerminalSet {
    pub fn as_box(&self) -> StateBox {
        self.shrunk(0.0).expect("unshrunk terminal box is nonempty")
    }

    /// The box shrunk per coordinate by `r`, `None` when empty.
    pub fn shrunk(&self, r: f64) -> Option<StateBox> {
        let lo: Vec<f64> = self.x_eq.iter().zip(&self.half_widths).map(|(c, w)| c - w + r).collect();
        let hi: Vec<f64> = self.x_eq.iter().zip(&self.half_widths).map(|(c, w)| c + w - r).collect();
        lo.iter().zip(&hi).all(|(a, b)| a <= b).then_some(StateBox { lo, hi })
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.as_box().contains(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalOptions {
    /// Terminal input; searched over the shrunk input box when absent.
    pub u_eq: Option<Vec<f64>>,
    pub samples: usize,
    pub seed: u64,
    /// Largest half-width tried.
    pub r_max: f64,
}

impl Default for TerminalOptions {
    fn default() -> Self {
        Self {
            u_eq: None,
            samples: 10_000,
            seed: 0,
            r_max: 1.0,
        }
    }
}

/// Fixed point of `x ↦ φ(x, u)` by iteration; `None` if it does not settle.
pub fn equilibrium(model: &GruModel, u: &[f64]) -> Option<Vec<f64>> {
    let mut x = vec![0.0; model.n_x];
    for _ in 0..20_000 {
        let next = model.step(&x, u);
        let diff = next.iter().zip(&x).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        x = next;
        if diff < 1e-14 {
            return Some(x);
        }
    }
    None
}

fn vertices(center: &[f64], r: f64) -> impl Iterator<Item = Vec<f64>> + '_ {
    let n = center.len();
    (0..1usize << n).map(move |mask| {
        center
            .iter()
            .enumerate()
            .map(|(i, c)| if mask >> i & 1 == 1 { c + r } else { c - r })
            .collect()
    })
}

/// Smallest signed distance of one-step images to the box boundary over
/// the vertices and `samples` uniform points (positive means strictly inside).
fn invariance_margin(model: &GruModel, x_eq: &[f64], u_eq: &[f64], r: f64, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = x_eq.len();
    let mut scratch = StepScratch::default();
    let mut img = vec![0.0; n];
    let mut margin_of = |x: &[f64]| {
        model.step_into(x, u_eq, &mut img, &mut scratch);
        img.iter().zip(x_eq).fold(f64::INFINITY, |m, (v, c)| m.min(r - (v - c).abs()))
    };
    let mut m = vertices(x_eq, r).map(|v| margin_of(&v)).fold(f64::INFINITY, f64::min);
    let mut x = vec![0.0; n];
    for _ in 0..samples {
        for i in 0..n {
            x[i] = x_eq[i] + rng.random_range(-r..=r);
        }
        m = m.min(margin_of(&x));
    }
    m
}

fn vertices_safe(buf: &BoundsBuffer, xbox: &StateBox, ybox: &OutputBox, x_eq: &[f64], r: f64) -> bool {
    // Each snapshot's lower bound is concave and upper bound convex in x, so
    // the extremes over a box are attained at vertices.
    vertices(x_eq, r).all(|v| in_pessimistic_state_set(buf, &v, xbox, ybox, 0).inside)
}

/// Find an equilibrium with `u_eq ∈ 𝒰 ⊖ B_{2ε}` inside the pessimistic set
/// of `buf` and grow the largest invariant box around it.
pub fn build_terminal_set(
    model: &GruModel,
    buf: &BoundsBuffer,
    xbox: &StateBox,
    ubox: &StateBox,
    ybox: &OutputBox,
    eps: f64,
    opts: &TerminalOptions,
) -> Result<TerminalSet> {
    let shrunk_u = ubox.shrink(2.0 * eps).ok_or_else(|| {
        Error::Config(format!("input box shrunk by 2ε = {} is empty; reduce ε", 2.0 * eps))
    })?;
    let (lo, hi) = ybox.tightest();
    let tight = OutputBox::fixed(lo, hi);

    let candidates: Vec<Vec<f64>> = match &opts.u_eq {
        Some(u) => {
            if !shrunk_u.contains(u) {
                return Err(Error::Config("terminal input lies outside 𝒰 ⊖ B_2ε".into()));
            }
            vec![u.clone()]
        }
        None if model.n_u == 1 => (0..=20)
            .map(|i| vec![shrunk_u.lo[0] + (shrunk_u.hi[0] - shrunk_u.lo[0]) * i as f64 / 20.0])
            .collect(),
        None => vec![shrunk_u.lo.iter().zip(&shrunk_u.hi).map(|(a, b)| 0.5 * (a + b)).collect()],
    };

    // Pick the equilibrium with the most pessimistic slack.
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    for u in candidates {
        let Some(x) = equilibrium(model, &u) else { continue };
        let mem = in_pessimistic_state_set(buf, &x, xbox, &tight, 0);
        if !mem.inside {
            continue;
        }
        let slack = mem.margins.iter().copied().fold(f64::INFINITY, f64::min);
        if best.as_ref().is_none_or(|b| slack > b.0) {
            best = Some((slack, x, u));
        }
    }
    let (_, x_eq, u_eq) = best.ok_or_else(|| {
        Error::Config(
            "no equilibrium inside the pessimistic set: the benchmark is unsafe by construction".into(),
        )
    })?;

    let room = x_eq
        .iter()
        .zip(xbox.lo.iter().zip(&xbox.hi))
        .fold(opts.r_max, |m, (c, (l, h))| m.min(c - l).min(h - c));
    let ok = |r: f64| {
        vertices_safe(buf, xbox, &tight, &x_eq, r)
            && invariance_margin(model, &x_eq, &u_eq, r, opts.samples, opts.seed) > 0.0
    };
    let r = if room > 0.0 && ok(room) {
        room
    } else {
        let (mut a, mut b) = (0.0, room.max(0.0));
        for _ in 0..24 {
            let mid = 0.5 * (a + b);
            if ok(mid) {
                a = mid;
            } else {
                b = mid;
            }
        }
        a
    };
    if r <= 1e-9 {
        return Err(Error::Config("no invariant terminal box found around the equilibrium".into()));
    }
    let margin = invariance_margin(model, &x_eq, &u_eq, r, opts.samples, opts.seed);
    Ok(TerminalSet {
        x_eq,
        u_eq,
        half_widths: vec![r; model.n_x],
        margin,
    })
}
