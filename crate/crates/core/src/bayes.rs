//! Recursive Bayesian linear regression on the last (output) layer with
//! anytime confidence radii.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::{dot, from_dmatrix, mat_vec, quad_form, symmetrize, to_dmatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BllPrior {
    pub theta0: Vec<f64>,
    /// Precision matrix, row-major `n_θ × n_θ`.
    pub lambda0: Vec<f64>,
    pub sigma2: f64,
    pub cap_c: f64,
    pub delta: f64,
}

impl BllPrior {
    pub fn n_theta(&self) -> usize {
        self.theta0.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_theta();
        check_len("lambda0", n * n, self.lambda0.len())?;
        if !(self.sigma2 > 0.0) {
            return Err(Error::Config("sigma2 must be positive".into()));
        }
        if !(self.cap_c > 0.0) {
            return Err(Error::Config("C must be positive".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config("delta must lie in (0, 1)".into()));
        }
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (self.lambda0[i * n + j], self.lambda0[j * n + i]);
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::Config("lambda0 is not symmetric".into()));
                }
            }
        }
        Ok(())
    }

    /// `‖θ − θ0‖²_{Λ0}`; the usual way to pick `C` when the truth is known.
    pub fn prior_distance(&self, theta: &[f64]) -> f64 {
        let d: Vec<f64> = theta.iter().zip(&self.theta0).map(|(a, b)| a - b).collect();
        quad_form(&self.lambda0, &d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BllPosterior {
    pub lambda_inv: Vec<f64>,
    pub q: Vec<f64>,
    pub theta_bar: Vec<f64>,
    pub log_det_ratio: f64,
    pub k: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutputPosterior {
    pub mu: f64,
    pub sigma2_out: f64,
}

pub fn init_posterior(prior: &BllPrior) -> Result<BllPosterior> {
    prior.validate()?;
    let n = prior.n_theta();
    let chol = to_dmatrix(&prior.lambda0, n)
        .cholesky()
        .ok_or_else(|| Error::Config("lambda0 is not positive definite".into()))?;
    let mut lambda_inv = from_dmatrix(&chol.inverse());
    symmetrize(&mut lambda_inv, n);
    let mut q = vec![0.0; n];
    mat_vec(&prior.lambda0, n, &prior.theta0, &mut q);
    Ok(BllPosterior {
        lambda_inv,
        q,
        theta_bar: prior.theta0.clone(),
        log_det_ratio: 0.0,
        k: 0,
    })
}

impl BllPosterior {
    pub fn n_theta(&self) -> usize {
        self.q.len()
    }

    /// In-place Sherman–Morrison update with one measurement.
    pub fn update(&mut self, x: &[f64], y_meas: f64) -> Result<()> {
        let n = self.n_theta();
        check_len("feature", n, x.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("regressor"));
        }
        if !y_meas.is_finite() {
            return Err(Error::NonFinite("measurement"));
        }
        let mut v = vec![0.0; n];
        mat_vec(&self.lambda_inv, n, x, &mut v);
        let s = 1.0 + dot(x, &v);
        if !s.is_finite() || s < 1.0 {
            return Err(Error::NonFinite("posterior update"));
        }
        for i in 0..n {
            for j in 0..n {
                self.lambda_inv[i * n + j] -= v[i] * v[j] / s;
            }
        }
        symmetrize(&mut self.lambda_inv, n);
        for (q, xi) in self.q.iter_mut().zip(x) {
            *q += xi * y_meas;
        }
        mat_vec(&self.lambda_inv, n, &self.q, &mut self.theta_bar);
        self.log_det_ratio += s.ln();
        self.k += 1;
        Ok(())
    }

    pub fn output(&self, sigma2: f64, x: &[f64]) -> OutputPosterior {
        OutputPosterior {
            mu: dot(&self.theta_bar, x),
            sigma2_out: sigma2 * quad_form(&self.lambda_inv, x).max(0.0),
        }
    }
}

/// Value-returning form of [`BllPosterior::update`]; the input is left intact
/// on error.
pub fn rank_one_update(post: &BllPosterior, x: &[f64], y_meas: f64) -> Result<BllPosterior> {
    let mut next = post.clone();
    next.update(x, y_meas)?;
    Ok(next)
}

pub fn output_posterior(post: &BllPosterior, sigma2: f64, x: &[f64]) -> OutputPosterior {
    post.output(sigma2, x)
}

/// Radius `β_k = √(2 (log(1/δ) + ½ log det Λ_k/Λ_0)) + √(C/σ²)`.
pub fn beta(post: &BllPosterior, prior: &BllPrior) -> f64 {
    (2.0 * ((1.0 / prior.delta).ln() + 0.5 * post.log_det_ratio)).sqrt()
        + (prior.cap_c / prior.sigma2).sqrt()
}

/// Confidence half-width `w_k(x) = β_k Σ_k(x)`.
pub fn width(post: &BllPosterior, prior: &BllPrior, x: &[f64]) -> f64 {
    beta(post, prior) * post.output(prior.sigma2, x).sigma2_out.sqrt()
}

/// One posterior per output channel, all fed the same feature stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub priors: Vec<BllPrior>,
    pub posts: Vec<BllPosterior>,
}

impl Learner {
    pub fn new(priors: Vec<BllPrior>) -> Result<Self> {
        if priors.is_empty() {
            return Err(Error::Config("at least one output channel required".into()));
        }
        let posts = priors.iter().map(init_posterior).collect::<Result<Vec<_>>>()?;
        Ok(Self { priors, posts })
    }

    pub fn n_y(&self) -> usize {
        self.posts.len()
    }

    pub fn n_theta(&self) -> usize {
        self.posts[0].n_theta()
    }

    /// Update every channel; if any channel rejects the data none is changed.
    pub fn update(&mut self, x: &[f64], y_meas: &[f64]) -> Result<()> {
        check_len("measurement vector", self.n_y(), y_meas.len())?;
        let next = self
            .posts
            .iter()
            .zip(y_meas)
            .map(|(p, y)| rank_one_update(p, x, *y))
            .collect::<Result<Vec<_>>>()?;
        self.posts = next;
        Ok(())
    }

    pub fn betas(&self) -> Vec<f64> {
        self.posts.iter().zip(&self.priors).map(|(p, pr)| beta(p, pr)).collect()
    }

    pub fn widths(&self, x: &[f64]) -> Vec<f64> {
        self.posts
            .iter()
            .zip(&self.priors)
            .map(|(p, pr)| width(p, pr, x))
            .collect()
    }

    pub fn means(&self, x: &[f64]) -> Vec<f64> {
        self.posts.iter().map(|p| dot(&p.theta_bar, x)).collect()
    }
}
