//! Stage and terminal costs on model-unit outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Electricity cost of the power channel plus a smoothed terminal
/// temperature-tracking term, both in currency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EconomicCost {
    /// Price per energy unit for each step; indices wrap around.
    pub prices: Vec<f64>,
    /// Sampling time in the price's time unit (hours for €/MWh).
    pub tau: f64,
    pub power_channel: usize,
    pub temp_channel: usize,
    /// Physical power = `power_offset + power_gain * y`.
    pub power_offset: f64,
    pub power_gain: f64,
    pub temp_offset: f64,
    pub temp_gain: f64,
    /// Weight on `|T_H − T*|`, currency per physical temperature unit.
    pub c_t: f64,
    pub t_ref: f64,
    /// Smoothing of the absolute value, physical temperature units.
    pub kappa: f64,
}

/// `Σ_c q_c (y_c − r_c)²` per stage, optional terminal weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticCost {
    pub weights: Vec<f64>,
    pub reference: Vec<f64>,
    #[serde(default)]
    pub terminal_weights: Vec<f64>,
    /// Output range over which the Lipschitz constant is taken.
    pub y_lo: Vec<f64>,
    pub y_hi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CostSpec {
    Economic(EconomicCost),
    Quadratic(QuadraticCost),
}

impl CostSpec {
    pub fn validate(&self, n_y: usize) -> Result<()> {
        match self {
            CostSpec::Economic(c) => {
                if c.prices.is_empty() {
                    return Err(Error::Config("price series is empty".into()));
                }
                if c.power_channel >= n_y || c.temp_channel >= n_y {
                    return Err(Error::Config("cost channel out of range".into()));
                }
                if !(c.tau > 0.0 && c.kappa > 0.0 && c.c_t >= 0.0) {
                    return Err(Error::Config("economic cost needs tau, kappa > 0 and c_t ≥ 0".into()));
                }
            }
            CostSpec::Quadratic(c) => {
                let ok = c.weights.len() == n_y
                    && c.reference.len() == n_y
                    && c.y_lo.len() == n_y
                    && c.y_hi.len() == n_y
                    && (c.terminal_weights.is_empty() || c.terminal_weights.len() == n_y);
                if !ok {
                    return Err(Error::Config("quadratic cost dimensions do not match outputs".into()));
                }
            }
        }
        Ok(())
    }

    /// Stage cost at absolute time `t`; `grad` receives `∂ℓ/∂y`.
    pub fn stage(&self, t: usize, y: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        match self {
            CostSpec::Economic(c) => {
                let price = c.prices[t % c.prices.len()];
                let p = c.power_offset + c.power_gain * y[c.power_channel];
                grad[c.power_channel] = price * c.tau * c.power_gain;
                price * c.tau * p
            }
            CostSpec::Quadratic(c) => {
                let mut v = 0.0;
                for i in 0..y.len() {
                    let d = y[i] - c.reference[i];
                    v += c.weights[i] * d * d;
                    grad[i] = 2.0 * c.weights[i] * d;
                }
                v
            }
        }
    }

    /// Terminal cost on the output at the end of the horizon.
    pub fn terminal(&self, y: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        match self {
            CostSpec::Economic(c) => {
                let s = c.temp_offset + c.temp_gain * y[c.temp_channel] - c.t_ref;
                let r = (s * s + c.kappa * c.kappa).sqrt();
                grad[c.temp_channel] = c.c_t * c.temp_gain * s / r;
                c.c_t * (r - c.kappa)
            }
            CostSpec::Quadratic(c) => {
                if c.terminal_weights.is_empty() {
                    return 0.0;
                }
                let mut v = 0.0;
                for i in 0..y.len() {
                    let d = y[i] - c.reference[i];
                    v += c.terminal_weights[i] * d * d;
                    grad[i] = 2.0 * c.terminal_weights[i] * d;
                }
                v
            }
        }
    }

    /// Per-channel slope bound `L_c ≥ sup |∂ℓ/∂y_c|`.
    pub fn lipschitz(&self, n_y: usize) -> Vec<f64> {
        let mut l = vec![0.0; n_y];
        match self {
            CostSpec::Economic(c) => {
                let pmax = c.prices.iter().fold(0.0f64, |m, p| m.max(p.abs()));
                l[c.power_channel] += pmax * c.tau * c.power_gain.abs();
                l[c.temp_channel] += c.c_t * c.temp_gain.abs();
            }
            CostSpec::Quadratic(c) => {
                for i in 0..n_y {
                    let dev = (c.y_hi[i] - c.reference[i]).abs().max((c.y_lo[i] - c.reference[i]).abs());
                    let w = c.weights[i].max(c.terminal_weights.get(i).copied().unwrap_or(0.0));
                    l[i] = 2.0 * w * dev;
                }
            }
        }
        l
    }
}

/// Free-function form of [`CostSpec::lipschitz`].
pub fn lipschitz_of(cost: &CostSpec, n_y: usize) -> Vec<f64> {
    cost.lipschitz(n_y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn economic(prices: Vec<f64>) -> CostSpec {
        CostSpec::Economic(EconomicCost {
            prices,
            tau: 1.0,
            power_channel: 1,
            temp_channel: 0,
            power_offset: 0.0,
            power_gain: 1.0,
            temp_offset: 0.0,
            temp_gain: 1.0,
            c_t: 2.0,
            t_ref: 80.0,
            kappa: 1e-3,
        })
    }

    #[test]
    fn constant_price_lipschitz() {
        assert_eq!(lipschitz_of(&economic(vec![1.0; 5]), 2), vec![2.0, 1.0]);
    }

    #[test]
    fn series_lipschitz_uses_peak_price() {
        let c = economic(vec![80.0, 250.0, 120.0]);
        assert_eq!(c.lipschitz(2), vec![2.0, 250.0]);
    }

    #[test]
    fn quadratic_lipschitz_is_twice_weight_times_max_deviation() {
        let c = CostSpec::Quadratic(QuadraticCost {
            weights: vec![3.0],
            reference: vec![0.2],
            terminal_weights: vec![],
            y_lo: vec![-1.0],
            y_hi: vec![1.0],
        });
        assert_relative_eq!(c.lipschitz(1)[0], 2.0 * 3.0 * 1.2);
    }

    #[test]
    fn stage_and_terminal_values_and_slopes() {
        let c = economic(vec![10.0, 20.0]);
        let mut g = [0.0; 2];
        assert_eq!(c.stage(3, &[0.0, 1.5], &mut g), 30.0);
        assert_eq!(g, [0.0, 20.0]);
        let v = c.terminal(&[83.0, 0.0], &mut g);
        assert_relative_eq!(v, 2.0 * ((9.0f64 + 1e-6).sqrt() - 1e-3), epsilon = 1e-12);
        assert_relative_eq!(g[0], 2.0, epsilon = 1e-6);
        // Slopes never exceed the Lipschitz bound.
        let l = c.lipschitz(2);
        for y in [70.0, 79.9999, 80.0, 95.0] {
            c.terminal(&[y, 0.0], &mut g);
            assert!(g[0].abs() <= l[0] + 1e-12);
        }
    }
}
