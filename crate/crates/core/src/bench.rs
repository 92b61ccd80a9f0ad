//! The synthetic heating benchmark, baselines, cost table and the oracles
//! behind the acceptance checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bayes::{BllPrior, Learner};
use crate::confidence::{BoxWindow, OutputBox, StateBox};
use crate::dynamics::{augment, ModelFile, Plant};
use crate::error::{Error, Result};
use crate::linalg::{dot, identity};
use crate::mpc::{equilibrium, CostSpec, EconomicCost, QuadraticCost, Sets};
use crate::orchestrator::{run, run_observed, AlgoConfig, Mode, Phase, RunLog, Scenario};
use crate::sweep;

/// Frozen benchmark plant: six hidden states, supply temperature in,
/// node temperature and power out.
pub const BENCHMARK_MODEL: &str = include_str!("../data/benchmark_model.toml");

pub fn benchmark_model() -> ModelFile {
    ModelFile::parse(BENCHMARK_MODEL).expect("shipped model file is valid")
}

/// Day-ahead style hourly prices, €/MWh, with morning and evening peaks.
pub const HOURLY_PRICES: [f64; 26] = [
    95.0, 88.0, 82.0, 80.0, 84.0, 98.0, 140.0, 210.0, 250.0, 195.0, 150.0, 130.0, 120.0, 115.0, 118.0, 135.0,
    170.0, 230.0, 245.0, 205.0, 160.0, 130.0, 110.0, 100.0, 95.0, 88.0,
];

/// Physical description of the benchmark. Temperatures in °C, power in MW.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Benchmark {
    pub hourly_prices: Vec<f64>,
    pub steps_per_hour: usize,
    /// Sampling time in hours.
    pub tau: f64,
    pub steps: usize,
    pub input_min: f64,
    pub input_max: f64,
    pub rule_input: f64,
    pub state_radius: f64,
    pub temp_min: f64,
    pub temp_max: f64,
    /// Raised lower temperature bound during `[day_from, day_to)`.
    pub temp_day_min: f64,
    pub day_from: usize,
    pub day_to: usize,
    pub power_min: f64,
    pub power_max: f64,
    pub c_t: f64,
    pub t_ref: f64,
    pub kappa: f64,
    /// `θ₀ = prior_scale · θ*`.
    pub prior_scale: f64,
    /// `Λ₀ = prior_precision · I`.
    pub prior_precision: f64,
    /// `C = cap_c_factor · ‖θ* − θ₀‖²_{Λ₀}`.
    pub cap_c_factor: f64,
    pub sigma2: f64,
}

impl Default for Benchmark {
    fn default() -> Self {
        Self {
            hourly_prices: HOURLY_PRICES.to_vec(),
            steps_per_hour: 12,
            tau: 5.0 / 60.0,
            steps: 288,
            input_min: 60.0,
            input_max: 90.0,
            rule_input: 80.0,
            state_radius: 1.0,
            temp_min: 60.0,
            temp_max: 95.0,
            temp_day_min: 70.0,
            day_from: 84,
            day_to: 252,
            power_min: 0.5,
            power_max: 2.5,
            c_t: 1.5,
            t_ref: 80.0,
            kappa: 1e-3,
            prior_scale: 0.3,
            prior_precision: 0.08,
            cap_c_factor: 1.1,
            sigma2: 0.001,
        }
    }
}

/// Output channel order in the shipped model.
const TEMP: usize = 0;
const POWER: usize = 1;

impl Benchmark {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        if self.hourly_prices.len() * self.steps_per_hour < self.steps + horizon {
            return Err(Error::Config(format!(
                "price series covers {} steps, need steps + horizon = {}",
                self.hourly_prices.len() * self.steps_per_hour,
                self.steps + horizon
            )));
        }
        if !(self.input_min < self.rule_input && self.rule_input < self.input_max) {
            return Err(Error::Config("rule input must lie inside the input box".into()));
        }
        if !(self.sigma2 > 0.0 && self.tau > 0.0) {
            return Err(Error::Config("sigma2 and tau must be positive".into()));
        }
        Ok(())
    }

    /// Per-step price series.
    pub fn prices(&self) -> Vec<f64> {
        self.hourly_prices
            .iter()
            .flat_map(|p| std::iter::repeat_n(*p, self.steps_per_hour))
            .collect()
    }

    pub fn cost(&self, model: &ModelFile) -> CostSpec {
        let os = &model.output_scaling;
        CostSpec::Economic(EconomicCost {
            prices: self.prices(),
            tau: self.tau,
            power_channel: POWER,
            temp_channel: TEMP,
            power_offset: os.offset[POWER],
            power_gain: os.gain[POWER],
            temp_offset: os.offset[TEMP],
            temp_gain: os.gain[TEMP],
            c_t: self.c_t,
            t_ref: self.t_ref,
            kappa: self.kappa,
        })
    }

    /// Closed-loop scenario in model units.
    pub fn scenario(&self, model: &ModelFile) -> Result<Scenario> {
        let gru = model.gru_model()?;
        let (is, os) = (&model.input_scaling, &model.output_scaling);
        let y = |c: usize, v: f64| os.to_scaled(c, v);
        let ybox = OutputBox {
            y_min: vec![y(TEMP, self.temp_min), y(POWER, self.power_min)],
            y_max: vec![y(TEMP, self.temp_max), y(POWER, self.power_max)],
            windows: vec![BoxWindow {
                channel: TEMP,
                from: self.day_from,
                to: self.day_to,
                y_min: Some(y(TEMP, self.temp_day_min)),
                y_max: None,
            }],
            period: self.steps_per_hour * 24,
        };
        ybox.validate()?;
        let ubox = StateBox {
            lo: vec![is.to_scaled(0, self.input_min)],
            hi: vec![is.to_scaled(0, self.input_max)],
        };
        let u_rule = vec![is.to_scaled(0, self.rule_input)];
        let x0 = equilibrium(&gru, &u_rule)
            .ok_or_else(|| Error::Config("benchmark model has no equilibrium at the rule input".into()))?;
        let priors = model
            .theta_star
            .iter()
            .map(|th| prior_from_truth(th, self.prior_scale, self.prior_precision, self.cap_c_factor, self.sigma2))
            .collect();
        Ok(Scenario {
            model: gru,
            theta_star: model.theta_star.clone(),
            noise: model.noise,
            priors,
            sets: Sets {
                xbox: StateBox::symmetric(model.n_x, self.state_radius),
                ubox,
                ybox,
            },
            cost: self.cost(model),
            x0,
            u_rule,
            input_scaling: model.input_scaling.clone(),
            output_scaling: model.output_scaling.clone(),
            input_names: model.input_names.clone(),
            output_names: model.output_names.clone(),
        })
    }

    /// Algorithm settings used for the benchmark: the terminal input is the
    /// rule-based operating point.
    pub fn algo_config(&self, model: &ModelFile) -> AlgoConfig {
        let mut cfg = AlgoConfig {
            eps: 5.0 * self.sigma2.sqrt(),
            ..AlgoConfig::default()
        };
        cfg.terminal.u_eq = Some(vec![model.input_scaling.to_scaled(0, self.rule_input)]);
        cfg
    }
}

/// `θ₀ = s θ*`, `Λ₀ = λ I`, `C = f ‖θ* − θ₀‖²_{Λ₀}`.
pub fn prior_from_truth(theta_star: &[f64], scale: f64, precision: f64, factor: f64, sigma2: f64) -> BllPrior {
    let n = theta_star.len();
    let theta0: Vec<f64> = theta_star.iter().map(|t| scale * t).collect();
    let mut lambda0 = identity(n);
    lambda0.iter_mut().for_each(|v| *v *= precision);
    let dist: f64 = theta_star
        .iter()
        .zip(&theta0)
        .map(|(a, b)| precision * (a - b) * (a - b))
        .sum();
    BllPrior {
        theta0,
        lambda0,
        sigma2,
        cap_c: (factor * dist).max(1e-12),
        delta: 0.01,
    }
}

/// Constant-input baseline.
pub fn rule_based(scenario: &Scenario, cfg: &AlgoConfig, steps: usize, seed: u64) -> Result<RunLog> {
    run(scenario, cfg, Mode::Rule, steps, seed)
}

/// Certainty-equivalent MPC with the true output parameters.
pub fn omniscient_mpc(scenario: &Scenario, cfg: &AlgoConfig, steps: usize, seed: u64) -> Result<RunLog> {
    run(scenario, cfg, Mode::Omniscient, steps, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub controller: String,
    pub cost: f64,
    /// Savings relative to the rule-based row, percent.
    pub savings_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostTable {
    pub rows: Vec<CostRow>,
    /// Share of the omniscient savings recovered by the learning controller.
    pub recovery: f64,
}

pub fn savings_pct(reference: f64, cost: f64) -> f64 {
    if reference == 0.0 {
        0.0
    } else {
        100.0 * (reference - cost) / reference
    }
}

/// Three-row comparison of realized costs.
pub fn summarize(rule: &RunLog, omni: &RunLog, learn: &RunLog) -> CostTable {
    let c_rule = rule.summary.realized_cost;
    let c_omni = omni.summary.realized_cost;
    let c_learn = learn.summary.realized_cost;
    let row = |name: &str, c: f64| CostRow {
        controller: name.to_string(),
        cost: c,
        savings_pct: savings_pct(c_rule, c),
    };
    let spread = c_rule - c_omni;
    CostTable {
        rows: vec![row("rule-based", c_rule), row("omniscient", c_omni), row("learning", c_learn)],
        recovery: if spread == 0.0 { 1.0 } else { (c_rule - c_learn) / spread },
    }
}

impl CostTable {
    pub fn render(&self) -> String {
        let mut s = format!("{:<12} {:>12} {:>9}\n", "controller", "cost", "savings");
        for r in &self.rows {
            s.push_str(&format!("{:<12} {:>12.2} {:>8.2}%\n", r.controller, r.cost, r.savings_pct));
        }
        s.push_str(&format!("recovery of omniscient savings: {:.1}%\n", 100.0 * self.recovery));
        s
    }
}

/// Settings of the Monte Carlo check of the anytime confidence bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub seeds: usize,
    pub first_seed: u64,
    pub steps: usize,
    pub delta: f64,
    /// Split δ over channels so the any-channel event keeps level δ.
    pub union_bound: bool,
    /// Inputs are redrawn after a uniform number of steps in `1..=hold_max`.
    pub hold_max: usize,
    /// Random features probed per step besides the visited one.
    pub probes: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            seeds: 500,
            first_seed: 0,
            steps: 2000,
            delta: 0.05,
            union_bound: true,
            hold_max: 12,
            probes: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub seeds: usize,
    pub steps: usize,
    pub delta: f64,
    /// Seeds with a violation on some channel at some step.
    pub violating_seeds: usize,
    pub rate: f64,
    /// Violating seeds per channel.
    pub per_channel: Vec<usize>,
    /// Largest `|θ*ᵀx − μ(x)| / w(x)` seen anywhere.
    pub worst_ratio: f64,
    pub passed: bool,
}

impl CalibrationReport {
    pub fn render(&self) -> String {
        format!(
            "calibration: {} of {} seeds violated the anytime bound (rate {:.4}, δ = {}), per channel {:?}, worst |err|/w = {:.3}: {}",
            self.violating_seeds,
            self.seeds,
            self.rate,
            self.delta,
            self.per_channel,
            self.worst_ratio,
            if self.passed { "pass" } else { "FAIL" }
        )
    }
}

struct SeedCalibration {
    violated: Vec<bool>,
    worst_ratio: f64,
}

fn calibrate_seed(scenario: &Scenario, cfg: &CalibrationConfig, seed: u64) -> Result<SeedCalibration> {
    let n_y = scenario.priors.len();
    let delta = if cfg.union_bound { cfg.delta / n_y as f64 } else { cfg.delta };
    let priors = scenario.priors.iter().map(|p| BllPrior { delta, ..p.clone() }).collect();
    let mut learner = Learner::new(priors)?;
    let mut plant = Plant::new(scenario.model.clone(), scenario.theta_star.clone(), scenario.noise, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ca1b);
    let (lo, hi) = (&scenario.sets.ubox.lo, &scenario.sets.ubox.hi);
    let n_x = scenario.model.n_x;
    let mut x = scenario.x0.clone();
    let mut u: Vec<f64> = Vec::new();
    let mut hold = 0;
    let mut out = SeedCalibration { violated: vec![false; n_y], worst_ratio: 0.0 };
    let check = |learner: &Learner, f: &[f64], out: &mut SeedCalibration| {
        let mu = learner.means(f);
        let w = learner.widths(f);
        for c in 0..n_y {
            let err = (dot(&scenario.theta_star[c], f) - mu[c]).abs();
            if err > w[c] {
                out.violated[c] = true;
            }
            if w[c] > 0.0 {
                out.worst_ratio = out.worst_ratio.max(err / w[c]);
            }
        }
    };
    let mut probe = vec![0.0; n_x + 1];
    for _ in 0..cfg.steps {
        if hold == 0 {
            u = lo.iter().zip(hi).map(|(a, b)| rng.random_range(*a..=*b)).collect();
            hold = rng.random_range(1..=cfg.hold_max.max(1));
        }
        hold -= 1;
        let (_, y_meas) = plant.measure(&x);
        let f = augment(&x);
        learner.update(&f, &y_meas)?;
        check(&learner, &f, &mut out);
        for _ in 0..cfg.probes {
            for v in probe.iter_mut().take(n_x) {
                *v = rng.random_range(-1.0..=1.0);
            }
            probe[n_x] = 1.0;
            check(&learner, &probe, &mut out);
        }
        x = scenario.model.step(&x, &u);
    }
    Ok(out)
}

/// Drive the plant with random inputs from the input box, update the
/// posterior every step and record whether `|θ*ᵀx − μ_k(x)| ≤ w_k(x)` ever
/// fails at the visited feature or at random probes in the state box.
pub fn calibrate(scenario: &Scenario, cfg: &CalibrationConfig) -> Result<CalibrationReport> {
    if !(cfg.delta > 0.0 && cfg.delta < 1.0) {
        return Err(Error::Config("calibration delta must lie in (0, 1)".into()));
    }
    let seeds: Vec<u64> = (0..cfg.seeds as u64).map(|i| cfg.first_seed + i).collect();
    let results = sweep::map(&seeds, |s| calibrate_seed(scenario, cfg, *s))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let n_y = scenario.priors.len();
    let per_channel = (0..n_y).map(|c| results.iter().filter(|r| r.violated[c]).count()).collect();
    let violating_seeds = results.iter().filter(|r| r.violated.iter().any(|v| *v)).count();
    let rate = if cfg.seeds == 0 { 0.0 } else { violating_seeds as f64 / cfg.seeds as f64 };
    Ok(CalibrationReport {
        seeds: cfg.seeds,
        steps: cfg.steps,
        delta: cfg.delta,
        violating_seeds,
        rate,
        per_channel,
        worst_ratio: results.iter().map(|r| r.worst_ratio).fold(0.0, f64::max),
        passed: rate <= cfg.delta,
    })
}

/// Two-state, one-input, one-output plant for the enumeration oracle.
pub const TINY_MODEL: &str = include_str!("../data/tiny_model.toml");

pub fn tiny_model() -> ModelFile {
    ModelFile::parse(TINY_MODEL).expect("shipped model file is valid")
}

/// The brute-force instance: horizon 2, scalar input on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TinyInstance {
    pub horizon: usize,
    pub grid: usize,
    pub refine_grid: usize,
    pub seeds: Vec<u64>,
    /// Closed-loop steps simulated per seed.
    pub steps: usize,
    pub u_min: f64,
    pub u_max: f64,
    pub u_eq: f64,
    pub state_radius: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub weight: f64,
    pub reference: f64,
    pub prior_scale: f64,
    pub prior_precision: f64,
    pub cap_c_factor: f64,
    pub sigma2: f64,
    /// Allowed excess over `min + ξ`.
    pub tol: f64,
    /// Allowed change of the enumerated minimum under refinement.
    pub refine_tol: f64,
}

impl Default for TinyInstance {
    fn default() -> Self {
        Self {
            horizon: 2,
            grid: 201,
            refine_grid: 401,
            seeds: (1..=20).collect(),
            steps: 30,
            u_min: -1.0,
            u_max: 1.0,
            u_eq: 0.0,
            state_radius: 1.0,
            y_min: -0.8,
            y_max: 0.7,
            weight: 1.0,
            reference: 0.5,
            prior_scale: 0.7,
            prior_precision: 1.0,
            cap_c_factor: 1.1,
            sigma2: 1e-4,
            tol: 1e-4,
            refine_tol: 1e-3,
        }
    }
}

impl TinyInstance {
    pub fn scenario(&self, model: &ModelFile) -> Result<Scenario> {
        if model.n_x != 2 || model.n_u != 1 || model.n_y != 1 {
            return Err(Error::Config("the enumeration instance needs n_x = 2, n_u = 1, n_y = 1".into()));
        }
        let gru = model.gru_model()?;
        let x0 = equilibrium(&gru, &[self.u_eq])
            .ok_or_else(|| Error::Config("tiny model has no equilibrium at u_eq".into()))?;
        Ok(Scenario {
            model: gru,
            theta_star: model.theta_star.clone(),
            noise: model.noise,
            priors: model
                .theta_star
                .iter()
                .map(|th| prior_from_truth(th, self.prior_scale, self.prior_precision, self.cap_c_factor, self.sigma2))
                .collect(),
            sets: Sets {
                xbox: StateBox::symmetric(2, self.state_radius),
                ubox: StateBox { lo: vec![self.u_min], hi: vec![self.u_max] },
                ybox: OutputBox::fixed(vec![self.y_min], vec![self.y_max]),
            },
            cost: CostSpec::Quadratic(QuadraticCost {
                weights: vec![self.weight],
                reference: vec![self.reference],
                terminal_weights: Vec::new(),
                y_lo: vec![self.y_min],
                y_hi: vec![self.y_max],
            }),
            x0,
            u_rule: vec![self.u_eq],
            input_scaling: model.input_scaling.clone(),
            output_scaling: model.output_scaling.clone(),
            input_names: model.input_names.clone(),
            output_names: model.output_names.clone(),
        })
    }

    pub fn algo_config(&self) -> AlgoConfig {
        let mut cfg = AlgoConfig {
            eps: 5.0 * self.sigma2.sqrt(),
            horizon: self.horizon,
            ..AlgoConfig::default()
        };
        cfg.terminal.u_eq = Some(vec![self.u_eq]);
        cfg
    }
}

/// `J_k(x, θ*, u) = Σ_{h<H} ℓ_{k+h}(θ*ᵀ x_h)` along the nominal rollout.
pub fn true_cost(scenario: &Scenario, x: &[f64], k: usize, u_seq: &[f64]) -> f64 {
    let n_u = scenario.model.n_u;
    let mut g = vec![0.0; scenario.theta_star.len()];
    let mut x = x.to_vec();
    let mut j = 0.0;
    for (h, u) in u_seq.chunks(n_u).enumerate() {
        let y: Vec<f64> = scenario.theta_star.iter().map(|th| dot(th, &augment(&x))).collect();
        j += scenario.cost.stage(k + h, &y, &mut g);
        x = scenario.model.step(&x, u);
    }
    j
}

/// Result of enumerating the true 2ε-tightened input set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Enumeration {
    pub min: f64,
    pub argmin: Vec<f64>,
    pub feasible: usize,
    pub total: usize,
}

fn y_ok(scenario: &Scenario, t: usize, x: &[f64], margin: f64) -> bool {
    if !scenario.sets.xbox.contains(x) {
        return false;
    }
    let (lo, hi) = scenario.sets.ybox.at(t);
    let f = augment(x);
    scenario
        .theta_star
        .iter()
        .enumerate()
        .all(|(c, th)| {
            let y = dot(th, &f);
            y >= lo[c] + margin && y <= hi[c] - margin
        })
}

/// Membership of `u_seq` in `𝒰^{*,2ε}_k(x)` as used by [`enumerate_optimum`].
pub fn in_true_tightened_set(
    scenario: &Scenario,
    x: &[f64],
    k: usize,
    u_seq: &[f64],
    terminal: &StateBox,
    eps: f64,
) -> bool {
    let Some(ubox) = scenario.sets.ubox.shrink(2.0 * eps) else {
        return false;
    };
    let n_u = scenario.model.n_u;
    let mut x = x.to_vec();
    for (h, u) in u_seq.chunks(n_u).enumerate() {
        if !ubox.contains(u) || !y_ok(scenario, k + h, &x, 2.0 * eps) {
            return false;
        }
        x = scenario.model.step(&x, u);
    }
    terminal.contains(&x)
}

/// Minimum of `J_k(x, θ*, ·)` over all grid sequences in `𝒰^{*,2ε}_k(x)`:
/// inputs in `𝒰 ⊖ B_2ε`, true outputs in `𝒴 ⊖ B_2ε` for `h < H`, and the
/// terminal state in `terminal`. `None` when no grid sequence qualifies.
pub fn enumerate_optimum(
    scenario: &Scenario,
    x: &[f64],
    k: usize,
    terminal: &StateBox,
    eps: f64,
    horizon: usize,
    grid: usize,
) -> Result<Option<Enumeration>> {
    if scenario.model.n_u != 1 {
        return Err(Error::Config("enumeration needs a scalar input".into()));
    }
    if grid < 2 {
        return Err(Error::Config("grid needs at least two points".into()));
    }
    let Some(ubox) = scenario.sets.ubox.shrink(2.0 * eps) else {
        return Ok(None);
    };
    let values: Vec<f64> = (0..grid)
        .map(|i| ubox.lo[0] + (ubox.hi[0] - ubox.lo[0]) * i as f64 / (grid - 1) as f64)
        .collect();
    let mut best: Option<Enumeration> = None;
    let mut feasible = 0;
    let mut seq = Vec::with_capacity(horizon);
    let mut g = vec![0.0; scenario.theta_star.len()];
    #[allow(clippy::too_many_arguments)]
    fn descend(
        sc: &Scenario,
        x: &[f64],
        k: usize,
        h: usize,
        horizon: usize,
        cost: f64,
        values: &[f64],
        terminal: &StateBox,
        eps: f64,
        seq: &mut Vec<f64>,
        g: &mut [f64],
        feasible: &mut usize,
        best: &mut Option<Enumeration>,
    ) {
        if h == horizon {
            if terminal.contains(x) {
                *feasible += 1;
                if best.as_ref().is_none_or(|b| cost < b.min) {
                    *best = Some(Enumeration { min: cost, argmin: seq.clone(), feasible: 0, total: 0 });
                }
            }
            return;
        }
        if !y_ok(sc, k + h, x, 2.0 * eps) {
            return;
        }
        let f = augment(x);
        let y: Vec<f64> = sc.theta_star.iter().map(|th| dot(th, &f)).collect();
        let stage = sc.cost.stage(k + h, &y, g);
        for u in values {
            let next = sc.model.step(x, &[*u]);
            seq.push(*u);
            descend(sc, &next, k, h + 1, horizon, cost + stage, values, terminal, eps, seq, g, feasible, best);
            seq.pop();
        }
    }
    descend(scenario, x, k, 0, horizon, 0.0, &values, terminal, eps, &mut seq, &mut g, &mut feasible, &mut best);
    let total = grid.pow(horizon as u32);
    Ok(best.map(|b| Enumeration { feasible, total, ..b }))
}

/// One checked goal-reaching step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleCase {
    pub seed: u64,
    pub k: usize,
    /// `J_k(x_k, θ*, u^p)`.
    pub j_true: f64,
    /// Enumerated minimum; `None` when the tightened set had no grid point.
    pub enum_min: Option<f64>,
    pub feasible: usize,
    /// `min + ξ + tol − J`; nonnegative means the inequality holds.
    pub slack: Option<f64>,
    /// Drop of the minimum when the grid is refined (first case per seed).
    pub refinement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Certificate {
    pub xi: f64,
    pub tol: f64,
    pub cases: Vec<OracleCase>,
    /// Seeds that produced no goal-reaching step.
    pub seeds_without_cases: Vec<u64>,
    /// Seeds whose run ended in an infeasibility fault.
    pub faulted_seeds: Vec<u64>,
    pub passed: bool,
}

impl Certificate {
    pub fn empty_cases(&self) -> usize {
        self.cases.iter().filter(|c| c.enum_min.is_none()).count()
    }

    pub fn failed_cases(&self) -> usize {
        self.cases.iter().filter(|c| c.slack.is_some_and(|s| s < 0.0)).count()
    }

    pub fn worst_refinement(&self) -> f64 {
        self.cases.iter().filter_map(|c| c.refinement).fold(0.0, f64::max)
    }

    pub fn min_slack(&self) -> f64 {
        self.cases.iter().filter_map(|c| c.slack).fold(f64::INFINITY, f64::min)
    }

    pub fn render(&self) -> String {
        format!(
            "oracle: {} goal-reaching cases, {} violate J ≤ min + ξ + {} (ξ = {:.4}), {} empty enumerations, smallest slack {:.4}, worst refinement change {:.2e}, {} seeds without cases, {} faulted: {}",
            self.cases.len(),
            self.failed_cases(),
            self.tol,
            self.xi,
            self.empty_cases(),
            self.min_slack(),
            self.worst_refinement(),
            self.seeds_without_cases.len(),
            self.faulted_seeds.len(),
            if self.passed { "pass" } else { "FAIL" }
        )
    }
}

fn oracle_seed(inst: &TinyInstance, sc: &Scenario, cfg: &AlgoConfig, seed: u64) -> Result<(Vec<OracleCase>, f64, bool)> {
    let mut cases = Vec::new();
    let mut err: Option<Error> = None;
    let mut xi = 0.0;
    let log = run_observed(sc, cfg, Mode::Learn, inst.steps, seed, &mut |v| {
        xi = v.xi;
        if err.is_some() || v.phase != Phase::GoalReaching {
            return;
        }
        let Some(plan) = v.plan else { return };
        let j_true = true_cost(sc, v.x, v.k, plan);
        let Some(terminal) = v.terminal.shrunk(2.0 * cfg.eps) else {
            cases.push(OracleCase { seed, k: v.k, j_true, enum_min: None, feasible: 0, slack: None, refinement: None });
            return;
        };
        let first = cases.is_empty();
        let found = enumerate_optimum(sc, v.x, v.k, &terminal, cfg.eps, inst.horizon, inst.grid);
        let refined = if first {
            enumerate_optimum(sc, v.x, v.k, &terminal, cfg.eps, inst.horizon, inst.refine_grid)
        } else {
            Ok(None)
        };
        match (found, refined) {
            (Ok(e), Ok(r)) => {
                let enum_min = e.as_ref().map(|e| e.min);
                cases.push(OracleCase {
                    seed,
                    k: v.k,
                    j_true,
                    enum_min,
                    feasible: e.as_ref().map_or(0, |e| e.feasible),
                    slack: enum_min.map(|m| m + v.xi + inst.tol - j_true),
                    refinement: match (enum_min, r) {
                        (Some(a), Some(b)) => Some((a - b.min).abs()),
                        _ => None,
                    },
                });
            }
            (Err(e), _) | (_, Err(e)) => err = Some(e),
        }
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    Ok((cases, xi, log.summary.fault.is_some()))
}

/// Run the learning controller on the tiny instance for every seed and
/// check, at every goal-reaching step, that the applied pessimistic plan is
/// within `ξ` (plus `tol`) of the best true-model plan found by enumeration.
pub fn brute_force_close_to_opt(inst: &TinyInstance) -> Result<Certificate> {
    let model = tiny_model();
    let sc = inst.scenario(&model)?;
    let cfg = inst.algo_config();
    let results = sweep::map(&inst.seeds, |s| oracle_seed(inst, &sc, &cfg, *s))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut cert = Certificate {
        xi: results.first().map_or(0.0, |r| r.1),
        tol: inst.tol,
        cases: Vec::new(),
        seeds_without_cases: Vec::new(),
        faulted_seeds: Vec::new(),
        passed: false,
    };
    for (seed, (cases, _, faulted)) in inst.seeds.iter().zip(results) {
        if cases.is_empty() {
            cert.seeds_without_cases.push(*seed);
        }
        if faulted {
            cert.faulted_seeds.push(*seed);
        }
        cert.cases.extend(cases);
    }
    cert.passed = !cert.cases.is_empty()
        && cert.failed_cases() == 0
        && cert.empty_cases() == 0
        && cert.seeds_without_cases.is_empty()
        && cert.faulted_seeds.is_empty()
        && cert.worst_refinement() < inst.refine_tol;
    Ok(cert)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn savings_formula_matches_table_example() {
        let p = savings_pct(7458.89, 7199.90);
        assert_relative_eq!(p, 3.472_232_463_543_512, epsilon = 1e-12);
        assert_eq!(format!("{p:.1}"), "3.5");
        assert!((p * 10.0).floor() / 10.0 == 3.4);
    }

    #[test]
    fn benchmark_model_sits_at_the_operating_point() {
        let m = benchmark_model();
        let b = Benchmark::default();
        let sc = b.scenario(&m).unwrap();
        let y = crate::dynamics::Plant::new(sc.model.clone(), sc.theta_star.clone(), sc.noise, 0)
            .unwrap()
            .output(&sc.x0);
        assert_relative_eq!(m.output_scaling.to_physical(0, y[0]), 80.0, epsilon = 0.05);
        assert_relative_eq!(m.output_scaling.to_physical(1, y[1]), 1.5, epsilon = 0.01);
        b.validate(24).unwrap();
    }

    #[test]
    fn lipschitz_from_shipped_series() {
        let m = benchmark_model();
        let b = Benchmark::default();
        let l = b.cost(&m).lipschitz(2);
        assert_relative_eq!(l[0], 1.5 * 12.5);
        assert_relative_eq!(l[1], 250.0 * 5.0 / 60.0 * 0.5);
    }

    #[test]
    fn rule_based_cost_with_zero_and_constant_prices() {
        let m = benchmark_model();
        let zero = Benchmark { hourly_prices: vec![0.0; 26], ..Default::default() };
        let sc = zero.scenario(&m).unwrap();
        let cfg = zero.algo_config(&m);
        assert_eq!(rule_based(&sc, &cfg, 50, 1).unwrap().summary.realized_cost, 0.0);

        let flat = Benchmark { hourly_prices: vec![120.0; 26], ..Default::default() };
        let sc = flat.scenario(&m).unwrap();
        let log = rule_based(&sc, &flat.algo_config(&m), 40, 1).unwrap();
        // The rule input holds the plant at its equilibrium, so power is constant.
        let p = log.records[0].y_star[1];
        assert_relative_eq!(log.summary.realized_cost, 120.0 * p * flat.tau * 40.0, max_relative = 1e-9);
    }

    #[test]
    fn calibration_holds_with_valid_c_and_breaks_without() {
        let m = benchmark_model();
        let b = Benchmark::default();
        let sc = b.scenario(&m).unwrap();
        let cfg = CalibrationConfig { seeds: 20, steps: 300, ..Default::default() };
        let rep = calibrate(&sc, &cfg).unwrap();
        assert!(rep.passed, "{}", rep.render());
        assert!(rep.worst_ratio < 1.0);

        // A C far below ‖θ* − θ₀‖²_Λ₀ voids the guarantee; the check must notice.
        let mut bad = sc.clone();
        bad.priors.iter_mut().for_each(|p| p.cap_c *= 1e-6);
        let rep = calibrate(&bad, &cfg).unwrap();
        assert!(!rep.passed && rep.violating_seeds > 10, "{}", rep.render());
    }

    #[test]
    fn enumeration_reports_empty_set() {
        let inst = TinyInstance::default();
        let mut sc = inst.scenario(&tiny_model()).unwrap();
        let term = StateBox::symmetric(2, 1.0);
        let e = enumerate_optimum(&sc, &sc.x0.clone(), 0, &term, 0.05, 2, 21).unwrap().unwrap();
        assert_eq!(e.total, 21 * 21);
        assert!(e.feasible > 0 && e.feasible <= e.total);
        // Output box tightened below the current output: nothing qualifies.
        sc.sets.ybox = OutputBox::fixed(vec![-0.8], vec![0.1]);
        assert!(enumerate_optimum(&sc, &sc.x0.clone(), 0, &term, 0.05, 2, 21).unwrap().is_none());
    }

    #[test]
    fn enumeration_minimum_is_a_lower_bound_on_grid_sequences() {
        let inst = TinyInstance::default();
        let sc = inst.scenario(&tiny_model()).unwrap();
        let term = StateBox::symmetric(2, 1.0);
        let e = enumerate_optimum(&sc, &sc.x0.clone(), 0, &term, 0.05, 2, 11).unwrap().unwrap();
        assert_relative_eq!(true_cost(&sc, &sc.x0, 0, &e.argmin), e.min, epsilon = 1e-12);
        assert!(in_true_tightened_set(&sc, &sc.x0, 0, &e.argmin, &term, 0.05));
        let mut members = 0;
        for a in 0..11 {
            for b in 0..11 {
                let u = [-0.9 + 0.18 * a as f64, -0.9 + 0.18 * b as f64];
                if in_true_tightened_set(&sc, &sc.x0, 0, &u, &term, 0.05) {
                    members += 1;
                    assert!(true_cost(&sc, &sc.x0, 0, &u) >= e.min - 1e-12);
                }
            }
        }
        assert_eq!(members, e.feasible);
    }

    #[test]
    fn known_parameters_give_slack_close_to_xi() {
        let inst = TinyInstance {
            seeds: vec![1],
            steps: 6,
            prior_scale: 1.0,
            prior_precision: 1e6,
            ..Default::default()
        };
        let cert = brute_force_close_to_opt(&inst).unwrap();
        assert!(cert.passed, "{}", cert.render());
        assert_eq!(cert.cases.len(), 6);
        for c in &cert.cases {
            assert!(c.slack.unwrap() >= cert.xi - 1e-3, "{c:?}");
        }
    }

    #[test]
    fn short_price_series_is_rejected() {
        let b = Benchmark { hourly_prices: vec![100.0; 24], ..Default::default() };
        assert!(matches!(b.validate(24), Err(Error::Config(_))));
    }
}
