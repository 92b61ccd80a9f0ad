//! The switching loop: measure, update, compare pessimistic and optimistic
//! costs, explore with committed inputs or exploit.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bayes::{beta, BllPrior, Learner};
use crate::confidence::{BoundsBuffer, ConfidenceSnapshot, RetentionPolicy};
use crate::dynamics::{augment, GruModel, NoiseModel, Plant, Scaling};
use crate::error::{Error, Result};
use crate::mpc::{
    self, build_terminal_set, CostSpec, MpcContext, MpcSettings, MpcSolution, MpcStatus, Multipliers, Sets, TerminalOptions,
    TerminalSet,
};
use crate::nlp::{shift_warm_start, NlpOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlgoConfig {
    /// Learning tolerance in model output units.
    pub eps: f64,
    pub delta: f64,
    pub horizon: usize,
    /// Switching threshold; `2 H Σ_c L_c ε` when absent.
    pub xi: Option<f64>,
    /// Slack weight; `10³ max(L) (y_max − y_min)` when absent.
    pub alpha_nu: Option<f64>,
    pub buffer_capacity: usize,
    pub retention: RetentionPolicy,
    /// Split δ evenly over output channels.
    pub union_bound: bool,
    pub theta_box: f64,
    /// Re-solve the first exploration problem with a doubled slack weight.
    pub check_exact_penalty: bool,
    pub nlp: NlpOptions,
    /// The optimistic value only enters the switching test, so it is solved
    /// to looser tolerances by default.
    pub optimistic_nlp: NlpOptions,
    pub terminal: TerminalOptions,
    pub max_steps: usize,
}

impl Default for AlgoConfig {
    fn default() -> Self {
        Self {
            eps: 5.0 * 0.001f64.sqrt(),
            delta: 0.01,
            horizon: 24,
            xi: None,
            alpha_nu: None,
            buffer_capacity: 64,
            retention: RetentionPolicy::default(),
            union_bound: false,
            theta_box: 10.0,
            check_exact_penalty: true,
            nlp: NlpOptions::default(),
            optimistic_nlp: NlpOptions {
                feas_tol: 1e-4,
                opt_tol: 1e-4,
                ..NlpOptions::default()
            },
            terminal: TerminalOptions::default(),
            max_steps: 100_000,
        }
    }
}

impl AlgoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config("delta must lie in (0, 1)".into()));
        }
        if self.horizon < 2 {
            return Err(Error::Config("horizon must be at least 2".into()));
        }
        if let Some(xi) = self.xi {
            if !(xi > 0.0) {
                return Err(Error::Config("xi must be positive".into()));
            }
        }
        if let Some(a) = self.alpha_nu {
            if !(a > 0.0) {
                return Err(Error::Config("alpha_nu must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn xi_for(&self, lip: &[f64]) -> f64 {
        self.xi
            .unwrap_or_else(|| 2.0 * self.horizon as f64 * lip.iter().sum::<f64>() * self.eps)
    }

    pub fn alpha_nu_for(&self, lip: &[f64], sets: &Sets) -> f64 {
        self.alpha_nu.unwrap_or_else(|| {
            let l = lip.iter().copied().fold(0.0f64, f64::max);
            let range = sets
                .ybox
                .y_min
                .iter()
                .zip(&sets.ybox.y_max)
                .map(|(a, b)| b - a)
                .fold(0.0f64, f64::max);
            1e3 * l * range
        })
    }
}

/// Everything that defines a closed-loop experiment apart from the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub model: GruModel,
    pub theta_star: Vec<Vec<f64>>,
    pub noise: NoiseModel,
    pub priors: Vec<BllPrior>,
    pub sets: Sets,
    pub cost: CostSpec,
    pub x0: Vec<f64>,
    /// Constant input of the rule-based baseline, model units.
    pub u_rule: Vec<f64>,
    pub input_scaling: Scaling,
    pub output_scaling: Scaling,
    pub input_names: Vec<String>,
    pub output_names: Vec<String>,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let n_y = self.theta_star.len();
        self.sets.ybox.validate()?;
        self.cost.validate(n_y)?;
        if self.priors.len() != n_y || self.sets.ybox.y_min.len() != n_y {
            return Err(Error::Config("output channel counts disagree".into()));
        }
        for p in &self.priors {
            p.validate()?;
        }
        if self.x0.len() != self.model.n_x || self.u_rule.len() != self.model.n_u {
            return Err(Error::Config("initial state or rule input has the wrong length".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Learn,
    Omniscient,
    Rule,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Learn => "learn",
            Mode::Omniscient => "omniscient",
            Mode::Rule => "rule",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Exploring,
    GoalReaching,
    Baseline,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Exploring => "exploring",
            Phase::GoalReaching => "goal_reaching",
            Phase::Baseline => "baseline",
        }
    }
}

/// One closed-loop step, in physical units where scalings are known.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub k: usize,
    pub phase: Phase,
    pub n: usize,
    pub u: Vec<f64>,
    pub y_star: Vec<f64>,
    pub y_meas: Vec<f64>,
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
    pub j_p: Option<f64>,
    pub j_o: Option<f64>,
    pub xi: f64,
    pub theta_err: f64,
    pub solver_status: String,
    pub h_star: Option<usize>,
    pub stage_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FaultInfo {
    pub step: usize,
    pub problem: String,
    pub detail: String,
    pub dump: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    pub steps: usize,
    /// `Σ_k ℓ_k(y*_k)`: for the economic cost the production cost.
    pub realized_cost: f64,
    pub output_violations: usize,
    /// Largest output-box excursion of `y*`, physical units.
    pub max_output_violation: f64,
    pub input_violations: usize,
    pub state_violations: usize,
    pub exploration_steps: usize,
    pub exploration_windows: usize,
    pub exploration_iterations: usize,
    pub first_goal_step: Option<usize>,
    pub budget_checks: usize,
    pub budget_exceeded: usize,
    pub h_star_fallbacks: usize,
    pub solver_fallbacks: usize,
    pub bound_inconsistencies: u64,
    pub exact_penalty_warnings: usize,
    pub theta_err_initial: f64,
    pub theta_err_final: f64,
    pub xi: f64,
    pub terminal: Option<TerminalSet>,
    pub fault: Option<FaultInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunLog {
    pub records: Vec<StepRecord>,
    pub summary: RunSummary,
    #[serde(skip)]
    pub input_names: Vec<String>,
    #[serde(skip)]
    pub output_names: Vec<String>,
}

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_default()
}

impl RunLog {
    pub fn csv_header(&self) -> String {
        let mut cols = vec!["k".to_string(), "phase".into(), "n".into()];
        cols.extend(self.input_names.iter().map(|s| format!("u_{s}")));
        cols.extend(self.output_names.iter().map(|s| format!("y_star_{s}")));
        cols.extend(self.output_names.iter().map(|s| format!("y_meas_{s}")));
        for s in &self.output_names {
            cols.push(format!("lb_{s}"));
            cols.push(format!("ub_{s}"));
        }
        cols.extend(["J_p", "J_o", "xi", "theta_err", "solver_status"].map(String::from));
        cols.join(",")
    }

    /// The per-step trace as CSV; empty logs produce a header only.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", self.csv_header())?;
        for r in &self.records {
            let mut row = vec![r.k.to_string(), r.phase.as_str().to_string(), r.n.to_string()];
            row.extend(r.u.iter().copied().map(fmt_f));
            row.extend(r.y_star.iter().copied().map(fmt_f));
            row.extend(r.y_meas.iter().copied().map(fmt_f));
            for (l, u) in r.lb.iter().zip(&r.ub) {
                row.push(fmt_f(*l));
                row.push(fmt_f(*u));
            }
            row.push(fmt_opt(r.j_p));
            row.push(fmt_opt(r.j_o));
            row.push(fmt_f(r.xi));
            row.push(fmt_f(r.theta_err));
            row.push(r.solver_status.clone());
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    /// Contiguous exploring windows as `(first, last)` step indices.
    pub fn exploration_windows(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for r in self.records.iter().filter(|r| r.phase == Phase::Exploring) {
            match out.last_mut() {
                Some(w) if w.1 + 1 == r.k => w.1 = r.k,
                _ => out.push((r.k, r.k)),
            }
        }
        out
    }
}

/// `C₁ = 2H / ln(1 + H σ⁻²)`.
pub fn c1(horizon: usize, sigma2: f64) -> f64 {
    let h = horizon as f64;
    2.0 * h / (1.0 + h / sigma2).ln()
}

/// Largest exploration count `n` with `n ε² ≤ β² C₁ γ̂`, where `γ̂` is half
/// the accumulated log-determinant; the maximum over channels.
pub fn exploration_budget_bound(cfg: &AlgoConfig, learner: &Learner) -> f64 {
    learner
        .posts
        .iter()
        .zip(&learner.priors)
        .map(|(post, prior)| {
            let b = beta(post, prior);
            b * b * c1(cfg.horizon, prior.sigma2) * 0.5 * post.log_det_ratio / (cfg.eps * cfg.eps)
        })
        .fold(0.0, f64::max)
}

/// Mutable state of the switching loop.
#[derive(Debug, Clone)]
pub struct AlgoState {
    pub k: usize,
    pub phase: Phase,
    pub n: usize,
    pub k_n: usize,
    pub committed: VecDeque<Vec<f64>>,
    pub x: Vec<f64>,
    pub learner: Learner,
    pub bounds: BoundsBuffer,
    /// Last plan and the step it was computed at, for warm starts.
    plan: Option<(usize, Vec<f64>)>,
    opt_plan: Option<(usize, Vec<f64>)>,
    lam_p: Option<Multipliers>,
    lam_o: Option<Multipliers>,
    lam_e: Option<Multipliers>,
    penalty_checked: bool,
}

impl AlgoState {
    pub fn new(scenario: &Scenario, cfg: &AlgoConfig) -> Result<Self> {
        let learner = Learner::new(priors_for(scenario, cfg))?;
        let bounds = BoundsBuffer::new(
            ConfidenceSnapshot::from_learner(&learner),
            cfg.buffer_capacity,
            cfg.retention,
        )?;
        Ok(Self {
            k: 0,
            phase: Phase::GoalReaching,
            n: 0,
            k_n: 0,
            committed: VecDeque::new(),
            x: scenario.x0.clone(),
            learner,
            bounds,
            plan: None,
            opt_plan: None,
            lam_p: None,
            lam_o: None,
            lam_e: None,
            penalty_checked: false,
        })
    }
}

fn priors_for(scenario: &Scenario, cfg: &AlgoConfig) -> Vec<BllPrior> {
    let n_y = scenario.priors.len() as f64;
    let delta = if cfg.union_bound { cfg.delta / n_y } else { cfg.delta };
    scenario
        .priors
        .iter()
        .map(|p| BllPrior { delta, ..p.clone() })
        .collect()
}

fn theta_error(learner: &Learner, theta_star: &[Vec<f64>]) -> f64 {
    learner
        .posts
        .iter()
        .zip(theta_star)
        .flat_map(|(p, t)| p.theta_bar.iter().zip(t).map(|(a, b)| (a - b) * (a - b)))
        .sum::<f64>()
        .sqrt()
}

/// Shift the input part of a stored plan to step `k`; anything after the
/// first `n_in` entries (optimistic parameters) is kept as is.
fn shifted(plan: &Option<(usize, Vec<f64>)>, k: usize, u_term: &[f64], n_in: usize) -> Option<Vec<f64>> {
    plan.as_ref().map(|(k0, z)| {
        let mut v = z[..n_in].to_vec();
        for _ in *k0..k {
            v = shift_warm_start(&v, u_term);
        }
        v.extend_from_slice(&z[n_in..]);
        v
    })
}

fn constant_plan(u: &[f64], horizon: usize) -> Vec<f64> {
    u.iter().copied().cycle().take(u.len() * horizon).collect()
}

/// Shared, read-only pieces of a run.
struct Fixed<'a> {
    scenario: &'a Scenario,
    cfg: &'a AlgoConfig,
    settings: MpcSettings,
    terminal: TerminalSet,
    xi: f64,
}

struct StepOutcome {
    u: Vec<f64>,
    j_p: Option<f64>,
    j_o: Option<f64>,
    status: String,
    h_star: Option<usize>,
    fallback: bool,
    /// Full pessimistic input sequence when it was applied.
    plan: Option<Vec<f64>>,
}

fn status_word(s: &MpcSolution) -> &'static str {
    s.status.as_str()
}

fn join<A: Send, B: Send>(a: impl FnOnce() -> A + Send, b: impl FnOnce() -> B + Send) -> (A, B) {
    #[cfg(feature = "parallel")]
    {
        rayon::join(a, b)
    }
    #[cfg(not(feature = "parallel"))]
    {
        (a(), b())
    }
}

/// One pass of the switching loop after the posterior has been updated.
fn decide(fx: &Fixed<'_>, st: &mut AlgoState, summary: &mut RunSummary) -> Result<StepOutcome> {
    let k = st.k;
    if let Some(u) = st.committed.pop_front() {
        return Ok(StepOutcome {
            u,
            j_p: None,
            j_o: None,
            status: "committed".into(),
            h_star: None,
            fallback: false,
            plan: None,
        });
    }
    let sc = fx.scenario;
    let h = fx.settings.horizon;
    let u_term = fx.terminal.u_eq.clone();
    let ctx = MpcContext {
        model: &sc.model,
        learner: &st.learner,
        bounds: &st.bounds,
        sets: &sc.sets,
        cost: &sc.cost,
        terminal: &fx.terminal,
        settings: &fx.settings,
    };
    let n_in = h * sc.model.n_u;
    let prev = shifted(&st.plan, k, &u_term, n_in);
    let prev_opt = shifted(&st.opt_plan, k, &u_term, n_in);
    let constant = constant_plan(&u_term, h);

    let mut p_starts: Vec<Vec<f64>> = prev.iter().cloned().collect();
    p_starts.push(constant.clone());
    let x = st.x.clone();
    let (pess, opt) = join(
        || mpc::solve_pessimistic(&ctx, &x, k, &p_starts, st.lam_p.as_ref()),
        || {
            let mut o_starts: Vec<Vec<f64>> = prev_opt.iter().cloned().collect();
            o_starts.extend(prev.iter().cloned());
            o_starts.push(constant.clone());
            mpc::solve_optimistic(&ctx, &x, k, &o_starts, st.lam_o.as_ref())
        },
    );
    let pess = pess?;
    let opt = opt?;
    st.lam_p = Some(pess.multipliers.clone());
    if opt.status != MpcStatus::EmptySet {
        st.lam_o = Some(opt.multipliers.clone());
    }
    log::debug!(
        "k={k} J^p={:.3} ({} it, {}) J^o={:.3} ({} it, {})",
        pess.cost,
        pess.iterations,
        pess.status.as_str(),
        opt.cost,
        opt.iterations,
        opt.status.as_str()
    );
    let mut fallback = pess.status == MpcStatus::Fallback || opt.status == MpcStatus::Fallback;
    let gap = pess.cost - opt.cost;
    if opt.status != MpcStatus::EmptySet {
        let mut z = opt.u_seq.clone();
        z.extend(opt.theta_opt.concat());
        st.opt_plan = Some((k, z));
    }

    if gap > fx.xi {
        st.n += 1;
        st.phase = Phase::Exploring;
        let mut e_starts = vec![pess.u_seq.clone()];
        e_starts.extend(prev.iter().cloned());
        let expl = mpc::solve_exploration(&ctx, &x, k, &e_starts, st.lam_e.as_ref())?;
        log::debug!("k={k} exploration {} it, {}", expl.iterations, expl.status.as_str());
        if fx.cfg.check_exact_penalty && !st.penalty_checked {
            st.penalty_checked = true;
            let mut doubled = fx.settings.clone();
            doubled.alpha_nu *= 2.0;
            let ctx2 = MpcContext { settings: &doubled, ..ctx };
            let again = mpc::solve_exploration(&ctx2, &x, k, &[expl.u_seq.clone()], None)?;
            let moved = expl
                .u_seq
                .iter()
                .zip(&again.u_seq)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            if moved > 1e-3 {
                summary.exact_penalty_warnings += 1;
                log::warn!("doubling alpha_nu moved the exploration minimizer by {moved:.3e}");
            }
        }
        st.lam_e = Some(expl.multipliers.clone());
        fallback |= expl.status == MpcStatus::Fallback;
        let (hs, fb) = mpc::h_star(&expl.nu_seq, fx.cfg.eps, h);
        if fb {
            summary.h_star_fallbacks += 1;
        }
        st.k_n = k + hs;
        let n_u = sc.model.n_u;
        for j in 1..hs {
            st.committed.push_back(expl.u_seq[j * n_u..(j + 1) * n_u].to_vec());
        }
        summary.exploration_iterations += 1;
        let bound = exploration_budget_bound(fx.cfg, &st.learner);
        summary.budget_checks += 1;
        if st.n as f64 > bound {
            summary.budget_exceeded += 1;
        }
        st.plan = Some((k, expl.u_seq.clone()));
        Ok(StepOutcome {
            u: expl.u_seq[..n_u].to_vec(),
            j_p: Some(pess.cost),
            j_o: Some(opt.cost),
            status: format!(
                "p:{}|o:{}|e:{}",
                status_word(&pess),
                status_word(&opt),
                status_word(&expl)
            ),
            h_star: Some(hs),
            fallback,
            plan: None,
        })
    } else {
        if st.phase == Phase::Exploring {
            let bound = exploration_budget_bound(fx.cfg, &st.learner);
            summary.budget_checks += 1;
            if st.n as f64 > bound {
                summary.budget_exceeded += 1;
            }
        }
        st.phase = Phase::GoalReaching;
        st.n = 0;
        st.plan = Some((k, pess.u_seq.clone()));
        Ok(StepOutcome {
            u: pess.u_seq[..sc.model.n_u].to_vec(),
            j_p: Some(pess.cost),
            j_o: Some(opt.cost),
            status: format!("p:{}|o:{}", status_word(&pess), status_word(&opt)),
            h_star: None,
            fallback,
            plan: Some(pess.u_seq),
        })
    }
}

fn to_physical(s: &Scaling, v: &[f64]) -> Vec<f64> {
    v.iter().enumerate().map(|(i, x)| s.to_physical(i, *x)).collect()
}

/// Build the terminal set, solver settings and switching threshold.
fn prepare<'a>(scenario: &'a Scenario, cfg: &'a AlgoConfig, bounds: &BoundsBuffer) -> Result<Fixed<'a>> {
    let n_y = scenario.theta_star.len();
    let lip = scenario.cost.lipschitz(n_y);
    let terminal = build_terminal_set(
        &scenario.model,
        bounds,
        &scenario.sets.xbox,
        &scenario.sets.ubox,
        &scenario.sets.ybox,
        cfg.eps,
        &cfg.terminal,
    )?;
    let settings = MpcSettings {
        horizon: cfg.horizon,
        eps: cfg.eps,
        alpha_nu: cfg.alpha_nu_for(&lip, &scenario.sets),
        theta_box: cfg.theta_box,
        nlp: cfg.nlp,
        optimistic_nlp: cfg.optimistic_nlp,
    };
    Ok(Fixed {
        scenario,
        cfg,
        settings,
        terminal,
        xi: cfg.xi_for(&lip),
    })
}

/// What an observer sees after the controller has decided at step `k`.
pub struct StepView<'a> {
    pub k: usize,
    pub x: &'a [f64],
    pub phase: Phase,
    /// Pessimistic input sequence, present on goal-reaching steps.
    pub plan: Option<&'a [f64]>,
    pub terminal: &'a TerminalSet,
    pub xi: f64,
    pub learner: &'a Learner,
    pub bounds: &'a BoundsBuffer,
}

/// Simulate `steps` closed-loop steps of the chosen controller.
///
/// Configuration problems are returned as errors; an infeasibility fault
/// ends the run early and is recorded in the summary.
pub fn run(scenario: &Scenario, cfg: &AlgoConfig, mode: Mode, steps: usize, seed: u64) -> Result<RunLog> {
    run_observed(scenario, cfg, mode, steps, seed, &mut |_| {})
}

/// [`run`] with a callback invoked once per completed step.
pub fn run_observed(
    scenario: &Scenario,
    cfg: &AlgoConfig,
    mode: Mode,
    steps: usize,
    seed: u64,
    observe: &mut dyn FnMut(&StepView<'_>),
) -> Result<RunLog> {
    scenario.validate()?;
    cfg.validate()?;
    if steps > cfg.max_steps {
        return Err(Error::Config(format!("steps {steps} exceed max_steps {}", cfg.max_steps)));
    }
    let mut st = AlgoState::new(scenario, cfg)?;
    let fx = prepare(scenario, cfg, &st.bounds)?;
    let mut plant = Plant::new(scenario.model.clone(), scenario.theta_star.clone(), scenario.noise, seed)?;
    let theta_err_initial = theta_error(&st.learner, &scenario.theta_star);
    let mut summary = RunSummary {
        mode,
        seed,
        steps: 0,
        realized_cost: 0.0,
        output_violations: 0,
        max_output_violation: 0.0,
        input_violations: 0,
        state_violations: 0,
        exploration_steps: 0,
        exploration_windows: 0,
        exploration_iterations: 0,
        first_goal_step: None,
        budget_checks: 0,
        budget_exceeded: 0,
        h_star_fallbacks: 0,
        solver_fallbacks: 0,
        bound_inconsistencies: 0,
        exact_penalty_warnings: 0,
        theta_err_initial,
        theta_err_final: theta_err_initial,
        xi: fx.xi,
        terminal: (mode == Mode::Learn).then(|| fx.terminal.clone()),
        fault: None,
    };
    let mut records = Vec::with_capacity(steps);
    let mut omni_plan: Option<(usize, Vec<f64>)> = None;
    let mut omni_lam: Option<Multipliers> = None;
    let n_y = scenario.theta_star.len();
    let mut g = vec![0.0; n_y];

    for k in 0..steps {
        st.k = k;
        let (y_star, y_meas) = plant.measure(&st.x);
        let feature = augment(&st.x);
        st.learner.update(&feature, &y_meas)?;
        if st.bounds.policy.should_retain(st.phase == Phase::Exploring, k as u64) {
            st.bounds.push(ConfidenceSnapshot::from_learner(&st.learner));
        }
        st.bounds.set_live(Some(ConfidenceSnapshot::from_learner(&st.learner)));

        if !scenario.sets.ybox.contains(k, &y_star) {
            summary.output_violations += 1;
            let (lo, hi) = scenario.sets.ybox.at(k);
            for c in 0..n_y {
                let excess = (lo[c] - y_star[c]).max(y_star[c] - hi[c]).max(0.0);
                let phys = excess * scenario.output_scaling.gain[c].abs();
                summary.max_output_violation = summary.max_output_violation.max(phys);
            }
        }
        if !scenario.sets.xbox.contains(&st.x) {
            summary.state_violations += 1;
        }

        let outcome = match mode {
            Mode::Learn => decide(&fx, &mut st, &mut summary),
            Mode::Rule => Ok(StepOutcome {
                u: scenario.u_rule.clone(),
                j_p: None,
                j_o: None,
                status: "rule".into(),
                h_star: None,
                fallback: false,
                plan: None,
            }),
            Mode::Omniscient => {
                let u_term = fx.terminal.u_eq.clone();
                let mut starts: Vec<Vec<f64>> = shifted(&omni_plan, k, &u_term, cfg.horizon * scenario.model.n_u).into_iter().collect();
                starts.push(constant_plan(&scenario.u_rule, cfg.horizon));
                mpc::solve_omniscient(
                    &scenario.model,
                    &scenario.theta_star,
                    &scenario.sets,
                    &scenario.cost,
                    &fx.settings,
                    &st.x,
                    k,
                    &starts,
                    omni_lam.as_ref(),
                )
                .map(|s| {
                    omni_plan = Some((k, s.u_seq.clone()));
                    omni_lam = Some(s.multipliers.clone());
                    StepOutcome {
                        u: s.u_seq[..scenario.model.n_u].to_vec(),
                        j_p: Some(s.cost),
                        j_o: None,
                        status: s.status.as_str().into(),
                        h_star: None,
                        fallback: s.status == MpcStatus::Fallback,
                        plan: None,
                    }
                })
            }
        };
        let outcome = match outcome {
            Ok(o) => o,
            Err(Error::Infeasible { step, problem, detail, dump }) => {
                summary.fault = Some(FaultInfo {
                    step,
                    problem: problem.to_string(),
                    detail,
                    dump: *dump,
                });
                break;
            }
            Err(e) => return Err(e),
        };
        if outcome.fallback {
            summary.solver_fallbacks += 1;
        }
        if !scenario.sets.ubox.contains(&outcome.u) {
            summary.input_violations += 1;
        }
        let phase = if mode == Mode::Learn { st.phase } else { Phase::Baseline };
        observe(&StepView {
            k,
            x: &st.x,
            phase,
            plan: outcome.plan.as_deref(),
            terminal: &fx.terminal,
            xi: fx.xi,
            learner: &st.learner,
            bounds: &st.bounds,
        });
        if phase == Phase::Exploring {
            summary.exploration_steps += 1;
        } else if phase == Phase::GoalReaching && summary.first_goal_step.is_none() {
            summary.first_goal_step = Some(k);
        }
        let stage_cost = scenario.cost.stage(k, &y_star, &mut g);
        summary.realized_cost += stage_cost;

        let bnds = st.bounds.eval(&feature);
        let os = &scenario.output_scaling;
        let theta_err = theta_error(&st.learner, &scenario.theta_star);
        records.push(StepRecord {
            k,
            phase,
            n: st.n,
            u: to_physical(&scenario.input_scaling, &outcome.u),
            y_star: to_physical(os, &y_star),
            y_meas: to_physical(os, &y_meas),
            lb: bnds.iter().enumerate().map(|(c, b)| os.to_physical(c, b.lb)).collect(),
            ub: bnds.iter().enumerate().map(|(c, b)| os.to_physical(c, b.ub)).collect(),
            j_p: outcome.j_p,
            j_o: outcome.j_o,
            xi: fx.xi,
            theta_err,
            solver_status: outcome.status,
            h_star: outcome.h_star,
            stage_cost,
        });
        summary.theta_err_final = theta_err;
        summary.steps = k + 1;
        st.x = scenario.model.step(&st.x, &outcome.u);
    }
    summary.bound_inconsistencies = st.bounds.inconsistencies();
    let mut log = RunLog {
        records,
        summary,
        input_names: names(&scenario.input_names, "u", scenario.model.n_u),
        output_names: names(&scenario.output_names, "y", n_y),
    };
    log.summary.exploration_windows = log.exploration_windows().len();
    Ok(log)
}

fn names(given: &[String], stem: &str, n: usize) -> Vec<String> {
    if given.len() == n {
        given.to_vec()
    } else {
        (0..n).map(|i| format!("{stem}{i}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn c1_for_default_horizon_and_noise() {
        // 48 / ln(24001), evaluated independently.
        assert_relative_eq!(c1(24, 0.001), 4.759_142_393_655_672, epsilon = 1e-12);
    }

    #[test]
    fn xi_default_is_two_h_sum_l_eps() {
        let cfg = AlgoConfig { eps: 0.1, horizon: 10, ..Default::default() };
        assert_relative_eq!(cfg.xi_for(&[1.0, 2.0]), 6.0);
        let cfg = AlgoConfig { xi: Some(3.5), ..cfg };
        assert_eq!(cfg.xi_for(&[1.0, 2.0]), 3.5);
    }

    #[test]
    fn budget_is_zero_before_any_data() {
        let cfg = AlgoConfig::default();
        let l = Learner::new(vec![BllPrior {
            theta0: vec![0.0; 3],
            lambda0: crate::linalg::identity(3),
            sigma2: 0.001,
            cap_c: 0.1,
            delta: 0.01,
        }])
        .unwrap();
        assert_eq!(exploration_budget_bound(&cfg, &l), 0.0);
    }
}
