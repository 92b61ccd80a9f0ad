//! Acceptance checks 1 to 11. Each prints one PASS/FAIL line.
//!
//! The closed-loop sweep uses 200 seeds. `SALT_MPC_ACCEPT_SEEDS=N` runs
//! seeds 1..=N instead for quick iteration; lines that depend on the sweep
//! then read INCOMPLETE and the test fails.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use salt_mpc::bayes::{init_posterior, BllPrior};
use salt_mpc::bench::{
    benchmark_model, brute_force_close_to_opt, calibrate, Benchmark, CalibrationConfig, TinyInstance,
};
use salt_mpc::dynamics::{rollout, rollout_grad, GruModel};
use salt_mpc::orchestrator::{run, Mode, Phase, RunLog};
use salt_mpc::sweep;

const SPEC_SEEDS: usize = 200;

struct Line {
    id: usize,
    ok: bool,
    incomplete: bool,
    text: String,
}

impl Line {
    fn new(id: usize, ok: bool, text: String) -> Self {
        Self { id, ok, incomplete: false, text }
    }

    fn print(&self) {
        let verdict = if !self.ok {
            "FAIL"
        } else if self.incomplete {
            "INCOMPLETE"
        } else {
            "PASS"
        };
        println!("criterion {:>2}: {verdict:<10} {}", self.id, self.text);
    }
}

fn random_stream(rng: &mut ChaCha8Rng, n: usize, len: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let theta: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let xs: Vec<Vec<f64>> = (0..len)
        .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let ys = xs
        .iter()
        .map(|x| x.iter().zip(&theta).map(|(a, b)| a * b).sum::<f64>() + rng.random_range(-0.05..0.05))
        .collect();
    (xs, ys)
}

fn prior(n: usize, lambda: f64, rng: &mut ChaCha8Rng) -> BllPrior {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        l[i * n + i] = lambda;
    }
    BllPrior {
        theta0: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        lambda0: l,
        sigma2: 0.0025,
        cap_c: 1.0,
        delta: 0.05,
    }
}

fn criterion_1() -> Line {
    let t = Instant::now();
    let n = 7;
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = prior(n, 0.5, &mut rng);
        let (xs, ys) = random_stream(&mut rng, n, 1000);
        let mut post = init_posterior(&p).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            post.update(x, *y).unwrap();
        }
        let x = DMatrix::from_fn(xs.len(), n, |i, j| xs[i][j]);
        let l0 = DMatrix::from_row_slice(n, n, &p.lambda0);
        let lk = &l0 + x.transpose() * &x;
        let rhs = x.transpose() * DVector::from_vec(ys) + &l0 * DVector::from_vec(p.theta0.clone());
        let batch = lk.lu().solve(&rhs).unwrap();
        for i in 0..n {
            worst = worst.max((post.theta_bar[i] - batch[i]).abs());
        }
    }
    let el = t.elapsed();
    Line::new(
        1,
        worst <= 1e-8 && el < Duration::from_secs(1),
        format!("recursive vs batch, 5 streams × 1000 updates, n = 7: max |Δθ| = {worst:.2e} (≤ 1e-8), {el:.2?} (< 1 s)"),
    )
}

fn criterion_2() -> Line {
    let n = 7;
    let (mut worst_lambda, mut worst_det): (f64, f64) = (0.0, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p = prior(n, 0.3, &mut rng);
    let (xs, ys) = random_stream(&mut rng, n, 2000);
    let mut post = init_posterior(&p).unwrap();
    let l0 = DMatrix::from_row_slice(n, n, &p.lambda0);
    let mut lk = l0.clone();
    for (k, (x, y)) in xs.iter().zip(&ys).enumerate() {
        post.update(x, *y).unwrap();
        let xv = DVector::from_column_slice(x);
        lk += &xv * xv.transpose();
        let k = k + 1;
        if k % 50 == 0 || k <= 10 {
            let rebuilt = DMatrix::from_row_slice(n, n, &post.lambda_inv).try_inverse().unwrap();
            worst_lambda = worst_lambda.max((&rebuilt - &lk).norm() / lk.norm());
            let ratio = lk.determinant() / l0.determinant();
            worst_det = worst_det.max((post.log_det_ratio.exp() - ratio).abs() / ratio);
        }
    }
    Line::new(
        2,
        worst_lambda <= 1e-6 && worst_det <= 1e-6,
        format!(
            "Λ_k rebuilt from Λ_k⁻¹ vs Λ₀ + XᵀX: rel err {worst_lambda:.2e}; exp(log det ratio) vs det ratio: rel err {worst_det:.2e} (both ≤ 1e-6, k ≤ 2000)"
        ),
    )
}

fn criterion_3() -> Line {
    let t = Instant::now();
    let sc = Benchmark::default().scenario(&benchmark_model()).unwrap();
    let rep = calibrate(&sc, &CalibrationConfig::default()).unwrap();
    let el = t.elapsed();
    Line::new(
        3,
        rep.passed && rep.seeds == 500 && rep.steps == 2000 && el < Duration::from_secs(120),
        format!(
            "{} of {} seeds × {} steps violated |θ*ᵀx − μ| ≤ w (rate {:.4} ≤ δ = {}), worst |err|/w {:.3}, {el:.2?} (< 2 min)",
            rep.violating_seeds, rep.seeds, rep.steps, rep.rate, rep.delta, rep.worst_ratio
        ),
    )
}

fn random_model(rng: &mut ChaCha8Rng, nx: usize, nu: usize) -> GruModel {
    let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(-0.8..0.8)).collect() };
    GruModel {
        n_x: nx,
        n_u: nu,
        w_r: draw(nx * nu),
        u_r: draw(nx * nx),
        b_r: draw(nx),
        w_z: draw(nx * nu),
        u_z: draw(nx * nx),
        b_z: draw(nx),
        w_f: draw(nx * nu),
        u_f: draw(nx * nx),
        b_f: draw(nx),
    }
}

fn criterion_4() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let nx = rng.random_range(1..=6);
        let nu = rng.random_range(1..=2);
        let h = rng.random_range(1..=24);
        let m = random_model(&mut rng, nx, nu);
        let x0: Vec<f64> = (0..nx).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..h * nu).map(|_| rng.random_range(-1.0..1.0)).collect();
        let adj: Vec<f64> = (0..(h + 1) * nx).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = |u: &[f64]| -> f64 {
            let r = rollout(&m, &x0, u);
            (0..=h).map(|t| r.state(t).iter().zip(&adj[t * nx..]).map(|(a, b)| a * b).sum::<f64>()).sum()
        };
        let g = rollout_grad(&m, &x0, &u, &adj);
        let step = 1e-6;
        for i in 0..u.len() {
            let (mut up, mut dn) = (u.clone(), u.clone());
            up[i] += step;
            dn[i] -= step;
            let fd = (s(&up) - s(&dn)) / (2.0 * step);
            worst = worst.max((g[i] - fd).abs() / fd.abs().max(1.0));
        }
    }
    Line::new(
        4,
        worst <= 1e-5,
        format!("rollout gradient vs central differences, 50 random GRUs: max rel err {worst:.2e} (≤ 1e-5)"),
    )
}

struct Sweep {
    seeds: Vec<u64>,
    learn: Vec<RunLog>,
    rule_cost: f64,
    omni_cost: f64,
    baselines_seed_free: bool,
    elapsed: Duration,
}

fn sweep_runs() -> Sweep {
    let n = std::env::var("SALT_MPC_ACCEPT_SEEDS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(SPEC_SEEDS)
        .max(1);
    let seeds: Vec<u64> = (1..=n as u64).collect();
    let b = Benchmark::default();
    let m = benchmark_model();
    let sc = b.scenario(&m).unwrap();
    let cfg = b.algo_config(&m);
    let t = Instant::now();
    let learn: Vec<RunLog> = sweep::map(&seeds, |s| run(&sc, &cfg, Mode::Learn, b.steps, *s).unwrap());
    // Rule and omniscient never read measurements, so their closed loops do
    // not depend on the seed; confirm that on two seeds and reuse.
    let base = sweep::map(&[1u64, 2], |s| {
        (
            run(&sc, &cfg, Mode::Rule, b.steps, *s).unwrap().summary.realized_cost,
            run(&sc, &cfg, Mode::Omniscient, b.steps, *s).unwrap(),
        )
    });
    let omni_fault = base.iter().any(|(_, o)| o.summary.fault.is_some());
    Sweep {
        seeds,
        learn,
        rule_cost: base[0].0,
        omni_cost: base[0].1.summary.realized_cost,
        baselines_seed_free: base[0].0 == base[1].0
            && base[0].1.summary.realized_cost == base[1].1.summary.realized_cost
            && !omni_fault,
        elapsed: t.elapsed(),
    }
}

fn reduced(line: Line, seeds: usize) -> Line {
    Line { incomplete: seeds < SPEC_SEEDS, ..line }
}

fn criterion_5(s: &Sweep) -> Line {
    let n = s.learn.len();
    let unsafe_runs = s.learn.iter().filter(|l| l.summary.output_violations > 0).count();
    let box_runs = s
        .learn
        .iter()
        .filter(|l| l.summary.input_violations > 0 || l.summary.state_violations > 0)
        .count();
    let rate = unsafe_runs as f64 / n as f64;
    reduced(
        Line::new(
            5,
            rate <= 0.01 && box_runs == 0,
            format!("{unsafe_runs} of {n} seeds left 𝒴 (rate {rate:.4} ≤ 0.01), {box_runs} with input/state box violations"),
        ),
        n,
    )
}

fn criterion_6(s: &Sweep) -> Line {
    let faults: Vec<u64> = s
        .learn
        .iter()
        .filter(|l| l.summary.fault.is_some())
        .map(|l| l.summary.seed)
        .collect();
    let n = s.learn.len();
    reduced(
        Line::new(
            6,
            faults.is_empty(),
            format!("infeasibility faults in {n}-seed sweep incl. golden seed 1: {} {:?}", faults.len(), faults),
        ),
        n,
    )
}

fn criterion_7(s: &Sweep) -> Line {
    let n = s.learn.len();
    let unfinished = s
        .learn
        .iter()
        .filter(|l| l.records.last().is_none_or(|r| r.phase == Phase::Exploring) || l.summary.steps < 288)
        .count();
    let over_budget: usize = s.learn.iter().map(|l| l.summary.budget_exceeded).sum();
    let checks: usize = s.learn.iter().map(|l| l.summary.budget_checks).sum();
    let g = &s.learn[0];
    let windows = g.exploration_windows();
    let single = windows.len() == 1 && windows[0].0 == 0 && g.records.last().is_some_and(|r| r.phase == Phase::GoalReaching);
    reduced(
        Line::new(
            7,
            unfinished == 0 && over_budget == 0 && single,
            format!(
                "{unfinished} of {n} seeds end still exploring; collections over the budget bound in {over_budget} of {checks} checks; golden windows {windows:?}"
            ),
        ),
        n,
    )
}

fn criterion_8() -> Line {
    let t = Instant::now();
    let cert = brute_force_close_to_opt(&TinyInstance::default()).unwrap();
    let el = t.elapsed();
    let seeds = TinyInstance::default().seeds.len();
    Line::new(
        8,
        cert.passed && seeds == 20 && el < Duration::from_secs(60),
        format!("{} over {seeds} seeds, {el:.2?} (< 1 min)", cert.render()),
    )
}

fn criterion_9(s: &Sweep) -> Line {
    let n = s.learn.len();
    let tol = 1e-3 * s.rule_cost;
    let mut bad_order = Vec::new();
    let mut min_recovery = f64::INFINITY;
    for l in &s.learn {
        let c = l.summary.realized_cost;
        if c < s.omni_cost - tol || c > s.rule_cost + tol {
            bad_order.push(l.summary.seed);
        }
        min_recovery = min_recovery.min((s.rule_cost - c) / (s.rule_cost - s.omni_cost));
    }
    let golden = s.learn[0].summary.realized_cost;
    reduced(
        Line::new(
            9,
            bad_order.is_empty() && min_recovery >= 0.5 && s.omni_cost <= s.rule_cost && s.baselines_seed_free,
            format!(
                "C_rule {:.2}, C_omni {:.2}, golden C_learn {golden:.2}; ordering broken on {} of {n} seeds; worst recovery {:.1}% (≥ 50%)",
                s.rule_cost,
                s.omni_cost,
                bad_order.len(),
                100.0 * min_recovery
            ),
        ),
        n,
    )
}

fn criterion_10(s: &Sweep) -> Line {
    let g = &s.learn[0];
    let (e0, e1) = (g.summary.theta_err_initial, g.summary.theta_err_final);
    let mut worst_rise: f64 = 0.0;
    for (a, b) in g.exploration_windows() {
        let mut low = f64::INFINITY;
        for r in &g.records[a..=b] {
            low = low.min(r.theta_err);
            worst_rise = worst_rise.max(r.theta_err / low - 1.0);
        }
    }
    Line::new(
        10,
        e1 < 0.5 * e0 && worst_rise <= 0.01,
        format!(
            "golden ‖θ̄ − θ*‖: {e0:.3} -> {e1:.3} (< {:.3}); largest rise over running minimum in exploration {:.2}% (≤ 1%)",
            0.5 * e0,
            100.0 * worst_rise
        ),
    )
}

fn criterion_11(s: &Sweep) -> Line {
    let b = Benchmark::default();
    let m = benchmark_model();
    let sc = b.scenario(&m).unwrap();
    let cfg = b.algo_config(&m);
    let again = run(&sc, &cfg, Mode::Learn, b.steps, 1).unwrap();
    let first = s.learn[0].csv_string();
    let second = again.csv_string();
    let seq = sweep::map_sequential(&[3u64], |s| run(&sc, &cfg, Mode::Learn, 40, *s).unwrap().csv_string());
    let par = sweep::map(&[3u64], |s| run(&sc, &cfg, Mode::Learn, 40, *s).unwrap().csv_string());
    Line::new(
        11,
        first.as_bytes() == second.as_bytes() && seq == par,
        format!(
            "golden trace rerun byte-identical: {} ({} bytes); sequential vs parallel sweep identical: {}",
            first == second,
            first.len(),
            seq == par
        ),
    )
}

// Runs without the libtest harness so the criterion lines are always shown.
fn main() {
    let mut lines = vec![criterion_1(), criterion_2(), criterion_3(), criterion_4()];
    for l in &lines {
        l.print();
    }
    let s = sweep_runs();
    println!(
        "closed-loop sweep: {} seeds (spec {SPEC_SEEDS}) in {:.1?}",
        s.seeds.len(),
        s.elapsed
    );
    let rest = [
        criterion_5(&s),
        criterion_6(&s),
        criterion_7(&s),
        criterion_8(),
        criterion_9(&s),
        criterion_10(&s),
        criterion_11(&s),
    ];
    for l in &rest {
        l.print();
    }
    lines.extend(rest);
    let failed: Vec<usize> = lines.iter().filter(|l| !l.ok || l.incomplete).map(|l| l.id).collect();
    if failed.is_empty() {
        println!("acceptance: all 11 criteria met");
    } else {
        println!("acceptance: criteria not met: {failed:?}");
        std::process::exit(1);
    }
}
