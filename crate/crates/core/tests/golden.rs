use approx::assert_relative_eq;
use salt_mpc::bench::{benchmark_model, omniscient_mpc, rule_based, summarize, Benchmark};
use salt_mpc::orchestrator::{run, Mode};

fn golden() -> toml::Table {
    include_str!("golden/benchmark_seed1.toml").parse().unwrap()
}

fn f(t: &toml::Table, sec: &str, key: &str) -> f64 {
    t[sec][key].as_float().unwrap()
}

#[test]
fn benchmark_seed_one_matches_frozen_results() {
    let g = golden();
    let b = Benchmark::default();
    let m = benchmark_model();
    let sc = b.scenario(&m).unwrap();
    let cfg = b.algo_config(&m);
    let steps = g["steps"].as_integer().unwrap() as usize;

    let rule = rule_based(&sc, &cfg, steps, 1).unwrap();
    assert_relative_eq!(rule.summary.realized_cost, f(&g, "rule", "cost"), max_relative = 1e-9);
    assert_eq!(rule.summary.output_violations, 0);

    let omni = omniscient_mpc(&sc, &cfg, steps, 1).unwrap();
    assert!(omni.summary.fault.is_none());
    assert_relative_eq!(omni.summary.realized_cost, f(&g, "omniscient", "cost"), max_relative = 1e-6);

    let learn = run(&sc, &cfg, Mode::Learn, steps, 1).unwrap();
    assert!(learn.summary.fault.is_none());
    assert_relative_eq!(learn.summary.realized_cost, f(&g, "learn", "cost"), max_relative = 1e-6);
    assert_relative_eq!(learn.summary.theta_err_final, f(&g, "learn", "theta_err_final"), max_relative = 1e-6);
    assert_eq!(learn.summary.output_violations, 0);
    let windows: Vec<(usize, usize)> = g["learn"]["exploration_windows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|w| {
            let w = w.as_array().unwrap();
            (w[0].as_integer().unwrap() as usize, w[1].as_integer().unwrap() as usize)
        })
        .collect();
    assert_eq!(learn.exploration_windows(), windows);

    let table = summarize(&rule, &omni, &learn);
    assert!(table.rows[1].cost <= table.rows[2].cost && table.rows[2].cost <= table.rows[0].cost);
    assert!(table.recovery >= 0.5);
    let identical = summarize(&rule, &rule, &rule);
    assert!(identical.rows.iter().all(|r| r.savings_pct == 0.0));
}
