use proptest::prelude::*;
use salt_mpc::bench::{benchmark_model, Benchmark};
use salt_mpc::orchestrator::{run, Mode, Phase};
use salt_mpc::sweep;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    // Short learning runs from arbitrary seeds stay inside every box and
    // never exceed the exploration budget.
    #[test]
    fn short_runs_are_safe(seed in any::<u64>()) {
        let b = Benchmark::default();
        let m = benchmark_model();
        let sc = b.scenario(&m).unwrap();
        let log = run(&sc, &b.algo_config(&m), Mode::Learn, 6, seed).unwrap();
        let s = &log.summary;
        prop_assert!(s.fault.is_none());
        prop_assert_eq!(s.output_violations + s.input_violations + s.state_violations, 0);
        prop_assert_eq!(s.budget_exceeded, 0);
        for r in &log.records {
            prop_assert!(r.u[0] >= 60.0 && r.u[0] <= 90.0);
            if r.phase == Phase::GoalReaching {
                prop_assert!(r.j_p.unwrap() - r.j_o.unwrap() <= r.xi);
            }
        }
    }

    #[test]
    fn sweep_order_matches_input(xs in proptest::collection::vec(any::<i32>(), 0..64)) {
        let f = |x: &i32| i64::from(*x) * 3 - 1;
        prop_assert_eq!(sweep::map(&xs, f), sweep::map_sequential(&xs, f));
    }
}
