mod common;

use common::scenario;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xover_core::builtin::builtin_design;
use xover_core::estimators::Method;
use xover_core::simulator::{
    allocate_block, calibrate_alpha, is_even, run_monte_carlo, run_replicates, BlockScheduler,
    TauScenario,
};

#[test]
fn single_stage_holds_the_level() {
    // Without re-estimation the final analysis is an exact Dunnett test.
    let mut c = scenario(
        "example1",
        Method::Unblinded,
        None,
        32,
        TauScenario::GlobalNull,
        4000,
    );
    c.policy.n_max = 32;
    let (s, results) = run_monte_carlo(&c, None).unwrap();
    assert!(results
        .iter()
        .all(|r| r.n_final == 32 && r.failure.is_none()));
    let (fwer, se) = (s.fwer.unwrap(), s.fwer_se.unwrap());
    assert!((fwer - 0.05).abs() < 4.0 * se, "FWER {fwer} +- {se}");
}

#[test]
fn no_true_null_means_no_fwer() {
    let c = scenario(
        "example1",
        Method::Unblinded,
        None,
        16,
        TauScenario::GlobalAlt,
        20,
    );
    let (s, _) = run_monte_carlo(&c, None).unwrap();
    assert!(s.fwer.is_none() && s.fwer_se.is_none());
    let c = scenario(
        "example1",
        Method::Unblinded,
        None,
        16,
        TauScenario::Tau1Only,
        20,
    );
    let (s, results) = run_monte_carlo(&c, None).unwrap();
    let hits = results
        .iter()
        .filter(|r| r.rejections[1] || r.rejections[2])
        .count();
    assert_eq!(s.fwer.unwrap(), hits as f64 / 20.0);
}

#[test]
fn sample_sizes_stay_in_the_envelope() {
    for (ex, method, n_b, n_int) in [
        ("example1", Method::AdjustedNull, None, 8),
        ("example2", Method::Unblinded, None, 18),
        ("example3", Method::Block, Some(8), 48),
    ] {
        let mut c = scenario(ex, method, n_b, n_int, TauScenario::Observed, 200);
        c.policy.n_max = 60;
        let cap = c.policy.n_max_rounded();
        for r in run_replicates(&c, None).unwrap() {
            assert!(r.n_hat >= n_int && r.n_hat <= cap, "{ex}: {}", r.n_hat);
            assert_eq!(r.n_hat % c.policy.multiple, 0);
            assert_eq!(r.n_final, r.n_hat);
        }
    }
}

#[test]
fn results_do_not_depend_on_threads() {
    let c = scenario(
        "example2",
        Method::AdjustedAlternative,
        None,
        18,
        TauScenario::Observed,
        300,
    );
    let one = run_replicates(&c, Some(1)).unwrap();
    let many = run_replicates(&c, Some(8)).unwrap();
    assert_eq!(one, many);
    assert!(one.iter().enumerate().all(|(i, r)| r.replicate == i));
}

#[test]
fn seed_changes_results() {
    let mut c = scenario(
        "example1",
        Method::Unblinded,
        None,
        16,
        TauScenario::Observed,
        50,
    );
    let a = run_replicates(&c, None).unwrap();
    c.master_seed += 1;
    let b = run_replicates(&c, None).unwrap();
    assert_ne!(a, b);
}

#[test]
fn uneven_block_interims_are_flagged() {
    let c = scenario(
        "example3",
        Method::Block,
        Some(8),
        48,
        TauScenario::GlobalNull,
        50,
    );
    assert!(c.uneven_interim());
    let (s, _) = run_monte_carlo(&c, None).unwrap();
    assert!(s.uneven_count > 0);
    let c = scenario(
        "example3",
        Method::Block,
        Some(8),
        32,
        TauScenario::GlobalNull,
        50,
    );
    assert!(!c.uneven_interim());
}

#[test]
fn calibration_on_one_point_runs_the_level_search_only() {
    let c = scenario(
        "example2",
        Method::Unblinded,
        None,
        18,
        TauScenario::GlobalNull,
        500,
    );
    let cal = calibrate_alpha(&c, &[(0.053, 0.49)], 0.1, 500, None).unwrap();
    assert_eq!(cal.grid.len(), 1);
    assert_eq!((cal.sigma_e2_max, cal.sigma_b2_max), (0.053, 0.49));
    assert!(!cal.steps.is_empty());
    let last = cal.steps.last().unwrap();
    assert!(cal.alpha_adj <= 0.1);
    assert!(
        cal.alpha_adj == 0.1 || (last.fwer - 0.1).abs() <= last.fwer_se || cal.steps.len() > 30
    );
}

#[test]
fn calibration_without_inflation_keeps_the_level() {
    // A single-stage trial has nothing to correct.
    let mut c = scenario(
        "example1",
        Method::Unblinded,
        None,
        32,
        TauScenario::GlobalNull,
        2000,
    );
    c.policy.n_max = 32;
    let cal = calibrate_alpha(&c, &[(6.51, 10.12), (3.0, 10.12)], 0.05, 2000, None).unwrap();
    assert_eq!(cal.alpha_adj, 0.05);
    assert_eq!(cal.steps.len(), 1);
}

#[test]
fn calibration_rejects_empty_grid() {
    let c = scenario(
        "example1",
        Method::Unblinded,
        None,
        16,
        TauScenario::GlobalNull,
        10,
    );
    assert!(calibrate_alpha(&c, &[], 0.05, 10, None).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn blocks_are_sequence_homogeneous(seed in 0u64..100_000, n_b in 2usize..9, blocks in 1usize..12, more in 0usize..12) {
        let t = builtin_design("example3").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = n_b * blocks;
        let mut alloc = allocate_block(&t.design, n, n_b, &mut rng).unwrap();
        for block in alloc.sequences.chunks(n_b) {
            prop_assert!(block.iter().all(|&s| s == block[0]));
        }
        if blocks % 4 == 0 {
            prop_assert!(is_even(&alloc, 4));
        }
        let mut sched = BlockScheduler::new(n_b).unwrap();
        sched.extend(&t.design, more * n_b, &mut alloc, &mut rng).unwrap();
        prop_assert_eq!(alloc.n_patients(), n + more * n_b);
    }
}
