use nalgebra::DMatrix;
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use xover_core::builtin::builtin_design;
use xover_core::design::{HypothesisSpec, PowerKind};
use xover_core::mixed_model::{build_design_matrix, gls_fit, BlockCovariance, PatientAllocation};
use xover_core::sample_size::{
    analysis_critical_value, clamp_and_round, design_critical_value, design_summary,
    inflation_factor, required_n, required_n_familywise, required_n_pairwise, unit_information,
    InflationLevel, ReestimationPolicy,
};

/// `P(max Z_i <= e)` for `m` standard normals with common correlation `rho >= 0`,
/// by Simpson's rule over the shared factor.
fn equicorrelated_cdf(e: f64, m: i32, rho: f64) -> f64 {
    let z = Normal::standard();
    let (a, b, n) = (-9.0, 9.0, 4000);
    let h = (b - a) / n as f64;
    let f = |x: f64| {
        let dens = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        dens * z.cdf((e + rho.sqrt() * x) / (1.0 - rho).sqrt()).powi(m)
    };
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn equicorrelated_quantile(p: f64, m: i32, rho: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 6.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if equicorrelated_cdf(mid, m, rho) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn example1_matches_closed_form() {
    let t = builtin_design("example1").unwrap();
    let h = &t.hypothesis;
    let e = equicorrelated_quantile(1.0 - h.alpha, 3, 0.5);
    let zb = Normal::standard().inverse_cdf(1.0 - h.beta);
    let want = 2.0 * t.params.sigma_e2 * (e + zb).powi(2) / (h.delta * h.delta);
    let got = required_n_pairwise(&t.design, t.params.sigma_e2, t.params.sigma_b2, h).unwrap();
    assert!((got - want).abs() < 1e-3, "{got} vs {want}");
    let s = design_summary(&t.design, t.params.sigma_e2, t.params.sigma_b2, h).unwrap();
    assert!((s.critical.e - e).abs() < 1e-4);
    assert_eq!(s.n_ceil, 72);
}

#[test]
fn final_analysis_critical_value_near_design_value() {
    let t = builtin_design("example1").unwrap();
    let alloc = PatientAllocation::new((0..72).map(|i| i % 4).collect());
    let x = build_design_matrix(&t.design, &alloc).unwrap();
    let cov = BlockCovariance::new(6.51, 10.12, 4).unwrap();
    let (_, var) = gls_fit(&vec![0.0; x.nrows()], &x, &cov).unwrap();
    let h = &t.hypothesis;
    let e = analysis_critical_value(&var, 72, 4, 4, h.alpha, h.direction).unwrap();
    let info = unit_information(&t.design, 6.51, 10.12).unwrap();
    let design = design_critical_value(&info.q_corr, h.alpha, h.direction)
        .unwrap()
        .e;
    assert!(e > design && e - design < 0.02, "{e} vs {design}");
}

#[test]
fn two_arm_critical_value_is_univariate() {
    let t = builtin_design("example3").unwrap();
    let info = unit_information(&t.design, 169.8, 255.0).unwrap();
    let cv = design_critical_value(&info.q_corr, 0.025, t.hypothesis.direction).unwrap();
    assert!((cv.e - 1.959964).abs() < 1e-4);
}

#[test]
fn complete_block_ignores_between_variance() {
    let t = builtin_design("example1").unwrap();
    let base = required_n(&t.design, 6.51, 0.0, &t.hypothesis).unwrap();
    for sb2 in [10.12, 40.48, 1e4] {
        let n = required_n(&t.design, 6.51, sb2, &t.hypothesis).unwrap();
        assert!((n - base).abs() < 1e-10, "sb2 = {sb2}: {n} vs {base}");
    }
}

#[test]
fn incomplete_block_depends_on_between_variance() {
    let t = builtin_design("example2").unwrap();
    let a = required_n(&t.design, 0.053, 0.0, &t.hypothesis).unwrap();
    let b = required_n(&t.design, 0.053, 0.49, &t.hypothesis).unwrap();
    let c = required_n(&t.design, 0.053, 1e6, &t.hypothesis).unwrap();
    assert!(a < b && b < c, "{a} {b} {c}");
}

#[test]
fn inflation_factor_known_values() {
    assert!((inflation_factor(0.05, 0.2, 1e12).unwrap() - 1.0).abs() < 1e-8);
    let st = StudentsT::new(0.0, 1.0, 40.0).unwrap();
    let n = Normal::standard();
    let t = st.inverse_cdf(0.95) + st.inverse_cdf(0.8);
    let z = n.inverse_cdf(0.95) + n.inverse_cdf(0.8);
    let f = inflation_factor(0.05, 0.2, 40.0).unwrap();
    assert!((f - (t / z).powi(2)).abs() < 1e-5, "{f}");
}

fn hyp(example: &str) -> (xover_core::design::TrialDesign, f64, f64, HypothesisSpec) {
    let t = builtin_design(example).unwrap();
    (t.design, t.params.sigma_e2, t.params.sigma_b2, t.hypothesis)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn required_n_is_monotone(which in 0usize..3, s in 1.01f64..3.0) {
        let (design, se2, sb2, h) = hyp(["example1", "example2", "example3"][which]);
        let n = required_n(&design, se2, sb2, &h).unwrap();
        let bigger_delta = HypothesisSpec { delta: h.delta * s, ..h.clone() };
        prop_assert!(required_n(&design, se2, sb2, &bigger_delta).unwrap() < n);
        prop_assert!(required_n(&design, se2 * s, sb2, &h).unwrap() > n);
        let looser = HypothesisSpec { alpha: (h.alpha * s).min(0.45), ..h.clone() };
        prop_assert!(required_n(&design, se2, sb2, &looser).unwrap() < n);
        let weaker = HypothesisSpec { beta: (h.beta * s).min(0.45), ..h.clone() };
        prop_assert!(required_n(&design, se2, sb2, &weaker).unwrap() < n);
    }

    #[test]
    fn familywise_needs_no_more_than_pairwise(which in 0usize..3, scale in 0.3f64..3.0) {
        let (design, se2, sb2, h) = hyp(["example1", "example2", "example3"][which]);
        let pairwise = required_n_pairwise(&design, se2 * scale, sb2, &h).unwrap().ceil() as u64;
        let familywise = required_n_familywise(&design, se2 * scale, sb2, &h).unwrap();
        prop_assert!(familywise <= pairwise, "{} > {}", familywise, pairwise);
        let fw = HypothesisSpec { power_kind: PowerKind::Familywise, ..h };
        prop_assert_eq!(required_n(&design, se2 * scale, sb2, &fw).unwrap(), familywise as f64);
    }

    #[test]
    fn clamp_and_round_envelope(
        multiple in 1usize..13,
        k in 1usize..6,
        extra in 0usize..500,
        n_formula in prop_oneof![-10.0f64..2000.0, Just(f64::INFINITY), Just(f64::NAN)],
    ) {
        let n_int = multiple * k;
        let policy = ReestimationPolicy {
            n_int,
            n_max: n_int + extra,
            multiple,
            use_inflation_factor: false,
            inflation_level: InflationLevel::Nominal,
        };
        let n = clamp_and_round(&policy, n_formula);
        prop_assert!(n >= n_int && n <= policy.n_max_rounded());
        prop_assert_eq!(n % multiple, 0);
        if n_formula.is_finite() && n_formula <= n_int as f64 {
            prop_assert_eq!(n, n_int);
        }
        if n_formula.is_finite() && n < policy.n_max_rounded() {
            prop_assert!(n as f64 >= n_formula);
            prop_assert!(n < n_int.max(n_formula.ceil() as usize) + multiple);
        }
    }

    #[test]
    fn inflation_factor_decreases_to_one(alpha in 0.01f64..0.3, beta in 0.05f64..0.4, nu in 2.0f64..400.0) {
        let f = inflation_factor(alpha, beta, nu).unwrap();
        let g = inflation_factor(alpha, beta, nu * 1.5).unwrap();
        prop_assert!(f > g && g > 1.0);
    }

    #[test]
    fn unit_information_correlation_is_a_correlation(which in 0usize..3, se2 in 0.01f64..100.0, sb2 in 0.0f64..100.0) {
        let (design, _, _, _) = hyp(["example1", "example2", "example3"][which]);
        let info = unit_information(&design, se2, sb2).unwrap();
        let c: &DMatrix<f64> = &info.q_corr;
        prop_assert!(c.clone().cholesky().is_some());
        for i in 0..c.nrows() {
            prop_assert!((c[(i, i)] - 1.0).abs() < 1e-12);
            prop_assert!(info.unit_info[i] > 0.0);
        }
    }
}
