#![allow(dead_code)]

pub mod quad;

use xover_core::builtin::builtin_design;
use xover_core::config::{ConfigFile, MethodEntry, RunManifest, ScenarioGrid, DEFAULT_SEED};
use xover_core::design::{ModelParams, TrialDesign};
use xover_core::estimators::Method;
use xover_core::mixed_model::PatientAllocation;
use xover_core::simulator::{ScenarioConfig, TauScenario};

/// One scenario of a built-in example, expanded through the configuration layer.
pub fn scenario(
    example: &str,
    method: Method,
    n_b: Option<usize>,
    n_int: usize,
    tau: TauScenario,
    reps: usize,
) -> ScenarioConfig {
    let cfg = ConfigFile {
        name: "t".into(),
        example: Some(example.into()),
        design: None,
        params: None,
        hypothesis: None,
        master_seed: DEFAULT_SEED,
        replications: reps,
        n_max: 1000,
        inflation_level: Default::default(),
        analysis_alpha: None,
        calibration: None,
        scenarios: vec![ScenarioGrid {
            n_int: vec![n_int],
            methods: vec![MethodEntry {
                n_b,
                ..MethodEntry::simple(method)
            }],
            tau: vec![tau],
            sigma_e2: vec![],
            sigma_b2: vec![],
            delta: vec![],
            inflation: vec![false],
            random_period_sd: vec![],
        }],
    };
    RunManifest::build(cfg).unwrap().scenarios.remove(0).config
}

/// Exact expectation of an estimator that is a quadratic function of the
/// responses: `E f(y) = f(mu) + sum_m [f(mu + l_m) + f(mu - l_m) - 2 f(mu)] / 2`
/// over the columns `l_m` of a square root of the covariance.
pub fn quadratic_expectation(
    design: &TrialDesign,
    params: &ModelParams,
    alloc: &PatientAllocation,
    f: impl Fn(&[f64]) -> f64,
) -> f64 {
    let p = design.periods();
    let mu: Vec<f64> = alloc
        .sequences
        .iter()
        .flat_map(|&k| (0..p).map(move |j| params.cell_mean(design, k, j)))
        .collect();
    let cov = nalgebra::DMatrix::from_fn(p, p, |i, j| {
        params.sigma_b2 + if i == j { params.sigma_e2 } else { 0.0 }
    });
    let l = cov.cholesky().expect("positive definite block").l();
    let base = f(&mu);
    let mut total = base;
    let mut y = mu.clone();
    for patient in 0..alloc.n_patients() {
        for m in 0..p {
            for sign in [1.0, -1.0] {
                for j in 0..p {
                    y[patient * p + j] = mu[patient * p + j] + sign * l[(j, m)];
                }
                total += 0.5 * (f(&y) - base);
            }
            y[patient * p..(patient + 1) * p].copy_from_slice(&mu[patient * p..(patient + 1) * p]);
        }
    }
    total
}

pub fn equal_allocation(design: &TrialDesign, n: usize) -> PatientAllocation {
    PatientAllocation::new((0..n).map(|i| i % design.n_sequences()).collect())
}

pub fn builtin_params(example: &str, tau: &TauScenario) -> (TrialDesign, ModelParams, f64) {
    let t = builtin_design(example).unwrap();
    let mut p = t.params.clone();
    p.tau = tau
        .resolve(t.design.treatments(), t.hypothesis.delta, &t.params.tau)
        .unwrap();
    (t.design, p, t.hypothesis.delta)
}

/// Null-adjusted bias of the within-patient estimate: what assuming no
/// treatment effects leaves behind.
pub fn null_adjusted_bias(design: &TrialDesign, tau: &[f64], n: usize) -> f64 {
    let (k, p) = (design.n_sequences(), design.periods());
    let mut s = 0.0;
    for j in 1..p {
        for seq in 0..k {
            s += (tau[design.treatment(seq, j)] - tau[design.treatment(seq, j - 1)]).powi(2);
        }
    }
    n as f64 / (2.0 * k as f64 * (p as f64 - 1.0) * (n as f64 - 1.0)) * s
}
