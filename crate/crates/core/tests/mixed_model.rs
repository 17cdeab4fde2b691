use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xover_core::builtin::builtin_design;
use xover_core::design::{ModelParams, TrialDesign};
use xover_core::mixed_model::{
    build_design_matrix, gls_fit, reml_fit, reml_loglik, BlockCovariance, PatientAllocation,
};
use xover_core::simulator::simulate_responses;

fn balanced(design: &TrialDesign, per_seq: usize) -> PatientAllocation {
    PatientAllocation::new(
        (0..design.n_sequences() * per_seq)
            .map(|i| i % design.n_sequences())
            .collect(),
    )
}

fn data(
    name: &str,
    per_seq: usize,
    seed: u64,
) -> (TrialDesign, ModelParams, PatientAllocation, Vec<f64>) {
    let t = builtin_design(name).unwrap();
    let alloc = balanced(&t.design, per_seq);
    let mut y = Vec::new();
    simulate_responses(
        &alloc,
        0,
        &t.design,
        &t.params,
        &mut ChaCha8Rng::seed_from_u64(seed),
        &mut y,
    );
    (t.design, t.params, alloc, y)
}

/// Restricted log-likelihood from the dense `NP x NP` covariance.
fn dense_reml(y: &[f64], x: &DMatrix<f64>, periods: usize, se2: f64, sb2: f64) -> f64 {
    let n = y.len();
    let v = DMatrix::from_fn(n, n, |i, j| {
        let same = i / periods == j / periods;
        (if i == j { se2 } else { 0.0 }) + if same { sb2 } else { 0.0 }
    });
    let chol = v.clone().cholesky().unwrap();
    let vinv = chol.inverse();
    let logdet_v: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let info = x.transpose() * &vinv * x;
    let ichol = info.clone().cholesky().unwrap();
    let logdet_i: f64 = 2.0 * ichol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let yv = DVector::from_column_slice(y);
    let beta = ichol.solve(&(x.transpose() * &vinv * &yv));
    let r = &yv - x * beta;
    -0.5 * (logdet_v + logdet_i + (r.transpose() * &vinv * &r)[(0, 0)])
}

#[test]
fn loglik_matches_dense_formula() {
    for name in ["example1", "example2", "example3"] {
        let (design, _, alloc, y) = data(name, 3, 11);
        let x = build_design_matrix(&design, &alloc).unwrap();
        let p = design.periods();
        let offset = reml_loglik(&y, &x, p, 1.0, 1.0).unwrap() - dense_reml(&y, &x, p, 1.0, 1.0);
        for (se2, sb2) in [(0.5, 0.0), (2.0, 3.0), (7.0, 0.1), (0.2, 20.0)] {
            let got = reml_loglik(&y, &x, p, se2, sb2).unwrap() - dense_reml(&y, &x, p, se2, sb2);
            assert!((got - offset).abs() < 1e-8, "{name} at ({se2}, {sb2})");
        }
    }
}

#[test]
fn fit_beats_a_dense_grid() {
    for (name, seed) in [("example1", 1), ("example2", 2), ("example3", 3)] {
        let (design, params, alloc, y) = data(name, 4, seed);
        let x = build_design_matrix(&design, &alloc).unwrap();
        let p = design.periods();
        let fit = reml_fit(&y, &x, p).unwrap();
        assert!(fit.converged);
        let scale = params.sigma_e2 + params.sigma_b2;
        let mut best = f64::NEG_INFINITY;
        for i in 1..=60 {
            for j in 0..=60 {
                let se2 = scale * 0.04 * i as f64;
                let sb2 = scale * 0.04 * j as f64;
                best = best.max(dense_reml(&y, &x, p, se2, sb2));
            }
        }
        let at_fit = dense_reml(&y, &x, p, fit.sigma_e2_hat, fit.sigma_b2_hat);
        assert!(
            at_fit >= best - 1e-9,
            "{name}: fit {at_fit} below grid {best}"
        );
    }
}

#[test]
fn ordinary_least_squares_without_subject_variance() {
    let (design, _, alloc, y) = data("example1", 3, 4);
    let x = build_design_matrix(&design, &alloc).unwrap();
    let (beta, var) = gls_fit(
        &y,
        &x,
        &BlockCovariance::new(2.0, 0.0, design.periods()).unwrap(),
    )
    .unwrap();
    let xtx = (x.transpose() * &x).try_inverse().unwrap();
    let ols = &xtx * x.transpose() * DVector::from_column_slice(&y);
    assert!((beta - ols).amax() < 1e-9);
    assert!((var - xtx * 2.0).amax() < 1e-9);
}

#[test]
fn complete_block_treatment_variance() {
    let t = builtin_design("example1").unwrap();
    for per_seq in [2, 5, 18] {
        let alloc = balanced(&t.design, per_seq);
        let n = alloc.n_patients() as f64;
        let x = build_design_matrix(&t.design, &alloc).unwrap();
        let y = vec![0.0; x.nrows()];
        for sb2 in [0.0, 10.12, 40.48] {
            let (_, var) = gls_fit(&y, &x, &BlockCovariance::new(6.51, sb2, 4).unwrap()).unwrap();
            for d in 0..3 {
                let v = var[(4 + d, 4 + d)];
                assert!(
                    (v - 2.0 * 6.51 / n).abs() < 1e-10,
                    "per_seq {per_seq}, sb2 {sb2}: {v}"
                );
            }
        }
    }
}

#[test]
fn noise_free_data_recovers_effects() {
    let t = builtin_design("example3").unwrap();
    let mut p = t.params.clone();
    p.sigma_e2 = 0.0;
    p.sigma_b2 = 0.0;
    let alloc = balanced(&t.design, 2);
    let mut y = Vec::new();
    simulate_responses(
        &alloc,
        0,
        &t.design,
        &p,
        &mut ChaCha8Rng::seed_from_u64(0),
        &mut y,
    );
    let x = build_design_matrix(&t.design, &alloc).unwrap();
    let fit = reml_fit(&y, &x, 3).unwrap();
    let truth = DVector::from_vec(p.fixed_effects());
    assert!((fit.beta_hat - truth).amax() < 1e-9);
    // Residuals are pure round-off on responses of size ~150.
    assert!(
        fit.sigma_e2_hat < 1e-9 && fit.sigma_b2_hat < 1e-9,
        "{} {}",
        fit.sigma_e2_hat,
        fit.sigma_b2_hat
    );
}

#[test]
fn fixed_effects_and_variance_are_unbiased() {
    let t = builtin_design("example1").unwrap();
    let alloc = balanced(&t.design, 6);
    let x = build_design_matrix(&t.design, &alloc).unwrap();
    let truth = t.params.fixed_effects();
    let reps = 3000;
    let q = truth.len();
    let mut sum = vec![0.0; q + 1];
    let mut sq = vec![0.0; q + 1];
    for r in 0..reps {
        let mut y = Vec::new();
        simulate_responses(
            &alloc,
            0,
            &t.design,
            &t.params,
            &mut ChaCha8Rng::seed_from_u64(1000 + r),
            &mut y,
        );
        let fit = reml_fit(&y, &x, 4).unwrap();
        for i in 0..q {
            sum[i] += fit.beta_hat[i];
            sq[i] += fit.beta_hat[i].powi(2);
        }
        sum[q] += fit.sigma_e2_hat;
        sq[q] += fit.sigma_e2_hat.powi(2);
    }
    let n = reps as f64;
    for (i, want) in truth
        .iter()
        .chain(std::iter::once(&t.params.sigma_e2))
        .enumerate()
    {
        let mean = sum[i] / n;
        let se = ((sq[i] / n - mean * mean) / n).sqrt();
        assert!(
            (mean - want).abs() < 4.0 * se,
            "component {i}: mean {mean}, truth {want}, se {se}"
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn translation_and_scale_equivariance(
        seed in 0u64..10_000,
        shift in prop::collection::vec(-5.0f64..5.0, 7),
        scale in 0.1f64..10.0,
        which in 0usize..3,
    ) {
        let name = ["example1", "example2", "example3"][which];
        let (design, _, alloc, y) = data(name, 3, seed);
        let x = build_design_matrix(&design, &alloc).unwrap();
        let p = design.periods();
        let q = x.ncols();
        let gamma = DVector::from_column_slice(&shift[..q]);
        let fit = reml_fit(&y, &x, p).unwrap();

        let moved: Vec<f64> = (DVector::from_column_slice(&y) + &x * &gamma).iter().copied().collect();
        let f2 = reml_fit(&moved, &x, p).unwrap();
        // The objective is invariant to round-off; its flat maximum pins the argmax only to about sqrt(eps).
        prop_assert!((f2.reml_loglik - fit.reml_loglik).abs() < 1e-10 * (1.0 + fit.reml_loglik.abs()));
        prop_assert!((f2.sigma_e2_hat - fit.sigma_e2_hat).abs() < 1e-6 * (1.0 + fit.sigma_e2_hat));
        prop_assert!((f2.sigma_b2_hat - fit.sigma_b2_hat).abs() < 1e-6 * (1.0 + fit.sigma_e2_hat + fit.sigma_b2_hat));
        let db = (&f2.beta_hat - &fit.beta_hat - &gamma).amax();
        // The optimiser tolerance moves the GLS weights, so compare on the data scale.
        prop_assert!(db < 1e-6 * (1.0 + (fit.sigma_e2_hat + fit.sigma_b2_hat).sqrt()), "beta shift off by {db}");

        let scaled: Vec<f64> = y.iter().map(|v| v * scale).collect();
        let f3 = reml_fit(&scaled, &x, p).unwrap();
        let s2 = scale * scale;
        prop_assert!((f3.sigma_e2_hat - s2 * fit.sigma_e2_hat).abs() < 1e-6 * s2 * (1.0 + fit.sigma_e2_hat));
        prop_assert!((f3.sigma_b2_hat - s2 * fit.sigma_b2_hat).abs() < 1e-5 * s2 * (1.0 + fit.sigma_e2_hat + fit.sigma_b2_hat));
    }
}
