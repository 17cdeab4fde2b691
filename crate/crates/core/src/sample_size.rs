//! Design-stage information, critical values, the sample size function
//! `N(sigma_e2, sigma_b2)` and the interim re-estimation rule.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::design::{Direction, HypothesisSpec, PowerKind, TrialDesign};
use crate::error::{Error, Result};
use crate::mixed_model::{build_design_matrix, gls_fit, BlockCovariance, PatientAllocation};
use crate::numerics::{
    equicoordinate_quantile, min_integer_satisfying, mvn_probability, std_normal_cdf,
    std_normal_quantile, student_t_quantile, IntegrationSettings,
};

/// Per-patient information and correlation of the design-stage statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignInformation {
    /// `i_d` with `I_d = N i_d` under equal allocation.
    pub unit_info: Vec<f64>,
    /// Correlation of `(Q_1, ..., Q_{D-1})`; free of `N`.
    pub q_corr: DMatrix<f64>,
}

/// Correlation matrix of the treatment block of a coefficient covariance.
fn treatment_correlation(var_beta: &DMatrix<f64>, comparisons: usize) -> Result<DMatrix<f64>> {
    let q = var_beta.nrows();
    if comparisons == 0 || comparisons > q {
        return Err(Error::Analysis("covariance has no treatment block".into()));
    }
    let off = q - comparisons;
    let sd: Vec<f64> = (0..comparisons)
        .map(|d| var_beta[(off + d, off + d)].sqrt())
        .collect();
    if sd.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Analysis("non-positive treatment variance".into()));
    }
    Ok(DMatrix::from_fn(comparisons, comparisons, |i, j| {
        if i == j {
            1.0
        } else {
            (var_beta[(off + i, off + j)] / (sd[i] * sd[j])).clamp(-1.0, 1.0)
        }
    }))
}

/// Information per patient for each `tau_d`, from one patient per sequence.
pub fn unit_information(
    design: &TrialDesign,
    sigma_e2: f64,
    sigma_b2: f64,
) -> Result<DesignInformation> {
    let k = design.n_sequences();
    let alloc = PatientAllocation::new((0..k).collect());
    let x = build_design_matrix(design, &alloc)?;
    let cov = BlockCovariance::new(sigma_e2, sigma_b2, design.periods())?;
    let y = vec![0.0; x.nrows()];
    let (_, var) = gls_fit(&y, &x, &cov)?;
    let m = design.treatments() - 1;
    let off = var.nrows() - m;
    let unit_info = (0..m)
        .map(|d| 1.0 / (k as f64 * var[(off + d, off + d)]))
        .collect();
    Ok(DesignInformation {
        unit_info,
        q_corr: treatment_correlation(&var, m)?,
    })
}

/// Equicoordinate critical value and implied per-comparison level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticalValue {
    pub e: f64,
    /// `1 - Phi(e)`
    pub alpha_star: f64,
}

fn coverage(alpha: f64, direction: Direction) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameters(format!(
            "alpha {alpha} not in (0,1)"
        )));
    }
    Ok(match direction {
        Direction::TwoSided => 1.0 - alpha / 2.0,
        _ => 1.0 - alpha,
    })
}

const CORR_GRID: f64 = 1e10;

type CacheKey = (u64, u64, Vec<i64>);

fn critical_cache() -> &'static Mutex<HashMap<CacheKey, f64>> {
    static CACHE: OnceLock<Mutex<HashMap<CacheKey, f64>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Equicoordinate quantile evaluated at the correlation snapped to a `1e-10`
/// grid and memoised, so repeated calls agree bit for bit in any order.
pub fn cached_equicoordinate_quantile(
    prob: f64,
    corr: &DMatrix<f64>,
    nu: Option<f64>,
) -> Result<f64> {
    let m = corr.nrows();
    let mut snapped_vals = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in 0..i {
            snapped_vals.push((corr[(i, j)] * CORR_GRID).round() as i64);
        }
    }
    let key = (prob.to_bits(), nu.map_or(0, f64::to_bits), snapped_vals);
    if let Some(&e) = critical_cache().lock().expect("cache poisoned").get(&key) {
        return Ok(e);
    }
    let mut idx = 0;
    let mut snapped = DMatrix::identity(m, m);
    for i in 0..m {
        for j in 0..i {
            let v = key.2[idx] as f64 / CORR_GRID;
            snapped[(i, j)] = v;
            snapped[(j, i)] = v;
            idx += 1;
        }
    }
    let e = equicoordinate_quantile(prob, &snapped, nu, &IntegrationSettings::default())?;
    critical_cache()
        .lock()
        .expect("cache poisoned")
        .insert(key, e);
    Ok(e)
}

/// Solve `1 - alpha = Phi_{D-1}((e, ..., e), Var(Q))` (one-sided) or the
/// displayed `1 - alpha/2` equation (two-sided).
pub fn design_critical_value(
    q_corr: &DMatrix<f64>,
    alpha: f64,
    direction: Direction,
) -> Result<CriticalValue> {
    let prob = coverage(alpha, direction)?;
    let e = cached_equicoordinate_quantile(prob, q_corr, None)?;
    Ok(CriticalValue {
        e,
        alpha_star: 1.0 - std_normal_cdf(e),
    })
}

fn check_delta(hyp: &HypothesisSpec) -> Result<f64> {
    if hyp.delta == 0.0 || !hyp.delta.is_finite() {
        return Err(Error::InvalidParameters("delta must be non-zero".into()));
    }
    Ok(hyp.delta.abs())
}

/// Real-valued `N` giving pairwise power `1 - beta` for `H01` at `tau_1 = delta`:
/// `(z_{1-alpha*} + z_{1-beta})^2 / (delta^2 i_1)`.
pub fn required_n_pairwise(
    design: &TrialDesign,
    sigma_e2: f64,
    sigma_b2: f64,
    hyp: &HypothesisSpec,
) -> Result<f64> {
    let delta = check_delta(hyp)?;
    let info = unit_information(design, sigma_e2, sigma_b2)?;
    let cv = design_critical_value(&info.q_corr, hyp.alpha, hyp.direction)?;
    Ok(pairwise_from(&info, cv, delta, hyp.beta))
}

fn pairwise_from(info: &DesignInformation, cv: CriticalValue, delta: f64, beta: f64) -> f64 {
    let z = cv.e + std_normal_quantile(1.0 - beta).expect("beta validated");
    z * z / (delta * delta * info.unit_info[0])
}

/// Familywise power at `tau = (delta, ..., delta)` for `n` patients.
pub fn familywise_power(
    info: &DesignInformation,
    cv: CriticalValue,
    delta: f64,
    n: f64,
) -> Result<f64> {
    let upper: Vec<f64> = info
        .unit_info
        .iter()
        .map(|i| cv.e - delta * (n * i).sqrt())
        .collect();
    Ok(1.0 - mvn_probability(&upper, &info.q_corr, &IntegrationSettings::default())?)
}

/// Smallest integer `N` with familywise power at least `1 - beta`.
pub fn required_n_familywise(
    design: &TrialDesign,
    sigma_e2: f64,
    sigma_b2: f64,
    hyp: &HypothesisSpec,
) -> Result<u64> {
    let delta = check_delta(hyp)?;
    let info = unit_information(design, sigma_e2, sigma_b2)?;
    let cv = design_critical_value(&info.q_corr, hyp.alpha, hyp.direction)?;
    let pairwise = pairwise_from(&info, cv, delta, hyp.beta).ceil().max(1.0) as u64;
    let target = 1.0 - hyp.beta;
    let mut failure = None;
    let n = min_integer_satisfying(
        |n| match familywise_power(&info, cv, delta, n as f64) {
            Ok(p) => p >= target,
            Err(e) => {
                failure = Some(e);
                true
            }
        },
        1,
        10 * pairwise,
    );
    match failure {
        Some(e) => Err(e),
        None => n,
    }
}

/// `N(sigma_e2, sigma_b2)` for the configured power definition.
pub fn required_n(
    design: &TrialDesign,
    sigma_e2: f64,
    sigma_b2: f64,
    hyp: &HypothesisSpec,
) -> Result<f64> {
    match hyp.power_kind {
        PowerKind::Pairwise => required_n_pairwise(design, sigma_e2, sigma_b2, hyp),
        PowerKind::Familywise => {
            required_n_familywise(design, sigma_e2, sigma_b2, hyp).map(|n| n as f64)
        }
    }
}

/// `((t_{1-a,nu} + t_{1-b,nu}) / (z_{1-a} + z_{1-b}))^2`
pub fn inflation_factor(alpha: f64, beta: f64, nu: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0 && beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidParameters(
            "alpha and beta must lie in (0,1)".into(),
        ));
    }
    let t = student_t_quantile(1.0 - alpha, nu)? + student_t_quantile(1.0 - beta, nu)?;
    let z = std_normal_quantile(1.0 - alpha)? + std_normal_quantile(1.0 - beta)?;
    Ok((t / z).powi(2))
}

/// Degrees of freedom `(N-1)(P-1) - (D-1)` of the analysis with `n` patients.
pub fn analysis_df(n: usize, periods: usize, treatments: usize) -> i64 {
    (n as i64 - 1) * (periods as i64 - 1) - (treatments as i64 - 1)
}

/// Level entering the inflation factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InflationLevel {
    /// The familywise `alpha`.
    #[default]
    Nominal,
    /// The implied per-comparison `alpha*`.
    PerComparison,
}

/// How the interim estimate is turned into a final sample size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReestimationPolicy {
    pub n_int: usize,
    pub n_max: usize,
    /// Final sample sizes are multiples of this (K for simple, n_B for block randomisation).
    pub multiple: usize,
    pub use_inflation_factor: bool,
    #[serde(default)]
    pub inflation_level: InflationLevel,
}

impl ReestimationPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.multiple == 0 || self.n_int == 0 || self.n_int > self.n_max {
            return Err(Error::InvalidParameters(format!(
                "need 0 < n_int ({}) <= n_max ({}) and a positive rounding multiple",
                self.n_int, self.n_max
            )));
        }
        if !self.n_int.is_multiple_of(self.multiple) {
            return Err(Error::InvalidParameters(format!(
                "n_int = {} is not a multiple of {}",
                self.n_int, self.multiple
            )));
        }
        Ok(())
    }

    /// Largest admissible final sample size: `n_max` rounded down to the multiple.
    pub fn n_max_rounded(&self) -> usize {
        (self.n_max / self.multiple) * self.multiple
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reestimate {
    /// `N(.)` at the interim estimates, after any inflation.
    pub n_formula: f64,
    pub n_hat: usize,
    /// Applied inflation factor (1 when disabled).
    pub inflation: f64,
}

/// Apply the clamp `n_int <= N <= n_max` and rounding to an already computed `N(.)`.
pub fn clamp_and_round(policy: &ReestimationPolicy, n_formula: f64) -> usize {
    let cap = policy.n_max_rounded();
    if !n_formula.is_finite() || n_formula >= cap as f64 {
        return cap;
    }
    let ceil = (n_formula.ceil().max(0.0) as usize).clamp(policy.n_int, policy.n_max);
    (ceil.div_ceil(policy.multiple) * policy.multiple).min(cap)
}

/// Final sample size from the interim variance estimates.
///
/// A non-positive `sigma_e2_hat` means no further information is needed and
/// yields `n_int`.
pub fn reestimate(
    policy: &ReestimationPolicy,
    sigma_e2_hat: f64,
    sigma_b2_trunc: f64,
    design: &TrialDesign,
    hyp: &HypothesisSpec,
) -> Result<Reestimate> {
    policy.validate()?;
    if !sigma_e2_hat.is_finite() || !(sigma_b2_trunc >= 0.0 && sigma_b2_trunc.is_finite()) {
        return Err(Error::InvalidParameters(
            "interim estimates must be finite with sigma_b2 >= 0".into(),
        ));
    }
    let base = if sigma_e2_hat <= 0.0 {
        0.0
    } else {
        required_n(design, sigma_e2_hat, sigma_b2_trunc, hyp)?
    };
    let inflation = if policy.use_inflation_factor {
        let nu = analysis_df(policy.n_int, design.periods(), design.treatments());
        if nu < 1 {
            return Err(Error::InvalidParameters(format!(
                "interim degrees of freedom {nu} < 1"
            )));
        }
        let level = match policy.inflation_level {
            InflationLevel::Nominal => hyp.alpha,
            InflationLevel::PerComparison => {
                let info =
                    unit_information(design, sigma_e2_hat.max(f64::MIN_POSITIVE), sigma_b2_trunc)?;
                design_critical_value(&info.q_corr, hyp.alpha, hyp.direction)?.alpha_star
            }
        };
        inflation_factor(level, hyp.beta, nu as f64)?
    } else {
        1.0
    };
    let n_formula = base * inflation;
    Ok(Reestimate {
        n_formula,
        n_hat: clamp_and_round(policy, n_formula),
        inflation,
    })
}

/// Critical value of the final many-to-one analysis with the fitted covariance:
/// solves `1 - alpha = Psi_{D-1}((e, ..., e), Var(T), nu_N)`.
pub fn analysis_critical_value(
    var_beta: &DMatrix<f64>,
    n: usize,
    treatments: usize,
    periods: usize,
    alpha: f64,
    direction: Direction,
) -> Result<f64> {
    let nu = analysis_df(n, periods, treatments);
    if nu < 1 {
        return Err(Error::Analysis(format!(
            "analysis degrees of freedom {nu} < 1"
        )));
    }
    let prob = coverage(alpha, direction)?;
    let corr = treatment_correlation(var_beta, treatments - 1)?;
    cached_equicoordinate_quantile(prob, &corr, Some(nu as f64))
}

/// Design-stage summary for a trial with known variances.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignSummary {
    pub info: DesignInformation,
    pub critical: CriticalValue,
    /// Real-valued pairwise `N`.
    pub n_pairwise: f64,
    pub n_ceil: usize,
    /// `ceil(N)` rounded up to a multiple of K.
    pub n_balanced_up: usize,
    /// `ceil(N)` rounded to the nearest multiple of K.
    pub n_balanced_nearest: usize,
    pub n_familywise: u64,
}

pub fn design_summary(
    design: &TrialDesign,
    sigma_e2: f64,
    sigma_b2: f64,
    hyp: &HypothesisSpec,
) -> Result<DesignSummary> {
    hyp.validate()?;
    let delta = check_delta(hyp)?;
    let info = unit_information(design, sigma_e2, sigma_b2)?;
    let critical = design_critical_value(&info.q_corr, hyp.alpha, hyp.direction)?;
    let n_pairwise = pairwise_from(&info, critical, delta, hyp.beta);
    let n_ceil = n_pairwise.ceil() as usize;
    let k = design.n_sequences();
    let nearest = ((n_ceil as f64 / k as f64).round() as usize).max(1) * k;
    Ok(DesignSummary {
        n_familywise: required_n_familywise(design, sigma_e2, sigma_b2, hyp)?,
        info,
        critical,
        n_pairwise,
        n_ceil,
        n_balanced_up: n_ceil.div_ceil(k) * k,
        n_balanced_nearest: nearest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtin::builtin_design;

    #[test]
    fn complete_block_information() {
        let t = builtin_design("example1").unwrap();
        for &sb2 in &[0.0, 10.12, 651.0] {
            let info = unit_information(&t.design, 6.51, sb2).unwrap();
            for &i in &info.unit_info {
                assert!((i - 1.0 / (2.0 * 6.51)).abs() < 1e-10);
            }
            for i in 0..3 {
                for j in 0..3 {
                    let want = if i == j { 1.0 } else { 0.5 };
                    assert!((info.q_corr[(i, j)] - want).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn single_comparison_critical_value() {
        let c = DMatrix::identity(1, 1);
        let cv = design_critical_value(&c, 0.025, Direction::Less).unwrap();
        assert!((cv.e - 1.959964).abs() < 1e-4);
        assert!((cv.alpha_star - 0.025).abs() < 1e-12);
        let cv = design_critical_value(&c, 0.5, Direction::Greater).unwrap();
        assert!(cv.e.abs() < 1e-12);
    }

    #[test]
    fn rounding_rule() {
        let p = ReestimationPolicy {
            n_int: 16,
            n_max: 1000,
            multiple: 4,
            use_inflation_factor: false,
            inflation_level: InflationLevel::Nominal,
        };
        assert_eq!(clamp_and_round(&p, 50.3), 52);
        assert_eq!(clamp_and_round(&p, 12.0), 16);
        assert_eq!(clamp_and_round(&p, 2000.0), 1000);
        let odd = ReestimationPolicy {
            n_max: 1001,
            multiple: 6,
            n_int: 12,
            ..p
        };
        assert_eq!(clamp_and_round(&odd, 5000.0), 996);
        assert_eq!(clamp_and_round(&odd, 995.5), 996);
    }

    #[test]
    fn inflation_limits() {
        assert!((inflation_factor(0.05, 0.2, f64::INFINITY).unwrap() - 1.0).abs() < 1e-12);
        let mut last = f64::INFINITY;
        for nu in 5..=500 {
            let f = inflation_factor(0.05, 0.2, nu as f64).unwrap();
            assert!(f < last && f > 1.0);
            last = f;
        }
    }

    #[test]
    fn analysis_df_arithmetic() {
        assert_eq!(analysis_df(16, 4, 4), 42);
        assert_eq!(analysis_df(72, 4, 4), 210);
    }
}
