//! Design matrices, GLS with known variances and REML fitting of the crossover
//! mixed model `y_ijk = mu0 + pi_j + tau_d(j,k) + s_ik + e_ijk`.
//!
//! Every computation works patient by patient on `P x P` blocks; the
//! `NP x NP` covariance is never formed.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::design::TrialDesign;
use crate::error::{Error, Result};
use crate::numerics::minimize_scalar;

/// Sequence (and optionally block) assignment of each patient.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PatientAllocation {
    /// 0-based sequence index per patient.
    pub sequences: Vec<usize>,
    /// Block label per patient, when randomised in blocks.
    pub blocks: Option<Vec<usize>>,
}

impl PatientAllocation {
    pub fn new(sequences: Vec<usize>) -> Self {
        Self {
            sequences,
            blocks: None,
        }
    }

    pub fn n_patients(&self) -> usize {
        self.sequences.len()
    }

    /// Patients per sequence.
    pub fn sequence_counts(&self, n_sequences: usize) -> Vec<usize> {
        let mut counts = vec![0; n_sequences];
        for &k in &self.sequences {
            counts[k] += 1;
        }
        counts
    }

    pub fn validate(&self, design: &TrialDesign) -> Result<()> {
        if let Some(&bad) = self.sequences.iter().find(|&&k| k >= design.n_sequences()) {
            return Err(Error::InvalidAllocation(format!(
                "sequence index {bad} but design has {} sequences",
                design.n_sequences()
            )));
        }
        if let Some(blocks) = &self.blocks {
            if blocks.len() != self.sequences.len() {
                return Err(Error::InvalidAllocation(
                    "one block label per patient required".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Fixed-effects matrix in patient-major, period-minor row order with
/// columns `(mu0, pi_2..pi_P, tau_1..tau_{D-1})`.
pub fn build_design_matrix(
    design: &TrialDesign,
    alloc: &PatientAllocation,
) -> Result<DMatrix<f64>> {
    alloc.validate(design)?;
    let p = design.periods();
    let q = design.n_fixed();
    let mut x = DMatrix::zeros(alloc.n_patients() * p, q);
    for (i, &k) in alloc.sequences.iter().enumerate() {
        for j in 0..p {
            let row = i * p + j;
            x[(row, 0)] = 1.0;
            if j > 0 {
                x[(row, j)] = 1.0;
            }
            let d = design.treatment(k, j);
            if d > 0 {
                x[(row, p - 1 + d)] = 1.0;
            }
        }
    }
    Ok(x)
}

/// Per-patient covariance `sigma_e2 * I_P + sigma_b2 * J_P`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockCovariance {
    pub sigma_e2: f64,
    pub sigma_b2: f64,
    pub periods: usize,
}

impl BlockCovariance {
    pub fn new(sigma_e2: f64, sigma_b2: f64, periods: usize) -> Result<Self> {
        if !(sigma_e2 > 0.0 && sigma_e2.is_finite()) {
            return Err(Error::Domain(format!(
                "sigma_e2 = {sigma_e2} must be positive"
            )));
        }
        if !(sigma_b2 >= 0.0 && sigma_b2.is_finite()) {
            return Err(Error::Domain(format!("sigma_b2 = {sigma_b2} must be >= 0")));
        }
        if periods == 0 {
            return Err(Error::Domain("at least one period required".into()));
        }
        Ok(Self {
            sigma_e2,
            sigma_b2,
            periods,
        })
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let p = self.periods;
        DMatrix::from_fn(p, p, |i, j| {
            self.sigma_b2 + if i == j { self.sigma_e2 } else { 0.0 }
        })
    }

    /// Weight applied to `1' y_i` within the inverse: `sigma_b2 / (sigma_e2 + P sigma_b2)`.
    fn shrink(&self) -> f64 {
        self.sigma_b2 / (self.sigma_e2 + self.periods as f64 * self.sigma_b2)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let p = self.periods;
        let b = self.shrink();
        DMatrix::from_fn(p, p, |i, j| {
            ((if i == j { 1.0 } else { 0.0 }) - b) / self.sigma_e2
        })
    }

    /// `log |Sigma_P|` from the eigenvalues `sigma_e2` (multiplicity `P-1`) and `sigma_e2 + P sigma_b2`.
    pub fn log_det(&self) -> f64 {
        let p = self.periods as f64;
        (p - 1.0) * self.sigma_e2.ln() + (self.sigma_e2 + p * self.sigma_b2).ln()
    }
}

/// Closed-form inverse of the per-patient covariance block.
pub fn block_sigma_inverse(cov: &BlockCovariance) -> Result<DMatrix<f64>> {
    BlockCovariance::new(cov.sigma_e2, cov.sigma_b2, cov.periods)?;
    Ok(cov.inverse())
}

fn check_shapes(y: &[f64], x: &DMatrix<f64>, periods: usize) -> Result<usize> {
    if periods == 0 || y.len() != x.nrows() || !y.len().is_multiple_of(periods) {
        return Err(Error::Domain(format!(
            "response length {} incompatible with {} design rows and {periods} periods",
            y.len(),
            x.nrows()
        )));
    }
    if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite response or design entry".into()));
    }
    Ok(y.len() / periods)
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn spd_factor(m: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let scale = m.diagonal().amax();
    let chol = Cholesky::new(m).ok_or(Error::SingularInformation)?;
    let l = chol.l_dirty();
    let min_pivot = (0..l.nrows())
        .map(|i| l[(i, i)] * l[(i, i)])
        .fold(f64::INFINITY, f64::min);
    if !(min_pivot > 1e-11 * scale) {
        return Err(Error::SingularInformation);
    }
    Ok(chol)
}

/// Generalised least squares with known variance components:
/// returns `beta_hat` and `Var(beta_hat) = (X' Sigma^-1 X)^-1`.
pub fn gls_fit(
    y: &[f64],
    x: &DMatrix<f64>,
    cov: &BlockCovariance,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let cov = BlockCovariance::new(cov.sigma_e2, cov.sigma_b2, cov.periods)?;
    let stats = SufficientStats::new(y, x, cov.periods)?;
    let (ww, wb) = (
        1.0 / cov.sigma_e2,
        1.0 / (cov.sigma_e2 + cov.periods as f64 * cov.sigma_b2),
    );
    let info = &stats.a_within * ww + &stats.a_between * wb;
    let score = &stats.c_within * ww + &stats.c_between * wb;
    let chol = spd_factor(info)?;
    let beta = chol.solve(&score);
    let mut var = chol.inverse();
    symmetrize(&mut var);
    Ok((beta, var))
}

/// Cross-products split into within- and between-patient parts.
///
/// With `H = J_P / P`: `A_b = sum X_i' H X_i`, `A_w = sum X_i' X_i - A_b`,
/// and likewise for `X' y` and `y' y`.
#[derive(Debug, Clone)]
struct SufficientStats {
    a_within: DMatrix<f64>,
    a_between: DMatrix<f64>,
    c_within: DVector<f64>,
    c_between: DVector<f64>,
    s_within: f64,
    s_between: f64,
    patients: usize,
    periods: usize,
}

/// Residual quadratic form, log-determinant, estimate and factor.
type ProfileParts = (f64, f64, DVector<f64>, Cholesky<f64, Dyn>);

impl SufficientStats {
    fn new(y: &[f64], x: &DMatrix<f64>, periods: usize) -> Result<Self> {
        let patients = check_shapes(y, x, periods)?;
        let q = x.ncols();
        let p = periods as f64;
        let mut a_all = DMatrix::zeros(q, q);
        let mut a_between = DMatrix::zeros(q, q);
        let mut c_all = DVector::zeros(q);
        let mut c_between = DVector::zeros(q);
        let (mut s_all, mut s_between) = (0.0, 0.0);
        let mut col_sum = DVector::zeros(q);
        for i in 0..patients {
            let rows = x.rows(i * periods, periods);
            let yi = &y[i * periods..(i + 1) * periods];
            a_all.gemm_tr(1.0, &rows, &rows, 1.0);
            col_sum.fill(0.0);
            let mut ysum = 0.0;
            for (j, &v) in yi.iter().enumerate() {
                let r = rows.row(j).transpose();
                col_sum += &r;
                c_all.axpy(v, &r, 1.0);
                ysum += v;
                s_all += v * v;
            }
            a_between.ger(1.0 / p, &col_sum, &col_sum, 1.0);
            c_between.axpy(ysum / p, &col_sum, 1.0);
            s_between += ysum * ysum / p;
        }
        Ok(Self {
            a_within: &a_all - &a_between,
            c_within: &c_all - &c_between,
            s_within: (s_all - s_between).max(0.0),
            a_between,
            c_between,
            s_between,
            patients,
            periods,
        })
    }

    fn n_obs(&self) -> usize {
        self.patients * self.periods
    }

    fn q(&self) -> usize {
        self.a_within.nrows()
    }

    /// For ratio `r = 1 + P sigma_b2 / sigma_e2`, return the unscaled residual
    /// quadratic form, `log |A_w + A_b / r|`, the estimate and the factor.
    fn profile_parts(&self, r: f64) -> Result<ProfileParts> {
        let a = &self.a_within + &self.a_between / r;
        let c = &self.c_within + &self.c_between / r;
        let chol = spd_factor(a)?;
        let beta = chol.solve(&c);
        let quad = (self.s_within + self.s_between / r - c.dot(&beta)).max(0.0);
        let l = chol.l_dirty();
        let log_det = 2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>();
        Ok((quad, log_det, beta, chol))
    }

    fn loglik(&self, sigma_e2: f64, sigma_b2: f64) -> Result<f64> {
        let cov = BlockCovariance::new(sigma_e2, sigma_b2, self.periods)?;
        let r = 1.0 + self.periods as f64 * sigma_b2 / sigma_e2;
        let (quad, log_det_a, _, _) = self.profile_parts(r)?;
        let q = self.q() as f64;
        let log_det_sigma = self.patients as f64 * cov.log_det();
        let log_det_info = log_det_a - q * sigma_e2.ln();
        Ok(-0.5 * (log_det_sigma + quad / sigma_e2 + log_det_info))
    }

    /// REML log-likelihood with `sigma_e2` profiled out, as a function of `ln r`.
    fn profile_loglik(&self, log_r: f64) -> Result<(f64, f64)> {
        let r = log_r.exp();
        let (quad, log_det_a, _, _) = self.profile_parts(r)?;
        let dof = (self.n_obs() - self.q()) as f64;
        let s2 = quad / dof;
        let value = -0.5 * (dof * s2.ln() + dof + self.patients as f64 * log_r + log_det_a);
        Ok((value, s2))
    }
}

/// Restricted log-likelihood
/// `-1/2 log|Sigma| - 1/2 (y - X b)' Sigma^-1 (y - X b) - 1/2 log|X' Sigma^-1 X|`
/// with `b` the GLS estimate at the given variances (additive constants omitted).
pub fn reml_loglik(
    y: &[f64],
    x: &DMatrix<f64>,
    periods: usize,
    sigma_e2: f64,
    sigma_b2: f64,
) -> Result<f64> {
    if !sigma_e2.is_finite() || !sigma_b2.is_finite() {
        return Err(Error::Domain("non-finite variance component".into()));
    }
    SufficientStats::new(y, x, periods)?.loglik(sigma_e2, sigma_b2)
}

/// Outcome of a REML fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    /// `(mu0, pi_2..pi_P, tau_1..tau_{D-1})`
    pub beta_hat: DVector<f64>,
    pub var_beta: DMatrix<f64>,
    pub sigma_e2_hat: f64,
    pub sigma_b2_hat: f64,
    pub reml_loglik: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Upper limit on `sigma_b2 / sigma_e2` explored by the optimiser.
const MAX_VARIANCE_RATIO: f64 = 1e7;
const GRID_POINTS: usize = 24;

/// Maximise the restricted likelihood over `sigma_e2 > 0`, `sigma_b2 >= 0`.
///
/// `sigma_e2` is profiled out analytically; the remaining one-dimensional
/// problem in `ln(1 + P sigma_b2 / sigma_e2)` is searched on a grid anchored at
/// the boundary `sigma_b2 = 0` and refined with Brent's method. The boundary is
/// returned exactly when it is at least as good as the interior optimum.
pub fn reml_fit(y: &[f64], x: &DMatrix<f64>, periods: usize) -> Result<FitResult> {
    let stats = SufficientStats::new(y, x, periods)?;
    if stats.patients < 2 {
        return Err(Error::Domain("at least two patients required".into()));
    }
    if stats.n_obs() <= stats.q() {
        return Err(Error::Domain("no residual degrees of freedom".into()));
    }
    let p = periods as f64;
    let scale = stats.s_within + stats.s_between;
    let (quad0, _, beta0, _) = stats.profile_parts(1.0)?;

    // exact fit: every residual is zero
    if quad0 <= 1e-24 * scale.max(f64::MIN_POSITIVE) {
        return Ok(FitResult {
            beta_hat: beta0,
            var_beta: DMatrix::zeros(stats.q(), stats.q()),
            sigma_e2_hat: 0.0,
            sigma_b2_hat: 0.0,
            reml_loglik: f64::INFINITY,
            converged: true,
            iterations: 0,
        });
    }

    let upper = (1.0 + p * MAX_VARIANCE_RATIO).ln();
    let objective = |u: f64| {
        stats
            .profile_loglik(u)
            .map(|v| v.0)
            .unwrap_or(f64::NEG_INFINITY)
    };

    let grid: Vec<(f64, f64)> = (0..=GRID_POINTS)
        .map(|g| {
            // denser near the boundary, where small-sample optima cluster
            let t = g as f64 / GRID_POINTS as f64;
            let u = upper * t * t;
            (u, objective(u))
        })
        .collect();
    let best = (0..grid.len())
        .max_by(|&a, &b| grid[a].1.total_cmp(&grid[b].1))
        .unwrap_or(0);
    let lo = grid[best.saturating_sub(1)].0;
    let hi = grid[(best + 1).min(grid.len() - 1)].0;
    let refined = minimize_scalar(|u| -objective(u), lo, hi, 1e-10, 200);

    let boundary = grid[0].1;
    let (u_hat, mut converged) = if boundary >= -refined.value && boundary >= grid[best].1 {
        (0.0, true)
    } else if -refined.value >= grid[best].1 {
        (refined.x, refined.converged)
    } else {
        (grid[best].0, false)
    };
    if best == grid.len() - 1 && u_hat > 0.0 && (upper - u_hat) < 1e-3 * upper {
        converged = false;
    }

    let (value, s2) = stats.profile_loglik(u_hat)?;
    let r = u_hat.exp();
    let (_, _, beta_hat, chol) = stats.profile_parts(r)?;
    let mut var_beta = chol.inverse() * s2;
    symmetrize(&mut var_beta);
    let sigma_b2_hat = if u_hat == 0.0 {
        0.0
    } else {
        s2 * (r - 1.0) / p
    };
    let reml = stats.loglik(s2, sigma_b2_hat).unwrap_or(value);
    Ok(FitResult {
        beta_hat,
        var_beta,
        sigma_e2_hat: s2,
        sigma_b2_hat,
        reml_loglik: reml,
        converged,
        iterations: GRID_POINTS + 1 + refined.iterations,
    })
}
