//! Multivariate normal and multivariate t rectangle probabilities.
//!
//! Three routes are provided:
//!
//! * separation of variables with a randomized rank-1 lattice rule (any
//!   positive semi-definite correlation), returning a Monte Carlo standard error;
//! * a one-factor reduction for correlations of the form `r_ij = l_i l_j`
//!   (which includes every equicorrelated and every bivariate case), evaluated
//!   with composite Gauss-Legendre quadrature;
//! * an exact bivariate normal routine for two comparisons.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bvn::bvn_cdf;
use super::quadrature::composite_nodes;
use super::search::solve_root;
use super::univariate::{
    chi2_quantile, ln_chi_scale_log_density, ppnd16, std_normal_cdf, std_normal_pdf,
    t_cdf_unchecked,
};
use crate::error::{Error, Result};

/// Controls for the lattice-rule integrator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegrationSettings {
    /// Lattice points per randomisation (initial; doubled until the target is met).
    pub qmc_points: usize,
    pub randomisations: usize,
    /// Target standard error of the probability estimate.
    pub target_abs_error: f64,
    pub seed: u64,
}

impl Default for IntegrationSettings {
    fn default() -> Self {
        Self {
            qmc_points: 1024,
            randomisations: 10,
            target_abs_error: 1e-4,
            seed: 0x5eed_1234_abcd_0001,
        }
    }
}

impl IntegrationSettings {
    pub fn validate(&self) -> Result<()> {
        if self.qmc_points < 128 {
            return Err(Error::Domain("qmc_points must be >= 128".into()));
        }
        if self.randomisations < 8 {
            return Err(Error::Domain("randomisations must be >= 8".into()));
        }
        if !(self.target_abs_error > 0.0 && self.target_abs_error <= 1e-2) {
            return Err(Error::Domain(
                "target_abs_error must be in (0, 1e-2]".into(),
            ));
        }
        Ok(())
    }
}

/// A probability with its Monte Carlo uncertainty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbabilityEstimate {
    pub value: f64,
    /// Standard error across randomisations (0 for exact evaluations).
    pub std_error: f64,
    /// Conservative error estimate, 3.5 standard errors.
    pub error_bound: f64,
    /// Lattice points per randomisation actually used.
    pub points: usize,
}

impl ProbabilityEstimate {
    fn exact(value: f64) -> Self {
        Self {
            value,
            std_error: 0.0,
            error_bound: 0.0,
            points: 0,
        }
    }
}

const MAX_POINT_DOUBLINGS: u32 = 10;

const PRIMES: [u32; 50] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97,
    101, 103, 107, 109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191, 193,
    197, 199, 211, 223, 227, 229,
];

fn check_correlation(upper: &[f64], corr: &DMatrix<f64>) -> Result<()> {
    let m = upper.len();
    if m == 0 {
        return Err(Error::Domain("empty limit vector".into()));
    }
    if m > PRIMES.len() {
        return Err(Error::Unsupported(format!(
            "dimension {m} exceeds {}",
            PRIMES.len()
        )));
    }
    if corr.nrows() != m || corr.ncols() != m {
        return Err(Error::Domain(format!(
            "correlation is {}x{}, limits have length {m}",
            corr.nrows(),
            corr.ncols()
        )));
    }
    for i in 0..m {
        if upper[i].is_nan() {
            return Err(Error::Domain("NaN integration limit".into()));
        }
        if (corr[(i, i)] - 1.0).abs() > 1e-12 {
            return Err(Error::Domain("correlation diagonal must be 1".into()));
        }
        for j in 0..i {
            let (a, b) = (corr[(i, j)], corr[(j, i)]);
            if !a.is_finite() || (a - b).abs() > 1e-12 || a.abs() > 1.0 + 1e-12 {
                return Err(Error::Domain(
                    "correlation must be symmetric with entries in [-1,1]".into(),
                ));
            }
        }
    }
    Ok(())
}

/// Lower Cholesky factor tolerating exact singularity.
fn psd_cholesky(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = a.nrows();
    let mut l = DMatrix::<f64>::zeros(m, m);
    for j in 0..m {
        let s = a[(j, j)] - (0..j).map(|k| l[(j, k)] * l[(j, k)]).sum::<f64>();
        if s < -1e-10 {
            return Err(Error::NotPositiveSemiDefinite);
        }
        if s <= 1e-12 {
            for i in (j + 1)..m {
                let r = a[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>();
                if r.abs() > 1e-8 {
                    return Err(Error::NotPositiveSemiDefinite);
                }
            }
            continue;
        }
        let d = s.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..m {
            let r = a[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>();
            l[(i, j)] = r / d;
        }
    }
    Ok(l)
}

struct SovIntegrand {
    limits: Vec<f64>,
    chol: DMatrix<f64>,
    nu: Option<f64>,
}

impl SovIntegrand {
    fn new(upper: &[f64], corr: &DMatrix<f64>, nu: Option<f64>) -> Result<Self> {
        let m = upper.len();
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| upper[a].total_cmp(&upper[b]));
        let permuted = DMatrix::from_fn(m, m, |i, j| corr[(order[i], order[j])]);
        let chol = psd_cholesky(&permuted)?;
        Ok(Self {
            limits: order.iter().map(|&i| upper[i]).collect(),
            chol,
            nu,
        })
    }

    fn dim(&self) -> usize {
        self.limits.len() - 1 + usize::from(self.nu.is_some())
    }

    fn eval(&self, w: &[f64], y: &mut [f64]) -> f64 {
        let (scale, w) = match self.nu {
            Some(nu) => ((chi2_quantile(w[0], nu) / nu).sqrt(), &w[1..]),
            None => (1.0, w),
        };
        let m = self.limits.len();
        let mut f = 1.0;
        for i in 0..m {
            let mu: f64 = (0..i).map(|j| self.chol[(i, j)] * y[j]).sum();
            let b = if self.limits[i].is_infinite() {
                self.limits[i]
            } else {
                self.limits[i] * scale
            };
            let d = self.chol[(i, i)];
            if d == 0.0 {
                if mu > b {
                    return 0.0;
                }
                y[i] = 0.0;
                continue;
            }
            let e = std_normal_cdf((b - mu) / d);
            f *= e;
            if f == 0.0 {
                return 0.0;
            }
            if i + 1 < m {
                let u = (w[i] * e).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
                y[i] = ppnd16(u);
            }
        }
        f
    }
}

fn lattice_integrate(
    integrand: &SovIntegrand,
    settings: &IntegrationSettings,
) -> ProbabilityEstimate {
    let dim = integrand.dim();
    let m = integrand.limits.len();
    let gens: Vec<f64> = PRIMES[..dim.max(1)]
        .iter()
        .map(|&p| (p as f64).sqrt().fract())
        .collect();
    let mut n = settings.qmc_points;
    let mut w = vec![0.0; dim];
    let mut wa = vec![0.0; dim];
    let mut y = vec![0.0; m];
    let mut doublings = 0;
    loop {
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        let mut means = Vec::with_capacity(settings.randomisations);
        for _ in 0..settings.randomisations {
            let shift: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
            let mut acc = 0.0;
            for k in 0..n {
                for d in 0..dim {
                    let x = (k as f64 * gens[d] + shift[d]).fract();
                    let x = 1.0 - (2.0 * x - 1.0).abs();
                    w[d] = x;
                    wa[d] = 1.0 - x;
                }
                acc += 0.5 * (integrand.eval(&w, &mut y) + integrand.eval(&wa, &mut y));
            }
            means.push(acc / n as f64);
        }
        let r = means.len() as f64;
        let value = means.iter().sum::<f64>() / r;
        let var = means.iter().map(|v| (v - value).powi(2)).sum::<f64>() / (r - 1.0);
        let std_error = (var / r).sqrt();
        if std_error <= settings.target_abs_error || doublings >= MAX_POINT_DOUBLINGS || dim == 0 {
            return ProbabilityEstimate {
                value: value.clamp(0.0, 1.0),
                std_error,
                error_bound: 3.5 * std_error,
                points: n,
            };
        }
        n *= 2;
        doublings += 1;
    }
}

/// `P(X <= upper)` for `X ~ N(0, corr)` by randomized lattice rule.
pub fn mvn_cdf(
    upper: &[f64],
    corr: &DMatrix<f64>,
    settings: &IntegrationSettings,
) -> Result<ProbabilityEstimate> {
    settings.validate()?;
    check_correlation(upper, corr)?;
    if upper.len() == 1 {
        return Ok(ProbabilityEstimate::exact(std_normal_cdf(upper[0])));
    }
    let integrand = SovIntegrand::new(upper, corr, None)?;
    Ok(lattice_integrate(&integrand, settings))
}

/// `P(T <= upper)` for a central multivariate t with correlation `corr` and
/// `nu` degrees of freedom, by randomized lattice rule.
pub fn mvt_cdf(
    upper: &[f64],
    corr: &DMatrix<f64>,
    nu: f64,
    settings: &IntegrationSettings,
) -> Result<ProbabilityEstimate> {
    settings.validate()?;
    check_correlation(upper, corr)?;
    if !(nu >= 1.0) {
        return Err(Error::Domain(format!(
            "degrees of freedom {nu} must be >= 1"
        )));
    }
    if upper.len() == 1 {
        return Ok(ProbabilityEstimate::exact(t_cdf_unchecked(upper[0], nu)));
    }
    let integrand = SovIntegrand::new(upper, corr, Some(nu))?;
    Ok(lattice_integrate(&integrand, settings))
}

/// Loadings `l` with `corr[i][j] = l[i] * l[j]` for all `i != j` and `|l_i| < 1`,
/// if the correlation has that one-factor form (to within `1e-10`).
pub fn factor_loadings(corr: &DMatrix<f64>) -> Option<Vec<f64>> {
    let m = corr.nrows();
    const MAX_LOADING2: f64 = 0.999_999;
    match m {
        0 => None,
        1 => Some(vec![0.0]),
        2 => {
            let r = corr[(0, 1)];
            if r.abs() > MAX_LOADING2 {
                return None;
            }
            let l = r.abs().sqrt();
            Some(vec![l, l.copysign(r)])
        }
        _ => {
            let mut l2 = vec![0.0; m];
            for (i, slot) in l2.iter_mut().enumerate() {
                // pick the best-conditioned pair (j, k) not involving i
                let mut best: Option<(usize, usize)> = None;
                for j in 0..m {
                    for k in (j + 1)..m {
                        if j == i || k == i {
                            continue;
                        }
                        if best.is_none_or(|(bj, bk)| corr[(j, k)].abs() > corr[(bj, bk)].abs()) {
                            best = Some((j, k));
                        }
                    }
                }
                let (j, k) = best?;
                *slot = if corr[(j, k)].abs() < 1e-14 {
                    // other pairs uncorrelated: i's loading comes from any nonzero link
                    let link = (0..m)
                        .filter(|&o| o != i)
                        .map(|o| corr[(i, o)].abs())
                        .fold(0.0, f64::max);
                    if link > 1e-14 {
                        return None;
                    }
                    0.0
                } else {
                    corr[(i, j)] * corr[(i, k)] / corr[(j, k)]
                };
                if *slot < -1e-12 || *slot > MAX_LOADING2 {
                    return None;
                }
            }
            let anchor = (0..m).max_by(|&a, &b| l2[a].total_cmp(&l2[b]))?;
            let loadings: Vec<f64> = (0..m)
                .map(|i| {
                    let l = l2[i].max(0.0).sqrt();
                    if i == anchor || corr[(i, anchor)] >= 0.0 {
                        l
                    } else {
                        -l
                    }
                })
                .collect();
            for i in 0..m {
                for j in 0..i {
                    if (loadings[i] * loadings[j] - corr[(i, j)]).abs() > 1e-10 {
                        return None;
                    }
                }
            }
            Some(loadings)
        }
    }
}

const FACTOR_RANGE: f64 = 8.6;
const SCALE_TAIL: f64 = 32.0;

fn inner_nodes(loadings: &[f64]) -> Vec<(f64, f64)> {
    let max2 = loadings.iter().map(|l| l * l).fold(0.0, f64::max);
    let panels = ((6.0 / (1.0 - max2).sqrt()).ceil() as usize).clamp(8, 400);
    composite_nodes(-FACTOR_RANGE, FACTOR_RANGE, panels)
        .into_iter()
        .map(|(x, w)| (x, w * std_normal_pdf(x)))
        .collect()
}

fn factor_probability(limits: &[f64], loadings: &[f64], nodes: &[(f64, f64)]) -> f64 {
    let sd: Vec<f64> = loadings.iter().map(|l| (1.0 - l * l).sqrt()).collect();
    nodes
        .iter()
        .map(|&(x, w)| {
            let mut prod = w;
            for ((&b, &l), &s) in limits.iter().zip(loadings).zip(&sd) {
                prod *= std_normal_cdf((b - l * x) / s);
                if prod == 0.0 {
                    break;
                }
            }
            prod
        })
        .sum()
}

/// Nodes and weights (density included) over `ln S`, `S = sqrt(chi^2_nu / nu)`.
fn scale_nodes(nu: f64) -> Vec<(f64, f64)> {
    let h = |t: f64| nu * t - 0.5 * nu * ((2.0 * t).exp() - 1.0) + SCALE_TAIL;
    let find = |mut inside: f64, mut outside: f64| {
        for _ in 0..200 {
            let mid = 0.5 * (inside + outside);
            if h(mid) > 0.0 {
                inside = mid;
            } else {
                outside = mid;
            }
        }
        inside
    };
    let mut left = -1.0;
    while h(left) > 0.0 {
        left *= 2.0;
    }
    let mut right = 1.0;
    while h(right) > 0.0 {
        right *= 2.0;
    }
    let (lo, hi) = (find(0.0, left), find(0.0, right));
    let sd = (2.0 * nu).sqrt().recip();
    let panels = (((hi - lo) / (1.5 * sd)).ceil() as usize).clamp(6, 2000);
    composite_nodes(lo, hi, panels)
        .into_iter()
        .map(|(t, w)| (t, w * ln_chi_scale_log_density(t, nu).exp()))
        .collect()
}

/// `P(X <= upper)` for `X ~ N(0, R)`, `R_ij = l_i l_j`, by quadrature.
pub fn mvn_cdf_factor(upper: &[f64], loadings: &[f64]) -> f64 {
    let nodes = inner_nodes(loadings);
    factor_probability(upper, loadings, &nodes).clamp(0.0, 1.0)
}

/// Multivariate t analogue of [`mvn_cdf_factor`].
pub fn mvt_cdf_factor(upper: &[f64], loadings: &[f64], nu: f64) -> f64 {
    let inner = inner_nodes(loadings);
    let outer = scale_nodes(nu);
    let mut scaled = vec![0.0; upper.len()];
    let total: f64 = outer
        .iter()
        .map(|&(t, w)| {
            let s = t.exp();
            for (dst, &u) in scaled.iter_mut().zip(upper) {
                *dst = if u.is_infinite() { u } else { u * s };
            }
            w * factor_probability(&scaled, loadings, &inner)
        })
        .sum();
    total.clamp(0.0, 1.0)
}

/// `P(X <= upper)` for `X ~ N(0, corr)`, using the exact bivariate routine or
/// the one-factor quadrature where the correlation allows, else the lattice rule.
pub fn mvn_probability(
    upper: &[f64],
    corr: &DMatrix<f64>,
    settings: &IntegrationSettings,
) -> Result<f64> {
    check_correlation(upper, corr)?;
    match upper.len() {
        1 => Ok(std_normal_cdf(upper[0])),
        2 => Ok(bvn_cdf(upper[0], upper[1], corr[(0, 1)])),
        _ => match factor_loadings(corr) {
            Some(l) => Ok(mvn_cdf_factor(upper, &l)),
            None => mvn_cdf(upper, corr, settings).map(|p| p.value),
        },
    }
}

enum Route {
    Univariate,
    Bivariate(f64),
    Factor {
        loadings: Vec<f64>,
        inner: Vec<(f64, f64)>,
    },
    Lattice {
        corr: DMatrix<f64>,
        settings: IntegrationSettings,
    },
}

/// `P(X_1 <= e, ..., X_M <= e)` as a deterministic function of `e`.
struct Equicoordinate {
    m: usize,
    nu: Option<f64>,
    route: Route,
    outer: Vec<(f64, f64)>,
}

impl Equicoordinate {
    fn new(corr: &DMatrix<f64>, nu: Option<f64>, settings: &IntegrationSettings) -> Result<Self> {
        let m = corr.nrows();
        let route = if m == 1 {
            Route::Univariate
        } else if m == 2 {
            Route::Bivariate(corr[(0, 1)])
        } else if let Some(loadings) = factor_loadings(corr) {
            let inner = inner_nodes(&loadings);
            Route::Factor { loadings, inner }
        } else {
            settings.validate()?;
            psd_cholesky(corr)?;
            Route::Lattice {
                corr: corr.clone(),
                settings: *settings,
            }
        };
        let outer = match (&route, nu) {
            (Route::Bivariate(_) | Route::Factor { .. }, Some(nu)) => scale_nodes(nu),
            _ => Vec::new(),
        };
        Ok(Self {
            m,
            nu,
            route,
            outer,
        })
    }

    fn normal(&self, e: f64) -> f64 {
        match &self.route {
            Route::Bivariate(r) => bvn_cdf(e, e, *r),
            Route::Factor { loadings, inner } => {
                factor_probability(&vec![e; self.m], loadings, inner)
            }
            _ => unreachable!("only quadrature routes mix over the scale"),
        }
    }

    fn probability(&self, e: f64) -> f64 {
        match (&self.route, self.nu) {
            (Route::Univariate, None) => std_normal_cdf(e),
            (Route::Univariate, Some(nu)) => t_cdf_unchecked(e, nu),
            (Route::Lattice { corr, settings }, nu) => {
                let integrand =
                    SovIntegrand::new(&vec![e; self.m], corr, nu).expect("factorised above");
                lattice_integrate(&integrand, settings).value
            }
            (_, None) => self.normal(e),
            (_, Some(_)) => self
                .outer
                .iter()
                .map(|&(t, w)| w * self.normal(e * t.exp()))
                .sum(),
        }
    }
}

/// Solve `P(X_1 <= e, ..., X_M <= e) = prob` for the equicoordinate point `e`,
/// where `X` is multivariate normal (`nu = None`) or multivariate t.
///
/// Bivariate and one-factor correlations are handled by quadrature; anything
/// else uses the lattice rule with a fixed seed so the objective is deterministic.
pub fn equicoordinate_quantile(
    prob: f64,
    corr: &DMatrix<f64>,
    nu: Option<f64>,
    settings: &IntegrationSettings,
) -> Result<f64> {
    if !(prob > 0.0 && prob < 1.0) {
        return Err(Error::Domain(format!("probability {prob} not in (0,1)")));
    }
    let m = corr.nrows();
    check_correlation(&vec![0.0; m], corr)?;
    if let Some(nu) = nu {
        if !(nu >= 1.0) {
            return Err(Error::Domain(format!(
                "degrees of freedom {nu} must be >= 1"
            )));
        }
    }
    let marginal_q = |p: f64| -> Result<f64> {
        match nu {
            None => Ok(ppnd16(p)),
            Some(nu) => super::univariate::student_t_quantile(p, nu),
        }
    };
    if m == 1 {
        return marginal_q(prob);
    }
    // e lies between the marginal quantile and the Bonferroni point
    let lo0 = marginal_q(prob)?;
    let hi0 = marginal_q(1.0 - (1.0 - prob) / m as f64)?;
    let eval = Equicoordinate::new(corr, nu, settings)?;
    let objective = |e: f64| eval.probability(e) - prob;
    let pad = 1e-6 * (1.0 + hi0.abs());
    let (mut lo, mut hi) = (lo0 - pad, hi0 + pad);
    while objective(lo) > 0.0 {
        lo -= 1.0;
        if lo < -15.0 {
            return Err(Error::NoSignChange { lo, hi });
        }
    }
    while objective(hi) < 0.0 {
        hi += 1.0;
        if hi > 15.0 {
            return Err(Error::NoSignChange { lo, hi });
        }
    }
    solve_root(objective, lo, hi, 1e-10)
}
