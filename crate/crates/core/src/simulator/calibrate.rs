use serde::{Deserialize, Serialize};

use super::{run_monte_carlo, ScenarioConfig, TauScenario};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStep {
    pub alpha: f64,
    pub fwer: f64,
    pub fwer_se: f64,
}

/// Result of the two-stage significance-level calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Analysis level giving FWER `target_alpha` at the worst-case variances.
    pub alpha_adj: f64,
    pub sigma_e2_max: f64,
    pub sigma_b2_max: f64,
    /// `(sigma_e2, sigma_b2, FWER)` at the nominal level for every grid point.
    pub grid: Vec<(f64, f64, f64)>,
    pub steps: Vec<CalibrationStep>,
}

const MAX_BISECTIONS: usize = 30;

/// Find the variance pair maximising the global-null FWER, then bisect on the
/// analysis significance level until the simulated FWER there is within one
/// standard error of `target_alpha`.
///
/// The design-stage level stays at `target_alpha`; replicates share random
/// numbers across levels, so the simulated FWER is monotone in the level.
pub fn calibrate_alpha(
    base: &ScenarioConfig,
    sigma_grid: &[(f64, f64)],
    target_alpha: f64,
    reps: usize,
    threads: Option<usize>,
) -> Result<Calibration> {
    if sigma_grid.is_empty() {
        return Err(Error::Config("calibration grid is empty".into()));
    }
    if !(target_alpha > 0.0 && target_alpha < 1.0) {
        return Err(Error::Config(format!(
            "target alpha {target_alpha} not in (0,1)"
        )));
    }
    let mut null = base.clone();
    null.tau_scenario = TauScenario::GlobalNull;
    null.true_params.tau.iter_mut().for_each(|t| *t = 0.0);
    null.hypothesis.alpha = target_alpha;
    null.replications = reps;

    let fwer_at = |se2: f64, sb2: f64, alpha: f64| -> Result<(f64, f64)> {
        let mut c = null.clone();
        c.true_params.sigma_e2 = se2;
        c.true_params.sigma_b2 = sb2;
        c.analysis_alpha = Some(alpha);
        let (s, _) = run_monte_carlo(&c, threads)?;
        Ok((s.fwer.unwrap_or(0.0), s.fwer_se.unwrap_or(0.0)))
    };

    let mut grid = Vec::with_capacity(sigma_grid.len());
    for &(se2, sb2) in sigma_grid {
        grid.push((se2, sb2, fwer_at(se2, sb2, target_alpha)?.0));
    }
    let &(se2, sb2, _) = grid
        .iter()
        .fold(None::<&(f64, f64, f64)>, |best, g| match best {
            Some(b) if b.2 >= g.2 => Some(b),
            _ => Some(g),
        })
        .expect("grid is non-empty");

    let mut steps = Vec::new();
    let probe = |alpha: f64, steps: &mut Vec<CalibrationStep>| -> Result<(f64, f64)> {
        let (fwer, se) = fwer_at(se2, sb2, alpha)?;
        steps.push(CalibrationStep {
            alpha,
            fwer,
            fwer_se: se,
        });
        Ok((fwer, se))
    };
    let done = |fwer: f64, se: f64| (fwer - target_alpha).abs() <= se.max(f64::EPSILON);

    let (f_hi, se_hi) = probe(target_alpha, &mut steps)?;
    if f_hi <= target_alpha || done(f_hi, se_hi) {
        return Ok(Calibration {
            alpha_adj: target_alpha,
            sigma_e2_max: se2,
            sigma_b2_max: sb2,
            grid,
            steps,
        });
    }
    let mut hi = target_alpha;
    let mut lo = target_alpha / 2.0;
    loop {
        let (f, se) = probe(lo, &mut steps)?;
        if done(f, se) {
            return Ok(Calibration {
                alpha_adj: lo,
                sigma_e2_max: se2,
                sigma_b2_max: sb2,
                grid,
                steps,
            });
        }
        if f < target_alpha {
            break;
        }
        hi = lo;
        lo /= 2.0;
        if lo < 1e-6 {
            return Err(Error::Config(
                "calibration could not bracket the target level".into(),
            ));
        }
    }
    let mut alpha_adj = 0.5 * (lo + hi);
    for _ in 0..MAX_BISECTIONS {
        alpha_adj = 0.5 * (lo + hi);
        let (f, se) = probe(alpha_adj, &mut steps)?;
        if done(f, se) {
            break;
        }
        if f > target_alpha {
            hi = alpha_adj;
        } else {
            lo = alpha_adj;
        }
    }
    Ok(Calibration {
        alpha_adj,
        sigma_e2_max: se2,
        sigma_b2_max: sb2,
        grid,
        steps,
    })
}
