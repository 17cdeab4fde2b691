use serde::{Deserialize, Serialize};

use super::{ScenarioConfig, TrialResult};
use crate::error::{Error, Result};

/// Sample quantile with linear interpolation between order statistics (type 7).
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
}

impl Quartiles {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        let mut v: Vec<f64> = values.filter(|x| x.is_finite()).collect();
        v.sort_by(f64::total_cmp);
        Self {
            q25: quantile_type7(&v, 0.25),
            q50: quantile_type7(&v, 0.5),
            q75: quantile_type7(&v, 0.75),
        }
    }
}

/// Operating characteristics of one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub reps: usize,
    /// Proportion rejecting at least one true null; absent without true nulls.
    pub fwer: Option<f64>,
    pub fwer_se: Option<f64>,
    /// Proportion rejecting `H01`.
    pub power_pairwise: f64,
    pub power_pairwise_se: f64,
    /// Proportion rejecting any hypothesis.
    pub power_familywise: f64,
    pub power_familywise_se: f64,
    pub sigma_e2_hat: Quartiles,
    pub sigma_b2_hat: Quartiles,
    pub n_hat: Quartiles,
    pub mean_sigma_e2_hat: f64,
    pub mean_realised_n: f64,
    /// Replicates whose interim or final REML fit did not converge, or that failed.
    pub nonconverged_count: usize,
    pub failed_count: usize,
    pub uneven_count: usize,
}

fn proportion(hits: usize, n: usize) -> (f64, f64) {
    let p = hits as f64 / n as f64;
    (p, (p * (1.0 - p) / n as f64).sqrt())
}

/// Aggregate replicate results in replicate order.
pub fn summarize(results: &[TrialResult], config: &ScenarioConfig) -> Result<SummaryStats> {
    if results.is_empty() {
        return Err(Error::Config("no replicates to summarise".into()));
    }
    let n = results.len();
    let direction = config.hypothesis.direction;
    let true_nulls: Vec<usize> = (1..config.true_params.tau.len())
        .filter(|&d| direction.null_is_true(config.true_params.tau[d]))
        .map(|d| d - 1)
        .collect();
    let (fwer, fwer_se) = if true_nulls.is_empty() {
        (None, None)
    } else {
        let hits = results
            .iter()
            .filter(|r| true_nulls.iter().any(|&d| r.rejections[d]))
            .count();
        let (p, se) = proportion(hits, n);
        (Some(p), Some(se))
    };
    let (power_pairwise, power_pairwise_se) =
        proportion(results.iter().filter(|r| r.rejections[0]).count(), n);
    let (power_familywise, power_familywise_se) =
        proportion(results.iter().filter(|r| r.any_rejection).count(), n);
    let finite_e2: Vec<f64> = results
        .iter()
        .map(|r| r.sigma_e2_hat)
        .filter(|v| v.is_finite())
        .collect();
    Ok(SummaryStats {
        reps: n,
        fwer,
        fwer_se,
        power_pairwise,
        power_pairwise_se,
        power_familywise,
        power_familywise_se,
        sigma_e2_hat: Quartiles::of(results.iter().map(|r| r.sigma_e2_hat)),
        sigma_b2_hat: Quartiles::of(results.iter().map(|r| r.sigma_b2_raw)),
        n_hat: Quartiles::of(results.iter().map(|r| r.n_hat as f64)),
        mean_sigma_e2_hat: finite_e2.iter().sum::<f64>() / finite_e2.len().max(1) as f64,
        mean_realised_n: results.iter().map(|r| r.n_final as f64).sum::<f64>() / n as f64,
        nonconverged_count: results
            .iter()
            .filter(|r| r.failure.is_some() || !r.interim_converged || !r.final_converged)
            .count(),
        failed_count: results.iter().filter(|r| r.failure.is_some()).count(),
        uneven_count: results.iter().filter(|r| r.uneven_allocation).count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn type7_quartiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_type7(&v, 0.25), 1.75);
        assert_eq!(quantile_type7(&v, 0.5), 2.5);
        assert_eq!(quantile_type7(&v, 0.75), 3.25);
        assert_eq!(quantile_type7(&[5.0], 0.3), 5.0);
    }
}
