//! Two-stage trial simulation and reproducible Monte Carlo studies.

mod allocation;
mod calibrate;
mod summary;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use allocation::{allocate_block, allocate_simple, is_even, BlockScheduler};
pub use calibrate::{calibrate_alpha, Calibration, CalibrationStep};
pub use summary::{quantile_type7, summarize, Quartiles, SummaryStats};

use crate::design::{Direction, HypothesisSpec, ModelParams, TrialDesign};
use crate::error::{Error, Result};
use crate::estimators::{estimate_variance, InterimData, Method, VarianceEstimate};
use crate::mixed_model::{build_design_matrix, reml_fit, PatientAllocation};
use crate::sample_size::{analysis_critical_value, reestimate, ReestimationPolicy};

/// True treatment effects under which a scenario is simulated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauScenario {
    /// All `tau_d = 0`.
    GlobalNull,
    /// `tau_1 = delta`, the rest 0.
    Tau1Only,
    /// `tau_1 = tau_2 = delta`, the rest 0.
    Tau12,
    /// All `tau_d = delta`.
    GlobalAlt,
    /// The example's fitted effects.
    Observed,
    Custom(Vec<f64>),
}

impl TauScenario {
    pub fn label(&self) -> &'static str {
        match self {
            TauScenario::GlobalNull => "global_null",
            TauScenario::Tau1Only => "tau1_only",
            TauScenario::Tau12 => "tau12",
            TauScenario::GlobalAlt => "global_alt",
            TauScenario::Observed => "observed",
            TauScenario::Custom(_) => "custom",
        }
    }

    /// Effects `(0, tau_1, ..., tau_{D-1})` for `treatments` arms.
    pub fn resolve(&self, treatments: usize, delta: f64, observed: &[f64]) -> Result<Vec<f64>> {
        let mut tau = vec![0.0; treatments];
        match self {
            TauScenario::GlobalNull => {}
            TauScenario::Tau1Only => tau[1] = delta,
            TauScenario::Tau12 => {
                if treatments < 3 {
                    return Err(Error::Config(
                        "tau12 needs at least two experimental treatments".into(),
                    ));
                }
                tau[1] = delta;
                tau[2] = delta;
            }
            TauScenario::GlobalAlt => tau[1..].fill(delta),
            TauScenario::Observed | TauScenario::Custom(_) => {
                let src = match self {
                    TauScenario::Custom(v) => v.as_slice(),
                    _ => observed,
                };
                if src.len() != treatments || src[0] != 0.0 {
                    return Err(Error::Config(format!(
                        "treatment effects need {treatments} entries starting with 0"
                    )));
                }
                tau.copy_from_slice(src);
            }
        }
        Ok(tau)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Randomisation {
    /// Equal numbers per sequence in random order.
    Simple,
    /// Sequence-homogeneous blocks of `n_b` patients.
    Block { n_b: usize },
}

/// Everything needed to simulate one operating-characteristic scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub design: TrialDesign,
    /// Data-generating parameters; `tau` already reflects `tau_scenario`.
    pub true_params: ModelParams,
    pub tau_scenario: TauScenario,
    pub hypothesis: HypothesisSpec,
    pub method: Method,
    #[serde(default)]
    pub custom_tau_star: Option<Vec<f64>>,
    pub policy: ReestimationPolicy,
    pub randomisation: Randomisation,
    pub replications: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub random_period_sd: f64,
    /// Significance level of the final analysis when it differs from the design level.
    #[serde(default)]
    pub analysis_alpha: Option<f64>,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.true_params.validate(&self.design)?;
        self.hypothesis.validate()?;
        self.policy.validate()?;
        if self.replications == 0 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if !(self.random_period_sd >= 0.0 && self.random_period_sd.is_finite()) {
            return Err(Error::Config(
                "random_period_sd must be finite and >= 0".into(),
            ));
        }
        if let Some(a) = self.analysis_alpha {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::Config(format!("analysis_alpha {a} not in (0,1)")));
            }
        }
        let k = self.design.n_sequences();
        match self.randomisation {
            Randomisation::Simple => {
                if self.policy.multiple != k {
                    return Err(Error::Config(format!(
                        "simple randomisation rounds to multiples of K = {k}, policy uses {}",
                        self.policy.multiple
                    )));
                }
                if self.method == Method::Block {
                    return Err(Error::Config(
                        "the block estimator needs block randomisation".into(),
                    ));
                }
            }
            Randomisation::Block { n_b } => {
                if n_b < 2 || self.policy.multiple != n_b {
                    return Err(Error::Config(format!(
                        "block randomisation needs n_B >= 2 matching the rounding multiple (n_B = {n_b}, multiple = {})",
                        self.policy.multiple
                    )));
                }
                if self.method.is_adjusted() {
                    return Err(Error::Config(
                        "adjusted estimators assume simple randomisation".into(),
                    ));
                }
            }
        }
        if self.method.is_adjusted() && !self.design.is_period_balanced() {
            return Err(Error::Config(
                "adjusted estimators need a period-balanced design".into(),
            ));
        }
        if self.method == crate::estimators::Method::AdjustedCustom {
            match &self.custom_tau_star {
                Some(t) if t.len() == self.design.treatments() && t[0] == 0.0 => {}
                _ => {
                    return Err(Error::Config(
                        "adjusted_custom needs tau_star with a leading 0".into(),
                    ))
                }
            }
        }
        Ok(())
    }

    /// Whether the interim allocation is necessarily unequal across sequences.
    pub fn uneven_interim(&self) -> bool {
        match self.randomisation {
            Randomisation::Simple => false,
            Randomisation::Block { n_b } => {
                !(self.policy.n_int / n_b).is_multiple_of(self.design.n_sequences())
            }
        }
    }

    fn analysis_alpha(&self) -> f64 {
        self.analysis_alpha.unwrap_or(self.hypothesis.alpha)
    }
}

/// Outcome of one simulated trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub replicate: usize,
    /// Re-estimated sample size after clamping and rounding.
    pub n_hat: usize,
    pub n_final: usize,
    pub sigma_e2_hat: f64,
    pub sigma_b2_raw: f64,
    pub sigma_b2_trunc: f64,
    pub n_formula: f64,
    /// Final-analysis statistics `T_d`.
    pub statistics: Vec<f64>,
    pub critical_value: f64,
    pub rejections: Vec<bool>,
    pub any_rejection: bool,
    pub interim_converged: bool,
    pub final_converged: bool,
    pub uneven_allocation: bool,
    /// Set when the replicate could not be analysed; it then rejects nothing.
    pub failure: Option<String>,
}

/// Draw period effects for one replicate.
fn replicate_params<R: Rng + ?Sized>(params: &ModelParams, sd: f64, rng: &mut R) -> ModelParams {
    let mut p = params.clone();
    if sd > 0.0 {
        for j in 1..p.pi.len() {
            let z: f64 = rng.sample(StandardNormal);
            p.pi[j] = params.pi[j] + sd * z;
        }
    }
    p
}

/// Responses for `alloc.sequences[from..]`, appended patient by patient.
pub fn simulate_responses<R: Rng + ?Sized>(
    alloc: &PatientAllocation,
    from: usize,
    design: &TrialDesign,
    params: &ModelParams,
    rng: &mut R,
    out: &mut Vec<f64>,
) {
    let (se, sb) = (params.sigma_e2.sqrt(), params.sigma_b2.sqrt());
    for &k in &alloc.sequences[from..] {
        let s: f64 = rng.sample::<f64, _>(StandardNormal) * sb;
        for j in 0..design.periods() {
            let e: f64 = rng.sample::<f64, _>(StandardNormal) * se;
            out.push(params.cell_mean(design, k, j) + s + e);
        }
    }
}

fn reject(direction: Direction, stat: f64, e: f64) -> bool {
    direction.orient(stat) > e
}

/// Stage-one data for one replicate.
struct Interim {
    params: ModelParams,
    alloc: PatientAllocation,
    responses: Vec<f64>,
    scheduler: Option<BlockScheduler>,
}

fn simulate_interim<R: Rng + ?Sized>(config: &ScenarioConfig, rng: &mut R) -> Result<Interim> {
    let params = replicate_params(&config.true_params, config.random_period_sd, rng);
    let n_int = config.policy.n_int;
    let (alloc, scheduler) = match config.randomisation {
        Randomisation::Simple => (allocate_simple(&config.design, n_int, rng)?, None),
        Randomisation::Block { n_b } => {
            let mut sched = BlockScheduler::new(n_b)?;
            let mut alloc = PatientAllocation {
                sequences: Vec::with_capacity(n_int),
                blocks: Some(Vec::with_capacity(n_int)),
            };
            sched.extend(&config.design, n_int, &mut alloc, rng)?;
            (alloc, Some(sched))
        }
    };
    let mut responses = Vec::with_capacity(n_int * config.design.periods());
    simulate_responses(&alloc, 0, &config.design, &params, rng, &mut responses);
    Ok(Interim {
        params,
        alloc,
        responses,
        scheduler,
    })
}

fn interim_estimate(config: &ScenarioConfig, interim: &Interim) -> Result<VarianceEstimate> {
    let data = InterimData::new(&config.design, &interim.responses, &interim.alloc)?;
    estimate_variance(
        config.method,
        &data,
        config.hypothesis.delta,
        config.custom_tau_star.as_deref(),
    )
}

/// Random stream for replicate `index`: the master seed selects the key and
/// the replicate index the stream, so streams never overlap.
pub fn replicate_rng(master_seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index as u64);
    rng
}

/// Run the full two-stage pipeline once.
pub fn run_trial<R: Rng + ?Sized>(
    config: &ScenarioConfig,
    replicate: usize,
    rng: &mut R,
) -> Result<TrialResult> {
    let design = &config.design;
    let m = design.treatments() - 1;
    let mut interim = simulate_interim(config, rng)?;
    let uneven_allocation = !is_even(&interim.alloc, design.n_sequences());
    let mut result = TrialResult {
        replicate,
        n_hat: config.policy.n_int,
        n_final: config.policy.n_int,
        sigma_e2_hat: f64::NAN,
        sigma_b2_raw: f64::NAN,
        sigma_b2_trunc: f64::NAN,
        n_formula: f64::NAN,
        statistics: vec![f64::NAN; m],
        critical_value: f64::NAN,
        rejections: vec![false; m],
        any_rejection: false,
        interim_converged: false,
        final_converged: false,
        uneven_allocation,
        failure: None,
    };
    let est = match interim_estimate(config, &interim) {
        Ok(est) => est,
        Err(e) => {
            result.failure = Some(format!("interim: {e}"));
            return Ok(result);
        }
    };
    result.sigma_e2_hat = est.sigma_e2_hat;
    result.sigma_b2_raw = est.sigma_b2_raw;
    result.sigma_b2_trunc = est.sigma_b2_trunc;
    result.interim_converged = est.diagnostics.converged;

    let re = match reestimate(
        &config.policy,
        est.sigma_e2_hat,
        est.sigma_b2_trunc,
        design,
        &config.hypothesis,
    ) {
        Ok(re) => re,
        Err(e) => {
            result.failure = Some(format!("re-estimation: {e}"));
            return Ok(result);
        }
    };
    result.n_hat = re.n_hat;
    result.n_formula = re.n_formula;

    let n_int = config.policy.n_int;
    if re.n_hat > n_int {
        let extra = re.n_hat - n_int;
        match interim.scheduler.as_mut() {
            None => {
                let more = allocate_simple(design, extra, rng)?;
                interim.alloc.sequences.extend(more.sequences);
            }
            Some(sched) => sched.extend(design, extra, &mut interim.alloc, rng)?,
        }
        simulate_responses(
            &interim.alloc,
            n_int,
            design,
            &interim.params,
            rng,
            &mut interim.responses,
        );
    }
    let n_final = interim.alloc.n_patients();
    result.n_final = n_final;

    let analysed = build_design_matrix(design, &interim.alloc)
        .and_then(|x| reml_fit(&interim.responses, &x, design.periods()))
        .and_then(|fit| {
            let e = analysis_critical_value(
                &fit.var_beta,
                n_final,
                design.treatments(),
                design.periods(),
                config.analysis_alpha(),
                config.hypothesis.direction,
            )?;
            Ok((fit, e))
        });
    let (fit, e) = match analysed {
        Ok(v) => v,
        Err(err) => {
            result.failure = Some(format!("analysis: {err}"));
            return Ok(result);
        }
    };
    let off = fit.beta_hat.len() - m;
    for d in 0..m {
        let t = fit.beta_hat[off + d] / fit.var_beta[(off + d, off + d)].sqrt();
        result.statistics[d] = t;
        result.rejections[d] = reject(config.hypothesis.direction, t, e);
    }
    result.any_rejection = result.rejections.iter().any(|&r| r);
    result.critical_value = e;
    result.final_converged = fit.converged;
    Ok(result)
}

fn with_threads<T: Send>(threads: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(job()),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map(|pool| pool.install(job))
            .map_err(|e| Error::Config(format!("thread pool: {e}"))),
    }
}

/// Simulate every replicate of `config`; results are in replicate order and
/// independent of the number of worker threads.
pub fn run_replicates(config: &ScenarioConfig, threads: Option<usize>) -> Result<Vec<TrialResult>> {
    config.validate()?;
    let results: Vec<Result<TrialResult>> = with_threads(threads, || {
        (0..config.replications)
            .into_par_iter()
            .map(|r| run_trial(config, r, &mut replicate_rng(config.master_seed, r)))
            .collect()
    })?;
    results.into_iter().collect()
}

/// Simulate and summarise a scenario.
pub fn run_monte_carlo(
    config: &ScenarioConfig,
    threads: Option<usize>,
) -> Result<(SummaryStats, Vec<TrialResult>)> {
    let results = run_replicates(config, threads)?;
    let stats = summarize(&results, config)?;
    Ok((stats, results))
}

/// Mean and Monte Carlo standard error of the interim estimates alone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterimMoments {
    pub reps: usize,
    pub mean_sigma_e2: f64,
    pub se_sigma_e2: f64,
    pub mean_sigma_b2_raw: f64,
    pub se_sigma_b2_raw: f64,
}

/// Repeatedly simulate only the interim stage and apply the estimator.
pub fn run_interim_study(
    config: &ScenarioConfig,
    threads: Option<usize>,
) -> Result<InterimMoments> {
    config.validate()?;
    let estimates: Vec<Result<VarianceEstimate>> = with_threads(threads, || {
        (0..config.replications)
            .into_par_iter()
            .map(|r| {
                let mut rng = replicate_rng(config.master_seed, r);
                simulate_interim(config, &mut rng).and_then(|i| interim_estimate(config, &i))
            })
            .collect()
    })?;
    let estimates: Vec<VarianceEstimate> = estimates.into_iter().collect::<Result<_>>()?;
    let moments = |f: &dyn Fn(&VarianceEstimate) -> f64| {
        let n = estimates.len() as f64;
        let mean = estimates.iter().map(f).sum::<f64>() / n;
        let var = estimates.iter().map(|e| (f(e) - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        (mean, (var / n).sqrt())
    };
    let (mean_sigma_e2, se_sigma_e2) = moments(&|e| e.sigma_e2_hat);
    let (mean_sigma_b2_raw, se_sigma_b2_raw) = moments(&|e| e.sigma_b2_raw);
    Ok(InterimMoments {
        reps: estimates.len(),
        mean_sigma_e2,
        se_sigma_e2,
        mean_sigma_b2_raw,
        se_sigma_b2_raw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtin::builtin_design;
    use crate::sample_size::InflationLevel;

    fn scenario(method: Method, n_int: usize) -> ScenarioConfig {
        let t = builtin_design("example1").unwrap();
        ScenarioConfig {
            design: t.design,
            true_params: t.params,
            tau_scenario: TauScenario::Observed,
            hypothesis: t.hypothesis,
            method,
            custom_tau_star: None,
            policy: ReestimationPolicy {
                n_int,
                n_max: 1000,
                multiple: 4,
                use_inflation_factor: false,
                inflation_level: InflationLevel::Nominal,
            },
            randomisation: Randomisation::Simple,
            replications: 20,
            master_seed: 7,
            random_period_sd: 0.0,
            analysis_alpha: None,
        }
    }

    #[test]
    fn simple_allocation_counts() {
        let t = builtin_design("example1").unwrap();
        let mut rng = replicate_rng(1, 0);
        let a = allocate_simple(&t.design, 16, &mut rng).unwrap();
        assert_eq!(a.sequence_counts(4), vec![4; 4]);
        assert!(allocate_simple(&t.design, 18, &mut rng).is_err());
    }

    #[test]
    fn block_allocation_rounds() {
        let t = builtin_design("example3").unwrap();
        let mut rng = replicate_rng(1, 0);
        let a = allocate_block(&t.design, 48, 8, &mut rng).unwrap();
        let mut counts = a.sequence_counts(4);
        counts.sort();
        assert_eq!(counts, vec![8, 8, 16, 16]);
        assert!(!is_even(&a, 4));
        let b = allocate_block(&t.design, 8, 2, &mut rng).unwrap();
        assert_eq!(b.sequence_counts(4), vec![2; 4]);
    }

    #[test]
    fn single_stage_when_n_max_is_n_int() {
        let mut c = scenario(Method::Unblinded, 16);
        c.policy.n_max = 16;
        let (_, results) = run_monte_carlo(&c, Some(1)).unwrap();
        assert!(results.iter().all(|r| r.n_final == 16));
    }

    #[test]
    fn tau_scenarios() {
        let obs = [0.0, -1.51, -2.15, -2.37];
        assert_eq!(
            TauScenario::Tau12.resolve(4, -1.0, &obs).unwrap(),
            vec![0.0, -1.0, -1.0, 0.0]
        );
        assert_eq!(
            TauScenario::Observed.resolve(4, -1.0, &obs).unwrap(),
            obs.to_vec()
        );
        assert!(TauScenario::Tau12.resolve(2, -1.0, &[0.0, 1.0]).is_err());
    }
}
