use std::fmt::Write as _;

use serde::Serialize;
use xover_core::config::{ResolvedScenario, RunManifest};
use xover_core::simulator::{ScenarioConfig, SummaryStats, TrialResult};

/// One line of `summary.csv`. Field order is the column order.
#[derive(Debug, Serialize)]
pub struct SummaryRow<'a> {
    pub scenario_id: &'a str,
    pub method: &'static str,
    pub n_int: usize,
    #[serde(rename = "n_B")]
    pub n_b: Option<usize>,
    pub tau_scenario: &'static str,
    pub sigma_e2: f64,
    pub sigma_b2: f64,
    pub delta: f64,
    pub reps: usize,
    pub fwer: Option<f64>,
    pub fwer_se: Option<f64>,
    pub power_pairwise: f64,
    pub power_familywise: f64,
    pub sigma_e2_hat_q25: f64,
    pub sigma_e2_hat_q50: f64,
    pub sigma_e2_hat_q75: f64,
    pub sigma_b2_hat_q25: f64,
    pub sigma_b2_hat_q50: f64,
    pub sigma_b2_hat_q75: f64,
    #[serde(rename = "N_hat_q25")]
    pub n_hat_q25: f64,
    #[serde(rename = "N_hat_q50")]
    pub n_hat_q50: f64,
    #[serde(rename = "N_hat_q75")]
    pub n_hat_q75: f64,
    #[serde(rename = "mean_realised_N")]
    pub mean_realised_n: f64,
    pub nonconverged_count: usize,
    pub power_pairwise_se: f64,
    pub power_familywise_se: f64,
    pub mean_sigma_e2_hat: f64,
    pub failed_count: usize,
    pub uneven_count: usize,
    /// `global_null`, or `true_nulls` when only some hypotheses are null.
    pub fwer_scope: &'static str,
    pub inflation: bool,
    pub random_period_sd: f64,
    pub master_seed: u64,
    pub tool_version: &'a str,
    pub config_hash: &'a str,
}

impl<'a> SummaryRow<'a> {
    pub fn new(manifest: &'a RunManifest, sc: &'a ResolvedScenario, s: &SummaryStats) -> Self {
        let c = &sc.config;
        Self {
            scenario_id: &sc.id,
            method: c.method.as_str(),
            n_int: c.policy.n_int,
            n_b: sc.n_b(),
            tau_scenario: c.tau_scenario.label(),
            sigma_e2: c.true_params.sigma_e2,
            sigma_b2: c.true_params.sigma_b2,
            delta: c.hypothesis.delta,
            reps: s.reps,
            fwer: s.fwer,
            fwer_se: s.fwer_se,
            power_pairwise: s.power_pairwise,
            power_familywise: s.power_familywise,
            sigma_e2_hat_q25: s.sigma_e2_hat.q25,
            sigma_e2_hat_q50: s.sigma_e2_hat.q50,
            sigma_e2_hat_q75: s.sigma_e2_hat.q75,
            sigma_b2_hat_q25: s.sigma_b2_hat.q25,
            sigma_b2_hat_q50: s.sigma_b2_hat.q50,
            sigma_b2_hat_q75: s.sigma_b2_hat.q75,
            n_hat_q25: s.n_hat.q25,
            n_hat_q50: s.n_hat.q50,
            n_hat_q75: s.n_hat.q75,
            mean_realised_n: s.mean_realised_n,
            nonconverged_count: s.nonconverged_count,
            power_pairwise_se: s.power_pairwise_se,
            power_familywise_se: s.power_familywise_se,
            mean_sigma_e2_hat: s.mean_sigma_e2_hat,
            failed_count: s.failed_count,
            uneven_count: s.uneven_count,
            fwer_scope: fwer_scope(c),
            inflation: c.policy.use_inflation_factor,
            random_period_sd: c.random_period_sd,
            master_seed: c.master_seed,
            tool_version: &manifest.tool_version,
            config_hash: &manifest.config_hash,
        }
    }
}

/// What the FWER column counts. Empty when no hypothesis is null.
fn fwer_scope(c: &ScenarioConfig) -> &'static str {
    let tau = &c.true_params.tau[1..];
    let nulls = tau
        .iter()
        .filter(|&&t| c.hypothesis.direction.null_is_true(t))
        .count();
    match nulls {
        0 => "",
        n if n == tau.len() => "global_null",
        _ => "true_nulls",
    }
}

/// One line of `raw.csv`.
#[derive(Debug, Serialize)]
pub struct RawRow<'a> {
    pub scenario_id: &'a str,
    pub replicate: usize,
    pub n_hat: usize,
    pub n_final: usize,
    pub sigma_e2_hat: f64,
    pub sigma_b2_raw: f64,
    pub sigma_b2_trunc: f64,
    pub n_formula: f64,
    pub critical_value: f64,
    /// Final statistics separated by `;`.
    pub statistics: String,
    /// One `0`/`1` per comparison.
    pub rejections: String,
    pub interim_converged: bool,
    pub final_converged: bool,
    pub uneven_allocation: bool,
    pub failure: &'a str,
}

impl<'a> RawRow<'a> {
    pub fn new(id: &'a str, r: &'a TrialResult) -> Self {
        Self {
            scenario_id: id,
            replicate: r.replicate,
            n_hat: r.n_hat,
            n_final: r.n_final,
            sigma_e2_hat: r.sigma_e2_hat,
            sigma_b2_raw: r.sigma_b2_raw,
            sigma_b2_trunc: r.sigma_b2_trunc,
            n_formula: r.n_formula,
            critical_value: r.critical_value,
            statistics: r
                .statistics
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(";"),
            rejections: r
                .rejections
                .iter()
                .map(|&b| if b { '1' } else { '0' })
                .collect(),
            interim_converged: r.interim_converged,
            final_converged: r.final_converged,
            uneven_allocation: r.uneven_allocation,
            failure: r.failure.as_deref().unwrap_or(""),
        }
    }
}

fn opt4(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

pub fn console_header() -> String {
    format!(
        "{:<22} {:<22} {:>5} {:>4} {:<12} {:>7} {:>7} {:>7} {:>7} {:>7}",
        "scenario", "method", "n_int", "n_B", "tau", "FWER", "pow_pw", "pow_fw", "med_N", "mean_N"
    )
}

/// Console line with four-decimal rates.
pub fn console_row(sc: &ResolvedScenario, s: &SummaryStats) -> String {
    let c = &sc.config;
    let method = if c.policy.use_inflation_factor {
        format!("{}+inf", c.method)
    } else {
        c.method.to_string()
    };
    format!(
        "{:<22} {:<22} {:>5} {:>4} {:<12} {:>7} {:>7.4} {:>7.4} {:>7.1} {:>7.2}",
        sc.id,
        method,
        c.policy.n_int,
        sc.n_b().map_or_else(|| "-".into(), |n| n.to_string()),
        c.tau_scenario.label(),
        opt4(s.fwer),
        s.power_pairwise,
        s.power_familywise,
        s.n_hat.q50,
        s.mean_realised_n
    )
}

/// Design-stage quantities for one variance/effect combination.
#[derive(Debug, Serialize)]
pub struct DesignRow {
    pub sigma_e2: f64,
    pub sigma_b2: f64,
    pub delta: f64,
    pub e: f64,
    pub alpha_star: f64,
    pub unit_information: Vec<f64>,
    pub n_pairwise: f64,
    pub n_ceil: usize,
    pub n_round_up: usize,
    pub n_round_nearest: usize,
    pub n_familywise: u64,
    /// Analysis degrees of freedom at `n_round_up`.
    pub nu: i64,
    /// `(n_int, factor)` for each interim size of the configuration.
    pub inflation_factor: Vec<(usize, f64)>,
}

pub fn design_table(name: &str, k: usize, rows: &[DesignRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{name}: sample sizes rounded to multiples of K = {k}");
    let _ = writeln!(
        out,
        "{:>9} {:>9} {:>8} {:>7} {:>7} {:>9} {:>9} {:>5} {:>5} {:>5} {:>5} {:>5}",
        "sigma_e2",
        "sigma_b2",
        "delta",
        "e",
        "alpha*",
        "i_1",
        "N",
        "ceil",
        "up",
        "near",
        "fw",
        "nu"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:>9.4} {:>9.4} {:>8.4} {:>7.4} {:>7.4} {:>9.4} {:>9.4} {:>5} {:>5} {:>5} {:>5} {:>5}",
            r.sigma_e2,
            r.sigma_b2,
            r.delta,
            r.e,
            r.alpha_star,
            r.unit_information[0],
            r.n_pairwise,
            r.n_ceil,
            r.n_round_up,
            r.n_round_nearest,
            r.n_familywise,
            r.nu
        );
        let inf: Vec<String> = r
            .inflation_factor
            .iter()
            .map(|(n, f)| format!("n_int={n}: {f:.4}"))
            .collect();
        let _ = writeln!(out, "    inflation factor  {}", inf.join("  "));
    }
    out
}
