//! Interim estimators of the within- and between-patient variances.

use serde::{Deserialize, Serialize};

use crate::design::TrialDesign;
use crate::error::{Error, Result};
use crate::mixed_model::{build_design_matrix, reml_fit, PatientAllocation};

/// Complete-period responses of the interim patients.
#[derive(Debug, Clone, Copy)]
pub struct InterimData<'a> {
    pub design: &'a TrialDesign,
    /// Row-major `n_int x P`.
    pub responses: &'a [f64],
    pub allocation: &'a PatientAllocation,
}

impl<'a> InterimData<'a> {
    pub fn new(
        design: &'a TrialDesign,
        responses: &'a [f64],
        allocation: &'a PatientAllocation,
    ) -> Result<Self> {
        allocation.validate(design)?;
        if responses.len() != allocation.n_patients() * design.periods() {
            return Err(Error::Estimator(format!(
                "{} responses for {} patients over {} periods",
                responses.len(),
                allocation.n_patients(),
                design.periods()
            )));
        }
        Ok(Self {
            design,
            responses,
            allocation,
        })
    }

    pub fn n_patients(&self) -> usize {
        self.allocation.n_patients()
    }

    fn patient(&self, i: usize) -> &'a [f64] {
        let p = self.design.periods();
        &self.responses[i * p..(i + 1) * p]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjustmentKind {
    Null,
    Alternative,
    Custom,
}

/// Assumed treatment effects removed by the adjusted blinded estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustmentSpec {
    /// One entry per treatment; entry 0 is the control and must be 0.
    pub tau_star: Vec<f64>,
    pub kind: AdjustmentKind,
}

impl AdjustmentSpec {
    pub fn null(treatments: usize) -> Self {
        Self {
            tau_star: vec![0.0; treatments],
            kind: AdjustmentKind::Null,
        }
    }

    pub fn alternative(treatments: usize, delta: f64) -> Self {
        let mut tau_star = vec![delta; treatments];
        tau_star[0] = 0.0;
        Self {
            tau_star,
            kind: AdjustmentKind::Alternative,
        }
    }

    pub fn custom(tau_star: Vec<f64>) -> Result<Self> {
        let spec = Self {
            tau_star,
            kind: AdjustmentKind::Custom,
        };
        if spec.tau_star.first() != Some(&0.0) {
            return Err(Error::InvalidParameters(
                "tau_star must start with a 0 control entry".into(),
            ));
        }
        if spec.tau_star.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidParameters(
                "tau_star entries must be finite".into(),
            ));
        }
        Ok(spec)
    }

    fn validate(&self, design: &TrialDesign) -> Result<()> {
        if self.tau_star.len() != design.treatments() {
            return Err(Error::InvalidParameters(format!(
                "tau_star has {} entries, design has {} treatments",
                self.tau_star.len(),
                design.treatments()
            )));
        }
        if self.tau_star[0] != 0.0 {
            return Err(Error::InvalidParameters(
                "tau_star control entry must be 0".into(),
            ));
        }
        match self.kind {
            AdjustmentKind::Null if self.tau_star.iter().any(|&t| t != 0.0) => Err(
                Error::InvalidParameters("null adjustment requires tau_star = 0".into()),
            ),
            AdjustmentKind::Alternative if self.tau_star[1..].windows(2).any(|w| w[0] != w[1]) => {
                Err(Error::InvalidParameters(
                    "alternative adjustment requires a common tau_star".into(),
                ))
            }
            _ => Ok(()),
        }
    }
}

/// Interim estimation procedure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Unblinded,
    AdjustedNull,
    AdjustedAlternative,
    AdjustedCustom,
    Block,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Unblinded,
        Method::AdjustedNull,
        Method::AdjustedAlternative,
        Method::AdjustedCustom,
        Method::Block,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Unblinded => "unblinded",
            Method::AdjustedNull => "adjusted_null",
            Method::AdjustedAlternative => "adjusted_alternative",
            Method::AdjustedCustom => "adjusted_custom",
            Method::Block => "block",
        }
    }

    pub fn is_adjusted(self) -> bool {
        matches!(
            self,
            Method::AdjustedNull | Method::AdjustedAlternative | Method::AdjustedCustom
        )
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Diagnostics {
    pub converged: bool,
    pub iterations: usize,
    /// Number of randomisation blocks (block method only).
    pub blocks: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceEstimate {
    pub sigma_e2_hat: f64,
    /// May be negative for the blinded estimators.
    pub sigma_b2_raw: f64,
    pub sigma_b2_trunc: f64,
    pub method: Method,
    pub diagnostics: Diagnostics,
}

impl VarianceEstimate {
    fn new(
        method: Method,
        sigma_e2_hat: f64,
        sigma_b2_raw: f64,
        diagnostics: Diagnostics,
    ) -> Result<Self> {
        if !sigma_e2_hat.is_finite() || !sigma_b2_raw.is_finite() {
            return Err(Error::Estimator(format!(
                "{method} produced a non-finite estimate"
            )));
        }
        Ok(Self {
            sigma_e2_hat,
            sigma_b2_raw,
            sigma_b2_trunc: sigma_b2_raw.max(0.0),
            method,
            diagnostics,
        })
    }
}

/// Unblinded REML fit of the full model to the interim data.
///
/// Non-convergence is reported in the diagnostics, not as an error.
pub fn unblinded_estimate(data: &InterimData<'_>) -> Result<VarianceEstimate> {
    let x = build_design_matrix(data.design, data.allocation)?;
    let fit = reml_fit(data.responses, &x, data.design.periods())?;
    VarianceEstimate::new(
        Method::Unblinded,
        fit.sigma_e2_hat,
        fit.sigma_b2_hat,
        Diagnostics {
            converged: fit.converged,
            iterations: fit.iterations,
            blocks: None,
        },
    )
}

/// Sums over periods `j >= 2` of squared deviations of successive differences
/// and sums from their group means.
fn deviation_sums<'a, I>(data: &InterimData<'a>, groups: I) -> (f64, f64)
where
    I: IntoIterator<Item = Vec<usize>>,
{
    let p = data.design.periods();
    let (mut sp, mut sq) = (0.0, 0.0);
    for members in groups {
        let m = members.len() as f64;
        for j in 1..p {
            let (mut pbar, mut qbar) = (0.0, 0.0);
            for &i in &members {
                let y = data.patient(i);
                pbar += y[j] - y[j - 1];
                qbar += y[j] + y[j - 1];
            }
            pbar /= m;
            qbar /= m;
            for &i in &members {
                let y = data.patient(i);
                sp += (y[j] - y[j - 1] - pbar).powi(2);
                sq += (y[j] + y[j - 1] - qbar).powi(2);
            }
        }
    }
    (sp, sq)
}

/// Blinded estimator adjusted for assumed treatment effects `tau_star`,
/// for equal allocation to a period-balanced set of sequences.
///
/// Only the responses and the design's sequence set are read; the patients'
/// sequence labels are used solely to confirm equal allocation.
pub fn adjusted_blinded_estimate(
    data: &InterimData<'_>,
    spec: &AdjustmentSpec,
) -> Result<VarianceEstimate> {
    let design = data.design;
    spec.validate(design)?;
    if !design.is_period_balanced() {
        return Err(Error::Estimator(
            "adjusted estimator requires a period-balanced design".into(),
        ));
    }
    let n = data.n_patients();
    let k = design.n_sequences();
    let counts = data.allocation.sequence_counts(k);
    if n < 2 || !n.is_multiple_of(k) || counts.iter().any(|&c| c != n / k) {
        return Err(Error::Estimator(format!(
            "adjusted estimator requires equal allocation of {n} patients to {k} sequences"
        )));
    }
    let p = design.periods();
    let (sp, sq) = deviation_sums(data, std::iter::once((0..n).collect()));
    let (nf, kf, pf) = (n as f64, k as f64, p as f64);
    let denom = 2.0 * (pf - 1.0) * (nf - 1.0);
    let tau = |seq: usize, period: usize| spec.tau_star[design.treatment(seq, period)];
    let (mut diff2, mut sum2) = (0.0, 0.0);
    for j in 1..p {
        for s in 0..k {
            diff2 += (tau(s, j) - tau(s, j - 1)).powi(2);
            sum2 += (tau(s, j) + tau(s, j - 1)).powi(2);
        }
    }
    let first_total: f64 = (0..k).map(|s| tau(s, 0)).sum();
    let adj = nf / (2.0 * kf * (pf - 1.0) * (nf - 1.0));
    let sigma_e2 = sp / denom - adj * diff2;
    let sigma_b2 = 0.5
        * (sq / denom - sigma_e2 - adj * sum2
            + 2.0 * nf / (kf * kf * (nf - 1.0)) * first_total * first_total);
    let method = match spec.kind {
        AdjustmentKind::Null => Method::AdjustedNull,
        AdjustmentKind::Alternative => Method::AdjustedAlternative,
        AdjustmentKind::Custom => Method::AdjustedCustom,
    };
    VarianceEstimate::new(
        method,
        sigma_e2,
        sigma_b2,
        Diagnostics {
            converged: true,
            ..Default::default()
        },
    )
}

/// Blinded estimator after block randomisation, using deviations from block means.
pub fn block_blinded_estimate(data: &InterimData<'_>) -> Result<VarianceEstimate> {
    let labels = data
        .allocation
        .blocks
        .as_ref()
        .ok_or_else(|| Error::Estimator("block estimator requires block labels".into()))?;
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, &b) in labels.iter().enumerate() {
        match groups.iter_mut().find(|(label, _)| *label == b) {
            Some((_, members)) => members.push(i),
            None => groups.push((b, vec![i])),
        }
    }
    if let Some((b, _)) = groups.iter().find(|(_, m)| m.len() < 2) {
        return Err(Error::Estimator(format!(
            "block {b} has fewer than 2 patients"
        )));
    }
    let n = data.n_patients() as f64;
    let blocks = groups.len();
    let p = data.design.periods() as f64;
    let (sp, sq) = deviation_sums(data, groups.into_iter().map(|(_, m)| m));
    let denom = 2.0 * (p - 1.0) * (n - blocks as f64);
    let sigma_e2 = sp / denom;
    let sigma_b2 = 0.5 * (sq / denom - sigma_e2);
    VarianceEstimate::new(
        Method::Block,
        sigma_e2,
        sigma_b2,
        Diagnostics {
            converged: true,
            iterations: 0,
            blocks: Some(blocks),
        },
    )
}

/// Dispatch on the configured method. `delta` defines the alternative
/// adjustment; `custom` supplies `tau_star` for the custom adjustment.
pub fn estimate_variance(
    method: Method,
    data: &InterimData<'_>,
    delta: f64,
    custom: Option<&[f64]>,
) -> Result<VarianceEstimate> {
    let d = data.design.treatments();
    match method {
        Method::Unblinded => unblinded_estimate(data),
        Method::AdjustedNull => adjusted_blinded_estimate(data, &AdjustmentSpec::null(d)),
        Method::AdjustedAlternative => {
            adjusted_blinded_estimate(data, &AdjustmentSpec::alternative(d, delta))
        }
        Method::AdjustedCustom => {
            let tau =
                custom.ok_or_else(|| Error::Config("adjusted_custom requires tau_star".into()))?;
            adjusted_blinded_estimate(data, &AdjustmentSpec::custom(tau.to_vec())?)
        }
        Method::Block => block_blinded_estimate(data),
    }
}
