//! Crossover sequence sets and the model/hypothesis value types built on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A set of `K` treatment sequences of common length `P` over `D` treatments.
///
/// Treatment `0` is the control. Sequences are stored row-wise: `sequences[k][j]`
/// is the treatment given in period `j` to patients on sequence `k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawDesign", into = "RawDesign")]
pub struct TrialDesign {
    treatments: usize,
    sequences: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct RawDesign {
    treatments: usize,
    sequences: Vec<Vec<usize>>,
}

impl TryFrom<RawDesign> for TrialDesign {
    type Error = Error;
    fn try_from(raw: RawDesign) -> Result<Self> {
        TrialDesign::new(raw.treatments, raw.sequences)
    }
}

impl From<TrialDesign> for RawDesign {
    fn from(d: TrialDesign) -> Self {
        RawDesign {
            treatments: d.treatments,
            sequences: d.sequences,
        }
    }
}

impl TrialDesign {
    pub fn new(treatments: usize, sequences: Vec<Vec<usize>>) -> Result<Self> {
        if treatments < 2 {
            return Err(Error::InvalidDesign("need at least two treatments".into()));
        }
        let periods = sequences
            .first()
            .map(|s| s.len())
            .ok_or_else(|| Error::InvalidDesign("empty sequence set".into()))?;
        if periods == 0 {
            return Err(Error::InvalidDesign(
                "sequences must have at least one period".into(),
            ));
        }
        for (k, seq) in sequences.iter().enumerate() {
            if seq.len() != periods {
                return Err(Error::InvalidDesign(format!(
                    "sequence {k} has length {} but sequence 0 has length {periods}",
                    seq.len()
                )));
            }
            if let Some(&bad) = seq.iter().find(|&&d| d >= treatments) {
                return Err(Error::InvalidDesign(format!(
                    "sequence {k} uses treatment {bad} outside 0..{treatments}"
                )));
            }
        }
        Ok(Self {
            treatments,
            sequences,
        })
    }

    /// Parse sequences written as digit strings, e.g. `["01", "10"]`.
    pub fn from_strings(treatments: usize, sequences: &[&str]) -> Result<Self> {
        let parsed = sequences
            .iter()
            .map(|s| {
                s.chars()
                    .map(|c| {
                        c.to_digit(36).map(|d| d as usize).ok_or_else(|| {
                            Error::InvalidDesign(format!("bad treatment symbol `{c}`"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(treatments, parsed)
    }

    /// Number of treatments `D` (control included).
    pub fn treatments(&self) -> usize {
        self.treatments
    }

    /// Number of periods `P`.
    pub fn periods(&self) -> usize {
        self.sequences[0].len()
    }

    /// Number of sequences `K`.
    pub fn n_sequences(&self) -> usize {
        self.sequences.len()
    }

    pub fn sequences(&self) -> &[Vec<usize>] {
        &self.sequences
    }

    /// Treatment given in period `period` on sequence `seq` (both zero-based).
    #[inline]
    pub fn treatment(&self, seq: usize, period: usize) -> usize {
        self.sequences[seq][period]
    }

    /// Number of fixed effects: intercept, `P - 1` periods, `D - 1` treatments.
    pub fn n_fixed(&self) -> usize {
        self.periods() + self.treatments - 1
    }

    pub fn is_period_balanced(&self) -> bool {
        self.check_period_balance().balanced
    }

    pub fn is_complete_block(&self) -> bool {
        self.periods() == self.treatments
            && self.sequences.iter().all(|seq| {
                let mut seen = vec![false; self.treatments];
                seq.iter().all(|&d| !std::mem::replace(&mut seen[d], true))
            })
    }

    /// Count treatments per period and test balance.
    ///
    /// `balanced` holds when, in every period column, every treatment occurs the
    /// same number of times. `identities_hold` records the weaker property the
    /// blinded estimators rely on: for every treatment, its count is the same in
    /// every period, which makes `sum_k (tau[d(j,k)] - tau[d(j-1,k)]) = 0` and
    /// `sum_k tau[d(1,k)] = ... = sum_k tau[d(P,k)]` hold for any `tau`.
    pub fn check_period_balance(&self) -> BalanceReport {
        let p = self.periods();
        let mut counts = vec![vec![0usize; self.treatments]; p];
        for seq in &self.sequences {
            for (j, &d) in seq.iter().enumerate() {
                counts[j][d] += 1;
            }
        }
        let balanced = counts.iter().all(|col| col.iter().all(|&c| c == col[0]));
        let identities_hold =
            (0..self.treatments).all(|d| counts.iter().all(|col| col[d] == counts[0][d]));
        BalanceReport {
            balanced,
            identities_hold,
            counts,
        }
    }
}

/// Result of [`TrialDesign::check_period_balance`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BalanceReport {
    pub balanced: bool,
    pub identities_hold: bool,
    /// `counts[j][d]`: how often treatment `d` is given in period `j`.
    pub counts: Vec<Vec<usize>>,
}

/// Single Williams square of even order `treatments`.
///
/// Odd orders have no single-square Williams design; use [`williams_design`].
pub fn williams_square(treatments: usize) -> Result<TrialDesign> {
    if treatments < 2 {
        return Err(Error::InvalidDesign("need at least two treatments".into()));
    }
    if treatments % 2 == 1 {
        return Err(Error::Unsupported(format!(
            "no single Williams square exists for odd order {treatments}"
        )));
    }
    TrialDesign::new(treatments, williams_rows(treatments))
}

/// Williams design for any order: a single square for even `treatments`,
/// the square plus its mirror image (`2D` sequences) for odd `treatments`.
pub fn williams_design(treatments: usize) -> Result<TrialDesign> {
    if treatments < 2 {
        return Err(Error::InvalidDesign("need at least two treatments".into()));
    }
    let mut rows = williams_rows(treatments);
    if treatments % 2 == 1 {
        let mirrored: Vec<Vec<usize>> = rows
            .iter()
            .map(|r| r.iter().rev().copied().collect())
            .collect();
        rows.extend(mirrored);
    }
    TrialDesign::new(treatments, rows)
}

fn williams_rows(n: usize) -> Vec<Vec<usize>> {
    // first row 0, 1, n-1, 2, n-2, ...
    let mut first = Vec::with_capacity(n);
    let (mut lo, mut hi) = (0usize, n);
    for i in 0..n {
        if i % 2 == 0 {
            first.push(lo);
            lo += 1;
        } else {
            hi -= 1;
            first.push(hi);
        }
    }
    (0..n)
        .map(|k| first.iter().map(|&d| (d + k) % n).collect())
        .collect()
}

/// Parameters of the crossover linear mixed model.
///
/// `pi[0]` and `tau[0]` are fixed at zero for identifiability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub mu0: f64,
    pub pi: Vec<f64>,
    pub tau: Vec<f64>,
    pub sigma_e2: f64,
    pub sigma_b2: f64,
}

impl ModelParams {
    pub fn validate(&self, design: &TrialDesign) -> Result<()> {
        if self.pi.len() != design.periods() {
            return Err(Error::InvalidParameters(format!(
                "expected {} period effects, got {}",
                design.periods(),
                self.pi.len()
            )));
        }
        if self.tau.len() != design.treatments() {
            return Err(Error::InvalidParameters(format!(
                "expected {} treatment effects, got {}",
                design.treatments(),
                self.tau.len()
            )));
        }
        if self.pi[0] != 0.0 || self.tau[0] != 0.0 {
            return Err(Error::InvalidParameters(
                "first period effect and control effect must be 0".into(),
            ));
        }
        let finite = std::iter::once(self.mu0)
            .chain(self.pi.iter().copied())
            .chain(self.tau.iter().copied())
            .all(f64::is_finite);
        if !finite {
            return Err(Error::InvalidParameters("non-finite effect".into()));
        }
        if !(self.sigma_e2 >= 0.0 && self.sigma_b2 >= 0.0)
            || !self.sigma_e2.is_finite()
            || !self.sigma_b2.is_finite()
        {
            return Err(Error::InvalidParameters(
                "variances must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Mean response in `period` on `seq`.
    #[inline]
    pub fn cell_mean(&self, design: &TrialDesign, seq: usize, period: usize) -> f64 {
        self.mu0 + self.pi[period] + self.tau[design.treatment(seq, period)]
    }

    /// Fixed effects in model order `(mu0, pi_2..pi_P, tau_1..tau_{D-1})`.
    pub fn fixed_effects(&self) -> Vec<f64> {
        std::iter::once(self.mu0)
            .chain(self.pi[1..].iter().copied())
            .chain(self.tau[1..].iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `H1d: tau_d > 0`
    Greater,
    /// `H1d: tau_d < 0`
    Less,
    TwoSided,
}

impl Direction {
    /// Orient a Wald statistic so that large positive values favour rejection.
    #[inline]
    pub fn orient(self, stat: f64) -> f64 {
        match self {
            Direction::Greater => stat,
            Direction::Less => -stat,
            Direction::TwoSided => stat.abs(),
        }
    }

    /// Whether `H0d` is true for effect `tau_d`.
    pub fn null_is_true(self, tau_d: f64) -> bool {
        match self {
            Direction::Greater => tau_d <= 0.0,
            Direction::Less => tau_d >= 0.0,
            Direction::TwoSided => tau_d == 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PowerKind {
    #[default]
    Pairwise,
    Familywise,
}

/// Hypotheses, error rates and the clinically relevant difference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisSpec {
    pub direction: Direction,
    pub delta: f64,
    pub alpha: f64,
    pub beta: f64,
    #[serde(default)]
    pub power_kind: PowerKind,
}

impl HypothesisSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParameters(format!(
                "alpha {} not in (0,1)",
                self.alpha
            )));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::InvalidParameters(format!(
                "beta {} not in (0,1)",
                self.beta
            )));
        }
        let ok = match self.direction {
            Direction::Greater => self.delta > 0.0,
            Direction::Less => self.delta < 0.0,
            Direction::TwoSided => self.delta != 0.0 && self.delta.is_finite(),
        };
        if !ok {
            return Err(Error::InvalidParameters(format!(
                "delta {} inconsistent with direction {:?}",
                self.delta, self.direction
            )));
        }
        Ok(())
    }
}
