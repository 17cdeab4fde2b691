//! JSON run configuration and its expansion into concrete scenarios.
//!
//! A configuration names a base trial (a built-in example and/or explicit
//! design, parameters and hypotheses) and one or more scenario grids. Each grid
//! expands to the Cartesian product of its axes.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};

use crate::builtin::builtin_design;
use crate::design::{HypothesisSpec, ModelParams, TrialDesign};
use crate::error::Error;
use crate::estimators::Method;
use crate::sample_size::{InflationLevel, ReestimationPolicy};
use crate::simulator::{Randomisation, ScenarioConfig, TauScenario};

pub const DEFAULT_SEED: u64 = 20240601;
pub const DEFAULT_REPLICATIONS: usize = 10_000;
const DEFAULT_N_MAX: usize = 1000;

fn default_n_max() -> usize {
    DEFAULT_N_MAX
}

fn default_inflation() -> Vec<bool> {
    vec![false]
}

/// One estimator entry of a scenario grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodEntry {
    pub method: Method,
    /// Block length; implies block randomisation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_b: Option<usize>,
    /// Assumed effects for `adjusted_custom`, leading 0 included.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_star: Option<Vec<f64>>,
    /// Restrict this entry to these interim sizes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_int_only: Option<Vec<usize>>,
}

impl MethodEntry {
    pub fn simple(method: Method) -> Self {
        Self {
            method,
            n_b: None,
            tau_star: None,
            n_int_only: None,
        }
    }

    pub fn block(n_b: usize) -> Self {
        Self {
            n_b: Some(n_b),
            ..Self::simple(Method::Block)
        }
    }

    fn label(&self) -> String {
        match self.n_b {
            Some(n_b) => format!("{} n_B={n_b}", self.method),
            None => self.method.to_string(),
        }
    }
}

/// A Cartesian scenario grid. Empty variance and `delta` axes take the base values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioGrid {
    pub n_int: Vec<usize>,
    pub methods: Vec<MethodEntry>,
    pub tau: Vec<TauScenario>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sigma_e2: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sigma_b2: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub delta: Vec<f64>,
    #[serde(default = "default_inflation")]
    pub inflation: Vec<bool>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub random_period_sd: Vec<f64>,
}

/// Variance grid searched by the significance-level calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSpec {
    pub sigma_e2: Vec<f64>,
    pub sigma_b2: Vec<f64>,
    /// Defaults to the hypothesis level.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_alpha: Option<f64>,
    /// Defaults to the run's replications.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replications: Option<usize>,
}

impl CalibrationSpec {
    /// All `(sigma_e2, sigma_b2)` pairs, `sigma_e2` varying slowest.
    pub fn grid(&self) -> Vec<(f64, f64)> {
        self.sigma_e2
            .iter()
            .flat_map(|&e| self.sigma_b2.iter().map(move |&b| (e, b)))
            .collect()
    }
}

/// The configuration file as written by users and by `examples`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub example: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design: Option<TrialDesign>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<ModelParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hypothesis: Option<HypothesisSpec>,
    pub master_seed: u64,
    pub replications: usize,
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    #[serde(default)]
    pub inflation_level: InflationLevel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis_alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationSpec>,
    pub scenarios: Vec<ScenarioGrid>,
}

/// Command-line overrides applied before expansion.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub replications: Option<usize>,
    pub master_seed: Option<u64>,
    pub inflation: Option<bool>,
}

impl ConfigFile {
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(r) = o.replications {
            self.replications = r;
            if let Some(c) = self.calibration.as_mut() {
                c.replications = Some(r);
            }
        }
        if let Some(s) = o.master_seed {
            self.master_seed = s;
        }
        if let Some(inf) = o.inflation {
            for g in &mut self.scenarios {
                g.inflation = vec![inf];
            }
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }

    /// Hex SHA-256 of the compact canonical serialisation.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(&canonical)
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// A parse or validation failure, anchored to a line of the source when known.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub column: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.line, self.column) {
            (Some(l), Some(c)) => write!(f, "line {l}, column {c}: {}", self.message),
            (Some(l), None) => write!(f, "line {l}: {}", self.message),
            _ => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

impl From<ConfigError> for Error {
    fn from(e: ConfigError) -> Self {
        Error::Config(e.to_string())
    }
}

/// One fully specified scenario of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedScenario {
    pub id: String,
    pub config: ScenarioConfig,
}

impl ResolvedScenario {
    pub fn n_b(&self) -> Option<usize> {
        match self.config.randomisation {
            Randomisation::Simple => None,
            Randomisation::Block { n_b } => Some(n_b),
        }
    }
}

/// Expanded, validated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub config_path: Option<String>,
    pub output_dir: Option<String>,
    pub tool_version: String,
    /// Seconds since the Unix epoch; not part of any result file.
    pub timestamp: Option<u64>,
    pub master_seed: u64,
    pub config_hash: String,
    pub config: ConfigFile,
    pub scenarios: Vec<ResolvedScenario>,
}

impl RunManifest {
    /// Expand and validate every scenario of `config`.
    pub fn build(config: ConfigFile) -> Result<Self, ConfigError> {
        Self::build_with_source(config, None)
    }

    fn build_with_source(config: ConfigFile, source: Option<&str>) -> Result<Self, ConfigError> {
        let scenarios = expand(&config).map_err(|e| e.anchor(source))?;
        Ok(Self {
            name: config.name.clone(),
            config_path: None,
            output_dir: None,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: None,
            master_seed: config.master_seed,
            config_hash: config.hash(),
            config,
            scenarios,
        })
    }

    pub fn scenario(&self, id: &str) -> Option<&ResolvedScenario> {
        self.scenarios.iter().find(|s| s.id == id)
    }
}

/// Parse a configuration document without expanding it.
pub fn parse_config(text: &str) -> Result<ConfigFile, ConfigError> {
    serde_json::from_str(text).map_err(|e| ConfigError {
        line: Some(e.line()),
        column: Some(e.column()),
        message: e
            .to_string()
            .split(" at line ")
            .next()
            .unwrap_or_default()
            .to_string(),
    })
}

/// Parse, apply overrides, expand and validate.
pub fn load_manifest(text: &str, overrides: &Overrides) -> Result<RunManifest, ConfigError> {
    let mut config = parse_config(text)?;
    config.apply(overrides);
    RunManifest::build_with_source(config, Some(text))
}

/// Where a validation error arose.
struct Located {
    grid: Option<usize>,
    field: &'static str,
    message: String,
}

impl Located {
    fn new(grid: Option<usize>, field: &'static str, err: impl fmt::Display) -> Self {
        Self {
            grid,
            field,
            message: err.to_string(),
        }
    }

    fn anchor(self, source: Option<&str>) -> ConfigError {
        let prefix = match self.grid {
            Some(g) => format!("scenarios[{g}].{}: ", self.field),
            None => format!("{}: ", self.field),
        };
        ConfigError {
            line: source.and_then(|s| field_line(s, self.grid, self.field)),
            column: None,
            message: format!("{prefix}{}", self.message),
        }
    }
}

#[derive(Deserialize)]
struct GridSpans<'a> {
    #[serde(borrow, default)]
    scenarios: Vec<&'a RawValue>,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset].bytes().filter(|&b| b == b'\n').count() + 1
}

/// 1-based line of `"field"`, searched inside grid `grid` when given.
fn field_line(text: &str, grid: Option<usize>, field: &str) -> Option<usize> {
    let key = format!("\"{field}\"");
    let (start, region) = match grid {
        Some(g) => {
            let spans: GridSpans<'_> = serde_json::from_str(text).ok()?;
            let raw = spans.scenarios.get(g)?.get();
            (raw.as_ptr() as usize - text.as_ptr() as usize, raw)
        }
        None => (0, text),
    };
    let pos = region.find(&key).map(|p| start + p).unwrap_or(start);
    Some(line_of(text, pos))
}

fn base_trial(cfg: &ConfigFile) -> Result<(TrialDesign, ModelParams, HypothesisSpec), Located> {
    let builtin = match &cfg.example {
        Some(name) => Some(builtin_design(name).map_err(|e| Located::new(None, "example", e))?),
        None => None,
    };
    let design = cfg
        .design
        .clone()
        .or_else(|| builtin.as_ref().map(|b| b.design.clone()))
        .ok_or_else(|| Located::new(None, "design", "needed when no example is named"))?;
    let params = cfg
        .params
        .clone()
        .or_else(|| builtin.as_ref().map(|b| b.params.clone()))
        .ok_or_else(|| Located::new(None, "params", "needed when no example is named"))?;
    let hypothesis = cfg
        .hypothesis
        .clone()
        .or_else(|| builtin.as_ref().map(|b| b.hypothesis.clone()))
        .ok_or_else(|| Located::new(None, "hypothesis", "needed when no example is named"))?;
    params
        .validate(&design)
        .map_err(|e| Located::new(None, "params", e))?;
    hypothesis
        .validate()
        .map_err(|e| Located::new(None, "hypothesis", e))?;
    Ok((design, params, hypothesis))
}

fn or_base(axis: &[f64], base: f64) -> Vec<f64> {
    if axis.is_empty() {
        vec![base]
    } else {
        axis.to_vec()
    }
}

fn expand(cfg: &ConfigFile) -> Result<Vec<ResolvedScenario>, Located> {
    if cfg.name.trim().is_empty() {
        return Err(Located::new(None, "name", "must not be empty"));
    }
    if cfg.replications == 0 {
        return Err(Located::new(None, "replications", "must be at least 1"));
    }
    if cfg.scenarios.is_empty() {
        return Err(Located::new(
            None,
            "scenarios",
            "at least one grid is required",
        ));
    }
    let (design, params, hypothesis) = base_trial(cfg)?;
    if let Some(c) = &cfg.calibration {
        if c.sigma_e2.is_empty() || c.sigma_b2.is_empty() {
            return Err(Located::new(None, "calibration", "variance grid is empty"));
        }
        if c.grid()
            .iter()
            .any(|&(e, b)| !(e > 0.0 && b >= 0.0 && e.is_finite() && b.is_finite()))
        {
            return Err(Located::new(
                None,
                "calibration",
                "grid variances must be finite, sigma_e2 > 0, sigma_b2 >= 0",
            ));
        }
        if let Some(a) = c.target_alpha {
            if !(a > 0.0 && a < 1.0) {
                return Err(Located::new(
                    None,
                    "calibration",
                    format!("target_alpha {a} not in (0,1)"),
                ));
            }
        }
        if c.replications == Some(0) {
            return Err(Located::new(
                None,
                "calibration",
                "replications must be at least 1",
            ));
        }
    }
    let k = design.n_sequences();
    let d = design.treatments();
    let mut out = Vec::new();
    for (gi, grid) in cfg.scenarios.iter().enumerate() {
        let at = |field: &'static str, e: &dyn fmt::Display| Located::new(Some(gi), field, e);
        for (field, empty) in [
            ("n_int", grid.n_int.is_empty()),
            ("methods", grid.methods.is_empty()),
            ("tau", grid.tau.is_empty()),
            ("inflation", grid.inflation.is_empty()),
        ] {
            if empty {
                return Err(at(field, &"must list at least one value"));
            }
        }
        for m in &grid.methods {
            if let Some(only) = &m.n_int_only {
                if let Some(bad) = only.iter().find(|n| !grid.n_int.contains(n)) {
                    return Err(at(
                        "n_int_only",
                        &format!("{bad} is not on this grid's n_int axis"),
                    ));
                }
            }
            if m.method == Method::Block && m.n_b.is_none() {
                return Err(at("methods", &"block needs n_b"));
            }
            if m.tau_star.is_some() && m.method != Method::AdjustedCustom {
                return Err(at(
                    "tau_star",
                    &format!("only adjusted_custom takes tau_star, not {}", m.method),
                ));
            }
        }
        let se2s = or_base(&grid.sigma_e2, params.sigma_e2);
        let sb2s = or_base(&grid.sigma_b2, params.sigma_b2);
        let deltas = or_base(&grid.delta, hypothesis.delta);
        let rpsds = or_base(&grid.random_period_sd, 0.0);
        for &n_int in &grid.n_int {
            for entry in &grid.methods {
                if entry
                    .n_int_only
                    .as_ref()
                    .is_some_and(|only| !only.contains(&n_int))
                {
                    continue;
                }
                for tau in &grid.tau {
                    for &se2 in &se2s {
                        for &sb2 in &sb2s {
                            for &delta in &deltas {
                                for &inflation in &grid.inflation {
                                    for &rpsd in &rpsds {
                                        let mut hyp = hypothesis.clone();
                                        hyp.delta = delta;
                                        hyp.validate().map_err(|e| at("delta", &e))?;
                                        let mut p = params.clone();
                                        p.sigma_e2 = se2;
                                        p.sigma_b2 = sb2;
                                        p.tau = tau
                                            .resolve(d, delta, &params.tau)
                                            .map_err(|e| at("tau", &e))?;
                                        p.validate(&design).map_err(|e| at("sigma_e2", &e))?;
                                        let (randomisation, multiple) = match entry.n_b {
                                            Some(n_b) => (Randomisation::Block { n_b }, n_b),
                                            None => (Randomisation::Simple, k),
                                        };
                                        let config = ScenarioConfig {
                                            design: design.clone(),
                                            true_params: p,
                                            tau_scenario: tau.clone(),
                                            hypothesis: hyp,
                                            method: entry.method,
                                            custom_tau_star: entry.tau_star.clone(),
                                            policy: ReestimationPolicy {
                                                n_int,
                                                n_max: cfg.n_max,
                                                multiple,
                                                use_inflation_factor: inflation,
                                                inflation_level: cfg.inflation_level,
                                            },
                                            randomisation,
                                            replications: cfg.replications,
                                            master_seed: cfg.master_seed,
                                            random_period_sd: rpsd,
                                            analysis_alpha: cfg.analysis_alpha,
                                        };
                                        config.validate().map_err(|e| {
                                            at(
                                                "methods",
                                                &format!(
                                                    "{} at n_int = {n_int}: {e}",
                                                    entry.label()
                                                ),
                                            )
                                        })?;
                                        out.push(ResolvedScenario {
                                            id: format!("{}-{:04}", cfg.name, out.len() + 1),
                                            config,
                                        });
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Ready-to-run configuration reproducing a built-in example's tables.
///
/// * `example1`: five interim sizes, four estimators plus block `n_B = 4` at 16 and 32.
/// * `example2`: `n_int = 18`, with the inflation factor under the global alternative.
/// * `example3`: three interim sizes, block `n_B = 8` at 32 and 48.
pub fn example_config(name: &str) -> crate::Result<ConfigFile> {
    use Method::*;
    use TauScenario::*;
    builtin_design(name)?;
    let simple = |m| MethodEntry::simple(m);
    let restricted = |n_b, only: &[usize]| MethodEntry {
        n_int_only: Some(only.to_vec()),
        ..MethodEntry::block(n_b)
    };
    let grid = |n_int: Vec<usize>,
                methods: Vec<MethodEntry>,
                tau: Vec<TauScenario>,
                inflation: bool| ScenarioGrid {
        n_int,
        methods,
        tau,
        sigma_e2: Vec::new(),
        sigma_b2: Vec::new(),
        delta: Vec::new(),
        inflation: vec![inflation],
        random_period_sd: Vec::new(),
    };
    let (scenarios, calibration) = match name {
        "example1" => (
            vec![grid(
                vec![8, 16, 24, 32, 40],
                vec![
                    simple(Unblinded),
                    simple(AdjustedNull),
                    simple(AdjustedAlternative),
                    MethodEntry::block(2),
                    restricted(4, &[16, 32]),
                ],
                vec![GlobalNull, Tau1Only, Tau12, GlobalAlt],
                false,
            )],
            None,
        ),
        "example2" => {
            let methods = vec![
                simple(Unblinded),
                simple(AdjustedNull),
                simple(AdjustedAlternative),
                MethodEntry::block(3),
            ];
            (
                vec![
                    grid(
                        vec![18],
                        methods.clone(),
                        vec![GlobalNull, Tau1Only, GlobalAlt],
                        false,
                    ),
                    grid(vec![18], methods, vec![GlobalAlt], true),
                ],
                Some(CalibrationSpec {
                    sigma_e2: vec![0.03, 0.053, 0.08],
                    sigma_b2: vec![0.25, 0.49, 1.0],
                    target_alpha: None,
                    replications: None,
                }),
            )
        }
        _ => (
            vec![grid(
                vec![16, 32, 48],
                vec![
                    simple(Unblinded),
                    simple(AdjustedNull),
                    simple(AdjustedAlternative),
                    MethodEntry::block(4),
                    restricted(8, &[32, 48]),
                ],
                vec![GlobalNull, GlobalAlt],
                false,
            )],
            None,
        ),
    };
    Ok(ConfigFile {
        name: name.to_string(),
        example: Some(name.to_string()),
        design: None,
        params: None,
        hypothesis: None,
        master_seed: DEFAULT_SEED,
        replications: DEFAULT_REPLICATIONS,
        n_max: DEFAULT_N_MAX,
        inflation_level: InflationLevel::Nominal,
        analysis_alpha: None,
        calibration,
        scenarios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_grid_sizes() {
        let sizes: Vec<usize> = ["example1", "example2", "example3"]
            .iter()
            .map(|n| {
                RunManifest::build(example_config(n).unwrap())
                    .unwrap()
                    .scenarios
                    .len()
            })
            .collect();
        assert_eq!(sizes, vec![88, 16, 28]);
    }

    #[test]
    fn round_trip() {
        for name in crate::builtin::EXAMPLE_NAMES {
            let cfg = example_config(name).unwrap();
            let text = cfg.to_json();
            let back = parse_config(&text).unwrap();
            assert_eq!(back, cfg);
            let a = RunManifest::build(cfg).unwrap();
            let b = load_manifest(&text, &Overrides::default()).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn syntax_error_has_line() {
        let err = parse_config("{\n  \"name\": \"x\",\n  oops\n}").unwrap_err();
        assert_eq!(err.line, Some(3));
    }

    #[test]
    fn validation_error_points_at_grid_field() {
        let mut cfg = example_config("example1").unwrap();
        cfg.scenarios[0].n_int = vec![8, 10, 16, 32];
        let text = cfg.to_json();
        let err = load_manifest(&text, &Overrides::default()).unwrap_err();
        let line = err.line.expect("anchored");
        assert!(
            text.lines().nth(line - 1).unwrap().contains("\"methods\""),
            "{err}"
        );
        assert!(err.message.contains("n_int = 10"), "{err}");
    }

    #[test]
    fn unknown_field_rejected() {
        let text =
            example_config("example3")
                .unwrap()
                .to_json()
                .replacen("\"n_max\"", "\"n_maxx\"", 1);
        assert!(parse_config(&text).is_err());
    }

    #[test]
    fn overrides_change_hash() {
        let cfg = example_config("example2").unwrap();
        let mut other = cfg.clone();
        other.apply(&Overrides {
            master_seed: Some(7),
            ..Overrides::default()
        });
        assert_ne!(cfg.hash(), other.hash());
        assert_eq!(cfg.hash(), example_config("example2").unwrap().hash());
    }
}
