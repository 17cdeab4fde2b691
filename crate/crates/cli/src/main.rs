//! `xover`: design, simulate and calibrate crossover trials with interim
//! sample size re-estimation.

mod report;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use xover_core::builtin::EXAMPLE_NAMES;
use xover_core::config::{example_config, load_manifest, Overrides, ResolvedScenario, RunManifest};
use xover_core::sample_size::{analysis_df, design_summary, inflation_factor, InflationLevel};
use xover_core::simulator::{calibrate_alpha, run_monte_carlo, Calibration};

use report::{console_header, console_row, design_table, DesignRow, RawRow, SummaryRow};

#[derive(Parser)]
#[command(
    name = "xover",
    version,
    about = "Multi-treatment crossover trials with blinded or unblinded sample size re-estimation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Design-stage critical values, sample sizes and inflation factors.
    Design {
        #[command(flatten)]
        source: Source,
        /// Also write design.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo operating characteristics for every scenario.
    Simulate {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        run: RunArgs,
        /// Write per-replicate results to raw.csv.
        #[arg(long)]
        raw: bool,
        /// Only run these scenario ids.
        #[arg(long = "scenario")]
        scenarios: Vec<String>,
    },
    /// Search the variance grid for the worst FWER and adjust the analysis level.
    Calibrate {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        run: RunArgs,
        /// Within-patient variances of the grid (comma separated).
        #[arg(long, value_delimiter = ',')]
        sigma_e2: Vec<f64>,
        /// Between-patient variances of the grid (comma separated).
        #[arg(long, value_delimiter = ',')]
        sigma_b2: Vec<f64>,
        /// FWER to attain; defaults to the design level.
        #[arg(long)]
        target_alpha: Option<f64>,
    },
    /// Write a ready-to-run configuration for a built-in example.
    Examples {
        /// One of example1, example2, example3.
        name: String,
        /// Destination file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Source {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in example configuration.
    #[arg(long)]
    example: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, env = "XOVER_THREADS")]
    threads: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Force the sample size inflation factor on or off in every scenario.
    #[arg(long, value_enum)]
    inflation: Option<Switch>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            replications: self.reps,
            master_seed: self.seed,
            inflation: self.inflation.map(|s| matches!(s, Switch::On)),
        }
    }
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

type Outcome = Result<(), Failure>;

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn runtime_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Design { source, out } => cmd_design(&source, out.as_deref()),
        Command::Simulate {
            source,
            run,
            raw,
            scenarios,
        } => cmd_simulate(&source, &run, raw, &scenarios),
        Command::Calibrate {
            source,
            run,
            sigma_e2,
            sigma_b2,
            target_alpha,
        } => cmd_calibrate(&source, &run, &sigma_e2, &sigma_b2, target_alpha),
        Command::Examples { name, out } => cmd_examples(&name, out.as_deref()),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("configuration error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn load(source: &Source, overrides: &Overrides) -> Result<RunManifest, Failure> {
    let (text, path) = match (&source.config, &source.example) {
        (Some(path), _) => (
            fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(config_err)?,
            Some(path.display().to_string()),
        ),
        (None, Some(name)) => (example_config(name).map_err(config_err)?.to_json(), None),
        (None, None) => return Err(config_err(anyhow!("give --config or --example"))),
    };
    let mut manifest = load_manifest(&text, overrides).map_err(|e| {
        let origin = path.clone().unwrap_or_else(|| "built-in example".into());
        config_err(anyhow!("{origin}: {e}"))
    })?;
    manifest.config_path = path;
    manifest.timestamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .ok()
        .map(|d| d.as_secs());
    Ok(manifest)
}

fn prepare_out(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))
        .map_err(runtime_err)?;
    let probe = dir.join(".xover-write-test");
    fs::write(&probe, b"")
        .with_context(|| format!("output directory {} is not writable", dir.display()))
        .map_err(runtime_err)?;
    let _ = fs::remove_file(probe);
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(runtime_err)?;
    fs::write(path, text + "\n")
        .with_context(|| format!("writing {}", path.display()))
        .map_err(runtime_err)
}

fn write_run_files(manifest: &RunManifest, out: &Path) -> Result<(), Failure> {
    fs::write(out.join("config.json"), manifest.config.to_json())
        .with_context(|| format!("writing {}", out.join("config.json").display()))
        .map_err(runtime_err)?;
    write_json(&out.join("manifest.json"), manifest)
}

fn cmd_design(source: &Source, out: Option<&Path>) -> Outcome {
    let manifest = load(source, &Overrides::default())?;
    let first = &manifest.scenarios[0].config;
    let design = &first.design;
    let mut combos: Vec<(f64, f64, f64)> = Vec::new();
    for sc in &manifest.scenarios {
        let c = &sc.config;
        let key = (
            c.true_params.sigma_e2,
            c.true_params.sigma_b2,
            c.hypothesis.delta,
        );
        if !combos.contains(&key) {
            combos.push(key);
        }
    }
    let n_ints: BTreeSet<usize> = manifest
        .scenarios
        .iter()
        .map(|s| s.config.policy.n_int)
        .collect();
    let mut rows = Vec::with_capacity(combos.len());
    for (se2, sb2, delta) in combos {
        let mut hyp = first.hypothesis.clone();
        hyp.delta = delta;
        let s = design_summary(design, se2, sb2, &hyp).map_err(runtime_err)?;
        let level = match manifest.config.inflation_level {
            InflationLevel::Nominal => hyp.alpha,
            InflationLevel::PerComparison => s.critical.alpha_star,
        };
        let mut inflation = Vec::new();
        for &n in &n_ints {
            let nu = analysis_df(n, design.periods(), design.treatments());
            if nu >= 1 {
                inflation.push((
                    n,
                    inflation_factor(level, hyp.beta, nu as f64).map_err(runtime_err)?,
                ));
            }
        }
        rows.push(DesignRow {
            sigma_e2: se2,
            sigma_b2: sb2,
            delta,
            e: s.critical.e,
            alpha_star: s.critical.alpha_star,
            unit_information: s.info.unit_info.clone(),
            n_pairwise: s.n_pairwise,
            n_ceil: s.n_ceil,
            n_round_up: s.n_balanced_up,
            n_round_nearest: s.n_balanced_nearest,
            n_familywise: s.n_familywise,
            nu: analysis_df(s.n_balanced_up, design.periods(), design.treatments()),
            inflation_factor: inflation,
        });
    }
    print!(
        "{}",
        design_table(&manifest.name, design.n_sequences(), &rows)
    );
    if let Some(dir) = out {
        prepare_out(dir)?;
        write_json(&dir.join("design.json"), &rows)?;
    }
    Ok(())
}

fn selected<'a>(
    manifest: &'a RunManifest,
    ids: &[String],
) -> Result<Vec<&'a ResolvedScenario>, Failure> {
    if ids.is_empty() {
        return Ok(manifest.scenarios.iter().collect());
    }
    ids.iter()
        .map(|id| {
            manifest
                .scenario(id)
                .ok_or_else(|| config_err(anyhow!("no scenario with id `{id}`")))
        })
        .collect()
}

fn cmd_simulate(source: &Source, run: &RunArgs, raw: bool, ids: &[String]) -> Outcome {
    let mut manifest = load(source, &run.overrides())?;
    let scenarios = selected(&manifest, ids)?
        .into_iter()
        .cloned()
        .collect::<Vec<_>>();
    prepare_out(&run.out)?;
    manifest.output_dir = Some(run.out.display().to_string());
    write_run_files(&manifest, &run.out)?;

    let summary_path = run.out.join("summary.csv");
    let mut summary = csv::Writer::from_path(&summary_path)
        .with_context(|| format!("writing {}", summary_path.display()))
        .map_err(runtime_err)?;
    let mut raw_writer = if raw {
        let p = run.out.join("raw.csv");
        Some(
            csv::Writer::from_path(&p)
                .with_context(|| format!("writing {}", p.display()))
                .map_err(runtime_err)?,
        )
    } else {
        None
    };
    eprintln!(
        "{}: {} scenarios, {} replicates each, seed {}",
        manifest.name,
        scenarios.len(),
        manifest.config.replications,
        manifest.master_seed
    );
    println!("{}", console_header());
    for sc in &scenarios {
        let started = Instant::now();
        let (stats, results) = run_monte_carlo(&sc.config, run.threads)
            .with_context(|| format!("scenario {}", sc.id))
            .map_err(runtime_err)?;
        println!("{}", console_row(sc, &stats));
        eprintln!(
            "  {} finished in {:.1} s",
            sc.id,
            started.elapsed().as_secs_f64()
        );
        summary
            .serialize(SummaryRow::new(&manifest, sc, &stats))
            .map_err(runtime_err)?;
        if let Some(w) = raw_writer.as_mut() {
            for r in &results {
                w.serialize(RawRow::new(&sc.id, r)).map_err(runtime_err)?;
            }
        }
    }
    summary.flush().map_err(runtime_err)?;
    if let Some(mut w) = raw_writer {
        w.flush().map_err(runtime_err)?;
    }
    eprintln!("wrote {}", summary_path.display());
    Ok(())
}

#[derive(Serialize)]
struct CalibrationReport<'a> {
    base_scenario: &'a str,
    method: &'static str,
    n_int: usize,
    #[serde(rename = "n_B")]
    n_b: Option<usize>,
    inflation: bool,
    target_alpha: f64,
    replications: usize,
    #[serde(flatten)]
    result: Calibration,
}

#[derive(Serialize)]
struct CalibrationRow<'a> {
    base_scenario: &'a str,
    method: &'static str,
    n_int: usize,
    #[serde(rename = "n_B")]
    n_b: Option<usize>,
    inflation: bool,
    target_alpha: f64,
    sigma_e2_max: f64,
    sigma_b2_max: f64,
    alpha_adj: f64,
    master_seed: u64,
    tool_version: &'a str,
    config_hash: &'a str,
}

/// Scenarios differing only in effects or variances share one calibration.
fn calibration_bases(manifest: &RunManifest) -> Vec<&ResolvedScenario> {
    let mut seen = Vec::new();
    let mut bases = Vec::new();
    for sc in &manifest.scenarios {
        let c = &sc.config;
        let key = format!(
            "{}|{:?}|{}|{}|{}|{}|{:?}",
            c.method,
            c.randomisation,
            c.policy.n_int,
            c.policy.use_inflation_factor,
            c.hypothesis.delta,
            c.random_period_sd,
            c.custom_tau_star
        );
        if !seen.contains(&key) {
            seen.push(key);
            bases.push(sc);
        }
    }
    bases
}

fn cmd_calibrate(
    source: &Source,
    run: &RunArgs,
    se2: &[f64],
    sb2: &[f64],
    target: Option<f64>,
) -> Outcome {
    let mut manifest = load(source, &run.overrides())?;
    let spec = manifest.config.calibration.clone();
    let base_params = &manifest.scenarios[0].config.true_params;
    let pick = |flag: &[f64], from_spec: Option<&Vec<f64>>, base: f64| -> Vec<f64> {
        if !flag.is_empty() {
            flag.to_vec()
        } else {
            from_spec.cloned().unwrap_or_else(|| vec![base])
        }
    };
    let e_axis = pick(
        se2,
        spec.as_ref().map(|s| &s.sigma_e2),
        base_params.sigma_e2,
    );
    let b_axis = pick(
        sb2,
        spec.as_ref().map(|s| &s.sigma_b2),
        base_params.sigma_b2,
    );
    if e_axis
        .iter()
        .chain(&b_axis)
        .any(|v| !(v.is_finite() && *v >= 0.0))
        || e_axis.contains(&0.0)
    {
        return Err(config_err(anyhow!(
            "grid variances must be finite, sigma_e2 > 0, sigma_b2 >= 0"
        )));
    }
    let grid: Vec<(f64, f64)> = e_axis
        .iter()
        .flat_map(|&e| b_axis.iter().map(move |&b| (e, b)))
        .collect();
    let reps = run
        .reps
        .or(spec.as_ref().and_then(|s| s.replications))
        .unwrap_or(manifest.config.replications);
    prepare_out(&run.out)?;
    manifest.output_dir = Some(run.out.display().to_string());
    write_run_files(&manifest, &run.out)?;

    let mut reports = Vec::new();
    for base in calibration_bases(&manifest) {
        let c = &base.config;
        let target_alpha = target
            .or(spec.as_ref().and_then(|s| s.target_alpha))
            .unwrap_or(c.hypothesis.alpha);
        if !(target_alpha > 0.0 && target_alpha < 1.0) {
            return Err(config_err(anyhow!(
                "target alpha {target_alpha} not in (0,1)"
            )));
        }
        let started = Instant::now();
        let result = calibrate_alpha(c, &grid, target_alpha, reps, run.threads)
            .with_context(|| format!("calibrating from {}", base.id))
            .map_err(runtime_err)?;
        println!(
            "{} {} n_int={} n_B={} inflation={}",
            base.id,
            c.method,
            c.policy.n_int,
            base.n_b().map_or_else(|| "-".into(), |n| n.to_string()),
            c.policy.use_inflation_factor
        );
        println!("  {:>9} {:>9} {:>7}", "sigma_e2", "sigma_b2", "FWER");
        for &(e, b, f) in &result.grid {
            println!("  {e:>9.4} {b:>9.4} {f:>7.4}");
        }
        println!(
            "  worst case sigma_e2 = {:.4}, sigma_b2 = {:.4}",
            result.sigma_e2_max, result.sigma_b2_max
        );
        for s in &result.steps {
            println!(
                "  alpha {:.4} -> FWER {:.4} (se {:.4})",
                s.alpha, s.fwer, s.fwer_se
            );
        }
        println!("  alpha_adj = {:.4}", result.alpha_adj);
        eprintln!(
            "  {} calibrated in {:.1} s",
            base.id,
            started.elapsed().as_secs_f64()
        );
        reports.push(CalibrationReport {
            base_scenario: &base.id,
            method: c.method.as_str(),
            n_int: c.policy.n_int,
            n_b: base.n_b(),
            inflation: c.policy.use_inflation_factor,
            target_alpha,
            replications: reps,
            result,
        });
    }
    let path = run.out.join("calibration.csv");
    let mut w = csv::Writer::from_path(&path)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(runtime_err)?;
    for r in &reports {
        w.serialize(CalibrationRow {
            base_scenario: r.base_scenario,
            method: r.method,
            n_int: r.n_int,
            n_b: r.n_b,
            inflation: r.inflation,
            target_alpha: r.target_alpha,
            sigma_e2_max: r.result.sigma_e2_max,
            sigma_b2_max: r.result.sigma_b2_max,
            alpha_adj: r.result.alpha_adj,
            master_seed: manifest.master_seed,
            tool_version: &manifest.tool_version,
            config_hash: &manifest.config_hash,
        })
        .map_err(runtime_err)?;
    }
    w.flush().map_err(runtime_err)?;
    write_json(&run.out.join("calibration.json"), &reports)
}

fn cmd_examples(name: &str, out: Option<&Path>) -> Outcome {
    let cfg = example_config(name)
        .map_err(|e| config_err(anyhow!("{e}; choose one of {}", EXAMPLE_NAMES.join(", "))))?;
    let text = cfg.to_json();
    match out {
        Some(path) => {
            fs::write(path, &text)
                .with_context(|| format!("writing {}", path.display()))
                .map_err(runtime_err)?;
            eprintln!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}
