use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use voltdual::dual::StepsizeSchedule;
use voltdual::scenario::{
    load_scenario, run_to_directory, scenario_variance_report, synthetic_profiles, write_fig3, write_profile_file,
    BuiltScenario, DirectoryRun, RunManifest, RunOptions, ScenarioConfig, ScenarioSource,
};
use voltdual::sim::{oracle_solve, OracleOptions};
use voltdual::{Error, ErrorKind};

#[derive(Parser)]
#[command(name = "voltdual", version, about = "Incentive-based voltage regulation with fast and slow devices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the two-timescale loop and write trace, figures and summary.
    Run {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Also render SVG plots.
        #[arg(long)]
        plots: bool,
        /// Skip the centralized reference solution.
        #[arg(long)]
        no_oracle: bool,
        /// Skip the long-format dual trajectory file.
        #[arg(long)]
        no_dual_csv: bool,
    },
    /// Re-run a manifest written by `run`.
    Rerun {
        manifest: PathBuf,
        /// Output directory (defaults to the one recorded in the manifest).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        plots: bool,
    },
    /// Solve the relaxed problem centrally and print the solution as JSON.
    Oracle {
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
    /// Empirical voltage variance of several scenarios against the bound.
    Variance {
        /// Presets or scenario files, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "ieee37-1,ieee37-2,ieee37-3")]
        scenarios: Vec<String>,
        /// Override applied to every scenario (key.path=value).
        #[arg(long = "set")]
        overrides: Vec<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Write the linear model (R, X, a, limits) as CSV.
    ExportModel {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value = "model.csv")]
        out: PathBuf,
    },
    /// Write the synthetic day of profiles for a scenario's inventory.
    SynthProfiles {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value = "profiles")]
        out: PathBuf,
    },
    /// Print the resolved scenario as TOML.
    Show {
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StepMode {
    Constant,
    Diminishing,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Linear,
    Ac,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Built-in scenario: toy1, toy2, ieee37, ieee37-1, ieee37-2, ieee37-3.
    #[arg(long, conflicts_with = "scenario")]
    preset: Option<String>,
    /// Scenario TOML file.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fast iterations K.
    #[arg(long)]
    iterations: Option<u64>,
    /// Slow-to-fast ratio M.
    #[arg(long)]
    slow_ratio: Option<u64>,
    #[arg(long, value_enum)]
    stepsize: Option<StepMode>,
    /// Constant stepsize value.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Robust voltage margin.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, value_enum)]
    voltage_mode: Option<Mode>,
    /// Evaluate customers on the rayon pool.
    #[arg(long)]
    parallel: bool,
    /// Generic override, key.path=value (repeatable).
    #[arg(long = "set")]
    overrides: Vec<String>,
}

impl ScenarioArgs {
    fn load(&self) -> Result<ScenarioConfig, Error> {
        let source = match (&self.preset, &self.scenario) {
            (_, Some(path)) => ScenarioSource::File(path.clone()),
            (Some(name), None) => ScenarioSource::Preset(name.clone()),
            (None, None) => ScenarioSource::Preset("toy2".to_string()),
        };
        let mut overrides = self.overrides.clone();
        let mut set = |k: &str, v: String| overrides.push(format!("{k}={v}"));
        if let Some(s) = self.seed {
            set("seed", s.to_string());
        }
        if let Some(k) = self.iterations {
            set("iterations", k.to_string());
        }
        if let Some(m) = self.slow_ratio {
            set("slow_ratio", m.to_string());
        }
        if let Some(d) = self.delta {
            set("delta", format!("{d:?}"));
        }
        if let Some(mode) = self.voltage_mode {
            set("voltage_mode", match mode {
                Mode::Linear => "\"linear\"".into(),
                Mode::Ac => "\"ac\"".into(),
            });
        }
        if self.parallel {
            set("parallel", "true".into());
        }
        let mut config = load_scenario(&source, &overrides)?;
        match (self.stepsize, self.epsilon) {
            (Some(StepMode::Diminishing), _) => config.stepsize = StepsizeSchedule::Diminishing,
            (_, Some(epsilon)) => config.stepsize = StepsizeSchedule::Constant { epsilon },
            (Some(StepMode::Constant), None) => {
                if let StepsizeSchedule::Diminishing = config.stepsize {
                    config.stepsize = StepsizeSchedule::Constant { epsilon: 0.1 };
                }
            }
            (None, None) => {}
        }
        config.validate()?;
        Ok(config)
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>().map(Error::kind) {
        Some(ErrorKind::Config) => 2,
        Some(ErrorKind::Ingestion) => 3,
        Some(ErrorKind::Divergence) => 4,
        Some(ErrorKind::Io) => 5,
        Some(ErrorKind::Numerical) | None => 1,
    }
}

fn execute_run(config: &ScenarioConfig, out: &Path, plots: bool, oracle: bool, dual_csv: bool) -> Result<()> {
    let options = RunOptions {
        solve_oracle: oracle,
        ..RunOptions::default()
    };
    let DirectoryRun { built, run, files, .. } = run_to_directory(config, out, &options, dual_csv, plots)?;
    for w in &built.warnings {
        warn!("{w}");
    }
    let o = &run.outcome;
    info!("{} iterations, converged at {:?}, {} post-convergence samples", o.iterations, run.converged_at, run.post.count());
    let vmax = run.post.mean_voltage().iter().cloned().fold(f64::MIN, f64::max);
    println!("scenario {}: {} iterations", config.name, o.iterations);
    println!("  max uncontrolled voltage     {:.5}", run.uncontrolled.iter().cloned().fold(f64::MIN, f64::max));
    if run.post.count() > 0 {
        println!("  max post-convergence mean    {vmax:.5}");
    }
    if let Some(r) = &run.relaxation {
        println!("  relaxation deviation         {:.3e}", r.max_primal_deviation);
    }
    println!("  max signal magnitude         {:.4e}", o.max_signal);
    if o.hull_pinned_events > 0 {
        println!("  pinned TCL events            {}", o.hull_pinned_events);
    }
    for f in files {
        println!("  wrote {}", f.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            scenario,
            out,
            plots,
            no_oracle,
            no_dual_csv,
        } => {
            let config = scenario.load()?;
            execute_run(&config, &out, plots, !no_oracle, !no_dual_csv)
        }
        Command::Rerun { manifest, out, plots } => {
            let m = RunManifest::read(&manifest)?;
            m.verify_inputs()?;
            let out = out.unwrap_or_else(|| m.output_dir.clone());
            execute_run(&m.scenario(), &out, plots, true, true)
        }
        Command::Oracle { scenario } => {
            let built = BuiltScenario::build(&scenario.load()?)?;
            let sol = oracle_solve(&built.instance, &OracleOptions::default())?;
            println!("{}", serde_json::to_string_pretty(&sol)?);
            Ok(())
        }
        Command::Variance { scenarios, overrides, out } => {
            let configs = scenarios
                .iter()
                .map(|s| {
                    let source = if Path::new(s).exists() {
                        ScenarioSource::File(s.into())
                    } else {
                        ScenarioSource::Preset(s.clone())
                    };
                    load_scenario(&source, &overrides)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let report = scenario_variance_report(&configs)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let fig3 = out.join("fig3.csv");
            write_fig3(&report, &fig3)?;
            for p in &report.presets {
                let worst = p
                    .variance
                    .iter()
                    .zip(&p.bound)
                    .map(|(v, b)| v / b)
                    .fold(0.0, f64::max);
                println!(
                    "{:<12} samples {:>6}  max variance {:.3e}  max bound {:.3e}  worst variance/bound {:.3}",
                    p.name,
                    p.samples,
                    p.variance.iter().cloned().fold(0.0, f64::max),
                    p.bound.iter().cloned().fold(0.0, f64::max),
                    worst
                );
            }
            println!("wrote {}", fig3.display());
            Ok(())
        }
        Command::ExportModel { scenario, out } => {
            let built = BuiltScenario::build(&scenario.load()?)?;
            let file = std::fs::File::create(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            built.instance.model.write_csv(std::io::BufWriter::new(file))?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::SynthProfiles { scenario, out } => {
            let built = BuiltScenario::build(&scenario.load()?)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            let topo = &built.instance.topology;
            for series in synthetic_profiles(&built.inventory, topo.nodes, topo.base_kva) {
                let path = out.join(format!("{}.csv", series.kind.name()));
                write_profile_file(&series, &path)?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Show { scenario } => {
            let config = scenario.load()?;
            print!("{}", config.to_toml()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
