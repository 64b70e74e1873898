//! Argument parsing and dispatch.

use std::path::PathBuf;

use caffnet_core::linalg::NormOrder;
use caffnet_core::LayerConfig;
use clap::{Args, Parser, Subcommand};

use crate::config::{Ablation, Mode, RunConfig, SeedList, SeedsValue, Settings};
use crate::error::{CliError, CliResult};
use crate::{export, inspect, runs, verify};

#[derive(Debug, Parser)]
#[command(name = "caffnet", version, about = "Closed-form affine-constraint layer: training, property suites and exports")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one scenario over a list of seeds and write a run directory.
    Train(TrainArgs),
    /// Run a seeded property suite (or `all`).
    Verify(VerifyArgs),
    /// Turn a run directory into a plot-ready bundle.
    Export(ExportArgs),
    /// Print every candidate projection and the selection for one system.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// piecewise, solver or unicycle.
    #[arg(value_name = "SCENARIO")]
    pub scenario_pos: Option<String>,
    #[arg(long)]
    pub scenario: Option<String>,
    /// TOML or JSON file with any of the settings below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `N` for seeds 0..N, `a,b,c`, or `a..b`.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_parser = ["full", "lite"])]
    pub mode: Option<String>,
    #[arg(long)]
    pub p_norm: Option<f64>,
    #[arg(long)]
    pub feas_tol: Option<f64>,
    #[arg(long, value_parser = ["none", "soft", "post-hoc"])]
    pub ablation: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Output directory; defaults to `runs/<scenario>-<method>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// feasibility, projection-oracle, gradients, pinv, combinatorics or all.
    pub suite: String,
    #[arg(long)]
    pub cases: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for counterexample fixtures.
    #[arg(long, default_value = "runs/verify")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    pub run_dir: PathBuf,
    /// Defaults to `<RUN_DIR>/export`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// JSON file `{"A": [[..]], "b": [..]}`, optionally with `f` and `w`.
    #[arg(long)]
    pub system: PathBuf,
    /// Comma-separated prediction.
    #[arg(long, allow_hyphen_values = true)]
    pub f: Option<String>,
    /// Comma-separated null-space vector; zero by default.
    #[arg(long, allow_hyphen_values = true)]
    pub w: Option<String>,
    #[arg(long, value_parser = ["full", "lite"], default_value = "full")]
    pub mode: String,
    #[arg(long, default_value_t = 2.0)]
    pub p_norm: f64,
    #[arg(long, default_value_t = caffnet_core::layer::DEFAULT_FEAS_TOL)]
    pub feas_tol: f64,
}

impl TrainArgs {
    fn flag_settings(&self) -> CliResult<Settings> {
        if let (Some(a), Some(b)) = (&self.scenario_pos, &self.scenario) {
            if a != b {
                return Err(CliError::Config(format!("scenario given twice: `{a}` and `{b}`")));
            }
        }
        Ok(Settings {
            scenario: self.scenario.clone().or_else(|| self.scenario_pos.clone()),
            seeds: self.seeds.as_deref().map(|s| s.parse::<SeedList>().map(|l| SeedsValue::List(l.0))).transpose()?,
            epochs: self.epochs,
            mode: self.mode.as_deref().map(str::parse::<Mode>).transpose()?,
            p_norm: self.p_norm,
            feas_tol: self.feas_tol,
            ablation: self.ablation.as_deref().map(str::parse::<Ablation>).transpose()?,
            lr: self.lr,
            ..Settings::default()
        })
    }

    pub fn resolve(&self) -> CliResult<RunConfig> {
        let file = match &self.config {
            Some(p) => Settings::from_file(p)?,
            None => Settings::default(),
        };
        RunConfig::resolve(&self.flag_settings()?.over(&file))
    }
}

pub fn run(cli: Cli, command_line: &str) -> CliResult<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let out = args
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-{}", cfg.scenario, cfg.method)));
            let done = runs::train(&cfg, command_line, args.config.as_deref(), &out)?;
            crate::emit(format_args!("{}", String::from_utf8_lossy(&done.summary.to_csv()?)));
            crate::say!("run written to {} (hash {})", out.display(), done.manifest.hash);
            Ok(())
        }
        Command::Verify(args) => {
            let which = verify::parse_suites(&args.suite)?;
            verify::verify(&which, args.cases, args.seed, &args.out).map(|_| ())
        }
        Command::Export(args) => {
            let out = args.out.clone().unwrap_or_else(|| args.run_dir.join("export"));
            let index = export::export(&args.run_dir, &out)?;
            crate::say!("{} figures written to {}", index.figures.len(), out.join(export::INDEX_FILE).display());
            Ok(())
        }
        Command::Inspect(args) => {
            let layer = LayerConfig {
                p: NormOrder::new(args.p_norm).map_err(|e| CliError::Config(e.to_string()))?,
                feas_tol: args.feas_tol,
                mode: args.mode.parse::<Mode>()?.into(),
                ..LayerConfig::default()
            };
            let f = args.f.as_deref().map(inspect::parse_list).transpose()?;
            let w = args.w.as_deref().map(inspect::parse_list).transpose()?;
            let report = inspect::inspect(&args.system, f, w, &layer)?;
            crate::say!("{}", serde_json::to_string_pretty(&report).expect("json values serialize"));
            Ok(())
        }
    }
}
