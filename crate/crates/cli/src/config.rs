//! Run settings: optional values from a TOML or JSON file and from flags,
//! resolved against per-scenario defaults with flag > file > default.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use caffnet_core::experiments::{piecewise, solver, unicycle, Scenario};
use caffnet_core::linalg::NormOrder;
use caffnet_core::neural::{Method, TrainConfig};
use caffnet_core::{CombinationMode, LayerConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const DEFAULT_SEED_COUNT: u64 = 5;

/// `N` (seeds `0..N`), `a,b,c`, or `a..b` (end exclusive).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeedList(pub Vec<u64>);

impl FromStr for SeedList {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        let bad = || CliError::Config(format!("invalid seed list `{s}`"));
        let num = |t: &str| t.trim().parse::<u64>().map_err(|_| bad());
        let s = s.trim();
        let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..") {
            (num(a)?..num(b)?).collect()
        } else if s.contains(',') {
            s.split(',').filter(|t| !t.trim().is_empty()).map(num).collect::<CliResult<_>>()?
        } else {
            (0..num(s)?).collect()
        };
        SeedList::checked(seeds)
    }
}

impl SeedList {
    /// Non-empty and free of duplicates.
    pub fn checked(seeds: Vec<u64>) -> CliResult<Self> {
        if seeds.is_empty() {
            return Err(CliError::Config("empty seed list".into()));
        }
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() {
            return Err(CliError::Config(format!("duplicate seed in {seeds:?}")));
        }
        Ok(SeedList(seeds))
    }
}

/// Seeds as written in a config file: a count, a list or a string.
#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
#[serde(untagged)]
pub enum SeedsValue {
    Count(u64),
    List(Vec<u64>),
    Text(String),
}

impl SeedsValue {
    fn resolve(&self) -> CliResult<SeedList> {
        match self {
            SeedsValue::Count(n) => n.to_string().parse(),
            SeedsValue::List(v) => SeedList::checked(v.clone()),
            SeedsValue::Text(s) => s.parse(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    None,
    Soft,
    PostHoc,
}

impl Ablation {
    pub fn method(self) -> Method {
        match self {
            Ablation::None => Method::CAffNet,
            Ablation::Soft => Method::Soft,
            Ablation::PostHoc => Method::PostHoc,
        }
    }
}

impl FromStr for Ablation {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "soft" => Ok(Ablation::Soft),
            "post-hoc" => Ok(Ablation::PostHoc),
            _ => Err(CliError::Config(format!("unknown ablation `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Full,
    Lite,
}

impl From<Mode> for CombinationMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Full => CombinationMode::Full,
            Mode::Lite => CombinationMode::Lite,
        }
    }
}

impl From<CombinationMode> for Mode {
    fn from(m: CombinationMode) -> Self {
        match m {
            CombinationMode::Full => Mode::Full,
            CombinationMode::Lite => Mode::Lite,
        }
    }
}

impl FromStr for Mode {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "lite" => Ok(Mode::Lite),
            _ => Err(CliError::Config(format!("unknown mode `{s}`"))),
        }
    }
}

/// Every setting is optional here; `None` falls through to the next source.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct Settings {
    pub scenario: Option<String>,
    pub seeds: Option<SeedsValue>,
    pub epochs: Option<usize>,
    pub mode: Option<Mode>,
    pub p_norm: Option<f64>,
    pub feas_tol: Option<f64>,
    pub ablation: Option<Ablation>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub penalty: Option<f64>,
    pub hidden: Option<Vec<usize>>,
    pub starts: Option<usize>,
    pub steps: Option<usize>,
    pub init_output_scale: Option<f64>,
    pub constraint_sensitivity: Option<bool>,
    pub input_gradient: Option<bool>,
    pub n_train: Option<usize>,
    pub n_test: Option<usize>,
    pub instance_seed: Option<u64>,
}

macro_rules! overlay {
    ($top:expr, $base:expr; $($field:ident),*) => {
        Settings { $($field: $top.$field.clone().or_else(|| $base.$field.clone()),)* }
    };
}

impl Settings {
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let parsed = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| e.to_string()),
            Some("toml") => toml::from_str(&text).map_err(|e| e.to_string()),
            _ => return Err(CliError::Config(format!("{}: expected a .toml or .json file", path.display()))),
        };
        parsed.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Fields of `self`, falling back to `base`.
    pub fn over(&self, base: &Settings) -> Settings {
        overlay!(self, base; scenario, seeds, epochs, mode, p_norm, feas_tol, ablation, lr,
            batch_size, penalty, hidden, starts, steps, init_output_scale,
            constraint_sensitivity, input_gradient, n_train, n_test, instance_seed)
    }
}

/// Fully resolved settings, recorded in the manifest.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub scenario: String,
    pub method: String,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub mode: Mode,
    pub p_norm: f64,
    pub feas_tol: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub penalty: f64,
    pub hidden: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unicycle: Option<UnicycleSettings>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverSettings>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UnicycleSettings {
    pub starts: usize,
    pub steps: usize,
    pub init_output_scale: f64,
    pub constraint_sensitivity: bool,
    pub input_gradient: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SolverSettings {
    pub n_train: usize,
    pub n_test: usize,
    pub instance_seed: u64,
}

fn scenario_only(s: &Settings, scenario: Scenario) -> CliResult<()> {
    let mut stray = Vec::new();
    if scenario != Scenario::Unicycle {
        for (name, set) in [
            ("starts", s.starts.is_some()),
            ("steps", s.steps.is_some()),
            ("init-output-scale", s.init_output_scale.is_some()),
            ("constraint-sensitivity", s.constraint_sensitivity.is_some()),
            ("input-gradient", s.input_gradient.is_some()),
        ] {
            if set {
                stray.push(name);
            }
        }
    }
    if scenario != Scenario::Solver {
        for (name, set) in [
            ("n-train", s.n_train.is_some()),
            ("n-test", s.n_test.is_some()),
            ("instance-seed", s.instance_seed.is_some()),
        ] {
            if set {
                stray.push(name);
            }
        }
    }
    match stray.is_empty() {
        true => Ok(()),
        false => Err(CliError::Config(format!(
            "{} not used by scenario {scenario}",
            stray.join(", ")
        ))),
    }
}

impl RunConfig {
    pub fn resolve(s: &Settings) -> CliResult<Self> {
        let scenario: Scenario = s
            .scenario
            .as_deref()
            .ok_or_else(|| CliError::Config("no scenario given".into()))?
            .parse()
            .map_err(|_| CliError::Config(format!("unknown scenario `{}`", s.scenario.as_deref().unwrap_or(""))))?;
        scenario_only(s, scenario)?;
        let base = match scenario {
            Scenario::Piecewise => piecewise::default_config(0),
            Scenario::Solver => solver::default_config(0),
            Scenario::Unicycle => unicycle::default_config(0).train,
        };
        let seeds = match &s.seeds {
            Some(v) => v.resolve()?.0,
            None => (0..DEFAULT_SEED_COUNT).collect(),
        };
        let method = s.ablation.unwrap_or(Ablation::None).method();
        let p_norm = s.p_norm.unwrap_or(base.layer.p.get());
        NormOrder::new(p_norm).map_err(|e| CliError::Config(e.to_string()))?;
        let cfg = RunConfig {
            scenario: scenario.name().into(),
            method: method.name().into(),
            seeds,
            epochs: s.epochs.unwrap_or(base.epochs),
            mode: s.mode.unwrap_or(base.layer.mode.into()),
            p_norm,
            feas_tol: s.feas_tol.unwrap_or(base.layer.feas_tol),
            lr: s.lr.unwrap_or(base.lr),
            batch_size: s.batch_size.unwrap_or(base.batch_size),
            penalty: s.penalty.unwrap_or(base.penalty),
            hidden: s.hidden.clone().unwrap_or(base.hidden.clone()),
            unicycle: (scenario == Scenario::Unicycle).then(|| {
                let d = unicycle::default_config(0);
                UnicycleSettings {
                    starts: s.starts.unwrap_or(d.starts),
                    steps: s.steps.unwrap_or(d.steps),
                    init_output_scale: s.init_output_scale.unwrap_or(d.init_output_scale),
                    constraint_sensitivity: s.constraint_sensitivity.unwrap_or(d.constraint_sensitivity),
                    input_gradient: s.input_gradient.unwrap_or(d.input_gradient),
                }
            }),
            solver: (scenario == Scenario::Solver).then(|| SolverSettings {
                n_train: s.n_train.unwrap_or(solver::DEFAULT_TRAIN),
                n_test: s.n_test.unwrap_or(solver::DEFAULT_TEST),
                instance_seed: s.instance_seed.unwrap_or(0),
            }),
        };
        for seed in &cfg.seeds {
            cfg.train_config(*seed).validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        if let Some(u) = &cfg.unicycle {
            cfg.unicycle_config(0).expect("unicycle").validate().map_err(|e| CliError::Config(e.to_string()))?;
            if u.starts == 0 {
                return Err(CliError::Config("starts must be >= 1".into()));
            }
        }
        if let Some(sv) = &cfg.solver {
            if sv.n_train == 0 || sv.n_test == 0 {
                return Err(CliError::Config("n-train and n-test must be >= 1".into()));
            }
        }
        Ok(cfg)
    }

    pub fn scenario(&self) -> Scenario {
        self.scenario.parse().expect("resolved scenario")
    }

    pub fn method(&self) -> Method {
        [Method::CAffNet, Method::Soft, Method::PostHoc]
            .into_iter()
            .find(|m| m.name() == self.method)
            .expect("resolved method")
    }

    pub fn layer(&self) -> LayerConfig {
        LayerConfig {
            p: NormOrder::new(self.p_norm).expect("validated"),
            feas_tol: self.feas_tol,
            mode: self.mode.into(),
            ..LayerConfig::default()
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            lr: self.lr,
            penalty: self.penalty,
            method: self.method(),
            layer: self.layer(),
            hidden: self.hidden.clone(),
        }
    }

    pub fn unicycle_config(&self, seed: u64) -> Option<unicycle::UnicycleConfig> {
        self.unicycle.as_ref().map(|u| unicycle::UnicycleConfig {
            train: self.train_config(seed),
            starts: u.starts,
            steps: u.steps,
            init_output_scale: u.init_output_scale,
            constraint_sensitivity: u.constraint_sensitivity,
            input_gradient: u.input_gradient,
        })
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Full => "full",
            Mode::Lite => "lite",
        })
    }
}
