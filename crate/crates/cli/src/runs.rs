//! `train`: seeds fan out over a worker pool; one thread then writes every
//! per-seed file, the metric tables and the manifest.

use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use caffnet_core::experiments::piecewise::{self, bounds};
use caffnet_core::experiments::solver::{self, SolverData};
use caffnet_core::experiments::unicycle::{self, Trajectory};
use caffnet_core::experiments::{MeanStd, Scenario};
use caffnet_core::neural::{Model, TrainTrace};
use caffnet_core::ViolationStats;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::formats::{to_json, write_file, Cell, Checkpoint, Table};
use crate::manifest::{
    hex_sha256, input_hash, FileEntry, RunManifest, SeedTiming, Timings, MANIFEST_FORMAT, MANIFEST_VERSION,
};

pub const THREADS_ENV: &str = "CAFFNET_THREADS";
pub const LOSS_COLUMNS: [&str; 4] = ["epoch", "loss", "max_violation", "mean_violation"];

/// Metrics, files and timing of one seed.
#[derive(Clone, Debug)]
pub struct SeedOutput {
    pub seed: u64,
    pub metrics: Vec<(&'static str, f64)>,
    pub files: Vec<(String, Vec<u8>)>,
    pub seconds: f64,
}

/// Worker count from `CAFFNET_THREADS`, or rayon's default.
pub fn worker_count() -> CliResult<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(CliError::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
    }
}

fn loss_table(trace: &TrainTrace) -> Table {
    let mut t = Table::new(LOSS_COLUMNS);
    for r in &trace.epochs {
        t.push(vec![
            Cell::Int(r.epoch as i64),
            r.loss.into(),
            r.max_violation.into(),
            r.mean_violation.into(),
        ]);
    }
    t
}

fn violation_metrics(v: &ViolationStats) -> [(&'static str, f64); 3] {
    [
        ("max_violation", v.max),
        ("mean_violation", v.mean()),
        ("violation_pct", 100.0 * v.fraction_positive()),
    ]
}

/// Per-scenario data shared by every seed.
#[allow(clippy::large_enum_variant)]
enum Shared {
    Piecewise,
    Solver {
        data: SolverData,
        oracle: Vec<f64>,
    },
    Unicycle,
}

impl Shared {
    fn prepare(cfg: &RunConfig) -> CliResult<Self> {
        Ok(match cfg.scenario() {
            Scenario::Piecewise => Shared::Piecewise,
            Scenario::Unicycle => Shared::Unicycle,
            Scenario::Solver => {
                let s = cfg.solver.as_ref().expect("solver settings");
                let data = solver::solver_dataset(s.instance_seed, s.n_train, s.n_test)?;
                let oracle = solver::reference_solutions(&data.spec, &data.test_x)?
                    .into_iter()
                    .map(|r| r.value)
                    .collect();
                Shared::Solver { data, oracle }
            }
        })
    }
}

struct Job<'a> {
    cfg: &'a RunConfig,
    shared: &'a Shared,
    hash: &'a str,
}

impl Job<'_> {
    fn run(&self, seed: u64) -> CliResult<SeedOutput> {
        let start = Instant::now();
        let (model, trace, mut metrics, mut files) = match self.shared {
            Shared::Piecewise => self.piecewise(seed)?,
            Shared::Solver { data, oracle } => self.solver(seed, data, oracle)?,
            Shared::Unicycle => self.unicycle(seed)?,
        };
        metrics.push(("final_loss", trace.final_loss().unwrap_or(f64::NAN)));
        let ck = Checkpoint::new(&model, self.hash, &self.cfg.scenario, &self.cfg.method, seed);
        files.push(("loss.csv".into(), loss_table(&trace).to_csv()?));
        files.push(("checkpoint.json".into(), to_json(&ck)?));
        let files = files
            .into_iter()
            .map(|(name, bytes)| (format!("seed-{seed}/{name}"), bytes))
            .collect();
        Ok(SeedOutput {
            seed,
            metrics,
            files,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    #[allow(clippy::type_complexity)]
    fn piecewise(&self, seed: u64) -> CliResult<(Model, TrainTrace, Vec<(&'static str, f64)>, Vec<(String, Vec<u8>)>)> {
        let run = piecewise::run_piecewise(&self.cfg.train_config(seed), |_, _| {})?;
        let mut pred = Table::new(["x", "target", "prediction", "upper1", "upper2", "lower1", "lower2"]);
        for ((&x, &y), &p) in run.data.test.x.iter().zip(&run.data.test.y).zip(&run.test_pred) {
            let g = bounds(x);
            pred.push(vec![x.into(), y.into(), p.into(), g.upper1.into(), g.upper2.into(), g.lower1.into(), g.lower2.into()]);
        }
        let mut train = Table::new(["x", "y"]);
        for (&x, &y) in run.data.train.x.iter().zip(&run.data.train.y) {
            train.push(vec![x.into(), y.into()]);
        }
        let mut metrics = vec![("test_mse", run.test_mse)];
        metrics.extend(violation_metrics(&run.violation));
        let files = vec![("predictions.csv".into(), pred.to_csv()?), ("train.csv".into(), train.to_csv()?)];
        Ok((run.model, run.trace, metrics, files))
    }

    #[allow(clippy::type_complexity)]
    fn solver(
        &self,
        seed: u64,
        data: &SolverData,
        oracle: &[f64],
    ) -> CliResult<(Model, TrainTrace, Vec<(&'static str, f64)>, Vec<(String, Vec<u8>)>)> {
        let run = solver::run_solver(data, &self.cfg.train_config(seed), |_, _| {})?;
        let mut cols: Vec<String> = (1..=solver::N_EQ).map(|i| format!("x{i}")).collect();
        cols.extend((1..=solver::N_OUT).map(|i| format!("y{i}")));
        cols.extend(["objective", "oracle_objective", "ineq_violation", "eq_violation"].map(String::from));
        let mut pred = Table::new(cols);
        for (k, (x, y)) in data.test_x.chunks(solver::N_EQ).zip(&run.test_pred).enumerate() {
            let (ineq, eq) = data.spec.violations(x, y);
            let mut row: Vec<Cell> = x.iter().chain(y).map(|&v| v.into()).collect();
            row.push(run.score.objectives[k].into());
            row.push(oracle[k].into());
            row.push(ineq.iter().copied().fold(0.0, f64::max).into());
            row.push(eq.iter().copied().fold(0.0, f64::max).into());
            pred.push(row);
        }
        let oracle_mean = MeanStd::of(oracle).mean;
        let s = &run.score;
        let metrics = vec![
            ("objective", s.objective_mean),
            ("oracle_objective", oracle_mean),
            ("objective_gap", s.objective_mean - oracle_mean),
            ("ineq_max", s.ineq.max),
            ("ineq_mean", s.ineq.mean()),
            ("ineq_pct", 100.0 * s.ineq.fraction_positive()),
            ("eq_max", s.eq.max),
            ("eq_mean", s.eq.mean()),
            ("eq_pct", 100.0 * s.eq.fraction_positive()),
        ];
        Ok((run.model, run.trace, metrics, vec![("predictions.csv".into(), pred.to_csv()?)]))
    }

    #[allow(clippy::type_complexity)]
    fn unicycle(&self, seed: u64) -> CliResult<(Model, TrainTrace, Vec<(&'static str, f64)>, Vec<(String, Vec<u8>)>)> {
        let ucfg = self.cfg.unicycle_config(seed).expect("unicycle settings");
        let run = unicycle::run_unicycle(&ucfg, |_, _| {})?;
        let t = &run.test;
        let dist = |x: &unicycle::State| x[0].hypot(x[1]);
        let mut metrics = vec![
            ("cost", t.cost),
            ("reached_goal", if t.reached_goal() { 1.0 } else { 0.0 }),
            ("min_goal_distance", t.states.iter().map(dist).fold(f64::INFINITY, f64::min)),
            ("final_goal_distance", t.states.last().map_or(f64::NAN, dist)),
        ];
        metrics.extend(violation_metrics(&run.violation()));
        let mut starts = Table::new(["p_x", "p_y", "theta"]);
        for s in &run.starts {
            starts.push(s.iter().map(|&v| v.into()).collect());
        }
        let files = vec![
            ("trajectory.csv".into(), trajectory_table(t).to_csv()?),
            ("starts.csv".into(), starts.to_csv()?),
        ];
        Ok((run.model, run.trace, metrics, files))
    }
}

pub const CONTROL_COLUMNS: [&str; 6] = ["v", "omega", "nominal_v", "nominal_omega", "net_v", "net_omega"];

/// One row per state; the final state has no control, so its control and
/// residual cells are empty. `r<i>` is `(A u - b)_i`, non-positive when
/// the row holds.
pub fn trajectory_table(t: &Trajectory) -> Table {
    let mut cols: Vec<String> = ["t", "p_x", "p_y", "theta"].map(String::from).to_vec();
    cols.extend(CONTROL_COLUMNS.map(String::from));
    cols.extend((1..=unicycle::M).map(|i| format!("r{i}")));
    let mut table = Table::new(cols);
    let per_second = 1.0 / unicycle::DT;
    for (k, x) in t.states.iter().enumerate() {
        let mut row: Vec<Cell> = vec![(k as f64 / per_second).into()];
        row.extend(x.iter().map(|&v| Cell::Num(v)));
        match t.controls.get(k) {
            Some(u) => {
                for c in [u, &t.u_nom[k], &t.u_net[k]] {
                    row.extend(c.iter().map(|&v| Cell::Num(v)));
                }
                row.extend(t.slack[k].iter().map(|&v| Cell::Num(v)));
            }
            None => row.extend(std::iter::repeat(Cell::Empty).take(CONTROL_COLUMNS.len() + unicycle::M)),
        }
        table.push(row);
    }
    table
}

fn metrics_tables(method: &str, outputs: &[SeedOutput]) -> CliResult<(Table, Table)> {
    let names: Vec<&str> = outputs[0].metrics.iter().map(|(n, _)| *n).collect();
    let mut cols = vec!["method", "seed"];
    cols.extend(&names);
    let mut per_seed = Table::new(cols.clone());
    for o in outputs {
        let mut row = vec![Cell::from(method), Cell::Int(o.seed as i64)];
        row.extend(o.metrics.iter().map(|(_, v)| Cell::Num(*v)));
        per_seed.push(row);
    }
    cols[1] = "stat";
    let mut summary = Table::new(cols);
    let stats: Vec<MeanStd> = (0..names.len())
        .map(|i| MeanStd::of(&outputs.iter().map(|o| o.metrics[i].1).collect::<Vec<_>>()))
        .collect();
    for (label, pick) in [("mean", 0), ("std", 1)] {
        let mut row = vec![Cell::from(method), Cell::from(label)];
        row.extend(stats.iter().map(|s| Cell::Num(if pick == 0 { s.mean } else { s.std })));
        summary.push(row);
    }
    Ok((per_seed, summary))
}

/// Result of a finished `train`.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub manifest: RunManifest,
    pub summary: Table,
}

pub fn train(cfg: &RunConfig, command_line: &str, config_path: Option<&Path>, out: &Path) -> CliResult<TrainOutcome> {
    let started = Instant::now();
    let hash = input_hash("train", cfg)?;
    let shared = Shared::prepare(cfg)?;
    let job = Job {
        cfg,
        shared: &shared,
        hash: &hash,
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = worker_count()? {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::Config(e.to_string()))?;
    let results: Vec<CliResult<SeedOutput>> = pool.install(|| cfg.seeds.par_iter().map(|&s| job.run(s)).collect());
    let outputs = results.into_iter().collect::<CliResult<Vec<_>>>()?;

    let (per_seed, summary) = metrics_tables(&cfg.method, &outputs)?;
    let mut files: Vec<(String, Vec<u8>)> = vec![
        ("metrics.csv".into(), per_seed.to_csv()?),
        ("summary.csv".into(), summary.to_csv()?),
    ];
    let mut timings = Vec::new();
    for o in outputs {
        timings.push(SeedTiming {
            seed: o.seed,
            seconds: o.seconds,
        });
        files.extend(o.files);
    }
    let mut entries = Vec::new();
    for (name, bytes) in &files {
        write_file(&out.join(name), bytes)?;
        entries.push(FileEntry {
            path: name.clone(),
            sha256: hex_sha256(bytes),
            bytes: bytes.len() as u64,
        });
    }
    let manifest = RunManifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        command: command_line.into(),
        config_path: config_path.map(|p| p.display().to_string()),
        config: serde_json::to_value(cfg).map_err(|e| CliError::Format(e.to_string()))?,
        seeds: cfg.seeds.clone(),
        output_dir: out.display().to_string(),
        hash,
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        timings: Timings {
            total_seconds: started.elapsed().as_secs_f64(),
            seeds: timings,
        },
        files: entries,
    };
    manifest.write(out)?;
    Ok(TrainOutcome { manifest, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Settings;

    fn quick(scenario: &str) -> RunConfig {
        let s = Settings {
            scenario: Some(scenario.into()),
            seeds: Some(crate::config::SeedsValue::Count(2)),
            epochs: Some(2),
            hidden: Some(vec![8]),
            ..Settings::default()
        };
        RunConfig::resolve(&s).unwrap()
    }

    #[test]
    fn piecewise_run_writes_everything() {
        let dir = tempfile::tempdir().unwrap();
        let out = train(&quick("piecewise"), "train piecewise", None, dir.path()).unwrap();
        let names: Vec<&str> = out.manifest.files.iter().map(|f| f.path.as_str()).collect();
        for want in ["metrics.csv", "summary.csv", "seed-0/loss.csv", "seed-1/checkpoint.json", "seed-1/predictions.csv"] {
            assert!(names.contains(&want), "{want}");
        }
        for f in &out.manifest.files {
            let bytes = std::fs::read(dir.path().join(&f.path)).unwrap();
            assert_eq!(hex_sha256(&bytes), f.sha256);
        }
        let loss = std::fs::read_to_string(dir.path().join("seed-0/loss.csv")).unwrap();
        assert!(loss.starts_with("epoch,loss,max_violation,mean_violation\n1,"));
        assert_eq!(loss.lines().count(), 3);
        let ck: Checkpoint = crate::formats::read_json(&dir.path().join("seed-0/checkpoint.json")).unwrap();
        assert_eq!(ck.manifest_hash, out.manifest.hash);
        assert!(RunManifest::read(dir.path()).is_ok());
    }

    #[test]
    fn trajectory_rows_cover_every_state() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick("unicycle");
        cfg.seeds = vec![0];
        cfg.unicycle.as_mut().unwrap().starts = 2;
        cfg.unicycle.as_mut().unwrap().steps = 5;
        train(&cfg, "train unicycle", None, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("seed-0/trajectory.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 6);
        assert_eq!(lines[0].split(',').count(), 4 + 6 + 13);
        assert!(lines[6].ends_with(&",".repeat(19)));
        assert!(lines[1].starts_with("0,-4.5,0,0.5,"));
    }

    #[test]
    fn summary_has_mean_and_std() {
        let outputs = [1.0, 3.0].map(|v| SeedOutput {
            seed: v as u64,
            metrics: vec![("a", v)],
            files: vec![],
            seconds: 0.0,
        });
        let (per_seed, summary) = metrics_tables("soft", &outputs).unwrap();
        assert_eq!(String::from_utf8(per_seed.to_csv().unwrap()).unwrap(), "method,seed,a\nsoft,1,1\nsoft,3,3\n");
        let text = String::from_utf8(summary.to_csv().unwrap()).unwrap();
        assert!(text.starts_with("method,stat,a\nsoft,mean,2\nsoft,std,1.414"));
    }
}
