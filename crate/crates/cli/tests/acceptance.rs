//! Acceptance criteria P1 to P10. Prints one `PASS` or `FAIL` line per
//! criterion and exits non-zero if any fail. Arguments select criteria by
//! id (`cargo test --test acceptance -- P4 P9`).

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use caffnet::config::{Ablation, RunConfig, SeedsValue, Settings};
use caffnet::formats::{read_csv, read_json, Checkpoint};
use caffnet::runs;
use caffnet_core::experiments::solver;
use caffnet_core::suites::{self, Suite, SuiteConfig, SuiteReport};
use caffnet_core::CombinationMode;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

type Check = fn(&mut Cache) -> Verdict;

/// Suite reports shared between criteria.
#[derive(Default)]
struct Cache {
    feasibility: Option<(SuiteReport, f64)>,
}

fn run_suite(suite: Suite) -> (SuiteReport, f64) {
    let start = Instant::now();
    let report = suites::run(suite, &SuiteConfig::new(suite, 0)).expect("suite runs");
    (report, start.elapsed().as_secs_f64())
}

fn suite_detail(r: &SuiteReport, secs: f64) -> String {
    format!(
        "cases={} failed={} excluded={} worst={:.3e} time={secs:.1}s",
        r.cases, r.failed, r.excluded, r.worst
    )
}

fn feasibility(cache: &mut Cache) -> &(SuiteReport, f64) {
    cache.feasibility.get_or_insert_with(|| run_suite(Suite::Feasibility))
}

fn p1(cache: &mut Cache) -> Verdict {
    let (r, secs) = feasibility(cache);
    let pass = r.cases == 10_000 && r.failed == 0 && r.worst <= 1e-9 && *secs < 60.0;
    verdict(pass, suite_detail(r, *secs))
}

fn p2(cache: &mut Cache) -> Verdict {
    let (r, secs) = feasibility(cache);
    let empty = r.failures.iter().filter(|f| f.message.contains("candidate")).count();
    verdict(r.cases == 10_000 && r.failed == 0, format!("{} ({empty} kept empty-set cases)", suite_detail(r, *secs)))
}

fn suite_check(suite: Suite, cases: usize) -> Verdict {
    let (r, secs) = run_suite(suite);
    verdict(r.passed() && r.cases >= cases, suite_detail(&r, secs))
}

fn p3(_: &mut Cache) -> Verdict {
    suite_check(Suite::ProjectionOracle, 1_000)
}

fn p4(_: &mut Cache) -> Verdict {
    suite_check(Suite::Combinatorics, 1)
}

fn p5(_: &mut Cache) -> Verdict {
    let (r, secs) = run_suite(Suite::Gradients);
    let stable = r.cases - r.excluded;
    let rate = (stable - r.failed) as f64 / stable.max(1) as f64;
    verdict(r.passed() && r.cases == 500, format!("{} pass_rate={:.4}", suite_detail(&r, secs), rate))
}

fn p9(_: &mut Cache) -> Verdict {
    suite_check(Suite::Pinv, 1_000)
}

fn train(scenario: &str, ablation: Ablation, dir: &Path) -> (RunConfig, Vec<Vec<String>>, Vec<String>, f64) {
    let settings = Settings {
        scenario: Some(scenario.into()),
        ablation: Some(ablation),
        seeds: Some(SeedsValue::Count(5)),
        ..Settings::default()
    };
    let cfg = RunConfig::resolve(&settings).expect("valid config");
    let start = Instant::now();
    runs::train(&cfg, "acceptance", None, dir).expect("training succeeds");
    let (header, rows) = read_csv(&dir.join("metrics.csv")).expect("metrics");
    (cfg, rows, header, start.elapsed().as_secs_f64())
}

/// Column `name` of a metrics table as numbers.
fn column(header: &[String], rows: &[Vec<String>], name: &str) -> Vec<f64> {
    let i = header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    rows.iter().map(|r| r[i].parse().expect("number")).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn p6(_: &mut Cache) -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let (_, rows, h, secs) = train("piecewise", Ablation::None, &dir.path().join("caffnet"));
    let (_, srows, sh, ssecs) = train("piecewise", Ablation::Soft, &dir.path().join("soft"));
    let mse = column(&h, &rows, "test_mse");
    let vmax = max(&column(&h, &rows, "max_violation"));
    let vmean = max(&column(&h, &rows, "mean_violation"));
    let soft_max = mean(&column(&sh, &srows, "max_violation"));
    let pass = vmax == 0.0 && vmean == 0.0 && mean(&mse) <= 0.01 && soft_max > 0.0 && secs + ssecs < 900.0;
    verdict(
        pass,
        format!(
            "caffnet mse={:.5} (max over seeds {:.5}) violation max={vmax} mean={vmean}; soft max violation={soft_max:.4}; time={:.0}s",
            mean(&mse),
            max(&mse),
            secs + ssecs
        ),
    )
}

fn p7(_: &mut Cache) -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("caffnet");
    let (cfg, rows, h, secs) = train("solver", Ablation::None, &run_dir);
    let (_, srows, sh, ssecs) = train("solver", Ablation::Soft, &dir.path().join("soft"));
    let viol: f64 = ["ineq_max", "ineq_mean", "eq_max", "eq_mean"]
        .iter()
        .map(|c| max(&column(&h, &rows, c)))
        .fold(0.0, f64::max);
    let gap = (mean(&column(&h, &rows, "objective")) - mean(&column(&h, &rows, "oracle_objective"))).abs();
    let soft_eq = mean(&column(&sh, &srows, "eq_pct"));

    let ck: Checkpoint = read_json(&run_dir.join("seed-0/checkpoint.json")).unwrap();
    let model = ck.model().unwrap();
    let s = cfg.solver.as_ref().unwrap();
    let data = solver::solver_dataset(s.instance_seed, s.n_train, 50).unwrap();
    let task = data.test_task();
    let mut tc = cfg.train_config(0);
    tc.layer.mode = CombinationMode::Lite;
    let lite = solver::predict_set(&model, &tc, &task).unwrap();
    tc.layer.mode = CombinationMode::Full;
    let full = solver::predict_set(&model, &tc, &task).unwrap();
    let diff = lite
        .iter()
        .zip(&full)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);

    let pass = viol == 0.0 && soft_eq > 90.0 && gap <= 0.15 && diff <= 1e-8;
    verdict(
        pass,
        format!(
            "caffnet violation={viol} objective gap={gap:.4}; soft eq violated={soft_eq:.2}%; lite-full max diff={diff:.2e} on {}; time={:.0}s",
            lite.len(),
            secs + ssecs
        ),
    )
}

fn p8(_: &mut Cache) -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let (_, rows, h, secs) = train("unicycle", Ablation::None, &dir.path().join("caffnet"));
    let (_, prows, ph, psecs) = train("unicycle", Ablation::PostHoc, &dir.path().join("post-hoc"));
    let vmax = max(&column(&h, &rows, "max_violation"));
    let reached = column(&h, &rows, "reached_goal");
    let post_reached = column(&ph, &prows, "reached_goal");
    let dist = column(&h, &rows, "min_goal_distance");
    let n = reached.len();
    let hits = reached.iter().filter(|&&v| v == 1.0).count();
    let post_hits = post_reached.iter().filter(|&&v| v == 1.0).count();
    let pass = vmax == 0.0 && 2 * hits > n && 2 * post_hits < n;
    verdict(
        pass,
        format!(
            "caffnet violation max={vmax} goal reached {hits}/{n} (closest approach per seed {:?}); post-hoc goal reached {post_hits}/{n}; time={:.0}s",
            dist.iter().map(|d| format!("{d:.2}")).collect::<Vec<_>>(),
            secs + psecs
        ),
    )
}

fn p10(_: &mut Cache) -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_caffnet");
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let status = Command::new(bin)
            .args(["train", "piecewise", "--seeds", "1", "--out"])
            .arg(&out)
            .output()
            .expect("binary runs");
        if !status.status.success() {
            return verdict(false, format!("run {name} exited with {}", status.status));
        }
        outputs.push(out);
    }
    let files = ["metrics.csv", "summary.csv", "seed-0/loss.csv", "seed-0/predictions.csv", "seed-0/train.csv"];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(outputs[0].join(f)).ok() != std::fs::read(outputs[1].join(f)).ok())
        .collect();
    let ma: serde_json::Value = read_json(&outputs[0].join("manifest.json")).unwrap();
    let mb: serde_json::Value = read_json(&outputs[1].join("manifest.json")).unwrap();
    let same_hash = ma["hash"] == mb["hash"];
    verdict(
        differing.is_empty() && same_hash,
        format!("{} CSV files compared, differing={differing:?}, manifest hash equal={same_hash}", files.len()),
    )
}

fn main() -> ExitCode {
    let checks: [(&str, &str, Check); 10] = [
        ("P1", "hard satisfaction", p1),
        ("P2", "candidate existence", p2),
        ("P3", "oracle equivalence", p3),
        ("P4", "combinatorics", p4),
        ("P5", "gradient fidelity", p5),
        ("P6", "piecewise experiment", p6),
        ("P7", "solver experiment", p7),
        ("P8", "unicycle experiment", p8),
        ("P9", "numerics", p9),
        ("P10", "determinism", p10),
    ];
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut cache = Cache::default();
    let mut failed = Vec::new();
    for (id, name, check) in checks {
        if !wanted.is_empty() && !wanted.iter().any(|w| w == id) {
            continue;
        }
        let v = check(&mut cache);
        println!("{id} {} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        if !v.pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
