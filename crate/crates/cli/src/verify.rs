//! `verify`: runs the seeded property suites and saves each kept
//! counterexample as a JSON fixture that `inspect` can read back.

use std::path::{Path, PathBuf};
use std::time::Instant;

use caffnet_core::suites::{self, Failure, Fixture, Suite, SuiteConfig, SuiteReport};
use caffnet_core::CombinationMode;
use serde_json::{json, Value};

use crate::error::{CliError, CliResult};
use crate::formats::{format_f64, to_json, write_file, SystemJson};

/// `all` or one suite name.
pub fn parse_suites(name: &str) -> CliResult<Vec<Suite>> {
    if name == "all" {
        return Ok(Suite::ALL.to_vec());
    }
    Suite::parse(name).map(|s| vec![s]).ok_or_else(|| {
        let names: Vec<&str> = Suite::ALL.iter().map(|s| s.name()).collect();
        CliError::Config(format!("unknown suite `{name}` (expected all, {})", names.join(", ")))
    })
}

pub fn fixture_json(suite: Suite, seed: u64, failure: &Failure) -> Value {
    let mut v = match &failure.fixture {
        Fixture::Layer { system, f, w } => {
            let sys = SystemJson::from(system);
            json!({"kind": "layer", "A": sys.a, "b": sys.b, "f": f, "w": w})
        }
        Fixture::Matrix(a) => json!({"kind": "matrix", "rows": a.rows(), "cols": a.cols(), "data": a.as_slice()}),
        Fixture::Combinations { m, n_out, mode } => {
            let mode = match mode {
                CombinationMode::Full => "full",
                CombinationMode::Lite => "lite",
            };
            json!({"kind": "combinations", "m": m, "n_out": n_out, "mode": mode})
        }
    };
    let obj = v.as_object_mut().expect("object");
    obj.insert("suite".into(), suite.name().into());
    obj.insert("seed".into(), seed.into());
    obj.insert("case".into(), failure.case.into());
    obj.insert("message".into(), failure.message.clone().into());
    v
}

/// Writes `<out>/<suite>/case-<n>.json` for every kept failure.
pub fn write_fixtures(report: &SuiteReport, seed: u64, out: &Path) -> CliResult<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for f in &report.failures {
        let path = out.join(report.suite.name()).join(format!("case-{}.json", f.case));
        write_file(&path, &to_json(&fixture_json(report.suite, seed, f))?)?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn summary_line(report: &SuiteReport, seconds: f64) -> String {
    format!(
        "{} {:<18} cases={} failed={} excluded={} worst={} time={:.1}s",
        if report.passed() { "PASS" } else { "FAIL" },
        report.suite.name(),
        report.cases,
        report.failed,
        report.excluded,
        format_f64(report.worst),
        seconds
    )
}

/// Runs `which`, printing one line per suite. Fails with the first failing
/// suite's name after all have run.
pub fn verify(which: &[Suite], cases: Option<usize>, seed: u64, out: &Path) -> CliResult<Vec<SuiteReport>> {
    let mut reports = Vec::new();
    for &suite in which {
        let mut cfg = SuiteConfig::new(suite, seed);
        if let Some(n) = cases {
            cfg.cases = n;
        }
        let start = Instant::now();
        let report = suites::run(suite, &cfg)?;
        crate::say!("{}", summary_line(&report, start.elapsed().as_secs_f64()));
        for path in write_fixtures(&report, seed, out)? {
            crate::say!("  counterexample: {}", path.display());
        }
        reports.push(report);
    }
    match reports.iter().find(|r| !r.passed()) {
        Some(r) => Err(CliError::Verify(r.suite.name().into())),
        None => Ok(reports),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use caffnet_core::{ConstraintSystem, Matrix, Vector};

    #[test]
    fn suite_names() {
        assert_eq!(parse_suites("all").unwrap().len(), 5);
        assert_eq!(parse_suites("pinv").unwrap(), vec![Suite::Pinv]);
        assert!(parse_suites("everything").is_err());
    }

    #[test]
    fn layer_fixture_reads_back_as_system() {
        let sys = ConstraintSystem::new(
            Matrix::from_rows(&[[1.0, 2.0]]).unwrap(),
            Vector::new(vec![0.5]).unwrap(),
        )
        .unwrap();
        let failure = Failure {
            case: 12,
            message: "violation 1e-3".into(),
            fixture: Fixture::Layer {
                system: sys.clone(),
                f: vec![1.0, 1.0],
                w: vec![0.0, 0.0],
            },
        };
        let v = fixture_json(Suite::Feasibility, 3, &failure);
        assert_eq!(v["case"], 12);
        let back: SystemJson = serde_json::from_value(v).unwrap();
        assert_eq!(ConstraintSystem::try_from(&back).unwrap(), sys);
    }

    #[test]
    fn passing_suite_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let reports = verify(&[Suite::Pinv], Some(20), 0, dir.path()).unwrap();
        assert!(reports[0].passed());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
