//! `inspect`: every candidate projection and the selection for one system.

use std::path::Path;

use caffnet_core::layer::combos_for;
use caffnet_core::{candidates, forward, Branch, ConstraintSystem, LayerConfig};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::error::{CliError, CliResult};
use crate::formats::{read_json, SystemJson};

/// A system file, optionally carrying `f` and `w` (as counterexample
/// fixtures do).
#[derive(Debug, Deserialize)]
struct SystemFile {
    #[serde(flatten)]
    system: SystemJson,
    f: Option<Vec<f64>>,
    w: Option<Vec<f64>>,
}

pub fn parse_list(s: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| CliError::Config(format!("invalid number `{t}` in `{s}`")))
        })
        .collect()
}

pub fn inspect(system_path: &Path, f: Option<Vec<f64>>, w: Option<Vec<f64>>, layer: &LayerConfig) -> CliResult<Value> {
    let file: SystemFile = read_json(system_path)?;
    let sys = ConstraintSystem::try_from(&file.system)?;
    let f = f
        .or(file.f)
        .ok_or_else(|| CliError::Config("no f given on the command line or in the system file".into()))?;
    let w = w.or(file.w).unwrap_or_else(|| vec![0.0; sys.n_out()]);
    if f.len() != sys.n_out() || w.len() != sys.n_out() {
        return Err(CliError::Config(format!(
            "f and w need {} entries, got {} and {}",
            sys.n_out(),
            f.len(),
            w.len()
        )));
    }
    let combos = combos_for(&sys, layer)?;
    let cands = candidates(&sys, &combos, &f, &w, layer)?;
    let list: Vec<Value> = cands
        .iter()
        .map(|c| {
            json!({
                "gamma": c.gamma.indices(),
                "y": &c.y[..],
                "feasible": c.feasible,
                "distance": c.distance,
                "max_violation": c.max_violation(),
            })
        })
        .collect();
    let rec = forward(&sys, &combos, &f, &w, layer)?;
    let branch = match &rec.branch {
        Branch::Interior => json!("interior"),
        Branch::Projected(g) => json!({"projected": g.indices()}),
    };
    let selection = json!({"branch": branch, "output": &rec.output[..]});
    Ok(json!({
        "m": sys.m(),
        "n_out": sys.n_out(),
        "f": f,
        "w": w,
        "selection": selection,
        "candidates": list,
    }))
}
