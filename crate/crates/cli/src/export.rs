//! `export`: merges a run's per-seed files into long-format tables and
//! writes an index naming the figure each table feeds.

use std::path::Path;

use caffnet_core::experiments::unicycle::{self, OBSTACLES};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::formats::{read_csv, to_json, write_file, Cell, Table};
use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::runs::CONTROL_COLUMNS;

pub const INDEX_FILE: &str = "index.json";
pub const INDEX_FORMAT: &str = "caffnet-export";
pub const INDEX_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FigureKind {
    Function,
    Loss,
    Trajectory,
    Controls,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Figure {
    pub kind: FigureKind,
    pub files: Vec<String>,
    pub description: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportIndex {
    pub format: String,
    pub version: u32,
    pub manifest_hash: String,
    pub scenario: String,
    pub method: String,
    pub seeds: Vec<u64>,
    pub figures: Vec<Figure>,
    pub tables: Vec<String>,
}

/// Concatenates `seed-<k>/<name>` over seeds with `method,seed` prepended,
/// keeping the columns in `keep` (all when `None`) and dropping rows whose
/// kept cells are all empty.
fn merge(run: &Path, m: &RunManifest, method: &str, name: &str, keep: Option<&[String]>) -> CliResult<Table> {
    let mut table: Option<Table> = None;
    for seed in &m.seeds {
        let (header, rows) = read_csv(&run.join(format!("seed-{seed}")).join(name))?;
        let idx: Vec<usize> = match keep {
            None => (0..header.len()).collect(),
            Some(cols) => cols
                .iter()
                .map(|c| {
                    header
                        .iter()
                        .position(|h| h == c)
                        .ok_or_else(|| CliError::Format(format!("{name} has no column `{c}`")))
                })
                .collect::<CliResult<_>>()?,
        };
        let t = table.get_or_insert_with(|| {
            let mut cols = vec!["method".to_string(), "seed".to_string()];
            cols.extend(idx.iter().map(|&i| header[i].clone()));
            Table::new(cols)
        });
        for row in rows {
            let cells: Vec<&String> = idx.iter().map(|&i| &row[i]).collect();
            if cells.iter().skip(1).all(|c| c.is_empty()) && keep.is_some() {
                continue;
            }
            let mut out = vec![Cell::from(method), Cell::Int(*seed as i64)];
            out.extend(cells.into_iter().map(|c| Cell::Text(c.clone())));
            t.push(out);
        }
    }
    table.ok_or_else(|| CliError::Format("run has no seeds".into()))
}

/// Polygon corners of an obstacle `{p : A p <= b}`, counter-clockwise.
pub fn polygon_vertices(a: &[[f64; 2]], b: &[f64]) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = Vec::new();
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            let det = a[i][0] * a[j][1] - a[i][1] * a[j][0];
            if det.abs() < 1e-12 {
                continue;
            }
            let p = [
                (b[i] * a[j][1] - a[i][1] * b[j]) / det,
                (a[i][0] * b[j] - b[i] * a[j][0]) / det,
            ];
            let inside = a.iter().zip(b).all(|(r, bk)| r[0] * p[0] + r[1] * p[1] <= bk + 1e-9);
            if inside && !pts.iter().any(|q| (q[0] - p[0]).hypot(q[1] - p[1]) < 1e-9) {
                pts.push(p);
            }
        }
    }
    let n = pts.len().max(1) as f64;
    let c = [pts.iter().map(|p| p[0]).sum::<f64>() / n, pts.iter().map(|p| p[1]).sum::<f64>() / n];
    pts.sort_by(|p, q| {
        let ap = (p[1] - c[1]).atan2(p[0] - c[0]);
        let aq = (q[1] - c[1]).atan2(q[0] - c[0]);
        ap.total_cmp(&aq)
    });
    pts
}

#[derive(Serialize)]
struct ObstacleJson {
    #[serde(rename = "A")]
    a: Vec<[f64; 2]>,
    b: Vec<f64>,
    vertices: Vec<[f64; 2]>,
}

pub fn export(run: &Path, out: &Path) -> CliResult<ExportIndex> {
    let m = RunManifest::read(run)?;
    let scenario = m
        .scenario()
        .ok_or_else(|| CliError::Format(format!("{MANIFEST_FILE} names no scenario")))?
        .to_string();
    let method = m.method().unwrap_or("caffnet").to_string();
    let mut figures = Vec::new();
    let mut tables = Vec::new();
    let emit = |name: &str, bytes: Vec<u8>| -> CliResult<String> {
        write_file(&out.join(name), &bytes)?;
        Ok(name.to_string())
    };

    let loss = emit("loss.csv", merge(run, &m, &method, "loss.csv", None)?.to_csv()?)?;
    figures.push(Figure {
        kind: FigureKind::Loss,
        files: vec![loss],
        description: "training loss per epoch and seed".into(),
    });
    for name in ["metrics.csv", "summary.csv"] {
        let bytes = std::fs::read(run.join(name)).map_err(|e| CliError::io(run.join(name), e))?;
        tables.push(emit(name, bytes)?);
    }

    match scenario.as_str() {
        "piecewise" => {
            let f = emit("function.csv", merge(run, &m, &method, "predictions.csv", None)?.to_csv()?)?;
            let t = emit("train_points.csv", merge(run, &m, &method, "train.csv", None)?.to_csv()?)?;
            figures.push(Figure {
                kind: FigureKind::Function,
                files: vec![f, t],
                description: "learned function with its four bounds and the training points".into(),
            });
        }
        "solver" => {
            tables.push(emit("predictions.csv", merge(run, &m, &method, "predictions.csv", None)?.to_csv()?)?);
        }
        "unicycle" => {
            let mut keep: Vec<String> = ["t", "p_x", "p_y", "theta"].map(String::from).to_vec();
            keep.extend((1..=unicycle::M).map(|i| format!("r{i}")));
            let traj = emit("trajectory.csv", merge(run, &m, &method, "trajectory.csv", Some(&keep))?.to_csv()?)?;
            let obstacles: Vec<ObstacleJson> = OBSTACLES
                .iter()
                .map(|o| ObstacleJson {
                    a: o.a.to_vec(),
                    b: o.b.to_vec(),
                    vertices: polygon_vertices(o.a, o.b),
                })
                .collect();
            let obs = emit("obstacles.json", to_json(&obstacles)?)?;
            figures.push(Figure {
                kind: FigureKind::Trajectory,
                files: vec![traj, obs],
                description: "test rollout positions per seed with obstacle polygons".into(),
            });
            let mut keep = vec!["t".to_string()];
            keep.extend(CONTROL_COLUMNS.map(String::from));
            let ctl = emit("controls.csv", merge(run, &m, &method, "trajectory.csv", Some(&keep))?.to_csv()?)?;
            figures.push(Figure {
                kind: FigureKind::Controls,
                files: vec![ctl],
                description: "applied, nominal and learned control inputs over time".into(),
            });
        }
        other => return Err(CliError::Format(format!("unknown scenario `{other}` in manifest"))),
    }

    let index = ExportIndex {
        format: INDEX_FORMAT.into(),
        version: INDEX_VERSION,
        manifest_hash: m.hash.clone(),
        scenario,
        method,
        seeds: m.seeds.clone(),
        figures,
        tables,
    };
    write_file(&out.join(INDEX_FILE), &to_json(&index)?)?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn obstacle_vertices_satisfy_their_rows() {
        for ob in &OBSTACLES {
            let v = polygon_vertices(ob.a, ob.b);
            assert_eq!(v.len(), ob.a.len());
            for p in &v {
                for (r, b) in ob.a.iter().zip(ob.b) {
                    assert!(r[0] * p[0] + r[1] * p[1] <= b + 1e-9);
                }
            }
        }
    }

    #[test]
    fn unit_square() {
        let a = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]];
        let v = polygon_vertices(&a, &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(v, vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]);
    }

    #[test]
    fn missing_manifest_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = export(dir.path(), &dir.path().join("out")).unwrap_err();
        assert_eq!(err.exit_code(), crate::error::exit::CONFIG);
    }
}
