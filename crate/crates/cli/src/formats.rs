//! File formats: comma-separated tables with LF line endings, the JSON
//! constraint-system document, and model checkpoints.

use std::fs;
use std::path::Path;

use caffnet_core::neural::{Mlp, Model};
use caffnet_core::{ConstraintSystem, Matrix, Vector};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// One table cell.
#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
    Empty,
}

impl Cell {
    pub fn render(&self) -> String {
        match self {
            Cell::Num(v) => format_f64(*v),
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Num(v) => Some(*v),
            Cell::Int(v) => Some(*v as f64),
            _ => None,
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

/// Shortest round-trip representation; scientific notation outside
/// `[1e-4, 1e15)`.
pub fn format_f64(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 {
        "0".into()
    } else if !v.is_finite() || (1e-4..1e15).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Self {
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> CliResult<Vec<u8>> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let fail = |e: csv::Error| CliError::Format(e.to_string());
        w.write_record(&self.columns).map_err(fail)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render)).map_err(fail)?;
        }
        w.into_inner().map_err(|e| CliError::Format(e.to_string()))
    }
}

/// Header and raw string records of a CSV file.
pub fn read_csv(path: &Path) -> CliResult<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
    let fail = |e: csv::Error| CliError::Format(format!("{}: {e}", path.display()));
    let header = r.headers().map_err(fail)?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec.map_err(fail)?.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn to_json<T: Serialize>(value: &T) -> CliResult<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value).map_err(|e| CliError::Format(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
}

/// `{"A": [[...], ...], "b": [...]}`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemJson {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl From<&ConstraintSystem> for SystemJson {
    fn from(sys: &ConstraintSystem) -> Self {
        Self {
            a: sys.a().row_vecs(),
            b: sys.b().to_vec(),
        }
    }
}

impl TryFrom<&SystemJson> for ConstraintSystem {
    type Error = CliError;

    fn try_from(j: &SystemJson) -> CliResult<Self> {
        let a = Matrix::from_rows(&j.a)?;
        Ok(ConstraintSystem::new(a, Vector::new(j.b.clone())?)?)
    }
}

pub const CHECKPOINT_FORMAT: &str = "caffnet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub widths: Vec<usize>,
    pub params: Vec<f64>,
}

impl From<&Mlp> for NetParams {
    fn from(net: &Mlp) -> Self {
        Self {
            widths: net.widths().to_vec(),
            params: net.params().to_vec(),
        }
    }
}

/// Layer widths and parameters of both networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub manifest_hash: String,
    pub scenario: String,
    pub method: String,
    pub seed: u64,
    pub f: NetParams,
    pub w: NetParams,
}

impl Checkpoint {
    pub fn new(model: &Model, manifest_hash: &str, scenario: &str, method: &str, seed: u64) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            manifest_hash: manifest_hash.into(),
            scenario: scenario.into(),
            method: method.into(),
            seed,
            f: (&model.f).into(),
            w: (&model.w).into(),
        }
    }

    pub fn model(&self) -> CliResult<Model> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(CliError::Format(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        Ok(Model {
            f: Mlp::from_params(&self.f.widths, self.f.params.clone())?,
            w: Mlp::from_params(&self.w.widths, self.w.params.clone())?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, -2.5, 1e-12, 6.02e23, 123456.789, 1.0 / 3.0, -0.0] {
            let s = format_f64(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
        }
        assert_eq!(format_f64(0.5), "0.5");
        assert_eq!(format_f64(2.5e-7), "2.5e-7");
    }

    #[test]
    fn csv_uses_lf_and_header() {
        let mut t = Table::new(["a", "b"]);
        t.push(vec![Cell::Int(1), Cell::Num(0.25)]);
        t.push(vec![Cell::Text("x,y".into()), Cell::Empty]);
        let s = String::from_utf8(t.to_csv().unwrap()).unwrap();
        assert_eq!(s, "a,b\n1,0.25\n\"x,y\",\n");
    }

    #[test]
    fn system_json_round_trip() {
        let text = r#"{"A": [[1.0, 0.0], [0.0, -1.0]], "b": [2.0, 0.5]}"#;
        let j: SystemJson = serde_json::from_str(text).unwrap();
        let sys = ConstraintSystem::try_from(&j).unwrap();
        assert_eq!(sys.m(), 2);
        assert_eq!(SystemJson::from(&sys), j);
        let bad: SystemJson = serde_json::from_str(r#"{"A": [[1.0], [0.0, 1.0]], "b": [1, 2]}"#).unwrap();
        assert!(ConstraintSystem::try_from(&bad).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = Model::new(2, 1, &[3], 4).unwrap();
        let ck = Checkpoint::new(&model, "abc", "piecewise", "caffnet", 4);
        let text = serde_json::to_string(&ck).unwrap();
        let back: Checkpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(back.model().unwrap(), model);
        let mut old = back.clone();
        old.version = 0;
        assert!(old.model().is_err());
    }
}
