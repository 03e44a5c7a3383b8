use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::ScenarioError;

/// A named table of plot-ready rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(name: &str, columns: &[S]) -> Self {
        Self {
            name: name.into(),
            columns: columns.iter().map(|c| c.as_ref().to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Value>) {
        assert_eq!(row.len(), self.columns.len(), "row width for table {}", self.name);
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Rows as JSON objects keyed by column name.
    pub fn records(&self) -> Vec<Value> {
        self.rows
            .iter()
            .map(|r| {
                let m: Map<String, Value> = self.columns.iter().cloned().zip(r.iter().cloned()).collect();
                Value::Object(m)
            })
            .collect()
    }

    pub fn to_csv(&self) -> Result<String, ScenarioError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let out_err = |e: csv::Error| ScenarioError::Output {
            path: format!("{}.csv", self.name),
            msg: e.to_string(),
        };
        w.write_record(&self.columns).map_err(out_err)?;
        for row in &self.rows {
            w.write_record(row.iter().map(cell_text)).map_err(out_err)?;
        }
        let bytes = w.into_inner().map_err(|e| ScenarioError::Output {
            path: format!("{}.csv", self.name),
            msg: e.to_string(),
        })?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn cell_text(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Which file formats to write.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Emit {
    Json,
    Csv,
    Both,
}

impl Emit {
    pub fn json(self) -> bool {
        matches!(self, Self::Json | Self::Both)
    }

    pub fn csv(self) -> bool {
        matches!(self, Self::Csv | Self::Both)
    }
}

impl FromStr for Emit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "both" => Ok(Self::Both),
            _ => Err(format!("unknown emit format `{s}` (expected json, csv or both)")),
        }
    }
}

/// A sub-run that failed; the rest of the scenario still completes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub label: String,
    pub seed: Option<u64>,
    pub error: String,
}

/// Everything a scenario produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub kind: String,
    pub name: String,
    pub seeds: Vec<u64>,
    pub failures: Vec<Failure>,
    /// Scenario-specific headline values.
    pub headline: Map<String, Value>,
    pub tables: Vec<Table>,
}

impl Report {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    fn summary_json(&self) -> Value {
        serde_json::json!({
            "kind": self.kind,
            "name": self.name,
            "seeds": self.seeds,
            "failures": self.failures,
            "headline": self.headline,
            "summary": self.table("summary").map(Table::records).unwrap_or_default(),
        })
    }

    /// Writes `summary.json` plus every table in the chosen formats and
    /// returns the paths written.
    pub fn write(&self, dir: &Path, emit: Emit) -> Result<Vec<PathBuf>, ScenarioError> {
        let io = |p: &Path, e: std::io::Error| ScenarioError::Output {
            path: p.display().to_string(),
            msg: e.to_string(),
        };
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let mut written = Vec::new();
        let mut put = |path: PathBuf, body: String| -> Result<(), ScenarioError> {
            fs::write(&path, body).map_err(|e| io(&path, e))?;
            written.push(path);
            Ok(())
        };
        put(dir.join("summary.json"), pretty(&self.summary_json()))?;
        for t in &self.tables {
            if emit.csv() {
                put(dir.join(format!("{}.csv", t.name)), t.to_csv()?)?;
            }
            if emit.json() {
                put(dir.join(format!("{}.json", t.name)), pretty(&Value::Array(t.records())))?;
            }
        }
        Ok(written)
    }
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json values serialize");
    s.push('\n');
    s
}
