//! Line-delimited JSON metrics.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rpa_core::guardian::GuardianAction;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuardianRecord {
    pub action: Option<[f64; 3]>,
    pub reward: Option<f64>,
    pub lambda_delta: f64,
    pub lambda_sat: f64,
    pub beta: f64,
}

impl GuardianRecord {
    pub fn action(a: Option<GuardianAction>) -> Option<[f64; 3]> {
        a.map(|a| a.to_array())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// `train`, `val`, `test` or `final`.
    pub kind: String,
    pub step: usize,
    pub epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    pub ce: f64,
    pub ppl: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    pub tau_att: f64,
    pub mu_entropy: f64,
    pub sat_frac: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub context: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub guardian: Option<GuardianRecord>,
    pub swa_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chaos: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub swa_admitted: Option<bool>,
    /// Seconds since the run started; null in deterministic mode.
    pub wall_time: Option<f64>,
}

impl MetricsRecord {
    pub fn new(kind: &str, step: usize, epoch: usize, ce: f64) -> Self {
        Self {
            kind: kind.into(),
            step,
            epoch,
            ce,
            ppl: ce.exp(),
            ..Default::default()
        }
    }
}

/// Anything that accepts metric lines.
pub trait MetricsSink {
    fn header(&mut self, value: &serde_json::Value) -> Result<()>;
    fn record(&mut self, rec: &MetricsRecord) -> Result<()>;
}

/// Keeps every line in memory.
#[derive(Clone, Debug, Default)]
pub struct MemorySink {
    pub lines: Vec<String>,
}

impl MemorySink {
    pub fn records(&self) -> Vec<MetricsRecord> {
        self.lines
            .iter()
            .skip(1)
            .map(|l| serde_json::from_str(l).expect("own output parses"))
            .collect()
    }

    pub fn text(&self) -> String {
        let mut s = self.lines.join("\n");
        s.push('\n');
        s
    }
}

impl MetricsSink for MemorySink {
    fn header(&mut self, value: &serde_json::Value) -> Result<()> {
        self.lines.push(value.to_string());
        Ok(())
    }

    fn record(&mut self, rec: &MetricsRecord) -> Result<()> {
        self.lines.push(serde_json::to_string(rec).expect("record serializes"));
        Ok(())
    }
}

/// Discards everything.
#[derive(Clone, Copy, Debug, Default)]
pub struct NullSink;

impl MetricsSink for NullSink {
    fn header(&mut self, _: &serde_json::Value) -> Result<()> {
        Ok(())
    }

    fn record(&mut self, _: &MetricsRecord) -> Result<()> {
        Ok(())
    }
}

pub struct JsonlWriter {
    out: BufWriter<File>,
    path: std::path::PathBuf,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| LabError::io(path, e))?;
        Ok(Self {
            out: BufWriter::new(f),
            path: path.to_path_buf(),
        })
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}")
            .and_then(|_| self.out.flush())
            .map_err(|e| LabError::io(&self.path, e))
    }
}

impl MetricsSink for JsonlWriter {
    fn header(&mut self, value: &serde_json::Value) -> Result<()> {
        self.line(&value.to_string())
    }

    fn record(&mut self, rec: &MetricsRecord) -> Result<()> {
        self.line(&serde_json::to_string(rec).expect("record serializes"))
    }
}

/// Header value and records of a metrics file.
pub fn read_jsonl(path: &Path) -> Result<(serde_json::Value, Vec<MetricsRecord>)> {
    let f = File::open(path).map_err(|e| LabError::io(path, e))?;
    let mut lines = BufReader::new(f).lines();
    let parse_err = |i: usize, e: serde_json::Error| LabError::Format(format!("{}:{}: {e}", path.display(), i + 1));
    let header = match lines.next() {
        Some(l) => serde_json::from_str(&l.map_err(|e| LabError::io(path, e))?).map_err(|e| parse_err(0, e))?,
        None => return Err(LabError::Format(format!("{}: empty metrics file", path.display()))),
    };
    let mut recs = Vec::new();
    for (i, l) in lines.enumerate() {
        let l = l.map_err(|e| LabError::io(path, e))?;
        recs.push(serde_json::from_str(&l).map_err(|e| parse_err(i + 1, e))?);
    }
    Ok((header, recs))
}
