//! Metric records, the pinned CSV schema, and mean ± 2×SEM summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};

/// Bit-exact CSV header; every metrics file starts with this line.
pub const CSV_HEADER: &str =
    "env,algorithm,attacker_target,epsilon,replication,round,metric,value,poisoned_fraction";

/// One measured value of one algorithm under one attacker column.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub env: String,
    pub algorithm: String,
    pub attacker_target: String,
    pub epsilon: f64,
    pub replication: usize,
    /// Per-round curve point; `None` for end-of-run table cells.
    pub round: Option<usize>,
    pub metric: String,
    pub value: f64,
    pub poisoned_fraction: f64,
}

impl MetricRecord {
    fn to_csv_line(&self) -> String {
        let round = self.round.map(|r| r.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.env,
            self.algorithm,
            self.attacker_target,
            self.epsilon,
            self.replication,
            round,
            self.metric,
            self.value,
            self.poisoned_fraction
        )
    }

    fn from_csv_line(line: &str, lineno: usize) -> Result<Self> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(Error::Config(format!(
                "metrics line {lineno}: expected 9 fields, got {}",
                fields.len()
            )));
        }
        let bad = |what: &str| Error::Config(format!("metrics line {lineno}: bad {what}"));
        let round = if fields[5].is_empty() {
            None
        } else {
            Some(fields[5].parse().map_err(|_| bad("round"))?)
        };
        let value: f64 = fields[7].parse().map_err(|_| bad("value"))?;
        if !value.is_finite() {
            return Err(bad("value (non-finite)"));
        }
        Ok(Self {
            env: fields[0].to_string(),
            algorithm: fields[1].to_string(),
            attacker_target: fields[2].to_string(),
            epsilon: fields[3].parse().map_err(|_| bad("epsilon"))?,
            replication: fields[4].parse().map_err(|_| bad("replication"))?,
            round,
            metric: fields[6].to_string(),
            value,
            poisoned_fraction: fields[8].parse().map_err(|_| bad("poisoned_fraction"))?,
        })
    }
}

/// Serialize records with the pinned header. Deterministic given record order.
pub fn records_to_csv(records: &[MetricRecord]) -> String {
    let mut s = String::with_capacity(64 * (records.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.to_csv_line());
        s.push('\n');
    }
    s
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        _ => return Err(Error::Config("metrics file missing the pinned header".into())),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| MetricRecord::from_csv_line(l, i + 2))
        .collect()
}

/// Temp-then-rename write so partial output never masquerades as complete.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_records(path: &Path, records: &[MetricRecord]) -> Result<()> {
    write_atomic(path, &records_to_csv(records))
}

pub fn read_records(path: &Path) -> Result<Vec<MetricRecord>> {
    parse_csv(&std::fs::read_to_string(path)?)
}

/// Mean and 95% half-width (2×SEM) of one table cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryCell {
    pub mean: f64,
    /// 2 × sample std / √n; 0 for singleton cells (flagged).
    pub half_width: f64,
    pub n: usize,
    /// True when n = 1 and the half-width is not meaningful.
    pub singleton: bool,
}

/// Cell key: everything except replication and value.
pub type CellKey = (String, String, String, String, String);

fn cell_key(r: &MetricRecord) -> CellKey {
    (
        r.env.clone(),
        r.algorithm.clone(),
        r.attacker_target.clone(),
        format!("{}", r.epsilon),
        r.metric.clone(),
    )
}

/// Group end-of-run records (round = None) by cell and compute mean ± 2×SEM.
/// BTreeMap keys give a stable emission order; permutation-invariant in the
/// record order because each cell aggregates a plain sum.
pub fn summarize(records: &[MetricRecord]) -> BTreeMap<CellKey, SummaryCell> {
    let mut groups: BTreeMap<CellKey, Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.round.is_none()) {
        groups.entry(cell_key(r)).or_default().push(r.value);
    }
    groups
        .into_iter()
        .map(|(k, mut vals)| {
            // sort so mean/std are computed in a permutation-independent order
            vals.sort_by(|a, b| a.partial_cmp(b).expect("finite metric values"));
            let n = vals.len();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let half_width = if n < 2 {
                0.0
            } else {
                let var =
                    vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
                2.0 * var.sqrt() / (n as f64).sqrt()
            };
            (k, SummaryCell { mean, half_width, n, singleton: n < 2 })
        })
        .collect()
}

/// Summary table as CSV with a stable column order.
pub fn summary_to_csv(cells: &BTreeMap<CellKey, SummaryCell>) -> String {
    let mut s = String::from("env,algorithm,attacker_target,epsilon,metric,mean,half_width,n,singleton\n");
    for ((env, alg, target, eps, metric), cell) in cells {
        let _ = writeln!(
            s,
            "{env},{alg},{target},{eps},{metric},{},{},{},{}",
            cell.mean, cell.half_width, cell.n, cell.singleton
        );
    }
    s
}
