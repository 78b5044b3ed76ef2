//! CSV files of a run directory.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use poet_core::metrics::SessionReport;
use poet_core::trainer::{SessionLog, TraceStep};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const METRICS: &str = "metrics.csv";
pub const SELECTIONS: &str = "selections.csv";
pub const TRACE: &str = "trace.csv";
pub const LOSSES: &str = "losses.csv";
pub const PER_CLASS: &str = "per_class.csv";
pub const COMPLETE: &str = "COMPLETE";

const SELECTION_HEADER: [&str; 5] = ["run_id", "session", "step", "sample_index", "order"];
const TRACE_HEADER: [&str; 4] = ["session", "step", "event", "detail"];
const LOSS_HEADER: [&str; 4] = ["session", "epoch", "cross_entropy", "clustering"];
const PER_CLASS_HEADER: [&str; 3] = ["session", "class", "accuracy"];

/// One row of `metrics.csv`. Percentages are unrounded; empty cells mean undefined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub session: usize,
    pub old: Option<f64>,
    pub new: f64,
    pub avg: f64,
    pub a_hm: Option<f64>,
    pub bwf: Option<f64>,
    pub wall_seconds: f64,
}

impl From<&SessionReport> for MetricsRow {
    fn from(r: &SessionReport) -> Self {
        MetricsRow {
            session: r.session,
            old: r.old,
            new: r.new,
            avg: r.avg,
            a_hm: r.a_hm,
            bwf: r.bwf,
            wall_seconds: r.wall_seconds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub run_id: String,
    pub session: usize,
    /// Empty for evaluation-time selections.
    pub step: Option<usize>,
    pub sample_index: usize,
    /// Space-separated prompt indices in attachment order.
    pub order: String,
}

impl SelectionRow {
    pub fn indices(&self) -> Result<Vec<usize>> {
        self.order
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| CliError::Data(format!("bad prompt index `{v}` in selection log"))))
            .collect()
    }
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::csv(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::csv(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::csv(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| CliError::csv(path, e))).collect()
}

fn append_records(path: &Path, header: &[&str], records: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let fresh = !path.exists();
    let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| CliError::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        w.write_record(header).map_err(|e| CliError::csv(path, e))?;
    }
    for r in records {
        w.write_record(&r).map_err(|e| CliError::csv(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Drops every row of a session-keyed log whose session is after `last`.
fn truncate_after(path: &Path, last: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::csv(path, e))?;
    let header = r.headers().map_err(|e| CliError::csv(path, e))?.clone();
    let col = header.iter().position(|h| h == "session").ok_or_else(|| CliError::Data(format!("{} has no session column", path.display())))?;
    let mut keep = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::csv(path, e))?;
        let s: usize = rec[col].parse().map_err(|_| CliError::Data(format!("bad session `{}` in {}", &rec[col], path.display())))?;
        if s <= last {
            keep.push(rec);
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::csv(path, e))?;
    w.write_record(&header).map_err(|e| CliError::csv(path, e))?;
    for rec in keep {
        w.write_record(&rec).map_err(|e| CliError::csv(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Log files of one run.
pub struct RunLogs {
    pub dir: PathBuf,
    pub run_id: String,
}

fn event(what: &TraceStep) -> (&'static str, String) {
    match what {
        TraceStep::ExpandPool { added } => ("expand-pool", added.to_string()),
        TraceStep::ExpandClassifier { added } => ("expand-classifier", added.to_string()),
        TraceStep::Freeze { frozen } => ("freeze", frozen.iter().map(|g| g.as_str()).collect::<Vec<_>>().join(" ")),
        TraceStep::Query => ("query", String::new()),
        TraceStep::Sort => ("sort", String::new()),
        TraceStep::Gather => ("gather", String::new()),
        TraceStep::Attach => ("attach", String::new()),
        TraceStep::Predict => ("predict", String::new()),
        TraceStep::CrossEntropyLoss => ("cross-entropy-loss", String::new()),
        TraceStep::ClusteringLoss => ("clustering-loss", String::new()),
        TraceStep::Update => ("update", String::new()),
    }
}

fn opt(v: Option<usize>) -> String {
    v.map_or_else(String::new, |s| s.to_string())
}

impl RunLogs {
    pub fn new(dir: PathBuf, run_id: String) -> Self {
        RunLogs { dir, run_id }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Removes log rows of sessions after `last` (all rows when `None`).
    pub fn reset(&self, last: Option<usize>) -> Result<()> {
        for name in [SELECTIONS, TRACE, LOSSES, PER_CLASS] {
            let p = self.path(name);
            match last {
                Some(t) => truncate_after(&p, t)?,
                None if p.exists() => fs::remove_file(&p).map_err(|e| CliError::io(&p, e))?,
                None => {}
            }
        }
        Ok(())
    }

    /// Appends one session's logs and rewrites `metrics.csv` from the full report history.
    pub fn record(&self, reports: &[SessionReport], log: &SessionLog) -> Result<()> {
        let session = log.report.session;
        append_records(
            &self.path(SELECTIONS),
            &SELECTION_HEADER,
            log.selections.iter().map(|s| {
                vec![
                    self.run_id.clone(),
                    s.session.to_string(),
                    opt(s.step),
                    s.sample_index.to_string(),
                    s.order.iter().map(usize::to_string).collect::<Vec<_>>().join(" "),
                ]
            }),
        )?;
        append_records(
            &self.path(TRACE),
            &TRACE_HEADER,
            log.trace.iter().map(|e| {
                let (name, detail) = event(&e.what);
                vec![e.session.to_string(), opt(e.step), name.to_string(), detail]
            }),
        )?;
        append_records(
            &self.path(LOSSES),
            &LOSS_HEADER,
            log.losses
                .iter()
                .enumerate()
                .map(|(i, l)| vec![l.session.to_string(), i.to_string(), l.cross_entropy.to_string(), l.clustering.to_string()]),
        )?;
        append_records(
            &self.path(PER_CLASS),
            &PER_CLASS_HEADER,
            log.report.per_class.iter().map(|(c, a)| vec![session.to_string(), c.to_string(), a.to_string()]),
        )?;
        self.write_confusion(&log.report)?;
        let rows: Vec<MetricsRow> = reports.iter().map(MetricsRow::from).collect();
        write_rows(&self.path(METRICS), &rows)
    }

    fn write_confusion(&self, r: &SessionReport) -> Result<()> {
        write_confusion(&self.path(&format!("confusion-s{:02}.csv", r.session)), &r.classes, &r.confusion)
    }
}

/// Square count grid, rows = true class, columns = predicted class.
pub fn write_confusion(path: &Path, classes: &[usize], matrix: &[Vec<u64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::csv(path, e))?;
    let mut header = vec!["true\\predicted".to_string()];
    header.extend(classes.iter().map(usize::to_string));
    w.write_record(&header).map_err(|e| CliError::csv(path, e))?;
    for (c, row) in classes.iter().zip(matrix) {
        let mut rec = vec![c.to_string()];
        rec.extend(row.iter().map(u64::to_string));
        w.write_record(&rec).map_err(|e| CliError::csv(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}
