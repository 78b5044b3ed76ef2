use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use poet_core::codebook::{collapse_diagnostics, CollapseReport};
use poet_core::metrics::{format_opt, format_pct};
use poet_core::trainer::{checkpoint_path, load_checkpoint};
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::logs::{read_rows, write_rows, MetricsRow, SelectionRow, METRICS, SELECTIONS};

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// A seed run directory, or an experiment directory holding `seed-*` runs.
    pub run: PathBuf,
    /// Where to write the report; defaults to `<run>/report`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct CollapseRow {
    session: usize,
    /// `train` or `eval`.
    phase: &'static str,
    pool_size: usize,
    selections: usize,
    unused_count: usize,
    unused: String,
    mean_entropy_bits: f64,
    diagonal: bool,
}

/// Findings of one run report, also written to `report.txt`.
#[derive(Debug, Default)]
pub struct ReportSummary {
    /// Mean position entropy of evaluation-time selections, per session.
    pub eval_entropy: Vec<(usize, f64)>,
    pub entropy_non_decreasing: bool,
    /// Sessions whose evaluation-time order matrix is diagonal.
    pub diagonal_sessions: Vec<usize>,
}

fn pool_size(run: &Path, session: usize, log: &[&[usize]], notes: &mut Vec<String>) -> usize {
    let ckpt = checkpoint_path(&run.join("checkpoints"), session);
    match load_checkpoint(&ckpt) {
        Ok(state) => {
            if let Some(cb) = state.codebook() {
                return cb.pool_size(state.store());
            }
        }
        Err(e) => notes.push(format!("session {session}: {e}; pool size inferred from the log")),
    }
    log.iter().flat_map(|s| s.iter()).max().map_or(0, |m| m + 1)
}

fn write_order_matrix(path: &Path, r: &CollapseReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::csv(path, e))?;
    let mut header = vec!["prompt".to_string()];
    header.extend((0..r.positions).map(|p| format!("pos{p}")));
    w.write_record(&header).map_err(|e| CliError::csv(path, e))?;
    for (i, row) in r.order.iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(u64::to_string));
        w.write_record(&rec).map_err(|e| CliError::csv(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn metrics_table(rows: &[MetricsRow]) -> String {
    let mut s = String::from("| session | old | new | avg | a_hm | bwf |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} |",
            r.session,
            format_opt(r.old),
            format_pct(r.new),
            format_pct(r.avg),
            format_opt(r.a_hm),
            format_opt(r.bwf)
        );
    }
    s
}

/// Report for a single run directory.
pub fn report_run(run: &Path, out: &Path) -> Result<ReportSummary> {
    let missing: Vec<&str> = [METRICS, SELECTIONS].into_iter().filter(|f| !run.join(f).is_file()).collect();
    if !missing.is_empty() {
        return Err(CliError::Data(format!(
            "{} is missing run logs: expected {METRICS} and {SELECTIONS}, not found: {}",
            run.display(),
            missing.join(", ")
        )));
    }
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let metrics: Vec<MetricsRow> = read_rows(&run.join(METRICS))?;
    let selections: Vec<SelectionRow> = read_rows(&run.join(SELECTIONS))?;

    let mut text = String::new();
    let mut notes = Vec::new();
    let table = metrics_table(&metrics);
    fs::write(out.join("metrics.md"), &table).map_err(|e| CliError::io(out.join("metrics.md"), e))?;
    let _ = writeln!(text, "run: {}\n\n{table}", run.display());

    let mut summary = ReportSummary {
        entropy_non_decreasing: true,
        ..ReportSummary::default()
    };
    let mut collapse = Vec::new();
    if selections.is_empty() {
        let _ = writeln!(text, "no selection data");
    } else {
        let mut by_session: BTreeMap<(usize, bool), Vec<Vec<usize>>> = BTreeMap::new();
        for s in &selections {
            by_session.entry((s.session, s.step.is_none())).or_default().push(s.indices()?);
        }
        for ((session, eval), orders) in &by_session {
            let log: Vec<&[usize]> = orders.iter().map(Vec::as_slice).collect();
            let m = pool_size(run, *session, &log, &mut notes);
            let r = collapse_diagnostics(log.iter().copied(), m)?;
            let phase = if *eval { "eval" } else { "train" };
            write_order_matrix(&out.join(format!("order-{phase}-s{session:02}.csv")), &r)?;
            if *eval {
                summary.eval_entropy.push((*session, r.mean_entropy()));
                if r.is_diagonal() {
                    summary.diagonal_sessions.push(*session);
                }
            }
            collapse.push(CollapseRow {
                session: *session,
                phase,
                pool_size: m,
                selections: r.selections,
                unused_count: r.unused.len(),
                unused: r.unused.iter().map(usize::to_string).collect::<Vec<_>>().join(" "),
                mean_entropy_bits: r.mean_entropy(),
                diagonal: r.is_diagonal(),
            });
        }
        let _ = writeln!(text, "prompt usage (eval = test-time selections):");
        for c in &collapse {
            let _ = writeln!(
                text,
                "  session {} {}: {} of {} prompts unused{}, mean position entropy {:.3} bits{}",
                c.session,
                c.phase,
                c.unused_count,
                c.pool_size,
                if c.unused.is_empty() { String::new() } else { format!(" ({})", c.unused) },
                c.mean_entropy_bits,
                if c.diagonal { ", diagonal order" } else { "" }
            );
        }
        for w in summary.eval_entropy.windows(2) {
            if w[1].1 < w[0].1 {
                summary.entropy_non_decreasing = false;
                let _ = writeln!(text, "note: mean entropy decreases from session {} ({:.3}) to {} ({:.3})", w[0].0, w[0].1, w[1].0, w[1].1);
            }
        }
        if summary.entropy_non_decreasing {
            let _ = writeln!(text, "entropy trend: non-decreasing across sessions");
        }
    }
    write_rows(&out.join("collapse.csv"), &collapse)?;
    for n in &notes {
        let _ = writeln!(text, "note: {n}");
    }
    fs::write(out.join("report.txt"), &text).map_err(|e| CliError::io(out.join("report.txt"), e))?;
    print!("{text}");
    Ok(summary)
}

pub fn run(args: &ReportArgs) -> Result<()> {
    if args.run.join(METRICS).is_file() || !args.run.is_dir() {
        let out = args.out.clone().unwrap_or_else(|| args.run.join("report"));
        report_run(&args.run, &out)?;
        return Ok(());
    }
    let mut seeds: Vec<PathBuf> = fs::read_dir(&args.run)
        .map_err(|e| CliError::io(&args.run, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("seed-")))
        .collect();
    seeds.sort();
    if seeds.is_empty() {
        return report_run(&args.run, &args.run.join("report")).map(|_| ());
    }
    for dir in seeds {
        let out = match &args.out {
            Some(o) => o.join(dir.file_name().expect("seed directory name")),
            None => dir.join("report"),
        };
        report_run(&dir, &out)?;
    }
    Ok(())
}
