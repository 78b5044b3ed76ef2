use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use poet_core::data::{make_protocol, SkeletonTopology, SplitDataset};
use poet_core::trainer::{latest_checkpoint, run_protocol_with, Method, RunOptions};
use serde::{Deserialize, Serialize};

use crate::config::{prefixed, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::logs::{read_rows, write_rows, MetricsRow, RunLogs, COMPLETE, METRICS};

pub const OUTPUT_ROOT_ENV: &str = "POET_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MethodArg {
    Poet,
    Ft,
    Fe,
    FeFrozen,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Poet => Method::Poet,
            MethodArg::Ft => Method::Ft,
            MethodArg::Fe => Method::Fe,
            MethodArg::FeFrozen => Method::FeFrozen,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Experiment config (TOML).
    pub config: PathBuf,
    /// Output root; overrides the config and the POET_OUTPUT_ROOT variable.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Overrides `train.method`.
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// Overrides `seeds`, e.g. `--seeds 0,1,2`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Continue unfinished runs from their newest checkpoint.
    #[arg(long)]
    pub resume: bool,
    /// Delete and redo runs that already exist.
    #[arg(long, conflicts_with = "resume")]
    pub force: bool,
    /// Stop each run after this session, leaving it resumable.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

/// Output root: flag, then config, then environment, then `./runs`.
pub fn output_root(flag: Option<&Path>, config: Option<&Path>) -> PathBuf {
    flag.or(config)
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn seed_dir(experiment: &Path, seed: u64) -> PathBuf {
    experiment.join(format!("seed-{seed}"))
}

/// Mean and sample standard deviation per session across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub session: usize,
    pub seeds: usize,
    pub old_mean: Option<f64>,
    pub old_std: Option<f64>,
    pub new_mean: f64,
    pub new_std: f64,
    pub avg_mean: f64,
    pub avg_std: f64,
    pub a_hm_mean: Option<f64>,
    pub a_hm_std: Option<f64>,
    pub bwf_mean: Option<f64>,
    pub bwf_std: Option<f64>,
}

/// Final-session summary of one configuration in the output root's `summary.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigSummaryRow {
    pub config_hash: String,
    pub method: String,
    pub seed_list: String,
    pub session: usize,
    pub seeds: usize,
    pub old_mean: Option<f64>,
    pub old_std: Option<f64>,
    pub new_mean: f64,
    pub new_std: f64,
    pub avg_mean: f64,
    pub avg_std: f64,
    pub a_hm_mean: Option<f64>,
    pub a_hm_std: Option<f64>,
    pub bwf_mean: Option<f64>,
    pub bwf_std: Option<f64>,
}

impl ConfigSummaryRow {
    fn new(config_hash: String, method: String, seed_list: String, s: &SummaryRow) -> Self {
        ConfigSummaryRow {
            config_hash,
            method,
            seed_list,
            session: s.session,
            seeds: s.seeds,
            old_mean: s.old_mean,
            old_std: s.old_std,
            new_mean: s.new_mean,
            new_std: s.new_std,
            avg_mean: s.avg_mean,
            avg_std: s.avg_std,
            a_hm_mean: s.a_hm_mean,
            a_hm_std: s.a_hm_std,
            bwf_mean: s.bwf_mean,
            bwf_std: s.bwf_std,
        }
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

fn opt_mean_std(values: Vec<Option<f64>>) -> (Option<f64>, Option<f64>) {
    let present: Vec<f64> = values.into_iter().flatten().collect();
    if present.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&present);
        (Some(m), Some(s))
    }
}

/// Aggregates per-seed metric tables that cover the same sessions.
pub fn summarize(runs: &[Vec<MetricsRow>]) -> Result<Vec<SummaryRow>> {
    let sessions = runs.first().map_or(0, Vec::len);
    if runs.iter().any(|r| r.len() != sessions) {
        return Err(CliError::Data("runs of one configuration report different session counts".into()));
    }
    (0..sessions)
        .map(|t| {
            let col = |f: fn(&MetricsRow) -> f64| runs.iter().map(|r| f(&r[t])).collect::<Vec<_>>();
            let ocol = |f: fn(&MetricsRow) -> Option<f64>| runs.iter().map(|r| f(&r[t])).collect::<Vec<_>>();
            let (old_mean, old_std) = opt_mean_std(ocol(|r| r.old));
            let (new_mean, new_std) = mean_std(&col(|r| r.new));
            let (avg_mean, avg_std) = mean_std(&col(|r| r.avg));
            let (a_hm_mean, a_hm_std) = opt_mean_std(ocol(|r| r.a_hm));
            let (bwf_mean, bwf_std) = opt_mean_std(ocol(|r| r.bwf));
            Ok(SummaryRow {
                session: runs[0][t].session,
                seeds: runs.len(),
                old_mean,
                old_std,
                new_mean,
                new_std,
                avg_mean,
                avg_std,
                a_hm_mean,
                a_hm_std,
                bwf_mean,
                bwf_std,
            })
        })
        .collect()
}

fn train_seed(cfg: &ExperimentConfig, hash: &str, topology: &SkeletonTopology, ds: &SplitDataset, seed: u64, dir: &Path, args: &TrainArgs) -> Result<bool> {
    let (train, spec) = cfg.for_seed(seed);
    let (protocol, subsets) = make_protocol(ds, &spec).map_err(|e| prefixed("protocol", e))?;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let checkpoints = dir.join("checkpoints");
    let logs = RunLogs::new(dir.to_path_buf(), format!("{hash}-seed{seed}"));
    let from = if args.resume { latest_checkpoint(&checkpoints)?.map(|(t, _)| t) } else { None };
    logs.reset(from)?;
    if let Some(t) = from {
        eprintln!("seed {seed}: resuming after session {t}");
    }
    let options = RunOptions {
        checkpoint_dir: Some(checkpoints),
        resume: args.resume,
        log_selections: true,
        trace: true,
    };
    let mut failure = None;
    let result = run_protocol_with(&train, topology, ds, &protocol, &subsets, &options, |state, log| {
        let r = &log.report;
        eprintln!(
            "seed {seed} session {}: avg {:.1} old {} new {:.1} a_hm {} ({:.1}s)",
            r.session,
            r.avg,
            poet_core::metrics::format_opt(r.old),
            r.new,
            poet_core::metrics::format_opt(r.a_hm),
            r.wall_seconds
        );
        if let Err(e) = logs.record(state.reports(), &log) {
            failure = Some(e);
            return Err(poet_core::Error::contract("run log could not be written"));
        }
        Ok(args.stop_after != Some(state.session()))
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let (state, _) = result?;
    if from.is_some() && state.reports().is_empty() {
        return Err(CliError::Data(format!("{} holds no session reports", dir.display())));
    }
    // On resume the callback only saw the remaining sessions; the checkpoint holds the rest.
    let rows: Vec<MetricsRow> = state.reports().iter().map(MetricsRow::from).collect();
    write_rows(&dir.join(METRICS), &rows)?;
    let done = state.session() == protocol.session_count();
    if done {
        let marker = dir.join(COMPLETE);
        fs::write(&marker, format!("{}\n", state.session())).map_err(|e| CliError::io(&marker, e))?;
    }
    Ok(done)
}

fn upsert_root_summary(root: &Path, row: ConfigSummaryRow) -> Result<()> {
    let path = root.join("summary.csv");
    let mut rows: Vec<ConfigSummaryRow> = if path.exists() { read_rows(&path)? } else { Vec::new() };
    match rows.iter_mut().find(|r| r.config_hash == row.config_hash && r.seed_list == row.seed_list) {
        Some(r) => *r = row,
        None => rows.push(row),
    }
    write_rows(&path, &rows)
}

pub fn run(args: &TrainArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(m) = args.method {
        cfg.train.method = m.into();
    }
    if let Some(seeds) = &args.seeds {
        cfg.seeds = seeds.clone();
    }
    cfg.validate()?;
    let (topology, ds) = cfg.dataset()?;
    cfg.train.validate_for(ds.time_steps).map_err(|e| prefixed("train", e))?;
    let (_, spec) = cfg.for_seed(cfg.seeds[0]);
    make_protocol(&ds, &spec).map_err(|e| prefixed("protocol", e))?;

    let root = output_root(args.output_dir.as_deref(), cfg.output_dir.as_deref());
    let hash = cfg.hash()?;
    let experiment = root.join(&hash);
    fs::create_dir_all(&experiment).map_err(|e| CliError::io(&experiment, e))?;
    let archived = experiment.join("config.toml");
    let mut resolved = cfg.clone();
    resolved.output_dir = None;
    fs::write(&archived, resolved.to_toml()?).map_err(|e| CliError::io(&archived, e))?;
    eprintln!("run directory {}", experiment.display());

    let mut all_done = true;
    for &seed in &cfg.seeds {
        let dir = seed_dir(&experiment, seed);
        if dir.join(COMPLETE).exists() && !args.force {
            eprintln!("seed {seed}: complete, skipping (use --force to redo)");
            continue;
        }
        if dir.exists() {
            if args.force {
                fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
            } else if !args.resume {
                return Err(CliError::config(
                    "resume",
                    format!("{} holds an unfinished run; pass --resume to continue it or --force to start over", dir.display()),
                ));
            }
        }
        all_done &= train_seed(&cfg, &hash, &topology, &ds, seed, &dir, args)?;
    }
    if !all_done {
        eprintln!("stopped early; rerun with --resume to finish");
        return Ok(());
    }

    let runs: Vec<Vec<MetricsRow>> = cfg.seeds.iter().map(|&s| read_rows(&seed_dir(&experiment, s).join(METRICS))).collect::<Result<_>>()?;
    let summary = summarize(&runs)?;
    write_rows(&experiment.join("summary.csv"), &summary)?;
    if let Some(last) = summary.last() {
        upsert_root_summary(
            &root,
            ConfigSummaryRow::new(
                hash.clone(),
                cfg.train.method.as_str().to_string(),
                cfg.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" "),
                last,
            ),
        )?;
        println!(
            "{hash}: final session {} over {} seed(s): a_hm {} ± {}, old {} ± {}, new {:.1} ± {:.1}",
            last.session,
            last.seeds,
            poet_core::metrics::format_opt(last.a_hm_mean),
            poet_core::metrics::format_opt(last.a_hm_std),
            poet_core::metrics::format_opt(last.old_mean),
            poet_core::metrics::format_opt(last.old_std),
            last.new_mean,
            last.new_std
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(session: usize, new: f64, old: Option<f64>) -> MetricsRow {
        MetricsRow {
            session,
            old,
            new,
            avg: new,
            a_hm: old.map(|o| poet_core::metrics::harmonic_mean(o, new)),
            bwf: None,
            wall_seconds: 1.0,
        }
    }

    #[test]
    fn summary_mean_and_sample_std() {
        let runs = vec![vec![row(0, 90.0, None), row(1, 40.0, Some(80.0))], vec![row(0, 94.0, None), row(1, 60.0, Some(70.0))]];
        let s = summarize(&runs).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].new_mean, s[0].old_mean), (92.0, None));
        assert!((s[0].new_std - 8f64.sqrt()).abs() < 1e-12);
        assert_eq!(s[1].old_mean, Some(75.0));
        assert_eq!(s[1].seeds, 2);
        let single = summarize(&runs[..1]).unwrap();
        assert_eq!(single[1].new_std, 0.0);
    }

    #[test]
    fn mismatched_session_counts_rejected() {
        let runs = vec![vec![row(0, 90.0, None)], vec![row(0, 90.0, None), row(1, 1.0, Some(1.0))]];
        assert!(matches!(summarize(&runs), Err(CliError::Data(_))));
    }
}
