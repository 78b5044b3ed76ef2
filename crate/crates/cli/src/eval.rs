use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use poet_core::data::{load_dataset_dir, SplitDataset};
use poet_core::metrics::{bwf, compute_accuracies, confusion_matrix, format_opt, format_pct, harmonic_mean, AccuracyHistory};
use poet_core::trainer::{latest_checkpoint, load_checkpoint, ContinualState};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::logs::{write_confusion, write_rows, MetricsRow};

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// A checkpoint file, or a run directory whose newest checkpoint is used.
    pub checkpoint: PathBuf,
    /// Dataset directory holding dataset.toml.
    #[arg(long, conflicts_with = "config")]
    pub data: Option<PathBuf>,
    /// Experiment config whose data source is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Write the metrics row here as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the confusion matrix here as CSV.
    #[arg(long)]
    pub confusion: Option<PathBuf>,
}

fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.is_file() {
        return Ok(path.to_path_buf());
    }
    let dir = path.join("checkpoints");
    let dir = if dir.is_dir() { dir } else { path.to_path_buf() };
    latest_checkpoint(&dir)?
        .map(|(_, p)| p)
        .ok_or_else(|| CliError::Data(format!("no session-NN.ckpt under {}", path.display())))
}

/// `<experiment>/config.toml` for a checkpoint at `<experiment>/seed-S/checkpoints/x.ckpt`.
fn archived_config(ckpt: &Path) -> Option<PathBuf> {
    let experiment = ckpt.parent()?.parent()?.parent()?;
    let cfg = experiment.join("config.toml");
    cfg.is_file().then_some(cfg)
}

fn dataset_for(args: &EvalArgs, ckpt: &Path) -> Result<SplitDataset> {
    if let Some(dir) = &args.data {
        return Ok(load_dataset_dir(dir, None)?.2);
    }
    let cfg = match &args.config {
        Some(c) => c.clone(),
        None => archived_config(ckpt).ok_or_else(|| {
            CliError::config("data", format!("{} is not inside a run directory; pass --data or --config", ckpt.display()))
        })?,
    };
    Ok(ExperimentConfig::load(&cfg)?.dataset()?.1)
}

/// Accuracies of `state` on the test clips of its seen classes.
pub fn evaluate(state: &ContinualState, ds: &SplitDataset) -> Result<(MetricsRow, Vec<usize>, Vec<Vec<u64>>)> {
    let started = Instant::now();
    if ds.time_steps != state.time_steps() || ds.joints != state.topology().joint_count() {
        return Err(CliError::Data(format!(
            "dataset clips are {}x{} but the model expects {}x{}",
            ds.time_steps,
            ds.joints,
            state.time_steps(),
            state.topology().joint_count()
        )));
    }
    let seen = state.seen_classes();
    let test: Vec<_> = ds.test_for(&seen).cloned().collect();
    let (preds, _) = state.predict(&test)?;
    let labels: Vec<usize> = test.iter().map(|x| x.class_id).collect();
    let t = state.session();
    let acc = compute_accuracies(&preds, &labels, &state.class_sessions(), t)?;
    // Forgetting is read from the accuracy history stored with the model.
    let history: &AccuracyHistory = state.history();
    let row = MetricsRow {
        session: t,
        old: acc.old,
        new: acc.new,
        avg: acc.avg,
        a_hm: acc.old.map(|o| harmonic_mean(o, acc.new)),
        bwf: if t >= 1 && history.tasks() > t { Some(bwf(history, t + 1)?) } else { None },
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    let confusion = confusion_matrix(&preds, &labels, &seen)?;
    Ok((row, seen, confusion))
}

pub fn run(args: &EvalArgs) -> Result<()> {
    let ckpt = resolve_checkpoint(&args.checkpoint)?;
    let state = load_checkpoint(&ckpt)?;
    let ds = dataset_for(args, &ckpt)?;
    let (row, classes, confusion) = evaluate(&state, &ds)?;
    println!(
        "session {}: avg {} old {} new {} a_hm {} bwf {}",
        row.session,
        format_pct(row.avg),
        format_opt(row.old),
        format_pct(row.new),
        format_opt(row.a_hm),
        format_opt(row.bwf)
    );
    if let Some(out) = &args.out {
        write_rows(out, &[row])?;
    }
    if let Some(path) = &args.confusion {
        write_confusion(path, &classes, &confusion)?;
    }
    Ok(())
}
