use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use poet_core::data::{write_skeleton_file, ClassOrder, DatasetManifest, ManifestClass, ProtocolSpec, SkeletonFormat};
use poet_core::trainer::TrainConfig;

use crate::config::{prefixed, DataSource, ExperimentConfig, SyntheticData};
use crate::error::{CliError, Result};

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    /// Joint graph: chain, body or hand.
    #[arg(long, default_value = "chain")]
    pub topology: String,
    /// Joint count of a chain graph (25 or 22).
    #[arg(long, default_value_t = 25)]
    pub joints: usize,
    #[arg(long, default_value_t = 16)]
    pub time_steps: usize,
    #[arg(long, default_value_t = 30)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 20)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    /// Half-width of the per-sample phase offset, in radians.
    #[arg(long, default_value_t = 0.0)]
    pub jitter: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Incremental sessions; the remaining classes form the base session.
    #[arg(long, default_value_t = 2)]
    pub sessions: usize,
    #[arg(long, default_value_t = 2)]
    pub ways: usize,
    #[arg(long, default_value_t = 5)]
    pub shots: usize,
}

fn format_for(joints: usize) -> Result<SkeletonFormat> {
    [SkeletonFormat::NtuStyle, SkeletonFormat::ShrecStyle]
        .into_iter()
        .find(|f| f.joints() == joints)
        .ok_or_else(|| CliError::config("joints", format!("skeleton files hold 25 or 22 joints, not {joints}")))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Writes per-class skeleton files, `dataset.toml`, `protocol.toml` and a ready-to-run
/// `experiment.toml` into `args.out`.
pub fn run(args: &GenDataArgs) -> Result<()> {
    let synthetic = SyntheticData {
        topology: args.topology.clone(),
        joints: args.joints,
        classes: args.classes,
        per_class_train: args.train_per_class,
        per_class_test: args.test_per_class,
        time_steps: args.time_steps,
        noise_sigma: args.noise,
        phase_jitter: args.jitter,
        seed: args.seed,
    };
    let topology = synthetic.topology().map_err(|e| match e {
        CliError::Config { message, .. } => CliError::config("topology", message),
        other => other,
    })?;
    let format = format_for(topology.joint_count())?;
    let incremental = args.sessions * args.ways;
    if incremental >= args.classes {
        return Err(CliError::config(
            "sessions",
            format!("{} sessions of {} ways leave no base classes out of {}", args.sessions, args.ways, args.classes),
        ));
    }
    if args.sessions > 0 && (args.ways == 0 || args.shots == 0) {
        return Err(CliError::config("ways", "ways and shots must be at least 1"));
    }
    if args.sessions > 0 && args.shots > args.train_per_class {
        return Err(CliError::config("shots", format!("{} shots exceed {} training clips per class", args.shots, args.train_per_class)));
    }
    let ds = poet_core::data::synth_generate(&topology, &synthetic.params()).map_err(|e| match e {
        poet_core::Error::Config { key, message } => CliError::config(key.replace('_', "-"), message),
        other => other.into(),
    })?;

    fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    let mut classes = Vec::new();
    for c in ds.class_ids() {
        let train = PathBuf::from(format!("class-{c:03}-train.skel"));
        let test = PathBuf::from(format!("class-{c:03}-test.skel"));
        let pick = |pool: &[poet_core::data::SkeletonSequence]| pool.iter().filter(|s| s.class_id == c).cloned().collect::<Vec<_>>();
        write_skeleton_file(&args.out.join(&train), &pick(&ds.train))?;
        write_skeleton_file(&args.out.join(&test), &pick(&ds.test))?;
        classes.push(ManifestClass { id: c, train, test });
    }
    let manifest = DatasetManifest {
        format,
        topology: if args.topology == "chain" { "chain".into() } else { args.topology.clone() },
        frames: args.time_steps,
        classes,
    };
    let text = toml::to_string(&manifest).map_err(|e| CliError::Data(e.to_string()))?;
    write(&args.out.join("dataset.toml"), &text)?;

    let protocol = ProtocolSpec {
        base_classes: args.classes - incremental,
        sessions: args.sessions,
        ways: args.ways,
        shots: args.shots,
        class_order: ClassOrder::default(),
        seed: 0,
    };
    let text = toml::to_string(&protocol).map_err(|e| CliError::Data(e.to_string()))?;
    write(&args.out.join("protocol.toml"), &text)?;

    let experiment = ExperimentConfig {
        seeds: vec![0],
        output_dir: None,
        data: DataSource {
            dir: Some(PathBuf::from(".")),
            synthetic: None,
        },
        protocol,
        train: TrainConfig::default(),
    };
    experiment.train.validate_for(args.time_steps).map_err(|e| prefixed("train", e))?;
    write(&args.out.join("experiment.toml"), &experiment.to_toml()?)?;
    eprintln!(
        "wrote {} classes ({} base + {}x{}-way {}-shot) to {}",
        args.classes,
        args.classes - incremental,
        args.sessions,
        args.ways,
        args.shots,
        args.out.display()
    );
    Ok(())
}
