use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_poet");

fn poet(args: &[&str], envs: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env_remove("POET_OUTPUT_ROOT");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("poet binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SMALL_TRAIN: &str = r#"
[train]
method = "poet"
lambda = 0.1
pool_size = 0

[train.backbone]
kind = "gcn"
layer_channels = [8, 8, 8]
embed_dim = 8

[train.pretrain]
epochs = 2
lr = 0.1
batch = 4

[train.base]
epochs = 1
lr = 0.1
batch = 4

[train.session]
epochs = 2
lr = 0.1
batch = 6
"#;

/// A small synthetic experiment: 6 classes, 2 base + 2 sessions of 2-way 3-shot.
fn small_config(dir: &Path, seeds: &str) -> PathBuf {
    let text = format!(
        r#"seeds = [{seeds}]

[data.synthetic]
topology = "chain"
joints = 5
classes = 6
per_class_train = 8
per_class_test = 4
time_steps = 8
noise_sigma = 0.2
seed = 3

[protocol]
base_classes = 2
sessions = 2
ways = 2
shots = 3
{SMALL_TRAIN}"#
    );
    let path = dir.join("experiment.toml");
    fs::write(&path, text).unwrap();
    path
}

fn single_experiment(root: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_dir()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs[0].clone()
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(Result::unwrap).collect()
}

fn csv_header(path: &Path) -> Vec<String> {
    csv::Reader::from_path(path).unwrap().headers().unwrap().iter().map(String::from).collect()
}

/// Manifest lines except the header and wall-clock entries, then the tensor blobs.
fn checkpoint_without_time(path: &Path) -> (Vec<String>, Vec<u8>) {
    let bytes = fs::read(path).unwrap();
    let nl = bytes.iter().position(|&b| b == b'\n').unwrap() + 1;
    let len: usize = std::str::from_utf8(&bytes[..nl]).unwrap().trim().rsplit('=').next().unwrap().parse().unwrap();
    let manifest = std::str::from_utf8(&bytes[nl..nl + len]).unwrap();
    let lines = manifest.lines().filter(|l| !l.contains("wall_seconds")).map(String::from).collect();
    (lines, bytes[nl + len..].to_vec())
}

/// Metrics without the wall-clock column.
fn metrics_without_time(path: &Path) -> Vec<Vec<String>> {
    let header = csv_header(path);
    let skip = header.iter().position(|h| h == "wall_seconds").unwrap();
    csv_rows(path)
        .iter()
        .map(|r| r.iter().enumerate().filter(|(i, _)| *i != skip).map(|(_, v)| v.to_string()).collect())
        .collect()
}

#[test]
fn gen_data_is_deterministic_and_trainable() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let args = |out: &Path| {
        vec![
            "gen-data".to_string(),
            "--out".into(),
            out.display().to_string(),
            "--classes".into(),
            "6".into(),
            "--joints".into(),
            "22".into(),
            "--time-steps".into(),
            "8".into(),
            "--train-per-class".into(),
            "6".into(),
            "--test-per-class".into(),
            "3".into(),
            "--shots".into(),
            "2".into(),
            "--seed".into(),
            "9".into(),
        ]
    };
    for dir in [&a, &b] {
        let v = args(dir);
        ok(&poet(&v.iter().map(String::as_str).collect::<Vec<_>>(), &[]));
    }
    let mut names: Vec<String> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names.len(), 6 * 2 + 3);
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n} differs");
    }
    let protocol = fs::read_to_string(a.join("protocol.toml")).unwrap();
    assert!(protocol.contains("base_classes = 2"), "{protocol}");

    // The generated experiment trains as-is once shrunk to test size.
    let exp = fs::read_to_string(a.join("experiment.toml")).unwrap();
    let cut = exp.find("[train").unwrap();
    fs::write(a.join("experiment.toml"), format!("{}{SMALL_TRAIN}", &exp[..cut])).unwrap();
    let root = tmp.path().join("runs");
    ok(&poet(&["train", a.join("experiment.toml").to_str().unwrap(), "--output-dir", root.to_str().unwrap()], &[]));
    let exp_dir = single_experiment(&root);
    assert_eq!(csv_rows(&exp_dir.join("seed-0").join("metrics.csv")).len(), 3);
}

#[test]
fn two_seeds_produce_summary_with_mean_and_std() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "1, 2");
    let root = tmp.path().join("runs");
    ok(&poet(&["train", cfg.to_str().unwrap(), "--output-dir", root.to_str().unwrap()], &[]));
    let exp = single_experiment(&root);
    for seed in [1, 2] {
        let run = exp.join(format!("seed-{seed}"));
        for f in ["metrics.csv", "selections.csv", "trace.csv", "losses.csv", "per_class.csv", "confusion-s02.csv", "COMPLETE"] {
            assert!(run.join(f).is_file(), "missing {f}");
        }
        assert!(run.join("checkpoints").join("session-02.ckpt").is_file());
    }
    assert!(exp.join("config.toml").is_file());
    let summary = exp.join("summary.csv");
    let header = csv_header(&summary);
    for col in ["session", "seeds", "a_hm_mean", "a_hm_std", "old_mean", "new_std", "bwf_mean"] {
        assert!(header.iter().any(|h| h == col), "no {col} in {header:?}");
    }
    let rows = csv_rows(&summary);
    assert_eq!(rows.len(), 3);
    assert_eq!(&rows[2][header.iter().position(|h| h == "seeds").unwrap()], "2");

    // Mean and sample std agree with the per-seed tables.
    let new_of = |seed: u64| -> f64 {
        let p = exp.join(format!("seed-{seed}")).join("metrics.csv");
        let h = csv_header(&p);
        csv_rows(&p)[2][h.iter().position(|c| c == "new").unwrap()].parse().unwrap()
    };
    let (x, y) = (new_of(1), new_of(2));
    let mean: f64 = rows[2][header.iter().position(|h| h == "new_mean").unwrap()].parse().unwrap();
    let std: f64 = rows[2][header.iter().position(|h| h == "new_std").unwrap()].parse().unwrap();
    assert!((mean - (x + y) / 2.0).abs() < 1e-9);
    assert!((std - (x - y).abs() / 2f64.sqrt()).abs() < 1e-9);

    let root_summary = csv_rows(&root.join("summary.csv"));
    assert_eq!(root_summary.len(), 1);
    assert_eq!(&root_summary[0][2], "1 2");
}

#[test]
fn fe_and_poet_runs_land_in_separate_directories_and_summary_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "4");
    let root = tmp.path().join("runs");
    for m in ["poet", "fe"] {
        ok(&poet(&["train", cfg.to_str().unwrap(), "--output-dir", root.to_str().unwrap(), "--method", m], &[]));
    }
    let dirs = fs::read_dir(&root).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(dirs, 2);
    let rows = csv_rows(&root.join("summary.csv"));
    let mut methods: Vec<&str> = rows.iter().map(|r| r.get(1).unwrap()).collect();
    methods.sort();
    assert_eq!(methods, ["fe", "poet"]);
}

#[test]
fn stop_and_resume_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "7");
    let whole = tmp.path().join("whole");
    let split = tmp.path().join("split");
    ok(&poet(&["train", cfg.to_str().unwrap(), "--output-dir", whole.to_str().unwrap()], &[]));

    ok(&poet(&["train", cfg.to_str().unwrap(), "--output-dir", split.to_str().unwrap(), "--stop-after", "1"], &[]));
    let run = single_experiment(&split).join("seed-7");
    assert!(!run.join("COMPLETE").exists());
    assert_eq!(csv_rows(&run.join("metrics.csv")).len(), 2);

    let again = poet(&["train", cfg.to_str().unwrap(), "--output-dir", split.to_str().unwrap()], &[]);
    assert_eq!(again.status.code(), Some(2), "{}", stderr(&again));
    assert!(stderr(&again).contains("--resume"));

    ok(&poet(&["train", cfg.to_str().unwrap(), "--output-dir", split.to_str().unwrap(), "--resume"], &[]));
    let reference = single_experiment(&whole).join("seed-7");
    assert_eq!(metrics_without_time(&run.join("metrics.csv")), metrics_without_time(&reference.join("metrics.csv")));
    for f in ["selections.csv", "trace.csv", "losses.csv", "per_class.csv"] {
        assert_eq!(fs::read(run.join(f)).unwrap(), fs::read(reference.join(f)).unwrap(), "{f} differs");
    }
    for s in ["01", "02"] {
        let name = format!("checkpoints/session-{s}.ckpt");
        assert_eq!(checkpoint_without_time(&run.join(&name)), checkpoint_without_time(&reference.join(&name)), "{name}");
    }
}

#[test]
fn finished_runs_are_kept_unless_forced() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "0");
    let root = tmp.path().join("runs");
    ok(&poet(&["train", cfg.to_str().unwrap(), "--output-dir", root.to_str().unwrap()], &[]));
    let run = single_experiment(&root).join("seed-0");
    fs::write(run.join("marker"), "").unwrap();

    let skip = poet(&["train", cfg.to_str().unwrap(), "--output-dir", root.to_str().unwrap()], &[]);
    ok(&skip);
    assert!(stderr(&skip).contains("skipping"));
    assert!(run.join("marker").exists());

    ok(&poet(&["train", cfg.to_str().unwrap(), "--output-dir", root.to_str().unwrap(), "--force"], &[]));
    assert!(!run.join("marker").exists());
    assert_eq!(csv_rows(&run.join("metrics.csv")).len(), 3);
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "0");
    let text = fs::read_to_string(&cfg).unwrap().replace("lambda = 0.1", "lambda = \"high\"");
    fs::write(&cfg, text).unwrap();
    let out = poet(&["train", cfg.to_str().unwrap(), "--output-dir", tmp.path().join("r").to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("train.lambda"), "{}", stderr(&out));

    let cfg = small_config(tmp.path(), "0");
    let text = fs::read_to_string(&cfg).unwrap().replace("shots = 3", "shots = 30");
    fs::write(&cfg, text).unwrap();
    let out = poet(&["train", cfg.to_str().unwrap(), "--output-dir", tmp.path().join("r").to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("protocol."), "{}", stderr(&out));
}

#[test]
fn output_root_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "0");
    let env_root = tmp.path().join("from-env");
    ok(&poet(&["train", cfg.to_str().unwrap(), "--stop-after", "0"], &[("POET_OUTPUT_ROOT", &env_root)]));
    assert!(single_experiment(&env_root).join("seed-0").join("checkpoints").join("session-00.ckpt").is_file());
}

#[test]
fn eval_reproduces_the_logged_final_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "0");
    let root = tmp.path().join("runs");
    ok(&poet(&["train", cfg.to_str().unwrap(), "--output-dir", root.to_str().unwrap()], &[]));
    let run = single_experiment(&root).join("seed-0");
    let out_csv = tmp.path().join("eval.csv");
    let confusion = tmp.path().join("confusion.csv");
    ok(&poet(
        &["eval", run.to_str().unwrap(), "--out", out_csv.to_str().unwrap(), "--confusion", confusion.to_str().unwrap()],
        &[],
    ));
    let logged = metrics_without_time(&run.join("metrics.csv"));
    let evaluated = metrics_without_time(&out_csv);
    assert_eq!(evaluated[0], logged[2]);
    assert_eq!(fs::read(&confusion).unwrap(), fs::read(run.join("confusion-s02.csv")).unwrap());

    let missing = poet(&["eval", tmp.path().join("nowhere").to_str().unwrap()], &[]);
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn report_on_unsorted_run_is_diagonal() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "0");
    let text = fs::read_to_string(&cfg).unwrap().replace("method = \"poet\"", "method = \"poet\"\nsorting = false");
    fs::write(&cfg, text).unwrap();
    let root = tmp.path().join("runs");
    ok(&poet(&["train", cfg.to_str().unwrap(), "--output-dir", root.to_str().unwrap()], &[]));
    let exp = single_experiment(&root);
    ok(&poet(&["report", exp.to_str().unwrap()], &[]));
    let report = exp.join("seed-0").join("report");
    let text = fs::read_to_string(report.join("report.txt")).unwrap();
    assert!(text.contains("diagonal order"), "{text}");
    assert!(report.join("metrics.md").is_file());
    assert!(report.join("order-eval-s02.csv").is_file());
    let collapse = report.join("collapse.csv");
    let header = csv_header(&collapse);
    let diag = header.iter().position(|h| h == "diagonal").unwrap();
    let entropy = header.iter().position(|h| h == "mean_entropy_bits").unwrap();
    let rows = csv_rows(&collapse);
    assert!(!rows.is_empty());
    for r in &rows {
        assert_eq!(&r[diag], "true");
        assert_eq!(r[entropy].parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn report_without_selections_says_so() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "0");
    let root = tmp.path().join("runs");
    ok(&poet(&["train", cfg.to_str().unwrap(), "--output-dir", root.to_str().unwrap(), "--method", "fe"], &[]));
    let run = single_experiment(&root).join("seed-0");
    let out = poet(&["report", run.to_str().unwrap()], &[]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("no selection data"));
}

#[test]
fn report_names_missing_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = poet(&["report", tmp.path().to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr(&out);
    assert!(err.contains("metrics.csv") && err.contains("selections.csv"), "{err}");
}
