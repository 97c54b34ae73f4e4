use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use daod_cli::config::ExperimentConfig;
use daod_core::trainer::MethodPreset;

const TINY: &str = r#"
seeds = [0]

[dataset.synthetic]
image_size = 32
source_train = 16
target_train = 10
target_test = 6
target_train_labeled = 10
min_object_size = 8.0
max_object_size = 14.0

[base]
iterations = 8
eval_every = 4
total_batch = 4

[base.detector]
backbone_channels = [4, 6]
rpn_channels = 6
anchor_sizes = [8.0, 14.0]
rpn_samples = 24
roi_samples = 12
pre_nms_proposals = 40
train_proposals = 10
test_proposals = 10
roi_pool_size = 2
roi_hidden = 8
"#;

struct Env {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn env() -> Env {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("out");
    let config = dir.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    Env { _dir: dir, root, config }
}

fn daod(env: &Env, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_daod"))
        .arg("--config")
        .arg(&env.config)
        .args(args)
        .env("DAOD_OUTPUT_ROOT", &env.root)
        .env("RUST_LOG", "info")
        .output()
        .unwrap()
}

fn ok(env: &Env, args: &[&str]) -> Output {
    let out = daod(env, args);
    assert!(
        out.status.success(),
        "daod {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn out_dir(env: &Env) -> PathBuf {
    env.root.join("output")
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn png_count(dir: &Path) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count()
}

#[test]
fn generate_data_layout_and_force() {
    let a = env();
    ok(&a, &["generate-data"]);
    let data = out_dir(&a).join("data");
    for (split, n) in [("source_train", 16), ("target_train", 10), ("target_test", 6), ("target_train_labeled", 10)] {
        assert_eq!(png_count(&data.join(split)), n, "{split}");
        assert!(data.join(split).join("annotations.json").exists());
    }
    let first = read(&data.join("manifest.json"));

    let again = daod(&a, &["generate-data"]);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(&a, &["generate-data", "--force"]);
    assert_eq!(read(&data.join("manifest.json")), first);

    let b = env();
    ok(&b, &["generate-data"]);
    assert_eq!(read(&out_dir(&b).join("data/manifest.json")), first);
}

#[test]
fn dataset_read_from_disk_matches_memory() {
    let e = env();
    ok(&e, &["generate-data"]);
    let data = out_dir(&e).join("data");
    let from_disk = ExperimentConfig::load(
        Some(&e.config),
        &[format!("dataset.path=\"{}\"", data.display())],
    )
    .unwrap();
    let in_memory = ExperimentConfig::load(Some(&e.config), &[]).unwrap();
    let (_, m1) = daod_cli::load_pair(&from_disk).unwrap();
    let (_, m2) = daod_cli::load_pair(&in_memory).unwrap();
    assert_eq!(m1.content_hash, m2.content_hash);
}

#[test]
fn train_writes_artifacts_and_honours_overrides() {
    let e = env();
    ok(&e, &["train", "--preset", "source_only"]);
    let run = out_dir(&e).join("runs/source_only/seed0");
    let metrics = read(&run.join("metrics.csv"));
    assert!(metrics.lines().count() > 1);
    assert!(run.join("final_teacher.params").exists());
    assert!(run.join("config.toml").exists());

    ok(&e, &["--set", "train.target_fraction=0.25", "train", "--preset", "mean_teacher_base"]);
    let loss = read(&out_dir(&e).join("runs/mean_teacher_base/seed0/loss.csv"));
    let targets: Vec<&str> = loss.lines().filter(|l| l.contains(",batch_target,")).collect();
    assert_eq!(targets.len(), 8);
    assert!(targets.iter().all(|l| l.ends_with(",1")));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let full = env();
    ok(&full, &["train", "--preset", "aldi_pp"]);
    let part = env();
    let out = ok(&part, &["train", "--preset", "aldi_pp", "--stop-after", "3"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("interrupted"));
    ok(&part, &["train", "--preset", "aldi_pp", "--resume"]);
    for f in ["metrics.csv", "loss.csv", "summary.json"] {
        let a = read(&out_dir(&full).join("runs/aldi_pp/seed0").join(f));
        let b = read(&out_dir(&part).join("runs/aldi_pp/seed0").join(f));
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn config_errors_name_the_key() {
    let e = env();
    let out = daod(&e, &["--set", "base.detector.bogus=1", "train"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("base.detector.bogus"));

    let out = daod(&e, &["--set", "train.no_such_key=1", "train"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));

    let out = daod(&e, &["--set", "base.total_batch=1", "train"]);
    assert!(!out.status.success());
}

#[test]
fn config_round_trip() {
    let e = env();
    let cfg = ExperimentConfig::load(Some(&e.config), &["train.learning_rate=0.5".into()]).unwrap();
    let path = e.root.with_extension("toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    let again = ExperimentConfig::load(Some(&path), &[]).unwrap();
    assert_eq!(cfg, again);
    for p in MethodPreset::ALL {
        assert_eq!(cfg.resolve(p, 3).unwrap(), again.resolve(p, 3).unwrap());
    }
    assert_eq!(cfg.resolve(MethodPreset::AldiPp, 0).unwrap().learning_rate, 0.5);
}

#[test]
fn compare_reports_references_and_reuses_cache() {
    let e = env();
    let sets = ["--set", "compare.presets=[\"source_only\", \"oracle\"]", "--set", "seeds=[0, 1]"];
    ok(&e, &[&sets[..], &["compare"]].concat());
    let md = read(&out_dir(&e).join("compare.md"));
    assert!(md.contains("source_only (reference)"));
    assert!(md.contains("oracle (reference)"));
    let csv = read(&out_dir(&e).join("compare.csv"));
    assert_eq!(csv.lines().count(), 5);

    let second = ok(&e, &[&sets[..], &["compare"]].concat());
    let log = String::from_utf8_lossy(&second.stderr);
    assert_eq!(log.matches("reusing").count(), 4);
    assert!(!log.contains("training in"));
    assert_eq!(read(&out_dir(&e).join("compare.csv")), csv);

    // Every cached run directory reproduces its own config.
    for entry in fs::read_dir(out_dir(&e).join("cache")).unwrap() {
        let dir = entry.unwrap().path();
        let snap = ExperimentConfig::load(Some(&dir.join("config.toml")), &[]).unwrap();
        let cfg = snap.resolve(snap.preset, snap.seeds[0]).unwrap();
        let (pair, manifest) = daod_cli::load_pair(&snap).unwrap();
        let ws = daod_cli::Workspace::new(&snap, &pair, &manifest);
        assert_eq!(dir.file_name().unwrap().to_str().unwrap(), ws.config_hash(&cfg).unwrap());
    }
}

#[test]
fn compare_without_oracle_split_fails() {
    let e = env();
    let out = daod(
        &e,
        &["--set", "dataset.synthetic.target_train_labeled=0", "--set", "compare.presets=[\"oracle\"]", "compare"],
    );
    assert!(!out.status.success());
}

#[test]
fn ablate_sweeps_one_axis() {
    let e = env();
    ok(&e, &["ablate", "--axis", "distill_mode"]);
    let csv = read(&out_dir(&e).join("ablate_distill_mode.csv"));
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.contains("distill_mode=hard") && csv.contains("distill_mode=soft"));

    ok(&e, &["ablate", "--axis", "batch_ratio", "--values", "0.5,1.0"]);
    let md = read(&out_dir(&e).join("ablate_batch_ratio.md"));
    assert!(md.contains("batch_ratio=0.5") && md.contains("batch_ratio=1.0"));
}

#[test]
fn burnin_and_eval_commands() {
    let e = env();
    let out = ok(&e, &["burnin", "--preset", "mean_teacher_base"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("iteration 4"));
    let params = out_dir(&e).join("burnin/mean_teacher_base/seed0/ema.params");
    let out = ok(&e, &["eval", "--params", params.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("AP50"));
    assert!(params.with_extension("eval.json").exists());
}
