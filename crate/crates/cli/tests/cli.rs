//! End-to-end tests of the `patchlab` binary on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use patchlab::attack::{default_sticker_mask, load_patch, mask_sha256};
use patchlab::detector::{encode_weights, load_weights, DEFAULT_THRESHOLD};
use patchlab::eval::evaluate_samples;
use patchlab::scenegen::load_dataset;
use patchlab::seed::sha256_hex;
use patchlab_cli::{exit, Experiment, ExperimentConfig, TrainSummary};
use serde_json::Value;

/// A scratch directory holding one config file.
struct Sandbox {
    dir: tempfile::TempDir,
}

fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.output_dir = PathBuf::from("out");
    c.dataset.n_train = 24;
    c.dataset.n_holdout = 12;
    c.training.a.epochs = 1;
    c.training.b.epochs = 1;
    c.attack.steps = 4;
    c.attack.batch_transforms = 2;
    c.attack.early_stop = None;
    c.evaluation.grid.scales = vec![0.5];
    c.evaluation.grid.rotations = vec![0.0];
    c.evaluation.grid.placements = vec![[0.5, 0.5], [0.1, 0.1]];
    c.evaluation.grid.photometric_samples = 1;
    c.evaluation.driveby.n_frames = 4;
    c.evaluation.contact_sheet_frames = 2;
    c
}

impl Sandbox {
    fn new(config: &ExperimentConfig) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("config.json"), serde_json::to_string_pretty(config).unwrap()).unwrap();
        Self { dir }
    }

    fn config_path(&self) -> PathBuf {
        self.dir.path().join("config.json")
    }

    fn experiment(&self) -> Experiment {
        Experiment::load(&self.config_path()).unwrap()
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_patchlab"))
            .arg("--config")
            .arg(self.config_path())
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn shipped_config_matches_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json");
    let shipped: ExperimentConfig = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(shipped, ExperimentConfig::default());
    shipped.validate().unwrap();
}

#[test]
fn invalid_config_exits_with_config_code() {
    let mut c = tiny_config();
    c.attack.steps = 0;
    let sb = Sandbox::new(&c);
    let out = sb.run(&["gen-data"]);
    assert_eq!(code(&out), exit::CONFIG);
    assert!(String::from_utf8_lossy(&out.stderr).contains("attack.steps"));

    fs::write(sb.config_path(), r#"{"master_seed": 1, "output_dir": "x", "surprise": true}"#).unwrap();
    assert_eq!(code(&sb.run(&["gen-data"])), exit::CONFIG);
}

#[test]
fn missing_inputs_exit_with_missing_code() {
    let sb = Sandbox::new(&tiny_config());
    assert_eq!(code(&sb.run(&["train", "--arch", "a"])), exit::MISSING);
    let out = Command::new(env!("CARGO_BIN_EXE_patchlab"))
        .args(["--config", "/nonexistent/config.json", "gen-data"])
        .output()
        .unwrap();
    assert_eq!(code(&out), exit::MISSING);
}

#[test]
fn dataset_index_is_deterministic() {
    let a = Sandbox::new(&tiny_config());
    let b = Sandbox::new(&tiny_config());
    a.ok(&["gen-data"]);
    b.ok(&["gen-data"]);
    for split in ["train", "holdout"] {
        let ia = fs::read(a.experiment().dataset_dir(split).join("index.json")).unwrap();
        let ib = fs::read(b.experiment().dataset_dir(split).join("index.json")).unwrap();
        assert_eq!(ia, ib, "{split} index differs");
    }
    let mut other = tiny_config();
    other.master_seed += 1;
    let c = Sandbox::new(&other);
    c.ok(&["gen-data"]);
    let ia = fs::read(a.experiment().dataset_dir("train").join("index.json")).unwrap();
    let ic = fs::read(c.experiment().dataset_dir("train").join("index.json")).unwrap();
    assert_ne!(ia, ic);
}

#[test]
fn pipeline_artifacts_and_guards() {
    let sb = Sandbox::new(&tiny_config());
    let exp = sb.experiment();
    sb.ok(&["gen-data"]);
    sb.ok(&["train", "--arch", "a"]);
    sb.ok(&["train", "--arch", "b"]);

    // Weights survive a round trip through disk, and the logged held-out
    // rate matches an independent evaluation of the stored file.
    let wpath = exp.weights_path(patchlab_cli::ArchChoice::A);
    let bytes = fs::read(&wpath).unwrap();
    let (params, header, hash) = load_weights(&wpath).unwrap();
    assert_eq!(encode_weights(&params, header.config_hash.as_deref()), bytes);
    assert_eq!(hash, sha256_hex(&bytes));
    let summary: TrainSummary = serde_json::from_value(read_json(&exp.training_log_path(patchlab_cli::ArchChoice::A))).unwrap();
    assert_eq!(summary.weights_sha256, hash);
    let (_, holdout) = load_dataset::<f32>(&exp.dataset_dir("holdout")).unwrap();
    assert_eq!(summary.holdout_detection_rate, evaluate_samples(&params, &holdout, DEFAULT_THRESHOLD).unwrap());

    // Sticker attack: one trace row per step, mask hash of the default sticker.
    sb.ok(&["attack", "--mode", "disappearance", "--mask", "sticker"]);
    let sticker = exp.patch_dir("sticker-disappearance");
    let trace = fs::read_to_string(sticker.join("loss_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 4);
    assert_eq!(trace.lines().next(), Some("step,mean_loss"));
    let manifest = read_json(&sticker.join("patch.json"));
    assert_eq!(manifest["mask_sha256"], mask_sha256(&default_sticker_mask()).unwrap());
    let (spec, _, _) = load_patch(&sticker).unwrap();
    assert_eq!(spec.mask, default_sticker_mask());

    // Whitebox evaluation on the source detector works; on another detector
    // it is refused, as is a "transfer" back onto the source.
    let sticker_arg = sticker.to_str().unwrap();
    sb.ok(&["eval", "--detector", "a", "--patch", sticker_arg]);
    assert_eq!(code(&sb.run(&["eval", "--detector", "b", "--patch", sticker_arg])), exit::GUARD);
    assert_eq!(code(&sb.run(&["transfer", "--detector", "a", "--patch", sticker_arg])), exit::GUARD);
    sb.ok(&["transfer", "--detector", "b", "--patch", sticker_arg]);

    let reports = exp.reports_dir();
    for name in ["eval-a-sticker-disappearance.json", "driveby-a-sticker-disappearance.json", "transfer-b-sticker-disappearance.json"] {
        assert!(reports.join(name).is_file(), "{name} missing");
    }
    let table = sb.ok(&[
        "report",
        reports.join("eval-a-sticker-disappearance.json").to_str().unwrap(),
        reports.join("transfer-b-sticker-disappearance.json").to_str().unwrap(),
    ]);
    assert!(table.contains("off-center"), "{table}");
}

#[test]
fn reports_from_different_grids_are_refused() {
    let sb = Sandbox::new(&tiny_config());
    sb.ok(&["gen-data"]);
    sb.ok(&["train", "--arch", "a"]);
    sb.ok(&["eval", "--detector", "a"]);
    let exp = sb.experiment();
    let clean = exp.reports_dir().join("eval-a-clean.json");
    let mut other = read_json(&clean);
    other["grid"]["photometric_samples"] = Value::from(2);
    let other_path = exp.reports_dir().join("eval-other.json");
    fs::write(&other_path, serde_json::to_string(&other).unwrap()).unwrap();
    let out = sb.run(&["report", clean.to_str().unwrap(), other_path.to_str().unwrap()]);
    assert_eq!(code(&out), exit::GUARD, "{}", String::from_utf8_lossy(&out.stderr));
}
