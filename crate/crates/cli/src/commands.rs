use std::fs;
use std::path::{Path, PathBuf};

use patchlab::attack::{
    default_sticker_mask, load_patch, optimize_patch_logged, poster_mask, save_patch, AttackMode, PatchManifest, PatchSpec,
};
use patchlab::detector::{load_weights, save_weights, train_logged, DetectorParams};
use patchlab::eval::{
    contact_sheet, eval_pose_grid, eval_transfer, evaluate_samples, report_frames, simulate_driveby, summarize,
    DriveByReport, EvalReport, EvalTarget, Summary,
};
use patchlab::scenegen::{generate_dataset, load_dataset, render_canonical_sign, save_dataset, CanonicalTexture, SceneSample};
use patchlab::detector::DEFAULT_THRESHOLD;
use serde::{Deserialize, Serialize};

use crate::config::{ArchChoice, Experiment, Translation};
use crate::error::{CliError, CliResult};

fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn require(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing {
            path: path.to_path_buf(),
            what: what.to_string(),
        })
    }
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec_pretty(v).expect("report types serialize")
}

/// Progress lines go to stderr so stdout carries only results.
fn note(msg: impl AsRef<str>) {
    eprintln!("{}", msg.as_ref());
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenDataSummary {
    pub train_dir: PathBuf,
    pub holdout_dir: PathBuf,
    pub n_train: usize,
    pub n_holdout: usize,
    pub train_seed: u64,
    pub holdout_seed: u64,
}

/// Generates and writes the training and held-out splits.
pub fn cmd_gen_data(exp: &Experiment) -> CliResult<GenDataSummary> {
    let cfg = &exp.config;
    let mut out = Vec::new();
    for (split, n) in [("train", cfg.dataset.n_train), ("holdout", cfg.dataset.n_holdout)] {
        let seed = cfg.dataset_seed(split);
        let samples = generate_dataset::<f32>(n, &cfg.pose_distribution, cfg.dataset.background_pool, seed)?;
        let dir = exp.dataset_dir(split);
        save_dataset(&dir, &samples, seed, Some(&exp.hash)).map_err(|e| match e {
            patchlab::Error::Io(io) => CliError::io(&dir, io),
            other => other.into(),
        })?;
        out.push((dir, n, seed));
    }
    let (holdout, train) = (out.pop().unwrap(), out.pop().unwrap());
    Ok(GenDataSummary {
        train_dir: train.0,
        holdout_dir: holdout.0,
        n_train: train.1,
        n_holdout: holdout.1,
        train_seed: train.2,
        holdout_seed: holdout.2,
    })
}

fn load_split(exp: &Experiment, split: &str) -> CliResult<Vec<SceneSample<f32>>> {
    let dir = exp.dataset_dir(split);
    require(&dir.join("index.json"), &format!("{split} dataset (run gen-data first)"))?;
    let (index, samples) = load_dataset::<f32>(&dir)?;
    if index.config_hash.as_deref() != Some(exp.hash.as_str()) {
        return Err(CliError::Guard(format!("{} was generated from a different config", dir.display())));
    }
    Ok(samples)
}

/// Training record written next to the weight file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub arch: String,
    /// Weight file name, relative to this record.
    pub weights: PathBuf,
    pub weights_sha256: String,
    pub config_hash: String,
    pub training_seed: u64,
    pub epoch_losses: Vec<f64>,
    pub holdout_detection_rate: f64,
    pub threshold: f64,
}

pub fn cmd_train(exp: &Experiment, which: ArchChoice) -> CliResult<TrainSummary> {
    let train = load_split(exp, "train")?;
    let holdout = load_split(exp, "holdout")?;
    let hyper = exp.config.train_hyper(which);
    let arch = exp.config.arch(which);
    let mut losses = Vec::with_capacity(hyper.epochs);
    let params = train_logged(&train, arch, &hyper, |epoch, loss| {
        losses.push(loss);
        if epoch % 5 == 4 || epoch + 1 == hyper.epochs {
            note(format!("[train {}] epoch {:>3} loss {loss:.5}", arch.name, epoch + 1));
        }
    })?;
    let path = exp.weights_path(which);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let sha = save_weights(&path, &params, Some(&exp.hash))?;
    // Score the weights as stored, so the number matches later evaluations.
    let (stored, _, _) = load_weights(&path)?;
    let rate = evaluate_samples(&stored, &holdout, DEFAULT_THRESHOLD)?;
    let summary = TrainSummary {
        arch: arch.name.clone(),
        weights: path.file_name().map(PathBuf::from).unwrap_or_default(),
        weights_sha256: sha,
        config_hash: exp.hash.clone(),
        training_seed: hyper.seed,
        epoch_losses: losses,
        holdout_detection_rate: rate,
        threshold: DEFAULT_THRESHOLD,
    };
    write(&exp.training_log_path(which), &to_json(&summary))?;
    Ok(summary)
}

/// Loads a trained detector and its content hash.
pub fn load_detector(exp: &Experiment, which: ArchChoice) -> CliResult<(DetectorParams<f32>, String)> {
    let path = exp.weights_path(which);
    require(&path, &format!("weights for detector {} (run train first)", which.label()))?;
    let (params, header, hash) = load_weights(&path)?;
    if header.config_hash.as_deref() != Some(exp.hash.as_str()) {
        return Err(CliError::Guard(format!("{} was trained from a different config", path.display())));
    }
    Ok((params, hash))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum MaskChoice {
    Poster,
    Sticker,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ModeChoice {
    Disappearance,
    Mislabel,
}

/// Directory name of an attack run, e.g. `poster-disappearance` or
/// `sticker-mislabel-pinned`.
pub fn attack_name(mode: ModeChoice, mask: MaskChoice, translation: Translation) -> String {
    let m = match mode {
        ModeChoice::Disappearance => "disappearance",
        ModeChoice::Mislabel => "mislabel",
    };
    let k = match mask {
        MaskChoice::Poster => "poster",
        MaskChoice::Sticker => "sticker",
    };
    match translation {
        Translation::Sampled => format!("{k}-{m}"),
        Translation::Pinned => format!("{k}-{m}-pinned"),
    }
}

pub fn victim_texture(exp: &Experiment) -> CliResult<CanonicalTexture<f32>> {
    Ok(render_canonical_sign(exp.config.attack.victim_class.id(), exp.config.texture_seed())?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub name: String,
    pub dir: PathBuf,
    pub patch_sha256: String,
    pub source_detector: String,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub stopped_early: bool,
    pub manifest: PatchManifest,
}

pub fn cmd_attack(exp: &Experiment, mode: ModeChoice, mask: MaskChoice, translation: Translation) -> CliResult<AttackSummary> {
    let (detector, det_hash) = load_detector(exp, ArchChoice::A)?;
    let texture = victim_texture(exp)?;
    let a = &exp.config.attack;
    let m = match mask {
        MaskChoice::Poster => poster_mask(a.victim_class),
        MaskChoice::Sticker => {
            if a.victim_class != patchlab::scenegen::SignClass::Stop {
                return Err(CliError::Config("attack: the sticker mask is defined for the stop sign only".into()));
            }
            default_sticker_mask()
        }
    };
    let (mode_v, target) = match mode {
        ModeChoice::Disappearance => (AttackMode::Disappearance, None),
        ModeChoice::Mislabel => (AttackMode::Mislabel, Some(a.target_class)),
    };
    let mut spec = PatchSpec::<f32>::new(m, mode_v, a.victim_class, target, a.lambda_reg, a.norm)?;
    spec.source_detector = Some(det_hash.clone());
    let name = attack_name(mode, mask, translation);
    let config = exp.config.attack_config(&name, translation);
    let outcome = optimize_patch_logged(&detector, &texture, &config, spec, |step, loss| {
        if step % 50 == 0 {
            note(format!("[attack {name}] step {step:>4} loss {loss:.5}"));
        }
    })?;
    let dir = exp.patch_dir(&name);
    let (manifest, sha) = save_patch(&dir, &outcome.spec, &outcome.loss_trace, Some(&exp.hash))?;
    Ok(AttackSummary {
        name,
        dir,
        patch_sha256: sha,
        source_detector: det_hash,
        initial_loss: outcome.loss_trace.first().copied().unwrap_or(f64::NAN),
        final_loss: outcome.loss_trace.last().copied().unwrap_or(f64::NAN),
        steps: outcome.loss_trace.len(),
        stopped_early: outcome.stopped_early,
        manifest,
    })
}

/// A patch artifact read back from disk.
pub struct LoadedPatch {
    pub name: String,
    pub spec: PatchSpec<f32>,
    pub manifest: PatchManifest,
    pub hash: String,
}

pub fn load_patch_dir(exp: &Experiment, dir: &Path) -> CliResult<LoadedPatch> {
    require(&dir.join(patchlab::attack::MANIFEST_FILE), "patch artifact (run attack first)")?;
    let (spec, manifest, hash) = load_patch(dir)?;
    if manifest.config_hash.as_deref() != Some(exp.hash.as_str()) {
        return Err(CliError::Guard(format!("{} was produced from a different config", dir.display())));
    }
    let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "patch".into());
    Ok(LoadedPatch {
        name,
        spec,
        manifest,
        hash,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub report: PathBuf,
    pub driveby: Option<PathBuf>,
    pub sheet: Option<PathBuf>,
    pub clean_detection_rate: f64,
    pub patched_detection_rate: Option<f64>,
    pub attack_success_rate: Option<f64>,
    pub success_denominator: Option<usize>,
    pub first_detection_scale: Option<f64>,
}

fn summary_of(report: &EvalReport, path: PathBuf, driveby: Option<(&DriveByReport, PathBuf)>, sheet: Option<PathBuf>) -> EvalSummary {
    let o = &report.aggregates.overall;
    EvalSummary {
        report: path,
        driveby: driveby.as_ref().map(|d| d.1.clone()),
        sheet,
        clean_detection_rate: o.clean_detection_rate,
        patched_detection_rate: o.patched_detection_rate,
        attack_success_rate: o.attack_success_rate,
        success_denominator: o.success_denominator,
        first_detection_scale: driveby.and_then(|d| d.0.first_detection_scale),
    }
}

fn write_sheet(exp: &Experiment, target: EvalTarget<'_, f32>, report: &EvalReport, path: PathBuf) -> CliResult<Option<PathBuf>> {
    let n = exp.config.evaluation.contact_sheet_frames;
    if n == 0 {
        return Ok(None);
    }
    let frames = report_frames(target, report, n)?;
    let img = contact_sheet(&frames, 6);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    img.save(&path).map_err(|e| CliError::Core(e.into()))?;
    Ok(Some(path))
}

/// Whitebox evaluation: pose grid, drive-by, and contact sheet for the clean
/// sign or a patch optimized on the same detector.
pub fn cmd_eval(exp: &Experiment, which: ArchChoice, patch_dir: Option<&Path>) -> CliResult<EvalSummary> {
    let (detector, det_hash) = load_detector(exp, which)?;
    let texture = victim_texture(exp)?;
    let patch = patch_dir.map(|d| load_patch_dir(exp, d)).transpose()?;
    if let Some(p) = &patch {
        match &p.spec.source_detector {
            Some(src) if src != &det_hash => {
                return Err(CliError::Guard(format!(
                    "patch {} was optimized on detector {src}, not on the supplied weights {det_hash}; use transfer",
                    p.name
                )))
            }
            _ => {}
        }
    }
    let seed = exp.config.eval_seed();
    let target = EvalTarget {
        detector: &detector,
        detector_hash: Some(&det_hash),
        texture: &texture,
        patch: patch.as_ref().map(|p| &p.spec),
        patch_hash: patch.as_ref().map(|p| p.hash.as_str()),
    };
    let mut report = eval_pose_grid(target, &exp.config.evaluation.grid, seed)?;
    report.meta.config_hash = Some(exp.hash.clone());
    let label = format!("{}-{}", which.label(), patch.as_ref().map_or("clean", |p| p.name.as_str()));
    let dir = exp.reports_dir();
    let report_path = dir.join(format!("eval-{label}.json"));
    write(&report_path, &report.to_json()?)?;

    let mut driveby = simulate_driveby(&detector, &texture, target.patch, &exp.config.evaluation.driveby, seed)?;
    driveby.detector = Some(det_hash.clone());
    driveby.patch = patch.as_ref().map(|p| p.hash.clone());
    driveby.config_hash = Some(exp.hash.clone());
    let driveby_path = dir.join(format!("driveby-{label}.json"));
    write(&driveby_path, &driveby.to_json()?)?;

    let sheet = write_sheet(exp, target, &report, dir.join(format!("sheet-{label}.png")))?;
    Ok(summary_of(&report, report_path, Some((&driveby, driveby_path)), sheet))
}

/// Black-box evaluation of a patch on a detector it was not optimized on.
pub fn cmd_transfer(exp: &Experiment, which: ArchChoice, patch_dir: &Path) -> CliResult<EvalSummary> {
    let (detector, det_hash) = load_detector(exp, which)?;
    let texture = victim_texture(exp)?;
    let patch = load_patch_dir(exp, patch_dir)?;
    let target = EvalTarget {
        detector: &detector,
        detector_hash: Some(&det_hash),
        texture: &texture,
        patch: Some(&patch.spec),
        patch_hash: Some(&patch.hash),
    };
    let mut report = eval_transfer(target, &exp.config.evaluation.grid, exp.config.eval_seed())?;
    report.meta.config_hash = Some(exp.hash.clone());
    let label = format!("{}-{}", which.label(), patch.name);
    let path = exp.reports_dir().join(format!("transfer-{label}.json"));
    write(&path, &report.to_json()?)?;
    let sheet = write_sheet(exp, target, &report, exp.reports_dir().join(format!("sheet-transfer-{label}.png")))?;
    Ok(summary_of(&report, path, None, sheet))
}

fn read_report(path: &Path) -> CliResult<EvalReport> {
    require(path, "evaluation report")?;
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Core(e.into()))
}

/// Re-derives each report's aggregates from its per-pose records and fails
/// when they disagree with the stored ones.
pub fn verify_report(report: &EvalReport) -> CliResult<()> {
    let again = patchlab::eval::aggregate(&report.records, &report.grid);
    if again != report.aggregates {
        return Err(CliError::Guard("stored aggregates do not match the per-pose records".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub json: PathBuf,
    pub text: PathBuf,
    pub summary: Summary,
}

/// Aligns several reports into one table, written as JSON and text.
pub fn cmd_report(exp: &Experiment, reports: &[PathBuf]) -> CliResult<ReportSummary> {
    let loaded: Vec<(String, EvalReport)> = reports
        .iter()
        .map(|p| {
            let r = read_report(p)?;
            verify_report(&r)?;
            let label = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((label, r))
        })
        .collect::<CliResult<_>>()?;
    let refs: Vec<(String, &EvalReport)> = loaded.iter().map(|(l, r)| (l.clone(), r)).collect();
    let summary = summarize(&refs)?;
    let json = exp.reports_dir().join("summary.json");
    let text = exp.reports_dir().join("summary.txt");
    write(&json, &to_json(&summary))?;
    write(&text, summary.render().as_bytes())?;
    Ok(ReportSummary { json, text, summary })
}

/// Results of the whole pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub data: GenDataSummary,
    pub train_a: TrainSummary,
    pub train_b: TrainSummary,
    pub attacks: Vec<AttackSummary>,
    pub evals: Vec<(String, EvalSummary)>,
    pub transfer: EvalSummary,
    pub report: ReportSummary,
}

/// Attack runs of the shipped pipeline.
pub const PIPELINE_ATTACKS: [(ModeChoice, MaskChoice, Translation); 4] = [
    (ModeChoice::Disappearance, MaskChoice::Poster, Translation::Sampled),
    (ModeChoice::Disappearance, MaskChoice::Sticker, Translation::Sampled),
    (ModeChoice::Mislabel, MaskChoice::Poster, Translation::Sampled),
    (ModeChoice::Disappearance, MaskChoice::Poster, Translation::Pinned),
];

/// Data, both detectors, every pipeline attack, their evaluations, the
/// transfer of the poster patch to detector B, and the summary table.
pub fn cmd_run(exp: &Experiment) -> CliResult<RunSummary> {
    let data = cmd_gen_data(exp)?;
    let train_a = cmd_train(exp, ArchChoice::A)?;
    let train_b = cmd_train(exp, ArchChoice::B)?;
    let mut attacks = Vec::new();
    let mut evals = vec![("clean".to_string(), cmd_eval(exp, ArchChoice::A, None)?)];
    for (mode, mask, translation) in PIPELINE_ATTACKS {
        let a = cmd_attack(exp, mode, mask, translation)?;
        evals.push((a.name.clone(), cmd_eval(exp, ArchChoice::A, Some(&a.dir))?));
        attacks.push(a);
    }
    let transfer = cmd_transfer(exp, ArchChoice::B, &attacks[0].dir)?;
    let mut paths: Vec<PathBuf> = evals.iter().map(|(_, e)| e.report.clone()).collect();
    paths.push(transfer.report.clone());
    let report = cmd_report(exp, &paths)?;
    Ok(RunSummary {
        data,
        train_a,
        train_b,
        attacks,
        evals,
        transfer,
        report,
    })
}
