use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grid::{GridPoint, PoseGrid, SkippedPose};
use super::outcome::{classify_outcome, Outcome};
use crate::attack::{apply_patch, PatchSpec};
use crate::detector::{decode_detections, forward, Detection, DetectorParams, DEFAULT_NMS_IOU, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::scalar::Scalar;
use crate::scenegen::{background_pool, compose_scene, Background, CanonicalTexture, Pose, SceneSample, SCENE_SIZE};
use crate::seed;

pub const REPORT_SCHEMA: u32 = 1;

/// Detections and outcome of one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub outcome: Outcome,
    pub detections: Vec<Detection>,
}

/// One evaluated grid pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub point: GridPoint,
    pub pose: Pose,
    pub gt_box: BBox,
    pub background: usize,
    pub clean: Observation,
    /// Present when a patch was evaluated.
    pub patched: Option<Observation>,
}

/// Rates over a set of records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub evaluated: usize,
    pub clean_detected: usize,
    pub clean_detection_rate: f64,
    /// Patched true detections over all evaluated poses.
    pub patched_detected: Option<usize>,
    pub patched_detection_rate: Option<f64>,
    /// Clean-detected poses whose patched outcome is a miss or a mislabel.
    pub attack_successes: Option<usize>,
    /// Denominator of the two rates below: the clean-detected poses.
    pub success_denominator: Option<usize>,
    pub attack_success_rate: Option<f64>,
    /// Clean-detected poses whose patched outcome is a mislabel.
    pub mislabels: Option<usize>,
    pub mislabel_rate: Option<f64>,
    /// Patched outcome counts among clean-detected poses, by outcome label.
    pub patched_outcomes: Option<BTreeMap<String, usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleBin {
    pub scale: f64,
    pub rates: Rates,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub overall: Rates,
    /// Restricted to placements away from the scene center.
    pub off_center: Rates,
    pub per_scale: Vec<ScaleBin>,
}

/// Metadata identifying what was evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub schema: u32,
    pub transfer: bool,
    pub detector: Option<String>,
    pub patch: Option<String>,
    pub source_detector: Option<String>,
    pub config_hash: Option<String>,
    pub seed: u64,
    pub threshold: f64,
    pub nms_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub grid: PoseGrid,
    pub aggregates: Aggregates,
    pub records: Vec<PoseRecord>,
    pub skipped: Vec<SkippedPose>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(self)?)
    }
}

fn rate(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Aggregates a set of records.
pub fn rates<'a>(records: impl IntoIterator<Item = &'a PoseRecord>) -> Rates {
    let mut evaluated = 0;
    let mut clean_detected = 0;
    let mut has_patch = false;
    let mut patched_detected = 0;
    let mut successes = 0;
    let mut mislabels = 0;
    let mut outcomes = BTreeMap::new();
    for r in records {
        evaluated += 1;
        let clean_ok = r.clean.outcome.is_detected();
        clean_detected += clean_ok as usize;
        if let Some(p) = &r.patched {
            has_patch = true;
            patched_detected += p.outcome.is_detected() as usize;
            if clean_ok {
                *outcomes.entry(p.outcome.to_string()).or_insert(0) += 1;
                match p.outcome {
                    Outcome::TrueDetect => {}
                    Outcome::Miss => successes += 1,
                    Outcome::Mislabel(_) => {
                        successes += 1;
                        mislabels += 1;
                    }
                }
            }
        }
    }
    let some = |v| has_patch.then_some(v);
    Rates {
        evaluated,
        clean_detected,
        clean_detection_rate: rate(clean_detected, evaluated),
        patched_detected: some(patched_detected),
        patched_detection_rate: has_patch.then(|| rate(patched_detected, evaluated)),
        attack_successes: some(successes),
        success_denominator: some(clean_detected),
        attack_success_rate: has_patch.then(|| rate(successes, clean_detected)),
        mislabels: some(mislabels),
        mislabel_rate: has_patch.then(|| rate(mislabels, clean_detected)),
        patched_outcomes: has_patch.then_some(outcomes),
    }
}

/// Overall, off-center, and per-scale rates of a record set.
pub fn aggregate(records: &[PoseRecord], grid: &PoseGrid) -> Aggregates {
    let per_scale = grid
        .scales
        .iter()
        .enumerate()
        .map(|(si, &scale)| ScaleBin {
            scale,
            rates: rates(records.iter().filter(|r| r.point.scale_index == si)),
        })
        .collect();
    Aggregates {
        overall: rates(records),
        off_center: rates(records.iter().filter(|r| !grid.is_centered(r.point.placement_index))),
        per_scale,
    }
}

fn observe<T: Scalar>(
    detector: &DetectorParams<T>,
    scene: &SceneSample<T>,
    threshold: f64,
) -> Result<Observation> {
    let raw = forward(detector, &scene.image)?;
    let detections = decode_detections(&raw, threshold, DEFAULT_NMS_IOU);
    let outcome = classify_outcome(&detections, &scene.gt_box, scene.gt_class.id());
    Ok(Observation { outcome, detections })
}

/// What to evaluate on the grid.
#[derive(Clone, Copy, Debug)]
pub struct EvalTarget<'a, T> {
    pub detector: &'a DetectorParams<T>,
    /// Content hash of the detector's weight file.
    pub detector_hash: Option<&'a str>,
    pub texture: &'a CanonicalTexture<T>,
    pub patch: Option<&'a PatchSpec<T>>,
    /// Content hash of the patch artifact.
    pub patch_hash: Option<&'a str>,
}

impl<'a, T> EvalTarget<'a, T> {
    pub fn clean(detector: &'a DetectorParams<T>, texture: &'a CanonicalTexture<T>) -> Self {
        Self {
            detector,
            detector_hash: None,
            texture,
            patch: None,
            patch_hash: None,
        }
    }

    pub fn with_patch(mut self, patch: &'a PatchSpec<T>) -> Self {
        self.patch = Some(patch);
        self
    }
}

/// Evaluation backgrounds for a seed.
pub fn eval_backgrounds<T: Scalar>(grid: &PoseGrid, seed: u64) -> Vec<Background<T>> {
    background_pool(grid.backgrounds, seed::derive(seed, "eval-backgrounds"))
}

/// Runs every grid pose on the clean texture and, when given, the patched one.
pub fn eval_pose_grid<T: Scalar>(target: EvalTarget<'_, T>, grid: &PoseGrid, seed: u64) -> Result<EvalReport> {
    eval_pose_grid_at(target, grid, seed, DEFAULT_THRESHOLD)
}

pub fn eval_pose_grid_at<T: Scalar>(
    target: EvalTarget<'_, T>,
    grid: &PoseGrid,
    seed: u64,
    threshold: f64,
) -> Result<EvalReport> {
    grid.validate()?;
    if let Some(p) = target.patch {
        p.validate_for(target.texture)?;
    }
    let class = target.texture.class;
    let backgrounds = eval_backgrounds::<T>(grid, seed);
    let patched_texture = target.patch.map(|p| apply_patch(target.texture, p));

    let mut skipped = Vec::new();
    let mut jobs = Vec::new();
    for point in grid.points() {
        match grid.pose(&point, class, seed) {
            Ok(pose) => jobs.push((point, pose)),
            Err(reason) => skipped.push(SkippedPose { point, reason }),
        }
    }
    let records: Vec<PoseRecord> = jobs
        .par_iter()
        .map(|(point, pose)| {
            let background = grid.background_of(point);
            let bg = &backgrounds[background];
            let clean_scene = compose_scene(bg, target.texture, pose)?;
            let clean = observe(target.detector, &clean_scene, threshold)?;
            let patched = match &patched_texture {
                Some(tex) => Some(observe(target.detector, &compose_scene(bg, tex, pose)?, threshold)?),
                None => None,
            };
            Ok(PoseRecord {
                point: *point,
                pose: *pose,
                gt_box: clean_scene.gt_box,
                background,
                clean,
                patched,
            })
        })
        .collect::<Result<_>>()?;
    debug_assert!(backgrounds.iter().all(|b| b.image.dim() == (SCENE_SIZE, SCENE_SIZE, 3)));

    let aggregates = aggregate(&records, grid);
    Ok(EvalReport {
        meta: ReportMeta {
            schema: REPORT_SCHEMA,
            transfer: false,
            detector: target.detector_hash.map(str::to_string),
            patch: target.patch_hash.map(str::to_string),
            source_detector: target.patch.and_then(|p| p.source_detector.clone()),
            config_hash: None,
            seed,
            threshold,
            nms_iou: DEFAULT_NMS_IOU,
        },
        grid: grid.clone(),
        aggregates,
        records,
        skipped,
    })
}

/// Grid evaluation of a patch against a detector it was not optimized on.
pub fn eval_transfer<T: Scalar>(target: EvalTarget<'_, T>, grid: &PoseGrid, seed: u64) -> Result<EvalReport> {
    let patch = target.patch.ok_or_else(|| Error::param("transfer evaluation needs a patch"))?;
    match (&patch.source_detector, target.detector_hash) {
        (Some(src), Some(dst)) if src == dst => {
            return Err(Error::NotATransfer(format!("patch was optimized on detector {src}")))
        }
        (_, None) => return Err(Error::param("transfer evaluation needs the target detector's hash")),
        _ => {}
    }
    let mut report = eval_pose_grid(target, grid, seed)?;
    report.meta.transfer = true;
    Ok(report)
}

/// Fraction of samples whose sign is detected with the right class at IoU ≥ 0.5.
pub fn evaluate_samples<T: Scalar>(detector: &DetectorParams<T>, samples: &[SceneSample<T>], threshold: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::param("no samples to evaluate"));
    }
    let hits = samples
        .par_iter()
        .map(|s| observe(detector, s, threshold).map(|o| o.outcome.is_detected() as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / samples.len() as f64)
}
