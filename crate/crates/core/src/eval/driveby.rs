use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::outcome::Outcome;
use super::report::Observation;
use crate::attack::{apply_patch, PatchSpec};
use crate::detector::{decode_detections, forward, DetectorParams, DEFAULT_NMS_IOU, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::eval::classify_outcome;
use crate::geometry::BBox;
use crate::scalar::Scalar;
use crate::scenegen::{compose_scene, render_background, Background, CanonicalTexture, Pose, SCENE_SIZE};
use crate::seed;

/// A simulated approach: the sign grows from `scale_start` to `scale_end`
/// while drifting toward `end_position`, with small per-frame jitter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriveBy {
    pub n_frames: usize,
    pub scale_start: f64,
    pub scale_end: f64,
    /// Relative placement (as in the pose grid) at the first and last frame.
    pub start_position: [f64; 2],
    pub end_position: [f64; 2],
    pub rotation_jitter_deg: f64,
    pub brightness_jitter: f64,
    pub noise_sigma: f64,
    /// Draw jitter independently per frame; when false every frame reuses frame 0's draw.
    pub jitter_per_frame: bool,
}

impl Default for DriveBy {
    fn default() -> Self {
        Self {
            n_frames: 40,
            scale_start: 0.15,
            scale_end: 0.9,
            start_position: [0.5, 0.45],
            end_position: [0.7, 0.4],
            rotation_jitter_deg: 3.0,
            brightness_jitter: 0.05,
            noise_sigma: 0.005,
            jitter_per_frame: true,
        }
    }
}

impl DriveBy {
    pub fn validate(&self) -> Result<()> {
        if self.n_frames < 2 {
            return Err(Error::param("a drive-by needs at least two frames"));
        }
        if !(self.scale_start > 0.0 && self.scale_end <= 1.0 && self.scale_start <= self.scale_end) {
            return Err(Error::param("drive-by scales must satisfy 0 < start <= end <= 1"));
        }
        let pos_ok = |p: [f64; 2]| p.iter().all(|v| (0.0..=1.0).contains(v));
        if !pos_ok(self.start_position) || !pos_ok(self.end_position) {
            return Err(Error::param("drive-by positions must lie in [0, 1]"));
        }
        if !(self.rotation_jitter_deg >= 0.0 && self.brightness_jitter >= 0.0 && self.noise_sigma >= 0.0) {
            return Err(Error::param("drive-by jitter must be non-negative"));
        }
        Ok(())
    }

    /// Pose of frame `i`, or the reason the sign does not fit.
    pub fn pose(&self, i: usize, footprint: &[(f64, f64)], seed: u64) -> Result<Pose> {
        let t = i as f64 / (self.n_frames - 1) as f64;
        let lerp = |a: f64, b: f64| a + t * (b - a);
        let jitter_index = if self.jitter_per_frame { i } else { 0 };
        let mut rng = seed::rng(seed::derive_index(seed::derive(seed, "driveby"), jitter_index as u64));
        let mut pose = Pose::centered(lerp(self.scale_start, self.scale_end));
        pose.rotation_deg = self.rotation_jitter_deg * rng.random_range(-1.0..=1.0);
        pose.brightness = self.brightness_jitter * rng.random_range(-1.0..=1.0);
        pose.noise_sigma = self.noise_sigma;
        pose.noise_seed = rng.random();
        let ((x0, x1), (y0, y1)) = pose
            .center_ranges(footprint)?
            .ok_or_else(|| Error::PoseOutOfBounds(format!("frame {i} does not fit at scale {}", pose.scale)))?;
        let fx = lerp(self.start_position[0], self.end_position[0]);
        let fy = lerp(self.start_position[1], self.end_position[1]);
        pose.translate_x = x0 + fx * (x1 - x0);
        pose.translate_y = y0 + fy * (y1 - y0);
        Ok(pose)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub scale: f64,
    pub pose: Pose,
    pub gt_box: BBox,
    #[serde(flatten)]
    pub observation: Observation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriveByReport {
    pub schema: u32,
    pub path: DriveBy,
    pub seed: u64,
    pub detector: Option<String>,
    pub patch: Option<String>,
    pub config_hash: Option<String>,
    pub frames: Vec<FrameRecord>,
    /// Scale of the first (farthest) frame with a correct detection.
    pub first_detection_scale: Option<f64>,
    pub detected_fraction: f64,
    /// Detected fraction among frames with scale at least 0.3.
    pub detected_fraction_near: f64,
}

impl DriveByReport {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(self)?)
    }
}

/// Scale threshold of [`DriveByReport::detected_fraction_near`].
pub const NEAR_SCALE: f64 = 0.3;

/// Background used by every frame of the drive-by.
pub fn driveby_background<T: Scalar>(seed: u64) -> Background<T> {
    Background {
        id: 0,
        image: render_background(SCENE_SIZE, SCENE_SIZE, seed::derive(seed, "driveby-background")),
    }
}

/// Runs the approach sequence on the (optionally patched) texture.
pub fn simulate_driveby<T: Scalar>(
    detector: &DetectorParams<T>,
    texture: &CanonicalTexture<T>,
    patch: Option<&PatchSpec<T>>,
    path: &DriveBy,
    seed: u64,
) -> Result<DriveByReport> {
    path.validate()?;
    let tex = match patch {
        Some(p) => {
            p.validate_for(texture)?;
            apply_patch(texture, p)
        }
        None => texture.clone(),
    };
    let bg = driveby_background::<T>(seed);
    let footprint = texture.class.outline();
    let frames: Vec<FrameRecord> = (0..path.n_frames)
        .into_par_iter()
        .map(|i| {
            let pose = path.pose(i, &footprint, seed)?;
            let scene = compose_scene(&bg, &tex, &pose)?;
            let raw = forward(detector, &scene.image)?;
            let detections = decode_detections(&raw, DEFAULT_THRESHOLD, DEFAULT_NMS_IOU);
            let outcome = classify_outcome(&detections, &scene.gt_box, scene.gt_class.id());
            Ok(FrameRecord {
                frame: i,
                scale: pose.scale,
                pose,
                gt_box: scene.gt_box,
                observation: Observation { outcome, detections },
            })
        })
        .collect::<Result<_>>()?;
    let detected = |f: &&FrameRecord| f.observation.outcome == Outcome::TrueDetect;
    let near: Vec<_> = frames.iter().filter(|f| f.scale >= NEAR_SCALE).collect();
    let near_hits = near.iter().filter(|f| detected(f)).count();
    Ok(DriveByReport {
        schema: super::REPORT_SCHEMA,
        path: path.clone(),
        seed,
        detector: None,
        patch: None,
        config_hash: None,
        first_detection_scale: frames.iter().find(|f| detected(f)).map(|f| f.scale),
        detected_fraction: frames.iter().filter(detected).count() as f64 / frames.len() as f64,
        detected_fraction_near: if near.is_empty() { 0.0 } else { near_hits as f64 / near.len() as f64 },
        frames,
    })
}

/// Whether the adversarial run first detects the sign strictly later (at a
/// larger scale) than the clean run. Never detecting counts as later than any
/// detection.
pub fn detected_later(adversarial: &DriveByReport, clean: &DriveByReport) -> bool {
    match (adversarial.first_detection_scale, clean.first_detection_scale) {
        (None, Some(_)) => true,
        (Some(a), Some(c)) => a > c,
        _ => false,
    }
}
