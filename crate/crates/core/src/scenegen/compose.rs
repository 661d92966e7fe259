use ndarray::{s, Array2, Array3, Axis, Zip};
use serde::{Deserialize, Serialize};

use super::background::Background;
use super::sign::{CanonicalTexture, SignClass};
use crate::difftrans::{photometric_adjust, photometric_backward, Frame, TransformParams, WarpPlan};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Homography};
use crate::scalar::Scalar;
use crate::Image;

/// Placement and viewing conditions of the sign in one scene.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Texture side length as a fraction of scene height.
    pub scale: f64,
    pub rotation_deg: f64,
    /// Sign center in unit scene coordinates.
    pub translate_x: f64,
    pub translate_y: f64,
    /// Offsets of the four texture corners (TL, TR, BR, BL) in texture units.
    pub perspective_jitter: [[f64; 2]; 4],
    pub brightness: f64,
    pub contrast: f64,
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

impl Default for Pose {
    fn default() -> Self {
        Self::centered(1.0)
    }
}

const CORNERS: [(f64, f64); 4] = [(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)];
const BOUNDS_EPS: f64 = 1e-9;

impl Pose {
    /// Axis-aligned sign at scene center with neutral photometry.
    pub fn centered(scale: f64) -> Self {
        Self {
            scale,
            rotation_deg: 0.0,
            translate_x: 0.5,
            translate_y: 0.5,
            perspective_jitter: [[0.0; 2]; 4],
            brightness: 0.0,
            contrast: 1.0,
            noise_sigma: 0.0,
            noise_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.scale,
            self.rotation_deg,
            self.translate_x,
            self.translate_y,
            self.brightness,
            self.contrast,
            self.noise_sigma,
        ]
        .iter()
        .chain(self.perspective_jitter.iter().flatten())
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::param("pose has non-finite fields"));
        }
        if !(self.scale > 0.0) {
            return Err(Error::param(format!("pose scale must be > 0, got {}", self.scale)));
        }
        if !(self.contrast > 0.0) {
            return Err(Error::param(format!("pose contrast must be > 0, got {}", self.contrast)));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::param("pose noise_sigma must be >= 0"));
        }
        Ok(())
    }

    fn jitter_map(&self) -> Result<Homography> {
        if self.perspective_jitter.iter().flatten().all(|&v| v == 0.0) {
            return Ok(Homography::identity());
        }
        let mut dst = CORNERS;
        for (d, j) in dst.iter_mut().zip(self.perspective_jitter.iter()) {
            d.0 += j[0];
            d.1 += j[1];
        }
        Homography::from_correspondences(&CORNERS, &dst)
    }

    /// Centered texture units to scene-unit offsets from the sign center:
    /// rotation ∘ scale ∘ perspective jitter.
    pub fn shape_map(&self) -> Result<Homography> {
        let j = self.jitter_map()?;
        Ok(Homography::rotation_deg(self.rotation_deg)
            .then_after(&Homography::scaling(self.scale, self.scale))
            .then_after(&j))
    }

    /// Centered texture units to unit scene coordinates.
    pub fn placement_map(&self) -> Result<Homography> {
        Ok(Homography::translation(self.translate_x, self.translate_y).then_after(&self.shape_map()?))
    }

    /// Warp parameters mapping scene coordinates back to texture coordinates,
    /// with this pose's photometry.
    pub fn transform_params(&self) -> Result<TransformParams> {
        let to_texture = Homography::translation(0.5, 0.5).then_after(&self.placement_map()?.inverse()?);
        Ok(TransformParams {
            homography: to_texture,
            ..self.photometric()
        })
    }

    /// Photometric part only (identity geometry).
    pub fn photometric(&self) -> TransformParams {
        TransformParams {
            homography: Homography::identity(),
            brightness: self.brightness,
            contrast: self.contrast,
            noise_sigma: self.noise_sigma,
            noise_seed: self.noise_seed,
        }
    }

    /// Ranges of sign centers `(x, y)` that keep the warped footprint inside
    /// the unit scene, or `None` when no center works.
    pub fn center_ranges(&self, footprint: &[(f64, f64)]) -> Result<Option<((f64, f64), (f64, f64))>> {
        let map = self.shape_map()?;
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(px, py) in footprint {
            let Some((x, y)) = map.apply(px, py) else {
                return Ok(None);
            };
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        let xr = (-x0, 1.0 - x1);
        let yr = (-y0, 1.0 - y1);
        if xr.0 > xr.1 || yr.0 > yr.1 {
            return Ok(None);
        }
        Ok(Some((xr, yr)))
    }

    /// Fails unless the warped outline lies inside the unit scene.
    pub fn check_in_bounds(&self, footprint: &[(f64, f64)]) -> Result<()> {
        let map = self.placement_map()?;
        for &(px, py) in footprint {
            match map.apply(px, py) {
                Some((x, y))
                    if (-BOUNDS_EPS..=1.0 + BOUNDS_EPS).contains(&x)
                        && (-BOUNDS_EPS..=1.0 + BOUNDS_EPS).contains(&y) => {}
                Some((x, y)) => {
                    return Err(Error::PoseOutOfBounds(format!(
                        "outline point maps to ({x:.4}, {y:.4})"
                    )))
                }
                None => return Err(Error::PoseOutOfBounds("outline crosses the horizon".into())),
            }
        }
        Ok(())
    }
}

/// One rendered scene with exact ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample<T> {
    pub image: Image<T>,
    pub gt_box: BBox,
    pub gt_class: SignClass,
    pub pose: Pose,
    pub background_id: usize,
    /// Per-sample seed when drawn by a generator, 0 otherwise.
    pub seed: u64,
}

/// Everything [`compose_scene`] needs to propagate gradients from the scene
/// back to the texture.
#[derive(Clone, Debug)]
pub struct ComposeTape<T> {
    plan: WarpPlan<T>,
    linear: Image<T>,
    photometric: TransformParams,
    alpha: Array2<T>,
}

impl<T: Scalar> ComposeTape<T> {
    /// Gradient with respect to the texture's RGB channels.
    pub fn backward_rgb(&self, d_scene: &Image<T>) -> Result<Image<T>> {
        let d_linear = photometric_backward(&self.linear, &self.photometric, d_scene)?;
        let mut d_rgb = self.plan.backward(&d_linear)?;
        Zip::from(d_rgb.lanes_mut(Axis(2)))
            .and(&self.alpha)
            .for_each(|mut lane, &a| lane.mapv_inplace(|g| g * a));
        Ok(d_rgb)
    }
}

/// Warps the texture by `pose`, alpha-composites it over the background, and
/// applies the pose's photometric conditions to the whole scene.
pub fn compose_scene<T: Scalar>(
    background: &Background<T>,
    texture: &CanonicalTexture<T>,
    pose: &Pose,
) -> Result<SceneSample<T>> {
    compose_with_tape(background, texture, pose).map(|(s, _)| s)
}

pub fn compose_with_tape<T: Scalar>(
    background: &Background<T>,
    texture: &CanonicalTexture<T>,
    pose: &Pose,
) -> Result<(SceneSample<T>, ComposeTape<T>)> {
    pose.validate()?;
    let (h, w, c) = background.image.dim();
    if c != 3 || h != w {
        return Err(Error::InputShape {
            expected: vec![h, h, 3],
            got: vec![h, w, c],
        });
    }
    pose.check_in_bounds(&texture.class.outline())?;

    // The sign is warped into a frame twice the scene size, centered up to the
    // sub-pixel part of its position, and the scene is a window into that
    // frame. Positions differing by whole pixels therefore produce bit-identical
    // sign pixels.
    let (fh, fw) = (2 * h, 2 * w);
    let px = pose.translate_x * w as f64;
    let py = pose.translate_y * h as f64;
    let (kx, ky) = (px.floor(), py.floor());
    let frame_center = Homography::translation((w as f64 + (px - kx)) / fw as f64, (h as f64 + (py - ky)) / fh as f64);
    let frame_placement = frame_center
        .then_after(&Homography::scaling(w as f64 / fw as f64, h as f64 / fh as f64))
        .then_after(&pose.shape_map()?);
    let to_texture = Homography::translation(0.5, 0.5).then_after(&frame_placement.inverse()?);
    let frame = Frame {
        height: fh,
        width: fw,
        offset_y: h as i64 - ky as i64,
        offset_x: w as i64 - kx as i64,
    };
    let (th, tw) = texture.size();
    let plan = WarpPlan::in_frame((th, tw), &to_texture, (h, w), frame)?;

    let alpha = texture.rgba.index_axis(Axis(2), 3).to_owned();
    let mut premul = texture.rgba.clone();
    for ch in 0..3 {
        let mut lane = premul.index_axis_mut(Axis(2), ch);
        lane *= &alpha;
    }
    let warped = plan.forward(&premul)?;
    let mut linear = Array3::<T>::zeros((h, w, 3));
    Zip::from(linear.lanes_mut(Axis(2)))
        .and(warped.lanes(Axis(2)))
        .and(background.image.lanes(Axis(2)))
        .for_each(|mut out, src, bg| {
            let keep = T::one() - src[3];
            for ch in 0..3 {
                out[ch] = src[ch] + keep * bg[ch];
            }
        });
    let photometric = pose.photometric();
    let image = photometric_adjust(&linear, &photometric);

    let gt_box = silhouette_box(&warped.slice(s![.., .., 3]).to_owned())
        .ok_or_else(|| Error::PoseOutOfBounds("warped sign covers no pixel".into()))?;
    let sample = SceneSample {
        image,
        gt_box,
        gt_class: texture.class,
        pose: *pose,
        background_id: background.id,
        seed: 0,
    };
    let tape = ComposeTape {
        plan,
        linear,
        photometric,
        alpha,
    };
    Ok((sample, tape))
}

/// Tight unit-coordinate box around pixels with coverage at least one half.
fn silhouette_box<T: Scalar>(alpha: &Array2<T>) -> Option<BBox> {
    let half = T::lit(0.5);
    let (h, w) = alpha.dim();
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for ((r, c), &a) in alpha.indexed_iter() {
        if a >= half {
            r0 = r0.min(r);
            r1 = r1.max(r);
            c0 = c0.min(c);
            c1 = c1.max(c);
        }
    }
    if r0 == usize::MAX {
        return None;
    }
    Some(BBox::from_corners(
        c0 as f64 / w as f64,
        r0 as f64 / h as f64,
        (c1 + 1) as f64 / w as f64,
        (r1 + 1) as f64 / h as f64,
    ))
}
