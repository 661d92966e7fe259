//! Physical-condition simulation: projective warps with bilinear sampling,
//! photometric changes, and the exact adjoints needed to push gradients from
//! a rendered scene back onto the source texture.

use ndarray::Array3;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::scalar::Scalar;
use crate::scenegen::Pose;
use crate::seed;
use crate::Image;

/// Everything needed to turn a source image into one simulated observation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    /// Maps output unit coordinates to source unit coordinates.
    pub homography: Homography,
    pub brightness: f64,
    pub contrast: f64,
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

impl Default for TransformParams {
    fn default() -> Self {
        Self::identity()
    }
}

impl TransformParams {
    pub const fn identity() -> Self {
        Self {
            homography: Homography::identity(),
            brightness: 0.0,
            contrast: 1.0,
            noise_sigma: 0.0,
            noise_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.homography.is_invertible() {
            return Err(Error::SingularTransform {
                det: self.homography.det(),
            });
        }
        if !(self.contrast > 0.0) {
            return Err(Error::param(format!("contrast must be > 0, got {}", self.contrast)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::param(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Closed interval `[lo, hi]`, serialized as a two-element array.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval(pub f64, pub f64);

impl Interval {
    pub const fn point(v: f64) -> Self {
        Interval(v, v)
    }

    pub fn lo(&self) -> f64 {
        self.0
    }
    pub fn hi(&self) -> f64 {
        self.1
    }

    /// Uniform draw. Always consumes one value so streams stay aligned
    /// whether or not the interval is degenerate.
    pub fn sample(&self, rng: &mut seed::Rng) -> f64 {
        let u: f64 = rng.random();
        if self.0 == self.1 {
            self.0
        } else {
            self.0 + (self.1 - self.0) * u
        }
    }

    fn check(&self, name: &str) -> Result<()> {
        if !(self.0.is_finite() && self.1.is_finite() && self.0 <= self.1) {
            return Err(Error::param(format!(
                "{name} range [{}, {}] is empty or not finite",
                self.0, self.1
            )));
        }
        Ok(())
    }
}

/// Distribution of simulated viewing conditions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseDistribution {
    pub scale: Interval,
    pub rotation_deg: Interval,
    /// Per-coordinate offset range applied to each of the four texture corners.
    pub perspective_jitter: Interval,
    pub brightness: Interval,
    pub contrast: Interval,
    pub noise_sigma: Interval,
    /// When false, the sign center is pinned to the scene center.
    pub translation_invariance: bool,
}

impl Default for PoseDistribution {
    fn default() -> Self {
        Self {
            scale: Interval(0.2, 1.0),
            rotation_deg: Interval(-15.0, 15.0),
            perspective_jitter: Interval(-0.03, 0.03),
            brightness: Interval(-0.2, 0.2),
            contrast: Interval(0.8, 1.25),
            noise_sigma: Interval(0.0, 0.02),
            translation_invariance: true,
        }
    }
}

const MAX_GEOMETRY_DRAWS: usize = 10_000;

impl PoseDistribution {
    /// All ranges collapsed onto the identity transform at scene center.
    pub fn identity() -> Self {
        Self {
            scale: Interval::point(1.0),
            rotation_deg: Interval::point(0.0),
            perspective_jitter: Interval::point(0.0),
            brightness: Interval::point(0.0),
            contrast: Interval::point(1.0),
            noise_sigma: Interval::point(0.0),
            translation_invariance: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scale.check("scale")?;
        self.rotation_deg.check("rotation_deg")?;
        self.perspective_jitter.check("perspective_jitter")?;
        self.brightness.check("brightness")?;
        self.contrast.check("contrast")?;
        self.noise_sigma.check("noise_sigma")?;
        if !(self.scale.lo() > 0.0 && self.scale.hi() <= 1.0) {
            return Err(Error::param("scale range must lie in (0, 1]"));
        }
        if !(self.contrast.lo() > 0.0) {
            return Err(Error::param("contrast range must be positive"));
        }
        if self.noise_sigma.lo() < 0.0 {
            return Err(Error::param("noise_sigma range must be non-negative"));
        }
        Ok(())
    }

    /// Draws a pose whose warped `footprint` (a convex outline in centered
    /// texture unit coordinates) lies inside the scene. Geometry is redrawn
    /// until it fits; the center is then uniform over all in-bounds centers.
    pub fn sample_pose(&self, footprint: &[(f64, f64)], rng: &mut seed::Rng) -> Result<Pose> {
        for _ in 0..MAX_GEOMETRY_DRAWS {
            let scale = self.scale.sample(rng);
            let rotation_deg = self.rotation_deg.sample(rng);
            let mut jitter = [[0.0; 2]; 4];
            for corner in jitter.iter_mut() {
                corner[0] = self.perspective_jitter.sample(rng);
                corner[1] = self.perspective_jitter.sample(rng);
            }
            let mut pose = Pose {
                scale,
                rotation_deg,
                translate_x: 0.5,
                translate_y: 0.5,
                perspective_jitter: jitter,
                brightness: 0.0,
                contrast: 1.0,
                noise_sigma: 0.0,
                noise_seed: 0,
            };
            let Some((xr, yr)) = pose.center_ranges(footprint)? else {
                continue;
            };
            if self.translation_invariance {
                pose.translate_x = Interval(xr.0, xr.1).sample(rng);
                pose.translate_y = Interval(yr.0, yr.1).sample(rng);
            } else if !(xr.0 <= 0.5 && 0.5 <= xr.1 && yr.0 <= 0.5 && 0.5 <= yr.1) {
                continue;
            }
            pose.brightness = self.brightness.sample(rng);
            pose.contrast = self.contrast.sample(rng);
            pose.noise_sigma = self.noise_sigma.sample(rng);
            pose.noise_seed = rng.random();
            return Ok(pose);
        }
        Err(Error::param(format!(
            "no in-bounds geometry found after {MAX_GEOMETRY_DRAWS} draws"
        )))
    }
}

/// Draws one set of transform parameters for a sign with the given footprint.
pub fn sample_transform(
    dist: &PoseDistribution,
    footprint: &[(f64, f64)],
    rng: &mut seed::Rng,
) -> Result<TransformParams> {
    dist.sample_pose(footprint, rng)?.transform_params()
}

/// Output pixel grid expressed inside a (possibly larger) reference frame.
/// Unit coordinates are normalized by the frame size; the output window
/// starts at `offset` frame pixels.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Frame {
    pub height: usize,
    pub width: usize,
    pub offset_y: i64,
    pub offset_x: i64,
}

impl Frame {
    pub fn exact(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            offset_y: 0,
            offset_x: 0,
        }
    }
}

/// Precomputed bilinear taps: for every output pixel, up to four
/// `(source pixel, weight)` pairs. Forward and backward share the plan, so the
/// backward pass is the exact transpose of the forward map.
#[derive(Clone, Debug)]
pub struct WarpPlan<T> {
    src_hw: (usize, usize),
    out_hw: (usize, usize),
    starts: Vec<u32>,
    taps: Vec<(u32, T)>,
}

impl<T: Scalar> WarpPlan<T> {
    pub fn new(src_hw: (usize, usize), homography: &Homography, out_hw: (usize, usize)) -> Result<Self> {
        Self::in_frame(src_hw, homography, out_hw, Frame::exact(out_hw.0, out_hw.1))
    }

    pub(crate) fn in_frame(
        src_hw: (usize, usize),
        homography: &Homography,
        out_hw: (usize, usize),
        frame: Frame,
    ) -> Result<Self> {
        if !homography.is_invertible() {
            return Err(Error::SingularTransform {
                det: homography.det(),
            });
        }
        let (sh, sw) = src_hw;
        let (oh, ow) = out_hw;
        let mut starts = Vec::with_capacity(oh * ow + 1);
        let mut taps = Vec::with_capacity(oh * ow * 4);
        starts.push(0);
        for i in 0..oh {
            let v = ((i as i64 + frame.offset_y) as f64 + 0.5) / frame.height as f64;
            for j in 0..ow {
                let u = ((j as i64 + frame.offset_x) as f64 + 0.5) / frame.width as f64;
                if let Some((s, t)) = homography.apply(u, v) {
                    let x = s * sw as f64 - 0.5;
                    let y = t * sh as f64 - 0.5;
                    if x > -1.0 && y > -1.0 && x < sw as f64 && y < sh as f64 {
                        let x0 = x.floor();
                        let y0 = y.floor();
                        let fx = x - x0;
                        let fy = y - y0;
                        let (x0, y0) = (x0 as i64, y0 as i64);
                        let corners = [
                            (y0, x0, (1.0 - fy) * (1.0 - fx)),
                            (y0, x0 + 1, (1.0 - fy) * fx),
                            (y0 + 1, x0, fy * (1.0 - fx)),
                            (y0 + 1, x0 + 1, fy * fx),
                        ];
                        for (yy, xx, w) in corners {
                            if w != 0.0 && yy >= 0 && xx >= 0 && (yy as usize) < sh && (xx as usize) < sw {
                                taps.push(((yy as usize * sw + xx as usize) as u32, T::lit(w)));
                            }
                        }
                    }
                }
                starts.push(taps.len() as u32);
            }
        }
        Ok(Self {
            src_hw,
            out_hw,
            starts,
            taps,
        })
    }

    pub fn forward(&self, source: &Image<T>) -> Result<Image<T>> {
        let (h, w, c) = source.dim();
        if (h, w) != self.src_hw {
            return Err(Error::InputShape {
                expected: vec![self.src_hw.0, self.src_hw.1, c],
                got: vec![h, w, c],
            });
        }
        let src = source.as_standard_layout();
        let src = src.as_slice().unwrap();
        let (oh, ow) = self.out_hw;
        let mut out = vec![T::zero(); oh * ow * c];
        for p in 0..oh * ow {
            let range = self.starts[p] as usize..self.starts[p + 1] as usize;
            let dst = &mut out[p * c..(p + 1) * c];
            for &(idx, wt) in &self.taps[range] {
                let base = idx as usize * c;
                for ch in 0..c {
                    dst[ch] += wt * src[base + ch];
                }
            }
        }
        Ok(Array3::from_shape_vec((oh, ow, c), out).unwrap())
    }

    /// Transpose of [`forward`](Self::forward).
    pub fn backward(&self, upstream: &Image<T>) -> Result<Image<T>> {
        let (h, w, c) = upstream.dim();
        if (h, w) != self.out_hw {
            return Err(Error::GradientShape {
                expected: vec![self.out_hw.0, self.out_hw.1, c],
                got: vec![h, w, c],
            });
        }
        let up = upstream.as_standard_layout();
        let up = up.as_slice().unwrap();
        let (sh, sw) = self.src_hw;
        let mut grad = vec![T::zero(); sh * sw * c];
        for p in 0..h * w {
            let range = self.starts[p] as usize..self.starts[p + 1] as usize;
            let g = &up[p * c..(p + 1) * c];
            for &(idx, wt) in &self.taps[range] {
                let base = idx as usize * c;
                for ch in 0..c {
                    grad[base + ch] += wt * g[ch];
                }
            }
        }
        Ok(Array3::from_shape_vec((sh, sw, c), grad).unwrap())
    }
}

/// Inverse-mapping warp with bilinear interpolation and zero fill.
pub fn warp_projective<T: Scalar>(
    source: &Image<T>,
    params: &TransformParams,
    out_hw: (usize, usize),
) -> Result<Image<T>> {
    let (h, w, _) = source.dim();
    WarpPlan::new((h, w), &params.homography, out_hw)?.forward(source)
}

/// Gradient of a scalar loss with respect to the warp's source, given the
/// gradient with respect to its output. Transform parameters get no gradient.
pub fn warp_backward<T: Scalar>(
    source_dims: (usize, usize, usize),
    params: &TransformParams,
    upstream: &Image<T>,
) -> Result<Image<T>> {
    let (sh, sw, sc) = source_dims;
    let (h, w, c) = upstream.dim();
    if c != sc {
        return Err(Error::GradientShape {
            expected: vec![h, w, sc],
            got: vec![h, w, c],
        });
    }
    WarpPlan::new((sh, sw), &params.homography, (h, w))?.backward(upstream)
}

fn noise_field<T: Scalar>(len: usize, sigma: f64, noise_seed: u64) -> Option<Vec<T>> {
    if sigma == 0.0 {
        return None;
    }
    let mut rng = seed::rng(noise_seed);
    Some(
        (0..len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::lit(sigma * z)
            })
            .collect(),
    )
}

fn pre_clamp<T: Scalar>(image: &Image<T>, params: &TransformParams) -> Image<T> {
    let contrast = T::lit(params.contrast);
    let brightness = T::lit(params.brightness);
    let mut out = image.mapv(|x| contrast * x + brightness);
    if let Some(noise) = noise_field::<T>(out.len(), params.noise_sigma, params.noise_seed) {
        for (o, n) in out.iter_mut().zip(noise) {
            *o += n;
        }
    }
    out
}

/// `clamp(contrast·x + brightness + noise, 0, 1)`; the noise field is a pure
/// function of `noise_seed`.
pub fn photometric_adjust<T: Scalar>(image: &Image<T>, params: &TransformParams) -> Image<T> {
    pre_clamp(image, params).mapv(|v| v.max(T::zero()).min(T::one()))
}

/// Adjoint of [`photometric_adjust`]: `contrast` where the pre-clamp value lies
/// in `[0, 1]`, zero where it was clamped.
pub fn photometric_backward<T: Scalar>(
    image: &Image<T>,
    params: &TransformParams,
    upstream: &Image<T>,
) -> Result<Image<T>> {
    if image.dim() != upstream.dim() {
        let (a, b, c) = image.dim();
        let (x, y, z) = upstream.dim();
        return Err(Error::GradientShape {
            expected: vec![a, b, c],
            got: vec![x, y, z],
        });
    }
    let contrast = T::lit(params.contrast);
    let pre = pre_clamp(image, params);
    let mut grad = upstream.to_owned();
    for (g, &v) in grad.iter_mut().zip(pre.iter()) {
        if v >= T::zero() && v <= T::one() {
            *g *= contrast;
        } else {
            *g = T::zero();
        }
    }
    Ok(grad)
}
