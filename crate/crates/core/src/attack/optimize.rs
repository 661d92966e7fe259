use ndarray::{Array3, Axis, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{attack_loss, DEFAULT_TEMPERATURE};
use super::patch::{apply_patch, AttackMode, PatchSpec};
use crate::detector::{backward, decode_detections, forward_with_tape, DetectorParams, DEFAULT_NMS_IOU, DEFAULT_THRESHOLD};
use crate::difftrans::PoseDistribution;
use crate::error::{Error, Result};
use crate::eval::{classify_outcome, Outcome};
use crate::scalar::Scalar;
use crate::scenegen::{background_pool, compose_with_tape, Background, CanonicalTexture, Pose, SCENE_SIZE};
use crate::seed;
use crate::Image;

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

fn default_background_pool() -> usize {
    8
}

fn default_true() -> bool {
    true
}

/// Settings of the expectation-over-transformations optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub steps: usize,
    pub step_size: f64,
    /// Transform draws `K` averaged per step.
    pub batch_transforms: usize,
    #[serde(default)]
    pub pose_distribution: PoseDistribution,
    /// Number of backgrounds drawn from the attack's own pool.
    #[serde(default = "default_background_pool")]
    pub background_pool: usize,
    pub seed: u64,
    /// Stop once this fraction of the current batch is fooled.
    #[serde(default)]
    pub early_stop: Option<f64>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Reuse the first step's draws on every step.
    #[serde(default)]
    pub fixed_batch: bool,
    /// Divide the gradient by its root mean square over masked entries, so
    /// `step_size` is the typical per-texel move regardless of how saturated
    /// the detector is.
    #[serde(default = "default_true")]
    pub normalize_gradient: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            step_size: 0.02,
            batch_transforms: 16,
            pose_distribution: PoseDistribution::default(),
            background_pool: default_background_pool(),
            seed: 3,
            early_stop: None,
            temperature: DEFAULT_TEMPERATURE,
            fixed_batch: false,
            normalize_gradient: true,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_transforms == 0 {
            return Err(Error::param("batch_transforms must be >= 1"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::param("step_size must be a finite value > 0"));
        }
        if self.background_pool == 0 {
            return Err(Error::param("background_pool must be >= 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::param("temperature must be a finite value > 0"));
        }
        if let Some(t) = self.early_stop {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::param("early_stop must lie in [0, 1]"));
            }
        }
        self.pose_distribution.validate()
    }
}

/// One sampled viewing condition: a pose and an index into the background pool.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Draw {
    pub pose: Pose,
    pub background: usize,
}

/// Draws `k` viewing conditions for a sign with the given outline.
pub fn sample_draws(
    dist: &PoseDistribution,
    footprint: &[(f64, f64)],
    pool_size: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<Draw>> {
    use rand::Rng as _;
    let mut rng = seed::rng(seed);
    (0..k)
        .map(|_| {
            let pose = dist.sample_pose(footprint, &mut rng)?;
            let background = rng.random_range(0..pool_size);
            Ok(Draw { pose, background })
        })
        .collect()
}

/// Mean objective over a batch of draws and its gradient with respect to `δ`.
#[derive(Clone, Debug)]
pub struct Objective<T> {
    /// Mean attack loss plus `λ · mean(δ²)` over masked entries.
    pub loss: f64,
    pub grad: Image<T>,
    /// Draws whose decoded detections already count as fooled.
    pub fooled: usize,
}

fn fooled(outcome: Outcome, spec_mode: AttackMode, target: Option<usize>) -> bool {
    match (spec_mode, outcome) {
        (_, Outcome::TrueDetect) => false,
        (AttackMode::Disappearance, _) => true,
        (AttackMode::Mislabel, Outcome::Mislabel(k)) => Some(k) == target,
        (AttackMode::Mislabel, Outcome::Miss) => false,
    }
}

/// Evaluates the EOT objective. Per-draw work runs in parallel; the batch is
/// reduced in draw order.
pub fn eot_objective<T: Scalar>(
    detector: &DetectorParams<T>,
    texture: &CanonicalTexture<T>,
    spec: &PatchSpec<T>,
    draws: &[Draw],
    backgrounds: &[Background<T>],
    temperature: f64,
) -> Result<Objective<T>> {
    if draws.is_empty() {
        return Err(Error::param("objective needs at least one draw"));
    }
    let patched = apply_patch(texture, spec);
    let per_draw: Vec<Result<(T, Image<T>, bool)>> = draws
        .par_iter()
        .map(|d| {
            let bg = backgrounds
                .get(d.background)
                .ok_or_else(|| Error::param(format!("background index {} out of range", d.background)))?;
            let (scene, tape) = compose_with_tape(bg, &patched, &d.pose)?;
            let (raw, dtape) = forward_with_tape(detector, &scene.image)?;
            let (loss, d_raw) = attack_loss(&raw, spec, &scene.gt_box, temperature)?;
            let grads = backward(detector, &dtape, &d_raw, false, true);
            let d_tex = tape.backward_rgb(&grads.input.expect("input gradient requested"))?;
            let dets = decode_detections(&raw, DEFAULT_THRESHOLD, DEFAULT_NMS_IOU);
            let outcome = classify_outcome(&dets, &scene.gt_box, scene.gt_class.id());
            Ok((loss, d_tex, fooled(outcome, spec.mode, spec.target_class.map(|c| c.id()))))
        })
        .collect();

    let (h, w) = spec.mask.dim();
    let mut grad = Array3::<T>::zeros((h, w, 3));
    let mut total = T::zero();
    let mut n_fooled = 0;
    for item in per_draw {
        let (l, g, f) = item?;
        total += l;
        grad += &g;
        n_fooled += f as usize;
    }
    let k = T::lit(draws.len() as f64);
    grad.mapv_inplace(|g| g / k);
    let lambda = T::lit(spec.reg_weight());
    let two = T::lit(2.0);
    // Chain through the clamp in apply_patch, then the mask.
    Zip::from(grad.lanes_mut(Axis(2)))
        .and(spec.delta.lanes(Axis(2)))
        .and(texture.rgba.lanes(Axis(2)))
        .and(&spec.mask)
        .for_each(|mut g, d, px, &m| {
            for ch in 0..3 {
                if !m {
                    g[ch] = T::zero();
                    continue;
                }
                let v = px[ch] + d[ch];
                let pass = v >= T::zero() && v <= T::one();
                g[ch] = if pass { g[ch] } else { T::zero() } + two * lambda * d[ch];
            }
        });
    let loss = (total / k).as_f64() + spec.regularizer();
    Ok(Objective {
        loss,
        grad,
        fooled: n_fooled,
    })
}

/// Root mean square of `grad` over masked texels, `None` when it vanishes.
fn masked_rms<T: Scalar>(grad: &Image<T>, mask: &super::patch::Mask) -> Option<T> {
    let mut sum = 0.0;
    let mut n = 0usize;
    Zip::from(grad.lanes(Axis(2))).and(mask).for_each(|g, &m| {
        if m {
            sum += g.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
            n += 3;
        }
    });
    let rms = (sum / n.max(1) as f64).sqrt();
    (rms > 0.0 && rms.is_finite()).then(|| T::lit(rms))
}

/// Result of [`optimize_patch`].
#[derive(Clone, Debug)]
pub struct AttackOutcome<T> {
    pub spec: PatchSpec<T>,
    /// Mean objective evaluated at the start of each executed step.
    pub loss_trace: Vec<f64>,
    /// Whether the early-stop threshold ended the run.
    pub stopped_early: bool,
}

/// Projected gradient descent on `δ` under sampled viewing conditions.
pub fn optimize_patch<T: Scalar>(
    detector: &DetectorParams<T>,
    texture: &CanonicalTexture<T>,
    config: &AttackConfig,
    initial: PatchSpec<T>,
) -> Result<AttackOutcome<T>> {
    optimize_patch_logged(detector, texture, config, initial, |_, _| {})
}

pub fn optimize_patch_logged<T: Scalar>(
    detector: &DetectorParams<T>,
    texture: &CanonicalTexture<T>,
    config: &AttackConfig,
    initial: PatchSpec<T>,
    mut on_step: impl FnMut(usize, f64),
) -> Result<AttackOutcome<T>> {
    config.validate()?;
    initial.validate_for(texture)?;
    let mut spec = initial;
    if config.steps == 0 {
        return Ok(AttackOutcome {
            spec,
            loss_trace: Vec::new(),
            stopped_early: false,
        });
    }
    let backgrounds = background_pool::<T>(config.background_pool, seed::derive(config.seed, "backgrounds"));
    debug_assert!(backgrounds.iter().all(|b| b.image.dim() == (SCENE_SIZE, SCENE_SIZE, 3)));
    let footprint = texture.class.outline();
    let batch_seed = seed::derive(config.seed, "batches");
    let draws_for = |step: usize| {
        let s = if config.fixed_batch { 0 } else { step as u64 };
        sample_draws(
            &config.pose_distribution,
            &footprint,
            config.background_pool,
            config.batch_transforms,
            seed::derive_index(batch_seed, s),
        )
    };

    let mut fixed = None;
    let mut trace = Vec::with_capacity(config.steps);
    let step_size = T::lit(config.step_size);
    for step in 0..config.steps {
        let draws = match (&fixed, config.fixed_batch) {
            (Some(d), true) => Vec::clone(d),
            _ => draws_for(step)?,
        };
        let obj = eot_objective(detector, texture, &spec, &draws, &backgrounds, config.temperature)?;
        if config.fixed_batch && fixed.is_none() {
            fixed = Some(draws);
        }
        if !obj.loss.is_finite() {
            return Err(Error::AttackDiverged { step, loss: obj.loss });
        }
        trace.push(obj.loss);
        on_step(step, obj.loss);
        if let Some(threshold) = config.early_stop {
            if obj.fooled as f64 / config.batch_transforms as f64 >= threshold {
                return Ok(AttackOutcome {
                    spec,
                    loss_trace: trace,
                    stopped_early: true,
                });
            }
        }
        let scale = if config.normalize_gradient {
            match masked_rms(&obj.grad, &spec.mask) {
                Some(rms) => step_size / rms,
                None => T::zero(),
            }
        } else {
            step_size
        };
        Zip::from(&mut spec.delta).and(&obj.grad).for_each(|d, &g| *d -= scale * g);
        spec.project(texture);
    }
    Ok(AttackOutcome {
        spec,
        loss_trace: trace,
        stopped_early: false,
    })
}
