use ndarray::Array3;

use super::patch::{AttackMode, PatchSpec};
use crate::detector::{responsible_cell, RawPrediction, CLS, TO};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::scalar::{sigmoid, softmax, Scalar};

/// Smoothing temperature of the max over cells.
pub const DEFAULT_TEMPERATURE: f64 = 100.0;
/// A cell takes part in the loss when its decoded box overlaps the sign by more than this.
pub const GATE_IOU: f64 = 0.1;
/// Weight of the suppression term outside the responsible cell in mislabel mode.
pub const MISLABEL_SUPPRESS_WEIGHT: f64 = 0.3;

fn gated_cells<T: Scalar>(raw: &RawPrediction<T>, gt_box: &BBox) -> Vec<(usize, usize)> {
    let g = raw.grid();
    (0..g)
        .flat_map(|r| (0..g).map(move |c| (r, c)))
        .filter(|&(r, c)| iou(&raw.decode_box(r, c), gt_box) > GATE_IOU)
        .collect()
}

/// Smoothed max of `σ(to) · p(class)` over `cells`, accumulating `weight ·`
/// its gradient into `grad`.
///
/// The smoothing is a log-mean-exp, so a single active cell (or several equal
/// ones) yields exactly its score.
fn smoothed_max_score<T: Scalar>(
    raw: &RawPrediction<T>,
    cells: &[(usize, usize)],
    class: usize,
    temperature: T,
    weight: T,
    grad: &mut Array3<T>,
) -> T {
    if cells.is_empty() {
        return T::zero();
    }
    let v = &raw.values;
    let parts: Vec<(T, T, Vec<T>)> = cells
        .iter()
        .map(|&(r, c)| {
            let obj = sigmoid(v[[r, c, TO]]);
            let probs = raw.class_probs(r, c);
            (obj * probs[class], obj, probs)
        })
        .collect();
    let m = parts.iter().map(|p| p.0).fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = parts.iter().map(|p| ((p.0 - m) * temperature).exp()).collect();
    let total: T = exps.iter().copied().sum();
    let n = T::lit(cells.len() as f64);
    let loss = m + (total / n).ln() / temperature;
    for ((&(r, c), (score, obj, probs)), e) in cells.iter().zip(&parts).zip(&exps) {
        let w = weight * *e / total;
        grad[[r, c, TO]] += w * *score * (T::one() - *obj);
        for (k, &pk) in probs.iter().enumerate() {
            let kron = if k == class { T::one() } else { T::zero() };
            grad[[r, c, CLS + k]] += w * *obj * probs[class] * (kron - pk);
        }
    }
    loss
}

/// Attacker objective on one raw prediction; lower is better for the attacker.
///
/// Disappearance: smoothed max of the victim score over cells whose decoded
/// box overlaps `gt_box`. Mislabel: logit margin `z_victim − z_target` at the
/// cell responsible for the sign plus a down-weighted disappearance term over
/// the other overlapping cells.
pub fn attack_loss<T: Scalar>(
    raw: &RawPrediction<T>,
    spec: &PatchSpec<T>,
    gt_box: &BBox,
    temperature: f64,
) -> Result<(T, Array3<T>)> {
    spec.validate_objective()?;
    let victim = spec.victim_class.id();
    if victim >= raw.classes() {
        return Err(Error::InvalidClass(victim));
    }
    let temp = T::lit(temperature);
    let mut grad = Array3::zeros(raw.values.dim());
    let cells = gated_cells(raw, gt_box);
    let loss = match spec.mode {
        AttackMode::Disappearance => smoothed_max_score(raw, &cells, victim, temp, T::one(), &mut grad),
        AttackMode::Mislabel => {
            let target = spec.target_class.expect("validated").id();
            if target >= raw.classes() {
                return Err(Error::InvalidClass(target));
            }
            let (r, c) = responsible_cell(raw.grid(), gt_box.cx, gt_box.cy);
            let margin = raw.values[[r, c, CLS + victim]] - raw.values[[r, c, CLS + target]];
            grad[[r, c, CLS + victim]] += T::one();
            grad[[r, c, CLS + target]] -= T::one();
            let others: Vec<_> = cells.into_iter().filter(|&rc| rc != (r, c)).collect();
            let w = T::lit(MISLABEL_SUPPRESS_WEIGHT);
            margin + w * smoothed_max_score(raw, &others, victim, temp, w, &mut grad)
        }
    };
    Ok((loss, grad))
}

/// Reference value of the disappearance objective without smoothing.
pub fn hard_max_score<T: Scalar>(raw: &RawPrediction<T>, victim: usize, gt_box: &BBox) -> f64 {
    gated_cells(raw, gt_box)
        .into_iter()
        .map(|(r, c)| {
            let logits: Vec<T> = (0..raw.classes()).map(|k| raw.values[[r, c, CLS + k]]).collect();
            (sigmoid(raw.values[[r, c, TO]]) * softmax(&logits)[victim]).as_f64()
        })
        .fold(0.0, f64::max)
}
