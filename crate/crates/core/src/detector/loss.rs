use ndarray::Array3;

use super::raw::{RawPrediction, CLS, TH, TO, TW, TX, TY};
use crate::geometry::{iou, BBox};
use crate::scalar::{log_sum_exp, sigmoid, softmax, softplus, Scalar};

pub const LAMBDA_COORD: f64 = 5.0;
pub const LAMBDA_NOOBJ: f64 = 0.5;
/// Non-responsible cells whose decoded box already overlaps the ground truth
/// by more than this are left out of the no-object term.
pub const NOOBJ_IGNORE_IOU: f64 = 0.6;

/// Grid cell `(row, col)` containing a unit-coordinate point. A point on a
/// cell boundary goes to the lower-index cell.
pub fn responsible_cell(grid: usize, cx: f64, cy: f64) -> (usize, usize) {
    let pick = |v: f64| ((v * grid as f64).ceil() as isize - 1).clamp(0, grid as isize - 1) as usize;
    (pick(cy), pick(cx))
}

/// Composite single-anchor detection loss and its gradient with respect to
/// the raw values:
///
/// - coordinates (responsible cell): `λ_coord·[(σ(tx)−x̂)² + (σ(ty)−ŷ)² + (√w−√ŵ)² + (√h−√ĥ)²]`
/// - objectness: `BCE(σ(to), 1)` at the responsible cell, `λ_noobj·BCE(σ(to), 0)`
///   at every other cell whose decoded box has IoU ≤ [`NOOBJ_IGNORE_IOU`] with the ground truth
/// - class: softmax cross-entropy at the responsible cell
pub fn training_loss<T: Scalar>(raw: &RawPrediction<T>, gt_box: &BBox, gt_class: usize) -> (T, Array3<T>) {
    let g = raw.grid();
    let v = &raw.values;
    let mut grad = Array3::<T>::zeros(v.dim());
    let (rr, rc) = responsible_cell(g, gt_box.cx, gt_box.cy);
    let lc = T::lit(LAMBDA_COORD);
    let ln = T::lit(LAMBDA_NOOBJ);
    let two = T::lit(2.0);
    let mut loss = T::zero();

    for row in 0..g {
        for col in 0..g {
            let to = v[[row, col, TO]];
            if (row, col) != (rr, rc) && iou(&raw.decode_box(row, col), gt_box) <= NOOBJ_IGNORE_IOU {
                loss += ln * softplus(to);
                grad[[row, col, TO]] = ln * sigmoid(to);
            }
        }
    }

    let x_hat = T::lit(gt_box.cx * g as f64 - rc as f64);
    let y_hat = T::lit(gt_box.cy * g as f64 - rr as f64);
    let sx = sigmoid(v[[rr, rc, TX]]);
    let sy = sigmoid(v[[rr, rc, TY]]);
    let sqrt_w = (T::lit(raw.anchor[0]) * v[[rr, rc, TW]].exp()).sqrt();
    let sqrt_h = (T::lit(raw.anchor[1]) * v[[rr, rc, TH]].exp()).sqrt();
    let sqrt_w_hat = T::lit(gt_box.w.sqrt());
    let sqrt_h_hat = T::lit(gt_box.h.sqrt());
    loss += lc
        * ((sx - x_hat).powi(2) + (sy - y_hat).powi(2) + (sqrt_w - sqrt_w_hat).powi(2) + (sqrt_h - sqrt_h_hat).powi(2));
    grad[[rr, rc, TX]] = lc * two * (sx - x_hat) * sx * (T::one() - sx);
    grad[[rr, rc, TY]] = lc * two * (sy - y_hat) * sy * (T::one() - sy);
    // d/dtw (√(a·e^tw) − c)² = (√w − c)·√w
    grad[[rr, rc, TW]] = lc * (sqrt_w - sqrt_w_hat) * sqrt_w;
    grad[[rr, rc, TH]] = lc * (sqrt_h - sqrt_h_hat) * sqrt_h;

    let to = v[[rr, rc, TO]];
    loss += softplus(-to);
    grad[[rr, rc, TO]] = sigmoid(to) - T::one();

    let logits: Vec<T> = (0..raw.classes()).map(|k| v[[rr, rc, CLS + k]]).collect();
    loss += log_sum_exp(&logits) - logits[gt_class];
    for (k, p) in softmax(&logits).into_iter().enumerate() {
        grad[[rr, rc, CLS + k]] = p - if k == gt_class { T::one() } else { T::zero() };
    }
    (loss, grad)
}
