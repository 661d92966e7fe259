use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox};
use crate::scalar::{sigmoid, softmax, Scalar};

pub const TX: usize = 0;
pub const TY: usize = 1;
pub const TW: usize = 2;
pub const TH: usize = 3;
pub const TO: usize = 4;
pub const CLS: usize = 5;

/// Raw head output: `G × G × (5 + C)` values `(tx, ty, tw, th, to, logits…)`
/// per cell, plus the anchor used to decode box sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPrediction<T> {
    pub values: Array3<T>,
    pub anchor: [f64; 2],
}

impl<T: Scalar> RawPrediction<T> {
    pub fn new(values: Array3<T>, anchor: [f64; 2]) -> Self {
        Self { values, anchor }
    }

    pub fn grid(&self) -> usize {
        self.values.dim().0
    }

    pub fn classes(&self) -> usize {
        self.values.dim().2 - CLS
    }

    pub fn cell_index(&self, row: usize, col: usize) -> usize {
        row * self.grid() + col
    }

    /// Decoded box of a cell: center offset `σ(tx), σ(ty)` within the cell,
    /// size `anchor · exp(tw, th)`.
    pub fn decode_box(&self, row: usize, col: usize) -> BBox {
        let g = self.grid() as f64;
        let v = |k: usize| self.values[[row, col, k]].as_f64();
        BBox::new(
            (col as f64 + sigmoid(v(TX))) / g,
            (row as f64 + sigmoid(v(TY))) / g,
            self.anchor[0] * v(TW).exp(),
            self.anchor[1] * v(TH).exp(),
        )
    }

    pub fn objectness(&self, row: usize, col: usize) -> T {
        sigmoid(self.values[[row, col, TO]])
    }

    pub fn class_probs(&self, row: usize, col: usize) -> Vec<T> {
        let logits: Vec<T> = (0..self.classes()).map(|k| self.values[[row, col, CLS + k]]).collect();
        softmax(&logits)
    }
}

/// One detection: the cell's best class with score `objectness · p(class)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
    /// Row-major grid cell that produced the detection.
    pub cell: usize,
}

pub const DEFAULT_THRESHOLD: f64 = 0.25;
pub const DEFAULT_NMS_IOU: f64 = 0.5;

/// Keeps cells whose best-class score reaches `threshold`, then applies NMS.
pub fn decode_detections<T: Scalar>(raw: &RawPrediction<T>, threshold: f64, nms_iou: f64) -> Vec<Detection> {
    let g = raw.grid();
    let mut dets = Vec::new();
    for row in 0..g {
        for col in 0..g {
            let obj = raw.objectness(row, col).as_f64();
            let probs = raw.class_probs(row, col);
            let (class_id, p) = probs
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (k, &p)| if p > best.1 { (k, p) } else { best });
            let score = obj * p.as_f64();
            if score >= threshold {
                dets.push(Detection {
                    bbox: raw.decode_box(row, col),
                    class_id,
                    score,
                    cell: raw.cell_index(row, col),
                });
            }
        }
    }
    nms(dets, nms_iou)
}

/// Greedy per-class suppression in descending score order (ties: lower cell
/// first). A detection is dropped when its IoU with an already kept detection
/// of the same class exceeds `iou_threshold`.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.cell.cmp(&b.cell)));
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(cx: f64, w: f64, score: f64, cell: usize) -> Detection {
        Detection {
            bbox: BBox::new(cx, 0.5, w, 0.2),
            class_id: 0,
            score,
            cell,
        }
    }

    #[test]
    fn zero_raw_yields_nothing_at_default_threshold() {
        let raw = RawPrediction::new(Array3::<f64>::zeros((4, 4, 8)), [0.45, 0.45]);
        // σ(0)·(1/3) = 1/6 < 0.25.
        assert!(decode_detections(&raw, DEFAULT_THRESHOLD, DEFAULT_NMS_IOU).is_empty());
        assert_eq!(decode_detections(&raw, 1.0 / 6.0, DEFAULT_NMS_IOU).len(), 16);
    }

    #[test]
    fn saturated_cell_gives_one_detection() {
        let mut v = Array3::<f64>::from_elem((4, 4, 8), 0.0);
        for r in 0..4 {
            for c in 0..4 {
                v[[r, c, TO]] = -50.0;
            }
        }
        v[[2, 1, TO]] = 50.0;
        v[[2, 1, CLS + 2]] = 50.0;
        let dets = decode_detections(&RawPrediction::new(v, [0.45, 0.45]), 0.25, 0.5);
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].class_id, 2);
        assert_eq!(dets[0].cell, 9);
        assert!((dets[0].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nms_basics() {
        assert!(nms(vec![], 0.5).is_empty());
        let disjoint = vec![det(0.1, 0.1, 0.5, 0), det(0.5, 0.1, 0.6, 1), det(0.9, 0.1, 0.7, 2)];
        assert_eq!(nms(disjoint, 0.5).len(), 3);
        // IoU 0.8 pair: widths 0.5, offset chosen so overlap/union = 0.8.
        let offset = 0.5 * (1.0 - 0.8) / (1.0 + 0.8);
        let a = det(0.5, 0.5, 0.9, 0);
        let b = det(0.5 + offset, 0.5, 0.6, 1);
        assert!((iou(&a.bbox, &b.bbox) - 0.8).abs() < 1e-12);
        assert_eq!(nms(vec![b, a], 0.5), vec![a]);
    }

    #[test]
    fn nms_chain_keeps_ends() {
        // A overlaps B, B overlaps C, A does not overlap C.
        let a = det(0.30, 0.2, 0.9, 0);
        let b = det(0.35, 0.2, 0.8, 1);
        let c = det(0.40, 0.2, 0.7, 2);
        assert!(iou(&a.bbox, &b.bbox) > 0.5 && iou(&b.bbox, &c.bbox) > 0.5 && iou(&a.bbox, &c.bbox) <= 0.5);
        assert_eq!(nms(vec![c, b, a], 0.5), vec![a, c]);
    }

    #[test]
    fn nms_is_per_class() {
        let a = det(0.5, 0.2, 0.9, 0);
        let mut b = a;
        b.class_id = 1;
        b.score = 0.8;
        b.cell = 1;
        assert_eq!(nms(vec![a, b], 0.5).len(), 2);
    }

    #[test]
    fn raising_threshold_never_adds_detections() {
        use rand::Rng as _;
        let mut rng = crate::seed::rng(3);
        for _ in 0..50 {
            let v = Array3::from_shape_fn((4, 4, 8), |_| rng.random_range(-3.0..3.0));
            let raw = RawPrediction::new(v, [0.45, 0.45]);
            let mut prev = usize::MAX;
            for t in [0.0, 0.1, 0.25, 0.4, 0.6, 0.9] {
                let n = decode_detections(&raw, t, 0.5).len();
                assert!(n <= prev);
                prev = n;
            }
        }
    }
}
