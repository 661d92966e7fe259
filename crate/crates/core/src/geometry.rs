//! Boxes and planar homographies in unit image coordinates.
//!
//! Unit coordinates put `(0, 0)` at the top-left corner of the image and
//! `(1, 1)` at the bottom-right; `x` runs along columns, `y` along rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box as center and size, in unit coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn x0(&self) -> f64 {
        self.cx - 0.5 * self.w
    }
    pub fn x1(&self) -> f64 {
        self.cx + 0.5 * self.w
    }
    pub fn y0(&self) -> f64 {
        self.cy - 0.5 * self.h
    }
    pub fn y1(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }
}

/// Intersection over union. Degenerate boxes have IoU 0 with everything.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x1().min(b.x1()) - a.x0().max(b.x0())).max(0.0);
    let ih = (a.y1().min(b.y1()) - a.y0().max(b.y0())).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// 3×3 projective transform acting on homogeneous column vectors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Homography(pub [[f64; 3]; 3]);

impl Default for Homography {
    fn default() -> Self {
        Self::identity()
    }
}

impl Homography {
    pub const fn identity() -> Self {
        Homography([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Homography([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])
    }

    pub fn scaling(sx: f64, sy: f64) -> Self {
        Homography([[sx, 0.0, 0.0], [0.0, sy, 0.0], [0.0, 0.0, 1.0]])
    }

    /// Rotation about the origin. Exactly the identity for zero degrees.
    pub fn rotation_deg(deg: f64) -> Self {
        if deg == 0.0 {
            return Self::identity();
        }
        let (s, c) = deg.to_radians().sin_cos();
        Homography([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    }

    /// `self ∘ rhs`: applies `rhs` first.
    pub fn then_after(&self, rhs: &Homography) -> Homography {
        let a = &self.0;
        let b = &rhs.0;
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
            }
        }
        Homography(m)
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn is_invertible(&self) -> bool {
        self.det().abs() > 1e-8
    }

    pub fn inverse(&self) -> Result<Homography> {
        let det = self.det();
        if det.abs() <= 1e-8 || !det.is_finite() {
            return Err(Error::SingularTransform { det });
        }
        let m = &self.0;
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| {
            m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]
        };
        let adj = [
            [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
            [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
            [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
        ];
        let mut inv = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                inv[i][j] = adj[i][j] / det;
            }
        }
        Ok(Homography(inv))
    }

    /// Maps a point; `None` when it lands on or behind the line at infinity.
    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let m = &self.0;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        if w <= 1e-12 {
            return None;
        }
        let px = m[0][0] * x + m[0][1] * y + m[0][2];
        let py = m[1][0] * x + m[1][1] * y + m[1][2];
        if w == 1.0 {
            Some((px, py))
        } else {
            Some((px / w, py / w))
        }
    }

    /// Homography taking each `src[i]` to `dst[i]` (direct linear transform
    /// with `h22 = 1`).
    pub fn from_correspondences(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Result<Homography> {
        let mut a = [[0.0_f64; 9]; 8];
        for k in 0..4 {
            let (x, y) = src[k];
            let (u, v) = dst[k];
            a[2 * k] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
            a[2 * k + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
        }
        let h = solve8(a).ok_or(Error::SingularTransform { det: 0.0 })?;
        Ok(Homography([
            [h[0], h[1], h[2]],
            [h[3], h[4], h[5]],
            [h[6], h[7], 1.0],
        ]))
    }
}

/// Gaussian elimination with partial pivoting on an 8×9 augmented system.
fn solve8(mut a: [[f64; 9]; 8]) -> Option<[f64; 8]> {
    for col in 0..8 {
        let pivot = (col..8).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-14 {
            return None;
        }
        a.swap(col, pivot);
        for row in 0..8 {
            if row != col {
                let f = a[row][col] / a[col][col];
                if f != 0.0 {
                    for k in col..9 {
                        a[row][k] -= f * a[col][k];
                    }
                }
            }
        }
    }
    let mut x = [0.0; 8];
    for i in 0..8 {
        x[i] = a[i][8] / a[i][i];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_reference_values() {
        let a = BBox::new(0.5, 0.5, 1.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        let far = BBox::new(3.0, 3.0, 1.0, 1.0);
        assert_eq!(iou(&a, &far), 0.0);
        // Half-width offset: overlap 0.5, union 1.5.
        let shifted = BBox::new(1.0, 0.5, 1.0, 1.0);
        assert!((iou(&a, &shifted) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn inverse_round_trips() {
        let h = Homography::translation(0.3, -0.1)
            .then_after(&Homography::rotation_deg(12.0))
            .then_after(&Homography::scaling(0.4, 0.4));
        let p = h.then_after(&h.inverse().unwrap());
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((p.0[i][j] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn singular_inverse_is_rejected() {
        let h = Homography::scaling(0.0, 1.0);
        assert!(matches!(h.inverse(), Err(Error::SingularTransform { .. })));
    }

    #[test]
    fn correspondences_reproduce_points() {
        let src = [(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)];
        let dst = [(-0.52, -0.49), (0.51, -0.53), (0.48, 0.5), (-0.5, 0.47)];
        let h = Homography::from_correspondences(&src, &dst).unwrap();
        for k in 0..4 {
            let (u, v) = h.apply(src[k].0, src[k].1).unwrap();
            assert!((u - dst[k].0).abs() < 1e-12 && (v - dst[k].1).abs() < 1e-12);
        }
    }
}
