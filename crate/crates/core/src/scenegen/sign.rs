use ndarray::{Array2, Array3};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;
use crate::Image;

pub const TEXTURE_SIZE: usize = 64;
pub const NUM_CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignClass {
    Stop,
    SpeedLimit,
    Yield,
}

impl SignClass {
    pub const ALL: [SignClass; NUM_CLASSES] = [SignClass::Stop, SignClass::SpeedLimit, SignClass::Yield];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL.get(id).copied().ok_or(Error::InvalidClass(id))
    }

    pub fn name(self) -> &'static str {
        match self {
            SignClass::Stop => "stop",
            SignClass::SpeedLimit => "speed-limit",
            SignClass::Yield => "yield",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    /// Convex outline of the silhouette in centered texture unit coordinates
    /// (the texture spans `[-0.5, 0.5]²`).
    pub fn outline(self) -> Vec<(f64, f64)> {
        let s = TEXTURE_SIZE as f64;
        match self {
            SignClass::Stop => {
                let a = OCTAGON_APOTHEM;
                let b = a * (std::f64::consts::SQRT_2 - 1.0);
                [(a, b), (b, a), (-b, a), (-a, b), (-a, -b), (-b, -a), (b, -a), (a, -b)]
                    .into_iter()
                    .map(|(x, y)| (x / s, y / s))
                    .collect()
            }
            SignClass::SpeedLimit => {
                let n = 64;
                let r = DISK_RADIUS / (std::f64::consts::PI / n as f64).cos();
                (0..n)
                    .map(|k| {
                        let t = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                        (r * t.cos() / s, r * t.sin() / s)
                    })
                    .collect()
            }
            SignClass::Yield => TRIANGLE.iter().map(|&(x, y)| (x / s, y / s)).collect(),
        }
    }
}

// Silhouette geometry in texture pixels, relative to the texture center.
const OCTAGON_APOTHEM: f64 = 31.25;
const DISK_RADIUS: f64 = 31.5;
const TRIANGLE: [(f64, f64); 3] = [(-31.25, -24.0), (31.25, -24.0), (0.0, 31.25)];

fn in_octagon(x: f64, y: f64, apothem: f64) -> bool {
    x.abs() <= apothem && y.abs() <= apothem && x.abs() + y.abs() <= apothem * std::f64::consts::SQRT_2
}

/// Smallest distance from `(x, y)` to the triangle's edges, negative outside.
fn triangle_depth(x: f64, y: f64) -> f64 {
    let mut depth = f64::INFINITY;
    for k in 0..3 {
        let (ax, ay) = TRIANGLE[k];
        let (bx, by) = TRIANGLE[(k + 1) % 3];
        let (ex, ey) = (bx - ax, by - ay);
        let len = (ex * ex + ey * ey).sqrt();
        // Vertices run clockwise on screen (y down), so the interior lies to the right.
        let d = (ex * (y - ay) - ey * (x - ax)) / len;
        depth = depth.min(d);
    }
    depth
}

/// Relative coordinate of a texture pixel center.
#[inline]
fn rel(i: usize) -> f64 {
    i as f64 + 0.5 - TEXTURE_SIZE as f64 / 2.0
}

/// Whether texture pixel `(row, col)` belongs to the class silhouette.
pub fn silhouette_contains(class: SignClass, row: usize, col: usize) -> bool {
    let (x, y) = (rel(col), rel(row));
    match class {
        SignClass::Stop => in_octagon(x, y, OCTAGON_APOTHEM),
        SignClass::SpeedLimit => x * x + y * y <= DISK_RADIUS * DISK_RADIUS,
        SignClass::Yield => triangle_depth(x, y) >= 0.0,
    }
}

pub fn silhouette_mask(class: SignClass) -> Array2<bool> {
    Array2::from_shape_fn((TEXTURE_SIZE, TEXTURE_SIZE), |(r, c)| silhouette_contains(class, r, c))
}

/// A sign's printable surface: RGBA with binary alpha. RGB is zero wherever
/// alpha is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalTexture<T> {
    pub rgba: Image<T>,
    pub class: SignClass,
}

impl<T: Scalar> CanonicalTexture<T> {
    pub fn silhouette(&self) -> Array2<bool> {
        self.rgba
            .index_axis(ndarray::Axis(2), 3)
            .mapv(|a| a > T::zero())
    }

    pub fn size(&self) -> (usize, usize) {
        let (h, w, _) = self.rgba.dim();
        (h, w)
    }

    pub fn cast<U: Scalar>(&self) -> CanonicalTexture<U> {
        CanonicalTexture {
            rgba: self.rgba.mapv(|v| U::lit(v.as_f64())),
            class: self.class,
        }
    }
}

type Rgb = [f64; 3];

fn jittered(base: Rgb, rng: &mut seed::Rng) -> Rgb {
    let mut c = base;
    for v in c.iter_mut() {
        *v = (*v + rng.random_range(-0.03..=0.03)).clamp(0.0, 1.0);
    }
    c
}

// Glyph strokes as (row0, row1, col0, col1) rectangles, half-open, relative to
// a letter cell of 10 rows × 8 columns.
const LETTER_S: &[(usize, usize, usize, usize)] =
    &[(0, 2, 0, 8), (4, 6, 0, 8), (8, 10, 0, 8), (0, 5, 0, 2), (4, 10, 6, 8)];
const LETTER_T: &[(usize, usize, usize, usize)] = &[(0, 2, 0, 8), (0, 10, 3, 5)];
const LETTER_O: &[(usize, usize, usize, usize)] =
    &[(0, 2, 0, 8), (8, 10, 0, 8), (0, 10, 0, 2), (0, 10, 6, 8)];
const LETTER_P: &[(usize, usize, usize, usize)] =
    &[(0, 2, 0, 8), (4, 6, 0, 8), (0, 10, 0, 2), (0, 6, 6, 8)];

fn in_strokes(strokes: &[(usize, usize, usize, usize)], r: usize, c: usize) -> bool {
    strokes.iter().any(|&(r0, r1, c0, c1)| (r0..r1).contains(&r) && (c0..c1).contains(&c))
}

/// Renders the canonical texture for a sign class. Colors carry a small
/// seed-dependent jitter; geometry is fixed per class.
pub fn render_canonical_sign<T: Scalar>(class_id: usize, seed: u64) -> Result<CanonicalTexture<T>> {
    let class = SignClass::from_id(class_id)?;
    let mut rng = seed::rng(seed::derive_index(seed, class_id as u64));
    let red = jittered([0.80, 0.08, 0.10], &mut rng);
    let white = jittered([0.94, 0.94, 0.92], &mut rng);
    let black = jittered([0.06, 0.06, 0.08], &mut rng);
    let n = TEXTURE_SIZE;
    let mut rgba = Array3::<T>::zeros((n, n, 4));
    for r in 0..n {
        for c in 0..n {
            if !silhouette_contains(class, r, c) {
                continue;
            }
            let (x, y) = (rel(c), rel(r));
            let color = match class {
                SignClass::Stop => {
                    if !in_octagon(x, y, OCTAGON_APOTHEM - 4.0) {
                        white
                    } else if (27..37).contains(&r) && (13..51).contains(&c) {
                        let k = (c - 13) / 10;
                        let lc = (c - 13) % 10;
                        let letter = [LETTER_S, LETTER_T, LETTER_O, LETTER_P][k];
                        if lc < 8 && in_strokes(letter, r - 27, lc) {
                            white
                        } else {
                            red
                        }
                    } else {
                        red
                    }
                }
                SignClass::SpeedLimit => {
                    let d = (x * x + y * y).sqrt();
                    if d >= DISK_RADIUS - 7.0 {
                        red
                    } else if (22..42).contains(&r) && ((17..29).contains(&c) || (35..47).contains(&c)) {
                        // "50": a five and a zero, each 12 columns × 20 rows.
                        let (lr, lc, five) = if c < 29 { (r - 22, c - 17, true) } else { (r - 22, c - 35, false) };
                        let on = if five {
                            (lr < 3) || (lr < 10 && lc < 3) || ((8..11).contains(&lr)) || (lr >= 10 && lc >= 9) || (lr >= 17)
                        } else {
                            lr < 3 || lr >= 17 || lc < 3 || lc >= 9
                        };
                        if on {
                            black
                        } else {
                            white
                        }
                    } else {
                        white
                    }
                }
                SignClass::Yield => {
                    if triangle_depth(x, y) < 7.0 {
                        red
                    } else {
                        white
                    }
                }
            };
            for ch in 0..3 {
                rgba[[r, c, ch]] = T::lit(color[ch]);
            }
            rgba[[r, c, 3]] = T::one();
        }
    }
    Ok(CanonicalTexture { rgba, class })
}
