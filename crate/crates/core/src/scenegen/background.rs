use ndarray::Array3;
use rand::Rng as _;

use crate::scalar::Scalar;
use crate::seed;
use crate::Image;

pub const SCENE_SIZE: usize = 64;

/// A background image and the pool index it was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct Background<T> {
    pub id: usize,
    pub image: Image<T>,
}

// Muted street-scene tones; nothing red-dominant so clutter never mimics a sign.
const PALETTE: [[f64; 3]; 8] = [
    [0.45, 0.62, 0.82], // sky
    [0.30, 0.52, 0.25], // foliage
    [0.42, 0.42, 0.44], // asphalt
    [0.70, 0.66, 0.55], // concrete
    [0.55, 0.47, 0.36], // brick-brown
    [0.22, 0.30, 0.40], // shadow blue
    [0.62, 0.70, 0.58], // pale green
    [0.80, 0.80, 0.78], // overcast
];

fn tone(rng: &mut seed::Rng) -> [f64; 3] {
    let base = PALETTE[rng.random_range(0..PALETTE.len())];
    let shift: f64 = rng.random_range(-0.08..0.08);
    let mut c = [0.0; 3];
    for ch in 0..3 {
        c[ch] = (base[ch] + shift + rng.random_range(-0.04..0.04)).clamp(0.05, 0.95);
    }
    c
}

/// Low-frequency color field (bilinearly upsampled 4×4 control grid) with a
/// few rectangles and disks of clutter.
pub fn render_background<T: Scalar>(height: usize, width: usize, seed: u64) -> Image<T> {
    let mut rng = seed::rng(seed);
    const G: usize = 4;
    let mut grid = [[[0.0; 3]; G]; G];
    for row in grid.iter_mut() {
        for cell in row.iter_mut() {
            *cell = tone(&mut rng);
        }
    }
    let mut img = Array3::<f64>::zeros((height, width, 3));
    for i in 0..height {
        let gy = (i as f64 + 0.5) / height as f64 * (G - 1) as f64;
        let y0 = (gy.floor() as usize).min(G - 2);
        let fy = gy - y0 as f64;
        for j in 0..width {
            let gx = (j as f64 + 0.5) / width as f64 * (G - 1) as f64;
            let x0 = (gx.floor() as usize).min(G - 2);
            let fx = gx - x0 as f64;
            for ch in 0..3 {
                img[[i, j, ch]] = (1.0 - fy) * ((1.0 - fx) * grid[y0][x0][ch] + fx * grid[y0][x0 + 1][ch])
                    + fy * ((1.0 - fx) * grid[y0 + 1][x0][ch] + fx * grid[y0 + 1][x0 + 1][ch]);
            }
        }
    }
    let shapes = rng.random_range(2..=5);
    for _ in 0..shapes {
        let color = tone(&mut rng);
        let cx = rng.random_range(0.0..width as f64);
        let cy = rng.random_range(0.0..height as f64);
        if rng.random_bool(0.5) {
            let hw = rng.random_range(2.0..(width as f64 / 4.0));
            let hh = rng.random_range(2.0..(height as f64 / 3.0));
            for i in 0..height {
                for j in 0..width {
                    if (j as f64 + 0.5 - cx).abs() <= hw && (i as f64 + 0.5 - cy).abs() <= hh {
                        img[[i, j, 0]] = color[0];
                        img[[i, j, 1]] = color[1];
                        img[[i, j, 2]] = color[2];
                    }
                }
            }
        } else {
            let r = rng.random_range(3.0..(width as f64 / 5.0));
            for i in 0..height {
                for j in 0..width {
                    let (dx, dy) = (j as f64 + 0.5 - cx, i as f64 + 0.5 - cy);
                    if dx * dx + dy * dy <= r * r {
                        img[[i, j, 0]] = color[0];
                        img[[i, j, 1]] = color[1];
                        img[[i, j, 2]] = color[2];
                    }
                }
            }
        }
    }
    img.mapv(T::lit)
}

/// `count` backgrounds with ids `0..count`, each a pure function of `(seed, id)`.
pub fn background_pool<T: Scalar>(count: usize, seed: u64) -> Vec<Background<T>> {
    (0..count)
        .map(|id| Background {
            id,
            image: render_background(SCENE_SIZE, SCENE_SIZE, seed::derive_index(seed, id as u64)),
        })
        .collect()
}
