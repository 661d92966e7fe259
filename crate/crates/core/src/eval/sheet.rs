use image::{Rgb, RgbImage};

use super::report::{eval_backgrounds, EvalReport, EvalTarget};
use crate::attack::apply_patch;
use crate::detector::Detection;
use crate::error::Result;
use crate::geometry::BBox;
use crate::scalar::Scalar;
use crate::scenegen::{compose_scene, to_rgb8};
use crate::Image;

const UPSCALE: u32 = 3;
const CLASS_COLORS: [[u8; 3]; 3] = [[255, 40, 40], [40, 120, 255], [255, 200, 0]];
const CLASS_LETTERS: [char; 3] = ['S', 'L', 'Y'];
const GT_COLOR: [u8; 3] = [0, 230, 0];

/// A scene with the boxes to draw over it.
pub struct AnnotatedFrame<T> {
    pub image: Image<T>,
    pub gt_box: Option<BBox>,
    pub detections: Vec<Detection>,
}

// 3×5 bitmaps, one row per entry, most significant bit on the left.
fn glyph(c: char) -> [u8; 5] {
    match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        'S' => [7, 4, 7, 1, 7],
        'L' => [4, 4, 4, 4, 7],
        'Y' => [5, 5, 2, 2, 2],
        _ => [0; 5],
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(color));
    }
}

fn text(img: &mut RgbImage, x: i64, y: i64, s: &str, color: [u8; 3]) {
    for (i, c) in s.chars().enumerate() {
        let g = glyph(c);
        for (row, bits) in g.iter().enumerate() {
            for col in 0..3 {
                if bits >> (2 - col) & 1 == 1 {
                    put(img, x + 4 * i as i64 + col, y + row as i64, color);
                }
            }
        }
    }
}

fn rect(img: &mut RgbImage, ox: i64, oy: i64, size: f64, b: &BBox, color: [u8; 3]) {
    let (x0, x1) = ((ox as f64 + b.x0() * size) as i64, (ox as f64 + b.x1() * size) as i64 - 1);
    let (y0, y1) = ((oy as f64 + b.y0() * size) as i64, (oy as f64 + b.y1() * size) as i64 - 1);
    for x in x0..=x1 {
        put(img, x, y0, color);
        put(img, x, y1, color);
    }
    for y in y0..=y1 {
        put(img, x0, y, color);
        put(img, x1, y, color);
    }
}

/// Tiles frames into a grid, upscaled, with ground truth in green and each
/// detection in its class color labeled with class letter and score.
pub fn contact_sheet<T: Scalar>(frames: &[AnnotatedFrame<T>], columns: usize) -> RgbImage {
    let columns = columns.max(1);
    let rows = frames.len().div_ceil(columns).max(1);
    let tile = frames.first().map_or(64, |f| f.image.dim().1 as u32) * UPSCALE;
    let pad = 8u32;
    let mut sheet = RgbImage::from_pixel(columns as u32 * (tile + pad), rows as u32 * (tile + pad), Rgb([20, 20, 20]));
    for (i, f) in frames.iter().enumerate() {
        let ox = (i % columns) as u32 * (tile + pad) + pad / 2;
        let oy = (i / columns) as u32 * (tile + pad) + pad / 2;
        let rgb = to_rgb8(&f.image);
        for y in 0..tile {
            for x in 0..tile {
                sheet.put_pixel(ox + x, oy + y, *rgb.get_pixel(x / UPSCALE, y / UPSCALE));
            }
        }
        let size = tile as f64;
        if let Some(gt) = &f.gt_box {
            rect(&mut sheet, ox as i64, oy as i64, size, gt, GT_COLOR);
        }
        for d in &f.detections {
            let color = CLASS_COLORS[d.class_id % CLASS_COLORS.len()];
            rect(&mut sheet, ox as i64, oy as i64, size, &d.bbox, color);
            let label = format!("{}{:.2}", CLASS_LETTERS[d.class_id % CLASS_LETTERS.len()], d.score);
            let lx = (ox as f64 + d.bbox.x0() * size) as i64 + 1;
            let ly = (oy as f64 + d.bbox.y0() * size) as i64 + 1;
            text(&mut sheet, lx, ly, &label, color);
        }
    }
    sheet
}

/// Recomposes up to `max` evenly spaced records of a report, patched when the
/// report carries patched observations.
pub fn report_frames<T: Scalar>(target: EvalTarget<'_, T>, report: &EvalReport, max: usize) -> Result<Vec<AnnotatedFrame<T>>> {
    let backgrounds = eval_backgrounds::<T>(&report.grid, report.meta.seed);
    let tex = match target.patch {
        Some(p) => apply_patch(target.texture, p),
        None => target.texture.clone(),
    };
    let n = report.records.len();
    let stride = n.div_ceil(max.max(1)).max(1);
    report
        .records
        .iter()
        .step_by(stride)
        .take(max)
        .map(|r| {
            let scene = compose_scene(&backgrounds[r.background], &tex, &r.pose)?;
            let obs = r.patched.as_ref().unwrap_or(&r.clean);
            Ok(AnnotatedFrame {
                image: scene.image,
                gt_box: Some(r.gt_box),
                detections: obs.detections.clone(),
            })
        })
        .collect()
}
