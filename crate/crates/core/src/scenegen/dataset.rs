use std::fs;
use std::path::Path;

use image::RgbImage;
use ndarray::Array3;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::background::{background_pool, SCENE_SIZE};
use super::compose::{compose_scene, Pose, SceneSample};
use super::sign::{render_canonical_sign, SignClass, NUM_CLASSES};
use crate::difftrans::PoseDistribution;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::scalar::Scalar;
use crate::seed;
use crate::Image;

pub const DATASET_SCHEMA: u32 = 1;

/// Draws `n` scenes. Sample `i` has class `i mod C` and is a pure function of
/// `(seed, i)`, so generation parallelizes without changing the result.
pub fn generate_dataset<T: Scalar>(
    n: usize,
    dist: &PoseDistribution,
    background_count: usize,
    seed: u64,
) -> Result<Vec<SceneSample<T>>> {
    if n == 0 {
        return Err(Error::param("dataset size must be > 0"));
    }
    if background_count == 0 {
        return Err(Error::param("background pool must be non-empty"));
    }
    dist.validate()?;
    let backgrounds = background_pool::<T>(background_count, seed::derive(seed, "backgrounds"));
    (0..n)
        .into_par_iter()
        .map(|i| {
            let sample_seed = seed::derive_index(seed, i as u64);
            let mut rng = seed::rng(sample_seed);
            let class = SignClass::ALL[i % NUM_CLASSES];
            let texture_seed: u64 = rng.random();
            let bg = &backgrounds[rng.random_range(0..background_count)];
            let texture = render_canonical_sign::<T>(class.id(), texture_seed)?;
            let pose = dist.sample_pose(&class.outline(), &mut rng)?;
            let mut sample = compose_scene(bg, &texture, &pose)?;
            sample.seed = sample_seed;
            Ok(sample)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub file: String,
    pub gt_box: BBox,
    pub gt_class: usize,
    pub class_name: String,
    pub pose: Pose,
    pub background_id: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub schema: u32,
    pub seed: u64,
    #[serde(default)]
    pub config_hash: Option<String>,
    pub samples: Vec<IndexEntry>,
}

pub fn to_rgb8<T: Scalar>(image: &Image<T>) -> RgbImage {
    let (h, w, _) = image.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (image[[y as usize, x as usize, c]].as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn from_rgb8<T: Scalar>(img: &RgbImage) -> Image<T> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        T::lit(img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
    })
}

/// Writes one PNG per sample plus `index.json`.
pub fn save_dataset<T: Scalar>(
    dir: &Path,
    samples: &[SceneSample<T>],
    seed: u64,
    config_hash: Option<&str>,
) -> Result<DatasetIndex> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let file = format!("scene_{i:05}.png");
        to_rgb8(&s.image).save(dir.join(&file))?;
        entries.push(IndexEntry {
            file,
            gt_box: s.gt_box,
            gt_class: s.gt_class.id(),
            class_name: s.gt_class.name().to_string(),
            pose: s.pose,
            background_id: s.background_id,
            seed: s.seed,
        });
    }
    let index = DatasetIndex {
        schema: DATASET_SCHEMA,
        seed,
        config_hash: config_hash.map(str::to_string),
        samples: entries,
    };
    fs::write(dir.join("index.json"), serde_json::to_vec_pretty(&index)?)?;
    Ok(index)
}

/// Reads a dataset written by [`save_dataset`]; pixels come back quantized
/// to 8 bits.
pub fn load_dataset<T: Scalar>(dir: &Path) -> Result<(DatasetIndex, Vec<SceneSample<T>>)> {
    let index: DatasetIndex = serde_json::from_slice(&fs::read(dir.join("index.json"))?)?;
    if index.schema != DATASET_SCHEMA {
        return Err(Error::Format(format!("unsupported dataset schema {}", index.schema)));
    }
    let samples = index
        .samples
        .iter()
        .map(|e| {
            let img = image::open(dir.join(&e.file))?.to_rgb8();
            if img.dimensions() != (SCENE_SIZE as u32, SCENE_SIZE as u32) {
                return Err(Error::Format(format!("{} is not {SCENE_SIZE}×{SCENE_SIZE}", e.file)));
            }
            Ok(SceneSample {
                image: from_rgb8(&img),
                gt_box: e.gt_box,
                gt_class: SignClass::from_id(e.gt_class)?,
                pose: e.pose,
                background_id: e.background_id,
                seed: e.seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((index, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_balanced_and_deterministic() {
        let dist = PoseDistribution::default();
        let a = generate_dataset::<f32>(300, &dist, 8, 7).unwrap();
        assert_eq!(a.len(), 300);
        for class in SignClass::ALL {
            assert_eq!(a.iter().filter(|s| s.gt_class == class).count(), 100);
        }
        let b = generate_dataset::<f32>(300, &dist, 8, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset::<f32>(300, &dist, 8, 8).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x != y));
        assert!(a.iter().all(|s| s.image.iter().all(|&v| (0.0..=1.0).contains(&v))));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(generate_dataset::<f32>(0, &PoseDistribution::default(), 8, 1).is_err());
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_dataset::<f32>(6, &PoseDistribution::default(), 2, 3).unwrap();
        let index = save_dataset(dir.path(), &samples, 3, Some("abc")).unwrap();
        let (loaded_index, loaded) = load_dataset::<f32>(dir.path()).unwrap();
        assert_eq!(index, loaded_index);
        for (a, b) in samples.iter().zip(&loaded) {
            assert_eq!(a.gt_box, b.gt_box);
            assert_eq!(a.pose, b.pose);
            let err = a.image.iter().zip(b.image.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
            assert!(err <= 0.5 / 255.0 + 1e-6);
        }
    }
}
