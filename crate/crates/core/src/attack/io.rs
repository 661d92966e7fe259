use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::patch::{AttackMode, Mask, PatchSpec, PerturbationNorm};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::scenegen::SignClass;
use crate::seed::sha256_hex;

pub const PATCH_FORMAT: &str = "patchlab-patch";
pub const PATCH_VERSION: u32 = 1;
pub const DELTA_FILE: &str = "delta.png";
pub const MASK_FILE: &str = "mask.png";
pub const MANIFEST_FILE: &str = "patch.json";
pub const TRACE_FILE: &str = "loss_trace.csv";

/// JSON sidecar describing a saved patch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchManifest {
    pub format: String,
    pub version: u32,
    pub mode: AttackMode,
    pub victim_class: SignClass,
    pub target_class: Option<SignClass>,
    pub lambda_reg: f64,
    pub norm: PerturbationNorm,
    pub source_detector: Option<String>,
    pub config_hash: Option<String>,
    pub delta_file: String,
    pub mask_file: String,
    pub delta_sha256: String,
    pub mask_sha256: String,
    pub loss_trace: String,
    pub steps: usize,
}

/// `δ ∈ [−1, 1]` stored as `round(127 δ) + 128`, so zero round-trips exactly.
pub fn encode_delta<T: Scalar>(delta: &Array3<T>) -> RgbImage {
    let (h, w, _) = delta.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let q = |c: usize| ((delta[[y as usize, x as usize, c]].as_f64().clamp(-1.0, 1.0) * 127.0).round() + 128.0) as u8;
        Rgb([q(0), q(1), q(2)])
    })
}

pub fn decode_delta<T: Scalar>(img: &RgbImage) -> Array3<T> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        T::lit((img.get_pixel(x as u32, y as u32)[c] as f64 - 128.0) / 127.0)
    })
}

pub fn encode_mask(mask: &Mask) -> GrayImage {
    let (h, w) = mask.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }]))
}

pub fn decode_mask(img: &GrayImage) -> Mask {
    let (w, h) = img.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| img.get_pixel(x as u32, y as u32)[0] >= 128)
}

fn png_bytes(write: impl FnOnce(&mut std::io::Cursor<Vec<u8>>) -> image::ImageResult<()>) -> Result<Vec<u8>> {
    let mut cur = std::io::Cursor::new(Vec::new());
    write(&mut cur)?;
    Ok(cur.into_inner())
}

/// Hex SHA-256 of the PNG encoding of a mask; equal masks hash equally.
pub fn mask_sha256(mask: &Mask) -> Result<String> {
    let bytes = png_bytes(|c| encode_mask(mask).write_to(c, image::ImageFormat::Png))?;
    Ok(sha256_hex(&bytes))
}

/// Writes `delta.png`, `mask.png`, `loss_trace.csv`, and `patch.json` into
/// `dir`. Returns the manifest and the hash of `patch.json`, which serves as
/// the patch's identity.
pub fn save_patch<T: Scalar>(
    dir: &Path,
    spec: &PatchSpec<T>,
    loss_trace: &[f64],
    config_hash: Option<&str>,
) -> Result<(PatchManifest, String)> {
    fs::create_dir_all(dir)?;
    let delta_png = png_bytes(|c| encode_delta(&spec.delta).write_to(c, image::ImageFormat::Png))?;
    let mask_png = png_bytes(|c| encode_mask(&spec.mask).write_to(c, image::ImageFormat::Png))?;
    fs::write(dir.join(DELTA_FILE), &delta_png)?;
    fs::write(dir.join(MASK_FILE), &mask_png)?;

    let mut csv = String::from("step,mean_loss\n");
    for (i, l) in loss_trace.iter().enumerate() {
        csv.push_str(&format!("{i},{l:.9e}\n"));
    }
    fs::write(dir.join(TRACE_FILE), csv)?;

    let manifest = PatchManifest {
        format: PATCH_FORMAT.into(),
        version: PATCH_VERSION,
        mode: spec.mode,
        victim_class: spec.victim_class,
        target_class: spec.target_class,
        lambda_reg: spec.lambda_reg,
        norm: spec.norm,
        source_detector: spec.source_detector.clone(),
        config_hash: config_hash.map(str::to_string),
        delta_file: DELTA_FILE.into(),
        mask_file: MASK_FILE.into(),
        delta_sha256: sha256_hex(&delta_png),
        mask_sha256: sha256_hex(&mask_png),
        loss_trace: TRACE_FILE.into(),
        steps: loss_trace.len(),
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    fs::write(dir.join(MANIFEST_FILE), &json)?;
    Ok((manifest, sha256_hex(&json)))
}

/// Reads a patch written by [`save_patch`]. `δ` comes back quantized to the
/// PNG grid and re-zeroed outside the mask.
pub fn load_patch(dir: &Path) -> Result<(PatchSpec<f32>, PatchManifest, String)> {
    let json = fs::read(dir.join(MANIFEST_FILE))?;
    let manifest: PatchManifest = serde_json::from_slice(&json)?;
    if manifest.format != PATCH_FORMAT || manifest.version != PATCH_VERSION {
        return Err(Error::Format(format!("unsupported patch format {} v{}", manifest.format, manifest.version)));
    }
    let delta_png = fs::read(dir.join(&manifest.delta_file))?;
    let mask_png = fs::read(dir.join(&manifest.mask_file))?;
    if sha256_hex(&delta_png) != manifest.delta_sha256 || sha256_hex(&mask_png) != manifest.mask_sha256 {
        return Err(Error::Format("patch image hash does not match its manifest".into()));
    }
    let mask = decode_mask(&image::load_from_memory(&mask_png)?.to_luma8());
    let mut delta = decode_delta::<f32>(&image::load_from_memory(&delta_png)?.to_rgb8());
    if delta.dim() != (mask.dim().0, mask.dim().1, 3) {
        return Err(Error::Format("delta and mask sizes differ".into()));
    }
    for ((r, c, _), d) in delta.indexed_iter_mut() {
        if !mask[[r, c]] {
            *d = 0.0;
        }
    }
    let spec = PatchSpec {
        delta,
        mask,
        mode: manifest.mode,
        target_class: manifest.target_class,
        victim_class: manifest.victim_class,
        lambda_reg: manifest.lambda_reg,
        norm: manifest.norm,
        source_detector: manifest.source_detector.clone(),
    };
    spec.validate_objective()?;
    Ok((spec, manifest, sha256_hex(&json)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::default_sticker_mask;

    #[test]
    fn delta_codec_is_exact_on_grid() {
        let delta = Array3::from_shape_fn((4, 4, 3), |(r, c, ch)| ((r * 12 + c * 3 + ch) as f64 * 5.0 - 127.0) / 127.0);
        let back: Array3<f64> = decode_delta(&encode_delta(&delta));
        for (a, b) in delta.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let zero: Array3<f64> = decode_delta(&encode_delta(&Array3::<f64>::zeros((2, 2, 3))));
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mask = default_sticker_mask();
        let delta = Array3::from_shape_fn((64, 64, 3), |(r, c, ch)| {
            if mask[[r, c]] {
                ((r + 2 * c + ch) % 9) as f32 / 127.0 - 4.0 / 127.0
            } else {
                0.0
            }
        });
        let mut spec = PatchSpec::new(mask, AttackMode::Mislabel, SignClass::Stop, Some(SignClass::SpeedLimit), 0.01, PerturbationNorm::L2)
            .unwrap()
            .with_delta(delta);
        spec.source_detector = Some("abc".into());
        let (manifest, hash) = save_patch(dir.path(), &spec, &[1.0, 0.5, 0.25], Some("cfg")).unwrap();
        assert_eq!(manifest.steps, 3);
        assert_eq!(manifest.mask_sha256, mask_sha256(&spec.mask).unwrap());
        let trace = fs::read_to_string(dir.path().join(TRACE_FILE)).unwrap();
        assert_eq!(trace.lines().count(), 4);
        let (loaded, m2, h2) = load_patch(dir.path()).unwrap();
        assert_eq!((m2, h2), (manifest, hash));
        assert_eq!(loaded.mask, spec.mask);
        for (a, b) in loaded.delta.iter().zip(spec.delta.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn tampered_image_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PatchSpec::<f32>::new(default_sticker_mask(), AttackMode::Disappearance, SignClass::Stop, None, 0.01, PerturbationNorm::L2).unwrap();
        save_patch(dir.path(), &spec, &[], None).unwrap();
        let mut mask = spec.mask.clone();
        mask[[0, 0]] = true;
        encode_mask(&mask).save(dir.path().join(MASK_FILE)).unwrap();
        assert!(matches!(load_patch(dir.path()), Err(Error::Format(_))));
    }
}
