use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::difftrans::Interval;
use crate::error::{Error, Result};
use crate::scenegen::{Pose, SignClass};
use crate::seed;

fn range(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|i| ((lo + step * i as f64) * 1e9).round() / 1e9).collect()
}

/// Evaluation grid of sign poses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoseGrid {
    pub scales: Vec<f64>,
    pub rotations: Vec<f64>,
    /// Relative positions `(fx, fy)` within the range of in-bounds centers;
    /// `(0.5, 0.5)` is the scene center.
    pub placements: Vec<[f64; 2]>,
    /// Photometric draws per geometric cell.
    pub photometric_samples: usize,
    pub brightness: Interval,
    pub contrast: Interval,
    pub noise_sigma: Interval,
    /// Size of the evaluation background pool.
    pub backgrounds: usize,
}

impl Default for PoseGrid {
    fn default() -> Self {
        let fracs = [0.1, 0.5, 0.9];
        Self {
            scales: range(0.2, 1.0, 0.1),
            rotations: range(-15.0, 15.0, 5.0),
            placements: fracs.iter().flat_map(|&fy| fracs.iter().map(move |&fx| [fx, fy])).collect(),
            photometric_samples: 3,
            brightness: Interval(-0.15, 0.15),
            contrast: Interval(0.85, 1.15),
            noise_sigma: Interval(0.0, 0.01),
            backgrounds: 8,
        }
    }
}

/// A pose of the grid, identified by its position along each axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub index: usize,
    pub scale_index: usize,
    pub rotation_index: usize,
    pub placement_index: usize,
    pub photometric_index: usize,
}

/// A grid point left out of evaluation and why.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedPose {
    pub point: GridPoint,
    pub reason: String,
}

impl PoseGrid {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.rotations.is_empty() || self.placements.is_empty() || self.photometric_samples == 0 {
            return Err(Error::param("pose grid axes must be non-empty"));
        }
        if self.scales.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
            return Err(Error::param("grid scales must lie in (0, 1]"));
        }
        if self.rotations.iter().any(|r| !r.is_finite()) {
            return Err(Error::param("grid rotations must be finite"));
        }
        if self.placements.iter().flatten().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::param("grid placements must lie in [0, 1]"));
        }
        for (name, iv) in [("brightness", self.brightness), ("contrast", self.contrast), ("noise_sigma", self.noise_sigma)] {
            if !(iv.0.is_finite() && iv.1.is_finite() && iv.0 <= iv.1) {
                return Err(Error::param(format!("grid {name} range is empty or not finite")));
            }
        }
        if self.contrast.0 <= 0.0 || self.noise_sigma.0 < 0.0 {
            return Err(Error::param("grid contrast must be positive and noise non-negative"));
        }
        if self.backgrounds == 0 {
            return Err(Error::param("grid needs at least one background"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.scales.len() * self.rotations.len() * self.placements.len() * self.photometric_samples
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid points in evaluation order (scale-major, photometric-minor).
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::with_capacity(self.len());
        for si in 0..self.scales.len() {
            for ri in 0..self.rotations.len() {
                for pi in 0..self.placements.len() {
                    for qi in 0..self.photometric_samples {
                        out.push(GridPoint {
                            index: out.len(),
                            scale_index: si,
                            rotation_index: ri,
                            placement_index: pi,
                            photometric_index: qi,
                        });
                    }
                }
            }
        }
        out
    }

    /// Whether a placement sits at the scene center.
    pub fn is_centered(&self, placement_index: usize) -> bool {
        self.placements[placement_index] == [0.5, 0.5]
    }

    /// Concrete pose of a grid point, or the reason it cannot be placed.
    ///
    /// Photometric conditions depend only on `(seed, geometric cell,
    /// photometric index)`, so a patched and a clean run see the same ones.
    pub fn pose(&self, point: &GridPoint, class: SignClass, seed: u64) -> std::result::Result<Pose, String> {
        let mut pose = Pose::centered(self.scales[point.scale_index]);
        pose.rotation_deg = self.rotations[point.rotation_index];
        let [fx, fy] = self.placements[point.placement_index];
        let ranges = pose.center_ranges(&class.outline()).map_err(|e| e.to_string())?;
        let Some(((x0, x1), (y0, y1))) = ranges else {
            return Err(format!(
                "sign does not fit at scale {} and rotation {}",
                pose.scale, pose.rotation_deg
            ));
        };
        pose.translate_x = x0 + fx * (x1 - x0);
        pose.translate_y = y0 + fy * (y1 - y0);
        let mut rng = seed::rng(seed::derive_index(seed::derive(seed, "grid-photometric"), point.index as u64));
        pose.brightness = self.brightness.sample(&mut rng);
        pose.contrast = self.contrast.sample(&mut rng);
        pose.noise_sigma = self.noise_sigma.sample(&mut rng);
        pose.noise_seed = rng.random();
        pose.check_in_bounds(&class.outline()).map_err(|e| e.to_string())?;
        Ok(pose)
    }

    /// Background pool index of a grid point.
    pub fn background_of(&self, point: &GridPoint) -> usize {
        point.index % self.backgrounds
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_axes() {
        let g = PoseGrid::default();
        assert_eq!(g.scales, vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]);
        assert_eq!(g.rotations, vec![-15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0]);
        assert_eq!(g.placements.len(), 9);
        assert_eq!(g.placements.iter().filter(|p| **p == [0.5, 0.5]).count(), 1);
        assert_eq!(g.len(), 9 * 7 * 9 * 3);
        g.validate().unwrap();
    }

    #[test]
    fn empty_axis_rejected() {
        let g = PoseGrid {
            rotations: vec![],
            ..PoseGrid::default()
        };
        assert!(g.validate().is_err());
    }

    #[test]
    fn poses_are_in_bounds_or_skipped() {
        let g = PoseGrid::default();
        let mut skipped = 0;
        for p in g.points() {
            match g.pose(&p, SignClass::Stop, 1) {
                Ok(pose) => pose.check_in_bounds(&SignClass::Stop.outline()).unwrap(),
                Err(_) => skipped += 1,
            }
        }
        // Rotated full-size signs do not fit; everything at half scale does.
        assert!(skipped > 0);
        for p in g.points().iter().filter(|p| g.scales[p.scale_index] <= 0.5) {
            assert!(g.pose(p, SignClass::Stop, 1).is_ok());
        }
    }

    #[test]
    fn photometry_is_seeded_by_point() {
        let g = PoseGrid::default();
        let p = g.points()[40];
        assert_eq!(g.pose(&p, SignClass::Yield, 3), g.pose(&p, SignClass::Yield, 3));
        assert_ne!(g.pose(&p, SignClass::Yield, 3).unwrap().brightness, g.pose(&p, SignClass::Yield, 4).unwrap().brightness);
    }
}
