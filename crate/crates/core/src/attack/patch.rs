use ndarray::{Array2, Array3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::scenegen::{silhouette_mask, CanonicalTexture, SignClass, TEXTURE_SIZE};
use crate::Image;

/// Binary perturbation support over the texture.
pub type Mask = Array2<bool>;

/// Sticker rectangles: rows `[12, 24)` and `[40, 52)`, columns `[10, 54)`.
pub const STICKER_ROWS: [(usize, usize); 2] = [(12, 24), (40, 52)];
pub const STICKER_COLS: (usize, usize) = (10, 54);

/// Two rectangles above and below the stop sign's lettering, clipped to the
/// octagon.
pub fn default_sticker_mask() -> Mask {
    let silhouette = silhouette_mask(SignClass::Stop);
    Array2::from_shape_fn((TEXTURE_SIZE, TEXTURE_SIZE), |(r, c)| {
        silhouette[[r, c]]
            && STICKER_ROWS.iter().any(|&(r0, r1)| (r0..r1).contains(&r))
            && (STICKER_COLS.0..STICKER_COLS.1).contains(&c)
    })
}

/// The whole sign surface.
pub fn poster_mask(class: SignClass) -> Mask {
    silhouette_mask(class)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMode {
    /// Suppress every detection of the victim near the sign.
    Disappearance,
    /// Keep the sign localized but labeled as the target class.
    Mislabel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PerturbationNorm {
    /// Magnitude controlled only by the L2 penalty.
    L2,
    /// L2 penalty plus projection onto `‖δ‖∞ ≤ radius`.
    Linf { radius: f64 },
}

/// A masked perturbation `δ` over the canonical texture and the objective
/// it was (or will be) optimized for.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSpec<T> {
    /// `S × S × 3`, zero outside the mask.
    pub delta: Image<T>,
    pub mask: Mask,
    pub mode: AttackMode,
    pub target_class: Option<SignClass>,
    pub victim_class: SignClass,
    /// Weight of the mean squared perturbation over masked entries.
    pub lambda_reg: f64,
    pub norm: PerturbationNorm,
    /// Content hash of the detector the patch was optimized against.
    pub source_detector: Option<String>,
}

impl<T: Scalar> PatchSpec<T> {
    /// Zero perturbation with the given support and objective.
    pub fn new(
        mask: Mask,
        mode: AttackMode,
        victim_class: SignClass,
        target_class: Option<SignClass>,
        lambda_reg: f64,
        norm: PerturbationNorm,
    ) -> Result<Self> {
        let (h, w) = mask.dim();
        let spec = Self {
            delta: Array3::zeros((h, w, 3)),
            mask,
            mode,
            target_class,
            victim_class,
            lambda_reg,
            norm,
            source_detector: None,
        };
        spec.validate_objective()?;
        Ok(spec)
    }

    pub fn validate_objective(&self) -> Result<()> {
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return Err(Error::param("lambda_reg must be a finite value >= 0"));
        }
        if let PerturbationNorm::Linf { radius } = self.norm {
            if !(radius > 0.0) {
                return Err(Error::param("Linf radius must be > 0"));
            }
        }
        if self.mode == AttackMode::Mislabel {
            match self.target_class {
                None => return Err(Error::param("mislabel mode needs a target class")),
                Some(t) if t == self.victim_class => return Err(Error::InvalidTarget(t.id())),
                _ => {}
            }
        }
        Ok(())
    }

    /// Checks shapes, mask containment, and the range invariants against a texture.
    pub fn validate_for(&self, texture: &CanonicalTexture<T>) -> Result<()> {
        self.validate_objective()?;
        let (h, w) = texture.size();
        if self.mask.dim() != (h, w) || self.delta.dim() != (h, w, 3) {
            return Err(Error::InputShape {
                expected: vec![h, w, 3],
                got: vec![self.delta.dim().0, self.delta.dim().1, self.delta.dim().2],
            });
        }
        let silhouette = texture.silhouette();
        if Zip::from(&self.mask).and(&silhouette).fold(false, |bad, &m, &s| bad || (m && !s)) {
            return Err(Error::param("mask extends outside the sign silhouette"));
        }
        Ok(())
    }

    pub fn with_delta(mut self, delta: Image<T>) -> Self {
        self.delta = delta;
        self
    }

    /// Zeroes `δ` outside the mask, keeps `texture + δ` inside `[0, 1]`, and
    /// applies the Linf ball when configured.
    pub fn project(&mut self, texture: &CanonicalTexture<T>) {
        let radius = match self.norm {
            PerturbationNorm::Linf { radius } => Some(T::lit(radius)),
            PerturbationNorm::L2 => None,
        };
        Zip::from(self.delta.lanes_mut(Axis(2)))
            .and(texture.rgba.lanes(Axis(2)))
            .and(&self.mask)
            .for_each(|mut d, rgba, &m| {
                for ch in 0..3 {
                    if !m {
                        d[ch] = T::zero();
                        continue;
                    }
                    let mut lo = -rgba[ch];
                    let mut hi = T::one() - rgba[ch];
                    if let Some(r) = radius {
                        lo = lo.max(-r);
                        hi = hi.min(r);
                    }
                    d[ch] = d[ch].max(lo).min(hi);
                }
            });
    }

    /// `‖mask ⊙ δ‖₂²`.
    pub fn masked_sq_norm(&self) -> f64 {
        Zip::from(self.delta.lanes(Axis(2)))
            .and(&self.mask)
            .fold(0.0, |acc, d, &m| if m { acc + d.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() } else { acc })
    }

    /// Number of free entries: masked texels times three channels.
    pub fn masked_entries(&self) -> usize {
        3 * self.mask.iter().filter(|&&m| m).count()
    }

    /// Regularizer weight per squared entry, `λ / masked_entries`.
    pub fn reg_weight(&self) -> f64 {
        self.lambda_reg / self.masked_entries().max(1) as f64
    }

    /// `λ · mean(δ²)` over masked entries.
    pub fn regularizer(&self) -> f64 {
        self.reg_weight() * self.masked_sq_norm()
    }

    pub fn cast<U: Scalar>(&self) -> PatchSpec<U> {
        PatchSpec {
            delta: self.delta.mapv(|v| U::lit(v.as_f64())),
            mask: self.mask.clone(),
            mode: self.mode,
            target_class: self.target_class,
            victim_class: self.victim_class,
            lambda_reg: self.lambda_reg,
            norm: self.norm,
            source_detector: self.source_detector.clone(),
        }
    }
}

/// `rgb' = clamp(rgb + mask ⊙ δ, 0, 1)`; alpha untouched.
pub fn apply_patch<T: Scalar>(texture: &CanonicalTexture<T>, spec: &PatchSpec<T>) -> CanonicalTexture<T> {
    let mut out = texture.clone();
    Zip::from(out.rgba.lanes_mut(Axis(2)))
        .and(spec.delta.lanes(Axis(2)))
        .and(&spec.mask)
        .for_each(|mut px, d, &m| {
            if m {
                for ch in 0..3 {
                    px[ch] = (px[ch] + d[ch]).max(T::zero()).min(T::one());
                }
            }
        });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::render_canonical_sign;

    fn count(m: &Mask) -> usize {
        m.iter().filter(|&&v| v).count()
    }

    #[test]
    fn sticker_mask_geometry() {
        let sticker = default_sticker_mask();
        let silhouette = silhouette_mask(SignClass::Stop);
        let ratio = count(&sticker) as f64 / count(&silhouette) as f64;
        assert!((0.20..=0.40).contains(&ratio), "ratio {ratio}");
        assert!(Zip::from(&sticker).and(&silhouette).all(|&m, &s| !m || s));
        assert_eq!(poster_mask(SignClass::Stop), silhouette);
    }

    #[test]
    fn apply_patch_respects_mask_and_clamp() {
        let tex = render_canonical_sign::<f64>(0, 0).unwrap();
        let spec = PatchSpec::<f64>::new(default_sticker_mask(), AttackMode::Disappearance, SignClass::Stop, None, 0.01, PerturbationNorm::L2).unwrap();
        assert_eq!(apply_patch(&tex, &spec), tex);

        let mut gray = tex.clone();
        for ((r, c, ch), v) in gray.rgba.indexed_iter_mut() {
            if ch < 3 && tex.rgba[[r, c, 3]] == 1.0 {
                *v = 0.5;
            }
        }
        let ones = spec.clone().with_delta(Array3::from_elem((64, 64, 3), 1.0));
        let out = apply_patch(&gray, &ones);
        for ((r, c, ch), &v) in out.rgba.indexed_iter() {
            if ch == 3 {
                assert_eq!(v, gray.rgba[[r, c, 3]]);
            } else if ones.mask[[r, c]] {
                assert_eq!(v, 1.0);
            } else {
                assert_eq!(v, gray.rgba[[r, c, ch]]);
            }
        }
    }

    #[test]
    fn projection_enforces_invariants() {
        let tex = render_canonical_sign::<f64>(0, 0).unwrap();
        let mut spec = PatchSpec::<f64>::new(poster_mask(SignClass::Stop), AttackMode::Disappearance, SignClass::Stop, None, 0.0, PerturbationNorm::Linf { radius: 0.3 })
            .unwrap()
            .with_delta(Array3::from_shape_fn((64, 64, 3), |(r, c, ch)| ((r * 7 + c * 3 + ch) % 11) as f64 / 5.0 - 1.0));
        spec.project(&tex);
        for ((r, c, ch), &d) in spec.delta.indexed_iter() {
            if !spec.mask[[r, c]] {
                assert_eq!(d, 0.0);
            } else {
                assert!(d.abs() <= 0.3);
                let v = tex.rgba[[r, c, ch]] + d;
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn mislabel_needs_distinct_target() {
        let err = PatchSpec::<f32>::new(default_sticker_mask(), AttackMode::Mislabel, SignClass::Stop, Some(SignClass::Stop), 0.01, PerturbationNorm::L2);
        assert!(matches!(err, Err(Error::InvalidTarget(0))));
        assert!(PatchSpec::<f32>::new(default_sticker_mask(), AttackMode::Mislabel, SignClass::Stop, None, 0.01, PerturbationNorm::L2).is_err());
    }

    #[test]
    fn mask_outside_silhouette_is_rejected() {
        let tex = render_canonical_sign::<f32>(0, 0).unwrap();
        let full = Array2::from_elem((64, 64), true);
        let spec = PatchSpec::<f32>::new(full, AttackMode::Disappearance, SignClass::Stop, None, 0.0, PerturbationNorm::L2).unwrap();
        assert!(spec.validate_for(&tex).is_err());
    }
}
