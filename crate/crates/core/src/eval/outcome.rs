use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::detector::Detection;
use crate::geometry::{iou, BBox};
use crate::scenegen::SignClass;

/// Minimum IoU for a detection to count as localizing the sign.
pub const LOCALIZATION_IOU: f64 = 0.5;

/// What the detector made of one sign instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Outcome {
    /// A detection localizes the sign with the correct class.
    TrueDetect,
    /// Nothing localizes the sign.
    Miss,
    /// The sign is localized only with a wrong class (the highest-scoring one).
    Mislabel(usize),
}

impl Outcome {
    pub fn is_detected(self) -> bool {
        self == Outcome::TrueDetect
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::TrueDetect => f.write_str("true-detect"),
            Outcome::Miss => f.write_str("miss"),
            Outcome::Mislabel(k) => match SignClass::from_id(*k) {
                Ok(c) => write!(f, "mislabel-as-{}", c.name()),
                Err(_) => write!(f, "mislabel-as-{k}"),
            },
        }
    }
}

impl FromStr for Outcome {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "true-detect" => Ok(Outcome::TrueDetect),
            "miss" => Ok(Outcome::Miss),
            _ => {
                let rest = s.strip_prefix("mislabel-as-").ok_or_else(|| format!("unknown outcome {s:?}"))?;
                SignClass::from_name(rest)
                    .map(|c| c.id())
                    .or_else(|| rest.parse().ok())
                    .map(Outcome::Mislabel)
                    .ok_or_else(|| format!("unknown class in outcome {s:?}"))
            }
        }
    }
}

impl Serialize for Outcome {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Outcome {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Classifies decoded detections against the ground truth of one sign.
pub fn classify_outcome(detections: &[Detection], gt_box: &BBox, gt_class: usize) -> Outcome {
    let localized = detections.iter().filter(|d| iou(&d.bbox, gt_box) >= LOCALIZATION_IOU);
    let mut best_wrong: Option<&Detection> = None;
    for d in localized {
        if d.class_id == gt_class {
            return Outcome::TrueDetect;
        }
        if best_wrong.is_none_or(|b| d.score > b.score) {
            best_wrong = Some(d);
        }
    }
    best_wrong.map_or(Outcome::Miss, |d| Outcome::Mislabel(d.class_id))
}
