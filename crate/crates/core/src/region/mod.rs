//! Region-feature files and the anchor math of the region proposal stage:
//! IoU, objectiveness labels and the proposal loss.
//!
//! # Objectiveness labels
//!
//! The labeling rule lists four clauses:
//!
//! | clause | label |
//! |---|---|
//! | IoU > 0.7 | Positive |
//! | 0.5 ≤ IoU < 0.7 | Positive |
//! | IoU < 0.3 | Negative |
//! | 0.3 ≤ IoU ≤ 0.5 | NotNegative |
//!
//! The clauses overlap at exactly 0.5, where the second and fourth both
//! apply, and leave exactly 0.7 uncovered. Ambiguity note: clauses are
//! evaluated in listed order and the first match wins, so 0.5 is Positive;
//! 0.7 sits between the two Positive clauses and is labeled Positive too.
//! 0.3 is NotNegative.

mod features;

pub use features::{
    global_vector, grid_features, load_region_features, normalized_boxes, read_region_features,
    region_features_to_string, write_region_features, RegionFeatureSet, MAX_REGIONS,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RegionError {
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("IoU {0} outside [0, 1]")]
    IouOutOfRange(f32),
    #[error("invalid box [{x1}, {y1}, {x2}, {y2}]")]
    InvalidBox { x1: f32, y1: f32, x2: f32, y2: f32 },
    #[error("proposal loss needs at least one anchor")]
    NoAnchors,
    #[error("{what}: expected {expected} entries, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{0} must be positive")]
    NonPositive(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f32; 4]", into = "[f32; 4]")]
pub struct BoundingBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl TryFrom<[f32; 4]> for BoundingBox {
    type Error = RegionError;

    fn try_from([x1, y1, x2, y2]: [f32; 4]) -> Result<Self, RegionError> {
        BoundingBox::new(x1, y1, x2, y2)
    }
}

impl From<BoundingBox> for [f32; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BoundingBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Result<Self, RegionError> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x2 < x1 || y2 < y1 {
            return Err(RegionError::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(BoundingBox { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f32 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f32, f32) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f32 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0) as f64;
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0) as f64;
    let inter = iw * ih;
    let union = a.area() as f64 + b.area() as f64 - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0) as f32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnchorLabel {
    Positive,
    Negative,
    NotNegative,
}

/// Labels an anchor by its IoU with the nearest ground-truth box; see the
/// module docs for how overlapping and missing boundaries resolve.
pub fn objectiveness_label(iou: f32) -> Result<AnchorLabel, RegionError> {
    if !(0.0..=1.0).contains(&iou) {
        return Err(RegionError::IouOutOfRange(iou));
    }
    Ok(if iou >= 0.5 {
        AnchorLabel::Positive
    } else if iou < 0.3 {
        AnchorLabel::Negative
    } else {
        AnchorLabel::NotNegative
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpnLossConfig {
    /// Weight of the regression term.
    pub lambda: f64,
    /// Classification normalizer (mini-batch size).
    pub n_cls: usize,
    /// Regression normalizer (number of anchor locations).
    pub n_reg: usize,
}

impl Default for RpnLossConfig {
    fn default() -> Self {
        RpnLossConfig {
            lambda: 10.0,
            n_cls: 256,
            n_reg: 2400,
        }
    }
}

const PROB_FLOOR: f64 = 1e-12;

fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

/// Proposal loss: mean binary cross-entropy over `n_cls` plus `lambda`
/// times smooth-L1 box regression over `n_reg`, the latter counted only for
/// positive anchors. NotNegative anchors must be left out by the caller.
pub fn rpn_loss(
    p: &[f32],
    p_star: &[bool],
    t: &[[f32; 4]],
    t_star: &[[f32; 4]],
    cfg: &RpnLossConfig,
) -> Result<f64, RegionError> {
    let n = p.len();
    if n == 0 {
        return Err(RegionError::NoAnchors);
    }
    for (what, got) in [("p_star", p_star.len()), ("t", t.len()), ("t_star", t_star.len())] {
        if got != n {
            return Err(RegionError::LengthMismatch {
                what,
                expected: n,
                got,
            });
        }
    }
    if cfg.n_cls == 0 {
        return Err(RegionError::NonPositive("n_cls"));
    }
    if cfg.n_reg == 0 {
        return Err(RegionError::NonPositive("n_reg"));
    }
    let mut cls = 0.0;
    let mut reg = 0.0;
    for i in 0..n {
        let pi = (p[i] as f64).clamp(0.0, 1.0);
        cls -= if p_star[i] {
            pi.max(PROB_FLOOR).ln()
        } else {
            (1.0 - pi).max(PROB_FLOOR).ln()
        };
        if p_star[i] {
            reg += t[i]
                .iter()
                .zip(&t_star[i])
                .map(|(a, b)| smooth_l1(*a as f64 - *b as f64))
                .sum::<f64>();
        }
    }
    Ok(cls / cfg.n_cls as f64 + cfg.lambda * reg / cfg.n_reg as f64)
}
