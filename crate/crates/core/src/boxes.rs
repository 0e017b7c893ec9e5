//! Axis-aligned boxes shared by the detector, augmentation, data and metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Box in image pixels, `x_min < x_max`, `y_min < y_max`.
///
/// Ground-truth boxes carry no score; predictions do.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub class_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64, class_id: usize) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
            class_id,
            score: None,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn score_or_zero(&self) -> f64 {
        self.score.unwrap_or(0.0)
    }

    pub fn is_valid(&self) -> bool {
        let finite = [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        finite && self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn validate(&self) -> Result<()> {
        if !self.is_valid() {
            return Err(Error::InvalidBox(format!("{self:?}")));
        }
        if let Some(s) = self.score {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::InvalidBox(format!("score {s} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        self.x_min < x && x < self.x_max && self.y_min < y && y < self.y_max
    }

    /// Clips to `[0, width] x [0, height]`; `None` if nothing remains.
    pub fn clipped(&self, width: f64, height: f64) -> Option<Self> {
        let b = Self {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
            ..*self
        };
        b.is_valid().then_some(b)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        w * h
    }

    /// Intersection over union of two valid boxes (class ignored).
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        if inter <= 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }

    /// `[x, y, w, h]`.
    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.width(), self.height()]
    }

    pub fn from_xywh(xywh: [f64; 4], class_id: usize) -> Self {
        Self::new(
            xywh[0],
            xywh[1],
            xywh[0] + xywh[2],
            xywh[1] + xywh[3],
            class_id,
        )
    }
}
