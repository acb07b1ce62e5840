//! JSON wire formats for annotations and predictions.
//!
//! Ground truth:
//!
//! ```json
//! {"images": [{"id": "scene_000", "width": 192, "height": 128,
//!              "plates": [{"box": [x1, y1, x2, y2],
//!                          "corners": [[x, y], [x, y], [x, y], [x, y]],
//!                          "text": "AB12345"}]}]}
//! ```
//!
//! Corners are ordered left-top, right-top, left-down, right-down.
//! Predictions mirror the layout with per-detection score, optional corners
//! (with provenance), and optional recognized text.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, Rect};
use crate::heatmap::{CornerDetection, CornerSource, Detection, PlateAnnotation};

/// Top-level ground-truth file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AnnotationFile {
    pub images: Vec<ImageAnnotation>,
}

/// Ground truth for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageAnnotation {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub plates: Vec<PlateRecord>,
}

/// One annotated plate on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateRecord {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub corners: [[f64; 2]; 4],
    pub text: String,
}

impl PlateRecord {
    pub fn from_annotation(ann: &PlateAnnotation) -> Self {
        Self {
            bbox: ann.bbox.as_array(),
            corners: ann.corners.map(|p| [p.x, p.y]),
            text: ann.text.clone(),
        }
    }

    pub fn to_annotation(&self) -> PlateAnnotation {
        PlateAnnotation {
            bbox: Rect::from_array(self.bbox),
            corners: self.corners.map(|c| Point::new(c[0], c[1])),
            text: self.text.clone(),
        }
    }
}

impl ImageAnnotation {
    pub fn annotations(&self) -> Vec<PlateAnnotation> {
        self.plates.iter().map(PlateRecord::to_annotation).collect()
    }

    /// Validates every plate against this image's extents.
    pub fn validate(&self) -> Result<()> {
        for p in self.plates.iter() {
            p.to_annotation()
                .validate(self.width as usize, self.height as usize)?;
        }
        Ok(())
    }
}

impl AnnotationFile {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: Self = serde_json::from_str(s)?;
        for img in &file.images {
            if img.width == 0 || img.height == 0 {
                return Err(Error::InvalidArgument(format!(
                    "image '{}' has zero extent",
                    img.id
                )));
            }
            img.validate()?;
        }
        Ok(file)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Top-level prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PredictionFile {
    pub images: Vec<ImagePredictions>,
}

/// Predictions for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePredictions {
    pub id: String,
    pub detections: Vec<DetectionRecord>,
}

/// One predicted plate on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corners: Option<[CornerRecord; 4]>,
    /// Recognized plate string, present after the recognition stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    /// Whether the recognized string passed the rule set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verified: Option<bool>,
}

/// One predicted corner on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CornerRecord {
    pub point: [f64; 2],
    pub score: f64,
    pub source: CornerSource,
}

impl DetectionRecord {
    pub fn from_detection(det: &Detection) -> Self {
        Self {
            bbox: det.bbox.as_array(),
            score: det.score,
            corners: det.corners.map(|cs| {
                cs.map(|c| CornerRecord {
                    point: [c.point.x, c.point.y],
                    score: c.score,
                    source: c.source,
                })
            }),
            text: None,
            verified: None,
        }
    }

    /// Rebuilds the geometric part of a detection. The center cell is
    /// re-derived from the box center at the given stride.
    pub fn to_detection(&self) -> Detection {
        let bbox = Rect::from_array(self.bbox);
        let center = bbox.center();
        let s = crate::heatmap::STRIDE as f64;
        let feat = Point::new(center.x / s, center.y / s);
        Detection {
            bbox,
            score: self.score,
            center_cell: (
                feat.y.floor().max(0.0) as usize,
                feat.x.floor().max(0.0) as usize,
            ),
            center_feat: feat,
            corners: self.corners.map(|cs| {
                cs.map(|c| CornerDetection {
                    point: Point::new(c.point[0], c.point[1]),
                    score: c.score,
                    source: c.source,
                })
            }),
        }
    }
}

impl PredictionFile {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
