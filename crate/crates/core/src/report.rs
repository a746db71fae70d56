use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Rect;

/// Classifier output for one patch; positive when `p > n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchVerdict {
    pub x: usize,
    pub y: usize,
    pub p: f32,
    pub n: f32,
}

impl PatchVerdict {
    pub fn positive(&self) -> bool {
        self.p > self.n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViaFinding {
    pub bbox: Rect,
    /// Mean difference intensity over the region's nonzero pixels.
    pub mean: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VwbSummary {
    pub v: u8,
    pub w: u8,
    pub b: u8,
    pub low_contrast: bool,
}

/// Detection output for one image. Wire and via sections are present only
/// when the corresponding branch ran.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorReport {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_verdicts: Option<Vec<PatchVerdict>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_boxes: Option<Vec<Rect>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra: Option<Vec<ViaFinding>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub miss: Option<Vec<ViaFinding>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vwb: Option<VwbSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl ErrorReport {
    pub fn new(image: impl Into<String>) -> Self {
        ErrorReport {
            image: image.into(),
            ..Default::default()
        }
    }

    /// Fills sections missing from `self` with those of `other`.
    pub fn merge(mut self, other: ErrorReport) -> Result<Self> {
        if self.image != other.image {
            return Err(Error::ImageSetMismatch(format!(
                "cannot merge reports for {} and {}",
                self.image, other.image
            )));
        }
        macro_rules! take {
            ($($f:ident),*) => { $( if self.$f.is_none() { self.$f = other.$f; } )* };
        }
        take!(width, height, patch_size, patch_verdicts, error_boxes, extra, miss, vwb);
        self.warnings.extend(other.warnings);
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::InvalidParameter(format!("bad report: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}
