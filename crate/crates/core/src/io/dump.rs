//! Detection dumps: the JSON a detector adapter writes for the miner.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::GtBox;
use crate::geometry::{check_unit, BBox, ClassId, ScoredBox};
use crate::offline::ImageDetections;

pub const DUMP_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassSplit {
    Base,
    Novel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub id: ClassId,
    pub name: String,
    pub split: ClassSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpImage {
    pub image_id: u64,
    pub width: f64,
    pub height: f64,
    pub detections: Vec<ScoredBox>,
    #[serde(default)]
    pub gts: Vec<GtBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionDump {
    pub format_version: u32,
    pub classes: Vec<ClassEntry>,
    pub images: Vec<DumpImage>,
}

impl DetectionDump {
    pub fn new(classes: Vec<ClassEntry>) -> Self {
        DetectionDump {
            format_version: DUMP_FORMAT_VERSION,
            classes,
            images: Vec::new(),
        }
    }

    pub fn novel_classes(&self) -> Vec<ClassId> {
        self.split(ClassSplit::Novel)
    }

    pub fn base_classes(&self) -> Vec<ClassId> {
        self.split(ClassSplit::Base)
    }

    fn split(&self, split: ClassSplit) -> Vec<ClassId> {
        self.classes.iter().filter(|c| c.split == split).map(|c| c.id).collect()
    }

    /// Check every record; the message names the offending record.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.format_version != DUMP_FORMAT_VERSION {
            return Err(format!(
                "unsupported format_version {} (expected {DUMP_FORMAT_VERSION})",
                self.format_version
            ));
        }
        let mut ids = BTreeSet::new();
        for (i, c) in self.classes.iter().enumerate() {
            if !ids.insert(c.id) {
                return Err(format!("classes[{i}]: duplicate class id {}", c.id));
            }
        }
        let mut images = BTreeSet::new();
        for (i, img) in self.images.iter().enumerate() {
            let at = |what: String| format!("images[{i}] (image_id {}): {what}", img.image_id);
            if !images.insert(img.image_id) {
                return Err(at("duplicate image_id".into()));
            }
            if !(img.width.is_finite() && img.width > 0.0 && img.height.is_finite() && img.height > 0.0) {
                return Err(at(format!("invalid extent {}x{}", img.width, img.height)));
            }
            for (j, d) in img.detections.iter().enumerate() {
                if !ids.contains(&d.label) {
                    return Err(at(format!("detections[{j}]: unknown class id {}", d.label)));
                }
                check_unit(d.score).map_err(|e| at(format!("detections[{j}]: {e}")))?;
                if let Some(q) = d.iou_score {
                    check_unit(q).map_err(|e| at(format!("detections[{j}]: iou_score: {e}")))?;
                }
            }
            for (j, g) in img.gts.iter().enumerate() {
                if !ids.contains(&g.label) {
                    return Err(at(format!("gts[{j}]: unknown class id {}", g.label)));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let dump: DetectionDump = serde_json::from_str(text).map_err(|e| e.to_string())?;
        dump.validate()?;
        Ok(dump)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dump serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|m| Error::format(path, m))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn detections(&self) -> Vec<ImageDetections> {
        self.images
            .iter()
            .map(|img| ImageDetections {
                image_id: img.image_id,
                detections: img.detections.clone(),
            })
            .collect()
    }

    pub fn ground_truth(&self) -> HashMap<u64, Vec<GtBox>> {
        self.images.iter().map(|img| (img.image_id, img.gts.clone())).collect()
    }
}

/// One annotated few-shot instance, referencing the feature map of its image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShotRecord {
    pub image_id: u64,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub label: ClassId,
}

pub fn load_shots(path: &Path) -> Result<Vec<ShotRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_shots(path: &Path, shots: &[ShotRecord]) -> Result<()> {
    let text = serde_json::to_string_pretty(shots).expect("shots serialize");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
