//! Import of DoTA-style annotations paired with precomputed flow features.
//!
//! The annotation is a JSON document:
//!
//! ```json
//! {
//!   "video_name": "0RJPQ_97dcs_000199",
//!   "num_frames": 30,
//!   "anomaly_start": 10,
//!   "anomaly_end": 20,
//!   "accident_name": "OO",
//!   "ego_involve": true,
//!   "resolution": [1280, 720],
//!   "labels": [
//!     {"frame_id": 0, "objects": [{"obj_track_id": 3, "bbox": [512, 300, 640, 410]}]}
//!   ]
//! }
//! ```
//!
//! Boxes are in pixels of the declared resolution. The feature directory
//! holds `flow_%05d.bin` files and a `meta.json` with at least `H`, `W` and
//! `frames`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::{assemble_tracks, flow_path, read_flow};
use super::{AccidentCode, BBox, Category, Clip};
use crate::error::{Result, TadError};

/// Resolution of DoTA videos, used when an annotation does not declare one.
pub const DOTA_RESOLUTION: [u32; 2] = [1280, 720];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DotaObject {
    pub obj_track_id: u64,
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DotaFrame {
    pub frame_id: usize,
    #[serde(default)]
    pub objects: Vec<DotaObject>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DotaAnnotation {
    pub video_name: String,
    pub num_frames: usize,
    pub anomaly_start: usize,
    pub anomaly_end: usize,
    pub accident_name: String,
    pub ego_involve: bool,
    #[serde(default)]
    pub resolution: Option<[u32; 2]>,
    #[serde(default)]
    pub labels: Vec<DotaFrame>,
}

#[derive(Deserialize)]
struct FeatureMeta {
    #[serde(rename = "H")]
    height: usize,
    #[serde(rename = "W")]
    width: usize,
    frames: usize,
}

impl DotaAnnotation {
    /// Frame labels: 1 exactly on `[anomaly_start, anomaly_end)`.
    pub fn frame_labels(&self) -> Result<Vec<u8>> {
        if self.anomaly_end <= self.anomaly_start {
            return Err(TadError::validation(
                "anomaly_end",
                format!(
                    "anomaly_end ({}) must exceed anomaly_start ({})",
                    self.anomaly_end, self.anomaly_start
                ),
            ));
        }
        if self.anomaly_end > self.num_frames {
            return Err(TadError::validation(
                "anomaly_end",
                format!("anomaly_end {} beyond {} frames", self.anomaly_end, self.num_frames),
            ));
        }
        Ok((0..self.num_frames)
            .map(|f| (self.anomaly_start <= f && f < self.anomaly_end) as u8)
            .collect())
    }

    pub fn category(&self) -> Result<Category> {
        let code: AccidentCode = self.accident_name.parse()?;
        Ok(Category::Accident {
            code,
            ego: self.ego_involve,
        })
    }
}

pub fn import_dota_annotations(
    annotation_file: impl AsRef<Path>,
    feature_dir: impl AsRef<Path>,
) -> Result<Clip> {
    let annotation_file = annotation_file.as_ref();
    let feature_dir = feature_dir.as_ref();
    if !annotation_file.exists() {
        return Err(TadError::MissingFile(annotation_file.to_path_buf()));
    }
    let ann: DotaAnnotation = serde_json::from_slice(&fs::read(annotation_file)?)
        .map_err(|e| TadError::format(annotation_file, e.to_string()))?;
    let labels = ann.frame_labels()?;
    let category = ann.category()?;

    let meta_path = feature_dir.join("meta.json");
    if !meta_path.exists() {
        return Err(TadError::MissingFile(meta_path));
    }
    let meta: FeatureMeta = serde_json::from_slice(&fs::read(&meta_path)?)
        .map_err(|e| TadError::format(&meta_path, e.to_string()))?;
    if meta.frames != ann.num_frames {
        return Err(TadError::validation(
            "num_frames",
            format!("annotation has {} frames, features {}", ann.num_frames, meta.frames),
        ));
    }
    let flows = (0..meta.frames)
        .map(|t| read_flow(&flow_path(feature_dir, t), t, meta.height, meta.width))
        .collect::<Result<Vec<_>>>()?;

    let resolution = ann.resolution.unwrap_or(DOTA_RESOLUTION);
    let (rw, rh) = (resolution[0] as f64, resolution[1] as f64);
    let mut records = Vec::new();
    for frame in &ann.labels {
        for obj in &frame.objects {
            let [x0, y0, x1, y1] = obj.bbox;
            let b = BBox::new(x0 / rw, y0 / rh, x1 / rw, y1 / rh);
            if !b.in_unit_square() || !b.has_area() {
                return Err(TadError::validation(
                    "bbox",
                    format!(
                        "frame {} object {}: box {:?} leaves [0,1] at resolution {:?}",
                        frame.frame_id, obj.obj_track_id, obj.bbox, resolution
                    ),
                ));
            }
            records.push((frame.frame_id, obj.obj_track_id, b));
        }
    }
    let tracks = assemble_tracks(records, ann.num_frames, annotation_file)?;

    let clip = Clip {
        id: ann.video_name.clone(),
        category,
        resolution,
        flows,
        tracks,
        labels,
    };
    clip.validate()?;
    Ok(clip)
}
