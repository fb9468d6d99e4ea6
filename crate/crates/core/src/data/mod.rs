//! Clips of dense motion plus object tracks, the on-disk clip format, a
//! deterministic synthetic scene generator and the training-window sampler.

mod dota;
mod io;
mod samples;
mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TadError};

pub use dota::{import_dota_annotations, DotaAnnotation, DotaFrame, DotaObject};
pub use io::{load_clip, load_clips, save_clip};
pub use samples::{make_samples, observe, ObjectWindow, TrainingSample};
pub use synth::{
    generate_clip, AnomalyKind, AnomalySpec, DatasetSpec, EgoSegment, ObjectSpec, SceneSampler,
    SyntheticWorldConfig,
};

/// Default flow raster side length.
pub const DEFAULT_FLOW_SIZE: usize = 64;

/// Dense two-channel motion raster for one timestep: per-pixel x and y
/// displacement, in pixels per frame, from frame `t` to `t + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowFrame {
    pub t: usize,
    pub height: usize,
    pub width: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl FlowFrame {
    pub fn new(t: usize, height: usize, width: usize, u: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        let f = Self {
            t,
            height,
            width,
            u,
            v,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn constant(t: usize, height: usize, width: usize, u: f32, v: f32) -> Self {
        Self {
            t,
            height,
            width,
            u: vec![u; height * width],
            v: vec![v; height * width],
        }
    }

    /// Builds a frame from a function of pixel coordinates `(x, y)`.
    pub fn from_fn(
        t: usize,
        height: usize,
        width: usize,
        f: impl Fn(usize, usize) -> (f32, f32),
    ) -> Self {
        let mut u = Vec::with_capacity(height * width);
        let mut v = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let (a, b) = f(x, y);
                u.push(a);
                v.push(b);
            }
        }
        Self {
            t,
            height,
            width,
            u,
            v,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        if self.u.len() != n || self.v.len() != n {
            return Err(TadError::validation(
                format!("flow[{}]", self.t),
                format!(
                    "u/v planes hold {}/{} values, expected {}x{}",
                    self.u.len(),
                    self.v.len(),
                    self.height,
                    self.width
                ),
            ));
        }
        if !self.u.iter().chain(&self.v).all(|x| x.is_finite()) {
            return Err(TadError::validation(
                format!("flow[{}]", self.t),
                "non-finite displacement",
            ));
        }
        Ok(())
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    /// `[2, H, W]` planes as `f64`, u-plane first.
    pub fn to_f64_planes(&self) -> Vec<f64> {
        self.u.iter().chain(&self.v).map(|&x| x as f64).collect()
    }
}

/// Axis-aligned box in normalized `[0, 1]` image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", from = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(a: [f64; 4]) -> Self {
        Self {
            x_min: a[0],
            y_min: a[1],
            x_max: a[2],
            y_max: a[3],
        }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn has_area(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn in_unit_square(&self) -> bool {
        self.to_array()
            .iter()
            .all(|c| c.is_finite() && (0.0..=1.0).contains(c))
    }
}

/// One object's boxes over its contiguous visibility span `start..start+len`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub id: u64,
    pub start: usize,
    pub boxes: Vec<BBox>,
}

impl Track {
    pub fn end(&self) -> usize {
        self.start + self.boxes.len()
    }

    pub fn covers(&self, first: usize, last: usize) -> bool {
        self.start <= first && last < self.end()
    }

    pub fn at(&self, t: usize) -> Option<BBox> {
        t.checked_sub(self.start).and_then(|i| self.boxes.get(i).copied())
    }
}

/// Object tracks of one clip, ordered by id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackSet {
    pub tracks: Vec<Track>,
    /// Inclusive `(first_frame, last_frame)` the set describes.
    pub window: (usize, usize),
}

impl TrackSet {
    pub fn validate(&self) -> Result<()> {
        for (i, tr) in self.tracks.iter().enumerate() {
            if i > 0 && self.tracks[i - 1].id >= tr.id {
                return Err(TadError::validation(
                    "tracks",
                    format!("ids must be unique and ascending, got {} after {}", tr.id, self.tracks[i - 1].id),
                ));
            }
            if tr.boxes.is_empty() {
                return Err(TadError::validation("tracks", format!("object {} has no boxes", tr.id)));
            }
            if tr.start < self.window.0 || tr.end() - 1 > self.window.1 {
                return Err(TadError::validation(
                    "tracks",
                    format!("object {} lies outside window {:?}", tr.id, self.window),
                ));
            }
            for (k, b) in tr.boxes.iter().enumerate() {
                if !b.has_area() || !b.in_unit_square() {
                    return Err(TadError::validation(
                        "tracks",
                        format!("object {} frame {}: invalid box {:?}", tr.id, tr.start + k, b.to_array()),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Objects visible at `t`, in id order.
    pub fn visible_at(&self, t: usize) -> impl Iterator<Item = (u64, BBox)> + '_ {
        self.tracks.iter().filter_map(move |tr| tr.at(t).map(|b| (tr.id, b)))
    }
}

/// Accident categories of the DoTA taxonomy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AccidentCode {
    ST,
    AH,
    LA,
    OC,
    TC,
    VP,
    VO,
    OO,
    UK,
}

impl AccidentCode {
    pub const ALL: [AccidentCode; 9] = [
        Self::ST,
        Self::AH,
        Self::LA,
        Self::OC,
        Self::TC,
        Self::VP,
        Self::VO,
        Self::OO,
        Self::UK,
    ];

    pub fn description(self) -> &'static str {
        match self {
            Self::ST => "Collision with another vehicle that starts, stops, or is stationary",
            Self::AH => "Collision with another vehicle moving ahead or waiting",
            Self::LA => "Collision with another vehicle moving laterally in the same direction",
            Self::OC => "Collision with another oncoming vehicle",
            Self::TC => "Collision with another vehicle that turns into or crosses a road",
            Self::VP => "Collision between vehicle and pedestrian",
            Self::VO => "Collision with an obstacle in the roadway",
            Self::OO => "Out-of-control and leaving the roadway to the left or right",
            Self::UK => "Unknown",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ST => "ST",
            Self::AH => "AH",
            Self::LA => "LA",
            Self::OC => "OC",
            Self::TC => "TC",
            Self::VP => "VP",
            Self::VO => "VO",
            Self::OO => "OO",
            Self::UK => "UK",
        }
    }
}

impl FromStr for AccidentCode {
    type Err = TadError;

    /// Accepts the two-letter codes as well as the long names used in DoTA
    /// annotation files.
    fn from_str(s: &str) -> Result<Self> {
        let code = match s.trim().to_ascii_lowercase().as_str() {
            "st" | "start_stop_or_stationary" => Self::ST,
            "ah" | "moving_ahead_or_waiting" => Self::AH,
            "la" | "lateral" => Self::LA,
            "oc" | "oncoming" => Self::OC,
            "tc" | "turning" => Self::TC,
            "vp" | "pedestrian" => Self::VP,
            "vo" | "obstacle" => Self::VO,
            "oo" | "leave_to_left" | "leave_to_right" | "out_of_control" => Self::OO,
            "uk" | "unknown" => Self::UK,
            other => {
                return Err(TadError::validation(
                    "category",
                    format!("unknown accident category {other:?}"),
                ))
            }
        };
        Ok(code)
    }
}

/// Clip-level category: normal driving, or an accident class with the
/// ego-involvement flag.
///
/// The textual tag is `normal`, `XX` for an ego-involved accident of class
/// `XX`, or `XX*` for a non-ego accident.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Category {
    Normal,
    Accident { code: AccidentCode, ego: bool },
}

impl Category {
    pub fn is_normal(&self) -> bool {
        matches!(self, Self::Normal)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Normal => f.write_str("normal"),
            Self::Accident { code, ego: true } => f.write_str(code.as_str()),
            Self::Accident { code, ego: false } => write!(f, "{}*", code.as_str()),
        }
    }
}

impl FromStr for Category {
    type Err = TadError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("normal") {
            return Ok(Self::Normal);
        }
        let (body, ego) = match s.strip_suffix('*') {
            Some(body) => (body, false),
            None => (s, true),
        };
        Ok(Self::Accident {
            code: body.parse()?,
            ego,
        })
    }
}

impl TryFrom<String> for Category {
    type Error = TadError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Category> for String {
    fn from(c: Category) -> Self {
        c.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub id: String,
    pub category: Category,
    /// Source video resolution `[width, height]` in pixels.
    pub resolution: [u32; 2],
    pub flows: Vec<FlowFrame>,
    pub tracks: TrackSet,
    pub labels: Vec<u8>,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.flows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flows.is_empty()
    }

    pub fn flow_shape(&self) -> Option<(usize, usize)> {
        self.flows.first().map(|f| (f.height, f.width))
    }

    pub fn is_all_normal(&self) -> bool {
        self.labels.iter().all(|&l| l == 0)
    }

    /// Checks every invariant of the clip and its parts, reporting the first
    /// violation.
    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.flows.len() {
            return Err(TadError::validation(
                "labels",
                format!("{} labels for {} flow frames", self.labels.len(), self.flows.len()),
            ));
        }
        if let Some(bad) = self.labels.iter().position(|&l| l > 1) {
            return Err(TadError::validation("labels", format!("label[{bad}] is not 0/1")));
        }
        let shape = self.flow_shape();
        for (i, f) in self.flows.iter().enumerate() {
            if f.t != i {
                return Err(TadError::validation(
                    "flows",
                    format!("frame index {} at position {i}", f.t),
                ));
            }
            if Some((f.height, f.width)) != shape {
                return Err(TadError::validation("flows", format!("frame {i} changes shape")));
            }
            f.validate()?;
        }
        if !self.flows.is_empty() && self.tracks.window != (0, self.flows.len() - 1) {
            return Err(TadError::validation(
                "tracks",
                format!("window {:?} does not span the clip", self.tracks.window),
            ));
        }
        self.tracks.validate()
    }

    /// The normal segment preceding the first anomalous frame.
    pub fn precursor(&self) -> Clip {
        let end = self.labels.iter().position(|&l| l != 0).unwrap_or(self.len());
        let mut tracks = Vec::new();
        for tr in &self.tracks.tracks {
            if tr.start < end {
                let keep = (end - tr.start).min(tr.boxes.len());
                tracks.push(Track {
                    id: tr.id,
                    start: tr.start,
                    boxes: tr.boxes[..keep].to_vec(),
                });
            }
        }
        Clip {
            id: self.id.clone(),
            category: self.category,
            resolution: self.resolution,
            flows: self.flows[..end].to_vec(),
            tracks: TrackSet {
                tracks,
                window: (0, end.saturating_sub(1)),
            },
            labels: self.labels[..end].to_vec(),
        }
    }
}
