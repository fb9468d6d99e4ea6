//! Deterministic synthetic driving clips.
//!
//! Flow is an ego-motion field (translation gives a constant field, rotation
//! a field linear in pixel position) plus, inside every object box, the
//! object's own velocity. Boxes integrate their object's velocity. Two
//! accident families are simulated: an ego jolt perturbs the global field,
//! a swerve or a sudden stop perturbs one object's kinematics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AccidentCode, BBox, Category, Clip, FlowFrame, Track, TrackSet, DEFAULT_FLOW_SIZE};
use crate::error::{Result, TadError};

/// Ego motion active from `start` until the next segment begins.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoSegment {
    pub start: usize,
    /// Pixels per frame.
    pub translation: [f64; 2],
    /// Radians per frame about the image center.
    pub rotation: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    /// Initial box center, normalized.
    pub center: [f64; 2],
    /// Box width and height, normalized.
    pub size: [f64; 2],
    /// Normalized units per frame.
    pub velocity: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    None,
    EgoJolt,
    ObjectSwerve,
    ObjectStop,
}

impl AnomalyKind {
    /// Category tag assigned to clips with this anomaly.
    pub fn category(self) -> Category {
        match self {
            Self::None => Category::Normal,
            Self::EgoJolt => Category::Accident {
                code: AccidentCode::OO,
                ego: true,
            },
            Self::ObjectSwerve => Category::Accident {
                code: AccidentCode::LA,
                ego: false,
            },
            Self::ObjectStop => Category::Accident {
                code: AccidentCode::ST,
                ego: false,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    pub onset: usize,
    pub duration: usize,
    /// Jolt: pixels per frame of added shake. Swerve: normalized lateral
    /// speed added to the object. Unused for a stop.
    pub magnitude: f64,
    /// Index into `objects` of the perturbed object.
    pub object: usize,
}

impl AnomalySpec {
    pub fn none() -> Self {
        Self {
            kind: AnomalyKind::None,
            onset: 0,
            duration: 0,
            magnitude: 0.0,
            object: 0,
        }
    }

    fn active(&self, t: usize) -> bool {
        self.kind != AnomalyKind::None && t >= self.onset && t < self.onset + self.duration
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorldConfig {
    pub id: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub ego: Vec<EgoSegment>,
    pub objects: Vec<ObjectSpec>,
    pub anomaly: AnomalySpec,
    /// Standard deviation of i.i.d. Gaussian noise added to every flow value.
    pub noise_std: f64,
    pub rng_seed: u64,
}

impl SyntheticWorldConfig {
    /// A clip of `frames` frames with constant ego translation and nothing else.
    pub fn still(frames: usize, translation: [f64; 2]) -> Self {
        Self {
            id: "still".into(),
            frames,
            height: DEFAULT_FLOW_SIZE,
            width: DEFAULT_FLOW_SIZE,
            ego: vec![EgoSegment {
                start: 0,
                translation,
                rotation: 0.0,
            }],
            objects: Vec::new(),
            anomaly: AnomalySpec::none(),
            noise_std: 0.0,
            rng_seed: 0,
        }
    }

    pub fn n_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(TadError::Config("frames, height and width must be positive".into()));
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return Err(TadError::Config("noise_std must be a finite non-negative value".into()));
        }
        let a = &self.anomaly;
        if a.kind != AnomalyKind::None {
            if a.duration == 0 || a.onset + a.duration > self.frames {
                return Err(TadError::Config(format!(
                    "anomaly [{}, {}) lies outside the {}-frame clip",
                    a.onset,
                    a.onset + a.duration,
                    self.frames
                )));
            }
            if matches!(a.kind, AnomalyKind::ObjectSwerve | AnomalyKind::ObjectStop)
                && a.object >= self.objects.len()
            {
                return Err(TadError::Config(format!(
                    "anomaly targets object {} but the scene has {}",
                    a.object,
                    self.objects.len()
                )));
            }
        }
        for o in &self.objects {
            if o.size[0] <= 0.0 || o.size[1] <= 0.0 {
                return Err(TadError::Config("object sizes must be positive".into()));
            }
        }
        Ok(())
    }

    fn ego_at(&self, t: usize) -> EgoSegment {
        self.ego
            .iter()
            .filter(|s| s.start <= t)
            .max_by_key(|s| s.start)
            .copied()
            .unwrap_or(EgoSegment {
                start: 0,
                translation: [0.0, 0.0],
                rotation: 0.0,
            })
    }
}

/// Boxes narrower than this after clamping count as having left the frame.
const MIN_EXTENT: f64 = 1e-3;

/// Renders a clip. Identical configs produce bit-identical clips.
pub fn generate_clip(cfg: &SyntheticWorldConfig) -> Result<Clip> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let (h, w) = (cfg.height, cfg.width);
    let (sx, sy) = ((w - 1).max(1) as f64, (h - 1).max(1) as f64);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let anomaly = cfg.anomaly;

    // Object kinematics first: per-frame boxes and velocities.
    let mut tracks: Vec<Track> = Vec::new();
    let mut velocities: Vec<Vec<[f64; 2]>> = Vec::new();
    for (k, obj) in cfg.objects.iter().enumerate() {
        let mut center = obj.center;
        let mut boxes = Vec::new();
        let mut vels = Vec::new();
        for t in 0..cfg.frames {
            let b = clamp_box(center, obj.size);
            if !b.has_area() || b.x_max - b.x_min < MIN_EXTENT || b.y_max - b.y_min < MIN_EXTENT {
                break;
            }
            let mut vel = obj.velocity;
            if k == anomaly.object && anomaly.active(t) {
                match anomaly.kind {
                    AnomalyKind::ObjectSwerve => {
                        // perpendicular to the heading; straight sideways when static
                        let speed = (vel[0] * vel[0] + vel[1] * vel[1]).sqrt();
                        let (px, py) = if speed > 1e-12 {
                            (-vel[1] / speed, vel[0] / speed)
                        } else {
                            (1.0, 0.0)
                        };
                        vel = [vel[0] + anomaly.magnitude * px, vel[1] + anomaly.magnitude * py];
                    }
                    AnomalyKind::ObjectStop => vel = [0.0, 0.0],
                    _ => {}
                }
            }
            boxes.push(b);
            vels.push(vel);
            center = [center[0] + vel[0], center[1] + vel[1]];
        }
        if !boxes.is_empty() {
            tracks.push(Track {
                id: k as u64 + 1,
                start: 0,
                boxes,
            });
            velocities.push(vels);
        }
    }

    let noise = if cfg.noise_std > 0.0 {
        Some(Normal::new(0.0, cfg.noise_std).expect("validated std"))
    } else {
        None
    };

    let mut flows = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let mut ego = cfg.ego_at(t);
        if anomaly.kind == AnomalyKind::EgoJolt && anomaly.active(t) {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            ego.translation[0] += anomaly.magnitude * theta.cos();
            ego.translation[1] += anomaly.magnitude * theta.sin();
            ego.rotation += rng.random_range(-1.0..=1.0) * anomaly.magnitude * 0.01;
        }
        let mut u = vec![0f64; h * w];
        let mut v = vec![0f64; h * w];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                u[i] = ego.translation[0] - ego.rotation * (y as f64 - cy);
                v[i] = ego.translation[1] + ego.rotation * (x as f64 - cx);
            }
        }
        for (tr, vels) in tracks.iter().zip(&velocities) {
            let Some(b) = tr.at(t) else { continue };
            let vel = vels[t - tr.start];
            let (x0, x1) = ((b.x_min * sx).ceil() as usize, (b.x_max * sx).floor() as usize);
            let (y0, y1) = ((b.y_min * sy).ceil() as usize, (b.y_max * sy).floor() as usize);
            for y in y0..=y1.min(h - 1) {
                for x in x0..=x1.min(w - 1) {
                    let i = y * w + x;
                    u[i] += vel[0] * sx;
                    v[i] += vel[1] * sy;
                }
            }
        }
        if let Some(n) = &noise {
            for val in u.iter_mut().chain(v.iter_mut()) {
                *val += n.sample(&mut rng);
            }
        }
        flows.push(FlowFrame {
            t,
            height: h,
            width: w,
            u: u.into_iter().map(|x| x as f32).collect(),
            v: v.into_iter().map(|x| x as f32).collect(),
        });
    }

    let labels = (0..cfg.frames).map(|t| anomaly.active(t) as u8).collect();
    let clip = Clip {
        id: cfg.id.clone(),
        category: anomaly.kind.category(),
        resolution: [w as u32, h as u32],
        flows,
        tracks: TrackSet {
            tracks,
            window: (0, cfg.frames - 1),
        },
        labels,
    };
    clip.validate()?;
    Ok(clip)
}

fn clamp_box(center: [f64; 2], size: [f64; 2]) -> BBox {
    let c = |v: f64| v.clamp(0.0, 1.0);
    BBox::new(
        c(center[0] - size[0] / 2.0),
        c(center[1] - size[1] / 2.0),
        c(center[0] + size[0] / 2.0),
        c(center[1] + size[1] / 2.0),
    )
}

/// Ranges from which random scenes are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSampler {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub min_objects: i64,
    pub max_objects: i64,
    /// Maximum |translation| per axis, pixels per frame.
    pub max_translation: [f64; 2],
    /// Maximum |rotation|, radians per frame.
    pub max_rotation: f64,
    /// Probability that the ego motion changes once mid-clip.
    pub turn_probability: f64,
    /// Maximum object speed per axis, normalized units per frame.
    pub max_object_speed: f64,
    pub min_object_size: f64,
    pub max_object_size: f64,
    pub noise_std: f64,
    pub onset_range: [usize; 2],
    pub duration_range: [usize; 2],
    pub jolt_magnitude: f64,
    pub swerve_magnitude: f64,
}

impl Default for SceneSampler {
    fn default() -> Self {
        Self {
            frames: 30,
            height: DEFAULT_FLOW_SIZE,
            width: DEFAULT_FLOW_SIZE,
            min_objects: 0,
            max_objects: 3,
            max_translation: [2.0, 1.0],
            max_rotation: 0.01,
            turn_probability: 0.3,
            max_object_speed: 0.008,
            min_object_size: 0.1,
            max_object_size: 0.25,
            noise_std: 0.05,
            onset_range: [12, 18],
            duration_range: [6, 10],
            jolt_magnitude: 5.0,
            swerve_magnitude: 0.02,
        }
    }
}

impl SceneSampler {
    pub fn validate(&self) -> Result<()> {
        if self.min_objects < 0 || self.max_objects < self.min_objects {
            return Err(TadError::Config(format!(
                "object count range [{}, {}] is invalid",
                self.min_objects, self.max_objects
            )));
        }
        if self.onset_range[0] > self.onset_range[1] || self.duration_range[0] > self.duration_range[1] {
            return Err(TadError::Config("onset/duration ranges must be ordered".into()));
        }
        if self.duration_range[0] == 0 {
            return Err(TadError::Config("anomaly duration must be at least one frame".into()));
        }
        if self.onset_range[1] + self.duration_range[1] > self.frames {
            return Err(TadError::Config(format!(
                "anomaly window can exceed the {}-frame clip",
                self.frames
            )));
        }
        if self.min_object_size <= 0.0 || self.max_object_size < self.min_object_size {
            return Err(TadError::Config("object size range is invalid".into()));
        }
        Ok(())
    }

    /// Draws scene `index` of a dataset seeded with `seed`. The draw depends
    /// only on `(seed, index, kind)`.
    pub fn sample(&self, seed: u64, index: u64, kind: AnomalyKind) -> Result<SyntheticWorldConfig> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        let sym = |rng: &mut ChaCha8Rng, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };

        let mut ego = vec![EgoSegment {
            start: 0,
            translation: [sym(&mut rng, self.max_translation[0]), sym(&mut rng, self.max_translation[1])],
            rotation: sym(&mut rng, self.max_rotation),
        }];
        if rng.random_bool(self.turn_probability.clamp(0.0, 1.0)) && self.frames > 2 {
            ego.push(EgoSegment {
                start: rng.random_range(1..self.frames),
                translation: [sym(&mut rng, self.max_translation[0]), sym(&mut rng, self.max_translation[1])],
                rotation: sym(&mut rng, self.max_rotation),
            });
        }

        let needs_object = matches!(kind, AnomalyKind::ObjectSwerve | AnomalyKind::ObjectStop);
        let lo = if needs_object { self.min_objects.max(1) } else { self.min_objects };
        let hi = self.max_objects.max(lo);
        let n = rng.random_range(lo..=hi) as usize;
        let travel = self.max_object_speed * self.frames as f64;
        let objects = (0..n)
            .map(|_| {
                let size = [
                    rng.random_range(self.min_object_size..=self.max_object_size),
                    rng.random_range(self.min_object_size..=self.max_object_size),
                ];
                // keep the whole trajectory comfortably inside the frame
                let margin = |s: f64| (s / 2.0 + travel + 0.02).min(0.45);
                let center = [
                    rng.random_range(margin(size[0])..=1.0 - margin(size[0])),
                    rng.random_range(margin(size[1])..=1.0 - margin(size[1])),
                ];
                let velocity = [
                    sym(&mut rng, self.max_object_speed),
                    sym(&mut rng, self.max_object_speed),
                ];
                ObjectSpec {
                    center,
                    size,
                    velocity,
                }
            })
            .collect::<Vec<_>>();

        let anomaly = if kind == AnomalyKind::None {
            AnomalySpec::none()
        } else {
            let onset = rng.random_range(self.onset_range[0]..=self.onset_range[1]);
            let duration = rng.random_range(self.duration_range[0]..=self.duration_range[1]);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            AnomalySpec {
                kind,
                onset,
                duration,
                magnitude: match kind {
                    AnomalyKind::EgoJolt => self.jolt_magnitude,
                    AnomalyKind::ObjectSwerve => sign * self.swerve_magnitude,
                    _ => 0.0,
                },
                object: if n > 0 { rng.random_range(0..n) } else { 0 },
            }
        };

        let tag = match kind {
            AnomalyKind::None => "normal",
            AnomalyKind::EgoJolt => "jolt",
            AnomalyKind::ObjectSwerve => "swerve",
            AnomalyKind::ObjectStop => "stop",
        };
        Ok(SyntheticWorldConfig {
            id: format!("synth-{seed}-{index:05}-{tag}"),
            frames: self.frames,
            height: self.height,
            width: self.width,
            ego,
            objects,
            anomaly,
            noise_std: self.noise_std,
            rng_seed: seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        })
    }
}

/// How many clips of each kind to draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub scene: SceneSampler,
    pub normal: usize,
    pub ego_jolt: usize,
    pub object_swerve: usize,
    pub object_stop: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            scene: SceneSampler::default(),
            normal: 10,
            ego_jolt: 0,
            object_swerve: 0,
            object_stop: 0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn total(&self) -> usize {
        self.normal + self.ego_jolt + self.object_swerve + self.object_stop
    }

    /// Generates the clips in a fixed order: normal, jolt, swerve, stop.
    pub fn generate(&self) -> Result<Vec<Clip>> {
        let kinds = std::iter::repeat_n(AnomalyKind::None, self.normal)
            .chain(std::iter::repeat_n(AnomalyKind::EgoJolt, self.ego_jolt))
            .chain(std::iter::repeat_n(AnomalyKind::ObjectSwerve, self.object_swerve))
            .chain(std::iter::repeat_n(AnomalyKind::ObjectStop, self.object_stop));
        kinds
            .enumerate()
            .map(|(i, kind)| generate_clip(&self.scene.sample(self.seed, i as u64, kind)?))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_translation_gives_constant_field() {
        let clip = generate_clip(&SyntheticWorldConfig::still(10, [2.0, 0.0])).unwrap();
        assert_eq!(clip.len(), 10);
        for f in &clip.flows {
            assert!(f.u.iter().all(|&x| x == 2.0));
            assert!(f.v.iter().all(|&x| x == 0.0));
        }
        assert_eq!(clip.labels.iter().map(|&l| l as usize).sum::<usize>(), 0);
    }

    #[test]
    fn rotation_field_is_linear_in_position() {
        let mut cfg = SyntheticWorldConfig::still(1, [0.0, 0.0]);
        cfg.ego[0].rotation = 0.1;
        cfg.height = 5;
        cfg.width = 5;
        let clip = generate_clip(&cfg).unwrap();
        let f = &clip.flows[0];
        // center pixel is still, v grows with x, u falls with y
        assert!(f.at(2, 2).0.abs() < 1e-7 && f.at(2, 2).1.abs() < 1e-7);
        assert!((f.at(4, 2).1 - 0.2).abs() < 1e-6);
        assert!((f.at(2, 4).0 + 0.2).abs() < 1e-6);
    }

    #[test]
    fn object_flow_adds_velocity_inside_box() {
        let mut cfg = SyntheticWorldConfig::still(3, [1.0, 0.0]);
        cfg.objects.push(ObjectSpec {
            center: [0.5, 0.5],
            size: [0.2, 0.2],
            velocity: [0.01, 0.0],
        });
        let clip = generate_clip(&cfg).unwrap();
        let f = &clip.flows[0];
        let inside = f.at(32, 32).0;
        assert!((inside - (1.0 + 0.01 * 63.0) as f32).abs() < 1e-5);
        assert_eq!(f.at(0, 0).0, 1.0);
        let tr = &clip.tracks.tracks[0];
        assert!((tr.boxes[2].x_min - (tr.boxes[0].x_min + 0.02)).abs() < 1e-12);
    }

    #[test]
    fn anomaly_labels_match_window() {
        let mut cfg = SyntheticWorldConfig::still(20, [1.0, 0.0]);
        cfg.anomaly = AnomalySpec {
            kind: AnomalyKind::EgoJolt,
            onset: 5,
            duration: 4,
            magnitude: 3.0,
            object: 0,
        };
        let clip = generate_clip(&cfg).unwrap();
        let ones: Vec<usize> = (0..20).filter(|&t| clip.labels[t] == 1).collect();
        assert_eq!(ones, vec![5, 6, 7, 8]);
        assert_ne!(clip.flows[5], clip.flows[4]);
    }

    #[test]
    fn rejects_onset_outside_clip() {
        let mut cfg = SyntheticWorldConfig::still(10, [0.0, 0.0]);
        cfg.anomaly = AnomalySpec {
            kind: AnomalyKind::EgoJolt,
            onset: 8,
            duration: 5,
            magnitude: 1.0,
            object: 0,
        };
        assert!(generate_clip(&cfg).is_err());
    }

    #[test]
    fn rejects_negative_object_count() {
        let s = SceneSampler {
            min_objects: -1,
            ..SceneSampler::default()
        };
        assert!(s.sample(0, 0, AnomalyKind::None).is_err());
    }

    #[test]
    fn swerve_requires_an_object() {
        let mut cfg = SyntheticWorldConfig::still(10, [0.0, 0.0]);
        cfg.anomaly = AnomalySpec {
            kind: AnomalyKind::ObjectSwerve,
            onset: 2,
            duration: 2,
            magnitude: 0.01,
            object: 0,
        };
        assert!(generate_clip(&cfg).is_err());
    }

    #[test]
    fn same_seed_same_clip() {
        let s = SceneSampler::default();
        let cfg = s.sample(7, 3, AnomalyKind::ObjectSwerve).unwrap();
        assert_eq!(generate_clip(&cfg).unwrap(), generate_clip(&cfg).unwrap());
        let other = s.sample(7, 4, AnomalyKind::ObjectSwerve).unwrap();
        assert_ne!(cfg, other);
    }
}
