//! Spinning LiDAR simulation by snapshot ray casting against agent boxes,
//! static scenery and a flat ground plane.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{ray_obb_intersect, OrientedBox, Pose, Ray, Vec3};
use crate::polyline;
use crate::road::{LaneGraph, RoadType, LANE_WIDTH};
use crate::traffic::AgentState;

/// Sensor height above the ego box centre for a car (1.9 m above ground).
pub const MOUNT_HEIGHT_ABOVE_CENTER: f64 = 1.15;

#[derive(Debug, Error, PartialEq)]
pub enum LidarError {
    #[error("unsupported channel count {0}; expected 32 or 64")]
    Channels(u32),
    #[error("elevation table has {got} entries for {channels} channels")]
    ElevationCount { channels: u32, got: usize },
    #[error("elevation angles must be strictly decreasing")]
    ElevationOrder,
    #[error("azimuth step {0} deg must lie in (0, 1] and divide 360")]
    AzimuthStep(f64),
    #[error("max range must be positive, got {0}")]
    MaxRange(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub channels: u32,
    /// Degrees, channel 0 first, strictly decreasing.
    pub elevation_angles: Vec<f64>,
    pub azimuth_step: f64,
    pub max_range: f64,
    /// Sensor pose relative to the ego box centre.
    pub mount: Pose,
}

fn uniform_elevations(channels: u32, top: f64, bottom: f64) -> Vec<f64> {
    let n = channels as usize;
    (0..n).map(|i| top + (bottom - top) * i as f64 / (n - 1) as f64).collect()
}

impl BeamConfig {
    pub fn default_32() -> Self {
        Self {
            channels: 32,
            elevation_angles: uniform_elevations(32, 10.0, -30.0),
            azimuth_step: 0.4,
            max_range: 120.0,
            mount: Pose::from_translation(0.0, 0.0, MOUNT_HEIGHT_ABOVE_CENTER),
        }
    }

    pub fn default_64() -> Self {
        Self {
            channels: 64,
            elevation_angles: uniform_elevations(64, 15.0, -25.0),
            azimuth_step: 0.2,
            max_range: 120.0,
            mount: Pose::from_translation(0.0, 0.0, MOUNT_HEIGHT_ABOVE_CENTER),
        }
    }

    /// Default configuration for a channel count.
    pub fn for_channels(channels: u32) -> Result<Self, LidarError> {
        match channels {
            32 => Ok(Self::default_32()),
            64 => Ok(Self::default_64()),
            c => Err(LidarError::Channels(c)),
        }
    }

    pub fn azimuth_count(&self) -> usize {
        (360.0 / self.azimuth_step).round() as usize
    }

    pub fn validate(&self) -> Result<(), LidarError> {
        if self.channels != 32 && self.channels != 64 {
            return Err(LidarError::Channels(self.channels));
        }
        if self.elevation_angles.len() != self.channels as usize {
            return Err(LidarError::ElevationCount { channels: self.channels, got: self.elevation_angles.len() });
        }
        if self.elevation_angles.windows(2).any(|w| w[1] >= w[0]) {
            return Err(LidarError::ElevationOrder);
        }
        let step = self.azimuth_step;
        let n = 360.0 / step;
        if !(step > 0.0 && step <= 1.0) || (n - n.round()).abs() * step > 1e-9 {
            return Err(LidarError::AzimuthStep(step));
        }
        if !(self.max_range > 0.0) {
            return Err(LidarError::MaxRange(self.max_range));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Beam {
    pub channel: u8,
    pub azimuth_index: u32,
    pub elevation_deg: f64,
    pub azimuth_deg: f64,
    /// Unit direction in the sensor frame.
    pub direction: Vec3,
}

pub fn beam_direction(elevation_deg: f64, azimuth_deg: f64) -> Vec3 {
    let (el, az) = (elevation_deg.to_radians(), azimuth_deg.to_radians());
    Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
}

/// All beams in (channel, azimuth index) order.
pub fn beam_table(cfg: &BeamConfig) -> Result<Vec<Beam>, LidarError> {
    cfg.validate()?;
    let n_az = cfg.azimuth_count();
    let mut beams = Vec::with_capacity(cfg.channels as usize * n_az);
    for (ch, &el) in cfg.elevation_angles.iter().enumerate() {
        for k in 0..n_az {
            let az = k as f64 * cfg.azimuth_step;
            beams.push(Beam {
                channel: ch as u8,
                azimuth_index: k as u32,
                elevation_deg: el,
                azimuth_deg: az,
                direction: beam_direction(el, az),
            });
        }
    }
    Ok(beams)
}

/// Per-point class codes: 0 ground, 1..=6 agent classes, then scenery.
pub mod point_class {
    pub const GROUND: u8 = 0;
    pub const BUILDING: u8 = 7;
    pub const POLE: u8 = 8;
    pub const BARRIER: u8 = 9;
    pub const MAX: u8 = 9;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneryClass {
    Building,
    Pole,
    Barrier,
}

impl SceneryClass {
    pub fn code(self) -> u8 {
        match self {
            SceneryClass::Building => point_class::BUILDING,
            SceneryClass::Pole => point_class::POLE,
            SceneryClass::Barrier => point_class::BARRIER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneryBox {
    pub bbox: OrientedBox,
    pub class: SceneryClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticScenery {
    pub ground_z: f64,
    pub boxes: Vec<SceneryBox>,
}

impl StaticScenery {
    pub fn empty(ground_z: f64) -> Self {
        Self { ground_z, boxes: Vec::new() }
    }
}

fn upright_box(center_xy: Vec3, yaw: f64, half: Vec3, ground_z: f64) -> OrientedBox {
    let pose = Pose::from_yaw(yaw, Vec3::new(center_xy.x, center_xy.y, ground_z + half.z));
    OrientedBox::from_pose(&pose, half)
}

/// Roadside scenery: buildings inside sidewalk loops, poles along them and
/// barriers beside highway lanes.
pub fn generate_scenery(g: &LaneGraph, seed: u64) -> StaticScenery {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ground_z = 0.0;
    let mut boxes = Vec::new();
    for walk in &g.sidewalks {
        let len = polyline::length(walk);
        let mut s = rng.gen_range(0.0..10.0);
        while s < len {
            let (p, t) = polyline::sample(walk, s);
            // Poles sit just off the walking line on the road side.
            let side = if polyline::signed_area(walk) >= 0.0 { polyline::right_of(&t) } else { polyline::left_of(&t) };
            let c = p + side * 1.2;
            boxes.push(SceneryBox {
                bbox: upright_box(c, 0.0, Vec3::new(0.12, 0.12, 2.5), ground_z),
                class: SceneryClass::Pole,
            });
            s += rng.gen_range(18.0..30.0);
        }
        let (min, max) = walk
            .iter()
            .fold((Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
        let target = ((max.x - min.x) * (max.y - min.y) / 600.0).clamp(1.0, 12.0) as usize;
        let mut placed: Vec<OrientedBox> = Vec::new();
        for _ in 0..target * 6 {
            if placed.len() >= target {
                break;
            }
            let c = Vec3::new(rng.gen_range(min.x..max.x), rng.gen_range(min.y..max.y), 0.0);
            let half = Vec3::new(rng.gen_range(3.0..9.0), rng.gen_range(3.0..9.0), rng.gen_range(3.0..12.0));
            let yaw = rng.gen_range(0.0..std::f64::consts::PI);
            let b = upright_box(c, yaw, half, ground_z);
            let inside =
                b.corners().iter().all(|q| polyline::contains_xy(walk, q) && polyline::distance_xy(walk, q) > 3.0);
            if inside && !placed.iter().any(|o| o.intersects(&b)) {
                placed.push(b);
            }
        }
        boxes.extend(placed.into_iter().map(|bbox| SceneryBox { bbox, class: SceneryClass::Building }));
    }
    for seg in g.segments.values() {
        if seg.road_type != RoadType::Highway || seg.key.lane_id.abs() != 2 {
            continue;
        }
        let pts = &seg.centerline;
        let (a, b) = (pts[0], pts[pts.len() - 1]);
        let chord = b - a;
        if chord.norm() < 2.0 {
            continue;
        }
        let t = chord.normalize();
        let c = (a + b) * 0.5 + polyline::right_of(&t) * (LANE_WIDTH / 2.0 + 1.5);
        boxes.push(SceneryBox {
            bbox: upright_box(c, t.y.atan2(t.x), Vec3::new(chord.norm() / 2.0, 0.2, 0.5), ground_z),
            class: SceneryClass::Barrier,
        });
    }
    StaticScenery { ground_z, boxes }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaggedPointCloud {
    /// Sensor frame at capture time.
    pub points: Vec<Vec3>,
    pub tags: Vec<u32>,
    pub classes: Vec<u8>,
    pub beam_ids: Vec<u8>,
}

impl TaggedPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub range: f64,
    pub tag: u32,
    pub class: u8,
}

struct Target {
    bbox: OrientedBox,
    tag: u32,
    class: u8,
    radius: f64,
}

/// World geometry expressed in the sensor frame, ready for ray casting.
pub struct SensorScene {
    pub sensor_pose: Pose,
    pub max_range: f64,
    targets: Vec<Target>,
    /// Ground plane `n . x = d` in the sensor frame.
    ground_normal: Vec3,
    ground_d: f64,
}

impl SensorScene {
    pub fn new(agents: &[&AgentState], scenery: &StaticScenery, ego: &AgentState, cfg: &BeamConfig) -> Self {
        let sensor_pose = ego.pose.compose(&cfg.mount);
        let to_sensor = sensor_pose.inverse();
        let mut targets = Vec::new();
        for a in agents.iter().filter(|a| a.actor_id != ego.actor_id) {
            let bbox = a.bbox().transformed(&to_sensor);
            targets.push(Target { radius: bbox.bounding_radius(), bbox, tag: a.actor_id, class: a.class.code() });
        }
        for s in &scenery.boxes {
            let bbox = s.bbox.transformed(&to_sensor);
            targets.push(Target { radius: bbox.bounding_radius(), bbox, tag: 0, class: s.class.code() });
        }
        let ground_normal = to_sensor.transform_vector(&Vec3::z());
        let ground_d = ground_normal.dot(&to_sensor.transform_point(&Vec3::new(0.0, 0.0, scenery.ground_z)));
        Self { sensor_pose, max_range: cfg.max_range, targets, ground_normal, ground_d }
    }

    fn ground_hit(&self, dir: &Vec3) -> Option<f64> {
        let denom = self.ground_normal.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = self.ground_d / denom;
        (t >= 0.0).then_some(t)
    }

    fn cast_among(&self, dir: &Vec3, candidates: impl Iterator<Item = usize>) -> Option<Hit> {
        let ray = Ray { origin: Vec3::zeros(), direction: *dir };
        let mut best: Option<Hit> = self.ground_hit(dir).map(|t| Hit { range: t, tag: 0, class: point_class::GROUND });
        for i in candidates {
            let tg = &self.targets[i];
            if let Some(t) = ray_obb_intersect(&ray, &tg.bbox) {
                if best.is_none_or(|b| t < b.range) {
                    best = Some(Hit { range: t, tag: tg.tag, class: tg.class });
                }
            }
        }
        best.filter(|h| h.range <= self.max_range)
    }

    /// Nearest surface along a unit sensor-frame direction, testing every
    /// target.
    pub fn cast(&self, dir: &Vec3) -> Option<Hit> {
        self.cast_among(dir, 0..self.targets.len())
    }

    /// Indices of targets whose bounding sphere reaches each azimuth column.
    fn azimuth_bins(&self, cfg: &BeamConfig) -> Vec<Vec<usize>> {
        let n_az = cfg.azimuth_count();
        let step = cfg.azimuth_step.to_radians();
        let mut bins = vec![Vec::new(); n_az];
        for (i, tg) in self.targets.iter().enumerate() {
            let c = tg.bbox.center;
            if c.norm() - tg.radius > self.max_range {
                continue;
            }
            let rho = c.xy().norm();
            if rho <= tg.radius {
                bins.iter_mut().for_each(|b| b.push(i));
                continue;
            }
            let half = (tg.radius / rho).asin();
            let mid = c.y.atan2(c.x);
            let lo = ((mid - half) / step).floor() as i64 - 1;
            let hi = ((mid + half) / step).ceil() as i64 + 1;
            let span = (hi - lo + 1).min(n_az as i64);
            for k in lo..lo + span {
                bins[k.rem_euclid(n_az as i64) as usize].push(i);
            }
        }
        bins
    }
}

/// Simulates one snapshot scan from `ego`'s sensor.
pub fn scan(
    agents: &[&AgentState],
    scenery: &StaticScenery,
    ego: &AgentState,
    cfg: &BeamConfig,
) -> Result<TaggedPointCloud, LidarError> {
    cfg.validate()?;
    let scene = SensorScene::new(agents, scenery, ego, cfg);
    Ok(scan_scene(&scene, cfg))
}

pub fn scan_scene(scene: &SensorScene, cfg: &BeamConfig) -> TaggedPointCloud {
    let n_az = cfg.azimuth_count();
    let bins = scene.azimuth_bins(cfg);
    let columns: Vec<Vec<Option<(Vec3, Hit)>>> = (0..n_az)
        .into_par_iter()
        .map(|k| {
            let az = k as f64 * cfg.azimuth_step;
            cfg.elevation_angles
                .iter()
                .map(|&el| {
                    let dir = beam_direction(el, az);
                    scene.cast_among(&dir, bins[k].iter().copied()).map(|h| (dir * h.range, h))
                })
                .collect()
        })
        .collect();
    let mut cloud = TaggedPointCloud::default();
    for ch in 0..cfg.channels as usize {
        for col in &columns {
            if let Some((p, h)) = col[ch] {
                cloud.points.push(p);
                cloud.tags.push(h.tag);
                cloud.classes.push(h.class);
                cloud.beam_ids.push(ch as u8);
            }
        }
    }
    cloud
}
