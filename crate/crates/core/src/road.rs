//! Procedural lane graphs and coverage-greedy route banks.
//!
//! A town is a set of directed lane segments keyed by
//! `(road_id, section_id, lane_id)`. Forward lanes carry positive lane ids and
//! follow the road's reference line; backward lanes carry negative ids. Every
//! road is cut into sections no longer than [`MAX_SEGMENT_LENGTH`].
//!
//! Junction signal groups come in pairs: groups `2m` and `2m + 1` are the two
//! opposing phases of junction `m`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::f64::consts::{FRAC_PI_2, PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geom::Vec3;
use crate::polyline;

pub const LANE_WIDTH: f64 = 3.5;
pub const MAX_SEGMENT_LENGTH: f64 = 25.0;
pub const MIN_POINT_SPACING: f64 = 0.5;
pub const MIN_TOWN_EXTENT: f64 = 100.0;

pub const DEFAULT_TAU: usize = 5;
pub const DEFAULT_MIN_ROUTE_LENGTH: f64 = 400.0;
pub const DEFAULT_CANDIDATE_BUDGET: usize = 500;

/// Distance from a grid node to where its incident roads begin.
const JUNCTION_SETBACK: f64 = 14.0;
const REFERENCE_SPACING: f64 = 2.0;

#[derive(Debug, Error, PartialEq)]
pub enum RoadError {
    #[error("town extent {0} m is below the {MIN_TOWN_EXTENT} m minimum")]
    ExtentTooSmall(f64),
    #[error("lane graph has no segments")]
    EmptyGraph,
    #[error("no segment has a successor and no single segment reaches {0} m")]
    RouteUnreachable(f64),
    #[error("invalid lane graph: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SegmentKey {
    pub road_id: i32,
    pub section_id: i32,
    pub lane_id: i32,
}

impl SegmentKey {
    pub const fn new(road_id: i32, section_id: i32, lane_id: i32) -> Self {
        Self { road_id, section_id, lane_id }
    }
}

impl std::fmt::Display for SegmentKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.road_id, self.section_id, self.lane_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoadType {
    Urban,
    Arterial,
    Highway,
    Roundabout,
    Junction,
}

impl RoadType {
    /// Legal speed in m/s (30, 50 and 100 km/h tiers).
    pub fn speed_limit(self) -> f64 {
        match self {
            RoadType::Urban | RoadType::Roundabout | RoadType::Junction => 8.3,
            RoadType::Arterial => 13.9,
            RoadType::Highway => 27.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneSegment {
    pub key: SegmentKey,
    pub centerline: Vec<Vec3>,
    pub width: f64,
    pub road_type: RoadType,
    pub speed_limit: f64,
    pub successors: Vec<SegmentKey>,
    pub signal_group: Option<u32>,
}

impl LaneSegment {
    pub fn length(&self) -> f64 {
        polyline::length(&self.centerline)
    }

    /// Position and unit heading at arc length `s`.
    pub fn sample(&self, s: f64) -> (Vec3, Vec3) {
        polyline::sample(&self.centerline, s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Junction {
    pub signal_group: u32,
    pub members: Vec<SegmentKey>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds2 {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneGraph {
    #[serde(with = "segment_list")]
    pub segments: BTreeMap<SegmentKey, LaneSegment>,
    pub junctions: Vec<Junction>,
    /// Closed pedestrian loops; the last point repeats the first.
    pub sidewalks: Vec<Vec<Vec3>>,
    pub bounds: Bounds2,
}

mod segment_list {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(map: &BTreeMap<SegmentKey, LaneSegment>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(map.values())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<SegmentKey, LaneSegment>, D::Error> {
        let list = Vec::<LaneSegment>::deserialize(d)?;
        Ok(list.into_iter().map(|s| (s.key, s)).collect())
    }
}

impl LaneGraph {
    pub fn get(&self, key: &SegmentKey) -> Option<&LaneSegment> {
        self.segments.get(key)
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn segment_length(&self, key: &SegmentKey) -> f64 {
        self.segments.get(key).map_or(0.0, LaneSegment::length)
    }

    /// Adjacent lane in the same travel direction, `toward_left` meaning
    /// toward the road's median.
    pub fn adjacent_lane(&self, key: &SegmentKey, toward_left: bool) -> Option<SegmentKey> {
        if key.lane_id == 0 {
            return None;
        }
        let sign = key.lane_id.signum();
        let mag = key.lane_id.abs();
        let target = if toward_left { mag - 1 } else { mag + 1 };
        if target < 1 {
            return None;
        }
        let k = SegmentKey::new(key.road_id, key.section_id, sign * target);
        self.segments.contains_key(&k).then_some(k)
    }

    pub fn max_speed_limit(&self) -> f64 {
        self.segments.values().map(|s| s.speed_limit).fold(0.0, f64::max)
    }

    /// Canonical JSON bytes; identical graphs serialize identically.
    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("lane graph serializes")
    }

    /// Hex SHA-256 of the canonical JSON.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json()))
    }

    /// Checks every structural invariant of the graph.
    pub fn validate(&self) -> Result<(), RoadError> {
        let bad = |m: String| Err(RoadError::Invalid(m));
        if self.segments.is_empty() {
            return Err(RoadError::EmptyGraph);
        }
        for (key, seg) in &self.segments {
            if *key != seg.key {
                return bad(format!("segment stored under {key} has key {}", seg.key));
            }
            if seg.centerline.len() < 2 {
                return bad(format!("{key}: centerline has fewer than 2 points"));
            }
            if let Some(w) = seg.centerline.windows(2).find(|w| (w[1] - w[0]).norm() < MIN_POINT_SPACING - 1e-9) {
                return bad(format!("{key}: centerline points {:.3} m apart", (w[1] - w[0]).norm()));
            }
            if seg.speed_limit <= 0.0 {
                return bad(format!("{key}: non-positive speed limit"));
            }
            if let Some(s) = seg.successors.iter().find(|s| !self.segments.contains_key(s)) {
                return bad(format!("{key}: unknown successor {s}"));
            }
        }
        for j in &self.junctions {
            if let Some(m) = j.members.iter().find(|m| !self.segments.contains_key(m)) {
                return bad(format!("junction group {}: unknown member {m}", j.signal_group));
            }
        }
        if !self.is_weakly_connected() {
            return bad("graph is not weakly connected".into());
        }
        Ok(())
    }

    pub fn is_weakly_connected(&self) -> bool {
        let keys: Vec<SegmentKey> = self.segments.keys().copied().collect();
        let index: BTreeMap<SegmentKey, usize> = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        let mut adj = vec![Vec::new(); keys.len()];
        for (i, k) in keys.iter().enumerate() {
            for s in &self.segments[k].successors {
                if let Some(&j) = index.get(s) {
                    adj[i].push(j);
                    adj[j].push(i);
                }
            }
        }
        let mut seen = vec![false; keys.len()];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = queue.pop_front() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    count += 1;
                    queue.push_back(j);
                }
            }
        }
        count == keys.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Archetype {
    Grid,
    Roundabout,
    HighwayLoop,
    Mixed,
}

impl Archetype {
    pub fn name(self) -> &'static str {
        match self {
            Archetype::Grid => "grid",
            Archetype::Roundabout => "roundabout",
            Archetype::HighwayLoop => "highway-loop",
            Archetype::Mixed => "mixed",
        }
    }
}

impl std::str::FromStr for Archetype {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "grid" => Ok(Archetype::Grid),
            "roundabout" => Ok(Archetype::Roundabout),
            "highway-loop" => Ok(Archetype::HighwayLoop),
            "mixed" => Ok(Archetype::Mixed),
            other => Err(format!("unknown archetype `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TownSpec {
    pub archetype: Archetype,
    pub extent: f64,
    pub seed: u64,
}

/// Generates a town deterministically from `spec`.
pub fn generate_town(spec: &TownSpec) -> Result<LaneGraph, RoadError> {
    if !(spec.extent >= MIN_TOWN_EXTENT) {
        return Err(RoadError::ExtentTooSmall(spec.extent));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut b = TownBuilder::default();
    match spec.archetype {
        Archetype::Grid => build_grid(&mut b, spec.extent, false, &mut rng),
        Archetype::Mixed => build_grid(&mut b, spec.extent, true, &mut rng),
        Archetype::Roundabout => build_roundabout(&mut b, spec.extent, &mut rng),
        Archetype::HighwayLoop => build_highway_loop(&mut b, spec.extent, &mut rng),
    }
    let half = spec.extent / 2.0;
    let graph = LaneGraph {
        segments: b.segments,
        junctions: b.junctions,
        sidewalks: b.sidewalks,
        bounds: Bounds2 { min: [-half, -half], max: [half, half] },
    };
    graph.validate()?;
    Ok(graph)
}

#[derive(Default)]
struct TownBuilder {
    segments: BTreeMap<SegmentKey, LaneSegment>,
    junctions: Vec<Junction>,
    sidewalks: Vec<Vec<Vec3>>,
    next_road: i32,
    next_junction: u32,
}

#[derive(Debug, Clone)]
struct RoadHandle {
    road_id: i32,
    sections: i32,
    forward: i32,
    backward: i32,
    closed: bool,
}

impl RoadHandle {
    /// First section a vehicle enters on this lane.
    fn entry(&self, lane_id: i32) -> SegmentKey {
        let section = if lane_id > 0 { 0 } else { self.sections - 1 };
        SegmentKey::new(self.road_id, section, lane_id)
    }

    fn exit(&self, lane_id: i32) -> SegmentKey {
        let section = if lane_id > 0 { self.sections - 1 } else { 0 };
        SegmentKey::new(self.road_id, section, lane_id)
    }
}

impl TownBuilder {
    fn new_road_id(&mut self) -> i32 {
        self.next_road += 1;
        self.next_road
    }

    fn new_junction(&mut self) -> (u32, u32) {
        let m = self.next_junction;
        self.next_junction += 1;
        (2 * m, 2 * m + 1)
    }

    fn segment_mut(&mut self, key: &SegmentKey) -> &mut LaneSegment {
        self.segments.get_mut(key).expect("segment exists")
    }

    fn link(&mut self, from: SegmentKey, to: SegmentKey) {
        let seg = self.segment_mut(&from);
        if !seg.successors.contains(&to) {
            seg.successors.push(to);
        }
    }

    /// Adds a road along `reference` (any spacing; resampled internally).
    /// Closed references must repeat their first point at the end.
    fn add_road(
        &mut self,
        reference: &[Vec3],
        forward: i32,
        backward: i32,
        road_type: RoadType,
        closed: bool,
    ) -> RoadHandle {
        self.add_road_offset(reference, forward, backward, road_type, closed, LANE_WIDTH / 2.0)
    }

    /// Like [`Self::add_road`], with lane 1 centred `first_offset` from the
    /// reference line instead of half a lane.
    fn add_road_offset(
        &mut self,
        reference: &[Vec3],
        forward: i32,
        backward: i32,
        road_type: RoadType,
        closed: bool,
        first_offset: f64,
    ) -> RoadHandle {
        let reference = polyline::resample(reference, REFERENCE_SPACING);
        let mut lanes: Vec<(i32, Vec<Vec3>)> = Vec::new();
        for j in 1..=forward {
            let off = first_offset + (j - 1) as f64 * LANE_WIDTH;
            lanes.push((j, polyline::offset(&reference, off, closed)));
        }
        for j in 1..=backward {
            let off = -(first_offset + (j - 1) as f64 * LANE_WIDTH);
            lanes.push((-j, polyline::offset(&reference, off, closed)));
        }
        let ref_len = polyline::length(&reference);
        let last = (reference.len() - 1) as f64;
        let mut sections = ((ref_len / (MAX_SEGMENT_LENGTH * 0.9)).ceil() as i32).max(1);
        let pieces = loop {
            // Cuts at equal reference arc length; reference is uniform so
            // arc length is proportional to the vertex parameter.
            let params: Vec<f64> = (1..sections).map(|k| last * k as f64 / sections as f64).collect();
            let pieces: Vec<(i32, Vec<Vec<Vec3>>)> = lanes
                .iter()
                .map(|(id, pts)| (*id, polyline::split_at_params(pts, &params, MIN_POINT_SPACING)))
                .collect();
            let ok = pieces.iter().all(|(_, ps)| ps.iter().all(|p| polyline::length(p) <= MAX_SEGMENT_LENGTH));
            if ok {
                break pieces;
            }
            sections += 1;
        };
        let road_id = self.new_road_id();
        for (lane_id, lane_pieces) in pieces {
            for (k, mut pts) in lane_pieces.into_iter().enumerate() {
                if lane_id < 0 {
                    pts.reverse();
                }
                let key = SegmentKey::new(road_id, k as i32, lane_id);
                let next = if lane_id > 0 {
                    if (k as i32) + 1 < sections {
                        Some(k as i32 + 1)
                    } else if closed {
                        Some(0)
                    } else {
                        None
                    }
                } else if k > 0 {
                    Some(k as i32 - 1)
                } else if closed {
                    Some(sections - 1)
                } else {
                    None
                };
                let successors = next.map(|n| vec![SegmentKey::new(road_id, n, lane_id)]).unwrap_or_default();
                self.segments.insert(
                    key,
                    LaneSegment {
                        key,
                        centerline: pts,
                        width: LANE_WIDTH,
                        road_type,
                        speed_limit: road_type.speed_limit(),
                        successors,
                        signal_group: None,
                    },
                );
            }
        }
        RoadHandle { road_id, sections, forward, backward, closed }
    }

    /// Adds a single-lane connector along `path` from `from` into `to`.
    /// Only the first section carries the signal group. Returns the first key.
    fn add_connector(
        &mut self,
        path: &[Vec3],
        from: SegmentKey,
        to: SegmentKey,
        road_type: RoadType,
        signal_group: Option<u32>,
    ) -> SegmentKey {
        let h = self.add_road_offset(path, 1, 0, road_type, false, 0.0);
        let first = h.entry(1);
        let last = h.exit(1);
        self.segment_mut(&first).signal_group = signal_group;
        self.link(from, first);
        self.link(last, to);
        first
    }

    fn start_point(&self, key: &SegmentKey) -> (Vec3, Vec3) {
        self.segments[key].sample(0.0)
    }

    fn end_point(&self, key: &SegmentKey) -> (Vec3, Vec3) {
        let seg = &self.segments[key];
        seg.sample(seg.length())
    }

    /// Smooth connector path between the end of `from` and the start of `to`.
    fn connector_path(&self, from: &SegmentKey, to: &SegmentKey) -> Vec<Vec3> {
        let (p0, t0) = self.end_point(from);
        let (p1, t1) = self.start_point(to);
        polyline::hermite(p0, t0, p1, t1, 48)
    }

    /// Left-turning loop from the end of lane `from` back onto `to`, which
    /// must start beside it on the left.
    fn turnaround_path(&self, from: &SegmentKey, to: &SegmentKey) -> Vec<Vec3> {
        let (a, heading) = self.end_point(from);
        let (b, _) = self.start_point(to);
        let center = (a + b) * 0.5 + heading * 6.0;
        let radius = (a - center).norm();
        let a0 = (a.y - center.y).atan2(a.x - center.x);
        let mut a1 = (b.y - center.y).atan2(b.x - center.x);
        while a1 <= a0 {
            a1 += TAU;
        }
        let n = 64;
        (0..=n)
            .map(|i| {
                let ang = a0 + (a1 - a0) * i as f64 / n as f64;
                Vec3::new(center.x + radius * ang.cos(), center.y + radius * ang.sin(), a.z)
            })
            .collect()
    }
}

fn v2(x: f64, y: f64) -> Vec3 {
    Vec3::new(x, y, 0.0)
}

/// One road incident to a grid node.
struct Arm {
    road: usize,
    /// The road's reference line starts at this node.
    starts_here: bool,
    /// Unit direction pointing away from the node.
    dir: Vec3,
}

fn build_grid(b: &mut TownBuilder, extent: f64, mixed: bool, rng: &mut ChaCha8Rng) {
    let n = ((extent / 100.0).floor() as usize + 1).max(3);
    let spacing = extent / (n - 1) as f64;
    let half = extent / 2.0;
    let jitter = 0.08 * spacing;
    let mut nodes = vec![vec![Vec3::zeros(); n]; n];
    for (i, col) in nodes.iter_mut().enumerate() {
        for (j, node) in col.iter_mut().enumerate() {
            let jx = if i == 0 || i == n - 1 { 0.0 } else { rng.gen_range(-jitter..jitter) };
            let jy = if j == 0 || j == n - 1 { 0.0 } else { rng.gen_range(-jitter..jitter) };
            *node = v2(-half + i as f64 * spacing + jx, -half + j as f64 * spacing + jy);
        }
    }
    let avenue = n / 2;
    let mut roads: Vec<RoadHandle> = Vec::new();
    let mut arms: BTreeMap<(usize, usize), Vec<Arm>> = BTreeMap::new();
    let mut lanes_of_edge: BTreeMap<((usize, usize), (usize, usize)), i32> = BTreeMap::new();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i + 1 < n {
                edges.push(((i, j), (i + 1, j), mixed && j == avenue));
            }
            if j + 1 < n {
                edges.push(((i, j), (i, j + 1), mixed && i == avenue));
            }
        }
    }
    for (a, c, arterial) in edges {
        let pa = nodes[a.0][a.1];
        let pc = nodes[c.0][c.1];
        let dir = (pc - pa).normalize();
        let start = pa + dir * JUNCTION_SETBACK;
        let end = pc - dir * JUNCTION_SETBACK;
        let (lanes, kind) = if arterial { (2, RoadType::Arterial) } else { (1, RoadType::Urban) };
        let handle = b.add_road(&[start, end], lanes, lanes, kind, false);
        let idx = roads.len();
        roads.push(handle);
        lanes_of_edge.insert((a, c), lanes);
        arms.entry(a).or_default().push(Arm { road: idx, starts_here: true, dir });
        arms.entry(c).or_default().push(Arm { road: idx, starts_here: false, dir: -dir });
    }

    for node_arms in arms.values() {
        let (group_ew, group_ns) = b.new_junction();
        let mut members: BTreeMap<u32, Vec<SegmentKey>> = BTreeMap::new();
        for (ai, a_in) in node_arms.iter().enumerate() {
            let in_road = roads[a_in.road].clone();
            let lanes_in = in_road.forward;
            // Lanes travelling toward this node.
            let in_lane = |j: i32| if a_in.starts_here { -j } else { j };
            let group = if a_in.dir.x.abs() >= a_in.dir.y.abs() { group_ew } else { group_ns };
            for (bi, a_out) in node_arms.iter().enumerate() {
                if ai == bi {
                    continue;
                }
                let out_road = roads[a_out.road].clone();
                let lanes_out = out_road.forward;
                let out_lane = |j: i32| if a_out.starts_here { j } else { -j };
                let travel = -a_in.dir;
                let dot = travel.dot(&a_out.dir);
                let cross = travel.x * a_out.dir.y - travel.y * a_out.dir.x;
                let pairs: Vec<(i32, i32)> = if dot > 0.7 {
                    // Straight through, plus drifting one lane across the box.
                    let mut v = Vec::new();
                    for ji in 1..=lanes_in {
                        for jo in 1..=lanes_out {
                            if (ji - jo).abs() <= 1 && (ji == jo || lanes_in == lanes_out) {
                                v.push((ji, jo));
                            }
                        }
                    }
                    v
                } else if cross > 0.0 {
                    vec![(lanes_in, lanes_out)]
                } else {
                    vec![(1, 1)]
                };
                for (ji, jo) in pairs {
                    let from = in_road.exit(in_lane(ji));
                    let to = out_road.entry(out_lane(jo));
                    let path = b.connector_path(&from, &to);
                    let first = b.add_connector(&path, from, to, RoadType::Junction, Some(group));
                    members.entry(group).or_default().push(first);
                }
            }
        }
        for (signal_group, members) in members {
            b.junctions.push(Junction { signal_group, members });
        }
    }

    // Sidewalk loops around each block, inset from the surrounding roads.
    for i in 0..n - 1 {
        for j in 0..n - 1 {
            let corners = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)];
            let pts: Vec<Vec3> = corners.iter().map(|&(x, y)| nodes[x][y]).collect();
            let insets: Vec<f64> = (0..4)
                .map(|k| {
                    let (p, q) = (corners[k], corners[(k + 1) % 4]);
                    let key = if p < q { (p, q) } else { (q, p) };
                    lanes_of_edge[&key] as f64 * LANE_WIDTH + 2.5
                })
                .collect();
            let mut walk = inset_convex(&pts, &insets);
            walk.push(walk[0]);
            b.sidewalks.push(walk);
        }
    }
}

/// Moves each edge of a counter-clockwise convex polygon inward by its own
/// distance and returns the new corners.
fn inset_convex(corners: &[Vec3], insets: &[f64]) -> Vec<Vec3> {
    let n = corners.len();
    let lines: Vec<(Vec3, Vec3)> = (0..n)
        .map(|k| {
            let a = corners[k];
            let d = (corners[(k + 1) % n] - a).normalize();
            (a + polyline::left_of(&d) * insets[k], d)
        })
        .collect();
    (0..n)
        .map(|k| {
            let (p1, d1) = lines[(k + n - 1) % n];
            let (p2, d2) = lines[k];
            let denom = d1.x * d2.y - d1.y * d2.x;
            let w = p2 - p1;
            let t = (w.x * d2.y - w.y * d2.x) / denom;
            p1 + d1 * t
        })
        .collect()
}

fn arc(center: Vec3, radius: f64, a0: f64, a1: f64, step: f64) -> Vec<Vec3> {
    let n = (((a1 - a0).abs() * radius / step).ceil() as usize).max(2);
    (0..=n)
        .map(|i| {
            let a = a0 + (a1 - a0) * i as f64 / n as f64;
            center + v2(radius * a.cos(), radius * a.sin())
        })
        .collect()
}

fn build_roundabout(b: &mut TownBuilder, extent: f64, rng: &mut ChaCha8Rng) {
    let half = extent / 2.0;
    let ring_r = (0.15 * extent).clamp(20.0, 40.0);
    let arm_inner = ring_r + 12.0;
    let arm_outer = half - 10.0;
    // Angular offset of exit/entry points either side of an arm.
    let delta = 8.0 / ring_r;
    let mut angles: Vec<f64> = (0..4).map(|k| k as f64 * FRAC_PI_2 + rng.gen_range(-0.15..0.15)).collect();
    angles.sort_by(f64::total_cmp);

    let mut arm_roads = Vec::new();
    for &th in &angles {
        let dir = v2(th.cos(), th.sin());
        let road = b.add_road(&[dir * arm_inner, dir * arm_outer], 1, 1, RoadType::Urban, false);
        arm_roads.push(road);
    }
    // Ring pieces: long arcs between arms and short arcs past each arm.
    let mut long_arcs = Vec::new();
    let mut short_arcs = Vec::new();
    for k in 0..4 {
        let th = angles[k];
        let next = if k == 3 { angles[0] + TAU } else { angles[k + 1] };
        let short =
            b.add_road(&arc(Vec3::zeros(), ring_r, th - delta, th + delta, 1.0), 1, 0, RoadType::Roundabout, false);
        let long =
            b.add_road(&arc(Vec3::zeros(), ring_r, th + delta, next - delta, 1.0), 1, 0, RoadType::Roundabout, false);
        short_arcs.push(short);
        long_arcs.push(long);
    }
    for k in 0..4 {
        let next = (k + 1) % 4;
        b.link(short_arcs[k].exit(1), long_arcs[k].entry(1));
        b.link(long_arcs[k].exit(1), short_arcs[next].entry(1));
        // Exit onto the arm outbound lane before the arm, entry after it.
        let arm = arm_roads[next].clone();
        let ring_exit = long_arcs[k].exit(1);
        let out_lane = arm.entry(1);
        let path = b.connector_path(&ring_exit, &out_lane);
        b.add_connector(&path, ring_exit, out_lane, RoadType::Roundabout, None);
        let arm_in = arm.exit(-1);
        let ring_entry = long_arcs[next].entry(1);
        let path = b.connector_path(&arm_in, &ring_entry);
        b.add_connector(&path, arm_in, ring_entry, RoadType::Roundabout, None);
        // Cul-de-sac at the arm's far end.
        let far_out = arm.exit(1);
        let far_in = arm.entry(-1);
        let path = b.turnaround_path(&far_out, &far_in);
        b.add_connector(&path, far_out, far_in, RoadType::Urban, None);
    }

    // Central island walk plus one block loop per quadrant.
    let island = ring_r - LANE_WIDTH / 2.0 - 4.0;
    if island > 3.0 {
        b.sidewalks.push(arc(Vec3::zeros(), island, 0.0, TAU, 3.0));
    }
    let margin = LANE_WIDTH + 3.0;
    let inner_r = ring_r + LANE_WIDTH + 4.0;
    let outer = half - 12.0;
    for k in 0..4 {
        let th = angles[k];
        let next = if k == 3 { angles[0] + TAU } else { angles[k + 1] };
        let a0 = th + (margin / inner_r).asin();
        let a1 = next - (margin / inner_r).asin();
        if a1 <= a0 {
            continue;
        }
        let d0 = v2(th.cos(), th.sin());
        let d1 = v2(next.cos(), next.sin());
        let n0 = polyline::left_of(&d0) * margin;
        let n1 = polyline::right_of(&d1) * margin;
        let mut walk = arc(Vec3::zeros(), inner_r, a0, a1, 3.0);
        walk.push(d1 * outer + n1);
        // Corner between the two arms, pulled inside the extent.
        let mid = (next + th) / 2.0;
        let corner_r = outer / ((next - th) / 2.0).cos().max(0.5);
        walk.push(v2(mid.cos(), mid.sin()) * corner_r.min(outer * 1.35));
        walk.push(d0 * outer + n0);
        walk.push(walk[0]);
        if polyline::signed_area(&walk) > 50.0 {
            b.sidewalks.push(walk);
        }
    }
}

fn build_highway_loop(b: &mut TownBuilder, extent: f64, rng: &mut ChaCha8Rng) {
    let ax = 0.42 * extent * rng.gen_range(0.95..1.0);
    let ay = 0.35 * extent * rng.gen_range(0.95..1.0);
    let ellipse = |sx: f64, sy: f64, step: f64| -> Vec<Vec3> {
        let n = ((PI * (sx + sy) / step).ceil() as usize).max(16);
        let mut pts: Vec<Vec3> = (0..n)
            .map(|i| {
                let a = TAU * i as f64 / n as f64;
                v2(sx * a.cos(), sy * a.sin())
            })
            .collect();
        pts.push(pts[0]);
        pts
    };
    let road = b.add_road(&ellipse(ax, ay, 2.0), 2, 2, RoadType::Highway, true);
    // Median U-turn interchanges at opposite ends of the loop.
    for frac in [0.0, 0.5] {
        let k = ((road.sections as f64 * frac) as i32).min(road.sections - 1);
        let from = SegmentKey::new(road.road_id, k, 1);
        let to = SegmentKey::new(road.road_id, k, -1);
        let path = b.turnaround_path(&from, &to);
        b.add_connector(&path, from, to, RoadType::Junction, None);
        let k2 = (k + road.sections / 4) % road.sections;
        let from = SegmentKey::new(road.road_id, k2, -1);
        let to = SegmentKey::new(road.road_id, k2, 1);
        let path = b.turnaround_path(&from, &to);
        b.add_connector(&path, from, to, RoadType::Junction, None);
    }
    // Merges between the two lanes of each carriageway, spanning one section.
    let n = road.sections;
    for sign in [1, -1] {
        for (frac, from_lane, to_lane) in [(0.125, 1, 2), (0.625, 2, 1)] {
            let k = (n as f64 * frac) as i32;
            let from = SegmentKey::new(road.road_id, k, sign * from_lane);
            let to = SegmentKey::new(road.road_id, (k + 2 * sign).rem_euclid(n), sign * to_lane);
            let path = b.connector_path(&from, &to);
            b.add_connector(&path, from, to, RoadType::Highway, None);
        }
    }
    debug_assert!(road.closed && road.forward == 2 && road.backward == 2);
    let inset = 2.0 * LANE_WIDTH + 10.0;
    if ax - inset > 10.0 && ay - inset > 10.0 {
        b.sidewalks.push(ellipse(ax - inset, ay - inset, 5.0));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub segments: Vec<SegmentKey>,
    pub length: f64,
}

impl Route {
    /// Successor-connected with no immediate backtracking.
    pub fn is_connected_in(&self, g: &LaneGraph) -> bool {
        if self.segments.is_empty() || !self.segments.iter().all(|k| g.segments.contains_key(k)) {
            return false;
        }
        let linked = self.segments.windows(2).all(|w| g.segments[&w[0]].successors.contains(&w[1]));
        let no_backtrack = self.segments.windows(3).all(|w| w[0] != w[2]);
        linked && no_backtrack
    }
}

/// Random successor walk from `start` until `min_length` is reached or a dead
/// end stops it.
pub fn walk_from<R: Rng + ?Sized>(g: &LaneGraph, start: SegmentKey, rng: &mut R, min_length: f64) -> Route {
    let mut segments = vec![start];
    let mut length = g.segment_length(&start);
    while length < min_length {
        let cur = segments[segments.len() - 1];
        let prev = segments.len().checked_sub(2).map(|i| segments[i]);
        let options: Vec<SegmentKey> =
            g.segments[&cur].successors.iter().copied().filter(|s| Some(*s) != prev).collect();
        if options.is_empty() {
            break;
        }
        let next = options[rng.gen_range(0..options.len())];
        length += g.segment_length(&next);
        segments.push(next);
    }
    Route { segments, length }
}

/// Draws a start segment uniformly and walks from it.
pub fn sample_candidate_route<R: Rng + ?Sized>(
    g: &LaneGraph,
    rng: &mut R,
    min_length: f64,
) -> Result<Route, RoadError> {
    if g.segments.is_empty() {
        return Err(RoadError::EmptyGraph);
    }
    let any_successor = g.segments.values().any(|s| !s.successors.is_empty());
    let longest = g.segments.values().map(LaneSegment::length).fold(0.0, f64::max);
    if !any_successor && min_length > longest {
        return Err(RoadError::RouteUnreachable(min_length));
    }
    let idx = rng.gen_range(0..g.segments.len());
    let start = *g.segments.keys().nth(idx).expect("index in range");
    Ok(walk_from(g, start, rng, min_length))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteBank {
    pub routes: Vec<Route>,
    pub covered: BTreeSet<SegmentKey>,
    pub tau: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateOutcome {
    pub route: Route,
    /// Segments of the candidate not yet covered when it was considered.
    pub novelty: usize,
    pub accepted: bool,
}

/// Greedy coverage search: a candidate is kept when it adds more than `tau`
/// uncovered segments.
pub fn build_route_bank<R: Rng + ?Sized>(
    g: &LaneGraph,
    tau: usize,
    candidate_budget: usize,
    min_length: f64,
    rng: &mut R,
) -> RouteBank {
    build_route_bank_traced(g, tau, candidate_budget, min_length, rng).0
}

pub fn build_route_bank_traced<R: Rng + ?Sized>(
    g: &LaneGraph,
    tau: usize,
    candidate_budget: usize,
    min_length: f64,
    rng: &mut R,
) -> (RouteBank, Vec<CandidateOutcome>) {
    let mut bank = RouteBank { routes: Vec::new(), covered: BTreeSet::new(), tau };
    let mut trace = Vec::with_capacity(candidate_budget);
    for _ in 0..candidate_budget {
        let Ok(route) = sample_candidate_route(g, rng, min_length) else {
            break;
        };
        let fresh: BTreeSet<SegmentKey> =
            route.segments.iter().filter(|k| !bank.covered.contains(k)).copied().collect();
        let novelty = fresh.len();
        let accepted = novelty > tau;
        if accepted {
            bank.covered.extend(fresh);
            bank.routes.push(route.clone());
        }
        trace.push(CandidateOutcome { route, novelty, accepted });
    }
    (bank, trace)
}

pub fn coverage_ratio(bank: &RouteBank, g: &LaneGraph) -> f64 {
    if g.segments.is_empty() {
        return 0.0;
    }
    let covered = bank.covered.iter().filter(|k| g.segments.contains_key(k)).count();
    covered as f64 / g.segments.len() as f64
}
