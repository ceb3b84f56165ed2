//! Fixed-step multi-agent rollout: IDM car following, two-phase signals,
//! gap-acceptance lane changes, sidewalk pedestrians and the ego deadlock
//! override.
//!
//! All timers are integer tick counters so that `time == frame_index * DT`
//! holds exactly and runs replay bit for bit.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{OrientedBox, Pose, Vec3};
use crate::polyline;
use crate::road::{LaneGraph, Route, SegmentKey};

pub const DT: f64 = 0.1;

pub const IDM_A_MAX: f64 = 2.0;
pub const IDM_B: f64 = 2.0;
pub const IDM_S0: f64 = 2.0;
pub const IDM_T_HEADWAY: f64 = 1.5;
pub const IDM_B_MAX: f64 = 6.0;

pub const LANE_CHANGE_FRONT_GAP: f64 = 10.0;
pub const LANE_CHANGE_REAR_GAP: f64 = 6.0;
pub const LANE_CHANGE_COOLDOWN_TICKS: u32 = 50;
/// Lateral drift toward the new lane centre after a lane change, m/s.
pub const LANE_CHANGE_LATERAL_SPEED: f64 = 1.0;

pub const STALL_SPEED: f64 = 0.1;
pub const BLOCK_TICKS: u32 = 100;
/// Length of one green or one red phase.
pub const PHASE_TICKS: u32 = 200;

pub const PED_SPEED_MIN: f64 = 0.5;
pub const PED_SPEED_MAX: f64 = 2.0;
pub const BICYCLE_SPEED_CAP: f64 = 6.0;

/// Spacing of vehicle spawn slots along a lane.
pub const SPAWN_SLOT_SPACING: f64 = 15.0;
const PED_SLOT_SPACING: f64 = 3.0;
const SPAWN_MARGIN: f64 = 0.25;
const LOOKAHEAD: f64 = 150.0;
const LEADER_HORIZON: f64 = 100.0;

#[derive(Debug, Error, PartialEq)]
pub enum TrafficError {
    #[error("route is empty")]
    EmptyRoute,
    #[error("route starts at {0}, which is not in the lane graph")]
    RouteStartMissing(SegmentKey),
    #[error("rollout needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AgentClass {
    Car,
    Truck,
    Bus,
    Motorcycle,
    Bicycle,
    Pedestrian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
#[repr(u8)]
pub enum Category {
    Background = 0,
    Car = 1,
    Other = 2,
    Ped = 3,
    Vru = 4,
}

impl Category {
    pub const AGENTS: [Category; 4] = [Category::Car, Category::Other, Category::Ped, Category::Vru];

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Category::Background),
            1 => Some(Category::Car),
            2 => Some(Category::Other),
            3 => Some(Category::Ped),
            4 => Some(Category::Vru),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Background => "BACKGROUND",
            Category::Car => "CAR",
            Category::Other => "OTHER",
            Category::Ped => "PED",
            Category::Vru => "VRU",
        }
    }
}

impl AgentClass {
    pub const ALL: [AgentClass; 6] = [
        AgentClass::Car,
        AgentClass::Truck,
        AgentClass::Bus,
        AgentClass::Motorcycle,
        AgentClass::Bicycle,
        AgentClass::Pedestrian,
    ];

    pub fn category(self) -> Category {
        match self {
            AgentClass::Car => Category::Car,
            AgentClass::Truck | AgentClass::Bus => Category::Other,
            AgentClass::Motorcycle | AgentClass::Bicycle => Category::Vru,
            AgentClass::Pedestrian => Category::Ped,
        }
    }

    pub fn half_extents(self) -> Vec3 {
        match self {
            AgentClass::Car => Vec3::new(2.2, 0.9, 0.75),
            AgentClass::Truck => Vec3::new(4.5, 1.3, 1.6),
            AgentClass::Bus => Vec3::new(6.0, 1.3, 1.6),
            AgentClass::Motorcycle => Vec3::new(1.1, 0.4, 0.75),
            AgentClass::Bicycle => Vec3::new(0.9, 0.3, 0.85),
            AgentClass::Pedestrian => Vec3::new(0.3, 0.3, 0.85),
        }
    }

    /// Point class code written into containers (0 is reserved for ground).
    pub fn code(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(usize::from(code).checked_sub(1)?).copied()
    }

    fn speed_cap(self) -> f64 {
        match self {
            AgentClass::Bicycle => BICYCLE_SPEED_CAP,
            _ => f64::INFINITY,
        }
    }
}

/// NPC vehicle mix; weights sum to 1.
const NPC_MIX: [(AgentClass, f64); 5] = [
    (AgentClass::Car, 0.60),
    (AgentClass::Truck, 0.10),
    (AgentClass::Bus, 0.05),
    (AgentClass::Motorcycle, 0.10),
    (AgentClass::Bicycle, 0.15),
];

fn sample_vehicle_class<R: Rng>(rng: &mut R) -> AgentClass {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (class, w) in NPC_MIX {
        acc += w;
        if u < acc {
            return class;
        }
    }
    AgentClass::Car
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BehaviorConfig {
    pub npc_vehicle_count: usize,
    pub pedestrian_count: usize,
    pub spawn_radius: f64,
    pub aggressiveness: f64,
    pub lane_change_enabled: bool,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        Self {
            npc_vehicle_count: 20,
            pedestrian_count: 10,
            spawn_radius: 80.0,
            aggressiveness: 0.5,
            lane_change_enabled: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LanePosition {
    Lane { segment: SegmentKey, s: f64 },
    Sidewalk { index: usize, s: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Motion {
    Vehicle {
        segment: SegmentKey,
        s: f64,
        /// Signed offset to the right of the lane centre, m.
        lateral: f64,
        plan: VecDeque<SegmentKey>,
        speed_factor: f64,
        cooldown: u32,
    },
    Pedestrian {
        sidewalk: usize,
        s: f64,
        /// +1 walks along the loop's point order, -1 against it.
        direction: f64,
        walk_speed: f64,
        pause: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub actor_id: u32,
    pub class: AgentClass,
    pub half_extents: Vec3,
    pub pose: Pose,
    pub speed: f64,
    pub motion: Motion,
}

impl AgentState {
    pub fn bbox(&self) -> OrientedBox {
        OrientedBox::from_pose(&self.pose, self.half_extents)
    }

    pub fn lane_position(&self) -> LanePosition {
        match &self.motion {
            Motion::Vehicle { segment, s, .. } => LanePosition::Lane { segment: *segment, s: *s },
            Motion::Pedestrian { sidewalk, s, .. } => LanePosition::Sidewalk { index: *sidewalk, s: *s },
        }
    }

    pub fn is_vehicle(&self) -> bool {
        matches!(self.motion, Motion::Vehicle { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignalState {
    pub green: bool,
    /// Ticks left in the current phase.
    pub remaining: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Override {
    pub frame_index: u32,
    pub signal_group: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimState {
    pub frame_index: u32,
    pub ego: AgentState,
    pub npcs: Vec<AgentState>,
    pub signals: BTreeMap<u32, SignalState>,
    pub stall_ticks: u32,
    pub overrides: Vec<Override>,
    pub behavior: BehaviorConfig,
    #[serde(skip, default = "default_rng")]
    pub rng: ChaCha8Rng,
}

fn default_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

impl PartialEq for SimState {
    fn eq(&self, other: &Self) -> bool {
        self.frame_index == other.frame_index
            && self.ego == other.ego
            && self.npcs == other.npcs
            && self.signals == other.signals
            && self.stall_ticks == other.stall_ticks
            && self.overrides == other.overrides
            && self.behavior == other.behavior
            && self.rng == other.rng
    }
}

impl SimState {
    pub fn time(&self) -> f64 {
        self.frame_index as f64 * DT
    }

    pub fn stall_time(&self) -> f64 {
        self.stall_ticks as f64 * DT
    }

    /// Ego followed by every NPC, in id order of creation.
    pub fn agents(&self) -> impl Iterator<Item = &AgentState> {
        std::iter::once(&self.ego).chain(self.npcs.iter())
    }

    pub fn agent(&self, actor_id: u32) -> Option<&AgentState> {
        self.agents().find(|a| a.actor_id == actor_id)
    }

    pub fn is_green(&self, group: u32) -> bool {
        self.signals.get(&group).is_none_or(|s| s.green)
    }

    /// First signalised segment ahead of the ego, if any.
    pub fn ego_next_signal(&self, g: &LaneGraph) -> Option<u32> {
        let Motion::Vehicle { plan, .. } = &self.ego.motion else {
            return None;
        };
        plan.iter().find_map(|k| g.get(k).and_then(|s| s.signal_group))
    }
}

/// Intelligent Driver Model acceleration; `gap = f64::INFINITY` means no
/// leader.
pub fn idm_acceleration(v: f64, v_desired: f64, gap: f64, dv: f64) -> f64 {
    let free = if v_desired > 0.0 { (v / v_desired).powi(4) } else { 1.0 };
    let interaction = if gap.is_finite() {
        let s_star = IDM_S0 + v * IDM_T_HEADWAY + v * dv / (2.0 * (IDM_A_MAX * IDM_B).sqrt());
        (s_star.max(0.0) / gap.max(1e-3)).powi(2)
    } else {
        0.0
    };
    (IDM_A_MAX * (1.0 - free - interaction)).clamp(-IDM_B_MAX, IDM_A_MAX)
}

fn speed_factor(aggressiveness: f64) -> f64 {
    0.8 + 0.4 * aggressiveness.clamp(0.0, 1.0)
}

fn vehicle_pose(g: &LaneGraph, key: &SegmentKey, s: f64, lateral: f64, half_z: f64) -> Pose {
    let (p, t) = g.segments[key].sample(s);
    let p = p + polyline::right_of(&t) * lateral;
    Pose::from_yaw(t.y.atan2(t.x), Vec3::new(p.x, p.y, p.z + half_z))
}

fn pedestrian_pose(g: &LaneGraph, sidewalk: usize, s: f64, direction: f64, half_z: f64) -> Pose {
    let (p, t) = polyline::sample_closed(&g.sidewalks[sidewalk], s);
    let t = t * direction;
    Pose::from_yaw(t.y.atan2(t.x), Vec3::new(p.x, p.y, p.z + half_z))
}

/// Extends `plan` with a random successor walk until it reaches `LOOKAHEAD`
/// metres past the end of `current`.
fn extend_plan<R: Rng>(g: &LaneGraph, current: &SegmentKey, plan: &mut VecDeque<SegmentKey>, rng: &mut R) {
    let mut ahead: f64 = plan.iter().map(|k| g.segment_length(k)).sum();
    while ahead < LOOKAHEAD {
        let last = *plan.back().unwrap_or(current);
        let prev = if plan.len() >= 2 {
            Some(plan[plan.len() - 2])
        } else if plan.len() == 1 {
            Some(*current)
        } else {
            None
        };
        let options: Vec<SegmentKey> =
            g.segments[&last].successors.iter().copied().filter(|k| Some(*k) != prev).collect();
        let Some(next) = options.choose(rng).copied() else {
            break;
        };
        ahead += g.segment_length(&next);
        plan.push_back(next);
    }
}

fn build_signals<R: Rng>(g: &LaneGraph, rng: &mut R) -> BTreeMap<u32, SignalState> {
    let mut junctions: Vec<u32> = g.junctions.iter().map(|j| j.signal_group / 2).collect();
    junctions.sort_unstable();
    junctions.dedup();
    let mut signals = BTreeMap::new();
    for m in junctions {
        let offset = rng.gen_range(0..2 * PHASE_TICKS);
        let first_green = offset < PHASE_TICKS;
        let remaining = PHASE_TICKS - offset % PHASE_TICKS;
        signals.insert(2 * m, SignalState { green: first_green, remaining });
        signals.insert(2 * m + 1, SignalState { green: !first_green, remaining });
    }
    signals
}

struct Slot {
    key: SegmentKey,
    s: f64,
}

/// Vehicle spawn slots that fit the largest class and are clear of the ego.
fn vehicle_slots(g: &LaneGraph, route: &Route, ego: &AgentState, radius: f64) -> Vec<Slot> {
    let route_pts: Vec<Vec3> =
        route.segments.iter().filter_map(|k| g.get(k)).flat_map(|s| s.centerline.iter().copied()).collect();
    let largest = AgentClass::Bus.half_extents();
    let ego_box = inflate(&ego.bbox());
    let mut slots = Vec::new();
    for seg in g.segments.values() {
        if seg.signal_group.is_some() || seg.road_type == crate::road::RoadType::Junction {
            continue;
        }
        let len = seg.length();
        let mut s = SPAWN_SLOT_SPACING / 2.0;
        while s + largest.x <= len + 1e-9 {
            if s >= largest.x - 1e-9 {
                let pose = vehicle_pose(g, &seg.key, s, 0.0, largest.z);
                let p = pose.translation;
                let near = route_pts.iter().any(|q| (q.xy() - p.xy()).norm() <= radius);
                if near && !ego_box.intersects(&OrientedBox::from_pose(&pose, largest)) {
                    slots.push(Slot { key: seg.key, s });
                }
            }
            s += SPAWN_SLOT_SPACING;
        }
    }
    slots
}

fn inflate(b: &OrientedBox) -> OrientedBox {
    OrientedBox::new(b.center, b.half_extents.add_scalar(SPAWN_MARGIN), b.rotation)
}

/// Number of vehicle spawn slots available to `spawn_scene` for this route.
pub fn spawn_capacity(g: &LaneGraph, route: &Route, cfg: &BehaviorConfig) -> Result<usize, TrafficError> {
    let ego = make_ego(g, route, cfg)?;
    Ok(vehicle_slots(g, route, &ego, cfg.spawn_radius).len())
}

fn make_ego(g: &LaneGraph, route: &Route, cfg: &BehaviorConfig) -> Result<AgentState, TrafficError> {
    let first = *route.segments.first().ok_or(TrafficError::EmptyRoute)?;
    if g.get(&first).is_none() {
        return Err(TrafficError::RouteStartMissing(first));
    }
    let class = AgentClass::Car;
    let he = class.half_extents();
    let s = he.x.min(g.segment_length(&first));
    let plan: VecDeque<SegmentKey> =
        route.segments[1..].iter().copied().filter(|k| g.segments.contains_key(k)).collect();
    Ok(AgentState {
        actor_id: 1,
        class,
        half_extents: he,
        pose: vehicle_pose(g, &first, s, 0.0, he.z),
        speed: 0.0,
        motion: Motion::Vehicle {
            segment: first,
            s,
            lateral: 0.0,
            plan,
            speed_factor: speed_factor(cfg.aggressiveness),
            cooldown: 0,
        },
    })
}

/// Places the ego at the start of `route` and NPCs near it.
pub fn spawn_scene(g: &LaneGraph, route: &Route, cfg: &BehaviorConfig, seed: u64) -> Result<SimState, TrafficError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ego = make_ego(g, route, cfg)?;
    if let Motion::Vehicle { segment, plan, speed_factor, .. } = &mut ego.motion {
        extend_plan(g, segment, plan, &mut rng);
        ego.speed = 0.5 * g.segments[segment].speed_limit * *speed_factor;
    }
    let signals = build_signals(g, &mut rng);

    let mut boxes = vec![inflate(&ego.bbox())];
    let mut npcs = Vec::new();
    let mut next_id = 2u32;

    let mut slots = vehicle_slots(g, route, &ego, cfg.spawn_radius);
    slots.shuffle(&mut rng);
    let mut slots = slots.into_iter();
    while npcs.len() < cfg.npc_vehicle_count {
        let Some(slot) = slots.next() else { break };
        let class = sample_vehicle_class(&mut rng);
        let he = class.half_extents();
        let pose = vehicle_pose(g, &slot.key, slot.s, 0.0, he.z);
        let b = inflate(&OrientedBox::from_pose(&pose, he));
        if boxes.iter().any(|o| o.intersects(&b)) {
            continue;
        }
        let aggr = cfg.aggressiveness * rng.gen_range(0.6..=1.0);
        let factor = speed_factor(aggr);
        let mut plan = VecDeque::new();
        extend_plan(g, &slot.key, &mut plan, &mut rng);
        let v0 = (g.segments[&slot.key].speed_limit * factor).min(class.speed_cap());
        boxes.push(b);
        npcs.push(AgentState {
            actor_id: next_id,
            class,
            half_extents: he,
            pose,
            speed: v0 * rng.gen_range(0.3..0.8),
            motion: Motion::Vehicle {
                segment: slot.key,
                s: slot.s,
                lateral: 0.0,
                plan,
                speed_factor: factor,
                cooldown: 0,
            },
        });
        next_id += 1;
    }

    let route_pts: Vec<Vec3> =
        route.segments.iter().filter_map(|k| g.get(k)).flat_map(|s| s.centerline.iter().copied()).collect();
    let mut ped_slots = Vec::new();
    for (i, walk) in g.sidewalks.iter().enumerate() {
        let len = polyline::length(walk);
        let mut s = PED_SLOT_SPACING / 2.0;
        while s < len {
            let (p, _) = polyline::sample_closed(walk, s);
            if route_pts.iter().any(|q| (q.xy() - p.xy()).norm() <= cfg.spawn_radius) {
                ped_slots.push((i, s));
            }
            s += PED_SLOT_SPACING;
        }
    }
    ped_slots.shuffle(&mut rng);
    let mut ped_slots = ped_slots.into_iter();
    let mut peds = 0;
    while peds < cfg.pedestrian_count {
        let Some((sidewalk, s)) = ped_slots.next() else { break };
        let class = AgentClass::Pedestrian;
        let he = class.half_extents();
        let direction = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let pose = pedestrian_pose(g, sidewalk, s, direction, he.z);
        let b = inflate(&OrientedBox::from_pose(&pose, he));
        if boxes.iter().any(|o| o.intersects(&b)) {
            continue;
        }
        let walk_speed = rng.gen_range(PED_SPEED_MIN..=PED_SPEED_MAX);
        boxes.push(b);
        npcs.push(AgentState {
            actor_id: next_id,
            class,
            half_extents: he,
            pose,
            speed: walk_speed,
            motion: Motion::Pedestrian { sidewalk, s, direction, walk_speed, pause: 0 },
        });
        next_id += 1;
        peds += 1;
    }

    Ok(SimState {
        frame_index: 0,
        ego,
        npcs,
        signals,
        stall_ticks: 0,
        overrides: Vec::new(),
        behavior: cfg.clone(),
        rng,
    })
}

/// Occupancy of lane segments: `(s, agent index, speed, half length)` sorted
/// by `s`. Index 0 is the ego, `i + 1` is `npcs[i]`.
type Occupancy = BTreeMap<SegmentKey, Vec<(f64, usize, f64, f64)>>;

fn occupancy(state: &SimState) -> Occupancy {
    let mut occ: Occupancy = BTreeMap::new();
    for (i, a) in state.agents().enumerate() {
        if let Motion::Vehicle { segment, s, .. } = &a.motion {
            occ.entry(*segment).or_default().push((*s, i, a.speed, a.half_extents.x));
        }
    }
    for list in occ.values_mut() {
        list.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    }
    occ
}

/// Closest obstacle ahead: bumper-to-bumper gap and closing speed.
struct Ahead {
    gap: f64,
    dv: f64,
    /// Hard stop line: distance from front bumper to a red signal.
    stop_line: Option<f64>,
}

fn look_ahead(g: &LaneGraph, state: &SimState, occ: &Occupancy, idx: usize, agent: &AgentState) -> Ahead {
    let Motion::Vehicle { segment, s, plan, .. } = &agent.motion else {
        unreachable!("pedestrians do not look ahead");
    };
    let half = agent.half_extents.x;
    let v = agent.speed;
    let mut best = Ahead { gap: f64::INFINITY, dv: 0.0, stop_line: None };
    let consider = |best: &mut Ahead, dist_centres: f64, other_half: f64, other_v: f64| {
        let gap = dist_centres - half - other_half;
        if gap < best.gap {
            best.gap = gap;
            best.dv = v - other_v;
        }
    };
    if let Some(list) = occ.get(segment) {
        for &(os, j, ov, oh) in list {
            if j != idx && (os > *s || (os == *s && j > idx)) {
                consider(&mut best, os - s, oh, ov);
                break;
            }
        }
    }
    let mut base = g.segment_length(segment) - s;
    for key in plan {
        if base > LEADER_HORIZON {
            break;
        }
        let seg = &g.segments[key];
        if let Some(group) = seg.signal_group {
            if !state.is_green(group) && best.stop_line.is_none() {
                let d = base - half;
                // Too close to stop comfortably within b_max: commit.
                let needed = if d > 0.0 { v * v / (2.0 * d) } else { f64::INFINITY };
                if needed <= IDM_B_MAX {
                    best.stop_line = Some(d.max(0.0));
                    if d < best.gap {
                        best.gap = d;
                        best.dv = v;
                    }
                }
            }
        }
        if let Some(&(os, _, ov, oh)) = occ.get(key).and_then(|l| l.first()) {
            consider(&mut best, base + os, oh, ov);
        }
        if best.gap < base {
            break;
        }
        base += seg.length();
    }
    best
}

fn desired_speed(g: &LaneGraph, agent: &AgentState) -> f64 {
    let Motion::Vehicle { segment, s, plan, speed_factor, .. } = &agent.motion else {
        return 0.0;
    };
    let cap = agent.class.speed_cap();
    let mut v0 = (g.segments[segment].speed_limit * speed_factor).min(cap);
    let mut d = g.segment_length(segment) - s;
    for key in plan {
        if d > LOOKAHEAD {
            break;
        }
        let lim = (g.segments[key].speed_limit * speed_factor).min(cap);
        v0 = v0.min((lim * lim + 2.0 * IDM_B * d.max(0.0)).sqrt());
        d += g.segment_length(key);
    }
    v0
}

/// Front and rear bumper gaps to the neighbours around arc length `s` on
/// `target`, searching one segment ahead and behind.
fn lane_gaps(g: &LaneGraph, occ: &Occupancy, target: &SegmentKey, s: f64, half: f64, skip: usize) -> (f64, f64) {
    let mut front = f64::INFINITY;
    let mut rear = f64::INFINITY;
    let len = g.segment_length(target);
    if let Some(list) = occ.get(target) {
        for &(os, j, _, oh) in list {
            if j == skip {
                continue;
            }
            if os >= s {
                front = front.min(os - s - half - oh);
            } else {
                rear = rear.min(s - os - half - oh);
            }
        }
    }
    for next in &g.segments[target].successors {
        if let Some(&(os, j, _, oh)) = occ.get(next).and_then(|l| l.first()) {
            if j != skip {
                front = front.min(len - s + os - half - oh);
            }
        }
    }
    for (key, list) in occ {
        if g.segments[key].successors.contains(target) {
            if let Some(&(os, j, _, oh)) = list.last() {
                if j != skip {
                    rear = rear.min(s + g.segment_length(key) - os - half - oh);
                }
            }
        }
    }
    (front, rear)
}

/// Advances every agent by one tick.
pub fn step(state: &SimState, g: &LaneGraph) -> SimState {
    let mut next = state.clone();
    for sig in next.signals.values_mut() {
        sig.remaining -= 1;
        if sig.remaining == 0 {
            sig.green = !sig.green;
            sig.remaining = PHASE_TICKS;
        }
    }

    let occ = occupancy(state);
    let n = 1 + state.npcs.len();
    let mut decisions: Vec<Option<(f64, Option<f64>)>> = Vec::with_capacity(n);
    for (i, agent) in state.agents().enumerate() {
        if !agent.is_vehicle() {
            decisions.push(None);
            continue;
        }
        let ahead = look_ahead(g, state, &occ, i, agent);
        let v0 = desired_speed(g, agent);
        let a = idm_acceleration(agent.speed, v0, ahead.gap, ahead.dv);
        decisions.push(Some((a, ahead.stop_line)));
    }

    let lane_changes = state.behavior.lane_change_enabled;
    let rng = &mut next.rng;
    let agents = std::iter::once(&mut next.ego).chain(next.npcs.iter_mut());
    for (i, agent) in agents.enumerate() {
        match decisions[i] {
            Some((a, stop_line)) => {
                advance_vehicle(g, agent, a, stop_line, rng);
                if i > 0 && lane_changes {
                    try_lane_change(g, &occ, i, agent, state, rng);
                }
            }
            None => advance_pedestrian(g, agent, rng),
        }
    }

    if next.ego.speed < STALL_SPEED {
        next.stall_ticks += 1;
    } else {
        next.stall_ticks = 0;
    }
    next.frame_index += 1;
    next
}

fn advance_vehicle<R: Rng>(g: &LaneGraph, agent: &mut AgentState, a: f64, stop_line: Option<f64>, rng: &mut R) {
    let Motion::Vehicle { segment, s, lateral, plan, cooldown, .. } = &mut agent.motion else {
        return;
    };
    let v = agent.speed;
    let mut v1 = (v + a * DT).max(0.0);
    let mut ds = if v1 > 0.0 {
        0.5 * (v + v1) * DT
    } else {
        // Stopped within the tick.
        if a < 0.0 {
            v * v / (2.0 * -a)
        } else {
            0.0
        }
    };
    if let Some(d) = stop_line {
        if ds >= d {
            ds = d;
            v1 = 0.0;
        }
    }
    *cooldown = cooldown.saturating_sub(1);
    if *lateral != 0.0 {
        let step = LANE_CHANGE_LATERAL_SPEED * DT;
        *lateral = if lateral.abs() <= step { 0.0 } else { *lateral - step * lateral.signum() };
    }
    *s += ds;
    loop {
        let len = g.segment_length(segment);
        if *s <= len {
            break;
        }
        match plan.pop_front() {
            Some(nk) => {
                *s -= len;
                *segment = nk;
            }
            None => {
                *s = len;
                v1 = 0.0;
                break;
            }
        }
    }
    extend_plan(g, segment, plan, rng);
    // Speed may never exceed 1.2x the limit of the segment being driven.
    v1 = v1.min(1.2 * g.segments[segment].speed_limit);
    agent.speed = v1;
    agent.pose = vehicle_pose(g, segment, *s, *lateral, agent.half_extents.z);
}

fn try_lane_change<R: Rng>(
    g: &LaneGraph,
    occ: &Occupancy,
    idx: usize,
    agent: &mut AgentState,
    before: &SimState,
    rng: &mut R,
) {
    let desired = desired_speed(g, agent);
    let old = before.agents().nth(idx).expect("agent index");
    let Motion::Vehicle { segment, s, lateral, plan, cooldown, .. } = &mut agent.motion else {
        return;
    };
    if *cooldown > 0 || *lateral != 0.0 {
        return;
    }
    let ahead = look_ahead(g, before, occ, idx, old);
    let blocked = ahead.stop_line.is_none() && ahead.gap < 30.0 && agent.speed < desired - 1.0;
    if !blocked || !rng.gen_bool(0.2) {
        return;
    }
    let toward_left = rng.gen_bool(0.5);
    let Some(target) = g.adjacent_lane(segment, toward_left).or_else(|| g.adjacent_lane(segment, !toward_left)) else {
        return;
    };
    let old_len = g.segment_length(segment);
    let new_len = g.segment_length(&target);
    let s_new = (*s * new_len / old_len).clamp(0.0, new_len);
    let half = agent.half_extents.x;
    let (front, rear) = lane_gaps(g, occ, &target, s_new, half, idx);
    if front <= LANE_CHANGE_FRONT_GAP || rear <= LANE_CHANGE_REAR_GAP {
        return;
    }
    let (p_old, _) = g.segments[segment].sample(*s);
    let (p_new, t_new) = g.segments[&target].sample(s_new);
    *lateral = (p_old - p_new).dot(&polyline::right_of(&t_new));
    *segment = target;
    *s = s_new;
    *cooldown = LANE_CHANGE_COOLDOWN_TICKS;
    plan.clear();
    extend_plan(g, segment, plan, rng);
    agent.pose = vehicle_pose(g, segment, *s, *lateral, agent.half_extents.z);
}

fn advance_pedestrian<R: Rng>(g: &LaneGraph, agent: &mut AgentState, rng: &mut R) {
    let Motion::Pedestrian { sidewalk, s, direction, walk_speed, pause } = &mut agent.motion else {
        return;
    };
    if *pause > 0 {
        *pause -= 1;
        agent.speed = if *pause == 0 { *walk_speed } else { 0.0 };
        return;
    }
    if rng.gen_bool(0.01) {
        *pause = rng.gen_range(10..40);
        agent.speed = 0.0;
        return;
    }
    let len = polyline::length(&g.sidewalks[*sidewalk]);
    *s = (*s + *direction * *walk_speed * DT).rem_euclid(len);
    agent.speed = *walk_speed;
    agent.pose = pedestrian_pose(g, *sidewalk, *s, *direction, agent.half_extents.z);
}

/// Forces the ego's next signal green once it has been stalled for longer
/// than `BLOCK_TICKS` in front of a red light.
pub fn resolve_deadlock(state: &SimState, g: &LaneGraph) -> SimState {
    let mut next = state.clone();
    if state.stall_ticks <= BLOCK_TICKS {
        return next;
    }
    let Some(group) = state.ego_next_signal(g) else {
        return next;
    };
    if state.is_green(group) {
        return next;
    }
    next.signals.insert(group, SignalState { green: true, remaining: PHASE_TICKS });
    let partner = group ^ 1;
    if next.signals.contains_key(&partner) {
        next.signals.insert(partner, SignalState { green: false, remaining: PHASE_TICKS });
    }
    next.stall_ticks = 0;
    next.overrides.push(Override { frame_index: state.frame_index, signal_group: group });
    next
}

/// Spawns and steps the scene, returning one snapshot per frame.
pub fn rollout(
    g: &LaneGraph,
    route: &Route,
    cfg: &BehaviorConfig,
    n_frames: usize,
    seed: u64,
) -> Result<Vec<SimState>, TrafficError> {
    if n_frames < 2 {
        return Err(TrafficError::TooFewFrames(n_frames));
    }
    let mut frames = Vec::with_capacity(n_frames);
    frames.push(spawn_scene(g, route, cfg, seed)?);
    while frames.len() < n_frames {
        let last = frames.last().expect("non-empty");
        let stepped = step(last, g);
        frames.push(resolve_deadlock(&stepped, g));
    }
    Ok(frames)
}

/// Fraction of consecutive frame pairs in which some agent moves more than
/// `threshold` metres.
pub fn dynamic_frame_ratio(frames: &[SimState], threshold: f64) -> f64 {
    if frames.len() < 2 {
        return 0.0;
    }
    let dynamic = frames
        .windows(2)
        .filter(|w| {
            w[0].agents().any(|a| {
                w[1].agent(a.actor_id).is_some_and(|b| (b.pose.translation - a.pose.translation).norm() > threshold)
            })
        })
        .count();
    dynamic as f64 / (frames.len() - 1) as f64
}
