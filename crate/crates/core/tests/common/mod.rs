//! Oracles shared by the integration tests and the acceptance runner. The
//! expected values are worked out from raw rotations and translations.

use rand::Rng;
use synflow_core::flow::{self, BOX_EPS};
use synflow_core::geom::{OrientedBox, Pose, Vec3};
use synflow_core::pipeline::{self, PipelineConfig, SequenceData, TownConfig};
use synflow_core::road::Archetype;
use synflow_core::traffic::BehaviorConfig;

pub fn random_pose(rng: &mut impl Rng, reach: f64) -> Pose {
    let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
    let t = Vec3::from_fn(|_, _| rng.gen_range(-reach..reach));
    Pose::from_quaternion(q[0], q[1], q[2], q[3], t)
}

/// Displacement of a world point riding on a body that moves from `a` to `b`:
/// take its body coordinates at `a` and re-express them through `b`.
pub fn body_frame_flow(p: &Vec3, a: &Pose, b: &Pose) -> Vec3 {
    let local = a.rotation.transpose() * (p - a.translation);
    b.rotation * local + b.translation - p
}

/// Majority tag among the points inside `bbox`, counted with a flat histogram
/// and resolved towards the smallest tag.
pub fn vote_oracle(points: &[Vec3], tags: &[u32], bbox: &OrientedBox) -> Option<u32> {
    let mut hist: Vec<(u32, usize)> = Vec::new();
    for (p, &t) in points.iter().zip(tags) {
        let local = bbox.rotation.transpose() * (p - bbox.center);
        let inside = (0..3).all(|k| local[k].abs() <= bbox.half_extents[k] + BOX_EPS);
        if !inside {
            continue;
        }
        match hist.iter_mut().find(|(u, _)| *u == t) {
            Some(e) => e.1 += 1,
            None => hist.push((t, 1)),
        }
    }
    let top = hist.iter().map(|e| e.1).max()?;
    hist.iter().filter(|e| e.1 == top).map(|e| e.0).min()
}

/// Distance from a point near the surface of `b` to that surface.
pub fn surface_distance(p: &Vec3, b: &OrientedBox) -> f64 {
    let local = b.rotation.transpose() * (p - b.center);
    (0..3).map(|k| local[k].abs() - b.half_extents[k]).fold(f64::NEG_INFINITY, f64::max).abs()
}

pub struct WarpReport {
    pub max_error: f64,
    /// Largest distance from a warped agent point to its agent's t+1 box surface.
    pub max_boundary: f64,
    pub checked: usize,
    pub boxes_voted: usize,
    /// Boxes where the library vote and the histogram oracle differ.
    pub vote_disagreements: usize,
    /// Boxes overlapping no other agent whose majority tag is not their own.
    pub isolated_foreign_majority: usize,
}

/// Moves every labeled point by its flow and compares with where the privileged
/// poses say the surface went, all in the t+1 sensor frame.
pub fn warp_check(seq: &SequenceData) -> WarpReport {
    let mut r = WarpReport {
        max_error: 0.0,
        max_boundary: 0.0,
        checked: 0,
        boxes_voted: 0,
        vote_disagreements: 0,
        isolated_foreign_majority: 0,
    };
    let n = seq.states.len();
    for t in 0..n - 1 {
        let (s0, s1) = (&seq.sensor_poses[t], &seq.sensor_poses[t + 1]);
        let cloud = &seq.clouds[t];
        let labels = &seq.labels[t];
        let world: Vec<Vec3> = cloud.points.iter().map(|p| s0.rotation * p + s0.translation).collect();
        for i in 0..cloud.len() {
            if !labels.valid[i] {
                continue;
            }
            let tag = cloud.tags[i];
            let next = seq.states[t + 1].agent(tag);
            let moved = match (tag, seq.states[t].agent(tag), next) {
                (0, _, _) => world[i],
                (_, Some(a), Some(b)) => world[i] + body_frame_flow(&world[i], &a.pose, &b.pose),
                _ => panic!("frame {t}: valid point {i} with tag {tag} lacks a pose pair"),
            };
            let want = s1.rotation.transpose() * (moved - s1.translation);
            let got = s1.rotation.transpose() * (world[i] - s1.translation) + labels.flow[i];
            if let (true, Some(b)) = (tag != 0, next) {
                r.max_boundary = r.max_boundary.max(surface_distance(&(s1.rotation * got + s1.translation), &b.bbox()));
            }
            r.max_error = r.max_error.max((got - want).norm());
            r.checked += 1;
        }
        let pairs = flow::pose_pairs(&seq.states[t], &seq.states[t + 1]);
        let votes = flow::assign_tags(&world, &cloud.tags, &pairs);
        for pair in &pairs {
            r.boxes_voted += 1;
            let want = vote_oracle(&world, &cloud.tags, &pair.bbox);
            if votes.get(&pair.actor_id).map(|v| v.tag) != want {
                r.vote_disagreements += 1;
            }
            let isolated =
                seq.states[t].agents().all(|o| o.actor_id == pair.actor_id || !o.bbox().intersects(&pair.bbox));
            if isolated && want.is_some_and(|v| v != pair.actor_id) {
                r.isolated_foreign_majority += 1;
            }
        }
    }
    r
}

pub fn dense_behavior() -> BehaviorConfig {
    BehaviorConfig { npc_vehicle_count: 30, pedestrian_count: 15, spawn_radius: 100.0, ..BehaviorConfig::default() }
}

pub fn small_config(out: &std::path::Path, archetype: Archetype, beams: &[u32], n_frames: u32) -> PipelineConfig {
    PipelineConfig {
        towns: vec![TownConfig { archetype, extent: 250.0, seed: None }],
        behaviors: vec![dense_behavior()],
        beams: beams.iter().map(|&c| pipeline::BeamEntry::Channels(c)).collect(),
        n_frames,
        master_seed: 42,
        output_dir: out.to_path_buf(),
        ..PipelineConfig::default()
    }
}

/// Points in the t+1 frame that the ego-motion model alone predicts for frame t.
pub fn ego_aligned(seq: &SequenceData, t: usize) -> Vec<Vec3> {
    let (a, b) = (&seq.sensor_poses[t], &seq.sensor_poses[t + 1]);
    seq.clouds[t]
        .points
        .iter()
        .map(|p| b.rotation.transpose() * (a.rotation * p + a.translation - b.translation))
        .collect()
}

/// Byte ranges of a SYNF file, read straight off the documented layout.
pub struct Layout {
    pub meta: std::ops::Range<usize>,
    pub table: std::ops::Range<usize>,
    /// (offset, length) per frame record, checksum included.
    pub frames: Vec<(usize, usize)>,
}

pub fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

pub fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

pub fn layout(b: &[u8]) -> Layout {
    let meta_len = u64_at(b, 8) as usize;
    let meta = 16..16 + meta_len;
    let n = u32_at(b, meta.end) as usize;
    let table = meta.end + 4..meta.end + 4 + 16 * n;
    let frames = (0..n)
        .map(|k| (u64_at(b, table.start + 16 * k) as usize, u64_at(b, table.start + 16 * k + 8) as usize))
        .collect();
    Layout { meta, table, frames }
}
