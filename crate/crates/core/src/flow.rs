//! Scene-flow labels from privileged agent poses.

use std::collections::BTreeMap;

use crate::geom::{OrientedBox, Pose, Vec3};
use crate::lidar::TaggedPointCloud;
use crate::traffic::{AgentClass, Category, SimState};

/// Per-frame displacement above which a point counts as dynamic (0.5 m/s at 10 Hz).
pub const THETA_DYN: f64 = 0.05;

/// Tolerance for a point counting as inside an agent box during the vote.
pub const BOX_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct AgentPosePair {
    pub actor_id: u32,
    pub pose_t: Pose,
    pub pose_t1: Pose,
    /// Box at time t.
    pub bbox: OrientedBox,
}

impl AgentPosePair {
    pub fn bbox_t1(&self) -> OrientedBox {
        OrientedBox::from_pose(&self.pose_t1, self.bbox.half_extents)
    }
}

/// Pose pairs for every non-ego agent present in both snapshots.
pub fn pose_pairs(t: &SimState, t1: &SimState) -> Vec<AgentPosePair> {
    t.npcs
        .iter()
        .filter_map(|a| {
            t1.agent(a.actor_id).map(|b| AgentPosePair {
                actor_id: a.actor_id,
                pose_t: a.pose,
                pose_t1: b.pose,
                bbox: a.bbox(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagAssignment {
    pub tag: u32,
    /// Indices of every cloud point carrying `tag`.
    pub members: Vec<usize>,
}

/// Majority vote over tags of the points inside each agent box; ties go to the
/// smallest tag. Agents whose box holds no point get no entry.
pub fn assign_tags(points_world: &[Vec3], tags: &[u32], agents: &[AgentPosePair]) -> BTreeMap<u32, TagAssignment> {
    let mut out = BTreeMap::new();
    for pair in agents {
        let mut votes: BTreeMap<u32, usize> = BTreeMap::new();
        for (p, &u) in points_world.iter().zip(tags) {
            if pair.bbox.contains(p, BOX_EPS) {
                *votes.entry(u).or_default() += 1;
            }
        }
        // BTreeMap iterates tags ascending, so keeping the first maximum breaks ties low.
        let mut best: Option<(u32, usize)> = None;
        for (&u, &n) in &votes {
            if best.is_none_or(|(_, m)| n > m) {
                best = Some((u, n));
            }
        }
        if let Some((tag, _)) = best {
            let members = tags.iter().enumerate().filter(|(_, &u)| u == tag).map(|(i, _)| i).collect();
            out.insert(pair.actor_id, TagAssignment { tag, members });
        }
    }
    out
}

/// World-frame displacement of a point rigidly attached to the agent.
pub fn rigid_flow(p_world: &Vec3, pair: &AgentPosePair) -> Vec3 {
    // pose * pose⁻¹ is not bit-exactly the identity; an unmoved agent has no flow.
    if pair.pose_t1 == pair.pose_t {
        return Vec3::zeros();
    }
    let motion = pair.pose_t1.compose(&pair.pose_t.inverse());
    motion.transform_point(p_world) - p_world
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlowLabels {
    /// Per-frame flow in the t+1 sensor frame, acting on ego-aligned points.
    pub flow: Vec<Vec3>,
    pub valid: Vec<bool>,
    pub dynamic: Vec<bool>,
    pub category: Vec<Category>,
}

impl FlowLabels {
    pub fn len(&self) -> usize {
        self.flow.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flow.is_empty()
    }
}

fn point_category(tag: u32, class: u8) -> Category {
    if tag == 0 {
        return Category::Background;
    }
    AgentClass::from_code(class).map_or(Category::Background, AgentClass::category)
}

/// Labels one frame. `ego_t` and `ego_t1` are sensor-to-world poses.
///
/// Agent points are associated through their instance tag, which is the
/// actor id by construction.
pub fn label_frame(cloud: &TaggedPointCloud, agents: &[AgentPosePair], ego_t: &Pose, ego_t1: &Pose) -> FlowLabels {
    let by_id: BTreeMap<u32, &AgentPosePair> = agents.iter().map(|a| (a.actor_id, a)).collect();
    let rt1 = ego_t1.rotation.transpose();
    let n = cloud.len();
    let mut labels = FlowLabels {
        flow: Vec::with_capacity(n),
        valid: Vec::with_capacity(n),
        dynamic: Vec::with_capacity(n),
        category: Vec::with_capacity(n),
    };
    for i in 0..n {
        let tag = cloud.tags[i];
        labels.category.push(point_category(tag, cloud.classes[i]));
        let (f, valid) = if tag == 0 {
            (Vec3::zeros(), true)
        } else if let Some(pair) = by_id.get(&tag) {
            let pw = ego_t.transform_point(&cloud.points[i]);
            (rt1 * rigid_flow(&pw, pair), true)
        } else {
            (Vec3::zeros(), false)
        };
        labels.flow.push(f);
        labels.valid.push(valid);
        labels.dynamic.push(valid && f.norm() > THETA_DYN);
    }
    labels
}

/// Labels for a frame with no successor: everything invalid.
pub fn terminal_labels(cloud: &TaggedPointCloud) -> FlowLabels {
    let n = cloud.len();
    FlowLabels {
        flow: vec![Vec3::zeros(); n],
        valid: vec![false; n],
        dynamic: vec![false; n],
        category: cloud.tags.iter().zip(&cloud.classes).map(|(&t, &c)| point_category(t, c)).collect(),
    }
}

pub fn dynamic_mask(labels: &FlowLabels, theta_dyn: f64) -> Vec<bool> {
    labels.flow.iter().map(|f| f.norm() > theta_dyn).collect()
}

/// Maps a point from sensor frame t into sensor frame t+1 using ego poses.
pub fn align_point(p: &Vec3, ego_t: &Pose, ego_t1: &Pose) -> Vec3 {
    ego_t1.inverse().transform_point(&ego_t.transform_point(p))
}
