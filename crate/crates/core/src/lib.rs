//! Synthetic LiDAR scene-flow data engine: procedural towns, traffic rollouts,
//! ray-cast scans, rigid-body flow labels, a checksummed sequence container
//! and flow metrics.

pub mod dataset;
pub mod eval;
pub mod flow;
pub mod geom;
pub mod lidar;
pub mod pipeline;
pub mod polyline;
pub mod road;
pub mod traffic;

pub use dataset::{FrameRecord, SequenceMeta, SequenceReader, StoredPose};
pub use eval::{BucketSpec, MetricReport};
pub use flow::{AgentPosePair, FlowLabels};
pub use geom::{OrientedBox, Pose, Ray, Vec3};
pub use lidar::{BeamConfig, StaticScenery, TaggedPointCloud};
pub use pipeline::{Manifest, PipelineConfig, PipelineError, Predictor};
pub use road::{Archetype, LaneGraph, Route, RouteBank, TownSpec};
pub use traffic::{AgentClass, AgentState, BehaviorConfig, Category, SimState};
