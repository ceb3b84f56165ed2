//! Shared fixtures for the criterion benches.

use synflow_core::pipeline::{self, PipelineConfig, RouteBankParams, TownData};
use synflow_core::road::{Archetype, TownSpec};
use synflow_core::traffic::{self, BehaviorConfig, SimState};

pub fn town() -> TownData {
    let spec = TownSpec { archetype: Archetype::Mixed, extent: 300.0, seed: 11 };
    pipeline::prepare_town(spec, &RouteBankParams::default()).expect("town builds")
}

/// A dense traffic state some seconds into a rollout, so agents have spread out.
pub fn busy_state(town: &TownData) -> SimState {
    let behavior = BehaviorConfig { npc_vehicle_count: 30, pedestrian_count: 15, ..BehaviorConfig::default() };
    let mut states = traffic::rollout(&town.graph, &town.bank.routes[0], &behavior, 40, 11).expect("rollout runs");
    states.pop().unwrap()
}

/// Single-worker config over the bench town with `channels` beams.
pub fn config(channels: u32, n_frames: u32) -> PipelineConfig {
    PipelineConfig {
        towns: vec![pipeline::TownConfig { archetype: Archetype::Mixed, extent: 300.0, seed: Some(11) }],
        beams: vec![pipeline::BeamEntry::Channels(channels)],
        n_frames,
        master_seed: 11,
        ..PipelineConfig::default()
    }
}
