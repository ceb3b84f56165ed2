//! Sampling → rollout → export, plus dataset-level evaluation, statistics and
//! split assignment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{
    self, prediction_path, to_f32, AgentInfo, DatasetError, FrameRecord, SequenceMeta, SequenceReader, SplitError,
    SplitPlan, StoredPose, GENERATOR_VERSION, SCHEMA_VERSION,
};
use crate::eval::{self, labels_from_record, BucketSpec, EvalError, MetricAccumulator, MetricReport};
use crate::flow::{self, FlowLabels};
use crate::geom::{Pose, Vec3};
use crate::lidar::{self, BeamConfig, StaticScenery, TaggedPointCloud};
use crate::road::{self, Archetype, LaneGraph, RouteBank, TownSpec};
use crate::traffic::{self, BehaviorConfig, Category, SimState, DT};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error("town generation failed: {0}")]
    Road(#[from] road::RoadError),
    #[error("rollout failed: {0}")]
    Traffic(#[from] traffic::TrafficError),
    #[error("route bank for town {0} is empty")]
    EmptyRouteBank(usize),
    #[error("missing prediction for frame {frame}: {path}")]
    MissingPrediction { frame: usize, path: PathBuf },
    #[error("prediction file {path} holds frame {stored}, expected {frame}")]
    PredictionIndex { frame: usize, stored: u32, path: PathBuf },
}

impl PipelineError {
    pub fn is_config(&self) -> bool {
        matches!(self, PipelineError::Config(_))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

/// Stable seed derivation: the first eight bytes of sha256 over the parts.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for p in parts {
        h.update(p.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

const TOWN_SEED_TAG: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TownConfig {
    pub archetype: Archetype,
    pub extent: f64,
    /// Derived from the master seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouteBankParams {
    pub tau: usize,
    pub candidate_budget: usize,
    pub min_length: f64,
}

impl Default for RouteBankParams {
    fn default() -> Self {
        Self {
            tau: road::DEFAULT_TAU,
            candidate_budget: road::DEFAULT_CANDIDATE_BUDGET,
            min_length: road::DEFAULT_MIN_ROUTE_LENGTH,
        }
    }
}

/// A beam entry is either a channel count using the default table or a full
/// configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BeamEntry {
    Channels(u32),
    Config(BeamConfig),
}

impl BeamEntry {
    pub fn resolve(&self) -> Result<BeamConfig, lidar::LidarError> {
        let cfg = match self {
            BeamEntry::Channels(c) => BeamConfig::for_channels(*c)?,
            BeamEntry::Config(c) => c.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub towns: Vec<TownConfig>,
    pub route_bank: RouteBankParams,
    /// Density tiers, assigned round-robin over a cell's sequences.
    pub behaviors: Vec<BehaviorConfig>,
    /// One cell per entry; listing 32 twice and 64 once gives a 2:1 mix.
    pub beams: Vec<BeamEntry>,
    pub n_frames: u32,
    pub sequences_per_cell: usize,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            towns: vec![TownConfig { archetype: Archetype::Mixed, extent: 400.0, seed: None }],
            route_bank: RouteBankParams::default(),
            behaviors: vec![BehaviorConfig::default()],
            beams: vec![BeamEntry::Channels(32), BeamEntry::Channels(64)],
            n_frames: 100,
            sequences_per_cell: 1,
            master_seed: 0,
            output_dir: PathBuf::from("synflow-out"),
            workers: 1,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self, PipelineError> {
        let cfg: Self = serde_json::from_slice(bytes).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let bytes = std::fs::read(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&bytes)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        for (i, t) in self.towns.iter().enumerate() {
            if !(t.extent >= road::MIN_TOWN_EXTENT) {
                return bad(format!("town {i}: extent {} below {} m", t.extent, road::MIN_TOWN_EXTENT));
            }
        }
        if self.behaviors.is_empty() {
            return bad("behaviors must not be empty".into());
        }
        for (i, b) in self.behaviors.iter().enumerate() {
            if !(0.0..=1.0).contains(&b.aggressiveness) || !(b.spawn_radius > 0.0) {
                return bad(format!("behavior {i}: aggressiveness must lie in [0, 1] and spawn radius be positive"));
            }
        }
        for (i, b) in self.beams.iter().enumerate() {
            if let Err(e) = b.resolve() {
                return bad(format!("beam {i}: {e}"));
            }
        }
        if self.n_frames < 2 {
            return bad(format!("n_frames {} < 2", self.n_frames));
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.route_bank.candidate_budget == 0 || !(self.route_bank.min_length > 0.0) {
            return bad("route bank needs a positive budget and min_length".into());
        }
        Ok(())
    }

    pub fn town_spec(&self, index: usize) -> TownSpec {
        let t = &self.towns[index];
        TownSpec {
            archetype: t.archetype,
            extent: t.extent,
            seed: t.seed.unwrap_or_else(|| derive_seed(self.master_seed, &[TOWN_SEED_TAG, index as u64])),
        }
    }

    /// Every requested sequence in deterministic order.
    pub fn jobs(&self) -> Vec<SequenceJob> {
        let mut jobs = Vec::new();
        for town_index in 0..self.towns.len() {
            for (b, beam) in self.beams.iter().enumerate() {
                let beam = beam.resolve().expect("validated");
                for j in 0..self.sequences_per_cell {
                    let sequence_index = b * self.sequences_per_cell + j;
                    jobs.push(SequenceJob {
                        town_index,
                        sequence_index,
                        seed: derive_seed(self.master_seed, &[town_index as u64, sequence_index as u64]),
                        behavior: self.behaviors[sequence_index % self.behaviors.len()].clone(),
                        beam: beam.clone(),
                        n_frames: self.n_frames,
                    });
                }
            }
        }
        jobs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceJob {
    pub town_index: usize,
    pub sequence_index: usize,
    pub seed: u64,
    pub behavior: BehaviorConfig,
    pub beam: BeamConfig,
    pub n_frames: u32,
}

impl SequenceJob {
    pub fn file_name(&self, archetype: Archetype) -> String {
        format!("{:02}_{}_{}b_{:04}.synf", self.town_index, archetype.name(), self.beam.channels, self.sequence_index)
    }
}

/// Immutable per-town data shared by all of its sequences.
pub struct TownData {
    pub spec: TownSpec,
    pub graph: LaneGraph,
    pub digest: String,
    pub bank: RouteBank,
    pub scenery: StaticScenery,
}

pub fn prepare_town(spec: TownSpec, params: &RouteBankParams) -> Result<TownData, PipelineError> {
    let graph = road::generate_town(&spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bank = road::build_route_bank(&graph, params.tau, params.candidate_budget, params.min_length, &mut rng);
    let scenery = lidar::generate_scenery(&graph, spec.seed);
    Ok(TownData { digest: graph.digest(), spec, graph, bank, scenery })
}

/// Full-precision output of one generated sequence.
pub struct SequenceData {
    pub meta: SequenceMeta,
    pub states: Vec<SimState>,
    /// Sensor-to-world pose per frame, as exported.
    pub stored_poses: Vec<StoredPose>,
    /// `stored_poses` converted back; the labels are computed with these.
    pub sensor_poses: Vec<Pose>,
    pub clouds: Vec<TaggedPointCloud>,
    pub labels: Vec<FlowLabels>,
}

pub fn simulate_sequence(town: &TownData, job: &SequenceJob) -> Result<SequenceData, PipelineError> {
    if town.bank.routes.is_empty() {
        return Err(PipelineError::EmptyRouteBank(job.town_index));
    }
    let route_index = job.sequence_index % town.bank.routes.len();
    let route = &town.bank.routes[route_index];
    let states = traffic::rollout(&town.graph, route, &job.behavior, job.n_frames as usize, job.seed)?;
    let stored_poses: Vec<StoredPose> =
        states.iter().map(|s| StoredPose::from_pose(&s.ego.pose.compose(&job.beam.mount))).collect();
    let sensor_poses: Vec<Pose> = stored_poses.iter().map(StoredPose::to_pose).collect();
    let clouds: Vec<TaggedPointCloud> = states
        .par_iter()
        .map(|s| {
            let agents: Vec<_> = s.agents().collect();
            lidar::scan(&agents, &town.scenery, &s.ego, &job.beam).expect("validated beam config")
        })
        .collect();
    let n = states.len();
    let labels: Vec<FlowLabels> = (0..n)
        .into_par_iter()
        .map(|t| {
            if t + 1 == n {
                return flow::terminal_labels(&clouds[t]);
            }
            let pairs = flow::pose_pairs(&states[t], &states[t + 1]);
            flow::label_frame(&clouds[t], &pairs, &sensor_poses[t], &sensor_poses[t + 1])
        })
        .collect();
    let meta = SequenceMeta {
        schema_version: SCHEMA_VERSION,
        seed: job.seed,
        town: town.spec,
        lane_graph_digest: town.digest.clone(),
        lane_graph: town.graph.clone(),
        route_index,
        behavior: job.behavior.clone(),
        beam: job.beam.clone(),
        n_frames: job.n_frames,
        dt: DT,
        generator_version: GENERATOR_VERSION.to_string(),
        agents: states[0]
            .agents()
            .map(|a| AgentInfo {
                actor_id: a.actor_id,
                class: a.class,
                half_extents: [a.half_extents.x, a.half_extents.y, a.half_extents.z],
            })
            .collect(),
    };
    Ok(SequenceData { meta, states, stored_poses, sensor_poses, clouds, labels })
}

impl SequenceData {
    pub fn records(&self) -> Vec<FrameRecord> {
        self.clouds
            .iter()
            .zip(&self.labels)
            .enumerate()
            .map(|(t, (c, l))| FrameRecord {
                frame_index: t as u32,
                timestamp: t as f64 * self.meta.dt,
                ego_pose: self.stored_poses[t],
                points: c.points.iter().map(to_f32).collect(),
                flow: l.flow.iter().map(to_f32).collect(),
                tags: c.tags.clone(),
                classes: c.classes.clone(),
                beam_ids: c.beam_ids.clone(),
                category: l.category.iter().map(|&k| k as u8).collect(),
                valid: l.valid.clone(),
                dynamic: l.dynamic.clone(),
            })
            .collect()
    }

    /// Fraction of labeled frames (all but the last) with a dynamic point.
    pub fn dynamic_frame_ratio(&self) -> f64 {
        let labeled = &self.labels[..self.labels.len() - 1];
        labeled.iter().filter(|l| l.dynamic.iter().any(|&d| d)).count() as f64 / labeled.len() as f64
    }

    pub fn dynamic_point_ratio(&self) -> f64 {
        let total: usize = self.labels.iter().map(FlowLabels::len).sum();
        let dynamic: usize = self.labels.iter().map(|l| l.dynamic.iter().filter(|&&d| d).count()).sum();
        if total == 0 {
            0.0
        } else {
            dynamic as f64 / total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub town_index: usize,
    pub archetype: Archetype,
    pub channels: u32,
    pub sequence_index: usize,
    pub seed: u64,
    pub n_frames: u32,
    pub n_points: u64,
    pub dynamic_frame_ratio: f64,
    pub dynamic_point_ratio: f64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureEntry {
    pub file: String,
    pub town_index: usize,
    pub sequence_index: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub master_seed: u64,
    pub generator_version: String,
    pub sequences: Vec<ManifestEntry>,
    pub failures: Vec<FailureEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn generate_one(town: &TownData, job: &SequenceJob, out_dir: &Path) -> Result<ManifestEntry, PipelineError> {
    let data = simulate_sequence(town, job)?;
    let file = job.file_name(town.spec.archetype);
    let path = out_dir.join(&file);
    let records = data.records();
    dataset::write_sequence(&data.meta, &records, &path)?;
    let bytes = std::fs::read(&path).map_err(io_err(&path))?;
    Ok(ManifestEntry {
        file,
        town_index: job.town_index,
        archetype: town.spec.archetype,
        channels: job.beam.channels,
        sequence_index: job.sequence_index,
        seed: job.seed,
        n_frames: job.n_frames,
        n_points: records.iter().map(|r| r.len() as u64).sum(),
        dynamic_frame_ratio: data.dynamic_frame_ratio(),
        dynamic_point_ratio: data.dynamic_point_ratio(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool, PipelineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| PipelineError::Config(format!("cannot start {workers} workers: {e}")))
}

/// Generates every sequence of `cfg`, writes the containers and
/// `manifest.json` under `cfg.output_dir`, and returns the manifest.
/// Per-sequence failures are recorded, not propagated.
pub fn run_generate(cfg: &PipelineConfig) -> Result<Manifest, PipelineError> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let pool = thread_pool(cfg.workers)?;
    let jobs = cfg.jobs();
    let (towns, results) = pool.install(|| {
        let towns: Vec<Result<TownData, String>> = (0..cfg.towns.len())
            .into_par_iter()
            .map(|i| prepare_town(cfg.town_spec(i), &cfg.route_bank).map_err(|e| e.to_string()))
            .collect();
        let results: Vec<Result<ManifestEntry, String>> = jobs
            .par_iter()
            .map(|job| match &towns[job.town_index] {
                Ok(town) => generate_one(town, job, out).map_err(|e| e.to_string()),
                Err(e) => Err(e.clone()),
            })
            .collect();
        (towns, results)
    });
    let mut manifest = Manifest {
        master_seed: cfg.master_seed,
        generator_version: GENERATOR_VERSION.to_string(),
        sequences: Vec::new(),
        failures: Vec::new(),
    };
    for (job, r) in jobs.iter().zip(results) {
        match r {
            Ok(entry) => manifest.sequences.push(entry),
            Err(error) => manifest.failures.push(FailureEntry {
                file: job.file_name(cfg.towns[job.town_index].archetype),
                town_index: job.town_index,
                sequence_index: job.sequence_index,
                error,
            }),
        }
    }
    drop(towns);
    let path = out.join(MANIFEST_FILE);
    let mut json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    json.push(b'\n');
    std::fs::write(&path, json).map_err(io_err(&path))?;
    Ok(manifest)
}

/// `*.synf` files directly inside `dir`, sorted by name.
pub fn list_sequences(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let p = entry.map_err(io_err(dir))?.path();
        if p.extension().is_some_and(|e| e == "synf") && p.is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Predictor {
    Ego,
    Nn,
    /// Directory holding `<sequence stem>/frame_NNNNNN.synp` files.
    External(PathBuf),
}

impl std::str::FromStr for Predictor {
    type Err = std::convert::Infallible;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "ego" => Predictor::Ego,
            "nn" => Predictor::Nn,
            p => Predictor::External(PathBuf::from(p)),
        })
    }
}

/// Points of `from` moved into the sensor frame of `to`.
pub fn align_into(from: &FrameRecord, to: &FrameRecord) -> Vec<Vec3> {
    let m = to.ego_pose.to_pose().inverse().compose(&from.ego_pose.to_pose());
    from.points_f64().iter().map(|p| m.transform_point(p)).collect()
}

fn predict(
    predictor: &Predictor,
    reader: &SequenceReader,
    frame: &FrameRecord,
    next: Option<&FrameRecord>,
) -> Result<Vec<Vec3>, PipelineError> {
    let t = frame.frame_index as usize;
    match predictor {
        Predictor::Ego => Ok(eval::ego_motion_flow(frame).flow),
        Predictor::Nn => match next {
            Some(next) => Ok(eval::nn_flow(&align_into(frame, next), &next.points_f64())?),
            None => Ok(vec![Vec3::zeros(); frame.len()]),
        },
        Predictor::External(root) => {
            let path = prediction_path(root, &stem(reader.path()), t);
            if !path.is_file() {
                return Err(PipelineError::MissingPrediction { frame: t, path });
            }
            let (stored, flow) = dataset::read_prediction(&path)?;
            if stored as usize != t {
                return Err(PipelineError::PredictionIndex { frame: t, stored, path });
            }
            Ok(flow.iter().map(dataset::to_vec3).collect())
        }
    }
}

pub fn evaluate_sequence(
    path: &Path,
    predictor: &Predictor,
    spec: BucketSpec,
) -> Result<MetricAccumulator, PipelineError> {
    let reader = SequenceReader::open(path)?;
    let mut acc = MetricAccumulator::new(spec, reader.meta.dt)?;
    let mut current = reader.frame(0)?;
    for t in 0..reader.n_frames() {
        let next = if t + 1 < reader.n_frames() { Some(reader.frame(t + 1)?) } else { None };
        let pred = predict(predictor, &reader, &current, next.as_ref())?;
        acc.add_frame(&pred, &labels_from_record(&current))?;
        if let Some(n) = next {
            current = n;
        }
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub per_sequence: Vec<(String, MetricReport)>,
    pub aggregate: MetricReport,
}

impl EvalOutput {
    /// Rows for the table renderers: sequences then the aggregate.
    pub fn rows(&self) -> Vec<(String, MetricReport)> {
        let mut rows = self.per_sequence.clone();
        rows.push(("all".to_string(), self.aggregate.clone()));
        rows
    }
}

pub fn run_eval(data_dir: &Path, predictor: &Predictor, spec: BucketSpec) -> Result<EvalOutput, PipelineError> {
    spec.validate()?;
    let paths = list_sequences(data_dir)?;
    let accs = paths.par_iter().map(|p| evaluate_sequence(p, predictor, spec)).collect::<Result<Vec<_>, _>>()?;
    let mut total = MetricAccumulator::new(spec, DT)?;
    let mut per_sequence = Vec::new();
    for (p, a) in paths.iter().zip(&accs) {
        total.merge(a);
        per_sequence.push((stem(p), a.report()));
    }
    Ok(EvalOutput { per_sequence, aggregate: total.report() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub sequences: usize,
    pub frames: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub sequences: usize,
    pub total_frames: u64,
    pub labeled_frames: u64,
    pub dynamic_frames: u64,
    pub total_points: u64,
    pub valid_points: u64,
    pub dynamic_points: u64,
    /// Indexed by category code (background, car, other, ped, vru).
    pub category_points: [u64; 5],
    pub buckets: BucketSpec,
    /// Valid agent points with speed ≥ `buckets.min_dynamic_speed`.
    pub speed_histogram: Vec<u64>,
    /// Keyed by `<archetype>/<channels>b`.
    pub cells: BTreeMap<String, CellStats>,
}

impl DatasetStats {
    pub fn dynamic_frame_ratio(&self) -> f64 {
        ratio(self.dynamic_frames, self.labeled_frames)
    }

    pub fn dynamic_point_ratio(&self) -> f64 {
        ratio(self.dynamic_points, self.total_points)
    }

    /// Fraction of histogram mass in buckets whose lower edge is ≥ `speed`.
    pub fn mass_above(&self, speed: f64) -> f64 {
        let total: u64 = self.speed_histogram.iter().sum();
        let above: u64 = self
            .speed_histogram
            .iter()
            .enumerate()
            .filter(|(k, _)| self.buckets.lower_edge(*k) >= speed)
            .map(|(_, n)| n)
            .sum();
        ratio(above, total)
    }

    pub fn render_text(&self) -> String {
        let mut s = format!(
            "sequences          {}\nframes             {}\nlabeled frames     {}\ndynamic frames     {} ({:.3})\npoints             {}\nvalid points       {}\ndynamic points     {} ({:.4})\n",
            self.sequences,
            self.total_frames,
            self.labeled_frames,
            self.dynamic_frames,
            self.dynamic_frame_ratio(),
            self.total_points,
            self.valid_points,
            self.dynamic_points,
            self.dynamic_point_ratio(),
        );
        s.push_str("\npoints per category\n");
        for (k, n) in self.category_points.iter().enumerate() {
            let name = Category::from_u8(k as u8).map_or("?", Category::name);
            s.push_str(&format!("  {name:<12} {n}\n"));
        }
        s.push_str("\nframes per cell\n");
        for (k, c) in &self.cells {
            s.push_str(&format!("  {k:<24} {} sequences, {} frames\n", c.sequences, c.frames));
        }
        s.push_str("\ngt speed histogram (m/s)\n");
        let last = self.speed_histogram.len().saturating_sub(1);
        for (k, n) in self.speed_histogram.iter().enumerate() {
            if *n == 0 {
                continue;
            }
            let lo = self.buckets.lower_edge(k);
            let label = if k == last {
                format!("[{lo:.1}, inf)")
            } else {
                format!("[{lo:.1}, {:.1})", self.buckets.lower_edge(k + 1))
            };
            s.push_str(&format!("  {label:<14} {n}\n"));
        }
        s
    }

    /// One row per histogram bucket.
    pub fn render_csv(&self) -> String {
        let mut s = String::from("bucket_lo,bucket_hi,points\n");
        let last = self.speed_histogram.len().saturating_sub(1);
        for (k, n) in self.speed_histogram.iter().enumerate() {
            let hi = if k == last { "inf".to_string() } else { format!("{}", self.buckets.lower_edge(k + 1)) };
            s.push_str(&format!("{},{hi},{n}\n", self.buckets.lower_edge(k)));
        }
        s
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn run_stats(data_dir: &Path, buckets: BucketSpec) -> Result<DatasetStats, PipelineError> {
    buckets.validate()?;
    let mut st = DatasetStats {
        sequences: 0,
        total_frames: 0,
        labeled_frames: 0,
        dynamic_frames: 0,
        total_points: 0,
        valid_points: 0,
        dynamic_points: 0,
        category_points: [0; 5],
        buckets,
        speed_histogram: vec![0; buckets.n_buckets()],
        cells: BTreeMap::new(),
    };
    for path in list_sequences(data_dir)? {
        let reader = SequenceReader::open(&path)?;
        let meta = &reader.meta;
        st.sequences += 1;
        let cell = st
            .cells
            .entry(format!("{}/{}b", meta.town.archetype.name(), meta.beam.channels))
            .or_insert(CellStats { sequences: 0, frames: 0 });
        cell.sequences += 1;
        cell.frames += reader.n_frames() as u64;
        for t in 0..reader.n_frames() {
            let f = reader.frame(t)?;
            st.total_frames += 1;
            if t + 1 < reader.n_frames() {
                st.labeled_frames += 1;
                st.dynamic_frames += f.dynamic.iter().any(|&d| d) as u64;
            }
            st.total_points += f.len() as u64;
            for i in 0..f.len() {
                st.category_points[f.category[i] as usize] += 1;
                st.dynamic_points += f.dynamic[i] as u64;
                if !f.valid[i] {
                    continue;
                }
                st.valid_points += 1;
                if f.category[i] == Category::Background as u8 {
                    continue;
                }
                let speed = dataset::to_vec3(&f.flow[i]).norm() / meta.dt;
                if speed >= buckets.min_dynamic_speed {
                    st.speed_histogram[buckets.bucket_of(speed)] += 1;
                }
            }
        }
    }
    Ok(st)
}

/// Split assignment over every container in `data_dir`; paths are reported
/// as file names.
pub fn run_splits(data_dir: &Path, plan: &SplitPlan) -> Result<BTreeMap<String, Vec<String>>, PipelineError> {
    let mut seqs = Vec::new();
    for p in list_sequences(data_dir)? {
        let meta = SequenceReader::open(&p)?.meta;
        let name = PathBuf::from(p.file_name().expect("listed file"));
        seqs.push((meta, name));
    }
    let splits = dataset::build_splits(&seqs, plan)?;
    Ok(splits.into_iter().map(|(k, v)| (k, v.iter().map(|p| p.to_string_lossy().into_owned()).collect())).collect())
}
