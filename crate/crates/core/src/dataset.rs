//! SYNF sequence container, SYNP prediction files and split building.
//!
//! All integers are little-endian. A SYNF file is a header (magic, schema
//! version, JSON metadata, frame index table, CRC32C) followed by one
//! checksummed record per frame.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geom::{Pose, Vec3};
use crate::lidar::{point_class, BeamConfig};
use crate::road::{Archetype, LaneGraph, TownSpec};
use crate::traffic::{AgentClass, BehaviorConfig};

pub const SYNF_MAGIC: &[u8; 4] = b"SYNF";
pub const SYNP_MAGIC: &[u8; 4] = b"SYNP";
pub const SCHEMA_VERSION: u32 = 1;
pub const GENERATOR_VERSION: &str = concat!("synflow ", env!("CARGO_PKG_VERSION"));
const CATEGORY_MAX: u8 = 4;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported schema version {0}")]
    UnsupportedSchema(u32),
    #[error("truncated {0}")]
    Truncated(&'static str),
    #[error("header checksum mismatch")]
    HeaderChecksum,
    #[error("checksum mismatch in frame {0}")]
    FrameChecksum(usize),
    #[error("frame index {index} out of range for {n_frames} frames")]
    OutOfRange { index: usize, n_frames: usize },
    #[error("array `{field}` has length {got}, expected {expected}")]
    ArrayLength { field: &'static str, expected: usize, got: usize },
    #[error("invalid value {value} in `{field}`")]
    InvalidEnum { field: &'static str, value: u32 },
    #[error("invalid metadata: {0}")]
    InvalidMeta(String),
    #[error("frame record {stored} stored at index slot {slot}")]
    FrameIndexMismatch { slot: usize, stored: u32 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentInfo {
    pub actor_id: u32,
    pub class: AgentClass,
    pub half_extents: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub schema_version: u32,
    pub seed: u64,
    pub town: TownSpec,
    pub lane_graph_digest: String,
    pub lane_graph: LaneGraph,
    pub route_index: usize,
    pub behavior: BehaviorConfig,
    pub beam: BeamConfig,
    pub n_frames: u32,
    pub dt: f64,
    pub generator_version: String,
    pub agents: Vec<AgentInfo>,
}

impl SequenceMeta {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.n_frames < 2 {
            return Err(DatasetError::InvalidMeta(format!("n_frames {} < 2", self.n_frames)));
        }
        if self.schema_version != SCHEMA_VERSION {
            return Err(DatasetError::UnsupportedSchema(self.schema_version));
        }
        self.beam.validate().map_err(|e| DatasetError::InvalidMeta(e.to_string()))
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("metadata serializes")
    }

    /// sha256 of the metadata JSON, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json()))
    }
}

/// Pose exactly as stored: unit quaternion `(w, x, y, z)` and translation.
///
/// Matrix → quaternion → matrix is not bit-stable, so records keep the stored
/// form and [`StoredPose::to_pose`] is the single conversion every reader uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StoredPose {
    pub q: [f64; 4],
    pub t: [f64; 3],
}

impl Default for StoredPose {
    fn default() -> Self {
        Self { q: [1.0, 0.0, 0.0, 0.0], t: [0.0; 3] }
    }
}

impl StoredPose {
    pub fn from_pose(p: &Pose) -> Self {
        Self { q: p.quaternion(), t: [p.translation.x, p.translation.y, p.translation.z] }
    }

    pub fn to_pose(&self) -> Pose {
        let [w, x, y, z] = self.q;
        Pose::from_quaternion(w, x, y, z, Vec3::new(self.t[0], self.t[1], self.t[2]))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameRecord {
    pub frame_index: u32,
    pub timestamp: f64,
    /// Sensor-to-world.
    pub ego_pose: StoredPose,
    pub points: Vec<[f32; 3]>,
    pub flow: Vec<[f32; 3]>,
    pub tags: Vec<u32>,
    pub classes: Vec<u8>,
    pub beam_ids: Vec<u8>,
    pub category: Vec<u8>,
    pub valid: Vec<bool>,
    pub dynamic: Vec<bool>,
}

pub fn to_f32(v: &Vec3) -> [f32; 3] {
    [v.x as f32, v.y as f32, v.z as f32]
}

pub fn to_vec3(v: &[f32; 3]) -> Vec3 {
    Vec3::new(v[0] as f64, v[1] as f64, v[2] as f64)
}

impl FrameRecord {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let n = self.points.len();
        let lens = [
            ("flow", self.flow.len()),
            ("tags", self.tags.len()),
            ("classes", self.classes.len()),
            ("beam_ids", self.beam_ids.len()),
            ("category", self.category.len()),
            ("valid", self.valid.len()),
            ("dynamic", self.dynamic.len()),
        ];
        for (field, got) in lens {
            if got != n {
                return Err(DatasetError::ArrayLength { field, expected: n, got });
            }
        }
        if let Some(&c) = self.classes.iter().find(|&&c| c > point_class::MAX) {
            return Err(DatasetError::InvalidEnum { field: "classes", value: c as u32 });
        }
        if let Some(&c) = self.category.iter().find(|&&c| c > CATEGORY_MAX) {
            return Err(DatasetError::InvalidEnum { field: "category", value: c as u32 });
        }
        Ok(())
    }

    pub fn points_f64(&self) -> Vec<Vec3> {
        self.points.iter().map(to_vec3).collect()
    }

    pub fn flow_f64(&self) -> Vec<Vec3> {
        self.flow.iter().map(to_vec3).collect()
    }
}

fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

pub fn encode_frame(f: &FrameRecord) -> Result<Vec<u8>, DatasetError> {
    f.validate()?;
    let n = f.len();
    let mut b = Vec::with_capacity(76 + n * 31 + n.div_ceil(8) * 2);
    b.extend_from_slice(&f.frame_index.to_le_bytes());
    b.extend_from_slice(&f.timestamp.to_le_bytes());
    let StoredPose { q, t } = f.ego_pose;
    for v in [q[0], q[1], q[2], q[3], t[0], t[1], t[2]] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b.extend_from_slice(&(n as u32).to_le_bytes());
    for v in f.points.iter().chain(&f.flow).flatten() {
        b.extend_from_slice(&v.to_le_bytes());
    }
    for v in &f.tags {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b.extend_from_slice(&f.classes);
    b.extend_from_slice(&f.beam_ids);
    b.extend_from_slice(&f.category);
    b.extend_from_slice(&pack_bits(&f.valid));
    b.extend_from_slice(&pack_bits(&f.dynamic));
    let crc = crc32c::crc32c(&b);
    b.extend_from_slice(&crc.to_le_bytes());
    Ok(b)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(DatasetError::Truncated(self.what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DatasetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, DatasetError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn vec3s(&mut self, n: usize) -> Result<Vec<[f32; 3]>, DatasetError> {
        let raw = self.take(n.checked_mul(12).ok_or(DatasetError::Truncated(self.what))?)?;
        Ok(raw
            .chunks_exact(12)
            .map(|c| {
                let f = |k: usize| f32::from_le_bytes(c[k * 4..k * 4 + 4].try_into().unwrap());
                [f(0), f(1), f(2)]
            })
            .collect())
    }
}

/// Decodes one frame record including its trailing checksum. `slot` is used
/// only for error reporting.
pub fn decode_frame(bytes: &[u8], slot: usize) -> Result<FrameRecord, DatasetError> {
    if bytes.len() < 4 {
        return Err(DatasetError::Truncated("frame"));
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if crc32c::crc32c(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err(DatasetError::FrameChecksum(slot));
    }
    let mut c = Cursor { buf: body, pos: 0, what: "frame" };
    let frame_index = c.u32()?;
    let timestamp = c.f64()?;
    let mut p = [0.0; 7];
    for v in &mut p {
        *v = c.f64()?;
    }
    let ego_pose = StoredPose { q: [p[0], p[1], p[2], p[3]], t: [p[4], p[5], p[6]] };
    let n = c.u32()? as usize;
    let points = c.vec3s(n)?;
    let flow = c.vec3s(n)?;
    let tags = c.take(n * 4)?.chunks_exact(4).map(|x| u32::from_le_bytes(x.try_into().unwrap())).collect();
    let classes = c.take(n)?.to_vec();
    let beam_ids = c.take(n)?.to_vec();
    let category = c.take(n)?.to_vec();
    let valid = unpack_bits(c.take(n.div_ceil(8))?, n);
    let dynamic = unpack_bits(c.take(n.div_ceil(8))?, n);
    if c.pos != body.len() {
        return Err(DatasetError::ArrayLength { field: "frame", expected: c.pos, got: body.len() });
    }
    let f = FrameRecord {
        frame_index,
        timestamp,
        ego_pose,
        points,
        flow,
        tags,
        classes,
        beam_ids,
        category,
        valid,
        dynamic,
    };
    f.validate()?;
    Ok(f)
}

/// Writes a whole sequence. Output bytes depend only on the inputs.
pub fn write_sequence(meta: &SequenceMeta, frames: &[FrameRecord], path: &Path) -> Result<(), DatasetError> {
    meta.validate()?;
    if frames.len() != meta.n_frames as usize {
        return Err(DatasetError::ArrayLength { field: "frames", expected: meta.n_frames as usize, got: frames.len() });
    }
    let bodies = frames.iter().map(encode_frame).collect::<Result<Vec<_>, _>>()?;
    let meta_json = meta.to_json();
    let mut header = Vec::with_capacity(24 + meta_json.len() + 16 * frames.len());
    header.extend_from_slice(SYNF_MAGIC);
    header.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
    header.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    header.extend_from_slice(&meta_json);
    header.extend_from_slice(&(frames.len() as u32).to_le_bytes());
    let mut offset = (header.len() + 16 * frames.len() + 4) as u64;
    for b in &bodies {
        header.extend_from_slice(&offset.to_le_bytes());
        header.extend_from_slice(&(b.len() as u64).to_le_bytes());
        offset += b.len() as u64;
    }
    let crc = crc32c::crc32c(&header);
    header.extend_from_slice(&crc.to_le_bytes());

    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(&header).map_err(io_err(path))?;
    for b in &bodies {
        w.write_all(b).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Open container with lazy, random-access frame loading.
#[derive(Debug)]
pub struct SequenceReader {
    pub meta: SequenceMeta,
    path: PathBuf,
    index: Vec<(u64, u64)>,
    file: Mutex<File>,
}

impl SequenceReader {
    pub fn open(path: &Path) -> Result<Self, DatasetError> {
        let mut file = File::open(path).map_err(io_err(path))?;
        let file_len = file.metadata().map_err(io_err(path))?.len();
        let mut fixed = [0u8; 16];
        let got = read_up_to(&mut file, &mut fixed).map_err(io_err(path))?;
        if got < 4 {
            return Err(DatasetError::Truncated("header"));
        }
        let magic: [u8; 4] = fixed[..4].try_into().unwrap();
        if &magic != SYNF_MAGIC {
            return Err(DatasetError::BadMagic(magic));
        }
        if got < 16 {
            return Err(DatasetError::Truncated("header"));
        }
        let schema = u32::from_le_bytes(fixed[4..8].try_into().unwrap());
        if schema != SCHEMA_VERSION {
            return Err(DatasetError::UnsupportedSchema(schema));
        }
        let meta_len = u64::from_le_bytes(fixed[8..16].try_into().unwrap());
        if meta_len.saturating_add(20) > file_len {
            return Err(DatasetError::Truncated("metadata"));
        }
        let mut rest = vec![0u8; meta_len as usize + 4];
        file.read_exact(&mut rest).map_err(io_err(path))?;
        let n_frames = u32::from_le_bytes(rest[meta_len as usize..].try_into().unwrap()) as u64;
        let header_len = 16 + meta_len + 4 + 16 * n_frames + 4;
        if header_len > file_len {
            return Err(DatasetError::Truncated("frame index"));
        }
        let mut table = vec![0u8; 16 * n_frames as usize + 4];
        file.read_exact(&mut table).map_err(io_err(path))?;
        let mut header = Vec::with_capacity(header_len as usize);
        header.extend_from_slice(&fixed);
        header.extend_from_slice(&rest);
        header.extend_from_slice(&table[..table.len() - 4]);
        let stored = u32::from_le_bytes(table[table.len() - 4..].try_into().unwrap());
        if crc32c::crc32c(&header) != stored {
            return Err(DatasetError::HeaderChecksum);
        }
        let meta: SequenceMeta =
            serde_json::from_slice(&rest[..meta_len as usize]).map_err(|e| DatasetError::InvalidMeta(e.to_string()))?;
        if meta.n_frames as u64 != n_frames {
            return Err(DatasetError::InvalidMeta(format!(
                "metadata declares {} frames, index holds {n_frames}",
                meta.n_frames
            )));
        }
        let mut c = Cursor { buf: &table, pos: 0, what: "frame index" };
        let mut index = Vec::with_capacity(n_frames as usize);
        for _ in 0..n_frames {
            let (off, len) = (c.u64()?, c.u64()?);
            if off.checked_add(len).is_none_or(|end| end > file_len) {
                return Err(DatasetError::Truncated("frame data"));
            }
            index.push((off, len));
        }
        Ok(Self { meta, path: path.to_path_buf(), index, file: Mutex::new(file) })
    }

    pub fn n_frames(&self) -> usize {
        self.index.len()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn frame_bytes(&self, index: usize) -> Result<Vec<u8>, DatasetError> {
        let &(off, len) =
            self.index.get(index).ok_or(DatasetError::OutOfRange { index, n_frames: self.index.len() })?;
        let mut buf = vec![0u8; len as usize];
        let mut f = self.file.lock().unwrap_or_else(|p| p.into_inner());
        f.seek(SeekFrom::Start(off)).map_err(io_err(&self.path))?;
        f.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => DatasetError::Truncated("frame data"),
            _ => DatasetError::Io { path: self.path.clone(), source: e },
        })?;
        Ok(buf)
    }

    pub fn frame(&self, index: usize) -> Result<FrameRecord, DatasetError> {
        let f = decode_frame(&self.frame_bytes(index)?, index)?;
        if f.frame_index as usize != index {
            return Err(DatasetError::FrameIndexMismatch { slot: index, stored: f.frame_index });
        }
        Ok(f)
    }

    pub fn frames(&self) -> impl Iterator<Item = Result<FrameRecord, DatasetError>> + '_ {
        (0..self.n_frames()).map(|i| self.frame(i))
    }
}

fn read_up_to(f: &mut File, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match f.read(&mut buf[got..])? {
            0 => break,
            n => got += n,
        }
    }
    Ok(got)
}

pub fn read_sequence(path: &Path) -> Result<SequenceReader, DatasetError> {
    SequenceReader::open(path)
}

pub fn encode_prediction(frame_index: u32, flow: &[[f32; 3]]) -> Vec<u8> {
    let mut b = Vec::with_capacity(16 + flow.len() * 12);
    b.extend_from_slice(SYNP_MAGIC);
    b.extend_from_slice(&frame_index.to_le_bytes());
    b.extend_from_slice(&(flow.len() as u32).to_le_bytes());
    for v in flow.iter().flatten() {
        b.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32c::crc32c(&b);
    b.extend_from_slice(&crc.to_le_bytes());
    b
}

pub fn decode_prediction(bytes: &[u8]) -> Result<(u32, Vec<[f32; 3]>), DatasetError> {
    if bytes.len() < 4 {
        return Err(DatasetError::Truncated("prediction"));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != SYNP_MAGIC {
        return Err(DatasetError::BadMagic(magic));
    }
    if bytes.len() < 16 {
        return Err(DatasetError::Truncated("prediction"));
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    let mut c = Cursor { buf: body, pos: 4, what: "prediction" };
    let frame_index = c.u32()?;
    let n = c.u32()? as usize;
    if body.len() != 12 + n * 12 {
        return Err(DatasetError::Truncated("prediction"));
    }
    if crc32c::crc32c(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err(DatasetError::FrameChecksum(frame_index as usize));
    }
    Ok((frame_index, c.vec3s(n)?))
}

pub fn write_prediction(path: &Path, frame_index: u32, flow: &[[f32; 3]]) -> Result<(), DatasetError> {
    std::fs::write(path, encode_prediction(frame_index, flow)).map_err(io_err(path))
}

pub fn read_prediction(path: &Path) -> Result<(u32, Vec<[f32; 3]>), DatasetError> {
    decode_prediction(&std::fs::read(path).map_err(io_err(path))?)
}

/// Where the prediction for a frame of sequence `stem` lives under `root`.
pub fn prediction_path(root: &Path, stem: &str, frame_index: usize) -> PathBuf {
    root.join(stem).join(format!("frame_{frame_index:06}.synp"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCell {
    pub archetype: Archetype,
    pub count: usize,
    /// `None` accepts either beam configuration.
    #[serde(default)]
    pub channels: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitDef {
    pub name: String,
    /// Earlier splits this one contains entirely.
    #[serde(default)]
    pub include: Vec<String>,
    #[serde(default)]
    pub cells: Vec<SplitCell>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub splits: Vec<SplitDef>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SplitError {
    #[error("split `{split}` needs {needed} sequences for cell ({cell}) but only {available} remain")]
    InsufficientSequences { split: String, cell: String, needed: usize, available: usize },
    #[error("split `{split}` includes unknown or later split `{include}`")]
    UnknownInclude { split: String, include: String },
    #[error("duplicate split name `{0}`")]
    DuplicateName(String),
}

fn cell_label(c: &SplitCell) -> String {
    match c.channels {
        Some(ch) => format!("{}, {ch}-beam", c.archetype.name()),
        None => c.archetype.name().to_string(),
    }
}

/// Assigns sequences to splits. Each cell draws unused sequences in digest
/// order; included splits are copied in first.
pub fn build_splits(
    sequences: &[(SequenceMeta, PathBuf)],
    plan: &SplitPlan,
) -> Result<BTreeMap<String, Vec<PathBuf>>, SplitError> {
    let mut pool: Vec<(String, &SequenceMeta, &PathBuf)> = sequences.iter().map(|(m, p)| (m.digest(), m, p)).collect();
    pool.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.2.cmp(b.2)));
    let mut used = vec![false; pool.len()];
    let mut out: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    for split in &plan.splits {
        if out.contains_key(&split.name) {
            return Err(SplitError::DuplicateName(split.name.clone()));
        }
        let mut paths: Vec<PathBuf> = Vec::new();
        let mut seen = BTreeSet::new();
        for inc in &split.include {
            let prior = out
                .get(inc)
                .ok_or_else(|| SplitError::UnknownInclude { split: split.name.clone(), include: inc.clone() })?;
            for p in prior {
                if seen.insert(p.clone()) {
                    paths.push(p.clone());
                }
            }
        }
        for cell in &split.cells {
            let matches = |m: &SequenceMeta| {
                m.town.archetype == cell.archetype && cell.channels.is_none_or(|c| c == m.beam.channels)
            };
            let free: Vec<usize> = (0..pool.len()).filter(|&i| !used[i] && matches(pool[i].1)).collect();
            if free.len() < cell.count {
                return Err(SplitError::InsufficientSequences {
                    split: split.name.clone(),
                    cell: cell_label(cell),
                    needed: cell.count,
                    available: free.len(),
                });
            }
            for &i in &free[..cell.count] {
                used[i] = true;
                if seen.insert(pool[i].2.clone()) {
                    paths.push(pool[i].2.clone());
                }
            }
        }
        out.insert(split.name.clone(), paths);
    }
    Ok(out)
}
