#[allow(dead_code)]
mod common;

use std::path::{Path, PathBuf};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synflow_core::dataset::{
    self, DatasetError, FrameRecord, SequenceMeta, SequenceReader, SplitCell, SplitDef, SplitError, SplitPlan,
    StoredPose,
};
use synflow_core::lidar::BeamConfig;
use synflow_core::pipeline::{self, RouteBankParams, SequenceJob};
use synflow_core::road::{Archetype, TownSpec};
use synflow_core::traffic::BehaviorConfig;

use common::{layout, u32_at};

fn sample() -> (SequenceMeta, Vec<FrameRecord>) {
    let params = RouteBankParams { min_length: 250.0, candidate_budget: 40, ..RouteBankParams::default() };
    let town =
        pipeline::prepare_town(TownSpec { archetype: Archetype::Grid, extent: 150.0, seed: 3 }, &params).unwrap();
    let mut beam = BeamConfig::default_32();
    beam.azimuth_step = 1.0;
    let job = SequenceJob {
        town_index: 0,
        sequence_index: 0,
        seed: 17,
        behavior: BehaviorConfig { npc_vehicle_count: 10, pedestrian_count: 6, ..BehaviorConfig::default() },
        beam,
        n_frames: 4,
    };
    let seq = pipeline::simulate_sequence(&town, &job).unwrap();
    (seq.meta.clone(), seq.records())
}

fn written(dir: &Path) -> (PathBuf, SequenceMeta, Vec<FrameRecord>) {
    let (meta, frames) = sample();
    let path = dir.join("s.synf");
    dataset::write_sequence(&meta, &frames, &path).unwrap();
    (path, meta, frames)
}

fn open_bytes(dir: &Path, bytes: &[u8]) -> Result<SequenceReader, DatasetError> {
    let p = dir.join("corrupt.synf");
    std::fs::write(&p, bytes).unwrap();
    SequenceReader::open(&p)
}

fn read_all(r: &SequenceReader) -> Result<Vec<FrameRecord>, DatasetError> {
    r.frames().collect()
}

#[test]
fn round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (path, meta, frames) = written(dir.path());
    let r = SequenceReader::open(&path).unwrap();
    assert_eq!(r.meta, meta);
    let back = read_all(&r).unwrap();
    assert_eq!(back.len(), frames.len());
    for (a, b) in back.iter().zip(&frames) {
        assert_eq!(a, b);
        let bits = |f: &FrameRecord| f.points.iter().chain(&f.flow).flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    // Random access in any order returns the same records.
    for k in [3, 0, 2, 1, 3] {
        assert_eq!(r.frame(k).unwrap(), frames[k]);
    }
    assert!(matches!(r.frame(4), Err(DatasetError::OutOfRange { index: 4, n_frames: 4 })));
}

#[test]
fn layout_parses_without_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, meta, frames) = written(dir.path());
    let b = std::fs::read(&path).unwrap();
    assert_eq!(&b[..4], b"SYNF");
    assert_eq!(u32_at(&b, 4), 1);
    let l = layout(&b);
    let json: serde_json::Value = serde_json::from_slice(&b[l.meta.clone()]).unwrap();
    assert_eq!(json["n_frames"], 4);
    assert_eq!(json["seed"], meta.seed);
    assert_eq!(json["beam"]["channels"], 32);
    assert_eq!(u32_at(&b, l.table.end), crc32c::crc32c(&b[..l.table.end]));
    assert_eq!(l.frames[0].0, l.table.end + 4);
    for (k, &(off, len)) in l.frames.iter().enumerate() {
        let body = &b[off..off + len - 4];
        assert_eq!(u32_at(&b, off + len - 4), crc32c::crc32c(body));
        assert_eq!(u32_at(body, 0) as usize, k);
        let f = &frames[k];
        let n = u32_at(body, 68) as usize;
        assert_eq!(n, f.len());
        let pts = 72;
        let flw = pts + 12 * n;
        let tags = flw + 12 * n;
        let cls = tags + 4 * n;
        let beams = cls + n;
        let cat = beams + n;
        let valid = cat + n;
        let dynamic = valid + n.div_ceil(8);
        assert_eq!(dynamic + n.div_ceil(8), body.len());
        for i in (0..n).step_by(97) {
            let x = f32::from_le_bytes(body[pts + 12 * i..pts + 12 * i + 4].try_into().unwrap());
            assert_eq!(x.to_bits(), f.points[i][0].to_bits());
            let fz = f32::from_le_bytes(body[flw + 12 * i + 8..flw + 12 * i + 12].try_into().unwrap());
            assert_eq!(fz.to_bits(), f.flow[i][2].to_bits());
            assert_eq!(u32_at(body, tags + 4 * i), f.tags[i]);
            assert_eq!(body[cls + i], f.classes[i]);
            assert_eq!(body[beams + i], f.beam_ids[i]);
            assert_eq!(body[cat + i], f.category[i]);
            assert_eq!(body[valid + i / 8] >> (i % 8) & 1 == 1, f.valid[i]);
            assert_eq!(body[dynamic + i / 8] >> (i % 8) & 1 == 1, f.dynamic[i]);
        }
        let q: Vec<f64> =
            (0..4).map(|j| f64::from_le_bytes(body[12 + 8 * j..20 + 8 * j].try_into().unwrap())).collect();
        assert_eq!(q, f.ego_pose.q);
    }
}

#[test]
fn writing_twice_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let (meta, frames) = sample();
    let (a, b) = (dir.path().join("a.synf"), dir.path().join("b.synf"));
    dataset::write_sequence(&meta, &frames, &a).unwrap();
    let (meta2, frames2) = sample();
    dataset::write_sequence(&meta2, &frames2, &b).unwrap();
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn corruption_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _, _) = written(dir.path());
    let good = std::fs::read(&path).unwrap();
    let l = layout(&good);
    let flip = |at: usize| {
        let mut b = good.clone();
        b[at] ^= 0x5a;
        b
    };

    assert!(matches!(open_bytes(dir.path(), &flip(1)), Err(DatasetError::BadMagic(_))));
    assert!(matches!(open_bytes(dir.path(), &flip(4)), Err(DatasetError::UnsupportedSchema(_))));
    assert!(matches!(open_bytes(dir.path(), &flip(l.meta.start + 40)), Err(DatasetError::HeaderChecksum)));
    assert!(matches!(open_bytes(dir.path(), &flip(l.table.start + 3)), Err(DatasetError::HeaderChecksum)));
    assert!(matches!(open_bytes(dir.path(), &flip(l.table.end + 1)), Err(DatasetError::HeaderChecksum)));

    let (off2, len2) = l.frames[2];
    let r = open_bytes(dir.path(), &flip(off2 + len2 / 2)).unwrap();
    assert!(r.frame(0).is_ok() && r.frame(1).is_ok() && r.frame(3).is_ok());
    assert!(matches!(r.frame(2), Err(DatasetError::FrameChecksum(2))));

    assert!(matches!(open_bytes(dir.path(), &good[..2]), Err(DatasetError::Truncated("header"))));
    assert!(matches!(open_bytes(dir.path(), &good[..10]), Err(DatasetError::Truncated("header"))));
    assert!(matches!(open_bytes(dir.path(), &good[..l.meta.end - 5]), Err(DatasetError::Truncated("metadata"))));
    assert!(matches!(open_bytes(dir.path(), &good[..l.table.start + 8]), Err(DatasetError::Truncated(_))));
    assert!(matches!(open_bytes(dir.path(), &good[..off2 + 10]), Err(DatasetError::Truncated("frame data"))));
    assert!(matches!(open_bytes(dir.path(), &[]), Err(DatasetError::Truncated("header"))));

    // Every single-byte change is caught before a record is handed out.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..300 {
        let at = rng.gen_range(0..good.len());
        let caught = match open_bytes(dir.path(), &flip(at)) {
            Err(_) => true,
            Ok(r) => read_all(&r).is_err(),
        };
        assert!(caught, "flip at {at} went unnoticed");
    }
}

#[test]
fn inconsistent_records_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (meta, mut frames) = sample();
    let mut f = frames[0].clone();
    f.tags.pop();
    assert!(matches!(dataset::encode_frame(&f), Err(DatasetError::ArrayLength { field: "tags", .. })));
    let mut f = frames[0].clone();
    f.category[0] = 9;
    assert!(matches!(dataset::encode_frame(&f), Err(DatasetError::InvalidEnum { field: "category", value: 9 })));

    // A body whose checksum is valid but whose length fields disagree.
    let mut body = dataset::encode_frame(&frames[1]).unwrap();
    body.truncate(body.len() - 4);
    body.push(0);
    let crc = crc32c::crc32c(&body);
    body.extend_from_slice(&crc.to_le_bytes());
    assert!(matches!(dataset::decode_frame(&body, 1), Err(DatasetError::ArrayLength { .. })));

    let p = dir.path().join("short.synf");
    assert!(matches!(
        dataset::write_sequence(&meta, &frames[..3], &p),
        Err(DatasetError::ArrayLength { field: "frames", expected: 4, got: 3 })
    ));

    frames[1].frame_index = 7;
    dataset::write_sequence(&meta, &frames, &p).unwrap();
    let r = SequenceReader::open(&p).unwrap();
    assert!(matches!(r.frame(1), Err(DatasetError::FrameIndexMismatch { slot: 1, stored: 7 })));
}

#[test]
fn prediction_files() {
    let dir = tempfile::tempdir().unwrap();
    let flow: Vec<[f32; 3]> = (0..50).map(|i| [i as f32, -0.5, 1e-3 * i as f32]).collect();
    let p = dataset::prediction_path(dir.path(), "00_grid_32b_0000", 12);
    assert!(p.ends_with("00_grid_32b_0000/frame_000012.synp"));
    std::fs::create_dir_all(p.parent().unwrap()).unwrap();
    dataset::write_prediction(&p, 12, &flow).unwrap();
    assert_eq!(dataset::read_prediction(&p).unwrap(), (12, flow.clone()));

    let good = dataset::encode_prediction(12, &flow);
    assert_eq!(good.len(), 16 + 12 * 50);
    assert_eq!(&good[..4], b"SYNP");
    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(dataset::decode_prediction(&bad), Err(DatasetError::BadMagic(_))));
    let mut bad = good.clone();
    bad[100] ^= 1;
    assert!(matches!(dataset::decode_prediction(&bad), Err(DatasetError::FrameChecksum(12))));
    assert!(matches!(dataset::decode_prediction(&good[..good.len() - 1]), Err(DatasetError::Truncated(_))));
    assert!(matches!(dataset::decode_prediction(&good[..8]), Err(DatasetError::Truncated(_))));
}

fn record_strategy() -> impl Strategy<Value = FrameRecord> {
    (0usize..40).prop_flat_map(|n| {
        (
            any::<u32>(),
            prop::array::uniform4(-1.0f64..1.0),
            prop::collection::vec(prop::array::uniform3(any::<f32>().prop_filter("finite", |x| x.is_finite())), n * 2),
            prop::collection::vec(any::<u32>(), n),
            prop::collection::vec((0u8..=9, any::<u8>(), 0u8..=4, any::<bool>(), any::<bool>()), n),
        )
            .prop_map(|(idx, q, pf, tags, rest)| {
                let n = tags.len();
                FrameRecord {
                    frame_index: idx,
                    timestamp: idx as f64 * 0.1,
                    ego_pose: StoredPose { q, t: [q[1] * 9.0, -3.0, 1.15] },
                    points: pf[..n].to_vec(),
                    flow: pf[n..].to_vec(),
                    tags,
                    classes: rest.iter().map(|r| r.0).collect(),
                    beam_ids: rest.iter().map(|r| r.1).collect(),
                    category: rest.iter().map(|r| r.2).collect(),
                    valid: rest.iter().map(|r| r.3).collect(),
                    dynamic: rest.iter().map(|r| r.4).collect(),
                }
            })
    })
}

proptest! {
    #[test]
    fn frame_codec_round_trips(f in record_strategy()) {
        let b = dataset::encode_frame(&f).unwrap();
        prop_assert_eq!(dataset::decode_frame(&b, 0).unwrap(), f);
    }
}

fn fake_pool(meta: &SequenceMeta) -> Vec<(SequenceMeta, PathBuf)> {
    let mut out = Vec::new();
    for (k, a) in [
        Archetype::Grid,
        Archetype::Grid,
        Archetype::Grid,
        Archetype::Roundabout,
        Archetype::Roundabout,
        Archetype::Roundabout,
    ]
    .into_iter()
    .enumerate()
    {
        let mut m = meta.clone();
        m.town.archetype = a;
        m.seed = k as u64;
        out.push((m, PathBuf::from(format!("seq{k}.synf"))));
    }
    out
}

fn cell(archetype: Archetype, count: usize) -> SplitCell {
    SplitCell { archetype, count, channels: None }
}

#[test]
fn splits_nest_and_fail_loudly() {
    let (meta, _) = sample();
    let pool = fake_pool(&meta);
    let plan = SplitPlan {
        splits: vec![
            SplitDef { name: "A".into(), include: vec![], cells: vec![cell(Archetype::Grid, 2)] },
            SplitDef { name: "B".into(), include: vec!["A".into()], cells: vec![cell(Archetype::Roundabout, 2)] },
        ],
    };
    let s = dataset::build_splits(&pool, &plan).unwrap();
    assert_eq!(s["A"].len(), 2);
    assert_eq!(s["B"].len(), 4);
    assert!(s["A"].iter().all(|p| s["B"].contains(p)));

    let mut reversed = pool.clone();
    reversed.reverse();
    assert_eq!(dataset::build_splits(&reversed, &plan).unwrap(), s);

    let greedy = SplitPlan {
        splits: vec![SplitDef { name: "C".into(), include: vec![], cells: vec![cell(Archetype::Roundabout, 5)] }],
    };
    let err = dataset::build_splits(&pool, &greedy).unwrap_err();
    assert_eq!(
        err,
        SplitError::InsufficientSequences { split: "C".into(), cell: "roundabout".into(), needed: 5, available: 3 }
    );
    assert!(err.to_string().contains("roundabout"));

    let forward = SplitPlan { splits: vec![SplitDef { name: "D".into(), include: vec!["E".into()], cells: vec![] }] };
    assert!(matches!(dataset::build_splits(&pool, &forward), Err(SplitError::UnknownInclude { .. })));
}
