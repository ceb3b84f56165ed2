//! Flow evaluation: history alignment, reference predictors and metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{to_vec3, FrameRecord};
use crate::flow::FlowLabels;
use crate::geom::Vec3;
use crate::traffic::Category;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("prediction has {got} vectors for {expected} points")]
    LengthMismatch { expected: usize, got: usize },
    #[error("nearest-neighbour target cloud is empty")]
    EmptyTarget,
    #[error("history of {h} frames before index {target} is out of range for {n} frames")]
    OutOfRange { target: usize, h: usize, n: usize },
    #[error("invalid bucket spec: {0}")]
    InvalidBuckets(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub frame_index: u32,
    pub flow: Vec<Vec3>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketSpec {
    pub bucket_width: f64,
    pub max_speed: f64,
    pub min_dynamic_speed: f64,
}

impl Default for BucketSpec {
    fn default() -> Self {
        Self { bucket_width: 0.4, max_speed: 20.0, min_dynamic_speed: 0.5 }
    }
}

impl BucketSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        let w = self.bucket_width;
        if !(w > 0.0 && w.is_finite()) {
            return Err(EvalError::InvalidBuckets(format!("width {w} must be positive")));
        }
        let k = self.max_speed / w;
        if !(self.max_speed > 0.0) || (k - k.round()).abs() > 1e-9 {
            return Err(EvalError::InvalidBuckets(format!("max speed {} is not a multiple of {w}", self.max_speed)));
        }
        if !(self.min_dynamic_speed >= 0.0) {
            return Err(EvalError::InvalidBuckets(format!("min dynamic speed {}", self.min_dynamic_speed)));
        }
        Ok(())
    }

    /// Regular buckets plus one overflow bucket for speeds ≥ `max_speed`.
    pub fn n_buckets(&self) -> usize {
        (self.max_speed / self.bucket_width).round() as usize + 1
    }

    pub fn bucket_of(&self, speed: f64) -> usize {
        let last = self.n_buckets() - 1;
        ((speed / self.bucket_width).floor() as usize).min(last)
    }

    /// Lower edge of bucket `k` in m/s.
    pub fn lower_edge(&self, k: usize) -> f64 {
        k as f64 * self.bucket_width
    }

    /// Parses `w,max,min`.
    pub fn parse(s: &str) -> Result<Self, EvalError> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| EvalError::InvalidBuckets(format!("{s:?}: {e}")))?;
        let [w, max, min] = parts[..] else {
            return Err(EvalError::InvalidBuckets(format!("{s:?}: expected width,max,min")));
        };
        let spec = Self { bucket_width: w, max_speed: max, min_dynamic_speed: min };
        spec.validate()?;
        Ok(spec)
    }
}

/// Clouds for frames `target - h ..= target`, oldest first, each expressed
/// in the sensor frame of `target`.
pub fn align_history(frames: &[FrameRecord], h: usize, target: usize) -> Result<Vec<Vec<Vec3>>, EvalError> {
    if target >= frames.len() || h > target {
        return Err(EvalError::OutOfRange { target, h, n: frames.len() });
    }
    let to_target = frames[target].ego_pose.to_pose().inverse();
    Ok((target - h..=target)
        .map(|t| {
            let pts = frames[t].points_f64();
            if frames[t].ego_pose == frames[target].ego_pose {
                return pts;
            }
            let m = to_target.compose(&frames[t].ego_pose.to_pose());
            pts.iter().map(|p| m.transform_point(p)).collect()
        })
        .collect())
}

pub fn ego_motion_flow(frame: &FrameRecord) -> Prediction {
    Prediction { frame_index: frame.frame_index, flow: vec![Vec3::zeros(); frame.len()] }
}

/// Exact nearest-neighbour index over a static point set. Ties resolve to the
/// smallest index.
pub struct KdTree<'a> {
    points: &'a [Vec3],
    order: Vec<usize>,
}

fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    (a - b).norm_squared()
}

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [Vec3]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        Self::build(points, &mut order, 0);
        Self { points, order }
    }

    fn build(points: &[Vec3], idx: &mut [usize], depth: usize) {
        if idx.len() <= 1 {
            return;
        }
        let axis = depth % 3;
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b)));
        let (lo, hi) = idx.split_at_mut(mid);
        Self::build(points, lo, depth + 1);
        Self::build(points, &mut hi[1..], depth + 1);
    }

    pub fn nearest(&self, q: &Vec3) -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        self.search(&self.order, 0, q, &mut best);
        best.map(|b| b.1)
    }

    fn search(&self, idx: &[usize], depth: usize, q: &Vec3, best: &mut Option<(f64, usize)>) {
        if idx.is_empty() {
            return;
        }
        let mid = idx.len() / 2;
        let i = idx[mid];
        let d = dist2(&self.points[i], q);
        let better = match *best {
            None => true,
            Some((bd, bi)) => d < bd || (d == bd && i < bi),
        };
        if better {
            *best = Some((d, i));
        }
        let axis = depth % 3;
        let diff = q[axis] - self.points[i][axis];
        let (near, far) = if diff < 0.0 { (&idx[..mid], &idx[mid + 1..]) } else { (&idx[mid + 1..], &idx[..mid]) };
        self.search(near, depth + 1, q, best);
        // Equal distance still matters for the index tie-break.
        if best.is_none_or(|(bd, _)| diff * diff <= bd) {
            self.search(far, depth + 1, q, best);
        }
    }
}

/// Flow from each source point to its nearest target point.
pub fn nn_flow(source: &[Vec3], target: &[Vec3]) -> Result<Vec<Vec3>, EvalError> {
    if target.is_empty() {
        return Err(EvalError::EmptyTarget);
    }
    let tree = KdTree::new(target);
    Ok(source.iter().map(|s| target[tree.nearest(s).expect("non-empty")] - s).collect())
}

/// Correctly rounded floating-point sum, independent of insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExactSum {
    partials: Vec<f64>,
}

impl ExactSum {
    pub fn add(&mut self, mut x: f64) {
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        self.partials.push(x);
    }

    pub fn merge(&mut self, other: &ExactSum) {
        for &p in &other.partials {
            self.add(p);
        }
    }

    pub fn value(&self) -> f64 {
        let p = &self.partials;
        let Some(&last) = p.last() else { return 0.0 };
        let mut n = p.len() - 1;
        let mut hi = last;
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = p[n];
            hi = x + y;
            lo = y - (hi - x);
            if lo != 0.0 {
                break;
            }
        }
        // Half-way case: nudge according to the sign of the remaining partials.
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
        hi
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mean {
    pub sum: ExactSum,
    pub count: u64,
}

impl Mean {
    fn add(&mut self, v: f64) {
        self.sum.add(v);
        self.count += 1;
    }

    fn merge(&mut self, o: &Mean) {
        self.sum.merge(&o.sum);
        self.count += o.count;
    }

    /// Zero for an empty set.
    pub fn value(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum.value() / self.count as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThreewayEpe {
    pub mean_cm: f64,
    pub fd_cm: f64,
    pub fs_cm: f64,
    pub bs_cm: f64,
    /// Scored points per subset (FD, FS, BS); zero marks an empty subset.
    pub counts: [u64; 3],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ThreewayStats {
    pub subsets: [Mean; 3],
}

fn check_len(pred: &[Vec3], labels: &FlowLabels) -> Result<(), EvalError> {
    if pred.len() != labels.len() {
        return Err(EvalError::LengthMismatch { expected: labels.len(), got: pred.len() });
    }
    Ok(())
}

impl ThreewayStats {
    pub fn add(&mut self, pred: &[Vec3], labels: &FlowLabels) -> Result<(), EvalError> {
        check_len(pred, labels)?;
        for i in 0..pred.len() {
            if !labels.valid[i] {
                continue;
            }
            let e = (pred[i] - labels.flow[i]).norm();
            let fg = labels.category[i] != Category::Background;
            let subset = match (fg, labels.dynamic[i]) {
                (true, true) => 0,
                (true, false) => 1,
                (false, false) => 2,
                (false, true) => continue,
            };
            self.subsets[subset].add(e);
        }
        Ok(())
    }

    pub fn merge(&mut self, o: &ThreewayStats) {
        for (a, b) in self.subsets.iter_mut().zip(&o.subsets) {
            a.merge(b);
        }
    }

    pub fn finish(&self) -> ThreewayEpe {
        let [fd, fs, bs] = [0, 1, 2].map(|k| self.subsets[k].value() * 100.0);
        ThreewayEpe {
            mean_cm: (fd + fs + bs) / 3.0,
            fd_cm: fd,
            fs_cm: fs,
            bs_cm: bs,
            counts: [0, 1, 2].map(|k| self.subsets[k].count),
        }
    }
}

pub fn threeway_epe(pred: &[Vec3], labels: &FlowLabels) -> Result<ThreewayEpe, EvalError> {
    let mut s = ThreewayStats::default();
    s.add(pred, labels)?;
    Ok(s.finish())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BucketCell {
    pub err: ExactSum,
    pub gt: ExactSum,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketStats {
    pub spec: BucketSpec,
    /// Indexed by agent category (CAR, OTHER, PED, VRU), then bucket.
    pub cells: [Vec<BucketCell>; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketScores {
    pub car: f64,
    pub other: f64,
    pub ped: f64,
    pub vru: f64,
    /// Mean over categories with at least one nonempty bucket.
    pub mean: f64,
    /// Point counts per category and bucket; the last bucket is open-ended.
    pub counts: [Vec<u64>; 4],
}

impl BucketScores {
    pub fn by_category(&self) -> [f64; 4] {
        [self.car, self.other, self.ped, self.vru]
    }

    pub fn nonempty(&self) -> [bool; 4] {
        self.counts.clone().map(|c| c.iter().any(|&n| n > 0))
    }
}

fn agent_slot(c: Category) -> Option<usize> {
    match c {
        Category::Background => None,
        Category::Car => Some(0),
        Category::Other => Some(1),
        Category::Ped => Some(2),
        Category::Vru => Some(3),
    }
}

impl BucketStats {
    pub fn new(spec: BucketSpec) -> Result<Self, EvalError> {
        spec.validate()?;
        let n = spec.n_buckets();
        Ok(Self { spec, cells: std::array::from_fn(|_| vec![BucketCell::default(); n]) })
    }

    pub fn add(&mut self, pred: &[Vec3], labels: &FlowLabels, dt: f64) -> Result<(), EvalError> {
        check_len(pred, labels)?;
        for i in 0..pred.len() {
            let Some(c) = agent_slot(labels.category[i]) else { continue };
            if !labels.valid[i] {
                continue;
            }
            let g = labels.flow[i].norm();
            let speed = g / dt;
            if speed < self.spec.min_dynamic_speed {
                continue;
            }
            let cell = &mut self.cells[c][self.spec.bucket_of(speed)];
            cell.err.add((pred[i] - labels.flow[i]).norm());
            cell.gt.add(g);
            cell.count += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, o: &BucketStats) {
        for (a, b) in self.cells.iter_mut().zip(&o.cells) {
            for (x, y) in a.iter_mut().zip(b) {
                x.err.merge(&y.err);
                x.gt.merge(&y.gt);
                x.count += y.count;
            }
        }
    }

    pub fn finish(&self) -> BucketScores {
        let mut scores = [0.0; 4];
        let mut used = Vec::new();
        for (c, buckets) in self.cells.iter().enumerate() {
            let ratios: Vec<f64> = buckets
                .iter()
                .filter(|b| b.count > 0)
                // mean(e) / mean(|gt|) over the same points reduces to the ratio of sums.
                .map(|b| b.err.value() / b.gt.value())
                .collect();
            if !ratios.is_empty() {
                scores[c] = ratios.iter().sum::<f64>() / ratios.len() as f64;
                used.push(scores[c]);
            }
        }
        let mean = if used.is_empty() { 0.0 } else { used.iter().sum::<f64>() / used.len() as f64 };
        BucketScores {
            car: scores[0],
            other: scores[1],
            ped: scores[2],
            vru: scores[3],
            mean,
            counts: self.cells.clone().map(|b| b.iter().map(|x| x.count).collect()),
        }
    }
}

pub fn bucket_normalized_epe(
    pred: &[Vec3],
    labels: &FlowLabels,
    spec: BucketSpec,
    dt: f64,
) -> Result<BucketScores, EvalError> {
    let mut s = BucketStats::new(spec)?;
    s.add(pred, labels, dt)?;
    Ok(s.finish())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub threeway: ThreewayEpe,
    pub bucketed: BucketScores,
}

/// Sufficient statistics for both metric families over any set of frames.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricAccumulator {
    pub threeway: ThreewayStats,
    pub buckets: BucketStats,
    pub dt: f64,
}

impl MetricAccumulator {
    pub fn new(spec: BucketSpec, dt: f64) -> Result<Self, EvalError> {
        Ok(Self { threeway: ThreewayStats::default(), buckets: BucketStats::new(spec)?, dt })
    }

    pub fn add_frame(&mut self, pred: &[Vec3], labels: &FlowLabels) -> Result<(), EvalError> {
        self.threeway.add(pred, labels)?;
        self.buckets.add(pred, labels, self.dt)
    }

    pub fn merge(&mut self, o: &MetricAccumulator) {
        self.threeway.merge(&o.threeway);
        self.buckets.merge(&o.buckets);
    }

    pub fn report(&self) -> MetricReport {
        MetricReport { threeway: self.threeway.finish(), bucketed: self.buckets.finish() }
    }
}

/// Decodes the label arrays of a stored frame.
pub fn labels_from_record(f: &FrameRecord) -> FlowLabels {
    FlowLabels {
        flow: f.flow.iter().map(to_vec3).collect(),
        valid: f.valid.clone(),
        dynamic: f.dynamic.clone(),
        category: f.category.iter().map(|&c| Category::from_u8(c).unwrap_or(Category::Background)).collect(),
    }
}

const TABLE_HEADER: &str =
    "name                     | dyn mean    CAR  OTHER    PED    VRU | EPE mean     FD     FS     BS";

pub fn report_table(results: &[(String, MetricReport)]) -> String {
    let mut out = String::from(TABLE_HEADER);
    out.push('\n');
    out.push_str(&"-".repeat(TABLE_HEADER.len()));
    out.push('\n');
    for (name, r) in results {
        let b = &r.bucketed;
        let t = &r.threeway;
        out.push_str(&format!(
            "{name:<24} | {:>8.3} {:>6.3} {:>6.3} {:>6.3} {:>6.3} | {:>8.2} {:>6.2} {:>6.2} {:>6.2}\n",
            b.mean, b.car, b.other, b.ped, b.vru, t.mean_cm, t.fd_cm, t.fs_cm, t.bs_cm
        ));
    }
    out
}

pub const CSV_HEADER: &str = "name,dyn_mean,dyn_car,dyn_other,dyn_ped,dyn_vru,epe_mean_cm,fd_cm,fs_cm,bs_cm";

pub fn report_csv(results: &[(String, MetricReport)]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (name, r) in results {
        let b = &r.bucketed;
        let t = &r.threeway;
        let fields = [b.mean, b.car, b.other, b.ped, b.vru, t.mean_cm, t.fd_cm, t.fs_cm, t.bs_cm];
        out.push_str(name);
        for v in fields {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(flow: Vec<Vec3>, cats: Vec<Category>, dynamic: Vec<bool>) -> FlowLabels {
        let n = flow.len();
        FlowLabels { flow, valid: vec![true; n], dynamic, category: cats }
    }

    #[test]
    fn exact_sum_is_order_independent() {
        let xs = [1e16, 1.0, -1e16, 3.0, 1e-3, -2.5e-7, 0.1, 0.2, 0.3];
        let mut a = ExactSum::default();
        xs.iter().for_each(|&x| a.add(x));
        let mut b = ExactSum::default();
        xs.iter().rev().for_each(|&x| b.add(x));
        assert_eq!(a.value(), b.value());
        let mut d = ExactSum::default();
        [1e16, 1.0, -1e16].iter().for_each(|&x| d.add(x));
        assert_eq!(d.value(), 1.0);
        let mut c = ExactSum::default();
        [0.1; 10].iter().for_each(|&x| c.add(x));
        assert_eq!(c.value(), 1.0);
    }

    #[test]
    fn zero_prediction_on_half_metre_dynamics() {
        use Category::*;
        let l = labels(
            vec![Vec3::new(0.5, 0.0, 0.0), Vec3::new(0.0, 0.5, 0.0), Vec3::zeros(), Vec3::zeros()],
            vec![Car, Ped, Car, Background],
            vec![true, true, false, false],
        );
        let r = threeway_epe(&vec![Vec3::zeros(); 4], &l).unwrap();
        assert!((r.fd_cm - 50.0).abs() < 1e-12);
        assert_eq!((r.fs_cm, r.bs_cm), (0.0, 0.0));
        assert!((r.mean_cm - 50.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn one_bucket_example() {
        let l = labels(vec![Vec3::new(0.6, 0.0, 0.0); 2], vec![Category::Car; 2], vec![true; 2]);
        let pred = [Vec3::new(0.3, 0.0, 0.0), Vec3::new(0.6, 0.0, 0.0)];
        let s = bucket_normalized_epe(&pred, &l, BucketSpec::default(), 0.1).unwrap();
        assert!((s.car - 0.25).abs() < 1e-12);
        assert_eq!(s.mean, s.car);
        assert_eq!(s.nonempty(), [true, false, false, false]);
        assert_eq!(s.counts[0].iter().sum::<u64>(), 2);
    }

    #[test]
    fn bucket_spec_rules() {
        let s = BucketSpec::default();
        assert_eq!(s.n_buckets(), 51);
        assert_eq!(s.bucket_of(0.5), 1);
        assert_eq!(s.bucket_of(19.99), 49);
        assert_eq!(s.bucket_of(20.0), 50);
        assert_eq!(s.bucket_of(45.0), 50);
        assert_eq!(BucketSpec::parse("0.5,10,1").unwrap().n_buckets(), 21);
        assert!(BucketSpec::parse("0.3,1,0").is_err());
        assert!(BucketSpec::parse("0,10,0").is_err());
        assert!(BucketSpec::parse("1,2").is_err());
    }

    #[test]
    fn nn_small_examples() {
        let f = nn_flow(&[Vec3::zeros()], &[Vec3::new(1.0, 0.0, 0.0), Vec3::new(5.0, 0.0, 0.0)]).unwrap();
        assert_eq!(f, vec![Vec3::new(1.0, 0.0, 0.0)]);
        assert_eq!(nn_flow(&[Vec3::zeros()], &[]), Err(EvalError::EmptyTarget));
        let dup = [Vec3::new(1.0, 0.0, 0.0), Vec3::new(-1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)];
        let tree = KdTree::new(&dup);
        assert_eq!(tree.nearest(&Vec3::zeros()), Some(0));
    }

    #[test]
    fn tables() {
        assert_eq!(report_table(&[]).lines().count(), 2);
        assert_eq!(report_csv(&[]), format!("{CSV_HEADER}\n"));
    }
}
