//! Planar polyline helpers shared by the town generator and the traffic model.
//! Points are 3-vectors; all arc lengths are measured in 3-D.

use crate::geom::Vec3;

pub fn length(points: &[Vec3]) -> f64 {
    points.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

/// Position and unit tangent at arc length `s`, clamped to the ends.
pub fn sample(points: &[Vec3], s: f64) -> (Vec3, Vec3) {
    debug_assert!(points.len() >= 2);
    let mut remaining = s.max(0.0);
    for w in points.windows(2) {
        let d = w[1] - w[0];
        let len = d.norm();
        if len <= 0.0 {
            continue;
        }
        if remaining <= len {
            return (w[0] + d * (remaining / len), d / len);
        }
        remaining -= len;
    }
    let n = points.len();
    let d = points[n - 1] - points[n - 2];
    (points[n - 1], d / d.norm())
}

/// Same as [`sample`] but wraps `s` around a closed loop whose last point
/// repeats the first.
pub fn sample_closed(points: &[Vec3], s: f64) -> (Vec3, Vec3) {
    let total = length(points);
    sample(points, s.rem_euclid(total))
}

/// Uniform resampling at roughly `spacing` metres; endpoints are kept.
pub fn resample(points: &[Vec3], spacing: f64) -> Vec<Vec3> {
    let total = length(points);
    let n = ((total / spacing).ceil() as usize).max(1);
    (0..=n).map(|i| sample(points, total * i as f64 / n as f64).0).collect()
}

/// Right-hand normal in the ground plane for a unit tangent.
pub fn right_of(tangent: &Vec3) -> Vec3 {
    let r = Vec3::new(tangent.y, -tangent.x, 0.0);
    let n = r.norm();
    if n > 0.0 {
        r / n
    } else {
        r
    }
}

pub fn left_of(tangent: &Vec3) -> Vec3 {
    -right_of(tangent)
}

/// Per-vertex tangents from central differences. For `closed` loops the last
/// point is assumed to duplicate the first.
pub fn tangents(points: &[Vec3], closed: bool) -> Vec<Vec3> {
    let n = points.len();
    (0..n)
        .map(|i| {
            let (a, b) = if closed {
                let m = n - 1;
                let prev = if i == 0 { m - 1 } else { i - 1 };
                let next = if i + 1 >= n { 1 } else { i + 1 };
                (points[prev], points[next])
            } else {
                (points[i.saturating_sub(1)], points[(i + 1).min(n - 1)])
            };
            let d = b - a;
            d / d.norm()
        })
        .collect()
}

/// Offsets every vertex sideways by `offset` metres (positive = right).
pub fn offset(points: &[Vec3], offset: f64, closed: bool) -> Vec<Vec3> {
    tangents(points, closed).iter().zip(points).map(|(t, p)| p + right_of(t) * offset).collect()
}

/// Interpolated point at fractional vertex index `param`.
pub fn at_param(points: &[Vec3], param: f64) -> Vec3 {
    let i = (param.floor() as usize).min(points.len() - 2);
    let t = param - i as f64;
    points[i] + (points[i + 1] - points[i]) * t
}

/// Cuts a polyline at fractional vertex indices (strictly increasing, inside
/// the open range). Vertices closer than `min_gap` to a cut are dropped so that
/// consecutive points stay at least `min_gap` apart.
pub fn split_at_params(points: &[Vec3], params: &[f64], min_gap: f64) -> Vec<Vec<Vec3>> {
    let last = (points.len() - 1) as f64;
    let mut bounds = vec![0.0];
    bounds.extend_from_slice(params);
    bounds.push(last);
    bounds
        .windows(2)
        .map(|w| {
            let start = at_param(points, w[0]);
            let end = at_param(points, w[1]);
            let mut piece = vec![start];
            let first_inner = w[0].floor() as usize + 1;
            let last_inner = w[1].ceil() as usize;
            for p in points.iter().take(last_inner).skip(first_inner) {
                if (p - piece[piece.len() - 1]).norm() >= min_gap && (p - end).norm() >= min_gap {
                    piece.push(*p);
                }
            }
            piece.push(end);
            piece
        })
        .collect()
}

/// Cubic Hermite connector between two poses in the plane, sampled densely.
pub fn hermite(p0: Vec3, t0: Vec3, p1: Vec3, t1: Vec3, samples: usize) -> Vec<Vec3> {
    let chord = (p1 - p0).norm();
    let m0 = t0 * chord;
    let m1 = t1 * chord;
    (0..=samples)
        .map(|i| {
            let s = i as f64 / samples as f64;
            let s2 = s * s;
            let s3 = s2 * s;
            p0 * (2.0 * s3 - 3.0 * s2 + 1.0) + m0 * (s3 - 2.0 * s2 + s) + p1 * (-2.0 * s3 + 3.0 * s2) + m1 * (s3 - s2)
        })
        .collect()
}

/// Signed area in the xy-plane (positive for counter-clockwise loops).
pub fn signed_area(loop_points: &[Vec3]) -> f64 {
    loop_points.windows(2).map(|w| w[0].x * w[1].y - w[1].x * w[0].y).sum::<f64>() * 0.5
}

/// Even-odd point-in-polygon test in the xy-plane.
pub fn contains_xy(loop_points: &[Vec3], p: &Vec3) -> bool {
    let mut inside = false;
    for w in loop_points.windows(2) {
        let (a, b) = (w[0], w[1]);
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
            if p.x < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Distance in the xy-plane from `p` to the nearest edge of a polyline.
pub fn distance_xy(points: &[Vec3], p: &Vec3) -> f64 {
    points
        .windows(2)
        .map(|w| {
            let a = w[0].xy();
            let b = w[1].xy();
            let q = p.xy();
            let ab = b - a;
            let len2 = ab.norm_squared();
            let t = if len2 > 0.0 { ((q - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
            (a + ab * t - q).norm()
        })
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line() -> Vec<Vec3> {
        vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(10.0, 0.0, 0.0), Vec3::new(10.0, 10.0, 0.0)]
    }

    #[test]
    fn sample_walks_arc_length() {
        let (p, t) = sample(&line(), 15.0);
        assert!((p - Vec3::new(10.0, 5.0, 0.0)).norm() < 1e-12);
        assert!((t - Vec3::y()).norm() < 1e-12);
        let (p, _) = sample(&line(), 99.0);
        assert_eq!(p, Vec3::new(10.0, 10.0, 0.0));
    }

    #[test]
    fn split_preserves_length_and_gap() {
        let pts = resample(&line(), 1.0);
        let pieces = split_at_params(&pts, &[5.2, 12.7], 0.5);
        assert_eq!(pieces.len(), 3);
        let total: f64 = pieces.iter().map(|p| length(p)).sum();
        assert!((total - 20.0).abs() < 1e-9);
        for piece in &pieces {
            assert!(piece.windows(2).all(|w| (w[1] - w[0]).norm() >= 0.5 - 1e-12));
        }
    }

    #[test]
    fn polygon_helpers() {
        let sq = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(4.0, 0.0, 0.0),
            Vec3::new(4.0, 4.0, 0.0),
            Vec3::new(0.0, 4.0, 0.0),
            Vec3::new(0.0, 0.0, 0.0),
        ];
        assert!((signed_area(&sq) - 16.0).abs() < 1e-12);
        assert!(contains_xy(&sq, &Vec3::new(1.0, 1.0, 0.0)));
        assert!(!contains_xy(&sq, &Vec3::new(5.0, 1.0, 0.0)));
        assert!((distance_xy(&sq, &Vec3::new(2.0, 1.0, 0.0)) - 1.0).abs() < 1e-12);
    }
}
