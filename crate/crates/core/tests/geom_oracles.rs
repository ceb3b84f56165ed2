use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synflow_core::geom::{ray_obb_intersect, OrientedBox, Pose, Ray, Vec3};

/// First surface crossing found by intersecting the ray with each of the six
/// face planes and keeping hits that land inside the face rectangle.
fn face_oracle(ray: &Ray, b: &OrientedBox) -> Option<f64> {
    let rt = b.rotation.transpose();
    let o = rt * (ray.origin - b.center);
    let d = rt * ray.direction;
    let h = b.half_extents;
    let inside = (0..3).all(|i| o[i].abs() <= h[i]);
    let mut hits = Vec::new();
    for axis in 0..3 {
        if d[axis] == 0.0 {
            continue;
        }
        for s in [-1.0, 1.0] {
            let t = (s * h[axis] - o[axis]) / d[axis];
            if t < 0.0 {
                continue;
            }
            let p = o + d * t;
            let on_face = (0..3).filter(|&k| k != axis).all(|k| p[k].abs() <= h[k] * (1.0 + 1e-12));
            if on_face {
                hits.push(t);
            }
        }
    }
    if inside {
        hits.into_iter().reduce(f64::max)
    } else {
        hits.into_iter().reduce(f64::min)
    }
}

fn random_rotation(rng: &mut impl Rng) -> Pose {
    let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
    Pose::from_quaternion(q[0], q[1], q[2], q[3], Vec3::zeros())
}

#[test]
fn slab_matches_face_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut hits = 0;
    for case in 0..10_000 {
        let center = Vec3::from_fn(|_, _| rng.gen_range(-10.0..10.0));
        let half = Vec3::from_fn(|_, _| rng.gen_range(0.1..5.0));
        let b = OrientedBox::new(center, half, random_rotation(&mut rng).rotation);
        let origin = Vec3::from_fn(|_, _| rng.gen_range(-20.0..20.0));
        // Half the rays aim at a point near the box so hits are common.
        let target = if case % 2 == 0 {
            center + b.rotation * Vec3::from_fn(|i, _| rng.gen_range(-1.2..1.2) * half[i])
        } else {
            origin + Vec3::from_fn(|_, _| rng.gen_range(-1.0..1.0))
        };
        let Some(ray) = Ray::new(origin, target - origin) else { continue };
        let got = ray_obb_intersect(&ray, &b);
        let want = face_oracle(&ray, &b);
        match (got, want) {
            (Some(a), Some(e)) => {
                hits += 1;
                assert!((a - e).abs() <= 1e-9 * (1.0 + e), "case {case}: {a} vs {e}");
            }
            (None, None) => {}
            _ => panic!("case {case}: slab {got:?}, faces {want:?}"),
        }
    }
    assert!(hits > 3000, "only {hits} hits");
}

#[test]
fn rotated_cube_corner_against_surface_sampling() {
    let yaw = Pose::from_yaw(std::f64::consts::FRAC_PI_4, Vec3::zeros());
    let b = OrientedBox::new(Vec3::new(5.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 1.0), yaw.rotation);
    let ray = Ray::new(Vec3::zeros(), Vec3::x()).unwrap();
    let t = ray_obb_intersect(&ray, &b).unwrap();
    assert!((t - (5.0 - 2f64.sqrt())).abs() < 1e-12);

    // Closest sample on the surface that lies within `tube` of the ray.
    let n = 400;
    let tube = 1e-3;
    let mut best = f64::INFINITY;
    for axis in 0..3 {
        for s in [-1.0, 1.0] {
            for i in 0..=n {
                for j in 0..=n {
                    let u = -1.0 + 2.0 * i as f64 / n as f64;
                    let v = -1.0 + 2.0 * j as f64 / n as f64;
                    let mut local = Vec3::zeros();
                    local[axis] = s;
                    local[(axis + 1) % 3] = u;
                    local[(axis + 2) % 3] = v;
                    let w = b.center + b.rotation * local;
                    if w.x >= 0.0 && (w.y * w.y + w.z * w.z).sqrt() < tube {
                        best = best.min(w.x);
                    }
                }
            }
        }
    }
    assert!((t - best).abs() < 1e-4, "slab {t}, sampled {best}");
}

#[test]
fn ray_from_inside_exits_through_one_face() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..1000 {
        let half = Vec3::from_fn(|_, _| rng.gen_range(0.5..3.0));
        let b = OrientedBox::new(Vec3::zeros(), half, random_rotation(&mut rng).rotation);
        let origin = b.rotation * Vec3::from_fn(|i, _| rng.gen_range(-0.9..0.9) * half[i]);
        let dir = Vec3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let Some(ray) = Ray::new(origin, dir) else { continue };
        let t = ray_obb_intersect(&ray, &b).unwrap();
        assert!(b.signed_distance(&ray.at(t)).abs() < 1e-9);
    }
}
