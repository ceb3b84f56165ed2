//! Rigid transforms, oriented boxes and ray casting primitives.
//!
//! Everything here is double precision. Rotations are kept as 3x3 matrices;
//! the serialized form is a unit quaternion `(w, x, y, z)` plus translation,
//! re-orthonormalized when read back.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub type Vec3 = Vector3<f64>;

/// Tolerance used for algebraic identities (group laws, orthonormality).
pub const ALGEBRAIC_EPS: f64 = 1e-9;

/// A rigid transform in SE(3): `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vec3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self { rotation: Matrix3::identity(), translation: Vec3::new(x, y, z) }
    }

    /// Rotation about +z by `yaw` radians, then translation.
    pub fn from_yaw(yaw: f64, translation: Vec3) -> Self {
        Self { rotation: rot_z(yaw), translation }
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_yaw(angle, Vec3::zeros())
    }

    /// Builds a pose from a quaternion `(w, x, y, z)`, normalizing it first so
    /// the stored rotation is orthonormal even for slightly perturbed input.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64, translation: Vec3) -> Self {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z));
        Self { rotation: *q.to_rotation_matrix().matrix(), translation }
    }

    /// Unit quaternion `(w, x, y, z)` with `w >= 0`.
    pub fn quaternion(&self) -> [f64; 4] {
        let rot = Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let (w, x, y, z) = (q.w, q.i, q.j, q.k);
        if w < 0.0 {
            [-w, -x, -y, -z]
        } else {
            [w, x, y, z]
        }
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Yaw angle of the body x-axis projected on the ground plane.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    /// Orthonormal with determinant +1, to [`ALGEBRAIC_EPS`].
    pub fn is_valid(&self) -> bool {
        let should_be_identity = self.rotation.transpose() * self.rotation;
        (should_be_identity - Matrix3::identity()).amax() <= ALGEBRAIC_EPS
            && (self.rotation.determinant() - 1.0).abs() <= ALGEBRAIC_EPS
            && self.translation.iter().all(|c| c.is_finite())
    }

    /// Largest absolute entry difference of rotation and translation.
    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        (self.rotation - other.rotation).amax().max((self.translation - other.translation).amax())
    }
}

pub fn rot_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    q: [f64; 4],
    t: [f64; 3],
}

impl Serialize for Pose {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        PoseRepr { q: self.quaternion(), t: [self.translation.x, self.translation.y, self.translation.z] }
            .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let r = PoseRepr::deserialize(deserializer)?;
        Ok(Pose::from_quaternion(r.q[0], r.q[1], r.q[2], r.q[3], Vec3::new(r.t[0], r.t[1], r.t[2])))
    }
}

/// Box with arbitrary orientation. `half_extents` are along the box's own axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub center: Vec3,
    pub half_extents: Vec3,
    pub rotation: Matrix3<f64>,
}

impl OrientedBox {
    pub fn new(center: Vec3, half_extents: Vec3, rotation: Matrix3<f64>) -> Self {
        debug_assert!(half_extents.iter().all(|h| *h > 0.0));
        Self { center, half_extents, rotation }
    }

    pub fn axis_aligned(center: Vec3, half_extents: Vec3) -> Self {
        Self::new(center, half_extents, Matrix3::identity())
    }

    /// Box whose body frame is `pose`.
    pub fn from_pose(pose: &Pose, half_extents: Vec3) -> Self {
        Self::new(pose.translation, half_extents, pose.rotation)
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.rotation, self.center)
    }

    pub fn to_local(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.center)
    }

    /// Inclusive containment with an absolute slack of `eps` metres per axis.
    pub fn contains(&self, p: &Vec3, eps: f64) -> bool {
        let q = self.to_local(p);
        (0..3).all(|i| q[i].abs() <= self.half_extents[i] + eps)
    }

    /// Exact signed distance: negative inside, zero on the surface.
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        let q = self.to_local(p).abs() - self.half_extents;
        let outside = q.map(|c| c.max(0.0)).norm();
        let inside = q.max().min(0.0);
        outside + inside
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let h = self.half_extents;
        let mut out = [Vec3::zeros(); 8];
        for (i, c) in out.iter_mut().enumerate() {
            let sx = if i & 1 == 0 { -1.0 } else { 1.0 };
            let sy = if i & 2 == 0 { -1.0 } else { 1.0 };
            let sz = if i & 4 == 0 { -1.0 } else { 1.0 };
            *c = self.center + self.rotation * Vec3::new(sx * h.x, sy * h.y, sz * h.z);
        }
        out
    }

    /// Radius of the bounding sphere.
    pub fn bounding_radius(&self) -> f64 {
        self.half_extents.norm()
    }

    /// Separating-axis overlap test. Touching boxes count as overlapping.
    pub fn intersects(&self, other: &OrientedBox) -> bool {
        let a_axes = [
            self.rotation.column(0).into_owned(),
            self.rotation.column(1).into_owned(),
            self.rotation.column(2).into_owned(),
        ];
        let b_axes = [
            other.rotation.column(0).into_owned(),
            other.rotation.column(1).into_owned(),
            other.rotation.column(2).into_owned(),
        ];
        let d = other.center - self.center;
        let separated_on = |axis: &Vec3| -> bool {
            let n = axis.norm();
            if n < 1e-12 {
                return false;
            }
            let axis = axis / n;
            let ra: f64 = (0..3).map(|i| self.half_extents[i] * a_axes[i].dot(&axis).abs()).sum();
            let rb: f64 = (0..3).map(|i| other.half_extents[i] * b_axes[i].dot(&axis).abs()).sum();
            d.dot(&axis).abs() > ra + rb
        };
        for axis in a_axes.iter().chain(b_axes.iter()) {
            if separated_on(axis) {
                return false;
            }
        }
        for a in &a_axes {
            for b in &b_axes {
                if separated_on(&a.cross(b)) {
                    return false;
                }
            }
        }
        true
    }

    /// Applies a rigid transform to the box.
    pub fn transformed(&self, pose: &Pose) -> OrientedBox {
        OrientedBox::new(pose.transform_point(&self.center), self.half_extents, pose.rotation * self.rotation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    /// Normalizes `direction`. Returns `None` for a zero or non-finite direction.
    pub fn new(origin: Vec3, direction: Vec3) -> Option<Self> {
        let n = direction.norm();
        if !(n.is_finite() && n > 0.0) {
            return None;
        }
        Some(Self { origin, direction: direction / n })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    pub fn transformed(&self, pose: &Pose) -> Ray {
        Ray { origin: pose.transform_point(&self.origin), direction: pose.transform_vector(&self.direction) }
    }
}

/// Slab test in the box frame. Returns the entry distance, or the exit distance
/// when the origin is inside the box; `None` on a miss or when the box is
/// entirely behind the origin.
pub fn ray_obb_intersect(ray: &Ray, b: &OrientedBox) -> Option<f64> {
    let rt = b.rotation.transpose();
    let o = rt * (ray.origin - b.center);
    let d = rt * ray.direction;
    ray_aabb_local(&o, &d, &b.half_extents)
}

/// Slab test against the origin-centred box `[-h, h]`.
#[inline]
pub fn ray_aabb_local(o: &Vec3, d: &Vec3, h: &Vec3) -> Option<f64> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for i in 0..3 {
        if d[i] == 0.0 {
            if o[i].abs() > h[i] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[i];
        let mut t0 = (-h[i] - o[i]) * inv;
        let mut t1 = (h[i] - o[i]) * inv;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_near = t_near.max(t0);
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }
    if t_far < 0.0 {
        None
    } else if t_near >= 0.0 {
        Some(t_near)
    } else {
        Some(t_far)
    }
}

/// Intersection with the horizontal plane `z = height`, for `t >= 0`.
pub fn ray_plane_z(ray: &Ray, height: f64) -> Option<f64> {
    let dz = ray.direction.z;
    if dz == 0.0 {
        return None;
    }
    let t = (height - ray.origin.z) / dz;
    (t >= 0.0).then_some(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, prop::array::uniform3(-50.0f64..50.0)).prop_filter_map(
            "degenerate quaternion",
            |(w, x, y, z, t)| {
                let n = (w * w + x * x + y * y + z * z).sqrt();
                (n > 0.1).then(|| Pose::from_quaternion(w, x, y, z, Vec3::from(t)))
            },
        )
    }

    #[test]
    fn compose_examples() {
        let t = Pose::from_yaw(0.7, Vec3::new(1.0, -2.0, 3.0));
        assert!(Pose::identity().compose(&t).max_abs_diff(&t) < 1e-12);
        assert!(t.compose(&t.inverse()).max_abs_diff(&Pose::identity()) < 1e-12);
        let c = Pose::from_translation(1.0, 0.0, 0.0).compose(&Pose::from_translation(0.0, 2.0, 0.0));
        assert!(c.max_abs_diff(&Pose::from_translation(1.0, 2.0, 0.0)) < 1e-15);
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(Pose::identity().inverse(), Pose::identity());
        let inv = Pose::from_translation(3.0, 0.0, 0.0).inverse();
        assert!(inv.max_abs_diff(&Pose::from_translation(-3.0, 0.0, 0.0)) < 1e-15);
        let inv = Pose::rot_z(FRAC_PI_2).inverse();
        assert!(inv.max_abs_diff(&Pose::rot_z(-FRAC_PI_2)) < 1e-15);
    }

    #[test]
    fn transform_point_examples() {
        let p = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(Pose::identity().transform_point(&p), p);
        let q = Pose::rot_z(FRAC_PI_2).transform_point(&Vec3::new(1.0, 0.0, 0.0));
        assert!((q - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
        let q = Pose::from_translation(0.0, 0.0, 5.0).transform_point(&Vec3::new(1.0, 1.0, 0.0));
        assert_eq!(q, Vec3::new(1.0, 1.0, 5.0));
    }

    #[test]
    fn quaternion_round_trip() {
        let p = Pose::from_quaternion(0.3, -0.5, 0.2, 0.9, Vec3::new(1.0, 2.0, 3.0));
        let q = p.quaternion();
        let back = Pose::from_quaternion(q[0], q[1], q[2], q[3], p.translation);
        assert!(back.max_abs_diff(&p) < 1e-12);
        let json = serde_json::to_string(&p).unwrap();
        let de: Pose = serde_json::from_str(&json).unwrap();
        assert!(de.max_abs_diff(&p) < 1e-12);
        assert!(de.is_valid());
    }

    #[test]
    fn slab_examples() {
        let ray = Ray::new(Vec3::zeros(), Vec3::x()).unwrap();
        let b = OrientedBox::axis_aligned(Vec3::new(5.0, 0.0, 0.0), Vec3::repeat(1.0));
        assert_eq!(ray_obb_intersect(&ray, &b), Some(4.0));
        let miss = OrientedBox::axis_aligned(Vec3::new(0.0, 10.0, 0.0), Vec3::repeat(1.0));
        assert_eq!(ray_obb_intersect(&ray, &miss), None);
        let rotated = OrientedBox::new(Vec3::new(5.0, 0.0, 0.0), Vec3::repeat(1.0), rot_z(FRAC_PI_4));
        let t = ray_obb_intersect(&ray, &rotated).unwrap();
        assert!((t - (5.0 - 2f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn ray_inside_box_reports_exit() {
        let b = OrientedBox::axis_aligned(Vec3::zeros(), Vec3::new(2.0, 1.0, 1.0));
        let ray = Ray::new(Vec3::zeros(), Vec3::x()).unwrap();
        assert_eq!(ray_obb_intersect(&ray, &b), Some(2.0));
        let behind = OrientedBox::axis_aligned(Vec3::new(-5.0, 0.0, 0.0), Vec3::repeat(1.0));
        assert_eq!(ray_obb_intersect(&ray, &behind), None);
    }

    #[test]
    fn ray_parallel_to_slab() {
        let b = OrientedBox::axis_aligned(Vec3::new(5.0, 0.0, 0.0), Vec3::repeat(1.0));
        let grazing = Ray::new(Vec3::new(0.0, 1.0, 0.0), Vec3::x()).unwrap();
        assert_eq!(ray_obb_intersect(&grazing, &b), Some(4.0));
        let outside = Ray::new(Vec3::new(0.0, 1.0001, 0.0), Vec3::x()).unwrap();
        assert_eq!(ray_obb_intersect(&outside, &b), None);
    }

    #[test]
    fn plane_hit() {
        let ray = Ray::new(Vec3::zeros(), Vec3::new(1.0, 0.0, -1.0)).unwrap();
        let t = ray_plane_z(&ray, -1.9).unwrap();
        assert!((t - 1.9 * 2f64.sqrt()).abs() < 1e-12);
        let up = Ray::new(Vec3::zeros(), Vec3::z()).unwrap();
        assert_eq!(ray_plane_z(&up, -1.0), None);
    }

    #[test]
    fn signed_distance_and_sat() {
        let b = OrientedBox::axis_aligned(Vec3::zeros(), Vec3::new(1.0, 2.0, 3.0));
        assert!((b.signed_distance(&Vec3::new(1.0, 0.0, 0.0))).abs() < 1e-15);
        assert!((b.signed_distance(&Vec3::new(0.0, 0.0, 0.0)) + 1.0).abs() < 1e-15);
        assert!((b.signed_distance(&Vec3::new(4.0, 6.0, 0.0)) - 5.0).abs() < 1e-12);
        let near = OrientedBox::new(Vec3::new(2.3, 0.0, 0.0), Vec3::repeat(1.0), rot_z(FRAC_PI_4));
        assert!(near.intersects(&b));
        let far = OrientedBox::new(Vec3::new(1.0 + 2f64.sqrt() + 0.01, 0.0, 0.0), Vec3::repeat(1.0), rot_z(FRAC_PI_4));
        assert!(!far.intersects(&b));
    }

    proptest! {
        #[test]
        fn group_laws(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            prop_assert!(left.max_abs_diff(&right) < 1e-9);
            prop_assert!(a.compose(&a.inverse()).max_abs_diff(&Pose::identity()) < 1e-9);
            prop_assert!(a.inverse().compose(&a).max_abs_diff(&Pose::identity()) < 1e-9);
            prop_assert!(a.compose(&Pose::identity()).max_abs_diff(&a) < 1e-12);
            prop_assert!(a.is_valid());
        }

        #[test]
        fn isometry(a in arb_pose(), p in prop::array::uniform3(-100.0f64..100.0), q in prop::array::uniform3(-100.0f64..100.0)) {
            let (p, q) = (Vec3::from(p), Vec3::from(q));
            let d0 = (p - q).norm();
            let d1 = (a.transform_point(&p) - a.transform_point(&q)).norm();
            prop_assert!((d0 - d1).abs() < 1e-9);
        }

        #[test]
        fn slab_rigid_invariance(
            a in arb_pose(),
            yaw in -3.2f64..3.2,
            center in prop::array::uniform3(-20.0f64..20.0),
            half in prop::array::uniform3(0.2f64..5.0),
            origin in prop::array::uniform3(-30.0f64..30.0),
            dir in prop::array::uniform3(-1.0f64..1.0),
        ) {
            let b = OrientedBox::new(Vec3::from(center), Vec3::from(half), rot_z(yaw));
            if let Some(ray) = Ray::new(Vec3::from(origin), Vec3::from(dir)) {
                let t0 = ray_obb_intersect(&ray, &b);
                let t1 = ray_obb_intersect(&ray.transformed(&a), &b.transformed(&a));
                match (t0, t1) {
                    (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-9),
                    (None, None) => {}
                    other => prop_assert!(false, "hit/miss disagreement {:?}", other),
                }
            }
        }
    }
}
