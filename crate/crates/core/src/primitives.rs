//! Solid primitives used for occlusion tests, depth rendering and scene layout.
//!
//! Rays are parameterized as `origin + s * dir` with `dir` not necessarily
//! unit length; intersection routines return `s` in those units, so a ray
//! built from a camera's normalized image coordinates yields z-depth directly.

use nalgebra::{Isometry3, Point3, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

const HIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub dir: Vector3<f64>,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, dir: Vector3<f64>) -> Self {
        Self { origin, dir }
    }

    /// Ray from `from` through `to`; `s = 1` lands on `to`.
    pub fn between(from: Vector3<f64>, to: Vector3<f64>) -> Self {
        Self { origin: from, dir: to - from }
    }

    pub fn at(&self, s: f64) -> Vector3<f64> {
        self.origin + self.dir * s
    }
}

pub(crate) mod scaled_axis {
    use nalgebra::{Rotation3, Vector3};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(r: &Rotation3<f64>, s: S) -> Result<S::Ok, S::Error> {
        r.scaled_axis().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Rotation3<f64>, D::Error> {
        let v = Vector3::<f64>::deserialize(d)?;
        Ok(Rotation3::new(v))
    }
}

/// Oriented box. `rotation` maps box-local axes into the room frame and is
/// serialized as a scaled rotation axis (radians).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cuboid {
    pub center: Vector3<f64>,
    pub half_extents: Vector3<f64>,
    #[serde(with = "scaled_axis", default = "Rotation3::identity")]
    pub rotation: Rotation3<f64>,
}

impl Cuboid {
    pub fn axis_aligned(center: Vector3<f64>, size: Vector3<f64>) -> Self {
        Self {
            center,
            half_extents: size * 0.5,
            rotation: Rotation3::identity(),
        }
    }

    fn to_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse_transform_vector(&(p - self.center))
    }

    fn intersect(&self, ray: &Ray) -> Option<f64> {
        let o = self.to_local(&ray.origin);
        let d = self.rotation.inverse_transform_vector(&ray.dir);
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        for i in 0..3 {
            let h = self.half_extents[i];
            if d[i].abs() < 1e-15 {
                if o[i] < -h || o[i] > h {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[i];
            let (mut a, mut b) = ((-h - o[i]) * inv, (h - o[i]) * inv);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t_near = t_near.max(a);
            t_far = t_far.min(b);
            if t_near > t_far {
                return None;
            }
        }
        if t_near > HIT_EPS {
            Some(t_near)
        } else if t_far > HIT_EPS {
            Some(t_far)
        } else {
            None
        }
    }

    fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        let q = self.to_local(p).abs() - self.half_extents;
        let outside = q.map(|x| x.max(0.0)).norm();
        let inside = q.max().min(0.0);
        outside + inside
    }

    /// The eight corners in room coordinates.
    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let h = self.half_extents;
        let mut out = [Vector3::zeros(); 8];
        for (i, c) in out.iter_mut().enumerate() {
            let local = Vector3::new(
                if i & 1 == 0 { -h.x } else { h.x },
                if i & 2 == 0 { -h.y } else { h.y },
                if i & 4 == 0 { -h.z } else { h.z },
            );
            *c = self.center + self.rotation * local;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: Vector3<f64>,
    pub radius: f64,
}

fn sphere_hit(center: &Vector3<f64>, radius: f64, ray: &Ray) -> Option<f64> {
    let oc = ray.origin - center;
    let a = ray.dir.norm_squared();
    let b = oc.dot(&ray.dir);
    let c = oc.norm_squared() - radius * radius;
    let disc = b * b - a * c;
    if disc < 0.0 || a == 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = (-b - sq) / a;
    let t1 = (-b + sq) / a;
    if t0 > HIT_EPS {
        Some(t0)
    } else if t1 > HIT_EPS {
        Some(t1)
    } else {
        None
    }
}

/// Segment swept by a sphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Capsule {
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
    pub radius: f64,
}

impl Capsule {
    fn segment_distance(&self, p: &Vector3<f64>) -> f64 {
        let ab = self.b - self.a;
        let len2 = ab.norm_squared();
        let s = if len2 > 0.0 {
            ((p - self.a).dot(&ab) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (p - (self.a + ab * s)).norm()
    }

    fn intersect(&self, ray: &Ray) -> Option<f64> {
        [
            tube_hit(&self.a, &self.b, self.radius, ray),
            sphere_hit(&self.a, self.radius, ray),
            sphere_hit(&self.b, self.radius, ray),
        ]
        .into_iter()
        .flatten()
        .min_by(f64::total_cmp)
    }
}

/// Nearest hit on the open side wall of the cylinder around segment `a-b`.
fn tube_hit(a: &Vector3<f64>, b: &Vector3<f64>, radius: f64, ray: &Ray) -> Option<f64> {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return None;
    }
    let axis = ab / len2.sqrt();
    let oc = ray.origin - a;
    let d_perp = ray.dir - axis * ray.dir.dot(&axis);
    let o_perp = oc - axis * oc.dot(&axis);
    let qa = d_perp.norm_squared();
    if qa <= 1e-18 {
        return None;
    }
    let qb = o_perp.dot(&d_perp);
    let qc = o_perp.norm_squared() - radius * radius;
    let disc = qb * qb - qa * qc;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    [(-qb - sq) / qa, (-qb + sq) / qa]
        .into_iter()
        .filter(|&t| t > HIT_EPS && (0.0..=len2).contains(&(ray.at(t) - a).dot(&ab)))
        .min_by(f64::total_cmp)
}

/// Solid cylinder with flat end caps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cylinder {
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
    pub radius: f64,
}

impl Cylinder {
    fn intersect(&self, ray: &Ray) -> Option<f64> {
        let ab = self.b - self.a;
        let len = ab.norm();
        if len == 0.0 {
            return None;
        }
        let axis = ab / len;
        let denom = ray.dir.dot(&axis);
        let cap = |c: &Vector3<f64>| {
            if denom.abs() < 1e-15 {
                return None;
            }
            let t = (c - ray.origin).dot(&axis) / denom;
            (t > HIT_EPS && (ray.at(t) - c).norm() <= self.radius).then_some(t)
        };
        [tube_hit(&self.a, &self.b, self.radius, ray), cap(&self.a), cap(&self.b)]
            .into_iter()
            .flatten()
            .min_by(f64::total_cmp)
    }

    fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        let ab = self.b - self.a;
        let len = ab.norm();
        let axis = if len > 0.0 { ab / len } else { Vector3::z() };
        let d = p - self.a;
        let along = d.dot(&axis);
        let radial = (d - axis * along).norm();
        let da = (-along).max(along - len);
        let dr = radial - self.radius;
        let outside = Vector2::new(da.max(0.0), dr.max(0.0)).norm();
        outside + da.max(dr).min(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Cuboid(Cuboid),
    Sphere(Sphere),
    Capsule(Capsule),
    Cylinder(Cylinder),
}

impl Primitive {
    /// First intersection parameter strictly in front of the ray origin.
    pub fn intersect(&self, ray: &Ray) -> Option<f64> {
        match self {
            Primitive::Cuboid(c) => c.intersect(ray),
            Primitive::Sphere(s) => sphere_hit(&s.center, s.radius, ray),
            Primitive::Capsule(c) => c.intersect(ray),
            Primitive::Cylinder(c) => c.intersect(ray),
        }
    }

    /// Signed distance to the surface (negative inside).
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Primitive::Cuboid(c) => c.signed_distance(p),
            Primitive::Sphere(s) => (p - s.center).norm() - s.radius,
            Primitive::Capsule(c) => c.segment_distance(p) - c.radius,
            Primitive::Cylinder(c) => c.signed_distance(p),
        }
    }

    /// Center and radius of a sphere enclosing the primitive.
    pub fn bounding_sphere(&self) -> (Vector3<f64>, f64) {
        match self {
            Primitive::Cuboid(c) => (c.center, c.half_extents.norm()),
            Primitive::Sphere(s) => (s.center, s.radius),
            Primitive::Capsule(c) => ((c.a + c.b) / 2.0, (c.b - c.a).norm() / 2.0 + c.radius),
            Primitive::Cylinder(c) => ((c.a + c.b) / 2.0, ((c.b - c.a).norm() / 2.0).hypot(c.radius)),
        }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        self.signed_distance(p) <= 0.0
    }

    pub fn translated(&self, delta: &Vector3<f64>) -> Primitive {
        self.transformed(&Isometry3::translation(delta.x, delta.y, delta.z))
    }

    pub fn transformed(&self, iso: &Isometry3<f64>) -> Primitive {
        let tp = |v: &Vector3<f64>| iso.transform_point(&Point3::from(*v)).coords;
        match self {
            Primitive::Cuboid(c) => Primitive::Cuboid(Cuboid {
                center: tp(&c.center),
                half_extents: c.half_extents,
                rotation: iso.rotation.to_rotation_matrix() * c.rotation,
            }),
            Primitive::Sphere(s) => Primitive::Sphere(Sphere {
                center: tp(&s.center),
                radius: s.radius,
            }),
            Primitive::Capsule(c) => Primitive::Capsule(Capsule {
                a: tp(&c.a),
                b: tp(&c.b),
                radius: c.radius,
            }),
            Primitive::Cylinder(c) => Primitive::Cylinder(Cylinder {
                a: tp(&c.a),
                b: tp(&c.b),
                radius: c.radius,
            }),
        }
    }

    /// Whether the open segment `from -> to` passes through the primitive
    /// before reaching `to` (with `margin` mm of slack at the far end).
    pub fn blocks_segment(&self, from: &Vector3<f64>, to: &Vector3<f64>, margin: f64) -> bool {
        let ray = Ray::between(*from, *to);
        let len = ray.dir.norm();
        if len == 0.0 {
            return false;
        }
        match self.intersect(&ray) {
            Some(s) => s * len < len - margin,
            None => false,
        }
    }
}

/// Closest hit over a primitive list, returning the ray parameter and index.
pub fn first_hit(prims: &[Primitive], ray: &Ray) -> Option<(f64, usize)> {
    prims
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.intersect(ray).map(|s| (s, i)))
        .min_by(|a, b| a.0.total_cmp(&b.0))
}
