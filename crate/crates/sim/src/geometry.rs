//! Primitive shapes with analytic ray intersection and signed distance.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

pub type Vec3 = Vector3<f64>;

const PARALLEL_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Sphere {
        center: Vec3,
        radius: f64,
    },
    Box {
        center: Vec3,
        half_extents: Vec3,
    },
    /// Vertical cylinder standing on `base`.
    Cylinder {
        base: Vec3,
        radius: f64,
        height: f64,
    },
    /// Triangle in the horizontal plane at `base_z`, extruded upward.
    Prism {
        vertices: [[f64; 2]; 3],
        base_z: f64,
        height: f64,
    },
    /// Horizontal half-space below `z`.
    Ground {
        z: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Sphere,
    Box,
    Cylinder,
    Prism,
    Ground,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Box => "box",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Prism => "prism",
            ShapeKind::Ground => "ground",
        }
    }
}

fn prism_area(v: &[[f64; 2]; 3]) -> f64 {
    let (a, b, c) = (v[0], v[1], v[2]);
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

impl Shape {
    pub fn kind(&self) -> ShapeKind {
        match self {
            Shape::Sphere { .. } => ShapeKind::Sphere,
            Shape::Box { .. } => ShapeKind::Box,
            Shape::Cylinder { .. } => ShapeKind::Cylinder,
            Shape::Prism { .. } => ShapeKind::Prism,
            Shape::Ground { .. } => ShapeKind::Ground,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |cond: bool, msg: &str| {
            if cond {
                Ok(())
            } else {
                Err(SimError::InvalidShape(msg.to_string()))
            }
        };
        match self {
            Shape::Sphere { center, radius } => {
                ok(center.iter().all(|c| c.is_finite()), "sphere center must be finite")?;
                ok(*radius > 0.0 && radius.is_finite(), "sphere radius must be positive")
            }
            Shape::Box { center, half_extents } => {
                ok(center.iter().all(|c| c.is_finite()), "box center must be finite")?;
                ok(
                    half_extents.iter().all(|h| *h > 0.0 && h.is_finite()),
                    "box half extents must be positive",
                )
            }
            Shape::Cylinder { base, radius, height } => {
                ok(base.iter().all(|c| c.is_finite()), "cylinder base must be finite")?;
                ok(*radius > 0.0 && *height > 0.0, "cylinder radius and height must be positive")
            }
            Shape::Prism { vertices, base_z, height } => {
                ok(
                    vertices.iter().flatten().all(|c| c.is_finite()) && base_z.is_finite(),
                    "prism coordinates must be finite",
                )?;
                ok(*height > 0.0, "prism height must be positive")?;
                ok(prism_area(vertices).abs() > 1e-12, "prism base triangle is degenerate")
            }
            Shape::Ground { z } => ok(z.is_finite(), "ground height must be finite"),
        }
    }

    /// Smallest `t >= 0` with `origin + t * dir` on the surface. `dir` must be unit length.
    pub fn ray_intersect(&self, origin: &Vec3, dir: &Vec3) -> Result<Option<f64>> {
        if dir.norm_squared() < PARALLEL_EPS {
            return Err(SimError::ZeroDirection);
        }
        Ok(self.ray_hit(origin, dir))
    }

    /// Unchecked variant of [`Shape::ray_intersect`] for the render loop.
    pub(crate) fn ray_hit(&self, o: &Vec3, d: &Vec3) -> Option<f64> {
        match self {
            Shape::Sphere { center, radius } => ray_sphere(o, d, center, *radius),
            Shape::Box { center, half_extents } => {
                ray_aabb(o, d, &(center - half_extents), &(center + half_extents))
            }
            Shape::Cylinder { base, radius, height } => ray_cylinder(o, d, base, *radius, *height),
            Shape::Prism { vertices, base_z, height } => {
                ray_prism(o, d, vertices, *base_z, *height)
            }
            Shape::Ground { z } => {
                if o.z > *z && d.z < -PARALLEL_EPS {
                    Some((z - o.z) / d.z)
                } else if (o.z - z).abs() == 0.0 {
                    Some(0.0)
                } else {
                    None
                }
            }
        }
    }

    /// Signed distance from `p` to the surface; negative inside.
    pub fn sdf(&self, p: &Vec3) -> f64 {
        match self {
            Shape::Sphere { center, radius } => (p - center).norm() - radius,
            Shape::Box { center, half_extents } => {
                let q = (p - center).abs() - half_extents;
                let outside = q.map(|c| c.max(0.0)).norm();
                outside + q.max().min(0.0)
            }
            Shape::Cylinder { base, radius, height } => {
                let radial = ((p.x - base.x).powi(2) + (p.y - base.y).powi(2)).sqrt() - radius;
                let axial = (p.z - base.z - height / 2.0).abs() - height / 2.0;
                extrusion_sdf(radial, axial)
            }
            Shape::Prism { vertices, base_z, height } => {
                let flat = triangle_sdf(Vector2::new(p.x, p.y), vertices);
                let axial = (p.z - base_z - height / 2.0).abs() - height / 2.0;
                extrusion_sdf(flat, axial)
            }
            Shape::Ground { z } => p.z - z,
        }
    }

    /// Horizontal bounding circle `(centre, radius)`; `None` for unbounded shapes.
    pub fn footprint(&self) -> Option<(Vector2<f64>, f64)> {
        match self {
            Shape::Sphere { center, radius } => Some((center.xy(), *radius)),
            Shape::Box { center, half_extents } => Some((center.xy(), half_extents.xy().norm())),
            Shape::Cylinder { base, radius, .. } => Some((base.xy(), *radius)),
            Shape::Prism { vertices, .. } => {
                let c = vertices
                    .iter()
                    .fold(Vector2::zeros(), |acc, v| acc + Vector2::new(v[0], v[1]))
                    / 3.0;
                let r = vertices
                    .iter()
                    .map(|v| (Vector2::new(v[0], v[1]) - c).norm())
                    .fold(0.0, f64::max);
                Some((c, r))
            }
            Shape::Ground { .. } => None,
        }
    }
}

fn extrusion_sdf(flat: f64, axial: f64) -> f64 {
    let outside = (flat.max(0.0).powi(2) + axial.max(0.0).powi(2)).sqrt();
    outside + flat.max(axial).min(0.0)
}

fn triangle_sdf(p: Vector2<f64>, v: &[[f64; 2]; 3]) -> f64 {
    let pts = v.map(|a| Vector2::new(a[0], a[1]));
    let mut best = f64::INFINITY;
    let mut inside = true;
    let orient = prism_area(v).signum();
    for i in 0..3 {
        let a = pts[i];
        let b = pts[(i + 1) % 3];
        let e = b - a;
        let w = p - a;
        let t = (w.dot(&e) / e.norm_squared()).clamp(0.0, 1.0);
        best = best.min((w - e * t).norm());
        let cross = e.x * w.y - e.y * w.x;
        if cross * orient < 0.0 {
            inside = false;
        }
    }
    if inside {
        -best
    } else {
        best
    }
}

fn ray_sphere(o: &Vec3, d: &Vec3, c: &Vec3, r: f64) -> Option<f64> {
    let oc = o - c;
    let b = oc.dot(d);
    let cc = oc.norm_squared() - r * r;
    let disc = b * b - cc;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let t0 = -b - s;
    let t1 = -b + s;
    if t0 >= 0.0 {
        Some(t0)
    } else if t1 >= 0.0 {
        Some(t1)
    } else {
        None
    }
}

pub(crate) fn ray_aabb(o: &Vec3, d: &Vec3, lo: &Vec3, hi: &Vec3) -> Option<f64> {
    let mut tmin = f64::NEG_INFINITY;
    let mut tmax = f64::INFINITY;
    for a in 0..3 {
        if d[a].abs() < PARALLEL_EPS {
            if o[a] < lo[a] || o[a] > hi[a] {
                return None;
            }
        } else {
            let inv = 1.0 / d[a];
            let mut t0 = (lo[a] - o[a]) * inv;
            let mut t1 = (hi[a] - o[a]) * inv;
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            tmin = tmin.max(t0);
            tmax = tmax.min(t1);
        }
    }
    if tmin > tmax || tmax < 0.0 {
        None
    } else if tmin >= 0.0 {
        Some(tmin)
    } else {
        Some(tmax)
    }
}

fn keep_min(best: &mut Option<f64>, t: f64) {
    if t >= 0.0 && best.is_none_or(|b| t < b) {
        *best = Some(t);
    }
}

fn ray_cylinder(o: &Vec3, d: &Vec3, base: &Vec3, r: f64, h: f64) -> Option<f64> {
    let (z0, z1) = (base.z, base.z + h);
    let mut best = None;
    let (ox, oy) = (o.x - base.x, o.y - base.y);
    let a = d.x * d.x + d.y * d.y;
    if a > PARALLEL_EPS {
        let b = ox * d.x + oy * d.y;
        let c = ox * ox + oy * oy - r * r;
        let disc = b * b - a * c;
        if disc >= 0.0 {
            let s = disc.sqrt();
            for t in [(-b - s) / a, (-b + s) / a] {
                let z = o.z + t * d.z;
                if (z0..=z1).contains(&z) {
                    keep_min(&mut best, t);
                }
            }
        }
    }
    if d.z.abs() > PARALLEL_EPS {
        for zc in [z0, z1] {
            let t = (zc - o.z) / d.z;
            let (x, y) = (ox + t * d.x, oy + t * d.y);
            if x * x + y * y <= r * r {
                keep_min(&mut best, t);
            }
        }
    }
    best
}

fn ray_prism(o: &Vec3, d: &Vec3, v: &[[f64; 2]; 3], z0: f64, h: f64) -> Option<f64> {
    let z1 = z0 + h;
    let mut best = None;
    // Side faces: vertical rectangles over each edge.
    for i in 0..3 {
        let a = Vector2::new(v[i][0], v[i][1]);
        let b = Vector2::new(v[(i + 1) % 3][0], v[(i + 1) % 3][1]);
        let e = b - a;
        let denom = d.x * e.y - d.y * e.x;
        if denom.abs() < PARALLEL_EPS {
            continue;
        }
        let w = a - o.xy();
        let t = (w.x * e.y - w.y * e.x) / denom;
        let s = (w.x * d.y - w.y * d.x) / denom;
        let z = o.z + t * d.z;
        if (0.0..=1.0).contains(&s) && (z0..=z1).contains(&z) {
            keep_min(&mut best, t);
        }
    }
    if d.z.abs() > PARALLEL_EPS {
        for zc in [z0, z1] {
            let t = (zc - o.z) / d.z;
            let p = Vector2::new(o.x + t * d.x, o.y + t * d.y);
            if triangle_sdf(p, v) <= 0.0 {
                keep_min(&mut best, t);
            }
        }
    }
    best
}

/// Axis-aligned box with inward-facing walls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub min: Vec3,
    pub max: Vec3,
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds { min: Vec3::new(-8.0, -8.0, 0.0), max: Vec3::new(8.0, 8.0, 4.0) }
    }
}

impl Bounds {
    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) / 2.0
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// Distance from `p` to the nearest wall; negative outside.
    pub fn interior_distance(&self, p: &Vec3) -> f64 {
        (0..3)
            .map(|a| (p[a] - self.min[a]).min(self.max[a] - p[a]))
            .fold(f64::INFINITY, f64::min)
    }

    /// Distance along `d` to where a ray starting inside leaves the box.
    pub fn ray_exit(&self, o: &Vec3, d: &Vec3) -> Option<f64> {
        let mut best = f64::INFINITY;
        for a in 0..3 {
            if d[a] > PARALLEL_EPS {
                best = best.min((self.max[a] - o[a]) / d[a]);
            } else if d[a] < -PARALLEL_EPS {
                best = best.min((self.min[a] - o[a]) / d[a]);
            }
        }
        (best.is_finite()).then(|| best.max(0.0))
    }
}
