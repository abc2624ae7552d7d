//! Sphere-tracing reference renderer built on its own distance functions.

#![allow(dead_code)]

use cnav_sim::{Bounds, Shape, Vec3};

const HIT_EPS: f64 = 1e-8;
const MAX_ITERS: usize = 1_000_000;

fn closest_on_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
    let (wx, wy) = (p[0] - a[0], p[1] - a[1]);
    let len2 = ex * ex + ey * ey;
    let s = ((wx * ex + wy * ey) / len2).clamp(0.0, 1.0);
    ((wx - s * ex).powi(2) + (wy - s * ey).powi(2)).sqrt()
}

fn inside_triangle(p: [f64; 2], v: &[[f64; 2]; 3]) -> bool {
    let det = (v[1][1] - v[2][1]) * (v[0][0] - v[2][0]) + (v[2][0] - v[1][0]) * (v[0][1] - v[2][1]);
    let l1 = ((v[1][1] - v[2][1]) * (p[0] - v[2][0]) + (v[2][0] - v[1][0]) * (p[1] - v[2][1])) / det;
    let l2 = ((v[2][1] - v[0][1]) * (p[0] - v[2][0]) + (v[0][0] - v[2][0]) * (p[1] - v[2][1])) / det;
    let l3 = 1.0 - l1 - l2;
    l1 >= 0.0 && l2 >= 0.0 && l3 >= 0.0
}

/// Distance to a vertical extrusion given planar distance `flat` (negative inside) and slab [z0, z1].
fn extruded(flat: f64, z: f64, z0: f64, z1: f64) -> f64 {
    let dz_out = (z0 - z).max(z - z1).max(0.0);
    if flat > 0.0 || dz_out > 0.0 {
        (flat.max(0.0).powi(2) + dz_out.powi(2)).sqrt()
    } else {
        -((-flat).min(z - z0).min(z1 - z))
    }
}

pub fn distance(shape: &Shape, p: &Vec3) -> f64 {
    match *shape {
        Shape::Sphere { center, radius } => {
            let d = p - center;
            (d.x * d.x + d.y * d.y + d.z * d.z).sqrt() - radius
        }
        Shape::Box { center, half_extents } => {
            let lo = center - half_extents;
            let hi = center + half_extents;
            let q = Vec3::new(p.x.clamp(lo.x, hi.x), p.y.clamp(lo.y, hi.y), p.z.clamp(lo.z, hi.z));
            let out = (p - q).norm();
            if out > 0.0 {
                out
            } else {
                let mut m = f64::INFINITY;
                for a in 0..3 {
                    m = m.min(p[a] - lo[a]).min(hi[a] - p[a]);
                }
                -m
            }
        }
        Shape::Cylinder { base, radius, height } => {
            let rho = ((p.x - base.x).powi(2) + (p.y - base.y).powi(2)).sqrt();
            extruded(rho - radius, p.z, base.z, base.z + height)
        }
        Shape::Prism { vertices, base_z, height } => {
            let q = [p.x, p.y];
            let edge = (0..3)
                .map(|i| closest_on_segment(q, vertices[i], vertices[(i + 1) % 3]))
                .fold(f64::INFINITY, f64::min);
            let flat = if inside_triangle(q, &vertices) { -edge } else { edge };
            extruded(flat, p.z, base_z, base_z + height)
        }
        Shape::Ground { z } => p.z - z,
    }
}

fn wall_distance(b: &Bounds, p: &Vec3) -> f64 {
    let mut m = f64::INFINITY;
    for a in 0..3 {
        m = m.min(p[a] - b.min[a]).min(b.max[a] - p[a]);
    }
    m
}

/// First hit along a unit ray by sphere tracing, capped at `max`.
pub fn trace(origin: &Vec3, dir: &Vec3, shapes: &[Shape], walls: Option<&Bounds>, max: f64) -> f64 {
    let mut t = 0.0;
    for _ in 0..MAX_ITERS {
        let p = origin + dir * t;
        let mut d = shapes.iter().map(|s| distance(s, &p)).fold(f64::INFINITY, f64::min);
        if let Some(b) = walls {
            d = d.min(wall_distance(b, &p));
        }
        if d < HIT_EPS {
            return t.min(max);
        }
        t += d;
        if t >= max {
            return max;
        }
    }
    t.min(max)
}

/// Pixel direction from the angular grid, computed without the renderer's camera.
pub fn pixel_dir(row: usize, col: usize, h: usize, w: usize, fov_h_deg: f64, fov_v_deg: f64, yaw: f64) -> Vec3 {
    let fh = fov_h_deg.to_radians();
    let fv = fov_v_deg.to_radians();
    let az = yaw + fh * (0.5 - (col as f64 + 0.5) / w as f64);
    let el = fv * (0.5 - (row as f64 + 0.5) / h as f64);
    Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
}

pub struct RandomScene {
    pub shapes: Vec<Shape>,
    pub others: Vec<Vec3>,
    pub origin: Vec3,
    pub yaw: f64,
}

/// Mixed primitives plus other agents, with a camera origin clear of everything.
pub fn random_scene(rng: &mut impl rand::Rng, bounds: &Bounds, agent_radius: f64) -> RandomScene {
    let mut shapes = vec![Shape::Ground { z: bounds.min.z }];
    let pt = |rng: &mut dyn rand::RngCore| {
        Vec3::new(
            rand::Rng::random_range(rng, bounds.min.x + 0.5..bounds.max.x - 0.5),
            rand::Rng::random_range(rng, bounds.min.y + 0.5..bounds.max.y - 0.5),
            rand::Rng::random_range(rng, bounds.min.z + 0.3..bounds.max.z - 0.3),
        )
    };
    let n = rng.random_range(4..12);
    for _ in 0..n {
        let c = pt(rng);
        let shape = match rng.random_range(0..4) {
            0 => Shape::Sphere { center: c, radius: rng.random_range(0.2..1.2) },
            1 => Shape::Box {
                center: c,
                half_extents: Vec3::new(rng.random_range(0.1..1.0), rng.random_range(0.1..1.0), rng.random_range(0.1..1.0)),
            },
            2 => Shape::Cylinder {
                base: Vec3::new(c.x, c.y, rng.random_range(0.0..1.5)),
                radius: rng.random_range(0.1..0.8),
                height: rng.random_range(0.5..3.0),
            },
            _ => {
                let mut v = [[0.0; 2]; 3];
                for corner in v.iter_mut() {
                    *corner = [c.x + rng.random_range(-1.0..1.0), c.y + rng.random_range(-1.0..1.0)];
                }
                let area = (v[1][0] - v[0][0]) * (v[2][1] - v[0][1]) - (v[2][0] - v[0][0]) * (v[1][1] - v[0][1]);
                if area.abs() < 0.05 {
                    v[2] = [v[0][0] + 0.5, v[0][1] - 0.5];
                    v[1] = [v[0][0] + 0.5, v[0][1] + 0.5];
                }
                Shape::Prism { vertices: v, base_z: rng.random_range(0.0..1.5), height: rng.random_range(0.5..3.0) }
            }
        };
        shapes.push(shape);
    }
    let mut others = Vec::new();
    for _ in 0..rng.random_range(0..5) {
        others.push(pt(rng));
    }
    let origin = loop {
        let p = pt(rng);
        let clear = shapes.iter().all(|s| distance(s, &p) > agent_radius)
            && others.iter().all(|o| (o - p).norm() > 2.0 * agent_radius);
        if clear {
            break p;
        }
    };
    let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    RandomScene { shapes, others, origin, yaw }
}
