//! Scene generators: start/goal layouts, obstacle placement and backgrounds.

use std::f64::consts::TAU;
use std::path::Path;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::geometry::{Bounds, Shape, Vec3};
use crate::world::{AgentState, World, WorldConfig};

const MAX_TRIES: usize = 10_000;
/// Distance of starts and goals from the walls.
pub const LAYOUT_MARGIN: f64 = 1.0;
pub const MIN_START_GOAL: f64 = 4.0;
pub const OBSTACLE_KEEPOUT: f64 = 1.5;
/// Clearance between starts/goals and background geometry.
pub const BACKGROUND_CLEARANCE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    #[default]
    Playground,
    Grassland,
    SnowMountain,
    Forest,
}

impl Background {
    pub const ALL: [Background; 4] =
        [Background::Playground, Background::Grassland, Background::SnowMountain, Background::Forest];

    pub fn name(self) -> &'static str {
        match self {
            Background::Playground => "playground",
            Background::Grassland => "grassland",
            Background::SnowMountain => "snow_mountain",
            Background::Forest => "forest",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObstacleKind {
    Cube,
    Sphere,
    Cylinder,
    Prism,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSpec {
    pub kind: ObstacleKind,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "pattern", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitPattern {
    Random,
    Circle { radius: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub background: Background,
    #[serde(default)]
    pub obstacles: Vec<ObstacleSpec>,
    pub init: InitPattern,
    pub n_agents: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn validate(&self, world: &WorldConfig) -> Result<()> {
        if self.n_agents == 0 {
            return Err(SimError::InvalidConfig("n_agents must be at least 1".into()));
        }
        if let InitPattern::Circle { radius } = self.init {
            let half = world.bounds.extent().xy().min() / 2.0;
            if !(radius > 0.0 && radius + LAYOUT_MARGIN <= half) {
                return Err(SimError::InvalidConfig(format!(
                    "circle radius {radius} does not fit inside the bounds"
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.background.name().to_string())
    }
}

/// Start and goal of one agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub start: Vec3,
    pub goal: Vec3,
}

fn layout_box(bounds: &Bounds) -> (Vec3, Vec3) {
    let m = Vec3::repeat(LAYOUT_MARGIN);
    (bounds.min + m, bounds.max - m)
}

fn sample_in(rng: &mut ChaCha8Rng, lo: &Vec3, hi: &Vec3) -> Vec3 {
    Vec3::new(rng.random_range(lo.x..=hi.x), rng.random_range(lo.y..=hi.y), rng.random_range(lo.z..=hi.z))
}

pub fn init_random(seed: u64, n: usize, bounds: &Bounds, agent_radius: f64) -> Result<Vec<Placement>> {
    init_random_with(seed, n, bounds, agent_radius, |_| true)
}

/// Random layout restricted to points accepted by `free`.
pub fn init_random_with(
    seed: u64,
    n: usize,
    bounds: &Bounds,
    agent_radius: f64,
    free: impl Fn(&Vec3) -> bool,
) -> Result<Vec<Placement>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = layout_box(bounds);
    let sep = 4.0 * agent_radius;
    let mut out: Vec<Placement> = Vec::with_capacity(n);
    for i in 0..n {
        let mut placed = None;
        for _ in 0..MAX_TRIES {
            let start = sample_in(&mut rng, &lo, &hi);
            let goal = sample_in(&mut rng, &lo, &hi);
            let ok = (start - goal).norm() >= MIN_START_GOAL
                && free(&start)
                && free(&goal)
                && out.iter().all(|p| (p.start - start).norm() >= sep && (p.goal - goal).norm() >= sep);
            if ok {
                placed = Some(Placement { start, goal });
                break;
            }
        }
        out.push(placed.ok_or_else(|| {
            SimError::Placement(format!("could not place agent {i} of {n} after {MAX_TRIES} tries"))
        })?);
    }
    Ok(out)
}

/// Starts evenly spaced on a horizontal circle; each goal is the antipode of its start.
pub fn init_circle(
    n: usize,
    radius: f64,
    height: f64,
    center: Vector2<f64>,
    agent_radius: f64,
) -> Result<Vec<Placement>> {
    if n == 0 || radius <= 0.0 || TAU * radius / (n as f64) < 4.0 * agent_radius {
        return Err(SimError::Placement(format!("circle of radius {radius} too small for {n} agents")));
    }
    let c = Vec3::new(center.x, center.y, height);
    Ok((0..n)
        .map(|i| {
            let theta = TAU * i as f64 / n as f64;
            let offset = Vec3::new(radius * theta.cos(), radius * theta.sin(), 0.0);
            Placement { start: c + offset, goal: c - offset }
        })
        .collect())
}

fn canonical_obstacle(kind: ObstacleKind, xy: Vector2<f64>, z: f64, ground: f64) -> Shape {
    match kind {
        ObstacleKind::Cube => Shape::Box { center: Vec3::new(xy.x, xy.y, z), half_extents: Vec3::repeat(0.5) },
        ObstacleKind::Sphere => Shape::Sphere { center: Vec3::new(xy.x, xy.y, z), radius: 0.5 },
        ObstacleKind::Cylinder => Shape::Cylinder { base: Vec3::new(xy.x, xy.y, ground), radius: 0.4, height: 3.0 },
        ObstacleKind::Prism => equilateral_prism(xy, 1.0, ground, 3.0, 0.0),
    }
}

fn equilateral_prism(c: Vector2<f64>, edge: f64, base_z: f64, height: f64, rot: f64) -> Shape {
    let r = edge / 3f64.sqrt();
    let v = |k: usize| {
        let a = rot + TAU * k as f64 / 3.0;
        [c.x + r * a.cos(), c.y + r * a.sin()]
    };
    Shape::Prism { vertices: [v(0), v(1), v(2)], base_z, height }
}

fn footprints_clear(shape: &Shape, existing: &[Shape], gap: f64) -> bool {
    let Some((c, r)) = shape.footprint() else { return true };
    existing.iter().all(|e| match e.footprint() {
        Some((c2, r2)) => (c - c2).norm() >= r + r2 + gap,
        None => true,
    })
}

/// Places `count` canonical obstacles clear of `keepout` points and of `existing` shapes.
pub fn place_obstacles(
    kind: ObstacleKind,
    count: usize,
    seed: u64,
    bounds: &Bounds,
    keepout: &[Vec3],
    existing: &[Shape],
) -> Result<Vec<Shape>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = layout_box(bounds);
    let mut placed: Vec<Shape> = Vec::with_capacity(count);
    for i in 0..count {
        let mut found = None;
        for _ in 0..MAX_TRIES {
            let p = sample_in(&mut rng, &lo, &hi);
            let shape = canonical_obstacle(kind, p.xy(), p.z, bounds.min.z);
            let clear = keepout.iter().all(|k| shape.sdf(k) >= OBSTACLE_KEEPOUT)
                && footprints_clear(&shape, &placed, 0.5)
                && footprints_clear(&shape, existing, 0.5);
            if clear {
                found = Some(shape);
                break;
            }
        }
        placed.push(found.ok_or_else(|| {
            SimError::Placement(format!("could not place obstacle {i} of {count} after {MAX_TRIES} tries"))
        })?);
    }
    Ok(placed)
}

pub fn build_background(kind: Background, seed: u64, bounds: &Bounds) -> Vec<Shape> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6267_u64.rotate_left(32));
    let ground = bounds.min.z;
    let mut shapes = vec![Shape::Ground { z: ground }];
    let inner = |rng: &mut ChaCha8Rng, margin: f64| {
        Vector2::new(
            rng.random_range(bounds.min.x + margin..=bounds.max.x - margin),
            rng.random_range(bounds.min.y + margin..=bounds.max.y - margin),
        )
    };
    match kind {
        Background::Playground => {}
        Background::Grassland => {
            for _ in 0..14 {
                let c = inner(&mut rng, 0.5);
                let hz = rng.random_range(0.1..=0.25);
                let half = Vec3::new(rng.random_range(0.3..=0.7), rng.random_range(0.3..=0.7), hz);
                shapes.push(Shape::Box { center: Vec3::new(c.x, c.y, ground + hz), half_extents: half });
            }
        }
        Background::Forest => {
            let mut trunks: Vec<Shape> = Vec::new();
            let height = bounds.extent().z;
            while trunks.len() < 20 {
                let c = inner(&mut rng, 0.5);
                let t = Shape::Cylinder {
                    base: Vec3::new(c.x, c.y, ground),
                    radius: rng.random_range(0.15..=0.25),
                    height,
                };
                if footprints_clear(&t, &trunks, 1.0) {
                    trunks.push(t);
                }
            }
            shapes.extend(trunks);
        }
        Background::SnowMountain => {
            let e = bounds.extent();
            for k in 0..8 {
                // Two mounds per wall, centred just inside the edge.
                let along = rng.random_range(0.15..=0.85);
                let inset = rng.random_range(0.3..=0.8);
                let c = match k % 4 {
                    0 => Vector2::new(bounds.min.x + inset, bounds.min.y + along * e.y),
                    1 => Vector2::new(bounds.max.x - inset, bounds.min.y + along * e.y),
                    2 => Vector2::new(bounds.min.x + along * e.x, bounds.min.y + inset),
                    _ => Vector2::new(bounds.min.x + along * e.x, bounds.max.y - inset),
                };
                let edge = rng.random_range(2.5..=4.0);
                let height = rng.random_range(1.5..=3.5);
                shapes.push(equilateral_prism(c, edge, ground, height, rng.random_range(0.0..TAU)));
            }
        }
    }
    shapes
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub shapes: Vec<Shape>,
    pub placements: Vec<Placement>,
    pub yaws: Vec<f64>,
}

impl Scene {
    pub fn agents(&self) -> Vec<AgentState> {
        self.placements
            .iter()
            .zip(&self.yaws)
            .map(|(p, &yaw)| AgentState::new(p.start, p.goal, yaw))
            .collect()
    }

    pub fn into_world(self, cfg: WorldConfig) -> Result<World> {
        let agents = self.agents();
        World::new(cfg, self.shapes, agents)
    }
}

fn stream(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k)
}

/// Builds a full scene for one episode. Pure in `(spec, cfg)`.
pub fn build_scene(spec: &ScenarioSpec, cfg: &WorldConfig) -> Result<Scene> {
    spec.validate(cfg)?;
    let bounds = &cfg.bounds;
    let background = build_background(spec.background, stream(spec.seed, 1), bounds);
    let clear_of_background = |p: &Vec3| {
        background
            .iter()
            .filter(|s| !matches!(s, Shape::Ground { .. }))
            .all(|s| s.sdf(p) >= BACKGROUND_CLEARANCE)
    };
    let mut yaw_rng = ChaCha8Rng::seed_from_u64(stream(spec.seed, 2));
    let (placements, yaws) = match spec.init {
        InitPattern::Random => {
            let p = init_random_with(stream(spec.seed, 3), spec.n_agents, bounds, cfg.agent_radius, clear_of_background)?;
            let yaws = p.iter().map(|_| yaw_rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)).collect();
            (p, yaws)
        }
        InitPattern::Circle { radius } => {
            let c = bounds.center();
            let p = init_circle(spec.n_agents, radius, c.z, c.xy(), cfg.agent_radius)?;
            let yaws = p.iter().map(|pl| (pl.goal.y - pl.start.y).atan2(pl.goal.x - pl.start.x)).collect();
            (p, yaws)
        }
    };
    let keepout: Vec<Vec3> = placements.iter().flat_map(|p| [p.start, p.goal]).collect();
    let mut shapes = background;
    for (k, o) in spec.obstacles.iter().enumerate() {
        let placed = place_obstacles(o.kind, o.count, stream(spec.seed, 10 + k as u64), bounds, &keepout, &shapes)?;
        shapes.extend(placed);
    }
    let scene = Scene { shapes, placements, yaws };
    let world = scene.clone().into_world(cfg.clone())?;
    let hits = world.colliding_agents();
    if !hits.is_empty() {
        return Err(SimError::Placement(format!("agents {hits:?} start in collision")));
    }
    Ok(scene)
}

#[derive(Debug, Serialize)]
struct ShapeRow {
    index: usize,
    kind: &'static str,
    x: Option<f64>,
    y: Option<f64>,
    z: Option<f64>,
    radius: Option<f64>,
    half_x: Option<f64>,
    half_y: Option<f64>,
    half_z: Option<f64>,
    height: Option<f64>,
    vertices: Option<String>,
}

fn shape_row(index: usize, s: &Shape) -> ShapeRow {
    let mut row = ShapeRow {
        index,
        kind: s.kind().name(),
        x: None,
        y: None,
        z: None,
        radius: None,
        half_x: None,
        half_y: None,
        half_z: None,
        height: None,
        vertices: None,
    };
    match s {
        Shape::Sphere { center, radius } => {
            (row.x, row.y, row.z, row.radius) = (Some(center.x), Some(center.y), Some(center.z), Some(*radius));
        }
        Shape::Box { center, half_extents } => {
            (row.x, row.y, row.z) = (Some(center.x), Some(center.y), Some(center.z));
            (row.half_x, row.half_y, row.half_z) = (Some(half_extents.x), Some(half_extents.y), Some(half_extents.z));
        }
        Shape::Cylinder { base, radius, height } => {
            (row.x, row.y, row.z) = (Some(base.x), Some(base.y), Some(base.z));
            (row.radius, row.height) = (Some(*radius), Some(*height));
        }
        Shape::Prism { vertices, base_z, height } => {
            row.z = Some(*base_z);
            row.height = Some(*height);
            row.vertices = Some(vertices.iter().map(|v| format!("{} {}", v[0], v[1])).collect::<Vec<_>>().join(";"));
        }
        Shape::Ground { z } => row.z = Some(*z),
    }
    row
}

/// Writes scene geometry as CSV, one shape per row.
pub fn write_geometry_csv(shapes: &[Shape], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (i, s) in shapes.iter().enumerate() {
        w.serialize(shape_row(i, s))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct AgentRow {
    agent_id: usize,
    role: &'static str,
    x: f64,
    y: f64,
    z: f64,
}

/// Writes one `start` and one `goal` row per agent.
pub fn write_agents_csv(placements: &[Placement], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (i, p) in placements.iter().enumerate() {
        for (role, pt) in [("start", p.start), ("goal", p.goal)] {
            w.serialize(AgentRow { agent_id: i, role, x: pt.x, y: pt.y, z: pt.z })?;
        }
    }
    w.flush()?;
    Ok(())
}
