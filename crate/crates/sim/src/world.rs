use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::geometry::{Bounds, Shape, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SteerMode {
    /// Third action component turns the heading.
    #[default]
    YawRate,
    /// Third action component is a sideways body-frame velocity; heading stays fixed.
    Lateral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardParams {
    pub r_arrival: f64,
    pub r_collision: f64,
    pub w_goal: f64,
    pub w_avoid: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams { r_arrival: 5.0, r_collision: -5.0, w_goal: 1.0, w_avoid: -0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub bounds: Bounds,
    /// When false the walls are neither rendered nor collidable.
    pub bounded: bool,
    pub dt: f64,
    /// Scale for [forward, climb, steer] commands.
    pub max_speed: [f64; 3],
    pub k_lag: f64,
    pub steer_mode: SteerMode,
    pub agent_radius: f64,
    pub arrival_radius: f64,
    pub d_safe: f64,
    pub depth_range_max: f64,
    pub fov_h: f64,
    pub fov_v: f64,
    pub depth_h: usize,
    pub depth_w: usize,
    pub reward: RewardParams,
    pub max_steps: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            bounds: Bounds::default(),
            bounded: true,
            dt: 0.5,
            max_speed: [1.0, 0.5, 1.0],
            k_lag: 0.5,
            steer_mode: SteerMode::YawRate,
            agent_radius: 0.25,
            arrival_radius: 0.5,
            d_safe: 1.0,
            depth_range_max: 10.0,
            fov_h: 90.0,
            fov_v: 60.0,
            depth_h: 24,
            depth_w: 32,
            reward: RewardParams::default(),
            max_steps: 200,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |cond: bool, msg: &str| {
            if cond {
                Ok(())
            } else {
                Err(SimError::InvalidConfig(msg.to_string()))
            }
        };
        let e = self.bounds.extent();
        check(e.iter().all(|v| *v > 0.0), "bounds must have positive extent")?;
        check(self.dt > 0.0, "dt must be positive")?;
        check(self.max_speed.iter().all(|v| *v > 0.0), "max_speed must be positive")?;
        check(self.k_lag > 0.0 && self.k_lag <= 1.0, "k_lag must lie in (0, 1]")?;
        check(self.agent_radius > 0.0, "agent_radius must be positive")?;
        check(self.arrival_radius > 0.0, "arrival_radius must be positive")?;
        check(self.d_safe > 0.0, "d_safe must be positive")?;
        check(self.d_safe < self.depth_range_max, "d_safe must be below depth_range_max")?;
        check(self.fov_h > 0.0 && self.fov_h < 180.0, "fov_h must lie in (0, 180)")?;
        check(self.fov_v > 0.0 && self.fov_v < 180.0, "fov_v must lie in (0, 180)")?;
        check(self.depth_h >= 1 && self.depth_w >= 1, "depth resolution must be positive")?;
        check(self.max_steps >= 1, "max_steps must be at least 1")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: WorldConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentStatus {
    Active,
    Arrived,
    Collided,
    TimedOut,
}

impl AgentStatus {
    pub fn is_active(self) -> bool {
        self == AgentStatus::Active
    }

    pub fn name(self) -> &'static str {
        match self {
            AgentStatus::Active => "active",
            AgentStatus::Arrived => "arrived",
            AgentStatus::Collided => "collided",
            AgentStatus::TimedOut => "timed_out",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub position: Vec3,
    /// Body-frame [forward, climb, steer] state.
    pub velocity: Vec3,
    pub yaw: f64,
    pub start: Vec3,
    pub goal: Vec3,
    pub status: AgentStatus,
    pub path_length: f64,
    pub steps: usize,
}

impl AgentState {
    pub fn new(start: Vec3, goal: Vec3, yaw: f64) -> Self {
        AgentState {
            position: start,
            velocity: Vec3::zeros(),
            yaw,
            start,
            goal,
            status: AgentStatus::Active,
            path_length: 0.0,
            steps: 0,
        }
    }

    pub fn goal_distance(&self) -> f64 {
        (self.goal - self.position).norm()
    }

    /// World-frame velocity implied by the body-frame state.
    pub fn world_velocity(&self, mode: SteerMode) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        let fwd = self.velocity.x;
        let lat = match mode {
            SteerMode::YawRate => 0.0,
            SteerMode::Lateral => self.velocity.z,
        };
        Vec3::new(fwd * c - lat * s, fwd * s + lat * c, self.velocity.y)
    }
}

/// Commands in [-1, 1] per component before scaling.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub v_forward: f64,
    pub v_climb: f64,
    pub v_steer: f64,
}

impl Action {
    pub fn new(v_forward: f64, v_climb: f64, v_steer: f64) -> Self {
        Action { v_forward, v_climb, v_steer }
    }

    pub fn from_slice(a: &[f32]) -> Self {
        Action::new(a[0] as f64, a[1] as f64, a[2] as f64)
    }

    pub fn clamped(&self) -> [f64; 3] {
        let c = |v: f64| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
        [c(self.v_forward), c(self.v_climb), c(self.v_steer)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub height: usize,
    pub width: usize,
    /// Row-major, row 0 at the top of the field of view.
    pub data: Vec<f32>,
}

impl DepthImage {
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub depth: DepthImage,
    pub goal_body: Vec3,
    pub velocity: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Reward {
    pub goal: f64,
    pub avoid: f64,
}

impl Reward {
    pub fn total(&self) -> f64 {
        self.goal + self.avoid
    }
}

#[derive(Debug, Clone)]
pub struct AgentStep {
    pub observation: Observation,
    pub reward: Reward,
    pub depth_min: f64,
    pub status: AgentStatus,
    /// True for arrival and collision. A timeout ends the episode without being terminal.
    pub terminal: bool,
    pub done: bool,
}

pub fn min_depth(depth: &[f32]) -> Result<f32> {
    depth.iter().copied().reduce(f32::min).ok_or(SimError::EmptyImage)
}

pub fn to_body_frame(agent: &AgentState, point: &Vec3) -> Vec3 {
    let d = point - agent.position;
    let (s, c) = agent.yaw.sin_cos();
    Vec3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
}

pub fn compute_reward(
    cfg: &WorldConfig,
    prev: &AgentState,
    cur: &AgentState,
    depth_min: f64,
    collided: bool,
) -> Reward {
    let p = &cfg.reward;
    let d_cur = cur.goal_distance();
    let goal = if d_cur < cfg.arrival_radius {
        p.r_arrival
    } else {
        p.w_goal * (prev.goal_distance() - d_cur)
    };
    let avoid = if collided {
        p.r_collision
    } else {
        p.w_avoid * (cfg.d_safe - depth_min).max(0.0)
    };
    Reward { goal, avoid }
}

/// Unit ray directions for a camera looking along +x, row-major.
#[derive(Debug, Clone)]
pub struct Camera {
    pub height: usize,
    pub width: usize,
    dirs: Vec<Vec3>,
}

impl Camera {
    pub fn new(cfg: &WorldConfig) -> Self {
        let (h, w) = (cfg.depth_h, cfg.depth_w);
        let fh = cfg.fov_h.to_radians();
        let fv = cfg.fov_v.to_radians();
        let mut dirs = Vec::with_capacity(h * w);
        for i in 0..h {
            let pitch = fv / 2.0 - (i as f64 + 0.5) * fv / h as f64;
            for j in 0..w {
                let yaw = fh / 2.0 - (j as f64 + 0.5) * fh / w as f64;
                dirs.push(Vec3::new(pitch.cos() * yaw.cos(), pitch.cos() * yaw.sin(), pitch.sin()));
            }
        }
        Camera { height: h, width: w, dirs }
    }

    /// Ray direction of pixel `(row, col)` after rotating by `yaw`.
    pub fn direction(&self, row: usize, col: usize, yaw: f64) -> Vec3 {
        rotate_yaw(&self.dirs[row * self.width + col], yaw)
    }
}

fn rotate_yaw(v: &Vec3, yaw: f64) -> Vec3 {
    let (s, c) = yaw.sin_cos();
    Vec3::new(c * v.x - s * v.y, s * v.x + c * v.y, v.z)
}

/// Renders a depth image from `origin` facing `yaw`. `others` are rendered as spheres.
pub fn render_depth_at(
    cfg: &WorldConfig,
    camera: &Camera,
    shapes: &[Shape],
    others: &[Vec3],
    origin: &Vec3,
    yaw: f64,
) -> DepthImage {
    let max = cfg.depth_range_max;
    let (s, c) = yaw.sin_cos();
    let data = camera
        .dirs
        .iter()
        .map(|d0| {
            let d = Vec3::new(c * d0.x - s * d0.y, s * d0.x + c * d0.y, d0.z);
            let mut best = max;
            if cfg.bounded {
                if let Some(t) = cfg.bounds.ray_exit(origin, &d) {
                    best = best.min(t);
                }
            }
            for shape in shapes {
                if let Some(t) = shape.ray_hit(origin, &d) {
                    best = best.min(t);
                }
            }
            for p in others {
                let sphere = Shape::Sphere { center: *p, radius: cfg.agent_radius };
                if let Some(t) = sphere.ray_hit(origin, &d) {
                    best = best.min(t);
                }
            }
            best.clamp(0.0, max) as f32
        })
        .collect();
    DepthImage { height: camera.height, width: camera.width, data }
}

#[derive(Debug, Clone)]
pub struct World {
    cfg: WorldConfig,
    camera: Camera,
    shapes: Vec<Shape>,
    agents: Vec<AgentState>,
    step_count: usize,
}

impl World {
    pub fn new(cfg: WorldConfig, shapes: Vec<Shape>, agents: Vec<AgentState>) -> Result<Self> {
        cfg.validate()?;
        for s in &shapes {
            s.validate()?;
        }
        if agents.is_empty() {
            return Err(SimError::InvalidConfig("world needs at least one agent".into()));
        }
        let camera = Camera::new(&cfg);
        Ok(World { cfg, camera, shapes, agents, step_count: 0 })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn camera(&self) -> &Camera {
        &self.camera
    }

    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn all_done(&self) -> bool {
        self.agents.iter().all(|a| !a.status.is_active())
    }

    /// Depth image seen by agent `i`; inactive agents are invisible to others.
    pub fn render_depth(&self, i: usize) -> DepthImage {
        let others: Vec<Vec3> = self
            .agents
            .iter()
            .enumerate()
            .filter(|(j, a)| *j != i && a.status.is_active())
            .map(|(_, a)| a.position)
            .collect();
        let a = &self.agents[i];
        render_depth_at(&self.cfg, &self.camera, &self.shapes, &others, &a.position, a.yaw)
    }

    pub fn observe(&self, i: usize) -> Observation {
        let a = &self.agents[i];
        Observation {
            depth: self.render_depth(i),
            goal_body: to_body_frame(a, &a.goal),
            velocity: a.velocity,
        }
    }

    /// Whether a body of `agent_radius` at `p` touches any shape or wall.
    pub fn hits_static(&self, p: &Vec3) -> bool {
        let r = self.cfg.agent_radius;
        (self.cfg.bounded && self.cfg.bounds.interior_distance(p) < r)
            || self.shapes.iter().any(|s| s.sdf(p) < r)
    }

    /// Indices of active agents currently in collision.
    pub fn colliding_agents(&self) -> Vec<usize> {
        let n = self.agents.len();
        let mut hit = vec![false; n];
        let two_r = 2.0 * self.cfg.agent_radius;
        for i in 0..n {
            let a = &self.agents[i];
            if !a.status.is_active() {
                continue;
            }
            if self.hits_static(&a.position) {
                hit[i] = true;
            }
            for j in (i + 1)..n {
                let b = &self.agents[j];
                if b.status.is_active() && (a.position - b.position).norm() < two_r {
                    hit[i] = true;
                    hit[j] = true;
                }
            }
        }
        (0..n).filter(|&i| hit[i]).collect()
    }

    /// Advances one tick. Entries for agents already inactive are `None`.
    pub fn step(&mut self, actions: &[Action]) -> Result<Vec<Option<AgentStep>>> {
        if actions.len() != self.agents.len() {
            return Err(SimError::ActionCount { expected: self.agents.len(), got: actions.len() });
        }
        let prev = self.agents.clone();
        let cfg = &self.cfg;
        for (agent, action) in self.agents.iter_mut().zip(actions) {
            if !agent.status.is_active() {
                continue;
            }
            let cmd = action.clamped();
            for (k, c) in cmd.iter().enumerate() {
                let target = c * cfg.max_speed[k];
                agent.velocity[k] += cfg.k_lag * (target - agent.velocity[k]);
            }
            if cfg.steer_mode == SteerMode::YawRate {
                agent.yaw = wrap_angle(agent.yaw + agent.velocity.z * cfg.dt);
            }
            let delta = agent.world_velocity(cfg.steer_mode) * cfg.dt;
            agent.position += delta;
            agent.path_length += delta.norm();
            agent.steps += 1;
        }
        self.step_count += 1;

        let collided = self.colliding_agents();
        let timed_out = self.step_count >= self.cfg.max_steps;
        for i in 0..self.agents.len() {
            if !prev[i].status.is_active() {
                continue;
            }
            let a = &mut self.agents[i];
            a.status = if collided.contains(&i) {
                AgentStatus::Collided
            } else if a.goal_distance() < self.cfg.arrival_radius {
                AgentStatus::Arrived
            } else if timed_out {
                AgentStatus::TimedOut
            } else {
                AgentStatus::Active
            };
        }

        let mut out = Vec::with_capacity(self.agents.len());
        for i in 0..self.agents.len() {
            if !prev[i].status.is_active() {
                out.push(None);
                continue;
            }
            let observation = self.observe(i);
            let depth_min = min_depth(&observation.depth.data)? as f64;
            let cur = &self.agents[i];
            let hit = cur.status == AgentStatus::Collided;
            let reward = compute_reward(&self.cfg, &prev[i], cur, depth_min, hit);
            let terminal = matches!(cur.status, AgentStatus::Arrived | AgentStatus::Collided);
            out.push(Some(AgentStep {
                observation,
                reward,
                depth_min,
                status: cur.status,
                terminal,
                done: !cur.status.is_active(),
            }));
        }
        Ok(out)
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}
