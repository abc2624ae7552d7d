//! Deterministic kinematic multi-UAV world with raycast depth cameras.

pub mod error;
pub mod geometry;
pub mod scenario;
pub mod trajectory;
pub mod world;

pub use error::{Result, SimError};
pub use geometry::{Bounds, Shape, ShapeKind, Vec3};
pub use scenario::{
    build_background, build_scene, init_circle, init_random, init_random_with, place_obstacles,
    write_agents_csv, write_geometry_csv, Background, InitPattern, ObstacleKind, ObstacleSpec, Placement, ScenarioSpec,
    Scene,
};
pub use trajectory::{write_trajectory_csv, TrajectoryRow};
pub use world::{
    compute_reward, min_depth, render_depth_at, to_body_frame, wrap_angle, Action, AgentState,
    AgentStatus, AgentStep, Camera, DepthImage, Observation, Reward, RewardParams, SteerMode, World,
    WorldConfig,
};
