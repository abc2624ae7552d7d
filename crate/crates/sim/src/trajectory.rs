use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::world::{AgentState, SteerMode};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub episode: usize,
    pub agent_id: usize,
    pub step: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
    pub reward: f64,
    pub status: &'static str,
}

impl TrajectoryRow {
    /// Row for `agent` with its world-frame velocity.
    pub fn new(episode: usize, agent_id: usize, step: usize, agent: &AgentState, mode: SteerMode, reward: f64) -> Self {
        let v = agent.world_velocity(mode);
        TrajectoryRow {
            episode,
            agent_id,
            step,
            x: agent.position.x,
            y: agent.position.y,
            z: agent.position.z,
            yaw: agent.yaw,
            vx: v.x,
            vy: v.y,
            vz: v.z,
            reward,
            status: agent.status.name(),
        }
    }
}

pub fn write_trajectory_csv(rows: &[TrajectoryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
