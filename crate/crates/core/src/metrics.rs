//! Navigation metrics over per-agent episode records.

use cnav_sim::{AgentState, AgentStatus};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub agent_id: usize,
    pub success: bool,
    /// Straight-line start to goal distance.
    pub shortest: f64,
    pub path_length: f64,
    /// Path length over active flight time.
    pub mean_speed: f64,
    pub outcome: String,
}

impl AgentRecord {
    pub fn from_agent(agent_id: usize, a: &AgentState, dt: f64) -> Self {
        let time = a.steps as f64 * dt;
        AgentRecord {
            agent_id,
            success: a.status == AgentStatus::Arrived,
            shortest: (a.goal - a.start).norm(),
            path_length: a.path_length,
            mean_speed: if time > 0.0 { a.path_length / time } else { 0.0 },
            outcome: a.status.name().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub scenario: String,
    pub seed: u64,
    pub agents: Vec<AgentRecord>,
}

fn all_agents(records: &[EpisodeRecord]) -> impl Iterator<Item = &AgentRecord> {
    records.iter().flat_map(|e| e.agents.iter())
}

/// Percentage of (agent, episode) pairs that reached their goal.
pub fn success_rate(records: &[EpisodeRecord]) -> Result<f64> {
    let n = all_agents(records).count();
    if n == 0 {
        return Err(CoreError::Metrics("success rate of an empty record set".into()));
    }
    let ok = all_agents(records).filter(|a| a.success).count();
    Ok(100.0 * ok as f64 / n as f64)
}

/// Success weighted by path length, in percent, for `n_agents` agents over `n_episodes` episodes.
pub fn spl(records: &[EpisodeRecord], n_agents: usize, n_episodes: usize) -> Result<f64> {
    if n_agents == 0 || n_episodes == 0 {
        return Err(CoreError::Metrics("SPL needs at least one agent and one episode".into()));
    }
    if records.len() != n_episodes || records.iter().any(|e| e.agents.len() != n_agents) {
        return Err(CoreError::Metrics(format!("SPL expects {n_episodes} episodes of {n_agents} agents")));
    }
    let sum: f64 = all_agents(records)
        .filter(|a| a.success)
        .map(|a| {
            let denom = a.path_length.max(a.shortest);
            if denom > 0.0 {
                a.shortest / denom
            } else {
                1.0
            }
        })
        .fold(0.0, |acc, x| acc + x);
    Ok(100.0 * sum / (n_agents * n_episodes) as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    Some((m, var.sqrt()))
}

/// Extra distance over successful pairs; `None` when nothing succeeded.
pub fn extra_distance(records: &[EpisodeRecord]) -> Option<(f64, f64)> {
    let extra: Vec<f64> = all_agents(records).filter(|a| a.success).map(|a| a.path_length - a.shortest).collect();
    mean_std(&extra)
}

/// Per-episode mean of agent speeds, then mean and std across episodes.
pub fn average_speed(records: &[EpisodeRecord]) -> Result<(f64, f64)> {
    let per_episode: Vec<f64> = records
        .iter()
        .filter(|e| !e.agents.is_empty())
        .map(|e| e.agents.iter().map(|a| a.mean_speed).sum::<f64>() / e.agents.len() as f64)
        .collect();
    mean_std(&per_episode).ok_or_else(|| CoreError::Metrics("average speed of an empty record set".into()))
}
