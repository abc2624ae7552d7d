//! Episode rollouts and scenario-suite evaluation.

use std::path::Path;

use cnav_sim::{build_scene, Action, ScenarioSpec, TrajectoryRow, WorldConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{CoreError, Result};
use crate::metrics::{average_speed, extra_distance, spl, success_rate, AgentRecord, EpisodeRecord};
use crate::model::Model;

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Scenario with its layout seed replaced by one derived for `episode`.
pub fn episode_spec(spec: &ScenarioSpec, seed: u64, episode: u64) -> ScenarioSpec {
    ScenarioSpec { seed: mix(mix(spec.seed, seed), episode), ..spec.clone() }
}

pub fn check_compatible(model: &Model<f32>, world: &WorldConfig) -> Result<()> {
    if model.image_hw != (world.depth_h, world.depth_w) {
        return Err(CoreError::Incompatible(format!(
            "model expects {}x{} depth images, world renders {}x{}",
            model.image_hw.0, model.image_hw.1, world.depth_h, world.depth_w
        )));
    }
    if model.depth_max != world.depth_range_max {
        return Err(CoreError::Incompatible(format!(
            "model normalizes depth by {}, world range is {}",
            model.depth_max, world.depth_range_max
        )));
    }
    Ok(())
}

/// Runs one episode with the shared policy controlling every agent.
pub fn run_episode(
    model: &Model<f32>,
    world_cfg: &WorldConfig,
    spec: &ScenarioSpec,
    episode: usize,
    deterministic: bool,
    rng: &mut ChaCha8Rng,
    mut trajectory: Option<&mut Vec<TrajectoryRow>>,
) -> Result<EpisodeRecord> {
    let mut world = build_scene(spec, world_cfg)?.into_world(world_cfg.clone())?;
    let mode = world_cfg.steer_mode;
    let n = world.agents().len();
    let mut obs: Vec<_> = (0..n).map(|i| world.observe(i)).collect();
    if let Some(t) = trajectory.as_deref_mut() {
        for (i, a) in world.agents().iter().enumerate() {
            t.push(TrajectoryRow::new(episode, i, 0, a, mode, 0.0));
        }
    }
    while !world.all_done() {
        let active: Vec<usize> = (0..n).filter(|&i| world.agents()[i].status.is_active()).collect();
        let refs: Vec<_> = active.iter().map(|&i| &obs[i]).collect();
        let inputs = model.inputs(&refs)?;
        let chosen = model.act(&inputs, deterministic, rng)?;
        let mut actions = vec![Action::new(0.0, 0.0, 0.0); n];
        for (&i, a) in active.iter().zip(&chosen) {
            actions[i] = Action::from_slice(a);
        }
        let steps = world.step(&actions)?;
        for (i, s) in steps.into_iter().enumerate() {
            if let Some(s) = s {
                if let Some(t) = trajectory.as_deref_mut() {
                    t.push(TrajectoryRow::new(episode, i, world.step_count(), &world.agents()[i], mode, s.reward.total()));
                }
                obs[i] = s.observation;
            }
        }
    }
    let agents = world.agents().iter().enumerate().map(|(i, a)| AgentRecord::from_agent(i, a, world_cfg.dt)).collect();
    Ok(EpisodeRecord { scenario: spec.label(), seed: spec.seed, agents })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub scene: String,
    pub success_rate: f64,
    pub spl: f64,
    /// Undefined (empty in CSV) without any success.
    pub extra_mean: Option<f64>,
    pub extra_std: Option<f64>,
    pub speed_mean: f64,
    pub speed_std: f64,
}

impl EvalRow {
    pub fn from_records(scene: &str, records: &[EpisodeRecord], n_agents: usize) -> Result<Self> {
        let extra = extra_distance(records);
        let (speed_mean, speed_std) = average_speed(records)?;
        Ok(EvalRow {
            scene: scene.to_string(),
            success_rate: success_rate(records)?,
            spl: spl(records, n_agents, records.len())?,
            extra_mean: extra.map(|e| e.0),
            extra_std: extra.map(|e| e.1),
            speed_mean,
            speed_std,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub rows: Vec<EvalRow>,
    pub episodes: Vec<Vec<EpisodeRecord>>,
    pub trajectories: Vec<Vec<TrajectoryRow>>,
}

/// Deterministic-policy evaluation of every scenario for `episodes` episodes each.
pub fn run_suite(
    model: &Model<f32>,
    world_cfg: &WorldConfig,
    suite: &[ScenarioSpec],
    episodes: usize,
    seed: u64,
    keep_trajectories: bool,
) -> Result<SuiteResult> {
    check_compatible(model, world_cfg)?;
    if episodes == 0 {
        return Err(CoreError::Config("evaluation needs at least one episode".into()));
    }
    let mut out = SuiteResult { rows: Vec::new(), episodes: Vec::new(), trajectories: Vec::new() };
    for spec in suite {
        spec.validate(world_cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, spec.seed));
        let mut records = Vec::with_capacity(episodes);
        let mut rows = Vec::new();
        for k in 0..episodes {
            let s = episode_spec(spec, seed, k as u64);
            let traj = if keep_trajectories { Some(&mut rows) } else { None };
            records.push(run_episode(model, world_cfg, &s, k, true, &mut rng, traj)?);
        }
        out.rows.push(EvalRow::from_records(&spec.label(), &records, spec.n_agents)?);
        out.episodes.push(records);
        out.trajectories.push(rows);
    }
    Ok(out)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_table_csv(rows: &[EvalRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["scene", "success_rate", "spl", "extra_mean", "extra_std", "speed_mean", "speed_std"])?;
    for r in rows {
        w.write_record([
            r.scene.clone(),
            r.success_rate.to_string(),
            r.spl.to_string(),
            opt(r.extra_mean),
            opt(r.extra_std),
            r.speed_mean.to_string(),
            r.speed_std.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_table_json(rows: &[EvalRow], path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(rows)?)?;
    Ok(())
}

/// Row-wise difference `ours - baseline`, matched by scene name.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaRow {
    pub scene: String,
    pub success_rate: f64,
    pub baseline_success_rate: f64,
    pub delta_success_rate: f64,
    pub spl: f64,
    pub baseline_spl: f64,
    pub delta_spl: f64,
}

pub fn delta_rows(ours: &[EvalRow], baseline: &[EvalRow]) -> Result<Vec<DeltaRow>> {
    ours.iter()
        .map(|r| {
            let b = baseline
                .iter()
                .find(|b| b.scene == r.scene)
                .ok_or_else(|| CoreError::Metrics(format!("baseline has no row for scene `{}`", r.scene)))?;
            Ok(DeltaRow {
                scene: r.scene.clone(),
                success_rate: r.success_rate,
                baseline_success_rate: b.success_rate,
                delta_success_rate: r.success_rate - b.success_rate,
                spl: r.spl,
                baseline_spl: b.spl,
                delta_spl: r.spl - b.spl,
            })
        })
        .collect()
}

pub fn write_delta_csv(rows: &[DeltaRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
