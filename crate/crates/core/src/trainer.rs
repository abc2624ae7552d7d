//! Pooled multi-agent SAC training loop.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cnav_autodiff::AutodiffError;
use cnav_sim::{build_scene, Action, Observation, World};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::cfs::sparsity;
use crate::checkpoint::{self, build_model, BestEval, Loaded, RngState, TrainState};
use crate::config::RunConfig;
use crate::error::{CoreError, Result};
use crate::eval::{episode_spec, mix, run_suite, EvalRow};
use crate::model::{normalized_depth, Model};
use crate::nets::ACTION_DIM;
use crate::replay::{ReplayBuffer, Transition};
use crate::sac::{self, Optimizers, UpdateStats};

/// Agent-episodes in the rolling training success rate.
const SUCCESS_WINDOW: usize = 100;

struct Episode {
    world: World,
    obs: Vec<Observation>,
    returns: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub updates: usize,
    pub episodes: usize,
    pub train_success_rate: f64,
    pub last_eval: Option<EvalRow>,
    pub best_eval: Option<BestEval>,
    pub final_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Model<f32>,
    pub opt: Optimizers,
    pub buffer: ReplayBuffer,
    pub step: usize,
    pub episode: usize,
    pub updates: usize,
    env_rng: ChaCha8Rng,
    act_rng: ChaCha8Rng,
    update_rng: ChaCha8Rng,
    current: Option<Episode>,
    recent: VecDeque<bool>,
    last_eval: Option<EvalRow>,
    best: Option<BestEval>,
    best_model: Option<Model<f32>>,
    out_dir: Option<PathBuf>,
    log: Option<BufWriter<File>>,
}

fn to3(v: &cnav_sim::Vec3) -> [f32; 3] {
    [v.x as f32, v.y as f32, v.z as f32]
}

impl Trainer {
    /// Fresh trainer. With an output directory, the resolved config is echoed to `config.json`
    /// and metrics go to `metrics.jsonl`.
    pub fn new(config: RunConfig, out_dir: Option<&Path>) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let mut init_rng = ChaCha8Rng::seed_from_u64(mix(seed, 1));
        let model = build_model(&config, &mut init_rng);
        let opt = Optimizers::new(&model, &config.trainer);
        let rngs = [2, 3, 4].map(|k| ChaCha8Rng::seed_from_u64(mix(seed, k)));
        let [env_rng, act_rng, update_rng] = rngs;
        Self::assemble(config, model, opt, (0, 0, 0), None, [env_rng, act_rng, update_rng], out_dir, false)
    }

    /// Continues from a checkpoint. The replay buffer restarts empty.
    pub fn resume(loaded: Loaded, out_dir: Option<&Path>) -> Result<Self> {
        let Loaded { config, model, optimizers, state } = loaded;
        let state = state.ok_or_else(|| CoreError::Incompatible("checkpoint has no trainer state".into()))?;
        let opt = optimizers.ok_or_else(|| CoreError::Incompatible("checkpoint has no optimizer state".into()))?;
        let rngs = [state.env_rng.restore()?, state.act_rng.restore()?, state.update_rng.restore()?];
        Self::assemble(config, model, opt, (state.step, state.episode, state.updates), state.best, rngs, out_dir, true)
    }

    fn assemble(
        config: RunConfig,
        model: Model<f32>,
        opt: Optimizers,
        (step, episode, updates): (usize, usize, usize),
        best: Option<BestEval>,
        [env_rng, act_rng, update_rng]: [ChaCha8Rng; 3],
        out_dir: Option<&Path>,
        append: bool,
    ) -> Result<Self> {
        let pixels = config.world.depth_h * config.world.depth_w;
        let buffer = ReplayBuffer::new(config.trainer.buffer_capacity, pixels);
        let log = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)
                    .map_err(|source| CoreError::File { what: "output directory", path: dir.to_path_buf(), source })?;
                let cfg_path = dir.join("config.json");
                std::fs::write(&cfg_path, config.to_json_pretty())
                    .map_err(|source| CoreError::File { what: "config echo", path: cfg_path, source })?;
                let path = dir.join("metrics.jsonl");
                let file = std::fs::OpenOptions::new()
                    .create(true)
                    .write(true)
                    .append(append)
                    .truncate(!append)
                    .open(&path)
                    .map_err(|source| CoreError::File { what: "metrics log", path, source })?;
                Some(BufWriter::new(file))
            }
            None => None,
        };
        Ok(Trainer {
            config,
            model,
            opt,
            buffer,
            step,
            episode,
            updates,
            env_rng,
            act_rng,
            update_rng,
            current: None,
            recent: VecDeque::new(),
            last_eval: None,
            best,
            best_model: None,
            out_dir: out_dir.map(Path::to_path_buf),
            log,
        })
    }

    fn emit(&mut self, value: serde_json::Value) -> Result<()> {
        if let Some(log) = self.log.as_mut() {
            serde_json::to_writer(&mut *log, &value)?;
            log.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            step: self.step,
            episode: self.episode,
            updates: self.updates,
            env_rng: RngState::capture(&self.env_rng),
            act_rng: RngState::capture(&self.act_rng),
            update_rng: RngState::capture(&self.update_rng),
            best: self.best,
        }
    }

    pub fn save_checkpoint(&mut self, path: &Path) -> Result<()> {
        if let Some(log) = self.log.as_mut() {
            log.flush()?;
        }
        checkpoint::save(path, &self.config, &self.model, Some(&self.opt), Some(&self.state()))
    }

    fn start_episode(&mut self) -> Result<()> {
        let spec = episode_spec(&self.config.scenario, self.env_rng.random(), self.episode as u64);
        let world = build_scene(&spec, &self.config.world)?.into_world(self.config.world.clone())?;
        let n = world.agents().len();
        let obs = (0..n).map(|i| world.observe(i)).collect();
        self.current = Some(Episode { world, obs, returns: vec![0.0; n] });
        Ok(())
    }

    pub fn train_success_rate(&self) -> f64 {
        if self.recent.is_empty() {
            return 0.0;
        }
        100.0 * self.recent.iter().filter(|&&s| s).count() as f64 / self.recent.len() as f64
    }

    /// One environment step for every active agent, followed by one update once warm.
    pub fn step_once(&mut self) -> Result<Option<UpdateStats>> {
        if self.current.is_none() {
            self.start_episode()?;
        }
        let tc = &self.config.trainer;
        let warm = self.step >= tc.warmup_steps;
        let depth_max = self.config.world.depth_range_max;
        let ep = self.current.as_mut().expect("episode started");
        let n = ep.obs.len();
        let active: Vec<usize> = (0..n).filter(|&i| ep.world.agents()[i].status.is_active()).collect();
        let chosen: Vec<[f32; ACTION_DIM]> = if warm {
            let refs: Vec<_> = active.iter().map(|&i| &ep.obs[i]).collect();
            let inputs = self.model.inputs(&refs)?;
            self.model.act(&inputs, false, &mut self.act_rng)?
        } else {
            active.iter().map(|_| std::array::from_fn(|_| self.act_rng.random_range(-1.0f32..=1.0))).collect()
        };
        let mut actions = vec![Action::new(0.0, 0.0, 0.0); n];
        for (&i, a) in active.iter().zip(&chosen) {
            actions[i] = Action::from_slice(a);
        }
        let results = ep.world.step(&actions)?;
        for (&i, a) in active.iter().zip(&chosen) {
            let Some(s) = &results[i] else { continue };
            let prev = &ep.obs[i];
            let t = Transition {
                depth: normalized_depth(prev, depth_max),
                goal_body: to3(&prev.goal_body),
                velocity: to3(&prev.velocity),
                action: *a,
                reward: s.reward.total() as f32,
                next_depth: normalized_depth(&s.observation, depth_max),
                next_goal_body: to3(&s.observation.goal_body),
                next_velocity: to3(&s.observation.velocity),
                done: s.terminal,
            };
            self.buffer.push(t)?;
            ep.returns[i] += s.reward.total();
        }
        for (i, s) in results.into_iter().enumerate() {
            if let Some(s) = s {
                ep.obs[i] = s.observation;
            }
        }
        self.step += 1;

        let stats = if warm && self.buffer.len() >= self.config.trainer.batch_size {
            Some(self.update()?)
        } else {
            None
        };

        if self.current.as_ref().is_some_and(|e| e.world.all_done()) {
            self.finish_episode()?;
        }
        let tc = self.config.trainer.clone();
        if let Some(dir) = self.out_dir.clone() {
            if self.step.is_multiple_of(tc.checkpoint_every) {
                self.save_checkpoint(&dir.join(format!("step_{}.cnav", self.step)))?;
            }
        }
        if tc.eval_every > 0 && self.step.is_multiple_of(tc.eval_every) && warm {
            self.evaluate(tc.eval_episodes)?;
        }
        Ok(stats)
    }

    fn finish_episode(&mut self) -> Result<()> {
        let ep = self.current.take().expect("episode running");
        let outcomes: Vec<&str> = ep.world.agents().iter().map(|a| a.status.name()).collect();
        for a in ep.world.agents() {
            self.recent.push_back(a.status == cnav_sim::AgentStatus::Arrived);
            if self.recent.len() > SUCCESS_WINDOW {
                self.recent.pop_front();
            }
        }
        let line = json!({
            "kind": "episode",
            "step": self.step,
            "episode": self.episode,
            "returns": ep.returns,
            "outcomes": outcomes,
            "success_rate": self.train_success_rate(),
        });
        self.emit(line)?;
        self.episode += 1;
        Ok(())
    }

    fn update(&mut self) -> Result<UpdateStats> {
        let tc = self.config.trainer.clone();
        let idx = self.buffer.sample_indices(tc.batch_size, &mut self.update_rng)?;
        let batch = self.buffer.batch::<f32>(&idx, self.model.image_hw, self.config.net.goal_scale)?;
        let stats = match sac::update(&mut self.model, &mut self.opt, &tc, &batch, &mut self.update_rng) {
            Ok(s) => s,
            Err(CoreError::Autodiff(AutodiffError::NonFinite { op })) => return Err(self.dump_batch(op, &idx)),
            Err(e) => return Err(e),
        };
        self.updates += 1;
        if self.model.actor.cfs_enabled {
            for (k, m) in self.model.mask_values()?.iter().enumerate() {
                let line = json!({"kind": "mask", "step": self.step, "module_index": k, "zero_fraction": sparsity(m)});
                self.emit(line)?;
            }
        }
        if self.updates.is_multiple_of(tc.log_every) {
            let mut line = serde_json::to_value(stats)?;
            line["kind"] = json!("update");
            line["step"] = json!(self.step);
            line["updates"] = json!(self.updates);
            self.emit(line)?;
        }
        Ok(stats)
    }

    fn dump_batch(&self, op: &'static str, idx: &[usize]) -> CoreError {
        let dir = self.out_dir.clone().unwrap_or_else(std::env::temp_dir);
        let path = dir.join(format!("nonfinite_step_{}.json", self.step));
        let items: Vec<&Transition> = idx.iter().map(|&i| self.buffer.get(i)).collect();
        let body = json!({"step": self.step, "op": op, "indices": idx, "batch": items});
        match std::fs::write(&path, body.to_string()) {
            Ok(()) => CoreError::NonFinite { what: op.to_string(), step: self.step, dump: path },
            Err(source) => CoreError::File { what: "non-finite batch dump", path, source },
        }
    }

    /// Deterministic-policy evaluation on the training scenario.
    pub fn evaluate(&mut self, episodes: usize) -> Result<EvalRow> {
        let seed = mix(self.config.seed, 0xE7A1 ^ self.step as u64);
        let res = run_suite(&self.model, &self.config.world, std::slice::from_ref(&self.config.scenario), episodes, seed, false)?;
        let row = res.rows.into_iter().next().expect("one scenario");
        let mut line = serde_json::to_value(&row)?;
        line["kind"] = json!("eval");
        line["step"] = json!(self.step);
        self.emit(line)?;
        self.last_eval = Some(row.clone());

        let cand = BestEval { step: self.step, success_rate: row.success_rate, spl: row.spl };
        if cand.beats(self.best.as_ref()) {
            self.best = Some(cand);
            self.best_model = Some(self.model.clone());
            if let Some(dir) = self.out_dir.clone() {
                self.save_checkpoint(&dir.join("best.cnav"))?;
            }
        }
        Ok(row)
    }

    pub fn best_eval(&self) -> Option<BestEval> {
        self.best
    }

    /// Snapshot taken at the best periodic evaluation of this process. A resumed run holds
    /// none until it evaluates better than the restored record.
    pub fn best_model(&self) -> Option<&Model<f32>> {
        self.best_model.as_ref()
    }

    /// Runs until `total_steps` environment steps and writes a final checkpoint.
    pub fn run(&mut self) -> Result<TrainSummary> {
        while self.step < self.config.trainer.total_steps {
            self.step_once()?;
        }
        let final_checkpoint = match self.out_dir.clone() {
            Some(dir) => {
                let path = dir.join(format!("step_{}.cnav", self.step));
                self.save_checkpoint(&path)?;
                Some(path)
            }
            None => None,
        };
        if let Some(log) = self.log.as_mut() {
            log.flush()?;
        }
        Ok(TrainSummary {
            steps: self.step,
            updates: self.updates,
            episodes: self.episode,
            train_success_rate: self.train_success_rate(),
            last_eval: self.last_eval.clone(),
            best_eval: self.best,
            best_checkpoint: self.out_dir.as_ref().map(|d| d.join("best.cnav")).filter(|p| self.best.is_some() && p.exists()),
            final_checkpoint,
        })
    }
}
