//! `.cnav` checkpoints: every parameter, optimizer moments, config and trainer counters.

use std::path::Path;

use cnav_autodiff::{Checkpoint, CheckpointWriter};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CoreError, Result};
use crate::model::Model;
use crate::sac::Optimizers;

const FORMAT: &str = "cnav-checkpoint";
const VERSION: u64 = 1;

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    /// Decimal, since JSON numbers cannot hold 128 bits.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 =
            self.word_pos.parse().map_err(|_| CoreError::Incompatible(format!("bad RNG position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub episode: usize,
    pub updates: usize,
    pub env_rng: RngState,
    pub act_rng: RngState,
    pub update_rng: RngState,
    #[serde(default)]
    pub best: Option<BestEval>,
}

/// Highest periodic evaluation seen so far, ranked by success rate then SPL.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestEval {
    pub step: usize,
    pub success_rate: f64,
    pub spl: f64,
}

impl BestEval {
    pub fn beats(&self, other: Option<&BestEval>) -> bool {
        other.is_none_or(|o| (self.success_rate, self.spl) > (o.success_rate, o.spl))
    }
}

#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    pub model: Model<f32>,
    pub optimizers: Option<Optimizers>,
    pub state: Option<TrainState>,
}

pub fn to_bytes(
    config: &RunConfig,
    model: &Model<f32>,
    optimizers: Option<&Optimizers>,
    state: Option<&TrainState>,
) -> Result<Vec<u8>> {
    let meta = serde_json::json!({
        "format": FORMAT,
        "version": VERSION,
        "config": config,
        "state": state,
    });
    let mut w = CheckpointWriter::new().meta(meta);
    for (name, t) in model.store.iter() {
        w.add(name, t)?;
    }
    if let Some(opt) = optimizers {
        for (prefix, adam) in opt.named() {
            for (name, t) in adam.export(&model.store, prefix) {
                w.add(name, &t)?;
            }
        }
    }
    Ok(w.to_bytes()?)
}

pub fn save(
    path: &Path,
    config: &RunConfig,
    model: &Model<f32>,
    optimizers: Option<&Optimizers>,
    state: Option<&TrainState>,
) -> Result<()> {
    let bytes = to_bytes(config, model, optimizers, state)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)
        .and_then(|_| std::fs::rename(&tmp, path))
        .map_err(|source| CoreError::File { what: "checkpoint", path: path.to_path_buf(), source })
}

/// Rebuilds the model from the stored config and overwrites every parameter.
pub fn from_checkpoint(ck: &Checkpoint) -> Result<Loaded> {
    let meta = ck.meta();
    if meta.get("format").and_then(|v| v.as_str()) != Some(FORMAT) {
        return Err(CoreError::Incompatible("not a cnav checkpoint".into()));
    }
    if meta.get("version").and_then(|v| v.as_u64()) != Some(VERSION) {
        return Err(CoreError::Incompatible(format!("unsupported checkpoint version {}", meta["version"])));
    }
    let config: RunConfig = serde_json::from_value(meta["config"].clone())
        .map_err(|e| CoreError::Incompatible(format!("stored config: {e}")))?;
    let state: Option<TrainState> = serde_json::from_value(meta["state"].clone())
        .map_err(|e| CoreError::Incompatible(format!("stored trainer state: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = build_model(&config, &mut rng);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        let t = ck.tensor::<f32>(&name)?;
        let dst = model.store.get_mut(id);
        if t.shape() != dst.shape() {
            return Err(CoreError::Incompatible(format!(
                "parameter {name} has shape {:?}, config implies {:?}",
                t.shape(),
                dst.shape()
            )));
        }
        dst.data_mut().copy_from_slice(t.data());
    }
    let optimizers = if ck.entries().iter().any(|e| e.name.starts_with("opt.")) {
        let mut opt = Optimizers::new(&model, &config.trainer);
        for (prefix, adam) in opt.named_mut() {
            adam.import(&model.store, prefix, |n| ck.tensor::<f32>(n))?;
        }
        Some(opt)
    } else {
        None
    };
    Ok(Loaded { config, model, optimizers, state })
}

pub fn load(path: &Path) -> Result<Loaded> {
    let bytes = std::fs::read(path).map_err(|source| CoreError::File { what: "checkpoint", path: path.to_path_buf(), source })?;
    from_checkpoint(&Checkpoint::from_bytes(&bytes)?)
}

pub fn build_model(config: &RunConfig, rng: &mut ChaCha8Rng) -> Model<f32> {
    Model::new(
        &config.net,
        (config.world.depth_h, config.world.depth_w),
        config.world.depth_range_max,
        config.trainer.init_alpha,
        rng,
    )
}
