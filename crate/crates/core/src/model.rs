//! All networks of one agent in a single parameter store.

use cnav_autodiff::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use cnav_sim::Observation;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::NetConfig;
use crate::error::{CoreError, Result};
use crate::nets::{sample_action, Actor, Critic, Decoder, Encoder, ACTION_DIM, AUX_DIM};

pub const LOG_ALPHA: &str = "log_alpha";
pub const TARGET_PREFIX: &str = "target.";

#[derive(Debug, Clone)]
pub struct Model<F: Real> {
    pub store: ParamStore<F>,
    pub net: NetConfig,
    pub image_hw: (usize, usize),
    pub depth_max: f64,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub actor: Actor,
    pub critic: Critic,
    pub target_encoder: Encoder,
    pub target_critic: Critic,
    pub log_alpha: ParamId,
}

/// Network inputs for a batch of observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Inputs<F: Real> {
    /// `[N, 1, H, W]`, depth divided by the sensor range.
    pub depth: Tensor<F>,
    /// `[N, AUX_DIM]`
    pub aux: Tensor<F>,
}

/// Depth divided by the sensor range, as stored in the replay buffer.
pub fn normalized_depth(obs: &Observation, depth_max: f64) -> Vec<f32> {
    let inv = 1.0 / depth_max;
    obs.depth.data.iter().map(|&d| (d as f64 * inv) as f32).collect()
}

/// `[g / max(|g|, 1), |g| * goal_scale, velocity]`: the goal direction stays
/// informative right up to arrival while the distance term keeps the range.
pub fn aux_features(goal_body: [f32; 3], velocity: [f32; 3], goal_scale: f64) -> [f32; AUX_DIM] {
    let [x, y, z] = goal_body;
    let dist = (x * x + y * y + z * z).sqrt();
    let k = 1.0 / dist.max(1.0);
    [x * k, y * k, z * k, dist * goal_scale as f32, velocity[0], velocity[1], velocity[2]]
}

impl<F: Real> Model<F> {
    pub fn new(net: &NetConfig, image_hw: (usize, usize), depth_max: f64, init_alpha: f64, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, "enc", image_hw, net, rng);
        let decoder = Decoder::new(&mut store, "dec", image_hw, net, rng);
        let feat = net.latent_dim + AUX_DIM;
        let actor = Actor::new(&mut store, "actor", feat, net, rng);
        let critic = Critic::new(&mut store, "critic", feat, net.critic_hidden, rng);
        let mut target_rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::from_rng(rng);
        let target_encoder = Encoder::new(&mut store, "target.enc", image_hw, net, &mut target_rng);
        let target_critic = Critic::new(&mut store, "target.critic", feat, net.critic_hidden, &mut target_rng);
        let log_alpha = store.insert(LOG_ALPHA, Tensor::from_vec(vec![F::of(init_alpha.ln())]));
        let mut model = Model {
            store,
            net: net.clone(),
            image_hw,
            depth_max,
            encoder,
            decoder,
            actor,
            critic,
            target_encoder,
            target_critic,
            log_alpha,
        };
        model.sync_targets(F::one(), F::one()).expect("targets mirror online networks");
        model
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            store: self.store.cast(),
            net: self.net.clone(),
            image_hw: self.image_hw,
            depth_max: self.depth_max,
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            actor: self.actor.clone(),
            critic: self.critic.clone(),
            target_encoder: self.target_encoder.clone(),
            target_critic: self.target_critic.clone(),
            log_alpha: self.log_alpha,
        }
    }

    /// `(online, target)` parameter pairs.
    fn target_pairs(&self, online: &[ParamId]) -> Vec<(ParamId, ParamId)> {
        online
            .iter()
            .map(|&id| {
                let name = format!("{TARGET_PREFIX}{}", self.store.name(id));
                (id, self.store.id(&name).expect("target mirrors online"))
            })
            .collect()
    }

    /// Moves targets toward the online networks.
    pub fn sync_targets(&mut self, tau_critic: F, tau_encoder: F) -> Result<()> {
        let critic = self.target_pairs(&self.critic.ids());
        let enc = self.target_pairs(&self.encoder.ids());
        self.store.soft_update(&critic, tau_critic)?;
        self.store.soft_update(&enc, tau_encoder)?;
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        self.store.get(self.log_alpha).item().as_f64().exp()
    }

    pub fn encoder_ids(&self) -> Vec<ParamId> {
        self.encoder.ids()
    }

    pub fn decoder_ids(&self) -> Vec<ParamId> {
        self.decoder.ids()
    }

    pub fn critic_ids(&self) -> Vec<ParamId> {
        self.critic.ids()
    }

    pub fn actor_ids(&self) -> Vec<ParamId> {
        self.actor.mlp_ids()
    }

    pub fn cfs_ids(&self) -> Vec<ParamId> {
        self.actor.cfs_ids()
    }

    pub fn inputs(&self, obs: &[&Observation]) -> Result<Inputs<F>> {
        let (h, w) = self.image_hw;
        let n = obs.len();
        if n == 0 {
            return Err(CoreError::EmptyBatch);
        }
        let mut depth = Vec::with_capacity(n * h * w);
        let mut aux = Vec::with_capacity(n * AUX_DIM);
        for o in obs {
            if (o.depth.height, o.depth.width) != (h, w) {
                return Err(CoreError::Shape(format!(
                    "depth image is {}x{}, model expects {h}x{w}",
                    o.depth.height, o.depth.width
                )));
            }
            depth.extend(normalized_depth(o, self.depth_max).into_iter().map(|d| F::of(d as f64)));
            let g = o.goal_body.map(|v| v as f32);
            let v = o.velocity.map(|v| v as f32);
            aux.extend(aux_features([g.x, g.y, g.z], [v.x, v.y, v.z], self.net.goal_scale).map(|v| F::of(v as f64)));
        }
        Ok(Inputs { depth: Tensor::new(vec![n, 1, h, w], depth)?, aux: Tensor::new(vec![n, AUX_DIM], aux)? })
    }

    /// `concat(z, aux)` from the online encoder.
    pub fn features(&self, tape: &mut Tape<F>, depth: &Tensor<F>, aux: &Tensor<F>) -> Result<Var> {
        let x = tape.constant(depth.clone());
        let z = self.encoder.forward(tape, &self.store, x)?;
        let a = tape.constant(aux.clone());
        Ok(tape.concat(&[z, a])?)
    }

    /// Actions for a batch of observations: `tanh(mean)` when deterministic, sampled otherwise.
    pub fn act(&self, inputs: &Inputs<F>, deterministic: bool, rng: &mut impl Rng) -> Result<Vec<[F; ACTION_DIM]>> {
        let mut tape = Tape::no_grad();
        let feat = self.features(&mut tape, &inputs.depth, &inputs.aux)?;
        let out = self.actor.forward(&mut tape, &self.store, feat)?;
        let n = inputs.aux.shape()[0];
        let action = if deterministic {
            tape.tanh(out.mean)?
        } else {
            let noise = gaussian(rng, &[n, ACTION_DIM]);
            sample_action(&mut tape, out.mean, out.log_std, &noise)?.action
        };
        Ok(tape.data(action).chunks(ACTION_DIM).map(|c| [c[0], c[1], c[2]]).collect())
    }

    /// Current masks of every CFS module (ones-valued when pinned).
    pub fn mask_values(&self) -> Result<Vec<Vec<F>>> {
        self.actor
            .cfs
            .iter()
            .map(|c| {
                if self.actor.cfs_enabled {
                    c.mask_values(&self.store)
                } else {
                    Ok(vec![F::one(); c.channels])
                }
            })
            .collect()
    }
}

pub fn gaussian<F: Real>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<F> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            F::of(v)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("non-empty shape")
}
