//! Soft actor-critic losses and the joint update step.

use cnav_autodiff::{Adam, ParamId, ParamStore, Real, Tape, Tensor, Var};
use rand::Rng;
use serde::Serialize;

use crate::config::TrainerConfig;
use crate::error::{CoreError, Result};
use crate::model::{gaussian, Inputs, Model};
use crate::nets::{sample_action, ACTION_DIM};
use crate::replay::Batch;

/// Bootstrap target `r + gamma (1 - done) (min Q_target(o', a') - alpha log pi(a'|o'))`,
/// with `a'` drawn fresh from the current policy. Evaluated without gradients.
pub fn critic_target<F: Real>(m: &Model<F>, b: &Batch<F>, noise: &Tensor<F>, gamma: f64) -> Result<Tensor<F>> {
    let mut t = Tape::no_grad();
    let feat = m.features(&mut t, &b.next.depth, &b.next.aux)?;
    let out = m.actor.forward(&mut t, &m.store, feat)?;
    let s = sample_action(&mut t, out.mean, out.log_std, noise)?;
    let x = t.constant(b.next.depth.clone());
    let zt = m.target_encoder.forward(&mut t, &m.store, x)?;
    let aux = t.constant(b.next.aux.clone());
    let feat_t = t.concat(&[zt, aux])?;
    let (q1, q2) = m.target_critic.forward(&mut t, &m.store, feat_t, s.action)?;
    let alpha = m.alpha();
    let y: Vec<F> = t
        .data(q1)
        .iter()
        .zip(t.data(q2))
        .zip(t.data(s.log_prob))
        .zip(b.reward.data().iter().zip(b.done.data()))
        .map(|(((&a, &c), &lp), (&r, &d))| {
            let v = a.min(c).as_f64() - alpha * lp.as_f64();
            F::of(r.as_f64() + gamma * (1.0 - d.as_f64()) * v)
        })
        .collect();
    Ok(Tensor::new(vec![y.len()], y)?)
}

#[derive(Debug, Clone, Copy)]
pub struct CriticOut {
    pub loss: Var,
    pub q1: Var,
    pub q2: Var,
}

/// `mean (Q1 - y)^2 + mean (Q2 - y)^2` on the online encoder and critics.
pub fn critic_loss<F: Real>(m: &Model<F>, tape: &mut Tape<F>, b: &Batch<F>, y: &Tensor<F>) -> Result<CriticOut> {
    if b.is_empty() {
        return Err(CoreError::EmptyBatch);
    }
    let feat = m.features(tape, &b.obs.depth, &b.obs.aux)?;
    let a = tape.constant(b.action.clone());
    let (q1, q2) = m.critic.forward(tape, &m.store, feat, a)?;
    let y = tape.constant(y.clone());
    let mut loss = None;
    for q in [q1, q2] {
        let d = tape.sub(q, y)?;
        let d2 = tape.square(d)?;
        let l = tape.mean_all(d2)?;
        loss = Some(match loss {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    Ok(CriticOut { loss: loss.expect("two heads"), q1, q2 })
}

#[derive(Debug, Clone)]
pub struct ActorLossOut {
    pub loss: Var,
    pub log_prob: Var,
    pub masks: Vec<Var>,
}

/// `mean (alpha log pi(a|o) - min(Q1, Q2)(o, a))` with `a` reparameterized.
/// The latent is detached, so only the actor and its masks receive gradient
/// when the critic is recorded as constant.
pub fn actor_loss<F: Real>(
    m: &Model<F>,
    tape: &mut Tape<F>,
    obs: &Inputs<F>,
    noise: &Tensor<F>,
    alpha: f64,
) -> Result<ActorLossOut> {
    let x = tape.constant(obs.depth.clone());
    let z = m.encoder.forward(tape, &m.store, x)?;
    let z = tape.detach(z);
    let aux = tape.constant(obs.aux.clone());
    let feat = tape.concat(&[z, aux])?;
    let out = m.actor.forward(tape, &m.store, feat)?;
    let s = sample_action(tape, out.mean, out.log_std, noise)?;
    let (q1, q2) = m.critic.forward(tape, &m.store, feat, s.action)?;
    let q = tape.minimum(q1, q2)?;
    let ent = tape.scale(s.log_prob, F::of(alpha))?;
    let per = tape.sub(ent, q)?;
    let loss = tape.mean_all(per)?;
    Ok(ActorLossOut { loss, log_prob: s.log_prob, masks: out.masks })
}

/// Reconstruction MSE plus latent and weight penalties.
pub fn rae_loss<F: Real>(
    m: &Model<F>,
    tape: &mut Tape<F>,
    depth: &Tensor<F>,
    lambda_z: f64,
    lambda_phi: f64,
    penalize_decoder: bool,
) -> Result<Var> {
    let x = tape.constant(depth.clone());
    let z = m.encoder.forward(tape, &m.store, x)?;
    let rec = m.decoder.forward(tape, &m.store, z)?;
    let d = tape.sub(rec, x)?;
    let d2 = tape.square(d)?;
    let mut loss = tape.mean_all(d2)?;
    if lambda_z != 0.0 {
        let z2 = tape.square(z)?;
        let norms = tape.sum(z2, &[1])?;
        let mean = tape.mean_all(norms)?;
        let pen = tape.scale(mean, F::of(lambda_z))?;
        loss = tape.add(loss, pen)?;
    }
    if lambda_phi != 0.0 {
        let ids = if penalize_decoder { m.decoder.weight_ids() } else { m.encoder.weight_ids() };
        for id in ids {
            let w = tape.param(&m.store, id);
            let w2 = tape.square(w)?;
            let s = tape.sum_all(w2)?;
            let pen = tape.scale(s, F::of(lambda_phi))?;
            loss = tape.add(loss, pen)?;
        }
    }
    Ok(loss)
}

/// `-log_alpha * (mean log pi + target_entropy)`; its gradient is `entropy - target`.
pub fn alpha_loss<F: Real>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    log_alpha: ParamId,
    mean_log_prob: f64,
    target_entropy: f64,
) -> Result<Var> {
    let la = tape.param(store, log_alpha);
    let l = tape.scale(la, F::of(-(mean_log_prob + target_entropy)))?;
    Ok(tape.sum_all(l)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub rae_loss: f64,
    pub alpha: f64,
    pub entropy: f64,
    pub q_mean: f64,
    pub target_mean: f64,
}

fn mean<F: Real>(v: &[F]) -> f64 {
    v.iter().map(|x| x.as_f64()).sum::<f64>() / v.len() as f64
}

/// Optimizer groups. The encoder is trained by both the critic and the autoencoder.
#[derive(Debug, Clone)]
pub struct Optimizers {
    pub critic: Adam<f32>,
    pub actor: Adam<f32>,
    pub cfs: Adam<f32>,
    pub rae: Adam<f32>,
    pub alpha: Adam<f32>,
}

impl Optimizers {
    pub fn new(m: &Model<f32>, cfg: &TrainerConfig) -> Self {
        let critic_ids = [m.critic_ids(), m.encoder_ids()].concat();
        let rae_ids = [m.encoder_ids(), m.decoder_ids()].concat();
        Optimizers {
            critic: Adam::new(&m.store, critic_ids, cfg.critic),
            actor: Adam::new(&m.store, m.actor_ids(), cfg.actor),
            cfs: Adam::new(&m.store, m.cfs_ids(), cfg.cfs),
            rae: Adam::new(&m.store, rae_ids, cfg.rae),
            alpha: Adam::new(&m.store, vec![m.log_alpha], cfg.alpha),
        }
    }

    pub fn named(&self) -> [(&'static str, &Adam<f32>); 5] {
        [("opt.critic", &self.critic), ("opt.actor", &self.actor), ("opt.cfs", &self.cfs), ("opt.rae", &self.rae), ("opt.alpha", &self.alpha)]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Adam<f32>); 5] {
        [
            ("opt.critic", &mut self.critic),
            ("opt.actor", &mut self.actor),
            ("opt.cfs", &mut self.cfs),
            ("opt.rae", &mut self.rae),
            ("opt.alpha", &mut self.alpha),
        ]
    }
}

fn backward_into<F: Real>(tape: &mut Tape<F>, loss: Var, store: &mut ParamStore<F>) -> Result<f64> {
    let value = tape.data(loss)[0].as_f64();
    if !value.is_finite() {
        return Err(CoreError::Autodiff(cnav_autodiff::AutodiffError::NonFinite { op: "loss" }));
    }
    tape.backward(loss)?;
    tape.write_param_grads(store);
    Ok(value)
}

/// One critic, actor (+masks), temperature and autoencoder update, then target smoothing.
pub fn update(
    m: &mut Model<f32>,
    opt: &mut Optimizers,
    cfg: &TrainerConfig,
    b: &Batch<f32>,
    rng: &mut impl Rng,
) -> Result<UpdateStats> {
    let n = b.len();
    if n == 0 {
        return Err(CoreError::EmptyBatch);
    }
    m.store.zero_all_grads();
    let alpha = m.alpha();

    let noise_next = gaussian(rng, &[n, ACTION_DIM]);
    let y = critic_target(m, b, &noise_next, cfg.gamma)?;
    let mut tape = Tape::with_trainable([m.critic_ids(), m.encoder_ids()].concat());
    let c = critic_loss(m, &mut tape, b, &y)?;
    let q_mean = 0.5 * (mean(tape.data(c.q1)) + mean(tape.data(c.q2)));
    let critic_value = backward_into(&mut tape, c.loss, &mut m.store)?;
    opt.critic.step(&mut m.store)?;

    let noise = gaussian(rng, &[n, ACTION_DIM]);
    let mut tape = Tape::with_trainable([m.actor_ids(), m.cfs_ids()].concat());
    let a = actor_loss(m, &mut tape, &b.obs, &noise, alpha)?;
    let mean_lp = mean(tape.data(a.log_prob));
    let actor_value = backward_into(&mut tape, a.loss, &mut m.store)?;
    opt.actor.step(&mut m.store)?;
    if m.actor.cfs_enabled {
        opt.cfs.step(&mut m.store)?;
    }

    let mut tape = Tape::with_trainable([m.log_alpha]);
    let l = alpha_loss(&mut tape, &m.store, m.log_alpha, mean_lp, cfg.target_entropy)?;
    backward_into(&mut tape, l, &mut m.store)?;
    opt.alpha.step(&mut m.store)?;

    let mut tape = Tape::with_trainable([m.encoder_ids(), m.decoder_ids()].concat());
    let r = rae_loss(m, &mut tape, &b.obs.depth, cfg.lambda_z, cfg.lambda_phi, cfg.penalize_decoder)?;
    let rae_value = backward_into(&mut tape, r, &mut m.store)?;
    opt.rae.step(&mut m.store)?;

    m.sync_targets(cfg.tau as f32, cfg.encoder_tau as f32)?;
    m.store.zero_all_grads();

    Ok(UpdateStats {
        critic_loss: critic_value,
        actor_loss: actor_value,
        rae_loss: rae_value,
        alpha: m.alpha(),
        entropy: -mean_lp,
        q_mean,
        target_mean: mean(y.data()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::NetConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const HW: (usize, usize) = (12, 16);

    fn tiny_net() -> NetConfig {
        NetConfig {
            latent_dim: 4,
            conv_channels: vec![2, 2, 2],
            actor_hidden: 8,
            critic_hidden: 8,
            cfs_min_hidden: 4,
            ..NetConfig::default()
        }
    }

    fn tiny_model<F: Real>(seed: u64) -> Model<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Model::new(&tiny_net(), HW, 10.0, 0.2, &mut rng)
    }

    fn batch<F: Real>(n: usize, seed: u64, done: bool) -> Batch<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = HW.0 * HW.1;
        let mut u = |k: usize, lo: f64, hi: f64| -> Vec<F> { (0..k).map(|_| F::of(rng.random_range(lo..hi))).collect() };
        let inputs = |u: &mut dyn FnMut(usize, f64, f64) -> Vec<F>| Inputs {
            depth: Tensor::new(vec![n, 1, HW.0, HW.1], u(n * px, 0.0, 1.0)).unwrap(),
            aux: Tensor::new(vec![n, crate::nets::AUX_DIM], u(n * crate::nets::AUX_DIM, -1.0, 1.0)).unwrap(),
        };
        let obs = inputs(&mut u);
        let next = inputs(&mut u);
        Batch {
            obs,
            action: Tensor::new(vec![n, ACTION_DIM], u(n * ACTION_DIM, -0.9, 0.9)).unwrap(),
            reward: Tensor::new(vec![n], u(n, -1.0, 1.0)).unwrap(),
            done: Tensor::full(&[n], if done { F::one() } else { F::zero() }),
            next,
        }
    }

    fn grads_present<F: Real>(store: &ParamStore<F>, ids: &[ParamId]) -> bool {
        ids.iter().any(|&id| store.get(id).grad.as_ref().is_some_and(|g| g.iter().any(|v| *v != F::zero())))
    }

    fn grads_absent<F: Real>(store: &ParamStore<F>, ids: &[ParamId]) -> bool {
        ids.iter().all(|&id| store.get(id).grad.as_ref().is_none_or(|g| g.iter().all(|v| *v == F::zero())))
    }

    fn groups(m: &Model<f64>) -> Vec<(&'static str, Vec<ParamId>)> {
        vec![
            ("critic", m.critic_ids()),
            ("encoder", m.encoder_ids()),
            ("decoder", m.decoder_ids()),
            ("actor", m.actor_ids()),
            ("cfs", m.cfs_ids()),
            ("log_alpha", vec![m.log_alpha]),
        ]
    }

    fn check_routing(m: &mut Model<f64>, expect: &[&str], run: impl FnOnce(&mut Model<f64>)) {
        m.store.zero_all_grads();
        run(m);
        for (name, ids) in groups(m) {
            if expect.contains(&name) {
                assert!(grads_present(&m.store, &ids), "{name} should receive gradient");
            } else {
                assert!(grads_absent(&m.store, &ids), "{name} should not receive gradient");
            }
        }
    }

    #[test]
    fn gradient_routing_matrix() {
        let mut m = tiny_model::<f64>(1);
        let b = batch::<f64>(4, 2, false);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = gaussian::<f64>(&mut rng, &[4, ACTION_DIM]);
        let y = critic_target(&m, &b, &noise, 0.99).unwrap();
        check_routing(&mut m, &["critic", "encoder"], |m| {
            let mut t = Tape::with_trainable([m.critic_ids(), m.encoder_ids()].concat());
            let c = critic_loss(m, &mut t, &b, &y).unwrap();
            t.backward(c.loss).unwrap();
            t.write_param_grads(&mut m.store);
        });
        check_routing(&mut m, &["actor", "cfs"], |m| {
            let mut t = Tape::with_trainable([m.actor_ids(), m.cfs_ids()].concat());
            let a = actor_loss(m, &mut t, &b.obs, &noise, 0.2).unwrap();
            t.backward(a.loss).unwrap();
            t.write_param_grads(&mut m.store);
        });
        check_routing(&mut m, &["encoder", "decoder"], |m| {
            let mut t = Tape::with_trainable([m.encoder_ids(), m.decoder_ids()].concat());
            let l = rae_loss(m, &mut t, &b.obs.depth, 1e-3, 1e-3, true).unwrap();
            t.backward(l).unwrap();
            t.write_param_grads(&mut m.store);
        });
        check_routing(&mut m, &["log_alpha"], |m| {
            let mut t = Tape::with_trainable([m.log_alpha]);
            let l = alpha_loss(&mut t, &m.store, m.log_alpha, -1.0, -3.0).unwrap();
            t.backward(l).unwrap();
            t.write_param_grads(&mut m.store);
        });
    }

    #[test]
    fn actor_loss_never_reaches_encoder() {
        let mut m = tiny_model::<f64>(4);
        let b = batch::<f64>(3, 5, false);
        let noise = gaussian::<f64>(&mut ChaCha8Rng::seed_from_u64(6), &[3, ACTION_DIM]);
        // Every parameter trainable: only the detach keeps the encoder out.
        let mut t = Tape::new();
        let a = actor_loss(&m, &mut t, &b.obs, &noise, 0.2).unwrap();
        t.backward(a.loss).unwrap();
        t.write_param_grads(&mut m.store);
        assert!(grads_absent(&m.store, &m.encoder_ids()));
        assert!(grads_present(&m.store, &m.actor_ids()));
    }

    #[test]
    fn single_transition_critic_loss_by_hand() {
        let m = tiny_model::<f64>(7);
        let b = batch::<f64>(1, 8, false);
        let noise = gaussian::<f64>(&mut ChaCha8Rng::seed_from_u64(9), &[1, ACTION_DIM]);
        let gamma = 0.9;
        let y = critic_target(&m, &b, &noise, gamma).unwrap();

        // Evaluate each ingredient on its own tape and combine in plain arithmetic.
        let mut t = Tape::no_grad();
        let feat = m.features(&mut t, &b.next.depth, &b.next.aux).unwrap();
        let out = m.actor.forward(&mut t, &m.store, feat).unwrap();
        let s = sample_action(&mut t, out.mean, out.log_std, &noise).unwrap();
        let a_next = t.value(s.action).clone();
        let logp = t.data(s.log_prob)[0];
        let mut t = Tape::no_grad();
        let x = t.constant(b.next.depth.clone());
        let z = m.target_encoder.forward(&mut t, &m.store, x).unwrap();
        let aux = t.constant(b.next.aux.clone());
        let f = t.concat(&[z, aux]).unwrap();
        let a = t.constant(a_next);
        let (q1t, q2t) = m.target_critic.forward(&mut t, &m.store, f, a).unwrap();
        let v_bar = t.data(q1t)[0].min(t.data(q2t)[0]) - m.alpha() * logp;
        let target = b.reward.data()[0] + gamma * v_bar;
        assert!((y.data()[0] - target).abs() < 1e-12);

        let mut t = Tape::no_grad();
        let f = m.features(&mut t, &b.obs.depth, &b.obs.aux).unwrap();
        let a = t.constant(b.action.clone());
        let (q1, q2) = m.critic.forward(&mut t, &m.store, f, a).unwrap();
        let expect = (t.data(q1)[0] - target).powi(2) + (t.data(q2)[0] - target).powi(2);
        let mut t = Tape::no_grad();
        let c = critic_loss(&m, &mut t, &b, &y).unwrap();
        assert!((t.data(c.loss)[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn done_target_is_reward() {
        let m = tiny_model::<f64>(10);
        let b = batch::<f64>(5, 11, true);
        let noise = gaussian::<f64>(&mut ChaCha8Rng::seed_from_u64(12), &[5, ACTION_DIM]);
        let y = critic_target(&m, &b, &noise, 0.99).unwrap();
        assert_eq!(y.data(), b.reward.data());
    }

    #[test]
    fn q_loss_zero_at_target() {
        let m = tiny_model::<f64>(13);
        let b = batch::<f64>(3, 14, false);
        let mut t = Tape::no_grad();
        let f = m.features(&mut t, &b.obs.depth, &b.obs.aux).unwrap();
        let a = t.constant(b.action.clone());
        let (q1, _) = m.critic.forward(&mut t, &m.store, f, a).unwrap();
        let mut m2 = m.clone();
        // Make both heads identical so one target fits both.
        for (src, dst) in m.critic.q1.ids().into_iter().zip(m.critic.q2.ids()) {
            let v = m.store.get(src).clone();
            *m2.store.get_mut(dst) = v;
        }
        let y = t.value(q1).clone();
        let mut t = Tape::no_grad();
        let c = critic_loss(&m2, &mut t, &b, &y).unwrap();
        assert_eq!(t.data(c.loss)[0], 0.0);
    }

    fn actor_grads(m: &Model<f64>, b: &Batch<f64>, noise: &Tensor<f64>) -> Vec<f64> {
        let mut store = m.store.clone();
        store.zero_all_grads();
        let mut t = Tape::with_trainable([m.actor_ids(), m.cfs_ids()].concat());
        let a = actor_loss(m, &mut t, &b.obs, noise, 0.2).unwrap();
        t.backward(a.loss).unwrap();
        t.write_param_grads(&mut store);
        m.actor_ids()
            .into_iter()
            .chain(m.cfs_ids())
            .flat_map(|id| store.get(id).grad.clone().unwrap_or_else(|| vec![0.0; store.get(id).len()]))
            .collect()
    }

    #[test]
    fn constant_q_shift_leaves_actor_gradient() {
        let m = tiny_model::<f64>(15);
        let b = batch::<f64>(4, 16, false);
        let noise = gaussian::<f64>(&mut ChaCha8Rng::seed_from_u64(17), &[4, ACTION_DIM]);
        let g0 = actor_grads(&m, &b, &noise);
        let mut shifted = m.clone();
        for head in [&m.critic.q1, &m.critic.q2] {
            let bias = head.out.b;
            shifted.store.get_mut(bias).data_mut()[0] += 3.5;
        }
        let g1 = actor_grads(&shifted, &b, &noise);
        for (a, c) in g0.iter().zip(&g1) {
            assert!((a - c).abs() <= 1e-12 * (1.0 + a.abs()), "{a} vs {c}");
        }
    }

    #[test]
    fn alpha_gradient_sign_and_zero() {
        let mut m = tiny_model::<f64>(18);
        let grad = |m: &mut Model<f64>, mean_lp: f64| {
            m.store.zero_all_grads();
            let mut t = Tape::with_trainable([m.log_alpha]);
            let l = alpha_loss(&mut t, &m.store, m.log_alpha, mean_lp, -3.0).unwrap();
            t.backward(l).unwrap();
            t.write_param_grads(&mut m.store);
            m.store.get(m.log_alpha).grad.as_ref().map(|g| g[0]).unwrap_or(0.0)
        };
        assert_eq!(grad(&mut m, 3.0), 0.0);
        // Entropy 1 above the target -3: the gradient is positive, so descent lowers alpha.
        assert!(grad(&mut m, 2.0) > 0.0);
        assert!(grad(&mut m, 4.0) < 0.0);
    }

    #[test]
    fn alpha_stays_positive_under_fuzz() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut store = ParamStore::<f32>::new();
        let la = store.insert("log_alpha", Tensor::from_vec(vec![0.1f32.ln()]));
        let mut opt = Adam::new(&store, vec![la], cnav_autodiff::AdamConfig::with_lr(0.05));
        for _ in 0..10_000 {
            let mut t = Tape::with_trainable([la]);
            let lp: f64 = rng.random_range(-50.0..50.0);
            let l = alpha_loss(&mut t, &store, la, lp, -3.0).unwrap();
            t.backward(l).unwrap();
            t.write_param_grads(&mut store);
            opt.step(&mut store).unwrap();
            let alpha = (store.get(la).item() as f64).exp();
            assert!(alpha > 0.0 && alpha.is_finite());
        }
    }

    #[test]
    fn rae_penalties_vanish_when_switched_off() {
        let m = tiny_model::<f64>(20);
        let b = batch::<f64>(2, 21, false);
        let mut t = Tape::no_grad();
        let l = rae_loss(&m, &mut t, &b.obs.depth, 0.0, 0.0, true).unwrap();
        let x = t.constant(b.obs.depth.clone());
        let z = m.encoder.forward(&mut t, &m.store, x).unwrap();
        let r = m.decoder.forward(&mut t, &m.store, z).unwrap();
        let mse = t.data(r).iter().zip(b.obs.depth.data()).map(|(a, c)| (a - c) * (a - c)).sum::<f64>()
            / b.obs.depth.len() as f64;
        assert!((t.data(l)[0] - mse).abs() < 1e-14);
    }

    #[test]
    fn rae_overfits_one_batch() {
        let mut m = tiny_model::<f32>(22);
        let b = batch::<f32>(8, 23, false);
        let ids = [m.encoder_ids(), m.decoder_ids()].concat();
        let mut opt = Adam::new(&m.store, ids.clone(), cnav_autodiff::AdamConfig::with_lr(3e-3));
        let mut losses = Vec::new();
        for _ in 0..500 {
            let mut t = Tape::with_trainable(ids.clone());
            let l = rae_loss(&m, &mut t, &b.obs.depth, 1e-6, 1e-7, true).unwrap();
            losses.push(t.data(l)[0] as f64);
            t.backward(l).unwrap();
            t.write_param_grads(&mut m.store);
            opt.step(&mut m.store).unwrap();
        }
        let smooth: Vec<f64> = losses.chunks(50).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        for w in smooth.windows(2) {
            assert!(w[1] <= w[0] * 1.001, "smoothed loss rose: {smooth:?}");
        }
        assert!(smooth.last().unwrap() < &(smooth[0] * 0.5));
    }

    #[test]
    fn update_runs_and_keeps_targets_lagging() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mut m = tiny_model::<f32>(24);
        let cfg = TrainerConfig::default();
        let mut opt = Optimizers::new(&m, &cfg);
        let b = batch::<f32>(4, 25, false);
        let before = m.clone();
        let s = update(&mut m, &mut opt, &cfg, &b, &mut rng).unwrap();
        assert!(s.alpha > 0.0 && s.critic_loss.is_finite());
        let id = m.critic_ids()[0];
        let tid = m.store.id(&format!("target.{}", m.store.name(id))).unwrap();
        for ((&t1, &t0), &o1) in m.store.get(tid).data().iter().zip(before.store.get(tid).data()).zip(m.store.get(id).data()) {
            let expect = (1.0 - cfg.tau as f32) * t0 + cfg.tau as f32 * o1;
            assert!((t1 - expect).abs() <= 1e-6);
        }
    }
}
