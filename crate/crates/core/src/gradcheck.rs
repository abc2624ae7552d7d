//! Finite-difference battery over every tape op and every training loss, at 64-bit.

use cnav_autodiff::{check_param_grads, FdConfig, OpTag, ParamId, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::NetConfig;
use crate::error::Result;
use crate::model::{gaussian, Inputs, Model};
use crate::nets::{ACTION_DIM, AUX_DIM};
use crate::replay::Batch;
use crate::sac::{actor_loss, alpha_loss, critic_loss, critic_target, rae_loss};
use crate::cfs;

pub const TOLERANCE: f64 = 1e-4;
const LOSS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub component: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<String>,
    pub pass: bool,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("non-empty")
}

/// Values in `[lo, hi]` with a random sign, keeping clear of kinks at zero.
fn signed(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let mut t = random(rng, shape, lo, hi);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// `sum(y * w)` with a fixed random `w`, so every output entry matters.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> cnav_autodiff::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, tape.shape(y), -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum_all(p)
}

type OpFn = fn(&mut Tape<f64>, &[Var]) -> cnav_autodiff::Result<Var>;

struct OpCase {
    tag: OpTag,
    inputs: Vec<Tensor<f64>>,
    f: OpFn,
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let mut cases = Vec::new();
    let mut add = |tag: OpTag, inputs: Vec<Tensor<f64>>, f: OpFn| cases.push(OpCase { tag, inputs, f });
    add(OpTag::MatMul, vec![signed(rng, &[3, 4], 0.1, 1.0), signed(rng, &[4, 2], 0.1, 1.0)], |t, v| t.matmul(v[0], v[1]));
    add(OpTag::Add, vec![signed(rng, &[3, 4], 0.1, 1.0), signed(rng, &[4], 0.1, 1.0)], |t, v| t.add(v[0], v[1]));
    add(OpTag::Sub, vec![signed(rng, &[3, 4], 0.1, 1.0), signed(rng, &[4], 0.1, 1.0)], |t, v| t.sub(v[0], v[1]));
    add(OpTag::Mul, vec![signed(rng, &[3, 4], 0.1, 1.0), signed(rng, &[4], 0.1, 1.0)], |t, v| t.mul(v[0], v[1]));
    add(OpTag::Div, vec![signed(rng, &[3, 4], 0.1, 1.0), random(rng, &[4], 0.5, 1.5)], |t, v| t.div(v[0], v[1]));
    add(OpTag::Relu, vec![signed(rng, &[3, 4], 0.1, 1.0)], |t, v| t.relu(v[0]));
    add(OpTag::Tanh, vec![signed(rng, &[3, 4], 0.0, 2.0)], |t, v| t.tanh(v[0]));
    add(OpTag::Exp, vec![signed(rng, &[3, 4], 0.0, 1.5)], |t, v| t.exp(v[0]));
    add(OpTag::Log, vec![random(rng, &[3, 4], 0.3, 2.0)], |t, v| t.log(v[0]));
    add(OpTag::Square, vec![signed(rng, &[3, 4], 0.0, 2.0)], |t, v| t.square(v[0]));
    add(OpTag::Softplus, vec![signed(rng, &[3, 4], 0.0, 3.0)], |t, v| t.softplus(v[0]));
    add(OpTag::Scale, vec![signed(rng, &[3, 4], 0.0, 1.0)], |t, v| t.scale(v[0], -1.7));
    add(OpTag::AddScalar, vec![signed(rng, &[3, 4], 0.0, 1.0)], |t, v| {
        let y = t.add_scalar(v[0], 0.3)?;
        t.square(y)
    });
    add(
        OpTag::Conv2d,
        vec![signed(rng, &[2, 2, 5, 5], 0.0, 1.0), signed(rng, &[3, 2, 3, 3], 0.0, 0.5), signed(rng, &[3], 0.0, 0.5)],
        |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2),
    );
    add(
        OpTag::ConvTranspose2d,
        vec![signed(rng, &[2, 3, 2, 2], 0.0, 1.0), signed(rng, &[3, 2, 3, 3], 0.0, 0.5), signed(rng, &[2], 0.0, 0.5)],
        |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), 2, (5, 5)),
    );
    add(OpTag::Sum, vec![signed(rng, &[2, 3, 4], 0.0, 1.0)], |t, v| {
        let y = t.sum(v[0], &[1])?;
        t.square(y)
    });
    add(OpTag::Mean, vec![signed(rng, &[2, 3, 4], 0.0, 1.0)], |t, v| {
        let y = t.mean(v[0], &[0, 2])?;
        t.square(y)
    });
    add(OpTag::Concat, vec![signed(rng, &[3, 2], 0.0, 1.0), signed(rng, &[3, 4], 0.0, 1.0)], |t, v| t.concat(&[v[0], v[1]]));
    add(OpTag::Slice, vec![signed(rng, &[3, 6], 0.0, 1.0)], |t, v| {
        let y = t.slice_last(v[0], 1, 3)?;
        t.square(y)
    });
    // Second input is offset away from the first so no pair ties.
    add(OpTag::Minimum, vec![random(rng, &[3, 4], 0.0, 1.0), random(rng, &[3, 4], 1.2, 2.0)], |t, v| {
        let b = t.scale(v[1], -1.0)?;
        let b = t.add_scalar(b, 2.2)?;
        t.minimum(v[0], b)
    });
    add(OpTag::Reshape, vec![signed(rng, &[3, 4], 0.0, 1.0)], |t, v| {
        let y = t.reshape(v[0], &[2, 6])?;
        t.square(y)
    });
    add(OpTag::Gate, vec![signed(rng, &[3, 4], 0.05, 1.0)], |t, v| t.gate(v[0], 0.1));
    cases
}

fn row(component: impl Into<String>, r: cnav_autodiff::FdReport) -> GradcheckRow {
    GradcheckRow {
        component: component.into(),
        max_rel_err: r.max_rel_err,
        checked: r.checked,
        worst: r.worst.map(|(n, i)| format!("{n}[{i}]")),
        pass: r.max_rel_err < TOLERANCE,
    }
}

/// One row per tape op.
pub fn check_ops(corrupt: Option<OpTag>) -> Result<Vec<GradcheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6AD);
    let cfg = FdConfig { corrupt, ..FdConfig::default() };
    let mut rows = Vec::new();
    for (k, case) in op_cases(&mut rng).into_iter().enumerate() {
        let mut store = ParamStore::<f64>::new();
        let ids: Vec<ParamId> = case.inputs.iter().enumerate().map(|(i, t)| store.insert(format!("x{i}"), t.clone())).collect();
        let f = case.f;
        let report = check_param_grads(
            &store,
            &ids,
            |s, t| {
                let vars: Vec<Var> = ids.iter().map(|&id| t.param(s, id)).collect();
                let y = f(t, &vars)?;
                project(t, y, 100 + k as u64)
            },
            cfg,
        )?;
        rows.push(row(format!("op/{}", case.tag.name()), report));
    }
    Ok(rows)
}

const HW: (usize, usize) = (12, 16);

fn tiny_net(scale: usize, cfs_eps: f64) -> NetConfig {
    let s = scale.max(1);
    NetConfig {
        latent_dim: 4 * s,
        conv_channels: vec![2 * s, 2 * s, 2 * s],
        actor_hidden: 8 * s,
        critic_hidden: 8 * s,
        cfs_min_hidden: 4,
        cfs_eps,
        ..NetConfig::default()
    }
}

fn tiny_batch(n: usize, rng: &mut ChaCha8Rng) -> Batch<f64> {
    let inputs = |rng: &mut ChaCha8Rng| Inputs {
        depth: random(rng, &[n, 1, HW.0, HW.1], 0.05, 1.0),
        aux: random(rng, &[n, AUX_DIM], -1.0, 1.0),
    };
    let obs = inputs(rng);
    let next = inputs(rng);
    Batch {
        obs,
        action: random(rng, &[n, ACTION_DIM], -0.9, 0.9),
        reward: random(rng, &[n], -1.0, 1.0),
        done: Tensor::new(vec![n], (0..n).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect()).expect("non-empty"),
        next,
    }
}

/// Model whose store parameters are exactly those passed by the checker.
fn with_store(m: &Model<f64>, s: &ParamStore<f64>) -> Model<f64> {
    Model { store: s.clone(), ..m.clone() }
}

/// Tiny conv stacks often start with every unit of some layer switched off,
/// which would hide the encoder from the check. Redraw until all of it is live.
fn live_model(scale: usize, rng: &mut ChaCha8Rng) -> Result<(Model<f64>, Batch<f64>)> {
    for _ in 0..64 {
        let m = Model::<f64>::new(&tiny_net(scale, 1e-8), HW, 10.0, 0.2, rng);
        let b = tiny_batch(3, rng);
        let ids = m.encoder_ids();
        let mut tape = Tape::with_trainable(ids.iter().copied());
        let loss = rae_loss(&m, &mut tape, &b.obs.depth, 0.0, 0.0, true)?;
        tape.backward(loss)?;
        let mut store = m.store.clone();
        store.zero_all_grads();
        tape.write_param_grads(&mut store);
        let live = ids.iter().all(|&id| store.get(id).grad.as_ref().is_some_and(|g| g.iter().any(|v| *v != 0.0)));
        if live {
            return Ok((m, b));
        }
    }
    Err(crate::error::CoreError::Config("no tiny model with a live encoder in 64 draws".into()))
}

/// One row per training loss, on tiny networks scaled by `scale`.
pub fn check_losses(scale: usize, corrupt: Option<OpTag>) -> Result<Vec<GradcheckRow>> {
    // Deep-layer gradients of the tiny networks are small, so the floor sits
    // well below them and above the central-difference round-off.
    let cfg = FdConfig { corrupt, floor: LOSS_FLOOR, ..FdConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(0x10_55);
    let mut rows = Vec::new();

    // A large eps keeps the mask in its sensitive range so its gradient is not vanishingly small.
    for (label, eps) in [("actor+cfs", 1e-8), ("actor+cfs (eps 0.05)", 0.05)] {
        let m = Model::<f64>::new(&tiny_net(scale, eps), HW, 10.0, 0.2, &mut rng);
        let b = tiny_batch(3, &mut rng);
        let noise = gaussian::<f64>(&mut rng, &[3, ACTION_DIM]);
        let ids = [m.actor_ids(), m.cfs_ids()].concat();
        let r = check_param_grads(
            &m.store,
            &ids,
            |s, t| Ok(actor_loss(&with_store(&m, s), t, &b.obs, &noise, 0.2).map_err(to_ad)?.loss),
            cfg,
        )?;
        rows.push(row(format!("loss/{label}"), r));
    }

    let (m, b) = live_model(scale, &mut rng)?;
    let noise = gaussian::<f64>(&mut rng, &[3, ACTION_DIM]);
    let y = critic_target(&m, &b, &noise, 0.99)?;
    let ids = [m.critic_ids(), m.encoder_ids()].concat();
    let r = check_param_grads(&m.store, &ids, |s, t| Ok(critic_loss(&with_store(&m, s), t, &b, &y).map_err(to_ad)?.loss), cfg)?;
    rows.push(row("loss/critic", r));

    let ids = [m.encoder_ids(), m.decoder_ids()].concat();
    let r = check_param_grads(
        &m.store,
        &ids,
        |s, t| rae_loss(&with_store(&m, s), t, &b.obs.depth, 1e-2, 1e-2, true).map_err(to_ad),
        cfg,
    )?;
    rows.push(row("loss/rae", r));

    let r = check_param_grads(&m.store, &[m.log_alpha], |s, t| alpha_loss(t, s, m.log_alpha, -1.3, -3.0).map_err(to_ad), cfg)?;
    rows.push(row("loss/alpha", r));

    let mut store = ParamStore::<f64>::new();
    let module = cfs::CfsModule::new(&mut store, "cfs", 6, 4, 0.05, 0.3, 0.2, &mut rng);
    let feats = random(&mut rng, &[4, 6], 0.1, 1.0);
    let r = check_param_grads(
        &store,
        &module.ids(),
        |s, t| {
            let m = module.mask(t, s).map_err(to_ad)?;
            let x = t.constant(feats.clone());
            let y = cfs::apply(t, x, m).map_err(to_ad)?;
            project(t, y, 7)
        },
        cfg,
    )?;
    rows.push(row("cfs/mask", r));
    Ok(rows)
}

fn to_ad(e: crate::error::CoreError) -> cnav_autodiff::AutodiffError {
    match e {
        crate::error::CoreError::Autodiff(a) => a,
        other => cnav_autodiff::AutodiffError::InvalidArgument { op: "loss", msg: other.to_string() },
    }
}

/// Every op and every loss.
pub fn run(scale: usize, corrupt: Option<OpTag>) -> Result<Vec<GradcheckRow>> {
    let mut rows = check_ops(corrupt)?;
    rows.extend(check_losses(scale, corrupt)?);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_is_covered() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tags: Vec<OpTag> = op_cases(&mut rng).iter().map(|c| c.tag).collect();
        for t in OpTag::ALL {
            assert!(tags.contains(&t), "{} has no case", t.name());
        }
    }

    #[test]
    fn battery_passes() {
        let rows = run(1, None).unwrap();
        for r in &rows {
            assert!(r.pass, "{r:?}");
        }
        assert!(rows.iter().any(|r| r.component.starts_with("loss/actor+cfs")));
    }

    #[test]
    fn corrupted_adjoint_names_component() {
        let rows = run(1, Some(OpTag::Softplus)).unwrap();
        let failed: Vec<&str> = rows.iter().filter(|r| !r.pass).map(|r| r.component.as_str()).collect();
        assert!(failed.contains(&"op/softplus"), "{failed:?}");
        assert!(failed.iter().any(|c| c.starts_with("loss/actor")), "{failed:?}");
        assert!(!failed.contains(&"op/matmul"));
    }
}
