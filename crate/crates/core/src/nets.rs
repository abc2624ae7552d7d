//! Encoder, decoder, CFS-equipped actor and twin critics.

use cnav_autodiff::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use rand::Rng;

use crate::cfs::{self, CfsModule};
use crate::config::NetConfig;
use crate::error::{CoreError, Result};

pub const ACTION_DIM: usize = 3;
/// Scaled body-frame goal (3) followed by body-frame velocity (3).
pub const AUX_DIM: usize = 7;

fn uniform<F: Real>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<F> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::of(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("non-empty shape")
}

/// Dense layer `x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Uniform fan-in init scaled by `gain`.
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = gain / (fan_in as f64).sqrt();
        let w = store.insert(format!("{name}.w"), uniform(rng, &[fan_in, fan_out], bound));
        let b = store.insert(format!("{name}.b"), uniform(rng, &[fan_out], bound));
        Linear { w, b, fan_in, fan_out }
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        Ok(tape.add(y, b)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
}

const STRIDE: usize = 2;

fn kernel_for(extent: usize) -> usize {
    if extent >= 3 && extent % 2 == 1 {
        3
    } else if extent >= 2 {
        2
    } else {
        1
    }
}

/// Stride-2 valid conv stack; odd extents take a 3-wide kernel so no row or column is dropped.
pub fn plan_convs(hw: (usize, usize), channels: &[usize]) -> Vec<ConvShape> {
    let mut out = Vec::with_capacity(channels.len());
    let (mut h, mut w) = hw;
    let mut c_in = 1;
    for &c_out in channels {
        let (kh, kw) = (kernel_for(h), kernel_for(w));
        let o = ((h - kh) / STRIDE + 1, (w - kw) / STRIDE + 1);
        out.push(ConvShape { c_in, c_out, kh, kw, in_hw: (h, w), out_hw: o });
        (h, w) = o;
        c_in = c_out;
    }
    out
}

#[derive(Debug, Clone)]
struct Conv {
    k: ParamId,
    b: ParamId,
    shape: ConvShape,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    convs: Vec<Conv>,
    fc: Linear,
    pub image_hw: (usize, usize),
    pub latent_dim: usize,
}

impl Encoder {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        image_hw: (usize, usize),
        cfg: &NetConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let mut convs = Vec::new();
        for (i, s) in plan_convs(image_hw, &cfg.conv_channels).into_iter().enumerate() {
            let bound = 1.0 / ((s.c_in * s.kh * s.kw) as f64).sqrt();
            let k = store.insert(format!("{name}.conv{i}.k"), uniform(rng, &[s.c_out, s.c_in, s.kh, s.kw], bound));
            let b = store.insert(format!("{name}.conv{i}.b"), uniform(rng, &[s.c_out], bound));
            convs.push(Conv { k, b, shape: s });
        }
        let last = convs.last().expect("at least one conv layer").shape;
        let flat = last.c_out * last.out_hw.0 * last.out_hw.1;
        let fc = Linear::new(store, &format!("{name}.fc"), flat, cfg.latent_dim, 1.0, rng);
        Encoder { convs, fc, image_hw, latent_dim: cfg.latent_dim }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.convs.iter().flat_map(|c| [c.k, c.b]).collect();
        ids.extend(self.fc.ids());
        ids
    }

    /// `x: [N, 1, H, W]` normalized depth to `z: [N, latent]` in (-1, 1).
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 1 || (shape[2], shape[3]) != self.image_hw {
            return Err(CoreError::Shape(format!(
                "encoder expects [N, 1, {}, {}], got {shape:?}",
                self.image_hw.0, self.image_hw.1
            )));
        }
        let n = shape[0];
        let mut h = x;
        for c in &self.convs {
            let k = tape.param(store, c.k);
            let b = tape.param(store, c.b);
            h = tape.conv2d(h, k, Some(b), STRIDE)?;
            h = tape.relu(h)?;
        }
        let flat = tape.value(h).len() / n;
        let h = tape.reshape(h, &[n, flat])?;
        let z = self.fc.forward(tape, store, h)?;
        Ok(tape.tanh(z)?)
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    fc: Linear,
    deconvs: Vec<Conv>,
    seed_shape: (usize, usize, usize),
    pub latent_dim: usize,
}

impl Decoder {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        image_hw: (usize, usize),
        cfg: &NetConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let plan = plan_convs(image_hw, &cfg.conv_channels);
        let last = *plan.last().expect("at least one conv layer");
        let seed_shape = (last.c_out, last.out_hw.0, last.out_hw.1);
        let flat = seed_shape.0 * seed_shape.1 * seed_shape.2;
        let fc = Linear::new(store, &format!("{name}.fc"), cfg.latent_dim, flat, 1.0, rng);
        let mut deconvs = Vec::new();
        for (i, s) in plan.iter().rev().enumerate() {
            // Mirror of the encoder layer: c_out -> c_in, out_hw -> in_hw.
            let mirrored = ConvShape { c_in: s.c_out, c_out: s.c_in, kh: s.kh, kw: s.kw, in_hw: s.out_hw, out_hw: s.in_hw };
            let bound = 1.0 / ((s.c_out * s.kh * s.kw) as f64).sqrt();
            let k = store.insert(format!("{name}.deconv{i}.k"), uniform(rng, &[s.c_out, s.c_in, s.kh, s.kw], bound));
            let b = store.insert(format!("{name}.deconv{i}.b"), uniform(rng, &[s.c_in], bound));
            deconvs.push(Conv { k, b, shape: mirrored });
        }
        Decoder { fc, deconvs, seed_shape, latent_dim: cfg.latent_dim }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.fc.ids().to_vec();
        ids.extend(self.deconvs.iter().flat_map(|c| [c.k, c.b]));
        ids
    }

    /// Weight tensors (not biases) for the weight penalty.
    pub fn weight_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.fc.w];
        ids.extend(self.deconvs.iter().map(|c| c.k));
        ids
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, z: Var) -> Result<Var> {
        let shape = tape.shape(z).to_vec();
        if shape.len() != 2 || shape[1] != self.latent_dim {
            return Err(CoreError::Shape(format!("decoder expects [N, {}], got {shape:?}", self.latent_dim)));
        }
        let n = shape[0];
        let h = self.fc.forward(tape, store, z)?;
        let h = tape.relu(h)?;
        let (c, hh, ww) = self.seed_shape;
        let mut h = tape.reshape(h, &[n, c, hh, ww])?;
        let last = self.deconvs.len() - 1;
        for (i, d) in self.deconvs.iter().enumerate() {
            let k = tape.param(store, d.k);
            let b = tape.param(store, d.b);
            h = tape.conv_transpose2d(h, k, Some(b), STRIDE, d.shape.out_hw)?;
            if i != last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

impl Encoder {
    pub(crate) fn weight_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.convs.iter().map(|c| c.k).collect();
        ids.push(self.fc.w);
        ids
    }
}

#[derive(Debug, Clone)]
pub struct ActorOut {
    pub mean: Var,
    pub log_std: Var,
    /// Masks actually applied, one per masked layer.
    pub masks: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Actor {
    pub l1: Linear,
    pub l2: Linear,
    pub out: Linear,
    pub cfs: Vec<CfsModule>,
    pub cfs_enabled: bool,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

impl Actor {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        input_dim: usize,
        cfg: &NetConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let h = cfg.actor_hidden;
        let l1 = Linear::new(store, &format!("{name}.l1"), input_dim, h, 1.0, rng);
        let l2 = Linear::new(store, &format!("{name}.l2"), h, h, 1.0, rng);
        let out = Linear::new(store, &format!("{name}.out"), h, 2 * ACTION_DIM, 0.1, rng);
        let cfs = (0..cfg.cfs_modules)
            .map(|i| {
                CfsModule::new(store, &format!("cfs{i}"), h, cfg.cfs_min_hidden, cfg.cfs_eps, cfg.cfs_w_init, cfg.cfs_w_jitter, rng)
            })
            .collect();
        Actor { l1, l2, out, cfs, cfs_enabled: cfg.cfs_enabled, log_std_min: cfg.log_std_min, log_std_max: cfg.log_std_max }
    }

    pub fn mlp_ids(&self) -> Vec<ParamId> {
        [self.l1.ids(), self.l2.ids(), self.out.ids()].concat()
    }

    pub fn cfs_ids(&self) -> Vec<ParamId> {
        self.cfs.iter().flat_map(|c| c.ids()).collect()
    }

    /// Learned masks, or none when the masks are pinned to ones.
    pub fn masks<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>) -> Result<Vec<Option<Var>>> {
        if !self.cfs_enabled {
            return Ok(vec![None; 2]);
        }
        let mut out = vec![None; 2];
        for (slot, c) in out.iter_mut().zip(&self.cfs) {
            *slot = Some(c.mask(tape, store)?);
        }
        Ok(out)
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, feat: Var) -> Result<ActorOut> {
        let masks = self.masks(tape, store)?;
        self.forward_with_masks(tape, store, feat, &masks)
    }

    /// Forward pass with explicit masks per hidden layer (`None` leaves the layer ungated).
    pub fn forward_with_masks<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        feat: Var,
        masks: &[Option<Var>],
    ) -> Result<ActorOut> {
        if !tape.data(feat).iter().all(|v| v.is_finite()) {
            return Err(CoreError::Shape("actor input is not finite".into()));
        }
        let mut applied = Vec::new();
        let mut h = feat;
        for (i, layer) in [&self.l1, &self.l2].into_iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            h = tape.relu(h)?;
            if let Some(Some(m)) = masks.get(i) {
                h = cfs::apply(tape, h, *m)?;
                applied.push(*m);
            }
        }
        let o = self.out.forward(tape, store, h)?;
        let mean = tape.slice_last(o, 0, ACTION_DIM)?;
        let raw = tape.slice_last(o, ACTION_DIM, ACTION_DIM)?;
        // Soft bound of log_std to [min, max].
        let t = tape.tanh(raw)?;
        let t = tape.add_scalar(t, F::one())?;
        let half_span = 0.5 * (self.log_std_max - self.log_std_min);
        let t = tape.scale(t, F::of(half_span))?;
        let log_std = tape.add_scalar(t, F::of(self.log_std_min))?;
        Ok(ActorOut { mean, log_std, masks: applied })
    }
}

#[derive(Debug, Clone)]
pub struct QHead {
    pub l1: Linear,
    pub l2: Linear,
    pub out: Linear,
}

impl QHead {
    fn new<F: Real>(store: &mut ParamStore<F>, name: &str, input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        QHead {
            l1: Linear::new(store, &format!("{name}.l1"), input_dim, hidden, 1.0, rng),
            l2: Linear::new(store, &format!("{name}.l2"), hidden, hidden, 1.0, rng),
            out: Linear::new(store, &format!("{name}.out"), hidden, 1, 1.0, rng),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [self.l1.ids(), self.l2.ids(), self.out.ids()].concat()
    }

    fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let n = tape.shape(x)[0];
        let h = self.l1.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        let h = self.l2.forward(tape, store, h)?;
        let h = tape.relu(h)?;
        let q = self.out.forward(tape, store, h)?;
        Ok(tape.reshape(q, &[n])?)
    }
}

#[derive(Debug, Clone)]
pub struct Critic {
    pub q1: QHead,
    pub q2: QHead,
}

impl Critic {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let dim = input_dim + ACTION_DIM;
        Critic {
            q1: QHead::new(store, &format!("{name}.q1"), dim, hidden, rng),
            q2: QHead::new(store, &format!("{name}.q2"), dim, hidden, rng),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [self.q1.ids(), self.q2.ids()].concat()
    }

    /// Both heads on `concat(feat, action)`, each `[N]`.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, feat: Var, action: Var) -> Result<(Var, Var)> {
        let x = tape.concat(&[feat, action])?;
        Ok((self.q1.forward(tape, store, x)?, self.q2.forward(tape, store, x)?))
    }
}

/// Reparameterized tanh-Gaussian sample and its log-density.
#[derive(Debug, Clone, Copy)]
pub struct Sampled {
    pub action: Var,
    /// `[N]`
    pub log_prob: Var,
}

/// `a = tanh(mean + exp(log_std) * noise)` with the change-of-variables
/// correction `log(1 - tanh(u)^2) = 2 (ln 2 - u - softplus(-2u))`.
pub fn sample_action<F: Real>(tape: &mut Tape<F>, mean: Var, log_std: Var, noise: &Tensor<F>) -> Result<Sampled> {
    if tape.shape(mean) != noise.shape() {
        return Err(CoreError::Shape(format!("noise {:?} vs mean {:?}", noise.shape(), tape.shape(mean))));
    }
    let std = tape.exp(log_std)?;
    let eps = tape.constant(noise.clone());
    let spread = tape.mul(std, eps)?;
    let u = tape.add(mean, spread)?;
    let action = tape.tanh(u)?;

    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let gauss_const: Vec<F> = noise.data().iter().map(|&e| F::of(-0.5 * (e * e).as_f64() - half_ln_2pi)).collect();
    let gauss_const = tape.constant(Tensor::new(noise.shape().to_vec(), gauss_const)?);
    let gauss = tape.sub(gauss_const, log_std)?;

    let m2u = tape.scale(u, F::of(-2.0))?;
    let sp = tape.softplus(m2u)?;
    let inner = tape.add(u, sp)?;
    let inner = tape.neg(inner)?;
    let inner = tape.add_scalar(inner, F::of(std::f64::consts::LN_2))?;
    let corr = tape.scale(inner, F::of(2.0))?;
    let per_dim = tape.sub(gauss, corr)?;
    let log_prob = tape.sum(per_dim, &[1])?;
    Ok(Sampled { action, log_prob })
}
