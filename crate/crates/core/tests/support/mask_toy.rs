//! Supervised channel-selection toy: the target is the sum of the first half
//! of the channels, the second half is independent noise, and a trainable
//! scalar readout sees the masked sum.

#![allow(dead_code)]

use cnav_autodiff::{Adam, AdamConfig, ParamStore, Tape, Tensor};
use cnav_core::cfs::{self, CfsModule};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const CHANNELS: usize = 16;
pub const SIGNAL: usize = 8;

pub struct Recovery {
    pub noise_mean: f64,
    pub signal_mean: f64,
    pub masks: Vec<f32>,
}

pub fn recover(seed: u64, steps: usize) -> Recovery {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f32>::new();
    let module = CfsModule::new(&mut store, "cfs", CHANNELS, 8, 1e-8, 0.5, 0.05, &mut rng);
    let a = store.insert("readout.a", Tensor::from_vec(vec![rng.random_range(0.5f32..1.5)]));
    let b = store.insert("readout.b", Tensor::from_vec(vec![0.0f32]));
    let cfs_cfg = AdamConfig { lr: 1e-3, eps: 1e-15, ..AdamConfig::default() };
    let mut cfs_opt = Adam::new(&store, module.ids(), cfs_cfg);
    let mut head_opt = Adam::new(&store, vec![a, b], AdamConfig::with_lr(1e-2));
    let trainable: Vec<_> = module.ids().into_iter().chain([a, b]).collect();
    let batch = 64;
    for _ in 0..steps {
        let x: Vec<f32> = (0..batch * CHANNELS).map(|_| StandardNormal.sample(&mut rng)).collect();
        let y: Vec<f32> = x.chunks(CHANNELS).map(|r| r[..SIGNAL].iter().sum()).collect();
        let mut t = Tape::with_trainable(trainable.clone());
        let xv = t.constant(Tensor::new(vec![batch, CHANNELS], x).unwrap());
        let yv = t.constant(Tensor::new(vec![batch, 1], y).unwrap());
        let m = module.mask(&mut t, &store).unwrap();
        let gated = cfs::apply(&mut t, xv, m).unwrap();
        let s = t.sum(gated, &[1]).unwrap();
        let s = t.reshape(s, &[batch, 1]).unwrap();
        let av = t.param(&store, a);
        let bv = t.param(&store, b);
        let pred = t.mul(s, av).unwrap();
        let pred = t.add(pred, bv).unwrap();
        let d = t.sub(pred, yv).unwrap();
        let d2 = t.square(d).unwrap();
        let loss = t.mean_all(d2).unwrap();
        t.backward(loss).unwrap();
        t.write_param_grads(&mut store);
        cfs_opt.step(&mut store).unwrap();
        head_opt.step(&mut store).unwrap();
    }
    let masks = module.mask_values(&store).unwrap();
    let mean = |v: &[f32]| v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
    Recovery { noise_mean: mean(&masks[SIGNAL..]), signal_mean: mean(&masks[..SIGNAL]), masks }
}
