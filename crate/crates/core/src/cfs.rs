//! Causal feature selection: a trainable weight vector turned into a
//! near-binary channel mask `m = w_hat^2 / (w_hat^2 + eps)` with
//! `w_hat = relu(transform(w))`.

use cnav_autodiff::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{CoreError, Result};
use crate::nets::Linear;

#[derive(Debug, Clone)]
pub struct CfsModule {
    pub w: ParamId,
    pub hidden: Linear,
    pub output: Linear,
    pub channels: usize,
    pub eps: f64,
}

impl CfsModule {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        channels: usize,
        min_hidden: usize,
        eps: f64,
        w_init: f64,
        jitter: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w = (0..channels).map(|_| F::of(w_init + rng.random_range(-jitter..=jitter))).collect();
        let w = store.insert(format!("{name}.w"), Tensor::from_vec(w));
        let width = (channels / 2).max(min_hidden);
        let hidden = Linear::new(store, &format!("{name}.t1"), channels, width, 1.0, rng);
        let output = Linear::new(store, &format!("{name}.t2"), width, channels, 0.1, rng);
        // Start every channel open so training begins from the dense network.
        let b = store.get_mut(output.b);
        b.data_mut().iter_mut().for_each(|v| *v = F::of(w_init));
        CfsModule { w, hidden, output, channels, eps }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w];
        ids.extend(self.hidden.ids());
        ids.extend(self.output.ids());
        ids
    }

    /// `w_hat` as a `[C]` tensor.
    pub fn w_hat<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>) -> Result<Var> {
        let w = tape.param(store, self.w);
        let w = tape.reshape(w, &[1, self.channels])?;
        let h = self.hidden.forward(tape, store, w)?;
        let h = tape.relu(h)?;
        let o = self.output.forward(tape, store, h)?;
        let o = tape.relu(o)?;
        Ok(tape.reshape(o, &[self.channels])?)
    }

    /// Mask as a `[C]` tensor.
    pub fn mask<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>) -> Result<Var> {
        let w_hat = self.w_hat(tape, store)?;
        Ok(tape.gate(w_hat, F::of(self.eps))?)
    }

    pub fn mask_values<F: Real>(&self, store: &ParamStore<F>) -> Result<Vec<F>> {
        let mut tape = Tape::no_grad();
        let m = self.mask(&mut tape, store)?;
        Ok(tape.data(m).to_vec())
    }
}

/// Mask from already-transformed weights.
pub fn mask_from_w_hat(w_hat: &[f64], eps: f64) -> Vec<f64> {
    w_hat
        .iter()
        .map(|&w| {
            let sq = w * w;
            sq / (sq + eps)
        })
        .collect()
}

/// `x * m` with the mask broadcast over the batch.
pub fn apply<F: Real>(tape: &mut Tape<F>, x: Var, m: Var) -> Result<Var> {
    let c = *tape.shape(x).last().unwrap_or(&0);
    if tape.shape(m) != [c] {
        return Err(CoreError::Shape(format!(
            "mask of shape {:?} cannot gate features of shape {:?}",
            tape.shape(m),
            tape.shape(x)
        )));
    }
    Ok(tape.mul(x, m)?)
}

/// Fraction of mask entries that are exactly zero.
pub fn sparsity<F: Real>(m: &[F]) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.iter().filter(|&&v| v == F::zero()).count() as f64 / m.len() as f64
}
