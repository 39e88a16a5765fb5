use rand::{Rng, RngCore};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::dropout::{ConsistentDropout, MaskRouter};
use crate::error::{Error, Result};

/// Uniform fan-in initialization with standard deviation `gain / sqrt(fan_in)`.
pub(crate) fn scaled_uniform(rng: &mut dyn RngCore, fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("positive extents")
}

/// Fully connected stack: every hidden layer is Linear → ReLU → Dropout and
/// the last layer is a plain linear head.
#[derive(Clone, Debug)]
pub struct Mlp {
    sizes: Vec<usize>,
    layers: Vec<(ParamId, ParamId)>,
    dropout: ConsistentDropout,
}

impl Mlp {
    /// Registers the parameters in `store` under `prefix`.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        sizes: &[usize],
        p: f64,
        head_gain: f64,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::config("hidden", format!("invalid layer sizes {sizes:?}")));
        }
        let dropout = ConsistentDropout::new(p)?;
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let gain = if i == last { head_gain } else { std::f64::consts::SQRT_2 };
                let wid = store.add(format!("{prefix}l{i}.w"), scaled_uniform(rng, w[0], w[1], gain));
                let bid = store.add(format!("{prefix}l{i}.b"), Tensor::zeros(&[w[1]]));
                (wid, bid)
            })
            .collect();
        Ok(Mlp {
            sizes: sizes.to_vec(),
            layers,
            dropout,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn p(&self) -> f64 {
        self.dropout.p
    }

    pub fn site_count(&self) -> usize {
        self.layers.len() - 1
    }

    /// `(width, p)` of every dropout site for one batch element.
    pub fn sites(&self) -> Vec<(usize, f64)> {
        self.sizes[1..self.sizes.len() - 1]
            .iter()
            .map(|&w| (w, self.dropout.p))
            .collect()
    }

    /// Maps `[B, in]` to `[B, out]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, router: &mut MaskRouter<'_>) -> Result<Var> {
        let batch = tape.shape(x)[0];
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            h = tape.linear(h, wv, bv)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
                h = self.dropout.forward(tape, h, batch, router)?;
            }
        }
        Ok(h)
    }
}
