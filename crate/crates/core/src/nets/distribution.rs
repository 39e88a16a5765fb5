use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub(crate) const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionSpace {
    Continuous { dim: usize },
    Discrete { n: usize },
}

impl ActionSpace {
    /// Width of the policy head.
    pub fn head_dim(&self) -> usize {
        match *self {
            ActionSpace::Continuous { dim } => dim,
            ActionSpace::Discrete { n } => n,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Continuous(Vec<f64>),
    Discrete(usize),
}

impl Action {
    pub fn as_continuous(&self) -> Option<&[f64]> {
        match self {
            Action::Continuous(a) => Some(a),
            Action::Discrete(_) => None,
        }
    }

    pub fn as_discrete(&self) -> Option<usize> {
        match self {
            Action::Discrete(i) => Some(*i),
            Action::Continuous(_) => None,
        }
    }
}

/// Concrete distribution parameters for a single state.
#[derive(Clone, Debug, PartialEq)]
pub enum ActionDistribution {
    Gaussian { mean: Vec<f64>, log_std: Vec<f64> },
    Categorical { logits: Vec<f64> },
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lz = logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - m - lz).collect()
}

impl ActionDistribution {
    pub fn log_prob(&self, action: &Action) -> Result<f64> {
        match (self, action) {
            (ActionDistribution::Gaussian { mean, log_std }, Action::Continuous(a)) => {
                if a.len() != mean.len() {
                    return Err(Error::shape("log_prob", &[mean.len()], &[a.len()]));
                }
                let mut lp = 0.0;
                for ((x, m), ls) in a.iter().zip(mean).zip(log_std) {
                    let z = (x - m) * (-ls).exp();
                    lp += -0.5 * (z * z) - ls;
                }
                Ok(lp - mean.len() as f64 * HALF_LN_2PI)
            }
            (ActionDistribution::Categorical { logits }, Action::Discrete(i)) => log_softmax(logits)
                .get(*i)
                .copied()
                .ok_or_else(|| Error::shape("log_prob", &[logits.len()], &[*i])),
            _ => Err(Error::Contract("action kind does not match distribution".into())),
        }
    }

    pub fn entropy(&self) -> f64 {
        match self {
            ActionDistribution::Gaussian { log_std, .. } => log_std.iter().map(|ls| 0.5 + HALF_LN_2PI + ls).sum(),
            ActionDistribution::Categorical { logits } => {
                let lp = log_softmax(logits);
                -lp.iter()
                    .map(|l| if l.is_finite() { l.exp() * l } else { 0.0 })
                    .sum::<f64>()
            }
        }
    }

    /// Most likely action: the mean, or the lowest-index argmax.
    pub fn mode(&self) -> Action {
        match self {
            ActionDistribution::Gaussian { mean, .. } => Action::Continuous(mean.clone()),
            ActionDistribution::Categorical { logits } => {
                let mut best = 0;
                for (i, &l) in logits.iter().enumerate() {
                    if l > logits[best] {
                        best = i;
                    }
                }
                Action::Discrete(best)
            }
        }
    }

    pub fn sample<R: RngCore + ?Sized>(&self, rng: &mut R) -> Action {
        match self {
            ActionDistribution::Gaussian { mean, log_std } => Action::Continuous(
                mean.iter()
                    .zip(log_std)
                    .map(|(m, ls)| {
                        let z: f64 = rng.sample(StandardNormal);
                        m + ls.exp() * z
                    })
                    .collect(),
            ),
            ActionDistribution::Categorical { logits } => {
                let probs: Vec<f64> = log_softmax(logits).iter().map(|l| l.exp()).collect();
                let u: f64 = rng.random();
                let mut cum = 0.0;
                for (i, p) in probs.iter().enumerate() {
                    cum += p;
                    if u < cum {
                        return Action::Discrete(i);
                    }
                }
                Action::Discrete(probs.len() - 1)
            }
        }
    }

    pub fn select(&self, rng: &mut dyn RngCore, deterministic: bool) -> Action {
        if deterministic {
            self.mode()
        } else {
            self.sample(rng)
        }
    }
}

/// Distribution parameters for a batch, living on a tape.
#[derive(Clone, Copy, Debug)]
pub enum DistVars {
    /// `mean` is `[B, A]`; `log_std` is `[A]` and shared across the batch.
    Gaussian { mean: Var, log_std: Var },
    /// `logits` is `[B, A]`.
    Categorical { logits: Var },
}

impl DistVars {
    pub fn batch(&self, tape: &Tape) -> usize {
        match *self {
            DistVars::Gaussian { mean: v, .. } | DistVars::Categorical { logits: v } => tape.shape(v)[0],
        }
    }

    /// Per-element log-probabilities, shape `[B]`.
    pub fn log_prob(&self, tape: &mut Tape, actions: &[Action]) -> Result<Var> {
        let b = self.batch(tape);
        if actions.len() != b {
            return Err(Error::shape("log_prob", &[b], &[actions.len()]));
        }
        match *self {
            DistVars::Gaussian { mean, log_std } => {
                let a_dim = tape.shape(mean)[1];
                let mut flat = Vec::with_capacity(b * a_dim);
                for a in actions {
                    let a = a
                        .as_continuous()
                        .filter(|a| a.len() == a_dim)
                        .ok_or_else(|| Error::Contract("expected a continuous action of head width".into()))?;
                    flat.extend_from_slice(a);
                }
                let av = tape.constant(Tensor::matrix(b, a_dim, flat)?);
                let ls = tape.repeat_rows(log_std, b)?;
                let diff = tape.sub(av, mean)?;
                let neg_ls = tape.neg(ls);
                let inv_std = tape.exp(neg_ls);
                let z = tape.mul(diff, inv_std)?;
                let z2 = tape.square(z);
                let quad = tape.scale(z2, -0.5);
                let per_dim = tape.sub(quad, ls)?;
                let total = tape.sum_axis(per_dim, 1)?;
                Ok(tape.shift(total, -(a_dim as f64) * HALF_LN_2PI))
            }
            DistVars::Categorical { logits } => {
                let n = tape.shape(logits)[1];
                let idx = actions
                    .iter()
                    .map(|a| a.as_discrete().filter(|&i| i < n))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| Error::Contract("expected a discrete action index in range".into()))?;
                let lp = tape.log_softmax(logits, 1)?;
                tape.gather(lp, &idx)
            }
        }
    }

    /// Mean entropy over the batch (scalar).
    pub fn entropy(&self, tape: &mut Tape) -> Result<Var> {
        match *self {
            DistVars::Gaussian { log_std, .. } => {
                let n = tape.shape(log_std)[0] as f64;
                let s = tape.sum(log_std);
                Ok(tape.shift(s, n * (0.5 + HALF_LN_2PI)))
            }
            DistVars::Categorical { logits } => {
                let lp = tape.log_softmax(logits, 1)?;
                let p = tape.exp(lp);
                let plp = tape.mul(p, lp)?;
                let rows = tape.sum_axis(plp, 1)?;
                let m = tape.mean(rows);
                Ok(tape.neg(m))
            }
        }
    }

    /// Concrete parameters of batch element `b`.
    pub fn element(&self, tape: &Tape, b: usize) -> ActionDistribution {
        match *self {
            DistVars::Gaussian { mean, log_std } => {
                let a = tape.shape(mean)[1];
                ActionDistribution::Gaussian {
                    mean: tape.data(mean)[b * a..(b + 1) * a].to_vec(),
                    log_std: tape.data(log_std).to_vec(),
                }
            }
            DistVars::Categorical { logits } => {
                let n = tape.shape(logits)[1];
                ActionDistribution::Categorical {
                    logits: tape.data(logits)[b * n..(b + 1) * n].to_vec(),
                }
            }
        }
    }
}
