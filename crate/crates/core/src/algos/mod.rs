//! A2C and PPO updates with consistent, inconsistent and marginalized
//! dropout handling.

mod a2c;
mod marginal;
mod optim;
mod ppo;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use marginal::{marginal_logp, marginalized_score, posterior_weights, MarginalLogp, MarginalScore};
pub use optim::{Optimizer, OptimizerState};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nets::{Actor, Critic, DistVars, MaskSource};
use crate::rollout::{Minibatch, TrajectoryBuffer};
use crate::seeding::{stream, Stream, StreamRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "a2c")]
    A2c,
    #[serde(rename = "a2c-c")]
    A2cConsistent,
    #[serde(rename = "ppo")]
    Ppo,
    #[serde(rename = "ppo-c")]
    PpoConsistent,
    #[serde(rename = "ppo-marg")]
    PpoMarginal,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::A2c,
        Algorithm::A2cConsistent,
        Algorithm::Ppo,
        Algorithm::PpoConsistent,
        Algorithm::PpoMarginal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::A2c => "a2c",
            Algorithm::A2cConsistent => "a2c-c",
            Algorithm::Ppo => "ppo",
            Algorithm::PpoConsistent => "ppo-c",
            Algorithm::PpoMarginal => "ppo-marg",
        }
    }

    pub fn is_ppo(self) -> bool {
        !matches!(self, Algorithm::A2c | Algorithm::A2cConsistent)
    }

    /// Whether stored rollout masks are replayed by default.
    pub fn is_consistent(self) -> bool {
        matches!(
            self,
            Algorithm::A2cConsistent | Algorithm::PpoConsistent | Algorithm::PpoMarginal
        )
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config("alg", format!("unknown algorithm `{s}`")))
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How the update-time forward pass obtains dropout masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskPolicy {
    /// Replay the masks stored with each transition.
    Replay,
    /// Sample new masks (the inconsistent baseline).
    Fresh,
    /// Average over this many fresh masks with posterior weights.
    Marginal(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateConfig {
    pub actor_masks: MaskPolicy,
    pub critic_masks: MaskPolicy,
    pub clip_ratio: f64,
    pub grad_steps: usize,
    pub minibatch: usize,
    pub target_kl: Option<f64>,
    pub ent_coef: f64,
    pub vf_coef: f64,
    pub max_grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct UpdateReport {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm_pre_clip: f64,
    pub min_batch_logp: f64,
    /// 1-based gradient step at which the KL check stopped actor updates.
    pub early_stopped_at: Option<usize>,
    pub actor_steps: usize,
    /// A loss or gradient was non-finite and the step was skipped.
    pub diverged: bool,
}

/// Optimizer state and update-time random streams.
pub struct Learner {
    pub cfg: UpdateConfig,
    pub actor_opt: Optimizer,
    pub critic_opt: Optimizer,
    shuffle_rng: StreamRng,
    mask_rng: StreamRng,
    marg_rng: StreamRng,
    tape: Tape,
}

impl Learner {
    pub fn new(cfg: UpdateConfig, actor_opt: Optimizer, critic_opt: Optimizer, seed: u64) -> Result<Self> {
        if let MaskPolicy::Marginal(0) = cfg.actor_masks {
            return Err(Error::config("marg_samples", "must be at least 1"));
        }
        if matches!(cfg.critic_masks, MaskPolicy::Marginal(_)) {
            return Err(Error::config("critic_masks", "the critic replays or resamples masks"));
        }
        if cfg.grad_steps == 0 || cfg.minibatch == 0 {
            return Err(Error::config(
                "grad_steps",
                "gradient steps and minibatch must be positive",
            ));
        }
        Ok(Learner {
            cfg,
            actor_opt,
            critic_opt,
            shuffle_rng: stream(seed, Stream::Update, 0),
            mask_rng: stream(seed, Stream::UpdateMask, 0),
            marg_rng: stream(seed, Stream::Marginal, 0),
            tape: Tape::new(),
        })
    }

    pub fn update(
        &mut self,
        alg: Algorithm,
        buf: &TrajectoryBuffer,
        actor: &mut Actor,
        critic: &mut Critic,
    ) -> Result<UpdateReport> {
        if alg.is_ppo() {
            self.ppo_update(buf, actor, critic)
        } else {
            self.a2c_update(buf, actor, critic)
        }
    }
}

/// Actor log-probabilities `[B]` of the minibatch actions under `policy`.
fn actor_logp(
    tape: &mut Tape,
    actor: &Actor,
    mb: &Minibatch,
    policy: MaskPolicy,
    fresh_rng: &mut StreamRng,
    marg_rng: &mut StreamRng,
) -> Result<(Var, DistVars)> {
    let ctx = mb.context_refs();
    match policy {
        MaskPolicy::Replay | MaskPolicy::Fresh => {
            let source = if policy == MaskPolicy::Replay {
                MaskSource::Replay(&mb.actor_masks)
            } else {
                MaskSource::Fresh(fresh_rng)
            };
            let pass = actor.forward(tape, &ctx, source)?;
            let lp = pass.dist.log_prob(tape, &mb.actions)?;
            Ok((lp, pass.dist))
        }
        MaskPolicy::Marginal(n) => {
            let m = marginal_logp(tape, actor, &ctx, &mb.actions, n, marg_rng)?;
            Ok((m.logp, m.dist))
        }
    }
}

/// `½·mean((V − R)²)` on the minibatch.
fn value_loss(
    tape: &mut Tape,
    critic: &Critic,
    mb: &Minibatch,
    policy: MaskPolicy,
    rng: &mut StreamRng,
) -> Result<Var> {
    let ctx = mb.context_refs();
    let source = match policy {
        MaskPolicy::Replay => MaskSource::Replay(&mb.critic_masks),
        _ => MaskSource::Fresh(rng),
    };
    let (v, _) = critic.forward(tape, &ctx, source)?;
    let ret = tape.constant(crate::autodiff::Tensor::vector(mb.returns.clone()));
    let diff = tape.sub(v, ret)?;
    let sq = tape.square(diff);
    let m = tape.mean(sq);
    Ok(tape.scale(m, 0.5))
}

fn finite_grads(actor: &Actor, critic: &Critic) -> bool {
    actor
        .store()
        .flat_grads()
        .iter()
        .chain(&critic.store().flat_grads())
        .all(|g| g.is_finite())
}

/// Gradient of the policy-gradient surrogate `−mean(Â · log π)` with
/// respect to the actor parameters, without changing them.
pub fn policy_gradient(actor: &Actor, mb: &Minibatch, policy: MaskPolicy, rng: &mut StreamRng) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut marg = rng.clone();
    let (lp, _) = actor_logp(&mut tape, actor, mb, policy, rng, &mut marg)?;
    if let MaskPolicy::Marginal(_) = policy {
        *rng = marg;
    }
    let adv = tape.constant(crate::autodiff::Tensor::vector(mb.advantages.clone()));
    let weighted = tape.mul(lp, adv)?;
    let m = tape.mean(weighted);
    let loss = tape.neg(m);
    tape.backward(loss)?;
    Ok(actor.store().flat_grads_on(&tape))
}
