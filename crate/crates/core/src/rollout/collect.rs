use std::collections::VecDeque;

use super::buffer::{TrajectoryBuffer, Transition};
use crate::autodiff::Tape;
use crate::envs::{Env, EnvKind};
use crate::error::{Error, Result};
use crate::nets::{Actor, Critic, MaskSource};
use crate::seeding::{stream, Stream, StreamRng};

/// The most recent observations of the current episode, oldest first.
#[derive(Clone, Debug)]
pub struct ContextWindow {
    block: usize,
    obs: VecDeque<Vec<f64>>,
}

impl ContextWindow {
    pub fn new(block: usize) -> Self {
        assert!(block > 0, "context block must be positive");
        ContextWindow {
            block,
            obs: VecDeque::with_capacity(block),
        }
    }

    pub fn push(&mut self, obs: Vec<f64>) {
        if self.obs.len() == self.block {
            self.obs.pop_front();
        }
        self.obs.push_back(obs);
    }

    pub fn clear(&mut self) {
        self.obs.clear();
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.obs.iter().flatten().copied().collect()
    }
}

struct Worker {
    env: Box<dyn Env + Send>,
    window: ContextWindow,
    obs: Vec<f64>,
    episode_return: f64,
    fresh_episode: bool,
    action_rng: StreamRng,
    actor_mask_rng: StreamRng,
    critic_mask_rng: StreamRng,
}

/// Persistent rollout workers; episodes carry over between epochs.
pub struct Collector {
    workers: Vec<Worker>,
}

fn check_finite(xs: &[f64], what: &str) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what}: {xs:?}")))
    }
}

impl Collector {
    pub fn new(kind: EnvKind, seed: u64, workers: usize, block: usize) -> Self {
        let workers = (0..workers as u64)
            .map(|w| {
                let mut env = kind.make(seed, w);
                let obs = env.reset();
                let mut window = ContextWindow::new(block);
                window.push(obs.clone());
                Worker {
                    env,
                    window,
                    obs,
                    episode_return: 0.0,
                    fresh_episode: true,
                    action_rng: stream(seed, Stream::Action, w),
                    actor_mask_rng: stream(seed, Stream::ActorMask, w),
                    critic_mask_rng: stream(seed, Stream::CriticMask, w),
                }
            })
            .collect();
        Collector { workers }
    }

    pub fn workers(&self) -> usize {
        self.workers.len()
    }

    /// Runs every worker for `steps` environment steps with fresh train-mode
    /// masks, one batch-1 forward per step.
    pub fn collect(&mut self, actor: &Actor, critic: &Critic, steps: usize) -> Result<TrajectoryBuffer> {
        let mut buf = TrajectoryBuffer::with_capacity(steps * self.workers.len());
        let mut tape = Tape::new();
        for w in &mut self.workers {
            for s in 0..steps {
                let context = w.window.flat();
                tape.clear();
                let pass = actor.forward(&mut tape, &[&context], MaskSource::Fresh(&mut w.actor_mask_rng))?;
                let action = pass.dist.element(&tape, 0).sample(&mut w.action_rng);
                let lp = pass.dist.log_prob(&mut tape, std::slice::from_ref(&action))?;
                let logp = tape.data(lp)[0];
                let (value, critic_masks) = critic.value(&w.obs, MaskSource::Fresh(&mut w.critic_mask_rng))?;
                let step = w.env.step(&action)?;
                check_finite(&step.next_obs, "observation")?;
                check_finite(&[step.reward], "reward")?;
                w.episode_return += step.reward;
                let cut = !step.done && s + 1 == steps;
                let bootstrap = if (step.done && !step.terminal) || cut {
                    Some(
                        critic
                            .value(&step.next_obs, MaskSource::Fresh(&mut w.critic_mask_rng))?
                            .0,
                    )
                } else {
                    None
                };
                let actor_masks = pass.masks.into_iter().next().unwrap_or_default().to_bytes();
                buf.push(
                    Transition {
                        context_len: w.window.len(),
                        context,
                        action,
                        reward: step.reward,
                        done: step.done,
                        terminal: step.terminal,
                        logp_behavior: logp,
                        value_estimate: value,
                        bootstrap,
                        actor_masks,
                        critic_masks: critic_masks.to_bytes(),
                    },
                    w.fresh_episode || s == 0,
                )?;
                w.fresh_episode = step.done;
                if step.done {
                    buf.completed_returns.push(w.episode_return);
                    w.episode_return = 0.0;
                    w.obs = w.env.reset();
                    w.window.clear();
                } else {
                    w.obs = step.next_obs;
                }
                w.window.push(w.obs.clone());
            }
        }
        Ok(buf)
    }
}

/// Mean return of deterministic (mode-action) episodes, with dropout either
/// active on fresh masks or disabled.
pub fn evaluate(actor: &Actor, kind: EnvKind, seed: u64, episodes: usize, dropout_on: bool) -> Result<f64> {
    if episodes == 0 {
        return Err(Error::config("episodes", "must be positive"));
    }
    let mut total = 0.0;
    for ep in 0..episodes as u64 {
        let mut env = kind.make_with(stream(seed, Stream::Eval, ep));
        let mut mask_rng = stream(seed, Stream::EvalMask, ep);
        let mut window = ContextWindow::new(actor.context_window());
        window.push(env.reset());
        loop {
            let ctx = window.flat();
            let source = if dropout_on {
                MaskSource::Fresh(&mut mask_rng)
            } else {
                MaskSource::Eval
            };
            let (dist, _) = actor.distribution(&ctx, source)?;
            let step = env.step(&dist.mode())?;
            total += step.reward;
            if step.done {
                break;
            }
            window.push(step.next_obs);
        }
    }
    Ok(total / episodes as f64)
}
