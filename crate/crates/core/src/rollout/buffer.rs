use std::io::Write;

use super::gae::{gae, normalize, GaeStep};
use crate::dropout::MaskBundle;
use crate::error::{Error, Result};
use crate::nets::Action;

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    /// Flattened observation window ending at the current observation.
    pub context: Vec<f64>,
    pub context_len: usize,
    pub action: Action,
    pub reward: f64,
    pub done: bool,
    pub terminal: bool,
    pub logp_behavior: f64,
    pub value_estimate: f64,
    pub bootstrap: Option<f64>,
    /// Serialized actor and critic mask bundles.
    pub actor_masks: Vec<u8>,
    pub critic_masks: Vec<u8>,
}

impl Transition {
    /// The current observation (last entry of the window).
    pub fn obs(&self) -> &[f64] {
        let d = self.context.len() / self.context_len;
        &self.context[self.context.len() - d..]
    }

    pub fn actor_bundle(&self) -> Result<MaskBundle> {
        MaskBundle::from_bytes(&self.actor_masks)
    }

    pub fn critic_bundle(&self) -> Result<MaskBundle> {
        MaskBundle::from_bytes(&self.critic_masks)
    }
}

/// Contiguous transitions from all workers, worker-major.
#[derive(Clone, Debug, Default)]
pub struct TrajectoryBuffer {
    pub transitions: Vec<Transition>,
    /// Index of the first transition of every episode (or episode fragment)
    /// in the buffer.
    pub episode_starts: Vec<usize>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// Returns of episodes that finished during collection.
    pub completed_returns: Vec<f64>,
    pub capacity: usize,
}

/// Deserialized slice of a buffer, in the order of the requested indices.
#[derive(Clone, Debug)]
pub struct Minibatch {
    pub indices: Vec<usize>,
    pub contexts: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
    pub logp_behavior: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub actor_masks: Vec<MaskBundle>,
    pub critic_masks: Vec<MaskBundle>,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn context_refs(&self) -> Vec<&[f64]> {
        self.contexts.iter().map(Vec::as_slice).collect()
    }
}

impl TrajectoryBuffer {
    pub fn with_capacity(capacity: usize) -> Self {
        TrajectoryBuffer {
            transitions: Vec::with_capacity(capacity),
            capacity,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn push(&mut self, t: Transition, episode_start: bool) -> Result<()> {
        if self.transitions.len() >= self.capacity {
            return Err(Error::Contract(format!("buffer capacity {} exceeded", self.capacity)));
        }
        if !t.logp_behavior.is_finite() {
            return Err(Error::NonFinite("behavior log-probability".into()));
        }
        if episode_start {
            self.episode_starts.push(self.transitions.len());
        }
        self.transitions.push(t);
        Ok(())
    }

    pub fn is_finalized(&self) -> bool {
        !self.transitions.is_empty() && self.advantages.len() == self.transitions.len()
    }

    /// Computes advantages and returns, optionally normalizing advantages.
    pub fn finalize(&mut self, gamma: f64, lambda: f64, normalize_adv: bool) -> Result<()> {
        let steps: Vec<GaeStep> = self
            .transitions
            .iter()
            .map(|t| GaeStep {
                reward: t.reward,
                value: t.value_estimate,
                done: t.done,
                terminal: t.terminal,
                bootstrap: t.bootstrap,
            })
            .collect();
        let (mut adv, ret) = gae(&steps, gamma, lambda)?;
        if normalize_adv {
            normalize(&mut adv);
        }
        if adv.iter().chain(&ret).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("advantages".into()));
        }
        self.advantages = adv;
        self.returns = ret;
        Ok(())
    }

    pub fn minibatch(&self, indices: &[usize]) -> Result<Minibatch> {
        if !self.is_finalized() {
            return Err(Error::Contract("buffer is not finalized".into()));
        }
        let mut mb = Minibatch {
            indices: indices.to_vec(),
            contexts: Vec::with_capacity(indices.len()),
            actions: Vec::with_capacity(indices.len()),
            logp_behavior: Vec::with_capacity(indices.len()),
            advantages: Vec::with_capacity(indices.len()),
            returns: Vec::with_capacity(indices.len()),
            actor_masks: Vec::with_capacity(indices.len()),
            critic_masks: Vec::with_capacity(indices.len()),
        };
        for &i in indices {
            let t = self
                .transitions
                .get(i)
                .ok_or_else(|| Error::Contract(format!("transition {i} out of range")))?;
            mb.contexts.push(t.context.clone());
            mb.actions.push(t.action.clone());
            mb.logp_behavior.push(t.logp_behavior);
            mb.advantages.push(self.advantages[i]);
            mb.returns.push(self.returns[i]);
            mb.actor_masks.push(t.actor_bundle()?);
            mb.critic_masks.push(t.critic_bundle()?);
        }
        Ok(mb)
    }

    pub fn all(&self) -> Result<Minibatch> {
        self.minibatch(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Binary trace of every transition and its mask bundles.
    pub fn write_trace<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"CDTR")?;
        w.write_all(&(self.transitions.len() as u64).to_le_bytes())?;
        for t in &self.transitions {
            let floats = |w: &mut W, xs: &[f64]| -> Result<()> {
                w.write_all(&(xs.len() as u32).to_le_bytes())?;
                xs.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?;
                Ok(())
            };
            floats(w, &t.context)?;
            w.write_all(&(t.context_len as u32).to_le_bytes())?;
            match &t.action {
                Action::Continuous(a) => {
                    w.write_all(&[0])?;
                    floats(w, a)?;
                }
                Action::Discrete(i) => {
                    w.write_all(&[1])?;
                    w.write_all(&(*i as u32).to_le_bytes())?;
                }
            }
            floats(
                w,
                &[
                    t.reward,
                    t.logp_behavior,
                    t.value_estimate,
                    t.bootstrap.unwrap_or(f64::NAN),
                ],
            )?;
            w.write_all(&[t.done as u8 | (t.terminal as u8) << 1 | (t.bootstrap.is_some() as u8) << 2])?;
            for m in [&t.actor_masks, &t.critic_masks] {
                w.write_all(&(m.len() as u32).to_le_bytes())?;
                w.write_all(m)?;
            }
        }
        Ok(())
    }
}
