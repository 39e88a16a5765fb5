use rand::seq::SliceRandom;

use super::{actor_logp, finite_grads, value_loss, Learner, MaskPolicy, UpdateReport};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::nets::{Actor, Critic};
use crate::rollout::TrajectoryBuffer;

const OLD_LOGP_CHUNK: usize = 256;

impl Learner {
    /// Log-probabilities the ratio is measured against: the behavior
    /// log-probabilities, or the marginal estimate under the current
    /// parameters for the marginalized estimator.
    fn old_logp(&mut self, buf: &TrajectoryBuffer, actor: &Actor) -> Result<Vec<f64>> {
        let n = match self.cfg.actor_masks {
            MaskPolicy::Marginal(n) if actor.spec().p > 0.0 => n,
            _ => return Ok(buf.transitions.iter().map(|t| t.logp_behavior).collect()),
        };
        let mut out = Vec::with_capacity(buf.len());
        let mut tape = Tape::new();
        let idx: Vec<usize> = (0..buf.len()).collect();
        for chunk in idx.chunks(OLD_LOGP_CHUNK) {
            let mb = buf.minibatch(chunk)?;
            tape.clear();
            let m = super::marginal_logp(&mut tape, actor, &mb.context_refs(), &mb.actions, n, &mut self.marg_rng)?;
            out.extend(m.log_marginal);
        }
        Ok(out)
    }

    /// Clipped-surrogate update with optional KL early stopping. Once the
    /// approximate KL of a minibatch exceeds the target, the remaining steps
    /// update only the critic.
    pub fn ppo_update(
        &mut self,
        buf: &TrajectoryBuffer,
        actor: &mut Actor,
        critic: &mut Critic,
    ) -> Result<UpdateReport> {
        if !buf.is_finalized() {
            return Err(Error::Contract("ppo update needs a finalized buffer".into()));
        }
        let cfg = self.cfg.clone();
        let old = self.old_logp(buf, actor)?;
        let n = buf.len();
        let mbs = cfg.minibatch.min(n);
        let mut perm: Vec<usize> = Vec::new();
        let mut cursor = 0;
        let mut report = UpdateReport {
            min_batch_logp: f64::INFINITY,
            ..Default::default()
        };
        let (mut measured, mut critic_steps) = (0usize, 0usize);
        for step in 1..=cfg.grad_steps {
            if cursor + mbs > perm.len() {
                perm = (0..n).collect();
                perm.shuffle(&mut self.shuffle_rng);
                cursor = 0;
            }
            let idx = &perm[cursor..cursor + mbs];
            cursor += mbs;
            let mb = buf.minibatch(idx)?;
            let old_mb: Vec<f64> = idx.iter().map(|&i| old[i]).collect();
            let tape = &mut self.tape;
            tape.clear();

            let mut pi_loss = None;
            if report.early_stopped_at.is_none() {
                let (lp, dist) = actor_logp(
                    tape,
                    actor,
                    &mb,
                    cfg.actor_masks,
                    &mut self.mask_rng,
                    &mut self.marg_rng,
                )?;
                let new = tape.data(lp).to_vec();
                let kl = old_mb.iter().zip(&new).map(|(o, n)| o - n).sum::<f64>() / mbs as f64;
                report.mean_kl += kl;
                report.min_batch_logp = new.iter().cloned().fold(report.min_batch_logp, f64::min);
                measured += 1;
                if cfg.target_kl.is_some_and(|t| kl > t) {
                    report.early_stopped_at = Some(step);
                } else {
                    let oldv = tape.constant(Tensor::vector(old_mb.clone()));
                    let adv = tape.constant(Tensor::vector(mb.advantages.clone()));
                    let log_ratio = tape.sub(lp, oldv)?;
                    let ratio = tape.exp(log_ratio);
                    let unclipped = tape.mul(ratio, adv)?;
                    let clipped = tape.clamp(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio);
                    let clipped = tape.mul(clipped, adv)?;
                    let surr = tape.minimum(unclipped, clipped)?;
                    let surr = tape.mean(surr);
                    let surr = tape.neg(surr);
                    let ent = dist.entropy(tape)?;
                    let ent_term = tape.scale(ent, -cfg.ent_coef);
                    report.policy_loss += tape.item(surr);
                    report.entropy += tape.item(ent);
                    report.clip_fraction += tape
                        .data(ratio)
                        .iter()
                        .filter(|r| (*r - 1.0).abs() > cfg.clip_ratio)
                        .count() as f64
                        / mbs as f64;
                    pi_loss = Some(tape.add(surr, ent_term)?);
                }
            }

            let vl = value_loss(tape, critic, &mb, cfg.critic_masks, &mut self.mask_rng)?;
            report.value_loss += tape.item(vl);
            critic_steps += 1;
            let mut total = tape.scale(vl, cfg.vf_coef);
            if let Some(pl) = pi_loss {
                total = tape.add(pl, total)?;
            }
            if !tape.item(total).is_finite() {
                report.diverged = true;
                continue;
            }
            tape.backward(total)?;
            actor.store_mut().zero_grad();
            critic.store_mut().zero_grad();
            actor.store_mut().absorb(tape);
            critic.store_mut().absorb(tape);
            if !finite_grads(actor, critic) {
                report.diverged = true;
                continue;
            }
            critic.store_mut().clip_grad_norm(cfg.max_grad_norm);
            self.critic_opt.step(critic.store_mut());
            if pi_loss.is_some() {
                report.grad_norm_pre_clip += actor.store_mut().clip_grad_norm(cfg.max_grad_norm);
                self.actor_opt.step(actor.store_mut());
                report.actor_steps += 1;
            }
        }
        let steps = report.actor_steps.max(1) as f64;
        report.policy_loss /= steps;
        report.entropy /= steps;
        report.clip_fraction /= steps;
        report.grad_norm_pre_clip /= steps;
        report.mean_kl /= measured.max(1) as f64;
        report.value_loss /= critic_steps.max(1) as f64;
        Ok(report)
    }
}
