use super::{actor_logp, finite_grads, value_loss, Learner, UpdateReport};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nets::{Actor, Critic};
use crate::rollout::TrajectoryBuffer;

impl Learner {
    /// One gradient step on the whole buffer:
    /// `−mean(Â·log π) − c_ent·H + c_v·½·mean((V − R)²)`.
    pub fn a2c_update(
        &mut self,
        buf: &TrajectoryBuffer,
        actor: &mut Actor,
        critic: &mut Critic,
    ) -> Result<UpdateReport> {
        if !buf.is_finalized() {
            return Err(Error::Contract("a2c update needs a finalized buffer".into()));
        }
        let mb = buf.all()?;
        let cfg = self.cfg.clone();
        let tape = &mut self.tape;
        tape.clear();
        let (lp, dist) = actor_logp(
            tape,
            actor,
            &mb,
            cfg.actor_masks,
            &mut self.mask_rng,
            &mut self.marg_rng,
        )?;
        let adv = tape.constant(Tensor::vector(mb.advantages.clone()));
        let weighted = tape.mul(lp, adv)?;
        let pg = tape.mean(weighted);
        let pg = tape.neg(pg);
        let ent = dist.entropy(tape)?;
        let ent_term = tape.scale(ent, -cfg.ent_coef);
        let pi_loss = tape.add(pg, ent_term)?;
        let vl = value_loss(tape, critic, &mb, cfg.critic_masks, &mut self.mask_rng)?;
        let v_term = tape.scale(vl, cfg.vf_coef);
        let total = tape.add(pi_loss, v_term)?;

        let logps = tape.data(lp);
        let mut report = UpdateReport {
            policy_loss: tape.item(pg),
            value_loss: tape.item(vl),
            entropy: tape.item(ent),
            min_batch_logp: logps.iter().cloned().fold(f64::INFINITY, f64::min),
            mean_kl: mb.logp_behavior.iter().zip(logps).map(|(o, n)| o - n).sum::<f64>() / mb.len() as f64,
            ..Default::default()
        };
        if !tape.item(total).is_finite() {
            report.diverged = true;
            return Ok(report);
        }
        tape.backward(total)?;
        actor.store_mut().zero_grad();
        critic.store_mut().zero_grad();
        actor.store_mut().absorb(tape);
        critic.store_mut().absorb(tape);
        if !finite_grads(actor, critic) {
            report.diverged = true;
            return Ok(report);
        }
        report.grad_norm_pre_clip = actor.store_mut().clip_grad_norm(cfg.max_grad_norm);
        critic.store_mut().clip_grad_norm(cfg.max_grad_norm);
        self.actor_opt.step(actor.store_mut());
        self.critic_opt.step(critic.store_mut());
        report.actor_steps = 1;
        Ok(report)
    }
}
