//! Dropout-marginalized score estimator.
//!
//! For N masks drawn i.i.d. from the dropout prior, the posterior weights
//! are `w_n = softmax_n(log π(a|s,m_n))` and the surrogate
//! `Σ_n stop_grad(w_n) · log π(a|s,m_n)` has the marginalized score as its
//! gradient.

use rand::RngCore;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nets::{Action, Actor, DistVars, MaskSource};

/// Normalized posterior weights and `log mean_n exp(logps_n)`.
pub fn posterior_weights(logps: &[f64]) -> Result<(Vec<f64>, f64)> {
    if logps.is_empty() {
        return Err(Error::Contract("no mask samples".into()));
    }
    if logps.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
        return Err(Error::NonFinite("mask-conditioned log-probability".into()));
    }
    let m = logps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Err(Error::DegeneratePosterior);
    }
    let e: Vec<f64> = logps.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let w = e.iter().map(|x| x / z).collect();
    Ok((w, m + (z.ln() - (logps.len() as f64).ln())))
}

/// Marginalized log-probabilities for a batch, built on `tape`.
pub struct MarginalLogp {
    /// `[B]`: value equals `log_marginal`, gradient is the weighted score.
    pub logp: Var,
    pub log_marginal: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
    /// Distribution over the replicated `B·N` batch.
    pub dist: DistVars,
    pub samples: usize,
}

/// Replicates each element `n` times with fresh masks from `rng` and
/// combines the conditioned log-probabilities. A dropout-free actor uses a
/// single sample, which reproduces the plain log-probability exactly.
pub fn marginal_logp(
    tape: &mut Tape,
    actor: &Actor,
    contexts: &[&[f64]],
    actions: &[Action],
    n: usize,
    rng: &mut dyn RngCore,
) -> Result<MarginalLogp> {
    if n == 0 {
        return Err(Error::config("marg_samples", "must be at least 1"));
    }
    if contexts.len() != actions.len() {
        return Err(Error::shape("marginal", &[contexts.len()], &[actions.len()]));
    }
    let n = if actor.spec().p == 0.0 { 1 } else { n };
    let b = contexts.len();
    let rep_ctx: Vec<&[f64]> = contexts.iter().flat_map(|c| std::iter::repeat_n(*c, n)).collect();
    let rep_act: Vec<Action> = actions.iter().flat_map(|a| std::iter::repeat_n(a.clone(), n)).collect();
    let pass = actor.forward(tape, &rep_ctx, MaskSource::Fresh(rng))?;
    let lp = pass.dist.log_prob(tape, &rep_act)?;
    let mut weights = Vec::with_capacity(b);
    let mut log_marginal = Vec::with_capacity(b);
    for row in tape.data(lp).chunks(n) {
        let (w, lm) = posterior_weights(row)?;
        weights.push(w);
        log_marginal.push(lm);
    }
    let logp = if n == 1 {
        lp
    } else {
        let lp2 = tape.reshape(lp, &[b, n])?;
        let w = tape.constant(Tensor::matrix(b, n, weights.concat())?);
        let weighted = tape.mul(lp2, w)?;
        let surrogate = tape.sum_axis(weighted, 1)?;
        let offset: Vec<f64> = log_marginal
            .iter()
            .zip(tape.data(surrogate))
            .map(|(m, s)| m - s)
            .collect();
        let offset = tape.constant(Tensor::vector(offset));
        tape.add(surrogate, offset)?
    };
    Ok(MarginalLogp {
        logp,
        log_marginal,
        weights,
        dist: pass.dist,
        samples: n,
    })
}

/// Single-state marginalized score with respect to every actor parameter.
#[derive(Clone, Debug)]
pub struct MarginalScore {
    pub weights: Vec<f64>,
    pub log_marginal: f64,
    /// Flattened gradient in actor parameter-store order.
    pub grad: Vec<f64>,
}

pub fn marginalized_score(
    actor: &Actor,
    context: &[f64],
    action: &Action,
    n: usize,
    rng: &mut dyn RngCore,
) -> Result<MarginalScore> {
    let mut tape = Tape::new();
    let m = marginal_logp(&mut tape, actor, &[context], std::slice::from_ref(action), n, rng)?;
    let s = tape.sum(m.logp);
    tape.backward(s)?;
    Ok(MarginalScore {
        weights: m.weights.into_iter().next().unwrap_or_default(),
        log_marginal: m.log_marginal[0],
        grad: actor.store().flat_grads_on(&tape),
    })
}
