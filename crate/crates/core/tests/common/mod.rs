#![allow(dead_code)]
pub mod gradcheck;

use cdrl_core::autodiff::Tape;
use cdrl_core::dropout::{DropoutMask, MaskBundle};
use cdrl_core::nets::{Action, ActionSpace, Actor, ActorSpec, Arch, MaskSource};
use cdrl_core::seeding::{stream, Stream};
use rand::Rng;
use rand_distr::StandardNormal;

/// Small continuous MLP actor whose weights are rescaled so that masks
/// visibly change the output distribution.
pub fn toy_actor(hidden: &[usize], p: f64, seed: u64) -> Actor {
    let spec = ActorSpec {
        obs_dim: 3,
        space: ActionSpace::Continuous { dim: 2 },
        arch: Arch::Mlp {
            hidden: hidden.to_vec(),
        },
        p,
    };
    let mut rng = stream(seed, Stream::Init, 0);
    let mut actor = Actor::new(spec, &mut rng).unwrap();
    let values: Vec<f64> = actor
        .store()
        .flat_values()
        .iter()
        .map(|_| 0.6 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    actor.store_mut().set_flat_values(&values);
    actor
}

pub fn fresh_actor(hidden: &[usize], p: f64, seed: u64) -> Actor {
    let spec = ActorSpec {
        obs_dim: 3,
        space: ActionSpace::Continuous { dim: 2 },
        arch: Arch::Mlp {
            hidden: hidden.to_vec(),
        },
        p,
    };
    Actor::new(spec, &mut stream(seed, Stream::Init, 0)).unwrap()
}

/// Every keep/drop assignment of an MLP actor's dropout sites with its
/// prior probability.
pub fn enumerate_masks(hidden: &[usize], p: f64) -> Vec<(MaskBundle, f64)> {
    let bits: usize = hidden.iter().sum();
    assert!(bits <= 16);
    (0..1u32 << bits)
        .map(|code| {
            let keep: Vec<bool> = (0..bits).map(|i| code >> i & 1 == 1).collect();
            let kept = keep.iter().filter(|k| **k).count() as i32;
            let prior = (1.0 - p).powi(kept) * p.powi(bits as i32 - kept);
            let mut off = 0;
            let masks = hidden
                .iter()
                .map(|&w| {
                    let m = DropoutMask::from_keep(&keep[off..off + w], w, 1, p).unwrap();
                    off += w;
                    m
                })
                .collect();
            (MaskBundle::new(masks), prior)
        })
        .collect()
}

/// Conditioned log-probability and its parameter gradient under one mask.
pub fn conditioned(actor: &Actor, obs: &[f64], action: &Action, bundle: &MaskBundle) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let pass = actor
        .forward(&mut tape, &[obs], MaskSource::Replay(std::slice::from_ref(bundle)))
        .unwrap();
    let lp = pass.dist.log_prob(&mut tape, std::slice::from_ref(action)).unwrap();
    let s = tape.sum(lp);
    tape.backward(s).unwrap();
    (tape.item(s), actor.store().flat_grads_on(&tape))
}

/// Exact marginalized score `Σ_m w_m ∇ log π(a|s,m)` with
/// `w_m ∝ p(m) π(a|s,m)`, by enumeration.
pub fn enumerated_score(actor: &Actor, hidden: &[usize], obs: &[f64], action: &Action) -> Vec<f64> {
    let p = actor.spec().p;
    let parts: Vec<(f64, Vec<f64>)> = enumerate_masks(hidden, p)
        .iter()
        .filter(|(_, prior)| *prior > 0.0)
        .map(|(b, prior)| {
            let (lp, g) = conditioned(actor, obs, action, b);
            (prior.ln() + lp, g)
        })
        .collect();
    let m = parts.iter().map(|(l, _)| *l).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = parts.iter().map(|(l, _)| (l - m).exp()).sum();
    let mut out = vec![0.0; parts[0].1.len()];
    for (l, g) in &parts {
        let w = (l - m).exp() / z;
        out.iter_mut().zip(g).for_each(|(o, g)| *o += w * g);
    }
    out
}

/// Gradient of `log Σ_m p(m) π(a|s,m)` obtained by differentiating the
/// enumerated log-marginal directly on one tape.
pub fn log_marginal_gradient(actor: &Actor, hidden: &[usize], obs: &[f64], action: &Action) -> Vec<f64> {
    let p = actor.spec().p;
    let mut tape = Tape::new();
    let mut terms = Vec::new();
    for (bundle, prior) in enumerate_masks(hidden, p) {
        if prior == 0.0 {
            continue;
        }
        let pass = actor
            .forward(&mut tape, &[obs], MaskSource::Replay(std::slice::from_ref(&bundle)))
            .unwrap();
        let lp = pass.dist.log_prob(&mut tape, std::slice::from_ref(action)).unwrap();
        let e = tape.exp(lp);
        let e = tape.sum(e);
        terms.push(tape.scale(e, prior));
    }
    let total = terms[1..].iter().fold(terms[0], |acc, t| tape.add(acc, *t).unwrap());
    let lm = tape.log(total).unwrap();
    tape.backward(lm).unwrap();
    actor.store().flat_grads_on(&tape)
}

pub mod gae_oracle {
    use cdrl_core::rollout::GaeStep;
    use cdrl_core::seeding::StreamRng;
    use rand::Rng;

    fn next_value(steps: &[GaeStep], t: usize) -> f64 {
        let s = steps[t];
        match (s.terminal, s.bootstrap, s.done) {
            (true, _, _) => 0.0,
            (false, Some(b), _) => b,
            (false, None, true) => 0.0,
            (false, None, false) => steps[t + 1].value,
        }
    }

    /// `Â_t = Σ_l (γλ)^l δ_{t+l}` summed explicitly up to the end of the
    /// segment containing `t`.
    pub fn brute_force(steps: &[GaeStep], gamma: f64, lambda: f64) -> Vec<f64> {
        (0..steps.len())
            .map(|t| {
                let mut total = 0.0;
                for l in t..steps.len() {
                    let delta = steps[l].reward + gamma * next_value(steps, l) - steps[l].value;
                    total += (gamma * lambda).powi((l - t) as i32) * delta;
                    if steps[l].done || steps[l].bootstrap.is_some() {
                        break;
                    }
                }
                total
            })
            .collect()
    }

    pub fn random_steps(rng: &mut StreamRng, len: usize) -> Vec<GaeStep> {
        let mut steps: Vec<GaeStep> = (0..len)
            .map(|_| {
                let done = rng.random_bool(0.15);
                let terminal = done && rng.random_bool(0.5);
                let bootstrap = if !terminal && rng.random_bool(0.1) {
                    Some(rng.random_range(-2.0..2.0))
                } else {
                    None
                };
                GaeStep {
                    reward: rng.random_range(-1.0..1.0),
                    value: rng.random_range(-2.0..2.0),
                    done: done || bootstrap.is_some() && rng.random_bool(0.5),
                    terminal,
                    bootstrap,
                }
            })
            .collect();
        let last = steps.last_mut().unwrap();
        if !last.done && last.bootstrap.is_none() {
            last.bootstrap = Some(0.7);
        }
        steps
    }
}

pub mod replay {
    use cdrl_core::autodiff::Tape;
    use cdrl_core::envs::EnvKind;
    use cdrl_core::nets::{ActionSpace, Actor, ActorSpec, Arch, Critic, CriticSpec, GptConfig, MaskSource};
    use cdrl_core::rollout::{Collector, TrajectoryBuffer};
    use cdrl_core::seeding::{stream, Stream};
    use rand::Rng;
    use rand_distr::StandardNormal;

    pub fn policy(gpt: bool, p: f64, seed: u64) -> Actor {
        let env = EnvKind::Pointmass.spec();
        let arch = if gpt {
            Arch::Gpt(GptConfig::default())
        } else {
            Arch::Mlp { hidden: vec![64, 64] }
        };
        let spec = ActorSpec {
            obs_dim: env.obs_dim,
            space: ActionSpace::Continuous { dim: 2 },
            arch,
            p,
        };
        Actor::new(spec, &mut stream(seed, Stream::Init, 0)).unwrap()
    }

    /// Records `count` fresh-mask passes on random inputs and replays each
    /// bundle in a new tape. Returns how many outputs differ in any bit.
    pub fn replay_mismatches(actor: &Actor, count: usize, seed: u64) -> usize {
        let mut rng = stream(seed, Stream::Probe, 3);
        let mut masks = stream(seed, Stream::Probe, 4);
        let d = actor.spec().obs_dim;
        let mut bad = 0;
        for _ in 0..count {
            let len = rng.random_range(1..=actor.context_window());
            let ctx: Vec<f64> = (0..len * d).map(|_| rng.sample(StandardNormal)).collect();
            let mut t1 = Tape::new();
            let first = actor.forward(&mut t1, &[&ctx], MaskSource::Fresh(&mut masks)).unwrap();
            let bytes = first.masks[0].to_bytes();
            let bundle = cdrl_core::dropout::MaskBundle::from_bytes(&bytes).unwrap();
            let mut t2 = Tape::new();
            let second = actor.forward(&mut t2, &[&ctx], MaskSource::Replay(&[bundle])).unwrap();
            let a = first.dist.element(&t1, 0);
            let b = second.dist.element(&t2, 0);
            if format!("{a:?}") != format!("{b:?}") || a != b {
                bad += 1;
            }
        }
        bad
    }

    /// A collected, finalized buffer for `actor` on pointmass.
    pub fn buffer(actor: &Actor, seed: u64, workers: usize, steps: usize) -> (TrajectoryBuffer, Critic) {
        let critic = Critic::new(
            CriticSpec {
                obs_dim: actor.spec().obs_dim,
                hidden: vec![16, 16],
                p: actor.spec().p,
            },
            &mut stream(seed, Stream::Init, 1),
        )
        .unwrap();
        let mut col = Collector::new(EnvKind::Pointmass, seed, workers, actor.context_window());
        let mut buf = col.collect(actor, &critic, steps).unwrap();
        buf.finalize(0.99, 0.97, true).unwrap();
        (buf, critic)
    }

    /// Indices whose replayed log-probability is not bit-identical to the
    /// stored behavior log-probability, evaluated in the given order.
    pub fn logp_mismatches(actor: &Actor, buf: &TrajectoryBuffer, order: &[usize], chunk: usize) -> Vec<usize> {
        let mut bad = Vec::new();
        for idx in order.chunks(chunk) {
            let mb = buf.minibatch(idx).unwrap();
            let mut tape = Tape::new();
            let pass = actor
                .forward(&mut tape, &mb.context_refs(), MaskSource::Replay(&mb.actor_masks))
                .unwrap();
            let lp = pass.dist.log_prob(&mut tape, &mb.actions).unwrap();
            for (k, (a, b)) in tape.data(lp).iter().zip(&mb.logp_behavior).enumerate() {
                if a.to_bits() != b.to_bits() {
                    bad.push(idx[k]);
                }
            }
        }
        bad
    }
}

pub mod training {
    use cdrl_core::algos::{Algorithm, Learner};
    use cdrl_core::envs::EnvKind;
    use cdrl_core::harness::{build_nets, ArchKind, RunConfig};
    use cdrl_core::rollout::Collector;

    /// Small desk configuration on pointmass with a shared KL target for
    /// every PPO variant.
    pub fn small(alg: Algorithm, p: f64, seed: u64) -> RunConfig {
        let mut c = RunConfig::desk(alg, EnvKind::Pointmass, ArchKind::Mlp);
        c.dropout = p;
        c.seed = seed;
        c.workers = 2;
        c.steps_per_epoch = if alg.is_ppo() { 128 } else { 16 };
        c.grad_steps = 4;
        c.minibatch = 32;
        c.hidden = 16;
        c.eval_episodes = 2;
        if alg.is_ppo() {
            c.target_kl = Some(0.01);
        }
        c
    }

    /// Actor and critic parameters after each of `updates` updates.
    pub fn trajectory(cfg: &RunConfig, updates: usize) -> Vec<Vec<f64>> {
        let (mut actor, mut critic) = build_nets(cfg).unwrap();
        let (ao, co) = cfg.optimizers(&actor, &critic);
        let mut learner = Learner::new(cfg.update_config(), ao, co, cfg.seed).unwrap();
        let mut col = Collector::new(cfg.env, cfg.seed, cfg.workers, cfg.context_block());
        (0..updates)
            .map(|_| {
                let mut buf = col.collect(&actor, &critic, cfg.steps_per_worker()).unwrap();
                buf.finalize(cfg.gamma, cfg.lambda, cfg.adv_norm).unwrap();
                learner.update(cfg.alg, &buf, &mut actor, &mut critic).unwrap();
                let mut v = actor.store().flat_values();
                v.extend(critic.store().flat_values());
                v
            })
            .collect()
    }

    /// Whether every pair of trajectories agrees bit for bit.
    pub fn bit_identical(a: &[Vec<f64>], b: &[Vec<f64>]) -> bool {
        a.len() == b.len()
            && a.iter()
                .zip(b)
                .all(|(x, y)| x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()))
    }
}
