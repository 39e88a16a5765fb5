mod common;

use cdrl_core::algos::marginalized_score;
use cdrl_core::autodiff::Tape;
use cdrl_core::nets::{Action, MaskSource};
use cdrl_core::seeding::{stream, Stream};
use common::{conditioned, enumerated_score, fresh_actor, log_marginal_gradient, toy_actor};

const OBS: [f64; 3] = [0.3, -0.7, 1.1];

fn action() -> Action {
    Action::Continuous(vec![0.4, -0.2])
}

fn norm_rel(est: &[f64], exact: &[f64]) -> f64 {
    let num: f64 = est.iter().zip(exact).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    num / exact.iter().map(|a| a * a).sum::<f64>().sqrt()
}

#[test]
fn weighted_score_is_the_gradient_of_the_log_marginal() {
    for hidden in [vec![2], vec![4, 4], vec![3, 2]] {
        for (seed, p) in [(0, 0.5), (1, 0.25), (2, 0.75)] {
            let actor = toy_actor(&hidden, p, seed);
            let weighted = enumerated_score(&actor, &hidden, &OBS, &action());
            let direct = log_marginal_gradient(&actor, &hidden, &OBS, &action());
            for (a, b) in weighted.iter().zip(&direct) {
                assert!((a - b).abs() <= 1e-10, "{hidden:?} p={p}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn sampled_estimator_converges_to_enumeration() {
    for hidden in [vec![2], vec![4, 4]] {
        for seed in 0..3 {
            let actor = fresh_actor(&hidden, 0.5, seed);
            let exact = enumerated_score(&actor, &hidden, &OBS, &action());
            let est =
                marginalized_score(&actor, &OBS, &action(), 10_000, &mut stream(seed, Stream::Marginal, 0)).unwrap();
            assert!((est.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(norm_rel(&est.grad, &exact) < 0.02, "{hidden:?} seed {seed}");
            for (e, x) in est.grad.iter().zip(&exact) {
                if *x == 0.0 {
                    assert_eq!(*e, 0.0);
                }
            }
        }
    }
}

#[test]
fn zero_dropout_reduces_to_the_plain_score() {
    let actor = toy_actor(&[4, 4], 0.0, 3);
    let est = marginalized_score(&actor, &OBS, &action(), 50, &mut stream(0, Stream::Marginal, 0)).unwrap();
    let mut tape = Tape::new();
    let pass = actor.forward(&mut tape, &[&OBS], MaskSource::Eval).unwrap();
    let lp = pass.dist.log_prob(&mut tape, &[action()]).unwrap();
    let s = tape.sum(lp);
    tape.backward(s).unwrap();
    assert_eq!(est.grad, actor.store().flat_grads_on(&tape));
    assert_eq!(est.log_marginal, tape.item(s));
}

#[test]
fn single_sample_is_the_conditioned_score() {
    let actor = toy_actor(&[4, 4], 0.5, 4);
    let rng = stream(9, Stream::Marginal, 0);
    let est = marginalized_score(&actor, &OBS, &action(), 1, &mut rng.clone()).unwrap();
    assert_eq!(est.weights, vec![1.0]);
    let mut tape = Tape::new();
    let bundle = actor
        .forward(&mut tape, &[&OBS], MaskSource::Fresh(&mut rng.clone()))
        .unwrap()
        .masks
        .remove(0);
    let (lp, grad) = conditioned(&actor, &OBS, &action(), &bundle);
    assert_eq!(est.log_marginal, lp);
    assert_eq!(est.grad, grad);
}
