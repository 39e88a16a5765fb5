//! Recomputes the frozen environment reference returns from scratch.

use cdrl_core::envs::constants::{corridor, pointmass};
use cdrl_core::envs::{rollout_episode, scripted_action, Corridor, PointMass};
use cdrl_core::nets::Action;
use cdrl_core::seeding::{stream, Stream};
use rand::Rng;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * b.abs().max(1.0)
}

#[test]
fn pointmass_scripted_controller_reference() {
    let mean = (0..100)
        .map(|s| {
            let mut env = PointMass::new(stream(s, Stream::Env, 0));
            rollout_episode(&mut env, scripted_action).unwrap()
        })
        .sum::<f64>()
        / 100.0;
    assert!(close(mean, pointmass::OPTIMAL_RETURN), "{mean}");
}

#[test]
fn pointmass_random_reference() {
    let mean = (0..100)
        .map(|s| {
            let mut env = PointMass::new(stream(s, Stream::Env, 0));
            let mut r = stream(s, Stream::Action, 0);
            rollout_episode(&mut env, |_| {
                Action::Continuous(vec![r.random_range(-1.0..=1.0), r.random_range(-1.0..=1.0)])
            })
            .unwrap()
        })
        .sum::<f64>()
        / 100.0;
    assert!(close(mean, pointmass::RANDOM_RETURN), "{mean}");
    assert!(mean.abs() >= 10.0 * pointmass::OPTIMAL_RETURN.abs());
}

#[test]
fn corridor_random_reference() {
    let mut r = stream(0, Stream::Action, 0);
    let mut env = Corridor::new();
    let mean = (0..10_000)
        .map(|_| rollout_episode(&mut env, |_| Action::Discrete(r.random_range(0..4))).unwrap())
        .sum::<f64>()
        / 10_000.0;
    assert!(close(mean, corridor::RANDOM_RETURN), "{mean}");
    assert!((-1.0..=0.9).contains(&mean));
}
