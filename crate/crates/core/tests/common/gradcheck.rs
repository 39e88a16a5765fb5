//! Central finite-difference gradient checks.

use cdrl_core::autodiff::{Tape, Tensor, Var};
use cdrl_core::dropout::MaskBundle;
use cdrl_core::nets::{Action, ActionSpace, Actor, ActorSpec, Arch, GptConfig, MaskSource};
use cdrl_core::seeding::{stream, Stream, StreamRng};
use cdrl_core::Result;
use rand::Rng;
use rand_distr::StandardNormal;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared relative to it.
pub const MAGNITUDE_FLOOR: f64 = 1e-2;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(MAGNITUDE_FLOOR)
}

pub fn normal(rng: &mut StreamRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Standard normal entries at least `gap` away from every point in `avoid`.
pub fn normal_avoiding(rng: &mut StreamRng, shape: &[usize], avoid: &[f64], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.sample(StandardNormal);
            if avoid.iter().all(|a| (v - a).abs() > gap) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

fn project(tape: &mut Tape, out: Var, weights: &[f64]) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(Tensor::new(shape, weights.to_vec())?);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

/// Largest relative error between the tape gradient and central differences
/// of `sum(build(inputs) * R)` for a fixed random `R`.
pub fn check_op(inputs: &[Tensor], rng: &mut StreamRng, build: &Build<'_>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().requiring_grad())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let numel = tape.value(out).numel();
    let weights: Vec<f64> = (0..numel).map(|_| rng.sample(StandardNormal)).collect();
    let loss = project(&mut tape, out, &weights).unwrap();
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| {
            tape.grad(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(*v).numel()])
        })
        .collect();

    let eval = |inputs: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
        let out = build(&mut t, &vars).unwrap();
        let l = project(&mut t, out, &weights).unwrap();
        t.item(l)
    };
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (k, grads) in analytic.iter().enumerate() {
        for (i, g) in grads.iter().enumerate() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + STEP;
            let up = eval(&work);
            work[k].data_mut()[i] = orig - STEP;
            let down = eval(&work);
            work[k].data_mut()[i] = orig;
            worst = worst.max(rel_err(*g, (up - down) / (2.0 * STEP)));
        }
    }
    worst
}

/// One gradient-check instance for a named operation.
pub struct OpCase {
    pub name: &'static str,
    pub worst: f64,
}

/// Random instances of every differentiable tape operation.
pub fn op_suite(seed: u64, rounds: usize) -> Vec<OpCase> {
    let mut rng = stream(seed, Stream::Probe, 99);
    let mut out = Vec::new();
    for _ in 0..rounds {
        let r = rng.random_range(1..4usize);
        let k = rng.random_range(1..4usize);
        let c = rng.random_range(2..4usize);
        let mut case = |name: &'static str, inputs: Vec<Tensor>, rng: &mut StreamRng, f: &Build<'_>| {
            let worst = check_op(&inputs, rng, f);
            out.push(OpCase { name, worst });
        };
        let (a, b) = (normal(&mut rng, &[r, k]), normal(&mut rng, &[k, c]));
        case("matmul", vec![a, b], &mut rng, &|t, v| t.matmul(v[0], v[1]));
        let (a, b) = (normal(&mut rng, &[2, r, k]), normal(&mut rng, &[2, k, c]));
        case("bmm", vec![a, b], &mut rng, &|t, v| t.bmm(v[0], v[1]));
        let (x, w, bias) = (
            normal(&mut rng, &[r, k]),
            normal(&mut rng, &[k, c]),
            normal(&mut rng, &[c]),
        );
        case("linear", vec![x, w, bias], &mut rng, &|t, v| t.linear(v[0], v[1], v[2]));
        let (a, b) = (normal(&mut rng, &[r, c]), normal(&mut rng, &[r, c]));
        case("add", vec![a.clone(), b.clone()], &mut rng, &|t, v| t.add(v[0], v[1]));
        case("sub", vec![a.clone(), b.clone()], &mut rng, &|t, v| t.sub(v[0], v[1]));
        case("mul", vec![a.clone(), b.clone()], &mut rng, &|t, v| t.mul(v[0], v[1]));
        case("minimum", vec![a.clone(), b], &mut rng, &|t, v| t.minimum(v[0], v[1]));
        let s = normal(&mut rng, &[]);
        case("mul-broadcast", vec![a.clone(), s], &mut rng, &|t, v| t.mul(v[0], v[1]));
        case("scale", vec![a.clone()], &mut rng, &|t, v| Ok(t.scale(v[0], -1.7)));
        case("neg", vec![a.clone()], &mut rng, &|t, v| Ok(t.neg(v[0])));
        case("shift", vec![a.clone()], &mut rng, &|t, v| Ok(t.shift(v[0], 0.3)));
        case("square", vec![a.clone()], &mut rng, &|t, v| Ok(t.square(v[0])));
        case("tanh", vec![a.clone()], &mut rng, &|t, v| Ok(t.tanh(v[0])));
        case("exp", vec![a.clone()], &mut rng, &|t, v| Ok(t.exp(v[0])));
        let pos = Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| x.abs() + 0.5).collect()).unwrap();
        case("log", vec![pos], &mut rng, &|t, v| t.log(v[0]));
        let kinked = normal_avoiding(&mut rng, &[r, c], &[0.0], 1e-3);
        case("relu", vec![kinked], &mut rng, &|t, v| Ok(t.relu(v[0])));
        let clamped = normal_avoiding(&mut rng, &[r, c], &[-0.5, 0.5], 1e-3);
        case("clamp", vec![clamped], &mut rng, &|t, v| Ok(t.clamp(v[0], -0.5, 0.5)));
        case("sum", vec![a.clone()], &mut rng, &|t, v| Ok(t.sum(v[0])));
        case("mean", vec![a.clone()], &mut rng, &|t, v| Ok(t.mean(v[0])));
        let x3 = normal(&mut rng, &[r, k, c]);
        case("sum_axis", vec![x3.clone()], &mut rng, &|t, v| t.sum_axis(v[0], 1));
        case("mean_axis", vec![x3.clone()], &mut rng, &|t, v| t.mean_axis(v[0], 2));
        case("max_axis", vec![x3.clone()], &mut rng, &|t, v| t.max_axis(v[0], 2));
        case("softmax", vec![a.clone()], &mut rng, &|t, v| t.softmax(v[0], 1));
        case("log_softmax", vec![x3.clone()], &mut rng, &|t, v| {
            t.log_softmax(v[0], 2)
        });
        let (g, bb) = (normal(&mut rng, &[c]), normal(&mut rng, &[c]));
        case("layernorm", vec![a.clone(), g, bb], &mut rng, &|t, v| {
            t.layernorm(v[0], v[1], v[2], 1e-5)
        });
        case("reshape", vec![x3.clone()], &mut rng, &|t, v| {
            let s = t.shape(v[0]).to_vec();
            t.reshape(v[0], &[s[0] * s[1], s[2]])
        });
        case("permute", vec![x3], &mut rng, &|t, v| t.permute(v[0], &[2, 0, 1]));
        case("transpose", vec![a.clone()], &mut rng, &|t, v| t.transpose(v[0]));
        case("repeat_rows", vec![a.clone()], &mut rng, &|t, v| t.repeat_rows(v[0], 3));
        case("select_rows", vec![a.clone()], &mut rng, &|t, v| {
            let r = t.shape(v[0])[0];
            t.select_rows(v[0], &[r - 1, 0, r - 1])
        });
        let other = normal(&mut rng, &[2, c]);
        case("concat_rows", vec![a.clone(), other], &mut rng, &|t, v| {
            t.concat_rows(&[v[0], v[1], v[0]])
        });
        let idx: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
        case("gather", vec![a.clone()], &mut rng, &move |t, v| t.gather(v[0], &idx));
        let factors: Vec<f64> = (0..r * c)
            .map(|_| if rng.random_bool(0.5) { 2.0 } else { 0.0 })
            .collect();
        case("dropout", vec![a], &mut rng, &move |t, v| {
            t.masked_scale(v[0], factors.clone())
        });
    }
    out
}

/// Central differences of a full policy loss with respect to `coords`
/// randomly chosen actor parameters, masks replayed from fixed bundles.
pub fn check_actor(
    actor: &mut Actor,
    contexts: &[Vec<f64>],
    actions: &[Action],
    coords: usize,
    rng: &mut StreamRng,
) -> f64 {
    let refs: Vec<&[f64]> = contexts.iter().map(Vec::as_slice).collect();
    let bundles: Vec<MaskBundle> = {
        let mut tape = Tape::new();
        actor.forward(&mut tape, &refs, MaskSource::Fresh(rng)).unwrap().masks
    };
    let adv: Vec<f64> = (0..actions.len()).map(|_| rng.sample(StandardNormal)).collect();
    let loss = |actor: &Actor, tape: &mut Tape| -> Var {
        let pass = actor.forward(tape, &refs, MaskSource::Replay(&bundles)).unwrap();
        let lp = pass.dist.log_prob(tape, actions).unwrap();
        let a = tape.constant(Tensor::vector(adv.clone()));
        let w = tape.mul(lp, a).unwrap();
        let s = tape.mean(w);
        let h = pass.dist.entropy(tape).unwrap();
        let h = tape.scale(h, 0.1);
        tape.add(s, h).unwrap()
    };
    let mut tape = Tape::new();
    let l = loss(actor, &mut tape);
    tape.backward(l).unwrap();
    let analytic = actor.store().flat_grads_on(&tape);
    let mut values = actor.store().flat_values();
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let i = rng.random_range(0..values.len());
        let orig = values[i];
        let mut at = |v: f64, actor: &mut Actor| {
            values[i] = v;
            actor.store_mut().set_flat_values(&values);
            let mut t = Tape::new();
            let l = loss(actor, &mut t);
            t.item(l)
        };
        let up = at(orig + STEP, actor);
        let down = at(orig - STEP, actor);
        at(orig, actor);
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * STEP)));
    }
    worst
}

pub fn arch_actor(arch: &str, p: f64, seed: u64) -> (Actor, usize) {
    let (space, arch, window) = match arch {
        "mlp-cont" => (ActionSpace::Continuous { dim: 2 }, Arch::Mlp { hidden: vec![8, 8] }, 1),
        "mlp-disc" => (ActionSpace::Discrete { n: 4 }, Arch::Mlp { hidden: vec![8, 8] }, 1),
        "gpt-cont" | "gpt-disc" => (
            if arch == "gpt-cont" {
                ActionSpace::Continuous { dim: 2 }
            } else {
                ActionSpace::Discrete { n: 4 }
            },
            Arch::Gpt(GptConfig {
                d_model: 16,
                layers: 2,
                heads: 2,
                block: 4,
            }),
            4,
        ),
        other => panic!("unknown architecture {other}"),
    };
    let spec = ActorSpec {
        obs_dim: 3,
        space,
        arch,
        p,
    };
    let mut rng = stream(seed, Stream::Init, 0);
    let mut actor = Actor::new(spec, &mut rng).unwrap();
    let values: Vec<f64> = actor
        .store()
        .flat_values()
        .iter()
        .map(|v| v + 0.3 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    actor.store_mut().set_flat_values(&values);
    (actor, window)
}

/// Random contexts and actions for an actor.
pub fn batch_for(actor: &Actor, window: usize, batch: usize, rng: &mut StreamRng) -> (Vec<Vec<f64>>, Vec<Action>) {
    let obs = actor.spec().obs_dim;
    let contexts = (0..batch)
        .map(|_| {
            let len = rng.random_range(1..=window);
            (0..len * obs).map(|_| rng.sample(StandardNormal)).collect()
        })
        .collect();
    let actions = (0..batch)
        .map(|_| match actor.spec().space {
            ActionSpace::Continuous { dim } => {
                Action::Continuous((0..dim).map(|_| rng.sample(StandardNormal)).collect())
            }
            ActionSpace::Discrete { n } => Action::Discrete(rng.random_range(0..n)),
        })
        .collect();
    (contexts, actions)
}
