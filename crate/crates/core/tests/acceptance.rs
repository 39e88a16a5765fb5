//! Acceptance report: one PASS/FAIL line per criterion.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use cdrl_core::algos::{marginalized_score, policy_gradient, Algorithm, MaskPolicy};
use cdrl_core::envs::EnvKind;
use cdrl_core::harness::{
    divergence_probe, eval_mode_study, run_experiment, ArchKind, ProbeNet, RunConfig, RunOutcome, PROBE_GRID,
};
use cdrl_core::nets::Action;
use cdrl_core::seeding::{stream, Stream};
use common::gae_oracle::{brute_force, random_steps};
use common::gradcheck::{arch_actor, batch_for, check_actor, op_suite, REL_TOL};
use common::replay::{buffer, logp_mismatches, policy, replay_mismatches};
use common::training::{bit_identical, small, trajectory};
use common::{enumerate_masks, enumerated_score, fresh_actor};

const INSTABILITY_FLOOR: f64 = -20.0;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn gradients() -> Verdict {
    let cases = op_suite(11, 4);
    let op_worst = cases.iter().map(|c| c.worst).fold(0.0, f64::max);
    let mut arch_worst = 0.0f64;
    let mut instances = cases.len();
    for arch in ["mlp-cont", "mlp-disc", "gpt-cont", "gpt-disc"] {
        for p in [0.0, 0.3] {
            let (mut actor, window) = arch_actor(arch, p, 5);
            let mut rng = stream(5, Stream::Probe, 7);
            let (ctx, act) = batch_for(&actor, window, 3, &mut rng);
            arch_worst = arch_worst.max(check_actor(&mut actor, &ctx, &act, 40, &mut rng));
            instances += 1;
        }
    }
    verdict(
        instances >= 100 && op_worst <= REL_TOL && arch_worst <= REL_TOL,
        format!("{instances} instances, worst op {op_worst:.1e}, worst network {arch_worst:.1e}, tol {REL_TOL:.0e}"),
    )
}

fn replay() -> Verdict {
    let mlp = replay_mismatches(&policy(false, 0.5, 1), 1000, 1);
    let gpt = replay_mismatches(&policy(true, 0.25, 1), 1000, 1);
    let mut logp_bad = 0;
    let mut checked = 0;
    for gpt_arch in [false, true] {
        let actor = policy(gpt_arch, 0.5, 2);
        let (buf, _) = buffer(&actor, 2, 4, 64);
        let order: Vec<usize> = (0..buf.len()).rev().collect();
        logp_bad += logp_mismatches(&actor, &buf, &order, 17).len();
        checked += buf.len();
    }
    verdict(
        mlp == 0 && gpt == 0 && logp_bad == 0,
        format!("output mismatches mlp {mlp}/1000 gpt {gpt}/1000, logp mismatches {logp_bad}/{checked}"),
    )
}

fn zero_dropout_equivalence() -> Verdict {
    let a2c = trajectory(&small(Algorithm::A2c, 0.0, 3), 50);
    let a2c_c = trajectory(&small(Algorithm::A2cConsistent, 0.0, 3), 50);
    let ppo = trajectory(&small(Algorithm::Ppo, 0.0, 3), 50);
    let ppo_c = trajectory(&small(Algorithm::PpoConsistent, 0.0, 3), 50);
    let ppo_m = trajectory(&small(Algorithm::PpoMarginal, 0.0, 3), 50);
    let a = bit_identical(&a2c, &a2c_c);
    let p = bit_identical(&ppo, &ppo_c);
    let m = bit_identical(&ppo, &ppo_m);
    verdict(
        a && p && m,
        format!("50 updates: a2c/a2c-c identical {a}, ppo/ppo-c identical {p}, ppo/ppo-marg identical {m}"),
    )
}

fn probe() -> Verdict {
    let mlp = divergence_probe(ProbeNet::MlpContinuous, &PROBE_GRID, 1000, 100, 0).unwrap();
    let monotone = mlp
        .windows(2)
        .all(|w| w[1].d_mean >= w[0].d_mean && -w[1].logp_mean >= -w[0].logp_mean);
    let zero = mlp[0].d_mean == 0.0 && mlp[0].d_std == 0.0;
    let gpt = divergence_probe(ProbeNet::Gpt, &[0.1], 1000, 100, 0).unwrap();
    let mlp_half = mlp.iter().find(|r| r.p == 0.5).unwrap().d_mean;
    let ordered = gpt[0].d_mean > mlp_half;
    let ds: Vec<String> = mlp.iter().map(|r| format!("{:.4}", r.d_mean)).collect();
    verdict(
        monotone && zero && ordered,
        format!(
            "mlp d [{}] monotone {monotone}, p=0 exact {zero}, gpt d(0.1) {:.4} > mlp d(0.5) {mlp_half:.4}",
            ds.join(", "),
            gpt[0].d_mean
        ),
    )
}

fn marginal_exactness() -> Verdict {
    let obs = [0.3, -0.7, 1.1];
    let action = Action::Continuous(vec![0.4, -0.2]);
    let mut pass = true;
    let mut parts = Vec::new();
    for hidden in [vec![2], vec![4, 4]] {
        let bits = enumerate_masks(&hidden, 0.5).len().trailing_zeros();
        let actor = fresh_actor(&hidden, 0.5, 0);
        let exact = enumerated_score(&actor, &hidden, &obs, &action);
        let est = marginalized_score(&actor, &obs, &action, 10_000, &mut stream(0, Stream::Marginal, 0)).unwrap();
        let wsum = (est.weights.iter().sum::<f64>() - 1.0).abs();
        let worst = est
            .grad
            .iter()
            .zip(&exact)
            .map(|(e, x)| {
                if *x == 0.0 {
                    if *e == 0.0 {
                        0.0
                    } else {
                        f64::INFINITY
                    }
                } else {
                    (e - x).abs() / x.abs()
                }
            })
            .fold(0.0, f64::max);
        pass &= worst <= 0.02 && wsum <= 1e-12;
        parts.push(format!(
            "{bits} bits: worst component {:.2}%, |sum w - 1| {wsum:.1e}",
            100.0 * worst
        ));
    }
    verdict(pass, parts.join("; "))
}

fn train(root: &Path, alg: Algorithm, p: f64, seed: u64) -> RunOutcome {
    let mut cfg = RunConfig::desk(alg, EnvKind::Pointmass, ArchKind::Mlp);
    cfg.dropout = p;
    cfg.seed = seed;
    if alg.is_ppo() {
        cfg.target_kl = Some(0.01);
    }
    let dir = root.join(format!("{}-p{p}-s{seed}", alg.name()));
    run_experiment(&cfg, &dir).unwrap()
}

fn normalized(x: f64, baseline: f64) -> f64 {
    let random = EnvKind::Pointmass.spec().random_return;
    let x = if x.is_finite() { x } else { random };
    (x - random) / (baseline - random)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn final_returns(runs: &[RunOutcome]) -> Vec<f64> {
    runs.iter().map(|r| r.final_third_return.unwrap_or(f64::NAN)).collect()
}

fn instability(root: &Path) -> (Verdict, Vec<PathBuf>) {
    let runs = |alg, p| -> Vec<RunOutcome> { SEEDS.iter().map(|&s| train(root, alg, p, s)).collect() };

    let a2c = runs(Algorithm::A2c, 0.5);
    let unstable = a2c.iter().filter(|r| r.unstable(INSTABILITY_FLOOR)).count();
    let a2c_base = mean(&final_returns(&runs(Algorithm::A2cConsistent, 0.0)));
    let a2c_c = mean(
        &final_returns(&runs(Algorithm::A2cConsistent, 0.5))
            .iter()
            .map(|&x| normalized(x, a2c_base))
            .collect::<Vec<_>>(),
    );

    let ppo = runs(Algorithm::Ppo, 0.5);
    let records: Vec<_> = ppo.iter().flat_map(|r| &r.records).collect();
    let stopped = records.iter().filter(|r| r.early_stopped_at == Some(1)).count() as f64 / records.len() as f64;
    let ppo_base_runs = runs(Algorithm::PpoConsistent, 0.0);
    let ppo_base = mean(&final_returns(&ppo_base_runs));
    let mut ppo_c = Vec::new();
    let mut checkpoints = vec![ppo_base_runs[0].checkpoint_path()];
    for p in [0.1, 0.25] {
        let r = runs(Algorithm::PpoConsistent, p);
        checkpoints.push(r[0].checkpoint_path());
        ppo_c.push((
            p,
            mean(
                &final_returns(&r)
                    .iter()
                    .map(|&x| normalized(x, ppo_base))
                    .collect::<Vec<_>>(),
            ),
        ));
    }

    let pass = unstable >= 2 && a2c_c >= 0.4 && stopped >= 0.9 && ppo_c.iter().all(|(_, s)| *s >= 0.6);
    let ppo_c_text: Vec<String> = ppo_c.iter().map(|(p, s)| format!("p={p}: {s:.2}")).collect();
    let v = verdict(
        pass,
        format!(
            "a2c unstable {unstable}/3, a2c-c score {a2c_c:.2} (>= 0.4), ppo stop-at-1 rate {:.2} (>= 0.90), ppo-c scores {} (>= 0.6)",
            stopped,
            ppo_c_text.join(", ")
        ),
    );
    (v, checkpoints)
}

fn marginal_variance() -> Verdict {
    let actor = policy(false, 0.25, 8);
    let (buf, _) = buffer(&actor, 8, 2, 32);
    let mb = buf.all().unwrap();
    let variance = |policy: MaskPolicy| -> f64 {
        let draws: Vec<Vec<f64>> = (0..30)
            .map(|i| policy_gradient(&actor, &mb, policy, &mut stream(8, Stream::Marginal, i)).unwrap())
            .collect();
        let dim = draws[0].len();
        (0..dim)
            .map(|j| {
                let shifted: Vec<f64> = draws.iter().map(|d| d[j] - draws[0][j]).collect();
                let m = shifted.iter().sum::<f64>() / shifted.len() as f64;
                shifted.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (shifted.len() - 1) as f64
            })
            .sum()
    };
    let v10 = variance(MaskPolicy::Marginal(10));
    let v100 = variance(MaskPolicy::Marginal(100));
    let vr = variance(MaskPolicy::Replay);
    verdict(
        v10 > v100 && v100 > vr && vr == 0.0,
        format!("total variance N=10 {v10:.3e} > N=100 {v100:.3e} > replay {vr:.1e}"),
    )
}

fn eval_modes(root: &Path, mut checkpoints: Vec<PathBuf>) -> Verdict {
    checkpoints.push(train(root, Algorithm::PpoConsistent, 0.5, 0).checkpoint_path());
    let rows = eval_mode_study(&checkpoints, 100, 0).unwrap();
    let half = rows.iter().find(|r| r.p == 0.5).unwrap();
    let improvements: Vec<f64> = rows.iter().filter(|r| r.p > 0.0).map(|r| r.improvement).collect();
    let nondecreasing = improvements.windows(2).all(|w| w[1] >= w[0]);
    let text: Vec<String> = rows
        .iter()
        .map(|r| format!("p={}: {:+.1}%", r.p, 100.0 * r.improvement))
        .collect();
    verdict(
        half.dropout_off >= half.dropout_on && nondecreasing,
        format!(
            "improvement {}; off {:.2} vs on {:.2} at p=0.5",
            text.join(", "),
            half.dropout_off,
            half.dropout_on
        ),
    )
}

fn gae_oracle() -> Verdict {
    let mut rng = stream(0, Stream::Probe, 99);
    let settings = [(0.99, 0.95), (0.0, 0.95), (0.99, 0.0), (1.0, 1.0), (0.9, 1.0)];
    let mut worst = 0.0f64;
    for i in 0..200 {
        let (g, l) = settings[i % settings.len()];
        let steps = random_steps(&mut rng, 1 + i % 40);
        let (adv, _) = cdrl_core::rollout::gae(&steps, g, l).unwrap();
        let oracle = brute_force(&steps, g, l);
        worst = adv
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).abs())
            .fold(worst, f64::max);
    }
    verdict(worst <= 1e-12, format!("200 sequences, worst abs error {worst:.1e}"))
}

fn determinism(root: &Path) -> Verdict {
    let mut cfg = small(Algorithm::PpoConsistent, 0.25, 1);
    cfg.total_steps = cfg.steps_per_update() * 6;
    cfg.eval_every = 3;
    let (a, b) = (root.join("det-a"), root.join("det-b"));
    run_experiment(&cfg, &a).unwrap();
    run_experiment(&cfg, &b).unwrap();
    let same = ["metrics.jsonl", "metrics.csv"]
        .iter()
        .all(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap());
    verdict(same, format!("metrics.jsonl and metrics.csv byte-identical {same}"))
}

fn report(id: usize, name: &str, start: Instant, v: &Verdict, passed: &mut usize) {
    if v.pass {
        *passed += 1;
    }
    println!(
        "[{}] {id:>2} {name}: {} ({:.1}s)",
        if v.pass { "PASS" } else { "FAIL" },
        v.detail,
        start.elapsed().as_secs_f64()
    );
}

fn main() {
    let root = tempfile::tempdir().unwrap();
    let mut passed = 0;
    let mut t = Instant::now();
    report(1, "gradient correctness", t, &gradients(), &mut passed);
    t = Instant::now();
    report(2, "replay determinism", t, &replay(), &mut passed);
    t = Instant::now();
    report(
        3,
        "zero-dropout equivalence",
        t,
        &zero_dropout_equivalence(),
        &mut passed,
    );
    t = Instant::now();
    report(4, "divergence probe", t, &probe(), &mut passed);
    t = Instant::now();
    report(
        5,
        "marginal estimator vs enumeration",
        t,
        &marginal_exactness(),
        &mut passed,
    );
    t = Instant::now();
    let (v6, checkpoints) = instability(root.path());
    report(6, "instability reproduction", t, &v6, &mut passed);
    t = Instant::now();
    report(7, "marginal gradient variance", t, &marginal_variance(), &mut passed);
    t = Instant::now();
    report(
        8,
        "evaluation mode study",
        t,
        &eval_modes(root.path(), checkpoints),
        &mut passed,
    );
    t = Instant::now();
    report(9, "advantage oracle", t, &gae_oracle(), &mut passed);
    t = Instant::now();
    report(10, "end-to-end determinism", t, &determinism(root.path()), &mut passed);
    println!("acceptance: {passed}/10 criteria pass");
}
