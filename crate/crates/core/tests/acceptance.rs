//! Acceptance checks. Each test prints one `ACCEPTANCE <n> PASS|FAIL` line
//! and then asserts, so `cargo test --test acceptance -- --nocapture` gives
//! a per-criterion report.

use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use multigoal_core::agent::{TrainConfig, Trainer};
use multigoal_core::env::{
    encode_observation, potential, Action, Cell, EnvState, FrameStack, GridLayout, GridWorld,
    RewardConfig,
};
use multigoal_core::language::{
    enumerate_instructions, resolve_plan, validate, Connector, ExecutionPlan, Instruction,
    LanguageSubset, Referent,
};
use multigoal_core::oracle::BfsOracle;
use multigoal_core::policy::{evaluate_episodes, max_steps_for};
use multigoal_core::qnet::{
    argmax, dueling_combine, encode_checkpoint, fuse_gated_attention, gradient_check, Fusion,
    GradCheckConfig, NetworkConfig, ParameterSet,
};
use multigoal_core::replay::{PerConfig, ReplayBuffer, Transition};
use multigoal_core::sum_tree::SumTree;
use multigoal_core::tabular::value_iteration;

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    // Written past the test harness capture so the line shows up in a plain
    // `cargo test` run.
    let line = format!("ACCEPTANCE {n:>2} {verdict} {name}: {detail}\n");
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

#[test]
fn c01_language_counts() {
    let start = Instant::now();
    let expected = [
        (LanguageSubset::Comma, 21, 168),
        (LanguageSubset::CommaButFirst, 39, 336),
        (LanguageSubset::CommaButBefore, 39, 336),
    ];
    let mut got = Vec::new();
    for (subset, _, _) in expected {
        let train = enumerate_instructions(subset, 1, 3).unwrap().len();
        let test = enumerate_instructions(subset, 4, 6).unwrap().len();
        got.push((subset, train, test));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = got == expected && secs < 1.0;
    let detail = got
        .iter()
        .map(|(s, a, b)| format!("{s} {a}/{b}"))
        .collect::<Vec<_>>()
        .join(", ");
    report(
        1,
        "language counts",
        pass,
        &format!("{detail} in {secs:.3}s"),
    );
}

#[test]
fn c02_resolution_semantics() {
    use Referent::*;
    let rows = [
        (
            "go to the red , go to the blue , go to the green",
            vec![Red, Blue, Green],
        ),
        (
            "go to the red , go to the blue , but first go to the green",
            vec![Green, Red, Blue],
        ),
        (
            "go to the red , go to the blue , but before go to the green",
            vec![Red, Green, Blue],
        ),
    ];
    let mut pass = true;
    for (text, order) in &rows {
        let plan = resolve_plan(&Instruction::parse(text).unwrap()).unwrap();
        pass &= plan.order() == order.as_slice();
    }
    report(2, "resolution semantics", pass, "three example rows");
}

#[test]
fn c03_fsa_oracle_equivalence() {
    let mut mismatches = 0;
    let mut total = 0;
    for subset in LanguageSubset::ALL {
        let mut brute = BTreeSet::new();
        for n in 1..=4usize {
            for rcode in 0..3usize.pow(n as u32) {
                let refs: Vec<Referent> = (0..n)
                    .map(|k| Referent::ALL[(rcode / 3usize.pow(k as u32)) % 3])
                    .collect();
                for ccode in 0..3usize.pow(n as u32 - 1) {
                    let conns: Vec<Connector> = (0..n - 1)
                        .map(|k| {
                            [Connector::Comma, Connector::ButFirst, Connector::ButBefore]
                                [(ccode / 3usize.pow(k as u32)) % 3]
                        })
                        .collect();
                    let i = Instruction::new(refs.clone(), conns).unwrap();
                    if validate(&i) && subset.contains(&i) {
                        brute.insert(i);
                    }
                }
            }
        }
        let listed = enumerate_instructions(subset, 1, 4).unwrap();
        let generated: BTreeSet<_> = listed.iter().cloned().collect();
        total += brute.len();
        if generated != brute || generated.len() != listed.len() {
            mismatches += 1;
        }
    }
    report(
        3,
        "FSA oracle equivalence",
        mismatches == 0,
        &format!(
            "{total} brute-force instructions over three subsets, {mismatches} subsets differ"
        ),
    );
}

#[test]
fn c04_shaping_policy_invariance() {
    let layout = GridLayout::new(5, 5, Cell(0, 2), [Cell(3, 3), Cell(1, 0), Cell(4, 0)]).unwrap();
    let plan = ExecutionPlan::new(vec![Referent::Red]);
    let base = RewardConfig {
        shaping: false,
        ..RewardConfig::default()
    };
    let shaped = RewardConfig {
        shaping: true,
        ..base
    };
    let u = value_iteration(&layout, &plan, &base, 1e-13, 100_000);
    let s = value_iteration(&layout, &plan, &shaped, 1e-13, 100_000);
    let differing = (0..u.states.len())
        .filter(|&i| u.greedy_set(i, 1e-9) != s.greedy_set(i, 1e-9))
        .count();
    report(
        4,
        "shaping policy invariance",
        differing == 0 && u.states == s.states,
        &format!("{} states, {differing} argmax sets differ", u.states.len()),
    );
}

#[test]
fn c05_telescoping() {
    let layout = GridLayout::figure();
    let rewards = RewardConfig {
        gamma: 1.0,
        ..RewardConfig::default()
    };
    let instrs = enumerate_instructions(LanguageSubset::CommaButBefore, 1, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut env = GridWorld::new(layout.clone(), rewards);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let instr = &instrs[rng.random_range(0..instrs.len())];
        let (s0, _) = env
            .reset(resolve_plan(instr).unwrap(), max_steps_for(instr, 30))
            .unwrap();
        let phi0 = potential(&layout, s0);
        let (mut shaped, mut base) = (0.0, 0.0);
        loop {
            let out = env.step(Action::ALL[rng.random_range(0..4)]).unwrap();
            shaped += out.reward;
            base += out.base_reward;
            if out.done {
                break;
            }
        }
        worst = worst.max((shaped - base + phi0).abs());
    }
    report(
        5,
        "telescoping",
        worst <= 1e-9,
        &format!("max |shaped - base + phi(s0)| = {worst:.2e} over 1000 rollouts"),
    );
}

fn dummy_transition() -> Transition {
    let layout = GridLayout::figure();
    let s = EnvState::initial(&layout, ExecutionPlan::new(vec![Referent::Red]), 1).unwrap();
    let frames = FrameStack::filled(encode_observation(&layout, &s));
    Transition {
        frames,
        tokens: vec![0usize].into(),
        action: 0,
        reward: 0.0,
        next_frames: frames,
        done: false,
    }
}

#[test]
fn c06_per_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut prefix_mismatch = 0;
    for _ in 0..10_000 {
        let cap = rng.random_range(1..=64);
        let mut tree = SumTree::new(cap);
        let mut masses = vec![0.0f64; tree.capacity()];
        for _ in 0..rng.random_range(1..40) {
            let i = rng.random_range(0..cap);
            // multiples of 1/8 keep every partial sum exact
            let m = if rng.random_bool(0.2) {
                0.0
            } else {
                rng.random_range(1..80) as f64 / 8.0
            };
            tree.set(i, m);
            masses[i] = m;
        }
        let total: f64 = masses.iter().sum();
        if total == 0.0 {
            continue;
        }
        for _ in 0..8 {
            let q = rng.random_range(0..(total * 8.0) as u64) as f64 / 8.0;
            let mut acc = 0.0;
            let linear = masses
                .iter()
                .position(|&m| {
                    acc += m;
                    acc > q
                })
                .unwrap();
            if tree.find_prefix(q) != linear {
                prefix_mismatch += 1;
            }
        }
    }

    let per = PerConfig {
        capacity: 16,
        ..PerConfig::default()
    };
    let mut buf = ReplayBuffer::prioritized(&per);
    for _ in 0..10 {
        buf.push(dummy_transition());
    }
    let errors: Vec<f64> = (0..10).map(|i| 0.1 + i as f64 * 0.7).collect();
    buf.update_priorities(&(0..10).collect::<Vec<_>>(), &errors)
        .unwrap();
    let draws = 100_000;
    let mut counts = [0usize; 10];
    for _ in 0..draws {
        counts[buf.sample(1, 0.4, &mut rng).unwrap().indices[0]] += 1;
    }
    let worst = (0..10)
        .map(|i| (counts[i] as f64 / draws as f64 - buf.probability(i)).abs())
        .fold(0.0, f64::max);
    report(
        6,
        "PER correctness",
        prefix_mismatch == 0 && worst <= 0.02,
        &format!("{prefix_mismatch} prefix mismatches, max frequency error {worst:.4}"),
    );
}

#[test]
fn c07_gradient_checks() {
    let mut lines = Vec::new();
    let mut pass = true;
    for fusion in Fusion::ALL {
        let tiny =
            gradient_check(&NetworkConfig::tiny(fusion), &GradCheckConfig::default()).unwrap();
        let full = gradient_check(
            &NetworkConfig::default_for(10, 10, fusion),
            &GradCheckConfig {
                coords_per_tensor: Some(8),
                batch: 3,
                seed: 7,
                ..GradCheckConfig::default()
            },
        )
        .unwrap();
        pass &= tiny.passed() && full.passed();
        lines.push(format!(
            "{} max rel {:.1e} (every coordinate, small net) / {:.1e} (sampled, full net) over {} tensors",
            fusion.short_name(),
            tiny.max_rel_error(),
            full.max_rel_error(),
            full.tensors.len()
        ));
    }
    report(7, "gradient checks", pass, &lines.join("; "));
}

#[test]
fn c08_dueling_and_gate_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut argmax_ok = true;
    for _ in 0..1000 {
        let v: f64 = rng.random_range(-5.0..5.0);
        let a: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
        let shift: f64 = rng.random_range(-100.0..100.0);
        let shifted: Vec<f64> = a.iter().map(|x| x + shift).collect();
        argmax_ok &= argmax(&dueling_combine(v, &a)) == argmax(&dueling_combine(v, &shifted));
    }
    let cfg = NetworkConfig::default_for(10, 10, Fusion::GatedAttention);
    let mut p = ParameterSet::init(&cfg, &mut rng);
    p.gate_w.as_mut().unwrap().data.fill(0.0);
    p.gate_b.as_mut().unwrap().data.fill(0.0);
    let features: Vec<f64> = (0..cfg.feature_len())
        .map(|_| rng.random_range(-3.0..3.0))
        .collect();
    let instr: Vec<f64> = (0..cfg.instr_dim)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let gated = fuse_gated_attention(&p, &features, &instr).unwrap();
    let half_ok = gated.iter().zip(&features).all(|(g, f)| *g == 0.5 * f);
    report(
        8,
        "dueling and gate identities",
        argmax_ok && half_ok,
        &format!(
            "advantage shift keeps argmax: {argmax_ok}; zero-logit gate halves features: {half_ok}"
        ),
    );
}

#[test]
fn c09_end_to_end_oracle() {
    let start = Instant::now();
    let instrs = enumerate_instructions(LanguageSubset::CommaButFirst, 1, 6).unwrap();
    let eval = evaluate_episodes(
        &mut BfsOracle,
        &GridLayout::figure(),
        &RewardConfig::default(),
        &instrs,
        30,
    )
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    report(
        9,
        "end-to-end oracle",
        eval.success_rate() == 1.0 && secs < 60.0,
        &format!(
            "success {:.3} on {} Comma-ButFirst instructions in {secs:.1}s",
            eval.success_rate(),
            instrs.len()
        ),
    );
}

/// Configuration used for the smoke-training criterion: DDQN + Cat + PER
/// with a shorter horizon, a faster exploration schedule and a weak potential.
fn smoke_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.network = NetworkConfig::default_for(10, 10, Fusion::Concatenation);
    cfg.agent.replay = multigoal_core::replay::ReplayMode::Prioritized;
    cfg.agent.double_q = true;
    cfg.agent.epsilon_decay_steps = 20_000;
    cfg.optimizer.lr = 5e-4;
    cfg.rewards.gamma = 0.9;
    cfg.rewards.shaping = true;
    cfg.rewards.potential_scale = 0.05;
    cfg
}

#[test]
fn c10_smoke_training() {
    let instrs = enumerate_instructions(LanguageSubset::Comma, 1, 2).unwrap();
    assert_eq!(instrs.len(), 9);
    let start = Instant::now();
    let mut trainer = Trainer::new(smoke_config(), GridLayout::figure()).unwrap();
    let curve = trainer
        .train_with(&instrs, 300, |_, r| r.train_success_rate < 0.9)
        .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let last = curve.last().unwrap();
    let best = curve
        .iter()
        .map(|r| r.train_success_rate)
        .fold(0.0, f64::max);
    report(
        10,
        "smoke training",
        last.train_success_rate >= 0.9 && secs < 45.0 * 60.0,
        &format!(
            "greedy train success {:.3} after {} epochs (best {best:.3}) in {:.1} min",
            last.train_success_rate,
            last.epoch,
            secs / 60.0
        ),
    );
}

#[test]
fn c11_reproducibility() {
    let instrs = enumerate_instructions(LanguageSubset::Comma, 1, 2).unwrap();
    let run = || {
        let mut cfg = smoke_config();
        cfg.agent.seed = 11;
        let mut t = Trainer::new(cfg, GridLayout::figure()).unwrap();
        t.record_wall_time = false;
        let curve = t.train(&instrs[..4], 3).unwrap();
        let log: String = curve
            .iter()
            .map(|r| serde_json::to_string(r).unwrap() + "\n")
            .collect();
        (
            log,
            encode_checkpoint(&t.online),
            encode_checkpoint(t.target()),
        )
    };
    let (a, b) = (run(), run());
    report(
        11,
        "reproducibility",
        a == b,
        &format!(
            "{} log bytes and {} checkpoint bytes compared",
            a.0.len(),
            a.1.len() + a.2.len()
        ),
    );
}
