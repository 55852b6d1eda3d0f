//! Potential-based shaping leaves the optimal policies unchanged, checked by
//! exact value iteration on small layouts.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use multigoal_core::env::{potential, EnvState, GridLayout, RewardConfig, Status};
use multigoal_core::language::{ExecutionPlan, Referent};
use multigoal_core::tabular::value_iteration;

fn plan_strategy() -> impl Strategy<Value = Vec<Referent>> {
    let r = prop::sample::select(Referent::ALL.to_vec());
    prop_oneof![
        r.clone().prop_map(|a| vec![a]),
        (r.clone(), r)
            .prop_filter("no immediate repeat", |(a, b)| a != b)
            .prop_map(|(a, b)| vec![a, b]),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn shaped_and_unshaped_greedy_sets_agree(
        seed in any::<u64>(),
        order in plan_strategy(),
        gamma in prop::sample::select(vec![0.9, 0.99]),
        scale in prop::sample::select(vec![1.0, 0.25]),
    ) {
        let layout = GridLayout::random(5, 5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let plan = ExecutionPlan::new(order);
        let base = RewardConfig { gamma, shaping: false, potential_scale: scale, ..Default::default() };
        let shaped = RewardConfig { shaping: true, ..base };
        let u = value_iteration(&layout, &plan, &base, 1e-13, 100_000);
        let s = value_iteration(&layout, &plan, &shaped, 1e-13, 100_000);
        prop_assert_eq!(&u.states, &s.states);
        for (i, &(agent, progress)) in u.states.iter().enumerate() {
            prop_assert_eq!(u.greedy_set(i, 1e-7), s.greedy_set(i, 1e-7), "state {:?}", (agent, progress));
            let state = EnvState {
                agent,
                plan: plan.clone(),
                progress,
                steps: 0,
                max_steps: usize::MAX,
                status: Status::Running,
            };
            let phi = scale * potential(&layout, &state);
            for a in 0..4 {
                // Q_shaped = Q - phi(s)
                prop_assert!((s.q[i][a] - (u.q[i][a] - phi)).abs() < 1e-8);
            }
        }
    }
}
