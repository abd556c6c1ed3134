mod common;

use common::{instance, rng};
use marl_dice::dataset::{fit_data_policies, generate, Behavior};
use marl_dice::envs::{build_bridge, BridgeSpec};
use marl_dice::eval::{ood_rate, OodMode};
use marl_dice::io::{dataset_from_jsonl, dataset_to_jsonl, mmdp_from_str, mmdp_to_string, PolicyDocument};
use marl_dice::mmdp::{best_response_value, evaluate_policy, stationary_distribution};
use marl_dice::nash::{best_response_gap, best_response_gap_with, mirror_descent_single_state, single_state_closed_form};
use marl_dice::random::{random_instance, random_policy, random_simplex};
use marl_dice::solver::{initial_policy, GroupedData, InnerConfig};
use marl_dice::{FactorizedPolicy, TrainConfig, TrainReport};
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn occupancy_satisfies_the_flow_constraints(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.random_range(1..=8);
        let sizes: Vec<usize> = (0..r.random_range(1..=3)).map(|_| r.random_range(1..=3)).collect();
        let gamma = r.random_range(0.0..0.99);
        let (m, pi) = random_instance(&mut r, n, &sizes, gamma);
        let occ = stationary_distribution(&m, &pi).unwrap();
        prop_assert!(occ.flow_residual(&m) <= 1e-9);
        prop_assert!((occ.total_mass() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn occupancy_and_values_give_the_same_return(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (n, gamma) = (r.random_range(1..=6), r.random_range(0.0..0.95));
        let (m, pi) = random_instance(&mut r, n, &[2, 3], gamma);
        let occ = stationary_distribution(&m, &pi).unwrap();
        let v = evaluate_policy(&m, &pi).unwrap();
        let via_occ: f64 = (0..m.n_states())
            .flat_map(|s| (0..m.n_joint()).map(move |a| (s, a)))
            .map(|(s, a)| occ.get(s, a) * m.reward(s, a))
            .sum();
        prop_assert!(((1.0 - m.gamma()) * v.j - via_occ).abs() <= 1e-8);
    }

    #[test]
    fn no_deviation_beats_the_best_response(seed in any::<u64>(), agent in 0usize..2) {
        let mut r = rng(seed);
        let n = r.random_range(1..=5);
        let gamma = r.random_range(0.0..0.95);
        let (m, pi) = random_instance(&mut r, n, &[2, 3], gamma);
        let br = best_response_value(&m, &pi, agent).unwrap();
        let mut dev = pi.clone();
        let other = random_policy(&mut r, n, &[2, 3], 0.3);
        dev.set_agent(agent, other.table(agent).to_vec()).unwrap();
        let v = evaluate_policy(&m, &dev).unwrap();
        for s in 0..n {
            prop_assert!(v.v[s] <= br.values.v[s] + 1e-8);
        }
    }

    #[test]
    fn conditional_counts_factorize(seed in any::<u64>()) {
        let inst = instance(seed, 0.3, 200);
        let meta = inst.mmdp.meta();
        let t = fit_data_policies(&inst.data, &meta).unwrap();
        for i in 0..meta.joint.n_agents() {
            for s in 0..meta.n_states {
                for a in 0..meta.joint.len() {
                    let ai = meta.joint.component(a, i);
                    match t.others_conditional(i, s, a) {
                        Some(c) => {
                            let lhs = c * t.agent_count(i, s, ai) as f64;
                            prop_assert!((lhs - t.joint_count(s, a) as f64).abs() <= 1e-9);
                        }
                        None => prop_assert_eq!(t.joint_count(s, a), 0),
                    }
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn fitted_tables_maximize_likelihood(seed in any::<u64>()) {
        let inst = instance(seed, 0.3, 200);
        let meta = inst.mmdp.meta();
        let t = fit_data_policies(&inst.data, &meta).unwrap();
        let mut r = rng(seed ^ 11);
        let nj = meta.joint.len();
        for i in 0..meta.joint.n_agents() {
            let ni = meta.joint.size(i);
            let marg = t.marginal_table(i);
            let cond = t.conditional_table(i);
            let best = t.log_likelihood(i, &marg, &cond);
            for _ in 0..50 {
                let eps: f64 = r.random_range(0.01..0.5);
                let mut marg2 = marg.clone();
                for s in 0..meta.n_states {
                    let q = random_simplex(&mut r, ni, 0.0);
                    for a in 0..ni {
                        marg2[s * ni + a] = (1.0 - eps) * marg[s * ni + a] + eps * q[a];
                    }
                }
                let mut cond2 = cond.clone();
                for s in 0..meta.n_states {
                    for ai in 0..ni {
                        let idx: Vec<usize> = (0..nj).filter(|&a| meta.joint.component(a, i) == ai).collect();
                        let q = random_simplex(&mut r, idx.len(), 0.0);
                        let z: f64 = idx.iter().map(|&a| cond[s * nj + a]).sum();
                        for (k, &a) in idx.iter().enumerate() {
                            let base = if z > 0.0 { cond[s * nj + a] } else { q[k] };
                            cond2[s * nj + a] = (1.0 - eps) * base + eps * q[k];
                        }
                    }
                }
                prop_assert!(t.log_likelihood(i, &marg2, &cond2) <= best + 1e-12);
            }
        }
    }

    #[test]
    fn generation_is_reproducible(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (m, pi) = random_instance(&mut r, 4, &[2, 2], 0.9);
        let b = [Behavior::Factorized(pi)];
        let x = generate(&m, &b, &[1.0], 20, 10, seed).unwrap();
        let y = generate(&m, &b, &[1.0], 20, 10, seed).unwrap();
        prop_assert_eq!(dataset_to_jsonl(&x), dataset_to_jsonl(&y));
    }

    #[test]
    fn mirror_descent_agrees_with_the_closed_form(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.random_range(2..=9);
        let d = random_simplex(&mut r, n, 0.3);
        let g: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let alpha = r.random_range(0.05..2.0);
        let (closed, _) = single_state_closed_form(&g, &d, alpha);
        let md = mirror_descent_single_state(&g, &d, alpha, 1e-14, 100_000);
        let tv: f64 = closed.iter().zip(&md).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
        prop_assert!(tv <= 1e-8, "tv {tv}");
    }

    #[test]
    fn loose_oracles_never_report_a_smaller_gap(seed in any::<u64>()) {
        let inst = instance(seed, 0.0, 1000);
        let data = GroupedData::new(&inst.mmdp.meta(), &inst.data).unwrap();
        let pi = initial_policy(&data, 1.0, seed);
        let alpha = 0.3;
        for i in 0..inst.mmdp.n_agents() {
            let tight = best_response_gap(&inst.mmdp, &pi, &inst.dist, alpha, i).unwrap();
            for tol in [1e-8, 1e-6, 1e-4] {
                let cfg = InnerConfig { grad_tol: tol, ..InnerConfig::default() };
                let loose = best_response_gap_with(&inst.mmdp, &pi, &inst.dist, alpha, i, &cfg).unwrap();
                prop_assert!(loose.gap == tight.gap || loose.gap >= tight.gap - 1e-12 * (1.0 + tight.gap.abs()), "{} < {}", loose.gap, tight.gap);
            }
        }
    }

    #[test]
    fn exact_ood_rate_matches_sampling(seed in any::<u64>()) {
        let inst = instance(seed, 0.4, 100);
        let mut r = rng(seed ^ 5);
        let pi = random_policy(&mut r, inst.mmdp.n_states(), inst.mmdp.joint().sizes(), 0.0);
        let p = ood_rate(&pi, &inst.dist, OodMode::SupportExact).unwrap();
        let draws = 100_000;
        let q = ood_rate(&pi, &inst.dist, OodMode::Sampled { draws, seed }).unwrap();
        let se = (p * (1.0 - p) / draws as f64).sqrt();
        // 5 SE: a 3 SE bound fails by chance once in a few hundred cases
        prop_assert!((p - q).abs() <= 5.0 * se + 1e-12, "{p} vs {q}");
    }

    #[test]
    fn files_round_trip_bit_exactly(seed in any::<u64>()) {
        let inst = instance(seed, 0.2, 50);
        let text = mmdp_to_string(&inst.mmdp);
        let back = mmdp_from_str(&text).unwrap();
        prop_assert_eq!(&back, &inst.mmdp);
        prop_assert_eq!(mmdp_to_string(&back), text);

        let jsonl = dataset_to_jsonl(&inst.data);
        let sidecar = marl_dice::io::DatasetSidecar {
            initial_states: inst.data.initial_states.clone(),
            meta: inst.data.meta.clone(),
            manifest: None,
        };
        let data = dataset_from_jsonl(&jsonl, sidecar).unwrap();
        prop_assert_eq!(&data, &inst.data);

        let doc = PolicyDocument::from_policy(&inst.mmdp, &inst.behavior, &[]);
        let doc2: PolicyDocument = serde_json::from_str(&serde_json::to_string(&doc).unwrap()).unwrap();
        let pi: FactorizedPolicy = doc2.to_policy(&inst.mmdp).unwrap();
        prop_assert_eq!(&pi, &inst.behavior);
        let raw: FactorizedPolicy = serde_json::from_str(&serde_json::to_string(&pi).unwrap()).unwrap();
        prop_assert_eq!(&raw, &pi);
    }
}

#[test]
fn reports_round_trip() {
    let inst = instance(7, 0.2, 300);
    let cfg = TrainConfig { alpha: 0.3, ..TrainConfig::default() };
    let out = marl_dice::train(&inst.mmdp.meta(), &inst.data, &cfg, Some(&inst.mmdp)).unwrap();
    let text = serde_json::to_string(&out.report).unwrap();
    let back: TrainReport = serde_json::from_str(&text).unwrap();
    assert_eq!(serde_json::to_string(&back).unwrap(), text);
    assert_eq!(back, out.report);
    let audit = marl_dice::nash::audit_training(&out.report, &inst.mmdp, &inst.dist, 0.3).unwrap();
    let text = serde_json::to_string(&audit).unwrap();
    assert_eq!(serde_json::from_str::<marl_dice::NashReport>(&text).unwrap(), audit);
}

#[test]
fn bridge_occupancy_is_consistent_with_terminals() {
    let b = build_bridge(&BridgeSpec::default()).unwrap();
    let m = b.mmdp.with_gamma(0.95).unwrap();
    for seed in 0..5 {
        let mut r = rng(seed);
        let pi = random_policy(&mut r, m.n_states(), m.joint().sizes(), 0.0);
        let occ = stationary_distribution(&m, &pi).unwrap();
        assert!(occ.flow_residual(&m) <= 1e-9);
    }
}
