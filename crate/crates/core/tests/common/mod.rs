#![allow(dead_code)]

use marl_dice::dataset::empirical_distribution;
use marl_dice::random::{random_dataset, random_mmdp, random_policy, random_simplex};
use marl_dice::solver::dual::{DualProblem, Term};
use marl_dice::{EmpiricalDistribution, FactorizedPolicy, OfflineDataset, TabularMmdp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub struct Instance {
    pub mmdp: TabularMmdp,
    pub behavior: FactorizedPolicy,
    pub data: OfflineDataset,
    pub dist: EmpiricalDistribution,
}

/// Random MMDP with 2–3 agents and a dataset from a random behavior policy.
pub fn instance(seed: u64, behavior_sparsity: f64, n_records: usize) -> Instance {
    let mut r = rng(seed);
    let n_states = r.random_range(1..=4);
    let n_agents = r.random_range(2..=3);
    let sizes: Vec<usize> = (0..n_agents).map(|_| r.random_range(2..=3)).collect();
    let gamma = if n_states == 1 { 0.0 } else { r.random_range(0.0..0.95) };
    let mmdp = random_mmdp(&mut r, n_states, &sizes, gamma);
    let behavior = random_policy(&mut r, n_states, &sizes, behavior_sparsity);
    let data = random_dataset(&mut r, &mmdp, &behavior, n_records);
    let dist = empirical_distribution(&data, &mmdp.meta()).unwrap();
    Instance {
        mmdp,
        behavior,
        data,
        dist,
    }
}

/// Random dual of DICE form: per-state sample terms `e_t = b_t + γν(s') − ν(s)`
/// (or `b_t − ν(s)` when `done`), linear part `(1−γ)p0`, full-support `p0`.
/// Terms are grouped into entries; `entries[k]` lists the term indices of entry `k`.
pub struct RandomDual {
    pub problem: DualProblem,
    pub gamma: f64,
    pub entries: Vec<Vec<usize>>,
}

pub fn random_dual(seed: u64, allow_done: bool, singleton_entries: bool) -> RandomDual {
    let mut r = rng(seed);
    let n = r.random_range(1..=5);
    let gamma = r.random_range(0.0..0.95);
    let alpha = r.random_range(0.1..2.0);
    let p0 = random_simplex(&mut r, n, 0.0);
    let mut terms = vec![];
    let mut entries = vec![];
    for s in 0..n {
        for _ in 0..r.random_range(1..=3) {
            let k = if singleton_entries { 1 } else { r.random_range(1..=3) };
            let mut idx = vec![];
            for _ in 0..k {
                let done = allow_done && r.random::<f64>() < 0.2;
                let next = r.random_range(0..n);
                let coeffs = if done {
                    vec![(s, -1.0)]
                } else if next == s {
                    vec![(s, gamma - 1.0)]
                } else {
                    vec![(s, -1.0), (next, gamma)]
                };
                idx.push(terms.len());
                terms.push(Term {
                    weight: r.random_range(0.05..1.0),
                    offset: r.random_range(-2.0..2.0),
                    coeffs,
                    source: s,
                });
            }
            entries.push(idx);
        }
    }
    let z: f64 = terms.iter().map(|t| t.weight).sum();
    terms.iter_mut().for_each(|t| t.weight /= z);
    RandomDual {
        problem: DualProblem {
            n,
            linear: p0.iter().map(|p| (1.0 - gamma) * p).collect(),
            terms,
            alpha,
        },
        gamma,
        entries,
    }
}

pub fn random_nu(seed: u64, n: usize, scale: f64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(-scale..scale)).collect()
}
