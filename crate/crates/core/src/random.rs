//! Random instances for property tests, benchmarks and the acceptance suite.

use rand::Rng;

use crate::dataset::{OfflineDataset, Transition};
use crate::mmdp::{FactorizedPolicy, MmdpParts, TabularMmdp};

/// Random probability vector of length `n` with roughly `sparsity` of the
/// entries zeroed (at least one entry stays positive).
pub fn random_simplex<R: Rng + ?Sized>(rng: &mut R, n: usize, sparsity: f64) -> Vec<f64> {
    let mut x: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < sparsity { 0.0 } else { -rng.random::<f64>().max(1e-300).ln() })
        .collect();
    if x.iter().all(|&v| v == 0.0) {
        x[rng.random_range(0..n)] = 1.0;
    }
    let total: f64 = x.iter().sum();
    x.iter_mut().for_each(|v| *v /= total);
    x
}

pub fn random_mmdp<R: Rng + ?Sized>(rng: &mut R, n_states: usize, sizes: &[usize], gamma: f64) -> TabularMmdp {
    let n_joint: usize = sizes.iter().product();
    let transitions = (0..n_states * n_joint)
        .map(|_| {
            random_simplex(rng, n_states, 0.3)
                .into_iter()
                .enumerate()
                .filter(|&(_, p)| p > 0.0)
                .collect()
        })
        .collect();
    let reward = (0..n_states * n_joint).map(|_| rng.random_range(-1.0..1.0)).collect();
    TabularMmdp::from_parts(MmdpParts {
        state_names: (0..n_states).map(|s| format!("s{s}")).collect(),
        action_names: sizes
            .iter()
            .map(|&n| (0..n).map(|a| format!("a{a}")).collect())
            .collect(),
        transitions,
        reward,
        gamma,
        p0: random_simplex(rng, n_states, 0.0),
        terminals: vec![],
        horizon: None,
    })
    .expect("random MMDP is valid")
}

pub fn random_policy<R: Rng + ?Sized>(rng: &mut R, n_states: usize, sizes: &[usize], sparsity: f64) -> FactorizedPolicy {
    let tables = sizes
        .iter()
        .map(|&n| (0..n_states).flat_map(|_| random_simplex(rng, n, sparsity)).collect())
        .collect();
    FactorizedPolicy::from_tables(n_states, sizes, tables).expect("random policy is valid")
}

/// Random MMDP together with a dense random factorized policy.
pub fn random_instance<R: Rng + ?Sized>(
    rng: &mut R,
    n_states: usize,
    sizes: &[usize],
    gamma: f64,
) -> (TabularMmdp, FactorizedPolicy) {
    let mmdp = random_mmdp(rng, n_states, sizes, gamma);
    let pi = random_policy(rng, n_states, sizes, 0.0);
    (mmdp, pi)
}

/// Dataset drawn by sampling `n` transitions from `s ~ U`, `a ~ behavior`.
/// Every state is also recorded as an initial state.
pub fn random_dataset<R: Rng + ?Sized>(
    rng: &mut R,
    mmdp: &TabularMmdp,
    behavior: &FactorizedPolicy,
    n: usize,
) -> OfflineDataset {
    let space = mmdp.joint();
    let mut records = Vec::with_capacity(n);
    for k in 0..n {
        let s = if k < mmdp.n_states() { k } else { rng.random_range(0..mmdp.n_states()) };
        let a: Vec<usize> = (0..space.n_agents())
            .map(|i| sample_index(rng, behavior.row(i, s)))
            .collect();
        let joint = space.index(&a).expect("valid joint action");
        let succ = mmdp.successors(s, joint);
        let probs: Vec<f64> = succ.iter().map(|&(_, p)| p).collect();
        let s_next = succ[sample_index(rng, &probs)].0;
        records.push(Transition {
            s,
            a,
            r: mmdp.reward(s, joint),
            s_next,
            done: mmdp.is_terminal(s_next),
        });
    }
    let initial_states = (0..mmdp.n_states()).filter(|&s| mmdp.p0()[s] > 0.0).collect();
    OfflineDataset::new(records, initial_states)
}

pub(crate) fn sample_index<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}
