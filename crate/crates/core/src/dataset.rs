//! Offline datasets, their empirical distribution and count-based data policies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mmdp::{FactorizedPolicy, JointActionSpace, JointPolicy, MmdpMeta, TabularMmdp};
use crate::random::sample_index;

/// One `(s, a, r, s', done)` record. `done` is set when `s'` is terminal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: usize,
    pub a: Vec<usize>,
    pub r: f64,
    pub s_next: usize,
    pub done: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recipe: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_trajectories: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub records: Vec<Transition>,
    /// Multiset of episode start states.
    pub initial_states: Vec<usize>,
    pub meta: DatasetMeta,
}

impl OfflineDataset {
    pub fn new(records: Vec<Transition>, initial_states: Vec<usize>) -> Self {
        OfflineDataset {
            records,
            initial_states,
            meta: DatasetMeta::default(),
        }
    }

    pub fn with_meta(mut self, meta: DatasetMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Index checks against the problem shape.
    pub fn validate(&self, meta: &MmdpMeta) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        if self.initial_states.is_empty() {
            return Err(Error::invalid("dataset has no initial states"));
        }
        for (k, x) in self.records.iter().enumerate() {
            if x.s >= meta.n_states || x.s_next >= meta.n_states {
                return Err(Error::invalid(format!("record {k}: state index out of range")));
            }
            meta.joint
                .index(&x.a)
                .map_err(|e| Error::invalid(format!("record {k}: {e}")))?;
            if !x.r.is_finite() {
                return Err(Error::invalid(format!("record {k}: reward is not finite")));
            }
        }
        if let Some(&s) = self.initial_states.iter().find(|&&s| s >= meta.n_states) {
            return Err(Error::invalid(format!("initial state {s} out of range")));
        }
        Ok(())
    }

    /// Index checks plus agreement of rewards and `done` flags with the model.
    pub fn validate_against(&self, mmdp: &TabularMmdp) -> Result<()> {
        self.validate(&mmdp.meta())?;
        for (k, x) in self.records.iter().enumerate() {
            let joint = mmdp.joint().index(&x.a)?;
            if x.r != mmdp.reward(x.s, joint) {
                return Err(Error::invalid(format!("record {k}: reward differs from the MMDP")));
            }
            if !mmdp.successors(x.s, joint).iter().any(|&(n, p)| n == x.s_next && p > 0.0) {
                return Err(Error::invalid(format!("record {k}: impossible transition")));
            }
            if x.done != mmdp.is_terminal(x.s_next) {
                return Err(Error::invalid(format!("record {k}: done flag disagrees with terminal set")));
            }
        }
        Ok(())
    }
}

/// Behavior policy for data generation.
#[derive(Debug, Clone)]
pub enum Behavior {
    Factorized(FactorizedPolicy),
    Joint(JointPolicy),
}

impl Behavior {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R, space: &JointActionSpace, s: usize) -> usize {
        match self {
            Behavior::Factorized(pi) => {
                let a: Vec<usize> = (0..space.n_agents())
                    .map(|i| sample_index(rng, pi.row(i, s)))
                    .collect();
                space.index(&a).expect("sampled action in range")
            }
            Behavior::Joint(pi) => sample_index(rng, pi.row(s)),
        }
    }
}

/// Rolls out `n_trajectories` episodes of at most `horizon` steps. Each episode
/// picks one mixture component by `weights` and follows it throughout.
pub fn generate(
    mmdp: &TabularMmdp,
    behaviors: &[Behavior],
    weights: &[f64],
    n_trajectories: usize,
    horizon: usize,
    seed: u64,
) -> Result<OfflineDataset> {
    if behaviors.is_empty() {
        return Err(Error::invalid("behavior mixture is empty"));
    }
    if weights.len() != behaviors.len() {
        return Err(Error::invalid("one weight per behavior is required"));
    }
    crate::mmdp::check_distribution("mixture weights", weights)?;
    if horizon == 0 {
        return Err(Error::invalid("horizon must be at least 1"));
    }
    let space = mmdp.joint();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let mut initial_states = Vec::with_capacity(n_trajectories);
    for _ in 0..n_trajectories {
        let behavior = &behaviors[sample_index(&mut rng, weights)];
        let mut s = sample_index(&mut rng, mmdp.p0());
        initial_states.push(s);
        for _ in 0..horizon {
            if mmdp.is_terminal(s) {
                break;
            }
            let joint = behavior.sample(&mut rng, space, s);
            let succ = mmdp.successors(s, joint);
            let probs: Vec<f64> = succ.iter().map(|&(_, p)| p).collect();
            let s_next = succ[sample_index(&mut rng, &probs)].0;
            records.push(Transition {
                s,
                a: space.decode(joint),
                r: mmdp.reward(s, joint),
                s_next,
                done: mmdp.is_terminal(s_next),
            });
            s = s_next;
        }
    }
    Ok(OfflineDataset::new(records, initial_states).with_meta(DatasetMeta {
        seed: Some(seed),
        n_trajectories: Some(n_trajectories),
        horizon: Some(horizon),
        ..Default::default()
    }))
}

/// Normalized record counts `d^D(s, a)` over states and joint actions.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalDistribution {
    pub n_states: usize,
    pub joint: JointActionSpace,
    pub counts: Vec<u64>,
    pub n_records: u64,
    pub d: Vec<f64>,
}

impl EmpiricalDistribution {
    pub fn get(&self, s: usize, joint: usize) -> f64 {
        self.d[s * self.joint.len() + joint]
    }

    pub fn count(&self, s: usize, joint: usize) -> u64 {
        self.counts[s * self.joint.len() + joint]
    }

    pub fn state_marginal(&self) -> Vec<f64> {
        self.counts
            .chunks(self.joint.len())
            .map(|row| row.iter().sum::<u64>() as f64 / self.n_records as f64)
            .collect()
    }

    /// `d^D(s, a_i)`, row-major by state.
    pub fn agent_marginal(&self, agent: usize) -> Vec<f64> {
        let ni = self.joint.size(agent);
        let mut out = vec![0u64; self.n_states * ni];
        for s in 0..self.n_states {
            for a in 0..self.joint.len() {
                out[s * ni + self.joint.component(a, agent)] += self.count(s, a);
            }
        }
        out.into_iter().map(|c| c as f64 / self.n_records as f64).collect()
    }
}

pub fn empirical_distribution(dataset: &OfflineDataset, meta: &MmdpMeta) -> Result<EmpiricalDistribution> {
    dataset.validate(meta)?;
    let nj = meta.joint.len();
    let mut counts = vec![0u64; meta.n_states * nj];
    for x in &dataset.records {
        counts[x.s * nj + meta.joint.index(&x.a)?] += 1;
    }
    let n_records = dataset.records.len() as u64;
    let d = counts.iter().map(|&c| c as f64 / n_records as f64).collect();
    Ok(EmpiricalDistribution {
        n_states: meta.n_states,
        joint: meta.joint.clone(),
        counts,
        n_records,
        d,
    })
}

/// Maximum-likelihood model of the data: empirical transitions, mean rewards
/// and initial-state frequencies. Pairs without data keep the rows of
/// `template`, which also supplies names, discount and terminals.
pub fn empirical_mmdp(dataset: &OfflineDataset, template: &TabularMmdp) -> Result<TabularMmdp> {
    let meta = template.meta();
    dataset.validate(&meta)?;
    let nj = meta.joint.len();
    let mut next: Vec<std::collections::BTreeMap<usize, u64>> = vec![Default::default(); meta.n_states * nj];
    let mut reward_sum = vec![0.0; meta.n_states * nj];
    for x in &dataset.records {
        let k = x.s * nj + meta.joint.index(&x.a)?;
        *next[k].entry(x.s_next).or_insert(0) += 1;
        reward_sum[k] += x.r;
    }
    let mut parts = template.clone().into_parts();
    for (k, row) in next.iter().enumerate() {
        let n: u64 = row.values().sum();
        if n > 0 {
            parts.transitions[k] = row.iter().map(|(&s, &c)| (s, c as f64 / n as f64)).collect();
            parts.reward[k] = reward_sum[k] / n as f64;
        }
    }
    let mut p0 = vec![0.0; meta.n_states];
    for &s in &dataset.initial_states {
        p0[s] += 1.0 / dataset.initial_states.len() as f64;
    }
    parts.p0 = p0;
    TabularMmdp::from_parts(parts)
}

/// Count-based `π_i^D(a_i|s)` and `π_{-i}^D(a_{-i}|s, a_i)`. Rows without data
/// are reported as absent (`None`), never filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPolicyTables {
    pub n_states: usize,
    pub joint: JointActionSpace,
    joint_counts: Vec<u64>,
    agent_counts: Vec<Vec<u64>>,
    state_counts: Vec<u64>,
}

impl DataPolicyTables {
    pub fn state_count(&self, s: usize) -> u64 {
        self.state_counts[s]
    }

    pub fn joint_count(&self, s: usize, joint: usize) -> u64 {
        self.joint_counts[s * self.joint.len() + joint]
    }

    pub fn agent_count(&self, agent: usize, s: usize, action: usize) -> u64 {
        self.agent_counts[agent][s * self.joint.size(agent) + action]
    }

    /// `π_i^D(a_i|s)`, or `None` if `s` never occurs in the data.
    pub fn marginal(&self, agent: usize, s: usize, action: usize) -> Option<f64> {
        let n = self.state_counts[s];
        (n > 0).then(|| self.agent_count(agent, s, action) as f64 / n as f64)
    }

    pub fn marginal_row(&self, agent: usize, s: usize) -> Option<Vec<f64>> {
        let n = self.state_counts[s];
        (n > 0).then(|| {
            (0..self.joint.size(agent))
                .map(|a| self.agent_count(agent, s, a) as f64 / n as f64)
                .collect()
        })
    }

    /// `π_{-i}^D(a_{-i}|s, a_i)` where `a_i` is read from `joint`; `None` when
    /// `(s, a_i)` never occurs.
    pub fn others_conditional(&self, agent: usize, s: usize, joint: usize) -> Option<f64> {
        let ai = self.joint.component(joint, agent);
        let n = self.agent_count(agent, s, ai);
        (n > 0).then(|| self.joint_count(s, joint) as f64 / n as f64)
    }

    /// Mean log-likelihood of the data under `π_i^D · π_{-i}^D` for one agent's
    /// factorization; used to check MLE optimality.
    pub fn log_likelihood(&self, agent: usize, marginal: &[f64], conditional: &[f64]) -> f64 {
        let nj = self.joint.len();
        let ni = self.joint.size(agent);
        let total: u64 = self.state_counts.iter().sum();
        let mut ll = 0.0;
        for s in 0..self.n_states {
            for a in 0..nj {
                let c = self.joint_count(s, a);
                if c == 0 {
                    continue;
                }
                let ai = self.joint.component(a, agent);
                ll += c as f64 * (marginal[s * ni + ai].ln() + conditional[s * nj + a].ln());
            }
        }
        ll / total as f64
    }

    /// Dense `π_{-i}^D(a_{-i}|s, a_i)` indexed by `(s, joint)`; zero on absent rows.
    pub fn conditional_table(&self, agent: usize) -> Vec<f64> {
        let nj = self.joint.len();
        (0..self.n_states * nj)
            .map(|k| self.others_conditional(agent, k / nj, k % nj).unwrap_or(0.0))
            .collect()
    }

    /// Dense `π_i^D(a_i|s)`; zero on unseen states.
    pub fn marginal_table(&self, agent: usize) -> Vec<f64> {
        let ni = self.joint.size(agent);
        (0..self.n_states * ni)
            .map(|k| self.marginal(agent, k / ni, k % ni).unwrap_or(0.0))
            .collect()
    }
}

pub fn fit_data_policies(dataset: &OfflineDataset, meta: &MmdpMeta) -> Result<DataPolicyTables> {
    let emp = empirical_distribution(dataset, meta)?;
    let nj = meta.joint.len();
    let mut agent_counts: Vec<Vec<u64>> = meta
        .joint
        .sizes()
        .iter()
        .map(|&n| vec![0; meta.n_states * n])
        .collect();
    let mut state_counts = vec![0u64; meta.n_states];
    for s in 0..meta.n_states {
        for a in 0..nj {
            let c = emp.count(s, a);
            state_counts[s] += c;
            for (i, counts) in agent_counts.iter_mut().enumerate() {
                counts[s * meta.joint.size(i) + meta.joint.component(a, i)] += c;
            }
        }
    }
    Ok(DataPolicyTables {
        n_states: meta.n_states,
        joint: meta.joint.clone(),
        joint_counts: emp.counts,
        agent_counts,
        state_counts,
    })
}
