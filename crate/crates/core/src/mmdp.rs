//! Tabular multi-agent MDPs with a common reward, occupancy measures and
//! exact policy evaluation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ROW_TOL: f64 = 1e-12;

/// Mixed-radix indexing of joint actions. Agent 0 is the most significant digit,
/// so for two binary agents the order is (0,0), (0,1), (1,0), (1,1).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointActionSpace {
    sizes: Vec<usize>,
    strides: Vec<usize>,
    len: usize,
}

impl JointActionSpace {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::invalid("at least one agent is required"));
        }
        if sizes.contains(&0) {
            return Err(Error::invalid("every agent needs at least one action"));
        }
        let mut strides = vec![1; sizes.len()];
        for i in (0..sizes.len() - 1).rev() {
            strides[i] = strides[i + 1] * sizes[i + 1];
        }
        let len = sizes.iter().product();
        Ok(JointActionSpace { sizes, strides, len })
    }

    pub fn n_agents(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn size(&self, agent: usize) -> usize {
        self.sizes[agent]
    }

    /// Number of joint actions.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn index(&self, actions: &[usize]) -> Result<usize> {
        if actions.len() != self.sizes.len() {
            return Err(Error::invalid(format!(
                "joint action has {} components, expected {}",
                actions.len(),
                self.sizes.len()
            )));
        }
        let mut idx = 0;
        for (i, (&a, &n)) in actions.iter().zip(&self.sizes).enumerate() {
            if a >= n {
                return Err(Error::invalid(format!("action {a} out of range for agent {i} ({n} actions)")));
            }
            idx += a * self.strides[i];
        }
        Ok(idx)
    }

    pub fn decode(&self, joint: usize) -> Vec<usize> {
        (0..self.sizes.len()).map(|i| self.component(joint, i)).collect()
    }

    pub fn component(&self, joint: usize, agent: usize) -> usize {
        (joint / self.strides[agent]) % self.sizes[agent]
    }

    /// Joint index with agent `agent`'s component replaced by `action`.
    pub fn with_component(&self, joint: usize, agent: usize, action: usize) -> usize {
        joint - self.component(joint, agent) * self.strides[agent] + action * self.strides[agent]
    }
}

/// Raw parts of an MMDP. `transitions[s * |A| + a]` lists `(s', p)` pairs.
#[derive(Debug, Clone)]
pub struct MmdpParts {
    pub state_names: Vec<String>,
    pub action_names: Vec<Vec<String>>,
    pub transitions: Vec<Vec<(usize, f64)>>,
    pub reward: Vec<f64>,
    pub gamma: f64,
    pub p0: Vec<f64>,
    pub terminals: Vec<bool>,
    pub horizon: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularMmdp {
    state_names: Vec<String>,
    action_names: Vec<Vec<String>>,
    joint: JointActionSpace,
    transitions: Vec<Vec<(usize, f64)>>,
    reward: Vec<f64>,
    gamma: f64,
    p0: Vec<f64>,
    terminals: Vec<bool>,
    horizon: Option<usize>,
}

/// What a learner may know about an MMDP without seeing `P` or `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct MmdpMeta {
    pub n_states: usize,
    pub joint: JointActionSpace,
    pub gamma: f64,
}

impl TabularMmdp {
    pub fn from_parts(parts: MmdpParts) -> Result<Self> {
        let MmdpParts {
            state_names,
            action_names,
            mut transitions,
            reward,
            gamma,
            p0,
            terminals,
            horizon,
        } = parts;
        let n_states = state_names.len();
        if n_states == 0 {
            return Err(Error::invalid("MMDP has no states"));
        }
        check_unique("state", &state_names)?;
        for names in &action_names {
            check_unique("action", names)?;
        }
        let joint = JointActionSpace::new(action_names.iter().map(Vec::len).collect())?;
        let n_sa = n_states * joint.len();
        if transitions.len() != n_sa {
            return Err(Error::invalid(format!("expected {n_sa} transition rows, got {}", transitions.len())));
        }
        if reward.len() != n_sa {
            return Err(Error::invalid(format!("expected {n_sa} reward entries, got {}", reward.len())));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::invalid(format!("discount must lie in [0, 1), got {gamma}")));
        }
        if p0.len() != n_states {
            return Err(Error::invalid("p0 length differs from the number of states"));
        }
        check_distribution("p0", &p0)?;
        let terminals = if terminals.is_empty() { vec![false; n_states] } else { terminals };
        if terminals.len() != n_states {
            return Err(Error::invalid("terminal flags length differs from the number of states"));
        }
        if let Some(0) = horizon {
            return Err(Error::invalid("horizon must be at least 1"));
        }
        if let Some((i, r)) = reward.iter().enumerate().find(|(_, r)| !r.is_finite()) {
            return Err(Error::invalid(format!("reward entry {i} is not finite ({r})")));
        }
        for (row_idx, row) in transitions.iter_mut().enumerate() {
            let (s, a) = (row_idx / joint.len(), row_idx % joint.len());
            row.sort_by_key(|&(next, _)| next);
            let mut total = 0.0;
            for w in row.windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(Error::invalid(format!("duplicate successor {} in row (s={s}, a={a})", w[0].0)));
                }
            }
            for &(next, p) in row.iter() {
                if next >= n_states {
                    return Err(Error::invalid(format!("successor {next} out of range in row (s={s}, a={a})")));
                }
                if !(p >= 0.0 && p.is_finite()) {
                    return Err(Error::invalid(format!("negative or non-finite probability in row (s={s}, a={a})")));
                }
                total += p;
            }
            if (total - 1.0).abs() > ROW_TOL {
                return Err(Error::invalid(format!(
                    "transition row (s={}, a={}) sums to {total}, not 1",
                    state_names[s], a
                )));
            }
        }
        Ok(TabularMmdp {
            state_names,
            action_names,
            joint,
            transitions,
            reward,
            gamma,
            p0,
            terminals,
            horizon,
        })
    }

    pub fn into_parts(self) -> MmdpParts {
        MmdpParts {
            state_names: self.state_names,
            action_names: self.action_names,
            transitions: self.transitions,
            reward: self.reward,
            gamma: self.gamma,
            p0: self.p0,
            terminals: self.terminals,
            horizon: self.horizon,
        }
    }

    pub fn meta(&self) -> MmdpMeta {
        MmdpMeta {
            n_states: self.n_states(),
            joint: self.joint.clone(),
            gamma: self.gamma,
        }
    }

    pub fn n_states(&self) -> usize {
        self.state_names.len()
    }

    pub fn n_agents(&self) -> usize {
        self.joint.n_agents()
    }

    pub fn joint(&self) -> &JointActionSpace {
        &self.joint
    }

    pub fn n_joint(&self) -> usize {
        self.joint.len()
    }

    pub fn state_names(&self) -> &[String] {
        &self.state_names
    }

    pub fn action_names(&self) -> &[Vec<String>] {
        &self.action_names
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn p0(&self) -> &[f64] {
        &self.p0
    }

    pub fn horizon(&self) -> Option<usize> {
        self.horizon
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminals[s]
    }

    pub fn terminals(&self) -> &[bool] {
        &self.terminals
    }

    pub fn has_terminals(&self) -> bool {
        self.terminals.iter().any(|&t| t)
    }

    pub fn reward(&self, s: usize, joint: usize) -> f64 {
        self.reward[s * self.n_joint() + joint]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    pub fn successors(&self, s: usize, joint: usize) -> &[(usize, f64)] {
        &self.transitions[s * self.n_joint() + joint]
    }

    pub fn state_index(&self, name: &str) -> Option<usize> {
        self.state_names.iter().position(|n| n == name)
    }

    /// Copy with a different discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        let mut parts = self.clone().into_parts();
        parts.gamma = gamma;
        TabularMmdp::from_parts(parts)
    }

    /// Copy with a different initial distribution.
    pub fn with_p0(&self, p0: Vec<f64>) -> Result<Self> {
        let mut parts = self.clone().into_parts();
        parts.p0 = p0;
        TabularMmdp::from_parts(parts)
    }

    fn check_policy(&self, policy: &JointPolicy) -> Result<()> {
        if policy.n_states != self.n_states() || policy.n_joint != self.n_joint() {
            return Err(Error::invalid(format!(
                "policy shape ({} states, {} joint actions) does not match MMDP ({}, {})",
                policy.n_states,
                policy.n_joint,
                self.n_states(),
                self.n_joint()
            )));
        }
        Ok(())
    }

    pub(crate) fn check_factorized(&self, policy: &FactorizedPolicy) -> Result<()> {
        if policy.n_states() != self.n_states() || policy.sizes() != self.joint.sizes() {
            return Err(Error::invalid("factorized policy shape does not match the MMDP"));
        }
        Ok(())
    }
}

fn check_unique(kind: &str, names: &[String]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for n in names {
        if !seen.insert(n.as_str()) {
            return Err(Error::invalid(format!("duplicate {kind} name {n:?}")));
        }
    }
    Ok(())
}

pub(crate) fn check_distribution(what: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
        return Err(Error::invalid(format!("{what} has negative or non-finite entries")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > ROW_TOL {
        return Err(Error::invalid(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

/// Per-agent conditional action tables `π_i(a_i|s)`, stored row-major by state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPolicy")]
pub struct FactorizedPolicy {
    n_states: usize,
    sizes: Vec<usize>,
    tables: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct RawPolicy {
    n_states: usize,
    sizes: Vec<usize>,
    tables: Vec<Vec<f64>>,
}

impl TryFrom<RawPolicy> for FactorizedPolicy {
    type Error = Error;

    fn try_from(raw: RawPolicy) -> Result<Self> {
        FactorizedPolicy::from_tables(raw.n_states, &raw.sizes, raw.tables)
    }
}

impl FactorizedPolicy {
    pub fn uniform(n_states: usize, sizes: &[usize]) -> Self {
        let tables = sizes
            .iter()
            .map(|&n| vec![1.0 / n as f64; n_states * n])
            .collect();
        FactorizedPolicy {
            n_states,
            sizes: sizes.to_vec(),
            tables,
        }
    }

    pub fn from_tables(n_states: usize, sizes: &[usize], tables: Vec<Vec<f64>>) -> Result<Self> {
        if tables.len() != sizes.len() {
            return Err(Error::invalid("one table per agent is required"));
        }
        for (i, (t, &n)) in tables.iter().zip(sizes).enumerate() {
            if t.len() != n_states * n {
                return Err(Error::invalid(format!("policy table of agent {i} has the wrong length")));
            }
            for s in 0..n_states {
                check_distribution(&format!("policy row (agent {i}, state {s})"), &t[s * n..(s + 1) * n])?;
            }
        }
        Ok(FactorizedPolicy {
            n_states,
            sizes: sizes.to_vec(),
            tables,
        })
    }

    /// Deterministic policy from per-agent action choices `actions[i][s]`.
    pub fn deterministic(n_states: usize, sizes: &[usize], actions: &[Vec<usize>]) -> Result<Self> {
        let mut tables = Vec::with_capacity(sizes.len());
        for (i, &n) in sizes.iter().enumerate() {
            let mut t = vec![0.0; n_states * n];
            for s in 0..n_states {
                let a = actions[i][s];
                if a >= n {
                    return Err(Error::invalid(format!("action {a} out of range for agent {i}")));
                }
                t[s * n + a] = 1.0;
            }
            tables.push(t);
        }
        FactorizedPolicy::from_tables(n_states, sizes, tables)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_agents(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn table(&self, agent: usize) -> &[f64] {
        &self.tables[agent]
    }

    pub fn row(&self, agent: usize, s: usize) -> &[f64] {
        let n = self.sizes[agent];
        &self.tables[agent][s * n..(s + 1) * n]
    }

    pub fn prob(&self, agent: usize, s: usize, action: usize) -> f64 {
        self.tables[agent][s * self.sizes[agent] + action]
    }

    /// Replace one agent's table, keeping the others.
    pub fn set_agent(&mut self, agent: usize, table: Vec<f64>) -> Result<()> {
        let n = self.sizes[agent];
        if table.len() != self.n_states * n {
            return Err(Error::invalid(format!("policy table of agent {agent} has the wrong length")));
        }
        for s in 0..self.n_states {
            check_distribution(&format!("policy row (agent {agent}, state {s})"), &table[s * n..(s + 1) * n])?;
        }
        self.tables[agent] = table;
        Ok(())
    }

    /// `∏_j π_j(a_j|s)` over all agents, multiplied in agent order.
    pub fn joint_prob(&self, space: &JointActionSpace, s: usize, joint: usize) -> f64 {
        let mut p = 1.0;
        for i in 0..self.sizes.len() {
            p *= self.prob(i, s, space.component(joint, i));
        }
        p
    }

    /// `π_{-i}(a_{-i}|s) = ∏_{j≠i} π_j(a_j|s)`.
    pub fn others_prob(&self, space: &JointActionSpace, agent: usize, s: usize, joint: usize) -> f64 {
        let mut p = 1.0;
        for j in 0..self.sizes.len() {
            if j != agent {
                p *= self.prob(j, s, space.component(joint, j));
            }
        }
        p
    }

    pub fn to_joint(&self, space: &JointActionSpace) -> JointPolicy {
        let mut probs = vec![0.0; self.n_states * space.len()];
        for s in 0..self.n_states {
            for a in 0..space.len() {
                probs[s * space.len() + a] = self.joint_prob(space, s, a);
            }
        }
        JointPolicy {
            n_states: self.n_states,
            n_joint: space.len(),
            probs,
        }
    }

    /// Largest absolute entry-wise difference to another policy of the same shape.
    pub fn max_abs_diff(&self, other: &FactorizedPolicy) -> f64 {
        self.tables
            .iter()
            .zip(&other.tables)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

/// A (possibly correlated) joint policy `π(a|s)` over joint actions.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPolicy {
    n_states: usize,
    n_joint: usize,
    probs: Vec<f64>,
}

impl JointPolicy {
    pub fn new(n_states: usize, n_joint: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_joint {
            return Err(Error::invalid("joint policy table has the wrong length"));
        }
        for s in 0..n_states {
            check_distribution(&format!("joint policy row {s}"), &probs[s * n_joint..(s + 1) * n_joint])?;
        }
        Ok(JointPolicy { n_states, n_joint, probs })
    }

    pub fn deterministic(n_states: usize, n_joint: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; n_states * n_joint];
        for (s, &a) in actions.iter().enumerate().take(n_states) {
            if a >= n_joint {
                return Err(Error::invalid(format!("joint action {a} out of range")));
            }
            probs[s * n_joint + a] = 1.0;
        }
        JointPolicy::new(n_states, n_joint, probs)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_joint(&self) -> usize {
        self.n_joint
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_joint..(s + 1) * self.n_joint]
    }

    pub fn prob(&self, s: usize, joint: usize) -> f64 {
        self.probs[s * self.n_joint + joint]
    }
}

/// Normalized discounted occupancy `d(s, a)` over states and joint actions.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyTable {
    pub n_states: usize,
    pub n_joint: usize,
    pub gamma: f64,
    pub d: Vec<f64>,
}

impl OccupancyTable {
    pub fn get(&self, s: usize, joint: usize) -> f64 {
        self.d[s * self.n_joint + joint]
    }

    pub fn state_marginal(&self) -> Vec<f64> {
        self.d.chunks(self.n_joint).map(|row| row.iter().sum()).collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.d.iter().sum()
    }

    /// ∞-norm of `Σ_a d(s',a) − (1−γ)p0(s') − γ Σ_{s,a} P(s'|s,a) d(s,a)` over
    /// non-terminal `s'`. Mass flowing into terminal states leaves the system.
    pub fn flow_residual(&self, mmdp: &TabularMmdp) -> f64 {
        let mut inflow: Vec<f64> = mmdp.p0().iter().map(|p| (1.0 - self.gamma) * p).collect();
        for s in 0..self.n_states {
            for a in 0..self.n_joint {
                let d = self.get(s, a);
                if d == 0.0 {
                    continue;
                }
                for &(next, p) in mmdp.successors(s, a) {
                    inflow[next] += self.gamma * p * d;
                }
            }
        }
        let marginal = self.state_marginal();
        (0..self.n_states)
            .filter(|&s| !mmdp.is_terminal(s))
            .map(|s| (marginal[s] - inflow[s]).abs())
            .chain((0..self.n_states).filter(|&s| mmdp.is_terminal(s)).map(|s| marginal[s].abs()))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    pub v: Vec<f64>,
    /// Row-major `Q(s, a)` over joint actions (or the single agent's actions).
    pub q: Option<Vec<f64>>,
    /// `E_{p0}[V(s0)]`.
    pub j: f64,
}

/// State-to-state kernel `P_π(s'|s)` restricted to non-terminal rows.
fn state_kernel(mmdp: &TabularMmdp, policy: &JointPolicy) -> Vec<Vec<(usize, f64)>> {
    let n = mmdp.n_states();
    let mut kernel = vec![Vec::new(); n];
    for (s, row) in kernel.iter_mut().enumerate() {
        if mmdp.is_terminal(s) {
            continue;
        }
        let mut acc = std::collections::BTreeMap::new();
        for a in 0..mmdp.n_joint() {
            let pa = policy.prob(s, a);
            if pa == 0.0 {
                continue;
            }
            for &(next, p) in mmdp.successors(s, a) {
                *acc.entry(next).or_insert(0.0) += pa * p;
            }
        }
        *row = acc.into_iter().collect();
    }
    kernel
}

fn solve_dense(m: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    m.lu()
        .solve(&b)
        .ok_or_else(|| Error::Singular("dense LU factorization failed".into()))
}

pub fn stationary_distribution(mmdp: &TabularMmdp, policy: &FactorizedPolicy) -> Result<OccupancyTable> {
    mmdp.check_factorized(policy)?;
    stationary_distribution_joint(mmdp, &policy.to_joint(mmdp.joint()))
}

/// Solves `(I − γ P_πᵀ) d_S = (1−γ) p0` over non-terminal states, then
/// `d(s,a) = d_S(s) π(a|s)`.
pub fn stationary_distribution_joint(mmdp: &TabularMmdp, policy: &JointPolicy) -> Result<OccupancyTable> {
    mmdp.check_policy(policy)?;
    let n = mmdp.n_states();
    let gamma = mmdp.gamma();
    let kernel = state_kernel(mmdp, policy);
    let mut m = DMatrix::<f64>::identity(n, n);
    for (s, row) in kernel.iter().enumerate() {
        for &(next, p) in row {
            if !mmdp.is_terminal(next) {
                m[(next, s)] -= gamma * p;
            }
        }
    }
    let b = DVector::from_iterator(
        n,
        (0..n).map(|s| if mmdp.is_terminal(s) { 0.0 } else { (1.0 - gamma) * mmdp.p0()[s] }),
    );
    let ds = solve_dense(m, b)?;
    let nj = mmdp.n_joint();
    let mut d = vec![0.0; n * nj];
    for s in 0..n {
        let mass = ds[s].max(0.0);
        for a in 0..nj {
            d[s * nj + a] = mass * policy.prob(s, a);
        }
    }
    Ok(OccupancyTable {
        n_states: n,
        n_joint: nj,
        gamma,
        d,
    })
}

pub fn evaluate_policy(mmdp: &TabularMmdp, policy: &FactorizedPolicy) -> Result<ValueTable> {
    mmdp.check_factorized(policy)?;
    evaluate_joint_policy(mmdp, &policy.to_joint(mmdp.joint()))
}

/// Exact discounted evaluation by a dense linear solve; `V = 0` on terminals.
pub fn evaluate_joint_policy(mmdp: &TabularMmdp, policy: &JointPolicy) -> Result<ValueTable> {
    mmdp.check_policy(policy)?;
    let n = mmdp.n_states();
    let nj = mmdp.n_joint();
    let gamma = mmdp.gamma();
    let kernel = state_kernel(mmdp, policy);
    let mut m = DMatrix::<f64>::identity(n, n);
    let mut b = DVector::<f64>::zeros(n);
    for s in 0..n {
        if mmdp.is_terminal(s) {
            continue;
        }
        for &(next, p) in &kernel[s] {
            if !mmdp.is_terminal(next) {
                m[(s, next)] -= gamma * p;
            }
        }
        b[s] = (0..nj).map(|a| policy.prob(s, a) * mmdp.reward(s, a)).sum();
    }
    let v: Vec<f64> = solve_dense(m, b)?.iter().copied().collect();
    let q = q_from_v(mmdp, &v);
    let j = dot(mmdp.p0(), &v);
    Ok(ValueTable { v, q: Some(q), j })
}

fn q_from_v(mmdp: &TabularMmdp, v: &[f64]) -> Vec<f64> {
    let nj = mmdp.n_joint();
    let mut q = vec![0.0; mmdp.n_states() * nj];
    for s in 0..mmdp.n_states() {
        if mmdp.is_terminal(s) {
            continue;
        }
        for a in 0..nj {
            q[s * nj + a] = mmdp.reward(s, a) + mmdp.gamma() * expected_next(mmdp, s, a, v);
        }
    }
    q
}

fn expected_next(mmdp: &TabularMmdp, s: usize, a: usize, v: &[f64]) -> f64 {
    mmdp.successors(s, a)
        .iter()
        .filter(|(next, _)| !mmdp.is_terminal(*next))
        .map(|&(next, p)| p * v[next])
        .sum()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Undiscounted finite-horizon value `V_H(s)` by backward induction.
/// Episodes stop on entering a terminal state.
pub fn finite_horizon_values(mmdp: &TabularMmdp, policy: &JointPolicy, horizon: usize) -> Result<Vec<f64>> {
    mmdp.check_policy(policy)?;
    let n = mmdp.n_states();
    let mut v = vec![0.0; n];
    for _ in 0..horizon {
        let mut next_v = vec![0.0; n];
        for (s, nv) in next_v.iter_mut().enumerate() {
            if mmdp.is_terminal(s) {
                continue;
            }
            *nv = (0..mmdp.n_joint())
                .filter(|&a| policy.prob(s, a) > 0.0)
                .map(|a| policy.prob(s, a) * (mmdp.reward(s, a) + expected_next(mmdp, s, a, &v)))
                .sum();
        }
        v = next_v;
    }
    Ok(v)
}

/// Marginalizes the other agents' policies into a single-agent MDP over `A_agent`.
pub fn reduced_mdp(mmdp: &TabularMmdp, others: &FactorizedPolicy, agent: usize) -> Result<TabularMmdp> {
    mmdp.check_factorized(others)?;
    if agent >= mmdp.n_agents() {
        return Err(Error::invalid(format!("agent {agent} out of range")));
    }
    let space = mmdp.joint();
    let n = mmdp.n_states();
    let ni = space.size(agent);
    let mut transitions = Vec::with_capacity(n * ni);
    let mut reward = Vec::with_capacity(n * ni);
    for s in 0..n {
        let mut rows: Vec<std::collections::BTreeMap<usize, f64>> = vec![Default::default(); ni];
        let mut r = vec![0.0; ni];
        for a in 0..space.len() {
            let ai = space.component(a, agent);
            let w = others.others_prob(space, agent, s, a);
            if w == 0.0 {
                continue;
            }
            r[ai] += w * mmdp.reward(s, a);
            for &(next, p) in mmdp.successors(s, a) {
                *rows[ai].entry(next).or_insert(0.0) += w * p;
            }
        }
        for (row, ri) in rows.into_iter().zip(r) {
            let total: f64 = row.values().sum();
            transitions.push(row.into_iter().map(|(k, p)| (k, p / total)).collect());
            reward.push(ri);
        }
    }
    TabularMmdp::from_parts(MmdpParts {
        state_names: mmdp.state_names.clone(),
        action_names: vec![mmdp.action_names[agent].clone()],
        transitions,
        reward,
        gamma: mmdp.gamma,
        p0: mmdp.p0.clone(),
        terminals: mmdp.terminals.clone(),
        horizon: mmdp.horizon,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestResponse {
    pub values: ValueTable,
    /// Deterministic greedy table `π_i(a_i|s)`, row-major by state.
    pub policy: Vec<f64>,
}

/// Unregularized best response of `agent` against `others` by value iteration
/// on the reduced MDP, followed by exact evaluation of the greedy policy.
pub fn best_response_value(mmdp: &TabularMmdp, others: &FactorizedPolicy, agent: usize) -> Result<BestResponse> {
    let reduced = reduced_mdp(mmdp, others, agent)?;
    let (_, greedy) = optimal_values(&reduced, 1e-10)?;
    let ni = reduced.n_joint();
    let mut table = vec![0.0; reduced.n_states() * ni];
    for (s, &a) in greedy.iter().enumerate() {
        table[s * ni + a] = 1.0;
    }
    let policy = JointPolicy::new(reduced.n_states(), ni, table.clone())?;
    let values = evaluate_joint_policy(&reduced, &policy)?;
    Ok(BestResponse { values, policy: table })
}

/// Discounted optimal values by value iteration over joint actions.
/// Returns the values and a greedy joint action per state (lowest index on ties).
pub fn optimal_values(mmdp: &TabularMmdp, tol: f64) -> Result<(ValueTable, Vec<usize>)> {
    let n = mmdp.n_states();
    let nj = mmdp.n_joint();
    let gamma = mmdp.gamma();
    let mut v = vec![0.0; n];
    // ‖V_k − V*‖ ≤ γ/(1−γ)‖V_k − V_{k−1}‖
    let stop = if gamma > 0.0 { tol * (1.0 - gamma) / gamma } else { f64::INFINITY };
    for _ in 0..1_000_000 {
        let mut delta: f64 = 0.0;
        let mut next_v = vec![0.0; n];
        for s in 0..n {
            if mmdp.is_terminal(s) {
                continue;
            }
            let best = (0..nj)
                .map(|a| mmdp.reward(s, a) + gamma * expected_next(mmdp, s, a, &v))
                .fold(f64::NEG_INFINITY, f64::max);
            delta = delta.max((best - v[s]).abs());
            next_v[s] = best;
        }
        v = next_v;
        if delta <= stop || gamma == 0.0 {
            let q = q_from_v(mmdp, &v);
            let greedy = (0..n)
                .map(|s| argmax_first(&q[s * nj..(s + 1) * nj], 1e-12))
                .collect();
            let j = dot(mmdp.p0(), &v);
            return Ok((ValueTable { v, q: Some(q), j }, greedy));
        }
    }
    Err(Error::NoConvergence {
        iterations: 1_000_000,
        grad_norm: f64::NAN,
        objective: f64::NAN,
    })
}

/// Optimal undiscounted values for each number of remaining steps:
/// `result[t][s]` is the best return from `s` with `t` steps left.
pub fn optimal_finite_horizon(mmdp: &TabularMmdp, horizon: usize) -> Vec<Vec<f64>> {
    let n = mmdp.n_states();
    let mut out = vec![vec![0.0; n]];
    for t in 0..horizon {
        let v = &out[t];
        let next: Vec<f64> = (0..n)
            .map(|s| {
                if mmdp.is_terminal(s) {
                    0.0
                } else {
                    (0..mmdp.n_joint())
                        .map(|a| mmdp.reward(s, a) + expected_next(mmdp, s, a, v))
                        .fold(f64::NEG_INFINITY, f64::max)
                }
            })
            .collect();
        out.push(next);
    }
    out
}

/// Joint Q-values with `steps_left` steps remaining, from the output of
/// [`optimal_finite_horizon`].
pub fn finite_horizon_q(mmdp: &TabularMmdp, values: &[Vec<f64>], s: usize, steps_left: usize) -> Vec<f64> {
    (0..mmdp.n_joint())
        .map(|a| mmdp.reward(s, a) + expected_next(mmdp, s, a, &values[steps_left - 1]))
        .collect()
}

pub(crate) fn argmax_first(xs: &[f64], tol: f64) -> usize {
    let best = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    xs.iter().position(|&x| x >= best - tol).unwrap_or(0)
}
