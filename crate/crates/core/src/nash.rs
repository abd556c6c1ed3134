//! Regularized objective `J_α(π) = Σ d^π r − α KL(d^π ‖ d^D)` and exact
//! best-response oracles for certifying ε-Nash policies.

use serde::{Deserialize, Serialize};

use crate::dataset::EmpiricalDistribution;
use crate::error::{Error, Result};
use crate::mmdp::{best_response_value, evaluate_policy, stationary_distribution, FactorizedPolicy, TabularMmdp};
use crate::serde_ext;
use crate::solver::dual::{DualProblem, Form, InnerConfig, Term};
use crate::solver::support::Variables;
use crate::solver::TrainReport;

fn check_inputs(mmdp: &TabularMmdp, policy: &FactorizedPolicy, dist: &EmpiricalDistribution, alpha: f64) -> Result<()> {
    if dist.n_states != mmdp.n_states() || dist.joint != *mmdp.joint() {
        return Err(Error::invalid("dataset distribution does not match the MMDP"));
    }
    mmdp.check_factorized(policy)?;
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::invalid("alpha must be non-negative"));
    }
    Ok(())
}

/// `J_α(π)` written through agent `agent`'s factorization
/// `d^π(s, a) = d_i(s, a_i) π_{-i}(a_{-i}|s)`. All agents give the same value.
/// `-inf` when `d^π` leaves the support of `d^D`.
pub fn regularized_objective(
    mmdp: &TabularMmdp,
    policy: &FactorizedPolicy,
    dist: &EmpiricalDistribution,
    alpha: f64,
    agent: usize,
) -> Result<f64> {
    check_inputs(mmdp, policy, dist, alpha)?;
    if agent >= mmdp.n_agents() {
        return Err(Error::invalid(format!("agent {agent} out of range")));
    }
    let occ = stationary_distribution(mmdp, policy)?;
    let space = mmdp.joint();
    let ni = space.size(agent);
    let mut total = 0.0;
    for s in 0..mmdp.n_states() {
        let mut di = vec![0.0; ni];
        for a in 0..space.len() {
            di[space.component(a, agent)] += occ.get(s, a);
        }
        for a in 0..space.len() {
            let others = policy.others_prob(space, agent, s, a);
            let d = di[space.component(a, agent)] * others;
            if d <= 0.0 {
                continue;
            }
            let dd = dist.get(s, a);
            if alpha > 0.0 && dd == 0.0 {
                return Ok(f64::NEG_INFINITY);
            }
            let kl = if alpha > 0.0 { alpha * (d / dd).ln() } else { 0.0 };
            total += d * (mmdp.reward(s, a) - kl);
        }
    }
    Ok(total)
}

/// `r̃(s, a) = r(s, a) − α log(d^π(s, a) / d^D(s, a))` on the support of `d^π`;
/// `None` elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModifiedReward {
    pub n_joint: usize,
    #[serde(with = "opt_vec")]
    pub values: Vec<Option<f64>>,
}

mod opt_vec {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct W(#[serde(with = "crate::serde_ext::opt_f64")] Option<f64>);

    pub fn serialize<S: Serializer>(x: &[Option<f64>], s: S) -> Result<S::Ok, S::Error> {
        x.iter().map(|&v| W(v)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Option<f64>>, D::Error> {
        Ok(Vec::<W>::deserialize(d)?.into_iter().map(|w| w.0).collect())
    }
}

impl ModifiedReward {
    pub fn get(&self, s: usize, joint: usize) -> Option<f64> {
        self.values[s * self.n_joint + joint]
    }
}

pub fn modified_reward(
    mmdp: &TabularMmdp,
    policy: &FactorizedPolicy,
    dist: &EmpiricalDistribution,
    alpha: f64,
) -> Result<ModifiedReward> {
    check_inputs(mmdp, policy, dist, alpha)?;
    let occ = stationary_distribution(mmdp, policy)?;
    let nj = mmdp.n_joint();
    let values = (0..mmdp.n_states() * nj)
        .map(|k| {
            let (s, a) = (k / nj, k % nj);
            let d = occ.get(s, a);
            if d <= 0.0 {
                return None;
            }
            if alpha == 0.0 {
                return Some(mmdp.reward(s, a));
            }
            Some(mmdp.reward(s, a) - alpha * (d / dist.get(s, a)).ln())
        })
        .collect();
    Ok(ModifiedReward { n_joint: nj, values })
}

/// Agent `i`'s regularized problem with the others fixed: maximize
/// `Σ d_i ḡ − α Σ d_i log(d_i / d^D_i)` over occupancies of the reduced MDP, with
/// `ḡ(s, a_i) = Σ π_{-i} [r − α log(π_{-i} / π^D_{-i}(·|s, a_i))]`.
#[derive(Debug, Clone)]
pub struct RegularizedReduction {
    pub n_actions: usize,
    /// `ḡ(s, a_i)`; `-inf` when the others put mass on joint actions absent from the data.
    pub gbar: Vec<f64>,
    /// `d^D(s, a_i)`.
    pub d_data: Vec<f64>,
    /// Reduced transitions `P̄(s'|s, a_i)`.
    pub successors: Vec<Vec<(usize, f64)>>,
}

pub fn regularized_reduction(
    mmdp: &TabularMmdp,
    policy: &FactorizedPolicy,
    dist: &EmpiricalDistribution,
    alpha: f64,
    agent: usize,
) -> Result<RegularizedReduction> {
    check_inputs(mmdp, policy, dist, alpha)?;
    let space = mmdp.joint();
    let n = mmdp.n_states();
    let ni = space.size(agent);
    let d_data = dist.agent_marginal(agent);
    let mut gbar = vec![0.0; n * ni];
    let mut successors = vec![vec![]; n * ni];
    for s in 0..n {
        let mut rows: Vec<std::collections::BTreeMap<usize, f64>> = vec![Default::default(); ni];
        for a in 0..space.len() {
            let ai = space.component(a, agent);
            let w = policy.others_prob(space, agent, s, a);
            if w == 0.0 {
                continue;
            }
            let k = s * ni + ai;
            let dd = dist.get(s, a);
            let penalty = if alpha == 0.0 {
                0.0
            } else if dd == 0.0 || d_data[k] == 0.0 {
                f64::INFINITY
            } else {
                // π^D_{-i}(a_{-i}|s, a_i) = d^D(s, a) / d^D(s, a_i)
                alpha * (w * d_data[k] / dd).ln()
            };
            gbar[k] += w * (mmdp.reward(s, a) - penalty);
            for &(next, p) in mmdp.successors(s, a) {
                *rows[ai].entry(next).or_insert(0.0) += w * p;
            }
        }
        for (ai, row) in rows.into_iter().enumerate() {
            successors[s * ni + ai] = row.into_iter().collect();
        }
    }
    Ok(RegularizedReduction {
        n_actions: ni,
        gbar,
        d_data,
        successors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleMethod {
    /// One state, `γ = 0`: `d*(a) ∝ d^D(a) exp(ḡ(a)/α)`.
    ClosedForm,
    /// Newton on the convex dual over the support closure.
    Dual,
    /// `α = 0`: unregularized value iteration.
    Unregularized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestResponseGap {
    pub agent: usize,
    #[serde(with = "serde_ext::f64_ext")]
    pub best_response: f64,
    #[serde(with = "serde_ext::f64_ext")]
    pub current: f64,
    #[serde(with = "serde_ext::f64_ext")]
    pub gap: f64,
    pub method: OracleMethod,
    /// Best-response policy table `π_i(a_i|s)`; rows outside the reachable
    /// support are copied from the current policy.
    pub policy: Vec<f64>,
    /// Flow-constraint residual of the oracle occupancy.
    pub flow_residual: f64,
    /// Non-terminal states the best response cannot visit without leaving the
    /// data support.
    pub excluded_states: Vec<usize>,
}

/// `d*(a) ∝ d^D(a) exp(ḡ(a)/α)` and its value `α log Σ d^D exp(ḡ/α)`.
pub fn single_state_closed_form(gbar: &[f64], d_data: &[f64], alpha: f64) -> (Vec<f64>, f64) {
    let m = gbar
        .iter()
        .zip(d_data)
        .filter(|(g, &d)| d > 0.0 && g.is_finite())
        .map(|(&g, _)| g / alpha)
        .fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return (vec![0.0; gbar.len()], f64::NEG_INFINITY);
    }
    let raw: Vec<f64> = gbar
        .iter()
        .zip(d_data)
        .map(|(&g, &d)| if d > 0.0 && g.is_finite() { d * (g / alpha - m).exp() } else { 0.0 })
        .collect();
    let z: f64 = raw.iter().sum();
    (raw.iter().map(|r| r / z).collect(), alpha * (m + z.ln()))
}

/// Entropic mirror ascent on `Σ d ḡ − α Σ d log(d/d^D)` over the simplex,
/// stopped once successive iterates differ by less than `tol` in total variation.
pub fn mirror_descent_single_state(gbar: &[f64], d_data: &[f64], alpha: f64, tol: f64, max_iter: usize) -> Vec<f64> {
    let ok: Vec<bool> = gbar.iter().zip(d_data).map(|(g, &d)| d > 0.0 && g.is_finite()).collect();
    let k = ok.iter().filter(|&&b| b).count().max(1) as f64;
    let mut d: Vec<f64> = ok.iter().map(|&b| if b { 1.0 / k } else { 0.0 }).collect();
    // with η = 1/(2α) each step halves the log-space distance to the optimum
    let eta = 0.5 / alpha;
    for _ in 0..max_iter {
        let logits: Vec<f64> = (0..d.len())
            .map(|a| {
                if !ok[a] {
                    return f64::NEG_INFINITY;
                }
                let grad = gbar[a] - alpha * ((d[a] / d_data[a]).ln() + 1.0);
                d[a].ln() + eta * grad
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let raw: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
        let z: f64 = raw.iter().sum();
        let next: Vec<f64> = raw.iter().map(|r| r / z).collect();
        let tv: f64 = next.iter().zip(&d).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
        d = next;
        if tv < tol {
            break;
        }
    }
    d
}

fn primal_value(d: &[f64], gbar: &[f64], d_data: &[f64], alpha: f64) -> f64 {
    d.iter()
        .zip(gbar)
        .zip(d_data)
        .filter(|((&x, _), _)| x > 0.0)
        .map(|((&x, &g), &dd)| x * (g - alpha * (x / dd).ln()))
        .sum()
}

/// `J_α(π_i^BR, π_{-i}) − J_α(π)` for one agent. The best-response value is the
/// dual objective at the oracle's `ν`, an upper bound on the true maximum, so
/// looser solver tolerances can only enlarge the reported gap.
pub fn best_response_gap(
    mmdp: &TabularMmdp,
    policy: &FactorizedPolicy,
    dist: &EmpiricalDistribution,
    alpha: f64,
    agent: usize,
) -> Result<BestResponseGap> {
    best_response_gap_with(mmdp, policy, dist, alpha, agent, &oracle_config())
}

fn oracle_config() -> InnerConfig {
    InnerConfig {
        grad_tol: 1e-10,
        max_iter: 1000,
        ..InnerConfig::default()
    }
}

pub fn best_response_gap_with(
    mmdp: &TabularMmdp,
    policy: &FactorizedPolicy,
    dist: &EmpiricalDistribution,
    alpha: f64,
    agent: usize,
    inner: &InnerConfig,
) -> Result<BestResponseGap> {
    let current = regularized_objective(mmdp, policy, dist, alpha, agent)?;
    if alpha == 0.0 {
        let br = best_response_value(mmdp, policy, agent)?;
        let scale = 1.0 - mmdp.gamma();
        let best = scale * br.values.j;
        return Ok(BestResponseGap {
            agent,
            best_response: best,
            current,
            gap: best - current,
            method: OracleMethod::Unregularized,
            policy: br.policy,
            flow_residual: 0.0,
            excluded_states: vec![],
        });
    }
    let red = regularized_reduction(mmdp, policy, dist, alpha, agent)?;
    let n = mmdp.n_states();
    let ni = red.n_actions;

    if n == 1 && mmdp.gamma() == 0.0 {
        let (d, best) = single_state_closed_form(&red.gbar, &red.d_data, alpha);
        let policy_row = if best.is_finite() { d.clone() } else { policy.row(agent, 0).to_vec() };
        return Ok(BestResponseGap {
            agent,
            best_response: best,
            current,
            gap: gap_of(best, current),
            method: OracleMethod::ClosedForm,
            policy: policy_row,
            flow_residual: if best.is_finite() { (d.iter().sum::<f64>() - 1.0).abs() } else { 0.0 },
            excluded_states: if best.is_finite() { vec![] } else { vec![0] },
        });
    }

    // support closure: usable entries need data mass, finite ḡ, and successors
    // that are usable or terminal
    let entry_ok = |k: usize| red.d_data[k] > 0.0 && red.gbar[k].is_finite();
    let mut live: Vec<bool> = (0..n).map(|s| !mmdp.is_terminal(s)).collect();
    let mut usable = vec![false; n * ni];
    loop {
        for s in 0..n {
            for a in 0..ni {
                let k = s * ni + a;
                usable[k] = live[s]
                    && entry_ok(k)
                    && red.successors[k].iter().all(|&(t, _)| mmdp.is_terminal(t) || live[t]);
            }
        }
        let next: Vec<bool> = (0..n).map(|s| (0..ni).any(|a| usable[s * ni + a])).collect();
        if next == live {
            break;
        }
        live = next;
    }
    let excluded_states: Vec<usize> = (0..n).filter(|&s| !mmdp.is_terminal(s) && !live[s]).collect();
    if (0..n).any(|s| mmdp.p0()[s] > 0.0 && !mmdp.is_terminal(s) && !live[s]) {
        return Ok(BestResponseGap {
            agent,
            best_response: f64::NEG_INFINITY,
            current,
            gap: gap_of(f64::NEG_INFINITY, current),
            method: OracleMethod::Dual,
            policy: policy.table(agent).to_vec(),
            flow_residual: 0.0,
            excluded_states,
        });
    }
    // restrict to states reachable from p0 through usable entries
    let mut reach = vec![false; n];
    let mut stack: Vec<usize> = (0..n).filter(|&s| mmdp.p0()[s] > 0.0 && live[s]).collect();
    stack.iter().for_each(|&s| reach[s] = true);
    while let Some(s) = stack.pop() {
        for a in 0..ni {
            if usable[s * ni + a] {
                for &(t, _) in &red.successors[s * ni + a] {
                    if !mmdp.is_terminal(t) && !reach[t] {
                        reach[t] = true;
                        stack.push(t);
                    }
                }
            }
        }
    }
    let vars = Variables::new(&reach);
    let gamma = mmdp.gamma();
    let mut terms = vec![];
    let mut term_key = vec![];
    for s in 0..n {
        if !reach[s] {
            continue;
        }
        for a in 0..ni {
            let k = s * ni + a;
            if !usable[k] {
                continue;
            }
            let mut coeffs = vec![(vars.var_of[s].expect("reachable"), -1.0)];
            for &(t, p) in &red.successors[k] {
                if !mmdp.is_terminal(t) && gamma > 0.0 {
                    let j = vars.var_of[t].expect("reachable successor");
                    match coeffs.iter_mut().find(|(i, _)| *i == j) {
                        Some(c) => c.1 += gamma * p,
                        None => coeffs.push((j, gamma * p)),
                    }
                }
            }
            terms.push(Term {
                weight: red.d_data[k],
                offset: red.gbar[k],
                coeffs,
                source: vars.var_of[s].expect("reachable"),
            });
            term_key.push(k);
        }
    }
    let problem = DualProblem {
        n: vars.len(),
        linear: vars.state_of.iter().map(|&s| (1.0 - gamma) * mmdp.p0()[s]).collect(),
        terms,
        alpha,
    };
    let sol = problem.minimize(Form::Unstable, &problem.soft_start(10_000, 1e-12), inner)?;
    let e = problem.advantages(&sol.nu);
    let mut d = vec![0.0; n * ni];
    for (t, &k) in term_key.iter().enumerate() {
        d[k] = problem.terms[t].weight * (e[t] / alpha - 1.0).exp();
    }
    // flow residual of d*
    let mut inflow: Vec<f64> = mmdp.p0().iter().map(|p| (1.0 - gamma) * p).collect();
    for k in 0..n * ni {
        if d[k] > 0.0 {
            for &(t, p) in &red.successors[k] {
                inflow[t] += gamma * p * d[k];
            }
        }
    }
    let flow_residual = (0..n)
        .filter(|&s| !mmdp.is_terminal(s) && reach[s])
        .map(|s| ((0..ni).map(|a| d[s * ni + a]).sum::<f64>() - inflow[s]).abs())
        .fold(0.0, f64::max);
    let best = sol.objective;
    // weak duality only binds a feasible occupancy
    debug_assert!(flow_residual > 1e-9 || best >= primal_value(&d, &red.gbar, &red.d_data, alpha) - 1e-6);
    let mut table = policy.table(agent).to_vec();
    for s in 0..n {
        let z: f64 = (0..ni).map(|a| d[s * ni + a]).sum();
        if reach[s] && z > 0.0 {
            for a in 0..ni {
                table[s * ni + a] = d[s * ni + a] / z;
            }
        }
    }
    Ok(BestResponseGap {
        agent,
        best_response: best,
        current,
        gap: gap_of(best, current),
        method: OracleMethod::Dual,
        policy: table,
        flow_residual,
        excluded_states,
    })
}

fn gap_of(best: f64, current: f64) -> f64 {
    match (best.is_finite(), current.is_finite()) {
        (true, _) => best - current,
        // neither the policy nor any deviation stays in the data support
        (false, false) => 0.0,
        (false, true) => f64::NEG_INFINITY,
    }
}

/// Unregularized improvement available to `agent`, in normalized occupancy
/// units (`(1−γ)` times the return).
pub fn unregularized_gap(mmdp: &TabularMmdp, policy: &FactorizedPolicy, agent: usize) -> Result<f64> {
    let br = best_response_value(mmdp, policy, agent)?;
    let cur = evaluate_policy(mmdp, policy)?;
    Ok((1.0 - mmdp.gamma()) * (br.values.j - cur.j))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// The objective dropped between snapshot `index − 1` and `index`.
    pub index: usize,
    #[serde(with = "serde_ext::f64_ext")]
    pub before: f64,
    #[serde(with = "serde_ext::f64_ext")]
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NashReport {
    pub alpha: f64,
    #[serde(with = "serde_ext::vec_f64")]
    pub gaps: Vec<f64>,
    #[serde(with = "serde_ext::vec_f64")]
    pub unregularized_gaps: Vec<f64>,
    #[serde(with = "serde_ext::f64_ext")]
    pub objective: f64,
    /// `J_α` at every audited snapshot.
    #[serde(with = "serde_ext::vec_f64")]
    pub trajectory: Vec<f64>,
    pub violations: Vec<Violation>,
    /// `max_i ε_i`.
    #[serde(with = "serde_ext::f64_ext")]
    pub epsilon: f64,
    pub excluded_states: Vec<Vec<usize>>,
    pub verdict: String,
}

pub const MONOTONE_TOL: f64 = 1e-6;

/// Objective drops larger than `tol` between consecutive snapshots.
pub fn monotonicity_violations(trajectory: &[f64], tol: f64) -> Vec<Violation> {
    trajectory
        .windows(2)
        .enumerate()
        .filter(|(_, w)| {
            let (a, b) = (w[0], w[1]);
            a.is_finite() && (b == f64::NEG_INFINITY || b < a - tol)
        })
        .map(|(k, w)| Violation {
            index: k + 1,
            before: w[0],
            after: w[1],
        })
        .collect()
}

/// Audits a policy sequence (the last one is certified).
pub fn audit_policies(
    mmdp: &TabularMmdp,
    snapshots: &[FactorizedPolicy],
    dist: &EmpiricalDistribution,
    alpha: f64,
) -> Result<NashReport> {
    let last = snapshots.last().ok_or_else(|| Error::invalid("no policy snapshots to audit"))?;
    let trajectory = snapshots
        .iter()
        .map(|p| regularized_objective(mmdp, p, dist, alpha, 0))
        .collect::<Result<Vec<_>>>()?;
    let violations = monotonicity_violations(&trajectory, MONOTONE_TOL);
    let mut gaps = vec![];
    let mut unreg = vec![];
    let mut excluded = vec![];
    for i in 0..mmdp.n_agents() {
        let g = best_response_gap(mmdp, last, dist, alpha, i)?;
        gaps.push(g.gap);
        excluded.push(g.excluded_states);
        unreg.push(unregularized_gap(mmdp, last, i)?);
    }
    let epsilon = gaps.iter().cloned().fold(0.0, f64::max);
    let objective = *trajectory.last().expect("nonempty");
    let verdict = if objective == f64::NEG_INFINITY {
        "policy leaves the data support".to_string()
    } else {
        format!("{epsilon:.3e}-Nash")
    };
    Ok(NashReport {
        alpha,
        gaps,
        unregularized_gaps: unreg,
        objective,
        trajectory,
        violations,
        epsilon,
        excluded_states: excluded,
        verdict,
    })
}

pub fn certify(mmdp: &TabularMmdp, policy: &FactorizedPolicy, dist: &EmpiricalDistribution, alpha: f64) -> Result<NashReport> {
    audit_policies(mmdp, std::slice::from_ref(policy), dist, alpha)
}

pub fn audit_training(report: &TrainReport, mmdp: &TabularMmdp, dist: &EmpiricalDistribution, alpha: f64) -> Result<NashReport> {
    audit_policies(mmdp, &report.snapshots, dist, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::empirical_distribution;
    use crate::envs::{matrix_dataset, penalty_xor, xor, MatrixRecipe};

    fn setup(recipe: MatrixRecipe) -> (TabularMmdp, EmpiricalDistribution) {
        let m = penalty_xor();
        let data = matrix_dataset(&m, recipe);
        let dist = empirical_distribution(&data, &m.meta()).unwrap();
        (m, dist)
    }

    #[test]
    fn modified_reward_at_point_mass() {
        let (m, dist) = setup(MatrixRecipe::C);
        let pi = FactorizedPolicy::deterministic(1, &[2, 2], &[vec![0], vec![1]]).unwrap();
        let r = modified_reward(&m, &pi, &dist, 1.0).unwrap();
        assert!((r.get(0, 1).unwrap() - (1.0 - 3f64.ln())).abs() < 1e-12);
        assert_eq!(r.get(0, 0), None);
        let j = regularized_objective(&m, &pi, &dist, 1.0, 1).unwrap();
        assert!((j - (1.0 - 3f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn out_of_support_is_minus_infinity() {
        let (m, dist) = setup(MatrixRecipe::C);
        let pi = FactorizedPolicy::deterministic(1, &[2, 2], &[vec![1], vec![1]]).unwrap();
        assert_eq!(regularized_objective(&m, &pi, &dist, 1.0, 0).unwrap(), f64::NEG_INFINITY);
        assert_eq!(regularized_objective(&m, &pi, &dist, 0.0, 0).unwrap(), -2.0);
    }

    #[test]
    fn data_policy_objective_is_mean_reward() {
        let (m, dist) = setup(MatrixRecipe::D);
        let pi = FactorizedPolicy::uniform(1, &[2, 2]);
        let j = regularized_objective(&m, &pi, &dist, 3.0, 0).unwrap();
        assert!((j - 0.0).abs() < 1e-12);
    }

    #[test]
    fn closed_form_agrees_with_mirror_descent() {
        let g = [0.3, -1.2, 0.9];
        let dd = [0.2, 0.5, 0.3];
        for alpha in [0.1, 1.0, 5.0] {
            let (d, v) = single_state_closed_form(&g, &dd, alpha);
            let md = mirror_descent_single_state(&g, &dd, alpha, 1e-14, 200_000);
            let tv: f64 = d.iter().zip(&md).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
            assert!(tv < 1e-8, "alpha {alpha}: tv {tv}");
            assert!((primal_value(&d, &g, &dd, alpha) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn xor_uniform_unregularized_gap_is_zero() {
        let m = xor();
        let data = matrix_dataset(&m, MatrixRecipe::D);
        let dist = empirical_distribution(&data, &m.meta()).unwrap();
        let pi = FactorizedPolicy::uniform(1, &[2, 2]);
        for i in 0..2 {
            let g = best_response_gap(&m, &pi, &dist, 0.0, i).unwrap();
            assert_eq!(g.method, OracleMethod::Unregularized);
            assert!(g.gap.abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_best_response_has_zero_gap() {
        let (m, dist) = setup(MatrixRecipe::C);
        let pi = FactorizedPolicy::uniform(1, &[2, 2]);
        let g = best_response_gap(&m, &pi, &dist, 1.0, 0);
        // uniform partner puts mass on BB, which is not in dataset (c)
        let g = g.unwrap();
        assert_eq!(g.current, f64::NEG_INFINITY);
        let mut pi = FactorizedPolicy::deterministic(1, &[2, 2], &[vec![0], vec![1]]).unwrap();
        let br = best_response_gap(&m, &pi, &dist, 1.0, 0).unwrap();
        pi.set_agent(0, br.policy.clone()).unwrap();
        let again = best_response_gap(&m, &pi, &dist, 1.0, 0).unwrap();
        assert!(again.gap.abs() < 1e-10, "{}", again.gap);
    }

    #[test]
    fn violations_are_localized() {
        let v = monotonicity_violations(&[f64::NEG_INFINITY, 0.1, 0.2, 0.15, 0.15], 1e-6);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].index, 3);
    }
}
