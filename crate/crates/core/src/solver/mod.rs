//! Alternating regularized best responses over a fixed offline dataset.
//!
//! Each agent update computes importance weights `ρ` of the others' current
//! policy against the data's conditional partner policy, minimizes the convex
//! dual in `ν`, builds the advantage table `e`, and extracts
//! `π_i(a|s) ∝ π_i^D(a|s) exp(e(s,a)/α)`.

pub mod data;
pub mod dual;
pub mod resample;
pub mod support;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DataPolicyTables, OfflineDataset};
use crate::error::{Error, Result};
use crate::mmdp::{FactorizedPolicy, MmdpMeta, TabularMmdp};
use crate::nash;
use crate::serde_ext;

pub use data::GroupedData;
pub use dual::{closed_form_w, DualProblem, Form, InnerConfig, NuSolution};
pub use resample::{resample, ResampleResult};
use support::{Support, Variables, View};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// ρ-weighted sums over the whole dataset.
    Exact,
    /// Importance-resampled mini-batch of size `K`.
    Resampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveChoice {
    /// Stable log-sum-exp form unless the data contains episode ends.
    Auto,
    Stable,
    Unstable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentOrder {
    Fixed,
    /// Seeded random permutation every sweep.
    Shuffled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub mode: Mode,
    pub resample_size: usize,
    pub objective: ObjectiveChoice,
    pub inner: InnerConfig,
    pub max_sweeps: usize,
    pub eps_stop: f64,
    pub agent_order: AgentOrder,
    /// Scale of the seeded logit noise applied to `π_i^D` at initialization.
    pub init_noise: f64,
    /// Largest partner-mass leak an entry may have and still count as supported.
    pub support_tol: f64,
    /// Same, for the resampled estimate of the leak.
    pub resampled_support_tol: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            mode: Mode::Exact,
            resample_size: 100_000,
            objective: ObjectiveChoice::Auto,
            inner: InnerConfig::default(),
            max_sweeps: 100,
            eps_stop: 1e-8,
            agent_order: AgentOrder::Fixed,
            init_noise: 0.5,
            support_tol: 0.0,
            resampled_support_tol: 0.05,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("alpha must be positive"));
        }
        if self.resample_size == 0 {
            return Err(Error::invalid("resample size K must be at least 1"));
        }
        if !(self.inner.grad_tol > 0.0) || !(self.eps_stop > 0.0) {
            return Err(Error::invalid("tolerances must be positive"));
        }
        if self.inner.max_iter == 0 || self.max_sweeps == 0 {
            return Err(Error::invalid("iteration limits must be positive"));
        }
        if !(self.support_tol >= 0.0 && self.resampled_support_tol >= 0.0 && self.init_noise >= 0.0) {
            return Err(Error::invalid("support tolerances and init noise must be non-negative"));
        }
        Ok(())
    }
}

/// `e_i(s, a_i)` with a support mask; unsupported entries hold `-inf` in exact
/// mode and the floor value in resampled mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ETable {
    pub n_actions: usize,
    pub values: Vec<f64>,
    pub support: Vec<bool>,
}

impl ETable {
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    /// `w = exp(e/α − 1)` on supported entries, zero elsewhere.
    pub fn corrections(&self, alpha: f64) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.support)
            .map(|(&e, &ok)| if ok { closed_form_w(e, alpha) } else { 0.0 })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    /// Every initial state has entries whose partner mass stays in the data.
    Feasible,
    /// Least-leaking entries were used because no feasible response exists.
    Restoration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSolve {
    pub policy: Vec<f64>,
    /// `ν_i(s)`, zero outside the solved states.
    pub nu: Vec<f64>,
    pub solved_states: Vec<bool>,
    pub e_table: ETable,
    pub phase: Phase,
    pub form: Form,
    pub rho_bar: f64,
    pub solution: NuSolution,
    /// States whose row is not determined by the data (unseen, or every
    /// partner action out of support).
    pub fallback_states: Vec<usize>,
}

/// `ρ_i = π_{-i}(a_{-i}|s) / π_{-i}^D(a_{-i}|s, a_i)` at a dataset sample.
pub fn rho(others: &FactorizedPolicy, tables: &DataPolicyTables, agent: usize, s: usize, joint: usize) -> Result<f64> {
    let denom = tables
        .others_conditional(agent, s, joint)
        .filter(|&p| p > 0.0)
        .ok_or_else(|| Error::invalid(format!("no data-policy conditional for agent {agent} at state {s}, joint action {joint}")))?;
    Ok(others.others_prob(&tables.joint, agent, s, joint) / denom)
}

/// `ê = r − α log ρ + γ(1 − done) ν(s') − ν(s)`; `-inf` when `ρ = 0`.
#[allow(clippy::too_many_arguments)]
pub fn advantage_hat(
    nu: &[f64],
    s: usize,
    joint: usize,
    r: f64,
    s_next: usize,
    done: bool,
    gamma: f64,
    alpha: f64,
    others: &FactorizedPolicy,
    tables: &DataPolicyTables,
    agent: usize,
) -> Result<f64> {
    let rho = rho(others, tables, agent, s, joint)?;
    if rho == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    let next = if done { 0.0 } else { nu[s_next] };
    Ok(r - alpha * rho.ln() + gamma * next - nu[s])
}

/// Per-group `ρ` for one agent against the current policy.
pub fn group_rho(data: &GroupedData, policy: &FactorizedPolicy, agent: usize) -> Vec<f64> {
    data.groups
        .iter()
        .map(|g| rho(policy, &data.tables, agent, g.s, g.joint).expect("groups come from the data"))
        .collect()
}

fn base_advantages(data: &GroupedData, rho: &[f64], alpha: f64) -> Vec<f64> {
    data.groups
        .iter()
        .zip(rho)
        .map(|(g, &r)| if r > 0.0 { g.reward - alpha * r.ln() } else { f64::NEG_INFINITY })
        .collect()
}

/// `π_{-i}` mass on partner actions never observed with each `(s, a_i)` entry,
/// summed term by term so that a clean entry has exactly zero leak.
fn exact_partner_leak(data: &GroupedData, policy: &FactorizedPolicy, agent: usize) -> Vec<f64> {
    let space = &data.meta.joint;
    data.agent_entries[agent]
        .entries
        .iter()
        .map(|e| {
            (0..space.len())
                .filter(|&a| space.component(a, agent) == e.action && data.tables.joint_count(e.s, a) == 0)
                .map(|a| policy.others_prob(space, agent, e.s, a))
                .sum()
        })
        .collect()
}

/// Restricts a support to states reachable from the initial states through
/// its usable transitions; unreachable states carry no occupancy.
pub(crate) fn restrict_to_reachable(view: &View, sup: &mut Support) {
    let data = view.data;
    let n = data.meta.n_states;
    let mut reach = vec![false; n];
    let mut stack: Vec<usize> = (0..n).filter(|&s| data.d0[s] > 0.0 && sup.live[s]).collect();
    for &s in &stack {
        reach[s] = true;
    }
    let mut by_state: Vec<Vec<usize>> = vec![vec![]; n];
    for (e, entry) in view.entries.entries.iter().enumerate() {
        if sup.effective[e] {
            by_state[entry.s].push(e);
        }
    }
    while let Some(s) = stack.pop() {
        for &e in &by_state[s] {
            for &g in &view.entries.entries[e].groups {
                let grp = &data.groups[g];
                if sup.ok_group[g] && !grp.done && !reach[grp.s_next] {
                    reach[grp.s_next] = true;
                    stack.push(grp.s_next);
                }
            }
        }
    }
    for (e, entry) in view.entries.entries.iter().enumerate() {
        if !reach[entry.s] {
            sup.effective[e] = false;
        }
    }
    sup.live = reach;
}

/// Mass-weighted mean advantage of an entry over its usable groups.
fn entry_advantage(view: &View, sup: &Support, e: usize, nu_full: &[f64]) -> f64 {
    let gamma = view.data.meta.gamma;
    let entry = &view.entries.entries[e];
    let mut total = 0.0;
    let mut acc = 0.0;
    for &g in &entry.groups {
        if !sup.ok_group[g] {
            continue;
        }
        let grp = &view.data.groups[g];
        let next = if grp.done { 0.0 } else { nu_full[grp.s_next] };
        total += view.mass[g];
        acc += view.mass[g] * (view.base[g] + gamma * next);
    }
    acc / total - nu_full[entry.s]
}

fn choose_form(choice: ObjectiveChoice, has_done: bool) -> Form {
    match choice {
        ObjectiveChoice::Stable => Form::Stable,
        ObjectiveChoice::Unstable => Form::Unstable,
        ObjectiveChoice::Auto if has_done => Form::Unstable,
        ObjectiveChoice::Auto => Form::Stable,
    }
}

/// Adds the constant that moves a minimizer of the stable form onto a
/// minimizer of the unstable one: `α/(1−γ) · (log Σ w exp(e/α) − 1)`.
pub fn stable_to_unstable_shift(problem: &DualProblem, nu: &[f64], gamma: f64) -> f64 {
    let e = problem.advantages(nu);
    let lse = dual::log_sum_exp(problem.terms.iter().zip(&e).map(|(t, &e)| (t.weight, e / problem.alpha)));
    problem.alpha / (1.0 - gamma) * (lse - 1.0)
}

/// Softmax of `prior · exp(e/α)`; `None` if no entry has positive prior and
/// finite advantage.
pub fn extract_row(prior: &[f64], e: &[f64], alpha: f64) -> Option<Vec<f64>> {
    let m = prior
        .iter()
        .zip(e)
        .filter(|(&p, &x)| p > 0.0 && x.is_finite())
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return None;
    }
    let raw: Vec<f64> = prior
        .iter()
        .zip(e)
        .map(|(&p, &x)| if p > 0.0 && x.is_finite() { p * ((x - m) / alpha).exp() } else { 0.0 })
        .collect();
    let z: f64 = raw.iter().sum();
    Some(raw.into_iter().map(|x| x / z).collect())
}

pub(crate) struct SolvedDual {
    pub nu_full: Vec<f64>,
    pub solution: NuSolution,
    pub form: Form,
}

/// Minimizes `problem` and maps the result back to a full `ν` table.
pub(crate) fn solve_dual(
    problem: &DualProblem,
    vars: &Variables,
    n_states: usize,
    gamma: f64,
    form: Form,
    warm: Option<&[f64]>,
    inner: &InnerConfig,
) -> Result<SolvedDual> {
    let soft = || problem.soft_start(10_000, 1e-12);
    let mut solution = match warm {
        Some(w) => match problem.minimize(form, &vars.restrict(w), inner) {
            Ok(sol) => sol,
            // a warm start far from the new optimum can stall or overflow
            Err(e) if e.is_solver_failure() => problem.minimize(form, &soft(), inner)?,
            Err(e) => return Err(e),
        },
        None => problem.minimize(form, &soft(), inner)?,
    };
    if form == Form::Stable && gamma < 1.0 {
        let c = stable_to_unstable_shift(problem, &solution.nu, gamma);
        solution.nu.iter_mut().for_each(|x| *x += c);
    }
    Ok(SolvedDual {
        nu_full: vars.expand(&solution.nu, n_states),
        solution,
        form,
    })
}

/// One regularized best-response update for `agent` against `policy`.
pub fn solve_agent(
    data: &GroupedData,
    policy: &FactorizedPolicy,
    agent: usize,
    cfg: &TrainConfig,
    warm: Option<&[f64]>,
    seed: u64,
) -> Result<AgentSolve> {
    let alpha = cfg.alpha;
    let meta = &data.meta;
    let n = meta.n_states;
    let ni = meta.joint.size(agent);
    let entries = &data.agent_entries[agent];
    let rho_g = group_rho(data, policy, agent);
    let base = base_advantages(data, &rho_g, alpha);

    let (mass, sample_weight, rho_bar, tol) = match cfg.mode {
        Mode::Exact => {
            let mass: Vec<f64> = data.groups.iter().zip(&rho_g).map(|(g, &r)| g.count as f64 * r).collect();
            let weight = mass.iter().map(|m| m / data.n_records as f64).collect::<Vec<_>>();
            let rho_bar = mass.iter().sum::<f64>() / data.n_records as f64;
            (mass, weight, rho_bar, cfg.support_tol)
        }
        Mode::Resampled => {
            let per_record: Vec<f64> = data.record_group.iter().map(|&g| rho_g[g]).collect();
            let rs = resample(&per_record, cfg.resample_size, seed).map_err(|_| Error::NoSupport { agent })?;
            let mut k = vec![0usize; data.groups.len()];
            for &i in &rs.indices {
                k[data.record_group[i]] += 1;
            }
            let kk = cfg.resample_size as f64;
            let mass = k.iter().map(|&c| c as f64 * rs.rho_bar * data.n_records as f64 / kk).collect();
            let weight = k.iter().map(|&c| rs.rho_bar * c as f64 / kk).collect();
            (mass, weight, rs.rho_bar, cfg.resampled_support_tol)
        }
    };
    if rho_bar <= 0.0 {
        return Err(Error::NoSupport { agent });
    }
    let partner_leak = match cfg.mode {
        Mode::Exact => exact_partner_leak(data, policy, agent),
        Mode::Resampled => entries
            .entries
            .iter()
            .map(|e| (1.0 - e.groups.iter().map(|&g| mass[g]).sum::<f64>() / e.count as f64).max(0.0))
            .collect(),
    };
    let view = View {
        data,
        entries,
        mass,
        base,
        partner_leak,
    };

    let feasible = support::feasible_support(&view, tol);
    // strictly least-leaking: a tolerance here can pin a symmetric start
    let restoration = support::restoration_support(&view, 0.0);
    let (mut primary, phase) = if feasible.restoration {
        if !restoration.covers_initial_states(&data.d0) {
            return Err(Error::NoSupport { agent });
        }
        (restoration.clone(), Phase::Restoration)
    } else {
        (feasible, Phase::Feasible)
    };
    restrict_to_reachable(&view, &mut primary);
    let vars = Variables::new(&primary.live);
    let has_done = support::support_has_done(&view, &primary);
    let form = choose_form(cfg.objective, has_done);
    let problem = match cfg.mode {
        Mode::Exact => support::aggregated_problem(&view, &primary, &vars, alpha).0,
        Mode::Resampled => support::per_sample_problem(&view, &primary, &vars, &sample_weight, alpha),
    };
    let solved = solve_dual(&problem, &vars, n, meta.gamma, form, warm, &cfg.inner)?;
    let nu_full = solved.nu_full;

    // advantage table on the primary support; other observed states get a
    // one-step lookahead through the least-leaking entries
    let mut values = vec![f64::NEG_INFINITY; n * ni];
    let mut supported = vec![false; n * ni];
    let solved_states = primary.live.clone();
    for (e, entry) in entries.entries.iter().enumerate() {
        if primary.effective[e] {
            values[entry.s * ni + entry.action] = entry_advantage(&view, &primary, e, &nu_full);
            supported[entry.s * ni + entry.action] = true;
        }
    }
    // lookahead values treat unsolved successors as zero
    for (e, entry) in entries.entries.iter().enumerate() {
        if !primary.live[entry.s] && restoration.effective[e] {
            values[entry.s * ni + entry.action] = entry_advantage(&view, &restoration, e, &nu_full);
        }
    }
    if cfg.mode == Mode::Resampled {
        let floor = data
            .groups
            .iter()
            .enumerate()
            .filter(|&(g, _)| view.mass[g] > 0.0 && primary.ok_group[g] && primary.live[data.groups[g].s])
            .map(|(g, grp)| view.base[g] + meta.gamma * if grp.done { 0.0 } else { nu_full[grp.s_next] } - nu_full[grp.s])
            .fold(f64::INFINITY, f64::min)
            - 10.0 * alpha;
        for s in 0..n {
            if !primary.live[s] {
                continue;
            }
            for a in 0..ni {
                if !supported[s * ni + a] {
                    values[s * ni + a] = floor;
                }
            }
        }
    }

    let mut table = vec![0.0; n * ni];
    let mut fallback_states = vec![];
    for s in 0..n {
        let row = &mut table[s * ni..(s + 1) * ni];
        match data.tables.marginal_row(agent, s) {
            None => {
                row.iter_mut().for_each(|x| *x = 1.0 / ni as f64);
                fallback_states.push(s);
            }
            Some(prior) => match extract_row(&prior, &values[s * ni..(s + 1) * ni], alpha) {
                Some(p) => row.copy_from_slice(&p),
                None => {
                    row.copy_from_slice(&prior);
                    fallback_states.push(s);
                }
            },
        }
    }
    Ok(AgentSolve {
        policy: table,
        nu: nu_full,
        solved_states,
        e_table: ETable {
            n_actions: ni,
            values,
            support: supported,
        },
        phase,
        form: solved.form,
        rho_bar,
        solution: solved.solution,
        fallback_states,
    })
}

/// `π_i^D` with seeded multiplicative noise `exp(σ u)`, `u ~ U(−1, 1)`, on the
/// data support; unseen states are uniform.
pub fn initial_policy(data: &GroupedData, noise: f64, seed: u64) -> FactorizedPolicy {
    let meta = &data.meta;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = meta.joint.sizes().to_vec();
    let tables = sizes
        .iter()
        .enumerate()
        .map(|(i, &ni)| {
            let mut t = Vec::with_capacity(meta.n_states * ni);
            for s in 0..meta.n_states {
                match data.tables.marginal_row(i, s) {
                    None => t.extend(std::iter::repeat_n(1.0 / ni as f64, ni)),
                    Some(prior) => {
                        let raw: Vec<f64> = prior
                            .iter()
                            .map(|&p| p * (noise * rng.random_range(-1.0..1.0)).exp())
                            .collect();
                        let z: f64 = raw.iter().sum();
                        t.extend(raw.iter().map(|x| x / z));
                    }
                }
            }
            t
        })
        .collect();
    FactorizedPolicy::from_tables(meta.n_states, &sizes, tables).expect("normalized rows")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub sweep: usize,
    pub agent: usize,
    pub phase: Phase,
    pub form: Form,
    pub rho_bar: f64,
    pub nu_iterations: usize,
    pub nu_grad_norm: f64,
    pub nu_objective: f64,
    pub policy_change: f64,
    /// Regularized objective after the update, when the true model is known.
    #[serde(with = "serde_ext::opt_f64")]
    pub objective: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub sweep: usize,
    pub max_policy_change: f64,
    #[serde(with = "serde_ext::opt_f64")]
    pub objective: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    PolicyFixedPoint,
    ObjectiveConverged,
    MaxSweeps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub algo: String,
    pub config: TrainConfig,
    #[serde(with = "serde_ext::opt_f64")]
    pub initial_objective: Option<f64>,
    pub updates: Vec<UpdateRecord>,
    pub sweeps: Vec<SweepRecord>,
    pub stop_reason: Option<StopReason>,
    /// Regularized best-response gap per agent, when the true model is known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gaps: Option<Vec<f64>>,
    pub fallback_rows: Vec<(usize, usize)>,
    /// Policy after initialization and after every agent update.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub snapshots: Vec<FactorizedPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_secs: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub policy: FactorizedPolicy,
    pub report: TrainReport,
}

/// Runs sweeps of agent updates until the policy stops moving, the regularized
/// objective stops improving (only checkable with `oracle`), or `max_sweeps`.
pub fn train(
    meta: &MmdpMeta,
    dataset: &OfflineDataset,
    cfg: &TrainConfig,
    oracle: Option<&TabularMmdp>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let data = GroupedData::new(meta, dataset)?;
    let dist = crate::dataset::empirical_distribution(dataset, meta)?;
    if let Some(m) = oracle {
        if m.meta() != *meta {
            return Err(Error::invalid("oracle MMDP does not match the problem shape"));
        }
        if let Some(s) = (0..m.n_states()).find(|&s| m.p0()[s] > 0.0 && data.d0[s] == 0.0) {
            return Err(Error::invalid(format!("dataset does not cover initial state {}", m.state_names()[s])));
        }
    }
    let objective = |pi: &FactorizedPolicy| -> Result<Option<f64>> {
        match oracle {
            Some(m) => Ok(Some(nash::regularized_objective(m, pi, &dist, cfg.alpha, 0)?)),
            None => Ok(None),
        }
    };
    let n_agents = meta.joint.n_agents();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut policy = initial_policy(&data, cfg.init_noise, rng.random());
    let mut report = TrainReport {
        algo: "alberdice".into(),
        config: cfg.clone(),
        initial_objective: objective(&policy)?,
        updates: vec![],
        sweeps: vec![],
        stop_reason: None,
        gaps: None,
        fallback_rows: vec![],
        snapshots: vec![policy.clone()],
        wall_clock_secs: None,
    };
    let mut warm: Vec<Option<Vec<f64>>> = vec![None; n_agents];
    let mut fallback = vec![vec![]; n_agents];
    let mut j_prev = report.initial_objective;
    for sweep in 1..=cfg.max_sweeps {
        let before = policy.clone();
        let mut order: Vec<usize> = (0..n_agents).collect();
        if cfg.agent_order == AgentOrder::Shuffled {
            order.shuffle(&mut rng);
        }
        for agent in order {
            let upd = solve_agent(&data, &policy, agent, cfg, warm[agent].as_deref(), rng.random())?;
            let old = policy.clone();
            policy.set_agent(agent, upd.policy)?;
            let j = objective(&policy)?;
            report.updates.push(UpdateRecord {
                sweep,
                agent,
                phase: upd.phase,
                form: upd.form,
                rho_bar: upd.rho_bar,
                nu_iterations: upd.solution.iterations,
                nu_grad_norm: upd.solution.grad_norm,
                nu_objective: upd.solution.objective,
                policy_change: policy.max_abs_diff(&old),
                objective: j,
            });
            report.snapshots.push(policy.clone());
            warm[agent] = Some(upd.nu);
            fallback[agent] = upd.fallback_states;
        }
        let change = policy.max_abs_diff(&before);
        let j = report.updates.last().and_then(|u| u.objective);
        report.sweeps.push(SweepRecord {
            sweep,
            max_policy_change: change,
            objective: j,
        });
        if change < 1e-12 {
            report.stop_reason = Some(StopReason::PolicyFixedPoint);
            break;
        }
        if let (Some(a), Some(b)) = (j_prev, j) {
            if a.is_finite() && b.is_finite() && b - a < cfg.eps_stop {
                report.stop_reason = Some(StopReason::ObjectiveConverged);
                break;
            }
        }
        j_prev = j;
    }
    if report.stop_reason.is_none() {
        report.stop_reason = Some(StopReason::MaxSweeps);
    }
    report.fallback_rows = fallback
        .iter()
        .enumerate()
        .flat_map(|(i, states)| states.iter().map(move |&s| (i, s)))
        .collect();
    if let Some(m) = oracle {
        let gaps = (0..n_agents)
            .map(|i| nash::best_response_gap(m, &policy, &dist, cfg.alpha, i).map(|g| g.gap))
            .collect::<Result<Vec<_>>>()?;
        report.gaps = Some(gaps);
    }
    Ok(TrainOutput { policy, report })
}
