//! Which `(s, a_i)` entries an agent's regularized best response may use.
//!
//! An entry is usable when the other agents' current policy keeps (almost) all
//! of its mass on partner actions observed with it, and every observed
//! successor is itself usable or terminal. Partner mass that falls outside the
//! data makes the KL term infinite, so such entries are excluded outright.

use std::collections::BTreeMap;

use super::data::{EntrySet, GroupedData};
use super::dual::{DualProblem, Term};

/// Per-group quantities for one agent update.
#[derive(Debug, Clone)]
pub struct View<'a> {
    pub data: &'a GroupedData,
    pub entries: &'a EntrySet,
    /// Expected number of records the group stands for under the current
    /// partners: `n_g ρ_g` (exact) or `k_g ρ̄ |D| / K` (resampled).
    pub mass: Vec<f64>,
    /// `r − α log ρ` for groups with positive mass.
    pub base: Vec<f64>,
    /// Partner mass per entry on actions never observed with it.
    pub partner_leak: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Support {
    pub live: Vec<bool>,
    pub effective: Vec<bool>,
    /// Partner mass per entry that leaves the data or reaches a dead state.
    pub leak: Vec<f64>,
    pub ok_group: Vec<bool>,
    /// True when some initial state has no usable entry: the least-leaking
    /// entries are used instead of exactly feasible ones.
    pub restoration: bool,
}

impl Support {
    pub fn covers_initial_states(&self, d0: &[f64]) -> bool {
        covers(&self.live, d0)
    }
}

fn covers(live: &[bool], d0: &[f64]) -> bool {
    d0.iter().zip(live).all(|(&p, &l)| p == 0.0 || l)
}

fn group_ok(view: &View, live: &[bool], g: usize) -> bool {
    let grp = &view.data.groups[g];
    view.mass[g] > 0.0 && (grp.done || live[grp.s_next])
}

fn entry_leaks(view: &View, live: &[bool]) -> (Vec<bool>, Vec<f64>, Vec<bool>) {
    let ok: Vec<bool> = (0..view.data.groups.len()).map(|g| group_ok(view, live, g)).collect();
    let mut leak = view.partner_leak.clone();
    let mut any_ok = vec![false; leak.len()];
    for (e, entry) in view.entries.entries.iter().enumerate() {
        for &g in &entry.groups {
            if ok[g] {
                any_ok[e] = true;
            } else if view.mass[g] > 0.0 {
                leak[e] += view.mass[g] / entry.count as f64;
            }
        }
    }
    (ok, leak, any_ok)
}

/// Entries with leak at most `tol`, pruned to a closed set.
pub fn feasible_support(view: &View, tol: f64) -> Support {
    let n = view.data.meta.n_states;
    let mut live = view.data.observed.clone();
    loop {
        let (ok, leak, any_ok) = entry_leaks(view, &live);
        let effective: Vec<bool> = leak.iter().zip(&any_ok).map(|(&l, &a)| a && l <= tol).collect();
        let mut next = vec![false; n];
        for (e, entry) in view.entries.entries.iter().enumerate() {
            if effective[e] {
                next[entry.s] = true;
            }
        }
        if next == live {
            return Support {
                restoration: !covers(&live, &view.data.d0),
                live,
                effective,
                leak,
                ok_group: ok,
            };
        }
        live = next;
    }
}

/// Least-leaking entries per state (within `tol` of the best).
pub fn restoration_support(view: &View, tol: f64) -> Support {
    let n = view.data.meta.n_states;
    let mut live = view.data.observed.clone();
    loop {
        let (ok, leak, any_ok) = entry_leaks(view, &live);
        let mut best = vec![f64::INFINITY; n];
        for (e, entry) in view.entries.entries.iter().enumerate() {
            if any_ok[e] {
                best[entry.s] = best[entry.s].min(leak[e]);
            }
        }
        let effective: Vec<bool> = view
            .entries
            .entries
            .iter()
            .enumerate()
            .map(|(e, entry)| any_ok[e] && leak[e] <= best[entry.s] + tol)
            .collect();
        let next: Vec<bool> = (0..n).map(|s| best[s].is_finite()).collect();
        if next == live {
            return Support {
                live,
                effective,
                leak,
                ok_group: ok,
                restoration: true,
            };
        }
        live = next;
    }
}

/// Dual variables live on the support's live states.
#[derive(Debug, Clone, PartialEq)]
pub struct Variables {
    pub var_of: Vec<Option<usize>>,
    pub state_of: Vec<usize>,
}

impl Variables {
    pub fn new(live: &[bool]) -> Self {
        let mut var_of = vec![None; live.len()];
        let mut state_of = vec![];
        for (s, &l) in live.iter().enumerate() {
            if l {
                var_of[s] = Some(state_of.len());
                state_of.push(s);
            }
        }
        Variables { var_of, state_of }
    }

    pub fn len(&self) -> usize {
        self.state_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.state_of.is_empty()
    }

    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        self.state_of.iter().map(|&s| full[s]).collect()
    }

    pub fn expand(&self, vars: &[f64], n_states: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_states];
        for (v, &s) in self.state_of.iter().enumerate() {
            out[s] = vars[v];
        }
        out
    }
}

fn linear_term(data: &GroupedData, vars: &Variables) -> Vec<f64> {
    let gamma = data.meta.gamma;
    vars.state_of.iter().map(|&s| (1.0 - gamma) * data.d0[s]).collect()
}

/// One term per effective entry with weight `n(s,a_i)/|D|` and advantage equal
/// to the mass-weighted mean of the group advantages (the expectation over the
/// current partners and the empirical successor distribution).
pub fn aggregated_problem(view: &View, support: &Support, vars: &Variables, alpha: f64) -> (DualProblem, Vec<Option<usize>>) {
    let data = view.data;
    let gamma = data.meta.gamma;
    let mut terms = Vec::new();
    let mut term_of = vec![None; view.entries.entries.len()];
    for (e, entry) in view.entries.entries.iter().enumerate() {
        if !support.effective[e] {
            continue;
        }
        let groups: Vec<usize> = entry.groups.iter().copied().filter(|&g| support.ok_group[g]).collect();
        let total: f64 = groups.iter().map(|&g| view.mass[g]).sum();
        let mut coeffs = BTreeMap::new();
        *coeffs.entry(vars.var_of[entry.s].expect("live state")).or_insert(0.0) -= 1.0;
        let mut offset = 0.0;
        for &g in &groups {
            let share = view.mass[g] / total;
            offset += share * view.base[g];
            let grp = &data.groups[g];
            if !grp.done && gamma > 0.0 {
                *coeffs.entry(vars.var_of[grp.s_next].expect("live successor")).or_insert(0.0) += gamma * share;
            }
        }
        term_of[e] = Some(terms.len());
        terms.push(Term {
            weight: entry.count as f64 / data.n_records as f64,
            offset,
            coeffs: coeffs.into_iter().collect(),
            source: vars.var_of[entry.s].expect("live state"),
        });
    }
    (
        DualProblem {
            n: vars.len(),
            linear: linear_term(data, vars),
            terms,
            alpha,
        },
        term_of,
    )
}

/// One term per usable group, weighted by `weight[g]`.
pub fn per_sample_problem(view: &View, support: &Support, vars: &Variables, weight: &[f64], alpha: f64) -> DualProblem {
    let data = view.data;
    let gamma = data.meta.gamma;
    let mut terms = Vec::new();
    for (e, entry) in view.entries.entries.iter().enumerate() {
        if !support.effective[e] {
            continue;
        }
        for &g in &entry.groups {
            if !support.ok_group[g] || weight[g] == 0.0 {
                continue;
            }
            let grp = &data.groups[g];
            let mut coeffs = BTreeMap::new();
            *coeffs.entry(vars.var_of[grp.s].expect("live state")).or_insert(0.0) -= 1.0;
            if !grp.done && gamma > 0.0 {
                *coeffs.entry(vars.var_of[grp.s_next].expect("live successor")).or_insert(0.0) += gamma;
            }
            terms.push(Term {
                weight: weight[g],
                offset: view.base[g],
                coeffs: coeffs.into_iter().collect(),
                source: vars.var_of[grp.s].expect("live state"),
            });
        }
    }
    DualProblem {
        n: vars.len(),
        linear: linear_term(data, vars),
        terms,
        alpha,
    }
}

/// True when an effective entry can end an episode, which rules out the
/// shift-invariant stable form.
pub fn support_has_done(view: &View, support: &Support) -> bool {
    view.data.meta.gamma > 0.0
        && view.entries.entries.iter().enumerate().any(|(e, entry)| {
            support.effective[e]
                && entry
                    .groups
                    .iter()
                    .any(|&g| support.ok_group[g] && view.data.groups[g].done)
        })
}
