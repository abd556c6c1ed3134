//! Behavior cloning and the joint-action DICE baseline with weighted
//! behavior-cloning extraction.

use serde::{Deserialize, Serialize};

use crate::dataset::OfflineDataset;
use crate::error::{Error, Result};
use crate::mmdp::{FactorizedPolicy, MmdpMeta};
use crate::solver::data::GroupedData;
use crate::solver::dual::{Form, InnerConfig};
use crate::solver::support::{self, Variables, View};
use crate::solver::{restrict_to_reachable, solve_dual, ObjectiveChoice};

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineOutput {
    pub policy: FactorizedPolicy,
    /// `(agent, state)` rows filled in without data (uniform) or, for the
    /// joint baseline, copied from behavior cloning.
    pub fallback_rows: Vec<(usize, usize)>,
}

/// Per-agent maximum-likelihood tables `π_i^D`; unseen states are uniform.
pub fn bc_train(meta: &MmdpMeta, dataset: &OfflineDataset) -> Result<BaselineOutput> {
    let data = GroupedData::new(meta, dataset)?;
    Ok(bc_from(&data))
}

fn bc_from(data: &GroupedData) -> BaselineOutput {
    let meta = &data.meta;
    let sizes = meta.joint.sizes().to_vec();
    let mut fallback = vec![];
    let tables = sizes
        .iter()
        .enumerate()
        .map(|(i, &ni)| {
            let mut t = Vec::with_capacity(meta.n_states * ni);
            for s in 0..meta.n_states {
                match data.tables.marginal_row(i, s) {
                    Some(row) => t.extend(row),
                    None => {
                        fallback.push((i, s));
                        t.extend(std::iter::repeat_n(1.0 / ni as f64, ni));
                    }
                }
            }
            t
        })
        .collect();
    BaselineOutput {
        policy: FactorizedPolicy::from_tables(meta.n_states, &sizes, tables).expect("normalized rows"),
        fallback_rows: fallback,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptiDiceConfig {
    pub alpha: f64,
    pub objective: ObjectiveChoice,
    pub inner: InnerConfig,
}

impl Default for OptiDiceConfig {
    fn default() -> Self {
        OptiDiceConfig {
            alpha: 1.0,
            objective: ObjectiveChoice::Auto,
            inner: InnerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptiDiceOutput {
    pub baseline: BaselineOutput,
    /// `ν(s)` over joint actions, zero outside the solved states.
    pub nu: Vec<f64>,
    /// `w(s, a) = exp(e(s, a)/α − 1)` over joint actions; zero off the data.
    pub corrections: Vec<f64>,
}

/// Joint `ν(s)` minimization (every partner weight is one), then
/// `π_i(a_i|s) ∝ Σ_{a_{-i}} w(s, a) n(s, a)`.
pub fn optidice_train(meta: &MmdpMeta, dataset: &OfflineDataset, cfg: &OptiDiceConfig) -> Result<OptiDiceOutput> {
    if !(cfg.alpha > 0.0 && cfg.alpha.is_finite()) {
        return Err(Error::invalid("alpha must be positive"));
    }
    let alpha = cfg.alpha;
    let data = GroupedData::new(meta, dataset)?;
    let view = View {
        data: &data,
        entries: &data.joint_entries,
        mass: data.groups.iter().map(|g| g.count as f64).collect(),
        base: data.groups.iter().map(|g| g.reward).collect(),
        partner_leak: vec![0.0; data.joint_entries.entries.len()],
    };
    let mut sup = support::feasible_support(&view, 0.0);
    if sup.restoration {
        return Err(Error::invalid(
            "an initial state has no action whose observed successors stay inside the data",
        ));
    }
    restrict_to_reachable(&view, &mut sup);
    let vars = Variables::new(&sup.live);
    let form = match cfg.objective {
        ObjectiveChoice::Stable => Form::Stable,
        ObjectiveChoice::Unstable => Form::Unstable,
        ObjectiveChoice::Auto if support::support_has_done(&view, &sup) => Form::Unstable,
        ObjectiveChoice::Auto => Form::Stable,
    };
    let (problem, term_of) = support::aggregated_problem(&view, &sup, &vars, alpha);
    let solved = solve_dual(&problem, &vars, meta.n_states, meta.gamma, form, None, &cfg.inner)?;
    let e = problem.advantages(&solved.solution.nu);
    let nj = meta.joint.len();
    let mut w = vec![0.0; meta.n_states * nj];
    for (k, entry) in data.joint_entries.entries.iter().enumerate() {
        if let Some(t) = term_of[k] {
            w[entry.s * nj + entry.action] = (e[t] / alpha - 1.0).exp();
        }
    }

    let bc = bc_from(&data);
    let sizes = meta.joint.sizes().to_vec();
    let mut fallback = bc.fallback_rows.clone();
    let mut tables: Vec<Vec<f64>> = (0..sizes.len()).map(|i| bc.policy.table(i).to_vec()).collect();
    for s in 0..meta.n_states {
        if !data.observed[s] {
            continue;
        }
        for (i, &ni) in sizes.iter().enumerate() {
            let mut row = vec![0.0; ni];
            for entry in data.joint_entries.entries.iter().filter(|x| x.s == s) {
                row[meta.joint.component(entry.action, i)] += w[s * nj + entry.action] * entry.count as f64;
            }
            let z: f64 = row.iter().sum();
            if z > 0.0 && z.is_finite() {
                tables[i][s * ni..(s + 1) * ni].iter_mut().zip(&row).for_each(|(t, r)| *t = r / z);
            } else {
                fallback.push((i, s));
            }
        }
    }
    fallback.sort_unstable();
    Ok(OptiDiceOutput {
        baseline: BaselineOutput {
            policy: FactorizedPolicy::from_tables(meta.n_states, &sizes, tables)?,
            fallback_rows: fallback,
        },
        nu: solved.nu_full,
        corrections: w,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{matrix_dataset, penalty_xor, xor, MatrixRecipe};

    #[test]
    fn bc_on_dataset_c() {
        let m = penalty_xor();
        let out = bc_train(&m.meta(), &matrix_dataset(&m, MatrixRecipe::C)).unwrap();
        let j = out.policy.to_joint(m.joint());
        let want = [4.0 / 9.0, 2.0 / 9.0, 2.0 / 9.0, 1.0 / 9.0];
        for (a, b) in j.row(0).iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(out.fallback_rows.is_empty());
    }

    #[test]
    fn wbc_is_weighted_count_normalization() {
        let m = penalty_xor();
        let out = optidice_train(&m.meta(), &matrix_dataset(&m, MatrixRecipe::C), &OptiDiceConfig::default()).unwrap();
        // one state, γ = 0: w ∝ exp(r/α)
        let (aa, ab, ba) = (1.0, 1f64.exp(), 1f64.exp());
        let p1a = (aa + ab) / (aa + ab + ba);
        assert!((out.baseline.policy.prob(0, 0, 0) - p1a).abs() < 1e-9);
        let w = &out.corrections;
        assert!((w[1] / w[0] - 1f64.exp()).abs() < 1e-9);
        assert_eq!(w[3], 0.0);
    }

    #[test]
    fn small_alpha_xor_is_uniform() {
        let m = xor();
        let cfg = OptiDiceConfig {
            alpha: 0.01,
            ..Default::default()
        };
        let out = optidice_train(&m.meta(), &matrix_dataset(&m, MatrixRecipe::C), &cfg).unwrap();
        for i in 0..2 {
            assert!((out.baseline.policy.prob(i, 0, 0) - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn single_mode_dataset_is_recovered() {
        let m = penalty_xor();
        let out = optidice_train(&m.meta(), &matrix_dataset(&m, MatrixRecipe::A), &OptiDiceConfig::default()).unwrap();
        assert_eq!(out.baseline.policy.prob(0, 0, 0), 1.0);
        assert_eq!(out.baseline.policy.prob(1, 0, 1), 1.0);
    }

    #[test]
    fn plain_xor_weighted_cloning_mixes_the_modes() {
        let m = xor();
        let out = optidice_train(&m.meta(), &matrix_dataset(&m, MatrixRecipe::C), &OptiDiceConfig::default()).unwrap();
        let j = out.baseline.policy.to_joint(m.joint());
        assert!(j.prob(0, 0) + j.prob(0, 3) >= 0.45);
    }
}
