//! Dataset grouped into distinct `(s, a, r, s', done)` transitions, with the
//! per-agent `(s, a_i)` entries each group contributes to.

use std::collections::BTreeMap;

use crate::dataset::{fit_data_policies, DataPolicyTables, OfflineDataset};
use crate::error::{Error, Result};
use crate::mmdp::MmdpMeta;

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub s: usize,
    pub joint: usize,
    pub s_next: usize,
    pub done: bool,
    pub reward: f64,
    pub count: usize,
}

/// Entries `(s, a)` for one agent's individual actions, or for joint actions.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub s: usize,
    pub action: usize,
    pub count: usize,
    pub groups: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntrySet {
    pub n_actions: usize,
    pub entries: Vec<Entry>,
    /// `index[s * n_actions + a]`
    pub index: Vec<Option<usize>>,
}

impl EntrySet {
    fn build(n_states: usize, n_actions: usize, groups: &[Group], action_of: impl Fn(&Group) -> usize) -> Self {
        let mut index = vec![None; n_states * n_actions];
        let mut entries: Vec<Entry> = Vec::new();
        for (g, grp) in groups.iter().enumerate() {
            let a = action_of(grp);
            let k = grp.s * n_actions + a;
            let e = *index[k].get_or_insert_with(|| {
                entries.push(Entry {
                    s: grp.s,
                    action: a,
                    count: 0,
                    groups: vec![],
                });
                entries.len() - 1
            });
            entries[e].count += grp.count;
            entries[e].groups.push(g);
        }
        EntrySet {
            n_actions,
            entries,
            index,
        }
    }

    pub fn get(&self, s: usize, a: usize) -> Option<&Entry> {
        self.index[s * self.n_actions + a].map(|e| &self.entries[e])
    }
}

#[derive(Debug, Clone)]
pub struct GroupedData {
    pub meta: MmdpMeta,
    pub groups: Vec<Group>,
    pub record_group: Vec<usize>,
    pub n_records: usize,
    /// Empirical initial-state distribution from `D0`.
    pub d0: Vec<f64>,
    /// States that occur as `s` in some record.
    pub observed: Vec<bool>,
    pub tables: DataPolicyTables,
    /// Per-agent `(s, a_i)` entries.
    pub agent_entries: Vec<EntrySet>,
    /// `(s, a)` entries over joint actions.
    pub joint_entries: EntrySet,
}

impl GroupedData {
    pub fn new(meta: &MmdpMeta, dataset: &OfflineDataset) -> Result<Self> {
        let tables = fit_data_policies(dataset, meta)?;
        let mut keyed: BTreeMap<(usize, usize, usize, bool, u64), usize> = BTreeMap::new();
        let mut keys = Vec::with_capacity(dataset.len());
        for x in &dataset.records {
            let joint = meta.joint.index(&x.a)?;
            let key = (x.s, joint, x.s_next, x.done, x.r.to_bits());
            *keyed.entry(key).or_insert(0) += 1;
            keys.push(key);
        }
        let position: BTreeMap<_, usize> = keyed.keys().enumerate().map(|(i, k)| (*k, i)).collect();
        let groups: Vec<Group> = keyed
            .iter()
            .map(|(&(s, joint, s_next, done, r), &count)| Group {
                s,
                joint,
                s_next,
                done,
                reward: f64::from_bits(r),
                count,
            })
            .collect();
        let record_group = keys.iter().map(|k| position[k]).collect();
        let mut d0 = vec![0.0; meta.n_states];
        for &s in &dataset.initial_states {
            d0[s] += 1.0;
        }
        let total: f64 = d0.iter().sum();
        if total == 0.0 {
            return Err(Error::invalid("dataset has no initial states"));
        }
        d0.iter_mut().for_each(|x| *x /= total);
        let mut observed = vec![false; meta.n_states];
        for g in &groups {
            observed[g.s] = true;
        }
        let agent_entries = (0..meta.joint.n_agents())
            .map(|i| EntrySet::build(meta.n_states, meta.joint.size(i), &groups, |g| meta.joint.component(g.joint, i)))
            .collect();
        let joint_entries = EntrySet::build(meta.n_states, meta.joint.len(), &groups, |g| g.joint);
        Ok(GroupedData {
            meta: meta.clone(),
            groups,
            record_group,
            n_records: dataset.len(),
            d0,
            observed,
            tables,
            agent_entries,
            joint_entries,
        })
    }

    pub fn has_done(&self) -> bool {
        self.meta.gamma > 0.0 && self.groups.iter().any(|g| g.done)
    }
}
