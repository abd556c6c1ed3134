//! File formats: MMDP JSON, JSON-lines datasets with a sidecar, policy JSON
//! and the run manifest embedded in every artifact.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetMeta, OfflineDataset, Transition};
use crate::error::{Error, Result};
use crate::mmdp::{FactorizedPolicy, MmdpParts, TabularMmdp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Hex SHA-256 of the canonical JSON of the resolved configuration.
    pub config_hash: String,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub version: String,
    /// Only recorded on request, so reruns stay byte-identical by default.
    #[serde(default)]
    pub wall_clock_secs: Option<f64>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn json_err(context: impl Into<String>) -> impl FnOnce(serde_json::Error) -> Error {
    let context = context.into();
    move |source| Error::Json { context, source }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(json_err(path.display().to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(json_err(path.display().to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MmdpDocument {
    pub n_agents: usize,
    pub states: Vec<String>,
    pub actions: Vec<Vec<String>>,
    /// `[s, joint_a, s', p]`
    pub transition: Vec<(usize, usize, usize, f64)>,
    /// `[s, joint_a, r]`; omitted entries are zero.
    pub reward: Vec<(usize, usize, f64)>,
    pub gamma: f64,
    pub p0: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub terminals: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
}

impl MmdpDocument {
    pub fn from_mmdp(mmdp: &TabularMmdp) -> Self {
        let nj = mmdp.n_joint();
        let mut transition = Vec::new();
        let mut reward = Vec::new();
        for s in 0..mmdp.n_states() {
            for a in 0..nj {
                for &(next, p) in mmdp.successors(s, a) {
                    transition.push((s, a, next, p));
                }
                let r = mmdp.reward(s, a);
                if r.to_bits() != 0 {
                    reward.push((s, a, r));
                }
            }
        }
        MmdpDocument {
            n_agents: mmdp.n_agents(),
            states: mmdp.state_names().to_vec(),
            actions: mmdp.action_names().to_vec(),
            transition,
            reward,
            gamma: mmdp.gamma(),
            p0: mmdp.p0().to_vec(),
            terminals: (0..mmdp.n_states()).filter(|&s| mmdp.is_terminal(s)).collect(),
            horizon: mmdp.horizon(),
        }
    }

    pub fn into_mmdp(self) -> Result<TabularMmdp> {
        if self.n_agents != self.actions.len() {
            return Err(Error::invalid(format!(
                "n_agents = {} but {} action lists given",
                self.n_agents,
                self.actions.len()
            )));
        }
        let n = self.states.len();
        let nj: usize = self.actions.iter().map(Vec::len).product();
        if nj == 0 {
            return Err(Error::invalid("every agent needs at least one action"));
        }
        let mut transitions = vec![Vec::new(); n * nj];
        for &(s, a, next, p) in &self.transition {
            if s >= n || a >= nj {
                return Err(Error::invalid(format!("transition entry [{s}, {a}, {next}, {p}] out of range")));
            }
            transitions[s * nj + a].push((next, p));
        }
        let mut reward = vec![0.0; n * nj];
        for &(s, a, r) in &self.reward {
            if s >= n || a >= nj {
                return Err(Error::invalid(format!("reward entry [{s}, {a}, {r}] out of range")));
            }
            reward[s * nj + a] = r;
        }
        let mut terminals = vec![false; n];
        for &s in &self.terminals {
            if s >= n {
                return Err(Error::invalid(format!("terminal state {s} out of range")));
            }
            terminals[s] = true;
        }
        TabularMmdp::from_parts(MmdpParts {
            state_names: self.states,
            action_names: self.actions,
            transitions,
            reward,
            gamma: self.gamma,
            p0: self.p0,
            terminals,
            horizon: self.horizon,
        })
    }
}

pub fn mmdp_to_string(mmdp: &TabularMmdp) -> String {
    let mut s = serde_json::to_string(&MmdpDocument::from_mmdp(mmdp)).expect("MMDP serializes");
    s.push('\n');
    s
}

pub fn mmdp_from_str(text: &str) -> Result<TabularMmdp> {
    let doc: MmdpDocument = serde_json::from_str(text).map_err(json_err("MMDP document"))?;
    doc.into_mmdp()
}

pub fn save_mmdp(mmdp: &TabularMmdp, path: &Path) -> Result<()> {
    fs::write(path, mmdp_to_string(mmdp)).map_err(io_err(path))
}

pub fn load_mmdp(path: &Path) -> Result<TabularMmdp> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    mmdp_from_str(&text).map_err(|e| match e {
        Error::Invalid(msg) => Error::Invalid(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub initial_states: Vec<usize>,
    #[serde(default)]
    pub meta: DatasetMeta,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<RunManifest>,
}

/// `data.jsonl` → `data.meta.json`.
pub fn sidecar_path(dataset_path: &Path) -> PathBuf {
    dataset_path.with_extension("meta.json")
}

pub fn dataset_to_jsonl(dataset: &OfflineDataset) -> String {
    let mut out = String::new();
    for x in &dataset.records {
        out.push_str(&serde_json::to_string(x).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn dataset_from_jsonl(text: &str, sidecar: DatasetSidecar) -> Result<OfflineDataset> {
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let x: Transition = serde_json::from_str(line).map_err(json_err(format!("dataset line {}", lineno + 1)))?;
        records.push(x);
    }
    Ok(OfflineDataset::new(records, sidecar.initial_states).with_meta(sidecar.meta))
}

pub fn save_dataset(dataset: &OfflineDataset, path: &Path, manifest: Option<RunManifest>) -> Result<()> {
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    file.write_all(dataset_to_jsonl(dataset).as_bytes()).map_err(io_err(path))?;
    let sidecar = DatasetSidecar {
        initial_states: dataset.initial_states.clone(),
        meta: dataset.meta.clone(),
        manifest,
    };
    write_json(&sidecar_path(path), &sidecar)
}

pub fn load_dataset(path: &Path) -> Result<OfflineDataset> {
    let side = sidecar_path(path);
    let sidecar: DatasetSidecar = read_json(&side)?;
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line.map_err(io_err(path))?);
        text.push('\n');
    }
    dataset_from_jsonl(&text, sidecar)
}

/// `agent name → state name → action name → probability`.
pub type PolicyTables = IndexMap<String, IndexMap<String, IndexMap<String, f64>>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDocument {
    pub policy: PolicyTables,
    /// `(agent, state)` rows with no dataset support, filled uniformly.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fallback_rows: Vec<(String, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<RunManifest>,
}

pub fn agent_name(i: usize) -> String {
    format!("agent_{i}")
}

impl PolicyDocument {
    pub fn from_policy(mmdp: &TabularMmdp, policy: &FactorizedPolicy, fallback: &[(usize, usize)]) -> Self {
        let mut tables = IndexMap::new();
        for i in 0..policy.n_agents() {
            let mut per_state = IndexMap::new();
            for (s, sname) in mmdp.state_names().iter().enumerate() {
                let row = policy
                    .row(i, s)
                    .iter()
                    .zip(&mmdp.action_names()[i])
                    .map(|(&p, a)| (a.clone(), p))
                    .collect();
                per_state.insert(sname.clone(), row);
            }
            tables.insert(agent_name(i), per_state);
        }
        PolicyDocument {
            policy: tables,
            fallback_rows: fallback
                .iter()
                .map(|&(i, s)| (agent_name(i), mmdp.state_names()[s].clone()))
                .collect(),
            manifest: None,
        }
    }

    pub fn to_policy(&self, mmdp: &TabularMmdp) -> Result<FactorizedPolicy> {
        let n = mmdp.n_states();
        let sizes = mmdp.joint().sizes().to_vec();
        if self.policy.len() != sizes.len() {
            return Err(Error::invalid(format!(
                "policy has {} agents, MMDP has {}",
                self.policy.len(),
                sizes.len()
            )));
        }
        let mut tables = Vec::new();
        for (i, &ni) in sizes.iter().enumerate() {
            let per_state = self
                .policy
                .get(&agent_name(i))
                .ok_or_else(|| Error::invalid(format!("policy lacks {}", agent_name(i))))?;
            let mut table = vec![f64::NAN; n * ni];
            for (sname, row) in per_state {
                let s = mmdp
                    .state_index(sname)
                    .ok_or_else(|| Error::invalid(format!("unknown state {sname:?} in policy")))?;
                for (aname, &p) in row {
                    let a = mmdp.action_names()[i]
                        .iter()
                        .position(|x| x == aname)
                        .ok_or_else(|| Error::invalid(format!("unknown action {aname:?} for {}", agent_name(i))))?;
                    table[s * ni + a] = p;
                }
            }
            if let Some(k) = table.iter().position(|p| p.is_nan()) {
                return Err(Error::invalid(format!(
                    "policy of {} misses state {:?}, action {:?}",
                    agent_name(i),
                    mmdp.state_names()[k / ni],
                    mmdp.action_names()[i][k % ni]
                )));
            }
            tables.push(table);
        }
        FactorizedPolicy::from_tables(n, &sizes, tables)
    }
}

pub fn save_policy(
    path: &Path,
    mmdp: &TabularMmdp,
    policy: &FactorizedPolicy,
    fallback: &[(usize, usize)],
    manifest: Option<RunManifest>,
) -> Result<()> {
    let mut doc = PolicyDocument::from_policy(mmdp, policy, fallback);
    doc.manifest = manifest;
    write_json(path, &doc)
}

pub fn load_policy(path: &Path, mmdp: &TabularMmdp) -> Result<FactorizedPolicy> {
    let doc: PolicyDocument = read_json(path)?;
    doc.to_policy(mmdp)
}
