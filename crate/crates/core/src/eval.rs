//! Returns, out-of-distribution joint-action rates, and report tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::EmpiricalDistribution;
use crate::envs::{Bridge, Move, Pos};
use crate::error::{Error, Result};
use crate::mmdp::{finite_horizon_values, FactorizedPolicy, TabularMmdp};
use crate::random::sample_index;

/// Exact expected undiscounted return over `horizon` steps from `p0`.
pub fn episodic_return(mmdp: &TabularMmdp, policy: &FactorizedPolicy, horizon: usize) -> Result<f64> {
    if horizon == 0 {
        return Err(Error::invalid("horizon must be at least 1"));
    }
    let v = finite_horizon_values(mmdp, &policy.to_joint(mmdp.joint()), horizon)?;
    Ok(mmdp.p0().iter().zip(&v).map(|(p, v)| p * v).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarlo {
    pub mean: f64,
    /// Standard error of the mean over episodes.
    pub se: f64,
    pub episodes: usize,
}

/// Simulated undiscounted returns; episodes end at a terminal state or after
/// `horizon` steps.
pub fn monte_carlo_return(
    mmdp: &TabularMmdp,
    policy: &FactorizedPolicy,
    horizon: usize,
    episodes: usize,
    seed: u64,
) -> Result<MonteCarlo> {
    if episodes < 2 {
        return Err(Error::invalid("at least two episodes are needed for a standard error"));
    }
    let joint = policy.to_joint(mmdp.joint());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut s = sample_index(&mut rng, mmdp.p0());
        let mut total = 0.0;
        for _ in 0..horizon {
            if mmdp.is_terminal(s) {
                break;
            }
            let a = sample_index(&mut rng, joint.row(s));
            total += mmdp.reward(s, a);
            let succ = mmdp.successors(s, a);
            let probs: Vec<f64> = succ.iter().map(|&(_, p)| p).collect();
            s = succ[sample_index(&mut rng, &probs)].0;
        }
        returns.push(total);
    }
    let (mean, se) = mean_se(&returns);
    Ok(MonteCarlo {
        mean,
        se: se.expect("at least two episodes"),
        episodes,
    })
}

/// Sample mean and standard error; the error is `None` for a single value.
pub fn mean_se(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OodMode {
    /// Exact sum over states and joint actions.
    SupportExact,
    /// Fraction of `draws` sampled `(s, a)` pairs outside the data.
    Sampled { draws: usize, seed: u64 },
}

/// `Pr_{s ~ d^D, a ~ Π_i π_i(·|s)} [d^D(s, a) = 0]`.
pub fn ood_rate(policy: &FactorizedPolicy, dist: &EmpiricalDistribution, mode: OodMode) -> Result<f64> {
    if policy.n_states() != dist.n_states || policy.sizes() != dist.joint.sizes() {
        return Err(Error::invalid("policy shape does not match the dataset"));
    }
    let states = dist.state_marginal();
    let nj = dist.joint.len();
    match mode {
        OodMode::SupportExact => {
            let mut total = 0.0;
            for (s, &ps) in states.iter().enumerate() {
                if ps == 0.0 {
                    continue;
                }
                let out: f64 = (0..nj)
                    .filter(|&a| dist.count(s, a) == 0)
                    .map(|a| policy.joint_prob(&dist.joint, s, a))
                    .sum();
                total += ps * out;
            }
            Ok(total)
        }
        OodMode::Sampled { draws, seed } => {
            if draws == 0 {
                return Err(Error::invalid("draws must be positive"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut hits = 0usize;
            let mut actions = vec![0; policy.n_agents()];
            for _ in 0..draws {
                let s = sample_index(&mut rng, &states);
                for (i, a) in actions.iter_mut().enumerate() {
                    *a = sample_index(&mut rng, policy.row(i, s));
                }
                if dist.count(s, dist.joint.index(&actions)?) == 0 {
                    hits += 1;
                }
            }
            Ok(hits as f64 / draws as f64)
        }
    }
}

/// One trained policy evaluated on its environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub env: String,
    pub dataset: String,
    pub algo: String,
    pub seed: u64,
    pub alpha: Option<f64>,
    pub episodic_return: f64,
    pub optimal_return: Option<f64>,
    pub monte_carlo: Option<MonteCarlo>,
    pub ood_rate: f64,
    /// Joint action distribution at the (single) start state.
    pub start_joint: Vec<f64>,
    /// Wall-clock training time; only filled when timings are requested.
    pub train_secs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub env: String,
    pub dataset: String,
    pub algo: String,
    pub runs: usize,
    pub return_mean: f64,
    /// Standard error over runs; `None` for a single run.
    pub return_se: Option<f64>,
    pub ood_mean: f64,
    pub start_joint_mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub runs: Vec<RunRecord>,
    pub summary: Vec<SummaryRow>,
}

/// Groups runs by `(env, dataset, algo)` in sorted order.
pub fn make_report(runs: Vec<RunRecord>) -> EvalReport {
    let mut groups: BTreeMap<(String, String, String), Vec<&RunRecord>> = BTreeMap::new();
    for r in &runs {
        groups
            .entry((r.env.clone(), r.dataset.clone(), r.algo.clone()))
            .or_default()
            .push(r);
    }
    let summary = groups
        .into_iter()
        .map(|((env, dataset, algo), rs)| {
            let returns: Vec<f64> = rs.iter().map(|r| r.episodic_return).collect();
            let (return_mean, return_se) = mean_se(&returns);
            let ood_mean = rs.iter().map(|r| r.ood_rate).sum::<f64>() / rs.len() as f64;
            let width = rs.iter().map(|r| r.start_joint.len()).max().unwrap_or(0);
            let mut start_joint_mean = vec![0.0; width];
            for r in &rs {
                for (m, x) in start_joint_mean.iter_mut().zip(&r.start_joint) {
                    *m += x / rs.len() as f64;
                }
            }
            SummaryRow {
                env,
                dataset,
                algo,
                runs: rs.len(),
                return_mean,
                return_se,
                ood_mean,
                start_joint_mean,
            }
        })
        .collect();
    EvalReport { runs, summary }
}

impl EvalReport {
    /// One line per summary row. `joint_labels` names the start-state joint
    /// actions shown (all of them when the game is small).
    pub fn render(&self, joint_labels: &[String]) -> String {
        let mut out = String::new();
        let show_joint = !joint_labels.is_empty() && joint_labels.len() <= 9;
        let _ = write!(out, "{:<12} {:<8} {:<10} {:>4} {:>18} {:>8}", "env", "dataset", "algo", "runs", "return", "ood");
        if show_joint {
            for l in joint_labels {
                let _ = write!(out, " {l:>7}");
            }
        }
        out.push('\n');
        for row in &self.summary {
            let ret = match row.return_se {
                Some(se) => format!("{:.4} ± {:.4}", row.return_mean, se),
                None => format!("{:.4}", row.return_mean),
            };
            let _ = write!(
                out,
                "{:<12} {:<8} {:<10} {:>4} {:>18} {:>8.4}",
                row.env, row.dataset, row.algo, row.runs, ret, row.ood_mean
            );
            if show_joint {
                for p in &row.start_joint_mean {
                    let _ = write!(out, " {p:>7.4}");
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn runs_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(vec![]);
        let csv_err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
        w.write_record([
            "env",
            "dataset",
            "algo",
            "seed",
            "alpha",
            "episodic_return",
            "optimal_return",
            "mc_mean",
            "mc_se",
            "ood_rate",
            "start_joint",
        ])
        .map_err(csv_err)?;
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.runs {
            let joint = r.start_joint.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(" ");
            w.write_record([
                r.env.clone(),
                r.dataset.clone(),
                r.algo.clone(),
                r.seed.to_string(),
                opt(r.alpha),
                r.episodic_return.to_string(),
                opt(r.optimal_return),
                opt(r.monte_carlo.map(|m| m.mean)),
                opt(r.monte_carlo.map(|m| m.se)),
                r.ood_rate.to_string(),
                joint,
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn summary_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(vec![]);
        let csv_err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
        w.write_record(["env", "dataset", "algo", "runs", "return_mean", "return_se", "ood_mean", "start_joint_mean"])
            .map_err(csv_err)?;
        for r in &self.summary {
            let joint = r.start_joint_mean.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(" ");
            w.write_record([
                r.env.clone(),
                r.dataset.clone(),
                r.algo.clone(),
                r.runs.to_string(),
                r.return_mean.to_string(),
                r.return_se.map(|v| v.to_string()).unwrap_or_default(),
                r.ood_mean.to_string(),
                joint,
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
        .0
}

/// Most likely move of `agent` in every cell while the other agent sits at
/// `other`. `#` marks walls, `0`/`1` the other agent, blank an impossible state.
pub fn render_bridge_policy(bridge: &Bridge, policy: &FactorizedPolicy, agent: usize, other: Pos) -> String {
    let mut out = String::new();
    for r in 0..bridge.height() {
        for c in 0..bridge.width() {
            let ch = match bridge.cell_at(r, c) {
                None => '#',
                Some(cell) if other == Pos::Cell(cell) => char::from(b'0' + (1 - agent) as u8),
                Some(cell) => {
                    let mut pos = [Pos::Done, Pos::Done];
                    pos[agent] = Pos::Cell(cell);
                    pos[1 - agent] = other;
                    match bridge.state_of(pos) {
                        Some(s) => Move::ALL[argmax(policy.row(agent, s))].arrow(),
                        None => ' ',
                    }
                }
            };
            out.push(ch);
        }
        out.push('\n');
    }
    out
}

/// Greedy rollout from the start state, one frame per step.
pub fn render_bridge_rollout(bridge: &Bridge, policy: &FactorizedPolicy, max_steps: usize) -> String {
    let mut out = String::new();
    let mut s = bridge.start_state();
    for t in 0..=max_steps {
        let pos = bridge.positions(s);
        let moves = [0, 1].map(|i| Move::ALL[argmax(policy.row(i, s))]);
        let _ = writeln!(out, "t={t}");
        for r in 0..bridge.height() {
            for c in 0..bridge.width() {
                let ch = match bridge.cell_at(r, c) {
                    None => '#',
                    Some(cell) if pos[0] == Pos::Cell(cell) => '0',
                    Some(cell) if pos[1] == Pos::Cell(cell) => '1',
                    Some(_) => '.',
                };
                out.push(ch);
            }
            out.push('\n');
        }
        if bridge.mmdp.is_terminal(s) {
            out.push_str("both agents home\n");
            break;
        }
        let _ = writeln!(out, "moves: {} {}", moves[0].name(), moves[1].name());
        s = bridge.next_state(s, moves);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::empirical_distribution;
    use crate::envs::{build_bridge, matrix_dataset, penalty_xor, BridgeSpec, MatrixRecipe};

    #[test]
    fn coordinated_matrix_return() {
        let m = penalty_xor();
        let pi = FactorizedPolicy::deterministic(1, &[2, 2], &[vec![0], vec![1]]).unwrap();
        assert_eq!(episodic_return(&m, &pi, 1).unwrap(), 1.0);
    }

    #[test]
    fn uniform_on_dataset_b_is_half_ood() {
        let m = penalty_xor();
        let dist = empirical_distribution(&matrix_dataset(&m, MatrixRecipe::B), &m.meta()).unwrap();
        let pi = FactorizedPolicy::uniform(1, &[2, 2]);
        assert_eq!(ood_rate(&pi, &dist, OodMode::SupportExact).unwrap(), 0.5);
        let sampled = ood_rate(&pi, &dist, OodMode::Sampled { draws: 100_000, seed: 3 }).unwrap();
        assert!((sampled - 0.5).abs() < 3.0 * (0.25f64 / 1e5).sqrt());
    }

    #[test]
    fn single_run_has_no_standard_error() {
        let run = RunRecord {
            env: "penalty-xor".into(),
            dataset: "c".into(),
            algo: "bc".into(),
            seed: 0,
            alpha: None,
            episodic_return: 0.1,
            optimal_return: Some(1.0),
            monte_carlo: None,
            ood_rate: 0.1,
            start_joint: vec![0.25; 4],
            train_secs: None,
        };
        let rep = make_report(vec![run]);
        assert_eq!(rep.summary[0].return_se, None);
        assert!(rep.summary_csv().unwrap().lines().nth(1).unwrap().contains(",,"));
    }

    #[test]
    fn rollout_reaches_home_under_mode_policy() {
        let b = build_bridge(&BridgeSpec::default()).unwrap();
        let joint = crate::envs::bridge_mode_policy(&b, [Move::Left, Move::Left]).unwrap();
        // mode policies are deterministic joint tables; factor them per agent
        let nj = b.mmdp.n_joint();
        let n = b.mmdp.n_states();
        let actions: Vec<Vec<usize>> = (0..2)
            .map(|i| (0..n).map(|s| b.mmdp.joint().component(argmax(&joint.row(s)[..nj]), i)).collect())
            .collect();
        let pi = FactorizedPolicy::deterministic(n, &[5, 5], &actions).unwrap();
        let text = render_bridge_rollout(&b, &pi, 20);
        assert!(text.contains("both agents home"));
        assert!((episodic_return(&b.mmdp, &pi, 50).unwrap() + 0.8).abs() < 1e-12);
        let grid = render_bridge_policy(&b, &pi, 0, b.positions(b.start_state())[1]);
        assert_eq!(grid.lines().count(), b.height());
    }
}
