//! End-to-end matrix-game and Bridge pipelines with pass/fail checks.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{bc_train, optidice_train, OptiDiceConfig};
use crate::dataset::{empirical_distribution, OfflineDataset};
use crate::envs::{
    bridge_dataset, build_bridge, matrix_dataset, penalty_xor, BridgeRecipe, BridgeSpec, MatrixRecipe, Move,
};
use crate::error::{Error, Result};
use crate::eval::{episodic_return, make_report, ood_rate, EvalReport, OodMode, RunRecord};
use crate::mmdp::{optimal_finite_horizon, FactorizedPolicy, MmdpMeta, TabularMmdp};
use crate::nash::{self, NashReport};
use crate::solver::{train, Mode, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algo {
    #[serde(rename = "alberdice")]
    AlberDice,
    Bc,
    #[serde(rename = "optidice")]
    OptiDice,
}

impl Algo {
    pub const ALL: [Algo; 3] = [Algo::AlberDice, Algo::Bc, Algo::OptiDice];

    pub fn name(self) -> &'static str {
        match self {
            Algo::AlberDice => "alberdice",
            Algo::Bc => "bc",
            Algo::OptiDice => "optidice",
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algo::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown algorithm {s:?} (expected alberdice, bc or optidice)")))
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub policy: FactorizedPolicy,
    pub fallback_rows: Vec<(usize, usize)>,
    /// Only for the alternating solver.
    pub report: Option<TrainReport>,
    pub secs: f64,
}

/// Trains one algorithm. `cfg.alpha` also sets the joint baseline's α.
pub fn run_algo(
    algo: Algo,
    meta: &MmdpMeta,
    dataset: &OfflineDataset,
    cfg: &TrainConfig,
    oracle: Option<&TabularMmdp>,
) -> Result<Trained> {
    let t = Instant::now();
    let (policy, fallback_rows, report) = match algo {
        Algo::AlberDice => {
            let out = train(meta, dataset, cfg, oracle)?;
            (out.policy, out.report.fallback_rows.clone(), Some(out.report))
        }
        Algo::Bc => {
            let out = bc_train(meta, dataset)?;
            (out.policy, out.fallback_rows, None)
        }
        Algo::OptiDice => {
            let ocfg = OptiDiceConfig {
                alpha: cfg.alpha,
                inner: cfg.inner.clone(),
                ..OptiDiceConfig::default()
            };
            let out = optidice_train(meta, dataset, &ocfg)?;
            (out.baseline.policy, out.baseline.fallback_rows, None)
        }
    };
    Ok(Trained {
        policy,
        fallback_rows,
        report,
        secs: t.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub id: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(id: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Check {
            id: id.into(),
            pass,
            detail: detail.into(),
        }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.id, self.detail)
    }
}

/// A summary check that passes when every part passes.
pub fn combine(id: &str, parts: &[Check]) -> Check {
    let failed: Vec<&Check> = parts.iter().filter(|c| !c.pass).collect();
    let detail = if failed.is_empty() {
        format!("{} sub-checks passed", parts.len())
    } else {
        failed.iter().map(|c| format!("[{}] {}", c.id, c.detail)).collect::<Vec<_>>().join("; ")
    };
    Check::new(id, failed.is_empty(), detail)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixSettings {
    pub alpha: f64,
    pub seeds: Vec<u64>,
    pub mode: Mode,
    pub resample_size: usize,
    pub ood_draws: usize,
}

impl Default for MatrixSettings {
    fn default() -> Self {
        MatrixSettings {
            alpha: 1.0,
            seeds: (0..5).collect(),
            mode: Mode::Exact,
            resample_size: 100_000,
            ood_draws: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRun {
    pub recipe: String,
    pub algo: Algo,
    pub seed: u64,
    /// Joint policy over AA, AB, BA, BB.
    pub joint: Vec<f64>,
    pub ood_exact: f64,
    pub ood_sampled: f64,
    /// Wall clock, kept out of serialized output so reruns compare equal.
    #[serde(skip)]
    pub secs: f64,
    pub audit: NashReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixOutcome {
    pub settings: MatrixSettings,
    pub runs: Vec<MatrixRun>,
    pub report: EvalReport,
}

fn train_config(alpha: f64, seed: u64, mode: Mode, k: usize) -> TrainConfig {
    TrainConfig {
        alpha,
        seed,
        mode,
        resample_size: k,
        ..TrainConfig::default()
    }
}

/// Penalty XOR, datasets (a)–(d), every algorithm and seed.
pub fn run_matrix(settings: &MatrixSettings) -> Result<MatrixOutcome> {
    let m = penalty_xor();
    let mut runs = vec![];
    let mut records = vec![];
    for recipe in MatrixRecipe::ALL {
        let data = matrix_dataset(&m, recipe);
        let dist = empirical_distribution(&data, &m.meta())?;
        for algo in Algo::ALL {
            for &seed in &settings.seeds {
                let cfg = train_config(settings.alpha, seed, settings.mode, settings.resample_size);
                let t = run_algo(algo, &m.meta(), &data, &cfg, Some(&m))?;
                let audit = match &t.report {
                    Some(r) => nash::audit_training(r, &m, &dist, settings.alpha)?,
                    None => nash::certify(&m, &t.policy, &dist, settings.alpha)?,
                };
                let joint = t.policy.to_joint(m.joint()).row(0).to_vec();
                let ood_exact = ood_rate(&t.policy, &dist, OodMode::SupportExact)?;
                let ood_sampled = ood_rate(
                    &t.policy,
                    &dist,
                    OodMode::Sampled {
                        draws: settings.ood_draws,
                        seed,
                    },
                )?;
                records.push(RunRecord {
                    env: "penalty-xor".into(),
                    dataset: recipe.name().into(),
                    algo: algo.name().into(),
                    seed,
                    alpha: (algo != Algo::Bc).then_some(settings.alpha),
                    episodic_return: episodic_return(&m, &t.policy, 1)?,
                    optimal_return: Some(1.0),
                    monte_carlo: None,
                    ood_rate: ood_exact,
                    start_joint: joint.clone(),
                    train_secs: None,
                });
                runs.push(MatrixRun {
                    recipe: recipe.name().into(),
                    algo,
                    seed,
                    joint,
                    ood_exact,
                    ood_sampled,
                    secs: t.secs,
                    audit,
                });
            }
        }
    }
    Ok(MatrixOutcome {
        settings: settings.clone(),
        runs,
        report: make_report(records),
    })
}

fn fmt_joint(j: &[f64]) -> String {
    format!("[{}]", j.iter().map(|p| format!("{p:.4}")).collect::<Vec<_>>().join(", "))
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| f64::max(m, (x - y).abs()))
}

impl MatrixOutcome {
    fn select(&self, recipe: &str, algo: Algo) -> impl Iterator<Item = &MatrixRun> {
        let recipe = recipe.to_string();
        self.runs.iter().filter(move |r| r.recipe == recipe && r.algo == algo)
    }

    /// Policy-table checks: one optimum per dataset, the BC product table on
    /// (c), and near-uniform joint-baseline marginals on (c).
    pub fn policy_checks(&self) -> Vec<Check> {
        let mut out = vec![];
        for recipe in MatrixRecipe::ALL {
            let mut worst = f64::INFINITY;
            let mut wrong_action = None;
            let mut slow = 0.0f64;
            for r in self.select(recipe.name(), Algo::AlberDice) {
                // AB or BA are the only optima
                let mass = r.joint[1].max(r.joint[2]);
                worst = worst.min(mass);
                slow = slow.max(r.secs);
                if recipe == MatrixRecipe::A && r.joint[1] < 0.99 {
                    wrong_action = Some(fmt_joint(&r.joint));
                }
            }
            let example = self.select(recipe.name(), Algo::AlberDice).next().map(|r| fmt_joint(&r.joint)).unwrap_or_default();
            out.push(Check::new(
                format!("alberdice-{}", recipe.name()),
                worst >= 0.99 && wrong_action.is_none() && slow < 5.0,
                format!(
                    "min optimal mass {worst:.4} (need ≥ 0.99), slowest run {slow:.3}s, e.g. joint {example}{}",
                    wrong_action.map(|j| format!(", not (A,B): {j}")).unwrap_or_default()
                ),
            ));
        }
        let bc_target = [4.0 / 9.0, 2.0 / 9.0, 2.0 / 9.0, 1.0 / 9.0];
        let bc_err = self.select("c", Algo::Bc).map(|r| linf(&r.joint, &bc_target)).fold(0.0, f64::max);
        out.push(Check::new("bc-c", bc_err <= 0.03, format!("L∞ distance to (4/9, 2/9, 2/9, 1/9) = {bc_err:.4} (need ≤ 0.03)")));
        let mut marg_err = 0.0f64;
        let mut joint_err = 0.0f64;
        let mut example = String::new();
        for r in self.select("c", Algo::OptiDice) {
            let p1a = r.joint[0] + r.joint[1];
            let p2a = r.joint[0] + r.joint[2];
            marg_err = marg_err.max((p1a - 0.5).abs()).max((p2a - 0.5).abs());
            joint_err = joint_err.max(linf(&r.joint, &[0.25; 4]));
            example = fmt_joint(&r.joint);
        }
        out.push(Check::new(
            "optidice-c",
            marg_err <= 0.05 && joint_err <= 0.05,
            format!("marginal error {marg_err:.4}, joint error {joint_err:.4} (need ≤ 0.05), joint {example}"),
        ));
        out
    }

    /// OOD-rate checks.
    pub fn ood_checks(&self) -> Vec<Check> {
        let mut out = vec![];
        let worst = ["b", "c", "d"]
            .iter()
            .flat_map(|d| self.select(d, Algo::AlberDice))
            .map(|r| r.ood_exact)
            .fold(0.0, f64::max);
        out.push(Check::new("alberdice-ood", worst == 0.0, format!("max OOD rate on (b)-(d) = {worst:.6} (need 0)")));
        let bc: Vec<&MatrixRun> = self.select("b", Algo::Bc).collect();
        let exact_ok = bc.iter().all(|r| (r.ood_exact - 0.5).abs() <= 1e-12);
        let sampled_err = bc.iter().map(|r| (r.ood_sampled - 0.5).abs()).fold(0.0, f64::max);
        out.push(Check::new(
            "bc-ood-b",
            exact_ok && sampled_err <= 0.02,
            format!(
                "exact {:.6}, sampled max error {sampled_err:.4} (need 0.5 exactly and ±0.02)",
                bc.first().map(|r| r.ood_exact).unwrap_or(f64::NAN)
            ),
        ));
        let opt = self.select("c", Algo::OptiDice).map(|r| (r.ood_exact - 0.25).abs()).fold(0.0, f64::max);
        let val = self.select("c", Algo::OptiDice).next().map(|r| r.ood_exact).unwrap_or(f64::NAN);
        out.push(Check::new("optidice-ood-c", opt <= 1e-12, format!("OOD rate {val:.6} (need 0.25 exactly)")));
        out
    }

    /// Monotone improvement and final regularized gaps of the solver runs.
    pub fn nash_checks(&self, gap_tol: f64) -> Vec<Check> {
        let runs: Vec<&MatrixRun> = self.runs.iter().filter(|r| r.algo == Algo::AlberDice).collect();
        let violations: usize = runs.iter().map(|r| r.audit.violations.len()).sum();
        let worst = runs.iter().map(|r| r.audit.epsilon).fold(0.0, f64::max);
        vec![
            Check::new("matrix-monotone", violations == 0, format!("{violations} monotonicity violations over {} runs", runs.len())),
            Check::new("matrix-gaps", worst <= gap_tol, format!("max regularized gap {worst:.3e} (need ≤ {gap_tol:.0e})")),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeSettings {
    pub spec: BridgeSpec,
    pub alpha: f64,
    pub seeds: Vec<u64>,
    pub mode: Mode,
    pub resample_size: usize,
    pub algos: Vec<Algo>,
}

impl Default for BridgeSettings {
    fn default() -> Self {
        BridgeSettings {
            spec: BridgeSpec::default(),
            alpha: BRIDGE_ALPHA,
            seeds: (0..5).collect(),
            mode: Mode::Exact,
            resample_size: 100_000,
            algos: Algo::ALL.to_vec(),
        }
    }
}

/// Conservatism weight used for Bridge reproduction.
pub const BRIDGE_ALPHA: f64 = 0.001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeRun {
    pub recipe: String,
    pub algo: Algo,
    pub seed: u64,
    pub episodic_return: f64,
    pub start_joint: Vec<f64>,
    #[serde(skip)]
    pub secs: f64,
    /// Only for the alternating solver.
    pub audit: Option<NashReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeOutcome {
    pub settings: BridgeSettings,
    pub optimal_return: f64,
    pub runs: Vec<BridgeRun>,
    pub report: EvalReport,
}

/// Joint actions `(Left, Left)` and `(Right, Right)`.
pub fn coordinated_openings() -> [usize; 2] {
    let l = Move::Left as usize;
    let r = Move::Right as usize;
    [l * 5 + l, r * 5 + r]
}

pub fn run_bridge(settings: &BridgeSettings) -> Result<BridgeOutcome> {
    let bridge = build_bridge(&settings.spec)?;
    let m = &bridge.mmdp;
    let horizon = settings.spec.horizon;
    let optimal = optimal_finite_horizon(m, horizon)[horizon][bridge.start_state()];
    let mut runs = vec![];
    let mut records = vec![];
    for recipe in [BridgeRecipe::Optimal, BridgeRecipe::Mix] {
        for &seed in &settings.seeds {
            let data = bridge_dataset(&bridge, recipe, seed)?;
            let dist = empirical_distribution(&data, &m.meta())?;
            for &algo in &settings.algos {
                let cfg = train_config(settings.alpha, seed, settings.mode, settings.resample_size);
                let run = match run_algo(algo, &m.meta(), &data, &cfg, Some(m)) {
                    Ok(t) => {
                        let ret = episodic_return(m, &t.policy, horizon)?;
                        let start_joint = t.policy.to_joint(m.joint()).row(bridge.start_state()).to_vec();
                        let audit = match &t.report {
                            Some(r) => Some(nash::audit_training(r, m, &dist, settings.alpha)?),
                            None => None,
                        };
                        records.push(RunRecord {
                            env: "bridge".into(),
                            dataset: recipe.name().into(),
                            algo: algo.name().into(),
                            seed,
                            alpha: (algo != Algo::Bc).then_some(settings.alpha),
                            episodic_return: ret,
                            optimal_return: Some(optimal),
                            monte_carlo: None,
                            ood_rate: ood_rate(&t.policy, &dist, OodMode::SupportExact)?,
                            start_joint: start_joint.clone(),
                            train_secs: None,
                        });
                        BridgeRun {
                            recipe: recipe.name().into(),
                            algo,
                            seed,
                            episodic_return: ret,
                            start_joint,
                            secs: t.secs,
                            audit,
                            error: None,
                        }
                    }
                    Err(e) if e.is_solver_failure() => BridgeRun {
                        recipe: recipe.name().into(),
                        algo,
                        seed,
                        episodic_return: f64::NAN,
                        start_joint: vec![],
                        secs: 0.0,
                        audit: None,
                        error: Some(e.to_string()),
                    },
                    Err(e) => return Err(e),
                };
                runs.push(run);
            }
        }
    }
    Ok(BridgeOutcome {
        settings: settings.clone(),
        optimal_return: optimal,
        runs,
        report: make_report(records),
    })
}

impl BridgeOutcome {
    fn solver_runs(&self, recipe: &str) -> Vec<&BridgeRun> {
        self.runs
            .iter()
            .filter(|r| r.algo == Algo::AlberDice && r.recipe == recipe)
            .collect()
    }

    fn return_check(&self, recipe: &str, rel: f64) -> Check {
        let runs = self.solver_runs(recipe);
        let opt = self.optimal_return;
        let failed: Vec<String> = runs.iter().filter_map(|r| r.error.clone()).collect();
        let worst = runs
            .iter()
            .filter(|r| r.error.is_none())
            .map(|r| ((r.episodic_return - opt) / opt).abs())
            .fold(0.0, f64::max);
        let mean = runs.iter().map(|r| r.episodic_return).sum::<f64>() / runs.len() as f64;
        Check::new(
            format!("bridge-{recipe}-return"),
            failed.is_empty() && !runs.is_empty() && worst <= rel,
            if failed.is_empty() {
                format!(
                    "mean return {mean:.4} vs optimum {opt:.4}, worst relative error {:.2}% (need ≤ {:.0}%)",
                    worst * 100.0,
                    rel * 100.0
                )
            } else {
                format!("solver failed: {}", failed.join("; "))
            },
        )
    }

    pub fn checks(&self) -> Vec<Check> {
        let open = coordinated_openings();
        let runs = self.solver_runs("optimal");
        let worst_open = runs
            .iter()
            .map(|r| r.start_joint.get(open[0]).copied().unwrap_or(0.0).max(r.start_joint.get(open[1]).copied().unwrap_or(0.0)))
            .fold(f64::INFINITY, f64::min);
        vec![
            self.return_check("optimal", 0.02),
            Check::new(
                "bridge-optimal-opening",
                !runs.is_empty() && worst_open >= 0.99,
                format!("min start-state mass on (Left,Left) or (Right,Right) = {worst_open:.4} (need ≥ 0.99)"),
            ),
            self.return_check("mix", 0.05),
        ]
    }

    pub fn nash_checks(&self, gap_tol: f64) -> Vec<Check> {
        let audits: Vec<&NashReport> = self.runs.iter().filter_map(|r| r.audit.as_ref()).collect();
        let violations: usize = audits.iter().map(|a| a.violations.len()).sum();
        let worst = audits.iter().map(|a| a.epsilon).fold(0.0, f64::max);
        vec![
            Check::new("bridge-monotone", violations == 0, format!("{violations} monotonicity violations over {} runs", audits.len())),
            Check::new("bridge-gaps", worst <= gap_tol, format!("max regularized gap {worst:.3e} (need ≤ {gap_tol:.0e})")),
        ]
    }
}
