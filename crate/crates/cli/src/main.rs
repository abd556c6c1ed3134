use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use marl_dice::dataset::{empirical_distribution, DatasetMeta};
use marl_dice::envs::{self, BridgeRecipe, BridgeSpec, MatrixRecipe};
use marl_dice::eval::{self, make_report, OodMode, RunRecord};
use marl_dice::experiments::{self, Algo, BridgeSettings, Check, MatrixSettings};
use marl_dice::io::{self, RunManifest};
use marl_dice::solver::Mode;
use marl_dice::{nash, TabularMmdp, TrainConfig, TrainReport};

const MATRIX_GAP_TOL: f64 = 1e-4;
const BRIDGE_GAP_TOL: f64 = 1e-3;
const MATRIX_BUDGET_SECS: f64 = 120.0;

/// Offline cooperative multi-agent RL on tabular MMDPs.
///
/// Configuration precedence: command-line flags > `--config` file > defaults.
///
/// Exit codes: 0 success, 1 invalid input, 2 solver failure, 3 failed
/// acceptance check.
#[derive(Debug, Parser)]
#[command(name = "marl-dice", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// List the built-in environments.
    Envs,
    /// Write a built-in environment as MMDP JSON.
    ExportEnv(ExportEnvArgs),
    /// Generate an offline dataset (JSONL plus `.meta.json` sidecar).
    GenData(GenDataArgs),
    /// Train a policy on an offline dataset.
    Train(TrainArgs),
    /// Measure best-response gaps of a policy against the true model.
    VerifyNash(VerifyArgs),
    /// Evaluate a policy: return, OOD rate and start-state joint action.
    Evaluate(EvaluateArgs),
    /// Run a full experiment grid and print PASS/FAIL per check.
    Reproduce(ReproduceArgs),
}

#[derive(Debug, Args)]
struct ExportEnvArgs {
    /// Built-in environment name.
    #[arg(long)]
    env: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Built-in environment name.
    #[arg(long)]
    env: String,
    /// a|b|c|d for matrix games, optimal|mix for bridge.
    #[arg(long)]
    recipe: String,
    /// Sampling seed (ignored by the literal matrix datasets).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSONL path; the sidecar goes next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AlgoArg {
    Alberdice,
    Bc,
    Optidice,
}

impl From<AlgoArg> for Algo {
    fn from(a: AlgoArg) -> Self {
        match a {
            AlgoArg::Alberdice => Algo::AlberDice,
            AlgoArg::Bc => Algo::Bc,
            AlgoArg::Optidice => Algo::OptiDice,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Exact,
    Resampled,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Exact => Mode::Exact,
            ModeArg::Resampled => Mode::Resampled,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Built-in environment name or MMDP JSON path.
    #[arg(long)]
    env: String,
    /// Dataset JSONL path.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = AlgoArg::Alberdice)]
    algo: AlgoArg,
    /// Conservatism weight.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Resample size for `--mode resampled`.
    #[arg(long = "K")]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON file with training settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (policy.json, report.json).
    #[arg(long)]
    out: PathBuf,
    /// Record wall-clock times in the outputs.
    #[arg(long)]
    timings: bool,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Built-in environment name or MMDP JSON path.
    #[arg(long)]
    env: String,
    /// Policy JSON path.
    #[arg(long)]
    policy: PathBuf,
    /// Dataset JSONL path.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Training report; its snapshots are audited for monotone improvement.
    #[arg(long)]
    train_report: Option<PathBuf>,
    /// Output path for the report JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Built-in environment name or MMDP JSON path.
    #[arg(long)]
    env: String,
    /// Policy JSON path.
    #[arg(long)]
    policy: PathBuf,
    /// Dataset JSONL path, for the OOD rate.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Episode length; defaults to the model's own horizon.
    #[arg(long)]
    horizon: Option<usize>,
    /// Also simulate this many episodes.
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path for the report JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    Matrix,
    Bridge,
}

#[derive(Debug, Args)]
struct ReproduceArgs {
    #[arg(value_enum)]
    suite: Suite,
    /// Number of seeds, run as 0..N.
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long = "K")]
    k: Option<usize>,
    /// JSON file with experiment settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for outcome.json, runs.csv and summary.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Record wall-clock times in the manifest.
    #[arg(long)]
    timings: bool,
}

/// An output file: the manifest next to the payload.
#[derive(Debug, Serialize, Deserialize)]
struct Artifact<T> {
    manifest: RunManifest,
    #[serde(flatten)]
    body: T,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainBody {
    report: TrainReport,
}

#[derive(Debug, Serialize, Deserialize)]
struct NashBody {
    nash: marl_dice::NashReport,
}

#[derive(Debug, Serialize, Deserialize)]
struct EvalBody {
    eval: eval::EvalReport,
}

#[derive(Debug, Serialize)]
struct Failure<'a> {
    status: &'a str,
    error: String,
}

fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    // Value maps are key-sorted, which makes the text canonical
    let canonical = serde_json::to_string(&serde_json::to_value(config)?)?;
    let digest = Sha256::digest(canonical.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn manifest<T: Serialize>(
    command: &str,
    config: &T,
    seed: Option<u64>,
    inputs: &[&Path],
    outputs: &[&Path],
    started: Option<Instant>,
) -> Result<RunManifest> {
    let paths = |ps: &[&Path]| ps.iter().map(|p| p.display().to_string()).collect();
    Ok(RunManifest {
        command: command.into(),
        config_hash: config_hash(config)?,
        seed,
        inputs: paths(inputs),
        outputs: paths(outputs),
        version: env!("CARGO_PKG_VERSION").into(),
        wall_clock_secs: started.map(|t| t.elapsed().as_secs_f64()),
    })
}

/// A built-in name or a path to MMDP JSON.
fn load_env(env: &str) -> Result<TabularMmdp> {
    if envs::BUILTIN_NAMES.iter().any(|(n, _)| *n == env) {
        return Ok(envs::builtin(env, &BridgeSpec::default())?);
    }
    let path = Path::new(env);
    if path.exists() {
        return io::load_mmdp(path).with_context(|| format!("loading environment {env}"));
    }
    bail!(marl_dice::Error::Invalid(format!(
        "unknown environment {env:?}: not a built-in name and no such file"
    )))
}

fn envs_cmd() -> Result<u8> {
    for (name, desc) in envs::BUILTIN_NAMES {
        println!("{name:<12} {desc}");
    }
    Ok(0)
}

fn export_env(args: &ExportEnvArgs) -> Result<u8> {
    let m = load_env(&args.env)?;
    io::save_mmdp(&m, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(0)
}

fn gen_data(args: &GenDataArgs) -> Result<u8> {
    #[derive(Serialize)]
    struct GenConfig<'a> {
        env: &'a str,
        recipe: &'a str,
        seed: u64,
    }
    let data = match args.env.as_str() {
        "penalty-xor" | "xor" => {
            let m = envs::builtin(&args.env, &BridgeSpec::default())?;
            let recipe: MatrixRecipe = args.recipe.parse()?;
            let d = envs::matrix_dataset(&m, recipe);
            let meta = DatasetMeta {
                env: Some(args.env.clone()),
                ..d.meta.clone()
            };
            d.with_meta(meta)
        }
        "bridge" => {
            let recipe: BridgeRecipe = args.recipe.parse()?;
            let bridge = envs::build_bridge(&BridgeSpec::default())?;
            envs::bridge_dataset(&bridge, recipe, args.seed)?
        }
        other => bail!(marl_dice::Error::Invalid(format!(
            "no dataset recipes for environment {other:?}"
        ))),
    };
    let cfg = GenConfig {
        env: &args.env,
        recipe: &args.recipe,
        seed: args.seed,
    };
    let side = io::sidecar_path(&args.out);
    let man = manifest("gen-data", &cfg, Some(args.seed), &[], &[&args.out, &side], None)?;
    io::save_dataset(&data, &args.out, Some(man))?;
    println!("wrote {} records to {}", data.records.len(), args.out.display());
    Ok(0)
}

fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &args.config {
        Some(p) => io::read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(a) = args.alpha {
        cfg.alpha = a;
    }
    if let Some(m) = args.mode {
        cfg.mode = m.into();
    }
    if let Some(k) = args.k {
        cfg.resample_size = k;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(args: &TrainArgs) -> Result<u8> {
    let started = args.timings.then(Instant::now);
    let cfg = resolve_train_config(args)?;
    let m = load_env(&args.env)?;
    let data = io::load_dataset(&args.dataset)?;
    let algo: Algo = args.algo.into();
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let policy_path = args.out.join("policy.json");
    let report_path = args.out.join("report.json");

    #[derive(Serialize)]
    struct Resolved<'a> {
        algo: Algo,
        env: &'a str,
        train: &'a TrainConfig,
    }
    let resolved = Resolved {
        algo,
        env: &args.env,
        train: &cfg,
    };
    let trained = match experiments::run_algo(algo, &m.meta(), &data, &cfg, Some(&m)) {
        Ok(t) => t,
        Err(e) if e.is_solver_failure() => {
            let failure = Failure {
                status: "solver-failure",
                error: e.to_string(),
            };
            io::write_json(&args.out.join("failure.json"), &failure)?;
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    let mut outputs: Vec<&Path> = vec![&policy_path];
    if trained.report.is_some() {
        outputs.push(&report_path);
    }
    let man = manifest("train", &resolved, Some(cfg.seed), &[&args.dataset], &outputs, started)?;
    io::save_policy(&policy_path, &m, &trained.policy, &trained.fallback_rows, Some(man.clone()))?;
    if let Some(mut report) = trained.report {
        report.wall_clock_secs = args.timings.then_some(trained.secs);
        let stop = report.stop_reason;
        io::write_json(&report_path, &Artifact { manifest: man, body: TrainBody { report } })?;
        println!("{algo}: stopped with {stop:?}");
    }
    println!("wrote {}", policy_path.display());
    Ok(0)
}

fn verify_nash(args: &VerifyArgs) -> Result<u8> {
    let m = load_env(&args.env)?;
    let policy = io::load_policy(&args.policy, &m)?;
    let data = io::load_dataset(&args.dataset)?;
    let dist = empirical_distribution(&data, &m.meta())?;
    let report = match &args.train_report {
        Some(p) => {
            let art: Artifact<TrainBody> = io::read_json(p)?;
            let mut snapshots = art.body.report.snapshots;
            if snapshots.last() != Some(&policy) {
                snapshots.push(policy);
            }
            nash::audit_policies(&m, &snapshots, &dist, args.alpha)?
        }
        None => nash::certify(&m, &policy, &dist, args.alpha)?,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(out) = &args.out {
        #[derive(Serialize)]
        struct Cfg<'a> {
            env: &'a str,
            alpha: f64,
        }
        let mut inputs: Vec<&Path> = vec![&args.policy, &args.dataset];
        if let Some(p) = &args.train_report {
            inputs.push(p);
        }
        let cfg = Cfg { env: &args.env, alpha: args.alpha };
        let man = manifest("verify-nash", &cfg, None, &inputs, &[out], None)?;
        io::write_json(out, &Artifact { manifest: man, body: NashBody { nash: report } })?;
    }
    Ok(0)
}

fn evaluate(args: &EvaluateArgs) -> Result<u8> {
    let m = load_env(&args.env)?;
    let policy = io::load_policy(&args.policy, &m)?;
    let horizon = match args.horizon.or(m.horizon()) {
        Some(h) => h,
        None => bail!(marl_dice::Error::Invalid("the model has no horizon; pass --horizon".into())),
    };
    let ood = match &args.dataset {
        Some(p) => {
            let data = io::load_dataset(p)?;
            let dist = empirical_distribution(&data, &m.meta())?;
            eval::ood_rate(&policy, &dist, OodMode::SupportExact)?
        }
        None => f64::NAN,
    };
    let monte_carlo = match args.episodes {
        Some(n) => Some(eval::monte_carlo_return(&m, &policy, horizon, n, args.seed)?),
        None => None,
    };
    let start = m
        .p0()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(s, _)| s)
        .unwrap_or(0);
    let record = RunRecord {
        env: args.env.clone(),
        dataset: args.dataset.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        algo: args.policy.display().to_string(),
        seed: args.seed,
        alpha: None,
        episodic_return: eval::episodic_return(&m, &policy, horizon)?,
        optimal_return: Some(marl_dice::mmdp::optimal_finite_horizon(&m, horizon)[horizon]
            .iter()
            .zip(m.p0())
            .map(|(v, p)| v * p)
            .sum()),
        monte_carlo,
        ood_rate: ood,
        start_joint: policy.to_joint(m.joint()).row(start).to_vec(),
        train_secs: None,
    };
    let report = make_report(vec![record]);
    print!("{}", report.render(&joint_labels(&m)));
    if let Some(out) = &args.out {
        #[derive(Serialize)]
        struct Cfg<'a> {
            env: &'a str,
            horizon: usize,
            episodes: Option<usize>,
        }
        let cfg = Cfg {
            env: &args.env,
            horizon,
            episodes: args.episodes,
        };
        let mut inputs: Vec<&Path> = vec![&args.policy];
        if let Some(p) = &args.dataset {
            inputs.push(p);
        }
        let man = manifest("evaluate", &cfg, Some(args.seed), &inputs, &[out], None)?;
        io::write_json(out, &Artifact { manifest: man, body: EvalBody { eval: report } })?;
    }
    Ok(0)
}

fn joint_labels(m: &TabularMmdp) -> Vec<String> {
    let names = m.action_names();
    (0..m.n_joint())
        .map(|a| {
            m.joint()
                .decode(a)
                .iter()
                .enumerate()
                .map(|(i, &ai)| names[i][ai].as_str())
                .collect::<Vec<_>>()
                .join("")
        })
        .collect()
}

fn write_outcome<T: Serialize>(
    dir: &Path,
    command: &str,
    settings: &T,
    outcome: &T2<'_, impl Serialize>,
    report: &eval::EvalReport,
    started: Option<Instant>,
) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let json = dir.join("outcome.json");
    let runs = dir.join("runs.csv");
    let summary = dir.join("summary.csv");
    fs::write(&runs, report.runs_csv()?).with_context(|| format!("writing {}", runs.display()))?;
    fs::write(&summary, report.summary_csv()?).with_context(|| format!("writing {}", summary.display()))?;
    let man = manifest(command, settings, None, &[], &[&json, &runs, &summary], started)?;
    io::write_json(&json, &Artifact { manifest: man, body: outcome })?;
    Ok(())
}

/// Outcome plus its checks, as written to `outcome.json`.
#[derive(Serialize)]
struct T2<'a, O: Serialize> {
    outcome: &'a O,
    checks: &'a [Check],
}

fn reproduce(args: &ReproduceArgs) -> Result<u8> {
    let started = Instant::now();
    let (checks, table) = match args.suite {
        Suite::Matrix => {
            let mut s: MatrixSettings = match &args.config {
                Some(p) => io::read_json(p)?,
                None => MatrixSettings::default(),
            };
            if let Some(n) = args.seeds {
                s.seeds = (0..n).collect();
            }
            if let Some(a) = args.alpha {
                s.alpha = a;
            }
            if let Some(m) = args.mode {
                s.mode = m.into();
            }
            if let Some(k) = args.k {
                s.resample_size = k;
            }
            validate_suite(s.alpha, s.seeds.len(), s.resample_size)?;
            let out = experiments::run_matrix(&s)?;
            let secs = started.elapsed().as_secs_f64();
            let mut checks = out.policy_checks();
            checks.extend(out.ood_checks());
            checks.extend(out.nash_checks(MATRIX_GAP_TOL));
            checks.push(Check::new(
                "matrix-runtime",
                secs < MATRIX_BUDGET_SECS,
                format!("{secs:.1} s for the full grid (need < {MATRIX_BUDGET_SECS:.0} s)"),
            ));
            let table = out.report.render(&joint_labels(&envs::penalty_xor()));
            if let Some(dir) = &args.out {
                let body = T2 { outcome: &out, checks: &checks };
                write_outcome(dir, "reproduce matrix", &s, &body, &out.report, args.timings.then_some(started))?;
            }
            (checks, table)
        }
        Suite::Bridge => {
            let mut s: BridgeSettings = match &args.config {
                Some(p) => io::read_json(p)?,
                None => BridgeSettings::default(),
            };
            if let Some(n) = args.seeds {
                s.seeds = (0..n).collect();
            }
            if let Some(a) = args.alpha {
                s.alpha = a;
            }
            if let Some(m) = args.mode {
                s.mode = m.into();
            }
            if let Some(k) = args.k {
                s.resample_size = k;
            }
            validate_suite(s.alpha, s.seeds.len(), s.resample_size)?;
            let out = experiments::run_bridge(&s)?;
            let mut checks = out.checks();
            checks.extend(out.nash_checks(BRIDGE_GAP_TOL));
            let table = format!("oracle-optimal return {:.4}\n{}", out.optimal_return, out.report.render(&[]));
            if let Some(dir) = &args.out {
                let body = T2 { outcome: &out, checks: &checks };
                write_outcome(dir, "reproduce bridge", &s, &body, &out.report, args.timings.then_some(started))?;
            }
            (checks, table)
        }
    };
    print!("{table}");
    for c in &checks {
        println!("{}", c.line());
    }
    Ok(if checks.iter().all(|c| c.pass) { 0 } else { 3 })
}

fn validate_suite(alpha: f64, seeds: usize, k: usize) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        bail!(marl_dice::Error::Invalid("alpha must be positive".into()));
    }
    if seeds == 0 {
        bail!(marl_dice::Error::Invalid("at least one seed is needed".into()));
    }
    if k == 0 {
        bail!(marl_dice::Error::Invalid("resample size K must be at least 1".into()));
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Envs => envs_cmd(),
        Command::ExportEnv(a) => export_env(a),
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::VerifyNash(a) => verify_nash(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Reproduce(a) => reproduce(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            let solver = err
                .chain()
                .find_map(|e| e.downcast_ref::<marl_dice::Error>())
                .is_some_and(|e| e.is_solver_failure());
            if solver {
                let failure = Failure {
                    status: "solver-failure",
                    error: format!("{err:#}"),
                };
                eprintln!("{}", serde_json::to_string(&failure).unwrap_or_default());
                ExitCode::from(2)
            } else {
                eprintln!("error: {err:#}");
                ExitCode::from(1)
            }
        }
    }
}
