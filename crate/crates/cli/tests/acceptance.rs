//! Acceptance run: one PASS/FAIL line per criterion, sub-checks indented.
//!
//! Exits 0 after printing everything so the rest of the workspace suite still
//! runs; set `ACCEPTANCE_STRICT=1` to exit 1 when any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::process::Command;
use std::time::Instant;

use common::{instance, random_dual, random_nu, rng};
use marl_dice::dataset::empirical_mmdp;
use marl_dice::envs::{build_bridge, matrix_dataset, penalty_xor, BridgeSpec, MatrixRecipe};
use marl_dice::experiments::{run_bridge, run_matrix, BridgeSettings, Check, MatrixSettings};
use marl_dice::io::{self, dataset_from_jsonl, dataset_to_jsonl, mmdp_from_str, mmdp_to_string, PolicyDocument};
use marl_dice::mmdp::stationary_distribution;
use marl_dice::nash::{self, regularized_objective};
use marl_dice::solver::dual::Form;
use marl_dice::solver::{closed_form_w, initial_policy, resample, stable_to_unstable_shift, GroupedData, InnerConfig, Mode};
use marl_dice::{train, FactorizedPolicy, NashReport, TrainConfig, TrainReport};
use rand::Rng;

fn sub(c: &Check) {
    println!("    {}", c.line());
}

fn criterion(n: usize, title: &str, parts: Vec<Check>) -> bool {
    for c in &parts {
        sub(c);
    }
    let failed: Vec<&str> = parts.iter().filter(|c| !c.pass).map(|c| c.id.as_str()).collect();
    let pass = failed.is_empty();
    let detail = if pass {
        format!("{} sub-checks passed", parts.len())
    } else {
        format!("failed: {}", failed.join(", "))
    };
    println!("{} criterion-{n} {title}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// `J_α` straight from the joint occupancy.
fn joint_objective(inst: &common::Instance, pi: &FactorizedPolicy, alpha: f64) -> f64 {
    let occ = stationary_distribution(&inst.mmdp, pi).unwrap();
    let mut total = 0.0;
    for s in 0..inst.mmdp.n_states() {
        for a in 0..inst.mmdp.n_joint() {
            let d = occ.get(s, a);
            if d == 0.0 {
                continue;
            }
            let dd = inst.dist.get(s, a);
            if dd == 0.0 {
                return f64::NEG_INFINITY;
            }
            total += d * (inst.mmdp.reward(s, a) - alpha * (d / dd).ln());
        }
    }
    total
}

fn agent_independence() -> Check {
    let mut worst = 0.0f64;
    let mut bad = 0;
    for seed in 0..100u64 {
        let inst = instance(seed, 0.0, 3000);
        let data = GroupedData::new(&inst.mmdp.meta(), &inst.data).unwrap();
        let pi = initial_policy(&data, 1.0, seed);
        let alpha = 0.01 + 1.99 * (seed as f64 / 99.0);
        let reference = joint_objective(&inst, &pi, alpha);
        for i in 0..inst.mmdp.n_agents() {
            let v = regularized_objective(&inst.mmdp, &pi, &inst.dist, alpha, i).unwrap();
            if !close(v, reference, 1e-12) {
                bad += 1;
            }
            if v != reference {
                worst = worst.max((v - reference).abs() / (1.0 + reference.abs()));
            }
        }
    }
    Check::new("agent-independence", bad == 0, format!("100 instances, {bad} mismatches, max relative error {worst:.2e} (need ≤ 1e-12)"))
}

fn numeric_inner_max(e: f64, alpha: f64) -> f64 {
    let f = |w: f64| w * (e - alpha * w.ln());
    let n = 100_000;
    let (lo, hi) = (1e-8f64.ln(), 1e3f64.ln());
    let grid = |k: usize| (lo + (hi - lo) * k as f64 / n as f64).exp();
    let best = (0..=n).max_by(|&a, &b| f(grid(a)).total_cmp(&f(grid(b)))).unwrap();
    let (mut a, mut b) = (grid(best.saturating_sub(1)), grid((best + 1).min(n)));
    for _ in 0..200 {
        let m1 = a + (b - a) / 3.0;
        let m2 = b - (b - a) / 3.0;
        if f(m1) < f(m2) {
            a = m1;
        } else {
            b = m2;
        }
    }
    (a + b) / 2.0
}

fn closed_form_inner_max() -> Check {
    let mut r = rng(2024);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let alpha = r.random_range(0.05..5.0);
        let e = alpha * r.random_range(-5.0..7.0);
        let w = closed_form_w(e, alpha);
        worst = worst.max((w - numeric_inner_max(e, alpha)).abs() / w.max(1.0));
    }
    Check::new("closed-form-w", worst <= 1e-4, format!("1000 cases, max error {worst:.2e} (need ≤ 1e-4)"))
}

fn convexity_and_bound() -> Check {
    let mut bad_convex = 0;
    let mut bad_bound = 0;
    for seed in 0..100u64 {
        let d = random_dual(seed, true, false);
        let a = random_nu(seed ^ 1, d.problem.n, 3.0);
        let b = random_nu(seed ^ 2, d.problem.n, 3.0);
        let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x + y) / 2.0).collect();
        for form in [Form::Unstable, Form::Stable] {
            let rhs = (d.problem.value(&a, form) + d.problem.value(&b, form)) / 2.0;
            if d.problem.value(&mid, form) > rhs + 1e-12 * (1.0 + rhs.abs()) {
                bad_convex += 1;
            }
        }
        let nu = random_nu(seed ^ 3, d.problem.n, 2.0);
        let alpha = d.problem.alpha;
        let e = d.problem.advantages(&nu);
        let mut lagrangian: f64 = d.problem.linear.iter().zip(&nu).map(|(c, x)| c * x).sum();
        for idx in &d.entries {
            let q: f64 = idx.iter().map(|&t| d.problem.terms[t].weight).sum();
            let mean = idx.iter().map(|&t| d.problem.terms[t].weight * e[t]).sum::<f64>() / q;
            let w = closed_form_w(mean, alpha);
            lagrangian += idx
                .iter()
                .map(|&t| d.problem.terms[t].weight * (w * e[t] - alpha * w * w.ln()))
                .sum::<f64>();
        }
        let l = d.problem.value(&nu, Form::Unstable);
        if lagrangian > l + 1e-12 * (1.0 + l.abs()) {
            bad_bound += 1;
        }
    }
    Check::new(
        "convexity-and-bound",
        bad_convex == 0 && bad_bound == 0,
        format!("100 random ν: {bad_convex} convexity and {bad_bound} Lagrangian-bound violations"),
    )
}

fn stable_form() -> (Check, f64) {
    let mut worst_shift = 0.0f64;
    let mut below = 0;
    let mut worst_gap = 0.0f64;
    let mut literal_gap = 0.0f64;
    for seed in 0..100u64 {
        let d = random_dual(seed, false, false);
        let nu = random_nu(seed ^ 5, d.problem.n, 3.0);
        let c = rng(seed ^ 6).random_range(-50.0..50.0);
        let shifted: Vec<f64> = nu.iter().map(|x| x + c).collect();
        let a = d.problem.value(&nu, Form::Stable);
        let b = d.problem.value(&shifted, Form::Stable);
        worst_shift = worst_shift.max((a - b).abs() / (1.0 + a.abs()));
        if d.problem.value(&nu, Form::Unstable) < a - 1e-12 * (1.0 + a.abs()) {
            below += 1;
        }
        let cfg = InnerConfig {
            grad_tol: 1e-10,
            max_iter: 1000,
            ..InnerConfig::default()
        };
        let start = d.problem.soft_start(10_000, 1e-12);
        let stable = d.problem.minimize(Form::Stable, &start, &cfg).unwrap();
        let unstable = d.problem.minimize(Form::Unstable, &start, &cfg).unwrap();
        let shift = stable_to_unstable_shift(&d.problem, &stable.nu, d.gamma);
        let recovered: Vec<f64> = stable.nu.iter().map(|x| x + shift).collect();
        worst_gap = worst_gap.max((d.problem.value(&recovered, Form::Unstable) - unstable.objective).abs());
        // the shift as literally stated, without the −1
        let literal = shift + d.problem.alpha / (1.0 - d.gamma);
        let lit: Vec<f64> = stable.nu.iter().map(|x| x + literal).collect();
        literal_gap = literal_gap.max(d.problem.value(&lit, Form::Unstable) - unstable.objective);
    }
    let pass = worst_shift <= 1e-10 && below == 0 && worst_gap <= 1e-6;
    (
        Check::new(
            "stable-form",
            pass,
            format!(
                "shift invariance {worst_shift:.2e} (need ≤ 1e-10), {below} cases with L < L̃, recovery gap {worst_gap:.2e} (need ≤ 1e-6)"
            ),
        ),
        literal_gap,
    )
}

fn factorized_output() -> Check {
    let mut bad = 0;
    let mut runs = 0;
    let m = penalty_xor();
    let mut cases: Vec<(marl_dice::TabularMmdp, marl_dice::OfflineDataset, f64, u64)> = MatrixRecipe::ALL
        .iter()
        .flat_map(|&r| (0..5).map(move |s| (r, s)))
        .map(|(r, s)| (m.clone(), matrix_dataset(&m, r), 1.0, s))
        .collect();
    for seed in 0..20u64 {
        let inst = instance(seed, 0.3, 400);
        cases.push((empirical_mmdp(&inst.data, &inst.mmdp).unwrap(), inst.data, 0.5, seed));
    }
    for (model, data, alpha, seed) in cases {
        let cfg = TrainConfig { alpha, seed, ..TrainConfig::default() };
        let out = train(&model.meta(), &data, &cfg, Some(&model)).unwrap();
        let space = model.joint();
        let joint = out.policy.to_joint(space);
        runs += 1;
        for s in 0..model.n_states() {
            for a in 0..space.len() {
                let product: f64 = (0..space.n_agents()).map(|i| out.policy.prob(i, s, space.component(a, i))).product();
                if joint.prob(s, a) != product {
                    bad += 1;
                }
            }
        }
    }
    Check::new("factorized-output", bad == 0, format!("{runs} training runs, {bad} joint entries differ from the per-agent product"))
}

fn random_monotonicity() -> Check {
    let mut violations = 0;
    for seed in 0..40u64 {
        let inst = instance(seed, 0.3, 400);
        let model = empirical_mmdp(&inst.data, &inst.mmdp).unwrap();
        let alpha = [0.1, 0.5, 1.0][seed as usize % 3];
        let cfg = TrainConfig { alpha, seed, ..TrainConfig::default() };
        let out = train(&model.meta(), &inst.data, &cfg, Some(&model)).unwrap();
        violations += nash::audit_training(&out.report, &model, &inst.dist, alpha).unwrap().violations.len();
    }
    Check::new("random-monotone", violations == 0, format!("{violations} violations over 40 random exact-mode runs"))
}

fn resampling_unbiased() -> Check {
    let mut bad = vec![];
    for case in 0..10u64 {
        let mut r = rng(case);
        let n = r.random_range(5..60);
        let weights: Vec<f64> = (0..n)
            .map(|_| if r.random::<f64>() < 0.2 { 0.0 } else { r.random_range(0.0..3.0) })
            .collect();
        let f: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let exact = weights.iter().zip(&f).map(|(w, x)| w * x).sum::<f64>() / n as f64;
        let estimates: Vec<f64> = (0..200)
            .map(|seed| resample(&weights, 50, 1000 * case + seed).unwrap().corrected_mean(&f))
            .collect();
        let (m, se) = mean_se(&estimates);
        if (m - exact).abs() > 3.0 * se {
            bad.push(case);
        }
    }
    Check::new("ir-unbiased", bad.is_empty(), format!("10 weight vectors × 200 reseeds, outside 3 SE: {bad:?}"))
}

fn resampled_vs_exact() -> Check {
    let m = penalty_xor();
    let mut worst = 0.0f64;
    for recipe in MatrixRecipe::ALL {
        let data = matrix_dataset(&m, recipe);
        for seed in 0..5 {
            let exact = TrainConfig { seed, ..TrainConfig::default() };
            let sampled = TrainConfig {
                mode: Mode::Resampled,
                resample_size: 100_000,
                ..exact.clone()
            };
            let a = train(&m.meta(), &data, &exact, None).unwrap().policy.to_joint(m.joint());
            let b = train(&m.meta(), &data, &sampled, None).unwrap().policy.to_joint(m.joint());
            let tv: f64 = a.row(0).iter().zip(b.row(0)).map(|(x, y)| (x - y).abs()).sum::<f64>() / 2.0;
            worst = worst.max(tv);
        }
    }
    Check::new("resampled-vs-exact", worst <= 0.05, format!("max TV {worst:.4} over 4 datasets × 5 seeds at K = 1e5 (need ≤ 0.05)"))
}

fn flow_residual() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut r = rng(seed);
        let n = r.random_range(1..=8);
        let sizes: Vec<usize> = (0..r.random_range(1..=3)).map(|_| r.random_range(1..=3)).collect();
        let gamma = r.random_range(0.0..0.99);
        let (m, pi) = marl_dice::random::random_instance(&mut r, n, &sizes, gamma);
        worst = worst.max(stationary_distribution(&m, &pi).unwrap().flow_residual(&m));
    }
    Check::new("flow-residual", worst <= 1e-9, format!("100 instances, max residual {worst:.2e} (need ≤ 1e-9)"))
}

fn round_trips() -> Check {
    let mut bad = vec![];
    for seed in 0..20u64 {
        let inst = instance(seed, 0.2, 50);
        let text = mmdp_to_string(&inst.mmdp);
        let back = mmdp_from_str(&text).unwrap();
        if back != inst.mmdp || mmdp_to_string(&back) != text {
            bad.push(format!("mmdp {seed}"));
        }
        let jsonl = dataset_to_jsonl(&inst.data);
        let sidecar = io::DatasetSidecar {
            initial_states: inst.data.initial_states.clone(),
            meta: inst.data.meta.clone(),
            manifest: None,
        };
        if dataset_from_jsonl(&jsonl, sidecar).unwrap() != inst.data {
            bad.push(format!("dataset {seed}"));
        }
        let doc = PolicyDocument::from_policy(&inst.mmdp, &inst.behavior, &[]);
        let doc2: PolicyDocument = serde_json::from_str(&serde_json::to_string(&doc).unwrap()).unwrap();
        if doc2.to_policy(&inst.mmdp).unwrap() != inst.behavior {
            bad.push(format!("policy {seed}"));
        }
        let cfg = TrainConfig { alpha: 0.3, seed, ..TrainConfig::default() };
        let out = train(&inst.mmdp.meta(), &inst.data, &cfg, Some(&inst.mmdp)).unwrap();
        let text = serde_json::to_string(&out.report).unwrap();
        let back: TrainReport = serde_json::from_str(&text).unwrap();
        if back != out.report || serde_json::to_string(&back).unwrap() != text {
            bad.push(format!("train report {seed}"));
        }
        let audit = nash::audit_training(&out.report, &inst.mmdp, &inst.dist, 0.3).unwrap();
        let text = serde_json::to_string(&audit).unwrap();
        if serde_json::from_str::<NashReport>(&text).unwrap() != audit {
            bad.push(format!("nash report {seed}"));
        }
    }
    let bridge = build_bridge(&BridgeSpec::default()).unwrap().mmdp;
    let text = mmdp_to_string(&bridge);
    if mmdp_from_str(&text).unwrap() != bridge {
        bad.push("bridge mmdp".into());
    }
    Check::new("round-trips", bad.is_empty(), format!("MMDP, dataset, policy and report files on 20 instances plus Bridge; failures: {bad:?}"))
}

fn reproduce_matrix_runtime() -> Check {
    let t = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_marl-dice"))
        .args(["reproduce", "matrix"])
        .output()
        .expect("binary runs");
    let secs = t.elapsed().as_secs_f64();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let finished = stdout.lines().any(|l| l.contains("matrix-runtime"));
    Check::new(
        "reproduce-matrix-runtime",
        finished && secs < 120.0,
        format!("`reproduce matrix` finished in {secs:.1} s with exit code {:?} (need < 120 s)", out.status.code()),
    )
}

fn main() {
    let mut all = true;

    let matrix = run_matrix(&MatrixSettings::default()).expect("matrix grid");
    all &= criterion(1, "matrix policy tables", matrix.policy_checks());
    all &= criterion(2, "OOD rates", matrix.ood_checks());

    let t = Instant::now();
    let bridge = run_bridge(&BridgeSettings::default()).expect("bridge grid");
    let bridge_secs = t.elapsed().as_secs_f64();
    all &= criterion(3, "Bridge", bridge.checks());

    let (stable, literal_gap) = stable_form();
    let mut theory = vec![agent_independence()];
    theory.extend(matrix.nash_checks(1e-4));
    theory.extend(bridge.nash_checks(1e-3));
    theory.push(random_monotonicity());
    theory.push(closed_form_inner_max());
    theory.push(convexity_and_bound());
    theory.push(stable);
    theory.push(factorized_output());
    all &= criterion(4, "theory suite", theory);

    all &= criterion(5, "estimator suite", vec![resampling_unbiased(), resampled_vs_exact()]);
    all &= criterion(6, "infrastructure", vec![flow_residual(), round_trips(), reproduce_matrix_runtime()]);

    println!("INFO Bridge grid ({} runs) took {bridge_secs:.1} s", bridge.runs.len());
    println!("INFO literal stable-to-unstable shift leaves an objective gap up to {literal_gap:.4e}");
    let small = MatrixSettings {
        alpha: 0.01,
        ..MatrixSettings::default()
    };
    let small = run_matrix(&small).expect("matrix grid at α = 0.01");
    for c in small.policy_checks().iter().chain(&small.ood_checks()) {
        println!("INFO α=0.01 {}", c.line());
    }

    println!("acceptance: {}", if all { "all criteria pass" } else { "some criteria FAIL" });
    if !all && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
