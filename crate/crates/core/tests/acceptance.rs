//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass criterion numbers as arguments to run
//! a subset, e.g. `cargo test --test acceptance -- 6 9`.

use std::time::{Duration, Instant};

use rand::Rng;

use ploff::agent::{
    evaluate_scripted, hyperparameter_sweep, train_agent_guarded, evaluate_policy, AgentConfig, BonusSource,
    SweepGrid, SweepTable, Variant,
};
use ploff::bonus::{build_neighbor_index, BonusForm, BonusSpec, RawPairIndex};
use ploff::dataset::{collect_qlearning_dataset, collect_scripted_dataset, PolicyTag, QLearningConfig, Transition};
use ploff::env::{build_gridworld, build_pointmass, GridMap, PointMassConfig, ScriptedPolicy};
use ploff::figures::{adjacent_violations, heatmap_path_correlation, noise_study, psi_heatmap, Perturbed, NOISE_LAMBDAS};
use ploff::metric_approx::{train_metric, EmbedderShape, MetricTrainConfig};
use ploff::metric_exact::{iterate_to_fixed_point, zero_metric};
use ploff::verify::{suite_axioms, suite_contraction, suite_fixed_point, suite_gradients, suite_knn, suite_sampled, SuiteReport, VerifyConfig};
use ploff::{rng, stats, Dataset, Dataset64, Index, Metric, PointMass};

struct Line {
    pass: bool,
    detail: String,
}

fn from_suite(rep: SuiteReport, elapsed: Duration, limit: Option<Duration>) -> Line {
    let in_time = limit.is_none_or(|l| elapsed < l);
    let mut detail = format!("{}/{} checks", rep.passed, rep.passed + rep.failed);
    if !rep.detail.is_empty() {
        detail += &format!("; first failure: {}", rep.detail);
    }
    if let Some(l) = limit {
        detail += &format!("; limit {}s", l.as_secs());
    }
    Line { pass: rep.ok() && in_time, detail }
}

fn timed<F: FnOnce() -> Line>(f: F) -> (Line, Duration) {
    let t = Instant::now();
    let line = f();
    (line, t.elapsed())
}

fn verify_cfg() -> VerifyConfig {
    VerifyConfig { trials: 100, sampled_seeds: 10, knn_instances: 200, seed: 0, inject_triangle_violation: false }
}

fn gridworld_quality() -> Line {
    let grid = build_gridworld::<f32>(&GridMap::two_room(), 50, 1.0).unwrap();
    let raw = collect_qlearning_dataset(&grid.mdp, &QLearningConfig::default()).unwrap();
    let data = raw.scale_rewards().unwrap();
    let cfg = MetricTrainConfig {
        steps: 50_000,
        gamma: 0.9,
        shape: EmbedderShape { hidden: 256, embed_dim: 16 },
        ..Default::default()
    };
    let (pair, _) = train_metric(&data, &cfg).unwrap();

    let grid64 = build_gridworld::<f64>(&GridMap::two_room(), 50, 1.0).unwrap();
    let (rmin, rmax) = raw.reward_range();
    let (rmin, rmax) = (rmin as f64, rmax as f64);
    let mdp = grid64.mdp.map_rewards(|r| (r - rmin) / (rmax - rmin)).unwrap();
    let (exact, _) = iterate_to_fixed_point(&mdp, &zero_metric(&mdp), 0.9, 1e-10, 10_000).unwrap();

    let decode = |row: ndarray::ArrayView1<f32>| row.iter().position(|&v| v == 1.0).unwrap();
    let mut r = rng::stream(0, "acceptance/pairs");
    let (mut learned, mut oracle) = (Vec::new(), Vec::new());
    for _ in 0..2000 {
        let i = r.gen_range(0..data.len());
        let j = r.gen_range(0..data.len());
        let (s1, a1) = (decode(data.states().row(i)), decode(data.actions().row(i)));
        let (s2, a2) = (decode(data.states().row(j)), decode(data.actions().row(j)));
        let d = pair
            .d_phi(
                data.states().row(i).as_slice().unwrap(),
                data.actions().row(i).as_slice().unwrap(),
                data.states().row(j).as_slice().unwrap(),
                data.actions().row(j).as_slice().unwrap(),
            )
            .unwrap();
        learned.push(d as f64);
        oracle.push(exact.between(s1, a1, s2, a2));
    }
    let rho_phi = stats::spearman(&learned, &oracle);
    let goal = grid.cells[grid.goal];
    let heat = psi_heatmap(&grid, &pair, goal).unwrap();
    let (rho_psi, cells) = heatmap_path_correlation(&grid, &heat, goal, 10).unwrap();
    Line {
        pass: rho_phi >= 0.8 && rho_psi >= 0.5,
        detail: format!(
            "n = {}, raw rewards [{rmin}, {rmax}]; spearman(d_phi, d*) = {rho_phi:.3} (>= 0.8); heatmap vs path length rho = {rho_psi:.3} over {cells} cells (>= 0.5)",
            data.len()
        ),
    }
}

/// Point-mass "medium" dataset with its trained metric and indices.
struct PointMassSetup {
    env: PointMass,
    reference: (f64, f64),
    data: Dataset,
    pair: Metric,
    index: Index,
    raw: RawPairIndex<f32>,
}

fn pointmass_setup() -> PointMassSetup {
    let env = build_pointmass::<f32>(&PointMassConfig::default()).unwrap();
    let reference = env.reference_returns(100, 0).unwrap();
    let data = collect_scripted_dataset(&env, PolicyTag::Medium, 0.0, 100, 0).unwrap().scale_rewards().unwrap();
    let cfg = MetricTrainConfig {
        steps: 10_000,
        n_action_samples: 16,
        shape: EmbedderShape { hidden: 256, embed_dim: 16 },
        ..Default::default()
    };
    let (pair, _) = train_metric(&data, &cfg).unwrap();
    let index = build_neighbor_index(&pair, &data, 50).unwrap();
    let raw = RawPairIndex::build(&data).unwrap();
    PointMassSetup { env, reference, data, pair, index, raw }
}

fn noise_monotonicity(pm: &PointMassSetup) -> Line {
    let study = noise_study(&pm.pair, &pm.data, &NOISE_LAMBDAS, 1000, 0).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for which in [Perturbed::State, Perturbed::Action] {
        let means = study.means(which);
        let zero_row = study.rows.iter().find(|r| r.perturbed == which && r.lambda == 0.0).unwrap();
        let zero = zero_row.mean == 0.0 && zero_row.quantiles.iter().all(|&q| q == 0.0);
        let mean_violations = adjacent_violations(&means);
        let per_sample = study.sample_violations.iter().find(|(p, _)| *p == which).unwrap().1;
        pass &= zero && mean_violations <= 0.1 && per_sample <= 0.1;
        parts.push(format!(
            "{}: means {:.4?}, mean violations {mean_violations:.2}, per-sample violations {per_sample:.3}, zero at lambda 0: {zero}",
            which.name(),
            means
        ));
    }
    Line { pass, detail: parts.join("; ") }
}

fn offline_behavior(pm: &PointMassSetup) -> Line {
    const SEEDS: u64 = 10;
    const EPISODES: usize = 10;
    let behavior = evaluate_scripted(&pm.env, ScriptedPolicy::Medium, 0.0, 100, 0, pm.reference).unwrap();
    let base = AgentConfig {
        steps: 50_000,
        batch: 64,
        hidden: [64, 64],
        variant: Variant::Ploff,
        bonus: BonusSpec { form: BonusForm::Exp, ..Default::default() },
        ..Default::default()
    };
    let grid = SweepGrid { alpha_actor: vec![1.0, 5.0, 10.0], alpha_critic: vec![], beta: vec![0.1, 0.25, 0.5], tied: true };
    let learned = BonusSource::Learned { pair: &pm.pair, index: &pm.index };
    let selection = hyperparameter_sweep(&pm.data, &learned, &pm.env, pm.reference, &grid, &base, &[0], EPISODES).unwrap();
    let ((alpha_a, alpha_c, beta), _) = selection.by_point()[0];
    let best_cfg = AgentConfig {
        bonus: BonusSpec { alpha_actor: alpha_a, alpha_critic: alpha_c, beta, ..base.bonus },
        ..base.clone()
    };
    let mut best = SweepTable::default();
    best.rows.extend(selection.rows.iter().filter(|r| (r.alpha_a, r.alpha_c, r.beta) == (alpha_a, alpha_c, beta)).cloned());
    let more = hyperparameter_sweep(
        &pm.data,
        &learned,
        &pm.env,
        pm.reference,
        &SweepGrid { alpha_actor: vec![alpha_a], alpha_critic: vec![alpha_c], beta: vec![beta], tied: false },
        &best_cfg,
        &(1..SEEDS).collect::<Vec<_>>(),
        EPISODES,
    )
    .unwrap();
    best.rows.extend(more.rows);
    let ploff_scores: Vec<f64> = best.rows.iter().map(|r| r.normalized_score).collect();
    let ploff_mean = stats::mean(&ploff_scores);

    let td3_cfg = AgentConfig { variant: Variant::Td3Off, bonus: BonusSpec { alpha_actor: 0.0, alpha_critic: 0.0, ..base.bonus }, ..base.clone() };
    let mut td3_scores = Vec::new();
    let mut td3_bad = 0;
    for seed in 0..SEEDS {
        let run = train_agent_guarded(&pm.data, &BonusSource::Zero, &AgentConfig { seed, ..td3_cfg.clone() }).unwrap();
        let eval = evaluate_policy(&pm.env, &run.params, EPISODES, pm.reference).unwrap();
        if run.diverged_at.is_some() || eval.mean < behavior.mean {
            td3_bad += 1;
        }
        td3_scores.push(eval.normalized);
    }
    let td3_mean = stats::mean(&td3_scores);

    let l2 = hyperparameter_sweep(&pm.data, &BonusSource::RawPairs(&pm.raw), &pm.env, pm.reference, &grid, &AgentConfig { variant: Variant::PloffL2, ..base.clone() }, &[0], EPISODES).unwrap();
    let dir = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    let csv = dir.join("l2_ablation.csv");
    l2.write_csv(std::fs::File::create(&csv).unwrap()).unwrap();
    selection.write_csv(std::fs::File::create(dir.join("ploff_selection.csv")).unwrap()).unwrap();
    let l2_best = l2.by_point().first().map(|p| p.1).unwrap_or(f64::NAN);

    let target = 0.8 * behavior.normalized;
    Line {
        pass: ploff_mean >= target && ploff_mean > td3_mean && td3_bad >= 7 && l2.rows.len() == grid.points().len(),
        detail: format!(
            "behavior {:.3}; best ploff (alpha {alpha_a}/{alpha_c}, beta {beta}) mean {ploff_mean:.3} over {SEEDS} seeds (>= {target:.3}); td3_off mean {td3_mean:.3}, {td3_bad}/{SEEDS} diverged or below behavior (>= 7); l2 table {} rows, best point {l2_best:.3} -> {}",
            behavior.normalized,
            l2.rows.len(),
            csv.display()
        ),
    }
}

fn reward_scaling() -> Line {
    let mut r = rng::stream(0, "acceptance/scaling");
    let transitions: Vec<_> = (0..1000)
        .map(|_| Transition {
            s: (0..3).map(|_| r.gen_range(-1.0..1.0)).collect(),
            a: (0..2).map(|_| r.gen_range(-1.0..1.0)).collect(),
            r: r.gen_range(-50.0..30.0),
            s_next: (0..3).map(|_| r.gen_range(-1.0..1.0)).collect(),
            done: false,
        })
        .collect();
    let data = Dataset64::from_transitions("pointmass", &transitions).unwrap();
    let scaled = data.scale_rewards().unwrap();
    let min = scaled.rewards().iter().copied().fold(f64::INFINITY, f64::min);
    let max = scaled.rewards().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let back = scaled.unscale_rewards().unwrap();
    let err = back.rewards().iter().zip(data.rewards()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let value_err = transitions.iter().map(|t| (scaled.unscale_value(scaled.scale_value(t.r)) - t.r).abs()).fold(0.0, f64::max);
    Line {
        pass: min == 0.0 && max == 1.0 && err <= 1e-12 && value_err <= 1e-12,
        detail: format!("min {min}, max {max}, round trip error {err:.1e} / {value_err:.1e} (<= 1e-12)"),
    }
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let cfg = verify_cfg();
    let mut failures = 0;
    let mut report = |n: usize, name: &str, (line, elapsed): (Line, Duration)| {
        let tag = if line.pass { "PASS" } else { "FAIL" };
        println!("{tag} {n:>2} {name}: {} [{:.1}s]", line.detail, elapsed.as_secs_f64());
        failures += usize::from(!line.pass);
    };
    let suite = |f: fn(&VerifyConfig) -> ploff::Result<SuiteReport>, limit: Option<u64>| {
        let t = Instant::now();
        let rep = f(&cfg).unwrap();
        let elapsed = t.elapsed();
        (from_suite(rep, elapsed, limit.map(Duration::from_secs)), elapsed)
    };
    if run(1) {
        report(1, "pseudometric stability", suite(suite_axioms, Some(60)));
    }
    if run(2) {
        report(2, "contraction", suite(suite_contraction, None));
    }
    if run(3) {
        report(3, "fixed point", suite(suite_fixed_point, None));
    }
    if run(4) {
        report(4, "sampled convergence", suite(suite_sampled, Some(120)));
    }
    if run(5) {
        report(5, "gradient correctness", suite(suite_gradients, None));
    }
    if run(6) {
        let (mut line, elapsed) = timed(gridworld_quality);
        line.pass &= elapsed <= Duration::from_secs(15 * 60);
        report(6, "gridworld metric quality", (line, elapsed));
    }
    if run(7) || run(9) {
        let t = Instant::now();
        let pm = pointmass_setup();
        let setup = t.elapsed();
        if run(7) {
            let (line, elapsed) = timed(|| noise_monotonicity(&pm));
            report(7, "noise monotonicity", (line, elapsed + setup));
        }
        if run(8) {
            report(8, "knn exactness", suite(suite_knn, None));
        }
        if run(9) {
            let (mut line, elapsed) = timed(|| offline_behavior(&pm));
            line.pass &= elapsed + setup <= Duration::from_secs(3600);
            report(9, "offline behavior", (line, elapsed + setup));
        }
    } else if run(8) {
        report(8, "knn exactness", suite(suite_knn, None));
    }
    if run(10) {
        report(10, "reward scaling", timed(reward_scaling));
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
