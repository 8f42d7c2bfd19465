use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use ploff::agent::{
    evaluate_policy, evaluate_scripted, hyperparameter_sweep, train_agent, AgentConfig,
    BonusSource, SweepGrid, TargetSmoothing, Variant,
};
use ploff::bonus::{BonusForm, BonusSpec, NeighborIndex, RawPairIndex};
use ploff::container::Checkpoint;
use ploff::dataset::{collect_qlearning_dataset, collect_scripted_dataset, PolicyTag, QLearningConfig, GRIDWORLD_ID};
use ploff::env::{build_gridworld_with, build_pointmass, ContinuousEnv, GridMap, Gridworld, PointMassConfig, ScriptedPolicy};
use ploff::figures::{heatmap_path_correlation, noise_study, psi_heatmap, write_heatmap_csv, Perturbed};
use ploff::metric_approx::{train_metric, EmbedderShape, MetricTrainConfig};
use ploff::verify::{run_verify, VerifyConfig};
use ploff::{Agent, Dataset, Error, Metric, Result};

use crate::{
    AgentFlags, BuildKnn, Cli, Command, EnvKind, Eval, ExportFigures, FigureKind, GenData, Sweep, TrainAgent,
    TrainMetric, Verify,
};

/// What a command prints on success. `failed` marks a completed run whose
/// checks did not pass (verify).
pub struct Outcome {
    pub summary: String,
    pub failed: bool,
}

impl Outcome {
    fn ok(summary: Value) -> Self {
        Self { summary: summary.to_string(), failed: false }
    }
}

const BUNDLED_MAP: &str = "two_room.txt";

pub fn run(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::TrainMetric(a) => cmd_train_metric(cli, a),
        Command::BuildKnn(a) => build_knn(cli, a),
        Command::TrainAgent(a) => cmd_train_agent(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Sweep(a) => sweep(cli, a),
        Command::ExportFigures(a) => export_figures(cli, a),
        Command::Verify(a) => verify(cli, a),
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

/// Worker count: available cores, capped by `PLOFF_THREADS`.
pub fn worker_count() -> Result<usize> {
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var("PLOFF_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n.min(cores)),
            _ => Err(invalid(format!("PLOFF_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(cores),
    }
}

fn output_path(cli: &Cli, p: &Path) -> Result<PathBuf> {
    let path = cli.out_dir.join(p);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(path)
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn parse_list<T: std::str::FromStr>(what: &str, text: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|t| t.trim().parse::<T>().map_err(|_| invalid(format!("bad {what} entry {t:?}"))))
        .collect()
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).map_err(|e| with_path(e, path))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Io(io) => invalid(format!("{}: {io}", path.display())),
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    }
}

fn dataset_hash_of(ck: &Checkpoint) -> Option<&str> {
    ck.metadata.get("extra").and_then(|e| e.get("dataset_hash")).and_then(Value::as_str)
}

/// Loads a metric checkpoint and checks it was trained on `data`.
fn load_metric(path: &Path, data: &Dataset) -> Result<Metric> {
    let ck = Checkpoint::load(path).map_err(|e| with_path(e, path))?;
    let pair = Metric::from_checkpoint(&ck)?;
    if pair.state_dim != data.state_dim() || pair.action_dim != data.action_dim() {
        return Err(Error::DimensionMismatch(format!(
            "metric is ({}, {}) but the dataset is ({}, {})",
            pair.state_dim,
            pair.action_dim,
            data.state_dim(),
            data.action_dim()
        )));
    }
    match dataset_hash_of(&ck) {
        Some(h) if h == data.content_hash() => Ok(pair),
        Some(_) => Err(invalid(format!("{} was trained on a different dataset", path.display()))),
        None => Err(invalid(format!("{} does not record its dataset", path.display()))),
    }
}

fn load_index(path: &Path, pair: &Metric, data: &Dataset) -> Result<NeighborIndex<f32>> {
    let index = NeighborIndex::load(path).map_err(|e| with_path(e, path))?;
    index.check_compatible(pair, data)?;
    Ok(index)
}

fn resolve_map(map: Option<&Path>) -> Result<GridMap> {
    match map {
        None => Ok(GridMap::two_room()),
        Some(p) if p.exists() => GridMap::from_file(p).map_err(|e| with_path(e, p)),
        Some(p) if p.file_name().is_some_and(|n| n == BUNDLED_MAP) => Ok(GridMap::two_room()),
        Some(p) => Err(invalid(format!("map file {} not found", p.display()))),
    }
}

fn env_meta(data: &Dataset) -> Value {
    data.metadata().get("env").cloned().unwrap_or(Value::Null)
}

fn gridworld_of(data: &Dataset) -> Result<Gridworld<f32>> {
    let env = env_meta(data);
    if env.get("kind").and_then(Value::as_str) != Some(GRIDWORLD_ID) {
        return Err(invalid("dataset was not collected on a gridworld"));
    }
    let map = GridMap::parse(env.get("map").and_then(Value::as_str).unwrap_or_default())?;
    let num = |k: &str| env.get(k).and_then(Value::as_f64).ok_or_else(|| invalid(format!("dataset env lacks {k}")));
    let time_limit = env.get("time_limit").and_then(Value::as_u64).unwrap_or(50) as usize;
    build_gridworld_with(&map, time_limit, num("goal_reward")? as f32, num("absorbing_reward")? as f32)
}

fn pointmass_of(env: &Value) -> Result<ContinuousEnv<f32>> {
    if env.get("kind").and_then(Value::as_str) != Some("pointmass") {
        return Err(invalid("artifact was not produced on the point-mass task"));
    }
    let cfg: PointMassConfig = serde_json::from_value(env.get("config").cloned().unwrap_or(json!({})))?;
    build_pointmass(&cfg)
}

fn gen_data(cli: &Cli, a: &GenData) -> Result<Outcome> {
    let (data, env) = match a.env {
        EnvKind::Gridworld => {
            let map = resolve_map(a.map.as_deref())?;
            let time_limit = a.time_limit.unwrap_or(50);
            let absorbing = a.absorbing_reward.unwrap_or(a.goal_reward);
            let grid = build_gridworld_with::<f32>(&map, time_limit, a.goal_reward as f32, absorbing as f32)?;
            let cfg = QLearningConfig {
                episodes: a.episodes.unwrap_or(500),
                epsilon: a.epsilon,
                gamma: a.gamma,
                learning_rate: a.learning_rate,
                seed: cli.seed,
            };
            let env = json!({
                "kind": GRIDWORLD_ID,
                "map": map.to_string(),
                "time_limit": time_limit,
                "goal_reward": a.goal_reward,
                "absorbing_reward": absorbing,
            });
            (collect_qlearning_dataset(&grid.mdp, &cfg)?, env)
        }
        EnvKind::Pointmass => {
            let cfg = PointMassConfig { time_limit: a.time_limit.unwrap_or(100), ..Default::default() };
            let env = build_pointmass::<f32>(&cfg)?;
            let tag = PolicyTag::parse(&a.policy)?;
            let data = collect_scripted_dataset(&env, tag, a.noise, a.episodes.unwrap_or(100), cli.seed)?;
            (data, json!({ "kind": "pointmass", "config": cfg }))
        }
    };
    let data = data.with_metadata("env", env).with_metadata("seed", json!(cli.seed)).scale_rewards()?;
    let path = output_path(cli, &a.output)?;
    data.save(&path)?;
    let (lo, hi) = data.reward_range();
    Ok(Outcome::ok(json!({
        "command": "gen-data",
        "output": path,
        "n": data.len(),
        "state_dim": data.state_dim(),
        "action_dim": data.action_dim(),
        "reward_range": [lo, hi],
        "hash": data.content_hash(),
    })))
}

fn cmd_train_metric(cli: &Cli, a: &TrainMetric) -> Result<Outcome> {
    let data = load_dataset(&a.data)?;
    let cfg = MetricTrainConfig {
        steps: a.steps,
        learning_rate: a.learning_rate,
        batch: a.batch,
        n_action_samples: a.action_samples,
        tau: a.tau,
        gamma: a.gamma,
        shape: EmbedderShape { hidden: a.hidden, embed_dim: a.embed_dim },
        shared_action: !a.independent_actions,
        log_every: a.log_every,
        seed: cli.seed,
    };
    let (pair, log) = train_metric(&data, &cfg)?;
    let extra = json!({ "dataset_hash": data.content_hash(), "steps": a.steps, "seed": cli.seed });
    let path = output_path(cli, &a.output)?;
    let ck = pair.to_checkpoint(extra);
    ck.save(&path)?;
    let csv = output_path(cli, &a.loss_csv)?;
    write_with(&csv, |w| log.write_csv(w))?;
    let last = log.rows.last();
    Ok(Outcome::ok(json!({
        "command": "train-metric",
        "output": path,
        "loss_csv": csv,
        "log_rows": log.rows.len(),
        "final_loss_phi": last.map(|r| r.loss_phi),
        "final_loss_psi": last.map(|r| r.loss_psi),
    })))
}

fn build_knn(cli: &Cli, a: &BuildKnn) -> Result<Outcome> {
    let threads = worker_count()?;
    let data = load_dataset(&a.data)?;
    let pair = load_metric(&a.metric, &data)?;
    let index = NeighborIndex::build(&pair, &data, a.k, threads)?;
    let path = output_path(cli, &a.output)?;
    index.save(&path)?;
    Ok(Outcome::ok(json!({
        "command": "build-knn",
        "output": path,
        "n": index.len(),
        "k": a.k,
        "list_len": index.list_len(),
        "threads": threads,
    })))
}

fn agent_config(flags: &AgentFlags, bonus: BonusSpec, steps: usize, seed: u64) -> Result<AgentConfig> {
    let hidden: Vec<usize> = parse_list("hidden width", &flags.hidden)?;
    let hidden: [usize; 2] =
        hidden.try_into().map_err(|_| invalid("--hidden takes exactly two widths, e.g. 256,256"))?;
    let cfg = AgentConfig {
        steps,
        batch: flags.batch,
        bonus,
        variant: Variant::parse(&flags.variant)?,
        policy_delay: flags.policy_delay,
        seed,
        gamma: flags.gamma,
        tau: flags.tau,
        learning_rate: flags.learning_rate,
        hidden,
        single_critic: flags.single_critic,
        target_smoothing: flags.target_noise.map(|noise| TargetSmoothing { noise, clip: flags.noise_clip }),
        ..Default::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Artifacts behind the bonus of one variant.
struct BonusArtifacts {
    learned: Option<(Metric, NeighborIndex<f32>)>,
    raw: Option<RawPairIndex<f32>>,
}

impl BonusArtifacts {
    fn load(variant: Variant, data: &Dataset, metric: Option<&Path>, index: Option<&Path>) -> Result<Self> {
        let mut out = Self { learned: None, raw: None };
        match variant {
            Variant::Ploff => {
                let (Some(m), Some(i)) = (metric, index) else {
                    return Err(invalid("the ploff variant needs --metric and --index"));
                };
                let pair = load_metric(m, data)?;
                let index = load_index(i, &pair, data)?;
                out.learned = Some((pair, index));
            }
            Variant::PloffL2 => out.raw = Some(RawPairIndex::build(data)?),
            Variant::Td3Off => {}
        }
        Ok(out)
    }

    fn source(&self, variant: Variant) -> Result<BonusSource<'_, f32>> {
        BonusSource::for_variant(variant, self.learned.as_ref().map(|(p, i)| (p, i)), self.raw.as_ref())
    }
}

fn require_continuous(data: &Dataset) -> Result<()> {
    if data.action_space().is_discrete() {
        return Err(invalid("agents need a continuous-action dataset"));
    }
    Ok(())
}

fn cmd_train_agent(cli: &Cli, a: &TrainAgent) -> Result<Outcome> {
    let data = load_dataset(&a.data)?;
    require_continuous(&data)?;
    let bonus = BonusSpec {
        form: BonusForm::parse(&a.agent.bonus_form)?,
        beta: a.beta,
        alpha_actor: a.alpha_a,
        alpha_critic: a.alpha_c,
    };
    let cfg = agent_config(&a.agent, bonus, a.steps, cli.seed)?;
    let artifacts = BonusArtifacts::load(cfg.variant, &data, a.metric.as_deref(), a.index.as_deref())?;
    let source = artifacts.source(cfg.variant)?;
    let (params, log) = train_agent(&data, &source, &cfg)?;
    let extra = json!({
        "dataset_hash": data.content_hash(),
        "variant": cfg.variant.name(),
        "bonus": { "form": cfg.bonus.form.name(), "beta": a.beta, "alpha_a": a.alpha_a, "alpha_c": a.alpha_c },
        "steps": a.steps,
        "seed": cli.seed,
        "env": env_meta(&data),
    });
    let path = output_path(cli, &a.output)?;
    params.to_checkpoint(extra).save(&path)?;
    let csv = output_path(cli, &a.log_csv)?;
    write_with(&csv, |w| log.write_csv(w))?;
    Ok(Outcome::ok(json!({
        "command": "train-agent",
        "output": path,
        "log_csv": csv,
        "variant": cfg.variant.name(),
        "log_rows": log.rows.len(),
    })))
}

fn eval(cli: &Cli, a: &Eval) -> Result<Outcome> {
    let (label, reference, report) = match (&a.agent, &a.behavior, &a.data) {
        (Some(p), _, _) => {
            let ck = Checkpoint::load(p).map_err(|e| with_path(e, p))?;
            let agent = Agent::from_checkpoint(&ck)?;
            let env_value = ck.metadata.get("extra").and_then(|e| e.get("env")).cloned().unwrap_or(Value::Null);
            let env = pointmass_of(&env_value)?;
            let reference = env.reference_returns(a.reference_episodes, cli.seed)?;
            (p.display().to_string(), reference, evaluate_policy(&env, &agent, a.episodes, reference)?)
        }
        (None, Some(tag), Some(d)) => {
            let env = pointmass_of(&env_meta(&load_dataset(d)?))?;
            let policy =
                ScriptedPolicy::parse(tag).ok_or_else(|| invalid(format!("unknown behaviour policy {tag:?}")))?;
            let reference = env.reference_returns(a.reference_episodes, cli.seed)?;
            (tag.clone(), reference, evaluate_scripted(&env, policy, a.noise, a.episodes, cli.seed, reference)?)
        }
        _ => return Err(invalid("eval needs --agent, or --behavior with --data")),
    };
    let body = json!({
        "command": "eval",
        "policy": label,
        "mean": report.mean,
        "std": report.std,
        "normalized": report.normalized,
        "returns": report.returns,
        "reference": { "random": reference.0, "expert": reference.1 },
    });
    if let Some(out) = &a.output {
        let path = output_path(cli, out)?;
        std::fs::write(&path, serde_json::to_string_pretty(&body)? + "\n")?;
    }
    Ok(Outcome::ok(body))
}

fn sweep(cli: &Cli, a: &Sweep) -> Result<Outcome> {
    let data = load_dataset(&a.data)?;
    require_continuous(&data)?;
    let env = pointmass_of(&env_meta(&data))?;
    let base = agent_config(&a.agent, BonusSpec { form: BonusForm::parse(&a.agent.bonus_form)?, ..Default::default() }, a.steps, cli.seed)?;
    let artifacts = BonusArtifacts::load(base.variant, &data, a.metric.as_deref(), a.index.as_deref())?;
    let source = artifacts.source(base.variant)?;
    let grid = SweepGrid {
        alpha_actor: parse_list("alpha_a", &a.alpha_a_grid)?,
        alpha_critic: parse_list("alpha_c", &a.alpha_c_grid)?,
        beta: parse_list("beta", &a.beta_grid)?,
        tied: a.tied,
    };
    let seeds: Vec<u64> = match &a.seeds {
        Some(s) => parse_list("seed", s)?,
        None => vec![cli.seed],
    };
    let reference = env.reference_returns(a.reference_episodes, cli.seed)?;
    let table = hyperparameter_sweep(&data, &source, &env, reference, &grid, &base, &seeds, a.episodes)?;
    let path = output_path(cli, &a.output)?;
    write_with(&path, |w| table.write_csv(w))?;
    let best = table.by_point().first().map(|&((aa, ac, b), score)| json!({
        "alpha_a": aa, "alpha_c": ac, "beta": b, "mean_normalized": score,
    }));
    Ok(Outcome::ok(json!({
        "command": "sweep",
        "output": path,
        "rows": table.rows.len(),
        "diverged": table.rows.iter().filter(|r| r.diverged).count(),
        "best": best,
    })))
}

fn parse_anchor(text: &str, grid: &Gridworld<f32>) -> Result<(usize, usize)> {
    if text == "goal" {
        return Ok(grid.cells[grid.goal]);
    }
    match parse_list::<usize>("anchor", text)?.as_slice() {
        &[r, c] => Ok((r, c)),
        _ => Err(invalid("--anchor takes `goal` or `row,col`")),
    }
}

fn export_figures(cli: &Cli, a: &ExportFigures) -> Result<Outcome> {
    fn need<'p>(p: &'p Option<PathBuf>, flag: &str) -> Result<&'p Path> {
        p.as_deref().ok_or_else(|| invalid(format!("this figure needs --{flag}")))
    }
    match a.kind {
        FigureKind::Heatmap => {
            let data = load_dataset(need(&a.data, "data")?)?;
            let pair = load_metric(need(&a.metric, "metric")?, &data)?;
            let grid = gridworld_of(&data)?;
            let anchor = parse_anchor(&a.anchor, &grid)?;
            let heat = psi_heatmap(&grid, &pair, anchor)?;
            let (rho, cells) = heatmap_path_correlation(&grid, &heat, anchor, a.radius)?;
            let path = output_path(cli, a.output.as_deref().unwrap_or(Path::new("heatmap.csv")))?;
            write_with(&path, |w| write_heatmap_csv(&heat, w))?;
            Ok(Outcome::ok(json!({
                "command": "export-figures",
                "kind": "heatmap",
                "output": path,
                "anchor": [anchor.0, anchor.1],
                "path_spearman": rho,
                "cells": cells,
            })))
        }
        FigureKind::Curves => {
            let src = need(&a.log_csv, "log-csv")?;
            let text = std::fs::read_to_string(src).map_err(|e| with_path(e.into(), src))?;
            if !text.starts_with("step,") {
                return Err(invalid(format!("{} is not a training log CSV", src.display())));
            }
            let path = output_path(cli, a.output.as_deref().unwrap_or(Path::new("curves.csv")))?;
            std::fs::write(&path, &text)?;
            Ok(Outcome::ok(json!({
                "command": "export-figures",
                "kind": "curves",
                "output": path,
                "rows": text.lines().count().saturating_sub(1),
            })))
        }
        FigureKind::Noise => {
            let data = load_dataset(need(&a.data, "data")?)?;
            let pair = load_metric(need(&a.metric, "metric")?, &data)?;
            let lambdas: Vec<f64> = parse_list("lambda", &a.lambdas)?;
            let study = noise_study(&pair, &data, &lambdas, a.samples, cli.seed)?;
            let path = output_path(cli, a.output.as_deref().unwrap_or(Path::new("noise.csv")))?;
            write_with(&path, |w| study.write_csv(w))?;
            let violations: serde_json::Map<String, Value> =
                study.sample_violations.iter().map(|(p, v)| (p.name().to_string(), json!(v))).collect();
            Ok(Outcome::ok(json!({
                "command": "export-figures",
                "kind": "noise",
                "output": path,
                "state_means": study.means(Perturbed::State),
                "action_means": study.means(Perturbed::Action),
                "sample_violations": violations,
            })))
        }
    }
}

fn verify(cli: &Cli, a: &Verify) -> Result<Outcome> {
    let cfg = VerifyConfig {
        trials: a.trials,
        sampled_seeds: a.sampled_seeds,
        knn_instances: a.knn_instances,
        seed: cli.seed,
        inject_triangle_violation: a.inject_triangle,
    };
    let report = run_verify(&cfg)?;
    Ok(Outcome { summary: report.to_string().trim_end().to_string(), failed: !report.all_passed() })
}
