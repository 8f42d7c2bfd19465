//! Logged transitions: collection, reward scaling, batch sampling and the
//! `PLDS1` file format.
//!
//! `PLDS1` layout: the 5 magic bytes `PLDS1`, one JSON header line
//! terminated by `\n`, then `n` little-endian `f32` records laid out as
//! `[s | a | r | s_next | done]` with `done` stored as 0.0 or 1.0.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{ContinuousEnv, ScriptedPolicy, TabularMdp, POINTMASS_ID};
use crate::error::{Error, Result};
use crate::{rng, Scalar};

pub const DATASET_MAGIC: &[u8; 5] = b"PLDS1";
pub const DATASET_VERSION: u32 = 1;
pub const GRIDWORLD_ID: &str = "gridworld";

/// One logged transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition<T> {
    pub s: Vec<T>,
    pub a: Vec<T>,
    pub r: T,
    pub s_next: Vec<T>,
    pub done: bool,
}

/// Action support used when sampling actions uniformly.
#[derive(Debug, Clone, PartialEq)]
pub enum ActionSpace<T> {
    /// Finite actions, one-hot encoded.
    Discrete(usize),
    /// Axis-aligned box.
    Box { low: Vec<T>, high: Vec<T> },
}

impl<T: Scalar> ActionSpace<T> {
    pub fn dim(&self) -> usize {
        match self {
            ActionSpace::Discrete(n) => *n,
            ActionSpace::Box { low, .. } => low.len(),
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, ActionSpace::Discrete(_))
    }
}

/// Immutable set of transitions stored column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDataset<T> {
    env_id: String,
    states: Array2<T>,
    actions: Array2<T>,
    rewards: Array1<T>,
    next_states: Array2<T>,
    dones: Vec<bool>,
    reward_min: T,
    reward_max: T,
    scaled: bool,
    metadata: BTreeMap<String, serde_json::Value>,
}

/// A batch of transitions gathered into matrices, rows aligned.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub indices: Vec<usize>,
    pub states: Array2<T>,
    pub actions: Array2<T>,
    pub rewards: Array1<T>,
    pub next_states: Array2<T>,
    pub dones: Array1<T>,
}

/// Two independent batches of the same size.
#[derive(Debug, Clone)]
pub struct PairBatch<T> {
    pub first: Batch<T>,
    pub second: Batch<T>,
}

impl<T: Scalar> TransitionDataset<T> {
    pub fn from_transitions(env_id: impl Into<String>, transitions: &[Transition<T>]) -> Result<Self> {
        let first = transitions
            .first()
            .ok_or_else(|| Error::validation("dataset needs at least one transition"))?;
        let (ds, da, n) = (first.s.len(), first.a.len(), transitions.len());
        let mut states = Array2::zeros((n, ds));
        let mut actions = Array2::zeros((n, da));
        let mut next_states = Array2::zeros((n, ds));
        let mut rewards = Array1::zeros(n);
        let mut dones = Vec::with_capacity(n);
        for (i, t) in transitions.iter().enumerate() {
            if t.s.len() != ds || t.s_next.len() != ds || t.a.len() != da {
                return Err(Error::DimensionMismatch(format!("transition {i} has inconsistent dims")));
            }
            states.row_mut(i).assign(&ArrayView1::from(&t.s));
            actions.row_mut(i).assign(&ArrayView1::from(&t.a));
            next_states.row_mut(i).assign(&ArrayView1::from(&t.s_next));
            rewards[i] = t.r;
            dones.push(t.done);
        }
        Self::from_parts(env_id.into(), states, actions, rewards, next_states, dones)
    }

    fn from_parts(
        env_id: String,
        states: Array2<T>,
        actions: Array2<T>,
        rewards: Array1<T>,
        next_states: Array2<T>,
        dones: Vec<bool>,
    ) -> Result<Self> {
        if rewards.is_empty() {
            return Err(Error::validation("dataset needs at least one transition"));
        }
        if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
            return Err(Error::NonFinite(format!("reward of transition {i}")));
        }
        let reward_min = rewards.iter().copied().fold(T::infinity(), T::min);
        let reward_max = rewards.iter().copied().fold(T::neg_infinity(), T::max);
        Ok(Self {
            env_id,
            states,
            actions,
            rewards,
            next_states,
            dones,
            reward_min,
            reward_max,
            scaled: false,
            metadata: BTreeMap::new(),
        })
    }

    pub fn env_id(&self) -> &str {
        &self.env_id
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn action_dim(&self) -> usize {
        self.actions.ncols()
    }

    pub fn states(&self) -> &Array2<T> {
        &self.states
    }

    pub fn actions(&self) -> &Array2<T> {
        &self.actions
    }

    pub fn rewards(&self) -> &Array1<T> {
        &self.rewards
    }

    pub fn next_states(&self) -> &Array2<T> {
        &self.next_states
    }

    pub fn dones(&self) -> &[bool] {
        &self.dones
    }

    /// Raw reward range (the pre-scaling range once scaled).
    pub fn reward_range(&self) -> (T, T) {
        (self.reward_min, self.reward_max)
    }

    pub fn is_scaled(&self) -> bool {
        self.scaled
    }

    pub fn metadata(&self) -> &BTreeMap<String, serde_json::Value> {
        &self.metadata
    }

    pub fn with_metadata(mut self, key: &str, value: serde_json::Value) -> Self {
        self.metadata.insert(key.to_string(), value);
        self
    }

    pub fn transition(&self, i: usize) -> Transition<T> {
        Transition {
            s: self.states.row(i).to_vec(),
            a: self.actions.row(i).to_vec(),
            r: self.rewards[i],
            s_next: self.next_states.row(i).to_vec(),
            done: self.dones[i],
        }
    }

    /// Concatenation of datasets with equal env and dims.
    pub fn concat(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::validation("nothing to concatenate"))?;
        let mut all = Vec::new();
        for p in parts {
            if p.env_id != first.env_id
                || p.state_dim() != first.state_dim()
                || p.action_dim() != first.action_dim()
                || p.scaled
            {
                return Err(Error::DimensionMismatch("incompatible datasets".into()));
            }
            all.extend((0..p.len()).map(|i| p.transition(i)));
        }
        Self::from_transitions(first.env_id.clone(), &all)
    }

    /// Support for uniform action sampling, derived from the env id.
    pub fn action_space(&self) -> ActionSpace<T> {
        if self.env_id.starts_with(GRIDWORLD_ID) {
            ActionSpace::Discrete(self.action_dim())
        } else {
            ActionSpace::Box {
                low: vec![-T::one(); self.action_dim()],
                high: vec![T::one(); self.action_dim()],
            }
        }
    }

    /// Maps a raw reward through the stored affine scaling (identity when
    /// unscaled).
    pub fn scale_value(&self, r: T) -> T {
        if self.scaled {
            (r - self.reward_min) / (self.reward_max - self.reward_min)
        } else {
            r
        }
    }

    pub fn unscale_value(&self, r: T) -> T {
        if self.scaled {
            r * (self.reward_max - self.reward_min) + self.reward_min
        } else {
            r
        }
    }

    /// Maps rewards affinely onto [0, 1]: `r <- (r - min) / (max - min)`.
    pub fn scale_rewards(&self) -> Result<Self> {
        if self.scaled {
            return Err(Error::validation("dataset rewards are already scaled"));
        }
        let (lo, hi) = (self.reward_min, self.reward_max);
        if !(hi > lo) {
            return Err(Error::validation(format!(
                "cannot scale constant rewards (min = max = {lo})"
            )));
        }
        let mut out = self.clone();
        out.rewards.mapv_inplace(|r| (r - lo) / (hi - lo));
        out.scaled = true;
        Ok(out)
    }

    /// Inverse of [`Self::scale_rewards`].
    pub fn unscale_rewards(&self) -> Result<Self> {
        if !self.scaled {
            return Err(Error::validation("dataset rewards are not scaled"));
        }
        let (lo, hi) = (self.reward_min, self.reward_max);
        let mut out = self.clone();
        out.rewards.mapv_inplace(|r| r * (hi - lo) + lo);
        out.scaled = false;
        Ok(out)
    }

    /// Gathers the given rows into a batch.
    pub fn gather(&self, indices: Vec<usize>) -> Batch<T> {
        let b = indices.len();
        let mut states = Array2::zeros((b, self.state_dim()));
        let mut actions = Array2::zeros((b, self.action_dim()));
        let mut next_states = Array2::zeros((b, self.state_dim()));
        let mut rewards = Array1::zeros(b);
        let mut dones = Array1::zeros(b);
        for (row, &i) in indices.iter().enumerate() {
            states.row_mut(row).assign(&self.states.row(i));
            actions.row_mut(row).assign(&self.actions.row(i));
            next_states.row_mut(row).assign(&self.next_states.row(i));
            rewards[row] = self.rewards[i];
            dones[row] = if self.dones[i] { T::one() } else { T::zero() };
        }
        Batch { indices, states, actions, rewards, next_states, dones }
    }

    /// Uniform draws with replacement.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Batch<T>> {
        if batch == 0 {
            return Err(Error::validation("batch size must be at least 1"));
        }
        let idx = (0..batch).map(|_| rng.gen_range(0..self.len())).collect();
        Ok(self.gather(idx))
    }

    /// Two independent uniform batches, each of size `batch`.
    pub fn sample_pair_batch<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<PairBatch<T>> {
        let first = self.sample_batch(batch, rng)?;
        let second = self.sample_batch(batch, rng)?;
        Ok(PairBatch { first, second })
    }

    fn header(&self) -> DatasetHeader {
        DatasetHeader {
            version: DATASET_VERSION,
            env_id: self.env_id.clone(),
            state_dim: self.state_dim(),
            action_dim: self.action_dim(),
            n: self.len(),
            reward_min: self.reward_min.as_f64(),
            reward_max: self.reward_max.as_f64(),
            scaled: self.scaled,
            metadata: self.metadata.clone(),
        }
    }

    /// Serialized `PLDS1` bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(
            serde_json::to_string(&self.header()).expect("header serializes").as_bytes(),
        );
        out.push(b'\n');
        let mut put = |v: T| out.extend_from_slice(&v.as_f32().to_le_bytes());
        for i in 0..self.len() {
            self.states.row(i).iter().for_each(|&v| put(v));
            self.actions.row(i).iter().for_each(|&v| put(v));
            put(self.rewards[i]);
            self.next_states.row(i).iter().for_each(|&v| put(v));
            put(if self.dones[i] { T::one() } else { T::zero() });
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let body = bytes
            .strip_prefix(DATASET_MAGIC.as_slice())
            .ok_or_else(|| Error::format("not a PLDS1 dataset (bad magic)"))?;
        let nl = body
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format("dataset header is not terminated"))?;
        let header: DatasetHeader = serde_json::from_slice(&body[..nl])?;
        if header.version != DATASET_VERSION {
            return Err(Error::format(format!(
                "unsupported dataset version {} (expected {DATASET_VERSION})",
                header.version
            )));
        }
        let (ds, da, n) = (header.state_dim, header.action_dim, header.n);
        let width = 2 * ds + da + 2;
        let payload = &body[nl + 1..];
        if payload.len() != n * width * 4 {
            return Err(Error::format(format!(
                "header declares {n} records of {} bytes but payload holds {} bytes",
                width * 4,
                payload.len()
            )));
        }
        if n == 0 {
            return Err(Error::format("dataset declares zero records"));
        }
        let mut floats = payload
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64));
        let mut states = Array2::zeros((n, ds));
        let mut actions = Array2::zeros((n, da));
        let mut next_states = Array2::zeros((n, ds));
        let mut rewards = Array1::zeros(n);
        let mut dones = Vec::with_capacity(n);
        let mut next = || floats.next().expect("length checked");
        for i in 0..n {
            states.row_mut(i).iter_mut().for_each(|v| *v = next());
            actions.row_mut(i).iter_mut().for_each(|v| *v = next());
            rewards[i] = next();
            next_states.row_mut(i).iter_mut().for_each(|v| *v = next());
            let d = next();
            if d != T::zero() && d != T::one() {
                return Err(Error::format(format!("record {i} has done flag {d}")));
            }
            dones.push(d == T::one());
        }
        let mut out = Self::from_parts(header.env_id, states, actions, rewards, next_states, dones)?;
        out.reward_min = T::lit(header.reward_min);
        out.reward_max = T::lit(header.reward_max);
        out.scaled = header.scaled;
        out.metadata = header.metadata;
        if out.scaled && !(out.reward_max > out.reward_min) {
            return Err(Error::format("scaled dataset with empty raw reward range"));
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialized dataset; chained artifacts record it.
    pub fn content_hash(&self) -> String {
        hex_digest(&self.to_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    version: u32,
    env_id: String,
    state_dim: usize,
    action_dim: usize,
    n: usize,
    reward_min: f64,
    reward_max: f64,
    scaled: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    metadata: BTreeMap<String, serde_json::Value>,
}

/// Settings of the epsilon-greedy tabular Q-learning collector.
#[derive(Debug, Clone, PartialEq)]
pub struct QLearningConfig {
    pub episodes: usize,
    pub epsilon: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for QLearningConfig {
    fn default() -> Self {
        Self { episodes: 500, epsilon: 0.1, gamma: 0.99, learning_rate: 0.1, seed: 0 }
    }
}

/// Runs epsilon-greedy Q-learning (zero-initialized table, greedy ties broken
/// uniformly) and logs every visited transition with one-hot encodings.
///
/// Each terminal state reached is additionally logged once per action as an
/// absorbing self-transition, so the metric sees the goal as a state.
/// Rewards are left unscaled.
pub fn collect_qlearning_dataset<T: Scalar>(
    mdp: &TabularMdp<T>,
    cfg: &QLearningConfig,
) -> Result<TransitionDataset<T>> {
    if cfg.episodes == 0 {
        return Err(Error::validation("need at least one episode"));
    }
    if !(0.0..=1.0).contains(&cfg.epsilon) {
        return Err(Error::validation(format!("epsilon must be in [0, 1], got {}", cfg.epsilon)));
    }
    if !(0.0..1.0).contains(&cfg.gamma) {
        return Err(Error::validation(format!("gamma must be in [0, 1), got {}", cfg.gamma)));
    }
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate <= 1.0) {
        return Err(Error::validation("learning rate must be in (0, 1]"));
    }
    let mut rng = rng::stream(cfg.seed, rng::DATA);
    let na = mdp.num_actions();
    let mut q = vec![0.0f64; mdp.num_pairs()];
    let mut log = Vec::new();
    let mut terminals_seen: Vec<usize> = Vec::new();
    let record = |s: usize, a: usize, r: T, n: usize, done: bool| Transition {
        s: mdp.state_one_hot(s),
        a: mdp.action_one_hot(a),
        r,
        s_next: mdp.state_one_hot(n),
        done,
    };
    for _ in 0..cfg.episodes {
        let mut s = *mdp.start_states().choose(&mut rng).expect("non-empty");
        for _ in 0..mdp.time_limit() {
            let a = if rng.gen::<f64>() < cfg.epsilon {
                rng.gen_range(0..na)
            } else {
                let row = &q[s * na..(s + 1) * na];
                let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let ties: Vec<usize> = (0..na).filter(|&a| row[a] == best).collect();
                *ties.choose(&mut rng).expect("non-empty")
            };
            let step = mdp.step(s, a)?;
            log.push(record(s, a, step.reward, step.next_state, step.done));
            let bootstrap = if step.done {
                0.0
            } else {
                let n = step.next_state;
                q[n * na..(n + 1) * na].iter().copied().fold(f64::NEG_INFINITY, f64::max)
            };
            let target = step.reward.as_f64() + cfg.gamma * bootstrap;
            let p = s * na + a;
            q[p] += cfg.learning_rate * (target - q[p]);
            s = step.next_state;
            if step.done {
                if !terminals_seen.contains(&s) {
                    terminals_seen.push(s);
                }
                break;
            }
        }
    }
    for &t in &terminals_seen {
        for a in 0..na {
            let step = mdp.step(t, a)?;
            log.push(record(t, a, step.reward, step.next_state, true));
        }
    }
    Ok(TransitionDataset::from_transitions(GRIDWORLD_ID, &log)?
        .with_metadata("collector", serde_json::json!("q-learning"))
        .with_metadata("episodes", serde_json::json!(cfg.episodes))
        .with_metadata("epsilon", serde_json::json!(cfg.epsilon))
        .with_metadata("gamma", serde_json::json!(cfg.gamma))
        .with_metadata("learning_rate", serde_json::json!(cfg.learning_rate)))
}

/// Behaviour tier for scripted point-mass collection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyTag {
    Random,
    Medium,
    Expert,
    /// Expert episodes followed by random episodes.
    Mixture,
}

impl PolicyTag {
    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "random" => Ok(Self::Random),
            "medium" => Ok(Self::Medium),
            "expert" => Ok(Self::Expert),
            "mixture" => Ok(Self::Mixture),
            other => Err(Error::validation(format!(
                "unknown policy tag {other:?} (expected random|medium|expert|mixture)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Medium => "medium",
            Self::Expert => "expert",
            Self::Mixture => "mixture",
        }
    }
}

/// Rolls out a scripted policy for `episodes` full-length episodes from the
/// start state. Episodes are truncated by the time limit, so `done` is never
/// set and `n = episodes * time_limit` (twice that for `Mixture`).
pub fn collect_scripted_dataset<T: Scalar>(
    env: &ContinuousEnv<T>,
    tag: PolicyTag,
    noise_scale: f64,
    episodes: usize,
    seed: u64,
) -> Result<TransitionDataset<T>> {
    if episodes == 0 {
        return Err(Error::validation("need at least one episode"));
    }
    if !(noise_scale >= 0.0) {
        return Err(Error::validation("noise scale must be non-negative"));
    }
    let single = |policy: ScriptedPolicy, stream: &str| -> Result<TransitionDataset<T>> {
        let mut rng = rng::stream(seed, stream);
        let mut log = Vec::with_capacity(episodes * env.time_limit);
        for _ in 0..episodes {
            let mut s = env.start_state.clone();
            for _ in 0..env.time_limit {
                let a = policy.act(env, &s, noise_scale, &mut rng);
                let (n, r) = env.step(&s, &a)?;
                log.push(Transition { s: s.clone(), a, r, s_next: n.clone(), done: false });
                s = n;
            }
        }
        TransitionDataset::from_transitions(POINTMASS_ID, &log)
    };
    let data = match tag {
        PolicyTag::Random => single(ScriptedPolicy::Random, "data/random")?,
        PolicyTag::Medium => single(ScriptedPolicy::Medium, "data/medium")?,
        PolicyTag::Expert => single(ScriptedPolicy::Expert, "data/expert")?,
        PolicyTag::Mixture => TransitionDataset::concat(&[
            single(ScriptedPolicy::Expert, "data/expert")?,
            single(ScriptedPolicy::Random, "data/random")?,
        ])?,
    };
    Ok(data
        .with_metadata("collector", serde_json::json!(tag.name()))
        .with_metadata("episodes", serde_json::json!(episodes))
        .with_metadata("noise_scale", serde_json::json!(noise_scale)))
}
