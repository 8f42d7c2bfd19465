//! Siamese approximation of the pseudometric.
//!
//! `Phi` embeds concatenated state-action pairs and `Psi` embeds states; both
//! distances are Euclidean norms of embedding differences, so they are
//! pseudometrics for any parameters. `Phi` regresses the sampled operator
//! image `|r1 - r2| + gamma |Psi'(s1') - Psi'(s2')|`, and `Psi` regresses
//! the action-averaged `Phi'` distance, where primes denote the slowly
//! averaged target copies.

use std::io::Write;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::{Checkpoint, Tensor};
use crate::dataset::{ActionSpace, PairBatch, TransitionDataset};
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, Gradients, Mlp};
use crate::{rng, Scalar};

/// Rows per forward pass when evaluating the bootstrap target of the
/// `Psi` loss.
const TARGET_CHUNK_ROWS: usize = 1 << 15;

/// Network sizes: one hidden layer (rectified) and a linear embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderShape {
    pub hidden: usize,
    pub embed_dim: usize,
}

impl Default for EmbedderShape {
    fn default() -> Self {
        Self { hidden: 1024, embed_dim: 32 }
    }
}

/// The two Siamese networks, their targets and the loss constants.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderPair<T> {
    pub phi: Mlp<T>,
    pub psi: Mlp<T>,
    pub phi_target: Mlp<T>,
    pub psi_target: Mlp<T>,
    pub state_dim: usize,
    pub action_dim: usize,
    pub gamma: T,
    pub tau: T,
    pub n_action_samples: usize,
    pub action_space: ActionSpace<T>,
    /// Feed the same sampled action to both states in the `Psi` target.
    /// `false` draws independent actions per state.
    pub shared_action: bool,
}

fn embedder_spec(shape: EmbedderShape) -> [(usize, Activation); 2] {
    [(shape.hidden, Activation::Relu), (shape.embed_dim, Activation::Identity)]
}

/// Fresh networks with targets copied from the online parameters.
pub fn init_embedders<T: Scalar>(
    state_dim: usize,
    action_space: ActionSpace<T>,
    shape: EmbedderShape,
    seed: u64,
) -> Result<EmbedderPair<T>> {
    let action_dim = action_space.dim();
    if state_dim == 0 || action_dim == 0 || shape.hidden == 0 || shape.embed_dim == 0 {
        return Err(Error::validation("embedder dimensions must be positive"));
    }
    let mut rng = rng::stream(seed, rng::INIT);
    let spec = embedder_spec(shape);
    let phi = Mlp::new(state_dim + action_dim, &spec, &mut rng);
    let psi = Mlp::new(state_dim, &spec, &mut rng);
    Ok(EmbedderPair {
        phi_target: phi.clone(),
        psi_target: psi.clone(),
        phi,
        psi,
        state_dim,
        action_dim,
        gamma: T::lit(0.9),
        tau: T::lit(0.005),
        n_action_samples: 256,
        action_space,
        shared_action: true,
    })
}

fn row_norms<T: Scalar>(a: &Array2<T>) -> Array1<T> {
    a.rows().into_iter().map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt()).collect()
}

fn concat_pairs<T: Scalar>(s: ArrayView2<T>, a: ArrayView2<T>) -> Array2<T> {
    concatenate![Axis(1), s, a]
}

/// `grad_out` for a batch of norms `|e1 - e2|` weighted by `coef`: rows
/// `coef * (e1 - e2) / |e1 - e2|` on top, the negation below. Zero where
/// the embeddings coincide.
fn norm_gradient<T: Scalar>(diff: &Array2<T>, norms: &Array1<T>, coef: &Array1<T>) -> Array2<T> {
    let b = diff.nrows();
    let mut g = Array2::zeros((2 * b, diff.ncols()));
    for i in 0..b {
        if norms[i] > T::zero() {
            let scale = coef[i] / norms[i];
            for (j, &d) in diff.row(i).iter().enumerate() {
                g[[i, j]] = scale * d;
                g[[b + i, j]] = -scale * d;
            }
        }
    }
    g
}

impl<T: Scalar> EmbedderPair<T> {
    pub fn embed_dim(&self) -> usize {
        self.phi.output_dim()
    }

    pub fn shape(&self) -> EmbedderShape {
        EmbedderShape { hidden: self.phi.widths()[0], embed_dim: self.phi.output_dim() }
    }

    pub fn with_gamma(mut self, gamma: T) -> Result<Self> {
        if !(gamma >= T::zero() && gamma < T::one()) {
            return Err(Error::validation(format!("metric gamma must be in [0, 1), got {gamma}")));
        }
        self.gamma = gamma;
        Ok(self)
    }

    fn check_state_dim(&self, n: usize) -> Result<()> {
        if n != self.state_dim {
            return Err(Error::DimensionMismatch(format!(
                "state width {n}, metric expects {}",
                self.state_dim
            )));
        }
        Ok(())
    }

    fn check_action_dim(&self, n: usize) -> Result<()> {
        if n != self.action_dim {
            return Err(Error::DimensionMismatch(format!(
                "action width {n}, metric expects {}",
                self.action_dim
            )));
        }
        Ok(())
    }

    /// `Phi(s, a)` for each row.
    pub fn embed_pairs(&self, states: ArrayView2<T>, actions: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_state_dim(states.ncols())?;
        self.check_action_dim(actions.ncols())?;
        Ok(self.phi.forward(concat_pairs(states, actions).view()))
    }

    /// `Psi(s)` for each row.
    pub fn embed_states(&self, states: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_state_dim(states.ncols())?;
        Ok(self.psi.forward(states))
    }

    /// `d_Phi(s1, a1; s2, a2) = |Phi(s1, a1) - Phi(s2, a2)|`.
    pub fn d_phi(&self, s1: &[T], a1: &[T], s2: &[T], a2: &[T]) -> Result<T> {
        let s = Array2::from_shape_vec((2, s1.len()), [s1, s2].concat())
            .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
        if s2.len() != s1.len() || a2.len() != a1.len() {
            return Err(Error::DimensionMismatch("argument widths differ".into()));
        }
        let a = Array2::from_shape_vec((2, a1.len()), [a1, a2].concat())
            .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
        let e = self.embed_pairs(s.view(), a.view())?;
        Ok(distance(e.row(0), e.row(1)))
    }

    /// `d_Psi(s1, s2) = |Psi(s1) - Psi(s2)|`.
    pub fn d_psi(&self, s1: &[T], s2: &[T]) -> Result<T> {
        if s2.len() != s1.len() {
            return Err(Error::DimensionMismatch("argument widths differ".into()));
        }
        let s = Array2::from_shape_vec((2, s1.len()), [s1, s2].concat())
            .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
        let e = self.embed_states(s.view())?;
        Ok(distance(e.row(0), e.row(1)))
    }

    /// Loss of `Phi` on a pair batch and its gradient w.r.t. `Phi`.
    ///
    /// Per pair the residual is
    /// `d_Phi(s1,a1; s2,a2) - |r1 - r2| - gamma |Psi'(s1') - Psi'(s2')|`;
    /// the loss is the mean squared residual. Targets are constants.
    pub fn loss_phi(&self, batch: &PairBatch<T>) -> Result<(T, Gradients<T>)> {
        let (b1, b2) = (&batch.first, &batch.second);
        let n = b1.rewards.len();
        if n == 0 || b2.rewards.len() != n {
            return Err(Error::validation("pair batch must be non-empty with equal halves"));
        }
        self.check_state_dim(b1.states.ncols())?;
        self.check_action_dim(b1.actions.ncols())?;
        let next = concatenate![Axis(0), b1.next_states, b2.next_states];
        let psi_next = self.psi_target.forward(next.view());
        let boot = row_norms(&(&psi_next.slice(s![..n, ..]) - &psi_next.slice(s![n.., ..])));
        let target: Array1<T> = (&b1.rewards - &b2.rewards).mapv(T::abs) + &(boot * self.gamma);

        let x = concatenate![
            Axis(0),
            concat_pairs(b1.states.view(), b1.actions.view()),
            concat_pairs(b2.states.view(), b2.actions.view())
        ];
        let trace = self.phi.forward_trace(x.view());
        let diff = &trace.output.slice(s![..n, ..]) - &trace.output.slice(s![n.., ..]);
        let norms = row_norms(&diff);
        let residual = &norms - &target;
        let nf = T::from_usize_lossy(n);
        let loss = residual.iter().map(|&r| r * r).sum::<T>() / nf;
        let coef = residual.mapv(|r| T::lit(2.0) * r / nf);
        let (grads, _) = self.phi.backward(&trace, norm_gradient(&diff, &norms, &coef).view(), false);
        Ok((loss, grads))
    }

    /// Action sets used for the bootstrap of the `Psi` loss: for each state
    /// pair, the actions fed to the first and second state.
    fn bootstrap_actions<R: Rng + ?Sized>(&self, pairs: usize, rng: &mut R) -> (Array2<T>, Array2<T>, usize) {
        match &self.action_space {
            ActionSpace::Discrete(na) if self.n_action_samples >= *na && self.shared_action => {
                // exact mean over the finite action set
                let one_hot = Array2::from_shape_fn((*na, *na), |(i, j)| if i == j { T::one() } else { T::zero() });
                let all = ndarray::concatenate(Axis(0), &vec![one_hot.view(); pairs]).expect("same width");
                (all.clone(), all, *na)
            }
            space => {
                let m = self.n_action_samples.max(1);
                let draw = |rng: &mut R| -> Array2<T> {
                    let mut a = Array2::zeros((pairs * m, self.action_dim));
                    for mut row in a.rows_mut() {
                        match space {
                            ActionSpace::Discrete(na) => row[rng.gen_range(0..*na)] = T::one(),
                            ActionSpace::Box { low, high } => {
                                for (j, v) in row.iter_mut().enumerate() {
                                    *v = low[j] + (high[j] - low[j]) * T::lit(rng.gen::<f64>());
                                }
                            }
                        }
                    }
                    a
                };
                let first = draw(rng);
                let second = if self.shared_action { first.clone() } else { draw(rng) };
                (first, second, m)
            }
        }
    }

    /// Bootstrap target `mean_j |Phi'(s1, u_j) - Phi'(s2, u_j)|` per pair.
    pub fn psi_targets<R: Rng + ?Sized>(
        &self,
        s1: ArrayView2<T>,
        s2: ArrayView2<T>,
        rng: &mut R,
    ) -> Result<Array1<T>> {
        self.check_state_dim(s1.ncols())?;
        self.check_state_dim(s2.ncols())?;
        let n = s1.nrows();
        let (u1, u2, m) = self.bootstrap_actions(n, rng);
        let pairs_per_chunk = (TARGET_CHUNK_ROWS / m).max(1);
        let mut out = Array1::zeros(n);
        let mf = T::from_usize_lossy(m);
        let mut start = 0;
        while start < n {
            let end = (start + pairs_per_chunk).min(n);
            let rows = (end - start) * m;
            let mut x1 = Array2::zeros((rows, self.state_dim + self.action_dim));
            let mut x2 = Array2::zeros((rows, self.state_dim + self.action_dim));
            for i in start..end {
                for j in 0..m {
                    let r = (i - start) * m + j;
                    x1.slice_mut(s![r, ..self.state_dim]).assign(&s1.row(i));
                    x1.slice_mut(s![r, self.state_dim..]).assign(&u1.row(i * m + j));
                    x2.slice_mut(s![r, ..self.state_dim]).assign(&s2.row(i));
                    x2.slice_mut(s![r, self.state_dim..]).assign(&u2.row(i * m + j));
                }
            }
            let e1 = self.phi_target.forward(x1.view());
            let e2 = self.phi_target.forward(x2.view());
            let norms = row_norms(&(&e1 - &e2));
            for i in start..end {
                let k = (i - start) * m;
                out[i] = norms.slice(s![k..k + m]).sum() / mf;
            }
            start = end;
        }
        Ok(out)
    }

    /// Loss of `Psi` on state pairs and its gradient w.r.t. `Psi`.
    pub fn loss_psi<R: Rng + ?Sized>(
        &self,
        s1: ArrayView2<T>,
        s2: ArrayView2<T>,
        rng: &mut R,
    ) -> Result<(T, Gradients<T>)> {
        let n = s1.nrows();
        if n == 0 || s2.nrows() != n {
            return Err(Error::validation("state batch must be non-empty with equal halves"));
        }
        let target = self.psi_targets(s1, s2, rng)?;
        let x = concatenate![Axis(0), s1, s2];
        let trace = self.psi.forward_trace(x.view());
        let diff = &trace.output.slice(s![..n, ..]) - &trace.output.slice(s![n.., ..]);
        let norms = row_norms(&diff);
        let residual = &norms - &target;
        let nf = T::from_usize_lossy(n);
        let loss = residual.iter().map(|&r| r * r).sum::<T>() / nf;
        let coef = residual.mapv(|r| T::lit(2.0) * r / nf);
        let (grads, _) = self.psi.backward(&trace, norm_gradient(&diff, &norms, &coef).view(), false);
        Ok((loss, grads))
    }

    /// `target <- (1 - tau) target + tau online` for both networks.
    pub fn target_update(&mut self, tau: T) -> Result<()> {
        if !(tau >= T::zero() && tau <= T::one()) {
            return Err(Error::validation(format!("tau must be in [0, 1], got {tau}")));
        }
        self.phi_target.soft_update_from(&self.phi, tau);
        self.psi_target.soft_update_from(&self.psi, tau);
        Ok(())
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let action_space = match &self.action_space {
            ActionSpace::Discrete(n) => json!({ "discrete": n }),
            ActionSpace::Box { low, high } => json!({
                "box": {
                    "low": low.iter().map(|v| v.as_f64()).collect::<Vec<_>>(),
                    "high": high.iter().map(|v| v.as_f64()).collect::<Vec<_>>(),
                }
            }),
        };
        let shape = self.shape();
        let metadata = json!({
            "kind": "metric",
            "version": 1,
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "widths": [shape.hidden, shape.embed_dim],
            "gamma": self.gamma.as_f64(),
            "tau": self.tau.as_f64(),
            "n_action_samples": self.n_action_samples,
            "shared_action": self.shared_action,
            "action_space": action_space,
            "extra": extra,
        });
        let mut tensors: Vec<Tensor> = Vec::new();
        tensors.extend(self.phi.to_tensors("phi"));
        tensors.extend(self.psi.to_tensors("psi"));
        tensors.extend(self.phi_target.to_tensors("phi_target"));
        tensors.extend(self.psi_target.to_tensors("psi_target"));
        Checkpoint { metadata, tensors }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind() != Some("metric") {
            return Err(Error::format("checkpoint does not hold a metric"));
        }
        let m = &ck.metadata;
        let get_usize = |k: &str| {
            m.get(k)
                .and_then(serde_json::Value::as_u64)
                .map(|v| v as usize)
                .ok_or_else(|| Error::format(format!("metric metadata lacks {k}")))
        };
        let get_f64 = |k: &str| {
            m.get(k)
                .and_then(serde_json::Value::as_f64)
                .ok_or_else(|| Error::format(format!("metric metadata lacks {k}")))
        };
        let action_space = match m.get("action_space") {
            Some(v) if v.get("discrete").is_some() => {
                ActionSpace::Discrete(v["discrete"].as_u64().unwrap_or(0) as usize)
            }
            Some(v) if v.get("box").is_some() => {
                let read = |k: &str| -> Vec<T> {
                    v["box"][k]
                        .as_array()
                        .map(|a| a.iter().filter_map(|x| x.as_f64()).map(T::lit).collect())
                        .unwrap_or_default()
                };
                ActionSpace::Box { low: read("low"), high: read("high") }
            }
            _ => return Err(Error::format("metric metadata lacks action_space")),
        };
        let acts = [Activation::Relu, Activation::Identity];
        let pair = EmbedderPair {
            phi: Mlp::from_tensors("phi", &ck.tensors, &acts)?,
            psi: Mlp::from_tensors("psi", &ck.tensors, &acts)?,
            phi_target: Mlp::from_tensors("phi_target", &ck.tensors, &acts)?,
            psi_target: Mlp::from_tensors("psi_target", &ck.tensors, &acts)?,
            state_dim: get_usize("state_dim")?,
            action_dim: get_usize("action_dim")?,
            gamma: T::lit(get_f64("gamma")?),
            tau: T::lit(get_f64("tau")?),
            n_action_samples: get_usize("n_action_samples")?,
            action_space,
            shared_action: m.get("shared_action").and_then(|v| v.as_bool()).unwrap_or(true),
        };
        if pair.phi.input_dim() != pair.state_dim + pair.action_dim
            || pair.psi.input_dim() != pair.state_dim
            || pair.action_space.dim() != pair.action_dim
        {
            return Err(Error::format("metric tensors disagree with metadata dims"));
        }
        Ok(pair)
    }
}

/// Euclidean distance between two embeddings.
pub fn distance<T: Scalar>(a: ArrayView1<T>, b: ArrayView1<T>) -> T {
    a.iter().zip(b.iter()).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt()
}

/// Settings of [`train_metric`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch: usize,
    pub n_action_samples: usize,
    pub tau: f64,
    pub gamma: f64,
    pub shape: EmbedderShape,
    pub shared_action: bool,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for MetricTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2_000_000,
            learning_rate: 1e-3,
            batch: 256,
            n_action_samples: 256,
            tau: 0.005,
            gamma: 0.9,
            shape: EmbedderShape::default(),
            shared_action: true,
            log_every: 1000,
            seed: 0,
        }
    }
}

impl MetricTrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.n_action_samples == 0 || self.log_every == 0 {
            return Err(Error::validation("batch, action samples and log interval must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::validation("learning rate must be positive"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::validation("tau must be in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::validation("gamma must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricLogRow {
    pub step: usize,
    /// Mean batch loss over the logging window ending at `step`.
    pub loss_phi: f64,
    pub loss_psi: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricTrainLog {
    pub rows: Vec<MetricLogRow>,
}

impl MetricTrainLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,loss_phi,loss_psi")?;
        for r in &self.rows {
            writeln!(w, "{},{},{}", r.step, r.loss_phi, r.loss_psi)?;
        }
        Ok(())
    }
}

/// Fresh networks configured from `cfg` for `data`.
pub fn init_for_dataset<T: Scalar>(data: &TransitionDataset<T>, cfg: &MetricTrainConfig) -> Result<EmbedderPair<T>> {
    let mut pair = init_embedders(data.state_dim(), data.action_space(), cfg.shape, cfg.seed)?
        .with_gamma(T::lit(cfg.gamma))?;
    pair.tau = T::lit(cfg.tau);
    pair.n_action_samples = cfg.n_action_samples;
    pair.shared_action = cfg.shared_action;
    Ok(pair)
}

/// Alternating minimization of the two losses: per step one adaptive-moment
/// step on `Phi`, one on `Psi` (same state pairs), then target averaging.
pub fn train_metric<T: Scalar>(
    data: &TransitionDataset<T>,
    cfg: &MetricTrainConfig,
) -> Result<(EmbedderPair<T>, MetricTrainLog)> {
    cfg.validate()?;
    if !data.is_scaled() {
        return Err(Error::validation("metric training expects a reward-scaled dataset"));
    }
    let mut pair = init_for_dataset(data, cfg)?;
    let mut log = MetricTrainLog::default();
    let mut batch_rng = rng::stream(cfg.seed, rng::BATCH);
    let mut action_rng = rng::stream(cfg.seed, "actions");
    let lr = T::lit(cfg.learning_rate);
    let mut opt_phi = Adam::new(&pair.phi, lr);
    let mut opt_psi = Adam::new(&pair.psi, lr);
    let (mut acc_phi, mut acc_psi) = (0.0, 0.0);
    for step in 1..=cfg.steps {
        let batch = data.sample_pair_batch(cfg.batch, &mut batch_rng)?;
        let (lphi, gphi) = pair.loss_phi(&batch)?;
        let (lpsi, gpsi) =
            pair.loss_psi(batch.first.states.view(), batch.second.states.view(), &mut action_rng)?;
        if !lphi.is_finite() || !lpsi.is_finite() || !gphi.is_finite() || !gpsi.is_finite() {
            return Err(Error::NonFinite(format!(
                "metric loss at step {step}: phi {lphi}, psi {lpsi}"
            )));
        }
        opt_phi.step(&mut pair.phi, &gphi);
        opt_psi.step(&mut pair.psi, &gpsi);
        pair.target_update(pair.tau)?;
        acc_phi += lphi.as_f64();
        acc_psi += lpsi.as_f64();
        if step % cfg.log_every == 0 {
            let k = cfg.log_every as f64;
            log.rows.push(MetricLogRow { step, loss_phi: acc_phi / k, loss_psi: acc_psi / k });
            log::debug!("metric step {step}: phi {:.5} psi {:.5}", acc_phi / k, acc_psi / k);
            acc_phi = 0.0;
            acc_psi = 0.0;
        }
    }
    Ok((pair, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Batch, Transition};

    fn pair_f64(discrete: bool) -> EmbedderPair<f64> {
        let space = if discrete {
            ActionSpace::Discrete(3)
        } else {
            ActionSpace::Box { low: vec![-1.0, -1.0], high: vec![1.0, 1.0] }
        };
        init_embedders(4, space, EmbedderShape { hidden: 8, embed_dim: 4 }, 5).unwrap()
    }

    fn batch_from(rows: &[(Vec<f64>, Vec<f64>, f64, Vec<f64>)]) -> Batch<f64> {
        let ts: Vec<_> = rows
            .iter()
            .map(|(s, a, r, n)| Transition { s: s.clone(), a: a.clone(), r: *r, s_next: n.clone(), done: false })
            .collect();
        let d = TransitionDataset::from_transitions("t", &ts).unwrap();
        d.gather((0..rows.len()).collect())
    }

    #[test]
    fn init_is_seeded_and_targets_copy_online() {
        let a = pair_f64(false);
        let b = pair_f64(false);
        assert_eq!(a, b);
        assert_eq!(a.phi, a.phi_target);
        assert_eq!(a.psi, a.psi_target);
        let e = a.embed_states(Array2::from_elem((3, 4), 0.2).view()).unwrap();
        assert_eq!(e.dim(), (3, 4));
    }

    #[test]
    fn distances_are_pseudometrics() {
        let p = pair_f64(false);
        let (s1, s2, s3) = ([0.1, 0.2, 0.3, 0.4], [-0.5, 0.0, 0.9, 0.2], [1.0, -1.0, 0.0, 0.3]);
        let (a1, a2, a3) = ([0.5, -0.5], [0.1, 0.9], [-1.0, 0.0]);
        assert_eq!(p.d_phi(&s1, &a1, &s1, &a1).unwrap(), 0.0);
        assert_eq!(p.d_phi(&s1, &a1, &s2, &a2).unwrap(), p.d_phi(&s2, &a2, &s1, &a1).unwrap());
        let d12 = p.d_phi(&s1, &a1, &s2, &a2).unwrap();
        let d23 = p.d_phi(&s2, &a2, &s3, &a3).unwrap();
        let d13 = p.d_phi(&s1, &a1, &s3, &a3).unwrap();
        assert!(d13 <= d12 + d23 + 1e-12);
        assert_eq!(p.d_psi(&s2, &s2).unwrap(), 0.0);
        assert_eq!(p.d_psi(&s1, &s3).unwrap(), p.d_psi(&s3, &s1).unwrap());
        assert!(p.d_phi(&s1, &a1, &s2, &[0.0]).is_err());
        assert!(p.d_psi(&s1, &[0.0]).is_err());
    }

    #[test]
    fn phi_loss_arithmetic() {
        // d_Phi = 1 via a hand-built linear net, reward gap 1, Psi' distance 0
        let mut p = pair_f64(false);
        let (s, a) = (vec![0.0; 4], vec![0.0, 0.0]);
        let mut s_far = s.clone();
        s_far[0] = 1.0;
        for (w, b) in [(&mut p.phi, 0), (&mut p.psi_target, 1)] {
            for i in 0..w.param_count() {
                w.set_param(i, 0.0);
            }
            let _ = b;
        }
        // phi: hidden unit 0 = relu(x0), output 0 = hidden 0
        p.phi.set_param(0, 1.0);
        let out_w0 = 8 * 6 + 8;
        p.phi.set_param(out_w0, 1.0);
        let first = batch_from(&[(s_far.clone(), a.clone(), 1.0, s.clone())]);
        let second = batch_from(&[(s.clone(), a.clone(), 0.0, s_far.clone())]);
        let pb = PairBatch { first, second };
        let (loss, _) = p.loss_phi(&pb).unwrap();
        assert!(loss.abs() < 1e-15);

        // d_Phi = 0, gap 1, gamma 0.9, Psi' distance 1 -> (0 - 1 - 0.9)^2
        for i in 0..p.phi.param_count() {
            p.phi.set_param(i, 0.0);
        }
        p.psi_target.set_param(0, 1.0);
        p.psi_target.set_param(8 * 4 + 8, 1.0);
        let (loss, _) = p.loss_phi(&pb).unwrap();
        assert!((loss - 3.61).abs() < 1e-12, "{loss}");
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn phi_gradient_matches_finite_differences() {
        let mut p = pair_f64(false);
        let mut r = rng::stream(9, "t");
        let rows: Vec<_> = (0..6)
            .map(|_| {
                let s: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
                let a: Vec<f64> = (0..2).map(|_| r.gen_range(-1.0..1.0)).collect();
                let rew = r.gen::<f64>();
                let n: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
                (s, a, rew, n)
            })
            .collect();
        let pb = PairBatch { first: batch_from(&rows[..3]), second: batch_from(&rows[3..]) };
        // move targets away from online so both terms matter
        p.psi_target.set_param(3, 0.7);
        let (_, g) = p.loss_phi(&pb).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..p.phi.param_count() {
            let v = p.phi.param(i);
            p.phi.set_param(i, v + h);
            let up = p.loss_phi(&pb).unwrap().0;
            p.phi.set_param(i, v - h);
            let down = p.loss_phi(&pb).unwrap().0;
            p.phi.set_param(i, v);
            worst = worst.max(rel_err((up - down) / (2.0 * h), g.get(i)));
        }
        assert!(worst <= 1e-4, "max relative error {worst}");
    }

    #[test]
    fn psi_gradient_matches_finite_differences() {
        for discrete in [true, false] {
            let mut p = pair_f64(discrete);
            if discrete {
                p = init_embedders(4, ActionSpace::Discrete(3), EmbedderShape { hidden: 8, embed_dim: 4 }, 5)
                    .unwrap();
            }
            p.n_action_samples = 5;
            let mut r = rng::stream(10, "t");
            let s1 = Array2::from_shape_fn((4, 4), |_| r.gen_range(-1.0..1.0));
            let s2 = Array2::from_shape_fn((4, 4), |_| r.gen_range(-1.0..1.0));
            p.phi_target.set_param(2, -0.4);
            let seed_rng = rng::stream(1, "u");
            let (_, g) = p.loss_psi(s1.view(), s2.view(), &mut seed_rng.clone()).unwrap();
            let h = 1e-6;
            let mut worst: f64 = 0.0;
            for i in 0..p.psi.param_count() {
                let v = p.psi.param(i);
                p.psi.set_param(i, v + h);
                let up = p.loss_psi(s1.view(), s2.view(), &mut seed_rng.clone()).unwrap().0;
                p.psi.set_param(i, v - h);
                let down = p.loss_psi(s1.view(), s2.view(), &mut seed_rng.clone()).unwrap().0;
                p.psi.set_param(i, v);
                worst = worst.max(rel_err((up - down) / (2.0 * h), g.get(i)));
            }
            assert!(worst <= 1e-4, "max relative error {worst}");
        }
    }

    #[test]
    fn psi_loss_zero_on_identical_states() {
        let p = pair_f64(false);
        let s = Array2::from_elem((3, 4), 0.3);
        let (loss, _) = p.loss_psi(s.view(), s.view(), &mut rng::stream(0, "u")).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn discrete_target_enumerates_actions_exactly() {
        let mut p = init_embedders::<f64>(4, ActionSpace::Discrete(3), EmbedderShape { hidden: 8, embed_dim: 4 }, 2)
            .unwrap();
        p.n_action_samples = 3;
        let s1 = Array2::from_shape_vec((1, 4), vec![0.1, 0.5, -0.2, 0.0]).unwrap();
        let s2 = Array2::from_shape_vec((1, 4), vec![-0.3, 0.2, 0.9, 1.0]).unwrap();
        let t = p.psi_targets(s1.view(), s2.view(), &mut rng::stream(0, "u")).unwrap();
        let mut exact = 0.0;
        for a in 0..3 {
            let mut u = vec![0.0; 3];
            u[a] = 1.0;
            let x1: Vec<f64> = s1.row(0).iter().copied().chain(u.clone()).collect();
            let x2: Vec<f64> = s2.row(0).iter().copied().chain(u).collect();
            let e = p.phi_target.forward(Array2::from_shape_vec((2, 7), [x1, x2].concat()).unwrap().view());
            exact += distance(e.row(0), e.row(1)) / 3.0;
        }
        assert!((t[0] - exact).abs() < 1e-14);
    }

    #[test]
    fn target_update_rates() {
        let mut p = pair_f64(false);
        let mut shifted = p.phi.clone();
        for i in 0..shifted.param_count() {
            shifted.set_param(i, 2.0);
        }
        p.phi = shifted.clone();
        let zero = {
            let mut z = shifted.clone();
            (0..z.param_count()).for_each(|i| z.set_param(i, 0.0));
            z
        };
        p.phi_target = zero.clone();
        let mut q = p.clone();
        q.target_update(0.0).unwrap();
        assert_eq!(q.phi_target, zero);
        let mut q = p.clone();
        q.target_update(0.5).unwrap();
        assert!((0..q.phi_target.param_count()).all(|i| q.phi_target.param(i) == 1.0));
        p.target_update(1.0).unwrap();
        assert_eq!(p.phi_target, shifted);
        assert!(p.target_update(1.5).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = init_embedders::<f32>(3, ActionSpace::Box { low: vec![-1.0], high: vec![1.0] }, EmbedderShape { hidden: 6, embed_dim: 2 }, 1)
            .unwrap();
        let ck = p.to_checkpoint(json!({}));
        let back = EmbedderPair::<f32>::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!(back, p);
    }
}
