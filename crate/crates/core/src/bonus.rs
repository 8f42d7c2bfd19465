//! Nearest-neighbour candidate sets, projection distance and lookup bonus.
//!
//! Candidates for a state `s` are the `k` dataset transitions whose states
//! are closest to `s` under `d_Psi`. The projection distance of `(s, a)` is
//! the smallest `d_Phi` from `(s, a)` to a candidate pair.

use std::path::Path;

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::Cursor;
use crate::dataset::{hex_digest, TransitionDataset};
use crate::error::{Error, Result};
use crate::kdtree::KdTree;
use crate::metric_approx::EmbedderPair;
use crate::Scalar;

pub const INDEX_MAGIC: &[u8; 5] = b"PLNN1";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BonusForm {
    /// `Q'(s, a) * exp(-beta d)`
    QScaledExp,
    /// `exp(-beta d)`
    Exp,
    /// `1 - exp(beta d)`, a non-positive penalty
    OneMinusExp,
}

impl BonusForm {
    pub fn parse(name: &str) -> Result<Self> {
        match name.replace('-', "_").as_str() {
            "q_scaled_exp" => Ok(Self::QScaledExp),
            "exp" => Ok(Self::Exp),
            "one_minus_exp" => Ok(Self::OneMinusExp),
            _ => Err(Error::validation(format!("unknown bonus form {name:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::QScaledExp => "q_scaled_exp",
            Self::Exp => "exp",
            Self::OneMinusExp => "one_minus_exp",
        }
    }

    /// The distance factor and its derivative in `d`. For the Q-scaled form
    /// this is the factor multiplying the critic value.
    pub fn factor<T: Scalar>(self, d: T, beta: T) -> (T, T) {
        match self {
            Self::QScaledExp | Self::Exp => {
                let e = (-beta * d).exp();
                (e, -beta * e)
            }
            Self::OneMinusExp => {
                let e = (beta * d).exp();
                (T::one() - e, -beta * e)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BonusSpec {
    pub form: BonusForm,
    pub beta: f64,
    pub alpha_actor: f64,
    pub alpha_critic: f64,
}

impl Default for BonusSpec {
    fn default() -> Self {
        Self { form: BonusForm::QScaledExp, beta: 0.5, alpha_actor: 5.0, alpha_critic: 1.0 }
    }
}

impl BonusSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::validation(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.alpha_actor >= 0.0 && self.alpha_critic >= 0.0) {
            return Err(Error::validation("bonus weights must be non-negative"));
        }
        Ok(())
    }

    /// Bonus from a projection distance; `critic` is the target-critic value
    /// at the same pair and is required by the Q-scaled form only.
    pub fn value<T: Scalar>(&self, d: T, critic: Option<T>) -> Result<T> {
        let (f, _) = self.form.factor(d, T::lit(self.beta));
        match self.form {
            BonusForm::QScaledExp => {
                let q = critic.ok_or_else(|| Error::validation("q_scaled_exp bonus needs a critic value"))?;
                Ok(q * f)
            }
            _ => Ok(f),
        }
    }
}

/// Projection distances of a batch, the winning dataset index per row and
/// optionally `d/da` with the winner held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection<T> {
    pub distance: Array1<T>,
    pub nearest: Vec<usize>,
    pub grad_action: Option<Array2<T>>,
}

#[derive(Debug, Clone)]
pub struct NeighborIndex<T> {
    k: usize,
    state_dim: usize,
    action_dim: usize,
    tree: KdTree<T>,
    phi_embeddings: Array2<T>,
    /// `len x min(k, len)` candidates of each dataset state.
    neighbors: Vec<u32>,
    /// Same for each dataset next state.
    next_neighbors: Vec<u32>,
    pub metric_hash: String,
    pub dataset_hash: String,
}

/// Fingerprint of the metric parameters that an index was built from.
pub fn metric_fingerprint<T: Scalar>(pair: &EmbedderPair<T>) -> String {
    hex_digest(&pair.to_checkpoint(serde_json::Value::Null).to_bytes())
}

fn parallel_rows<F>(rows: usize, threads: usize, f: F) -> Result<Vec<Vec<u32>>>
where
    F: Fn(usize) -> Result<Vec<u32>> + Sync,
{
    let threads = threads.clamp(1, rows.max(1));
    let chunk = rows.div_ceil(threads);
    let parts: Vec<Result<Vec<Vec<u32>>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let f = &f;
                scope.spawn(move || (t * chunk..((t + 1) * chunk).min(rows)).map(f).collect())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("index worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(rows);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Builds the index over `data` with a single worker.
pub fn build_neighbor_index<T: Scalar>(
    pair: &EmbedderPair<T>,
    data: &TransitionDataset<T>,
    k: usize,
) -> Result<NeighborIndex<T>> {
    NeighborIndex::build(pair, data, k, 1)
}

impl<T: Scalar> NeighborIndex<T> {
    /// Exact neighbours of every dataset state and next state. The result
    /// does not depend on `threads`.
    pub fn build(pair: &EmbedderPair<T>, data: &TransitionDataset<T>, k: usize, threads: usize) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::validation("cannot index an empty dataset"));
        }
        if k == 0 {
            return Err(Error::validation("k must be at least 1"));
        }
        let psi = pair.embed_states(data.states().view())?;
        let psi_next = pair.embed_states(data.next_states().view())?;
        let phi = pair.embed_pairs(data.states().view(), data.actions().view())?;
        let tree = KdTree::build(psi)?;
        let kk = k.min(data.len());
        let lists = |emb: &Array2<T>| -> Result<Vec<u32>> {
            let rows = parallel_rows(emb.nrows(), threads, |i| {
                let q = emb.row(i).to_vec();
                Ok(tree.knn(&q, kk)?.into_iter().map(|n| n.index as u32).collect())
            })?;
            Ok(rows.concat())
        };
        let neighbors = lists(tree.points())?;
        let next_neighbors = lists(&psi_next)?;
        Ok(Self {
            k,
            state_dim: data.state_dim(),
            action_dim: data.action_dim(),
            neighbors,
            next_neighbors,
            phi_embeddings: phi,
            tree,
            metric_hash: metric_fingerprint(pair),
            dataset_hash: data.content_hash(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    /// Entries per candidate list, `min(k, len)`.
    pub fn list_len(&self) -> usize {
        self.k.min(self.len())
    }

    pub fn psi_embeddings(&self) -> &Array2<T> {
        self.tree.points()
    }

    pub fn phi_embeddings(&self) -> &Array2<T> {
        &self.phi_embeddings
    }

    /// Candidates of dataset state `i`, nearest first.
    pub fn dataset_candidates(&self, i: usize) -> &[u32] {
        let m = self.list_len();
        &self.neighbors[i * m..(i + 1) * m]
    }

    /// Candidates of the next state of dataset transition `i`.
    pub fn next_state_candidates(&self, i: usize) -> &[u32] {
        let m = self.list_len();
        &self.next_neighbors[i * m..(i + 1) * m]
    }

    /// Rejects a metric or dataset other than the ones indexed.
    pub fn check_compatible(&self, pair: &EmbedderPair<T>, data: &TransitionDataset<T>) -> Result<()> {
        if pair.state_dim != self.state_dim || pair.action_dim != self.action_dim {
            return Err(Error::DimensionMismatch("metric dims differ from the index".into()));
        }
        if pair.embed_dim() != self.phi_embeddings.ncols() {
            return Err(Error::DimensionMismatch("metric embedding width differs from the index".into()));
        }
        if metric_fingerprint(pair) != self.metric_hash {
            return Err(Error::validation("index was built from a different metric"));
        }
        if data.content_hash() != self.dataset_hash {
            return Err(Error::validation("index was built from a different dataset"));
        }
        Ok(())
    }

    /// The `k` nearest dataset states to an arbitrary state.
    pub fn query_candidates(&self, pair: &EmbedderPair<T>, state: &[T]) -> Result<Vec<u32>> {
        let s = Array2::from_shape_vec((1, state.len()), state.to_vec())
            .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
        let e = pair.embed_states(s.view())?;
        Ok(self.tree.knn(&e.row(0).to_vec(), self.k)?.into_iter().map(|n| n.index as u32).collect())
    }

    /// Candidate lists for a batch of arbitrary states.
    pub fn query_candidates_batch(&self, pair: &EmbedderPair<T>, states: ArrayView2<T>) -> Result<Vec<Vec<u32>>> {
        let e = pair.embed_states(states)?;
        e.rows()
            .into_iter()
            .map(|r| Ok(self.tree.knn(&r.to_vec(), self.k)?.into_iter().map(|n| n.index as u32).collect()))
            .collect()
    }

    /// Projection distances of `(states[b], actions[b])` against the pairs
    /// listed in `candidates[b]`.
    pub fn project(
        &self,
        pair: &EmbedderPair<T>,
        states: ArrayView2<T>,
        actions: ArrayView2<T>,
        candidates: &[&[u32]],
        want_grad: bool,
    ) -> Result<Projection<T>> {
        let b = states.nrows();
        if actions.nrows() != b || candidates.len() != b {
            return Err(Error::DimensionMismatch("batch lengths differ".into()));
        }
        if states.ncols() != self.state_dim || actions.ncols() != self.action_dim {
            return Err(Error::DimensionMismatch(format!(
                "pair widths {}+{}, index expects {}+{}",
                states.ncols(),
                actions.ncols(),
                self.state_dim,
                self.action_dim
            )));
        }
        let x = concatenate![Axis(1), states, actions];
        let trace = pair.phi.forward_trace(x.view());
        let e = &trace.output;
        let mut distance = Array1::zeros(b);
        let mut nearest = vec![0; b];
        let mut grad_out = Array2::zeros(e.dim());
        for (row, cands) in candidates.iter().enumerate() {
            let (mut best, mut best_j) = (T::infinity(), usize::MAX);
            for &j in cands.iter() {
                let j = j as usize;
                crate::error::check_index("candidate", j, self.len())?;
                let d2 = squared_gap(e.row(row).iter(), self.phi_embeddings.row(j).iter());
                if d2 < best || (d2 == best && j < best_j) {
                    best = d2;
                    best_j = j;
                }
            }
            if best_j == usize::MAX {
                return Err(Error::validation("empty candidate list"));
            }
            let d = best.sqrt();
            distance[row] = d;
            nearest[row] = best_j;
            if want_grad && d > T::zero() {
                for c in 0..e.ncols() {
                    grad_out[[row, c]] = (e[[row, c]] - self.phi_embeddings[[best_j, c]]) / d;
                }
            }
        }
        let grad_action = want_grad.then(|| {
            let g = pair.phi.input_gradient(&trace, grad_out.view());
            g.slice(ndarray::s![.., self.state_dim..]).to_owned()
        });
        Ok(Projection { distance, nearest, grad_action })
    }

    /// Projection distance of one pair with candidates from the tree.
    pub fn projection_distance(&self, pair: &EmbedderPair<T>, state: &[T], action: &[T]) -> Result<T> {
        let cands = self.query_candidates(pair, state)?;
        let s = row_matrix(state)?;
        let a = row_matrix(action)?;
        Ok(self.project(pair, s.view(), a.view(), &[&cands], false)?.distance[0])
    }

    /// Minimum `d_Phi` over the whole dataset.
    pub fn exact_projection_distance(&self, pair: &EmbedderPair<T>, state: &[T], action: &[T]) -> Result<T> {
        let all: Vec<u32> = (0..self.len() as u32).collect();
        let s = row_matrix(state)?;
        let a = row_matrix(action)?;
        Ok(self.project(pair, s.view(), a.view(), &[&all], false)?.distance[0])
    }

    /// Bonus of one pair. `critic` maps `(s, a)` to the target-critic value
    /// and is needed for the Q-scaled form.
    pub fn bonus(
        &self,
        pair: &EmbedderPair<T>,
        spec: &BonusSpec,
        state: &[T],
        action: &[T],
        critic: Option<&dyn Fn(&[T], &[T]) -> T>,
    ) -> Result<T> {
        spec.validate()?;
        if spec.form == BonusForm::QScaledExp && critic.is_none() {
            return Err(Error::validation("q_scaled_exp bonus needs a critic"));
        }
        let d = self.projection_distance(pair, state, action)?;
        spec.value(d, critic.map(|q| q(state, action)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = json!({
            "version": INDEX_VERSION,
            "k": self.k,
            "n": self.len(),
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "psi_dim": self.tree.dim(),
            "phi_dim": self.phi_embeddings.ncols(),
            "metric_hash": self.metric_hash,
            "dataset_hash": self.dataset_hash,
        });
        let mut out = INDEX_MAGIC.to_vec();
        out.extend_from_slice(header.to_string().as_bytes());
        out.push(b'\n');
        for &i in self.neighbors.iter().chain(&self.next_neighbors) {
            out.extend_from_slice(&i.to_le_bytes());
        }
        for &v in self.tree.points().iter().chain(self.phi_embeddings.iter()) {
            out.extend_from_slice(&v.as_f32().to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let body = bytes
            .strip_prefix(INDEX_MAGIC.as_slice())
            .ok_or_else(|| Error::format("not a PLNN1 index (bad magic)"))?;
        let nl = body.iter().position(|&b| b == b'\n').ok_or_else(|| Error::format("index header is not terminated"))?;
        let h: serde_json::Value = serde_json::from_slice(&body[..nl])?;
        let field = |k: &str| {
            h.get(k).and_then(|v| v.as_u64()).map(|v| v as usize).ok_or_else(|| Error::format(format!("index header lacks {k}")))
        };
        if field("version")? != INDEX_VERSION as usize {
            return Err(Error::format("unsupported index version"));
        }
        let text = |k: &str| h.get(k).and_then(|v| v.as_str()).map(str::to_owned).ok_or_else(|| Error::format(format!("index header lacks {k}")));
        let (k, n, psi_dim, phi_dim) = (field("k")?, field("n")?, field("psi_dim")?, field("phi_dim")?);
        if k == 0 || n == 0 {
            return Err(Error::format("index header has zero k or n"));
        }
        let m = k.min(n);
        let mut cur = Cursor::new(&body[nl + 1..]);
        let mut ids = |count: usize| -> Result<Vec<u32>> {
            let v = (0..count).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
            if v.iter().any(|&i| i as usize >= n) {
                return Err(Error::format("neighbour id out of range"));
            }
            Ok(v)
        };
        let neighbors = ids(n * m)?;
        let next_neighbors = ids(n * m)?;
        let mut matrix = |cols: usize| -> Result<Array2<T>> {
            let v = cur.f32s(n * cols)?.into_iter().map(|x| T::lit(x as f64)).collect();
            Array2::from_shape_vec((n, cols), v).map_err(|e| Error::format(e.to_string()))
        };
        let psi = matrix(psi_dim)?;
        let phi_embeddings = matrix(phi_dim)?;
        if !cur.is_done() {
            return Err(Error::format("trailing bytes after index payload"));
        }
        Ok(Self {
            k,
            state_dim: field("state_dim")?,
            action_dim: field("action_dim")?,
            tree: KdTree::build(psi)?,
            phi_embeddings,
            neighbors,
            next_neighbors,
            metric_hash: text("metric_hash")?,
            dataset_hash: text("dataset_hash")?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn squared_gap<'a, T: Scalar + 'a>(a: impl Iterator<Item = &'a T>, b: impl Iterator<Item = &'a T>) -> T {
    a.zip(b).map(|(&x, &y)| (x - y) * (x - y)).fold(T::zero(), |acc, v| acc + v)
}

fn row_matrix<T: Scalar>(v: &[T]) -> Result<Array2<T>> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).map_err(|e| Error::DimensionMismatch(e.to_string()))
}

/// Euclidean projection onto the raw concatenated `(s, a)` dataset pairs.
#[derive(Debug, Clone)]
pub struct RawPairIndex<T> {
    state_dim: usize,
    tree: KdTree<T>,
}

impl<T: Scalar> RawPairIndex<T> {
    pub fn build(data: &TransitionDataset<T>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::validation("cannot index an empty dataset"));
        }
        let x = concatenate![Axis(1), data.states().view(), data.actions().view()];
        Ok(Self { state_dim: data.state_dim(), tree: KdTree::build(x)? })
    }

    /// Distance to the nearest dataset pair, with `d/da` if requested.
    pub fn project(&self, states: ArrayView2<T>, actions: ArrayView2<T>, want_grad: bool) -> Result<Projection<T>> {
        let b = states.nrows();
        if actions.nrows() != b {
            return Err(Error::DimensionMismatch("batch lengths differ".into()));
        }
        let x = concatenate![Axis(1), states, actions];
        let mut distance = Array1::zeros(b);
        let mut nearest = vec![0; b];
        let mut grad = Array2::zeros(actions.dim());
        for (row, q) in x.rows().into_iter().enumerate() {
            let n = self.tree.knn(&q.to_vec(), 1)?[0];
            let d = n.dist_sq.sqrt();
            distance[row] = d;
            nearest[row] = n.index;
            if want_grad && d > T::zero() {
                for c in 0..actions.ncols() {
                    grad[[row, c]] = (q[self.state_dim + c] - self.tree.points()[[n.index, self.state_dim + c]]) / d;
                }
            }
        }
        Ok(Projection { distance, nearest, grad_action: want_grad.then_some(grad) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ActionSpace, Transition};
    use crate::metric_approx::{init_embedders, EmbedderShape};
    use rand::Rng;

    fn fixture(n: usize, seed: u64) -> (EmbedderPair<f64>, TransitionDataset<f64>) {
        let mut r = crate::rng::stream(seed, "t");
        let ts: Vec<_> = (0..n)
            .map(|_| Transition {
                s: (0..3).map(|_| r.gen_range(-1.0..1.0)).collect(),
                a: (0..2).map(|_| r.gen_range(-1.0..1.0)).collect(),
                r: r.gen(),
                s_next: (0..3).map(|_| r.gen_range(-1.0..1.0)).collect(),
                done: false,
            })
            .collect();
        let data = TransitionDataset::from_transitions("pointmass", &ts).unwrap();
        let space = ActionSpace::Box { low: vec![-1.0; 2], high: vec![1.0; 2] };
        (init_embedders(3, space, EmbedderShape { hidden: 16, embed_dim: 4 }, seed).unwrap(), data)
    }

    #[test]
    fn bonus_forms() {
        let spec = |form| BonusSpec { form, beta: 0.5, alpha_actor: 1.0, alpha_critic: 1.0 };
        assert_eq!(spec(BonusForm::Exp).value(0.0, None).unwrap(), 1.0);
        assert!((spec(BonusForm::Exp).value(2.0f64, None).unwrap() - 0.367879).abs() < 1e-6);
        assert_eq!(spec(BonusForm::QScaledExp).value(0.0, Some(3.5)).unwrap(), 3.5);
        assert!(spec(BonusForm::QScaledExp).value(0.0, None).is_err());
        assert_eq!(spec(BonusForm::OneMinusExp).value(0.0, None).unwrap(), 0.0);
        assert!(spec(BonusForm::OneMinusExp).value(1.0, None).unwrap() < 0.0);
        let mut prev = f64::INFINITY;
        for d in [0.0, 0.1, 0.5, 1.0, 3.0] {
            let v = spec(BonusForm::Exp).value(d, None).unwrap();
            assert!(v < prev && v > 0.0);
            prev = v;
        }
        assert!(BonusSpec { beta: 0.0, ..BonusSpec::default() }.validate().is_err());
        assert_eq!(BonusForm::parse("one-minus-exp").unwrap(), BonusForm::OneMinusExp);
        assert!(BonusForm::parse("linear").is_err());
        // derivative of the factor
        for form in [BonusForm::Exp, BonusForm::OneMinusExp] {
            let (_, g) = form.factor(0.7f64, 0.25);
            let fd = (form.factor(0.7 + 1e-6, 0.25).0 - form.factor(0.7 - 1e-6, 0.25).0) / 2e-6;
            assert!((g - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn dataset_pairs_project_to_zero() {
        let (pair, data) = fixture(60, 1);
        let idx = build_neighbor_index(&pair, &data, 5).unwrap();
        for i in 0..data.len() {
            let t = data.transition(i);
            assert_eq!(idx.dataset_candidates(i)[0] as usize, i);
            assert_eq!(idx.projection_distance(&pair, &t.s, &t.a).unwrap(), 0.0);
        }
    }

    #[test]
    fn duplicates_and_full_lists() {
        let (pair, data) = fixture(10, 2);
        let dup = TransitionDataset::concat(&[data.clone(), data.clone()]).unwrap();
        let idx = build_neighbor_index(&pair, &dup, 2).unwrap();
        for i in 0..10 {
            assert_eq!(idx.dataset_candidates(i + 10), &[i as u32, (i + 10) as u32]);
        }
        let full = build_neighbor_index(&pair, &data, 50).unwrap();
        for i in 0..10 {
            let mut c = full.dataset_candidates(i).to_vec();
            c.sort();
            assert_eq!(c, (0..10).collect::<Vec<u32>>());
        }
    }

    #[test]
    fn candidate_approximation_never_underestimates() {
        let (pair, data) = fixture(300, 3);
        let mut r = crate::rng::stream(5, "q");
        let small = build_neighbor_index(&pair, &data, 10).unwrap();
        let all = build_neighbor_index(&pair, &data, 300).unwrap();
        for _ in 0..50 {
            let s: Vec<f64> = (0..3).map(|_| r.gen_range(-1.5..1.5)).collect();
            let a: Vec<f64> = (0..2).map(|_| r.gen_range(-1.0..1.0)).collect();
            let exact = small.exact_projection_distance(&pair, &s, &a).unwrap();
            assert!(small.projection_distance(&pair, &s, &a).unwrap() >= exact);
            assert_eq!(all.projection_distance(&pair, &s, &a).unwrap(), exact);
        }
    }

    #[test]
    fn threads_do_not_change_result() {
        let (pair, data) = fixture(97, 4);
        let a = NeighborIndex::build(&pair, &data, 7, 1).unwrap();
        let b = NeighborIndex::build(&pair, &data, 7, 4).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn projection_gradient_matches_finite_differences() {
        let (pair, data) = fixture(80, 6);
        let idx = build_neighbor_index(&pair, &data, 10).unwrap();
        let mut r = crate::rng::stream(7, "q");
        let s = Array2::from_shape_fn((5, 3), |_| r.gen_range(-1.0..1.0));
        let a = Array2::from_shape_fn((5, 2), |_| r.gen_range(-1.0..1.0));
        let cands: Vec<Vec<u32>> = idx.query_candidates_batch(&pair, s.view()).unwrap();
        let refs: Vec<&[u32]> = cands.iter().map(|c| c.as_slice()).collect();
        let p = idx.project(&pair, s.view(), a.view(), &refs, true).unwrap();
        let g = p.grad_action.unwrap();
        let h = 1e-6;
        for b in 0..5 {
            for c in 0..2 {
                let mut up = a.clone();
                up[[b, c]] += h;
                let mut down = a.clone();
                down[[b, c]] -= h;
                let du = idx.project(&pair, s.view(), up.view(), &refs, false).unwrap();
                let dd = idx.project(&pair, s.view(), down.view(), &refs, false).unwrap();
                if du.nearest[b] != p.nearest[b] || dd.nearest[b] != p.nearest[b] {
                    continue;
                }
                let fd = (du.distance[b] - dd.distance[b]) / (2.0 * h);
                let rel = (fd - g[[b, c]]).abs() / fd.abs().max(g[[b, c]].abs()).max(1e-6);
                assert!(rel <= 1e-4, "{rel}");
            }
        }
    }

    #[test]
    fn index_file_round_trip_and_checks() {
        let (pair, data) = fixture(40, 8);
        let p32 = EmbedderPair::<f32>::from_checkpoint(&pair.to_checkpoint(json!({}))).unwrap();
        let d32 = TransitionDataset::<f32>::from_bytes(&data.to_bytes()).unwrap();
        let idx = build_neighbor_index(&p32, &d32, 6).unwrap();
        let bytes = idx.to_bytes();
        let back = NeighborIndex::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        back.check_compatible(&p32, &d32).unwrap();
        let other = EmbedderPair::<f32>::from_checkpoint(&fixture(40, 9).0.to_checkpoint(json!({}))).unwrap();
        assert!(back.check_compatible(&other, &d32).is_err());
        assert!(NeighborIndex::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(NeighborIndex::<f32>::from_bytes(b"PLNN0{}\n").is_err());
    }

    #[test]
    fn raw_pair_projection() {
        let (_, data) = fixture(50, 10);
        let idx = RawPairIndex::build(&data).unwrap();
        let t = data.transition(7);
        let s = row_matrix(&t.s).unwrap();
        let mut a = t.a.clone();
        let p = idx.project(s.view(), row_matrix(&a).unwrap().view(), false).unwrap();
        assert_eq!(p.distance[0], 0.0);
        a[0] += 1e-3;
        let p = idx.project(s.view(), row_matrix(&a).unwrap().view(), true).unwrap();
        assert!((p.distance[0] - 1e-3).abs() < 1e-12);
        assert!((p.grad_action.unwrap()[[0, 0]] - 1.0).abs() < 1e-9);
    }
}
