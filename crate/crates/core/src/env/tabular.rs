use crate::error::{check_index, Error, Result};
use crate::Scalar;

/// Deterministic finite MDP with dense transition and reward tables.
///
/// Terminal states are absorbing: their transition rows are forced to
/// self-loops at construction. Their reward rows are kept as supplied.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp<T> {
    num_states: usize,
    num_actions: usize,
    next_state: Vec<usize>,
    reward: Vec<T>,
    terminal: Vec<bool>,
    time_limit: usize,
    start_states: Vec<usize>,
}

/// Result of one environment step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TabularStep<T> {
    pub next_state: usize,
    pub reward: T,
    /// True when the successor (or the current state, if already absorbed)
    /// is terminal. Time-limit truncation is the caller's business.
    pub done: bool,
}

impl<T: Scalar> TabularMdp<T> {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        mut next_state: Vec<usize>,
        reward: Vec<T>,
        terminal: Vec<bool>,
        time_limit: usize,
        start_states: Vec<usize>,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::validation("MDP needs at least one state and one action"));
        }
        let pairs = num_states * num_actions;
        if next_state.len() != pairs || reward.len() != pairs || terminal.len() != num_states {
            return Err(Error::DimensionMismatch(format!(
                "tables must have {pairs} transition entries and {num_states} terminal flags"
            )));
        }
        for &n in &next_state {
            check_index("next state", n, num_states)?;
        }
        if let Some(bad) = reward.iter().position(|r| !r.is_finite()) {
            return Err(Error::NonFinite(format!("reward entry {bad}")));
        }
        if time_limit == 0 {
            return Err(Error::validation("time limit must be at least 1"));
        }
        if start_states.is_empty() {
            return Err(Error::validation("at least one start state is required"));
        }
        for &s in &start_states {
            check_index("start state", s, num_states)?;
        }
        for s in (0..num_states).filter(|&s| terminal[s]) {
            next_state[s * num_actions..(s + 1) * num_actions].fill(s);
        }
        Ok(Self {
            num_states,
            num_actions,
            next_state,
            reward,
            terminal,
            time_limit,
            start_states,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// Number of state-action pairs.
    pub fn num_pairs(&self) -> usize {
        self.num_states * self.num_actions
    }

    pub fn time_limit(&self) -> usize {
        self.time_limit
    }

    pub fn start_states(&self) -> &[usize] {
        &self.start_states
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    /// Flat index `s * |A| + a` used by the tabular pseudometric.
    #[inline]
    pub fn pair_index(&self, s: usize, a: usize) -> usize {
        s * self.num_actions + a
    }

    #[inline]
    pub fn pair_of(&self, index: usize) -> (usize, usize) {
        (index / self.num_actions, index % self.num_actions)
    }

    /// Successor by flat pair index, no range check.
    #[inline]
    pub fn next_of_pair(&self, pair: usize) -> usize {
        self.next_state[pair]
    }

    #[inline]
    pub fn reward_of_pair(&self, pair: usize) -> T {
        self.reward[pair]
    }

    pub fn step(&self, s: usize, a: usize) -> Result<TabularStep<T>> {
        check_index("state", s, self.num_states)?;
        check_index("action", a, self.num_actions)?;
        let p = self.pair_index(s, a);
        let next_state = self.next_state[p];
        Ok(TabularStep {
            next_state,
            reward: self.reward[p],
            done: self.terminal[next_state],
        })
    }

    /// Concatenated one-hot encoding of `(s, a)`, length `|S| + |A|`.
    pub fn one_hot(&self, s: usize, a: usize) -> Result<Vec<T>> {
        check_index("state", s, self.num_states)?;
        check_index("action", a, self.num_actions)?;
        let mut v = vec![T::zero(); self.num_states + self.num_actions];
        v[s] = T::one();
        v[self.num_states + a] = T::one();
        Ok(v)
    }

    pub fn state_one_hot(&self, s: usize) -> Vec<T> {
        let mut v = vec![T::zero(); self.num_states];
        v[s] = T::one();
        v
    }

    pub fn action_one_hot(&self, a: usize) -> Vec<T> {
        let mut v = vec![T::zero(); self.num_actions];
        v[a] = T::one();
        v
    }

    /// Same MDP with rewards replaced by `f(r)`. Used to mirror dataset
    /// reward scaling on the exact model.
    pub fn map_rewards(&self, f: impl Fn(T) -> T) -> Result<Self> {
        let reward = self.reward.iter().map(|&r| f(r)).collect();
        Self::new(
            self.num_states,
            self.num_actions,
            self.next_state.clone(),
            reward,
            self.terminal.clone(),
            self.time_limit,
            self.start_states.clone(),
        )
    }
}

/// Random deterministic MDPs for property tests and the verify suite.
pub mod random {
    use rand::Rng;

    use super::TabularMdp;
    use crate::Scalar;

    /// Uniformly random successors and rewards in [0, 1); no terminals.
    pub fn random_mdp<T: Scalar, R: Rng + ?Sized>(
        rng: &mut R,
        num_states: usize,
        num_actions: usize,
    ) -> TabularMdp<T> {
        let pairs = num_states * num_actions;
        let next = (0..pairs).map(|_| rng.gen_range(0..num_states)).collect();
        let reward = (0..pairs).map(|_| T::lit(rng.gen::<f64>())).collect();
        TabularMdp::new(
            num_states,
            num_actions,
            next,
            reward,
            vec![false; num_states],
            100,
            vec![0],
        )
        .expect("random MDP is valid by construction")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> TabularMdp<f64> {
        // 0 -> 1 -> 2 (terminal), two actions that both move right
        TabularMdp::new(
            3,
            2,
            vec![1, 1, 2, 2, 0, 1],
            vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0],
            vec![false, false, true],
            10,
            vec![0],
        )
        .unwrap()
    }

    #[test]
    fn terminal_rows_become_self_loops() {
        let m = chain();
        assert_eq!(m.step(2, 0).unwrap().next_state, 2);
        assert_eq!(m.step(2, 1).unwrap().next_state, 2);
        assert!(m.step(1, 0).unwrap().done);
    }

    #[test]
    fn one_hot_layout() {
        let m = TabularMdp::<f64>::new(3, 2, vec![0; 6], vec![0.0; 6], vec![false; 3], 1, vec![0])
            .unwrap();
        assert_eq!(m.one_hot(0, 0).unwrap(), vec![1.0, 0.0, 0.0, 1.0, 0.0]);
        let mut seen = Vec::new();
        for s in 0..3 {
            for a in 0..2 {
                let v = m.one_hot(s, a).unwrap();
                assert_eq!(v.iter().sum::<f64>(), 2.0);
                assert!(v.iter().all(|&x| x == 0.0 || x == 1.0));
                assert!(!seen.contains(&v));
                seen.push(v);
            }
        }
        let x = m.one_hot(0, 0).unwrap();
        let y = m.one_hot(2, 1).unwrap();
        let dist: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert_eq!(dist, 2.0);
    }

    #[test]
    fn out_of_range_is_an_error() {
        let m = chain();
        assert!(matches!(m.step(3, 0), Err(Error::OutOfRange { .. })));
        assert!(matches!(m.step(0, 2), Err(Error::OutOfRange { .. })));
        assert!(m.one_hot(0, 5).is_err());
    }

    #[test]
    fn validation() {
        assert!(TabularMdp::<f64>::new(1, 1, vec![1], vec![0.0], vec![false], 1, vec![0]).is_err());
        assert!(TabularMdp::<f64>::new(1, 1, vec![0], vec![0.0], vec![false], 0, vec![0]).is_err());
        assert!(TabularMdp::<f64>::new(1, 1, vec![0], vec![0.0], vec![false], 1, vec![]).is_err());
        assert!(
            TabularMdp::<f64>::new(1, 1, vec![0], vec![f64::NAN], vec![false], 1, vec![0]).is_err()
        );
    }
}
