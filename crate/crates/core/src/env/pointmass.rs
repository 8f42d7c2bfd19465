use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::Scalar;

pub const POINTMASS_ID: &str = "pointmass";

/// Parameters of the planar point-mass task.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PointMassConfig {
    pub dt: f64,
    pub max_speed: f64,
    pub goal: [f64; 2],
    pub start: [f64; 4],
    pub time_limit: usize,
    pub action_bound: f64,
}

impl Default for PointMassConfig {
    fn default() -> Self {
        Self {
            dt: 0.05,
            max_speed: 1.0,
            goal: [1.0, 1.0],
            start: [0.0, 0.0, 0.0, 0.0],
            time_limit: 100,
            action_bound: 1.0,
        }
    }
}

/// Reward attached to a continuous environment.
#[derive(Debug, Clone, PartialEq)]
pub enum RewardSpec<T> {
    /// `-|position - goal|` measured after the move.
    NegativeGoalDistance { goal: Vec<T> },
}

/// Deterministic continuous-control environment. State is
/// `[x, y, vx, vy]`, action is a 2-D acceleration.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousEnv<T> {
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<T>,
    pub action_high: Vec<T>,
    pub dt: T,
    pub max_speed: T,
    pub reward_spec: RewardSpec<T>,
    pub time_limit: usize,
    pub start_state: Vec<T>,
}

pub fn build_pointmass<T: Scalar>(cfg: &PointMassConfig) -> Result<ContinuousEnv<T>> {
    if !(cfg.dt > 0.0) || !cfg.dt.is_finite() {
        return Err(Error::validation(format!("dt must be positive, got {}", cfg.dt)));
    }
    if !(cfg.max_speed > 0.0) || !(cfg.action_bound > 0.0) {
        return Err(Error::validation("max_speed and action_bound must be positive"));
    }
    if cfg.time_limit == 0 {
        return Err(Error::validation("time limit must be at least 1"));
    }
    Ok(ContinuousEnv {
        state_dim: 4,
        action_dim: 2,
        action_low: vec![T::lit(-cfg.action_bound); 2],
        action_high: vec![T::lit(cfg.action_bound); 2],
        dt: T::lit(cfg.dt),
        max_speed: T::lit(cfg.max_speed),
        reward_spec: RewardSpec::NegativeGoalDistance {
            goal: cfg.goal.iter().map(|&g| T::lit(g)).collect(),
        },
        time_limit: cfg.time_limit,
        start_state: cfg.start.iter().map(|&v| T::lit(v)).collect(),
    })
}

impl<T: Scalar> ContinuousEnv<T> {
    pub fn goal(&self) -> &[T] {
        match &self.reward_spec {
            RewardSpec::NegativeGoalDistance { goal } => goal,
        }
    }

    pub fn clip_action(&self, action: &[T]) -> Vec<T> {
        action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(&a, (&lo, &hi))| a.max(lo).min(hi))
            .collect()
    }

    /// Pure transition: `x <- x + v dt`, `v <- clip(v + a dt)`, reward from
    /// the new position.
    pub fn step(&self, state: &[T], action: &[T]) -> Result<(Vec<T>, T)> {
        if state.len() != self.state_dim || action.len() != self.action_dim {
            return Err(Error::DimensionMismatch(format!(
                "expected state {} / action {}, got {} / {}",
                self.state_dim,
                self.action_dim,
                state.len(),
                action.len()
            )));
        }
        let a = self.clip_action(action);
        let mut next = vec![T::zero(); 4];
        for i in 0..2 {
            next[i] = state[i] + state[2 + i] * self.dt;
            next[2 + i] = (state[2 + i] + a[i] * self.dt).max(-self.max_speed).min(self.max_speed);
        }
        Ok((next.clone(), self.reward_at(&next)))
    }

    pub fn reward_at(&self, state: &[T]) -> T {
        -self.goal_distance(state)
    }

    pub fn goal_distance(&self, state: &[T]) -> T {
        let g = self.goal();
        ((state[0] - g[0]).powi(2) + (state[1] - g[1]).powi(2)).sqrt()
    }

    /// Runs one episode from the start state under `policy`, returning the
    /// undiscounted return.
    pub fn rollout(&self, mut policy: impl FnMut(&[T]) -> Vec<T>) -> Result<T> {
        let mut s = self.start_state.clone();
        let mut ret = T::zero();
        for _ in 0..self.time_limit {
            let a = policy(&s);
            let (n, r) = self.step(&s, &a)?;
            ret += r;
            s = n;
        }
        Ok(ret)
    }

    /// Returns of the uniform-random policy (mean over `episodes`) and of the
    /// noiseless expert; these anchor normalized scores at 0 and 1.
    pub fn reference_returns(&self, episodes: usize, seed: u64) -> Result<(f64, f64)> {
        let mut rng = crate::rng::stream(seed, "reference");
        let mut total = 0.0;
        for _ in 0..episodes.max(1) {
            total += self
                .rollout(|s| ScriptedPolicy::Random.act(self, s, 0.0, &mut rng))?
                .as_f64();
        }
        let random = total / episodes.max(1) as f64;
        let expert = self
            .rollout(|s| ScriptedPolicy::Expert.act(self, s, 0.0, &mut rng))?
            .as_f64();
        Ok((random, expert))
    }
}

/// Hand-written behaviour policies for the point mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScriptedPolicy {
    Random,
    Medium,
    Expert,
}

/// Proportional-derivative gains of the expert controller. Overdamped, so
/// the noiseless expert never overshoots the goal.
pub const EXPERT_KP: f64 = 2.0;
pub const EXPERT_KD: f64 = 4.0;
/// Gain multiplier of the medium controller.
pub const MEDIUM_GAIN: f64 = 0.35;
/// Extra action noise (std) of the medium controller on top of `noise_scale`.
pub const MEDIUM_NOISE: f64 = 0.5;

impl ScriptedPolicy {
    pub fn parse(tag: &str) -> Option<Self> {
        match tag {
            "random" => Some(Self::Random),
            "medium" => Some(Self::Medium),
            "expert" => Some(Self::Expert),
            _ => None,
        }
    }

    pub fn act<T: Scalar, R: Rng + ?Sized>(
        self,
        env: &ContinuousEnv<T>,
        state: &[T],
        noise_scale: f64,
        rng: &mut R,
    ) -> Vec<T> {
        let (gain, noise) = match self {
            ScriptedPolicy::Random => {
                return env
                    .action_low
                    .iter()
                    .zip(&env.action_high)
                    .map(|(&lo, &hi)| lo + (hi - lo) * T::lit(rng.gen::<f64>()))
                    .collect();
            }
            ScriptedPolicy::Expert => (1.0, noise_scale),
            ScriptedPolicy::Medium => (MEDIUM_GAIN, noise_scale + MEDIUM_NOISE),
        };
        let g = env.goal();
        let raw: Vec<T> = (0..2)
            .map(|i| {
                let pd = T::lit(gain * EXPERT_KP) * (g[i] - state[i])
                    - T::lit(gain * EXPERT_KD) * state[2 + i];
                let eps: f64 = if noise > 0.0 { StandardNormal.sample(rng) } else { 0.0 };
                pd + T::lit(noise * eps)
            })
            .collect();
        env.clip_action(&raw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn env() -> ContinuousEnv<f64> {
        build_pointmass(&PointMassConfig::default()).unwrap()
    }

    #[test]
    fn zero_action_from_rest_is_a_fixed_point() {
        let e = env();
        let s = vec![0.3, -0.2, 0.0, 0.0];
        let (n, _) = e.step(&s, &[0.0, 0.0]).unwrap();
        assert_eq!(n, s);
    }

    #[test]
    fn reward_zero_at_goal() {
        let e = env();
        let (n, r) = e.step(&[1.0, 1.0, 0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(r, 0.0);
        assert_eq!(n, vec![1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn actions_are_clipped() {
        let e = env();
        let s = vec![0.0, 0.0, 0.0, 0.0];
        assert_eq!(e.step(&s, &[5.0, -9.0]).unwrap(), e.step(&s, &[1.0, -1.0]).unwrap());
    }

    #[test]
    fn velocity_is_capped() {
        let e = env();
        let (n, _) = e.step(&[0.0, 0.0, 0.99, -0.99], &[1.0, -1.0]).unwrap();
        assert_eq!(&n[2..], &[1.0, -1.0]);
    }

    #[test]
    fn non_positive_dt_rejected() {
        let cfg = PointMassConfig { dt: 0.0, ..Default::default() };
        assert!(build_pointmass::<f64>(&cfg).is_err());
        let cfg = PointMassConfig { dt: -0.1, ..Default::default() };
        assert!(build_pointmass::<f64>(&cfg).is_err());
    }

    #[test]
    fn step_is_deterministic() {
        let e = env();
        let s = vec![0.123, -0.456, 0.3, 0.7];
        let a = vec![0.25, -0.9];
        let first = e.step(&s, &a).unwrap();
        for _ in 0..1000 {
            let again = e.step(&s, &a).unwrap();
            assert!(first.0.iter().zip(&again.0).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert_eq!(first.1.to_bits(), again.1.to_bits());
        }
    }

    #[test]
    fn expert_beats_medium_beats_random() {
        let e = env();
        let (random, expert) = e.reference_returns(20, 0).unwrap();
        let mut rng = rng::stream(1, "t");
        let medium: f64 = (0..20)
            .map(|_| e.rollout(|s| ScriptedPolicy::Medium.act(&e, s, 0.0, &mut rng)).unwrap())
            .sum::<f64>()
            / 20.0;
        assert!(expert > medium && medium > random, "{expert} {medium} {random}");
    }
}
