//! Exact reward-based pseudometric on deterministic tabular MDPs.
//!
//! The operator is
//!
//! ```text
//! F(d)(x; y) = |r(x) - r(y)| + gamma * mean_{a'} d(next(x), a'; next(y), a')
//! ```
//!
//! over state-action pairs `x`, `y`. It maps pseudometrics to pseudometrics,
//! is a gamma-contraction in the sup norm, and its unique fixed point `d*` is
//! reached both by full iteration and by random single-entry updates that
//! cover every pair with positive probability.

use std::io::Write;

use ndarray::Array2;
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::env::TabularMdp;
use crate::error::{check_index, Error, Result};
use crate::{rng, Scalar};

/// Dense pseudometric over state-action pairs, indexed `s * |A| + a`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPseudometric<T> {
    num_states: usize,
    num_actions: usize,
    values: Array2<T>,
}

impl<T: Scalar> TabularPseudometric<T> {
    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        let p = num_states * num_actions;
        Self { num_states, num_actions, values: Array2::zeros((p, p)) }
    }

    /// Wraps a square matrix. No axiom checking is done here; use
    /// [`check_pseudometric_axioms`].
    pub fn from_matrix(num_states: usize, num_actions: usize, values: Array2<T>) -> Result<Self> {
        let p = num_states * num_actions;
        if values.dim() != (p, p) {
            return Err(Error::DimensionMismatch(format!(
                "expected a {p}x{p} matrix, got {:?}",
                values.dim()
            )));
        }
        Ok(Self { num_states, num_actions, values })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_pairs(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &Array2<T> {
        &self.values
    }

    pub fn into_values(self) -> Array2<T> {
        self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.values[[x, y]]
    }

    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.values[[x, y]] = v;
    }

    /// `d(s1, a1; s2, a2)`.
    pub fn between(&self, s1: usize, a1: usize, s2: usize, a2: usize) -> T {
        let na = self.num_actions;
        self.values[[s1 * na + a1, s2 * na + a2]]
    }

    /// `mean_a d(s1, a; s2, a)`: the shared-action bootstrap term.
    pub fn action_mean(&self, s1: usize, s2: usize) -> T {
        let na = self.num_actions;
        let mut acc = T::zero();
        for a in 0..na {
            acc += self.values[[s1 * na + a, s2 * na + a]];
        }
        acc / T::from_usize_lossy(na)
    }

    fn check_mdp(&self, mdp: &TabularMdp<T>) -> Result<()> {
        if self.num_states != mdp.num_states() || self.num_actions != mdp.num_actions() {
            return Err(Error::DimensionMismatch(format!(
                "metric is over {}x{} pairs, MDP has {} states and {} actions",
                self.num_states,
                self.num_actions,
                mdp.num_states(),
                mdp.num_actions()
            )));
        }
        Ok(())
    }

    /// Writes `x,y,s1,a1,s2,a2,distance` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "x,y,s1,a1,s2,a2,distance")?;
        let na = self.num_actions;
        for x in 0..self.num_pairs() {
            for y in 0..self.num_pairs() {
                writeln!(
                    w,
                    "{x},{y},{},{},{},{},{}",
                    x / na,
                    x % na,
                    y / na,
                    y % na,
                    self.values[[x, y]]
                )?;
            }
        }
        Ok(())
    }
}

/// The all-zero pseudometric `d_0` sized for `mdp`.
pub fn zero_metric<T: Scalar>(mdp: &TabularMdp<T>) -> TabularPseudometric<T> {
    TabularPseudometric::zeros(mdp.num_states(), mdp.num_actions())
}

fn check_gamma<T: Scalar>(gamma: T) -> Result<()> {
    if gamma >= T::zero() && gamma < T::one() {
        Ok(())
    } else {
        Err(Error::validation(format!("gamma must be in [0, 1), got {gamma}")))
    }
}

/// Largest absolute entrywise difference.
pub fn sup_distance<T: Scalar>(d1: &TabularPseudometric<T>, d2: &TabularPseudometric<T>) -> Result<T> {
    if d1.values.dim() != d2.values.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{:?} vs {:?}",
            d1.values.dim(),
            d2.values.dim()
        )));
    }
    Ok(d1
        .values
        .iter()
        .zip(d2.values.iter())
        .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
}

/// One application of the operator `F`.
pub fn apply_operator<T: Scalar>(
    mdp: &TabularMdp<T>,
    d: &TabularPseudometric<T>,
    gamma: T,
) -> Result<TabularPseudometric<T>> {
    d.check_mdp(mdp)?;
    check_gamma(gamma)?;
    let ns = mdp.num_states();
    // bootstrap table over successor-state pairs
    let mut boot = Array2::zeros((ns, ns));
    for s1 in 0..ns {
        for s2 in s1..ns {
            let m = d.action_mean(s1, s2);
            boot[[s1, s2]] = m;
            boot[[s2, s1]] = m;
        }
    }
    let p = mdp.num_pairs();
    let mut out = Array2::zeros((p, p));
    for x in 0..p {
        let (rx, nx) = (mdp.reward_of_pair(x), mdp.next_of_pair(x));
        for y in x + 1..p {
            let v = (rx - mdp.reward_of_pair(y)).abs() + gamma * boot[[nx, mdp.next_of_pair(y)]];
            out[[x, y]] = v;
            out[[y, x]] = v;
        }
        // |r - r| = 0 and the bootstrap compares a state with itself
        out[[x, x]] = gamma * boot[[nx, nx]];
    }
    Ok(TabularPseudometric { num_states: ns, num_actions: mdp.num_actions(), values: out })
}

/// Per-iteration record of a fixed-point run.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointDiagnostics {
    /// `residuals[n] = |F(d_n) - d_n|_inf`.
    pub residuals: Vec<f64>,
    pub gamma: f64,
}

impl FixedPointDiagnostics {
    pub fn iterations(&self) -> usize {
        self.residuals.len()
    }

    /// Whether each residual is at most `gamma` times the previous one
    /// (plus `slack`).
    pub fn contracts(&self, slack: f64) -> bool {
        self.residuals.windows(2).all(|w| w[1] <= self.gamma * w[0] + slack)
    }

    /// Whether `r_n <= gamma^n r_0 + slack` for every logged n.
    pub fn geometric_bound_holds(&self, slack: f64) -> bool {
        let r0 = match self.residuals.first() {
            Some(&r) => r,
            None => return true,
        };
        self.residuals
            .iter()
            .enumerate()
            .all(|(n, &r)| r <= self.gamma.powi(n as i32) * r0 + slack)
    }
}

/// Iterates `d <- F(d)` from `d0` until `|F(d) - d|_inf <= tol`.
///
/// The returned metric is the last image `F(d_n)`, whose own residual is at
/// most `gamma * tol`.
pub fn iterate_to_fixed_point<T: Scalar>(
    mdp: &TabularMdp<T>,
    d0: &TabularPseudometric<T>,
    gamma: T,
    tol: T,
    max_iter: usize,
) -> Result<(TabularPseudometric<T>, FixedPointDiagnostics)> {
    if !(tol > T::zero()) {
        return Err(Error::validation("tolerance must be positive"));
    }
    d0.check_mdp(mdp)?;
    let mut diag = FixedPointDiagnostics { residuals: Vec::new(), gamma: gamma.as_f64() };
    let mut d = d0.clone();
    for _ in 0..max_iter {
        let next = apply_operator(mdp, &d, gamma)?;
        let residual = sup_distance(&next, &d)?;
        diag.residuals.push(residual.as_f64());
        if !residual.is_finite() {
            return Err(Error::NonFinite("fixed-point residual".into()));
        }
        d = next;
        if residual <= tol {
            return Ok((d, diag));
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual: diag.residuals.last().copied().unwrap_or(f64::NAN),
    })
}

/// A transition of a tabular MDP by index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TabularTransition<T> {
    pub state: usize,
    pub action: usize,
    pub reward: T,
    pub next_state: usize,
}

impl<T: Scalar> TabularTransition<T> {
    pub fn from_mdp(mdp: &TabularMdp<T>, state: usize, action: usize) -> Result<Self> {
        let step = mdp.step(state, action)?;
        Ok(Self { state, action, reward: step.reward, next_state: step.next_state })
    }
}

/// In-place sampled operator: rewrites only the entry of the sampled pair
/// and its mirror.
pub fn sampled_update<T: Scalar>(
    d: &mut TabularPseudometric<T>,
    t1: &TabularTransition<T>,
    t2: &TabularTransition<T>,
    gamma: T,
) -> Result<()> {
    let (ns, na) = (d.num_states, d.num_actions);
    for t in [t1, t2] {
        check_index("state", t.state, ns)?;
        check_index("next state", t.next_state, ns)?;
        check_index("action", t.action, na)?;
    }
    let x = t1.state * na + t1.action;
    let y = t2.state * na + t2.action;
    let v = (t1.reward - t2.reward).abs() + gamma * d.action_mean(t1.next_state, t2.next_state);
    d.values[[x, y]] = v;
    d.values[[y, x]] = v;
    Ok(())
}

/// Value-returning form of [`sampled_update`].
pub fn apply_sampled_operator<T: Scalar>(
    d: &TabularPseudometric<T>,
    t1: &TabularTransition<T>,
    t2: &TabularTransition<T>,
    gamma: T,
) -> Result<TabularPseudometric<T>> {
    let mut out = d.clone();
    sampled_update(&mut out, t1, t2, gamma)?;
    Ok(out)
}

/// How pairs are drawn by [`sampled_fixed_point`].
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    /// Weights over ordered pairs `(x, y)`, flattened as `x * P + y`. `None`
    /// means uniform.
    pub pair_weights: Option<Vec<f64>>,
    pub max_updates: usize,
    /// Convergence is tested every this many updates (`None`: every `P^2`).
    pub check_every: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { pair_weights: None, max_updates: 1_000_000, check_every: None }
    }
}

impl SamplerConfig {
    /// Smallest probability of any ordered pair (the coverage constant).
    pub fn min_pair_probability(&self, num_pairs: usize) -> f64 {
        match &self.pair_weights {
            None => 1.0 / (num_pairs * num_pairs) as f64,
            Some(w) => {
                let total: f64 = w.iter().sum();
                w.iter().copied().fold(f64::INFINITY, f64::min) / total
            }
        }
    }
}

/// Outcome of a sampled run.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledDiagnostics {
    pub updates: usize,
    /// Final error measure: distance to the reference when one was given,
    /// otherwise the a-posteriori bound `|F(d) - d|_inf / (1 - gamma)`.
    pub error: f64,
}

/// Repeatedly applies the sampled operator to random pairs (starting from
/// zero) until the error measure falls to `tol`.
///
/// Without a reference, the stopping rule uses `|d - d*| <= |F(d) - d| / (1 - gamma)`.
pub fn sampled_fixed_point<T: Scalar>(
    mdp: &TabularMdp<T>,
    gamma: T,
    cfg: &SamplerConfig,
    tol: T,
    seed: u64,
    reference: Option<&TabularPseudometric<T>>,
) -> Result<(TabularPseudometric<T>, SampledDiagnostics)> {
    check_gamma(gamma)?;
    if !(tol > T::zero()) {
        return Err(Error::validation("tolerance must be positive"));
    }
    let p = mdp.num_pairs();
    let weights = match &cfg.pair_weights {
        Some(w) => {
            if w.len() != p * p {
                return Err(Error::DimensionMismatch(format!(
                    "pair weights need {} entries, got {}",
                    p * p,
                    w.len()
                )));
            }
            if !(cfg.min_pair_probability(p) > 0.0) {
                return Err(Error::validation("sampler must give every pair positive probability"));
            }
            Some(WeightedIndex::new(w).map_err(|e| Error::validation(e.to_string()))?)
        }
        None => None,
    };
    if let Some(r) = reference {
        r.check_mdp(mdp)?;
    }
    let check_every = cfg.check_every.unwrap_or(p * p).max(1);
    let mut rng = rng::stream(seed, "sampled-operator");
    let mut d = zero_metric(mdp);
    let error_of = |d: &TabularPseudometric<T>| -> Result<f64> {
        Ok(match reference {
            Some(r) => sup_distance(d, r)?.as_f64(),
            None => {
                sup_distance(&apply_operator(mdp, d, gamma)?, d)?.as_f64() / (1.0 - gamma.as_f64())
            }
        })
    };
    let mut error = f64::INFINITY;
    for update in 1..=cfg.max_updates {
        let (x, y) = match &weights {
            Some(w) => {
                let k = w.sample(&mut rng);
                (k / p, k % p)
            }
            None => (rng.gen_range(0..p), rng.gen_range(0..p)),
        };
        let (s1, a1) = mdp.pair_of(x);
        let (s2, a2) = mdp.pair_of(y);
        let t1 = TabularTransition::from_mdp(mdp, s1, a1)?;
        let t2 = TabularTransition::from_mdp(mdp, s2, a2)?;
        sampled_update(&mut d, &t1, &t2, gamma)?;
        if update % check_every == 0 || update == cfg.max_updates {
            error = error_of(&d)?;
            if error <= tol.as_f64() {
                return Ok((d, SampledDiagnostics { updates: update, error }));
            }
        }
    }
    Err(Error::NonConvergence { iterations: cfg.max_updates, residual: error })
}

/// One failed axiom.
#[derive(Debug, Clone, PartialEq)]
pub enum AxiomViolation {
    Negative { x: usize, y: usize, value: f64 },
    NonZeroDiagonal { x: usize, value: f64 },
    Asymmetric { x: usize, y: usize, forward: f64, backward: f64 },
    Triangle { x: usize, y: usize, z: usize, direct: f64, via: f64 },
}

/// Result of [`check_pseudometric_axioms`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AxiomReport {
    /// First violations found (at most [`AxiomReport::MAX_LISTED`]).
    pub violations: Vec<AxiomViolation>,
    pub violation_count: usize,
    pub triples_checked: usize,
}

impl AxiomReport {
    pub const MAX_LISTED: usize = 64;

    pub fn passed(&self) -> bool {
        self.violation_count == 0
    }

    fn push(&mut self, v: AxiomViolation) {
        self.violation_count += 1;
        if self.violations.len() < Self::MAX_LISTED {
            self.violations.push(v);
        }
    }
}

/// Checks non-negativity, zero diagonal, symmetry and every triangle
/// inequality `d(x,z) <= d(x,y) + d(y,z)` up to `tol`.
pub fn check_pseudometric_axioms<T: Scalar>(d: &TabularPseudometric<T>, tol: T) -> AxiomReport {
    let mut report = AxiomReport::default();
    let v = &d.values;
    let p = d.num_pairs();
    for x in 0..p {
        if v[[x, x]].abs() > tol || !v[[x, x]].is_finite() {
            report.push(AxiomViolation::NonZeroDiagonal { x, value: v[[x, x]].as_f64() });
        }
        for y in 0..p {
            if v[[x, y]] < -tol || !v[[x, y]].is_finite() {
                report.push(AxiomViolation::Negative { x, y, value: v[[x, y]].as_f64() });
            }
            if y > x && (v[[x, y]] - v[[y, x]]).abs() > tol {
                report.push(AxiomViolation::Asymmetric {
                    x,
                    y,
                    forward: v[[x, y]].as_f64(),
                    backward: v[[y, x]].as_f64(),
                });
            }
        }
    }
    for x in 0..p {
        for y in 0..p {
            let dxy = v[[x, y]];
            for z in 0..p {
                let via = dxy + v[[y, z]];
                if v[[x, z]] > via + tol {
                    report.push(AxiomViolation::Triangle {
                        x,
                        y,
                        z,
                        direct: v[[x, z]].as_f64(),
                        via: via.as_f64(),
                    });
                }
            }
        }
    }
    report.triples_checked = p * p * p;
    report
}

/// Random pseudometrics for property tests and the verify suite.
pub mod random {
    use ndarray::Array2;
    use rand::Rng;

    use super::TabularPseudometric;
    use crate::Scalar;

    /// Shortest-path closure of random symmetric edge weights in [0, scale);
    /// about a tenth of the edges are zero, so distinct pairs can sit at
    /// distance 0.
    pub fn random_pseudometric<T: Scalar, R: Rng + ?Sized>(
        rng: &mut R,
        num_states: usize,
        num_actions: usize,
        scale: f64,
    ) -> TabularPseudometric<T> {
        let p = num_states * num_actions;
        let mut w = Array2::<f64>::zeros((p, p));
        for x in 0..p {
            for y in x + 1..p {
                let v = if rng.gen_bool(0.1) { 0.0 } else { rng.gen::<f64>() * scale };
                w[[x, y]] = v;
                w[[y, x]] = v;
            }
        }
        for k in 0..p {
            for x in 0..p {
                for y in 0..p {
                    let via = w[[x, k]] + w[[k, y]];
                    if via < w[[x, y]] {
                        w[[x, y]] = via;
                    }
                }
            }
        }
        let values = w.mapv(T::lit);
        TabularPseudometric::from_matrix(num_states, num_actions, values)
            .expect("square by construction")
    }
}
