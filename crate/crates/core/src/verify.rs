//! Executable property suites: operator axioms, contraction, fixed points,
//! sampled convergence, analytic gradients and exact neighbour search.

use std::fmt;

use ndarray::Array2;
use rand::Rng;

use crate::agent::{actor_objective_and_grads, init_agent, AgentConfig, BonusSource};
use crate::bonus::{build_neighbor_index, BonusForm, BonusSpec, RawPairIndex};
use crate::dataset::{ActionSpace, PairBatch, Transition, TransitionDataset};
use crate::env::random::random_mdp;
use crate::env::TabularMdp;
use crate::error::Result;
use crate::kdtree::{brute_force_knn, KdTree};
use crate::metric_approx::{init_embedders, EmbedderPair, EmbedderShape};
use crate::metric_exact::random::random_pseudometric;
use crate::metric_exact::{
    apply_operator, check_pseudometric_axioms, iterate_to_fixed_point, sampled_fixed_point, sup_distance,
    zero_metric, SamplerConfig, TabularPseudometric,
};
use crate::nn::{Gradients, Mlp};
use crate::rng;

pub const GAMMAS: [f64; 3] = [0.5, 0.9, 0.99];

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: usize,
    pub failed: usize,
    pub detail: String,
}

impl SuiteReport {
    fn new(name: &'static str) -> Self {
        Self { name, passed: 0, failed: 0, detail: String::new() }
    }

    fn record(&mut self, ok: bool, what: impl FnOnce() -> String) {
        if ok {
            self.passed += 1;
        } else {
            self.failed += 1;
            if self.detail.is_empty() {
                self.detail = what();
            }
        }
    }

    pub fn ok(&self) -> bool {
        self.failed == 0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerifyReport {
    pub suites: Vec<SuiteReport>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.suites.iter().all(SuiteReport::ok)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.suites {
            let total = s.passed + s.failed;
            let verdict = if s.ok() { "PASS" } else { "FAIL" };
            write!(f, "{verdict} {:<12} {}/{}", s.name, s.passed, total)?;
            if !s.detail.is_empty() {
                write!(f, "  first failure: {}", s.detail)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyConfig {
    pub trials: usize,
    pub sampled_seeds: usize,
    pub knn_instances: usize,
    pub seed: u64,
    /// Adds a matrix that breaks the triangle inequality to the axiom suite.
    pub inject_triangle_violation: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { trials: 100, sampled_seeds: 10, knn_instances: 200, seed: 0, inject_triangle_violation: false }
    }
}

/// A random MDP (`|S| <= 12`, `|A| <= 4`), a discount from [`GAMMAS`] and
/// two random pseudometrics on its pairs.
pub struct RandomCase {
    pub mdp: TabularMdp<f64>,
    pub gamma: f64,
    pub d1: TabularPseudometric<f64>,
    pub d2: TabularPseudometric<f64>,
}

pub fn random_case<R: Rng + ?Sized>(rng: &mut R) -> RandomCase {
    let ns = rng.gen_range(1..=12);
    let na = rng.gen_range(1..=4);
    let mdp = random_mdp(rng, ns, na);
    let gamma = GAMMAS[rng.gen_range(0..GAMMAS.len())];
    let (s1, s2) = (rng.gen_range(0.1..5.0), rng.gen_range(0.1..5.0));
    let d1 = random_pseudometric(rng, ns, na, s1);
    let d2 = random_pseudometric(rng, ns, na, s2);
    RandomCase { mdp, gamma, d1, d2 }
}

/// Three pairs with `d(0,2) > d(0,1) + d(1,2)`.
pub fn triangle_violation_fixture() -> TabularPseudometric<f64> {
    let v = Array2::from_shape_vec((3, 3), vec![0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0]).expect("3x3");
    TabularPseudometric::from_matrix(3, 1, v).expect("square")
}

pub fn suite_axioms(cfg: &VerifyConfig) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("axioms");
    let mut r = rng::stream(cfg.seed, "verify/axioms");
    for t in 0..cfg.trials {
        let c = random_case(&mut r);
        let image = apply_operator(&c.mdp, &c.d1, c.gamma)?;
        let report = check_pseudometric_axioms(&image, 1e-9);
        rep.record(report.passed(), || format!("trial {t}: {:?}", report.violations.first()));
    }
    if cfg.inject_triangle_violation {
        let report = check_pseudometric_axioms(&triangle_violation_fixture(), 1e-9);
        rep.record(report.passed(), || format!("injected fixture: {:?}", report.violations.first()));
    }
    Ok(rep)
}

pub fn suite_contraction(cfg: &VerifyConfig) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("contraction");
    let mut r = rng::stream(cfg.seed, "verify/axioms");
    for t in 0..cfg.trials {
        let c = random_case(&mut r);
        let lhs = sup_distance(&apply_operator(&c.mdp, &c.d1, c.gamma)?, &apply_operator(&c.mdp, &c.d2, c.gamma)?)?;
        let rhs = c.gamma * sup_distance(&c.d1, &c.d2)? + 1e-12;
        rep.record(lhs <= rhs, || format!("trial {t}: {lhs} > {rhs}"));
    }
    Ok(rep)
}

/// Two states with one self-looping action each, rewards 0 and 1.
pub fn two_state_loop() -> TabularMdp<f64> {
    TabularMdp::new(2, 1, vec![0, 1], vec![0.0, 1.0], vec![false, false], 100, vec![0]).expect("valid")
}

pub fn suite_fixed_point(cfg: &VerifyConfig) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("fixed_point");
    let mut r = rng::stream(cfg.seed, "verify/fixed");
    for t in 0..cfg.trials {
        let c = random_case(&mut r);
        let (_, diag) = iterate_to_fixed_point(&c.mdp, &c.d1, c.gamma, 1e-10, 100_000)?;
        rep.record(diag.geometric_bound_holds(1e-9), || format!("trial {t}: residuals {:?}", &diag.residuals[..diag.residuals.len().min(4)]));
    }
    let mdp = two_state_loop();
    for gamma in GAMMAS {
        let (d, _) = iterate_to_fixed_point(&mdp, &zero_metric(&mdp), gamma, 1e-13, 100_000)?;
        let want = 1.0 / (1.0 - gamma);
        let got = d.between(0, 0, 1, 0);
        rep.record((got - want).abs() <= 1e-9, || format!("closed form gamma {gamma}: {got} vs {want}"));
    }
    Ok(rep)
}

pub fn suite_sampled(cfg: &VerifyConfig) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("sampled");
    for seed in 0..cfg.sampled_seeds as u64 {
        let mut r = rng::stream(cfg.seed.wrapping_add(seed), "verify/sampled");
        let ns = r.gen_range(2..=6);
        let na = r.gen_range(1..=2);
        let mdp = random_mdp::<f64, _>(&mut r, ns, na);
        let (exact, _) = iterate_to_fixed_point(&mdp, &zero_metric(&mdp), 0.9, 1e-13, 100_000)?;
        let out = sampled_fixed_point(&mdp, 0.9, &SamplerConfig::default(), 1e-6, seed, Some(&exact));
        rep.record(matches!(out, Ok((_, ref d)) if d.error <= 1e-6), || format!("seed {seed}: {out:?}", out = out.as_ref().map(|o| &o.1)));
    }
    Ok(rep)
}

/// Largest relative gap between central differences of `loss` in the
/// parameters of the network picked by `net` and `analytic`.
pub fn max_relative_error<S>(
    state: &mut S,
    net: fn(&mut S) -> &mut Mlp<f64>,
    loss: impl Fn(&S) -> f64,
    analytic: &Gradients<f64>,
) -> f64 {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..net(state).param_count() {
        let v = net(state).param(i);
        net(state).set_param(i, v + h);
        let up = loss(state);
        net(state).set_param(i, v - h);
        let down = loss(state);
        net(state).set_param(i, v);
        let fd = (up - down) / (2.0 * h);
        let an = analytic.get(i);
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
    }
    worst
}

fn random_dataset<R: Rng + ?Sized>(r: &mut R, n: usize, ds: usize, da: usize) -> TransitionDataset<f64> {
    let ts: Vec<_> = (0..n)
        .map(|_| Transition {
            s: (0..ds).map(|_| r.gen_range(-1.0..1.0)).collect(),
            a: (0..da).map(|_| r.gen_range(-1.0..1.0)).collect(),
            r: r.gen(),
            s_next: (0..ds).map(|_| r.gen_range(-1.0..1.0)).collect(),
            done: r.gen_bool(0.1),
        })
        .collect();
    TransitionDataset::from_transitions("pointmass", &ts)
        .and_then(|d| d.scale_rewards())
        .expect("random rewards are not constant")
}

/// Gradient checks on width-(8, 4) metric networks and width-(8, 8) agent
/// networks. Returns `(name, max relative error, tolerance)` per check.
pub fn gradient_checks(seed: u64) -> Result<Vec<(String, f64, f64)>> {
    let mut out = Vec::new();
    let mut r = rng::stream(seed, "verify/gradients");
    let shape = EmbedderShape { hidden: 8, embed_dim: 4 };
    let boxed = ActionSpace::Box { low: vec![-1.0; 2], high: vec![1.0; 2] };
    let data = random_dataset(&mut r, 40, 3, 2);

    let mut pair: EmbedderPair<f64> = init_embedders(3, boxed.clone(), shape, seed)?;
    pair.psi_target.set_param(2, 0.6);
    pair.phi_target.set_param(4, -0.5);
    pair.n_action_samples = 5;
    let batch = PairBatch { first: data.gather((0..8).collect()), second: data.gather((8..16).collect()) };
    let (_, g) = pair.loss_phi(&batch)?;
    let e = max_relative_error(&mut pair, |p| &mut p.phi, |p| p.loss_phi(&batch).expect("valid batch").0, &g);
    out.push(("loss_phi".to_string(), e, 1e-4));

    for (name, shared) in [("loss_psi", true), ("loss_psi_independent", false)] {
        pair.shared_action = shared;
        let (s1, s2) = (batch.first.states.clone(), batch.second.states.clone());
        let u = rng::stream(seed, "verify/actions");
        let (_, g) = pair.loss_psi(s1.view(), s2.view(), &mut u.clone())?;
        let e = max_relative_error(
            &mut pair,
            |p| &mut p.psi,
            |p| p.loss_psi(s1.view(), s2.view(), &mut u.clone()).expect("valid batch").0,
            &g,
        );
        out.push((name.to_string(), e, 1e-4));
    }

    let mut tab: EmbedderPair<f64> = init_embedders(5, ActionSpace::Discrete(3), shape, seed)?;
    tab.phi_target.set_param(1, 0.9);
    tab.n_action_samples = 3;
    let s1 = Array2::from_shape_fn((6, 5), |_| r.gen_range(0.0..1.0));
    let s2 = Array2::from_shape_fn((6, 5), |_| r.gen_range(0.0..1.0));
    let u = rng::stream(seed, "verify/actions");
    let (_, g) = tab.loss_psi(s1.view(), s2.view(), &mut u.clone())?;
    let e = max_relative_error(&mut tab, |p| &mut p.psi, |p| p.loss_psi(s1.view(), s2.view(), &mut u.clone()).expect("valid").0, &g);
    out.push(("loss_psi_discrete".to_string(), e, 1e-4));

    let idx = build_neighbor_index(&pair, &data, 10)?;
    let raw = RawPairIndex::build(&data)?;
    let cfg = AgentConfig { hidden: [8, 8], ..Default::default() };
    let agent_batch = data.gather((0..8).collect());
    let sources = [
        ("none", BonusSource::Zero),
        ("learned", BonusSource::Learned { pair: &pair, index: &idx }),
        ("l2", BonusSource::RawPairs(&raw)),
    ];
    for form in [BonusForm::QScaledExp, BonusForm::Exp, BonusForm::OneMinusExp] {
        let spec = BonusSpec { form, beta: 0.5, alpha_actor: 2.0, alpha_critic: 1.0 };
        for (src_name, src) in &sources {
            if *src_name == "none" && form != BonusForm::QScaledExp {
                continue;
            }
            let mut agent = init_agent(3, &[-1.0, -1.0], &[1.0, 1.0], &cfg)?;
            agent.critic1_target.set_param(3, 0.7);
            let (_, g, _) = actor_objective_and_grads(&agent, &agent_batch, src, &spec)?;
            // descent gradient: compare against the negated objective
            let e = max_relative_error(
                &mut agent,
                |a| &mut a.actor,
                |a| -actor_objective_and_grads(a, &agent_batch, src, &spec).expect("valid").0,
                &g,
            );
            out.push((format!("actor_{src_name}_{}", form.name()), e, 1e-3));
        }
    }
    Ok(out)
}

pub fn suite_gradients(cfg: &VerifyConfig) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("gradients");
    for (name, err, tol) in gradient_checks(cfg.seed)? {
        rep.record(err <= tol, || format!("{name}: relative error {err:.2e} > {tol:.0e}"));
    }
    Ok(rep)
}

/// One randomized neighbour-search instance: true when the tree agrees
/// with the full scan on every query.
pub fn knn_instance(seed: u64) -> Result<bool> {
    let mut r = rng::stream(seed, "verify/knn");
    let n = r.gen_range(1..=2000);
    let dim = [2, 8, 32][r.gen_range(0..3)];
    let coarse = r.gen_bool(0.3);
    let draw = |r: &mut rng::Rng| if coarse { r.gen_range(0..4) as f32 } else { r.gen_range(-1.0f32..1.0) };
    let points = Array2::from_shape_fn((n, dim), |_| draw(&mut r));
    let tree = KdTree::build(points.clone())?;
    for _ in 0..5 {
        let q: Vec<f32> = if r.gen_bool(0.3) {
            points.row(r.gen_range(0..n)).to_vec()
        } else {
            (0..dim).map(|_| draw(&mut r)).collect()
        };
        let k = r.gen_range(1..=60);
        if tree.knn(&q, k)? != brute_force_knn(points.view(), &q, k)? {
            return Ok(false);
        }
    }
    Ok(true)
}

pub fn suite_knn(cfg: &VerifyConfig) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("knn");
    for i in 0..cfg.knn_instances as u64 {
        let ok = knn_instance(cfg.seed.wrapping_mul(1_000_003).wrapping_add(i))?;
        rep.record(ok, || format!("instance {i} disagrees with the full scan"));
    }
    Ok(rep)
}

pub fn run_verify(cfg: &VerifyConfig) -> Result<VerifyReport> {
    Ok(VerifyReport {
        suites: vec![
            suite_axioms(cfg)?,
            suite_contraction(cfg)?,
            suite_fixed_point(cfg)?,
            suite_sampled(cfg)?,
            suite_gradients(cfg)?,
            suite_knn(cfg)?,
        ],
    })
}
