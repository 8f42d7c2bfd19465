//! Data behind the figures: distance heatmaps over a gridworld and
//! distance growth under input noise. Plotting is left to external tools.

use std::io::Write;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::TransitionDataset;
use crate::env::Gridworld;
use crate::error::{Error, Result};
use crate::metric_approx::{distance, EmbedderPair};
use crate::{rng, stats, Scalar};

/// `d_Psi` from the anchor cell to every cell; `None` on walls.
pub fn psi_heatmap<T: Scalar>(
    grid: &Gridworld<T>,
    pair: &EmbedderPair<T>,
    anchor: (usize, usize),
) -> Result<Vec<Vec<Option<f64>>>> {
    let ns = grid.mdp.num_states();
    let a = grid.state_at(anchor.0, anchor.1).ok_or_else(|| {
        Error::validation(format!("anchor ({}, {}) is outside the grid or on a wall", anchor.0, anchor.1))
    })?;
    let eye = Array2::from_shape_fn((ns, ns), |(i, j)| if i == j { T::one() } else { T::zero() });
    let e = pair.embed_states(eye.view())?;
    Ok((0..grid.map.rows())
        .map(|r| {
            (0..grid.map.cols())
                .map(|c| grid.state_at(r, c).map(|s| distance(e.row(s), e.row(a)).as_f64()))
                .collect()
        })
        .collect())
}

pub fn write_heatmap_csv<W: Write>(heat: &[Vec<Option<f64>>], mut w: W) -> std::io::Result<()> {
    for row in heat {
        let cells: Vec<String> = row.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Spearman correlation between heatmap values and wall-respecting path
/// length to the anchor, over cells at most `radius` moves away.
pub fn heatmap_path_correlation<T: Scalar>(
    grid: &Gridworld<T>,
    heat: &[Vec<Option<f64>>],
    anchor: (usize, usize),
    radius: usize,
) -> Result<(f64, usize)> {
    let a = grid
        .state_at(anchor.0, anchor.1)
        .ok_or_else(|| Error::validation("anchor is outside the grid or on a wall"))?;
    let lengths = grid.path_lengths_to(a);
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for (s, &(r, c)) in grid.cells.iter().enumerate() {
        if let (Some(l), Some(v)) = (lengths[s], heat[r][c]) {
            if l <= radius {
                x.push(v);
                y.push(l as f64);
            }
        }
    }
    Ok((stats::spearman(&x, &y), x.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Perturbed {
    State,
    Action,
}

impl Perturbed {
    pub fn name(self) -> &'static str {
        match self {
            Perturbed::State => "state",
            Perturbed::Action => "action",
        }
    }
}

pub const NOISE_LAMBDAS: [f64; 5] = [0.0, 0.05, 0.1, 0.2, 0.4];
pub const NOISE_QUANTILES: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 0.9];

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRow {
    pub perturbed: Perturbed,
    pub lambda: f64,
    pub mean: f64,
    /// Values at [`NOISE_QUANTILES`].
    pub quantiles: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseStudy {
    pub rows: Vec<NoiseRow>,
    /// Per perturbed input: fraction of (sample, adjacent lambda) steps
    /// where the distance went down.
    pub sample_violations: Vec<(Perturbed, f64)>,
}

impl NoiseStudy {
    pub fn means(&self, which: Perturbed) -> Vec<f64> {
        self.rows.iter().filter(|r| r.perturbed == which).map(|r| r.mean).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let q: Vec<String> = NOISE_QUANTILES.iter().map(|q| format!("q{:02}", (q * 100.0).round())).collect();
        writeln!(w, "perturbed,lambda,mean,{}", q.join(","))?;
        for r in &self.rows {
            let v: Vec<String> = r.quantiles.iter().map(f64::to_string).collect();
            writeln!(w, "{},{},{},{}", r.perturbed.name(), r.lambda, r.mean, v.join(","))?;
        }
        Ok(())
    }
}

/// `d_Phi((s, a), (s + lambda nu, a))` and `d_Phi((s, a), (s, a + lambda nu))`
/// for `samples` dataset pairs and standard normal `nu`. Each sample keeps
/// its `nu` across the lambda grid.
pub fn noise_study<T: Scalar>(
    pair: &EmbedderPair<T>,
    data: &TransitionDataset<T>,
    lambdas: &[f64],
    samples: usize,
    seed: u64,
) -> Result<NoiseStudy> {
    if data.is_empty() || samples == 0 || lambdas.is_empty() {
        return Err(Error::validation("noise study needs data, samples and lambdas"));
    }
    let mut r = rng::stream(seed, "noise-study");
    let idx: Vec<usize> = (0..samples).map(|_| r.gen_range(0..data.len())).collect();
    let batch = data.gather(idx);
    let base = pair.embed_pairs(batch.states.view(), batch.actions.view())?;
    let mut rows = Vec::new();
    let mut sample_violations = Vec::new();
    for which in [Perturbed::State, Perturbed::Action] {
        let target = match which {
            Perturbed::State => &batch.states,
            Perturbed::Action => &batch.actions,
        };
        let nu = Array2::from_shape_fn(target.dim(), |_| {
            let z: f64 = StandardNormal.sample(&mut r);
            T::lit(z)
        });
        let mut per_lambda: Vec<Vec<f64>> = Vec::new();
        for &lambda in lambdas {
            let moved = target + &(&nu * T::lit(lambda));
            let e = match which {
                Perturbed::State => pair.embed_pairs(moved.view(), batch.actions.view())?,
                Perturbed::Action => pair.embed_pairs(batch.states.view(), moved.view())?,
            };
            let d: Vec<f64> = (0..samples).map(|i| distance(base.row(i), e.row(i)).as_f64()).collect();
            rows.push(NoiseRow {
                perturbed: which,
                lambda,
                mean: stats::mean(&d),
                quantiles: NOISE_QUANTILES.iter().map(|&q| stats::quantile(&d, q)).collect(),
            });
            per_lambda.push(d);
        }
        let steps = per_lambda.windows(2).map(|w| w[0].iter().zip(&w[1]).filter(|(a, b)| b < a).count());
        let total = (lambdas.len() - 1).max(1) * samples;
        sample_violations.push((which, steps.sum::<usize>() as f64 / total as f64));
    }
    Ok(NoiseStudy { rows, sample_violations })
}

/// Fraction of adjacent pairs in `values` that decrease.
pub fn adjacent_violations(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    values.windows(2).filter(|w| w[1] < w[0]).count() as f64 / (values.len() - 1) as f64
}
