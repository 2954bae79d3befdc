//! Exact-gradient t-SNE in two output dimensions.
//!
//! High-dimensional affinities are Gaussian conditionals calibrated to a
//! target perplexity and symmetrized; the embedding uses a Student-t kernel
//! and is optimized by momentum gradient descent on KL(P‖Q). The affinity
//! matrix is scaled during an early and an optional late exaggeration
//! phase.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// Lower bound applied to every off-diagonal affinity in the objective.
pub const AFFINITY_FLOOR: f64 = 1e-12;

/// Standard deviation of the Gaussian initialization.
pub const INIT_STD: f64 = 1e-4;

const PERPLEXITY_TOL: f64 = 1e-4;
const MAX_BRACKET_STEPS: usize = 200;
const MAX_BISECTION_STEPS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub n_iterations: usize,
    pub early_exaggeration_factor: f64,
    pub early_exaggeration_iters: usize,
    /// 1.0 disables late exaggeration.
    pub late_exaggeration_factor: f64,
    pub late_exaggeration_start: usize,
    pub learning_rate: f64,
    pub momentum_initial: f64,
    pub momentum_final: f64,
    pub momentum_switch_iter: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            n_iterations: 1000,
            early_exaggeration_factor: 12.0,
            early_exaggeration_iters: 250,
            late_exaggeration_factor: 1.0,
            late_exaggeration_start: 800,
            learning_rate: 200.0,
            momentum_initial: 0.5,
            momentum_final: 0.8,
            momentum_switch_iter: 250,
            seed: 0,
        }
    }
}

impl TsneConfig {
    /// Changes the iteration budget and moves the phase boundaries so they
    /// keep the default proportions (early 1/4, late start 4/5).
    pub fn with_iterations(mut self, n_iterations: usize) -> Self {
        self.n_iterations = n_iterations;
        self.early_exaggeration_iters = n_iterations / 4;
        self.momentum_switch_iter = n_iterations / 4;
        self.late_exaggeration_start = n_iterations * 4 / 5;
        self
    }

    pub fn validate(&self, n_points: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.perplexity > 0.0) || !self.perplexity.is_finite() {
            return bad(format!("perplexity must be positive, got {}", self.perplexity));
        }
        if self.perplexity >= n_points as f64 {
            return bad(format!(
                "perplexity {} must be below the number of points {n_points}",
                self.perplexity
            ));
        }
        if !(self.early_exaggeration_factor > 0.0) {
            return bad("early exaggeration factor must be positive".into());
        }
        if !(self.late_exaggeration_factor >= 1.0) {
            return bad("late exaggeration factor must be at least 1".into());
        }
        if !(self.early_exaggeration_iters < self.late_exaggeration_start
            && self.late_exaggeration_start <= self.n_iterations)
        {
            return bad(format!(
                "need early_exaggeration_iters ({}) < late_exaggeration_start ({}) <= n_iterations ({})",
                self.early_exaggeration_iters, self.late_exaggeration_start, self.n_iterations
            ));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning rate must be positive".into());
        }
        for m in [self.momentum_initial, self.momentum_final] {
            if !(0.0..1.0).contains(&m) {
                return bad(format!("momentum {m} outside [0, 1)"));
            }
        }
        Ok(())
    }

    fn exaggeration_at(&self, iter: usize) -> f64 {
        if iter < self.early_exaggeration_iters {
            self.early_exaggeration_factor
        } else if iter >= self.late_exaggeration_start {
            self.late_exaggeration_factor
        } else {
            1.0
        }
    }

    fn momentum_at(&self, iter: usize) -> f64 {
        if iter < self.momentum_switch_iter {
            self.momentum_initial
        } else {
            self.momentum_final
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub coords: Vec<[f64; 2]>,
    pub initial_kl: f64,
    pub final_kl: f64,
    /// Rows whose bandwidth search did not reach the target perplexity.
    pub calibration_warnings: Vec<usize>,
    pub config_used: TsneConfig,
}

impl Embedding {
    pub fn n_points(&self) -> usize {
        self.coords.len()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.coords.iter().flat_map(|c| c.iter().copied()).collect()
    }
}

/// Squared Euclidean distances between the rows of a row-major matrix with
/// `dim` columns.
pub fn pairwise_sq_distances(points: &[f64], dim: usize) -> Vec<f64> {
    assert!(dim > 0 && points.len().is_multiple_of(dim), "ragged point matrix");
    let n = points.len() / dim;
    let mut out = vec![0.0; n * n];
    out.par_chunks_mut(n.max(1)).enumerate().for_each(|(i, row)| {
        let a = &points[i * dim..(i + 1) * dim];
        for (j, cell) in row.iter_mut().enumerate() {
            if j != i {
                let b = &points[j * dim..(j + 1) * dim];
                *cell = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            }
        }
    });
    out
}

/// Outcome of the per-point precision search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bandwidth {
    /// β in `p_j ∝ exp(-β d_j²)`.
    pub precision: f64,
    /// 2^H achieved at `precision`.
    pub perplexity: f64,
    pub converged: bool,
}

/// Gaussian conditional distribution over neighbors at precision `beta`,
/// with its entropy in bits. Distances are shifted by their minimum so at
/// least one weight is exactly 1.
pub fn conditional_probabilities(sq_dists: &[f64], beta: f64) -> (Vec<f64>, f64) {
    let dmin = sq_dists.iter().copied().fold(f64::INFINITY, f64::min);
    let mut probs: Vec<f64> = sq_dists.iter().map(|&d| (-beta * (d - dmin)).exp()).collect();
    let sum: f64 = probs.iter().sum();
    let weighted: f64 = probs.iter().zip(sq_dists).map(|(w, &d)| w * (d - dmin)).sum();
    let entropy_nats = sum.ln() + beta * weighted / sum;
    for p in &mut probs {
        *p /= sum;
    }
    (probs, entropy_nats / std::f64::consts::LN_2)
}

fn perplexity_at(sq_dists: &[f64], beta: f64) -> f64 {
    conditional_probabilities(sq_dists, beta).1.exp2()
}

/// Finds the precision whose conditional distribution over `sq_dists`
/// (distances to the other points, self excluded) has perplexity
/// `target`. Brackets by doubling or halving from β = 1, then bisects.
pub fn calibrate_bandwidth(sq_dists: &[f64], target: f64) -> Bandwidth {
    let mut best = Bandwidth {
        precision: 1.0,
        perplexity: perplexity_at(sq_dists, 1.0),
        converged: false,
    };
    let consider = |beta: f64, perp: f64, best: &mut Bandwidth| {
        if (perp - target).abs() < (best.perplexity - target).abs() {
            *best = Bandwidth {
                precision: beta,
                perplexity: perp,
                converged: false,
            };
        }
    };
    let done = |perp: f64| (perp - target).abs() <= 1e-12 * target;

    // Perplexity is non-increasing in β.
    let (mut lo, mut hi);
    let start = best.perplexity;
    if done(start) {
        best.converged = true;
        return best;
    }
    let mut beta = 1.0;
    if start > target {
        lo = beta;
        hi = f64::NAN;
        for _ in 0..MAX_BRACKET_STEPS {
            beta *= 2.0;
            let perp = perplexity_at(sq_dists, beta);
            consider(beta, perp, &mut best);
            if perp <= target {
                hi = beta;
                break;
            }
            lo = beta;
        }
    } else {
        hi = beta;
        lo = f64::NAN;
        for _ in 0..MAX_BRACKET_STEPS {
            beta *= 0.5;
            let perp = perplexity_at(sq_dists, beta);
            consider(beta, perp, &mut best);
            if perp >= target {
                lo = beta;
                break;
            }
            hi = beta;
        }
    }
    if lo.is_finite() && hi.is_finite() && !done(best.perplexity) {
        for _ in 0..MAX_BISECTION_STEPS {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let perp = perplexity_at(sq_dists, mid);
            consider(mid, perp, &mut best);
            if done(perp) {
                break;
            }
            if perp > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    best.converged = (best.perplexity - target).abs() < PERPLEXITY_TOL;
    best
}

/// Symmetrized affinity matrix, row-major `n × n`, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Affinities {
    pub n: usize,
    pub p: Vec<f64>,
    pub bandwidths: Vec<Bandwidth>,
}

impl Affinities {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.n + j]
    }

    pub fn non_converged(&self) -> Vec<usize> {
        self.bandwidths
            .iter()
            .enumerate()
            .filter(|(_, b)| !b.converged)
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn joint_probabilities(d: &Dataset, perplexity: f64) -> Result<Affinities> {
    joint_probabilities_from_points(d.values(), d.n_features(), perplexity)
}

pub fn joint_probabilities_from_points(points: &[f64], dim: usize, perplexity: f64) -> Result<Affinities> {
    let n = points.len() / dim;
    if n < 4 {
        return Err(Error::InvalidDataset(format!("t-SNE needs at least 4 points, got {n}")));
    }
    if !(perplexity > 0.0) || perplexity >= (n - 1) as f64 {
        return Err(Error::InvalidConfig(format!(
            "perplexity {perplexity} must lie in (0, {})",
            n - 1
        )));
    }
    let dist = pairwise_sq_distances(points, dim);
    let rows: Vec<(Bandwidth, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i * n + j]).collect();
            let bw = calibrate_bandwidth(&others, perplexity);
            let (probs, _) = conditional_probabilities(&others, bw.precision);
            (bw, probs)
        })
        .collect();
    let mut cond = vec![0.0; n * n];
    for (i, (_, probs)) in rows.iter().enumerate() {
        let mut it = probs.iter();
        for j in (0..n).filter(|&j| j != i) {
            cond[i * n + j] = *it.next().expect("n - 1 probabilities");
        }
    }
    let denom = 2.0 * n as f64;
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = (cond[i * n + j] + cond[j * n + i]) / denom;
            }
        }
    }
    Ok(Affinities {
        n,
        p,
        bandwidths: rows.into_iter().map(|(b, _)| b).collect(),
    })
}

#[inline]
fn floored(p: f64) -> f64 {
    p.max(AFFINITY_FLOOR)
}

#[inline]
fn student_t(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    1.0 / (1.0 + dx * dx + dy * dy)
}

/// Normalizer Z = Σ_{i≠j} (1 + ‖y_i − y_j‖²)^{-1}, summed row by row in a
/// fixed order.
fn kernel_normalizer(coords: &[[f64; 2]]) -> f64 {
    let row_sums: Vec<f64> = (0..coords.len())
        .into_par_iter()
        .map(|i| {
            let yi = &coords[i];
            coords
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, yj)| student_t(yi, yj))
                .sum()
        })
        .collect();
    row_sums.iter().sum()
}

fn check_shapes(p: &Affinities, coords: &[[f64; 2]]) -> Result<()> {
    if p.n != coords.len() {
        return Err(Error::DimensionMismatch(format!(
            "affinities for {} points, {} coordinates",
            p.n,
            coords.len()
        )));
    }
    Ok(())
}

/// KL(P‖Q) with Student-t similarities Q, off-diagonal affinities floored
/// at [`AFFINITY_FLOOR`].
pub fn kl_divergence(p: &Affinities, coords: &[[f64; 2]]) -> Result<f64> {
    check_shapes(p, coords)?;
    let n = p.n;
    let ln_z = kernel_normalizer(coords).ln();
    let terms: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut acc = 0.0;
            for j in 0..n {
                if j != i {
                    let pij = floored(p.p[i * n + j]);
                    let ln_q = student_t(&coords[i], &coords[j]).ln() - ln_z;
                    acc += pij * (pij.ln() - ln_q);
                }
            }
            acc
        })
        .collect();
    Ok(terms.iter().sum::<f64>().max(0.0))
}

/// Row i of `4 Σ_j (a·p_ij − b·q_ij) w_ij (y_i − y_j)`.
fn scaled_gradient(p: &Affinities, coords: &[[f64; 2]], p_scale: f64, q_scale: f64) -> Vec<[f64; 2]> {
    let n = p.n;
    let z = kernel_normalizer(coords);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let yi = coords[i];
            let mut g = [0.0, 0.0];
            for (j, yj) in coords.iter().enumerate() {
                if j == i {
                    continue;
                }
                let w = student_t(&yi, yj);
                let coef = (p_scale * floored(p.p[i * n + j]) - q_scale * w / z) * w;
                g[0] += coef * (yi[0] - yj[0]);
                g[1] += coef * (yi[1] - yj[1]);
            }
            [4.0 * g[0], 4.0 * g[1]]
        })
        .collect()
}

/// Exact gradient of [`kl_divergence`] with respect to the coordinates.
pub fn kl_gradient(p: &Affinities, coords: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
    check_shapes(p, coords)?;
    // The normalizer term carries the total floored mass, which is 1 for any
    // affinity matrix whose entries all clear the floor.
    let mass: f64 = (0..p.n)
        .flat_map(|i| (0..p.n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| floored(p.get(i, j)))
        .sum();
    Ok(scaled_gradient(p, coords, 1.0, mass))
}

/// Seeded Gaussian starting layout.
pub fn initial_coords(n: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(&mut rng);
            let y: f64 = StandardNormal.sample(&mut rng);
            [INIT_STD * x, INIT_STD * y]
        })
        .collect()
}

pub fn embed(d: &Dataset, cfg: &TsneConfig) -> Result<Embedding> {
    cfg.validate(d.n_points())?;
    let p = joint_probabilities(d, cfg.perplexity)?;
    embed_affinities(&p, cfg)
}

/// Runs the optimization on precomputed affinities.
pub fn embed_affinities(p: &Affinities, cfg: &TsneConfig) -> Result<Embedding> {
    cfg.validate(p.n)?;
    let mut coords = initial_coords(p.n, cfg.seed);
    let initial_kl = kl_divergence(p, &coords)?;
    let mut update = vec![[0.0f64; 2]; p.n];
    for iter in 0..cfg.n_iterations {
        let exaggeration = cfg.exaggeration_at(iter);
        let momentum = cfg.momentum_at(iter);
        let grad = scaled_gradient(p, &coords, exaggeration, 1.0);
        for ((y, u), g) in coords.iter_mut().zip(update.iter_mut()).zip(&grad) {
            for k in 0..2 {
                u[k] = momentum * u[k] - cfg.learning_rate * g[k];
                y[k] += u[k];
            }
        }
        if coords.iter().any(|c| !c[0].is_finite() || !c[1].is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite embedding coordinate at iteration {iter}"
            )));
        }
    }
    let final_kl = kl_divergence(p, &coords)?;
    Ok(Embedding {
        coords,
        initial_kl,
        final_kl,
        calibration_warnings: p.non_converged(),
        config_used: cfg.clone(),
    })
}
