//! Greedy G-experimental design over the actor feature table.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{spd_inverse, sym_pinv};

/// Default coreset cap as a fraction of the candidate count.
pub const DEFAULT_CAP_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coreset {
    /// Candidate row indices, with multiplicity, in insertion order.
    pub points: Vec<usize>,
    /// Distinct rows and their weights (multiplicity over coreset size).
    pub support: Vec<usize>,
    pub weights: Vec<f64>,
    /// `max_x ‖x‖_{G⁻¹}` with `G = I + Σ φφᵀ` after the last insertion.
    pub score: f64,
    /// Stopped because the coreset reached the cap, not the threshold.
    pub capped: bool,
    pub scans: usize,
}

impl Coreset {
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// `G = Σ ρ φφᵀ` over the support, without the identity anchor.
    pub fn design_gram(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        let d = features.ncols();
        let mut g = DMatrix::zeros(d, d);
        for (&p, &w) in self.support.iter().zip(&self.weights) {
            let phi = features.row(p).transpose();
            g.ger(w, &phi, &phi, 1.0);
        }
        g
    }

    /// `I + Σ φφᵀ` over the points with multiplicity.
    pub fn anchored_gram(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        let d = features.ncols();
        let mut g = DMatrix::identity(d, d);
        for &p in &self.points {
            let phi = features.row(p).transpose();
            g.ger(1.0, &phi, &phi, 1.0);
        }
        g
    }
}

/// Repeatedly adds the candidate with the largest `‖φ‖_{G⁻¹}` (smallest index on
/// ties) until the largest is at most `epsilon` or the coreset reaches the cap.
///
/// `cap_fraction = None` runs to the threshold.
pub fn greedy_g_design(features: &DMatrix<f64>, epsilon: f64, cap_fraction: Option<f64>) -> Result<Coreset> {
    if !(epsilon > 0.0) {
        return Err(invalid("design epsilon must be positive"));
    }
    if let Some(c) = cap_fraction {
        if !(c > 0.0 && c <= 1.0) {
            return Err(invalid("design cap must lie in (0, 1]"));
        }
    }
    let n = features.nrows();
    let d = features.ncols();
    let cap = cap_fraction.map(|c| ((c * n as f64).floor() as usize).max(1));
    let mut inv = DMatrix::<f64>::identity(d, d);
    let mut points = Vec::new();
    let mut scans = 0;
    let (capped, score) = loop {
        scans += 1;
        let (best, best_sq) = scan(features, &inv);
        let score = best_sq.max(0.0).sqrt();
        if n == 0 || score <= epsilon {
            break (false, score);
        }
        if cap.is_some_and(|c| points.len() >= c) {
            break (true, score);
        }
        points.push(best);
        // Sherman–Morrison: (G + φφᵀ)⁻¹ = G⁻¹ − G⁻¹φφᵀG⁻¹ / (1 + φᵀG⁻¹φ).
        let phi = features.row(best).transpose();
        let u = &inv * &phi;
        inv.ger(-1.0 / (1.0 + best_sq), &u, &u, 1.0);
    };
    let (support, weights) = multiplicity_weights(&points);
    Ok(Coreset { points, support, weights, score, capped, scans })
}

fn scan(features: &DMatrix<f64>, inv: &DMatrix<f64>) -> (usize, f64) {
    let projected = features * inv;
    let mut best = (0, f64::NEG_INFINITY);
    for i in 0..features.nrows() {
        let g = projected.row(i).dot(&features.row(i));
        if g > best.1 {
            best = (i, g);
        }
    }
    best
}

fn multiplicity_weights(points: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let mut support: Vec<usize> = points.to_vec();
    support.sort_unstable();
    support.dedup();
    let total = points.len() as f64;
    let weights = support
        .iter()
        .map(|s| points.iter().filter(|p| *p == s).count() as f64 / total)
        .collect();
    (support, weights)
}

/// Which Gram matrix the coverage score is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageGram {
    /// `I + Σ φφᵀ`, as used inside the greedy loop.
    Anchored,
    /// `Σ ρ φφᵀ`, as used by the actor regression (pseudo-inverse when singular).
    Design,
}

/// `max` over the whole table of `‖φ‖_{G⁻¹}`.
pub fn coverage_score(coreset: &Coreset, features: &DMatrix<f64>, gram: CoverageGram) -> f64 {
    let inv = match gram {
        CoverageGram::Anchored => spd_inverse(&coreset.anchored_gram(features)),
        CoverageGram::Design => sym_pinv(&coreset.design_gram(features)).0,
    };
    max_norm(features, &inv)
}

/// `max_i ‖φ_i‖_{M}` for a PSD weight matrix `M`.
pub fn max_norm(features: &DMatrix<f64>, weight: &DMatrix<f64>) -> f64 {
    scan(features, weight).1.max(0.0).sqrt()
}

/// Existence bounds for an optimal design: `(2d, 4d log log(d + 4) + 28)`.
pub fn kw_reference(dim: usize) -> Result<(f64, f64)> {
    if dim == 0 {
        return Err(invalid("dimension must be positive"));
    }
    let d = dim as f64;
    Ok((2.0 * d, 4.0 * d * (d + 4.0).ln().ln() + 28.0))
}
