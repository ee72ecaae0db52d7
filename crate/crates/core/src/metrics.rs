//! Sample-quality statistics for the 2-D toy problems.
//!
//! Pairwise sums are computed row-wise in parallel and reduced in a fixed
//! order, so results do not depend on the thread count.

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{config, Result};
use crate::gmm::{GaussianMixture, Point};
use crate::schedule::VpSchedule;

#[inline]
fn dist(a: Point, b: Point) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    (dx * dx + dy * dy).sqrt()
}

fn mean_cross(xs: &[Point], ys: &[Point]) -> f64 {
    let rows: Vec<f64> = xs.par_iter().map(|&x| ys.iter().map(|&y| dist(x, y)).sum()).collect();
    rows.iter().sum::<f64>() / (xs.len() as f64 * ys.len() as f64)
}

/// Mean distance over distinct pairs.
fn mean_self(xs: &[Point]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| xs[i + 1..].iter().map(|&y| dist(xs[i], y)).sum())
        .collect();
    2.0 * rows.iter().sum::<f64>() / (n as f64 * (n - 1) as f64)
}

/// `2E‖X−Y‖ − E‖X−X'‖ − E‖Y−Y'‖` with distinct-pair self terms.
pub fn energy_distance(xs: &[Point], ys: &[Point]) -> Result<f64> {
    if xs.is_empty() || ys.is_empty() {
        return Err(config("energy distance needs non-empty sample sets"));
    }
    Ok(2.0 * mean_cross(xs, ys) - mean_self(xs) - mean_self(ys))
}

/// A fixed reference set with its self term precomputed. The self term uses
/// a seeded subsample of at most `self_subsample` points; the cross term
/// uses every reference point.
#[derive(Clone, Debug)]
pub struct EnergyReference {
    data: Vec<Point>,
    self_term: f64,
}

impl EnergyReference {
    pub fn new(data: Vec<Point>, self_subsample: usize, seed: u64) -> Result<Self> {
        if data.is_empty() {
            return Err(config("energy reference needs data"));
        }
        let self_term = if data.len() <= self_subsample {
            mean_self(&data)
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample_indices(&mut rng, data.len(), self_subsample).into_vec();
            idx.sort_unstable();
            let sub: Vec<Point> = idx.iter().map(|&i| data[i]).collect();
            mean_self(&sub)
        };
        Ok(Self { data, self_term })
    }

    pub fn data(&self) -> &[Point] {
        &self.data
    }

    pub fn distance(&self, samples: &[Point]) -> Result<f64> {
        if samples.is_empty() {
            return Err(config("energy distance needs samples"));
        }
        Ok(2.0 * mean_cross(samples, &self.data) - mean_self(samples) - self.self_term)
    }
}

/// Fraction of samples where the diffused density at `t` falls below
/// `rel` times the peak, taken as the largest density at a scaled
/// component mean.
pub fn low_density_fraction(mix: &GaussianMixture, sched: &VpSchedule, t: f64, samples: &[Point], rel: f64) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let a = sched.alpha(t)?;
    let mut peak = f64::NEG_INFINITY;
    for m in mix.means() {
        peak = peak.max(mix.log_density(sched, [a * m[0], a * m[1]], t)?);
    }
    let cut = peak + rel.ln();
    let low: Vec<bool> = samples
        .par_iter()
        .map(|&x| mix.log_density(sched, x, t).map(|l| l < cut))
        .collect::<Result<_>>()?;
    Ok(low.iter().filter(|&&b| b).count() as f64 / samples.len() as f64)
}

/// Sample counts per nearest (scaled) component mean.
pub fn mode_histogram(mix: &GaussianMixture, scale: f64, samples: &[Point]) -> Vec<usize> {
    let mut h = vec![0; mix.len()];
    for &x in samples {
        h[mix.nearest_component(x, scale)] += 1;
    }
    h
}

/// Fraction of samples whose nearest component carries label `class`.
pub fn class_fidelity(mix: &GaussianMixture, scale: f64, samples: &[Point], class: usize) -> Result<f64> {
    let labels = mix.labels().ok_or_else(|| config("mixture has no class labels"))?;
    if samples.is_empty() {
        return Ok(0.0);
    }
    let hits = samples.iter().filter(|&&x| labels[mix.nearest_component(x, scale)] == class).count();
    Ok(hits as f64 / samples.len() as f64)
}
