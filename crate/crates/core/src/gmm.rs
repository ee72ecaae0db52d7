//! Isotropic Gaussian mixtures as data distributions, with the exact
//! diffused score, score Jacobian and total γ-derivatives of ε.
//!
//! Under the VP forward process a mixture stays a mixture: component `i`
//! moves to mean `α_t μ_i` with variance `α_t² σ_i² + σ_t²`. All mixture
//! sums go through a max-shifted log-sum-exp because the toy components
//! (σ = 1e-2) make responsibilities extremely peaked at small `t`.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{config, domain, Result};
use crate::fwdad::{Dual, Scalar};
use crate::schedule::VpSchedule;

pub type Point = [f64; 2];
pub type Mat2<T> = [[T; 2]; 2];

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    means: Vec<Point>,
    comp_std: Vec<f64>,
    labels: Option<Vec<usize>>,
}

impl GaussianMixture {
    /// Weights must be positive and sum to one (to 1e-9; they are then
    /// renormalized exactly). `comp_std` holds one entry per component or a
    /// single shared entry.
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Point>,
        comp_std: Vec<f64>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let k = means.len();
        if k == 0 {
            return Err(config("mixture needs at least one component"));
        }
        if weights.len() != k {
            return Err(config(format!("{} weights for {k} components", weights.len())));
        }
        if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(config("mixture weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(config(format!("mixture weights sum to {total}, not 1")));
        }
        let comp_std = match comp_std.len() {
            1 => vec![comp_std[0]; k],
            n if n == k => comp_std,
            n => return Err(config(format!("{n} stds for {k} components"))),
        };
        if comp_std.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return Err(config("component std must be finite and >= 0"));
        }
        if means.iter().flatten().any(|m| !m.is_finite()) {
            return Err(config("component means must be finite"));
        }
        if let Some(l) = &labels {
            if l.len() != k {
                return Err(config(format!("{} labels for {k} components", l.len())));
            }
        }
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self {
            weights,
            log_weights,
            means,
            comp_std,
            labels,
        })
    }

    /// A single delta component (σ₀ = 0) at `mu`.
    pub fn point_mass(mu: Point) -> Self {
        Self::new(vec![1.0], vec![mu], vec![0.0], None).expect("valid point mass")
    }

    /// `N(0, I)` data, which the VP process leaves invariant.
    pub fn standard_normal() -> Self {
        Self::new(vec![1.0], vec![[0.0, 0.0]], vec![1.0], None).expect("valid normal")
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Point] {
        &self.means
    }

    pub fn comp_std(&self) -> &[f64] {
        &self.comp_std
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn n_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |m| m + 1)
    }

    /// The renormalized sub-mixture of components carrying label `class`.
    pub fn conditional(&self, class: usize) -> Result<Self> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| config("mixture has no class labels"))?;
        let idx: Vec<usize> = (0..self.len()).filter(|&i| labels[i] == class).collect();
        if idx.is_empty() {
            return Err(config(format!("unknown class {class}")));
        }
        let mass: f64 = idx.iter().map(|&i| self.weights[i]).sum();
        Self::new(
            idx.iter().map(|&i| self.weights[i] / mass).collect(),
            idx.iter().map(|&i| self.means[i]).collect(),
            idx.iter().map(|&i| self.comp_std[i]).collect(),
            Some(vec![class; idx.len()]),
        )
    }

    /// Index of the component mean nearest to `x` after scaling means by `scale`.
    pub fn nearest_component(&self, x: Point, scale: f64) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, m) in self.means.iter().enumerate() {
            let d = (x[0] - scale * m[0]).powi(2) + (x[1] - scale * m[1]).powi(2);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    /// i.i.d. samples from the undiffused mixture.
    pub fn sample_data<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Point> {
        if n == 0 {
            return Vec::new();
        }
        let pick = WeightedIndex::new(&self.weights).expect("weights validated");
        (0..n)
            .map(|_| {
                let i = pick.sample(rng);
                let z0: f64 = rng.sample(StandardNormal);
                let z1: f64 = rng.sample(StandardNormal);
                let s = self.comp_std[i];
                [self.means[i][0] + s * z0, self.means[i][1] + s * z1]
            })
            .collect()
    }

    /// Draw `(x_0, x_t)` pairs: data points and their diffused versions.
    pub fn sample_diffused<R: Rng + ?Sized>(
        &self,
        sched: &VpSchedule,
        t: f64,
        n: usize,
        rng: &mut R,
    ) -> Vec<Point> {
        let a = sched.alpha_of(t);
        let s = sched.sigma_of(t);
        self.sample_data(n, rng)
            .into_iter()
            .map(|x0| {
                let e0: f64 = rng.sample(StandardNormal);
                let e1: f64 = rng.sample(StandardNormal);
                [a * x0[0] + s * e0, a * x0[1] + s * e1]
            })
            .collect()
    }

    #[inline]
    fn component_terms<T: Scalar>(&self, sched: &VpSchedule, x: [T; 2], t: T) -> (Vec<T>, Vec<[T; 2]>, Vec<T>) {
        let a = sched.alpha_of(t);
        let s2 = -(-sched.integral_of(t)).expm1();
        let k = self.len();
        let mut logc = Vec::with_capacity(k);
        let mut diff = Vec::with_capacity(k);
        let mut var = Vec::with_capacity(k);
        for i in 0..k {
            let v = a * a * (self.comp_std[i] * self.comp_std[i]) + s2;
            let d = [x[0] - a * self.means[i][0], x[1] - a * self.means[i][1]];
            let r2 = d[0] * d[0] + d[1] * d[1];
            logc.push(-(r2 / (v * 2.0)) - (v * std::f64::consts::TAU).ln() + self.log_weights[i]);
            diff.push(d);
            var.push(v);
        }
        (logc, diff, var)
    }

    /// Responsibilities normalized with a max shift, plus the log-normalizer.
    fn responsibilities<T: Scalar>(logc: &[T]) -> (Vec<T>, T) {
        let m = logc.iter().map(|l| l.re()).fold(f64::NEG_INFINITY, f64::max);
        let mut r: Vec<T> = logc.iter().map(|&l| (l - m).exp()).collect();
        let z = r.iter().fold(T::zero(), |acc, &v| acc + v);
        for v in &mut r {
            *v = *v / z;
        }
        (r, z.ln() + m)
    }

    /// `log p_t(x)` of the diffused mixture.
    pub fn log_density_of<T: Scalar>(&self, sched: &VpSchedule, x: [T; 2], t: T) -> T {
        let (logc, _, _) = self.component_terms(sched, x, t);
        Self::responsibilities(&logc).1
    }

    /// `∇ₓ log p_t(x)`.
    pub fn score_of<T: Scalar>(&self, sched: &VpSchedule, x: [T; 2], t: T) -> [T; 2] {
        let (logc, diff, var) = self.component_terms(sched, x, t);
        let (r, _) = Self::responsibilities(&logc);
        let mut s = [T::zero(), T::zero()];
        for i in 0..r.len() {
            s[0] += r[i] * (-diff[i][0] / var[i]);
            s[1] += r[i] * (-diff[i][1] / var[i]);
        }
        s
    }

    /// Score and its Jacobian, `Σᵢ rᵢ[(gᵢ − s)(gᵢ − s)ᵀ − I/vᵢ]` with
    /// per-component scores `gᵢ`.
    pub fn score_jacobian_of<T: Scalar>(&self, sched: &VpSchedule, x: [T; 2], t: T) -> ([T; 2], Mat2<T>) {
        let (logc, diff, var) = self.component_terms(sched, x, t);
        let (r, _) = Self::responsibilities(&logc);
        let g: Vec<[T; 2]> = diff
            .iter()
            .zip(&var)
            .map(|(d, &v)| [-d[0] / v, -d[1] / v])
            .collect();
        let mut s = [T::zero(), T::zero()];
        for i in 0..r.len() {
            s[0] += r[i] * g[i][0];
            s[1] += r[i] * g[i][1];
        }
        let (mut j00, mut j01, mut j11) = (T::zero(), T::zero(), T::zero());
        for i in 0..r.len() {
            let c = [g[i][0] - s[0], g[i][1] - s[1]];
            let inv = r[i] / var[i];
            j00 += r[i] * c[0] * c[0] - inv;
            j01 += r[i] * c[0] * c[1];
            j11 += r[i] * c[1] * c[1] - inv;
        }
        (s, [[j00, j01], [j01, j11]])
    }

    /// `ε(x, t) = −σ_t · ∇ log p_t(x)`.
    pub fn eps_of<T: Scalar>(&self, sched: &VpSchedule, x: [T; 2], t: T) -> [T; 2] {
        let s = self.score_of(sched, x, t);
        let sig = sched.sigma_of(t);
        [-sig * s[0], -sig * s[1]]
    }

    /// ε and its total γ-derivative along the DDIM flow, assembled from the
    /// closed-form Jacobian and an AD time partial.
    pub fn eps_total_of<T: Scalar>(&self, sched: &VpSchedule, x: [T; 2], t: T) -> ([T; 2], [T; 2]) {
        let (s, js) = self.score_jacobian_of(sched, x, t);
        let sig = sched.sigma_of(t);
        let g = sched.gamma_of(t);
        let eps = [-sig * s[0], -sig * s[1]];
        let dx = dx_dgamma(eps, x, g);
        let je = [
            -sig * (js[0][0] * dx[0] + js[0][1] * dx[1]),
            -sig * (js[1][0] * dx[0] + js[1][1] * dx[1]),
        ];
        let xc = [Dual::constant(x[0]), Dual::constant(x[1])];
        let et = self.eps_of(sched, xc, Dual::variable(t));
        let dtdg = sched.dt_dgamma_of(t);
        (
            eps,
            [je[0] + et[0].tangent * dtdg, je[1] + et[1].tangent * dtdg],
        )
    }

    fn check_query(&self, sched: &VpSchedule, x: Point, t: f64, need_cutoff: bool) -> Result<()> {
        if !(x[0].is_finite() && x[1].is_finite()) {
            return Err(domain(format!("non-finite point {x:?}")));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(domain(format!("t = {t} outside [0, 1]")));
        }
        if need_cutoff && t < sched.t_cutoff * (1.0 - 1e-9) {
            return Err(domain(format!("t = {t} below cutoff {}", sched.t_cutoff)));
        }
        if t == 0.0 && self.comp_std.contains(&0.0) {
            return Err(domain("delta component has no density at t = 0"));
        }
        Ok(())
    }

    pub fn log_density(&self, sched: &VpSchedule, x: Point, t: f64) -> Result<f64> {
        self.check_query(sched, x, t, false)?;
        Ok(self.log_density_of(sched, x, t))
    }

    pub fn diffused_score(&self, sched: &VpSchedule, x: Point, t: f64) -> Result<Point> {
        self.check_query(sched, x, t, false)?;
        Ok(self.score_of(sched, x, t))
    }

    pub fn diffused_score_jacobian(&self, sched: &VpSchedule, x: Point, t: f64) -> Result<Mat2<f64>> {
        self.check_query(sched, x, t, false)?;
        Ok(self.score_jacobian_of(sched, x, t).1)
    }

    pub fn eps_exact(&self, sched: &VpSchedule, x: Point, t: f64) -> Result<Point> {
        self.check_query(sched, x, t, true)?;
        Ok(self.eps_of(sched, x, t))
    }

    pub fn d_gamma_eps_exact(&self, sched: &VpSchedule, x: Point, t: f64) -> Result<Point> {
        self.check_query(sched, x, t, true)?;
        Ok(self.eps_total_of(sched, x, t).1)
    }

    /// Second total γ-derivative: one outer dual pass over the first-order
    /// assembly, seeded with the flow direction `(dx/dγ, dt/dγ)`.
    pub fn d2_gamma_eps_exact(&self, sched: &VpSchedule, x: Point, t: f64) -> Result<Point> {
        self.check_query(sched, x, t, true)?;
        Ok(self.eps_total2(sched, x, t).2)
    }

    /// `(ε, d_γ ε, d²_γ ε)` without input checks.
    pub(crate) fn eps_total2(&self, sched: &VpSchedule, x: Point, t: f64) -> (Point, Point, Point) {
        let eps = self.eps_of(sched, x, t);
        let dx = dx_dgamma(eps, x, sched.gamma_of(t));
        let xs = [Dual::new(x[0], dx[0]), Dual::new(x[1], dx[1])];
        let ts = Dual::new(t, sched.dt_dgamma_of(t));
        let (e, d) = self.eps_total_of(sched, xs, ts);
        (
            [e[0].value, e[1].value],
            [d[0].value, d[1].value],
            [d[0].tangent, d[1].tangent],
        )
    }

    /// Read a mixture from flat `key = value` text:
    ///
    /// ```text
    /// weights = 0.5, 0.5
    /// means   = 1 0; -1 0
    /// std     = 0.01
    /// labels  = 0, 1        # optional
    /// ```
    pub fn from_config_str(text: &str) -> Result<Self> {
        let mut weights = None;
        let mut means = None;
        let mut std = None;
        let mut labels = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config(format!("line {}: expected key = value", lineno + 1)))?;
            match key.trim() {
                "weights" => weights = Some(parse_list(value)?),
                "std" => std = Some(parse_list(value)?),
                "labels" => {
                    let l: Result<Vec<usize>> = split_list(value)
                        .map(|v| v.parse().map_err(|_| config(format!("bad label '{v}'"))))
                        .collect();
                    labels = Some(l?);
                }
                "means" => {
                    let pts: Result<Vec<Point>> = value
                        .split(';')
                        .filter(|p| !p.trim().is_empty())
                        .map(|p| {
                            let c = parse_list(p)?;
                            match c[..] {
                                [a, b] => Ok([a, b]),
                                _ => Err(config(format!("mean '{}' is not 2D", p.trim()))),
                            }
                        })
                        .collect();
                    means = Some(pts?);
                }
                other => return Err(config(format!("unknown mixture key '{other}'"))),
            }
        }
        let means = means.ok_or_else(|| config("mixture config missing 'means'"))?;
        let k = means.len();
        let weights = weights.unwrap_or_else(|| vec![1.0 / k as f64; k]);
        let std = std.ok_or_else(|| config("mixture config missing 'std'"))?;
        Self::new(weights, means, std, labels)
    }

    pub fn from_config_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_config_str(&std::fs::read_to_string(path)?)
    }
}

fn split_list(s: &str) -> impl Iterator<Item = &str> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|v| !v.is_empty())
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    split_list(s)
        .map(|v| v.parse::<f64>().map_err(|_| config(format!("bad number '{v}'"))))
        .collect()
}

/// `dx/dγ = ε/√(1+γ²) − γx/(1+γ²)`, the DDIM ODE written in x-space.
#[inline]
pub fn dx_dgamma<T: Scalar>(eps: [T; 2], x: [T; 2], g: T) -> [T; 2] {
    let q = g * g + 1.0;
    let a = q.sqrt().recip();
    let b = g / q;
    [a * eps[0] - b * x[0], a * eps[1] - b * x[1]]
}

/// Parameters of the 64-component toy mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct ToySpec {
    pub s1: f64,
    pub s2: f64,
    pub sigma: f64,
    pub base_mus: [Point; 8],
}

impl Default for ToySpec {
    fn default() -> Self {
        let r = std::f64::consts::FRAC_1_SQRT_2;
        Self {
            s1: 0.9,
            s2: 0.2,
            sigma: 1e-2,
            base_mus: [
                [1.0, 0.0],
                [-1.0, 0.0],
                [0.0, 1.0],
                [0.0, -1.0],
                [r, r],
                [r, -r],
                [-r, r],
                [-r, -r],
            ],
        }
    }
}

/// 64 components at `s₁μᵢ + s₁s₂μⱼ` with uniform weights; component `(i, j)`
/// carries class label `i`.
pub fn build_toy(spec: &ToySpec) -> GaussianMixture {
    let mut means = Vec::with_capacity(64);
    let mut labels = Vec::with_capacity(64);
    for (i, mi) in spec.base_mus.iter().enumerate() {
        for mj in &spec.base_mus {
            means.push([
                spec.s1 * mi[0] + spec.s1 * spec.s2 * mj[0],
                spec.s1 * mi[1] + spec.s1 * spec.s2 * mj[1],
            ]);
            labels.push(i);
        }
    }
    GaussianMixture::new(vec![1.0 / 64.0; 64], means, vec![spec.sigma], Some(labels))
        .expect("toy mixture is valid")
}
