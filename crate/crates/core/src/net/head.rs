//! Derivative heads: the distilled `d_γ ε_θ` predictor with its three-channel
//! parameterization, AD targets for it, and the AD-free spatial JVP objective.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config, domain, Error, Result};
use crate::fields::{ad_eps_total, check_query, EpsField, Provider};
use crate::fwdad::{Scalar, VectorField};
use crate::gmm::{dx_dgamma, GaussianMixture, Point};
use crate::net::mlp::{Mlp, MlpSpec};
use crate::net::train::{diffused_batch, fit, points_matrix, TrainConfig, TrainOutput};
use crate::schedule::VpSchedule;

/// Channel weights `(−1/γ, γ/(1+γ²), 1/(γ(1+γ²)))`.
#[inline]
pub fn combine_coeffs<T: Scalar>(g: T) -> [T; 3] {
    let q = g * g + 1.0;
    [-g.recip(), g / q, (g * q).recip()]
}

/// `−k¹/γ + γ/(1+γ²) k² + k³/(γ(1+γ²))` for raw channels laid out as
/// `[k¹ₓ, k¹ᵧ, k²ₓ, k²ᵧ, k³ₓ, k³ᵧ]`.
#[inline]
pub fn head_combine_of<T: Scalar>(raw: &[T], g: T) -> [T; 2] {
    let c = combine_coeffs(g);
    [
        c[0] * raw[0] + c[1] * raw[2] + c[2] * raw[4],
        c[0] * raw[1] + c[1] * raw[3] + c[2] * raw[5],
    ]
}

pub fn head_combine(raw: [Point; 3], t: f64, sched: &VpSchedule) -> Result<Point> {
    let g = sched.gamma(t)?;
    if g == 0.0 {
        return Err(domain("head combination is singular at γ = 0"));
    }
    let flat = [raw[0][0], raw[0][1], raw[1][0], raw[1][1], raw[2][0], raw[2][1]];
    Ok(head_combine_of(&flat, g))
}

/// `d_γ ε_θ(x, t)` by forward-mode AD through the field.
pub fn ad_target<F: VectorField<2>>(f: &F, sched: &VpSchedule, x: Point, t: f64) -> Result<Point> {
    check_query(sched, x, t)?;
    Ok(ad_eps_total(f, sched, x, t).1)
}

/// Batched `(ε_θ, d_γ ε_θ)`: one primal pass, then one tangent pass seeded
/// with `(dx/dγ, dt/dγ)`.
pub fn ad_target_batch(net: &Mlp, sched: &VpSchedule, xs: &[Point], ts: &[f64]) -> (Vec<Point>, Vec<Point>) {
    let input = net.input_matrix(xs, ts, None);
    let (eps, _) = net.forward_batch(&input);
    let eps: Vec<Point> = eps.outer_iter().map(|r| [r[0], r[1]]).collect();
    let dxs: Vec<Point> = (0..xs.len())
        .map(|i| dx_dgamma(eps[i], xs[i], sched.gamma_of(ts[i])))
        .collect();
    let dts: Vec<f64> = ts.iter().map(|&t| sched.dt_dgamma_of(t)).collect();
    let (_, d) = net.jvp_batch(&input, &net.input_tangent(ts, &dxs, &dts));
    (eps, d.outer_iter().map(|r| [r[0], r[1]]).collect())
}

/// Six-output network over `(x, time features, ε_θ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillHead {
    pub net: Mlp,
}

impl DistillHead {
    pub fn new(net: Mlp) -> Result<Self> {
        let s = net.spec();
        if s.out != 6 || s.extra != 2 {
            return Err(config(format!(
                "head needs 6 outputs and 2 extra inputs, got {} and {}",
                s.out, s.extra
            )));
        }
        Ok(Self { net })
    }

    pub fn init<R: rand::Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        Self::new(Mlp::init(spec, rng)?)
    }

    pub fn raw(&self, x: Point, t: f64, eps: Point) -> [Point; 3] {
        let y = self.net.forward(x, t, &eps);
        [[y[0], y[1]], [y[2], y[3]], [y[4], y[5]]]
    }

    pub fn predict(&self, sched: &VpSchedule, x: Point, t: f64, eps: Point) -> Result<Point> {
        head_combine(self.raw(x, t, eps), t, sched)
    }
}

struct HeadBatch {
    input: Array2<f64>,
    target: Vec<Point>,
    gamma: Vec<f64>,
}

fn head_batch(eps_net: &Mlp, head: &DistillHead, sched: &VpSchedule, xs: &[Point], ts: &[f64]) -> HeadBatch {
    let (eps, target) = ad_target_batch(eps_net, sched, xs, ts);
    let input = head.net.input_matrix(xs, ts, Some(&points_matrix(&eps)));
    HeadBatch {
        input,
        target,
        gamma: ts.iter().map(|&t| sched.gamma_of(t)).collect(),
    }
}

/// `mean γ² ‖k_ψ − d_γ ε_θ‖²` and its gradient in the head parameters.
fn distill_loss_grad(head: &DistillHead, b: &HeadBatch) -> (f64, Vec<f64>) {
    let n = b.target.len() as f64;
    let (raw, tape) = head.net.forward_batch(&b.input);
    let mut grad = Array2::zeros(raw.raw_dim());
    let mut loss = 0.0;
    for i in 0..b.target.len() {
        let g = b.gamma[i];
        let r = raw.row(i);
        let k = head_combine_of(r.as_slice().expect("row"), g);
        let c = combine_coeffs(g);
        let w = g * g;
        for d in 0..2 {
            let e = k[d] - b.target[i][d];
            loss += w * e * e;
            for ch in 0..3 {
                grad[[i, 2 * ch + d]] = 2.0 * w * e * c[ch] / n;
            }
        }
    }
    (loss / n, head.net.backward_batch(&tape, &grad))
}

/// Fit the head to AD targets of the frozen ε-network.
pub fn train_distill(
    eps_net: &Mlp,
    mix: &GaussianMixture,
    sched: &VpSchedule,
    init: DistillHead,
    cfg: &TrainConfig,
) -> Result<TrainOutput<DistillHead>> {
    if eps_net.spec().out != 2 || eps_net.spec().extra != 0 {
        return Err(config("ε-network needs 2 outputs and no extra inputs"));
    }
    let mut head = init;
    let losses = fit(&mut head.net, cfg, |net, rng| {
        let b = diffused_batch(mix, sched, cfg.batch, rng);
        let h = DistillHead { net: net.clone() };
        let hb = head_batch(eps_net, &h, sched, &b.xt, &b.t);
        distill_loss_grad(&h, &hb)
    })?;
    Ok(TrainOutput { model: head, losses })
}

/// Held-out `E[γ²‖k_ψ − d_γ ε_θ‖²]` together with the same quantity for `k ≡ 0`.
pub fn distill_residual(
    eps_net: &Mlp,
    head: &DistillHead,
    mix: &GaussianMixture,
    sched: &VpSchedule,
    n: usize,
    seed: u64,
) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = diffused_batch(mix, sched, n, &mut rng);
    let hb = head_batch(eps_net, head, sched, &b.xt, &b.t);
    let (raw, _) = head.net.forward_batch(&hb.input);
    let (mut fit_sum, mut zero_sum) = (0.0, 0.0);
    for i in 0..n {
        let g = hb.gamma[i];
        let k = head_combine_of(raw.row(i).as_slice().expect("row"), g);
        let d = hb.target[i];
        fit_sum += g * g * ((k[0] - d[0]).powi(2) + (k[1] - d[1]).powi(2));
        zero_sum += g * g * (d[0] * d[0] + d[1] * d[1]);
    }
    (fit_sum / n as f64, zero_sum / n as f64)
}

/// A learned ε-network whose `d_γ ε` comes from a distilled head.
#[derive(Clone, Debug)]
pub struct DistilledField {
    pub eps_net: Mlp,
    pub head: DistillHead,
    pub schedule: VpSchedule,
}

impl EpsField for DistilledField {
    fn schedule(&self) -> &VpSchedule {
        &self.schedule
    }

    fn provider(&self) -> Provider {
        Provider::Distilled
    }

    fn eps(&self, x: Point, t: f64) -> Result<Point> {
        check_query(&self.schedule, x, t)?;
        Ok(self.eps_net.eval(x, t))
    }

    fn eps_d_gamma(&self, x: Point, t: f64) -> Result<(Point, Point)> {
        let e = self.eps(x, t)?;
        Ok((e, self.head.predict(&self.schedule, x, t, e)?))
    }
}

/// Time weighting for the AD-free objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NoAdWeight {
    #[default]
    One,
    Sigma2,
    Sigma4,
}

impl NoAdWeight {
    fn at(self, sigma: f64) -> f64 {
        match self {
            NoAdWeight::One => 1.0,
            NoAdWeight::Sigma2 => sigma * sigma,
            NoAdWeight::Sigma4 => sigma.powi(4),
        }
    }
}

impl fmt::Display for NoAdWeight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoAdWeight::One => "one",
            NoAdWeight::Sigma2 => "sigma2",
            NoAdWeight::Sigma4 => "sigma4",
        })
    }
}

impl FromStr for NoAdWeight {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "one" | "1" => Ok(NoAdWeight::One),
            "sigma2" => Ok(NoAdWeight::Sigma2),
            "sigma4" => Ok(NoAdWeight::Sigma4),
            other => Err(config(format!("unknown weighting '{other}'"))),
        }
    }
}

/// The direction `v = −σ (ε_θ/√(1+γ²) − γx/(1+γ²))` whose second-score
/// product is the spatial JVP of ε along the DDIM flow.
pub fn noad_direction(sched: &VpSchedule, x: Point, t: f64, eps: Point) -> Point {
    let s = sched.sigma_of(t);
    let d = dx_dgamma(eps, x, sched.gamma_of(t));
    [-s * d[0], -s * d[1]]
}

/// Regression target `εεᵀv/σ² − s sᵀv − v/σ²` whose conditional mean is `S₂ v`.
pub fn noad_target(sigma: f64, noise: Point, score: Point, v: Point) -> Point {
    let s2 = sigma * sigma;
    let ev = noise[0] * v[0] + noise[1] * v[1];
    let sv = score[0] * v[0] + score[1] * v[1];
    [
        ev * noise[0] / s2 - sv * score[0] - v[0] / s2,
        ev * noise[1] / s2 - sv * score[1] - v[1] / s2,
    ]
}

/// Experimental: learn `o ≈ S₂ v` without differentiating the ε-field, from
/// the conditional second moment of the injected noise.
pub fn train_spatial_jvp_noad<F: VectorField<2>>(
    eps_field: &F,
    mix: &GaussianMixture,
    sched: &VpSchedule,
    init: Mlp,
    cfg: &TrainConfig,
    weight: NoAdWeight,
) -> Result<TrainOutput<Mlp>> {
    if init.spec().out != 2 || init.spec().extra != 2 {
        return Err(config("spatial JVP head needs 2 outputs and ε_θ as extra input"));
    }
    let mut model = init;
    let losses = fit(&mut model, cfg, |net, rng| {
        let b = diffused_batch(mix, sched, cfg.batch, rng);
        let n = b.xt.len();
        let mut eps = Vec::with_capacity(n);
        let mut target = Vec::with_capacity(n);
        let mut w = Vec::with_capacity(n);
        for i in 0..n {
            let (x, t) = (b.xt[i], b.t[i]);
            let e = eps_field.eval(x, t);
            let sig = sched.sigma_of(t);
            let score = [-e[0] / sig, -e[1] / sig];
            let v = noad_direction(sched, x, t, e);
            target.push(noad_target(sig, b.noise[i], score, v));
            eps.push(e);
            w.push(weight.at(sig));
        }
        let (o, tape) = net.forward_batch(&net.input_matrix(&b.xt, &b.t, Some(&points_matrix(&eps))));
        let mut grad = Array2::zeros(o.raw_dim());
        let mut loss = 0.0;
        for i in 0..n {
            for d in 0..2 {
                let r = o[[i, d]] - target[i][d];
                loss += w[i] * r * r;
                grad[[i, d]] = 2.0 * w[i] * r / n as f64;
            }
        }
        (loss / n as f64, net.backward_batch(&tape, &grad))
    })?;
    Ok(TrainOutput { model, losses })
}

/// `o_θ(x, t) ≈ S₂ v`, which equals `(∂ε/∂x) · dx/dγ`.
pub fn noad_spatial_jvp<F: VectorField<2>>(head: &Mlp, eps_field: &F, x: Point, t: f64) -> Point {
    let e = eps_field.eval(x, t);
    let y = head.forward(x, t, &e);
    [y[0], y[1]]
}
