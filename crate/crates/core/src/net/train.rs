//! Optimizer, learning-rate schedules and denoising score matching.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{config, Error, Result};
use crate::gmm::{GaussianMixture, Point};
use crate::net::mlp::Mlp;
use crate::schedule::VpSchedule;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Linear decay from the base rate to zero over the run.
    LinearDecay,
    /// Linear ramp over the first `k` iterations, then constant.
    Warmup(usize),
}

impl LrSchedule {
    pub fn rate(self, base: f64, iter: usize, iters: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::LinearDecay => base * (1.0 - iter as f64 / iters.max(1) as f64),
            LrSchedule::Warmup(k) => base * ((iter + 1) as f64 / k.max(1) as f64).min(1.0),
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LrSchedule::Constant => f.write_str("constant"),
            LrSchedule::LinearDecay => f.write_str("linear-decay"),
            LrSchedule::Warmup(k) => write!(f, "warmup:{k}"),
        }
    }
}

impl FromStr for LrSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "constant" => Ok(LrSchedule::Constant),
            "linear-decay" | "decay" => Ok(LrSchedule::LinearDecay),
            other => other
                .strip_prefix("warmup:")
                .and_then(|k| k.parse().ok())
                .map(LrSchedule::Warmup)
                .ok_or_else(|| config(format!("unknown lr schedule '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub lr_schedule: LrSchedule,
    /// Global gradient-norm clip.
    pub clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iters: 20_000,
            batch: 256,
            lr: 1e-3,
            seed: 0,
            lr_schedule: LrSchedule::LinearDecay,
            clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(config("batch must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.clip > 0.0) {
            return Err(config("gradient clip must be positive"));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Scale `g` in place so that its norm is at most `max_norm`.
pub fn clip_grad_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > max_norm {
        let s = max_norm / n;
        g.iter_mut().for_each(|v| *v *= s);
    }
    n
}

#[derive(Clone, Debug)]
pub struct TrainOutput<M> {
    pub model: M,
    /// Mean batch loss per iteration.
    pub losses: Vec<f64>,
}

/// A batch of diffused training points.
pub(crate) struct DiffusedBatch {
    pub noise: Vec<Point>,
    pub t: Vec<f64>,
    pub xt: Vec<Point>,
}

pub(crate) fn diffused_batch<R: Rng>(mix: &GaussianMixture, sched: &VpSchedule, n: usize, rng: &mut R) -> DiffusedBatch {
    let x0 = mix.sample_data(n, rng);
    let mut noise = Vec::with_capacity(n);
    let mut t = Vec::with_capacity(n);
    let mut xt = Vec::with_capacity(n);
    for p in &x0 {
        let ti = rng.random_range(sched.t_cutoff..=1.0);
        let e: Point = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let (a, s) = (sched.alpha_of(ti), sched.sigma_of(ti));
        xt.push([a * p[0] + s * e[0], a * p[1] + s * e[1]]);
        noise.push(e);
        t.push(ti);
    }
    DiffusedBatch { noise, t, xt }
}

pub(crate) fn points_matrix(ps: &[Point]) -> Array2<f64> {
    Array2::from_shape_fn((ps.len(), 2), |(i, j)| ps[i][j])
}

/// Generic training loop: `batch_grad` returns the mean loss and its
/// parameter gradient for one freshly drawn batch.
pub(crate) fn fit<F>(model: &mut Mlp, cfg: &TrainConfig, mut batch_grad: F) -> Result<Vec<f64>>
where
    F: FnMut(&Mlp, &mut ChaCha8Rng) -> (f64, Vec<f64>),
{
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(model.n_params());
    let mut losses = Vec::with_capacity(cfg.iters);
    for iter in 0..cfg.iters {
        let (loss, mut g) = batch_grad(model, &mut rng);
        if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { iter, loss });
        }
        clip_grad_norm(&mut g, cfg.clip);
        let lr = cfg.lr_schedule.rate(cfg.lr, iter, cfg.iters);
        opt.update(model.params_mut(), &g, lr);
        losses.push(loss);
    }
    Ok(losses)
}

/// DSM loss `mean ‖ε_θ(x_t, t) − ε‖²` and its gradient on a fixed batch.
pub(crate) fn dsm_loss_grad(net: &Mlp, b: &DiffusedBatch) -> (f64, Vec<f64>) {
    let n = b.xt.len() as f64;
    let (out, tape) = net.forward_batch(&net.input_matrix(&b.xt, &b.t, None));
    let resid = &out - &points_matrix(&b.noise);
    let loss = resid.mapv(|v| v * v).sum() / n;
    let g = net.backward_batch(&tape, &(resid * (2.0 / n)));
    (loss, g)
}

/// Train an ε-network by denoising score matching with `t ~ U[t_cutoff, 1]`.
pub fn train_dsm(mix: &GaussianMixture, sched: &VpSchedule, init: Mlp, cfg: &TrainConfig) -> Result<TrainOutput<Mlp>> {
    if init.spec().out != 2 || init.spec().extra != 0 {
        return Err(config("score network needs 2 outputs and no extra inputs"));
    }
    let mut model = init;
    let losses = fit(&mut model, cfg, |m, rng| {
        let b = diffused_batch(mix, sched, cfg.batch, rng);
        dsm_loss_grad(m, &b)
    })?;
    Ok(TrainOutput { model, losses })
}

/// Mean relative score error `mean ‖s_θ − s‖ / mean ‖s‖` over diffused data at time `t`.
pub fn score_relative_error(net: &Mlp, mix: &GaussianMixture, sched: &VpSchedule, t: f64, n: usize, seed: u64) -> Result<f64> {
    use crate::fwdad::VectorField;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sig = sched.sigma(t)?;
    let (mut num, mut den) = (0.0, 0.0);
    for x in mix.sample_diffused(sched, t, n, &mut rng) {
        let e = net.eval(x, t);
        let s = mix.diffused_score(sched, x, t)?;
        num += (-e[0] / sig - s[0]).hypot(-e[1] / sig - s[1]);
        den += s[0].hypot(s[1]);
    }
    Ok(num / den)
}
