//! Dense multilayer perceptron over `(x, time embedding, extra inputs)`.
//!
//! Two evaluation routes share one flat parameter vector: a generic
//! per-point forward over [`Scalar`] (used for AD and at sampling time) and
//! batched `ndarray` forward / backward / JVP passes used in training.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{config, Error, Result};
use crate::fwdad::{Scalar, VectorField};
use crate::gmm::Point;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Silu => z.silu(),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Value and derivative at `z`.
    #[inline]
    fn value_deriv(self, z: f64) -> (f64, f64) {
        match self {
            Activation::Silu => {
                let sg = z.sigmoid();
                (z * sg, sg * (1.0 + z * (1.0 - sg)))
            }
            Activation::Tanh => {
                let th = z.tanh();
                (th, 1.0 - th * th)
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Silu => "silu",
            Activation::Tanh => "tanh",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "silu" => Ok(Activation::Silu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(config(format!("unknown activation '{other}' (smooth activations only)"))),
        }
    }
}

/// Time features fed to the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeEmbed {
    Raw,
    /// `t` followed by `sin(ω_k t), cos(ω_k t)` for `ω_k = π(k + 1)/2`.
    Fourier(usize),
}

impl Default for TimeEmbed {
    fn default() -> Self {
        TimeEmbed::Fourier(8)
    }
}

impl TimeEmbed {
    pub fn dim(self) -> usize {
        match self {
            TimeEmbed::Raw => 1,
            TimeEmbed::Fourier(k) => 1 + 2 * k,
        }
    }

    #[inline]
    fn omega(k: usize) -> f64 {
        std::f64::consts::PI * (k + 1) as f64 / 2.0
    }

    pub fn push<T: Scalar>(self, t: T, out: &mut Vec<T>) {
        out.push(t);
        if let TimeEmbed::Fourier(k) = self {
            for i in 0..k {
                let a = t * Self::omega(i);
                out.push(a.sin());
                out.push(a.cos());
            }
        }
    }

    /// Features and their derivatives in `t`.
    fn with_deriv(self, t: f64, out: &mut [f64], dout: &mut [f64]) {
        out[0] = t;
        dout[0] = 1.0;
        if let TimeEmbed::Fourier(k) = self {
            for i in 0..k {
                let w = Self::omega(i);
                let (sn, cs) = (w * t).sin_cos();
                out[1 + 2 * i] = sn;
                out[2 + 2 * i] = cs;
                dout[1 + 2 * i] = w * cs;
                dout[2 + 2 * i] = -w * sn;
            }
        }
    }
}

impl fmt::Display for TimeEmbed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimeEmbed::Raw => f.write_str("raw"),
            TimeEmbed::Fourier(k) => write!(f, "fourier:{k}"),
        }
    }
}

impl FromStr for TimeEmbed {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "raw" {
            return Ok(TimeEmbed::Raw);
        }
        if let Some(k) = s.strip_prefix("fourier:") {
            return k
                .parse()
                .map(TimeEmbed::Fourier)
                .map_err(|_| config(format!("bad frequency count in '{s}'")));
        }
        if s == "fourier" {
            return Ok(TimeEmbed::default());
        }
        Err(config(format!("unknown time embedding '{s}'")))
    }
}

/// Network architecture, independent of parameter values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    pub hidden: Vec<usize>,
    pub out: usize,
    pub activation: Activation,
    pub embed: TimeEmbed,
    /// Inputs appended after the time features (the head receives ε_θ here).
    pub extra: usize,
}

impl MlpSpec {
    /// The default ε-network: 3 hidden layers of 64, two outputs.
    pub fn score() -> Self {
        Self {
            hidden: vec![64, 64, 64],
            out: 2,
            activation: Activation::Silu,
            embed: TimeEmbed::default(),
            extra: 0,
        }
    }

    /// The default derivative head: three 2D channels, ε_θ as extra input.
    pub fn head() -> Self {
        Self {
            out: 6,
            extra: 2,
            ..Self::score()
        }
    }

    pub fn input_dim(&self) -> usize {
        2 + self.embed.dim() + self.extra
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(&self.hidden);
        s.push(self.out);
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    sizes: Vec<usize>,
    offsets: Vec<usize>,
    params: Vec<f64>,
}

/// Activations cached by a batched forward pass.
pub struct Tape {
    /// `acts[0]` is the input; `acts[l + 1]` the output of layer `l`.
    acts: Vec<Array2<f64>>,
    /// Activation derivatives at each hidden layer's pre-activation.
    dacts: Vec<Array2<f64>>,
}

impl Mlp {
    /// All-zero parameters.
    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        if spec.out == 0 || spec.hidden.contains(&0) {
            return Err(config("layer widths must be positive"));
        }
        let sizes = spec.sizes();
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut n = 0;
        for w in sizes.windows(2) {
            offsets.push(n);
            n += (w[0] + 1) * w[1];
        }
        offsets.push(n);
        Ok(Self {
            spec,
            sizes,
            offsets,
            params: vec![0.0; n],
        })
    }

    /// Gaussian weights with variance `1/fan_in`, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        let mut m = Self::zeros(spec)?;
        for l in 0..m.n_layers() {
            let (fan_in, fan_out) = (m.sizes[l], m.sizes[l + 1]);
            let scale = (1.0 / fan_in as f64).sqrt();
            let o = m.offsets[l];
            for p in &mut m.params[o..o + fan_in * fan_out] {
                let z: f64 = rng.sample(StandardNormal);
                *p = scale * z;
            }
        }
        Ok(m)
    }

    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::zeros(spec)?;
        if params.len() != m.params.len() {
            return Err(Error::Shape {
                expected: m.params.len(),
                got: params.len(),
            });
        }
        m.params = params;
        Ok(m)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn weights(&self, l: usize) -> ArrayView2<'_, f64> {
        let (i, o) = (self.sizes[l], self.sizes[l + 1]);
        let at = self.offsets[l];
        ArrayView2::from_shape((o, i), &self.params[at..at + o * i]).expect("layer shape")
    }

    fn bias(&self, l: usize) -> &[f64] {
        let (i, o) = (self.sizes[l], self.sizes[l + 1]);
        let at = self.offsets[l] + o * i;
        &self.params[at..at + o]
    }

    /// Per-point forward pass, generic so it runs on dual numbers.
    pub fn forward<T: Scalar>(&self, x: [T; 2], t: T, extra: &[T]) -> Vec<T> {
        debug_assert_eq!(extra.len(), self.spec.extra);
        let mut a = Vec::with_capacity(self.sizes[0]);
        a.extend_from_slice(&x);
        self.spec.embed.push(t, &mut a);
        a.extend_from_slice(extra);
        let last = self.n_layers() - 1;
        for l in 0..=last {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let at = self.offsets[l];
            let w = &self.params[at..at + n_in * n_out];
            let b = &self.params[at + n_in * n_out..at + (n_in + 1) * n_out];
            let mut z = Vec::with_capacity(n_out);
            for j in 0..n_out {
                let row = &w[j * n_in..(j + 1) * n_in];
                let mut acc = T::from_f64(b[j]);
                for (ai, &wi) in a.iter().zip(row) {
                    acc += *ai * wi;
                }
                z.push(if l < last { self.spec.activation.apply(acc) } else { acc });
            }
            a = z;
        }
        a
    }

    /// Batched input matrix `[x, embed(t), extra]`.
    pub fn input_matrix(&self, xs: &[Point], ts: &[f64], extra: Option<&Array2<f64>>) -> Array2<f64> {
        let n = xs.len();
        let e = self.spec.embed.dim();
        let mut m = Array2::zeros((n, self.sizes[0]));
        let mut emb = vec![0.0; e];
        let mut demb = vec![0.0; e];
        for (r, (x, &t)) in xs.iter().zip(ts).enumerate() {
            m[[r, 0]] = x[0];
            m[[r, 1]] = x[1];
            self.spec.embed.with_deriv(t, &mut emb, &mut demb);
            for k in 0..e {
                m[[r, 2 + k]] = emb[k];
            }
        }
        if let Some(ex) = extra {
            m.slice_mut(s![.., 2 + e..]).assign(ex);
        }
        m
    }

    /// Tangent of [`Mlp::input_matrix`] for per-row seeds `(ẋ, ṫ)`; extras get zero tangent.
    pub fn input_tangent(&self, ts: &[f64], dxs: &[Point], dts: &[f64]) -> Array2<f64> {
        let e = self.spec.embed.dim();
        let mut m = Array2::zeros((ts.len(), self.sizes[0]));
        let mut emb = vec![0.0; e];
        let mut demb = vec![0.0; e];
        for r in 0..ts.len() {
            m[[r, 0]] = dxs[r][0];
            m[[r, 1]] = dxs[r][1];
            self.spec.embed.with_deriv(ts[r], &mut emb, &mut demb);
            for k in 0..e {
                m[[r, 2 + k]] = demb[k] * dts[r];
            }
        }
        m
    }

    pub fn forward_batch(&self, input: &Array2<f64>) -> (Array2<f64>, Tape) {
        let last = self.n_layers() - 1;
        let mut acts = vec![input.clone()];
        let mut dacts = Vec::with_capacity(last);
        for l in 0..=last {
            let mut z = acts[l].dot(&self.weights(l).t());
            z += &ArrayView2::from_shape((1, self.sizes[l + 1]), self.bias(l)).expect("bias");
            if l < last {
                let mut d = Array2::zeros(z.raw_dim());
                for (zi, di) in z.iter_mut().zip(d.iter_mut()) {
                    let (v, dv) = self.spec.activation.value_deriv(*zi);
                    *zi = v;
                    *di = dv;
                }
                dacts.push(d);
            }
            acts.push(z);
        }
        let out = acts.last().expect("output").clone();
        (out, Tape { acts, dacts })
    }

    /// Gradient of `Σ grad_out ⊙ output` with respect to the parameters.
    pub fn backward_batch(&self, tape: &Tape, grad_out: &Array2<f64>) -> Vec<f64> {
        let mut grads = vec![0.0; self.params.len()];
        let mut delta = grad_out.clone();
        for l in (0..self.n_layers()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let at = self.offsets[l];
            let gw = delta.t().dot(&tape.acts[l]);
            grads[at..at + n_in * n_out].copy_from_slice(gw.as_slice().expect("contiguous"));
            let gb: Array1<f64> = delta.sum_axis(Axis(0));
            grads[at + n_in * n_out..at + (n_in + 1) * n_out].copy_from_slice(gb.as_slice().expect("contiguous"));
            if l > 0 {
                delta = delta.dot(&self.weights(l));
                delta *= &tape.dacts[l - 1];
            }
        }
        grads
    }

    /// Batched forward-mode pass: outputs and their tangents for input tangents `dinput`.
    pub fn jvp_batch(&self, input: &Array2<f64>, dinput: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let last = self.n_layers() - 1;
        let mut a = input.clone();
        let mut da = dinput.clone();
        for l in 0..=last {
            let w = self.weights(l);
            let mut z = a.dot(&w.t());
            z += &ArrayView2::from_shape((1, self.sizes[l + 1]), self.bias(l)).expect("bias");
            let mut dz = da.dot(&w.t());
            if l < last {
                for (zi, dzi) in z.iter_mut().zip(dz.iter_mut()) {
                    let (v, dv) = self.spec.activation.value_deriv(*zi);
                    *zi = v;
                    *dzi *= dv;
                }
            }
            a = z;
            da = dz;
        }
        (a, da)
    }
}

/// A two-output network with no extra inputs is an ε-field.
impl VectorField<2> for Mlp {
    fn eval<T: Scalar>(&self, x: [T; 2], t: T) -> [T; 2] {
        let y = self.forward(x, t, &[]);
        [y[0], y[1]]
    }
}
