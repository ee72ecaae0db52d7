//! Forward-mode automatic differentiation with nestable dual numbers.
//!
//! `Dual<f64>` carries one directional derivative; `Dual<Dual<f64>>` carries
//! a second one, which is all the third-order Taylor step needs. Every
//! smooth map in the crate is written once against [`Scalar`] and then
//! evaluated with `f64`, `Dual<f64>` or `Dual<Dual<f64>>`.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{Error, Result};

/// Real-like number type the generic field code is written against.
pub trait Scalar:
    Copy
    + fmt::Debug
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    fn from_f64(v: f64) -> Self;
    /// The underlying real value, stripped of every tangent level.
    fn re(&self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn expm1(self) -> Self;
    fn ln_1p(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn sigmoid(self) -> Self;
    fn powi(self, n: i32) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn one() -> Self {
        Self::from_f64(1.0)
    }

    fn recip(self) -> Self {
        Self::one() / self
    }

    /// SiLU activation, `x * sigmoid(x)`.
    fn silu(self) -> Self {
        self * self.sigmoid()
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn re(&self) -> f64 {
        *self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn expm1(self) -> Self {
        f64::exp_m1(self)
    }
    fn ln_1p(self) -> Self {
        f64::ln_1p(self)
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn sigmoid(self) -> Self {
        if self >= 0.0 {
            1.0 / (1.0 + (-self).exp())
        } else {
            let e = self.exp();
            e / (1.0 + e)
        }
    }
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
}

/// A dual number `value + tangent·ε` with `ε² = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<T> {
    pub value: T,
    pub tangent: T,
}

impl<T: Scalar> Dual<T> {
    pub fn new(value: T, tangent: T) -> Self {
        Self { value, tangent }
    }

    pub fn constant(value: T) -> Self {
        Self {
            value,
            tangent: T::zero(),
        }
    }

    /// Seed a variable with unit tangent.
    pub fn variable(value: T) -> Self {
        Self {
            value,
            tangent: T::one(),
        }
    }

    #[inline]
    fn chain(self, value: T, deriv: T) -> Self {
        Self {
            value,
            tangent: deriv * self.tangent,
        }
    }
}

impl<T: Scalar> Add for Dual<T> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self::new(self.value + o.value, self.tangent + o.tangent)
    }
}

impl<T: Scalar> Sub for Dual<T> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self::new(self.value - o.value, self.tangent - o.tangent)
    }
}

impl<T: Scalar> Mul for Dual<T> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        Self::new(
            self.value * o.value,
            self.value * o.tangent + self.tangent * o.value,
        )
    }
}

impl<T: Scalar> Div for Dual<T> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let inv = o.value.recip();
        let q = self.value * inv;
        Self::new(q, (self.tangent - q * o.tangent) * inv)
    }
}

impl<T: Scalar> Neg for Dual<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.value, -self.tangent)
    }
}

impl<T: Scalar> Add<f64> for Dual<T> {
    type Output = Self;
    #[inline]
    fn add(self, o: f64) -> Self {
        Self::new(self.value + o, self.tangent)
    }
}

impl<T: Scalar> Sub<f64> for Dual<T> {
    type Output = Self;
    #[inline]
    fn sub(self, o: f64) -> Self {
        Self::new(self.value - o, self.tangent)
    }
}

impl<T: Scalar> Mul<f64> for Dual<T> {
    type Output = Self;
    #[inline]
    fn mul(self, o: f64) -> Self {
        Self::new(self.value * o, self.tangent * o)
    }
}

impl<T: Scalar> Div<f64> for Dual<T> {
    type Output = Self;
    #[inline]
    fn div(self, o: f64) -> Self {
        Self::new(self.value / o, self.tangent / o)
    }
}

impl<T: Scalar> AddAssign for Dual<T> {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<T: Scalar> SubAssign for Dual<T> {
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}

impl<T: Scalar> MulAssign for Dual<T> {
    fn mul_assign(&mut self, o: Self) {
        *self = *self * o;
    }
}

impl<T: Scalar> Scalar for Dual<T> {
    fn from_f64(v: f64) -> Self {
        Self::constant(T::from_f64(v))
    }
    fn re(&self) -> f64 {
        self.value.re()
    }
    fn exp(self) -> Self {
        let e = self.value.exp();
        self.chain(e, e)
    }
    fn ln(self) -> Self {
        self.chain(self.value.ln(), self.value.recip())
    }
    fn sqrt(self) -> Self {
        let s = self.value.sqrt();
        self.chain(s, (s * 2.0).recip())
    }
    fn tanh(self) -> Self {
        let th = self.value.tanh();
        self.chain(th, T::one() - th * th)
    }
    fn expm1(self) -> Self {
        self.chain(self.value.expm1(), self.value.exp())
    }
    fn ln_1p(self) -> Self {
        self.chain(self.value.ln_1p(), (self.value + 1.0).recip())
    }
    fn sin(self) -> Self {
        self.chain(self.value.sin(), self.value.cos())
    }
    fn cos(self) -> Self {
        self.chain(self.value.cos(), -self.value.sin())
    }
    fn sigmoid(self) -> Self {
        let s = self.value.sigmoid();
        self.chain(s, s * (T::one() - s))
    }
    fn powi(self, n: i32) -> Self {
        if n == 0 {
            return Self::one();
        }
        let p = self.value.powi(n - 1);
        self.chain(p * self.value, p * (n as f64))
    }
}

/// A point together with a tangent direction, stored as two flat vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct DualVec {
    pub values: Vec<f64>,
    pub tangents: Vec<f64>,
}

impl DualVec {
    pub fn new(values: Vec<f64>, tangents: Vec<f64>) -> Result<Self> {
        if values.len() != tangents.len() {
            return Err(Error::Shape {
                expected: values.len(),
                got: tangents.len(),
            });
        }
        Ok(Self { values, tangents })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_duals(&self) -> Vec<Dual<f64>> {
        self.values
            .iter()
            .zip(&self.tangents)
            .map(|(&v, &d)| Dual::new(v, d))
            .collect()
    }

    pub fn from_duals(duals: &[Dual<f64>]) -> Self {
        Self {
            values: duals.iter().map(|d| d.value).collect(),
            tangents: duals.iter().map(|d| d.tangent).collect(),
        }
    }
}

/// A smooth time-dependent vector field on `R^D`, written once for every
/// scalar type.
pub trait VectorField<const D: usize> {
    fn eval<T: Scalar>(&self, x: [T; D], t: T) -> [T; D];
}

#[inline]
pub(crate) fn seed<T: Scalar, const D: usize>(x: [T; D], v: [T; D]) -> [Dual<T>; D] {
    std::array::from_fn(|i| Dual::new(x[i], v[i]))
}

#[inline]
pub(crate) fn tangents<T: Scalar, const D: usize>(y: [Dual<T>; D]) -> [T; D] {
    y.map(|d| d.tangent)
}

/// Directional derivative of `f` along `(v, t_dot)` in the joint `(x, t)` space.
pub fn directional<F, const D: usize>(f: &F, x: [f64; D], t: f64, v: [f64; D], t_dot: f64) -> [f64; D]
where
    F: VectorField<D>,
{
    let y = f.eval(seed(x, v), Dual::new(t, t_dot));
    tangents(y)
}

/// Spatial Jacobian-vector product `(∂f/∂x)(x, t) · v`.
pub fn jvp<F, const D: usize>(f: &F, x: [f64; D], t: f64, v: [f64; D]) -> [f64; D]
where
    F: VectorField<D>,
{
    directional(f, x, t, v, 0.0)
}

/// Partial time derivative `∂f/∂t (x, t)`.
pub fn time_derivative<F, const D: usize>(f: &F, x: [f64; D], t: f64) -> [f64; D]
where
    F: VectorField<D>,
{
    directional(f, x, t, [0.0; D], 1.0)
}

/// Second directional derivative `∂²f/∂x² [v, v]` via nested duals.
pub fn second_directional<F, const D: usize>(f: &F, x: [f64; D], t: f64, v: [f64; D]) -> [f64; D]
where
    F: VectorField<D>,
{
    second_mixed(f, x, t, (v, 0.0), (v, 0.0))
}

/// Mixed second derivative of `f` along two joint `(x, t)` directions `a`, `b`.
pub fn second_mixed<F, const D: usize>(
    f: &F,
    x: [f64; D],
    t: f64,
    a: ([f64; D], f64),
    b: ([f64; D], f64),
) -> [f64; D]
where
    F: VectorField<D>,
{
    let xs: [Dual<Dual<f64>>; D] =
        std::array::from_fn(|i| Dual::new(Dual::new(x[i], a.0[i]), Dual::new(b.0[i], 0.0)));
    let ts = Dual::new(Dual::new(t, a.1), Dual::new(b.1, 0.0));
    f.eval(xs, ts).map(|y| y.tangent.tangent)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Identity;
    impl VectorField<2> for Identity {
        fn eval<T: Scalar>(&self, x: [T; 2], _t: T) -> [T; 2] {
            x
        }
    }

    struct TimesT;
    impl VectorField<2> for TimesT {
        fn eval<T: Scalar>(&self, x: [T; 2], t: T) -> [T; 2] {
            [t * x[0], t * x[1]]
        }
    }

    /// f(x) = (x0² + 3 x0 x1, x1³)
    struct Poly;
    impl VectorField<2> for Poly {
        fn eval<T: Scalar>(&self, x: [T; 2], _t: T) -> [T; 2] {
            [x[0] * x[0] + x[0] * x[1] * 3.0, x[1].powi(3)]
        }
    }

    struct Elementary;
    impl VectorField<2> for Elementary {
        fn eval<T: Scalar>(&self, x: [T; 2], t: T) -> [T; 2] {
            let a = (x[0] * t).exp().ln_1p() + x[1].tanh() * x[0].sin();
            let b = (x[0] * x[0] + 1.0).sqrt() / (t + 2.0) + x[1].expm1().cos() + x[0].silu();
            [a, b * (x[1] + 3.0).ln()]
        }
    }

    fn fd<F: VectorField<2>>(f: &F, x: [f64; 2], t: f64, v: [f64; 2], tv: f64, h: f64) -> [f64; 2] {
        let p = f.eval([x[0] + h * v[0], x[1] + h * v[1]], t + h * tv);
        let m = f.eval([x[0] - h * v[0], x[1] - h * v[1]], t - h * tv);
        [(p[0] - m[0]) / (2.0 * h), (p[1] - m[1]) / (2.0 * h)]
    }

    #[test]
    fn identity_jvp_returns_direction() {
        assert_eq!(jvp(&Identity, [0.3, -1.0], 0.2, [2.0, 5.0]), [2.0, 5.0]);
    }

    #[test]
    fn time_derivative_of_t_times_x_is_x() {
        assert_eq!(time_derivative(&TimesT, [0.3, -1.0], 0.7), [0.3, -1.0]);
        assert_eq!(time_derivative(&Identity, [0.3, -1.0], 0.7), [0.0, 0.0]);
    }

    #[test]
    fn second_directional_of_polynomial_matches_hand_computation() {
        // Hessian contraction along v: [2 v0² + 6 v0 v1, 6 x1 v1²]
        let x = [0.5, -2.0];
        let v = [1.5, 0.25];
        let got = second_directional(&Poly, x, 0.0, v);
        assert!((got[0] - (2.0 * 2.25 + 6.0 * 1.5 * 0.25)).abs() < 1e-14);
        assert!((got[1] - 6.0 * (-2.0) * 0.0625).abs() < 1e-14);
        assert_eq!(second_directional(&Identity, x, 0.0, v), [0.0, 0.0]);
    }

    #[test]
    fn elementary_functions_match_finite_differences() {
        let x = [0.4, -0.3];
        let t = 0.6;
        for (v, tv) in [([1.0, 0.0], 0.0), ([0.0, 1.0], 0.0), ([0.3, -0.8], 0.5), ([0.0, 0.0], 1.0)] {
            let ad = directional(&Elementary, x, t, v, tv);
            let num = fd(&Elementary, x, t, v, tv, 1e-6);
            for i in 0..2 {
                assert!((ad[i] - num[i]).abs() < 1e-8 * (1.0 + num[i].abs()), "{ad:?} vs {num:?}");
            }
        }
    }

    #[test]
    fn nested_second_derivative_matches_fd_of_first() {
        let x = [0.4, -0.3];
        let t = 0.6;
        let a = ([0.3, -0.8], 0.2);
        let b = ([-0.5, 0.1], 0.7);
        let got = second_mixed(&Elementary, x, t, a, b);
        let h = 1e-5;
        let p = directional(&Elementary, [x[0] + h * b.0[0], x[1] + h * b.0[1]], t + h * b.1, a.0, a.1);
        let m = directional(&Elementary, [x[0] - h * b.0[0], x[1] - h * b.0[1]], t - h * b.1, a.0, a.1);
        for i in 0..2 {
            let num = (p[i] - m[i]) / (2.0 * h);
            assert!((got[i] - num).abs() < 1e-7 * (1.0 + num.abs()));
        }
    }

    #[test]
    fn dual_vec_rejects_mismatched_lengths() {
        assert!(matches!(
            DualVec::new(vec![1.0, 2.0], vec![1.0]),
            Err(Error::Shape { expected: 2, got: 1 })
        ));
        let dv = DualVec::new(vec![1.0, 2.0], vec![0.5, -1.0]).unwrap();
        assert_eq!(DualVec::from_duals(&dv.to_duals()), dv);
    }

    #[test]
    fn sigmoid_is_stable_for_large_arguments() {
        assert_eq!(Scalar::sigmoid(800.0_f64), 1.0);
        assert_eq!(Scalar::sigmoid(-800.0_f64), 0.0);
        let d = Dual::variable(0.0_f64).sigmoid();
        assert!((d.tangent - 0.25).abs() < 1e-15);
    }

    proptest::proptest! {
        #[test]
        fn jvp_is_linear_in_direction(
            x0 in -2.0..2.0f64, x1 in -2.0..2.0f64, t in 0.1..1.0f64,
            v0 in -3.0..3.0f64, v1 in -3.0..3.0f64, w0 in -3.0..3.0f64, w1 in -3.0..3.0f64,
            a in -2.0..2.0f64, b in -2.0..2.0f64,
        ) {
            let x = [x0, x1];
            let combo = jvp(&Elementary, x, t, [a * v0 + b * w0, a * v1 + b * w1]);
            let jv = jvp(&Elementary, x, t, [v0, v1]);
            let jw = jvp(&Elementary, x, t, [w0, w1]);
            for i in 0..2 {
                let lin = a * jv[i] + b * jw[i];
                proptest::prop_assert!((combo[i] - lin).abs() < 1e-12 * (1.0 + lin.abs() + combo[i].abs()) * 10.0);
            }
        }
    }
}
