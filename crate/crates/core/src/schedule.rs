//! Variance-preserving noise schedule and the γ-time reparameterization.
//!
//! With `β(t) = β₀ + β₁ t` the log signal scale is
//! `ln α_t² = −(β₀ t + ½ β₁ t²)`, and `γ_t = σ_t / α_t` satisfies
//! `1 + γ_t² = 1 / α_t²`. Solvers integrate the DDIM ODE in γ, so the
//! inverse map and `dt/dγ` are provided in closed form.
//!
//! The `*_of` methods are unchecked and generic over [`Scalar`] so that time
//! derivatives of the schedule flow through forward-mode AD.

use std::fmt;
use std::str::FromStr;

use crate::error::{config, domain, Result};
use crate::fwdad::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VpSchedule {
    pub beta0: f64,
    pub beta1: f64,
    pub t_cutoff: f64,
}

impl Default for VpSchedule {
    fn default() -> Self {
        Self {
            beta0: 0.1,
            beta1: 19.9,
            t_cutoff: 1e-3,
        }
    }
}

fn check_unit(t: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(domain(format!("{what}: t = {t} outside [0, 1]")));
    }
    Ok(())
}

impl VpSchedule {
    pub fn new(beta0: f64, beta1: f64, t_cutoff: f64) -> Result<Self> {
        if !(beta0 >= 0.0 && beta1 > 0.0) {
            return Err(config(format!("invalid beta coefficients ({beta0}, {beta1})")));
        }
        if !(t_cutoff > 0.0 && t_cutoff < 1.0) {
            return Err(config(format!("t_cutoff = {t_cutoff} outside (0, 1)")));
        }
        Ok(Self {
            beta0,
            beta1,
            t_cutoff,
        })
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.beta0 + self.beta1 * t
    }

    /// `∫₀ᵗ β(s) ds`, equal to `−ln α_t²`.
    pub fn integral_of<T: Scalar>(&self, t: T) -> T {
        t * self.beta0 + t * t * (0.5 * self.beta1)
    }

    pub fn alpha_of<T: Scalar>(&self, t: T) -> T {
        (self.integral_of(t) * -0.5).exp()
    }

    pub fn sigma_of<T: Scalar>(&self, t: T) -> T {
        (-(-self.integral_of(t)).expm1()).sqrt()
    }

    pub fn gamma_of<T: Scalar>(&self, t: T) -> T {
        self.integral_of(t).expm1().sqrt()
    }

    pub fn beta_of<T: Scalar>(&self, t: T) -> T {
        t * self.beta1 + self.beta0
    }

    /// `dt/dγ = 2γ / ((1 + γ²) β(t))`.
    pub fn dt_dgamma_of<T: Scalar>(&self, t: T) -> T {
        let g = self.gamma_of(t);
        g * 2.0 / ((g * g + 1.0) * self.beta_of(t))
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        check_unit(t, "alpha")?;
        Ok(self.alpha_of(t))
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        check_unit(t, "sigma")?;
        Ok(self.sigma_of(t))
    }

    /// `γ_t = √((1 − α²)/α²)`; zero at `t = 0` by continuity.
    pub fn gamma(&self, t: f64) -> Result<f64> {
        check_unit(t, "gamma")?;
        if t == 0.0 {
            return Ok(0.0);
        }
        Ok(self.gamma_of(t))
    }

    /// Inverse of [`gamma`](Self::gamma): the nonnegative root of
    /// `½β₁t² + β₀t = ln(1 + g²)`.
    pub fn t_of_gamma(&self, g: f64) -> Result<f64> {
        if !(g >= 0.0) {
            return Err(domain(format!("t_of_gamma: g = {g} must be >= 0")));
        }
        Ok(self.t_of_gamma_unchecked(g))
    }

    pub(crate) fn t_of_gamma_unchecked(&self, g: f64) -> f64 {
        let l = (g * g).ln_1p();
        // 2L / (β₀ + √(β₀² + 2β₁L)) avoids cancellation for small g.
        2.0 * l / (self.beta0 + (self.beta0 * self.beta0 + 2.0 * self.beta1 * l).sqrt())
    }

    pub fn dt_dgamma(&self, t: f64) -> Result<f64> {
        if !(t > 0.0 && t <= 1.0) {
            return Err(domain(format!("dt_dgamma: t = {t} outside (0, 1]")));
        }
        Ok(self.dt_dgamma_of(t))
    }

    /// Striding times for this schedule's cutoff.
    pub fn striding(&self, kind: StridingKind, n_steps: usize) -> Result<Vec<f64>> {
        make_striding(kind, n_steps, self.t_cutoff)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StridingKind {
    Linear,
    /// `t_n = (1 − (1 − t_c^{1/ρ}) n/N)^ρ`; ρ = 2 is quadratic striding.
    Power(f64),
}

impl StridingKind {
    pub const QUADRATIC: StridingKind = StridingKind::Power(2.0);
}

impl fmt::Display for StridingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StridingKind::Linear => write!(f, "linear"),
            StridingKind::Power(r) if *r == 2.0 => write!(f, "quadratic"),
            StridingKind::Power(r) => write!(f, "power:{r}"),
        }
    }
}

impl FromStr for StridingKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "linear" => Ok(StridingKind::Linear),
            "quadratic" => Ok(StridingKind::QUADRATIC),
            other => {
                let rho = other
                    .strip_prefix("power:")
                    .and_then(|r| r.parse::<f64>().ok())
                    .ok_or_else(|| config(format!("unknown striding '{other}'")))?;
                Ok(StridingKind::Power(rho))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StridingSchedule {
    pub kind: StridingKind,
    pub n_steps: usize,
    pub t_cutoff: f64,
}

impl StridingSchedule {
    pub fn times(&self) -> Result<Vec<f64>> {
        make_striding(self.kind, self.n_steps, self.t_cutoff)
    }
}

/// Evaluation times `1 = t_0 > t_1 > … > t_N = t_cutoff`.
pub fn make_striding(kind: StridingKind, n_steps: usize, t_cutoff: f64) -> Result<Vec<f64>> {
    if n_steps == 0 {
        return Err(config("striding needs at least one step"));
    }
    if !(t_cutoff > 0.0 && t_cutoff < 1.0) {
        return Err(config(format!("t_cutoff = {t_cutoff} outside (0, 1)")));
    }
    let n = n_steps as f64;
    let mut times: Vec<f64> = match kind {
        StridingKind::Linear => (0..=n_steps)
            .map(|i| 1.0 - (1.0 - t_cutoff) * i as f64 / n)
            .collect(),
        StridingKind::Power(rho) => {
            if !(rho > 1.0) {
                return Err(config(format!("power striding needs rho > 1, got {rho}")));
            }
            let root = t_cutoff.powf(1.0 / rho);
            (0..=n_steps)
                .map(|i| (1.0 - (1.0 - root) * i as f64 / n).powf(rho))
                .collect()
        }
    };
    times[0] = 1.0;
    times[n_steps] = t_cutoff;
    Ok(times)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn alpha_reference_values() {
        let s = VpSchedule::default();
        assert_eq!(s.alpha(0.0).unwrap(), 1.0);
        let a1 = s.alpha(1.0).unwrap();
        assert_relative_eq!(a1 * a1, (-10.05f64).exp(), max_relative = 1e-12);
        assert_relative_eq!(a1 * a1, 4.317e-5, max_relative = 1e-3);
        let a5 = s.alpha(0.5).unwrap();
        assert_relative_eq!(a5 * a5, (-2.5375f64).exp(), max_relative = 1e-12);
        assert_relative_eq!(a5 * a5, 0.07906, max_relative = 1e-4);
        assert!(s.alpha(-0.1).is_err());
        assert!(s.alpha(1.1).is_err());
    }

    #[test]
    fn gamma_reference_values() {
        let s = VpSchedule::default();
        assert_eq!(s.gamma(0.0).unwrap(), 0.0);
        assert_relative_eq!(s.gamma(0.5).unwrap(), 3.413, max_relative = 1e-3);
        assert_relative_eq!(s.gamma(1.0).unwrap(), 152.2, max_relative = 1e-3);
        assert!(s.gamma(-1e-9).is_err());
    }

    #[test]
    fn t_of_gamma_reference_values() {
        let s = VpSchedule::default();
        assert_eq!(s.t_of_gamma(0.0).unwrap(), 0.0);
        assert_relative_eq!(s.t_of_gamma(3.413).unwrap(), 0.5, max_relative = 1e-3);
        assert_relative_eq!(s.t_of_gamma(152.2).unwrap(), 1.0, max_relative = 1e-3);
        assert!(s.t_of_gamma(-0.5).is_err());
    }

    #[test]
    fn dt_dgamma_matches_finite_differences() {
        let s = VpSchedule::default();
        let h = 1e-6;
        let t = 0.3;
        let slope = (s.gamma(t + h).unwrap() - s.gamma(t).unwrap()) / h;
        assert!((s.dt_dgamma(t).unwrap() * slope - 1.0).abs() < 1e-4);

        let t = 0.5;
        let central = (s.gamma(t + h).unwrap() - s.gamma(t - h).unwrap()) / (2.0 * h);
        assert_relative_eq!(s.dt_dgamma(t).unwrap(), 1.0 / central, max_relative = 1e-6);

        for t in [0.1, 0.5, 0.9] {
            assert!(s.dt_dgamma(t).unwrap() > 0.0);
        }
        assert!(s.dt_dgamma(0.0).is_err());
    }

    #[test]
    fn dt_dgamma_matches_the_published_closed_form() {
        // dt/dγ = (2γ / (19.9 (γ²+1))) / √((0.1/19.9)² + 2 ln(γ²+1)/19.9)
        let s = VpSchedule::default();
        for t in [0.01, 0.2, 0.7, 1.0] {
            let g = s.gamma(t).unwrap();
            let published = (2.0 * g / (19.9 * (g * g + 1.0)))
                / ((0.1f64 / 19.9).powi(2) + 2.0 * (g * g + 1.0).ln() / 19.9).sqrt();
            assert_relative_eq!(s.dt_dgamma(t).unwrap(), published, max_relative = 1e-12);
        }
    }

    #[test]
    fn dt_dgamma_matches_fd_of_inverse_map_on_grid() {
        let s = VpSchedule::default();
        for i in 0..=95 {
            let t = 0.05 + 0.01 * i as f64;
            let g = s.gamma(t).unwrap();
            let h = 1e-6 * g;
            let fd = (s.t_of_gamma(g + h).unwrap() - s.t_of_gamma(g - h).unwrap()) / (2.0 * h);
            assert_relative_eq!(s.dt_dgamma(t).unwrap(), fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn variance_is_preserved() {
        let s = VpSchedule::default();
        for i in 0..1000 {
            let t = (i as f64 + 0.5) / 1000.0;
            let a = s.alpha(t).unwrap();
            let sg = s.sigma(t).unwrap();
            assert!((a * a + sg * sg - 1.0).abs() < 1e-12);
        }
        assert_eq!(s.sigma(0.0).unwrap(), 0.0);
    }

    #[test]
    fn gamma_round_trip_on_grid() {
        let s = VpSchedule::default();
        let mut prev = 0.0;
        for i in 0..1000 {
            let t = 1e-3 + (1.0 - 1e-3) * i as f64 / 999.0;
            let g = s.gamma(t).unwrap();
            assert!(g > prev);
            prev = g;
            assert!((s.t_of_gamma(g).unwrap() - t).abs() < 1e-9);
        }
    }

    #[test]
    fn striding_reference_values() {
        let q = make_striding(StridingKind::QUADRATIC, 2, 1e-3).unwrap();
        assert_eq!(q.len(), 3);
        assert_eq!(q[0], 1.0);
        assert_relative_eq!(q[1], 0.26606, max_relative = 1e-4);
        assert_eq!(q[2], 0.001);
        assert_eq!(make_striding(StridingKind::Linear, 1, 1e-3).unwrap(), vec![1.0, 0.001]);
        for rho in [1.5, 2.0, 3.0] {
            assert_eq!(make_striding(StridingKind::Power(rho), 1, 1e-3).unwrap(), vec![1.0, 0.001]);
        }
    }

    #[test]
    fn striding_rejects_bad_configs() {
        assert!(make_striding(StridingKind::Power(1.0), 5, 1e-3).is_err());
        assert!(make_striding(StridingKind::Power(0.5), 5, 1e-3).is_err());
        assert!(make_striding(StridingKind::Linear, 0, 1e-3).is_err());
        assert!(make_striding(StridingKind::Linear, 3, 0.0).is_err());
    }

    #[test]
    fn striding_kind_parses() {
        assert_eq!("linear".parse::<StridingKind>().unwrap(), StridingKind::Linear);
        assert_eq!("quadratic".parse::<StridingKind>().unwrap(), StridingKind::QUADRATIC);
        assert_eq!("power:2.5".parse::<StridingKind>().unwrap(), StridingKind::Power(2.5));
        assert!("cubic".parse::<StridingKind>().is_err());
        assert_eq!(StridingKind::Power(2.5).to_string(), "power:2.5");
    }

    proptest::proptest! {
        #[test]
        fn stridings_are_strictly_decreasing(n in 1usize..200, rho in 1.01f64..4.0, cut in 1e-5f64..0.5, linear: bool) {
            let kind = if linear { StridingKind::Linear } else { StridingKind::Power(rho) };
            let ts = make_striding(kind, n, cut).unwrap();
            proptest::prop_assert_eq!(ts.len(), n + 1);
            proptest::prop_assert_eq!(ts[0], 1.0);
            proptest::prop_assert_eq!(ts[n], cut);
            for w in ts.windows(2) {
                proptest::prop_assert!(w[0] > w[1]);
            }
        }
    }
}
