//! Single solver steps. Deterministic steps act on `x̄ = √(1+γ²) x` and
//! advance `γ` by `h = γ_next − γ_n`, which is negative while sampling.

use crate::error::{Error, Result};
use crate::fields::EpsField;
use crate::gmm::Point;

#[inline]
pub fn to_bar(x: Point, g: f64) -> Point {
    let s = (1.0 + g * g).sqrt();
    [s * x[0], s * x[1]]
}

#[inline]
pub fn from_bar(bar: Point, g: f64) -> Point {
    let s = (1.0 + g * g).sqrt();
    [bar[0] / s, bar[1] / s]
}

/// `x̄ + h d₁ + h²/2 d₂ + h³/6 d₃` over as many derivatives as given.
#[inline]
pub fn taylor(bar: Point, h: f64, derivs: &[Point]) -> Point {
    let mut out = bar;
    let mut c = 1.0;
    for (k, d) in derivs.iter().enumerate() {
        c *= h / (k + 1) as f64;
        out[0] += c * d[0];
        out[1] += c * d[1];
    }
    out
}

fn gammas(field: &dyn EpsField, t_n: f64, t_next: f64) -> Result<(f64, f64)> {
    let s = field.schedule();
    Ok((s.gamma(t_n)?, s.gamma(t_next)?))
}

/// First-order Taylor step (DDIM).
pub fn step_ddim(field: &dyn EpsField, bar: Point, t_n: f64, t_next: f64) -> Result<Point> {
    let (g, gn) = gammas(field, t_n, t_next)?;
    let e = field.eps(from_bar(bar, g), t_n)?;
    Ok(taylor(bar, gn - g, &[e]))
}

/// Second-order Taylor step using `d_γ ε` from the field's provider.
pub fn step_genie(field: &dyn EpsField, bar: Point, t_n: f64, t_next: f64) -> Result<Point> {
    let (g, gn) = gammas(field, t_n, t_next)?;
    let (e, d) = field.eps_d_gamma(from_bar(bar, g), t_n)?;
    Ok(taylor(bar, gn - g, &[e, d]))
}

/// Third-order Taylor step.
pub fn step_ttm3(field: &dyn EpsField, bar: Point, t_n: f64, t_next: f64) -> Result<Point> {
    let (g, gn) = gammas(field, t_n, t_next)?;
    let (e, d, d2) = field.eps_d_gamma2(from_bar(bar, g), t_n)?;
    Ok(taylor(bar, gn - g, &[e, d, d2]))
}

/// Adams–Bashforth weights, newest evaluation first.
pub fn ab_coeffs(order: usize) -> &'static [f64] {
    const AB1: [f64; 1] = [1.0];
    const AB2: [f64; 2] = [1.5, -0.5];
    const AB3: [f64; 3] = [23.0 / 12.0, -16.0 / 12.0, 5.0 / 12.0];
    const AB4: [f64; 4] = [55.0 / 24.0, -59.0 / 24.0, 37.0 / 24.0, -9.0 / 24.0];
    match order {
        1 => &AB1,
        2 => &AB2,
        3 => &AB3,
        _ => &AB4,
    }
}

/// Past `(γ, ε)` evaluations, oldest first.
#[derive(Clone, Debug, Default)]
pub struct History {
    pub entries: Vec<(f64, Point)>,
}

impl History {
    pub fn push(&mut self, g: f64, e: Point) {
        self.entries.push((g, e));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Newest first.
    fn recent(&self, k: usize) -> impl Iterator<Item = &Point> {
        self.entries.iter().rev().take(k).map(|(_, e)| e)
    }
}

/// Fixed-coefficient Adams–Bashforth step from the newest `order` history
/// entries; the newest must be the evaluation at the current state.
pub fn ab_update(history: &History, order: usize, bar: Point, h: f64) -> Result<Point> {
    if !(1..=4).contains(&order) {
        return Err(Error::State(format!("unsupported Adams–Bashforth order {order}")));
    }
    if history.len() < order {
        return Err(Error::State(format!(
            "order {order} step needs {order} evaluations, history has {}",
            history.len()
        )));
    }
    let mut e = [0.0; 2];
    for (c, v) in ab_coeffs(order).iter().zip(history.recent(order)) {
        e[0] += c * v[0];
        e[1] += c * v[1];
    }
    Ok(taylor(bar, h, &[e]))
}

fn ab_step(order: usize, field: &dyn EpsField, history: &mut History, bar: Point, t_n: f64, t_next: f64) -> Result<Point> {
    if history.len() < order - 1 {
        return Err(Error::State(format!(
            "AB{order} needs {} prior evaluations, history has {}",
            order - 1,
            history.len()
        )));
    }
    let (g, gn) = gammas(field, t_n, t_next)?;
    let e = field.eps(from_bar(bar, g), t_n)?;
    history.push(g, e);
    ab_update(history, order, bar, gn - g)
}

/// Two-step Adams–Bashforth; evaluates ε at the current state and appends it.
pub fn step_ab2(field: &dyn EpsField, history: &mut History, bar: Point, t_n: f64, t_next: f64) -> Result<Point> {
    ab_step(2, field, history, bar, t_n, t_next)
}

/// Four-step Adams–Bashforth; needs three prior evaluations.
pub fn step_ab4(field: &dyn EpsField, history: &mut History, bar: Point, t_n: f64, t_next: f64) -> Result<Point> {
    ab_step(4, field, history, bar, t_n, t_next)
}

/// Classic RK4 on `dx̄/dγ = ε`, stage times through the inverse γ map.
/// `k1` may be supplied to skip the first evaluation.
pub fn step_rk4(field: &dyn EpsField, bar: Point, t_n: f64, t_next: f64, k1: Option<Point>) -> Result<(Point, Point)> {
    let s = *field.schedule();
    let (g, gn) = gammas(field, t_n, t_next)?;
    let h = gn - g;
    let gm = g + 0.5 * h;
    let tm = s.t_of_gamma(gm)?;
    let k1 = match k1 {
        Some(k) => k,
        None => field.eps(from_bar(bar, g), t_n)?,
    };
    let at = |k: Point, c: f64| [bar[0] + c * k[0], bar[1] + c * k[1]];
    let k2 = field.eps(from_bar(at(k1, 0.5 * h), gm), tm)?;
    let k3 = field.eps(from_bar(at(k2, 0.5 * h), gm), tm)?;
    let k4 = field.eps(from_bar(at(k3, h), gn), t_next)?;
    let e = [
        (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]) / 6.0,
        (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]) / 6.0,
    ];
    Ok((taylor(bar, h, &[e]), k1))
}

/// Euler–Maruyama on the reverse-time SDE in x-space with
/// `s = −ε/σ`: `x − ½β(t)(x + 2s)Δt + √(β|Δt|) z`.
pub fn step_euler_maruyama(field: &dyn EpsField, x: Point, t_n: f64, t_next: f64, noise: Point) -> Result<Point> {
    let e = field.eps(x, t_n)?;
    let sig = field.schedule().sigma(t_n)?;
    Ok(em_update(field, x, [-e[0] / sig, -e[1] / sig], t_n, t_next, noise))
}

pub(crate) fn em_update(field: &dyn EpsField, x: Point, score: Point, t_n: f64, t_next: f64, noise: Point) -> Point {
    let beta = field.schedule().beta(t_n);
    let dt = t_next - t_n;
    let amp = (beta * dt.abs()).sqrt();
    [
        x[0] - 0.5 * beta * (x[0] + 2.0 * score[0]) * dt + amp * noise[0],
        x[1] - 0.5 * beta * (x[1] + 2.0 * score[1]) * dt + amp * noise[1],
    ]
}
