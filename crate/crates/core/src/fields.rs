//! ε-prediction fields and their total γ-derivatives.
//!
//! Every solver talks to an [`EpsField`]. One call to any of its three
//! evaluation methods counts as one function evaluation, so the fused
//! methods return ε together with its derivatives.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{config, domain, Error, Result};
use crate::fwdad::{Dual, Scalar, VectorField};
use crate::gmm::{dx_dgamma, GaussianMixture, Point};
use crate::schedule::VpSchedule;

/// How a field obtains `d_γ ε`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provider {
    /// Closed-form score Jacobian.
    Exact,
    /// Forward-mode AD through the field.
    AutoDiff,
    /// A separately trained prediction head.
    Distilled,
    None,
}

impl Provider {
    pub fn has_first(self) -> bool {
        self != Provider::None
    }

    pub fn has_second(self) -> bool {
        matches!(self, Provider::Exact | Provider::AutoDiff)
    }
}

pub trait EpsField: Send + Sync {
    fn schedule(&self) -> &VpSchedule;

    fn provider(&self) -> Provider;

    fn eps(&self, x: Point, t: f64) -> Result<Point>;

    /// `(ε, d_γ ε)` at one point.
    fn eps_d_gamma(&self, _x: Point, _t: f64) -> Result<(Point, Point)> {
        Err(Error::Capability("field has no derivative provider".into()))
    }

    /// `(ε, d_γ ε, d²_γ ε)` at one point.
    fn eps_d_gamma2(&self, _x: Point, _t: f64) -> Result<(Point, Point, Point)> {
        Err(Error::Capability("field has no second derivative".into()))
    }

    /// ε pushed through one level of dual numbers, for fields that are
    /// differentiable along arbitrary directions.
    fn eps_dual(&self, _x: [D1; 2], _t: D1) -> Result<[D1; 2]> {
        Err(Error::Capability("field cannot be differentiated".into()))
    }

    fn eps_dual2(&self, _x: [D2; 2], _t: D2) -> Result<[D2; 2]> {
        Err(Error::Capability("field cannot be differentiated twice".into()))
    }
}

type D1 = Dual<f64>;
type D2 = Dual<Dual<f64>>;

impl<F: EpsField + ?Sized> EpsField for &F {
    fn schedule(&self) -> &VpSchedule {
        (**self).schedule()
    }
    fn provider(&self) -> Provider {
        (**self).provider()
    }
    fn eps(&self, x: Point, t: f64) -> Result<Point> {
        (**self).eps(x, t)
    }
    fn eps_d_gamma(&self, x: Point, t: f64) -> Result<(Point, Point)> {
        (**self).eps_d_gamma(x, t)
    }
    fn eps_d_gamma2(&self, x: Point, t: f64) -> Result<(Point, Point, Point)> {
        (**self).eps_d_gamma2(x, t)
    }
    fn eps_dual(&self, x: [D1; 2], t: D1) -> Result<[D1; 2]> {
        (**self).eps_dual(x, t)
    }
    fn eps_dual2(&self, x: [D2; 2], t: D2) -> Result<[D2; 2]> {
        (**self).eps_dual2(x, t)
    }
}

impl<F: EpsField + ?Sized> EpsField for Box<F> {
    fn schedule(&self) -> &VpSchedule {
        (**self).schedule()
    }
    fn provider(&self) -> Provider {
        (**self).provider()
    }
    fn eps(&self, x: Point, t: f64) -> Result<Point> {
        (**self).eps(x, t)
    }
    fn eps_d_gamma(&self, x: Point, t: f64) -> Result<(Point, Point)> {
        (**self).eps_d_gamma(x, t)
    }
    fn eps_d_gamma2(&self, x: Point, t: f64) -> Result<(Point, Point, Point)> {
        (**self).eps_d_gamma2(x, t)
    }
    fn eps_dual(&self, x: [D1; 2], t: D1) -> Result<[D1; 2]> {
        (**self).eps_dual(x, t)
    }
    fn eps_dual2(&self, x: [D2; 2], t: D2) -> Result<[D2; 2]> {
        (**self).eps_dual2(x, t)
    }
}

pub(crate) fn check_query(sched: &VpSchedule, x: Point, t: f64) -> Result<()> {
    if !(x[0].is_finite() && x[1].is_finite()) {
        return Err(domain(format!("non-finite point {x:?}")));
    }
    if !(t <= 1.0 && t >= sched.t_cutoff * (1.0 - 1e-9)) {
        return Err(domain(format!("t = {t} outside [{}, 1]", sched.t_cutoff)));
    }
    Ok(())
}

/// `(ε, d_γ ε)` for any smooth field by forward-mode AD. The flow direction
/// needs ε first, so this is two sequential passes: a plain one and one dual
/// pass seeded with `(dx/dγ, dt/dγ)`.
pub fn ad_eps_total<F, T>(f: &F, sched: &VpSchedule, x: [T; 2], t: T) -> ([T; 2], [T; 2])
where
    F: VectorField<2>,
    T: Scalar,
{
    let eps = f.eval(x, t);
    let dx = dx_dgamma(eps, x, sched.gamma_of(t));
    let xs = [Dual::new(x[0], dx[0]), Dual::new(x[1], dx[1])];
    let y = f.eval(xs, Dual::new(t, sched.dt_dgamma_of(t)));
    (eps, [y[0].tangent, y[1].tangent])
}

/// `(ε, d_γ ε, d²_γ ε)` by differentiating [`ad_eps_total`] once more along the flow.
pub fn ad_eps_total2<F: VectorField<2>>(f: &F, sched: &VpSchedule, x: Point, t: f64) -> (Point, Point, Point) {
    let eps = f.eval(x, t);
    let dx = dx_dgamma(eps, x, sched.gamma_of(t));
    let xs = [Dual::new(x[0], dx[0]), Dual::new(x[1], dx[1])];
    let (e, d) = ad_eps_total(f, sched, xs, Dual::new(t, sched.dt_dgamma_of(t)));
    (
        [e[0].value, e[1].value],
        [d[0].value, d[1].value],
        [d[0].tangent, d[1].tangent],
    )
}

/// The diffused mixture's exact ε-field.
#[derive(Clone, Debug)]
pub struct AnalyticField {
    pub mixture: GaussianMixture,
    pub schedule: VpSchedule,
    pub provider: Provider,
}

impl AnalyticField {
    pub fn new(mixture: GaussianMixture, schedule: VpSchedule) -> Self {
        Self {
            mixture,
            schedule,
            provider: Provider::Exact,
        }
    }

    pub fn with_provider(mut self, provider: Provider) -> Result<Self> {
        if provider == Provider::Distilled {
            return Err(config("analytic fields have no distilled head"));
        }
        self.provider = provider;
        Ok(self)
    }
}

impl VectorField<2> for AnalyticField {
    fn eval<T: Scalar>(&self, x: [T; 2], t: T) -> [T; 2] {
        self.mixture.eps_of(&self.schedule, x, t)
    }
}

impl EpsField for AnalyticField {
    fn schedule(&self) -> &VpSchedule {
        &self.schedule
    }

    fn provider(&self) -> Provider {
        self.provider
    }

    fn eps(&self, x: Point, t: f64) -> Result<Point> {
        self.mixture.eps_exact(&self.schedule, x, t)
    }

    fn eps_d_gamma(&self, x: Point, t: f64) -> Result<(Point, Point)> {
        check_query(&self.schedule, x, t)?;
        match self.provider {
            Provider::Exact => Ok(self.mixture.eps_total_of(&self.schedule, x, t)),
            Provider::AutoDiff => Ok(ad_eps_total(self, &self.schedule, x, t)),
            _ => Err(Error::Capability("field has no derivative provider".into())),
        }
    }

    fn eps_d_gamma2(&self, x: Point, t: f64) -> Result<(Point, Point, Point)> {
        check_query(&self.schedule, x, t)?;
        match self.provider {
            Provider::Exact => Ok(self.mixture.eps_total2(&self.schedule, x, t)),
            Provider::AutoDiff => Ok(ad_eps_total2(self, &self.schedule, x, t)),
            _ => Err(Error::Capability("field has no second derivative".into())),
        }
    }

    fn eps_dual(&self, x: [D1; 2], t: D1) -> Result<[D1; 2]> {
        check_query(&self.schedule, [x[0].value, x[1].value], t.value)?;
        Ok(self.eval(x, t))
    }

    fn eps_dual2(&self, x: [D2; 2], t: D2) -> Result<[D2; 2]> {
        check_query(&self.schedule, [x[0].re(), x[1].re()], t.re())?;
        Ok(self.eval(x, t))
    }
}

/// Any generic smooth field (for example a trained network) with AD derivatives.
#[derive(Clone, Debug)]
pub struct AdField<F> {
    pub f: F,
    pub schedule: VpSchedule,
}

impl<F: VectorField<2> + Send + Sync> EpsField for AdField<F> {
    fn schedule(&self) -> &VpSchedule {
        &self.schedule
    }

    fn provider(&self) -> Provider {
        Provider::AutoDiff
    }

    fn eps(&self, x: Point, t: f64) -> Result<Point> {
        check_query(&self.schedule, x, t)?;
        Ok(self.f.eval(x, t))
    }

    fn eps_d_gamma(&self, x: Point, t: f64) -> Result<(Point, Point)> {
        check_query(&self.schedule, x, t)?;
        Ok(ad_eps_total(&self.f, &self.schedule, x, t))
    }

    fn eps_d_gamma2(&self, x: Point, t: f64) -> Result<(Point, Point, Point)> {
        check_query(&self.schedule, x, t)?;
        Ok(ad_eps_total2(&self.f, &self.schedule, x, t))
    }

    fn eps_dual(&self, x: [D1; 2], t: D1) -> Result<[D1; 2]> {
        check_query(&self.schedule, [x[0].value, x[1].value], t.value)?;
        Ok(self.f.eval(x, t))
    }

    fn eps_dual2(&self, x: [D2; 2], t: D2) -> Result<[D2; 2]> {
        check_query(&self.schedule, [x[0].re(), x[1].re()], t.re())?;
        Ok(self.f.eval(x, t))
    }
}

/// A field whose ε has no derivative provider; GENIE and TTM3 refuse it.
#[derive(Clone, Debug)]
pub struct PlainField<F>(pub F);

impl<F: EpsField> EpsField for PlainField<F> {
    fn schedule(&self) -> &VpSchedule {
        self.0.schedule()
    }
    fn provider(&self) -> Provider {
        Provider::None
    }
    fn eps(&self, x: Point, t: f64) -> Result<Point> {
        self.0.eps(x, t)
    }
}

/// `d_γ ε` alone.
pub fn d_gamma_eps(field: &dyn EpsField, x: Point, t: f64) -> Result<Point> {
    Ok(field.eps_d_gamma(x, t)?.1)
}

/// Classifier-free guidance over per-class conditional fields and one
/// unconditional field.
pub struct GuidedField<F> {
    pub cond: Vec<F>,
    pub uncond: F,
    pub w: f64,
}

impl GuidedField<AnalyticField> {
    /// Conditional fields from the labelled sub-mixtures, unconditional from
    /// the full mixture.
    pub fn from_mixture(mixture: &GaussianMixture, schedule: VpSchedule, w: f64) -> Result<Self> {
        let k = mixture.n_classes();
        if k == 0 {
            return Err(config("guidance needs a labelled mixture"));
        }
        let cond = (0..k)
            .map(|c| Ok(AnalyticField::new(mixture.conditional(c)?, schedule)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(cond, AnalyticField::new(mixture.clone(), schedule), w)
    }
}

impl<F: EpsField> GuidedField<F> {
    pub fn new(cond: Vec<F>, uncond: F, w: f64) -> Result<Self> {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(config(format!("guidance scale {w} must be >= 0")));
        }
        Ok(Self { cond, uncond, w })
    }

    fn cond_field(&self, c: usize) -> Result<&F> {
        self.cond
            .get(c)
            .ok_or_else(|| config(format!("unknown class {c} ({} classes)", self.cond.len())))
    }

    /// The guided field for one class, usable by any solver.
    pub fn for_class(&self, c: usize) -> Result<ClassGuided<'_, F>> {
        self.cond_field(c)?;
        Ok(ClassGuided { g: self, c })
    }
}

#[inline]
fn combine(w: f64, c: Point, u: Point) -> Point {
    [(1.0 + w) * c[0] - w * u[0], (1.0 + w) * c[1] - w * u[1]]
}

/// `(1 + w) ε_c − w ε`.
pub fn guided_eps<F: EpsField>(gf: &GuidedField<F>, x: Point, t: f64, c: usize) -> Result<Point> {
    let ec = gf.cond_field(c)?.eps(x, t)?;
    let eu = gf.uncond.eps(x, t)?;
    Ok(combine(gf.w, ec, eu))
}

/// `(1 + w) d_γ ε_c − w d_γ ε`.
pub fn guided_d_gamma<F: EpsField>(gf: &GuidedField<F>, x: Point, t: f64, c: usize) -> Result<Point> {
    Ok(gf.for_class(c)?.eps_d_gamma(x, t)?.1)
}

pub struct ClassGuided<'a, F> {
    g: &'a GuidedField<F>,
    c: usize,
}

impl<F: EpsField> ClassGuided<'_, F> {
    fn guided_dual(&self, x: [D1; 2], t: D1) -> Result<[D1; 2]> {
        let c = self.g.cond[self.c].eps_dual(x, t)?;
        let u = self.g.uncond.eps_dual(x, t)?;
        let w = self.g.w;
        Ok([c[0] * (1.0 + w) - u[0] * w, c[1] * (1.0 + w) - u[1] * w])
    }

    fn guided_dual2(&self, x: [D2; 2], t: D2) -> Result<[D2; 2]> {
        let c = self.g.cond[self.c].eps_dual2(x, t)?;
        let u = self.g.uncond.eps_dual2(x, t)?;
        let w = self.g.w;
        Ok([c[0] * (1.0 + w) - u[0] * w, c[1] * (1.0 + w) - u[1] * w])
    }

    fn differentiable(&self) -> bool {
        self.g.cond[self.c].provider().has_second() && self.g.uncond.provider().has_second()
    }
}

/// With `w = 0` the guided field is the conditional field itself and every
/// call is delegated to it. Otherwise derivatives of differentiable
/// sub-fields are taken along the guided flow; distilled sub-fields can only
/// supply derivatives along their own flows, which are then combined
/// linearly.
impl<F: EpsField> EpsField for ClassGuided<'_, F> {
    fn schedule(&self) -> &VpSchedule {
        self.g.uncond.schedule()
    }

    fn provider(&self) -> Provider {
        let a = self.g.cond[self.c].provider();
        let b = self.g.uncond.provider();
        if self.g.w == 0.0 || a == b {
            a
        } else if self.differentiable() {
            Provider::AutoDiff
        } else if a.has_first() && b.has_first() {
            Provider::Distilled
        } else {
            Provider::None
        }
    }

    fn eps(&self, x: Point, t: f64) -> Result<Point> {
        if self.g.w == 0.0 {
            return self.g.cond[self.c].eps(x, t);
        }
        guided_eps(self.g, x, t, self.c)
    }

    fn eps_d_gamma(&self, x: Point, t: f64) -> Result<(Point, Point)> {
        let w = self.g.w;
        let cond = &self.g.cond[self.c];
        if w == 0.0 {
            return cond.eps_d_gamma(x, t);
        }
        if !self.differentiable() {
            let (ec, dc) = cond.eps_d_gamma(x, t)?;
            let (eu, du) = self.g.uncond.eps_d_gamma(x, t)?;
            return Ok((combine(w, ec, eu), combine(w, dc, du)));
        }
        let s = self.schedule();
        let e = guided_eps(self.g, x, t, self.c)?;
        let dx = dx_dgamma(e, x, s.gamma_of(t));
        let y = self.guided_dual(
            [Dual::new(x[0], dx[0]), Dual::new(x[1], dx[1])],
            Dual::new(t, s.dt_dgamma_of(t)),
        )?;
        Ok((e, [y[0].tangent, y[1].tangent]))
    }

    fn eps_d_gamma2(&self, x: Point, t: f64) -> Result<(Point, Point, Point)> {
        if self.g.w == 0.0 {
            return self.g.cond[self.c].eps_d_gamma2(x, t);
        }
        if !self.differentiable() {
            return Err(Error::Capability("guided field has no second derivative".into()));
        }
        let s = self.schedule();
        let e = guided_eps(self.g, x, t, self.c)?;
        let dx = dx_dgamma(e, x, s.gamma_of(t));
        let x1 = [Dual::new(x[0], dx[0]), Dual::new(x[1], dx[1])];
        let t1 = Dual::new(t, s.dt_dgamma_of(t));
        let e1 = self.guided_dual(x1, t1)?;
        let dx1 = dx_dgamma(e1, x1, s.gamma_of(t1));
        let y = self.guided_dual2(
            [Dual::new(x1[0], dx1[0]), Dual::new(x1[1], dx1[1])],
            Dual::new(t1, s.dt_dgamma_of(t1)),
        )?;
        Ok((
            e,
            [y[0].tangent.value, y[1].tangent.value],
            [y[0].tangent.tangent, y[1].tangent.tangent],
        ))
    }
}

/// Forward difference `(ε_n − ε_{n−1}) / (γ_n − γ_{n−1})`.
pub fn finite_diff_d_gamma(prev: (f64, Point), cur: (f64, Point)) -> Result<Point> {
    let dg = cur.0 - prev.0;
    if dg == 0.0 || !dg.is_finite() {
        return Err(Error::Division(format!("γ step {dg} between history entries")));
    }
    Ok([(cur.1[0] - prev.1[0]) / dg, (cur.1[1] - prev.1[1]) / dg])
}

/// Counts every evaluation routed through it.
pub struct CountingField<F> {
    inner: F,
    calls: AtomicUsize,
}

impl<F> CountingField<F> {
    pub fn new(inner: F) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    fn tick(&self) {
        self.calls.fetch_add(1, Ordering::Relaxed);
    }
}

impl<F: EpsField> EpsField for CountingField<F> {
    fn schedule(&self) -> &VpSchedule {
        self.inner.schedule()
    }
    fn provider(&self) -> Provider {
        self.inner.provider()
    }
    fn eps(&self, x: Point, t: f64) -> Result<Point> {
        self.tick();
        self.inner.eps(x, t)
    }
    fn eps_d_gamma(&self, x: Point, t: f64) -> Result<(Point, Point)> {
        self.tick();
        self.inner.eps_d_gamma(x, t)
    }
    fn eps_d_gamma2(&self, x: Point, t: f64) -> Result<(Point, Point, Point)> {
        self.tick();
        self.inner.eps_d_gamma2(x, t)
    }
    fn eps_dual(&self, x: [D1; 2], t: D1) -> Result<[D1; 2]> {
        self.tick();
        self.inner.eps_dual(x, t)
    }
    fn eps_dual2(&self, x: [D2; 2], t: D2) -> Result<[D2; 2]> {
        self.tick();
        self.inner.eps_dual2(x, t)
    }
}

/// Central difference of ε along the exact ODE flow through `(x, t)`, using
/// a short RK4 step in each direction. Used as an independent check of the
/// total derivative.
pub fn flow_fd_d_gamma(field: &dyn EpsField, x: Point, t: f64, h: f64) -> Result<Point> {
    flow_fd(field, x, t, h, |p, tt| field.eps(p, tt))
}

/// Central difference of `quantity` along the ODE flow driven by `field`.
pub fn flow_fd<Q>(field: &dyn EpsField, x: Point, t: f64, h: f64, quantity: Q) -> Result<Point>
where
    Q: Fn(Point, f64) -> Result<Point>,
{
    let s = *field.schedule();
    let g0 = s.gamma(t)?;
    let rhs = |xx: Point, g: f64| -> Result<Point> {
        let tt = s.t_of_gamma(g)?;
        Ok(dx_dgamma(field.eps(xx, tt)?, xx, g))
    };
    let flow = |dg: f64| -> Result<Point> {
        let k1 = rhs(x, g0)?;
        let k2 = rhs([x[0] + 0.5 * dg * k1[0], x[1] + 0.5 * dg * k1[1]], g0 + 0.5 * dg)?;
        let k3 = rhs([x[0] + 0.5 * dg * k2[0], x[1] + 0.5 * dg * k2[1]], g0 + 0.5 * dg)?;
        let k4 = rhs([x[0] + dg * k3[0], x[1] + dg * k3[1]], g0 + dg)?;
        let xn = [
            x[0] + dg / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            x[1] + dg / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        ];
        quantity(xn, s.t_of_gamma(g0 + dg)?)
    };
    let (p, m) = (flow(h)?, flow(-h)?);
    Ok([(p[0] - m[0]) / (2.0 * h), (p[1] - m[1]) / (2.0 * h)])
}
