//! Local error studies on the analytic toy field: single-step error against
//! a fine oracle, the finite-difference derivative gap, and LTE slopes.

use rayon::prelude::*;

use crate::error::{config, domain, Result};
use crate::experiments::{ensure_nonempty, num, stream_rng, Config, Setup, Summary, Table};
use crate::fields::{finite_diff_d_gamma, EpsField};
use crate::gmm::{GaussianMixture, Point};
use crate::solvers::{from_bar, oracle_multi, rk4_increment, taylor, to_bar, Method};

const DT_SWEEP: [f64; 6] = [0.001, 0.002, 0.005, 0.01, 0.02, 0.05];
const T_STARTS: [f64; 3] = [0.1, 0.2, 0.5];
const TAYLOR: [Method; 3] = [Method::Ddim, Method::Genie, Method::Ttm3];

/// Increment `x̄' − x̄` of one Taylor step of step `h` in γ, derivatives
/// taken at `(x, t)`.
fn taylor_increment(field: &dyn EpsField, method: Method, x: Point, t: f64, h: f64) -> Result<Point> {
    let derivs: Vec<Point> = match method {
        Method::Ddim => vec![field.eps(x, t)?],
        Method::Genie => {
            let (e, d) = field.eps_d_gamma(x, t)?;
            vec![e, d]
        }
        Method::Ttm3 => {
            let (e, d, d2) = field.eps_d_gamma2(x, t)?;
            vec![e, d, d2]
        }
        other => return Err(config(format!("{other} is not a one-step Taylor method"))),
    };
    Ok(taylor([0.0; 2], h, &derivs))
}

/// One DDIM, GENIE or TTM3 step in x-space.
pub fn single_step(field: &dyn EpsField, method: Method, x: Point, t: f64, t_next: f64) -> Result<Point> {
    let s = field.schedule();
    let (g, gn) = (s.gamma(t)?, s.gamma(t_next)?);
    let inc = taylor_increment(field, method, x, t, gn - g)?;
    let bar = to_bar(x, g);
    Ok(from_bar([bar[0] + inc[0], bar[1] + inc[1]], gn))
}

fn check_taylor(methods: &[Method]) -> Result<()> {
    ensure_nonempty(methods, "methods")?;
    match methods.iter().find(|m| !TAYLOR.contains(m)) {
        Some(m) => Err(config(format!("{m} is not a one-step Taylor method"))),
        None => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SingleStepParams {
    pub t_starts: Vec<f64>,
    pub dts: Vec<f64>,
    pub n_traj: usize,
    pub oracle_substeps: usize,
    pub methods: Vec<Method>,
}

impl Default for SingleStepParams {
    fn default() -> Self {
        Self {
            t_starts: T_STARTS.to_vec(),
            dts: DT_SWEEP.to_vec(),
            n_traj: 1000,
            oracle_substeps: 10_000,
            methods: TAYLOR.to_vec(),
        }
    }
}

impl SingleStepParams {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let d = Self::default();
        Ok(Self {
            t_starts: cfg.list_or("t_starts", &d.t_starts)?,
            dts: cfg.list_or("dts", &d.dts)?,
            n_traj: cfg.get_or("n_traj", d.n_traj)?,
            oracle_substeps: cfg.get_or("oracle_substeps", d.oracle_substeps)?,
            methods: cfg.list_or("methods", &d.methods)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SingleStepRow {
    pub method: Method,
    pub t_start: f64,
    pub dt: f64,
    pub err: Summary,
}

/// L2 error of one step from `x ~ p_t` to `t − Δt` against an oracle of
/// fine DDIM substeps, per (method, t, Δt).
pub fn single_step_errors(
    field: &dyn EpsField,
    mix: &GaussianMixture,
    p: &SingleStepParams,
    seed: u64,
) -> Result<Vec<SingleStepRow>> {
    check_taylor(&p.methods)?;
    ensure_nonempty(&p.dts, "dts")?;
    if p.n_traj == 0 || p.oracle_substeps == 0 {
        return Err(config("n_traj and oracle_substeps must be positive"));
    }
    let sched = *field.schedule();
    let mut rows = Vec::new();
    for (j, &t0) in p.t_starts.iter().enumerate() {
        let targets: Vec<f64> = p.dts.iter().map(|dt| t0 - dt).collect();
        if targets.iter().any(|&t| t < sched.t_cutoff) || t0 > 1.0 {
            return Err(domain(format!("steps from t = {t0} leave [t_cutoff, 1]")));
        }
        // errs[traj][method][dt]
        let errs: Vec<Vec<Vec<f64>>> = (0..p.n_traj)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream_rng(seed, ((j as u64) << 32) | i as u64);
                let x = mix.sample_diffused(&sched, t0, 1, &mut rng)[0];
                let oracle = oracle_multi(field, x, t0, &targets, p.oracle_substeps)?;
                p.methods
                    .iter()
                    .map(|&m| {
                        targets
                            .iter()
                            .zip(&oracle)
                            .map(|(&tn, o)| {
                                let y = single_step(field, m, x, t0, tn)?;
                                Ok((y[0] - o[0]).hypot(y[1] - o[1]))
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        for (mi, &method) in p.methods.iter().enumerate() {
            for (di, &dt) in p.dts.iter().enumerate() {
                let v: Vec<f64> = errs.iter().map(|e| e[mi][di]).collect();
                rows.push(SingleStepRow {
                    method,
                    t_start: t0,
                    dt,
                    err: Summary::of(&v),
                });
            }
        }
    }
    Ok(rows)
}

pub(crate) fn single_step_table(setup: &Setup, p: &SingleStepParams) -> Result<Vec<Table>> {
    let rows = single_step_errors(&setup.analytic(), &setup.mixture, p, setup.seed)?;
    let mut t = Table::new(
        "single-step-error",
        &["method", "t_start", "dt", "mean_err", "std_err", "median_err", "q10_err", "q90_err"],
    );
    for r in rows {
        t.push(vec![
            r.method.to_string(),
            num(r.t_start),
            num(r.dt),
            num(r.err.mean),
            num(r.err.std),
            num(r.err.median),
            num(r.err.q10),
            num(r.err.q90),
        ]);
    }
    Ok(vec![t])
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdGapParams {
    pub t_starts: Vec<f64>,
    pub dts: Vec<f64>,
    pub n_samples: usize,
    pub rk4_substeps: usize,
}

impl Default for FdGapParams {
    fn default() -> Self {
        Self {
            t_starts: T_STARTS.to_vec(),
            dts: DT_SWEEP.to_vec(),
            n_samples: 1000,
            rk4_substeps: 20,
        }
    }
}

impl FdGapParams {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let d = Self::default();
        Ok(Self {
            t_starts: cfg.list_or("t_starts", &d.t_starts)?,
            dts: cfg.list_or("dts", &d.dts)?,
            n_samples: cfg.get_or("n_samples", d.n_samples)?,
            rk4_substeps: cfg.get_or("rk4_substeps", d.rk4_substeps)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdGapRow {
    pub t: f64,
    pub dt: f64,
    pub gap: Summary,
}

/// `‖d_γε − FD‖` where the backward difference uses the point the ODE
/// passed through at `t + Δt`.
pub fn fd_gaps(field: &dyn EpsField, mix: &GaussianMixture, p: &FdGapParams, seed: u64) -> Result<Vec<FdGapRow>> {
    ensure_nonempty(&p.dts, "dts")?;
    if p.n_samples == 0 || p.rk4_substeps == 0 {
        return Err(config("n_samples and rk4_substeps must be positive"));
    }
    let sched = *field.schedule();
    let mut rows = Vec::new();
    for (j, &t) in p.t_starts.iter().enumerate() {
        if p.dts.iter().any(|dt| t + dt > 1.0) || t < sched.t_cutoff {
            return Err(domain(format!("differences at t = {t} leave [t_cutoff, 1]")));
        }
        let g = sched.gamma(t)?;
        let gaps: Vec<Vec<f64>> = (0..p.n_samples)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream_rng(seed, ((j as u64) << 32) | i as u64);
                let x = mix.sample_diffused(&sched, t, 1, &mut rng)[0];
                let (e, d) = field.eps_d_gamma(x, t)?;
                let bar = to_bar(x, g);
                p.dts
                    .iter()
                    .map(|&dt| {
                        let tp = t + dt;
                        let gp = sched.gamma(tp)?;
                        let inc = rk4_increment(field, bar, t, tp, p.rk4_substeps)?;
                        let xp = from_bar([bar[0] + inc[0], bar[1] + inc[1]], gp);
                        let ep = field.eps(xp, tp)?;
                        let fd = finite_diff_d_gamma((gp, ep), (g, e))?;
                        Ok((d[0] - fd[0]).hypot(d[1] - fd[1]))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        for (di, &dt) in p.dts.iter().enumerate() {
            let v: Vec<f64> = gaps.iter().map(|r| r[di]).collect();
            rows.push(FdGapRow {
                t,
                dt,
                gap: Summary::of(&v),
            });
        }
    }
    Ok(rows)
}

pub(crate) fn fd_gap_table(setup: &Setup, p: &FdGapParams) -> Result<Vec<Table>> {
    let rows = fd_gaps(&setup.analytic(), &setup.mixture, p, setup.seed)?;
    let mut t = Table::new("fd-gap", &["t", "dt", "mean_gap", "std_gap", "median_gap", "q10_gap", "q90_gap"]);
    for r in rows {
        t.push(vec![
            num(r.t),
            num(r.dt),
            num(r.gap.mean),
            num(r.gap.std),
            num(r.gap.median),
            num(r.gap.q10),
            num(r.gap.q90),
        ]);
    }
    Ok(vec![t])
}

#[derive(Clone, Debug, PartialEq)]
pub struct LteParams {
    pub t: f64,
    pub dgamma_min: f64,
    pub dgamma_max: f64,
    pub n_points: usize,
    pub n_samples: usize,
    pub rk4_substeps: usize,
    pub methods: Vec<Method>,
}

impl Default for LteParams {
    fn default() -> Self {
        Self {
            t: 0.5,
            dgamma_min: 1e-3,
            dgamma_max: 1e-1,
            n_points: 9,
            n_samples: 64,
            rk4_substeps: 20,
            methods: TAYLOR.to_vec(),
        }
    }
}

impl LteParams {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let d = Self::default();
        Ok(Self {
            t: cfg.get_or("t", d.t)?,
            dgamma_min: cfg.get_or("dgamma_min", d.dgamma_min)?,
            dgamma_max: cfg.get_or("dgamma_max", d.dgamma_max)?,
            n_points: cfg.get_or("n_points", d.n_points)?,
            n_samples: cfg.get_or("n_samples", d.n_samples)?,
            rk4_substeps: cfg.get_or("rk4_substeps", d.rk4_substeps)?,
            methods: cfg.list_or("methods", &d.methods)?,
        })
    }

    fn dgammas(&self) -> Result<Vec<f64>> {
        if !(self.dgamma_min > 0.0 && self.dgamma_max > self.dgamma_min) || self.n_points < 2 {
            return Err(config("need 0 < dgamma_min < dgamma_max and n_points >= 2"));
        }
        let (a, b) = (self.dgamma_min.ln(), self.dgamma_max.ln());
        let n = (self.n_points - 1) as f64;
        Ok((0..self.n_points).map(|i| (a + (b - a) * i as f64 / n).exp()).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LtePoint {
    pub method: Method,
    pub dgamma: f64,
    pub mean_err: f64,
}

/// Mean bar-space error of one sampling step of size `Δγ` from `x ~ p_t`,
/// against RK4 with fine substeps. Increments are compared directly.
pub fn lte_points(field: &dyn EpsField, mix: &GaussianMixture, p: &LteParams, seed: u64) -> Result<Vec<LtePoint>> {
    check_taylor(&p.methods)?;
    if p.n_samples == 0 || p.rk4_substeps == 0 {
        return Err(config("n_samples and rk4_substeps must be positive"));
    }
    let sched = *field.schedule();
    let g = sched.gamma(p.t)?;
    let dgs = p.dgammas()?;
    let tns = dgs.iter().map(|dg| sched.t_of_gamma(g - dg)).collect::<Result<Vec<_>>>()?;
    if tns.iter().any(|&t| t < sched.t_cutoff) {
        return Err(domain("step leaves [t_cutoff, 1]"));
    }
    // errs[sample][method][point]
    let errs: Vec<Vec<Vec<f64>>> = (0..p.n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let x = mix.sample_diffused(&sched, p.t, 1, &mut rng)[0];
            let bar = to_bar(x, g);
            let oracle = tns
                .iter()
                .map(|&tn| rk4_increment(field, bar, p.t, tn, p.rk4_substeps))
                .collect::<Result<Vec<_>>>()?;
            p.methods
                .iter()
                .map(|&m| {
                    tns.iter()
                        .zip(&oracle)
                        .map(|(&tn, o)| {
                            let inc = taylor_increment(field, m, x, p.t, sched.gamma(tn)? - g)?;
                            Ok((inc[0] - o[0]).hypot(inc[1] - o[1]))
                        })
                        .collect()
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (mi, &method) in p.methods.iter().enumerate() {
        for (k, &dgamma) in dgs.iter().enumerate() {
            let mean_err = errs.iter().map(|e| e[mi][k]).sum::<f64>() / p.n_samples as f64;
            out.push(LtePoint {
                method,
                dgamma,
                mean_err,
            });
        }
    }
    Ok(out)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Slope per method, in order of first appearance.
pub fn lte_slopes(points: &[LtePoint]) -> Vec<(Method, f64)> {
    let mut methods: Vec<Method> = Vec::new();
    for p in points {
        if !methods.contains(&p.method) {
            methods.push(p.method);
        }
    }
    methods
        .into_iter()
        .map(|m| {
            let (xs, ys): (Vec<f64>, Vec<f64>) =
                points.iter().filter(|p| p.method == m).map(|p| (p.dgamma, p.mean_err)).unzip();
            (m, loglog_slope(&xs, &ys))
        })
        .collect()
}

pub(crate) fn lte_tables(setup: &Setup, p: &LteParams) -> Result<Vec<Table>> {
    let points = lte_points(&setup.analytic(), &setup.mixture, p, setup.seed)?;
    let mut t = Table::new("lte-points", &["method", "dgamma", "mean_err"]);
    for q in &points {
        t.push(vec![q.method.to_string(), num(q.dgamma), num(q.mean_err)]);
    }
    let mut s = Table::new("lte-slopes", &["method", "slope"]);
    for (m, slope) in lte_slopes(&points) {
        s.push(vec![m.to_string(), num(slope)]);
    }
    Ok(vec![t, s])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::Setup;
    use crate::gmm::GaussianMixture;
    use crate::fields::AnalyticField;
    use crate::schedule::VpSchedule;

    #[test]
    fn slope_of_power_law() {
        let xs = [1e-3, 1e-2, 1e-1];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powi(3)).collect();
        assert!((loglog_slope(&xs, &ys) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_step_matches_solver_step() {
        let setup = Setup::toy(0);
        let f = setup.analytic();
        let s = setup.schedule;
        let x = [0.2, -0.7];
        let y = single_step(&f, Method::Genie, x, 0.4, 0.3).unwrap();
        let bar = crate::solvers::step_genie(&f, to_bar(x, s.gamma(0.4).unwrap()), 0.4, 0.3).unwrap();
        let z = from_bar(bar, s.gamma(0.3).unwrap());
        assert!((y[0] - z[0]).abs() < 1e-14 && (y[1] - z[1]).abs() < 1e-14);
        assert!(single_step(&f, Method::Ab2, x, 0.4, 0.3).is_err());
    }

    #[test]
    fn point_mass_single_step_errors_vanish() {
        let s = VpSchedule::default();
        let mix = GaussianMixture::point_mass([0.5, 0.5]);
        let f = AnalyticField::new(mix.clone(), s);
        let p = SingleStepParams {
            n_traj: 8,
            oracle_substeps: 200,
            ..Default::default()
        };
        for r in single_step_errors(&f, &mix, &p, 1).unwrap() {
            assert!(r.err.mean < 1e-10, "{r:?}");
        }
    }

    #[test]
    fn small_single_step_run_orders_methods() {
        let setup = Setup::toy(0);
        let p = SingleStepParams {
            t_starts: vec![0.5],
            dts: vec![0.01, 0.05],
            n_traj: 32,
            oracle_substeps: 2000,
            ..Default::default()
        };
        let rows = single_step_errors(&setup.analytic(), &setup.mixture, &p, 3).unwrap();
        assert_eq!(rows.len(), 6);
        let get = |m, dt| rows.iter().find(|r| r.method == m && r.dt == dt).unwrap().err.mean;
        for dt in [0.01, 0.05] {
            assert!(get(Method::Genie, dt) < get(Method::Ddim, dt));
        }
        assert!(get(Method::Ddim, 0.01) < get(Method::Ddim, 0.05));
    }

    #[test]
    fn fd_gap_shrinks_with_step() {
        let setup = Setup::toy(0);
        let p = FdGapParams {
            t_starts: vec![0.5],
            dts: vec![0.001, 0.01],
            n_samples: 32,
            ..Default::default()
        };
        let rows = fd_gaps(&setup.analytic(), &setup.mixture, &p, 0).unwrap();
        assert!(rows[0].gap.mean < rows[1].gap.mean);
    }

    #[test]
    fn rejects_out_of_range_steps() {
        let setup = Setup::toy(0);
        let p = SingleStepParams {
            t_starts: vec![0.01],
            n_traj: 1,
            ..Default::default()
        };
        assert!(single_step_errors(&setup.analytic(), &setup.mixture, &p, 0).is_err());
        let q = LteParams {
            dgamma_min: 0.1,
            dgamma_max: 0.01,
            ..Default::default()
        };
        assert!(lte_points(&setup.analytic(), &setup.mixture, &q, 0).is_err());
    }
}
