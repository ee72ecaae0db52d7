//! Reference integrators for error measurements.

use crate::error::{domain, Result};
use crate::fields::EpsField;
use crate::gmm::Point;
use crate::schedule::StridingKind;
use crate::solvers::steps::{from_bar, step_rk4, taylor, to_bar};

/// `n` DDIM substeps uniform in γ from `g0` to `g1`, in bar space.
pub fn ddim_substeps(field: &dyn EpsField, bar: Point, g0: f64, g1: f64, n: usize) -> Result<Point> {
    let s = *field.schedule();
    let h = (g1 - g0) / n as f64;
    let mut b = bar;
    for i in 0..n {
        let g = g0 + h * i as f64;
        let e = field.eps(from_bar(b, g), s.t_of_gamma(g)?)?;
        b = taylor(b, h, &[e]);
    }
    Ok(b)
}

/// Oracle states at every time in `targets` (all below `t_start`), from one
/// DDIM pass with `total_substeps` uniform-γ substeps. Each leg between
/// consecutive sorted targets gets a share proportional to its γ span, with
/// at least one substep. Results follow the order of `targets`.
pub fn oracle_multi(field: &dyn EpsField, x: Point, t_start: f64, targets: &[f64], total_substeps: usize) -> Result<Vec<Point>> {
    let s = *field.schedule();
    if targets.iter().any(|&t| !(t < t_start)) {
        return Err(domain("oracle targets must lie below the start time"));
    }
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.sort_by(|&a, &b| targets[b].total_cmp(&targets[a]));
    let g_start = s.gamma(t_start)?;
    let g_end = match order.last() {
        Some(&i) => s.gamma(targets[i])?,
        None => return Ok(Vec::new()),
    };
    let span = g_start - g_end;
    let mut out = vec![[0.0; 2]; targets.len()];
    let mut bar = to_bar(x, g_start);
    let mut g = g_start;
    for &i in &order {
        let gt = s.gamma(targets[i])?;
        if gt != g {
            let n = ((total_substeps as f64 * (g - gt) / span).round() as usize).max(1);
            bar = ddim_substeps(field, bar, g, gt, n)?;
            g = gt;
        }
        out[i] = from_bar(bar, g);
    }
    Ok(out)
}

/// DDIM from t = 1 to `t_cutoff` with `n_steps` quadratic-striding steps.
pub fn oracle_endpoint(field: &dyn EpsField, x_start: Point, n_steps: usize) -> Result<Point> {
    let s = *field.schedule();
    let times = s.striding(StridingKind::QUADRATIC, n_steps)?;
    let mut g = s.gamma(times[0])?;
    let mut bar = to_bar(x_start, g);
    for w in times.windows(2) {
        let gn = s.gamma(w[1])?;
        let e = field.eps(from_bar(bar, g), w[0])?;
        bar = taylor(bar, gn - g, &[e]);
        g = gn;
    }
    Ok(from_bar(bar, g))
}

/// Increment `x̄(t1) − x̄(t0)` from `n` RK4 substeps uniform in γ, summed
/// separately from the state so small increments keep their precision.
pub fn rk4_increment(field: &dyn EpsField, bar: Point, t0: f64, t1: f64, n: usize) -> Result<Point> {
    let s = *field.schedule();
    let (g0, g1) = (s.gamma(t0)?, s.gamma(t1)?);
    let h = (g1 - g0) / n as f64;
    let mut inc = [0.0; 2];
    let mut t = t0;
    for i in 0..n {
        let tn = if i + 1 == n { t1 } else { s.t_of_gamma(g0 + h * (i + 1) as f64)? };
        let cur = [bar[0] + inc[0], bar[1] + inc[1]];
        let (next, _) = step_rk4(field, cur, t, tn, None)?;
        inc[0] += next[0] - cur[0];
        inc[1] += next[1] - cur[1];
        t = tn;
    }
    Ok(inc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::AnalyticField;
    use crate::gmm::{build_toy, GaussianMixture, ToySpec};
    use crate::schedule::VpSchedule;

    #[test]
    fn point_mass_oracles_are_exact() {
        let s = VpSchedule::default();
        let f = AnalyticField::new(GaussianMixture::point_mass([0.0, 0.0]), s);
        let x = [0.6, -0.2];
        let targets = [0.3, 0.45, 0.1];
        let got = oracle_multi(&f, x, 0.5, &targets, 500).unwrap();
        let g0 = s.gamma(0.5).unwrap();
        for (t, y) in targets.iter().zip(&got) {
            let r = s.gamma(*t).unwrap() / g0;
            let want = to_bar([r * x[0], r * x[1]], g0);
            let want = from_bar(want, s.gamma(*t).unwrap());
            assert!((y[0] - want[0]).abs() < 1e-12 && (y[1] - want[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_target_matches_direct_substeps() {
        let s = VpSchedule::default();
        let f = AnalyticField::new(build_toy(&ToySpec::default()), s);
        let x = [0.2, 0.4];
        let got = oracle_multi(&f, x, 0.5, &[0.4, 0.45], 2000).unwrap();
        let (g0, g1, g2) = (s.gamma(0.5).unwrap(), s.gamma(0.45).unwrap(), s.gamma(0.4).unwrap());
        let n1 = (2000.0 * (g0 - g1) / (g0 - g2)).round() as usize;
        let mid = ddim_substeps(&f, to_bar(x, g0), g0, g1, n1).unwrap();
        assert_eq!(got[1], from_bar(mid, g1));
        assert!(oracle_multi(&f, x, 0.5, &[0.6], 10).is_err());
    }

    #[test]
    fn rk4_increment_converges_to_fine_ddim() {
        let s = VpSchedule::default();
        let f = AnalyticField::new(build_toy(&ToySpec::default()), s);
        let x = [0.3, -0.1];
        let (t0, t1) = (0.5, 0.45);
        let g0 = s.gamma(t0).unwrap();
        let bar = to_bar(x, g0);
        let rk = rk4_increment(&f, bar, t0, t1, 20).unwrap();
        let rk_fine = rk4_increment(&f, bar, t0, t1, 80).unwrap();
        let dd = ddim_substeps(&f, bar, g0, s.gamma(t1).unwrap(), 20_000).unwrap();
        for i in 0..2 {
            assert!((rk[i] - rk_fine[i]).abs() < 1e-10, "{rk:?} {rk_fine:?}");
            assert!((dd[i] - bar[i] - rk[i]).abs() < 1e-4);
        }
    }

    #[test]
    fn endpoint_oracle_point_mass() {
        let s = VpSchedule::default();
        let f = AnalyticField::new(GaussianMixture::point_mass([1.0, 1.0]), s);
        let x1 = [0.3, -0.5];
        let y = oracle_endpoint(&f, x1, 50).unwrap();
        let (ac, a1) = (s.alpha(s.t_cutoff).unwrap(), s.alpha(1.0).unwrap());
        let r = s.gamma(s.t_cutoff).unwrap() / s.gamma(1.0).unwrap();
        for i in 0..2 {
            let want = ac * (1.0 + (x1[i] / a1 - 1.0) * r);
            assert!((y[i] - want).abs() < 1e-10, "{y:?} {want}");
        }
    }
}
