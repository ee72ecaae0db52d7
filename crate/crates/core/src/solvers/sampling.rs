use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{domain, Error, Result};
use crate::fields::EpsField;
use crate::gmm::Point;
use crate::solvers::steps::{ab_update, em_update, from_bar, step_ddim, step_genie, step_rk4, step_ttm3, taylor, to_bar, History};
use crate::solvers::{Method, SolverRun, Trajectory};

fn normal_point<R: Rng + ?Sized>(rng: &mut R) -> Point {
    [rng.sample(StandardNormal), rng.sample(StandardNormal)]
}

fn check_times(field: &dyn EpsField, method: Method, times: &[f64]) -> Result<()> {
    if times.len() < 2 {
        return Err(domain("integration needs at least two times"));
    }
    let cutoff = field.schedule().t_cutoff;
    let lo = cutoff * (1.0 - 1e-9);
    if times.iter().any(|&t| !(t >= lo && t <= 1.0)) {
        return Err(domain(format!("integration times must lie in [{cutoff}, 1]")));
    }
    let down = times.windows(2).all(|w| w[1] < w[0]);
    let up = times.windows(2).all(|w| w[1] > w[0]);
    if !(down || up) {
        return Err(domain("integration times must be strictly monotone"));
    }
    if up && !method.is_deterministic() {
        return Err(Error::Capability(format!("{method} cannot integrate forward in time")));
    }
    Ok(())
}

/// Runs `method` over `times` from `x_start`, in either direction for
/// deterministic methods. With `afs`, the first step uses `ε ≈ x` (score
/// `−x` for Euler–Maruyama) and no field call. `rng` only drives the
/// Euler–Maruyama noise.
pub fn integrate<R: Rng + ?Sized>(
    field: &dyn EpsField,
    method: Method,
    times: &[f64],
    x_start: Point,
    afs: bool,
    rng: &mut R,
) -> Result<Trajectory> {
    check_times(field, method, times)?;
    let sched = *field.schedule();
    let gammas = times.iter().map(|&t| sched.gamma(t)).collect::<Result<Vec<_>>>()?;
    let mut bar = Vec::with_capacity(times.len());
    bar.push(to_bar(x_start, gammas[0]));
    let mut hist = History::default();
    let max_order = if method == Method::Ab4 { 4 } else { 2 };

    for n in 0..times.len() - 1 {
        let (t, tn) = (times[n], times[n + 1]);
        let (g, gn) = (gammas[n], gammas[n + 1]);
        let cur = bar[n];
        let x = from_bar(cur, g);
        let first_afs = afs && n == 0;
        let next = match method {
            Method::Ddim | Method::Genie | Method::Ttm3 if first_afs => taylor(cur, gn - g, &[x]),
            Method::Ddim => step_ddim(field, cur, t, tn)?,
            Method::Genie => step_genie(field, cur, t, tn)?,
            Method::Ttm3 => step_ttm3(field, cur, t, tn)?,
            Method::Ab4 if n == 0 => {
                let (next, k1) = step_rk4(field, cur, t, tn, first_afs.then_some(x))?;
                hist.push(g, k1);
                next
            }
            Method::Ab2 | Method::Ab4 => {
                let e = if first_afs { x } else { field.eps(x, t)? };
                hist.push(g, e);
                ab_update(&hist, hist.len().min(max_order), cur, gn - g)?
            }
            Method::EulerMaruyama => {
                let score = if first_afs {
                    [-x[0], -x[1]]
                } else {
                    let e = field.eps(x, t)?;
                    let s = sched.sigma(t)?;
                    [-e[0] / s, -e[1] / s]
                };
                let z = normal_point(rng);
                to_bar(em_update(field, x, score, t, tn, z), gn)
            }
        };
        bar.push(next);
    }
    Ok(Trajectory {
        times: times.to_vec(),
        gammas,
        bar,
        denoised: None,
    })
}

fn denoise_in_place(field: &dyn EpsField, traj: &mut Trajectory) -> Result<()> {
    let n = traj.len() - 1;
    let t = traj.times[n];
    let x = traj.x(n);
    let e = field.eps(x, t)?;
    let s = field.schedule();
    let (a, sig) = (s.alpha(t)?, s.sigma(t)?);
    traj.denoised = Some([(x[0] - sig * e[0]) / a, (x[1] - sig * e[1]) / a]);
    Ok(())
}

/// Samples from `x_start` at t = 1 following the run's striding and flags.
pub fn sample_from<R: Rng + ?Sized>(field: &dyn EpsField, run: &SolverRun, x_start: Point, rng: &mut R) -> Result<Trajectory> {
    let times = run.times(field.schedule().t_cutoff)?;
    let mut traj = integrate(field, run.method, &times, x_start, run.afs, rng)?;
    if run.denoise {
        denoise_in_place(field, &mut traj)?;
    }
    Ok(traj)
}

/// Draws `x₁ ~ N(0, I)` from `rng`, then samples.
pub fn sample<R: Rng + ?Sized>(field: &dyn EpsField, run: &SolverRun, rng: &mut R) -> Result<Trajectory> {
    run.validate()?;
    let x = normal_point(rng);
    sample_from(field, run, x, rng)
}

/// Final states of `n` independent samples. Trajectory `i` draws from
/// stream `i` of a generator seeded with `run.seed`, so the output does not
/// depend on thread scheduling.
pub fn sample_many(field: &dyn EpsField, run: &SolverRun, n: usize) -> Result<Vec<Point>> {
    run.validate()?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
            rng.set_stream(i as u64);
            sample(field, run, &mut rng).map(|t| t.final_x())
        })
        .collect()
}

fn check_encoder(run: &SolverRun) -> Result<()> {
    if !run.method.is_deterministic() {
        return Err(Error::Capability(format!("{} cannot encode", run.method)));
    }
    Ok(())
}

/// Integrates the ODE forward from a point at `t_cutoff` to t = 1 over the
/// reversed striding. The AFS and denoise flags are ignored; `nfe = 0`
/// returns `x_c` unchanged.
pub fn encode_from(field: &dyn EpsField, x_c: Point, run: &SolverRun) -> Result<Point> {
    check_encoder(run)?;
    if run.nfe == 0 {
        return Ok(x_c);
    }
    let plain = SolverRun {
        afs: false,
        denoise: false,
        ..*run
    };
    let mut times = plain.times(field.schedule().t_cutoff)?;
    times.reverse();
    let traj = integrate(field, run.method, &times, x_c, false, &mut ChaCha8Rng::seed_from_u64(0))?;
    Ok(traj.last_x())
}

/// Diffuses `x0` to `t_cutoff` with noise from `rng`, then encodes.
/// Returns `(latent, x_c)`.
pub fn encode<R: Rng + ?Sized>(field: &dyn EpsField, x0: Point, run: &SolverRun, rng: &mut R) -> Result<(Point, Point)> {
    check_encoder(run)?;
    let s = field.schedule();
    let t = s.t_cutoff;
    let (a, sig) = (s.alpha(t)?, s.sigma(t)?);
    let z = normal_point(rng);
    let x_c = [a * x0[0] + sig * z[0], a * x0[1] + sig * z[1]];
    Ok((encode_from(field, x_c, run)?, x_c))
}

/// Maps a latent at t = 1 back to `t_cutoff` with the run's settings.
pub fn decode(field: &dyn EpsField, z: Point, run: &SolverRun) -> Result<Point> {
    check_encoder(run)?;
    let traj = sample_from(field, run, z, &mut ChaCha8Rng::seed_from_u64(0))?;
    Ok(traj.final_x())
}

/// `√(1−b) z₀ + √b z₁`.
pub fn slerp(z0: Point, z1: Point, b: f64) -> Result<Point> {
    if !(0.0..=1.0).contains(&b) {
        return Err(domain(format!("slerp weight {b} outside [0, 1]")));
    }
    let (c0, c1) = ((1.0 - b).sqrt(), b.sqrt());
    Ok([c0 * z0[0] + c1 * z1[0], c0 * z0[1] + c1 * z1[1]])
}
