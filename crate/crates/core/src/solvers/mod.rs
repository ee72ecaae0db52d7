//! Samplers over the DDIM ODE and the reverse SDE.
//!
//! Deterministic methods keep their state in `x̄ = √(1+γ²) x` and step in γ;
//! field queries convert back to x. Euler–Maruyama works in x directly.

mod oracle;
mod sampling;
mod steps;

use std::fmt;
use std::str::FromStr;

use crate::error::{config, Error, Result};
use crate::gmm::Point;
use crate::schedule::StridingKind;

pub use oracle::{ddim_substeps, oracle_endpoint, oracle_multi, rk4_increment};
pub use sampling::{decode, encode, encode_from, integrate, sample, sample_from, sample_many, slerp};
pub use steps::{
    ab_coeffs, ab_update, from_bar, step_ab2, step_ab4, step_ddim, step_euler_maruyama, step_genie, step_rk4,
    step_ttm3, taylor, to_bar, History,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Ddim,
    Genie,
    Ttm3,
    Ab2,
    Ab4,
    EulerMaruyama,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Ddim,
        Method::Genie,
        Method::Ttm3,
        Method::Ab2,
        Method::Ab4,
        Method::EulerMaruyama,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ddim => "ddim",
            Method::Genie => "genie",
            Method::Ttm3 => "ttm3",
            Method::Ab2 => "ab2",
            Method::Ab4 => "ab4",
            Method::EulerMaruyama => "em",
        }
    }

    pub fn is_deterministic(self) -> bool {
        self != Method::EulerMaruyama
    }

    pub fn is_multistep(self) -> bool {
        matches!(self, Method::Ab2 | Method::Ab4)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ddim" => Ok(Method::Ddim),
            "genie" => Ok(Method::Genie),
            "ttm3" => Ok(Method::Ttm3),
            "ab2" => Ok(Method::Ab2),
            "ab4" => Ok(Method::Ab4),
            "em" | "euler_maruyama" | "euler-maruyama" => Ok(Method::EulerMaruyama),
            other => Err(config(format!("unknown method '{other}'"))),
        }
    }
}

/// Number of solver steps that spends exactly `nfe` field evaluations.
///
/// Every step costs one evaluation except: the AFS step is free, denoising
/// costs one extra, and AB4 seeds its history with an RK4 step costing
/// three more. AB4 needs at least one multistep update after the warm-up.
pub fn steps_for(method: Method, nfe: usize, afs: bool, denoise: bool) -> Result<usize> {
    let infeasible = || {
        Error::Infeasible(format!(
            "{method} cannot spend {nfe} evaluations (afs={afs}, denoise={denoise})"
        ))
    };
    let (extra, min_steps) = match method {
        Method::Ab4 => (3, 2),
        _ => (0, 1),
    };
    let steps = (nfe + afs as usize)
        .checked_sub(extra + denoise as usize)
        .filter(|&n| n >= min_steps)
        .ok_or_else(infeasible)?;
    Ok(steps)
}

/// One sampling run; the step count follows from the budget.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverRun {
    pub method: Method,
    pub nfe: usize,
    pub striding: StridingKind,
    pub afs: bool,
    pub denoise: bool,
    pub seed: u64,
}

impl SolverRun {
    /// Quadratic striding, no AFS, no denoising, seed 0.
    pub fn new(method: Method, nfe: usize) -> Self {
        Self {
            method,
            nfe,
            striding: StridingKind::QUADRATIC,
            afs: false,
            denoise: false,
            seed: 0,
        }
    }

    pub fn n_steps(&self) -> Result<usize> {
        steps_for(self.method, self.nfe, self.afs, self.denoise)
    }

    /// Multistep methods assume a constant step and are limited to linear striding.
    pub fn validate(&self) -> Result<()> {
        if self.method.is_multistep() && self.striding != StridingKind::Linear {
            return Err(config(format!("{} requires linear striding, got {}", self.method, self.striding)));
        }
        self.n_steps().map(|_| ())
    }

    pub fn times(&self, t_cutoff: f64) -> Result<Vec<f64>> {
        self.validate()?;
        crate::schedule::make_striding(self.striding, self.n_steps()?, t_cutoff)
    }
}

/// States of one rollout. `bar` is the source of truth; x is derived.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub gammas: Vec<f64>,
    pub bar: Vec<Point>,
    /// Output of the denoising step, if one was taken.
    pub denoised: Option<Point>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bar.is_empty()
    }

    pub fn x(&self, n: usize) -> Point {
        from_bar(self.bar[n], self.gammas[n])
    }

    pub fn states_x(&self) -> Vec<Point> {
        (0..self.len()).map(|n| self.x(n)).collect()
    }

    /// Last solver state in x-space, before denoising.
    pub fn last_x(&self) -> Point {
        self.x(self.len() - 1)
    }

    /// Denoised output if present, otherwise the last state.
    pub fn final_x(&self) -> Point {
        self.denoised.unwrap_or_else(|| self.last_x())
    }
}
