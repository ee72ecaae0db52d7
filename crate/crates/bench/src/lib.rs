//! Shared fixtures for the solver benchmarks.

use ttmlab::experiments::Setup;
use ttmlab::net::{DistillHead, DistilledField, Mlp, MlpSpec};
use ttmlab::{AnalyticField, Point};

pub fn toy_field() -> AnalyticField {
    Setup::toy(0).analytic()
}

/// Untrained score network and head; timing does not depend on the weights.
pub fn distilled_field() -> DistilledField {
    let setup = Setup::toy(0);
    let eps_net = Mlp::init(MlpSpec::score(), &mut ttmlab::experiments::stream_rng(0, 0)).unwrap();
    let head = DistillHead::init(MlpSpec::head(), &mut ttmlab::experiments::stream_rng(0, 1)).unwrap();
    DistilledField {
        eps_net,
        head,
        schedule: setup.schedule,
    }
}

pub fn probe_points(n: usize) -> Vec<Point> {
    (0..n)
        .map(|i| {
            let a = i as f64 * 0.37;
            [a.cos() * (1.0 + 0.1 * i as f64), a.sin()]
        })
        .collect()
}
