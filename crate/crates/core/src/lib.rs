pub mod error;
pub mod experiments;
pub mod fields;
pub mod fwdad;
pub mod gmm;
pub mod metrics;
pub mod net;
pub mod schedule;
pub mod solvers;

pub use error::{Error, Result};
pub use experiments::{Config, Experiment, Report};
pub use fields::{AnalyticField, EpsField, Provider};
pub use gmm::{build_toy, GaussianMixture, Point, ToySpec};
pub use schedule::{StridingKind, StridingSchedule, VpSchedule};
pub use solvers::{Method, SolverRun, Trajectory};
