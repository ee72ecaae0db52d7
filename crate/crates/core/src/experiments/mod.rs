//! Toy experiments driven by flat `key = value` configs and emitting CSV.
//!
//! Every table starts with `#` lines recording the experiment, the SHA-256
//! of the canonical config and the seed. Row order is fixed, so reruns with
//! the same config produce identical bytes.

mod config;
mod errors;
mod sampling;
mod training;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config as config_err, Error, Result};
use crate::fields::AnalyticField;
use crate::gmm::{build_toy, GaussianMixture, ToySpec};
use crate::net::{load_mlp, DistillHead, DistilledField};
use crate::schedule::VpSchedule;

pub use config::Config;
pub use errors::{
    fd_gaps, loglog_slope, lte_points, lte_slopes, single_step, single_step_errors, FdGapParams, FdGapRow, LteParams,
    LtePoint, SingleStepParams, SingleStepRow,
};
pub use sampling::{
    encode_decode_errors, guidance_sweep, sample_grid, EncodeDecodeParams, EncodeDecodeRow, FieldKind, GridCell,
    GridParams, GuidanceParams, GuidanceRow,
};
pub use training::{head_training, score_training, HeadTrainParams, ScoreTrainParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Experiment {
    SingleStepError,
    FdGap,
    SampleGrid,
    LteSlopes,
    EncodeDecode,
    GuidanceSweep,
    TrainScore,
    TrainHead,
}

impl Experiment {
    pub const ALL: [Experiment; 8] = [
        Experiment::SingleStepError,
        Experiment::FdGap,
        Experiment::SampleGrid,
        Experiment::LteSlopes,
        Experiment::EncodeDecode,
        Experiment::GuidanceSweep,
        Experiment::TrainScore,
        Experiment::TrainHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::SingleStepError => "single-step-error",
            Experiment::FdGap => "fd-gap",
            Experiment::SampleGrid => "sample-grid",
            Experiment::LteSlopes => "lte-slopes",
            Experiment::EncodeDecode => "encode-decode",
            Experiment::GuidanceSweep => "guidance-sweep",
            Experiment::TrainScore => "train-score",
            Experiment::TrainHead => "train-head",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s.trim())
            .ok_or_else(|| config_err(format!("unknown experiment '{s}'")))
    }
}

/// One CSV table.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }
}

/// Formats a measured value: plain decimals in a readable range,
/// scientific notation otherwise. Both round-trip exactly.
pub fn num(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-3..1e6).contains(&a) || !v.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

/// All tables produced by one run; the first is the primary output.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub experiment: Experiment,
    pub config_hash: String,
    pub seed: u64,
    pub tables: Vec<Table>,
}

impl Report {
    pub fn render(&self, table: &Table) -> String {
        let mut s = format!(
            "# experiment={}\n# config_hash={}\n# seed={}\n# table={}\n",
            self.experiment, self.config_hash, self.seed, table.name
        );
        s.push_str(&table.columns.join(","));
        s.push('\n');
        for r in &table.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }

    pub fn primary(&self) -> &Table {
        &self.tables[0]
    }
}

/// Schedule, toy mixture and seed shared by all experiments.
#[derive(Clone, Debug)]
pub struct Setup {
    pub schedule: VpSchedule,
    pub mixture: GaussianMixture,
    pub seed: u64,
}

impl Setup {
    pub fn toy(seed: u64) -> Self {
        Self {
            schedule: VpSchedule::default(),
            mixture: build_toy(&ToySpec::default()),
            seed,
        }
    }

    pub fn from_config(cfg: &Config) -> Result<Self> {
        let d = VpSchedule::default();
        let schedule = VpSchedule::new(
            cfg.get_or("beta0", d.beta0)?,
            cfg.get_or("beta1", d.beta1)?,
            cfg.get_or("t_cutoff", d.t_cutoff)?,
        )?;
        let mixture = match cfg.get::<String>("mixture")? {
            Some(path) => GaussianMixture::from_config_file(path)?,
            None => {
                let t = ToySpec::default();
                build_toy(&ToySpec {
                    s1: cfg.get_or("toy_s1", t.s1)?,
                    s2: cfg.get_or("toy_s2", t.s2)?,
                    sigma: cfg.get_or("toy_sigma", t.sigma)?,
                    ..t
                })
            }
        };
        Ok(Self {
            schedule,
            mixture,
            seed: cfg.get_or("seed", 0)?,
        })
    }

    pub fn analytic(&self) -> AnalyticField {
        AnalyticField::new(self.mixture.clone(), self.schedule)
    }
}

/// Generator for one purpose or trajectory; streams never overlap.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A learned ε-network with its distilled head, loaded from checkpoints.
pub fn load_distilled(score: impl AsRef<Path>, head: impl AsRef<Path>, schedule: VpSchedule) -> Result<DistilledField> {
    Ok(DistilledField {
        eps_net: load_mlp(score)?,
        head: DistillHead::new(load_mlp(head)?)?,
        schedule,
    })
}

/// Mean, spread and quantiles of a sample of errors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub q10: f64,
    pub q90: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                median: f64::NAN,
                q10: f64::NAN,
                q90: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (n - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
        };
        Self {
            mean,
            std: var.sqrt(),
            median: q(0.5),
            q10: q(0.1),
            q90: q(0.9),
        }
    }
}

fn ensure_nonempty<T>(v: &[T], what: &str) -> Result<()> {
    if v.is_empty() {
        return Err(config_err(format!("{what} must not be empty")));
    }
    Ok(())
}

/// Runs `experiment`; `ckpt` is the checkpoint written by the training
/// experiments.
pub fn run(experiment: Experiment, cfg: &Config, ckpt: Option<&Path>) -> Result<Report> {
    if let Some(e) = cfg.get::<String>("experiment")? {
        if e.parse::<Experiment>()? != experiment {
            return Err(config_err(format!("config is for '{e}', not '{experiment}'")));
        }
    }
    let setup = Setup::from_config(cfg)?;
    let tables = match experiment {
        Experiment::SingleStepError => errors::single_step_table(&setup, &SingleStepParams::from_config(cfg)?)?,
        Experiment::FdGap => errors::fd_gap_table(&setup, &FdGapParams::from_config(cfg)?)?,
        Experiment::LteSlopes => errors::lte_tables(&setup, &LteParams::from_config(cfg)?)?,
        Experiment::SampleGrid => sampling::grid_tables(&setup, &GridParams::from_config(cfg)?)?,
        Experiment::EncodeDecode => sampling::encode_decode_table(&setup, &EncodeDecodeParams::from_config(cfg)?)?,
        Experiment::GuidanceSweep => sampling::guidance_table(&setup, &GuidanceParams::from_config(cfg)?)?,
        Experiment::TrainScore => training::score_tables(&setup, &ScoreTrainParams::from_config(cfg)?, ckpt)?,
        Experiment::TrainHead => training::head_tables(&setup, &HeadTrainParams::from_config(cfg)?, ckpt)?,
    };
    cfg.check_all_used()?;
    Ok(Report {
        experiment,
        config_hash: cfg.hash(),
        seed: setup.seed,
        tables,
    })
}
