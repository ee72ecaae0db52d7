//! Training runs for the ε-network and its distilled derivative head.

use std::path::Path;

use crate::error::{config, Result};
use crate::experiments::{num, stream_rng, Config, Setup, Table};
use crate::net::{
    distill_residual, load_mlp, save_mlp, score_relative_error, train_distill, train_dsm, Activation, DistillHead, Mlp,
    MlpSpec, TimeEmbed, TrainConfig, TrainOutput,
};

const INIT_STREAM: u64 = 1 << 40;
const EVAL_STREAM: u64 = 1 << 41;

fn train_config(cfg: &Config, seed: u64) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let c = TrainConfig {
        iters: cfg.get_or("iters", d.iters)?,
        batch: cfg.get_or("batch", d.batch)?,
        lr: cfg.get_or("lr", d.lr)?,
        seed,
        lr_schedule: cfg.get_or("lr_schedule", d.lr_schedule)?,
        clip: cfg.get_or("clip", d.clip)?,
    };
    c.validate()?;
    Ok(c)
}

fn net_spec(cfg: &Config, base: MlpSpec) -> Result<MlpSpec> {
    let hidden = cfg.list_or("hidden", &base.hidden)?;
    if hidden.contains(&0) {
        return Err(config("hidden widths must be positive"));
    }
    Ok(MlpSpec {
        hidden,
        activation: cfg.get_or::<Activation>("activation", base.activation)?,
        embed: cfg.get_or::<TimeEmbed>("embed", base.embed)?,
        ..base
    })
}

/// Mean loss over consecutive windows of `every` iterations.
fn loss_table(losses: &[f64], every: usize) -> Table {
    let mut t = Table::new("losses", &["iter", "loss"]);
    for (k, chunk) in losses.chunks(every.max(1)).enumerate() {
        let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
        t.push(vec![(k * every.max(1) + chunk.len()).to_string(), num(mean)]);
    }
    t
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTrainParams {
    pub train: TrainConfig,
    pub spec: MlpSpec,
    pub eval_ts: Vec<f64>,
    pub eval_n: usize,
    pub log_every: usize,
}

impl ScoreTrainParams {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            train: TrainConfig { seed, ..Default::default() },
            spec: MlpSpec::score(),
            eval_ts: vec![0.05, 0.1, 0.2, 0.5, 0.9],
            eval_n: 2000,
            log_every: 100,
        }
    }

    pub fn from_config(cfg: &Config) -> Result<Self> {
        let d = Self::with_seed(cfg.get_or("seed", 0)?);
        Ok(Self {
            train: train_config(cfg, d.train.seed)?,
            spec: net_spec(cfg, MlpSpec::score())?,
            eval_ts: cfg.list_or("eval_ts", &d.eval_ts)?,
            eval_n: cfg.get_or("eval_n", d.eval_n)?,
            log_every: cfg.get_or("log_every", d.log_every)?,
        })
    }
}

/// Denoising score matching on the toy mixture from a seeded init.
pub fn score_training(setup: &Setup, p: &ScoreTrainParams) -> Result<TrainOutput<Mlp>> {
    let init = Mlp::init(p.spec.clone(), &mut stream_rng(p.train.seed, INIT_STREAM))?;
    train_dsm(&setup.mixture, &setup.schedule, init, &p.train)
}

pub(crate) fn score_tables(setup: &Setup, p: &ScoreTrainParams, ckpt: Option<&Path>) -> Result<Vec<Table>> {
    let out = score_training(setup, p)?;
    if let Some(path) = ckpt {
        save_mlp(&out.model, path)?;
    }
    let mut eval = Table::new("eval", &["t", "rel_score_error"]);
    for &t in &p.eval_ts {
        let e = score_relative_error(&out.model, &setup.mixture, &setup.schedule, t, p.eval_n, setup.seed ^ EVAL_STREAM)?;
        eval.push(vec![num(t), num(e)]);
    }
    Ok(vec![loss_table(&out.losses, p.log_every), eval])
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadTrainParams {
    pub train: TrainConfig,
    pub spec: MlpSpec,
    pub score_ckpt: Option<String>,
    pub eval_n: usize,
    pub log_every: usize,
}

impl HeadTrainParams {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            train: TrainConfig { seed, ..Default::default() },
            spec: MlpSpec::head(),
            score_ckpt: None,
            eval_n: 4096,
            log_every: 100,
        }
    }

    pub fn from_config(cfg: &Config) -> Result<Self> {
        let d = Self::with_seed(cfg.get_or("seed", 0)?);
        Ok(Self {
            train: train_config(cfg, d.train.seed)?,
            spec: net_spec(cfg, MlpSpec::head())?,
            score_ckpt: cfg.get("score_ckpt")?,
            eval_n: cfg.get_or("eval_n", d.eval_n)?,
            log_every: cfg.get_or("log_every", d.log_every)?,
        })
    }
}

/// Distils `d_γ ε_θ` of a frozen ε-network into a head.
pub fn head_training(setup: &Setup, eps_net: &Mlp, p: &HeadTrainParams) -> Result<TrainOutput<DistillHead>> {
    let init = DistillHead::init(p.spec.clone(), &mut stream_rng(p.train.seed, INIT_STREAM))?;
    train_distill(eps_net, &setup.mixture, &setup.schedule, init, &p.train)
}

pub(crate) fn head_tables(setup: &Setup, p: &HeadTrainParams, ckpt: Option<&Path>) -> Result<Vec<Table>> {
    let score = p
        .score_ckpt
        .as_ref()
        .ok_or_else(|| config("train-head needs score_ckpt"))?;
    let eps_net = load_mlp(score)?;
    let out = head_training(setup, &eps_net, p)?;
    if let Some(path) = ckpt {
        save_mlp(&out.model.net, path)?;
    }
    let (fit, zero) = distill_residual(
        &eps_net,
        &out.model,
        &setup.mixture,
        &setup.schedule,
        p.eval_n,
        setup.seed ^ EVAL_STREAM,
    );
    let mut eval = Table::new("eval", &["weighted_residual", "zero_baseline", "ratio"]);
    eval.push(vec![num(fit), num(zero), num(fit / zero)]);
    Ok(vec![loss_table(&out.losses, p.log_every), eval])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_windows() {
        let t = loss_table(&[1.0, 3.0, 5.0, 7.0, 9.0], 2);
        assert_eq!(t.rows, vec![vec!["2", "2"], vec!["4", "6"], vec!["5", "9"]]);
    }

    #[test]
    fn tiny_training_runs_and_saves() {
        let dir = std::env::temp_dir().join(format!("ttmlab-train-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let setup = Setup::toy(0);
        let cfg = Config::parse("iters = 5\nbatch = 8\nhidden = 8,8\neval_n = 16").unwrap();
        let score = dir.join("score.ckpt");
        let tables = score_tables(&setup, &ScoreTrainParams::from_config(&cfg).unwrap(), Some(&score)).unwrap();
        assert_eq!(tables[0].rows.len(), 1);
        assert_eq!(load_mlp(&score).unwrap().sizes(), &[19, 8, 8, 2]);

        let mut hcfg = Config::parse("iters = 3\nbatch = 8\nhidden = 8\neval_n = 16").unwrap();
        hcfg.set("score_ckpt", score.display());
        let head = dir.join("head.ckpt");
        let tables = head_tables(&setup, &HeadTrainParams::from_config(&hcfg).unwrap(), Some(&head)).unwrap();
        assert_eq!(tables[1].rows[0].len(), 3);
        assert!(DistillHead::new(load_mlp(&head).unwrap()).is_ok());
        hcfg.check_all_used().unwrap();

        let missing = HeadTrainParams::with_seed(0);
        assert!(head_tables(&setup, &missing, None).is_err());
        std::fs::remove_dir_all(dir).unwrap();
    }
}
