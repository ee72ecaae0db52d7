//! Full-trajectory experiments: the sample grid, encode/decode round trips
//! and the guidance sweep.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{config, Error, Result};
use crate::experiments::{ensure_nonempty, load_distilled, num, stream_rng, Config, Setup, Summary, Table};
use crate::fields::{EpsField, GuidedField};
use crate::gmm::Point;
use crate::metrics::{class_fidelity, low_density_fraction, mode_histogram, EnergyReference};
use crate::schedule::StridingKind;
use crate::solvers::{decode, encode, sample_many, Method, SolverRun};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldKind {
    Analytic,
    /// Learned ε-network with a distilled derivative head.
    Learned,
}

impl fmt::Display for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FieldKind::Analytic => "analytic",
            FieldKind::Learned => "learned",
        })
    }
}

impl FromStr for FieldKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "analytic" => Ok(FieldKind::Analytic),
            "learned" => Ok(FieldKind::Learned),
            other => Err(config(format!("unknown field '{other}'"))),
        }
    }
}

/// Multistep methods run on linear striding whatever the grid uses.
fn run_for(method: Method, nfe: usize, striding: StridingKind, afs: bool, denoise: bool, seed: u64) -> SolverRun {
    SolverRun {
        method,
        nfe,
        striding: if method.is_multistep() {
            StridingKind::Linear
        } else {
            striding
        },
        afs,
        denoise,
        seed,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridParams {
    pub fields: Vec<FieldKind>,
    pub methods: Vec<Method>,
    pub nfes: Vec<usize>,
    pub n_samples: usize,
    pub n_data: usize,
    pub data_self: usize,
    pub striding: StridingKind,
    pub afs: bool,
    pub denoise: bool,
    pub low_density_rel: f64,
    pub write_samples: bool,
    pub score_ckpt: Option<String>,
    pub head_ckpt: Option<String>,
}

impl Default for GridParams {
    fn default() -> Self {
        Self {
            fields: vec![FieldKind::Analytic],
            methods: Method::ALL.to_vec(),
            nfes: vec![5, 10, 15, 20, 25],
            n_samples: 4096,
            n_data: 100_000,
            data_self: 10_000,
            striding: StridingKind::QUADRATIC,
            afs: false,
            denoise: false,
            low_density_rel: 0.01,
            write_samples: true,
            score_ckpt: None,
            head_ckpt: None,
        }
    }
}

impl GridParams {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let d = Self::default();
        Ok(Self {
            fields: cfg.list_or("fields", &d.fields)?,
            methods: cfg.list_or("methods", &d.methods)?,
            nfes: cfg.list_or("nfes", &d.nfes)?,
            n_samples: cfg.get_or("n_samples", d.n_samples)?,
            n_data: cfg.get_or("n_data", d.n_data)?,
            data_self: cfg.get_or("data_self", d.data_self)?,
            striding: cfg.get_or("striding", d.striding)?,
            afs: cfg.get_or("afs", d.afs)?,
            denoise: cfg.get_or("denoise", d.denoise)?,
            low_density_rel: cfg.get_or("low_density_rel", d.low_density_rel)?,
            write_samples: cfg.get_or("write_samples", d.write_samples)?,
            score_ckpt: cfg.get("score_ckpt")?,
            head_ckpt: cfg.get("head_ckpt")?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellStatus {
    Ok,
    /// The budget is below the method's minimum.
    Infeasible,
    /// The field cannot supply the derivatives the method needs.
    Unsupported,
}

impl fmt::Display for CellStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellStatus::Ok => "ok",
            CellStatus::Infeasible => "n/a",
            CellStatus::Unsupported => "unsupported",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub field: FieldKind,
    pub method: Method,
    pub nfe: usize,
    pub status: CellStatus,
    pub energy: f64,
    pub low_density: f64,
    pub modes: Vec<usize>,
    pub samples: Vec<Point>,
}

/// Samples every (field, method, NFE) cell from the same seed and scores
/// them against data drawn from the marginal at the final solver time.
/// `learned` is required when the grid includes [`FieldKind::Learned`].
pub fn sample_grid(setup: &Setup, p: &GridParams, learned: Option<&dyn EpsField>) -> Result<Vec<GridCell>> {
    ensure_nonempty(&p.fields, "fields")?;
    ensure_nonempty(&p.methods, "methods")?;
    let sched = setup.schedule;
    let t_final = if p.denoise { 0.0 } else { sched.t_cutoff };
    let reference = if p.n_samples > 0 {
        let data = setup
            .mixture
            .sample_diffused(&sched, t_final, p.n_data, &mut stream_rng(setup.seed, u64::MAX));
        Some(EnergyReference::new(data, p.data_self, setup.seed)?)
    } else {
        None
    };
    let scale = sched.alpha(t_final)?;
    let analytic = setup.analytic();
    let mut cells = Vec::new();
    for &kind in &p.fields {
        let field: &dyn EpsField = match kind {
            FieldKind::Analytic => &analytic,
            FieldKind::Learned => learned.ok_or_else(|| config("learned field requested without checkpoints"))?,
        };
        for &method in &p.methods {
            for &nfe in &p.nfes {
                let run = run_for(method, nfe, p.striding, p.afs, p.denoise, setup.seed);
                let mut cell = GridCell {
                    field: kind,
                    method,
                    nfe,
                    status: CellStatus::Ok,
                    energy: f64::NAN,
                    low_density: f64::NAN,
                    modes: Vec::new(),
                    samples: Vec::new(),
                };
                match sample_many(field, &run, p.n_samples) {
                    Ok(s) => cell.samples = s,
                    Err(Error::Infeasible(_)) => cell.status = CellStatus::Infeasible,
                    Err(Error::Capability(_)) => cell.status = CellStatus::Unsupported,
                    Err(e) => return Err(e),
                }
                if cell.status == CellStatus::Ok {
                    cell.modes = mode_histogram(&setup.mixture, scale, &cell.samples);
                    if let Some(r) = &reference {
                        cell.energy = r.distance(&cell.samples)?;
                        cell.low_density =
                            low_density_fraction(&setup.mixture, &sched, t_final, &cell.samples, p.low_density_rel)?;
                    }
                }
                cells.push(cell);
            }
        }
    }
    Ok(cells)
}

pub(crate) fn grid_tables(setup: &Setup, p: &GridParams) -> Result<Vec<Table>> {
    let learned = if p.fields.contains(&FieldKind::Learned) {
        match (&p.score_ckpt, &p.head_ckpt) {
            (Some(s), Some(h)) => Some(load_distilled(s, h, setup.schedule)?),
            _ => return Err(config("the learned field needs score_ckpt and head_ckpt")),
        }
    } else {
        None
    };
    let cells = sample_grid(setup, p, learned.as_ref().map(|f| f as &dyn EpsField))?;
    let mut summary = Table::new(
        "summary",
        &["field", "method", "nfe", "status", "energy_distance", "low_density_frac", "modes_hit"],
    );
    let mut modes = Table::new("modes", &["field", "method", "nfe", "component", "count"]);
    let mut samples = Table::new("samples", &["field", "method", "nfe", "index", "x", "y"]);
    for c in &cells {
        let key = [c.field.to_string(), c.method.to_string(), c.nfe.to_string()];
        let hit = c.modes.iter().filter(|&&n| n > 0).count();
        let ok = c.status == CellStatus::Ok && !c.samples.is_empty();
        let cell_num = |v: f64| if ok { num(v) } else { String::new() };
        summary.push(
            key.iter()
                .cloned()
                .chain([c.status.to_string(), cell_num(c.energy), cell_num(c.low_density), hit.to_string()])
                .collect(),
        );
        for (i, n) in c.modes.iter().enumerate() {
            modes.push(key.iter().cloned().chain([i.to_string(), n.to_string()]).collect());
        }
        if p.write_samples {
            for (i, x) in c.samples.iter().enumerate() {
                samples.push(key.iter().cloned().chain([i.to_string(), num(x[0]), num(x[1])]).collect());
            }
        }
    }
    let mut tables = vec![summary, modes];
    if p.write_samples {
        tables.push(samples);
    }
    Ok(tables)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodeDecodeParams {
    pub methods: Vec<Method>,
    pub nfes: Vec<usize>,
    pub n_points: usize,
    pub striding: StridingKind,
}

impl Default for EncodeDecodeParams {
    fn default() -> Self {
        Self {
            methods: vec![Method::Ddim, Method::Genie],
            nfes: vec![10, 25, 50, 100],
            n_points: 200,
            striding: StridingKind::QUADRATIC,
        }
    }
}

impl EncodeDecodeParams {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let d = Self::default();
        Ok(Self {
            methods: cfg.list_or("methods", &d.methods)?,
            nfes: cfg.list_or("nfes", &d.nfes)?,
            n_points: cfg.get_or("n_points", d.n_points)?,
            striding: cfg.get_or("striding", d.striding)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodeDecodeRow {
    pub method: Method,
    pub nfe: usize,
    pub err: Summary,
}

/// Round-trip error `‖decode(encode(x_c)) − x_c‖` where `x_c` is a data
/// point diffused to `t_cutoff`; both directions use the same striding and
/// budget, without AFS or denoising.
pub fn encode_decode_errors(field: &dyn EpsField, setup: &Setup, p: &EncodeDecodeParams) -> Result<Vec<EncodeDecodeRow>> {
    ensure_nonempty(&p.methods, "methods")?;
    let mut rows = Vec::new();
    for &method in &p.methods {
        for &nfe in &p.nfes {
            let run = run_for(method, nfe, p.striding, false, false, setup.seed);
            let errs: Vec<f64> = (0..p.n_points)
                .into_par_iter()
                .map(|i| {
                    let mut rng = stream_rng(setup.seed, i as u64);
                    let x0 = setup.mixture.sample_data(1, &mut rng)[0];
                    let (z, x_c) = encode(field, x0, &run, &mut rng)?;
                    let back = decode(field, z, &run)?;
                    Ok((back[0] - x_c[0]).hypot(back[1] - x_c[1]))
                })
                .collect::<Result<_>>()?;
            rows.push(EncodeDecodeRow {
                method,
                nfe,
                err: Summary::of(&errs),
            });
        }
    }
    Ok(rows)
}

pub(crate) fn encode_decode_table(setup: &Setup, p: &EncodeDecodeParams) -> Result<Vec<Table>> {
    let rows = encode_decode_errors(&setup.analytic(), setup, p)?;
    let mut t = Table::new("encode-decode", &["method", "nfe", "mean_err", "std_err", "median_err"]);
    for r in rows {
        t.push(vec![
            r.method.to_string(),
            r.nfe.to_string(),
            num(r.err.mean),
            num(r.err.std),
            num(r.err.median),
        ]);
    }
    Ok(vec![t])
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceParams {
    pub methods: Vec<Method>,
    pub ws: Vec<f64>,
    pub nfes: Vec<usize>,
    /// Empty means every class.
    pub classes: Vec<usize>,
    pub n_samples: usize,
    pub striding: StridingKind,
}

impl Default for GuidanceParams {
    fn default() -> Self {
        Self {
            methods: vec![Method::Ddim, Method::Genie],
            ws: (0..=8).map(|i| i as f64 * 0.25).collect(),
            nfes: vec![5, 10, 15],
            classes: Vec::new(),
            n_samples: 512,
            striding: StridingKind::QUADRATIC,
        }
    }
}

impl GuidanceParams {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let d = Self::default();
        Ok(Self {
            methods: cfg.list_or("methods", &d.methods)?,
            ws: cfg.list_or("ws", &d.ws)?,
            nfes: cfg.list_or("nfes", &d.nfes)?,
            classes: cfg.list_or("classes", &d.classes)?,
            n_samples: cfg.get_or("n_samples", d.n_samples)?,
            striding: cfg.get_or("striding", d.striding)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceRow {
    pub method: Method,
    pub nfe: usize,
    pub w: f64,
    /// Mean over the swept classes.
    pub fidelity: f64,
}

/// Class fidelity of guided samples on the analytic labelled mixture.
/// Class `c` uses seed `seed + c` for every `w`.
pub fn guidance_sweep(setup: &Setup, p: &GuidanceParams) -> Result<Vec<GuidanceRow>> {
    ensure_nonempty(&p.methods, "methods")?;
    let sched = setup.schedule;
    let classes: Vec<usize> = if p.classes.is_empty() {
        (0..setup.mixture.n_classes()).collect()
    } else {
        p.classes.clone()
    };
    ensure_nonempty(&classes, "classes")?;
    let scale = sched.alpha(sched.t_cutoff)?;
    let mut rows = Vec::new();
    for &method in &p.methods {
        for &nfe in &p.nfes {
            for &w in &p.ws {
                let gf = GuidedField::from_mixture(&setup.mixture, sched, w)?;
                let mut total = 0.0;
                for &c in &classes {
                    let field = gf.for_class(c)?;
                    let run = run_for(method, nfe, p.striding, false, false, setup.seed.wrapping_add(c as u64));
                    let xs = sample_many(&field, &run, p.n_samples)?;
                    total += class_fidelity(&setup.mixture, scale, &xs, c)?;
                }
                rows.push(GuidanceRow {
                    method,
                    nfe,
                    w,
                    fidelity: total / classes.len() as f64,
                });
            }
        }
    }
    Ok(rows)
}

pub(crate) fn guidance_table(setup: &Setup, p: &GuidanceParams) -> Result<Vec<Table>> {
    let rows = guidance_sweep(setup, p)?;
    let mut t = Table::new("guidance-sweep", &["method", "nfe", "w", "class_fidelity"]);
    for r in rows {
        t.push(vec![r.method.to_string(), r.nfe.to_string(), num(r.w), num(r.fidelity)]);
    }
    Ok(vec![t])
}
