//! Preset sweeps for the double-well and logistic experiments.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::{eval_state_average, path_moments, vanishing_discount_sweep, CostEstimate, Criterion, SweepSetup};
use crate::policy::{ConstantControl, ControlLaw, Policy, QuantizedPolicy};
use crate::quantize::{ActionGrid, StateQuantizer};
use crate::qlearn::{ResetRule, ResetTarget};
use crate::sde::{DoubleWellParams, LogisticParams, ModelSpec, Scheme, SimConfig};

use super::config::{ActionSection, EvaluationSection, ExperimentConfig, QuantizerSection};
use super::output::{csv_text, emit, num, results_csv, FileRecord, ResultRow, RunManifest, StageRecord, TrendCheck};
use super::run_detailed;

/// `(h, n_x, n_u)`: state bins and action points per control interval.
pub const TABLE1: [(f64, usize, usize); 5] = [(0.41, 2, 5), (0.33, 4, 7), (0.25, 6, 9), (0.18, 9, 12), (0.10, 12, 15)];

/// Discount factors `e^{−αh}` of the vanishing-discount sweeps.
pub const SWEEP_FACTORS: [f64; 6] = [0.5, 0.6, 0.7, 0.8, 0.9, 0.95];

/// Grid sizes for `h`, if `h` is a table entry.
pub fn table1_grid(h: f64) -> Option<(usize, usize)> {
    TABLE1
        .iter()
        .find(|(th, _, _)| (th - h).abs() <= 1e-9)
        .map(|&(_, n_x, n_u)| (n_x, n_u))
}

const DW_SIDE: f64 = 2.8;
const DW_DT: f64 = 0.01;
const DW_BETA: f64 = 0.95;
const LOGISTIC_DT: f64 = 0.001;
const LOGISTIC_ALPHA: f64 = 0.95;
const LOGISTIC_X0: f64 = 1.0;
/// Exploration restarts for the double well, whose barrier is rarely crossed.
const DW_RESET_EVERY: u64 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FigureId {
    Fig1,
    Fig2,
    Fig3,
    Fig4,
    Fig5,
    Table1Sweep,
}

impl FigureId {
    pub const ALL: [FigureId; 6] = [
        FigureId::Fig1,
        FigureId::Fig2,
        FigureId::Fig3,
        FigureId::Fig4,
        FigureId::Fig5,
        FigureId::Table1Sweep,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            FigureId::Fig1 => "fig1",
            FigureId::Fig2 => "fig2",
            FigureId::Fig3 => "fig3",
            FigureId::Fig4 => "fig4",
            FigureId::Fig5 => "fig5",
            FigureId::Table1Sweep => "table1_sweep",
        }
    }
}

impl fmt::Display for FigureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for FigureId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FigureId::ALL
            .iter()
            .copied()
            .find(|f| f.label() == s)
            .ok_or_else(|| Error::NotFound {
                kind: "figure",
                name: s.to_string(),
            })
    }
}

/// Run sizes. `Smoke` exercises the full pipeline in seconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    #[default]
    Full,
    Smoke,
}

impl Budget {
    pub fn double_well_steps(self) -> u64 {
        match self {
            Budget::Full => 5_000_000,
            Budget::Smoke => 20_000,
        }
    }

    pub fn logistic_steps(self) -> u64 {
        match self {
            Budget::Full => 1_000_000,
            Budget::Smoke => 5_000,
        }
    }

    pub fn replicas(self) -> usize {
        match self {
            Budget::Full => 1000,
            Budget::Smoke => 16,
        }
    }

    /// Horizon of average-cost evaluations.
    pub fn average_horizon(self) -> f64 {
        match self {
            Budget::Full => 100.0,
            Budget::Smoke => 4.0,
        }
    }

    /// Starting horizon of discounted evaluations (auto-extended).
    pub fn discounted_horizon(self) -> f64 {
        match self {
            Budget::Full => 10.0,
            Budget::Smoke => 2.0,
        }
    }

    pub fn path_horizon(self) -> f64 {
        match self {
            Budget::Full => 10.0,
            Budget::Smoke => 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReproduceOptions {
    /// Output root; results go to `root/<figure_id>`.
    pub root: PathBuf,
    pub seed: u64,
    pub budget: Budget,
}

impl ReproduceOptions {
    pub const DEFAULT_SEED: u64 = 1;

    pub fn new(root: impl Into<PathBuf>, budget: Budget) -> Self {
        Self {
            root: root.into(),
            seed: Self::DEFAULT_SEED,
            budget,
        }
    }
}

fn covering(h: f64, horizon: f64) -> f64 {
    (horizon / h).ceil() * h
}

/// Double well learned with `β_h = 0.95` and evaluated under the average
/// criterion.
pub fn double_well_config(h: f64, seed: u64, budget: Budget) -> Result<ExperimentConfig> {
    let (n_x, n_u) = table1_grid(h).ok_or_else(|| Error::invalid(format!("h={h} is not a grid-table entry")))?;
    Ok(ExperimentConfig {
        experiment_id: format!("double_well-h{h}"),
        criterion: Criterion::Discounted,
        model: ModelSpec::DoubleWell(DoubleWellParams::default()),
        sim: SimConfig::new(h, DW_DT, covering(h, budget.average_horizon()), seed),
        quantizer: QuantizerSection {
            side: DW_SIDE,
            bins_per_axis: Some(n_x),
            center: None,
            overflow_rep: None,
        },
        actions: ActionSection { n_u: Some(n_u) },
        learning: crate::qlearn::LearnConfig {
            steps: budget.double_well_steps(),
            beta_h: DW_BETA,
            reset: ResetRule {
                every: Some(DW_RESET_EVERY),
                target: ResetTarget::UniformInCube,
            },
            ..Default::default()
        },
        evaluation: EvaluationSection {
            criterion: Some(Criterion::Average),
            n_replicas: budget.replicas(),
            ..Default::default()
        },
        output_dir: None,
    })
}

/// Logistic model on `[0, 2]`, learned at continuous rate `α = 0.95` and
/// evaluated under the discounted criterion from `x0 = 1`.
pub fn logistic_config(h: f64, seed: u64, budget: Budget) -> Result<ExperimentConfig> {
    let (n_x, n_u) = table1_grid(h).ok_or_else(|| Error::invalid(format!("h={h} is not a grid-table entry")))?;
    Ok(ExperimentConfig {
        experiment_id: format!("logistic-h{h}"),
        criterion: Criterion::Discounted,
        model: ModelSpec::Logistic(LogisticParams::default()),
        sim: SimConfig::new(h, LOGISTIC_DT, covering(h, budget.discounted_horizon()), seed).with_scheme(Scheme::Milstein),
        quantizer: QuantizerSection {
            side: 2.0,
            bins_per_axis: Some(n_x),
            center: Some(vec![1.0]),
            overflow_rep: None,
        },
        actions: ActionSection { n_u: Some(n_u) },
        learning: crate::qlearn::LearnConfig {
            steps: budget.logistic_steps(),
            beta_h: (-LOGISTIC_ALPHA * h).exp(),
            x0: Some(vec![LOGISTIC_X0]),
            ..Default::default()
        },
        evaluation: EvaluationSection {
            criterion: Some(Criterion::Discounted),
            n_replicas: budget.replicas(),
            alpha_rate: Some(LOGISTIC_ALPHA),
            x0: Some(vec![LOGISTIC_X0]),
            ..Default::default()
        },
        output_dir: None,
    })
}

/// Accumulates sub-run artifacts into one manifest.
struct Collector {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Collector {
    fn new(id: FigureId, opts: &ReproduceOptions, configs: &[ExperimentConfig]) -> Result<Self> {
        let dir = opts.root.join(id.label());
        std::fs::create_dir_all(&dir)?;
        let config = serde_json::json!({
            "figure": id.label(),
            "seed": opts.seed,
            "budget": opts.budget,
            "runs": configs,
        });
        let mut manifest = RunManifest::new(id.label(), config);
        manifest.seeds.insert("master".into(), opts.seed);
        Ok(Self { dir, manifest })
    }

    fn absorb(&mut self, prefix: &str, sub: &RunManifest) {
        for s in &sub.stages {
            self.manifest.stages.push(StageRecord {
                name: format!("{prefix}/{}", s.name),
                ..s.clone()
            });
        }
        for f in &sub.files {
            self.manifest.files.push(FileRecord {
                path: format!("{prefix}/{}", f.path),
                ..f.clone()
            });
        }
        self.manifest.files.push(FileRecord {
            path: format!("{prefix}/manifest.json"),
            bytes: 0,
            sha256: String::new(),
        });
        for (k, v) in &sub.seeds {
            self.manifest.seeds.insert(format!("{prefix}.{k}"), *v);
        }
    }

    fn emit(&mut self, rel: &str, text: &str) -> Result<()> {
        emit(&self.dir, rel, text.as_bytes(), &mut self.manifest.files).map(|_| ())
    }

    fn stage(&mut self, name: &str, seconds: f64, err: Option<String>) {
        self.manifest.stages.push(StageRecord {
            name: name.to_string(),
            ok: err.is_none(),
            message: err,
            seconds,
        });
    }

    fn trend(&mut self, name: &str, passed: bool, detail: String) {
        self.manifest.trends.push(TrendCheck {
            name: name.to_string(),
            passed,
            detail,
        });
    }

    fn finish(mut self, started: Instant) -> Result<RunManifest> {
        // sub-run manifests carry wall-clock times, so they are listed without digests
        self.manifest.files.retain(|f| !f.sha256.is_empty());
        self.manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
        self.manifest.write(&self.dir)?;
        Ok(self.manifest)
    }
}

fn describe(e: &CostEstimate) -> String {
    let (lo, hi) = e.ci95();
    format!("{:.6} [{lo:.6}, {hi:.6}]", e.mean)
}

/// Runs every config under `dir/<experiment_id>` and returns the rows in
/// config order.
fn run_all(col: &mut Collector, configs: &[ExperimentConfig]) -> Result<Vec<Option<super::RunOutcome>>> {
    let dir = col.dir.clone();
    let outs: Vec<Result<super::RunOutcome>> = configs.par_iter().map(|c| run_detailed(c, &dir)).collect();
    let mut rows = Vec::with_capacity(outs.len());
    for (cfg, out) in configs.iter().zip(outs) {
        let out = out?;
        col.absorb(&cfg.experiment_id, &out.manifest);
        rows.push(Some(out));
    }
    Ok(rows)
}

fn h_sweep(
    id: FigureId,
    opts: &ReproduceOptions,
    make: fn(f64, u64, Budget) -> Result<ExperimentConfig>,
    note: &str,
) -> Result<(Collector, Vec<super::RunOutcome>)> {
    let configs: Vec<ExperimentConfig> = TABLE1
        .iter()
        .map(|&(h, _, _)| make(h, opts.seed, opts.budget))
        .collect::<Result<_>>()?;
    let mut col = Collector::new(id, opts, &configs)?;
    col.manifest.notes.push(note.to_string());
    let outs: Vec<super::RunOutcome> = run_all(&mut col, &configs)?.into_iter().flatten().collect();
    let rows: Vec<ResultRow> = outs.iter().filter_map(|o| o.result.clone()).collect();
    col.emit(&format!("{}.csv", id.label()), &results_csv(&rows))?;
    let coarse = outs.first().and_then(|o| o.result.as_ref());
    let fine = outs.last().and_then(|o| o.result.as_ref());
    match (fine, coarse) {
        (Some(f), Some(c)) => {
            let (f, c) = (f.estimate(), c.estimate());
            col.trend(
                "finest_below_coarsest",
                f.mean <= c.mean && f.ci_below(&c),
                format!("h=0.1: {} vs h=0.41: {}", describe(&f), describe(&c)),
            );
        }
        _ => col.trend("finest_below_coarsest", false, "missing evaluation".into()),
    }
    Ok((col, outs))
}

const DW_NOTE: &str = "double-well experiment: state box [-1.4, 1.4], action box [-0.5, 0.5], \
     h in {0.41, 0.33, 0.25, 0.18, 0.1} with the (h, n_x, n_u) grid table, discount factor 0.95, \
     sigma 0.25, cost z^2 + 0.1 u^2";
const LOGISTIC_NOTE: &str = "logistic experiment: r = 1, K = 1, sigma = 0.4, cost 10 (x - 0.5)^2 + u^2, \
     state box [0, 2], action box [-5, 5], discount rate 0.95, Milstein with dt = 0.001, \
     reflection at zero, (h, n_x, n_u) grid table";
const SWEEP_NOTE: &str = "vanishing-discount sweep: factors e^(-alpha h) in {0.5, 0.6, 0.7, 0.8, 0.9, 0.95} \
     at h = 0.1 with the h = 0.1 grid (12 state bins, 15 actions), average-cost evaluation";

fn sweep(id: FigureId, opts: &ReproduceOptions, base: ExperimentConfig, note: &str) -> Result<Collector> {
    let mut col = Collector::new(id, opts, std::slice::from_ref(&base))?;
    col.manifest.notes.push(note.to_string());
    col.manifest.notes.push(SWEEP_NOTE.to_string());
    let r = base.resolve()?;
    let mut eval_sim = r.eval_sim;
    eval_sim.horizon = covering(r.sim.h, opts.budget.average_horizon());
    col.manifest.seeds.insert("learning".into(), r.learn.seed);
    col.manifest.seeds.insert("evaluation".into(), eval_sim.seed);
    let setup = SweepSetup {
        model: &r.model,
        learn_sim: &r.sim,
        eval_sim: &eval_sim,
        quantizer: &r.quantizer,
        grid: &r.grid,
        learn: &r.learn,
        eval: &r.eval,
        x0: &r.x0,
    };
    let t = Instant::now();
    let table = vanishing_discount_sweep(&setup, &SWEEP_FACTORS)?;
    let mut rows = Vec::new();
    for row in &table {
        match &row.estimate {
            Ok(est) => rows.push(ResultRow::from_estimate(
                &format!("{}-factor{}", id.label(), row.factor),
                r.sim.h,
                r.quantizer.interior_bins(),
                r.grid.per_axis(),
                Some(row.factor),
                est,
                opts.seed,
            )),
            Err(e) => col.stage(&format!("factor {}", row.factor), 0.0, Some(e.clone())),
        }
    }
    col.stage("sweep", t.elapsed().as_secs_f64(), None);
    col.emit(&format!("{}.csv", id.label()), &results_csv(&rows))?;
    let at = |f: f64| rows.iter().find(|r| r.factor == Some(f)).map(ResultRow::estimate);
    match (at(0.95), at(0.5)) {
        (Some(hi), Some(lo)) => col.trend(
            "factor_0.95_below_0.5",
            hi.mean <= lo.mean && hi.ci_below(&lo),
            format!("0.95: {} vs 0.5: {}", describe(&hi), describe(&lo)),
        ),
        _ => col.trend("factor_0.95_below_0.5", false, "missing evaluation".into()),
    }
    Ok(col)
}

struct Curve {
    name: String,
    h: f64,
    n_x: usize,
    n_u: usize,
    /// `None` is the zero control.
    law: Option<(StateQuantizer, ActionGrid, Policy)>,
}

fn fig4(opts: &ReproduceOptions, started: Instant) -> Result<RunManifest> {
    let (mut col, outs) = h_sweep(FigureId::Fig4, opts, logistic_config, LOGISTIC_NOTE)?;
    // the discounted-cost trend belongs to fig3
    col.manifest.trends.clear();
    let base = logistic_config(0.1, opts.seed, opts.budget)?.resolve()?;
    let t = Instant::now();
    let mut path_rows = Vec::new();
    let mut offset_rows = Vec::new();
    let mut offsets = Vec::new();
    let avg_opts = base.eval;
    let zero = ConstantControl::zero(1);
    let mut curves: Vec<Curve> = Vec::new();
    for (out, &(h, n_x, n_u)) in outs.iter().zip(TABLE1.iter()) {
        if let Some(learned) = &out.learned {
            let r = logistic_config(h, opts.seed, opts.budget)?.resolve()?;
            curves.push(Curve {
                name: format!("learned-h{h}"),
                h,
                n_x,
                n_u,
                law: Some((r.quantizer, r.grid, learned.policy.clone())),
            });
        }
    }
    curves.push(Curve {
        name: "zero".into(),
        h: 0.1,
        n_x: 0,
        n_u: 0,
        law: None,
    });
    for Curve { name, h, n_x, n_u, law } in &curves {
        let quantized;
        let law: &dyn ControlLaw = match law {
            Some((q, g, p)) => {
                quantized = QuantizedPolicy::new(q, g, p);
                &quantized
            }
            None => &zero,
        };
        let sim = SimConfig::new(*h, LOGISTIC_DT, covering(*h, opts.budget.path_horizon()), base.eval_sim.seed)
            .with_scheme(Scheme::Milstein);
        let pm = path_moments(&base.model, &sim, law, &base.x0, opts.budget.replicas(), &|x| x[0])?;
        for k in 0..pm.times.len() {
            path_rows.push(vec![name.clone(), num(*h), num(pm.times[k]), num(pm.mean[k]), num(pm.std_error[k])]);
        }
        let long = SimConfig {
            horizon: covering(*h, opts.budget.average_horizon()),
            ..sim
        };
        let off = eval_state_average(&base.model, &long, law, &base.x0, &avg_opts, &|x| (x[0] - 0.5).abs())?;
        let state = eval_state_average(&base.model, &long, law, &base.x0, &avg_opts, &|x| x[0])?;
        offset_rows.push(vec![
            name.clone(),
            num(*h),
            n_x.to_string(),
            n_u.to_string(),
            num(off.mean),
            num(off.std_error),
            num(state.mean),
            num(state.std_error),
            off.n_replicas.to_string(),
            num(off.horizon),
            opts.seed.to_string(),
        ]);
        offsets.push((name.clone(), off, state));
    }
    col.stage("paths", t.elapsed().as_secs_f64(), None);
    col.emit("fig4_paths.csv", &csv_text("paths", &["curve", "h", "t", "mean_state", "std_error"], &path_rows))?;
    col.emit(
        "fig4_offsets.csv",
        &csv_text(
            "offsets",
            &[
                "curve",
                "h",
                "M",
                "n_u",
                "mean_abs_offset",
                "offset_std_error",
                "mean_state",
                "state_std_error",
                "n_replicas",
                "horizon",
                "seed",
            ],
            &offset_rows,
        ),
    )?;
    let finest = offsets.iter().find(|(n, _, _)| n == "learned-h0.1");
    let zero = offsets.iter().find(|(n, _, _)| n == "zero");
    match (finest, zero) {
        (Some(f), Some(z)) => {
            col.trend(
                "finest_offset_below_zero_control",
                f.1.mean < z.1.mean,
                format!("learned h=0.1: {} vs zero control: {}", describe(&f.1), describe(&z.1)),
            );
            col.trend(
                "zero_control_mean_state_in_[0.8,1.1]",
                (0.8..=1.1).contains(&z.2.mean),
                describe(&z.2),
            );
        }
        _ => col.trend("finest_offset_below_zero_control", false, "missing curve".into()),
    }
    col.finish(started)
}

fn table1(opts: &ReproduceOptions, started: Instant) -> Result<RunManifest> {
    let mut col = Collector::new(FigureId::Table1Sweep, opts, &[])?;
    col.manifest.notes.push("grid table: (h, n_x, n_u) = (0.41, 2, 5), (0.33, 4, 7), (0.25, 6, 9), (0.18, 9, 12), (0.10, 12, 15)".into());
    let rows: Vec<Vec<String>> = TABLE1
        .iter()
        .map(|&(h, n_x, n_u)| {
            vec![
                num(h),
                n_x.to_string(),
                n_u.to_string(),
                num(2.0 / n_x as f64),
                num(DW_SIDE / n_x as f64),
                num(10.0 / (n_u - 1) as f64),
                num(1.0 / (n_u - 1) as f64),
            ]
        })
        .collect();
    col.emit(
        "table1.csv",
        &csv_text(
            "grid_table",
            &["h", "n_x", "n_u", "logistic_cell", "double_well_cell", "logistic_action_step", "double_well_action_step"],
            &rows,
        ),
    )?;
    col.trend("five_rows", rows.len() == 5, format!("{} rows", rows.len()));
    col.finish(started)
}

/// Runs a preset sweep and writes its CSVs and manifest to
/// `opts.root/<figure_id>`.
pub fn reproduce(id: FigureId, opts: &ReproduceOptions) -> Result<RunManifest> {
    let started = Instant::now();
    match id {
        FigureId::Fig1 => h_sweep(id, opts, double_well_config, DW_NOTE)?.0.finish(started),
        FigureId::Fig3 => h_sweep(id, opts, logistic_config, LOGISTIC_NOTE)?.0.finish(started),
        FigureId::Fig2 => {
            let mut base = double_well_config(0.1, opts.seed, opts.budget)?;
            base.experiment_id = "fig2".into();
            sweep(id, opts, base, DW_NOTE)?.finish(started)
        }
        FigureId::Fig5 => {
            let mut base = logistic_config(0.1, opts.seed, opts.budget)?;
            base.experiment_id = "fig5".into();
            sweep(id, opts, base, LOGISTIC_NOTE)?.finish(started)
        }
        FigureId::Fig4 => fig4(opts, started),
        FigureId::Table1Sweep => table1(opts, started),
    }
}

/// `root/<figure_id>`.
pub fn figure_dir(root: &Path, id: FigureId) -> PathBuf {
    root.join(id.label())
}
