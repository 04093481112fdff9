//! Experiment orchestration: config in, CSV artifacts and a manifest out.

pub mod config;
pub mod output;
pub mod presets;

use std::path::{Path, PathBuf};
use std::time::Instant;

pub use config::{ExperimentConfig, Resolved};
pub use output::{ResultRow, RunManifest, TrendCheck};
pub use presets::{reproduce, table1_grid, Budget, FigureId, ReproduceOptions, TABLE1};

use crate::error::{Error, Result};
use crate::bounds::{quantization_bound, BoundParams};
use crate::evaluate::{eval_average, eval_discounted, vanishing_discount_sweep, Criterion, SweepSetup};
use crate::persist::{load_qtable_for, save_qtable};
use crate::policy::{Policy, QuantizedPolicy};
use crate::qlearn::{greedy_policy, run_q_learning, LearnOutcome, Variant};

use output::{csv_text, emit, num, results_csv, StageRecord};

/// Where a config's artifacts go: `output_dir` (relative to `root`) or
/// `root/<experiment_id>`.
pub fn output_dir(cfg: &ExperimentConfig, root: &Path) -> PathBuf {
    match &cfg.output_dir {
        Some(d) if d.is_absolute() => d.clone(),
        Some(d) => root.join(d),
        None => root.join(&cfg.experiment_id),
    }
}

/// Artifacts of one completed run, for callers that post-process.
#[derive(Debug)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub learned: Option<LearnOutcome>,
    pub result: Option<ResultRow>,
    pub dir: PathBuf,
}

fn stage<T>(stages: &mut Vec<StageRecord>, name: &str, f: impl FnOnce() -> Result<T>) -> Option<T> {
    let t = Instant::now();
    let r = f();
    stages.push(StageRecord {
        name: name.to_string(),
        ok: r.is_ok(),
        message: r.as_ref().err().map(|e| e.to_string()),
        seconds: t.elapsed().as_secs_f64(),
    });
    r.ok()
}

fn learning_csv(out: &LearnOutcome, window: u64) -> String {
    let rows: Vec<Vec<String>> = out
        .diagnostics
        .window_deltas
        .iter()
        .enumerate()
        .map(|(i, d)| {
            vec![
                (i + 1).to_string(),
                ((i as u64 + 1) * window).to_string(),
                num(*d),
                out.diagnostics.rho_series.get(i).map(|r| num(*r)).unwrap_or_default(),
            ]
        })
        .collect();
    csv_text("learning", &["window", "steps", "sup_delta", "rho_hat"], &rows)
}

fn policy_csv(r: &Resolved, out: &LearnOutcome) -> String {
    let rows: Vec<Vec<String>> = (0..r.quantizer.n_bins())
        .map(|b| {
            let a = out.policy.action(b);
            let rep: Vec<String> = r.quantizer.representative(b).iter().map(|v| num(*v)).collect();
            let u: Vec<String> = r.grid.point(a).iter().map(|v| num(*v)).collect();
            vec![b.to_string(), rep.join(" "), a.to_string(), u.join(" ")]
        })
        .collect();
    csv_text("policy", &["bin", "representative", "action_index", "action"], &rows)
}

/// Learn, persist the Q-table, evaluate the greedy policy, emit CSVs and a
/// manifest. Stage failures are recorded in the manifest; configuration
/// errors are returned.
pub fn run_detailed(cfg: &ExperimentConfig, root: &Path) -> Result<RunOutcome> {
    run_stages(cfg, root, true)
}

/// As [`run_detailed`], optionally stopping after the learning stage.
pub fn run_stages(cfg: &ExperimentConfig, root: &Path, evaluate: bool) -> Result<RunOutcome> {
    let started = Instant::now();
    let r = cfg.resolve()?;
    let dir = output_dir(cfg, root);
    std::fs::create_dir_all(&dir)?;
    let config_json = serde_json::to_value(cfg).map_err(|e| Error::format(e.to_string()))?;
    let mut manifest = RunManifest::new(&cfg.experiment_id, config_json);
    manifest.seeds.insert("master".into(), cfg.seed());
    manifest.seeds.insert("learning".into(), r.learn.seed);
    manifest.seeds.insert("evaluation".into(), r.eval_sim.seed);
    let mut files = Vec::new();
    let mut stages = Vec::new();

    let learned = stage(&mut stages, "learn", || {
        let out = run_q_learning(&r.model, &r.sim, &r.quantizer, &r.grid, &r.learn, r.variant)?;
        save_qtable(&dir.join("qtable.bin"), &r.quantizer, &r.grid, &out.table)?;
        let bytes = std::fs::read(dir.join("qtable.bin"))?;
        files.push(output::FileRecord {
            path: "qtable.bin".into(),
            bytes: bytes.len() as u64,
            sha256: output::sha256_hex(&bytes),
        });
        emit(&dir, "learning.csv", learning_csv(&out, r.learn.eval_window).as_bytes(), &mut files)?;
        emit(&dir, "policy.csv", policy_csv(&r, &out).as_bytes(), &mut files)?;
        Ok(out)
    });

    let result = learned.as_ref().filter(|_| evaluate).and_then(|out| {
        stage(&mut stages, "evaluate", || {
            let row = evaluate_policy(cfg, &r, &out.policy)?;
            emit(&dir, "results.csv", results_csv(std::slice::from_ref(&row)).as_bytes(), &mut files)?;
            Ok(row)
        })
    });

    manifest.stages = stages;
    manifest.files = files;
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    manifest.write(&dir)?;
    Ok(RunOutcome {
        manifest,
        learned,
        result,
        dir,
    })
}

pub fn run(cfg: &ExperimentConfig, root: &Path) -> Result<RunManifest> {
    run_detailed(cfg, root).map(|o| o.manifest)
}

/// Evaluates `policy` under the config's evaluation section.
pub fn evaluate_policy(cfg: &ExperimentConfig, r: &Resolved, policy: &Policy) -> Result<ResultRow> {
    let law = QuantizedPolicy::new(&r.quantizer, &r.grid, policy);
    let est = match r.eval_criterion {
        Criterion::Discounted => eval_discounted(&r.model, &r.eval_sim, &law, &r.x0, r.alpha_rate, &r.eval)?,
        Criterion::Average => eval_average(&r.model, &r.eval_sim, &law, &r.x0, &r.eval)?,
    };
    let factor = (r.variant == Variant::Discounted).then_some(r.learn.beta_h);
    Ok(ResultRow::from_estimate(
        &cfg.experiment_id,
        r.sim.h,
        r.quantizer.interior_bins(),
        r.grid.per_axis(),
        factor,
        &est,
        cfg.seed(),
    ))
}

/// Evaluates the greedy policy of a stored Q-table, which must match the
/// config's discretization.
pub fn evaluate_stored(cfg: &ExperimentConfig, root: &Path, qtable: &Path) -> Result<RunManifest> {
    let started = Instant::now();
    let r = cfg.resolve()?;
    let stored = load_qtable_for(qtable, &r.quantizer, &r.grid)?;
    let dir = output_dir(cfg, root);
    std::fs::create_dir_all(&dir)?;
    let mut manifest = RunManifest::new(&cfg.experiment_id, serde_json::to_value(cfg).map_err(|e| Error::format(e.to_string()))?);
    manifest.seeds.insert("master".into(), cfg.seed());
    manifest.seeds.insert("evaluation".into(), r.eval_sim.seed);
    manifest.notes.push(format!("policy from {}", qtable.display()));
    let mut files = Vec::new();
    let mut stages = Vec::new();
    stage(&mut stages, "evaluate", || {
        let row = evaluate_policy(cfg, &r, &greedy_policy(&stored.table))?;
        emit(&dir, "results.csv", results_csv(std::slice::from_ref(&row)).as_bytes(), &mut files)
    });
    manifest.stages = stages;
    manifest.files = files;
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    manifest.write(&dir)?;
    Ok(manifest)
}

/// Vanishing-discount sweep over `factors` with the config as the base;
/// writes `sweep.csv`.
pub fn sweep_config(cfg: &ExperimentConfig, root: &Path, factors: &[f64]) -> Result<RunManifest> {
    let started = Instant::now();
    let r = cfg.resolve()?;
    let dir = output_dir(cfg, root);
    std::fs::create_dir_all(&dir)?;
    let mut manifest = RunManifest::new(&cfg.experiment_id, serde_json::to_value(cfg).map_err(|e| Error::format(e.to_string()))?);
    manifest.seeds.insert("master".into(), cfg.seed());
    manifest.seeds.insert("learning".into(), r.learn.seed);
    manifest.seeds.insert("evaluation".into(), r.eval_sim.seed);
    let setup = SweepSetup {
        model: &r.model,
        learn_sim: &r.sim,
        eval_sim: &r.eval_sim,
        quantizer: &r.quantizer,
        grid: &r.grid,
        learn: &r.learn,
        eval: &r.eval,
        x0: &r.x0,
    };
    let t = Instant::now();
    let table = vanishing_discount_sweep(&setup, factors)?;
    let mut stages = Vec::new();
    let mut rows = Vec::new();
    for row in &table {
        match &row.estimate {
            Ok(est) => rows.push(ResultRow::from_estimate(
                &cfg.experiment_id,
                r.sim.h,
                r.quantizer.interior_bins(),
                r.grid.per_axis(),
                Some(row.factor),
                est,
                cfg.seed(),
            )),
            Err(e) => stages.push(StageRecord {
                name: format!("factor {}", row.factor),
                ok: false,
                message: Some(e.clone()),
                seconds: 0.0,
            }),
        }
    }
    stages.push(StageRecord {
        name: "sweep".into(),
        ok: true,
        message: None,
        seconds: t.elapsed().as_secs_f64(),
    });
    let mut files = Vec::new();
    emit(&dir, "sweep.csv", results_csv(&rows).as_bytes(), &mut files)?;
    manifest.stages = stages;
    manifest.files = files;
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    manifest.write(&dir)?;
    Ok(manifest)
}

/// Bound parameters from TOML; `beta` is derived when absent.
pub fn bound_params_from_toml(text: &str) -> Result<BoundParams> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::invalid(e.message().to_string()))?;
    if !table.contains_key("beta") {
        let get = |k: &str, d: f64| table.get(k).and_then(|v| v.as_float().or(v.as_integer().map(|i| i as f64))).unwrap_or(d);
        let defaults = BoundParams::default();
        let beta = (-get("alpha_rate", defaults.alpha_rate) * get("h", defaults.h)).exp();
        table.insert("beta".into(), toml::Value::Float(beta));
    }
    let p: BoundParams = table.try_into().map_err(|e: toml::de::Error| Error::invalid(e.message().to_string()))?;
    p.validate()?;
    Ok(p)
}

/// Bound table over interior bin counts. The cube side is `side` when given,
/// else the balancing choice `N = M^{1/(d+m)}`.
pub fn bounds_csv(p: &BoundParams, m_values: &[f64], side: Option<f64>) -> Result<String> {
    p.validate()?;
    let mut rows = Vec::with_capacity(m_values.len());
    for &m in m_values {
        let mut q = p.clone();
        q.m_bins = m;
        q.n_side = side.unwrap_or_else(|| q.balanced_side());
        let b = quantization_bound(&q)?;
        rows.push(vec![num(m), num(q.n_side), num(q.h), num(q.beta), num(b.general), num(b.collapsed), num(b.exponent)]);
    }
    Ok(csv_text("bounds", &["M", "N", "h", "beta", "general", "collapsed", "exponent"], &rows))
}
