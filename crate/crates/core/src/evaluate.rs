//! Monte Carlo evaluation of control laws under the discounted and the
//! long-run average criteria.
//!
//! Replica `r` always draws from random stream `r` of `sim.seed`, and
//! replicas are reduced in a fixed order, so every estimate is a pure
//! function of its inputs regardless of the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{ControlLaw, Policy, QuantizedPolicy};
use crate::qlearn::{run_q_learning, LearnConfig, Variant};
use crate::quantize::{ActionGrid, StateQuantizer};
use crate::rng::stream_rng;
use crate::sde::{DiffusionModel, Integrator, SimConfig};

/// Replicas per parallel work unit.
const BLOCK: usize = 64;

/// 95% normal quantile.
pub const Z95: f64 = 1.96;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Discounted,
    Average,
}

impl Criterion {
    pub fn label(&self) -> &'static str {
        match self {
            Criterion::Discounted => "discounted",
            Criterion::Average => "average",
        }
    }
}

/// How the cost over one control interval is realized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    /// `c(X_{kh}, U_k) · h`, the sampled-chain stage cost.
    #[default]
    Interval,
    /// Substep accumulation of `e^{−αs} c(X_s, U_s) ds`.
    Integral,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_replicas: usize,
    pub horizon: f64,
    pub criterion: Criterion,
    /// `c_sup e^{−αT} / α`, discounted criterion only. `c_sup` is the largest
    /// running cost seen on the simulated paths.
    pub truncation_bias_bound: Option<f64>,
}

impl CostEstimate {
    pub fn half_width(&self) -> f64 {
        Z95 * self.std_error
    }

    /// `mean ± 1.96 · std_error`.
    pub fn ci95(&self) -> (f64, f64) {
        (self.mean - self.half_width(), self.mean + self.half_width())
    }

    /// Upper CI end strictly below the other's lower end.
    pub fn ci_below(&self, other: &CostEstimate) -> bool {
        self.ci95().1 < other.ci95().0
    }

    pub fn ci_overlaps(&self, other: &CostEstimate) -> bool {
        !(self.ci_below(other) || other.ci_below(self))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub n_replicas: usize,
    pub cost_mode: CostMode,
    /// Fraction of the horizon dropped before averaging (average criterion).
    pub burn_in: f64,
    /// Double the horizon until the truncation bound is within
    /// `truncation_tol` of the mean (discounted criterion).
    pub auto_extend: bool,
    pub truncation_tol: f64,
    /// Cap on auto-extension.
    pub max_horizon: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n_replicas: 1000,
            cost_mode: CostMode::Interval,
            burn_in: 0.2,
            auto_extend: true,
            truncation_tol: 0.01,
            max_horizon: 1e4,
        }
    }
}

impl EvalOptions {
    pub fn with_replicas(mut self, n: usize) -> Self {
        self.n_replicas = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_replicas == 0 {
            return Err(Error::invalid("evaluation.n_replicas must be positive"));
        }
        if !(0.0..1.0).contains(&self.burn_in) {
            return Err(Error::invalid("evaluation.burn_in must lie in [0, 1)"));
        }
        if !(self.truncation_tol > 0.0) {
            return Err(Error::invalid("evaluation.truncation_tol must be positive"));
        }
        Ok(())
    }
}

/// Mean and standard error of per-replica values.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1) as f64 / n as f64).sqrt())
}

/// Runs `f` on every replica index and returns the results in index order.
fn per_replica<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
{
    let blocks: Vec<Result<Vec<T>>> = (0..n.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| (b * BLOCK..((b + 1) * BLOCK).min(n)).map(|r| f(r as u64)).collect())
        .collect();
    let mut out = Vec::with_capacity(n);
    for b in blocks {
        out.extend(b?);
    }
    Ok(out)
}

fn check_x0(model: &DiffusionModel, x0: &[f64]) -> Result<()> {
    if x0.len() != model.state_dim {
        return Err(Error::invalid(format!(
            "x0 has dimension {}, model `{}` expects {}",
            x0.len(),
            model.name,
            model.state_dim
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default)]
struct DiscountedSums {
    interval: f64,
    integral: f64,
    c_sup: f64,
}

fn discounted_replica(
    model: &DiffusionModel,
    sim: &SimConfig,
    law: &dyn ControlLaw,
    x0: &[f64],
    alpha_rate: f64,
    integral: bool,
    replica: u64,
) -> Result<DiscountedSums> {
    let mut integ = Integrator::new(model, sim)?;
    let mut rng = stream_rng(sim.seed, replica);
    let mut x = x0.to_vec();
    let step_decay = (-alpha_rate * sim.h).exp();
    let mut weight = 1.0;
    let mut s = DiscountedSums::default();
    for _ in 0..sim.intervals() {
        let u = law.control(&x, &mut rng);
        s.c_sup = s.c_sup.max(model.running_cost(&x, u));
        let cost = integ.advance(&mut x, u, &mut rng, integral.then_some(alpha_rate))?;
        s.interval += weight * cost.start;
        if let Some(i) = cost.integral {
            s.integral += weight * i;
        }
        weight *= step_decay;
    }
    Ok(s)
}

/// Discounted estimate with its paired counterpart in the other cost mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedDiscounted {
    pub interval: CostEstimate,
    pub integral: CostEstimate,
    /// Per-replica `interval − integral`.
    pub gap: CostEstimate,
}

fn discounted_core(
    model: &DiffusionModel,
    sim: &SimConfig,
    law: &dyn ControlLaw,
    x0: &[f64],
    alpha_rate: f64,
    opts: &EvalOptions,
    integral: bool,
) -> Result<(SimConfig, Vec<DiscountedSums>)> {
    if !(alpha_rate > 0.0 && alpha_rate.is_finite()) {
        return Err(Error::invalid(format!("alpha_rate must be positive, got {alpha_rate}")));
    }
    opts.validate()?;
    check_x0(model, x0)?;
    let mut sim = *sim;
    sim.validate()?;
    loop {
        let sums = per_replica(opts.n_replicas, |r| {
            discounted_replica(model, &sim, law, x0, alpha_rate, integral, r)
        })?;
        let c_sup = sums.iter().map(|s| s.c_sup).fold(0.0, f64::max);
        let mean = sums.iter().map(|s| s.interval).sum::<f64>() / sums.len() as f64;
        let bias = truncation_bound(c_sup, alpha_rate, sim.horizon);
        let next = sim.horizon_covering(2.0 * sim.horizon);
        if !opts.auto_extend || bias <= opts.truncation_tol * mean.abs() || next > opts.max_horizon {
            return Ok((sim, sums));
        }
        sim.horizon = next;
    }
}

/// `c_sup e^{−αT} / α`.
pub fn truncation_bound(c_sup: f64, alpha_rate: f64, horizon: f64) -> f64 {
    c_sup * (-alpha_rate * horizon).exp() / alpha_rate
}

fn discounted_estimate(values: &[f64], sim: &SimConfig, c_sup: f64, alpha_rate: f64) -> CostEstimate {
    let (mean, std_error) = mean_and_se(values);
    CostEstimate {
        mean,
        std_error,
        n_replicas: values.len(),
        horizon: sim.horizon,
        criterion: Criterion::Discounted,
        truncation_bias_bound: Some(truncation_bound(c_sup, alpha_rate, sim.horizon)),
    }
}

/// `E Σ_k e^{−αkh} (interval cost)` under `law`, starting at `x0`.
pub fn eval_discounted(
    model: &DiffusionModel,
    sim: &SimConfig,
    law: &dyn ControlLaw,
    x0: &[f64],
    alpha_rate: f64,
    opts: &EvalOptions,
) -> Result<CostEstimate> {
    let integral = opts.cost_mode == CostMode::Integral;
    let (sim, sums) = discounted_core(model, sim, law, x0, alpha_rate, opts, integral)?;
    let c_sup = sums.iter().map(|s| s.c_sup).fold(0.0, f64::max);
    let values: Vec<f64> = sums.iter().map(|s| if integral { s.integral } else { s.interval }).collect();
    Ok(discounted_estimate(&values, &sim, c_sup, alpha_rate))
}

/// Both cost modes on the same paths; the gap is the time-discretization
/// error of the sampled stage cost.
pub fn eval_discounted_paired(
    model: &DiffusionModel,
    sim: &SimConfig,
    law: &dyn ControlLaw,
    x0: &[f64],
    alpha_rate: f64,
    opts: &EvalOptions,
) -> Result<PairedDiscounted> {
    let (sim, sums) = discounted_core(model, sim, law, x0, alpha_rate, opts, true)?;
    let c_sup = sums.iter().map(|s| s.c_sup).fold(0.0, f64::max);
    let pick = |f: fn(&DiscountedSums) -> f64| -> Vec<f64> { sums.iter().map(f).collect() };
    Ok(PairedDiscounted {
        interval: discounted_estimate(&pick(|s| s.interval), &sim, c_sup, alpha_rate),
        integral: discounted_estimate(&pick(|s| s.integral), &sim, c_sup, alpha_rate),
        gap: discounted_estimate(&pick(|s| s.interval - s.integral), &sim, c_sup, alpha_rate),
    })
}

/// Per-replica time average of `f(x_k, u_k)` over sampling instants after
/// the burn-in.
fn time_average_core(
    model: &DiffusionModel,
    sim: &SimConfig,
    law: &dyn ControlLaw,
    x0: &[f64],
    opts: &EvalOptions,
    f: &(dyn Fn(&[f64], &[f64]) -> f64 + Sync),
) -> Result<CostEstimate> {
    opts.validate()?;
    check_x0(model, x0)?;
    sim.validate()?;
    let n = sim.intervals();
    let start = (opts.burn_in * n as f64).floor() as usize;
    if start >= n {
        return Err(Error::invalid("horizon too short for the burn-in"));
    }
    let values = per_replica(opts.n_replicas, |r| {
        let mut integ = Integrator::new(model, sim)?;
        let mut rng = stream_rng(sim.seed, r);
        let mut x = x0.to_vec();
        let mut acc = 0.0;
        for k in 0..n {
            let u = law.control(&x, &mut rng);
            if k >= start {
                acc += f(&x, u);
            }
            integ.advance(&mut x, u, &mut rng, None)?;
        }
        Ok(acc / (n - start) as f64)
    })?;
    let (mean, std_error) = mean_and_se(&values);
    Ok(CostEstimate {
        mean,
        std_error,
        n_replicas: values.len(),
        horizon: sim.horizon,
        criterion: Criterion::Average,
        truncation_bias_bound: None,
    })
}

/// Long-run average running cost per unit time, after `opts.burn_in`.
///
/// In integral mode the cost is accumulated at every substep instead of at
/// sampling instants.
pub fn eval_average(
    model: &DiffusionModel,
    sim: &SimConfig,
    law: &dyn ControlLaw,
    x0: &[f64],
    opts: &EvalOptions,
) -> Result<CostEstimate> {
    match opts.cost_mode {
        CostMode::Interval => time_average_core(model, sim, law, x0, opts, &|x, u| model.running_cost(x, u)),
        CostMode::Integral => {
            opts.validate()?;
            check_x0(model, x0)?;
            sim.validate()?;
            let n = sim.intervals();
            let start = (opts.burn_in * n as f64).floor() as usize;
            if start >= n {
                return Err(Error::invalid("horizon too short for the burn-in"));
            }
            let values = per_replica(opts.n_replicas, |r| {
                let mut integ = Integrator::new(model, sim)?;
                let mut rng = stream_rng(sim.seed, r);
                let mut x = x0.to_vec();
                let mut acc = 0.0;
                for k in 0..n {
                    let u = law.control(&x, &mut rng);
                    let c = integ.advance(&mut x, u, &mut rng, Some(0.0))?;
                    if k >= start {
                        acc += c.integral.unwrap_or(0.0);
                    }
                }
                Ok(acc / ((n - start) as f64 * sim.h))
            })?;
            let (mean, std_error) = mean_and_se(&values);
            Ok(CostEstimate {
                mean,
                std_error,
                n_replicas: values.len(),
                horizon: sim.horizon,
                criterion: Criterion::Average,
                truncation_bias_bound: None,
            })
        }
    }
}

/// Long-run time average of a state functional, e.g. `|x − x_target|`.
pub fn eval_state_average(
    model: &DiffusionModel,
    sim: &SimConfig,
    law: &dyn ControlLaw,
    x0: &[f64],
    opts: &EvalOptions,
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
) -> Result<CostEstimate> {
    time_average_core(model, sim, law, x0, opts, &|x, _u| f(x))
}

/// Replica mean and standard error of `f(X_{kh})` at every sampling instant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathMoments {
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
    pub n_replicas: usize,
}

pub fn path_moments(
    model: &DiffusionModel,
    sim: &SimConfig,
    law: &dyn ControlLaw,
    x0: &[f64],
    n_replicas: usize,
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
) -> Result<PathMoments> {
    check_x0(model, x0)?;
    sim.validate()?;
    if n_replicas == 0 {
        return Err(Error::invalid("n_replicas must be positive"));
    }
    let n = sim.intervals();
    let blocks: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..n_replicas.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut sum = vec![0.0; n + 1];
            let mut sq = vec![0.0; n + 1];
            let mut integ = Integrator::new(model, sim)?;
            for r in b * BLOCK..((b + 1) * BLOCK).min(n_replicas) {
                let mut rng = stream_rng(sim.seed, r as u64);
                let mut x = x0.to_vec();
                for k in 0..=n {
                    let v = f(&x);
                    sum[k] += v;
                    sq[k] += v * v;
                    if k < n {
                        let u = law.control(&x, &mut rng);
                        integ.advance(&mut x, u, &mut rng, None)?;
                    }
                }
            }
            Ok((sum, sq))
        })
        .collect();
    let mut sum = vec![0.0; n + 1];
    let mut sq = vec![0.0; n + 1];
    for b in blocks {
        let (s, q) = b?;
        for k in 0..=n {
            sum[k] += s[k];
            sq[k] += q[k];
        }
    }
    let nr = n_replicas as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / nr).collect();
    let std_error = if n_replicas > 1 {
        sq.iter()
            .zip(&mean)
            .map(|(q, m)| ((q - nr * m * m).max(0.0) / (nr - 1.0) / nr).sqrt())
            .collect()
    } else {
        vec![0.0; n + 1]
    };
    Ok(PathMoments {
        times: (0..=n).map(|k| k as f64 * sim.h).collect(),
        mean,
        std_error,
        n_replicas,
    })
}

/// One row of a vanishing-discount sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub factor: f64,
    pub estimate: std::result::Result<CostEstimate, String>,
    pub policy: Option<Policy>,
}

/// Shared inputs of a vanishing-discount sweep.
#[derive(Clone, Copy, Debug)]
pub struct SweepSetup<'a> {
    pub model: &'a DiffusionModel,
    /// Learning simulation; its horizon is ignored.
    pub learn_sim: &'a SimConfig,
    /// Evaluation simulation (horizon and seed of the average-cost runs).
    pub eval_sim: &'a SimConfig,
    pub quantizer: &'a StateQuantizer,
    pub grid: &'a ActionGrid,
    pub learn: &'a LearnConfig,
    pub eval: &'a EvalOptions,
    pub x0: &'a [f64],
}

/// Learns a discounted policy for every factor `e^{−αh}` and evaluates it
/// under the average criterion. Failures are recorded per row.
pub fn vanishing_discount_sweep(setup: &SweepSetup<'_>, factors: &[f64]) -> Result<Vec<SweepRow>> {
    if factors.is_empty() {
        return Err(Error::invalid("sweep needs at least one discount factor"));
    }
    if factors.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
        return Err(Error::invalid("discount factors must lie in (0, 1)"));
    }
    if factors.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("discount factors must be strictly increasing"));
    }
    Ok(factors
        .par_iter()
        .map(|&factor| {
            let cfg = LearnConfig {
                beta_h: factor,
                ..setup.learn.clone()
            };
            let run = || -> Result<(CostEstimate, Policy)> {
                let out = run_q_learning(setup.model, setup.learn_sim, setup.quantizer, setup.grid, &cfg, Variant::Discounted)?;
                let law = QuantizedPolicy::new(setup.quantizer, setup.grid, &out.policy);
                let est = eval_average(setup.model, setup.eval_sim, &law, setup.x0, setup.eval)?;
                Ok((est, out.policy))
            };
            match run() {
                Ok((est, policy)) => SweepRow {
                    factor,
                    estimate: Ok(est),
                    policy: Some(policy),
                },
                Err(e) => SweepRow {
                    factor,
                    estimate: Err(e.to_string()),
                    policy: None,
                },
            }
        })
        .collect())
}

/// Empirical moment curve `E‖X_t‖^m` and the fitted drift envelope
/// `‖x_0‖^m e^{−C_1 t} + C_0/C_1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovReport {
    pub m: f64,
    pub moments: PathMoments,
    pub x0_norm_m: f64,
    pub c1: f64,
    pub c0: f64,
    pub sup_moment: f64,
    /// `sup_t E‖X_t‖^m ≤ 1.1 · max(‖x_0‖^m, C_0/C_1)`.
    pub sup_within_envelope: bool,
    /// `E‖X_t‖^m ≤ 1.1 · envelope(t)` at every sampling instant.
    pub curve_within_envelope: bool,
}

impl LyapunovReport {
    pub fn envelope(&self, t: f64) -> f64 {
        lyapunov_envelope(self.x0_norm_m, self.c1, self.c0, t)
    }
}

pub fn lyapunov_envelope(x0_norm_m: f64, c1: f64, c0: f64, t: f64) -> f64 {
    x0_norm_m * (-c1 * t).exp() + if c1 > 0.0 { c0 / c1 } else { 0.0 }
}

/// Least-squares `(C_1, s)` for `y ≈ s + (a − s) e^{−C_1 t}`, `s ≥ 0`: the
/// solution of `dy/dt = −C_1 y + C_0` from `y(0) = a` with `s = C_0/C_1`.
fn fit_envelope(times: &[f64], y: &[f64], a: f64) -> (f64, f64) {
    let sse_at = |c1: f64| -> (f64, f64) {
        let (mut num, mut den) = (0.0, 0.0);
        for (t, v) in times.iter().zip(y) {
            let e = (-c1 * t).exp();
            num += (v - a * e) * (1.0 - e);
            den += (1.0 - e) * (1.0 - e);
        }
        let s = if den > 0.0 { (num / den).max(0.0) } else { 0.0 };
        let sse = times
            .iter()
            .zip(y)
            .map(|(t, v)| {
                let e = (-c1 * t).exp();
                (v - s - (a - s) * e).powi(2)
            })
            .sum();
        (sse, s)
    };
    // coarse log grid, then golden-section refinement
    let grid: Vec<f64> = (0..=120).map(|i| 10f64.powf(-3.0 + 6.0 * i as f64 / 120.0)).collect();
    let best = grid
        .iter()
        .enumerate()
        .min_by(|a, b| sse_at(*a.1).0.total_cmp(&sse_at(*b.1).0))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut lo = grid[best.saturating_sub(1)].ln();
    let mut hi = grid[(best + 1).min(grid.len() - 1)].ln();
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..80 {
        let m1 = hi - g * (hi - lo);
        let m2 = lo + g * (hi - lo);
        if sse_at(m1.exp()).0 <= sse_at(m2.exp()).0 {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let c1 = ((lo + hi) / 2.0).exp();
    (c1, sse_at(c1).1)
}

/// Monte Carlo moment curve under `law` (typically exploration), with a
/// least-squares envelope fit.
pub fn lyapunov_moment_check(
    model: &DiffusionModel,
    sim: &SimConfig,
    law: &dyn ControlLaw,
    x0: &[f64],
    m: f64,
    n_replicas: usize,
) -> Result<LyapunovReport> {
    if !(m >= 1.0) {
        return Err(Error::invalid(format!("Lyapunov exponent m must be at least 1, got {m}")));
    }
    let norm_m = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt().powf(m);
    let moments = path_moments(model, sim, law, x0, n_replicas, &norm_m)?;
    let x0_norm_m = norm_m(x0);
    let (c1, s) = fit_envelope(&moments.times, &moments.mean, x0_norm_m);
    let c0 = s * c1;
    let sup_moment = moments.mean.iter().copied().fold(0.0, f64::max);
    let envelope_cap = 1.1 * x0_norm_m.max(s);
    let curve_within_envelope = moments
        .times
        .iter()
        .zip(&moments.mean)
        .all(|(t, v)| *v <= 1.1 * lyapunov_envelope(x0_norm_m, c1, c0, *t));
    Ok(LyapunovReport {
        m,
        x0_norm_m,
        c1,
        c0,
        sup_moment,
        sup_within_envelope: sup_moment <= envelope_cap,
        curve_within_envelope,
        moments,
    })
}
