//! Asynchronous tabular Q-learning on the quantized sampled process.
//!
//! One exploration trajectory is observed at the sampling instants; at every
//! step only the visited `(bin, action)` entry moves toward its target:
//!
//! * discounted: `c·h + β_h min_v Q(x̂', v)`
//! * average cost: `c·h + min_v Q(x̂', v) − δ Σ_y min_v Q(y, v)`
//!
//! In the average-cost variant `δ Σ_y V(y)` estimates the optimal gain per
//! stage.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{row_minima, FiniteMdp, VisitRecord};
use crate::policy::Policy;
use crate::quantize::{ActionGrid, StateQuantizer};
use crate::rng::{stream, stream_rng, SimRng};
use crate::sde::{DiffusionModel, Integrator, SimConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
    visits: Vec<u64>,
}

impl QTable {
    pub fn new(n_states: usize, n_actions: usize, init: f64) -> Self {
        Self {
            n_states,
            n_actions,
            values: vec![init; n_states * n_actions],
            visits: vec![0; n_states * n_actions],
        }
    }

    pub fn from_parts(n_states: usize, n_actions: usize, values: Vec<f64>, visits: Vec<u64>) -> Result<Self> {
        if values.len() != n_states * n_actions || visits.len() != n_states * n_actions {
            return Err(Error::invalid("Q-table buffers do not match its shape"));
        }
        Ok(Self {
            n_states,
            n_actions,
            values,
            visits,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn visits(&self) -> &[u64] {
        &self.visits
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.values[s * self.n_actions + a] = v;
    }

    pub fn visit_count(&self, s: usize, a: usize) -> u64 {
        self.visits[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    /// `V(s) = min_v Q(s, v)`.
    pub fn state_value(&self, s: usize) -> f64 {
        self.row(s).iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn state_values(&self) -> Vec<f64> {
        row_minima(&self.values, self.n_actions).0
    }

    pub fn total_visits(&self) -> u64 {
        self.visits.iter().sum()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `max |Q(s,a) − other(s,a)|` against a row-major table of the same shape.
    pub fn sup_distance(&self, other: &[f64]) -> f64 {
        assert_eq!(other.len(), self.values.len());
        self.values.iter().zip(other).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Step size as a function of the number of earlier visits `n` to the pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearningRate {
    /// `1 / (1 + n)`.
    OneOverVisits,
    /// `(1 + n)^(−exponent)`, exponent in `(1/2, 1]`.
    Polynomial { exponent: f64 },
    /// `scale / (scale + n)`.
    Linear { scale: f64 },
    Constant { rate: f64 },
}

impl Default for LearningRate {
    fn default() -> Self {
        LearningRate::Polynomial { exponent: 0.65 }
    }
}

impl LearningRate {
    pub fn rate(&self, visits: u64) -> f64 {
        let n = visits as f64;
        match *self {
            LearningRate::OneOverVisits => 1.0 / (1.0 + n),
            LearningRate::Polynomial { exponent } => (1.0 + n).powf(-exponent),
            LearningRate::Linear { scale } => scale / (scale + n),
            LearningRate::Constant { rate } => rate,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LearningRate::OneOverVisits => true,
            LearningRate::Polynomial { exponent } => exponent > 0.5 && exponent <= 1.0,
            LearningRate::Linear { scale } => scale >= 1.0,
            LearningRate::Constant { rate } => (0.0..=1.0).contains(&rate),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid learning-rate schedule {self:?}")))
        }
    }
}

/// Discounted update of one entry with an explicit step size.
pub fn q_update_discounted(q: &mut QTable, bin: usize, action: usize, cost: f64, next_bin: usize, beta_h: f64, rate: f64) {
    let target = cost + beta_h * q.state_value(next_bin);
    let idx = bin * q.n_actions + action;
    q.values[idx] = (1.0 - rate) * q.values[idx] + rate * target;
    q.visits[idx] += 1;
}

/// Discounted update with the step size taken from the visit count.
pub fn q_step_discounted(
    q: &mut QTable,
    bin: usize,
    action: usize,
    cost: f64,
    next_bin: usize,
    beta_h: f64,
    schedule: LearningRate,
) {
    let rate = schedule.rate(q.visit_count(bin, action));
    q_update_discounted(q, bin, action, cost, next_bin, beta_h, rate);
}

/// `δ Σ_y min_v Q(y, v)`.
pub fn normalization(q: &QTable, delta: f64) -> f64 {
    delta * q.state_values().iter().sum::<f64>()
}

pub fn q_update_average(q: &mut QTable, bin: usize, action: usize, cost: f64, next_bin: usize, delta: f64, rate: f64) {
    let target = cost + q.state_value(next_bin) - normalization(q, delta);
    let idx = bin * q.n_actions + action;
    q.values[idx] = (1.0 - rate) * q.values[idx] + rate * target;
    q.visits[idx] += 1;
}

pub fn q_step_average(
    q: &mut QTable,
    bin: usize,
    action: usize,
    cost: f64,
    next_bin: usize,
    delta: f64,
    schedule: LearningRate,
) {
    let rate = schedule.rate(q.visit_count(bin, action));
    q_update_average(q, bin, action, cost, next_bin, delta, rate);
}

/// `γ(x̂) = argmin_u Q(x̂, u)`, lowest index on ties.
pub fn greedy_policy(q: &QTable) -> Policy {
    Policy {
        actions: row_minima(&q.values, q.n_actions).1,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Discounted,
    Average,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exploration {
    #[default]
    UniformRandom,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetTarget {
    /// Back to the run's initial state.
    #[default]
    Initial,
    /// Uniform draw over the quantizer cube.
    UniformInCube,
}

/// Optional restarts of the exploration trajectory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResetRule {
    /// Restart every this many steps; `None` keeps one continuous trajectory.
    pub every: Option<u64>,
    #[serde(default)]
    pub target: ResetTarget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnConfig {
    pub steps: u64,
    /// Per-interval discount factor `e^{−αh}` (discounted variant).
    pub beta_h: f64,
    /// Normalizing constant (average variant); defaults to `1 / (10 (M+1))`.
    pub delta: Option<f64>,
    pub exploration: Exploration,
    pub lr_schedule: LearningRate,
    pub q_init: f64,
    /// Steps between sup-norm change snapshots.
    pub eval_window: u64,
    /// Stop once a window changes the table by less than this.
    pub stop_tol: Option<f64>,
    pub seed: u64,
    /// Initial state; defaults to the quantizer center.
    pub x0: Option<Vec<f64>>,
    pub reset: ResetRule,
    /// Keep per-pair next-bin counts and cost sums.
    pub record_transitions: bool,
    /// Reservoir size of visited states kept per bin (0 disables).
    pub record_states: usize,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            steps: 1_000_000,
            beta_h: 0.95,
            delta: None,
            exploration: Exploration::UniformRandom,
            lr_schedule: LearningRate::default(),
            q_init: 0.0,
            eval_window: 10_000,
            stop_tol: Some(1e-4),
            seed: 0,
            x0: None,
            reset: ResetRule::default(),
            record_transitions: false,
            record_states: 0,
        }
    }
}

impl LearnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("learning.steps must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta_h) {
            return Err(Error::invalid(format!("learning.beta_h must lie in [0, 1), got {}", self.beta_h)));
        }
        if let Some(d) = self.delta {
            if !(d > 0.0) {
                return Err(Error::invalid("learning.delta must be positive"));
            }
        }
        if self.eval_window == 0 {
            return Err(Error::invalid("learning.eval_window must be positive"));
        }
        if self.reset.every == Some(0) {
            return Err(Error::invalid("learning.reset.every must be positive"));
        }
        if !self.q_init.is_finite() {
            return Err(Error::invalid("learning.q_init must be finite"));
        }
        self.lr_schedule.validate()
    }

    pub fn delta_for(&self, n_states: usize) -> f64 {
        self.delta.unwrap_or(1.0 / (10.0 * n_states as f64))
    }
}

/// A process observed through a finite quantizer.
pub trait Environment {
    fn n_states(&self) -> usize;
    fn n_actions(&self) -> usize;
    /// Current bin.
    fn current(&self) -> usize;
    /// Applies `action` for one interval; returns the cost realization and
    /// the next bin.
    fn step(&mut self, action: usize, rng: &mut SimRng) -> Result<(f64, usize)>;
    /// Restarts the trajectory and returns the new bin.
    fn reset(&mut self, target: &ResetTarget, rng: &mut SimRng) -> usize;
    /// Underlying continuous state, when there is one.
    fn state(&self) -> Option<&[f64]> {
        None
    }
}

/// Controlled diffusion sampled every `h` and quantized.
#[derive(Debug)]
pub struct DiffusionEnv<'a> {
    integ: Integrator<'a>,
    quantizer: &'a StateQuantizer,
    grid: &'a ActionGrid,
    x0: Vec<f64>,
    x: Vec<f64>,
    bin: usize,
}

impl<'a> DiffusionEnv<'a> {
    pub fn new(
        model: &'a DiffusionModel,
        sim: &SimConfig,
        quantizer: &'a StateQuantizer,
        grid: &'a ActionGrid,
        x0: Vec<f64>,
    ) -> Result<Self> {
        if quantizer.dim() != model.state_dim || x0.len() != model.state_dim {
            return Err(Error::invalid("state dimensions of model, quantizer and x0 differ"));
        }
        if grid.bounds().len() != model.action_dim() {
            return Err(Error::invalid("action grid dimension differs from the model's"));
        }
        let bin = quantizer.bin_of(&x0);
        Ok(Self {
            integ: Integrator::new(model, sim)?,
            quantizer,
            grid,
            x: x0.clone(),
            x0,
            bin,
        })
    }
}

impl Environment for DiffusionEnv<'_> {
    fn n_states(&self) -> usize {
        self.quantizer.n_bins()
    }

    fn n_actions(&self) -> usize {
        self.grid.len()
    }

    fn current(&self) -> usize {
        self.bin
    }

    fn step(&mut self, action: usize, rng: &mut SimRng) -> Result<(f64, usize)> {
        let cost = self.integ.advance(&mut self.x, self.grid.point(action), rng, None)?.start;
        self.bin = self.quantizer.bin_of(&self.x);
        Ok((cost, self.bin))
    }

    fn reset(&mut self, target: &ResetTarget, rng: &mut SimRng) -> usize {
        match target {
            ResetTarget::Initial => self.x.copy_from_slice(&self.x0),
            ResetTarget::UniformInCube => {
                let half = 0.5 * self.quantizer.side();
                for (xi, c) in self.x.iter_mut().zip(self.quantizer.center()) {
                    *xi = c + (2.0 * rng.random::<f64>() - 1.0) * half;
                }
            }
        }
        self.bin = self.quantizer.bin_of(&self.x);
        self.bin
    }

    fn state(&self) -> Option<&[f64]> {
        Some(&self.x)
    }
}

/// A finite MDP sampled directly; used to check the learning rules against
/// exact solutions.
#[derive(Debug, Clone)]
pub struct MdpEnv<'a> {
    mdp: &'a FiniteMdp,
    start: usize,
    state: usize,
}

impl<'a> MdpEnv<'a> {
    pub fn new(mdp: &'a FiniteMdp, start: usize) -> Self {
        Self { mdp, start, state: start }
    }
}

impl Environment for MdpEnv<'_> {
    fn n_states(&self) -> usize {
        self.mdp.n_states()
    }

    fn n_actions(&self) -> usize {
        self.mdp.n_actions()
    }

    fn current(&self) -> usize {
        self.state
    }

    fn step(&mut self, action: usize, rng: &mut SimRng) -> Result<(f64, usize)> {
        let cost = self.mdp.cost(self.state, action);
        self.state = self.mdp.sample_next(self.state, action, rng);
        Ok((cost, self.state))
    }

    fn reset(&mut self, target: &ResetTarget, rng: &mut SimRng) -> usize {
        self.state = match target {
            ResetTarget::Initial => self.start,
            ResetTarget::UniformInCube => rng.random_range(0..self.mdp.n_states()),
        };
        self.state
    }
}

/// Per-pair next-bin counts and summed cost realizations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionCounts {
    pub n_states: usize,
    pub n_actions: usize,
    pub counts: Vec<u64>,
    pub cost_sums: Vec<f64>,
}

impl TransitionCounts {
    fn new(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            counts: vec![0; n_states * n_actions * n_states],
            cost_sums: vec![0.0; n_states * n_actions],
        }
    }

    /// The empirical finite MDP these transitions define.
    pub fn to_mdp(&self, h: f64) -> Result<FiniteMdp> {
        FiniteMdp::from_counts(self.n_states, self.n_actions, h, &self.counts, &self.cost_sums)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub steps_run: u64,
    /// Sup-norm change of the table over each window.
    pub window_deltas: Vec<f64>,
    /// `δ Σ_y V_k(y)` at the end of each window (average variant).
    pub rho_series: Vec<f64>,
    /// Visits per bin.
    pub visit_histogram: Vec<u64>,
    pub min_pair_visits: u64,
    pub converged: bool,
    /// Largest cost realization seen.
    pub max_cost: f64,
    /// Updates that left `[0, max_cost/(1−β_h)]` (discounted variant with
    /// `q_init` in that range). Stays zero.
    pub bound_violations: u64,
    pub transitions: Option<TransitionCounts>,
    pub visited_states: Option<VisitRecord>,
}

#[derive(Clone, Debug)]
pub struct LearnOutcome {
    pub table: QTable,
    pub policy: Policy,
    pub diagnostics: Diagnostics,
}

impl LearnOutcome {
    /// Final `δ Σ_y V(y)`, the gain-per-stage estimate of the average variant.
    pub fn rho_hat(&self, delta: f64) -> f64 {
        normalization(&self.table, delta)
    }
}

/// Algorithm driver over any [`Environment`].
pub fn run_q_learning_env<E: Environment>(env: &mut E, cfg: &LearnConfig, variant: Variant) -> Result<LearnOutcome> {
    cfg.validate()?;
    let (ns, na) = (env.n_states(), env.n_actions());
    let delta = cfg.delta_for(ns);
    let mut rng = stream_rng(cfg.seed, stream::LEARN);
    let mut reservoir_rng = stream_rng(cfg.seed, stream::RESERVOIR);
    let mut table = QTable::new(ns, na, cfg.q_init);
    let mut snapshot = table.values.clone();
    let mut diag = Diagnostics {
        steps_run: 0,
        window_deltas: Vec::new(),
        rho_series: Vec::new(),
        visit_histogram: vec![0; ns],
        min_pair_visits: 0,
        converged: false,
        max_cost: 0.0,
        bound_violations: 0,
        transitions: cfg.record_transitions.then(|| TransitionCounts::new(ns, na)),
        visited_states: (cfg.record_states > 0).then(|| VisitRecord::new(ns)),
    };
    let check_bound = variant == Variant::Discounted && cfg.q_init >= 0.0;
    let mut seen_per_bin = vec![0u64; ns];
    let mut bin = env.current();

    for k in 0..cfg.steps {
        if let Some(every) = cfg.reset.every {
            if k > 0 && k % every == 0 {
                bin = env.reset(&cfg.reset.target, &mut rng);
            }
        }
        if let (Some(rec), Some(x)) = (diag.visited_states.as_mut(), env.state()) {
            let seen = seen_per_bin[bin];
            let list = &mut rec.states[bin];
            if list.len() < cfg.record_states {
                list.push(x.to_vec());
            } else {
                let j = reservoir_rng.random_range(0..=seen) as usize;
                if j < cfg.record_states {
                    list[j] = x.to_vec();
                }
            }
            seen_per_bin[bin] += 1;
        }

        let action = match cfg.exploration {
            Exploration::UniformRandom => rng.random_range(0..na),
        };
        let (cost, next) = env.step(action, &mut rng)?;
        diag.max_cost = diag.max_cost.max(cost);
        diag.visit_histogram[bin] += 1;
        match variant {
            Variant::Discounted => q_step_discounted(&mut table, bin, action, cost, next, cfg.beta_h, cfg.lr_schedule),
            Variant::Average => q_step_average(&mut table, bin, action, cost, next, delta, cfg.lr_schedule),
        }
        if check_bound {
            let v = table.get(bin, action);
            let upper = diag.max_cost / (1.0 - cfg.beta_h);
            if v < -1e-12 || v > upper * (1.0 + 1e-12) + 1e-12 {
                diag.bound_violations += 1;
            }
        }
        if let Some(tr) = diag.transitions.as_mut() {
            let pair = bin * na + action;
            tr.counts[pair * ns + next] += 1;
            tr.cost_sums[pair] += cost;
        }
        bin = next;
        diag.steps_run = k + 1;

        if (k + 1) % cfg.eval_window == 0 {
            let change = table.sup_distance(&snapshot);
            snapshot.copy_from_slice(&table.values);
            diag.window_deltas.push(change);
            if variant == Variant::Average {
                diag.rho_series.push(normalization(&table, delta));
            }
            if let Some(tol) = cfg.stop_tol {
                if change < tol && table.visits.iter().all(|&v| v > 0) {
                    diag.converged = true;
                    break;
                }
            }
        }
    }
    diag.min_pair_visits = table.visits.iter().copied().min().unwrap_or(0);
    let policy = greedy_policy(&table);
    Ok(LearnOutcome {
        table,
        policy,
        diagnostics: diag,
    })
}

/// Learns on one exploration trajectory of `model`, starting from
/// `cfg.x0` (default: the quantizer center).
pub fn run_q_learning(
    model: &DiffusionModel,
    sim: &SimConfig,
    quantizer: &StateQuantizer,
    grid: &ActionGrid,
    cfg: &LearnConfig,
    variant: Variant,
) -> Result<LearnOutcome> {
    let x0 = cfg.x0.clone().unwrap_or_else(|| quantizer.center().to_vec());
    let mut env = DiffusionEnv::new(model, sim, quantizer, grid, x0)?;
    run_q_learning_env(&mut env, cfg, variant)
}
