//! Finite MDP `(C_h, P_h)` over quantizer bins and action-grid indices,
//! estimated by simulation, plus exact solvers used as oracles for the
//! Q-learning limits.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantize::{ActionGrid, StateQuantizer};
use crate::rng::{stream, stream_rng, SimRng};
use crate::sde::{DiffusionModel, Integrator, SimConfig};

const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteMdp {
    n_states: usize,
    n_actions: usize,
    h: f64,
    /// Row-major `[(s * A + a) * S + s']`.
    p: Vec<f64>,
    /// `[s * A + a]`, in cost·time units.
    c: Vec<f64>,
    visit_counts: Vec<u64>,
    /// Bins whose weight measure fell back to uniform-in-bin sampling.
    fallback_bins: Vec<usize>,
}

impl FiniteMdp {
    pub fn new(n_states: usize, n_actions: usize, h: f64, p: Vec<f64>, c: Vec<f64>) -> Result<Self> {
        let visits = vec![0; n_states * n_actions];
        Self::with_visits(n_states, n_actions, h, p, c, visits)
    }

    fn with_visits(
        n_states: usize,
        n_actions: usize,
        h: f64,
        p: Vec<f64>,
        c: Vec<f64>,
        visit_counts: Vec<u64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::invalid("MDP needs at least one state and one action"));
        }
        if p.len() != n_states * n_actions * n_states {
            return Err(Error::invalid(format!(
                "transition table has {} entries, expected {}",
                p.len(),
                n_states * n_actions * n_states
            )));
        }
        if c.len() != n_states * n_actions {
            return Err(Error::invalid(format!(
                "cost table has {} entries, expected {}",
                c.len(),
                n_states * n_actions
            )));
        }
        for (row_idx, row) in p.chunks(n_states).enumerate() {
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::invalid(format!("transition row {row_idx} has entries outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::invalid(format!("transition row {row_idx} sums to {sum}")));
            }
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("stage costs must be finite"));
        }
        Ok(Self {
            n_states,
            n_actions,
            h,
            p,
            c,
            visit_counts,
            fallback_bins: Vec::new(),
        })
    }

    /// Empirical model from transition counts `[(s*A + a)*S + s']` and summed
    /// cost realizations `[s*A + a]`. Every pair must have been observed.
    pub fn from_counts(n_states: usize, n_actions: usize, h: f64, counts: &[u64], cost_sums: &[f64]) -> Result<Self> {
        if counts.len() != n_states * n_actions * n_states || cost_sums.len() != n_states * n_actions {
            return Err(Error::invalid("count tables do not match the MDP shape"));
        }
        let mut p = vec![0.0; counts.len()];
        let mut c = vec![0.0; cost_sums.len()];
        let mut visits = vec![0; cost_sums.len()];
        for pair in 0..n_states * n_actions {
            let row = &counts[pair * n_states..(pair + 1) * n_states];
            let total: u64 = row.iter().sum();
            if total == 0 {
                return Err(Error::invalid(format!(
                    "pair (state {}, action {}) was never observed",
                    pair / n_actions,
                    pair % n_actions
                )));
            }
            for (dst, &n) in p[pair * n_states..(pair + 1) * n_states].iter_mut().zip(row) {
                *dst = n as f64 / total as f64;
            }
            c[pair] = cost_sums[pair] / total as f64;
            visits[pair] = total;
        }
        Self::with_visits(n_states, n_actions, h, p, c, visits)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.p[start..start + self.n_states]
    }

    pub fn cost(&self, s: usize, a: usize) -> f64 {
        self.c[s * self.n_actions + a]
    }

    pub fn transitions(&self) -> &[f64] {
        &self.p
    }

    pub fn costs(&self) -> &[f64] {
        &self.c
    }

    pub fn visit_counts(&self) -> &[u64] {
        &self.visit_counts
    }

    pub fn fallback_bins(&self) -> &[usize] {
        &self.fallback_bins
    }

    pub fn max_cost(&self) -> f64 {
        self.c.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Same dynamics with `κ` added to every stage cost.
    pub fn shifted_costs(&self, kappa: f64) -> Self {
        let mut out = self.clone();
        out.c.iter_mut().for_each(|c| *c += kappa);
        out
    }

    /// `(C + P v)` for every pair.
    fn q_from(&self, v: &[f64], discount: f64, out: &mut [f64]) {
        for (pair, q) in out.iter_mut().enumerate() {
            let row = &self.p[pair * self.n_states..(pair + 1) * self.n_states];
            let ev: f64 = row.iter().zip(v).map(|(p, v)| p * v).sum();
            *q = self.c[pair] + discount * ev;
        }
    }

    /// Samples the next state from `P(· | s, a)`.
    pub fn sample_next(&self, s: usize, a: usize, rng: &mut SimRng) -> usize {
        let row = self.transition_row(s, a);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (j, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return j;
            }
        }
        // rounding: land on the last state with positive mass
        row.iter().rposition(|&p| p > 0.0).unwrap_or(self.n_states - 1)
    }
}

/// Minimum of each row of a row-major `[S × A]` table, with the lowest-index
/// argmin.
pub(crate) fn row_minima(q: &[f64], n_actions: usize) -> (Vec<f64>, Vec<usize>) {
    q.chunks(n_actions)
        .map(|row| {
            let mut best = 0;
            for (a, &v) in row.iter().enumerate().skip(1) {
                if v < row[best] {
                    best = a;
                }
            }
            (row[best], best)
        })
        .unzip()
}

/// Discounted Bellman optimality operator `(TV)(s) = min_a C + β P V`.
pub fn bellman_discounted(mdp: &FiniteMdp, beta: f64, v: &[f64]) -> Vec<f64> {
    let mut q = vec![0.0; mdp.n_states * mdp.n_actions];
    mdp.q_from(v, beta, &mut q);
    row_minima(&q, mdp.n_actions).0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdpSolution {
    pub v: Vec<f64>,
    /// Row-major `[s * A + a]`.
    pub q: Vec<f64>,
    pub policy: Vec<usize>,
    /// Optimal average cost per stage.
    pub gain: Option<f64>,
    /// Optimal average cost per unit time, `gain / h`.
    pub rho: Option<f64>,
    pub residual: f64,
    pub iterations: usize,
}

impl MdpSolution {
    pub fn q_value(&self, s: usize, a: usize) -> f64 {
        let n_actions = self.q.len() / self.v.len();
        self.q[s * n_actions + a]
    }
}

/// Discounted value iteration from `V = 0`. Stops once successive iterates
/// differ by less than `tol (1-β) / (2β)` in sup norm, which puts the greedy
/// value within `tol` of the fixed point.
pub fn value_iteration(mdp: &FiniteMdp, beta: f64, tol: f64, max_iter: usize) -> Result<MdpSolution> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::invalid(format!("discount factor must lie in [0, 1), got {beta}")));
    }
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let threshold = if beta == 0.0 { f64::INFINITY } else { tol * (1.0 - beta) / (2.0 * beta) };
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut v = vec![0.0; ns];
    let mut q = vec![0.0; ns * na];
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        mdp.q_from(&v, beta, &mut q);
        let (next, policy) = row_minima(&q, na);
        residual = sup_diff(&next, &v);
        v = next;
        if residual < threshold || residual == 0.0 {
            return Ok(MdpSolution {
                v,
                q,
                policy,
                gain: None,
                rho: None,
                residual,
                iterations: it,
            });
        }
    }
    let (v_last, policy) = row_minima(&q, na);
    Err(Error::NotConverged {
        iterations: max_iter,
        residual,
        last: Box::new(MdpSolution {
            v: v_last,
            q,
            policy,
            gain: None,
            rho: None,
            residual,
            iterations: max_iter,
        }),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RviOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Reference state whose relative value is pinned to zero.
    pub reference: usize,
    /// Self-loop weight `τ` of the transform `τI + (1-τ)P`, which leaves
    /// gains and optimal policies unchanged and makes every chain aperiodic.
    pub aperiodicity: f64,
}

impl Default for RviOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 1_000_000,
            reference: 0,
            aperiodicity: 0.5,
        }
    }
}

/// Average-cost relative value iteration with reference state 0.
pub fn relative_value_iteration(mdp: &FiniteMdp, tol: f64, max_iter: usize) -> Result<MdpSolution> {
    relative_value_iteration_with(
        mdp,
        RviOptions {
            tol,
            max_iter,
            ..Default::default()
        },
    )
}

/// Iterates `W = min_a (C + P̃ V)`, `V ← W - W[ref]` until the span of
/// `W - V` drops below `tol`. The returned `v` is the relative value of the
/// original chain (`v[ref] = 0`), `q = C + P v - gain`.
pub fn relative_value_iteration_with(mdp: &FiniteMdp, opts: RviOptions) -> Result<MdpSolution> {
    if !(opts.tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    if opts.reference >= mdp.n_states {
        return Err(Error::invalid("reference state out of range"));
    }
    if !(0.0..1.0).contains(&opts.aperiodicity) {
        return Err(Error::invalid("aperiodicity weight must lie in [0, 1)"));
    }
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let tau = opts.aperiodicity;
    let mut v = vec![0.0; ns];
    let mut q = vec![0.0; ns * na];
    let mut residual = f64::INFINITY;
    let mut gain = 0.0;
    let mut converged_at = None;
    for it in 1..=opts.max_iter {
        mdp.q_from(&v, 1.0 - tau, &mut q);
        let (mut w, _) = row_minima(&q, na);
        for (wi, vi) in w.iter_mut().zip(&v) {
            *wi += tau * vi;
        }
        let (lo, hi) = w
            .iter()
            .zip(&v)
            .map(|(w, v)| w - v)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d), hi.max(d)));
        residual = hi - lo;
        gain = w[opts.reference];
        v = w.iter().map(|wi| wi - gain).collect();
        if residual < opts.tol {
            converged_at = Some(it);
            break;
        }
    }
    // relative values of the untransformed chain
    let h: Vec<f64> = v.iter().map(|vi| (1.0 - tau) * vi).collect();
    mdp.q_from(&h, 1.0, &mut q);
    q.iter_mut().for_each(|qi| *qi -= gain);
    let (v_rel, policy) = row_minima(&q, na);
    let sol = MdpSolution {
        v: v_rel,
        q,
        policy,
        gain: Some(gain),
        rho: Some(gain / mdp.h),
        residual,
        iterations: converged_at.unwrap_or(opts.max_iter),
    };
    match converged_at {
        Some(_) => Ok(sol),
        None => Err(Error::NotConverged {
            iterations: opts.max_iter,
            residual,
            last: Box::new(sol),
        }),
    }
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Within-bin weight measure `π_i` used to draw start states.
#[derive(Clone, Debug, PartialEq)]
pub enum WeightMode {
    /// Uniform over each cell; the overflow bin uses a shell of width 10%
    /// of `N/2` just outside the cube.
    Uniform,
    /// Point mass at each bin's representative.
    Representative,
    /// States recorded while exploring, per bin. Bins without records fall
    /// back to `Uniform` and are flagged.
    Empirical(VisitRecord),
}

/// Sampled states observed in each bin.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VisitRecord {
    pub states: Vec<Vec<Vec<f64>>>,
}

impl VisitRecord {
    pub fn new(n_bins: usize) -> Self {
        Self {
            states: vec![Vec::new(); n_bins],
        }
    }
}

/// Relative shell width used for overflow-bin start states.
pub const OVERFLOW_SHELL: f64 = 0.1;

/// Draws a start state for bin `bin` under `mode`. Returns `true` in the
/// second slot when an empirical bin had to fall back to uniform sampling.
fn draw_start(q: &StateQuantizer, bin: usize, mode: &WeightMode, rng: &mut SimRng) -> (Vec<f64>, bool) {
    match mode {
        WeightMode::Representative => (q.representative(bin), false),
        WeightMode::Empirical(rec) => match rec.states.get(bin) {
            Some(list) if !list.is_empty() => (list[rng.random_range(0..list.len())].clone(), false),
            _ => (draw_uniform(q, bin, rng), true),
        },
        WeightMode::Uniform => (draw_uniform(q, bin, rng), false),
    }
}

fn draw_uniform(q: &StateQuantizer, bin: usize, rng: &mut SimRng) -> Vec<f64> {
    if let Some(cell) = q.cell_bounds(bin) {
        return cell.iter().map(|iv| iv.lo + rng.random::<f64>() * iv.width()).collect();
    }
    let half = 0.5 * q.side() * (1.0 + OVERFLOW_SHELL);
    loop {
        let x: Vec<f64> = q
            .center()
            .iter()
            .map(|c| c + (2.0 * rng.random::<f64>() - 1.0) * half)
            .collect();
        if !q.contains(&x) {
            return x;
        }
    }
}

/// Monte Carlo estimate of `C_h(x̂_i, ζ) = ∫ c_h dπ_i` and
/// `P_h(x̂_j | x̂_i, ζ) = ∫ T_h(B_j | x, ζ) dπ_i` with `n_samples` draws per
/// pair. Each pair uses its own random stream, so the result does not depend
/// on the thread count.
pub fn estimate_mdp(
    model: &DiffusionModel,
    sim: &SimConfig,
    quantizer: &StateQuantizer,
    grid: &ActionGrid,
    n_samples: usize,
    mode: &WeightMode,
) -> Result<FiniteMdp> {
    if n_samples == 0 {
        return Err(Error::invalid("n_samples_per_pair must be at least 1"));
    }
    if quantizer.dim() != model.state_dim {
        return Err(Error::invalid("quantizer and model dimensions differ"));
    }
    Integrator::new(model, sim)?;
    let ns = quantizer.n_bins();
    let na = grid.len();
    let rows: Vec<(Vec<f64>, f64, bool)> = (0..ns * na)
        .into_par_iter()
        .map(|pair| {
            let (bin, action) = (pair / na, pair % na);
            let mut rng = stream_rng(sim.seed, stream::ESTIMATE + pair as u64);
            let mut integ = Integrator::new(model, sim)?;
            let u = grid.point(action);
            let mut counts = vec![0u64; ns];
            let mut cost = 0.0;
            let mut fell_back = false;
            for _ in 0..n_samples {
                let (mut x, fb) = draw_start(quantizer, bin, mode, &mut rng);
                fell_back |= fb;
                cost += integ.advance(&mut x, u, &mut rng, None)?.start;
                counts[quantizer.bin_of(&x)] += 1;
            }
            let row = counts.iter().map(|&n| n as f64 / n_samples as f64).collect();
            Ok((row, cost / n_samples as f64, fell_back))
        })
        .collect::<Result<_>>()?;
    let mut p = Vec::with_capacity(ns * na * ns);
    let mut c = Vec::with_capacity(ns * na);
    let mut fallback = Vec::new();
    for (pair, (row, cost, fb)) in rows.into_iter().enumerate() {
        p.extend(row);
        c.push(cost);
        if fb && !fallback.contains(&(pair / na)) {
            fallback.push(pair / na);
        }
    }
    let mut mdp = FiniteMdp::with_visits(ns, na, sim.h, p, c, vec![n_samples as u64; ns * na])?;
    mdp.fallback_bins = fallback;
    Ok(mdp)
}
