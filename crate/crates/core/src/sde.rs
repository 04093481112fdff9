//! Controlled diffusions `dX = b(X, U) dt + σ(X) dW` and their simulation
//! under controls that are held constant over sampling intervals of length
//! `h`, integrated with a finer substep `dt`.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::ControlLaw;
use crate::rng::{stream_rng, SimRng};

pub type DriftFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
pub type CostFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
pub type DiffusionFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Closed interval `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

/// Diagonal diffusion coefficient.
#[derive(Clone)]
pub enum Diffusion {
    /// `σ_i` independent of the state.
    Constant(Vec<f64>),
    /// `g_i(x) = σ_i x_i`.
    Multiplicative(Vec<f64>),
    /// Arbitrary diagonal coefficient; no derivative is known, so only
    /// Euler–Maruyama can integrate it.
    Custom(DiffusionFn),
}

impl Diffusion {
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Diffusion::Constant(s) => out.copy_from_slice(s),
            Diffusion::Multiplicative(s) => {
                for ((o, &si), &xi) in out.iter_mut().zip(s).zip(x) {
                    *o = si * xi;
                }
            }
            Diffusion::Custom(f) => f(x, out),
        }
    }

    /// `∂g_i/∂x_i`, where available.
    fn derivative(&self) -> Option<&[f64]> {
        match self {
            Diffusion::Constant(_) => None,
            Diffusion::Multiplicative(s) => Some(s),
            Diffusion::Custom(_) => None,
        }
    }

    fn is_zero(&self) -> bool {
        match self {
            Diffusion::Constant(s) | Diffusion::Multiplicative(s) => s.iter().all(|&v| v == 0.0),
            Diffusion::Custom(_) => false,
        }
    }
}

impl fmt::Debug for Diffusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diffusion::Constant(s) => f.debug_tuple("Constant").field(s).finish(),
            Diffusion::Multiplicative(s) => f.debug_tuple("Multiplicative").field(s).finish(),
            Diffusion::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Post-step projection applied to every integrated state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateClip {
    #[default]
    None,
    /// Negative coordinates are set to zero.
    ReflectAtZero,
}

impl StateClip {
    pub fn apply(&self, x: &mut [f64]) {
        if let StateClip::ReflectAtZero = self {
            for v in x.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
    }
}

/// One control problem: drift, diffusion, running cost and admissible boxes.
#[derive(Clone)]
pub struct DiffusionModel {
    pub name: String,
    pub state_dim: usize,
    pub action_box: Vec<Interval>,
    pub state_clip: StateClip,
    pub diffusion: Diffusion,
    drift: DriftFn,
    cost: CostFn,
}

impl fmt::Debug for DiffusionModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffusionModel")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("action_box", &self.action_box)
            .field("state_clip", &self.state_clip)
            .field("diffusion", &self.diffusion)
            .finish_non_exhaustive()
    }
}

impl DiffusionModel {
    pub fn new(
        name: impl Into<String>,
        state_dim: usize,
        action_box: Vec<Interval>,
        drift: DriftFn,
        diffusion: Diffusion,
        cost: CostFn,
    ) -> Self {
        Self {
            name: name.into(),
            state_dim,
            action_box,
            state_clip: StateClip::None,
            diffusion,
            drift,
            cost,
        }
    }

    pub fn with_clip(mut self, clip: StateClip) -> Self {
        self.state_clip = clip;
        self
    }

    pub fn action_dim(&self) -> usize {
        self.action_box.len()
    }

    pub fn drift_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        (self.drift)(x, u, out)
    }

    pub fn drift(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.state_dim];
        self.drift_into(x, u, &mut out);
        out
    }

    pub fn diffusion_at(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.state_dim];
        self.diffusion.eval(x, &mut out);
        out
    }

    pub fn running_cost(&self, x: &[f64], u: &[f64]) -> f64 {
        (self.cost)(x, u)
    }

    /// True if the noise term vanishes identically.
    pub fn is_deterministic(&self) -> bool {
        self.diffusion.is_zero()
    }
}

/// Parameterised built-in problems. Serialized with `name` as the tag, so a
/// config can say `name = "logistic"` and override any field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum ModelSpec {
    DoubleWell(DoubleWellParams),
    Logistic(LogisticParams),
    LinearOu(LinearOuParams),
    ConstantCost(ConstantCostParams),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DoubleWellParams {
    pub sigma: f64,
    pub q: f64,
    pub r: f64,
    pub action_box: Interval,
}

impl Default for DoubleWellParams {
    fn default() -> Self {
        Self {
            sigma: 0.25,
            q: 1.0,
            r: 0.1,
            action_box: Interval::new(-0.5, 0.5),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogisticParams {
    pub growth: f64,
    pub capacity: f64,
    pub sigma: f64,
    pub q: f64,
    pub r: f64,
    pub action_box: Interval,
}

impl Default for LogisticParams {
    fn default() -> Self {
        Self {
            growth: 1.0,
            capacity: 1.0,
            sigma: 0.4,
            q: 10.0,
            r: 1.0,
            action_box: Interval::new(-5.0, 5.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearOuParams {
    pub a: f64,
    pub sigma: f64,
    pub dim: usize,
    pub action_box: Interval,
}

impl Default for LinearOuParams {
    fn default() -> Self {
        Self {
            a: 1.0,
            sigma: 0.5,
            dim: 1,
            action_box: Interval::new(-1.0, 1.0),
        }
    }
}

/// Toy problem with `c ≡ cost` and a stable linear drift `-x + u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstantCostParams {
    pub cost: f64,
    pub sigma: f64,
    pub action_box: Interval,
}

impl Default for ConstantCostParams {
    fn default() -> Self {
        Self {
            cost: 1.0,
            sigma: 0.1,
            action_box: Interval::new(-1.0, 1.0),
        }
    }
}

impl ModelSpec {
    /// Default parameters for a named model.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "double_well" => Ok(ModelSpec::DoubleWell(Default::default())),
            "logistic" => Ok(ModelSpec::Logistic(Default::default())),
            "linear_ou" => Ok(ModelSpec::LinearOu(Default::default())),
            "constant_cost" => Ok(ModelSpec::ConstantCost(Default::default())),
            other => Err(Error::NotFound {
                kind: "model",
                name: other.to_string(),
            }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::DoubleWell(_) => "double_well",
            ModelSpec::Logistic(_) => "logistic",
            ModelSpec::LinearOu(_) => "linear_ou",
            ModelSpec::ConstantCost(_) => "constant_cost",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (sigma, bx) = match self {
            ModelSpec::DoubleWell(p) => (p.sigma, p.action_box),
            ModelSpec::Logistic(p) => {
                if p.capacity <= 0.0 {
                    return Err(Error::invalid("model.capacity must be positive"));
                }
                (p.sigma, p.action_box)
            }
            ModelSpec::LinearOu(p) => {
                if p.dim == 0 {
                    return Err(Error::invalid("model.dim must be at least 1"));
                }
                (p.sigma, p.action_box)
            }
            ModelSpec::ConstantCost(p) => {
                if p.cost < 0.0 {
                    return Err(Error::invalid("model.cost must be nonnegative"));
                }
                (p.sigma, p.action_box)
            }
        };
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::invalid("model.sigma must be finite and nonnegative"));
        }
        if !(bx.lo <= bx.hi) {
            return Err(Error::invalid("model.action_box must satisfy lo <= hi"));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<DiffusionModel> {
        self.validate()?;
        let model = match self.clone() {
            ModelSpec::DoubleWell(p) => DiffusionModel::new(
                "double_well",
                1,
                vec![p.action_box],
                Arc::new(|x: &[f64], u: &[f64], out: &mut [f64]| {
                    out[0] = x[0] - x[0] * x[0] * x[0] + u[0];
                }),
                Diffusion::Constant(vec![p.sigma]),
                Arc::new(move |x: &[f64], u: &[f64]| p.q * x[0] * x[0] + p.r * u[0] * u[0]),
            ),
            ModelSpec::Logistic(p) => {
                let (growth, capacity) = (p.growth, p.capacity);
                DiffusionModel::new(
                    "logistic",
                    1,
                    vec![p.action_box],
                    Arc::new(move |x: &[f64], u: &[f64], out: &mut [f64]| {
                        out[0] = growth * x[0] * (1.0 - x[0] / capacity) + u[0];
                    }),
                    Diffusion::Multiplicative(vec![p.sigma]),
                    Arc::new(move |x: &[f64], u: &[f64]| {
                        let e = x[0] - 0.5 * capacity;
                        p.q * e * e + p.r * u[0] * u[0]
                    }),
                )
                .with_clip(StateClip::ReflectAtZero)
            }
            ModelSpec::LinearOu(p) => {
                let a = p.a;
                DiffusionModel::new(
                    "linear_ou",
                    p.dim,
                    vec![p.action_box; p.dim],
                    Arc::new(move |x: &[f64], u: &[f64], out: &mut [f64]| {
                        for ((o, &xi), &ui) in out.iter_mut().zip(x).zip(u) {
                            *o = -a * xi + ui;
                        }
                    }),
                    Diffusion::Constant(vec![p.sigma; p.dim]),
                    Arc::new(|x: &[f64], _u: &[f64]| x.iter().map(|v| v * v).sum()),
                )
            }
            ModelSpec::ConstantCost(p) => {
                let c = p.cost;
                DiffusionModel::new(
                    "constant_cost",
                    1,
                    vec![p.action_box],
                    Arc::new(|x: &[f64], u: &[f64], out: &mut [f64]| {
                        out[0] = -x[0] + u[0];
                    }),
                    Diffusion::Constant(vec![p.sigma]),
                    Arc::new(move |_x: &[f64], _u: &[f64]| c),
                )
            }
        };
        Ok(model)
    }
}

/// Default instance of a named model (`double_well`, `logistic`,
/// `linear_ou`, `constant_cost`).
pub fn builtin_model(name: &str) -> Result<DiffusionModel> {
    ModelSpec::from_name(name)?.build()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    EulerMaruyama,
    Milstein,
}

impl Scheme {
    pub fn label(&self) -> &'static str {
        match self {
            Scheme::EulerMaruyama => "euler_maruyama",
            Scheme::Milstein => "milstein",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Control (sampling) interval.
    pub h: f64,
    /// Integration substep.
    pub dt: f64,
    /// Total simulated time.
    pub horizon: f64,
    pub seed: u64,
    #[serde(default)]
    pub scheme: Scheme,
}

const DIVISIBILITY_TOL: f64 = 1e-9;

fn integer_ratio(num: f64, den: f64) -> Option<usize> {
    let r = num / den;
    let n = r.round();
    if n >= 0.0 && (r - n).abs() <= DIVISIBILITY_TOL * n.max(1.0) {
        Some(n as usize)
    } else {
        None
    }
}

impl SimConfig {
    pub fn new(h: f64, dt: f64, horizon: f64, seed: u64) -> Self {
        Self {
            h,
            dt,
            horizon,
            seed,
            scheme: Scheme::EulerMaruyama,
        }
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid(format!("sim.dt must be positive, got {}", self.dt)));
        }
        if !(self.h >= self.dt && self.h.is_finite()) {
            return Err(Error::invalid(format!(
                "sim.h must satisfy dt <= h, got h={} dt={}",
                self.h, self.dt
            )));
        }
        if integer_ratio(self.h, self.dt).is_none() {
            return Err(Error::invalid(format!(
                "sim.dt={} does not divide sim.h={}",
                self.dt, self.h
            )));
        }
        if !(self.horizon >= 0.0) || integer_ratio(self.horizon, self.h).is_none() {
            return Err(Error::invalid(format!(
                "sim.h={} does not divide sim.horizon={}",
                self.h, self.horizon
            )));
        }
        Ok(())
    }

    /// Integration substeps per control interval.
    pub fn substeps(&self) -> usize {
        integer_ratio(self.h, self.dt).unwrap_or(1).max(1)
    }

    /// Number of control intervals in the horizon.
    pub fn intervals(&self) -> usize {
        integer_ratio(self.horizon, self.h).unwrap_or(0)
    }

    /// Horizon rounded to a whole number of intervals, at least `time`.
    pub fn horizon_covering(&self, time: f64) -> f64 {
        (time / self.h - DIVISIBILITY_TOL).ceil().max(0.0) * self.h
    }
}

fn check_finite(x: &[f64]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical {
            time: f64::NAN,
            state: x.to_vec(),
        })
    }
}

/// `x + b(x,u) dt + σ(x) dW`, then the model's state clip.
pub fn em_step(model: &DiffusionModel, x: &[f64], u: &[f64], dt: f64, dw: &[f64]) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::invalid("dt must be positive"));
    }
    let mut out = x.to_vec();
    let mut ws = Workspace::new(model.state_dim);
    ws.dw.copy_from_slice(dw);
    ws.step(model, Scheme::EulerMaruyama, &mut out, u, dt);
    check_finite(&out)?;
    Ok(out)
}

/// Euler–Maruyama plus the `½ g g' (dW² − dt)` correction. For
/// multiplicative noise `g = σx` this is `½ g(x) σ (dW² − dt)`; for constant
/// noise the correction vanishes.
pub fn milstein_step(model: &DiffusionModel, x: &[f64], u: &[f64], dt: f64, dw: &[f64]) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::invalid("dt must be positive"));
    }
    check_scheme(model, Scheme::Milstein)?;
    let mut out = x.to_vec();
    let mut ws = Workspace::new(model.state_dim);
    ws.dw.copy_from_slice(dw);
    ws.step(model, Scheme::Milstein, &mut out, u, dt);
    check_finite(&out)?;
    Ok(out)
}

fn check_scheme(model: &DiffusionModel, scheme: Scheme) -> Result<()> {
    if scheme == Scheme::Milstein && matches!(model.diffusion, Diffusion::Custom(_)) {
        return Err(Error::UnsupportedScheme {
            scheme: "milstein",
            model: model.name.clone(),
            reason: "diffusion coefficient has no known derivative",
        });
    }
    Ok(())
}

/// Scratch buffers for in-place integration.
#[derive(Debug, Clone)]
struct Workspace {
    drift: Vec<f64>,
    g: Vec<f64>,
    dw: Vec<f64>,
}

impl Workspace {
    fn new(d: usize) -> Self {
        Self {
            drift: vec![0.0; d],
            g: vec![0.0; d],
            dw: vec![0.0; d],
        }
    }

    fn draw_noise(&mut self, rng: &mut SimRng, sqrt_dt: f64) {
        for w in self.dw.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *w = z * sqrt_dt;
        }
    }

    /// One substep using the noise currently held in `self.dw`.
    fn step(&mut self, model: &DiffusionModel, scheme: Scheme, x: &mut [f64], u: &[f64], dt: f64) {
        model.drift_into(x, u, &mut self.drift);
        model.diffusion.eval(x, &mut self.g);
        let dg = match scheme {
            Scheme::Milstein => model.diffusion.derivative(),
            Scheme::EulerMaruyama => None,
        };
        for i in 0..x.len() {
            let dw = self.dw[i];
            let mut next = x[i] + self.drift[i] * dt + self.g[i] * dw;
            if let Some(dg) = dg {
                next += 0.5 * self.g[i] * dg[i] * (dw * dw - dt);
            }
            x[i] = next;
        }
        model.state_clip.apply(x);
    }
}

/// Costs accrued over one control interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntervalCost {
    /// `c(x_start, u) · h`.
    pub start: f64,
    /// `Σ_j e^{-rate·j·dt} c(x_j, u) dt` over the substeps, measured from the
    /// start of the interval. Present only when requested.
    pub integral: Option<f64>,
}

/// Integrates a model under a held control, one interval at a time.
#[derive(Debug, Clone)]
pub struct Integrator<'a> {
    model: &'a DiffusionModel,
    sim: SimConfig,
    substeps: usize,
    sqrt_dt: f64,
    ws: Workspace,
}

impl<'a> Integrator<'a> {
    pub fn new(model: &'a DiffusionModel, sim: &SimConfig) -> Result<Self> {
        sim.validate()?;
        check_scheme(model, sim.scheme)?;
        Ok(Self {
            model,
            sim: *sim,
            substeps: sim.substeps(),
            sqrt_dt: sim.dt.sqrt(),
            ws: Workspace::new(model.state_dim),
        })
    }

    pub fn model(&self) -> &DiffusionModel {
        self.model
    }

    pub fn sim(&self) -> &SimConfig {
        &self.sim
    }

    /// Advances `x` by one control interval with `u` held constant.
    pub fn advance(
        &mut self,
        x: &mut [f64],
        u: &[f64],
        rng: &mut SimRng,
        integral_rate: Option<f64>,
    ) -> Result<IntervalCost> {
        let dt = self.sim.dt;
        let start = self.model.running_cost(x, u) * self.sim.h;
        let mut integral = integral_rate.map(|_| 0.0);
        let decay = integral_rate.map(|r| (-r * dt).exp());
        let mut weight = 1.0;
        for _ in 0..self.substeps {
            if let (Some(acc), Some(decay)) = (integral.as_mut(), decay) {
                *acc += weight * self.model.running_cost(x, u) * dt;
                weight *= decay;
            }
            self.ws.draw_noise(rng, self.sqrt_dt);
            self.ws.step(self.model, self.sim.scheme, x, u, dt);
        }
        check_finite(x)?;
        Ok(IntervalCost { start, integral })
    }
}

/// One sampled transition of the time-discretized chain: terminal state after
/// `h` and the cost realization `c(x, u)·h`.
pub fn sample_transition(
    model: &DiffusionModel,
    sim: &SimConfig,
    x: &[f64],
    u: &[f64],
    rng: &mut SimRng,
) -> Result<(Vec<f64>, f64)> {
    let mut integ = Integrator::new(model, sim)?;
    let mut next = x.to_vec();
    let cost = integ.advance(&mut next, u, rng, None)?;
    Ok((next, cost.start))
}

/// Sampled path of the controlled process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Sampling instants `k·h`, `k = 0..=n`.
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Control held on `[t_k, t_{k+1})`.
    pub controls: Vec<Vec<f64>>,
    /// `c(x_k, u_k)·h` for each interval.
    pub costs: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    pub fn total_cost(&self) -> f64 {
        self.costs.iter().sum()
    }
}

/// Simulates `horizon / h` intervals from `x0`; the control is recomputed by
/// `law` only at sampling instants. Uses random stream `replica` of
/// `sim.seed`.
pub fn simulate_policy_replica(
    model: &DiffusionModel,
    sim: &SimConfig,
    law: &dyn ControlLaw,
    x0: &[f64],
    replica: u64,
) -> Result<Trajectory> {
    if x0.len() != model.state_dim {
        return Err(Error::invalid(format!(
            "x0 has dimension {}, model `{}` expects {}",
            x0.len(),
            model.name,
            model.state_dim
        )));
    }
    let mut integ = Integrator::new(model, sim)?;
    let mut rng = stream_rng(sim.seed, replica);
    let n = sim.intervals();
    let mut traj = Trajectory {
        times: Vec::with_capacity(n + 1),
        states: Vec::with_capacity(n + 1),
        controls: Vec::with_capacity(n),
        costs: Vec::with_capacity(n),
    };
    let mut x = x0.to_vec();
    traj.times.push(0.0);
    traj.states.push(x.clone());
    for k in 0..n {
        let u = law.control(&x, &mut rng).to_vec();
        let cost = integ.advance(&mut x, &u, &mut rng, None).map_err(|e| match e {
            Error::Numerical { state, .. } => Error::Numerical {
                time: (k + 1) as f64 * sim.h,
                state,
            },
            other => other,
        })?;
        traj.times.push((k + 1) as f64 * sim.h);
        traj.states.push(x.clone());
        traj.controls.push(u);
        traj.costs.push(cost.start);
    }
    Ok(traj)
}

pub fn simulate_policy(
    model: &DiffusionModel,
    sim: &SimConfig,
    law: &dyn ControlLaw,
    x0: &[f64],
) -> Result<Trajectory> {
    simulate_policy_replica(model, sim, law, x0, 0)
}
