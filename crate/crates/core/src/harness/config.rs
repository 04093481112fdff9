//! TOML experiment configuration.
//!
//! ```toml
//! experiment_id = "dw-h010"
//! criterion = "discounted"          # or "average"
//!
//! [model]
//! name = "double_well"              # any model parameter may follow
//! sigma = 0.25
//!
//! [sim]
//! h = 0.1
//! dt = 0.01
//! horizon = 50.0
//! seed = 1
//!
//! [quantizer]
//! side = 2.8                        # bins_per_axis omitted: taken from the h-indexed grid table
//!
//! [actions]                         # n_u omitted: same table
//!
//! [learning]
//! steps = 5000000
//! beta_h = 0.95
//!
//! [evaluation]
//! criterion = "average"
//! n_replicas = 1000
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::{CostMode, Criterion, EvalOptions};
use crate::qlearn::{LearnConfig, Variant};
use crate::quantize::{build_action_grid, ActionGrid, StateQuantizer};
use crate::rng::child_seed;
use crate::sde::{DiffusionModel, ModelSpec, SimConfig};

use super::presets::table1_grid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerSection {
    /// Cube side `N`.
    pub side: f64,
    /// Cells per axis; defaults to the state-bin count of the grid table at `sim.h`.
    #[serde(default)]
    pub bins_per_axis: Option<usize>,
    /// Defaults to the origin.
    #[serde(default)]
    pub center: Option<Vec<f64>>,
    #[serde(default)]
    pub overflow_rep: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionSection {
    /// Points per action axis; defaults to the grid table at `sim.h`.
    #[serde(default)]
    pub n_u: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    /// Criterion the learned policy is evaluated under; defaults to the
    /// learning criterion.
    pub criterion: Option<Criterion>,
    pub n_replicas: usize,
    pub cost_mode: CostMode,
    pub burn_in: f64,
    pub auto_extend: bool,
    pub truncation_tol: f64,
    pub max_horizon: f64,
    /// Continuous discount rate; defaults to `−ln(beta_h)/h`.
    pub alpha_rate: Option<f64>,
    /// Defaults to the quantizer center.
    pub x0: Option<Vec<f64>>,
    /// Defaults to `sim.horizon`.
    pub horizon: Option<f64>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        let o = EvalOptions::default();
        Self {
            criterion: None,
            n_replicas: o.n_replicas,
            cost_mode: o.cost_mode,
            burn_in: o.burn_in,
            auto_extend: o.auto_extend,
            truncation_tol: o.truncation_tol,
            max_horizon: o.max_horizon,
            alpha_rate: None,
            x0: None,
            horizon: None,
        }
    }
}

impl EvaluationSection {
    pub fn options(&self) -> EvalOptions {
        EvalOptions {
            n_replicas: self.n_replicas,
            cost_mode: self.cost_mode,
            burn_in: self.burn_in,
            auto_extend: self.auto_extend,
            truncation_tol: self.truncation_tol,
            max_horizon: self.max_horizon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    /// Learning criterion: Algorithm variant and default evaluation.
    pub criterion: Criterion,
    pub model: ModelSpec,
    pub sim: SimConfig,
    pub quantizer: QuantizerSection,
    pub actions: ActionSection,
    #[serde(default)]
    pub learning: LearnConfig,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    /// Relative paths resolve against the output root.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// Everything a run needs, built and checked.
#[derive(Debug)]
pub struct Resolved {
    pub model: DiffusionModel,
    pub sim: SimConfig,
    pub quantizer: StateQuantizer,
    pub grid: ActionGrid,
    pub learn: LearnConfig,
    pub variant: Variant,
    pub eval_sim: SimConfig,
    pub eval: EvalOptions,
    pub eval_criterion: Criterion,
    pub alpha_rate: f64,
    pub x0: Vec<f64>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::invalid(e.message().to_string()))?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::invalid(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(e.to_string()))
    }

    /// Master seed for all stages.
    pub fn seed(&self) -> u64 {
        self.sim.seed
    }

    pub fn learn_seed(&self) -> u64 {
        child_seed(self.sim.seed, 1)
    }

    pub fn eval_seed(&self) -> u64 {
        child_seed(self.sim.seed, 2)
    }

    /// Replaces the master seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.sim.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.resolve().map(|_| ())
    }

    pub fn resolve(&self) -> Result<Resolved> {
        if self.experiment_id.is_empty()
            || !self
                .experiment_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.')
        {
            return Err(Error::invalid(format!(
                "experiment_id `{}` must be non-empty and use only [A-Za-z0-9._-]",
                self.experiment_id
            )));
        }
        if self.learning.seed != 0 {
            return Err(Error::invalid("learning.seed is derived from sim.seed; set sim.seed instead"));
        }
        let model = self.model.build()?;
        self.sim.validate()?;
        let table = table1_grid(self.sim.h);
        let k = match (self.quantizer.bins_per_axis, table) {
            (Some(k), _) => k,
            (None, Some((n_x, _))) => n_x,
            (None, None) => {
                return Err(Error::invalid(format!(
                    "quantizer.bins_per_axis is required: h={} has no grid-table entry",
                    self.sim.h
                )))
            }
        };
        let n_u = match (self.actions.n_u, table) {
            (Some(n), _) => n,
            (None, Some((_, n_u))) => n_u,
            (None, None) => {
                return Err(Error::invalid(format!(
                    "actions.n_u is required: h={} has no grid-table entry",
                    self.sim.h
                )))
            }
        };
        let center = self.quantizer.center.clone().unwrap_or_else(|| vec![0.0; model.state_dim]);
        if center.len() != model.state_dim {
            return Err(Error::invalid(format!(
                "quantizer.center has dimension {}, model `{}` has state dimension {}",
                center.len(),
                model.name,
                model.state_dim
            )));
        }
        let quantizer = StateQuantizer::with_center(center, self.quantizer.side, k, self.quantizer.overflow_rep.clone())?;
        let grid = build_action_grid(&model.action_box, n_u)?;
        let learn = LearnConfig {
            seed: self.learn_seed(),
            ..self.learning.clone()
        };
        learn.validate()?;
        let variant = match self.criterion {
            Criterion::Discounted => Variant::Discounted,
            Criterion::Average => Variant::Average,
        };
        let eval = self.evaluation.options();
        eval.validate()?;
        let mut eval_sim = SimConfig {
            seed: self.eval_seed(),
            ..self.sim
        };
        if let Some(hz) = self.evaluation.horizon {
            eval_sim.horizon = hz;
        }
        eval_sim.validate()?;
        let alpha_rate = match self.evaluation.alpha_rate {
            Some(a) => a,
            None if learn.beta_h > 0.0 => -learn.beta_h.ln() / self.sim.h,
            None => return Err(Error::invalid("evaluation.alpha_rate is required when learning.beta_h is 0")),
        };
        let x0 = self.evaluation.x0.clone().unwrap_or_else(|| quantizer.center().to_vec());
        if x0.len() != model.state_dim {
            return Err(Error::invalid(format!(
                "evaluation.x0 has dimension {}, expected {}",
                x0.len(),
                model.state_dim
            )));
        }
        Ok(Resolved {
            model,
            sim: self.sim,
            quantizer,
            grid,
            learn,
            variant,
            eval_sim,
            eval,
            eval_criterion: self.evaluation.criterion.unwrap_or(self.criterion),
            alpha_rate,
            x0,
        })
    }
}
