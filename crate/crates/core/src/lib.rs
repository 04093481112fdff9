//! Quantized Q-learning for controlled diffusions.
//!
//! The pipeline: simulate a controlled SDE under piecewise-constant controls
//! ([`sde`]), quantize states and actions ([`quantize`]), learn discounted or
//! average-cost Q-tables on one exploration trajectory ([`qlearn`]), check
//! them against exact solutions of the induced finite MDP ([`mdp`]), evaluate
//! the resulting policies by Monte Carlo ([`evaluate`]) and report the
//! discretization error bounds ([`bounds`]). [`harness`] drives complete
//! experiments from config files.

pub mod bounds;
pub mod error;
pub mod evaluate;
pub mod harness;
pub mod mdp;
pub mod persist;
pub mod policy;
pub mod qlearn;
pub mod quantize;
pub mod rng;
pub mod sde;

pub use error::{Error, Result};
pub use mdp::{estimate_mdp, relative_value_iteration, value_iteration, FiniteMdp, MdpSolution, WeightMode};
pub use policy::{ConstantControl, ControlLaw, Policy, QuantizedPolicy, UniformExploration};
pub use qlearn::{greedy_policy, run_q_learning, LearnConfig, LearningRate, QTable, Variant};
pub use quantize::{build_action_grid, build_quantizer, ActionGrid, StateQuantizer};
pub use sde::{builtin_model, DiffusionModel, ModelSpec, Scheme, SimConfig, Trajectory};
