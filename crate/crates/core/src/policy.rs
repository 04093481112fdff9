//! Control laws: how an action is chosen at each sampling instant.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::quantize::{ActionGrid, StateQuantizer};
use crate::rng::SimRng;

/// Maps the sampled state to the control held over the next interval.
pub trait ControlLaw: Sync {
    fn control<'a>(&'a self, x: &[f64], rng: &mut SimRng) -> &'a [f64];
}

/// Stationary policy on quantizer bins: action index per bin.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    pub actions: Vec<usize>,
}

impl Policy {
    pub fn constant(n_states: usize, action: usize) -> Self {
        Self {
            actions: vec![action; n_states],
        }
    }

    pub fn action(&self, bin: usize) -> usize {
        self.actions[bin]
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// `U(t) = γ(φ_X(X(kh)))` on `[kh, (k+1)h)`.
#[derive(Clone, Copy, Debug)]
pub struct QuantizedPolicy<'a> {
    pub quantizer: &'a StateQuantizer,
    pub grid: &'a ActionGrid,
    pub policy: &'a Policy,
}

impl<'a> QuantizedPolicy<'a> {
    pub fn new(quantizer: &'a StateQuantizer, grid: &'a ActionGrid, policy: &'a Policy) -> Self {
        assert_eq!(policy.len(), quantizer.n_bins(), "policy must cover every bin");
        assert!(policy.actions.iter().all(|&a| a < grid.len()), "policy action out of range");
        Self { quantizer, grid, policy }
    }
}

impl ControlLaw for QuantizedPolicy<'_> {
    fn control<'a>(&'a self, x: &[f64], _rng: &mut SimRng) -> &'a [f64] {
        self.grid.point(self.policy.action(self.quantizer.bin_of(x)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConstantControl(Vec<f64>);

impl ConstantControl {
    pub fn new(u: Vec<f64>) -> Self {
        Self(u)
    }

    pub fn zero(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }
}

impl ControlLaw for ConstantControl {
    fn control<'a>(&'a self, _x: &[f64], _rng: &mut SimRng) -> &'a [f64] {
        &self.0
    }
}

/// Pure random exploration: a uniformly drawn grid action per interval.
#[derive(Clone, Copy, Debug)]
pub struct UniformExploration<'a> {
    pub grid: &'a ActionGrid,
}

impl ControlLaw for UniformExploration<'_> {
    fn control<'a>(&'a self, _x: &[f64], rng: &mut SimRng) -> &'a [f64] {
        self.grid.point(rng.random_range(0..self.grid.len()))
    }
}
