//! Closed-form discretization error bounds.
//!
//! The constants that the analysis leaves implicit (`K`, `C`, `λ`, `α_c`,
//! the Lyapunov pair `C_0, C_1`) are user supplied; the functions here only
//! evaluate the formulas, so results are rate instruments rather than
//! certified error certificates.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantize::StateQuantizer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundParams {
    /// Time-discretization constant `K` (depends on bounds of `b`, `σ`).
    pub k_time: f64,
    /// Continuous discount rate `α`.
    pub alpha_rate: f64,
    /// Sampling interval.
    pub h: f64,
    /// `e^{−αh}`; recomputed by [`BoundParams::new`].
    pub beta: f64,
    pub d: usize,
    /// Lyapunov exponent `m` of `V(x) = ‖x‖^m`.
    pub m: f64,
    /// `‖c‖∞`.
    pub c_inf: f64,
    /// State-Lipschitz constant of the running cost.
    pub alpha_c: f64,
    /// Gaussian density-gradient constants, `C ≥ 1`, `λ ∈ (0, 1]`.
    pub c_gauss: f64,
    pub lambda_gauss: f64,
    /// Overrides the derived `K_T = C √d (π/λ)^{d/2}` when set.
    pub k_tv: Option<f64>,
    pub c0_lyap: f64,
    pub c1_lyap: f64,
    /// `‖x_0‖^m`.
    pub x0_norm_m: f64,
    /// Cube side `N`.
    pub n_side: f64,
    /// Interior bin count `M`.
    pub m_bins: f64,
}

impl Default for BoundParams {
    fn default() -> Self {
        Self::new(1.0, 1.0, 0.1)
    }
}

impl BoundParams {
    /// Unit constants at the given rate and interval.
    pub fn new(k_time: f64, alpha_rate: f64, h: f64) -> Self {
        Self {
            k_time,
            alpha_rate,
            h,
            beta: (-alpha_rate * h).exp(),
            d: 1,
            m: 2.0,
            c_inf: 1.0,
            alpha_c: 1.0,
            c_gauss: 1.0,
            lambda_gauss: 1.0,
            k_tv: None,
            c0_lyap: 1.0,
            c1_lyap: 1.0,
            x0_norm_m: 1.0,
            n_side: 2.0,
            m_bins: 16.0,
        }
    }

    /// Sets `h` and keeps `β = e^{−αh}` consistent.
    pub fn with_h(mut self, h: f64) -> Self {
        self.h = h;
        self.beta = (-self.alpha_rate * h).exp();
        self
    }

    pub fn with_alpha_rate(mut self, alpha_rate: f64) -> Self {
        self.alpha_rate = alpha_rate;
        self.beta = (-alpha_rate * self.h).exp();
        self
    }

    pub fn with_grid(mut self, n_side: f64, m_bins: f64) -> Self {
        self.n_side = n_side;
        self.m_bins = m_bins;
        self
    }

    /// `N = M^{1/(d+m)}`, the side that balances the two error terms.
    pub fn balanced_side(&self) -> f64 {
        self.m_bins.powf(1.0 / (self.d as f64 + self.m))
    }

    pub fn validate(&self) -> Result<()> {
        let expected = (-self.alpha_rate * self.h).exp();
        if (self.beta - expected).abs() > 1e-12 * expected.max(1e-300) {
            return Err(Error::invalid(format!(
                "beta={} is not e^(-alpha h)={expected}",
                self.beta
            )));
        }
        if self.beta >= 1.0 {
            return Err(Error::invalid("beta must be below 1 (alpha_rate and h positive)"));
        }
        let positive = [
            ("k_time", self.k_time),
            ("alpha_rate", self.alpha_rate),
            ("h", self.h),
            ("m", self.m),
            ("c_inf", self.c_inf),
            ("c_gauss", self.c_gauss),
            ("lambda_gauss", self.lambda_gauss),
            ("c1_lyap", self.c1_lyap),
            ("n_side", self.n_side),
            ("m_bins", self.m_bins),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("bound parameter {name} must be positive, got {v}")));
            }
        }
        if self.d == 0 {
            return Err(Error::invalid("bound parameter d must be at least 1"));
        }
        if self.lambda_gauss > 1.0 || self.c_gauss < 1.0 {
            return Err(Error::invalid("Gaussian constants need C >= 1 and lambda in (0, 1]"));
        }
        if self.alpha_c < 0.0 || self.c0_lyap < 0.0 || self.x0_norm_m < 0.0 {
            return Err(Error::invalid("alpha_c, c0_lyap and x0_norm_m must be nonnegative"));
        }
        Ok(())
    }

    /// `K_T`, the `h`-free part of the TV-Lipschitz constant.
    pub fn k_tv(&self) -> f64 {
        self.k_tv.unwrap_or_else(|| {
            let d = self.d as f64;
            self.c_gauss * d.sqrt() * (PI / self.lambda_gauss).powf(d / 2.0)
        })
    }

    /// Weight `β‖c‖∞ / (1−β)` of the transition loss.
    fn continuation_weight(&self) -> f64 {
        self.beta * self.c_inf / (1.0 - self.beta)
    }
}

/// `K h / (1 − e^{−αh}) · (h + √(2h/π))`: value gap between the diffusion
/// under the interpolated control and the sampled chain.
pub fn time_disc_bound(p: &BoundParams) -> f64 {
    let h = p.h;
    p.k_time * h / (1.0 - (-p.alpha_rate * h).exp()) * (h + (2.0 * h / PI).sqrt())
}

/// Lipschitz coefficient of `x ↦ T_h(·|x, ζ)` in total variation:
/// `C √d h^{−1/2} (π/λ)^{d/2}`.
pub fn tv_lipschitz_constant(p: &BoundParams) -> f64 {
    p.k_tv() / p.h.sqrt()
}

/// How the in-bin mean distance `∫ ‖x − y‖ π_i(dy)` is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// Cell diameter `Δ√d`.
    #[default]
    Diameter,
    /// Exact mean of `|x − y|` for `y` uniform on the cell; `d = 1` only.
    ExactUniform1d,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossProfile {
    pub l_c: f64,
    pub l_t: f64,
    pub l: f64,
}

/// Pointwise losses `L_c`, `L_T` and `L = L_c + β‖c‖∞/(1−β) · L_T`.
pub fn loss_profile(p: &BoundParams, x: &[f64], q: &StateQuantizer, mode: DistanceMode) -> Result<LossProfile> {
    if p.beta >= 1.0 {
        return Err(Error::invalid("beta must be below 1"));
    }
    let bin = q.bin_of(x);
    let (l_c, l_t) = match q.cell_bounds(bin) {
        None => (2.0 * p.c_inf * p.h, 2.0),
        Some(cell) => {
            let dist = match mode {
                DistanceMode::Diameter => q.uniform_loss(),
                DistanceMode::ExactUniform1d => {
                    if q.dim() != 1 {
                        return Err(Error::invalid("exact in-bin distance is only available for d = 1"));
                    }
                    let (a, b) = (cell[0].lo, cell[0].hi);
                    let t = x[0];
                    ((t - a).powi(2) + (b - t).powi(2)) / (2.0 * (b - a))
                }
            };
            (p.alpha_c * p.h * dist, tv_lipschitz_constant(p) * dist)
        }
    };
    Ok(LossProfile {
        l_c,
        l_t,
        l: l_c + p.continuation_weight() * l_t,
    })
}

/// `C_1(h, β) = α_c h + β‖c‖∞/(1−β) · K_T h^{−1/2}`.
pub fn c1_term(p: &BoundParams) -> f64 {
    p.alpha_c * p.h + p.continuation_weight() * tv_lipschitz_constant(p)
}

/// `C_2(x_0, h, β) = (2‖c‖∞ h + 2β‖c‖∞/(1−β)) · max(‖x_0‖^m, C_0/C_1)`.
pub fn c2_term(p: &BoundParams) -> f64 {
    let moment = p.x0_norm_m.max(p.c0_lyap / p.c1_lyap);
    (2.0 * p.c_inf * p.h + 2.0 * p.continuation_weight()) * moment
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizationBound {
    /// `[C_1 N^d/M + C_2 (N/2)^{−m}] / (1−β)`.
    pub general: f64,
    /// `(C_1 + 2^m C_2) M^{−m/(d+m)} / (1−β)`, valid at `N = M^{1/(d+m)}`.
    pub collapsed: f64,
    /// `−m/(d+m)`.
    pub exponent: f64,
}

/// Space-quantization suboptimality bound for the discounted sampled chain.
pub fn quantization_bound(p: &BoundParams) -> Result<QuantizationBound> {
    if p.beta >= 1.0 {
        return Err(Error::invalid("quantization bound needs beta < 1"));
    }
    if !(p.m_bins >= 1.0) || !(p.n_side > 0.0) {
        return Err(Error::invalid("quantization bound needs M >= 1 and N > 0"));
    }
    let d = p.d as f64;
    let (c1, c2) = (c1_term(p), c2_term(p));
    let scale = 1.0 / (1.0 - p.beta);
    let general = (c1 * p.n_side.powf(d) / p.m_bins + c2 * (p.n_side / 2.0).powf(-p.m)) * scale;
    let exponent = -p.m / (d + p.m);
    let collapsed = (c1 + 2f64.powf(p.m) * c2) * p.m_bins.powf(exponent) * scale;
    Ok(QuantizationBound {
        general,
        collapsed,
        exponent,
    })
}
