//! Spatially extended stochastic Morris–Lecar fiber: a fast two-state
//! potassium population and a slow two-state calcium population on a cable
//! with a constant stimulus near the left end.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::kinetics::{ChannelModel, RateFn, RateForm};
use crate::spectral::{SpectralBasis, SpectralField};
use crate::system::{ChannelConfiguration, HybridSystem, Level, Population, SourceKind, Stimulus};

/// Physical and kinetic parameters. Capacitance is folded into the
/// conductances and the stimulus when the system is built.
#[derive(Debug, Clone, PartialEq)]
pub struct MLParameters {
    pub capacitance: f64,
    pub c_k: f64,
    pub v_k: f64,
    pub c_ca: f64,
    pub v_ca: f64,
    /// Fiber radius.
    pub a: f64,
    /// Internal resistance.
    pub r: f64,
    pub n_k: usize,
    pub n_ca: usize,
    pub length: f64,
    pub horizon: f64,
    pub stimulus: f64,
    pub stimulus_from: f64,
    pub stimulus_to: f64,
    /// Potassium gate: half-activation, slope and rate scale.
    pub v3: f64,
    pub v4: f64,
    pub lambda_w: f64,
    /// Calcium gate: half-activation, slope and rate scale.
    pub v1: f64,
    pub v2: f64,
    pub lambda_m: f64,
    /// Lower floor `α_−` on every rate.
    pub rate_floor: f64,
}

impl Default for MLParameters {
    fn default() -> Self {
        Self {
            capacitance: 1.0,
            c_k: 32.0,
            v_k: -70.0,
            c_ca: 0.0,
            v_ca: 0.0,
            a: 1.0,
            r: 0.5,
            n_k: 50,
            n_ca: 0,
            length: 0.5,
            horizon: 2.4,
            stimulus: 300.0,
            stimulus_from: 0.0,
            stimulus_to: 0.1,
            v3: 2.0,
            v4: 30.0,
            lambda_w: 1.0,
            v1: -1.2,
            v2: 18.0,
            lambda_m: 1.0,
            rate_floor: 1e-4,
        }
    }
}

impl MLParameters {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("capacitance", self.capacitance),
            ("a", self.a),
            ("R", self.r),
            ("length", self.length),
            ("horizon", self.horizon),
            ("v4", self.v4),
            ("v2", self.v2),
            ("lambda_w", self.lambda_w),
            ("lambda_m", self.lambda_m),
            ("rate_floor", self.rate_floor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Model(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.c_k >= 0.0 && self.c_ca >= 0.0) {
            return Err(Error::Model("conductances must be nonnegative".into()));
        }
        if self.n_k == 0 {
            return Err(Error::Model("at least one potassium channel is needed".into()));
        }
        if !(0.0 <= self.stimulus_from && self.stimulus_from <= self.stimulus_to && self.stimulus_to <= 1.0) {
            return Err(Error::Model("stimulus support must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// `a / (2 R C l²)`: diffusion coefficient once the fiber is mapped to
    /// the unit interval.
    pub fn effective_diffusion(&self) -> f64 {
        self.a / (2.0 * self.r * self.capacitance * self.length * self.length)
    }

    fn gate(&self, name: &str, v_half: f64, slope: f64, scale: f64, c: f64, v: f64, fast: bool) -> Result<ChannelModel> {
        let open_class = if fast { 0 } else { 1 };
        ChannelModel::builder(name)
            .state("closed", 0, 0.0, 0.0)
            .state("open", open_class, c / self.capacitance, v)
            .rate(
                "closed",
                "open",
                RateFn::with_floor(
                    RateForm::MorrisLecarOpen {
                        v3: v_half,
                        v4: slope,
                        scale,
                    },
                    self.rate_floor,
                ),
            )
            .rate(
                "open",
                "closed",
                RateFn::with_floor(
                    RateForm::MorrisLecarClose {
                        v3: v_half,
                        v4: slope,
                        scale,
                    },
                    self.rate_floor,
                ),
            )
            .build()
    }
}

/// Potassium and calcium channel models. Both potassium states share one
/// fast class; calcium states are separate slow classes.
pub fn ml_model(p: &MLParameters) -> Result<(ChannelModel, ChannelModel)> {
    p.validate()?;
    let k = p.gate("K", p.v3, p.v4, p.lambda_w, p.c_k, p.v_k, true)?;
    let ca = p.gate("Ca", p.v1, p.v2, p.lambda_m, p.c_ca, p.v_ca, false)?;
    Ok((k, ca))
}

/// Assembled fiber with `modes` sine modes. The calcium population is
/// included only when `n_ca > 0`.
pub fn ml_system(p: &MLParameters, modes: usize, source: SourceKind) -> Result<HybridSystem> {
    let (k, ca) = ml_model(p)?;
    let basis = Arc::new(SpectralBasis::dirichlet_with_diffusion(modes, p.effective_diffusion())?);
    let mut pops = vec![Population { model: k, count: p.n_k }];
    if p.n_ca > 0 {
        pops.push(Population {
            model: ca,
            count: p.n_ca,
        });
    }
    let stim = Stimulus {
        amplitude: p.stimulus / p.capacitance,
        from: p.stimulus_from,
        to: p.stimulus_to,
    };
    HybridSystem::new(basis, pops, Some(stim), source)
}

fn k_rates(model: &ChannelModel, y: f64) -> (f64, f64) {
    (model.rate(0, 1, y), model.rate(1, 0, y))
}

/// Per potassium channel, `[φ(closed), φ(open)]` with
/// `φ(ξ) = c/(α+β) (v − y) (1_open(ξ) − α/(α+β))`; the solution of the
/// full problem is `Σ_i (1/N) φ_i(r(i)) δ_{z_i}`.
pub fn ml_phi_closed_form(p: &MLParameters, sys: &HybridSystem, u: &SpectralField) -> Vec<[f64; 2]> {
    let model = &sys.populations()[0].model;
    let c = p.c_k / p.capacitance;
    sys
        .population_channels(0)
        .map(|i| {
            let y = sys.local_voltage(i, u.coeffs());
            let (alpha, beta) = k_rates(model, y);
            let s = alpha + beta;
            let amp = c / s * (p.v_k - y);
            [amp * (0.0 - alpha / s), amp * (1.0 - alpha / s)]
        })
        .collect()
}

/// `c² (v − y)² αβ/(α+β)³` per potassium channel.
pub fn ml_variance_closed_form(p: &MLParameters, sys: &HybridSystem, u: &SpectralField) -> Vec<f64> {
    let model = &sys.populations()[0].model;
    let c = p.c_k / p.capacitance;
    sys.population_channels(0)
        .map(|i| {
            let y = sys.local_voltage(i, u.coeffs());
            let (alpha, beta) = k_rates(model, y);
            c * c * (p.v_k - y).powi(2) * alpha * beta / (alpha + beta).powi(3)
        })
        .collect()
}

/// `C = (1/N²) Σ_i c² (v − y_i)² αβ/(α+β)³ w_i w_iᵀ` in the f-basis
/// (potassium population only).
pub fn ml_diffusion_closed_form(p: &MLParameters, sys: &HybridSystem, u: &SpectralField) -> DMatrix<f64> {
    let k = sys.modes();
    let n = p.n_k as f64;
    let s = ml_variance_closed_form(p, sys, u);
    let mut c = DMatrix::zeros(k, k);
    for (i, si) in sys.population_channels(0).zip(&s) {
        let w = sys.pairing(i);
        for a in 0..k {
            for b in 0..k {
                c[(a, b)] += si / (n * n) * w[a] * w[b];
            }
        }
    }
    c
}

/// `sup_y αβ/(α+β)³` for the Morris–Lecar gate, attained at `y = v3`:
/// with `x = (y − v3)/v4` the ratio is `1/(4λ cosh(x/2) cosh²x)`.
pub fn ml_rate_ratio_sup(p: &MLParameters) -> f64 {
    1.0 / (4.0 * p.lambda_w)
}

/// `c² (|v| + sup‖u‖_H)² · sup αβ/(α+β)³ · Σ_k 2/(kπ)²` with the series
/// equal to `1/3`.
pub fn ml_trace_bound(p: &MLParameters, sup_h_norm: f64) -> f64 {
    let c = p.c_k / p.capacitance;
    c * c * (p.v_k.abs() + sup_h_norm).powi(2) * ml_rate_ratio_sup(p) / 3.0
}

/// Every potassium channel in class 0 (and calcium channels closed).
pub fn ml_class_configuration(sys: &HybridSystem) -> ChannelConfiguration {
    sys.initial_configuration(Level::Classes)
}
