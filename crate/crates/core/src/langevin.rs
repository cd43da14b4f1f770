//! Langevin approximation of the averaged dynamics: mollified
//! quasi-stationary reaction, switching classes, and multiplicative noise
//! `√ε M(u) dW` with the low-rank factor of the diffusion operator.

use crate::error::{Error, Result};
use crate::pdmp::{Dynamics, EtdFactors, HybridState, SimConfig, Simulator, Trajectory};
use crate::rng::{SimRng, StreamId};
use crate::spectral::{SpectralBasis, SpectralField};
use crate::system::{ChannelConfiguration, HybridSystem, Level, SourceKind};

/// Default mollifier half-width.
pub const DEFAULT_KAPPA: f64 = 0.009;

#[derive(Debug, Clone, PartialEq)]
pub struct LangevinConfig {
    pub epsilon: f64,
    pub h: f64,
    pub kappa: f64,
    pub modes: usize,
    pub horizon: f64,
    pub dt_out: f64,
    pub seed: u64,
}

impl Default for LangevinConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            h: 1e-4,
            kappa: DEFAULT_KAPPA,
            modes: 64,
            horizon: 2.4,
            dt_out: 0.01,
            seed: 0,
        }
    }
}

impl LangevinConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::domain(format!("ε = {} outside [0, 1]", self.epsilon)));
        }
        if !(self.h > 0.0) || !(self.kappa > 0.0) || self.modes == 0 {
            return Err(Error::domain("h, κ and the mode count must be positive"));
        }
        if !(self.horizon > 0.0 && self.dt_out > 0.0) {
            return Err(Error::domain("horizon and output step must be positive"));
        }
        Ok(())
    }

    pub fn source(&self) -> SourceKind {
        SourceKind::Mollified { width: self.kappa }
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            horizon: self.horizon,
            dt_out: self.dt_out,
            h_max: self.h,
            ..SimConfig::default()
        }
    }
}

/// Coefficients of `F_{r̄,φ}(u)` (stimulus included) for a system built
/// with mollified sources.
pub fn mollified_reaction(sys: &HybridSystem, u: &SpectralField, rbar: &ChannelConfiguration) -> Result<Vec<f64>> {
    if !matches!(sys.source(), SourceKind::Mollified { .. }) {
        return Err(Error::domain("system was built with pointlike sources"));
    }
    if rbar.level() != Level::Classes {
        return Err(Error::domain("reaction needs a class configuration"));
    }
    sys.reaction_coeffs(rbar, u)
}

/// Exponential Euler–Maruyama update of a coefficient vector with drift
/// `g` and noise `ξ = Mη` frozen over the step:
/// `c_k ← e^{−λ_k h} c_k + (1 − e^{−λ_k h})/λ_k g_k + √ε √((1 − e^{−2λ_k h})/(2λ_k)) ξ_k`.
pub fn em_update(basis: &SpectralBasis, coeffs: &mut [f64], drift: &[f64], xi: &[f64], epsilon: f64, h: f64) {
    let mut f = EtdFactors::new(basis.eigenvalues(), h);
    f.fill(basis.eigenvalues(), h, true);
    f.apply(coeffs, drift, Some((xi, epsilon)));
}

/// One step of the coupled system at the current class configuration;
/// returns `‖Mη‖²`.
pub fn em_step(sim: &Simulator<'_>, state: &mut HybridState, h: f64, noise: &mut SimRng) -> Result<f64> {
    sim.em_step(state, h, noise)
}

/// Langevin run from `u ≡ 0` with every channel in its first class.
/// Class switching uses the same thinning lanes as the averaged process and
/// the noise draws its own lane, so `ε = 0` reproduces the averaged run.
pub fn simulate_langevin(sys: &HybridSystem, cfg: &SimConfig, epsilon: f64, id: StreamId) -> Result<Trajectory> {
    let sim = Simulator::new(sys, cfg.clone(), Dynamics::Langevin { epsilon })?;
    sim.run(sim.initial_state(), id)
}
