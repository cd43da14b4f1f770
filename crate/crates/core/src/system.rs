//! Assembly of the hybrid reaction–diffusion system: channel populations
//! placed along the fiber and the reaction terms they feed into the
//! spectral modes.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fluctuation::LocalWork;
use crate::kinetics::ChannelModel;
use crate::quadrature;
use crate::spectral::{mollifier_pairings, SpectralBasis, SpectralField};

/// How a channel at `z` couples to the field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SourceKind {
    /// Dirac mass `δ_z`; the channel sees `u(z)`.
    Pointlike,
    /// Mollifier `φ_z` of half-width `width`; the channel sees `(u, φ_z)`.
    Mollified { width: f64 },
}

/// `count` identical channels of one kind, regularly spaced at
/// `z_i = i/(count + 1)`.
#[derive(Debug, Clone)]
pub struct Population {
    pub model: ChannelModel,
    pub count: usize,
}

/// Constant applied current `amplitude · 1_[from, to](x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stimulus {
    pub amplitude: f64,
    pub from: f64,
    pub to: f64,
}

impl Stimulus {
    /// L² coefficients `(I, f_k)`.
    pub fn project(&self, basis: &SpectralBasis) -> Vec<f64> {
        let (a, b) = (self.from.max(0.0), self.to.min(1.0));
        if !(b > a) || self.amplitude == 0.0 {
            return vec![0.0; basis.modes()];
        }
        let amp = self.amplitude;
        quadrature::integrate_vec(a, b, basis.modes(), 1e-13, |x, out| {
            for (j, o) in out.iter_mut().enumerate() {
                *o = amp * basis.basis_function(j + 1, x);
            }
        })
    }
}

/// One channel: its population, position and weight `1/N_q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Site {
    pub population: usize,
    pub z: f64,
    pub weight: f64,
}

/// Whether a configuration holds channel states or aggregated classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    States,
    Classes,
}

/// Per-channel discrete component `r = (r(i))`, either states in `E` or
/// classes in `{0, …, l−1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelConfiguration {
    level: Level,
    values: Vec<usize>,
}

impl ChannelConfiguration {
    pub fn new(level: Level, values: Vec<usize>) -> Self {
        Self { level, values }
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn values(&self) -> &[usize] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [usize] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// The assembled spatially extended channel system.
#[derive(Debug, Clone)]
pub struct HybridSystem {
    basis: Arc<SpectralBasis>,
    populations: Vec<Population>,
    sites: Vec<Site>,
    /// Row `i` holds `(f_k(z_i))_k` or `((φ_{z_i}, f_k))_k`.
    pairings: Vec<f64>,
    stimulus: Vec<f64>,
    source: SourceKind,
    max_states: usize,
}

impl HybridSystem {
    pub fn new(
        basis: Arc<SpectralBasis>,
        populations: Vec<Population>,
        stimulus: Option<Stimulus>,
        source: SourceKind,
    ) -> Result<Self> {
        let k = basis.modes();
        let mut sites = Vec::new();
        let mut pairings = Vec::new();
        for (q, pop) in populations.iter().enumerate() {
            for i in 1..=pop.count {
                let z = i as f64 / (pop.count + 1) as f64;
                sites.push(Site {
                    population: q,
                    z,
                    weight: 1.0 / pop.count as f64,
                });
                match source {
                    SourceKind::Pointlike => pairings.extend(basis.point_values(z)),
                    SourceKind::Mollified { width } => pairings.extend(mollifier_pairings(z, width, &basis)?),
                }
            }
        }
        debug_assert_eq!(pairings.len(), sites.len() * k);
        let stimulus = match stimulus {
            Some(s) => {
                if !(s.from >= 0.0 && s.to <= 1.0 && s.from <= s.to) {
                    return Err(Error::domain(format!(
                        "stimulus support [{}, {}] must lie in [0, 1]",
                        s.from, s.to
                    )));
                }
                s.project(&basis)
            }
            None => vec![0.0; k],
        };
        let max_states = populations.iter().map(|p| p.model.n_states()).max().unwrap_or(1);
        Ok(Self {
            basis,
            populations,
            sites,
            pairings,
            stimulus,
            source,
            max_states,
        })
    }

    pub fn basis(&self) -> &Arc<SpectralBasis> {
        &self.basis
    }

    pub fn modes(&self) -> usize {
        self.basis.modes()
    }

    pub fn populations(&self) -> &[Population] {
        &self.populations
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn n_channels(&self) -> usize {
        self.sites.len()
    }

    pub fn source(&self) -> SourceKind {
        self.source
    }

    pub fn max_states(&self) -> usize {
        self.max_states
    }

    /// Basis pairing vector `w_i` of channel `i`.
    pub fn pairing(&self, i: usize) -> &[f64] {
        let k = self.modes();
        &self.pairings[i * k..(i + 1) * k]
    }

    pub fn stimulus_coeffs(&self) -> &[f64] {
        &self.stimulus
    }

    pub fn model_of(&self, channel: usize) -> &ChannelModel {
        &self.populations[self.sites[channel].population].model
    }

    /// Range of global channel indices belonging to population `q`.
    pub fn population_channels(&self, q: usize) -> std::ops::Range<usize> {
        let start: usize = self.populations[..q].iter().map(|p| p.count).sum();
        start..start + self.populations[q].count
    }

    /// Voltage seen by channel `i`: `u(z_i)` or `(u, φ_{z_i})`.
    pub fn local_voltage(&self, i: usize, coeffs: &[f64]) -> f64 {
        dot(self.pairing(i), coeffs)
    }

    pub fn local_voltages_into(&self, coeffs: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.local_voltage(i, coeffs);
        }
    }

    /// Every channel in state 0 (or its class).
    pub fn initial_configuration(&self, level: Level) -> ChannelConfiguration {
        let values = self
            .sites
            .iter()
            .map(|s| match level {
                Level::States => 0,
                Level::Classes => self.populations[s.population].model.class_of(0),
            })
            .collect();
        ChannelConfiguration::new(level, values)
    }

    /// Adds `Σ_i coef_i w_i` to `g`.
    pub(crate) fn scatter(&self, coef: &[f64], g: &mut [f64]) {
        for (i, c) in coef.iter().enumerate() {
            if *c != 0.0 {
                for (gk, wk) in g.iter_mut().zip(self.pairing(i)) {
                    *gk += c * wk;
                }
            }
        }
    }

    /// Source amplitude of channel `i` in state `xi`:
    /// `(1/N_q) c_ξ (v_ξ − y)`.
    pub(crate) fn state_current(&self, i: usize, xi: usize, y: f64) -> f64 {
        let m = self.model_of(i);
        self.sites[i].weight * m.conductance(xi) * (m.reversal(xi) - y)
    }

    /// Source amplitude of channel `i` in class `j`, averaged over the
    /// quasi-stationary law: `(1/N_q) Σ_ζ c_ζ μ_j(y)(ζ) (v_ζ − y)`.
    pub(crate) fn class_current(&self, i: usize, class: usize, y: f64, work: &mut LocalWork) -> Result<f64> {
        let m = self.model_of(i);
        work.class_law(m, class, y)?;
        let mut s = 0.0;
        for (a, &zeta) in m.class_members(class).iter().enumerate() {
            s += m.conductance(zeta) * work.mu()[a] * (m.reversal(zeta) - y);
        }
        Ok(self.sites[i].weight * s)
    }

    /// Coefficients `⟨G_r(u), f_k⟩` (state configuration) or
    /// `⟨F_r̄(u), f_k⟩` (class configuration), stimulus included.
    pub fn reaction_coeffs(&self, r: &ChannelConfiguration, u: &SpectralField) -> Result<Vec<f64>> {
        if r.len() != self.n_channels() || u.coeffs().len() != self.modes() {
            return Err(Error::domain("configuration or field size does not match the system"));
        }
        let mut coef = vec![0.0; self.n_channels()];
        let mut work = LocalWork::new(self.max_states);
        for (i, c) in coef.iter_mut().enumerate() {
            let y = self.local_voltage(i, u.coeffs());
            *c = match r.level() {
                Level::States => self.state_current(i, r.values()[i], y),
                Level::Classes => self.class_current(i, r.values()[i], y, &mut work)?,
            };
        }
        let mut g = self.stimulus.clone();
        self.scatter(&coef, &mut g);
        Ok(g)
    }

    /// Run-level reference for `sup_t ‖u_t‖_H`, used by the blow-up
    /// monitor. Bounds each mode by `|c_k(0)| + G_k/λ_k`, where `G_k`
    /// bounds the k-th reaction coefficient while channel voltages stay
    /// within the reversal-potential envelope.
    pub fn a_priori_h_bound(&self, u0: &[f64]) -> f64 {
        let vmax = self
            .populations
            .iter()
            .flat_map(|p| (0..p.model.n_states()).map(move |s| p.model.reversal(s).abs()))
            .fold(0.0, f64::max);
        let k = self.modes();
        let mut gk: Vec<f64> = self.stimulus.iter().map(|s| s.abs()).collect();
        for (i, site) in self.sites.iter().enumerate() {
            let m = &self.populations[site.population].model;
            let cmax = (0..m.n_states()).map(|s| m.conductance(s)).fold(0.0, f64::max);
            let amp = site.weight * cmax * 2.0 * vmax.max(1.0);
            for (g, w) in gk.iter_mut().zip(self.pairing(i)) {
                *g += amp * w.abs();
            }
        }
        let weights = self.basis.h_weights();
        let lam = self.basis.eigenvalues();
        let mut s = 0.0;
        for j in 0..k {
            let c = u0[j].abs() + gk[j] / lam[j];
            s += weights[j] * c * c;
        }
        s.sqrt().max(vmax)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
