//! Finite-state channel kinetics.
//!
//! A [`ChannelModel`] partitions its state space into classes. Transitions
//! inside a class are fast (rates divided by ε in the two-timescale
//! process), transitions between classes are slow. For frozen voltage `y`
//! each class generator has a unique quasi-stationary law `μ_j(y)`, and the
//! class-valued process sees the averaged rates
//! `ᾱ_jk(y) = Σ_{ζ∈E_j} Σ_{ξ∈E_k} α_ζξ(y) μ_j(y)(ζ)`.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg;

/// Default operating voltage range for bound and Lipschitz checks.
pub const DEFAULT_RANGE: (f64, f64) = (-120.0, 60.0);
/// Grid step used for bound and Lipschitz checks.
pub const CHECK_STEP: f64 = 0.5;

/// Closed-form voltage dependence of a transition rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RateForm {
    Constant(f64),
    /// `scale · cosh((v − v3)/(2 v4)) · (1 + tanh((v − v3)/v4)) / 2`,
    /// the opening rate of the Morris–Lecar recovery gate.
    MorrisLecarOpen { v3: f64, v4: f64, scale: f64 },
    /// `scale · cosh((v − v3)/(2 v4)) · (1 − tanh((v − v3)/v4)) / 2`.
    MorrisLecarClose { v3: f64, v4: f64, scale: f64 },
    /// `scale / (1 + exp(−(v − half)/slope))`.
    Boltzmann { scale: f64, half: f64, slope: f64 },
}

impl RateForm {
    pub fn eval(&self, v: f64) -> f64 {
        match *self {
            RateForm::Constant(c) => c,
            RateForm::MorrisLecarOpen { v3, v4, scale } => {
                scale * ((v - v3) / (2.0 * v4)).cosh() * (1.0 + ((v - v3) / v4).tanh()) / 2.0
            }
            RateForm::MorrisLecarClose { v3, v4, scale } => {
                scale * ((v - v3) / (2.0 * v4)).cosh() * (1.0 - ((v - v3) / v4).tanh()) / 2.0
            }
            RateForm::Boltzmann { scale, half, slope } => scale / (1.0 + (-(v - half) / slope).exp()),
        }
    }
}

impl fmt::Display for RateForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RateForm::Constant(c) => write!(f, "const({c})"),
            RateForm::MorrisLecarOpen { v3, v4, scale } => write!(f, "ml_open({v3}, {v4}, {scale})"),
            RateForm::MorrisLecarClose { v3, v4, scale } => write!(f, "ml_close({v3}, {v4}, {scale})"),
            RateForm::Boltzmann { scale, half, slope } => write!(f, "boltzmann({scale}, {half}, {slope})"),
        }
    }
}

/// A rate form with a positive floor: `max(form(v), floor)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFn {
    pub form: RateForm,
    pub floor: f64,
}

impl RateFn {
    pub fn new(form: RateForm) -> Self {
        Self { form, floor: 0.0 }
    }

    pub fn with_floor(form: RateForm, floor: f64) -> Self {
        Self { form, floor }
    }

    pub fn eval(&self, v: f64) -> f64 {
        self.form.eval(v).max(self.floor)
    }
}

#[derive(Debug, Clone)]
struct StateSpec {
    name: String,
    class: usize,
    conductance: f64,
    reversal: f64,
}

/// Builder for [`ChannelModel`].
#[derive(Debug, Clone)]
pub struct ChannelModelBuilder {
    name: String,
    states: Vec<StateSpec>,
    rates: Vec<(String, String, RateFn)>,
    range: (f64, f64),
    bounds: Option<(f64, f64)>,
}

impl ChannelModelBuilder {
    /// Adds a state belonging to class `class` (0-based) with conductance
    /// `c_ξ` and reversal potential `v_ξ`.
    pub fn state(mut self, name: &str, class: usize, conductance: f64, reversal: f64) -> Self {
        self.states.push(StateSpec {
            name: name.to_string(),
            class,
            conductance,
            reversal,
        });
        self
    }

    pub fn rate(mut self, from: &str, to: &str, rate: RateFn) -> Self {
        self.rates.push((from.to_string(), to.to_string(), rate));
        self
    }

    pub fn operating_range(mut self, lo: f64, hi: f64) -> Self {
        self.range = (lo, hi);
        self
    }

    /// Declares `α_−` and `α_+` instead of deriving them from the grid.
    pub fn bounds(mut self, alpha_minus: f64, alpha_plus: f64) -> Self {
        self.bounds = Some((alpha_minus, alpha_plus));
        self
    }

    pub fn build(self) -> Result<ChannelModel> {
        let n = self.states.len();
        if n == 0 {
            return Err(Error::Model(format!("{}: no states", self.name)));
        }
        let (lo, hi) = self.range;
        if !(lo < hi) {
            return Err(Error::Model(format!("{}: empty operating range", self.name)));
        }
        let n_classes = self.states.iter().map(|s| s.class).max().unwrap() + 1;
        let mut classes = vec![Vec::new(); n_classes];
        for (i, s) in self.states.iter().enumerate() {
            classes[s.class].push(i);
            if !(s.conductance >= 0.0) {
                return Err(Error::Model(format!(
                    "{}: conductance of state {} must be nonnegative",
                    self.name, s.name
                )));
            }
        }
        if let Some(j) = classes.iter().position(Vec::is_empty) {
            return Err(Error::Model(format!("{}: class {j} has no states", self.name)));
        }
        let index = |name: &str| -> Result<usize> {
            self.states
                .iter()
                .position(|s| s.name == name)
                .ok_or_else(|| Error::Model(format!("{}: unknown state '{name}'", self.name)))
        };
        let mut rates = vec![None; n * n];
        for (from, to, r) in &self.rates {
            let (a, b) = (index(from)?, index(to)?);
            if a == b {
                return Err(Error::Model(format!("{}: self-transition on '{from}'", self.name)));
            }
            rates[a * n + b] = Some(*r);
        }
        let mut model = ChannelModel {
            name: self.name,
            states: self.states.iter().map(|s| s.name.clone()).collect(),
            class_of: self.states.iter().map(|s| s.class).collect(),
            classes,
            rates,
            conductance: self.states.iter().map(|s| s.conductance).collect(),
            reversal: self.states.iter().map(|s| s.reversal).collect(),
            range: self.range,
            alpha_minus: 0.0,
            alpha_plus: 0.0,
        };
        let report = model.check_grid(CHECK_STEP)?;
        match self.bounds {
            Some((amin, amax)) => {
                if report.min_rate < amin || report.max_rate > amax {
                    return Err(Error::Model(format!(
                        "{}: rates span [{}, {}] outside declared bounds [{amin}, {amax}]",
                        model.name, report.min_rate, report.max_rate
                    )));
                }
                model.alpha_minus = amin;
                model.alpha_plus = amax;
            }
            None => {
                model.alpha_minus = report.min_rate;
                model.alpha_plus = report.max_rate;
            }
        }
        Ok(model)
    }
}

/// Finite-state kinetics of one channel population.
#[derive(Debug, Clone)]
pub struct ChannelModel {
    name: String,
    states: Vec<String>,
    class_of: Vec<usize>,
    classes: Vec<Vec<usize>>,
    rates: Vec<Option<RateFn>>,
    conductance: Vec<f64>,
    reversal: Vec<f64>,
    range: (f64, f64),
    alpha_minus: f64,
    alpha_plus: f64,
}

/// Grid diagnostics of a channel model over its operating range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridReport {
    /// Smallest nonzero rate seen on the grid.
    pub min_rate: f64,
    pub max_rate: f64,
    /// Largest finite-difference slope of any rate.
    pub lipschitz: f64,
    /// Largest finite-difference slope of any rate derivative.
    pub derivative_lipschitz: f64,
}

impl ChannelModel {
    pub fn builder(name: &str) -> ChannelModelBuilder {
        ChannelModelBuilder {
            name: name.to_string(),
            states: Vec::new(),
            rates: Vec::new(),
            range: DEFAULT_RANGE,
            bounds: None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn state_names(&self) -> &[String] {
        &self.states
    }

    pub fn state_index(&self, name: &str) -> Option<usize> {
        self.states.iter().position(|s| s == name)
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_of(&self, state: usize) -> usize {
        self.class_of[state]
    }

    pub fn class_members(&self, class: usize) -> &[usize] {
        &self.classes[class]
    }

    pub fn conductance(&self, state: usize) -> f64 {
        self.conductance[state]
    }

    pub fn reversal(&self, state: usize) -> f64 {
        self.reversal[state]
    }

    pub fn operating_range(&self) -> (f64, f64) {
        self.range
    }

    pub fn alpha_minus(&self) -> f64 {
        self.alpha_minus
    }

    pub fn alpha_plus(&self) -> f64 {
        self.alpha_plus
    }

    pub fn has_rate(&self, from: usize, to: usize) -> bool {
        self.rates[from * self.n_states() + to].is_some()
    }

    pub fn rate_fn(&self, from: usize, to: usize) -> Option<&RateFn> {
        self.rates[from * self.n_states() + to].as_ref()
    }

    /// `α_{from,to}(y)`; the voltage is clamped to the operating range so
    /// every rate stays inside `[α_−, α_+]` for all `y`.
    pub fn rate(&self, from: usize, to: usize, y: f64) -> f64 {
        match &self.rates[from * self.n_states() + to] {
            Some(r) => r.eval(y.clamp(self.range.0, self.range.1)),
            None => 0.0,
        }
    }

    /// Whether the two states are linked by a fast (intra-class) transition.
    pub fn is_fast(&self, from: usize, to: usize) -> bool {
        self.class_of[from] == self.class_of[to]
    }

    /// Copy of the model with every conductance multiplied by `factor`.
    pub fn scaled_conductances(&self, factor: f64) -> Self {
        let mut m = self.clone();
        for c in &mut m.conductance {
            *c *= factor;
        }
        m
    }

    /// Samples all rates on a grid of step `step` over the operating range
    /// and reports bounds and finite-difference Lipschitz constants.
    pub fn check_grid(&self, step: f64) -> Result<GridReport> {
        let (lo, hi) = self.range;
        let npts = ((hi - lo) / step).ceil() as usize + 1;
        let grid: Vec<f64> = (0..npts).map(|i| (lo + i as f64 * step).min(hi)).collect();
        let n = self.n_states();
        let mut report = GridReport {
            min_rate: f64::INFINITY,
            max_rate: 0.0,
            lipschitz: 0.0,
            derivative_lipschitz: 0.0,
        };
        for a in 0..n {
            for b in 0..n {
                let Some(r) = self.rate_fn(a, b) else { continue };
                let vals: Vec<f64> = grid.iter().map(|&y| r.eval(y)).collect();
                for (y, v) in grid.iter().zip(&vals) {
                    if !v.is_finite() || *v <= 0.0 {
                        return Err(Error::Model(format!(
                            "{}: rate {} -> {} is {v} at y = {y}; nonzero rates must be positive",
                            self.name, self.states[a], self.states[b]
                        )));
                    }
                    report.min_rate = report.min_rate.min(*v);
                    report.max_rate = report.max_rate.max(*v);
                }
                let slopes: Vec<f64> = vals
                    .windows(2)
                    .zip(grid.windows(2))
                    .map(|(v, g)| (v[1] - v[0]) / (g[1] - g[0]))
                    .collect();
                for s in &slopes {
                    report.lipschitz = report.lipschitz.max(s.abs());
                }
                for w in slopes.windows(2) {
                    report.derivative_lipschitz = report.derivative_lipschitz.max((w[1] - w[0]).abs() / step);
                }
            }
        }
        if !report.min_rate.is_finite() {
            report.min_rate = 0.0;
        }
        Ok(report)
    }

    /// Rate matrix over the full state space with intra-class rates divided
    /// by `epsilon`; diagonal set to minus the row sum.
    pub fn full_generator(&self, y: f64, epsilon: f64) -> GeneratorMatrix {
        let n = self.n_states();
        let mut data = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    let r = self.rate(a, b, y);
                    data[a * n + b] = if self.is_fast(a, b) { r / epsilon } else { r };
                }
            }
        }
        GeneratorMatrix::from_rates(data, n, y, (0..n).collect())
    }
}

/// Square generator matrix (rows sum to zero, nonnegative off-diagonals).
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorMatrix {
    n: usize,
    data: Vec<f64>,
    voltage: f64,
    states: Vec<usize>,
}

impl GeneratorMatrix {
    /// Builds a generator from off-diagonal rates; the diagonal of `rates`
    /// is ignored and replaced by minus the off-diagonal row sum.
    pub fn from_rates(mut rates: Vec<f64>, n: usize, voltage: f64, states: Vec<usize>) -> Self {
        assert_eq!(rates.len(), n * n, "rate matrix must be n × n");
        for a in 0..n {
            rates[a * n + a] = 0.0;
            let s: f64 = rates[a * n..(a + 1) * n].iter().sum();
            rates[a * n + a] = -s;
        }
        Self {
            n,
            data: rates,
            voltage,
            states,
        }
    }

    /// Checks the generator structure of a user-supplied matrix.
    pub fn from_matrix(data: Vec<f64>, n: usize) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::domain("generator must be square"));
        }
        let scale = data.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for a in 0..n {
            let mut s = 0.0;
            for b in 0..n {
                let v = data[a * n + b];
                if a != b && v < 0.0 {
                    return Err(Error::domain(format!("negative off-diagonal rate at ({a}, {b})")));
                }
                s += v;
            }
            if s.abs() > 1e-12 * scale {
                return Err(Error::domain(format!("row {a} sums to {s}, not zero")));
            }
        }
        Ok(Self {
            n,
            data,
            voltage: f64::NAN,
            states: (0..n).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.data[a * self.n + b]
    }

    /// Row-major entries.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn voltage(&self) -> f64 {
        self.voltage
    }

    /// Model state index of each row (for class generators).
    pub fn states(&self) -> &[usize] {
        &self.states
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `B x` for a column vector `x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|a| (0..self.n).map(|b| self.get(a, b) * x[b]).sum())
            .collect()
    }

    /// `μ B` for a row vector `μ`.
    pub fn apply_left(&self, mu: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|b| (0..self.n).map(|a| mu[a] * self.get(a, b)).sum())
            .collect()
    }
}

/// Fast generator `B_j(y)` restricted to class `class`.
pub fn generator_matrix(model: &ChannelModel, y: f64, class: usize) -> Result<GeneratorMatrix> {
    if class >= model.n_classes() {
        return Err(Error::domain(format!(
            "class {class} out of range for model {} with {} classes",
            model.name(),
            model.n_classes()
        )));
    }
    let members = model.class_members(class);
    let n = members.len();
    let mut data = vec![0.0; n * n];
    for (a, &xi) in members.iter().enumerate() {
        for (b, &zeta) in members.iter().enumerate() {
            if a != b {
                data[a * n + b] = model.rate(xi, zeta, y);
            }
        }
    }
    Ok(GeneratorMatrix::from_rates(data, n, y, members.to_vec()))
}

/// Probability vector `μ` with `μ B = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuasiStationary {
    probs: Vec<f64>,
}

impl QuasiStationary {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let s: f64 = probs.iter().sum();
        if probs.iter().any(|p| *p < 0.0) || (s - 1.0).abs() > 1e-12 {
            return Err(Error::domain("not a probability vector"));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn dot(&self, x: &[f64]) -> f64 {
        self.probs.iter().zip(x).map(|(p, v)| p * v).sum()
    }
}

/// Tolerance for `|μB|` relative to `max(1, max|B|)`.
pub const STATIONARY_RESIDUAL_TOL: f64 = 1e-12;

/// Solves `μ B = 0, Σμ = 1` for a row-major `n × n` generator. One balance
/// equation is replaced by the normalization row. `scratch` needs `n²`
/// entries; the result is written to `out`.
pub(crate) fn stationary_into(gen: &[f64], n: usize, out: &mut [f64], scratch: &mut [f64]) -> Result<()> {
    if n == 1 {
        out[0] = 1.0;
        return Ok(());
    }
    if n == 2 {
        // Closed form avoids elimination on the hottest path.
        let (a, b) = (gen[1], gen[2]);
        let s = a + b;
        if !(s > 0.0) {
            return Err(Error::Irreducible("two-state generator with zero rates".into()));
        }
        out[0] = b / s;
        out[1] = a / s;
        return Ok(());
    }
    let scale = gen.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let a = &mut scratch[..n * n];
    // Rows of Bᵀ, last one replaced by ones.
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = if i == n - 1 { 1.0 } else { gen[j * n + i] };
        }
    }
    out[..n].fill(0.0);
    out[n - 1] = 1.0;
    if !linalg::solve_in_place(a, &mut out[..n], n, 1e-13 * scale) {
        return Err(Error::Irreducible(format!(
            "null space of the {n}-state generator has dimension > 1"
        )));
    }
    let mut clipped = false;
    for p in out[..n].iter_mut() {
        if *p < 0.0 {
            if *p < -1e-12 {
                return Err(Error::Irreducible(format!("negative stationary mass {p}")));
            }
            *p = 0.0;
            clipped = true;
        }
    }
    if clipped {
        let s: f64 = out[..n].iter().sum();
        out[..n].iter_mut().for_each(|p| *p /= s);
    }
    Ok(())
}

/// Unique quasi-stationary distribution of a weakly irreducible generator.
pub fn quasi_stationary(gen: &GeneratorMatrix) -> Result<QuasiStationary> {
    let n = gen.dim();
    let mut out = vec![0.0; n];
    let mut scratch = vec![0.0; n * n];
    stationary_into(gen.as_slice(), n, &mut out, &mut scratch)?;
    let resid = gen.apply_left(&out).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if resid > STATIONARY_RESIDUAL_TOL * gen.max_abs().max(1.0) {
        return Err(Error::Irreducible(format!("stationary residual {resid:e} too large")));
    }
    Ok(QuasiStationary { probs: out })
}

/// Quasi-stationary law `μ_j(y)` of class `class`.
pub fn class_stationary(model: &ChannelModel, y: f64, class: usize) -> Result<QuasiStationary> {
    quasi_stationary(&generator_matrix(model, y, class)?)
}

/// `ᾱ_jk(y) = Σ_{ζ∈E_j} Σ_{ξ∈E_k} α_ζξ(y) μ_j(y)(ζ)`.
pub fn averaged_rate(model: &ChannelModel, y: f64, j: usize, k: usize) -> Result<f64> {
    if j == k {
        return Err(Error::domain("averaged rate needs distinct classes"));
    }
    if k >= model.n_classes() {
        return Err(Error::domain(format!("class {k} out of range")));
    }
    let mu = class_stationary(model, y, j)?;
    Ok(averaged_rate_with(model, y, j, k, mu.probs()))
}

pub(crate) fn averaged_rate_with(model: &ChannelModel, y: f64, j: usize, k: usize, mu_j: &[f64]) -> f64 {
    let mut s = 0.0;
    for (a, &zeta) in model.class_members(j).iter().enumerate() {
        for &xi in model.class_members(k) {
            s += model.rate(zeta, xi, y) * mu_j[a];
        }
    }
    s
}

/// Generator of the aggregated class process, off-diagonals `ᾱ_jk(y)`.
pub fn aggregated_generator(model: &ChannelModel, y: f64) -> Result<GeneratorMatrix> {
    let l = model.n_classes();
    let mut data = vec![0.0; l * l];
    for j in 0..l {
        let mu = class_stationary(model, y, j)?;
        for k in 0..l {
            if k != j {
                data[j * l + k] = averaged_rate_with(model, y, j, k, mu.probs());
            }
        }
    }
    Ok(GeneratorMatrix::from_rates(data, l, y, (0..l).collect()))
}

/// Upper bound on `ᾱ_jk` from the declared `α_+`:
/// `α_+` times the number of nonzero links from `E_j` to `E_k`.
pub fn averaged_rate_bound(model: &ChannelModel, j: usize, k: usize) -> f64 {
    let links = model
        .class_members(j)
        .iter()
        .flat_map(|&a| model.class_members(k).iter().map(move |&b| (a, b)))
        .filter(|&(a, b)| model.has_rate(a, b))
        .count();
    links as f64 * model.alpha_plus()
}

/// Generator on `n` states with every off-diagonal rate drawn uniformly
/// from `[0.2, 3)`.
pub fn random_generator(n: usize, rng: &mut impl Rng) -> GeneratorMatrix {
    let mut data = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            if a != b {
                data[a * n + b] = rng.random_range(0.2..3.0);
            }
        }
    }
    GeneratorMatrix::from_rates(data, n, 0.0, (0..n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_state(a: f64, b: f64) -> ChannelModel {
        ChannelModel::builder("two")
            .state("closed", 0, 0.0, 0.0)
            .state("open", 0, 1.0, 1.0)
            .rate("closed", "open", RateFn::new(RateForm::Constant(a)))
            .rate("open", "closed", RateFn::new(RateForm::Constant(b)))
            .build()
            .unwrap()
    }

    /// Time-weighted occupancy of a simulated chain over `jumps` transitions.
    fn empirical_occupancy(gen: &GeneratorMatrix, jumps: usize, rng: &mut impl Rng) -> Vec<f64> {
        let n = gen.dim();
        let mut occ = vec![0.0; n];
        let mut s = 0;
        for _ in 0..jumps {
            let out = -gen.get(s, s);
            let hold = -rng.random::<f64>().ln() / out;
            occ[s] += hold;
            let mut u = rng.random::<f64>() * out;
            let mut next = s;
            for b in 0..n {
                if b == s {
                    continue;
                }
                next = b;
                u -= gen.get(s, b);
                if u < 0.0 {
                    break;
                }
            }
            s = next;
        }
        let total: f64 = occ.iter().sum();
        occ.iter().map(|o| o / total).collect()
    }

    #[test]
    fn two_state_generator_rows_sum_to_zero() {
        let m = two_state(2.0, 3.0);
        let g = generator_matrix(&m, 0.0, 0).unwrap();
        assert_eq!(g.get(0, 1), 2.0);
        assert_eq!(g.get(1, 0), 3.0);
        for a in 0..2 {
            assert_eq!(g.get(a, 0) + g.get(a, 1), 0.0);
        }
        assert!(generator_matrix(&m, 0.0, 1).is_err());
    }

    #[test]
    fn random_generators_have_zero_row_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_generator(4, &mut rng);
        for a in 0..4 {
            let s: f64 = (0..4).map(|b| g.get(a, b)).sum();
            assert!(s.abs() <= 1e-15);
        }
    }

    #[test]
    fn two_state_quasi_stationary_closed_form() {
        let (a, b) = (0.7, 2.3);
        let g = generator_matrix(&two_state(a, b), 0.0, 0).unwrap();
        let mu = quasi_stationary(&g).unwrap();
        assert!((mu.probs()[0] - b / (a + b)).abs() < 1e-15);
        assert!((mu.probs()[1] - a / (a + b)).abs() < 1e-15);
        let sym = quasi_stationary(&generator_matrix(&two_state(1.5, 1.5), 0.0, 0).unwrap()).unwrap();
        assert_eq!(sym.probs(), &[0.5, 0.5]);
    }

    #[test]
    fn quasi_stationary_matches_monte_carlo_occupancy() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = random_generator(5, &mut rng);
        let mu = quasi_stationary(&g).unwrap();
        let jumps = 1_000_000;
        let occ = empirical_occupancy(&g, jumps, &mut rng);
        // Each state is visited ≈ jumps·(visit share) times; use a
        // binomial-style error with the effective visit count.
        for (p, q) in mu.probs().iter().zip(&occ) {
            let se = (p * (1.0 - p) / (jumps as f64 / 5.0)).sqrt();
            assert!((p - q).abs() < 3.0 * se, "μ = {p}, empirical = {q}, se = {se}");
        }
    }

    #[test]
    fn reducible_generator_is_rejected() {
        // Two absorbing states.
        let g = GeneratorMatrix::from_matrix(vec![0.0, 0.0, 0.0, 1.0, -2.0, 1.0, 0.0, 0.0, 0.0], 3).unwrap();
        assert!(matches!(quasi_stationary(&g), Err(Error::Irreducible(_))));
    }

    #[test]
    fn transient_states_get_zero_mass() {
        // State 0 is transient, {1, 2} is the recurrent class.
        let g = GeneratorMatrix::from_matrix(vec![-1.0, 1.0, 0.0, 0.0, -2.0, 2.0, 0.0, 1.0, -1.0], 3).unwrap();
        let mu = quasi_stationary(&g).unwrap();
        assert!(mu.probs()[0].abs() < 1e-15);
        assert!((mu.probs()[1] - 1.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn from_matrix_rejects_non_generators() {
        assert!(GeneratorMatrix::from_matrix(vec![-1.0, 1.0, 1.0, -0.5], 2).is_err());
        assert!(GeneratorMatrix::from_matrix(vec![1.0, -1.0, 1.0, -1.0], 2).is_err());
    }

    fn four_state(eps_slow: f64) -> ChannelModel {
        let c = |v| RateFn::new(RateForm::Constant(v));
        ChannelModel::builder("four")
            .state("a0", 0, 0.0, 0.0)
            .state("a1", 0, 0.0, 0.0)
            .state("b0", 1, 1.0, 0.0)
            .state("b1", 1, 1.0, 0.0)
            .rate("a0", "a1", c(1.0))
            .rate("a1", "a0", c(2.0))
            .rate("b0", "b1", c(3.0))
            .rate("b1", "b0", c(1.0))
            .rate("a0", "b0", c(0.5 * eps_slow))
            .rate("a1", "b1", c(1.5 * eps_slow))
            .rate("b0", "a0", c(0.25 * eps_slow))
            .rate("b1", "a1", c(1.0 * eps_slow))
            .build()
            .unwrap()
    }

    #[test]
    fn averaged_rate_special_cases() {
        let c = |v| RateFn::new(RateForm::Constant(v));
        let singles = ChannelModel::builder("s")
            .state("x", 0, 0.0, 0.0)
            .state("y", 1, 0.0, 0.0)
            .rate("x", "y", c(1.25))
            .rate("y", "x", c(0.5))
            .build()
            .unwrap();
        assert_eq!(averaged_rate(&singles, 0.0, 0, 1).unwrap(), 1.25);
        let agg = aggregated_generator(&singles, 0.0).unwrap();
        let full = singles.full_generator(0.0, 1.0);
        assert_eq!(agg.as_slice(), full.as_slice());

        let isolated = ChannelModel::builder("iso")
            .state("x", 0, 0.0, 0.0)
            .state("y", 0, 0.0, 0.0)
            .state("z", 1, 0.0, 0.0)
            .rate("x", "y", c(1.0))
            .rate("y", "x", c(1.0))
            .build()
            .unwrap();
        assert_eq!(averaged_rate(&isolated, 0.0, 0, 1).unwrap(), 0.0);
        assert!(averaged_rate(&isolated, 0.0, 0, 0).is_err());
    }

    #[test]
    fn single_class_aggregates_to_zero() {
        let g = aggregated_generator(&two_state(1.0, 2.0), 0.0).unwrap();
        assert_eq!(g.dim(), 1);
        assert_eq!(g.get(0, 0), 0.0);
    }

    #[test]
    fn averaged_rate_matches_two_timescale_exit_rate() {
        let model = four_state(1.0);
        let eps = 1e-4;
        let gen = model.full_generator(0.0, eps);
        let predicted = averaged_rate(&model, 0.0, 0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // Mean holding time in class 0 starting from its quasi-stationary law.
        let mu0 = class_stationary(&model, 0.0, 0).unwrap();
        let exits = 4000;
        let mut total = 0.0;
        for _ in 0..exits {
            let mut s = if rng.random::<f64>() < mu0.probs()[0] { 0 } else { 1 };
            let mut t = 0.0;
            while model.class_of(s) == 0 {
                let out = -gen.get(s, s);
                t += -rng.random::<f64>().ln() / out;
                let mut u = rng.random::<f64>() * out;
                for b in 0..4 {
                    if b == s {
                        continue;
                    }
                    u -= gen.get(s, b);
                    if u < 0.0 {
                        s = b;
                        break;
                    }
                }
            }
            total += t;
        }
        let estimate = exits as f64 / total;
        assert!(
            (estimate - predicted).abs() / predicted < 0.05,
            "exit rate {estimate} vs averaged {predicted}"
        );
    }

    #[test]
    fn aggregated_law_matches_full_chain_marginals() {
        use nalgebra::DMatrix;
        let model = four_state(1.0);
        let eps = 1e-6;
        let gen = model.full_generator(0.0, eps);
        // Null vector of Bᵀ from the SVD (smallest singular value).
        let bt = DMatrix::from_row_slice(4, 4, gen.as_slice()).transpose();
        let svd = bt.svd(false, true);
        let vt = svd.v_t.unwrap();
        let (imin, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
        let v: Vec<f64> = vt.row(imin).iter().copied().collect();
        let s: f64 = v.iter().sum();
        let pi: Vec<f64> = v.iter().map(|x| x / s).collect();
        let agg = quasi_stationary(&aggregated_generator(&model, 0.0).unwrap()).unwrap();
        let marg = [pi[0] + pi[1], pi[2] + pi[3]];
        for (a, b) in agg.probs().iter().zip(marg) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn bounds_and_lipschitz_on_grid() {
        let ml = ChannelModel::builder("ml")
            .state("closed", 0, 0.0, 0.0)
            .state("open", 0, 32.0, -70.0)
            .rate(
                "closed",
                "open",
                RateFn::with_floor(RateForm::MorrisLecarOpen { v3: 2.0, v4: 30.0, scale: 1.0 }, 1e-4),
            )
            .rate(
                "open",
                "closed",
                RateFn::with_floor(RateForm::MorrisLecarClose { v3: 2.0, v4: 30.0, scale: 1.0 }, 1e-4),
            )
            .build()
            .unwrap();
        let r = ml.check_grid(CHECK_STEP).unwrap();
        assert!(r.min_rate >= 1e-4);
        assert!(ml.alpha_plus() >= r.max_rate);
        assert!(r.lipschitz.is_finite() && r.derivative_lipschitz.is_finite());
        // Clamping keeps rates bounded outside the operating range.
        assert!(ml.rate(1, 0, -1e4) <= ml.alpha_plus());
        for i in 0..=360 {
            let y = -120.0 + 0.5 * i as f64;
            for (a, b) in [(0, 1), (1, 0)] {
                let v = ml.rate(a, b, y);
                assert!(v >= ml.alpha_minus() && v <= ml.alpha_plus());
            }
            let g = generator_matrix(&ml, y, 0).unwrap();
            assert!((g.get(0, 0) + g.get(0, 1)).abs() < 1e-15);
            let agg = aggregated_generator(&ml, y).unwrap();
            assert_eq!(agg.get(0, 0), 0.0);
        }
        // μ(y) is Lipschitz on the grid.
        let mut prev = class_stationary(&ml, -120.0, 0).unwrap();
        for i in 1..=360 {
            let y = -120.0 + 0.5 * i as f64;
            let cur = class_stationary(&ml, y, 0).unwrap();
            assert!((cur.probs()[1] - prev.probs()[1]).abs() / 0.5 < 0.05);
            prev = cur;
        }
    }

    #[test]
    fn declared_bounds_are_enforced() {
        let res = ChannelModel::builder("b")
            .state("x", 0, 0.0, 0.0)
            .state("y", 0, 0.0, 0.0)
            .rate("x", "y", RateFn::new(RateForm::Constant(5.0)))
            .rate("y", "x", RateFn::new(RateForm::Constant(1.0)))
            .bounds(0.5, 2.0)
            .build();
        assert!(matches!(res, Err(Error::Model(_))));
        let zero_rate = ChannelModel::builder("z")
            .state("x", 0, 0.0, 0.0)
            .state("y", 0, 0.0, 0.0)
            .rate("x", "y", RateFn::new(RateForm::Constant(0.0)))
            .build();
        assert!(zero_rate.is_err());
        let negative_c = ChannelModel::builder("c").state("x", 0, -1.0, 0.0).build();
        assert!(negative_c.is_err());
    }

    proptest::proptest! {
        #[test]
        fn averaged_rates_are_bounded(y in -120.0f64..60.0, scale in 0.1f64..10.0) {
            let c = |v: f64| RateFn::new(RateForm::Boltzmann { scale: v * scale, half: -20.0, slope: 9.0 });
            let model = ChannelModel::builder("p")
                .state("a0", 0, 0.0, 0.0).state("a1", 0, 0.0, 0.0)
                .state("b0", 1, 0.0, 0.0).state("b1", 1, 0.0, 0.0)
                .rate("a0", "a1", c(1.0)).rate("a1", "a0", c(2.0))
                .rate("b0", "b1", c(3.0)).rate("b1", "b0", c(1.0))
                .rate("a0", "b0", c(0.5)).rate("a1", "b1", c(0.7)).rate("b1", "a0", c(0.2))
                .build().unwrap();
            let agg = aggregated_generator(&model, y).unwrap();
            for j in 0..2 {
                for k in 0..2 {
                    if j != k {
                        let r = agg.get(j, k);
                        proptest::prop_assert!(r >= 0.0);
                        proptest::prop_assert!(r <= 4.0 * model.alpha_plus());
                        proptest::prop_assert!(r <= averaged_rate_bound(&model, j, k) + 1e-12);
                    }
                }
                let s: f64 = (0..2).map(|k| agg.get(j, k)).sum();
                proptest::prop_assert!(s.abs() < 1e-14);
            }
        }
    }
}
