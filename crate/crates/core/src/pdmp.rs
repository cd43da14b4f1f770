//! Exact simulation of the hybrid process: a Galerkin flow integrated by
//! exponential Euler between jumps, with state-dependent jump times drawn
//! by thinning a homogeneous Poisson process of candidates.
//!
//! Three dynamics share the engine: the two-timescale process on channel
//! states, the averaged process on classes, and its Langevin perturbation.

use std::io::{self, Write};

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::error::{Error, Result};
use crate::fluctuation::LocalWork;
use crate::kinetics::{averaged_rate_bound, averaged_rate_with, ChannelModel};
use crate::rng::{self, SimRng, StreamId};
use crate::spectral::{self, SpectralField};
use crate::system::{dot, ChannelConfiguration, HybridSystem, Level};

/// Relative slack between the rate bound and the thinning majorant. Grid
/// bounds can miss an interior maximum by a hair; any majorant above the
/// true rate keeps the sampler exact.
pub const MAJORANT_SLACK: f64 = 0.01;

/// Run controls shared by every dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub horizon: f64,
    pub dt_out: f64,
    pub h_max: f64,
    /// Positions where `u` is written to the trajectory table.
    pub probes: Vec<f64>,
    /// Hold `u` at its initial value (no diffusion, no reaction).
    pub frozen_field: bool,
    pub record_jumps: bool,
    /// The run aborts once `‖u‖_H` exceeds this multiple of the a-priori
    /// bound.
    pub blowup_factor: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            horizon: 2.4,
            dt_out: 0.01,
            h_max: 1e-4,
            probes: vec![0.05, 0.25, 0.5, 0.75],
            frozen_field: false,
            record_jumps: false,
            blowup_factor: 10.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::domain("horizon must be positive"));
        }
        if !(self.dt_out > 0.0) || !(self.h_max > 0.0) {
            return Err(Error::domain("output step and h_max must be positive"));
        }
        if self.probes.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::domain("probe positions must lie in [0, 1]"));
        }
        if !(self.blowup_factor > 1.0) {
            return Err(Error::domain("blow-up factor must exceed 1"));
        }
        Ok(())
    }
}

/// Which process is simulated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dynamics {
    /// Fast intra-class rates divided by `epsilon`.
    Full { epsilon: f64 },
    /// Class process with quasi-stationary reaction and averaged rates.
    Averaged,
    /// Averaged process plus `√ε` multiplicative Gaussian noise.
    Langevin { epsilon: f64 },
}

impl Dynamics {
    pub fn level(&self) -> Level {
        match self {
            Dynamics::Full { .. } => Level::States,
            _ => Level::Classes,
        }
    }
}

/// `(t, u, r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridState {
    pub t: f64,
    pub u: SpectralField,
    pub r: ChannelConfiguration,
}

impl HybridState {
    /// `u ≡ 0` and every channel in its first state.
    pub fn initial(sys: &HybridSystem, level: Level) -> Self {
        Self {
            t: 0.0,
            u: SpectralField::zeros(sys.basis().clone()),
            r: sys.initial_configuration(level),
        }
    }
}

/// One accepted transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpRecord {
    pub t: f64,
    pub channel: usize,
    pub from: usize,
    pub to: usize,
}

/// Candidate clocks and random streams of one run. Population `q` draws
/// its candidates from lane `q`; the Langevin noise has its own lane.
#[derive(Debug, Clone)]
pub struct RandomStreams {
    lanes: Vec<SimRng>,
    next: Vec<f64>,
    noise: SimRng,
}

impl RandomStreams {
    pub fn new(sim: &Simulator<'_>, id: StreamId, t0: f64) -> Self {
        let mut lanes: Vec<SimRng> = (0..sim.majorants.len())
            .map(|q| rng::stream(id.master, id.replica, q as u64))
            .collect();
        let next = lanes
            .iter_mut()
            .zip(&sim.majorants)
            .map(|(r, m)| t0 + candidate_gap(r, *m))
            .collect();
        Self {
            lanes,
            next,
            noise: rng::stream(id.master, id.replica, rng::NOISE_LANE),
        }
    }
}

fn candidate_gap(r: &mut SimRng, rate: f64) -> f64 {
    if rate > 0.0 {
        let e: f64 = Exp1.sample(r);
        e / rate
    } else {
        f64::INFINITY
    }
}

/// Sampled path on the output grid plus the jump log.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dynamics: Dynamics,
    pub stream: StreamId,
    pub times: Vec<f64>,
    /// L² coefficients of `u` at each output time.
    pub coeffs: Vec<Vec<f64>>,
    pub probes: Vec<f64>,
    pub probe_values: Vec<Vec<f64>>,
    /// `occ_<population>_<state>` column names.
    pub occupancy_labels: Vec<String>,
    /// State fractions (full process) or mean quasi-stationary weights
    /// (class processes), per output time.
    pub occupancy: Vec<Vec<f64>>,
    pub njumps: Vec<u64>,
    /// `Σ ‖Mη‖²` over the substeps of each output interval.
    pub noise_energy: Option<Vec<f64>>,
    pub jumps: Vec<JumpRecord>,
    pub max_h_norm: f64,
    pub h_bound: f64,
    pub final_state: HybridState,
}

impl Trajectory {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let mut header = vec!["t".to_string()];
        header.extend(self.probes.iter().map(|x| format!("u@{x}")));
        header.extend(self.occupancy_labels.iter().cloned());
        header.push("njumps_cum".into());
        if self.noise_energy.is_some() {
            header.push("noise_energy".into());
        }
        writeln!(w, "{}", header.join(","))?;
        for m in 0..self.times.len() {
            let mut row = vec![self.times[m].to_string()];
            row.extend(self.probe_values[m].iter().map(f64::to_string));
            row.extend(self.occupancy[m].iter().map(f64::to_string));
            row.push(self.njumps[m].to_string());
            if let Some(e) = &self.noise_energy {
                row.push(e[m].to_string());
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("csv is ascii")
    }

    /// `max_t ‖u_t − v_t‖_{L²}` over the shared output grid.
    pub fn sup_l2_distance(&self, other: &Trajectory) -> Result<f64> {
        if self.times != other.times {
            return Err(Error::domain("trajectories sampled on different grids"));
        }
        Ok(self
            .coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max))
    }

    /// `‖u_t‖²_{L²}` at each output time.
    pub fn l2_norms_sq(&self) -> Vec<f64> {
        self.coeffs.iter().map(|c| c.iter().map(|x| x * x).sum()).collect()
    }
}

/// Exponential-Euler factors for one step size.
#[derive(Debug, Clone)]
pub(crate) struct EtdFactors {
    h: f64,
    decay: Vec<f64>,
    phi: Vec<f64>,
    noise: Vec<f64>,
}

impl EtdFactors {
    pub(crate) fn new(eigenvalues: &[f64], h: f64) -> Self {
        let mut f = Self {
            h,
            decay: vec![0.0; eigenvalues.len()],
            phi: vec![0.0; eigenvalues.len()],
            noise: vec![0.0; eigenvalues.len()],
        };
        f.fill(eigenvalues, h, false);
        f
    }

    pub(crate) fn fill(&mut self, eigenvalues: &[f64], h: f64, with_noise: bool) {
        self.h = h;
        for (k, &l) in eigenvalues.iter().enumerate() {
            let m = (-l * h).exp_m1();
            self.decay[k] = 1.0 + m;
            self.phi[k] = -m / l;
            if with_noise {
                self.noise[k] = (-(-2.0 * l * h).exp_m1() / (2.0 * l)).sqrt();
            }
        }
    }

    /// `c ← e^{−λh} c + φ(h) g [+ √ε S(h) ξ]`.
    pub(crate) fn apply(&self, c: &mut [f64], g: &[f64], noise: Option<(&[f64], f64)>) {
        match noise {
            Some((xi, eps)) => {
                let se = eps.sqrt();
                for (k, ck) in c.iter_mut().enumerate() {
                    *ck = self.decay[k] * *ck + self.phi[k] * g[k] + se * self.noise[k] * xi[k];
                }
            }
            None => {
                for (k, ck) in c.iter_mut().enumerate() {
                    *ck = self.decay[k] * *ck + self.phi[k] * g[k];
                }
            }
        }
    }
}

/// Per-run scratch buffers and the cached state of the current step.
struct Workspace {
    y: Vec<f64>,
    coef: Vec<f64>,
    sigma: Vec<f64>,
    /// Reaction and noise frozen over the current step.
    g: Vec<f64>,
    xi: Vec<f64>,
    noisy: bool,
    prepared: bool,
    /// Field at an intermediate time of the current step.
    ctmp: Vec<f64>,
    local: LocalWork,
    partial: EtdFactors,
    noise_energy: f64,
}

impl Workspace {
    fn new(sys: &HybridSystem) -> Self {
        let (n, k) = (sys.n_channels(), sys.modes());
        Self {
            y: vec![0.0; n],
            coef: vec![0.0; n],
            sigma: vec![0.0; n],
            g: vec![0.0; k],
            xi: vec![0.0; k],
            noisy: false,
            prepared: false,
            ctmp: vec![0.0; k],
            local: LocalWork::new(sys.max_states()),
            partial: EtdFactors::new(sys.basis().eigenvalues(), 1.0),
            noise_energy: 0.0,
        }
    }
}

/// The simulation engine for one system, configuration and dynamics.
///
/// Steps start on a grid of spacing `h_max` that restarts at every accepted
/// jump. The field at a candidate or output time inside a step is the
/// exponential-Euler step of the matching partial length, so rejected
/// candidates and output sampling leave the path untouched.
#[derive(Debug, Clone)]
pub struct Simulator<'a> {
    sys: &'a HybridSystem,
    cfg: SimConfig,
    dynamics: Dynamics,
    /// Per-channel thinning rate of each population.
    channel_majorants: Vec<f64>,
    /// Population candidate rates `N_q · Λ_q`.
    majorants: Vec<f64>,
    full_step: EtdFactors,
}

impl<'a> Simulator<'a> {
    pub fn new(sys: &'a HybridSystem, cfg: SimConfig, dynamics: Dynamics) -> Result<Self> {
        cfg.validate()?;
        match dynamics {
            Dynamics::Full { epsilon } if !(epsilon > 0.0) => {
                return Err(Error::domain("two-timescale process needs ε > 0"));
            }
            Dynamics::Langevin { epsilon } if !(epsilon >= 0.0) => {
                return Err(Error::domain("Langevin noise level must be nonnegative"));
            }
            _ => {}
        }
        let mut channel_majorants = Vec::new();
        for pop in sys.populations() {
            let m = &pop.model;
            let bound = match dynamics {
                Dynamics::Full { epsilon } => (0..m.n_states())
                    .map(|xi| {
                        (0..m.n_states())
                            .filter(|&z| m.has_rate(xi, z))
                            .map(|z| if m.is_fast(xi, z) { m.alpha_plus() / epsilon } else { m.alpha_plus() })
                            .sum::<f64>()
                    })
                    .fold(0.0, f64::max),
                _ => (0..m.n_classes())
                    .map(|j| {
                        (0..m.n_classes())
                            .filter(|&k| k != j)
                            .map(|k| averaged_rate_bound(m, j, k))
                            .sum::<f64>()
                    })
                    .fold(0.0, f64::max),
            };
            channel_majorants.push(bound * (1.0 + MAJORANT_SLACK));
        }
        let majorants = channel_majorants
            .iter()
            .zip(sys.populations())
            .map(|(b, p)| b * p.count as f64)
            .collect();
        let mut full_step = EtdFactors::new(sys.basis().eigenvalues(), cfg.h_max);
        full_step.fill(sys.basis().eigenvalues(), cfg.h_max, true);
        Ok(Self {
            sys,
            cfg,
            dynamics,
            channel_majorants,
            majorants,
            full_step,
        })
    }

    pub fn system(&self) -> &HybridSystem {
        self.sys
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn dynamics(&self) -> Dynamics {
        self.dynamics
    }

    /// Candidate rate of each population.
    pub fn majorants(&self) -> &[f64] {
        &self.majorants
    }

    pub fn initial_state(&self) -> HybridState {
        HybridState::initial(self.sys, self.dynamics.level())
    }

    fn check_state(&self, state: &HybridState) -> Result<()> {
        if state.r.level() != self.dynamics.level() || state.r.len() != self.sys.n_channels() {
            return Err(Error::domain("channel configuration does not match the dynamics"));
        }
        if state.u.coeffs().len() != self.sys.modes() {
            return Err(Error::domain("field does not match the system basis"));
        }
        Ok(())
    }

    fn noise_level(&self) -> Option<f64> {
        match self.dynamics {
            Dynamics::Langevin { epsilon } if epsilon > 0.0 => Some(epsilon),
            _ => None,
        }
    }

    /// One deterministic exponential-Euler step of length `h` with the
    /// configuration held fixed.
    pub fn flow_step(&self, state: &mut HybridState, h: f64) -> Result<()> {
        if !(h > 0.0) {
            return Err(Error::domain("step must be positive"));
        }
        self.check_state(state)?;
        let mut ws = Workspace::new(self.sys);
        self.prepare(state, &mut ws, None)?;
        self.commit(state, h, &mut ws);
        Ok(())
    }

    /// One exponential Euler–Maruyama step; returns `‖Mη‖²` of the drawn
    /// noise. Without Langevin noise this is [`Simulator::flow_step`].
    pub fn em_step(&self, state: &mut HybridState, h: f64, noise: &mut SimRng) -> Result<f64> {
        if !(h > 0.0) {
            return Err(Error::domain("step must be positive"));
        }
        self.check_state(state)?;
        let mut ws = Workspace::new(self.sys);
        self.prepare(state, &mut ws, Some(noise))?;
        self.commit(state, h, &mut ws);
        Ok(ws.noise_energy)
    }

    /// Freezes the reaction (and noise) of the step starting at `state`.
    fn prepare(&self, state: &HybridState, ws: &mut Workspace, noise: Option<&mut SimRng>) -> Result<()> {
        let noise = match (self.noise_level(), noise) {
            (Some(_), Some(n)) => Some(n),
            _ => None,
        };
        let sys = self.sys;
        let c = state.u.coeffs();
        for i in 0..sys.n_channels() {
            let y = dot(sys.pairing(i), c);
            ws.y[i] = y;
            let v = state.r.values()[i];
            ws.coef[i] = match self.dynamics {
                Dynamics::Full { .. } => sys.state_current(i, v, y),
                _ => {
                    let model = sys.model_of(i);
                    if noise.is_some() {
                        let s = ws.local.channel_variance(model, v, y)?;
                        ws.sigma[i] = sys.sites()[i].weight * (2.0 * s).sqrt();
                    } else {
                        ws.local.class_law(model, v, y)?;
                    }
                    let mut cur = 0.0;
                    for (a, &zeta) in model.class_members(v).iter().enumerate() {
                        cur += model.conductance(zeta) * ws.local.mu()[a] * (model.reversal(zeta) - y);
                    }
                    sys.sites()[i].weight * cur
                }
            };
        }
        ws.g.copy_from_slice(sys.stimulus_coeffs());
        sys.scatter(&ws.coef, &mut ws.g);
        ws.noisy = noise.is_some();
        if let Some(noise) = noise {
            ws.xi.fill(0.0);
            for i in 0..sys.n_channels() {
                let eta: f64 = StandardNormal.sample(noise);
                let amp = ws.sigma[i] * eta;
                if amp != 0.0 {
                    for (x, w) in ws.xi.iter_mut().zip(sys.pairing(i)) {
                        *x += amp * w;
                    }
                }
            }
        }
        ws.prepared = true;
        Ok(())
    }

    /// Applies the prepared step over length `h` to `state`.
    fn commit(&self, state: &mut HybridState, h: f64, ws: &mut Workspace) {
        let eps = self.noise_level();
        let noisy = ws.noisy;
        if noisy {
            ws.noise_energy += ws.xi.iter().map(|x| x * x).sum::<f64>();
        }
        if h != self.cfg.h_max {
            ws.partial.fill(self.sys.basis().eigenvalues(), h, noisy);
        }
        let f = if h == self.cfg.h_max { &self.full_step } else { &ws.partial };
        match (noisy, eps) {
            (true, Some(e)) => f.apply(state.u.coeffs_mut(), &ws.g, Some((&ws.xi, e))),
            _ => f.apply(state.u.coeffs_mut(), &ws.g, None),
        }
        state.t += h;
        ws.prepared = false;
    }

    /// Field at `state.t + h` along the prepared step, written to `ws.ctmp`.
    fn provisional(&self, state: &HybridState, h: f64, ws: &mut Workspace) {
        ws.ctmp.copy_from_slice(state.u.coeffs());
        if h <= 0.0 {
            return;
        }
        let eps = self.noise_level();
        let noisy = ws.noisy;
        if h != self.cfg.h_max {
            ws.partial.fill(self.sys.basis().eigenvalues(), h, noisy);
        }
        let f = if h == self.cfg.h_max { &self.full_step } else { &ws.partial };
        match (noisy, eps) {
            (true, Some(e)) => f.apply(&mut ws.ctmp, &ws.g, Some((&ws.xi, e))),
            _ => f.apply(&mut ws.ctmp, &ws.g, None),
        }
    }

    /// Whether moving a channel of `model` between `from` and `to` leaves
    /// the reaction and the noise unchanged.
    fn inert_jump(&self, model: &ChannelModel, from: usize, to: usize) -> bool {
        match self.dynamics {
            Dynamics::Full { .. } => {
                let (c0, c1) = (model.conductance(from), model.conductance(to));
                c0 == 0.0 && c1 == 0.0
            }
            _ => [from, to]
                .iter()
                .all(|&j| model.class_members(j).iter().all(|&s| model.conductance(s) == 0.0)),
        }
    }

    /// Thinning decision for a candidate of population `q`, with the field
    /// at the candidate time in `ws.ctmp`.
    fn decide(&self, q: usize, state: &HybridState, lane: &mut SimRng, ws: &mut Workspace) -> Result<Option<(usize, usize, usize)>> {
        let range = self.sys.population_channels(q);
        let i = range.start + lane.random_range(0..range.len());
        let u01: f64 = lane.random();
        let lam = self.channel_majorants[q];
        let threshold = u01 * lam;
        let model = &self.sys.populations()[q].model;
        let y = dot(self.sys.pairing(i), &ws.ctmp);
        let from = state.r.values()[i];
        let mut total = 0.0;
        let mut chosen = None;
        match self.dynamics {
            Dynamics::Full { epsilon } => {
                for to in 0..model.n_states() {
                    if to == from || !model.has_rate(from, to) {
                        continue;
                    }
                    let mut r = model.rate(from, to, y);
                    if model.is_fast(from, to) {
                        r /= epsilon;
                    }
                    total += r;
                    if chosen.is_none() && threshold < total {
                        chosen = Some(to);
                    }
                }
            }
            _ => {
                ws.local.class_law(model, from, y)?;
                for to in 0..model.n_classes() {
                    if to == from {
                        continue;
                    }
                    total += averaged_rate_with(model, y, from, to, ws.local.mu());
                    if chosen.is_none() && threshold < total {
                        chosen = Some(to);
                    }
                }
            }
        }
        if total > lam * (1.0 + 1e-12) {
            return Err(Error::Majorant { rate: total, bound: lam });
        }
        Ok(chosen.map(|to| (i, from, to)))
    }

    /// Runs the event loop until the next accepted jump (returned) or until
    /// the next event lies beyond `until` (`None`). On `None` the committed
    /// state sits at the last step start `≤ until`, with the step to
    /// `until` prepared.
    fn advance(
        &self,
        state: &mut HybridState,
        until: f64,
        rs: &mut RandomStreams,
        ws: &mut Workspace,
    ) -> Result<Option<JumpRecord>> {
        loop {
            let (q, tc) = rs
                .next
                .iter()
                .copied()
                .enumerate()
                .fold((usize::MAX, f64::INFINITY), |best, (q, t)| if t < best.1 { (q, t) } else { best });
            if self.cfg.frozen_field {
                if tc > until {
                    state.t = state.t.max(until);
                    return Ok(None);
                }
                state.t = tc;
                ws.ctmp.copy_from_slice(state.u.coeffs());
            } else {
                if !ws.prepared {
                    self.prepare(state, ws, Some(&mut rs.noise))?;
                }
                let step_end = state.t + self.cfg.h_max;
                if step_end <= tc.min(until) {
                    self.commit(state, self.cfg.h_max, ws);
                    continue;
                }
                if tc > until {
                    return Ok(None);
                }
                self.provisional(state, tc - state.t, ws);
            }
            let decision = self.decide(q, state, &mut rs.lanes[q], ws)?;
            rs.next[q] = tc + candidate_gap(&mut rs.lanes[q], self.majorants[q]);
            if let Some((i, from, to)) = decision {
                let model = &self.sys.populations()[q].model;
                if !self.cfg.frozen_field && !self.inert_jump(model, from, to) {
                    let h = tc - state.t;
                    self.commit(state, h, ws);
                    state.t = tc;
                }
                state.r.values_mut()[i] = to;
                return Ok(Some(JumpRecord { t: tc, channel: i, from, to }));
            }
        }
    }

    /// Flows forward to the next accepted jump, or to `horizon` if there is
    /// none (`None`). The returned state sits at the jump (or horizon) time.
    pub fn next_jump(&self, state: &mut HybridState, rs: &mut RandomStreams, horizon: f64) -> Result<Option<JumpRecord>> {
        self.check_state(state)?;
        let mut ws = Workspace::new(self.sys);
        let out = self.advance(state, horizon, rs, &mut ws)?;
        let t_end = out.map_or(horizon, |j| j.t);
        if !self.cfg.frozen_field && state.t < t_end && t_end.is_finite() {
            if !ws.prepared {
                self.prepare(state, &mut ws, Some(&mut rs.noise))?;
            }
            let h = t_end - state.t;
            self.commit(state, h, &mut ws);
            state.t = t_end;
        }
        Ok(out)
    }

    fn sample(&self, r: &ChannelConfiguration, coeffs: &[f64], ws: &mut Workspace) -> Result<(Vec<f64>, Vec<f64>)> {
        let field = SpectralField::from_coeffs(self.sys.basis().clone(), coeffs.to_vec(), crate::spectral::BasisKind::L2)?;
        let probes = self
            .cfg
            .probes
            .iter()
            .map(|&x| spectral::eval_field(&field, x))
            .collect::<Result<Vec<_>>>()?;
        let mut occ = Vec::new();
        for (q, pop) in self.sys.populations().iter().enumerate() {
            let m = &pop.model;
            let mut frac = vec![0.0; m.n_states()];
            let w = 1.0 / pop.count.max(1) as f64;
            for i in self.sys.population_channels(q) {
                let v = r.values()[i];
                match self.dynamics {
                    Dynamics::Full { .. } => frac[v] += w,
                    _ => {
                        let y = dot(self.sys.pairing(i), coeffs);
                        ws.local.class_law(m, v, y)?;
                        for (a, &zeta) in m.class_members(v).iter().enumerate() {
                            frac[zeta] += w * ws.local.mu()[a];
                        }
                    }
                }
            }
            occ.extend(frac);
        }
        Ok((probes, occ))
    }

    /// Runs from `initial` to the horizon, sampling on the output grid.
    pub fn run(&self, initial: HybridState, id: StreamId) -> Result<Trajectory> {
        self.check_state(&initial)?;
        let sys = self.sys;
        let mut state = initial;
        let t0 = state.t;
        let mut rs = RandomStreams::new(self, id, t0);
        let mut ws = Workspace::new(sys);
        let h_bound = sys.a_priori_h_bound(state.u.coeffs());
        let limit = self.cfg.blowup_factor * h_bound;
        let weights = sys.basis().h_weights();
        let langevin = matches!(self.dynamics, Dynamics::Langevin { .. });

        let mut grid = Vec::new();
        let n_out = ((self.cfg.horizon - t0) / self.cfg.dt_out + 1e-9).floor() as usize;
        for m in 0..=n_out {
            grid.push(t0 + m as f64 * self.cfg.dt_out);
        }
        if *grid.last().unwrap() < self.cfg.horizon * (1.0 - 1e-12) {
            grid.push(self.cfg.horizon);
        }

        let mut occupancy_labels = Vec::new();
        for pop in sys.populations() {
            for s in pop.model.state_names() {
                occupancy_labels.push(format!("occ_{}_{}", pop.model.name(), s));
            }
        }
        let mut traj = Trajectory {
            dynamics: self.dynamics,
            stream: id,
            times: Vec::with_capacity(grid.len()),
            coeffs: Vec::with_capacity(grid.len()),
            probes: self.cfg.probes.clone(),
            probe_values: Vec::with_capacity(grid.len()),
            occupancy_labels,
            occupancy: Vec::with_capacity(grid.len()),
            njumps: Vec::with_capacity(grid.len()),
            noise_energy: langevin.then(Vec::new),
            jumps: Vec::new(),
            max_h_norm: 0.0,
            h_bound,
            final_state: state.clone(),
        };
        let mut njumps = 0u64;
        for &t_out in &grid {
            while let Some(j) = self.advance(&mut state, t_out, &mut rs, &mut ws)? {
                njumps += 1;
                if self.cfg.record_jumps {
                    traj.jumps.push(j);
                }
            }
            if !self.cfg.frozen_field {
                self.provisional(&state, t_out - state.t, &mut ws);
            } else {
                ws.ctmp.copy_from_slice(state.u.coeffs());
            }
            let coeffs = ws.ctmp.clone();
            let hn = spectral::h_norm(&coeffs, weights);
            if !hn.is_finite() || hn > limit {
                return Err(Error::BlowUp { t: t_out, norm: hn, limit });
            }
            traj.max_h_norm = traj.max_h_norm.max(hn);
            let (probes, occ) = self.sample(&state.r, &coeffs, &mut ws)?;
            traj.times.push(t_out);
            traj.coeffs.push(coeffs);
            traj.probe_values.push(probes);
            traj.occupancy.push(occ);
            traj.njumps.push(njumps);
            if let Some(e) = traj.noise_energy.as_mut() {
                e.push(ws.noise_energy);
                ws.noise_energy = 0.0;
            }
        }
        state.u.coeffs_mut().copy_from_slice(traj.coeffs.last().unwrap());
        state.t = *traj.times.last().unwrap();
        traj.final_state = state;
        Ok(traj)
    }
}

/// Two-timescale process from the default initial state.
pub fn simulate_pdmp(sys: &HybridSystem, cfg: &SimConfig, epsilon: f64, id: StreamId) -> Result<Trajectory> {
    let sim = Simulator::new(sys, cfg.clone(), Dynamics::Full { epsilon })?;
    sim.run(sim.initial_state(), id)
}

/// Averaged process from the default initial state.
pub fn simulate_averaged(sys: &HybridSystem, cfg: &SimConfig, id: StreamId) -> Result<Trajectory> {
    let sim = Simulator::new(sys, cfg.clone(), Dynamics::Averaged)?;
    sim.run(sim.initial_state(), id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinetics::{ChannelModel, RateFn, RateForm};
    use crate::spectral::{BasisKind, SpectralBasis};
    use crate::system::{Population, SourceKind, Stimulus};
    use proptest::prelude::*;
    use std::sync::Arc;
    use statrs::distribution::{ChiSquared, ContinuousCDF, Discrete, Poisson};

    fn two_state(alpha: RateForm, beta: RateForm, c: f64, v: f64) -> ChannelModel {
        ChannelModel::builder("k")
            .state("closed", 0, 0.0, 0.0)
            .state("open", 0, c, v)
            .rate("closed", "open", RateFn::new(alpha))
            .rate("open", "closed", RateFn::new(beta))
            .build()
            .unwrap()
    }

    fn one_way(rate: f64) -> ChannelModel {
        ChannelModel::builder("k")
            .state("a", 0, 0.0, 0.0)
            .state("b", 0, 0.0, 0.0)
            .rate("a", "b", RateFn::new(RateForm::Constant(rate)))
            .rate("b", "a", RateFn::new(RateForm::Constant(rate)))
            .build()
            .unwrap()
    }

    fn system(model: ChannelModel, count: usize, modes: usize, stim: Option<Stimulus>) -> HybridSystem {
        let basis = Arc::new(SpectralBasis::dirichlet(modes).unwrap());
        HybridSystem::new(basis, vec![Population { model, count }], stim, SourceKind::Pointlike).unwrap()
    }

    fn id(replica: u64) -> StreamId {
        StreamId { master: 99, replica }
    }

    /// Classical adaptive Dormand–Prince integration of the Galerkin ODE
    /// `ċ_k = −λ_k c_k + g_k(c)` with a fixed channel configuration.
    fn dopri_oracle(sys: &HybridSystem, r: &ChannelConfiguration, c0: &[f64], t_end: f64, tol: f64) -> Vec<f64> {
        let lam = sys.basis().eigenvalues().to_vec();
        let rhs = |c: &[f64]| -> Vec<f64> {
            let u = SpectralField::from_coeffs(sys.basis().clone(), c.to_vec(), BasisKind::L2).unwrap();
            let g = sys.reaction_coeffs(r, &u).unwrap();
            c.iter().zip(&lam).zip(&g).map(|((ck, l), gk)| -l * ck + gk).collect()
        };
        let a: [[f64; 6]; 6] = [
            [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
            [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
            [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
            [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
            [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
        ];
        let b5 = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
        let b4 = [
            5179.0 / 57600.0,
            0.0,
            7571.0 / 16695.0,
            393.0 / 640.0,
            -92097.0 / 339200.0,
            187.0 / 2100.0,
            1.0 / 40.0,
        ];
        let n = c0.len();
        let mut c = c0.to_vec();
        let mut t = 0.0;
        let mut h: f64 = 1e-6;
        while t < t_end {
            h = h.min(t_end - t);
            let mut k: Vec<Vec<f64>> = vec![rhs(&c)];
            for row in &a {
                let stage: Vec<f64> = (0..n)
                    .map(|j| c[j] + h * row.iter().zip(&k).map(|(aij, kk)| aij * kk[j]).sum::<f64>())
                    .collect();
                k.push(rhs(&stage));
            }
            let y5: Vec<f64> = (0..n)
                .map(|j| c[j] + h * b5.iter().zip(&k).map(|(b, kk)| b * kk[j]).sum::<f64>())
                .collect();
            let err = (0..n)
                .map(|j| {
                    let e = h * b5.iter().zip(&b4).zip(&k).map(|((p, q), kk)| (p - q) * kk[j]).sum::<f64>();
                    e.abs() / (tol * (1.0 + y5[j].abs()))
                })
                .fold(0.0, f64::max);
            if err <= 1.0 {
                t += h;
                c = y5;
            }
            h *= (0.9 * err.max(1e-10).powf(-0.2)).clamp(0.2, 5.0);
        }
        c
    }

    #[test]
    fn zero_reaction_is_pure_decay() {
        let sys = system(one_way(1.0), 3, 8, None);
        let sim = Simulator::new(&sys, SimConfig::default(), Dynamics::Full { epsilon: 1.0 }).unwrap();
        let mut state = sim.initial_state();
        let c0: Vec<f64> = (1..=8).map(|k| 1.0 / k as f64).collect();
        state.u.coeffs_mut().copy_from_slice(&c0);
        sim.flow_step(&mut state, 0.01).unwrap();
        for (k, (c, c0)) in state.u.coeffs().iter().zip(&c0).enumerate() {
            let l = sys.basis().eigenvalues()[k];
            assert!((c - c0 * (-l * 0.01).exp()).abs() < 1e-15);
        }
    }

    #[test]
    fn huge_step_reaches_fixed_point() {
        let stim = Stimulus {
            amplitude: 5.0,
            from: 0.2,
            to: 0.6,
        };
        let sys = system(one_way(1.0), 2, 6, Some(stim));
        let sim = Simulator::new(&sys, SimConfig::default(), Dynamics::Full { epsilon: 1.0 }).unwrap();
        let mut state = sim.initial_state();
        sim.flow_step(&mut state, 1e3).unwrap();
        for (k, c) in state.u.coeffs().iter().enumerate() {
            let fixed = sys.stimulus_coeffs()[k] / sys.basis().eigenvalues()[k];
            assert!((c - fixed).abs() < 1e-14 * fixed.abs().max(1.0));
        }
    }

    #[test]
    fn nonlinear_flow_matches_adaptive_oracle() {
        let model = two_state(RateForm::Constant(1.0), RateForm::Constant(1.0), 2.0, -1.0);
        let stim = Stimulus {
            amplitude: 3.0,
            from: 0.0,
            to: 0.1,
        };
        let sys = system(model, 5, 8, Some(stim));
        let cfg = SimConfig {
            horizon: 1.0,
            ..SimConfig::default()
        };
        let sim = Simulator::new(&sys, cfg, Dynamics::Full { epsilon: 1.0 }).unwrap();
        let mut state = sim.initial_state();
        state.r = ChannelConfiguration::new(Level::States, vec![1, 0, 1, 1, 0]);
        let c0 = state.u.coeffs().to_vec();
        for _ in 0..10_000 {
            sim.flow_step(&mut state, 1e-4).unwrap();
        }
        let oracle = dopri_oracle(&sys, &state.r, &c0, 1.0, 1e-12);
        let err = state
            .u
            .coeffs()
            .iter()
            .zip(&oracle)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err <= 1e-6, "sup-mode error {err:e}");
    }

    #[test]
    fn channel_free_run_is_deterministic_pde() {
        let stim = Stimulus {
            amplitude: 300.0,
            from: 0.0,
            to: 0.1,
        };
        let basis = Arc::new(SpectralBasis::dirichlet(16).unwrap());
        let sys = HybridSystem::new(basis, vec![], Some(stim), SourceKind::Pointlike).unwrap();
        let cfg = SimConfig {
            horizon: 1.0,
            dt_out: 0.25,
            ..SimConfig::default()
        };
        let traj = simulate_pdmp(&sys, &cfg, 0.1, id(0)).unwrap();
        assert_eq!(*traj.njumps.last().unwrap(), 0);
        let r = sys.initial_configuration(Level::States);
        for (m, &t) in traj.times.iter().enumerate().skip(1) {
            let oracle = dopri_oracle(&sys, &r, &vec![0.0; 16], t, 1e-12);
            for (a, b) in traj.coeffs[m].iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn zero_rates_never_jump() {
        let model = ChannelModel::builder("k")
            .state("a", 0, 1.0, 1.0)
            .state("b", 1, 0.0, 0.0)
            .build()
            .unwrap();
        let sys = system(model, 4, 4, None);
        let sim = Simulator::new(&sys, SimConfig::default(), Dynamics::Full { epsilon: 0.1 }).unwrap();
        assert_eq!(sim.majorants(), &[0.0]);
        let mut state = sim.initial_state();
        let mut rs = RandomStreams::new(&sim, id(0), 0.0);
        assert!(sim.next_jump(&mut state, &mut rs, 2.0).unwrap().is_none());
        assert_eq!(state.t, 2.0);
    }

    /// Inter-jump times of a single channel with constant rate are Exp(λ):
    /// Kolmogorov–Smirnov test at the 1% level on 10⁵ samples.
    #[test]
    fn exponential_inter_jump_times() {
        let rate = 2.5;
        let sys = system(one_way(rate), 1, 4, None);
        let cfg = SimConfig {
            frozen_field: true,
            ..SimConfig::default()
        };
        let sim = Simulator::new(&sys, cfg, Dynamics::Full { epsilon: 1.0 }).unwrap();
        let mut state = sim.initial_state();
        let mut rs = RandomStreams::new(&sim, id(1), 0.0);
        let n = 100_000;
        let mut gaps = Vec::with_capacity(n);
        let mut last = 0.0;
        while gaps.len() < n {
            let j = sim.next_jump(&mut state, &mut rs, f64::INFINITY).unwrap().unwrap();
            assert!(j.t > last);
            gaps.push(j.t - last);
            last = j.t;
        }
        gaps.sort_by(f64::total_cmp);
        let d = gaps
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = 1.0 - (-rate * x).exp();
                (f - i as f64 / n as f64).max((i + 1) as f64 / n as f64 - f)
            })
            .fold(0.0, f64::max);
        // Asymptotic 1% critical value 1.628/√n.
        assert!(d < 1.628 / (n as f64).sqrt(), "KS statistic {d}");
    }

    /// Jump counts on [0, T] with constant rates are Poisson(NλT):
    /// chi-square goodness of fit at 1% on 10⁴ replicas.
    #[test]
    fn jump_counts_are_poisson() {
        let (rate, count, horizon) = (1.5, 2, 1.0);
        let sys = system(one_way(rate), count, 2, None);
        let cfg = SimConfig {
            horizon,
            dt_out: horizon,
            frozen_field: true,
            ..SimConfig::default()
        };
        let sim = Simulator::new(&sys, cfg, Dynamics::Full { epsilon: 1.0 }).unwrap();
        let reps = 10_000;
        let mean = rate * count as f64 * horizon;
        let max_bin = 10;
        let mut observed = vec![0usize; max_bin + 1];
        for rep in 0..reps {
            let traj = sim.run(sim.initial_state(), id(rep)).unwrap();
            let n = *traj.njumps.last().unwrap() as usize;
            observed[n.min(max_bin)] += 1;
        }
        let pois = Poisson::new(mean).unwrap();
        let mut chi2 = 0.0;
        let mut tail = 1.0;
        for (k, &o) in observed.iter().enumerate() {
            let p = if k < max_bin { pois.pmf(k as u64) } else { tail };
            tail -= p;
            let e = p * reps as f64;
            chi2 += (o as f64 - e).powi(2) / e;
        }
        let crit = ChiSquared::new(max_bin as f64).unwrap().inverse_cdf(0.99);
        assert!(chi2 < crit, "chi2 {chi2} ≥ {crit}");
    }

    /// With the field frozen, each channel's time-averaged occupancy matches
    /// its stationary law within three batch-means standard errors.
    #[test]
    fn frozen_field_occupancy() {
        let model = two_state(
            RateForm::Boltzmann {
                scale: 4.0,
                half: 0.0,
                slope: 1.0,
            },
            RateForm::Constant(2.0),
            1.0,
            1.0,
        );
        let count = 3;
        let sys = system(model, count, 4, None);
        let horizon = 2000.0;
        let cfg = SimConfig {
            horizon,
            dt_out: horizon,
            frozen_field: true,
            record_jumps: true,
            ..SimConfig::default()
        };
        let sim = Simulator::new(&sys, cfg, Dynamics::Full { epsilon: 1.0 }).unwrap();
        let mut init = sim.initial_state();
        init.u.coeffs_mut().copy_from_slice(&[1.0, -0.5, 0.2, 0.0]);
        let traj = sim.run(init.clone(), id(3)).unwrap();
        let batches = 40;
        let width = horizon / batches as f64;
        for i in 0..count {
            let y = sys.local_voltage(i, init.u.coeffs());
            let mu_open = 1.0 / (1.0 + 2.0 / (4.0 / (1.0 + (-y).exp())));
            let mut open_time = vec![0.0; batches];
            let mut state = 0;
            let mut last = 0.0;
            let add = |from: f64, to: f64, open: bool, acc: &mut Vec<f64>| {
                if !open {
                    return;
                }
                let mut a = from;
                while a < to {
                    let b = (a / width).floor() as usize;
                    let end = ((b + 1) as f64 * width).min(to);
                    acc[b.min(batches - 1)] += end - a;
                    a = end;
                }
            };
            for j in traj.jumps.iter().filter(|j| j.channel == i) {
                add(last, j.t, state == 1, &mut open_time);
                state = j.to;
                last = j.t;
            }
            add(last, horizon, state == 1, &mut open_time);
            let fr: Vec<f64> = open_time.iter().map(|x| x / width).collect();
            let mean = fr.iter().sum::<f64>() / batches as f64;
            let var = fr.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (batches - 1) as f64;
            let se = (var / batches as f64).sqrt();
            assert!((mean - mu_open).abs() <= 3.0 * se, "channel {i}: {mean} vs {mu_open} (se {se})");
        }
    }

    #[test]
    fn jump_count_scales_inversely_with_epsilon() {
        let model = ChannelModel::builder("k")
            .state("closed", 0, 0.0, 0.0)
            .state("open", 0, 1.0, -1.0)
            .state("inactive", 1, 0.0, 0.0)
            .rate("closed", "open", RateFn::new(RateForm::Constant(1.0)))
            .rate("open", "closed", RateFn::new(RateForm::Constant(1.0)))
            .rate("open", "inactive", RateFn::new(RateForm::Constant(0.05)))
            .rate("inactive", "closed", RateFn::new(RateForm::Constant(0.05)))
            .build()
            .unwrap();
        let sys = system(model, 5, 8, None);
        let cfg = SimConfig {
            horizon: 1.0,
            dt_out: 0.5,
            ..SimConfig::default()
        };
        let total = |eps: f64| -> u64 {
            (0..20)
                .map(|r| *simulate_pdmp(&sys, &cfg, eps, id(r)).unwrap().njumps.last().unwrap())
                .sum()
        };
        let ratio = total(1e-3) as f64 / total(1e-2) as f64;
        assert!((8.0..=12.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn replay_is_bit_identical() {
        let model = two_state(
            RateForm::MorrisLecarOpen {
                v3: 0.0,
                v4: 20.0,
                scale: 2.0,
            },
            RateForm::MorrisLecarClose {
                v3: 0.0,
                v4: 20.0,
                scale: 2.0,
            },
            1.0,
            -1.0,
        );
        let stim = Stimulus {
            amplitude: 10.0,
            from: 0.0,
            to: 0.1,
        };
        let sys = system(model, 6, 8, Some(stim));
        let cfg = SimConfig {
            horizon: 0.3,
            dt_out: 0.05,
            record_jumps: true,
            ..SimConfig::default()
        };
        let a = simulate_pdmp(&sys, &cfg, 0.1, id(5)).unwrap();
        let b = simulate_pdmp(&sys, &cfg, 0.1, id(5)).unwrap();
        assert_eq!(a.to_csv_string(), b.to_csv_string());
        assert_eq!(a.jumps, b.jumps);
        assert!(a.jumps.windows(2).all(|w| w[0].t < w[1].t));
        let c = simulate_pdmp(&sys, &cfg, 0.1, id(6)).unwrap();
        assert_ne!(a.jumps, c.jumps);
    }

    #[test]
    fn all_fast_averaged_run_has_no_jumps() {
        let model = two_state(RateForm::Constant(1.0), RateForm::Constant(3.0), 2.0, -1.0);
        let stim = Stimulus {
            amplitude: 5.0,
            from: 0.0,
            to: 0.2,
        };
        let sys = system(model, 4, 8, Some(stim));
        let cfg = SimConfig {
            horizon: 0.2,
            dt_out: 0.05,
            ..SimConfig::default()
        };
        let a = simulate_averaged(&sys, &cfg, id(0)).unwrap();
        let b = simulate_averaged(&sys, &cfg, id(1)).unwrap();
        assert_eq!(*a.njumps.last().unwrap(), 0);
        assert_eq!(a.coeffs, b.coeffs);
        let open = a.occupancy_labels.iter().position(|l| l == "occ_k_open").unwrap();
        assert!(a.occupancy.iter().all(|o| (o[open] - 0.25).abs() < 1e-15));
    }

    #[test]
    fn csv_header_and_rows() {
        let sys = system(one_way(1.0), 2, 4, None);
        let cfg = SimConfig {
            horizon: 0.1,
            dt_out: 0.05,
            probes: vec![0.5],
            ..SimConfig::default()
        };
        let t = simulate_pdmp(&sys, &cfg, 1.0, id(0)).unwrap();
        let csv = t.to_csv_string();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "t,u@0.5,occ_k_a,occ_k_b,njumps_cum");
        assert_eq!(lines.count(), 3);
    }

    #[test]
    fn bad_configuration_is_rejected() {
        let sys = system(one_way(1.0), 2, 4, None);
        assert!(Simulator::new(&sys, SimConfig::default(), Dynamics::Full { epsilon: 0.0 }).is_err());
        let cfg = SimConfig {
            horizon: -1.0,
            ..SimConfig::default()
        };
        assert!(Simulator::new(&sys, cfg, Dynamics::Averaged).is_err());
        let sim = Simulator::new(&sys, SimConfig::default(), Dynamics::Averaged).unwrap();
        let wrong = HybridState::initial(&sys, Level::States);
        assert!(sim.run(wrong, id(0)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn acceptance_never_exceeds_majorant(seed in 0u64..1000, eps in 0.01f64..1.0) {
            let model = two_state(
                RateForm::MorrisLecarOpen { v3: 2.0, v4: 30.0, scale: 1.0 },
                RateForm::MorrisLecarClose { v3: 2.0, v4: 30.0, scale: 1.0 },
                8.0,
                -70.0,
            );
            let stim = Stimulus { amplitude: 300.0, from: 0.0, to: 0.1 };
            let sys = system(model, 5, 8, Some(stim));
            let cfg = SimConfig { horizon: 0.05, dt_out: 0.05, ..SimConfig::default() };
            let t = simulate_pdmp(&sys, &cfg, eps, StreamId { master: seed, replica: 0 });
            prop_assert!(t.is_ok());
        }
    }
}
