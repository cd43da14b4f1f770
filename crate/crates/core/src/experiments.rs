//! Experiment drivers behind the command-line tool: trajectory export,
//! ε-sweeps, the frozen-field variance check, trace series and the Poisson
//! solver cross-check. Every driver is a pure function of the config and
//! the master seed; replicas fan out over a bounded thread pool and are
//! collected in replica order.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::config::{DynamicsKind, EpsilonSpec, ExperimentConfig};
use crate::error::{Error, Result};
use crate::fluctuation::{
    self, diffusion_matrix, poisson_solution, solve_phi_integral, solve_phi_linear, IntegralPolicy, POISSON_TOL,
};
use crate::kinetics::{self, QuasiStationary};
use crate::langevin::simulate_langevin;
use crate::morris_lecar::{
    ml_class_configuration, ml_diffusion_closed_form, ml_phi_closed_form, ml_system, ml_trace_bound,
    ml_variance_closed_form, MLParameters,
};
use crate::pdmp::{simulate_averaged, simulate_pdmp, Dynamics, HybridState, SimConfig, Simulator, Trajectory};
use crate::rng::{self, StreamId};
use crate::spectral::{BasisKind, SpectralField};
use crate::system::{ChannelConfiguration, HybridSystem, Level, SourceKind};

/// Runs `f` on a pool of `workers` threads (0 = CPU count).
fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::domain(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

fn write_file(dir: &Path, name: &str, body: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, body)?;
    Ok(path)
}

/// Column label of an ε value in file names.
fn epsilon_label(e: EpsilonSpec) -> String {
    match e {
        EpsilonSpec::Averaged => "averaged".into(),
        EpsilonSpec::Value(v) => format!("eps{v}"),
    }
}

fn simulate_one(cfg: &ExperimentConfig, sys: &HybridSystem, sim: &SimConfig, eps: EpsilonSpec, id: StreamId) -> Result<Trajectory> {
    match (cfg.dynamics, eps) {
        (DynamicsKind::Pdmp, EpsilonSpec::Value(e)) => simulate_pdmp(sys, sim, e, id),
        (DynamicsKind::Pdmp, EpsilonSpec::Averaged) => simulate_averaged(sys, sim, id),
        (DynamicsKind::Langevin, e) => simulate_langevin(sys, sim, e.value(), id),
    }
}

/// One trajectory per (ε, replica), written as
/// `trajectory_<eps>_<replica>.csv`.
pub fn run_simulate(cfg: &ExperimentConfig) -> Result<Vec<(String, Trajectory)>> {
    let sys = cfg.dynamics_system()?;
    let sim = cfg.sim_config(cfg.dynamics == DynamicsKind::Langevin);
    let jobs: Vec<(EpsilonSpec, u64)> = cfg
        .epsilons
        .iter()
        .flat_map(|&e| (0..cfg.replicas as u64).map(move |r| (e, r)))
        .collect();
    let out = with_pool(cfg.workers, || {
        jobs.par_iter()
            .map(|&(e, r)| {
                let id = StreamId {
                    master: cfg.seed,
                    replica: r,
                };
                let tr = simulate_one(cfg, &sys, &sim, e, id)?;
                Ok((format!("trajectory_{}_{r}.csv", epsilon_label(e)), tr))
            })
            .collect::<Result<Vec<_>>>()
    })??;
    Ok(out)
}

pub fn write_trajectories(runs: &[(String, Trajectory)], dir: &Path) -> Result<()> {
    for (name, tr) in runs {
        write_file(dir, name, &tr.to_csv_string())?;
    }
    Ok(())
}

/// Per-ε summary of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub epsilon: EpsilonSpec,
    pub mean_sup_err: f64,
    pub stderr: f64,
    pub replicas: usize,
}

/// Spike statistics at the spike probe, per ε.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeRow {
    pub epsilon: EpsilonSpec,
    pub mean_spikes: f64,
    /// Largest sampled `u` at the probe, averaged over replicas.
    pub mean_peak: f64,
    pub replicas: usize,
}

/// Least-squares line through `(log ε, log statistic)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub dynamics: DynamicsKind,
    pub rows: Vec<SweepRow>,
    pub spikes: Vec<SpikeRow>,
    pub reference_spikes: f64,
    pub reference_peak: f64,
    pub fit: Option<SlopeFit>,
}

/// Upward crossings of `threshold` by `u(x)` and the largest sampled value.
pub fn spike_stats(tr: &Trajectory, x: f64, threshold: f64) -> Result<(usize, f64)> {
    let basis = tr.final_state.u.basis().clone();
    let mut count = 0;
    let mut peak = f64::NEG_INFINITY;
    let mut above = false;
    for c in &tr.coeffs {
        let v = SpectralField::from_coeffs(basis.clone(), c.clone(), BasisKind::L2)?.eval(x)?;
        peak = peak.max(v);
        if v > threshold && !above {
            count += 1;
        }
        above = v > threshold;
    }
    Ok((count, peak))
}

fn mean_stderr(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn fit_loglog(points: &[(f64, f64)]) -> Option<SlopeFit> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Some(SlopeFit {
        slope,
        intercept: my - slope * mx,
    })
}

struct ReplicaOutcome {
    errors: Vec<f64>,
    spikes: Vec<(usize, f64)>,
    reference: (usize, f64),
}

/// Paired ε-sweep. Replica `r` of every ε shares the stream
/// `(seed, r)` with the reference run. The reference is the averaged
/// process for PDMP sweeps and the noise-free Langevin run for Langevin
/// sweeps; the latter reports `E sup_t ‖ũ^ε − u‖²` and fits its log-log
/// slope. The `averaged` token compares the reference with itself.
pub fn run_epsilon_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    let langevin = cfg.dynamics == DynamicsKind::Langevin;
    let sys = cfg.dynamics_system()?;
    let sim = cfg.sim_config(langevin);
    let outcomes = with_pool(cfg.workers, || {
        (0..cfg.replicas as u64)
            .into_par_iter()
            .map(|r| -> Result<ReplicaOutcome> {
                let id = StreamId {
                    master: cfg.seed,
                    replica: r,
                };
                let reference = simulate_one(cfg, &sys, &sim, EpsilonSpec::Averaged, id)?;
                let ref_spikes = spike_stats(&reference, cfg.spike_probe, cfg.spike_threshold)?;
                let mut errors = Vec::with_capacity(cfg.epsilons.len());
                let mut spikes = Vec::with_capacity(cfg.epsilons.len());
                for &e in &cfg.epsilons {
                    let (d, s) = match e {
                        EpsilonSpec::Averaged => (0.0, ref_spikes),
                        EpsilonSpec::Value(_) => {
                            let tr = simulate_one(cfg, &sys, &sim, e, id)?;
                            (tr.sup_l2_distance(&reference)?, spike_stats(&tr, cfg.spike_probe, cfg.spike_threshold)?)
                        }
                    };
                    errors.push(if langevin { d * d } else { d });
                    spikes.push(s);
                }
                Ok(ReplicaOutcome {
                    errors,
                    spikes,
                    reference: ref_spikes,
                })
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let n = outcomes.len();
    let mut rows = Vec::new();
    let mut spike_rows = Vec::new();
    for (j, &e) in cfg.epsilons.iter().enumerate() {
        let errs: Vec<f64> = outcomes.iter().map(|o| o.errors[j]).collect();
        let (mean, se) = mean_stderr(&errs);
        rows.push(SweepRow {
            epsilon: e,
            mean_sup_err: mean,
            stderr: se,
            replicas: n,
        });
        spike_rows.push(SpikeRow {
            epsilon: e,
            mean_spikes: outcomes.iter().map(|o| o.spikes[j].0 as f64).sum::<f64>() / n as f64,
            mean_peak: outcomes.iter().map(|o| o.spikes[j].1).sum::<f64>() / n as f64,
            replicas: n,
        });
    }
    let fit = if langevin {
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.epsilon.value(), r.mean_sup_err)).collect();
        fit_loglog(&pts)
    } else {
        None
    };
    Ok(SweepReport {
        dynamics: cfg.dynamics,
        rows,
        spikes: spike_rows,
        reference_spikes: outcomes.iter().map(|o| o.reference.0 as f64).sum::<f64>() / n as f64,
        reference_peak: outcomes.iter().map(|o| o.reference.1).sum::<f64>() / n as f64,
        fit,
    })
}

impl SweepReport {
    pub fn sweep_csv(&self) -> String {
        let mut s = String::from("epsilon,mean_sup_err,stderr,replicas\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.epsilon, r.mean_sup_err, r.stderr, r.replicas);
        }
        s
    }

    pub fn spikes_csv(&self) -> String {
        let mut s = String::from("epsilon,mean_spikes,mean_peak,replicas\n");
        for r in &self.spikes {
            let _ = writeln!(s, "{},{},{},{}", r.epsilon, r.mean_spikes, r.mean_peak, r.replicas);
        }
        s
    }

    /// Writes `sweep.csv`, `spikes.csv` and, for Langevin sweeps,
    /// `sweep_fit.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_file(dir, "sweep.csv", &self.sweep_csv())?;
        write_file(dir, "spikes.csv", &self.spikes_csv())?;
        if let Some(f) = self.fit {
            write_file(dir, "sweep_fit.csv", &format!("slope,intercept\n{},{}\n", f.slope, f.intercept))?;
        }
        Ok(())
    }
}

/// One line of `clt.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct CltRow {
    pub channel: usize,
    pub t: f64,
    pub empirical_var: f64,
    pub predicted_var: f64,
    pub ratio: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Frozen field `u(x) = voltage · sin(πx)` used by the variance check.
pub fn clt_field(sys: &HybridSystem, voltage: f64) -> Result<SpectralField> {
    let mut c = vec![0.0; sys.modes()];
    c[0] = voltage / std::f64::consts::SQRT_2;
    SpectralField::from_coeffs(sys.basis().clone(), c, BasisKind::L2)
}

struct ChannelLaw {
    class: usize,
    mu: QuasiStationary,
    d: Vec<f64>,
    s: f64,
}

/// Frozen-field check of the fluctuation variance: for every channel,
/// `Var(ε^{−1/2} ∫₀^t d(r_s) ds)` over the replicas against `2 s t`, with a
/// 95% chi-square interval on the ratio. Channels start from their
/// quasi-stationary law in class 0 at the frozen voltage.
pub fn run_clt_check(cfg: &ExperimentConfig) -> Result<Vec<CltRow>> {
    let sys = cfg.system(SourceKind::Pointlike)?;
    let eps = cfg.clt.epsilon;
    let mut times = cfg.clt.times.clone();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let horizon = *times.last().unwrap();
    let u = clt_field(&sys, cfg.clt.voltage)?;
    let laws: Vec<ChannelLaw> = (0..sys.n_channels())
        .map(|i| {
            let model = sys.model_of(i);
            let y = sys.local_voltage(i, u.coeffs());
            let gen = kinetics::generator_matrix(model, y, 0)?;
            let mu = kinetics::quasi_stationary(&gen)?;
            let d = fluctuation::centered_data(model, 0, y, &mu);
            let phi = solve_phi_linear(&gen, &d, &mu)?;
            let s = fluctuation::channel_variance(&mu, &d, &phi)?;
            Ok(ChannelLaw { class: 0, mu, d, s })
        })
        .collect::<Result<_>>()?;
    let sim_cfg = SimConfig {
        horizon,
        dt_out: horizon,
        frozen_field: true,
        record_jumps: true,
        ..SimConfig::default()
    };
    let sim = Simulator::new(&sys, sim_cfg, Dynamics::Full { epsilon: eps })?;
    let samples = with_pool(cfg.workers, || {
        (0..cfg.replicas as u64)
            .into_par_iter()
            .map(|r| -> Result<Vec<f64>> {
                let mut aux = rng::stream(cfg.seed, r, rng::AUX_LANE);
                let mut start = Vec::with_capacity(sys.n_channels());
                for (i, law) in laws.iter().enumerate() {
                    let members = sys.model_of(i).class_members(law.class);
                    let mut x: f64 = aux.random();
                    let mut pick = members[members.len() - 1];
                    for (a, p) in law.mu.probs().iter().enumerate() {
                        if x < *p {
                            pick = members[a];
                            break;
                        }
                        x -= p;
                    }
                    start.push(pick);
                }
                let state = HybridState {
                    t: 0.0,
                    u: u.clone(),
                    r: ChannelConfiguration::new(Level::States, start.clone()),
                };
                let tr = sim.run(state, StreamId { master: cfg.seed, replica: r })?;
                Ok(integrate_data(&sys, &laws, &start, &tr, &times, eps))
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let n = samples.len();
    let chi = if n > 1 {
        let c = ChiSquared::new((n - 1) as f64).map_err(|e| Error::domain(e.to_string()))?;
        Some((c.inverse_cdf(0.025), c.inverse_cdf(0.975)))
    } else {
        None
    };
    let mut rows = Vec::new();
    for i in 0..sys.n_channels() {
        for (m, &t) in times.iter().enumerate() {
            let xs: Vec<f64> = samples.iter().map(|s| s[i * times.len() + m]).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = if n > 1 {
                xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
            } else {
                0.0
            };
            let predicted = 2.0 * laws[i].s * t;
            let (lo, hi) = match chi {
                Some((q_lo, q_hi)) => {
                    let k = (n - 1) as f64 * var / predicted;
                    (k / q_hi, k / q_lo)
                }
                None => (f64::NAN, f64::NAN),
            };
            rows.push(CltRow {
                channel: i,
                t,
                empirical_var: var,
                predicted_var: predicted,
                ratio: var / predicted,
                ci_low: lo,
                ci_high: hi,
            });
        }
    }
    Ok(rows)
}

/// `ε^{−1/2} ∫₀^t d_i(r_s) ds` for every channel `i` and every `t` in
/// `times`, laid out channel-major.
fn integrate_data(sys: &HybridSystem, laws: &[ChannelLaw], start: &[usize], tr: &Trajectory, times: &[f64], eps: f64) -> Vec<f64> {
    let n = sys.n_channels();
    let local = |i: usize, state: usize| -> f64 {
        let members = sys.model_of(i).class_members(laws[i].class);
        members.iter().position(|&s| s == state).map_or(0.0, |a| laws[i].d[a])
    };
    let mut current = start.to_vec();
    let mut last = vec![0.0; n];
    let mut acc = vec![0.0; n];
    let mut out = vec![0.0; n * times.len()];
    let mut jumps = tr.jumps.iter().peekable();
    for (m, &t) in times.iter().enumerate() {
        while let Some(j) = jumps.next_if(|j| j.t <= t) {
            let i = j.channel;
            acc[i] += local(i, current[i]) * (j.t - last[i]);
            last[i] = j.t;
            current[i] = j.to;
        }
        for i in 0..n {
            let total = acc[i] + local(i, current[i]) * (t - last[i]);
            out[i * times.len() + m] = total / eps.sqrt();
        }
    }
    out
}

pub fn clt_csv(rows: &[CltRow]) -> String {
    let mut s = String::from("channel,t,empirical_var,predicted_var,ratio,ci_low,ci_high\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.channel, r.t, r.empirical_var, r.predicted_var, r.ratio, r.ci_low, r.ci_high
        );
    }
    s
}

/// One line of the trace series.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub trace: f64,
    pub tail_bound: f64,
    /// Morris–Lecar bound `c²(|v| + sup_{s≤t}‖u_s‖_H)² sup αβ/(α+β)³ / 3`.
    pub paper_bound: Option<f64>,
}

/// Class configuration at each output time, rebuilt from the jump log.
fn classes_on_grid(sys: &HybridSystem, tr: &Trajectory) -> Vec<ChannelConfiguration> {
    let mut r = sys.initial_configuration(Level::Classes);
    let mut jumps = tr.jumps.iter().peekable();
    tr.times
        .iter()
        .map(|&t| {
            while let Some(j) = jumps.next_if(|j| j.t <= t) {
                r.values_mut()[j.channel] = j.to;
            }
            r.clone()
        })
        .collect()
}

/// `t ↦ Tr Q_t` along one averaged trajectory (replica 0), with the
/// truncation tail bound and, for the Morris–Lecar scenario, the
/// closed-form bound.
pub fn run_trace_series(cfg: &ExperimentConfig) -> Result<Vec<TraceRow>> {
    let sys = cfg.system(cfg.source)?;
    let sim = SimConfig {
        record_jumps: true,
        ..cfg.sim_config(false)
    };
    let tr = simulate_averaged(&sys, &sim, StreamId { master: cfg.seed, replica: 0 })?;
    let classes = classes_on_grid(&sys, &tr);
    let diag: Vec<Vec<f64>> = tr
        .coeffs
        .iter()
        .zip(&classes)
        .map(|(c, rbar)| {
            let u = SpectralField::from_coeffs(sys.basis().clone(), c.clone(), BasisKind::L2)?;
            let cp = diffusion_matrix(&sys, &u, rbar)?.c_paper();
            Ok(cp.diagonal().iter().copied().collect())
        })
        .collect::<Result<_>>()?;
    let weights = sys.basis().h_weights();
    let mut sup_h = 0.0f64;
    let mut rows = Vec::with_capacity(tr.times.len());
    for (m, &t) in tr.times.iter().enumerate() {
        let q = fluctuation::trace_q(sys.basis(), &tr.times, &diag, m)?;
        let h: f64 = tr.coeffs[m].iter().zip(weights).map(|(c, w)| c * c * w).sum::<f64>().sqrt();
        sup_h = sup_h.max(h);
        rows.push(TraceRow {
            t,
            trace: q.value,
            tail_bound: q.tail_bound,
            paper_bound: cfg.ml_parameters().map(|p| ml_trace_bound(p, sup_h)),
        });
    }
    Ok(rows)
}

/// First grid point where the trace exceeds the closed-form bound.
pub fn trace_bound_breach(rows: &[TraceRow]) -> Option<&TraceRow> {
    rows.iter().find(|r| r.paper_bound.is_some_and(|b| r.trace > b))
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from("t,trace,tail_bound,paper_bound\n");
    for r in rows {
        let b = r.paper_bound.map(|b| b.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{}", r.t, r.trace, r.tail_bound, b);
    }
    s
}

/// Line plot of the trace (and the bound when present).
pub fn trace_svg(rows: &[TraceRow]) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let t_max = rows.last().map_or(1.0, |r| r.t).max(f64::MIN_POSITIVE);
    let y_max = rows
        .iter()
        .map(|r| r.trace.max(r.paper_bound.unwrap_or(0.0)))
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let px = |t: f64| pad + (w - 2.0 * pad) * t / t_max;
    let py = |y: f64| h - pad - (h - 2.0 * pad) * y / y_max;
    let line = |f: &dyn Fn(&TraceRow) -> Option<f64>| {
        rows.iter()
            .filter_map(|r| f(r).map(|y| format!("{:.2},{:.2}", px(r.t), py(y))))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{pad},{pad} V{} H{}" fill="none" stroke="black"/>"#,
        h - pad,
        w - pad
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">t</text>"#, w / 2.0, h - 15.0);
    let _ = writeln!(s, r#"<text x="10" y="{}" font-size="12">Tr Q_t</text>"#, pad - 10.0);
    let _ = writeln!(s, r#"<text x="{pad}" y="{}" font-size="10" text-anchor="middle">0</text>"#, h - pad + 15.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10" text-anchor="middle">{t_max}</text>"#, w - pad, h - pad + 15.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{y_max:.4e}</text>"#, pad - 4.0, pad + 4.0);
    let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="1.5"/>"#, line(&|r| Some(r.trace)));
    if rows.iter().any(|r| r.paper_bound.is_some()) {
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="firebrick" stroke-dasharray="4 3"/>"#,
            line(&|r| r.paper_bound)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// One line of `phi_check.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiCheckRow {
    pub instance: usize,
    /// Seed of the instance generator (`ChaCha8Rng::seed_from_u64`).
    pub seed: u64,
    pub kind: &'static str,
    pub n_states: usize,
    pub max_rel_err: f64,
    pub fredholm_residual: f64,
    pub centering_residual: f64,
    pub pass: bool,
}

/// Agreement tolerance between the two Poisson representations.
pub const PHI_AGREEMENT_TOL: f64 = 1e-9;
/// Agreement tolerance between closed forms and the generic solver.
pub const CLOSED_FORM_TOL: f64 = 1e-12;

fn instance_seed(master: u64, instance: usize) -> u64 {
    let mut r = rng::stream(master, instance as u64, rng::AUX_LANE);
    r.random()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

fn random_instance(rng: &mut ChaCha8Rng, n: usize, degenerate: bool) -> Result<PhiCheckRow> {
    let gen = kinetics::random_generator(n, rng);
    let mu = kinetics::quasi_stationary(&gen)?;
    let d: Vec<f64> = if degenerate {
        vec![0.0; n]
    } else {
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let m = mu.dot(&raw);
        raw.iter().map(|v| v - m).collect()
    };
    let lin = solve_phi_linear(&gen, &d, &mu)?;
    let int = solve_phi_integral(&gen, &d, IntegralPolicy::default())?;
    let max_rel_err = rel_err(&lin, &int);
    let fredholm_residual = gen.apply(&lin).iter().zip(&d).fold(0.0f64, |m, (a, b)| m.max((a + b).abs()));
    let centering_residual = mu.dot(&lin).abs();
    Ok(PhiCheckRow {
        instance: 0,
        seed: 0,
        kind: if degenerate { "degenerate" } else { "random" },
        n_states: n,
        max_rel_err,
        fredholm_residual,
        centering_residual,
        pass: max_rel_err <= PHI_AGREEMENT_TOL
            && fredholm_residual <= POISSON_TOL
            && centering_residual <= POISSON_TOL,
    })
}

/// Random field with decaying coefficients for the closed-form checks.
pub fn random_field(sys: &HybridSystem, rng: &mut impl Rng) -> Result<SpectralField> {
    let c = (0..sys.modes())
        .map(|k| rng.random_range(-80.0..40.0) / (k + 1) as f64)
        .collect();
    SpectralField::from_coeffs(sys.basis().clone(), c, BasisKind::L2)
}

fn ml_instance(p: &MLParameters, sys: &HybridSystem, rng: &mut ChaCha8Rng) -> Result<PhiCheckRow> {
    let u = random_field(sys, rng)?;
    let rbar = ml_class_configuration(sys);
    let sol = poisson_solution(sys, &u, &rbar)?;
    let closed_phi = ml_phi_closed_form(p, sys, &u);
    let mut err = 0.0f64;
    let mut fred = 0.0f64;
    let mut cent = 0.0f64;
    for (i, ch) in sys.population_channels(0).zip(&closed_phi) {
        let generic = &sol.channels[i];
        err = err.max(rel_err(&generic.phi, ch));
        let model = sys.model_of(i);
        let y = sys.local_voltage(i, u.coeffs());
        let gen = kinetics::generator_matrix(model, y, 0)?;
        let scale = gen.max_abs().max(1.0) * generic.d.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let r = gen.apply(&generic.phi).iter().zip(&generic.d).fold(0.0f64, |m, (a, b)| m.max((a + b).abs()));
        fred = fred.max(r / scale);
        let orth: f64 = generic.mu.iter().zip(&generic.phi).map(|(m, f)| m * f).sum();
        cent = cent.max(orth.abs() / scale);
    }
    let generic_s: Vec<f64> = sys.population_channels(0).map(|i| sol.channels[i].variance).collect();
    err = err.max(rel_err(&generic_s, &ml_variance_closed_form(p, sys, &u)));
    let c_gen = diffusion_matrix(sys, &u, &rbar)?.c_paper();
    let c_closed = ml_diffusion_closed_form(p, sys, &u);
    err = err.max(rel_err(c_gen.as_slice(), c_closed.as_slice()));
    Ok(PhiCheckRow {
        instance: 0,
        seed: 0,
        kind: "morris_lecar",
        n_states: 2,
        max_rel_err: err,
        fredholm_residual: fred,
        centering_residual: cent,
        pass: err <= CLOSED_FORM_TOL && fred <= POISSON_TOL && cent <= POISSON_TOL,
    })
}

/// Cross-validates the linear-solve and integral representations of the
/// Poisson solution on random generators (plus one zero-data instance),
/// and the Morris–Lecar closed forms (Poisson solution, channel variance,
/// diffusion operator) against the generic solver on random fields.
/// Residuals of the Morris–Lecar rows are relative to the generator and
/// data scales.
pub fn run_phi_check(cfg: &ExperimentConfig) -> Result<Vec<PhiCheckRow>> {
    let ml = cfg.ml_parameters().cloned().unwrap_or_default();
    let ml_sys = ml_system(&ml, cfg.modes, SourceKind::Pointlike)?;
    let count = cfg.phi.instances;
    let jobs: Vec<(usize, &'static str)> = (0..count)
        .map(|i| (i, "random"))
        .chain(std::iter::once((count, "degenerate")))
        .chain((0..count).map(|i| (count + 1 + i, "morris_lecar")))
        .collect();
    with_pool(cfg.workers, || {
        jobs.par_iter()
            .map(|&(instance, kind)| {
                let seed = instance_seed(cfg.seed, instance);
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                let mut row = match kind {
                    "morris_lecar" => ml_instance(&ml, &ml_sys, &mut r)?,
                    _ => {
                        let n = r.random_range(2..=cfg.phi.states);
                        random_instance(&mut r, n, kind == "degenerate")?
                    }
                };
                row.instance = instance;
                row.seed = seed;
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()
    })?
}

pub fn phi_check_csv(rows: &[PhiCheckRow]) -> String {
    let mut s = String::from("instance,seed,kind,n_states,max_rel_err,fredholm_residual,centering_residual,pass\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.instance, r.seed, r.kind, r.n_states, r.max_rel_err, r.fredholm_residual, r.centering_residual, r.pass
        );
    }
    s
}

/// Error naming every failing instance and its seed, if any.
pub fn phi_check_verdict(rows: &[PhiCheckRow]) -> Result<()> {
    let bad: Vec<String> = rows
        .iter()
        .filter(|r| !r.pass)
        .map(|r| format!("instance {} (seed {}, {})", r.instance, r.seed, r.kind))
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Invariant(format!("Poisson cross-check failed for {}", bad.join(", "))))
    }
}
