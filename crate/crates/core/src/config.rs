//! Experiment configuration files.
//!
//! Plain text, one `key = value` per line, grouped under `[section]`
//! headers. `#` starts a comment. Recognised sections:
//!
//! * `[experiment]`: run controls (ε list, replicas, modes, steps, seed, ...)
//! * `[morris_lecar]`: overrides of the Morris–Lecar parameter pack
//! * `[channel NAME]`: a custom channel population
//! * `[stimulus]`: stimulus of a custom scenario
//! * `[clt]`, `[trace]`, `[phi_check]`: per-experiment settings
//!
//! `model = PATH` under `[experiment]` reads further `[channel NAME]` and
//! `[stimulus]` sections from another file, relative to the config file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::kinetics::{ChannelModel, RateFn, RateForm, DEFAULT_RANGE};
use crate::langevin::DEFAULT_KAPPA;
use crate::morris_lecar::{ml_system, MLParameters};
use crate::pdmp::SimConfig;
use crate::spectral::SpectralBasis;
use crate::system::{HybridSystem, Population, SourceKind, Stimulus};

/// Scenario shipped with the crate.
pub const MORRIS_LECAR_CFG: &str = include_str!("../morris_lecar.cfg");

/// One ε of a sweep; `averaged` stands for ε = 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EpsilonSpec {
    Value(f64),
    Averaged,
}

impl EpsilonSpec {
    pub fn value(&self) -> f64 {
        match self {
            EpsilonSpec::Value(e) => *e,
            EpsilonSpec::Averaged => 0.0,
        }
    }
}

impl fmt::Display for EpsilonSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EpsilonSpec::Value(e) => write!(f, "{e}"),
            EpsilonSpec::Averaged => f.write_str("averaged"),
        }
    }
}

/// Parses `1, 0.1, averaged`.
pub fn parse_epsilon_list(s: &str) -> std::result::Result<Vec<EpsilonSpec>, String> {
    let mut out = Vec::new();
    for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        if tok == "averaged" {
            out.push(EpsilonSpec::Averaged);
            continue;
        }
        let e: f64 = tok.parse().map_err(|_| format!("'{tok}' is not a number or 'averaged'"))?;
        if !(e > 0.0 && e <= 1.0) {
            return Err(format!("ε = {e} outside (0, 1]"));
        }
        out.push(EpsilonSpec::Value(e));
    }
    if out.is_empty() {
        return Err("ε list is empty".into());
    }
    Ok(out)
}

/// Process simulated by `simulate` and `sweep`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DynamicsKind {
    Pdmp,
    Langevin,
}

/// Custom channel population as declared in a `[channel NAME]` section.
#[derive(Debug, Clone)]
pub struct ChannelSpec {
    pub model: ChannelModel,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub enum Scenario {
    MorrisLecar(MLParameters),
    Custom {
        channels: Vec<ChannelSpec>,
        stimulus: Option<Stimulus>,
        diffusion: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CltSettings {
    /// Frozen field value `u ≡ voltage`.
    pub voltage: f64,
    pub times: Vec<f64>,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhiCheckSettings {
    pub instances: usize,
    pub states: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub name: String,
    pub scenario: Scenario,
    pub dynamics: DynamicsKind,
    pub source: SourceKind,
    pub epsilons: Vec<EpsilonSpec>,
    pub replicas: usize,
    pub modes: usize,
    /// Langevin step.
    pub h: f64,
    pub h_max: f64,
    pub kappa: f64,
    pub horizon: f64,
    pub dt_out: f64,
    pub probes: Vec<f64>,
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads; 0 uses the CPU count.
    pub workers: usize,
    pub spike_threshold: f64,
    pub spike_probe: f64,
    pub clt: CltSettings,
    pub phi: PhiCheckSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let ml = MLParameters::default();
        Self {
            name: "morris_lecar".into(),
            horizon: ml.horizon,
            scenario: Scenario::MorrisLecar(ml),
            dynamics: DynamicsKind::Pdmp,
            source: SourceKind::Pointlike,
            epsilons: vec![
                EpsilonSpec::Value(1.0),
                EpsilonSpec::Value(0.1),
                EpsilonSpec::Value(0.01),
                EpsilonSpec::Value(0.001),
                EpsilonSpec::Value(0.0001),
                EpsilonSpec::Averaged,
            ],
            replicas: 1,
            modes: 64,
            h: 1e-4,
            h_max: 1e-4,
            kappa: DEFAULT_KAPPA,
            dt_out: 0.01,
            probes: SimConfig::default().probes,
            seed: 0,
            out: PathBuf::from("out"),
            workers: 0,
            spike_threshold: 0.0,
            spike_probe: 0.05,
            clt: CltSettings {
                voltage: -20.0,
                times: vec![0.5, 1.0],
                epsilon: 1e-3,
            },
            phi: PhiCheckSettings {
                instances: 100,
                states: 6,
            },
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_base(text, None)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_with_base(&text, path.parent())
    }

    /// Parses `text`; a `model` key is resolved against `base`.
    pub fn parse_with_base(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut doc = Document::parse(text)?;
        if let Some((line, path)) = doc.take("experiment", "model") {
            let path = match base {
                Some(b) => b.join(&path),
                None => PathBuf::from(&path),
            };
            let extra = std::fs::read_to_string(&path)
                .map_err(|e| Error::config(line, format!("cannot read model file {}: {e}", path.display())))?;
            let extra = Document::parse(&extra).map_err(|e| match e {
                Error::Config { line: l, msg } => Error::config(line, format!("{} line {l}: {msg}", path.display())),
                other => other,
            })?;
            for s in extra.sections {
                if s.kind != "channel" && s.kind != "stimulus" {
                    return Err(Error::config(s.line, format!("model file may only hold channels, found [{}]", s.kind)));
                }
                doc.sections.push(s);
            }
        }
        let mut cfg = ExperimentConfig::default();
        let mut horizon_set = None;
        let mut ml = MLParameters::default();
        let mut scenario = "morris_lecar".to_string();
        let mut channels = Vec::new();
        let mut stimulus = None;
        let mut diffusion = 1.0;
        for mut s in std::mem::take(&mut doc.sections) {
            match (s.kind.as_str(), s.arg.is_some()) {
                ("experiment", false) => {
                    for (key, e) in s.entries.drain(..) {
                        let l = e.line;
                        match key.as_str() {
                            "name" => cfg.name = e.value,
                            "scenario" => scenario = e.value,
                            "dynamics" => {
                                cfg.dynamics = match e.value.as_str() {
                                    "pdmp" => DynamicsKind::Pdmp,
                                    "langevin" => DynamicsKind::Langevin,
                                    v => return Err(Error::config(l, format!("unknown dynamics '{v}'"))),
                                }
                            }
                            "source" => {
                                cfg.source = match e.value.as_str() {
                                    "pointlike" => SourceKind::Pointlike,
                                    "mollified" => SourceKind::Mollified { width: f64::NAN },
                                    v => return Err(Error::config(l, format!("unknown source '{v}'"))),
                                }
                            }
                            "epsilon" => cfg.epsilons = parse_epsilon_list(&e.value).map_err(|m| Error::config(l, m))?,
                            "replicas" => cfg.replicas = e.usize()?,
                            "modes" => cfg.modes = e.usize()?,
                            "h" => cfg.h = e.f64()?,
                            "h_max" => cfg.h_max = e.f64()?,
                            "kappa" => cfg.kappa = e.f64()?,
                            "horizon" => horizon_set = Some(e.f64()?),
                            "dt_out" => cfg.dt_out = e.f64()?,
                            "probes" => cfg.probes = e.f64_list()?,
                            "seed" => cfg.seed = e.u64()?,
                            "out" => cfg.out = PathBuf::from(e.value),
                            "workers" => cfg.workers = e.usize()?,
                            "spike_threshold" => cfg.spike_threshold = e.f64()?,
                            "spike_probe" => cfg.spike_probe = e.f64()?,
                            "diffusion" => diffusion = e.f64()?,
                            _ => return Err(unknown(&key, &s.kind, l)),
                        }
                    }
                }
                ("morris_lecar", false) => {
                    for (key, e) in s.entries.drain(..) {
                        let slot = match key.as_str() {
                            "C" => &mut ml.capacitance,
                            "c_K" => &mut ml.c_k,
                            "v_K" => &mut ml.v_k,
                            "c_Ca" => &mut ml.c_ca,
                            "v_Ca" => &mut ml.v_ca,
                            "a" => &mut ml.a,
                            "R" => &mut ml.r,
                            "l" => &mut ml.length,
                            "T" => &mut ml.horizon,
                            "stimulus" => &mut ml.stimulus,
                            "stimulus_from" => &mut ml.stimulus_from,
                            "stimulus_to" => &mut ml.stimulus_to,
                            "v3" => &mut ml.v3,
                            "v4" => &mut ml.v4,
                            "lambda_w" => &mut ml.lambda_w,
                            "v1" => &mut ml.v1,
                            "v2" => &mut ml.v2,
                            "lambda_m" => &mut ml.lambda_m,
                            "rate_floor" => &mut ml.rate_floor,
                            "N_K" => {
                                ml.n_k = e.usize()?;
                                continue;
                            }
                            "N_Ca" => {
                                ml.n_ca = e.usize()?;
                                continue;
                            }
                            _ => return Err(unknown(&key, &s.kind, e.line)),
                        };
                        *slot = e.f64()?;
                    }
                }
                ("stimulus", false) => {
                    let mut st = Stimulus {
                        amplitude: 0.0,
                        from: 0.0,
                        to: 0.0,
                    };
                    for (key, e) in s.entries.drain(..) {
                        match key.as_str() {
                            "amplitude" => st.amplitude = e.f64()?,
                            "from" => st.from = e.f64()?,
                            "to" => st.to = e.f64()?,
                            _ => return Err(unknown(&key, &s.kind, e.line)),
                        }
                    }
                    if !(0.0 <= st.from && st.from <= st.to && st.to <= 1.0) {
                        return Err(Error::config(s.line, "stimulus support must lie in [0, 1]"));
                    }
                    stimulus = Some(st);
                }
                ("channel", true) => channels.push(parse_channel(&mut s)?),
                ("clt", false) => {
                    for (key, e) in s.entries.drain(..) {
                        match key.as_str() {
                            "voltage" => cfg.clt.voltage = e.f64()?,
                            "times" => cfg.clt.times = e.f64_list()?,
                            "epsilon" => cfg.clt.epsilon = e.f64()?,
                            _ => return Err(unknown(&key, &s.kind, e.line)),
                        }
                    }
                    if !(cfg.clt.epsilon > 0.0) || cfg.clt.times.iter().any(|t| !(*t > 0.0)) || cfg.clt.times.is_empty() {
                        return Err(Error::config(s.line, "clt needs ε > 0 and positive times"));
                    }
                }
                ("phi_check", false) => {
                    for (key, e) in s.entries.drain(..) {
                        match key.as_str() {
                            "instances" => cfg.phi.instances = e.usize()?,
                            "states" => cfg.phi.states = e.usize()?,
                            _ => return Err(unknown(&key, &s.kind, e.line)),
                        }
                    }
                    if cfg.phi.states < 2 {
                        return Err(Error::config(s.line, "phi_check needs at least two states"));
                    }
                }
                (kind, _) => {
                    return Err(Error::config(s.line, format!("unknown section [{kind}{}]", match &s.arg {
                        Some(a) => format!(" {a}"),
                        None => String::new(),
                    })))
                }
            }
        }
        ml.validate().map_err(|e| Error::config(0, e.to_string()))?;
        cfg.horizon = horizon_set.unwrap_or(ml.horizon);
        cfg.scenario = match scenario.as_str() {
            "morris_lecar" => {
                if !channels.is_empty() {
                    return Err(Error::config(0, "[channel] sections need scenario = custom"));
                }
                Scenario::MorrisLecar(ml)
            }
            "custom" => {
                if channels.is_empty() {
                    return Err(Error::config(0, "custom scenario declares no channels"));
                }
                Scenario::Custom {
                    channels,
                    stimulus,
                    diffusion,
                }
            }
            s => return Err(Error::config(0, format!("unknown scenario '{s}'"))),
        };
        if let SourceKind::Mollified { .. } = cfg.source {
            cfg.source = SourceKind::Mollified { width: cfg.kappa };
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(0, m.to_string()));
        if self.epsilons.is_empty() {
            return bad("ε list is empty");
        }
        if self.replicas == 0 {
            return bad("replicas must be at least 1");
        }
        if self.modes == 0 {
            return bad("modes must be at least 1");
        }
        if !(self.h > 0.0 && self.h_max > 0.0 && self.kappa > 0.0 && self.dt_out > 0.0 && self.horizon > 0.0) {
            return bad("h, h_max, kappa, dt_out and horizon must be positive");
        }
        if self.probes.iter().any(|x| !(0.0..=1.0).contains(x)) || !(0.0..=1.0).contains(&self.spike_probe) {
            return bad("probe positions must lie in [0, 1]");
        }
        Ok(())
    }

    /// Output controls for the given dynamics.
    pub fn sim_config(&self, langevin: bool) -> SimConfig {
        SimConfig {
            horizon: self.horizon,
            dt_out: self.dt_out,
            h_max: if langevin { self.h } else { self.h_max },
            probes: self.probes.clone(),
            ..SimConfig::default()
        }
    }

    pub fn ml_parameters(&self) -> Option<&MLParameters> {
        match &self.scenario {
            Scenario::MorrisLecar(p) => Some(p),
            Scenario::Custom { .. } => None,
        }
    }

    /// Assembled system for the given coupling.
    pub fn system(&self, source: SourceKind) -> Result<HybridSystem> {
        match &self.scenario {
            Scenario::MorrisLecar(p) => ml_system(p, self.modes, source),
            Scenario::Custom {
                channels,
                stimulus,
                diffusion,
            } => {
                let basis = SpectralBasis::dirichlet_with_diffusion(self.modes, *diffusion)?;
                let pops = channels
                    .iter()
                    .map(|c| Population {
                        model: c.model.clone(),
                        count: c.count,
                    })
                    .collect();
                HybridSystem::new(std::sync::Arc::new(basis), pops, *stimulus, source)
            }
        }
    }

    /// System with the configured coupling of the sweep dynamics: Langevin
    /// always uses mollified sources.
    pub fn dynamics_system(&self) -> Result<HybridSystem> {
        match self.dynamics {
            DynamicsKind::Pdmp => self.system(self.source),
            DynamicsKind::Langevin => self.system(SourceKind::Mollified { width: self.kappa }),
        }
    }
}

fn unknown(key: &str, section: &str, line: usize) -> Error {
    Error::config(line, format!("unknown key '{key}' in [{section}]"))
}

#[derive(Debug, Clone)]
struct Entry {
    line: usize,
    value: String,
}

impl Entry {
    fn f64(&self) -> Result<f64> {
        self.value
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::config(self.line, format!("'{}' is not a finite number", self.value)))
    }

    fn u64(&self) -> Result<u64> {
        self.value
            .parse()
            .map_err(|_| Error::config(self.line, format!("'{}' is not an unsigned integer", self.value)))
    }

    fn usize(&self) -> Result<usize> {
        self.value
            .parse()
            .map_err(|_| Error::config(self.line, format!("'{}' is not an unsigned integer", self.value)))
    }

    fn f64_list(&self) -> Result<Vec<f64>> {
        self.value
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::config(self.line, format!("'{t}' is not a finite number")))
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct Section {
    kind: String,
    arg: Option<String>,
    line: usize,
    entries: Vec<(String, Entry)>,
}

#[derive(Debug, Default)]
struct Document {
    sections: Vec<Section>,
}

impl Document {
    fn parse(text: &str) -> Result<Self> {
        let mut doc = Document::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap().trim();
            if content.is_empty() {
                continue;
            }
            if let Some(inner) = content.strip_prefix('[') {
                let inner = inner
                    .strip_suffix(']')
                    .ok_or_else(|| Error::config(line, "unterminated section header"))?
                    .trim();
                let mut parts = inner.splitn(2, char::is_whitespace);
                let kind = parts.next().unwrap_or("").to_string();
                if kind.is_empty() {
                    return Err(Error::config(line, "empty section header"));
                }
                let arg = parts.next().map(|a| a.trim().to_string()).filter(|a| !a.is_empty());
                let dup = doc.sections.iter().any(|s| s.kind == kind && s.arg == arg);
                if dup {
                    return Err(Error::config(line, format!("duplicate section [{inner}]")));
                }
                doc.sections.push(Section {
                    kind,
                    arg,
                    line,
                    entries: Vec::new(),
                });
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::config(line, format!("expected 'key = value', found '{content}'")))?;
            let key = key.split_whitespace().collect::<Vec<_>>().join(" ");
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(Error::config(line, "missing key"));
            }
            let section = doc
                .sections
                .last_mut()
                .ok_or_else(|| Error::config(line, "entry before the first section header"))?;
            if section.entries.iter().any(|(k, _)| *k == key) {
                return Err(Error::config(line, format!("duplicate key '{key}'")));
            }
            section.entries.push((key, Entry { line, value }));
        }
        Ok(doc)
    }

    fn take(&mut self, kind: &str, key: &str) -> Option<(usize, String)> {
        let s = self.sections.iter_mut().find(|s| s.kind == kind && s.arg.is_none())?;
        let pos = s.entries.iter().position(|(k, _)| k == key)?;
        let (_, e) = s.entries.remove(pos);
        Some((e.line, e.value))
    }
}

/// `const(c)`, `ml_open(v3, v4, scale)`, `ml_close(v3, v4, scale)` or
/// `boltzmann(scale, half, slope)`.
pub fn parse_rate_form(s: &str) -> std::result::Result<RateForm, String> {
    let s = s.trim();
    let (name, rest) = s.split_once('(').ok_or_else(|| format!("'{s}' is not a rate form"))?;
    let args = rest.strip_suffix(')').ok_or_else(|| format!("'{s}' lacks a closing parenthesis"))?;
    let args: Vec<f64> = args
        .split(',')
        .map(|a| a.trim().parse::<f64>().map_err(|_| format!("bad argument '{}' in '{s}'", a.trim())))
        .collect::<std::result::Result<_, _>>()?;
    let want = |n: usize| {
        if args.len() == n {
            Ok(())
        } else {
            Err(format!("'{}' takes {n} arguments", name.trim()))
        }
    };
    match name.trim() {
        "const" => {
            want(1)?;
            Ok(RateForm::Constant(args[0]))
        }
        "ml_open" => {
            want(3)?;
            Ok(RateForm::MorrisLecarOpen {
                v3: args[0],
                v4: args[1],
                scale: args[2],
            })
        }
        "ml_close" => {
            want(3)?;
            Ok(RateForm::MorrisLecarClose {
                v3: args[0],
                v4: args[1],
                scale: args[2],
            })
        }
        "boltzmann" => {
            want(3)?;
            Ok(RateForm::Boltzmann {
                scale: args[0],
                half: args[1],
                slope: args[2],
            })
        }
        other => Err(format!("unknown rate form '{other}'")),
    }
}

/// Keys of a `[channel NAME]` section:
///
/// ```text
/// count = 20
/// floor = 1e-4                      # optional rate floor
/// range = -120, 60                  # optional operating range
/// state closed = 0, 0, 0            # class, conductance, reversal
/// state open = 0, 1.5, -2
/// rate closed -> open = boltzmann(2, 0, 1)
/// rate open -> closed = const(1)
/// ```
fn parse_channel(s: &mut Section) -> Result<ChannelSpec> {
    let name = s.arg.clone().unwrap();
    let mut count = None;
    let mut floor = None;
    let mut range = DEFAULT_RANGE;
    let mut states: Vec<(String, usize, f64, f64)> = Vec::new();
    let mut rates: Vec<(usize, String, String, RateForm)> = Vec::new();
    for (key, e) in s.entries.drain(..) {
        let l = e.line;
        if let Some(st) = key.strip_prefix("state ") {
            let v = e.f64_list()?;
            if v.len() != 3 || v[0] < 0.0 || v[0].fract() != 0.0 {
                return Err(Error::config(l, "state takes 'class, conductance, reversal' with an integer class"));
            }
            states.push((st.trim().to_string(), v[0] as usize, v[1], v[2]));
        } else if let Some(tr) = key.strip_prefix("rate ") {
            let (from, to) = tr
                .split_once("->")
                .ok_or_else(|| Error::config(l, "rate key must read 'rate FROM -> TO'"))?;
            let form = parse_rate_form(&e.value).map_err(|m| Error::config(l, m))?;
            rates.push((l, from.trim().to_string(), to.trim().to_string(), form));
        } else {
            match key.as_str() {
                "count" => count = Some(e.usize()?),
                "floor" => floor = Some(e.f64()?),
                "range" => {
                    let v = e.f64_list()?;
                    if v.len() != 2 {
                        return Err(Error::config(l, "range takes two numbers"));
                    }
                    range = (v[0], v[1]);
                }
                _ => return Err(unknown(&key, &format!("channel {name}"), l)),
            }
        }
    }
    let count = count.ok_or_else(|| Error::config(s.line, format!("channel {name} lacks a count")))?;
    if count == 0 {
        return Err(Error::config(s.line, format!("channel {name} needs count ≥ 1")));
    }
    let mut b = ChannelModel::builder(&name).operating_range(range.0, range.1);
    for (st, class, c, v) in &states {
        b = b.state(st, *class, *c, *v);
    }
    let mut seen = BTreeMap::new();
    for (l, from, to, form) in rates {
        if seen.insert((from.clone(), to.clone()), l).is_some() {
            return Err(Error::config(l, format!("duplicate rate {from} -> {to}")));
        }
        let f = match floor {
            Some(fl) => RateFn::with_floor(form, fl),
            None => RateFn::new(form),
        };
        b = b.rate(&from, &to, f);
    }
    let model = b.build().map_err(|e| Error::config(s.line, e.to_string()))?;
    Ok(ChannelSpec { model, count })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_scenario_matches_defaults() {
        let cfg = ExperimentConfig::parse(MORRIS_LECAR_CFG).unwrap();
        assert_eq!(cfg.ml_parameters(), Some(&MLParameters::default()));
        assert_eq!(cfg.horizon, 2.4);
        assert_eq!(cfg.modes, 64);
        assert_eq!(cfg.epsilons.len(), 6);
        assert_eq!(cfg.epsilons[5], EpsilonSpec::Averaged);
    }

    #[test]
    fn epsilon_list_grammar() {
        assert_eq!(
            parse_epsilon_list("1, 0.01,averaged").unwrap(),
            vec![EpsilonSpec::Value(1.0), EpsilonSpec::Value(0.01), EpsilonSpec::Averaged]
        );
        assert!(parse_epsilon_list("").is_err());
        assert!(parse_epsilon_list("0").is_err());
        assert!(parse_epsilon_list("2").is_err());
        assert!(parse_epsilon_list("fast").is_err());
    }

    fn line_of(text: &str) -> usize {
        match ExperimentConfig::parse(text) {
            Err(Error::Config { line, .. }) => line,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert_eq!(line_of("[experiment]\nreplicas = 3\nmodes = many\n"), 3);
        assert_eq!(line_of("# c\n\n[experiment]\nfoo = 1\n"), 4);
        assert_eq!(line_of("replicas = 3\n"), 1);
        assert_eq!(line_of("[experiment]\nepsilon = 1, 0\n"), 2);
        assert_eq!(line_of("[experiment]\n[experiment]\n"), 2);
        assert_eq!(line_of("[experiment\n"), 1);
        assert_eq!(line_of("[experiment]\nreplicas 3\n"), 2);
        assert_eq!(line_of("[experiment]\nreplicas = 1\nreplicas = 2\n"), 3);
    }

    #[test]
    fn zero_replicas_rejected() {
        assert!(ExperimentConfig::parse("[experiment]\nreplicas = 0\n").is_err());
    }

    #[test]
    fn morris_lecar_overrides() {
        let cfg = ExperimentConfig::parse("[morris_lecar]\nc_K = 10\nN_K = 7\nT = 1.5\n").unwrap();
        let p = cfg.ml_parameters().unwrap();
        assert_eq!((p.c_k, p.n_k), (10.0, 7));
        assert_eq!(cfg.horizon, 1.5);
        let cfg = ExperimentConfig::parse("[experiment]\nhorizon = 0.3\n[morris_lecar]\nT = 1.5\n").unwrap();
        assert_eq!(cfg.horizon, 0.3);
    }

    const CUSTOM: &str = "
[experiment]
scenario = custom
modes = 8
diffusion = 2
source = mollified
kappa = 0.05

[stimulus]
amplitude = 4
from = 0
to = 0.2

[channel k]
count = 6
state closed = 0, 0, 0
state open = 0, 1.5, -2   # one fast class
rate closed -> open = boltzmann(2, 0, 1)
rate open -> closed = const(1)
";

    #[test]
    fn custom_channels() {
        let cfg = ExperimentConfig::parse(CUSTOM).unwrap();
        assert_eq!(cfg.source, SourceKind::Mollified { width: 0.05 });
        let sys = cfg.dynamics_system().unwrap();
        assert_eq!(sys.n_channels(), 6);
        assert_eq!(sys.populations()[0].model.n_states(), 2);
        assert_eq!(sys.populations()[0].model.conductance(1), 1.5);
        assert!((sys.basis().eigenvalues()[0] - 2.0 * std::f64::consts::PI.powi(2)).abs() < 1e-12);
        assert_eq!(
            parse_rate_form("boltzmann(2, 0, 1)").unwrap(),
            RateForm::Boltzmann {
                scale: 2.0,
                half: 0.0,
                slope: 1.0
            }
        );
        assert!(parse_rate_form("cosh(1)").is_err());
    }

    #[test]
    fn bad_channel_line() {
        let text = CUSTOM.replace("rate open -> closed = const(1)", "rate open closed = const(1)");
        let expected = text.lines().position(|l| l.starts_with("rate open closed")).unwrap() + 1;
        assert_eq!(line_of(&text), expected);
    }

    #[test]
    fn model_file_is_resolved_relative_to_config() {
        let dir = tempfile::tempdir().unwrap();
        let model = CUSTOM.split("[stimulus]").nth(1).map(|s| format!("[stimulus]{s}")).unwrap();
        std::fs::write(dir.path().join("k.model"), model).unwrap();
        let cfg_text = "[experiment]\nscenario = custom\nmodel = k.model\nmodes = 8\n";
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, cfg_text).unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.system(SourceKind::Pointlike).unwrap().n_channels(), 6);
    }
}
