//! Run configuration: one JSON document per experiment.

use std::fmt;
use std::path::{Path, PathBuf};

use anneal_bound::generator::{ControlPoint, SystemSpec};
use anneal_bound::protocol::{Breakpoint, Protocol};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemSpec,
    pub protocol: ProtocolStanza,
    #[serde(default)]
    pub initial: InitialStanza,
    #[serde(default)]
    pub outputs: OutputStanza,
    #[serde(default = "default_checks")]
    pub checks: Vec<Check>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepStanza>,
}

fn default_checks() -> Vec<Check> {
    vec![Check::MainBound, Check::DecayBound]
}

/// Schedule description. `steps` counts control intervals for `linear`;
/// `substeps` subdivides every interval for propagation and sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProtocolStanza {
    Linear {
        gamma_from: f64,
        gamma_to: f64,
        #[serde(default)]
        u: f64,
        tau: f64,
        steps: usize,
        #[serde(default = "one")]
        substeps: usize,
    },
    Constant {
        gamma: f64,
        #[serde(default)]
        u: f64,
        tau: f64,
        steps: usize,
    },
    Points {
        tau: f64,
        steps: usize,
        points: Vec<Breakpoint>,
    },
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialStanza {
    /// Stationary density of the generator at the first breakpoint.
    #[default]
    StationaryAtStart,
    Explicit {
        rho: Vec<f64>,
    },
    PointMass {
        index: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputStanza {
    /// Directory for `report.csv`, `report.json` and `checks.csv`.
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    /// File name for the density trajectory CSV; omitted means no export.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<String>,
    #[serde(default = "one")]
    pub record_every: usize,
}

fn default_dir() -> PathBuf {
    PathBuf::from(".")
}

impl Default for OutputStanza {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            trajectory: None,
            record_every: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    MainBound,
    DecayBound,
    CDynamics,
    Csl,
    DbRelation,
    GapSweep,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Check::MainBound => "main_bound",
            Check::DecayBound => "decay_bound",
            Check::CDynamics => "c_dynamics",
            Check::Csl => "csl",
            Check::DbRelation => "db_relation",
            Check::GapSweep => "gap_sweep",
        })
    }
}

/// Axes of a cross-product sweep; every listed axis must be non-empty.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepStanza {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_to: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<Vec<usize>>,
}

/// Configuration problem tied to a field path such as `protocol.u`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.field.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.field, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

fn bad(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError {
        field: field.into(),
        message: message.into(),
    }
}

/// One point of the sweep cross-product, fully resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPoint {
    pub id: String,
    pub protocol: ProtocolStanza,
}

impl ProtocolStanza {
    pub fn tau(&self) -> f64 {
        match self {
            ProtocolStanza::Linear { tau, .. }
            | ProtocolStanza::Constant { tau, .. }
            | ProtocolStanza::Points { tau, .. } => *tau,
        }
    }

    /// Every `u` the schedule uses.
    pub fn u_values(&self) -> Vec<f64> {
        match self {
            ProtocolStanza::Linear { u, .. } | ProtocolStanza::Constant { u, .. } => vec![*u],
            ProtocolStanza::Points { points, .. } => points.iter().map(|p| p.control.u).collect(),
        }
    }

    pub fn build(&self) -> anneal_bound::Result<Protocol> {
        match self {
            ProtocolStanza::Linear {
                gamma_from,
                gamma_to,
                u,
                tau,
                steps,
                substeps,
            } => Protocol::linear(*gamma_from, *gamma_to, *u, *tau, *steps)?.with_steps(steps * substeps),
            ProtocolStanza::Constant { gamma, u, tau, steps } => {
                Protocol::constant(ControlPoint::new(*gamma, *u), *tau, *steps)
            }
            ProtocolStanza::Points { tau, steps, points } => Protocol::new(*tau, points.clone(), *steps),
        }
    }

    fn with_tau(&self, new_tau: f64) -> Self {
        let mut p = self.clone();
        match &mut p {
            ProtocolStanza::Linear { tau, .. } | ProtocolStanza::Constant { tau, .. } => *tau = new_tau,
            ProtocolStanza::Points { tau, points, .. } => {
                let scale = new_tau / *tau;
                for bp in points.iter_mut() {
                    bp.t *= scale;
                }
                // Snap a trailing breakpoint exactly onto the new τ.
                if let Some(last) = points.last_mut().filter(|b| b.t > 0.0) {
                    last.t = new_tau;
                }
                *tau = new_tau;
            }
        }
        p
    }

    fn with_u(&self, new_u: f64) -> Self {
        let mut p = self.clone();
        match &mut p {
            ProtocolStanza::Linear { u, .. } | ProtocolStanza::Constant { u, .. } => *u = new_u,
            ProtocolStanza::Points { points, .. } => {
                for bp in points.iter_mut() {
                    bp.control.u = new_u;
                }
            }
        }
        p
    }

    fn with_steps(&self, new_steps: usize) -> Self {
        let mut p = self.clone();
        match &mut p {
            ProtocolStanza::Linear { steps, .. }
            | ProtocolStanza::Constant { steps, .. }
            | ProtocolStanza::Points { steps, .. } => *steps = new_steps,
        }
        p
    }

    fn with_gamma_to(&self, g: f64) -> Self {
        let mut p = self.clone();
        if let ProtocolStanza::Linear { gamma_to, .. } = &mut p {
            *gamma_to = g;
        }
        p
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            ConfigError {
                field: if path == "." { String::new() } else { path },
                message: inner.to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| bad("", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.system.validate().map_err(|e| bad("system", e.to_string()))?;
        let kind = self.system.kind_name();

        if let ProtocolStanza::Linear { substeps: 0, .. } = self.protocol {
            return Err(bad("protocol.substeps", "must be >= 1"));
        }
        if !self.system.has_cycle() {
            if self.protocol.u_values().iter().any(|&u| u != 0.0) {
                let field = match self.protocol {
                    ProtocolStanza::Points { .. } => "protocol.points.u",
                    _ => "protocol.u",
                };
                return Err(bad(field, format!("circulation flow is not supported for {kind}")));
            }
            if let Some(us) = self.sweep.as_ref().and_then(|s| s.u.as_ref()) {
                if us.iter().any(|&u| u != 0.0) {
                    return Err(bad("sweep.u", format!("circulation flow is not supported for {kind}")));
                }
            }
        }

        if self.outputs.record_every == 0 {
            return Err(bad("outputs.record_every", "must be >= 1"));
        }
        if let Some(name) = &self.outputs.trajectory {
            if name.is_empty() || Path::new(name).file_name().map(|f| f != name.as_str()).unwrap_or(true) {
                return Err(bad("outputs.trajectory", "must be a plain file name"));
            }
        }

        if let Some(sweep) = &self.sweep {
            let axes = [
                ("sweep.tau", sweep.tau.as_ref().map(Vec::len)),
                ("sweep.u", sweep.u.as_ref().map(Vec::len)),
                ("sweep.gamma_to", sweep.gamma_to.as_ref().map(Vec::len)),
                ("sweep.steps", sweep.steps.as_ref().map(Vec::len)),
            ];
            for (field, len) in axes {
                if len == Some(0) {
                    return Err(bad(field, "axis must not be empty"));
                }
            }
            if sweep.gamma_to.is_some() && !matches!(self.protocol, ProtocolStanza::Linear { .. }) {
                return Err(bad("sweep.gamma_to", "requires protocol.kind = linear"));
            }
        }

        for (i, point) in self.expand().iter().enumerate() {
            let proto = point.protocol.build().map_err(|e| {
                let field = if self.sweep.is_some() {
                    format!("sweep[{i}]")
                } else {
                    "protocol".to_string()
                };
                bad(field, e.to_string())
            })?;
            if self.checks.contains(&Check::Csl) && !(proto.is_constant() && proto.final_control().u == 0.0) {
                return Err(bad(
                    "checks",
                    "csl requires a constant protocol with u = 0 on every sweep point",
                ));
            }
        }

        let m = self.system.num_states();
        match &self.initial {
            InitialStanza::StationaryAtStart => {}
            InitialStanza::Explicit { rho } => {
                if rho.len() != m {
                    return Err(bad(
                        "initial.rho",
                        format!("length {} but the system has {m} states", rho.len()),
                    ));
                }
                anneal_bound::evolve::DensityState::new(0.0, rho.clone().into())
                    .map_err(|e| bad("initial.rho", e.to_string()))?;
            }
            InitialStanza::PointMass { index } => {
                if *index >= m {
                    return Err(bad("initial.index", format!("{index} out of range for {m} states")));
                }
            }
        }
        Ok(())
    }

    /// Cross-product of sweep axes in the order tau, u, gamma_to, steps,
    /// with the last axis varying fastest.
    pub fn expand(&self) -> Vec<RunPoint> {
        let sweep = self.sweep.clone().unwrap_or_default();
        let mut protos = vec![self.protocol.clone()];
        if let Some(taus) = &sweep.tau {
            protos = protos
                .iter()
                .flat_map(|p| taus.iter().map(|&t| p.with_tau(t)))
                .collect();
        }
        if let Some(us) = &sweep.u {
            protos = protos.iter().flat_map(|p| us.iter().map(|&u| p.with_u(u))).collect();
        }
        if let Some(gs) = &sweep.gamma_to {
            protos = protos
                .iter()
                .flat_map(|p| gs.iter().map(|&g| p.with_gamma_to(g)))
                .collect();
        }
        if let Some(ss) = &sweep.steps {
            protos = protos
                .iter()
                .flat_map(|p| ss.iter().map(|&s| p.with_steps(s)))
                .collect();
        }
        let width = protos.len().to_string().len().max(3);
        protos
            .into_iter()
            .enumerate()
            .map(|(i, protocol)| RunPoint {
                id: format!("r{i:0width$}"),
                protocol,
            })
            .collect()
    }
}
