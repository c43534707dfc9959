use thiserror::Error;

use crate::evolve::Trajectory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid system spec: {0}")]
    InvalidSpec(String),

    #[error("invalid control point: {0}")]
    InvalidControl(String),

    #[error("potential is unusable: {0}")]
    BadPotential(String),

    #[error("flow u = {u} makes rate {from} -> {to} negative ({rate})")]
    FlowInfeasible { u: f64, from: usize, to: usize, rate: f64 },

    #[error("circulation flow needs a cycle, `{0}` has none")]
    FlowUnsupported(&'static str),

    #[error("generator has more than one stationary state (second singular value {second:e})")]
    NonUniqueStationary { second: f64 },

    #[error("eigenvector basis is near-defective (condition number {condition:e})")]
    DefectiveSpectrum { condition: f64 },

    #[error("eigensolver failed: {0}")]
    Eigensolver(String),

    #[error("operation requires a detailed-balance generator")]
    RequiresDetailedBalance,

    #[error("time {t} outside protocol range [0, {tau}]")]
    OutOfRange { t: f64, tau: f64 },

    #[error("invalid protocol: {0}")]
    InvalidProtocol(String),

    #[error("invalid density: {0}")]
    InvalidDensity(String),

    #[error("propagation lost accuracy: {0}")]
    PropagationAccuracy(String),

    #[error("overlap target {target} not reached by t = {t_max}")]
    TargetNotReached {
        target: f64,
        t_max: f64,
        trajectory: Box<Trajectory>,
    },

    #[error("stationary weight vanishes at state {index}")]
    SingularStationary { index: usize },

    #[error("D(tau) - 1 = {excess:e} is not positive; error is below what the bound resolves")]
    ErrorBelowResolution { excess: f64 },

    #[error("spectral gap {gap:e} is not positive")]
    NoGap { gap: f64 },

    #[error("overlap is not positive: {0}")]
    InvalidOverlap(String),

    #[error("trajectory too sparse for finite differences: {0}")]
    NeedDenserTrajectory(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}
