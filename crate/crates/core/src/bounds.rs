//! Calculation-time bounds for annealing runs.
//!
//! The error measure is the overlap `D(τ) = Σ_x ρ(0) ρ(τ) / π^{γ(τ)}`. Expanding
//! densities in the detailed-balance eigenbasis of the final operator
//! `L_{γ(τ),0}` as `ρ = Σ_n c_n φ_n` gives `c₀ = 1` and
//! `D(τ) - 1 = Σ_{n≥1} c_n(0) c_n(τ)`. The upper bound on calculation time is
//!
//! ```text
//! τ ≤ τ_max = ln[(D(0) - 1) / (D(τ) - 1)] / min_t Re λ₁(t)
//! ```
//!
//! and the speed-limit lower bound for a fixed detailed-balance operator is
//!
//! ```text
//! τ ≥ τ_min = [ln⟨ψ₀|ψ₀⟩ - ln⟨ψ₀|ψ_τ⟩] / (⟨ψ₀|H_F|ψ₀⟩ / ⟨ψ₀|ψ₀⟩),   ψ = P^{-1/2} ρ.
//! ```
//!
//! Everything in the coefficient frame is carried in complex arithmetic,
//! also for detailed-balance runs where it must come out real.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::evolve::{self, DensityState, Trajectory};
use crate::generator::{self, ControlPoint, Generator, SystemSpec};
use crate::protocol::Protocol;
use crate::spectral::{self, identity_residual, Spectrum};

/// Absolute slack on the rearranged main inequality and the decay inequality.
pub const BOUND_SLACK: f64 = 1e-8;
/// Minimum samples per control interval for [`verify_c_dynamics`].
pub const MIN_SAMPLES_PER_INTERVAL: usize = 8;

fn cplx(x: f64) -> Complex64 {
    Complex64::new(x, 0.0)
}

fn to_complex(v: &DVector<f64>) -> DVector<Complex64> {
    v.map(cplx)
}

/// `D = Σ_x ρ₀(x) ρ_t(x) / π(x)`.
pub fn overlap_d(rho0: &DVector<f64>, rho_t: &DVector<f64>, pi_final: &DVector<f64>) -> Result<f64> {
    let m = pi_final.len();
    for v in [rho0, rho_t] {
        if v.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: v.len(),
            });
        }
    }
    if let Some(index) = pi_final.iter().position(|&p| !(p > 0.0)) {
        return Err(Error::SingularStationary { index });
    }
    Ok(evolve::fixed_overlap(rho0, rho_t, pi_final))
}

/// `τ_max = ln[(D0 - 1)/(Dτ - 1)] / gap_min`.
pub fn tau_max(d0: f64, dtau: f64, gap_min: f64) -> Result<f64> {
    if !(dtau - 1.0 > 0.0) {
        return Err(Error::ErrorBelowResolution { excess: dtau - 1.0 });
    }
    if !(d0 - 1.0 > 0.0) {
        return Err(Error::ErrorBelowResolution { excess: d0 - 1.0 });
    }
    if !(gap_min > 0.0) {
        return Err(Error::NoGap { gap: gap_min });
    }
    Ok(((d0 - 1.0) / (dtau - 1.0)).ln() / gap_min)
}

/// Speed-limit lower bound for a fixed detailed-balance generator.
pub fn csl_tau_min(gen: &Generator, rho0: &DVector<f64>, rho_tau: &DVector<f64>) -> Result<f64> {
    if !gen.is_detailed_balance() {
        return Err(Error::RequiresDetailedBalance);
    }
    let pi = gen.pi();
    let norm0 = overlap_d(rho0, rho0, pi)?;
    let cross = overlap_d(rho0, rho_tau, pi)?;
    if !(norm0 > 0.0) || !(cross > 0.0) {
        return Err(Error::InvalidOverlap(format!(
            "<psi0|psi0> = {norm0}, <psi0|psi_tau> = {cross}"
        )));
    }
    let numerator = norm0.ln() - cross.ln();
    let l_rho0 = gen.matrix() * rho0;
    let energy: f64 = rho0
        .iter()
        .zip(l_rho0.iter())
        .zip(pi.iter())
        .map(|((r, lr), p)| r * lr / p)
        .sum();
    let mean_energy = energy / norm0;
    let scale = gen.norm_inf().max(1.0);
    if mean_energy.abs() <= 1e-14 * scale {
        // Stationary start: nothing evolves, so no time is needed.
        if numerator.abs() <= 1e-12 {
            return Ok(0.0);
        }
        return Err(Error::InvalidOverlap(format!(
            "zero mean energy with nonzero log-overlap change {numerator:e}"
        )));
    }
    Ok(numerator / mean_energy)
}

/// Coefficients `c_n = Σ_x ψ_n(x) ρ(x)` in a spectrum's basis.
pub fn coefficients(spectrum: &Spectrum, rho: &DVector<f64>) -> DVector<Complex64> {
    spectrum.left() * to_complex(rho)
}

/// `Σ_{n≥1} a_n b_n` (bilinear, no conjugation).
pub fn excited_product(a: &DVector<Complex64>, b: &DVector<Complex64>) -> Complex64 {
    a.iter().zip(b.iter()).skip(1).map(|(x, y)| x * y).sum()
}

/// Euclidean norm of `(c₁, c₂, …)`.
pub fn excited_norm(c: &DVector<Complex64>) -> f64 {
    c.iter().skip(1).map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Change of basis between the final detailed-balance eigenbasis and the
/// instantaneous one at time `t`.
#[derive(Debug, Clone)]
pub struct CoefficientFrame {
    pub t: f64,
    /// `A_nm = Σ_x ψ_m^{(t)} φ_n^{(τ,0)}`.
    pub a: DMatrix<Complex64>,
    /// `(A⁻¹)_nm = Σ_x ψ_m^{(τ,0)} φ_n^{(t)}`.
    pub a_inv: DMatrix<Complex64>,
    /// Final-basis coefficients of `ρ(t)`.
    pub c: DVector<Complex64>,
    /// Instantaneous-basis coefficients, `d_m = Σ_n c_n A_nm`.
    pub d: DVector<Complex64>,
}

impl CoefficientFrame {
    /// `max |A A⁻¹ - I|`.
    pub fn inverse_residual(&self) -> f64 {
        identity_residual(&(&self.a * &self.a_inv))
    }

    pub fn c0_deviation(&self) -> f64 {
        (self.c[0] - 1.0).norm()
    }

    pub fn d0_deviation(&self) -> f64 {
        (self.d[0] - 1.0).norm()
    }

    /// `A Λ A⁻¹` for eigenvalues `lambda` of the instantaneous operator.
    pub fn coefficient_generator(&self, lambda: &[Complex64]) -> DMatrix<Complex64> {
        let mut a_lambda = self.a.clone();
        for (k, l) in lambda.iter().enumerate() {
            let mut col = a_lambda.column_mut(k);
            col *= *l;
        }
        a_lambda * &self.a_inv
    }
}

pub fn coefficient_frame(
    spec_final: &Spectrum,
    spec_t: &Spectrum,
    rho_t: &DVector<f64>,
    t: f64,
) -> Result<CoefficientFrame> {
    let m = spec_final.size();
    for got in [spec_t.size(), rho_t.len()] {
        if got != m {
            return Err(Error::DimensionMismatch { expected: m, got });
        }
    }
    let a = spec_final.right() * spec_t.left().transpose();
    let a_inv = spec_t.right() * spec_final.left().transpose();
    let c = coefficients(spec_final, rho_t);
    let d = a.transpose() * &c;
    Ok(CoefficientFrame { t, a, a_inv, c, d })
}

/// Spectra needed to analyse one run: the final detailed-balance basis
/// and every control the protocol visits.
#[derive(Debug, Clone)]
pub struct RunSpectra {
    final_generator: Generator,
    final_db: Spectrum,
    controls: Vec<(ControlPoint, Spectrum)>,
}

impl RunSpectra {
    pub fn compute(spec: &SystemSpec, protocol: &Protocol) -> Result<Self> {
        let target = protocol.final_control();
        let final_generator = generator::build(spec, ControlPoint::new(target.gamma, 0.0))?;
        let final_db = spectral::decompose(&final_generator)?;
        let controls = protocol
            .distinct_controls()
            .par_iter()
            .map(|&c| {
                let g = generator::build(spec, c)?;
                Ok((c, spectral::decompose(&g)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            final_generator,
            final_db,
            controls,
        })
    }

    /// Detailed-balance generator `L_{γ(τ),0}`.
    pub fn final_generator(&self) -> &Generator {
        &self.final_generator
    }

    pub fn final_db(&self) -> &Spectrum {
        &self.final_db
    }

    pub fn final_pi(&self) -> &DVector<f64> {
        self.final_generator.pi()
    }

    pub fn controls(&self) -> &[(ControlPoint, Spectrum)] {
        &self.controls
    }

    pub fn for_control(&self, control: ControlPoint) -> Option<&Spectrum> {
        self.controls.iter().find(|(c, _)| *c == control).map(|(_, s)| s)
    }

    /// `min_t Re λ₁` over every control in force on `[0, τ]`.
    pub fn gap_min(&self) -> f64 {
        self.controls.iter().map(|(_, s)| s.gap()).fold(f64::INFINITY, f64::min)
    }
}

/// Maximal runs of equal control, as `(start, end, control)`.
fn control_intervals(protocol: &Protocol) -> Vec<(f64, f64, ControlPoint)> {
    let pts = protocol.points();
    if pts.len() == 1 {
        return vec![(0.0, protocol.tau(), pts[0].control)];
    }
    let mut out: Vec<(f64, f64, ControlPoint)> = Vec::new();
    for w in pts.windows(2) {
        match out.last_mut() {
            Some(last) if last.2 == w[0].control => last.1 = w[1].t,
            _ => out.push((w[0].t, w[1].t, w[0].control)),
        }
    }
    out
}

/// Compare finite-difference `ċ` along the trajectory with the coefficient
/// dynamics `ċ_n = -Σ_{m,k} c_m A_mk λ_k (A⁻¹)_kn`.
///
/// Derivatives use the five-point centred stencil, so only samples with two
/// equally spaced neighbours on each side inside one control interval are
/// checked. Each sample's residual is taken relative to
/// `max(‖ċ‖∞, 1e-6 · max_t ‖ċ‖∞, 1e-9 · |λ|max ‖c‖∞)`; the maximum over
/// samples is returned.
pub fn verify_c_dynamics(traj: &Trajectory, spectra: &RunSpectra) -> Result<f64> {
    let states = traj.states();
    let tau = traj.protocol().tau();
    let eps = 1e-9 * tau;
    let coeffs: Vec<DVector<Complex64>> = states
        .iter()
        .map(|s| coefficients(spectra.final_db(), &s.rho))
        .collect();

    struct Sample {
        predicted: DVector<Complex64>,
        estimated: DVector<Complex64>,
        floor: f64,
    }
    let mut samples = Vec::new();

    for (start, end, control) in control_intervals(traj.protocol()) {
        let idx: Vec<usize> = (0..states.len())
            .filter(|&i| states[i].t >= start - eps && states[i].t <= end + eps)
            .collect();
        if idx.len() < MIN_SAMPLES_PER_INTERVAL {
            return Err(Error::NeedDenserTrajectory(format!(
                "{} samples on [{start}, {end}], need {MIN_SAMPLES_PER_INTERVAL}",
                idx.len()
            )));
        }
        let spec_t = spectra
            .for_control(control)
            .ok_or_else(|| Error::InvalidProtocol(format!("no spectrum for {control:?}")))?;
        let frame = coefficient_frame(spectra.final_db(), spec_t, &states[idx[0]].rho, start)?;
        let b = frame.coefficient_generator(spec_t.eigenvalues());
        let bt = b.transpose();
        let lambda_max = spec_t.eigenvalues().iter().map(|l| l.norm()).fold(0.0, f64::max);

        let t = |j: usize| states[idx[j]].t;
        let spaced = |j: usize, h: f64| ((t(j + 1) - t(j)) - h).abs() <= 1e-9 * h;
        for j in 2..idx.len() - 2 {
            let h = t(j) - t(j - 1);
            if !(spaced(j - 2, h) && spaced(j, h) && spaced(j + 1, h)) {
                continue;
            }
            let c = |k: usize| &coeffs[idx[k]];
            let estimated = (c(j - 2) - c(j - 1) * cplx(8.0) + c(j + 1) * cplx(8.0) - c(j + 2)) / cplx(12.0 * h);
            let predicted = -(&bt * c(j));
            let floor = 1e-9 * lambda_max * c(j).camax();
            samples.push(Sample {
                predicted,
                estimated,
                floor,
            });
        }
    }

    let scale = samples.iter().map(|s| s.predicted.camax()).fold(0.0, f64::max);
    let worst = samples
        .iter()
        .map(|s| {
            let diff = (&s.estimated - &s.predicted).camax();
            let denom = s.predicted.camax().max(1e-6 * scale).max(s.floor);
            if denom == 0.0 {
                diff
            } else {
                diff / denom
            }
        })
        .fold(0.0, f64::max);
    Ok(worst)
}

/// Outcome of the coefficient-decay check `|c⃗(τ)| ≤ e^{-τ gap_min} |c⃗(0)|`
/// and the Cauchy-Schwarz step `D(τ) ≤ 1 + |c⃗(0)||c⃗(τ)|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayVerdict {
    pub satisfied: bool,
    /// `e^{-τ gap_min} |c⃗(0)| - |c⃗(τ)|`; negative means violated.
    pub margin: f64,
    pub schwartz_satisfied: bool,
    pub schwartz_margin: f64,
    pub c0_norm: f64,
    pub ctau_norm: f64,
}

pub fn verify_decay_bound(traj: &Trajectory, spectra: &RunSpectra) -> Result<DecayVerdict> {
    let tau = traj.protocol().tau();
    let rho0 = &traj.initial().rho;
    let rho_tau = &traj.last().rho;
    let c0 = coefficients(spectra.final_db(), rho0);
    let ctau = coefficients(spectra.final_db(), rho_tau);
    let c0_norm = excited_norm(&c0);
    let ctau_norm = excited_norm(&ctau);
    let margin = (-tau * spectra.gap_min()).exp() * c0_norm - ctau_norm;
    let dtau = overlap_d(rho0, rho_tau, spectra.final_pi())?;
    let schwartz_margin = 1.0 + c0_norm * ctau_norm - dtau;
    Ok(DecayVerdict {
        satisfied: margin >= -BOUND_SLACK,
        margin,
        schwartz_satisfied: schwartz_margin >= -BOUND_SLACK,
        schwartz_margin,
        c0_norm,
        ctau_norm,
    })
}

/// `τ_max`, or why it is undefined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TauMax {
    Value(f64),
    ErrorBelowResolution,
    NoGap,
}

impl TauMax {
    pub fn from_overlaps(d0: f64, dtau: f64, gap_min: f64) -> Self {
        match tau_max(d0, dtau, gap_min) {
            Ok(v) => TauMax::Value(v),
            Err(Error::NoGap { .. }) => TauMax::NoGap,
            Err(_) => TauMax::ErrorBelowResolution,
        }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            TauMax::Value(v) => Some(*v),
            _ => None,
        }
    }
}

impl std::fmt::Display for TauMax {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TauMax::Value(v) => write!(f, "{v}"),
            TauMax::ErrorBelowResolution => f.write_str("ErrorBelowResolution"),
            TauMax::NoGap => f.write_str("NoGap"),
        }
    }
}

/// Numbers serialise as JSON numbers, flags as their name.
impl Serialize for TauMax {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TauMax::Value(v) => s.serialize_f64(*v),
            TauMax::ErrorBelowResolution => s.serialize_str("ErrorBelowResolution"),
            TauMax::NoGap => s.serialize_str("NoGap"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Margins {
    /// `(D0 - 1) e^{-τ gap_min} - (Dτ - 1)`.
    pub main: f64,
    pub decay: f64,
    pub schwartz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    #[serde(rename = "D0")]
    pub d0: f64,
    #[serde(rename = "Dtau")]
    pub dtau: f64,
    pub gap_min: f64,
    pub tau: f64,
    pub tau_max: TauMax,
    pub tau_min: Option<f64>,
    pub main_bound_satisfied: bool,
    pub decay_bound_satisfied: bool,
    pub margins: Margins,
}

/// Assemble the report for a finished trajectory. `τ_min` is filled in only
/// for constant detailed-balance protocols.
pub fn report(traj: &Trajectory, spectra: &RunSpectra) -> Result<BoundReport> {
    let tau = traj.protocol().tau();
    let rho0 = &traj.initial().rho;
    let rho_tau = &traj.last().rho;
    let pi = spectra.final_pi();
    let d0 = overlap_d(rho0, rho0, pi)?;
    let dtau = overlap_d(rho0, rho_tau, pi)?;
    let gap_min = spectra.gap_min();
    let main = (d0 - 1.0) * (-tau * gap_min).exp() - (dtau - 1.0);
    let decay = verify_decay_bound(traj, spectra)?;

    let tau_min = if traj.protocol().is_constant() && traj.protocol().final_control().u == 0.0 {
        Some(csl_tau_min(spectra.final_generator(), rho0, rho_tau)?)
    } else {
        None
    };

    Ok(BoundReport {
        d0,
        dtau,
        gap_min,
        tau,
        tau_max: TauMax::from_overlaps(d0, dtau, gap_min),
        tau_min,
        main_bound_satisfied: main >= -BOUND_SLACK,
        decay_bound_satisfied: decay.satisfied,
        margins: Margins {
            main,
            decay: decay.margin,
            schwartz: decay.schwartz_margin,
        },
    })
}

/// A propagated run with its spectra and report.
#[derive(Debug, Clone)]
pub struct Run {
    pub trajectory: Trajectory,
    pub spectra: RunSpectra,
    pub report: BoundReport,
}

pub fn analyze(spec: &SystemSpec, protocol: &Protocol, rho0: &DensityState, record_every: usize) -> Result<Run> {
    let trajectory = evolve::propagate(spec, protocol, rho0, record_every)?;
    let spectra = RunSpectra::compute(spec, protocol)?;
    let report = report(&trajectory, &spectra)?;
    Ok(Run {
        trajectory,
        spectra,
        report,
    })
}

/// Structural residuals of a run's coefficient frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrameResiduals {
    /// `max_t |c₀(t) - 1|`.
    pub c0: f64,
    /// `max_t |d₀(t) - 1|`.
    pub d0: f64,
    /// `max |A A⁻¹ - I|` over visited controls.
    pub inverse: f64,
    /// `max_t |d(t) - Ψ^{(t)} ρ(t)|`.
    pub d_reconstruction: f64,
    /// `max_t |(D(t) - 1) - c⃗(0)ᵀ c⃗(t)|`.
    pub overlap_two_ways: f64,
    /// `max_t |Im c(t)|`, which vanishes for a real final basis.
    pub imaginary: f64,
}

pub fn frame_residuals(traj: &Trajectory, spectra: &RunSpectra) -> Result<FrameResiduals> {
    let pi = spectra.final_pi();
    let rho0 = &traj.initial().rho;
    let c_init = coefficients(spectra.final_db(), rho0);
    let mut r = FrameResiduals {
        c0: 0.0,
        d0: 0.0,
        inverse: 0.0,
        d_reconstruction: 0.0,
        overlap_two_ways: 0.0,
        imaginary: 0.0,
    };
    for state in traj.states() {
        let control = traj.protocol().at(state.t)?;
        let spec_t = spectra
            .for_control(control)
            .ok_or_else(|| Error::InvalidProtocol(format!("no spectrum for {control:?}")))?;
        let frame = coefficient_frame(spectra.final_db(), spec_t, &state.rho, state.t)?;
        r.c0 = r.c0.max(frame.c0_deviation());
        r.d0 = r.d0.max(frame.d0_deviation());
        let direct_d = spec_t.left() * to_complex(&state.rho);
        r.d_reconstruction = r.d_reconstruction.max((&frame.d - direct_d).camax());
        r.imaginary = r.imaginary.max(frame.c.iter().map(|z| z.im.abs()).fold(0.0, f64::max));
        let direct = overlap_d(rho0, &state.rho, pi)? - 1.0;
        let via_c = excited_product(&c_init, &frame.c);
        r.overlap_two_ways = r.overlap_two_ways.max((via_c - direct).norm());
    }
    for (_, spec_t) in spectra.controls() {
        let frame = coefficient_frame(spectra.final_db(), spec_t, pi, traj.protocol().tau())?;
        r.inverse = r.inverse.max(frame.inverse_residual());
    }
    Ok(r)
}
