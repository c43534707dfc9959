//! Density propagation under piecewise-constant generators.
//!
//! Each propagation segment applies `exp(-Δt L)` exactly (dense
//! scaling-and-squaring), so the only error left is the exponential's own
//! rounding. Exponentials are cached per run by the bit pattern of
//! `(γ, u, Δt)`; a cache hit returns the very matrix a miss would compute.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::io;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::generator::{self, ControlPoint, Generator, SystemSpec};
use crate::protocol::{Protocol, Segment};

/// Tolerance on `Σρ = 1` for a valid density.
pub const MASS_TOL: f64 = 1e-10;
/// Most negative entry a valid density may carry before clipping.
pub const NEGATIVE_TOL: f64 = 1e-12;
/// Cumulative clipped mass that aborts a run.
pub const MAX_CLIP: f64 = 1e-9;
/// Allowed deviation of an exponential's column sums from one.
pub const EXP_COLUMN_TOL: f64 = 1e-9;
/// Densities CSV is skipped beyond this many cells (states × M).
pub const MAX_EXPORT_CELLS: usize = 20_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct DensityState {
    pub t: f64,
    pub rho: DVector<f64>,
}

impl DensityState {
    pub fn new(t: f64, rho: DVector<f64>) -> Result<Self> {
        let mass = rho.sum();
        if !(mass - 1.0).abs().le(&MASS_TOL) {
            return Err(Error::InvalidDensity(format!("mass {mass} differs from 1")));
        }
        if let Some((i, v)) = rho
            .iter()
            .enumerate()
            .find(|(_, v)| **v < -NEGATIVE_TOL || !v.is_finite())
        {
            return Err(Error::InvalidDensity(format!("entry {i} is {v}")));
        }
        Ok(Self { t, rho })
    }

    /// Point mass at `index` in an `m`-state space.
    pub fn point_mass(m: usize, index: usize) -> Result<Self> {
        if index >= m {
            return Err(Error::InvalidDensity(format!("index {index} outside {m} states")));
        }
        let mut rho = DVector::zeros(m);
        rho[index] = 1.0;
        Self::new(0.0, rho)
    }
}

/// Per-segment bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostic {
    pub t: f64,
    pub conservation_error: f64,
    pub clipped: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    states: Vec<DensityState>,
    protocol: Protocol,
    segments: Vec<Segment>,
    diagnostics: Vec<StepDiagnostic>,
}

impl Trajectory {
    pub fn states(&self) -> &[DensityState] {
        &self.states
    }

    pub fn initial(&self) -> &DensityState {
        &self.states[0]
    }

    pub fn last(&self) -> &DensityState {
        &self.states[self.states.len() - 1]
    }

    pub fn protocol(&self) -> &Protocol {
        &self.protocol
    }

    /// Propagation segments actually applied.
    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn diagnostics(&self) -> &[StepDiagnostic] {
        &self.diagnostics
    }

    pub fn max_conservation_error(&self) -> f64 {
        self.diagnostics
            .iter()
            .map(|d| d.conservation_error)
            .fold(0.0, f64::max)
    }

    pub fn clip_total(&self) -> f64 {
        self.diagnostics.iter().map(|d| d.clipped).sum()
    }

    /// Whether the full densities export stays under [`MAX_EXPORT_CELLS`].
    pub fn densities_exportable(&self) -> bool {
        self.states.len().saturating_mul(self.states[0].rho.len()) <= MAX_EXPORT_CELLS
    }

    /// CSV with header `t, rho_0, …, rho_{M-1}`.
    pub fn write_densities<W: io::Write>(&self, w: W) -> csv::Result<()> {
        let m = self.states[0].rho.len();
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((0..m).map(|i| format!("rho_{i}")));
        out.write_record(&header)?;
        for s in &self.states {
            let mut row = vec![s.t.to_string()];
            row.extend(s.rho.iter().map(|v| v.to_string()));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    /// CSV with header `t, conservation_error`, one row per segment end.
    pub fn write_diagnostics<W: io::Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "conservation_error"])?;
        for d in &self.diagnostics {
            out.write_record([d.t.to_string(), d.conservation_error.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Generators and exponentials for one run.
#[derive(Debug, Default)]
pub struct PropagatorCache {
    generators: HashMap<(u64, u64), Generator>,
    exponentials: HashMap<(u64, u64, u64), DMatrix<f64>>,
}

impl PropagatorCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn generator(&mut self, spec: &SystemSpec, control: ControlPoint) -> Result<&Generator> {
        Ok(match self.generators.entry(control.key()) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(e) => e.insert(generator::build(spec, control)?),
        })
    }

    /// `exp(-dt L)` for `gen`, checked for column-sum accuracy.
    pub fn exponential(&mut self, gen: &Generator, dt: f64) -> Result<&DMatrix<f64>> {
        let (g, u) = gen.control().key();
        Ok(match self.exponentials.entry((g, u, dt.to_bits())) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(e) => e.insert(transition_matrix(gen, dt)?),
        })
    }
}

/// `exp(-dt L)`, rejected if its columns do not sum to one within
/// [`EXP_COLUMN_TOL`].
pub fn transition_matrix(gen: &Generator, dt: f64) -> Result<DMatrix<f64>> {
    let e = (gen.matrix() * (-dt)).exp();
    let worst = e.column_iter().map(|c| (c.sum() - 1.0).abs()).fold(0.0, f64::max);
    if !(worst <= EXP_COLUMN_TOL) {
        return Err(Error::PropagationAccuracy(format!(
            "exp(-{dt} L) column sums deviate from 1 by {worst:e}"
        )));
    }
    Ok(e)
}

/// Clip tiny negatives to zero and renormalise; returns the clipped mass.
fn clip_negatives(rho: &mut DVector<f64>) -> f64 {
    let clipped: f64 = rho.iter().filter(|v| **v < 0.0).map(|v| -v).sum();
    if clipped > 0.0 {
        rho.iter_mut().for_each(|v| *v = v.max(0.0));
        let mass = rho.sum();
        *rho /= mass;
    }
    clipped
}

fn step(rho: &DVector<f64>, e: &DMatrix<f64>, t: f64, clip_so_far: f64) -> Result<(DVector<f64>, StepDiagnostic)> {
    let mut next = e * rho;
    let clipped = clip_negatives(&mut next);
    if clipped > 0.0 {
        debug!("clipped {clipped:e} of negative mass at t = {t}");
    }
    if clip_so_far + clipped > MAX_CLIP {
        return Err(Error::PropagationAccuracy(format!(
            "cumulative clipped mass {:e} exceeds {MAX_CLIP:e}",
            clip_so_far + clipped
        )));
    }
    let conservation_error = (next.sum() - 1.0).abs();
    if conservation_error > MASS_TOL {
        warn!("mass drift {conservation_error:e} at t = {t}");
    }
    Ok((
        next,
        StepDiagnostic {
            t,
            conservation_error,
            clipped,
        },
    ))
}

/// Evolve `rho0` through `protocol`, recording every `record_every`
/// propagation segments plus both endpoints.
pub fn propagate(
    spec: &SystemSpec,
    protocol: &Protocol,
    rho0: &DensityState,
    record_every: usize,
) -> Result<Trajectory> {
    let mut cache = PropagatorCache::new();
    propagate_with(&mut cache, spec, protocol, rho0, record_every)
}

pub fn propagate_with(
    cache: &mut PropagatorCache,
    spec: &SystemSpec,
    protocol: &Protocol,
    rho0: &DensityState,
    record_every: usize,
) -> Result<Trajectory> {
    let m = spec.num_states();
    if rho0.rho.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: rho0.rho.len(),
        });
    }
    DensityState::new(0.0, rho0.rho.clone())?;
    let record_every = record_every.max(1);
    let segments = protocol.segments();

    let mut states = vec![DensityState {
        t: 0.0,
        rho: rho0.rho.clone(),
    }];
    let mut diagnostics = Vec::with_capacity(segments.len());
    let mut rho = rho0.rho.clone();
    let mut clip_total = 0.0;

    for (idx, seg) in segments.iter().enumerate() {
        let gen = cache.generator(spec, seg.control)?.clone();
        let e = cache.exponential(&gen, seg.duration())?;
        let (next, diag) = step(&rho, e, seg.end, clip_total)?;
        clip_total += diag.clipped;
        diagnostics.push(diag);
        rho = next;
        if (idx + 1) % record_every == 0 || idx + 1 == segments.len() {
            states.push(DensityState {
                t: seg.end,
                rho: rho.clone(),
            });
        }
    }

    Ok(Trajectory {
        states,
        protocol: protocol.clone(),
        segments,
        diagnostics,
    })
}

/// `⟨ψ(0)|ψ(t)⟩ = Σ_x ρ₀ ρ_t / π` for a fixed operator with stationary `pi`.
pub fn fixed_overlap(rho0: &DVector<f64>, rho_t: &DVector<f64>, pi: &DVector<f64>) -> f64 {
    rho0.iter()
        .zip(rho_t.iter())
        .zip(pi.iter())
        .map(|((a, b), p)| a * b / p)
        .sum()
}

/// Steps on the coarse grid of [`relax_fixed`].
pub const RELAX_STEPS: usize = 1024;
/// Bisection refinements inside the crossing step (resolution `Δt/16`).
pub const RELAX_BISECTIONS: usize = 4;

#[derive(Debug, Clone)]
pub struct Relaxation {
    /// First resolved time at which the overlap is at or below the target.
    pub t_star: f64,
    pub rho_star: DVector<f64>,
    pub trajectory: Trajectory,
}

/// Relax under a fixed generator until `⟨ψ(0)|ψ(t)⟩` first drops to
/// `target_overlap`, using [`RELAX_STEPS`] coarse steps over `[0, t_max]`.
pub fn relax_fixed(gen: &Generator, rho0: &DensityState, target_overlap: f64, t_max: f64) -> Result<Relaxation> {
    relax_fixed_with_steps(gen, rho0, target_overlap, t_max, RELAX_STEPS)
}

pub fn relax_fixed_with_steps(
    gen: &Generator,
    rho0: &DensityState,
    target_overlap: f64,
    t_max: f64,
    steps: usize,
) -> Result<Relaxation> {
    let m = gen.size();
    if rho0.rho.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: rho0.rho.len(),
        });
    }
    let protocol = Protocol::constant(gen.control(), t_max, steps)?;
    let dt = t_max / steps as f64;
    let pi = gen.pi();
    let overlap = |rho: &DVector<f64>| fixed_overlap(&rho0.rho, rho, pi);

    let mut states = vec![rho0.clone()];
    let mut diagnostics = Vec::new();
    let finish = |states: Vec<DensityState>, diagnostics: Vec<StepDiagnostic>| Trajectory {
        segments: protocol.segments(),
        protocol: protocol.clone(),
        states,
        diagnostics,
    };

    if overlap(&rho0.rho) <= target_overlap {
        return Ok(Relaxation {
            t_star: 0.0,
            rho_star: rho0.rho.clone(),
            trajectory: finish(states, diagnostics),
        });
    }

    let e = transition_matrix(gen, dt)?;
    let mut rho = rho0.rho.clone();
    let mut clip_total = 0.0;
    for k in 1..=steps {
        let t = k as f64 * dt;
        let (next, diag) = step(&rho, &e, t, clip_total)?;
        clip_total += diag.clipped;
        diagnostics.push(diag);
        if overlap(&next) <= target_overlap {
            // Bisect inside [t - dt, t]; keep the crossed end.
            let mut lo = (t - dt, rho.clone());
            let mut hi = (t, next);
            let mut width = dt;
            for _ in 0..RELAX_BISECTIONS {
                width *= 0.5;
                let half = transition_matrix(gen, width)?;
                let mid_rho = &half * &lo.1;
                let mid = (lo.0 + width, mid_rho);
                if overlap(&mid.1) <= target_overlap {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            let (t_star, rho_star) = hi;
            states.push(DensityState {
                t: t_star,
                rho: rho_star.clone(),
            });
            return Ok(Relaxation {
                t_star,
                rho_star,
                trajectory: finish(states, diagnostics),
            });
        }
        rho = next;
        states.push(DensityState { t, rho: rho.clone() });
    }

    Err(Error::TargetNotReached {
        target: target_overlap,
        t_max,
        trajectory: Box::new(finish(states, diagnostics)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{build, PotentialSpec};

    fn two_state_spec() -> SystemSpec {
        SystemSpec::TwoState { rates: [1.0, 2.0] }
    }

    #[test]
    fn stationary_start_stays_put() {
        let spec = SystemSpec::Ring {
            size: 8,
            potential: Some(PotentialSpec::Cosine { amplitude: 1.0 }),
        };
        let control = ControlPoint::new(1.0, 0.2);
        let g = build(&spec, control).unwrap();
        let p = Protocol::constant(control, 3.0, 30).unwrap();
        let traj = propagate(&spec, &p, &DensityState::new(0.0, g.pi().clone()).unwrap(), 1).unwrap();
        for s in traj.states() {
            assert!((&s.rho - g.pi()).amax() < 1e-10);
        }
        assert_eq!(traj.states().len(), 31);
    }

    #[test]
    fn two_state_relaxes_at_rate_three() {
        let spec = two_state_spec();
        let control = ControlPoint::new(1.0, 0.0);
        let p = Protocol::constant(control, 2.0, 20).unwrap();
        let rho0 = DensityState::point_mass(2, 0).unwrap();
        let traj = propagate(&spec, &p, &rho0, 1).unwrap();
        let pi = [2.0 / 3.0, 1.0 / 3.0];
        for s in traj.states() {
            let decay = (-3.0 * s.t).exp();
            for (i, p) in pi.iter().enumerate() {
                let expected = p + decay * (rho0.rho[i] - p);
                assert!((s.rho[i] - expected).abs() < 1e-13, "t = {}", s.t);
            }
        }
    }

    #[test]
    fn records_every_k_plus_end() {
        let spec = two_state_spec();
        let p = Protocol::constant(ControlPoint::new(1.0, 0.0), 1.0, 7).unwrap();
        let traj = propagate(&spec, &p, &DensityState::point_mass(2, 1).unwrap(), 3).unwrap();
        let ts: Vec<f64> = traj.states().iter().map(|s| s.t).collect();
        assert_eq!(ts.len(), 4);
        assert_eq!(ts[0], 0.0);
        assert_eq!(*ts.last().unwrap(), 1.0);
        assert!(ts.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn flow_infeasible_surfaces_at_propagation() {
        let spec = SystemSpec::Ring {
            size: 4,
            potential: None,
        };
        let p = Protocol::linear(2.0, 1.0, -0.3, 1.0, 2).unwrap();
        let err = propagate(&spec, &p, &DensityState::point_mass(4, 0).unwrap(), 1).unwrap_err();
        assert!(matches!(err, Error::FlowInfeasible { .. }));
    }

    #[test]
    fn density_validation() {
        assert!(DensityState::new(0.0, DVector::from_vec(vec![0.5, 0.4])).is_err());
        assert!(DensityState::new(0.0, DVector::from_vec(vec![1.1, -0.1])).is_err());
        assert!(DensityState::new(0.0, DVector::from_vec(vec![1.0 + 1e-13, -1e-13])).is_ok());
        assert!(DensityState::point_mass(3, 3).is_err());
    }

    #[test]
    fn clipping_renormalises() {
        let mut v = DVector::from_vec(vec![0.5, 0.5 + 1e-13, -1e-13]);
        let c = clip_negatives(&mut v);
        assert_eq!(c, 1e-13);
        assert_eq!(v[2], 0.0);
        assert!((v.sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn relax_two_state_crossing() {
        let g = build(&two_state_spec(), ControlPoint::new(1.0, 0.0)).unwrap();
        let rho0 = DensityState::point_mass(2, 0).unwrap();
        // overlap(t) = 1 + (1/2) e^{-3t}
        let target = 1.1;
        let analytic = (5.0f64).ln() / 3.0;
        let r = relax_fixed(&g, &rho0, target, 1.0).unwrap();
        assert!(r.t_star >= analytic);
        assert!((r.t_star - analytic).abs() < 1e-4, "{} vs {analytic}", r.t_star);
    }

    #[test]
    fn relax_from_stationary_is_immediate() {
        let g = build(&two_state_spec(), ControlPoint::new(1.0, 0.0)).unwrap();
        let rho0 = DensityState::new(0.0, g.pi().clone()).unwrap();
        let r = relax_fixed(&g, &rho0, 1.0, 1.0).unwrap();
        assert_eq!(r.t_star, 0.0);
    }

    #[test]
    fn relax_reports_unreached_target() {
        let g = build(&two_state_spec(), ControlPoint::new(1.0, 0.0)).unwrap();
        let rho0 = DensityState::point_mass(2, 0).unwrap();
        match relax_fixed(&g, &rho0, 1.0 + 1e-9, 0.5) {
            Err(Error::TargetNotReached { trajectory, .. }) => {
                assert!((trajectory.last().t - 0.5).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn exports_have_expected_headers() {
        let spec = two_state_spec();
        let p = Protocol::constant(ControlPoint::new(1.0, 0.0), 1.0, 2).unwrap();
        let traj = propagate(&spec, &p, &DensityState::point_mass(2, 0).unwrap(), 1).unwrap();
        let mut buf = Vec::new();
        traj.write_densities(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,rho_0,rho_1\n0,1,0\n"));
        let mut buf = Vec::new();
        traj.write_diagnostics(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("t,conservation_error\n"));
    }
}
