//! Built-in analytic battery. Each invariant prints one line; tolerances can
//! be scaled (test hook) to confirm failures are detected.

use std::f64::consts::PI;
use std::io::{self, Write};

use anneal_bound::bounds::{self, RunSpectra};
use anneal_bound::evolve::{self, DensityState};
use anneal_bound::generator::{self, Boundary, ControlPoint, PotentialSpec, SystemSpec};
use anneal_bound::protocol::Protocol;
use anneal_bound::spectral;
use num_complex::Complex64;

struct Case {
    name: &'static str,
    residual: f64,
    tol: f64,
}

/// Largest distance from each expected eigenvalue to its nearest computed one.
fn spectrum_mismatch(computed: &[Complex64], expected: &[Complex64]) -> f64 {
    expected
        .iter()
        .map(|e| computed.iter().map(|c| (c - e).norm()).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
}

/// `λ_k = (f + b)(1 - cos θ_k) + i (f - b) sin θ_k` for forward rate `f`,
/// backward rate `b`.
fn circulant(m: usize, f: f64, b: f64) -> Vec<Complex64> {
    (0..m)
        .map(|k| {
            let th = 2.0 * PI * k as f64 / m as f64;
            Complex64::new((f + b) * (1.0 - th.cos()), (f - b) * th.sin())
        })
        .collect()
}

fn harmonic(size: usize) -> SystemSpec {
    SystemSpec::FpGrid {
        size,
        potential: PotentialSpec::Harmonic { stiffness: 1.0 },
        boundary: Boundary::Reflecting,
        domain: [-5.0, 5.0],
    }
}

fn battery() -> anneal_bound::Result<Vec<Case>> {
    let mut cases = Vec::new();
    let db = ControlPoint::new(1.0, 0.0);

    let two = SystemSpec::TwoState { rates: [1.0, 2.0] };
    let g = generator::build(&two, db)?;
    cases.push(Case {
        name: "two_state gap equals rate sum",
        residual: (spectral::gap(&g)? - 3.0).abs(),
        tol: 1e-12,
    });
    cases.push(Case {
        name: "two_state stationary density",
        residual: (g.pi()[0] - 2.0 / 3.0).abs().max((g.pi()[1] - 1.0 / 3.0).abs()),
        tol: 1e-14,
    });
    let p = Protocol::constant(db, 1.0, 4)?;
    let run = bounds::analyze(&two, &p, &DensityState::point_mass(2, 0)?, 1)?;
    cases.push(Case {
        name: "two_state overlap decays as exp(-3t)",
        residual: (run.report.dtau - 1.0 - 0.5 * (-3.0f64).exp()).abs(),
        tol: 1e-12,
    });
    cases.push(Case {
        name: "two_state main bound",
        residual: (-run.report.margins.main).max(0.0),
        tol: bounds::BOUND_SLACK,
    });

    let flat = |size| SystemSpec::Ring { size, potential: None };
    let ev = spectral::eigenvalues(&generator::build(&flat(4), db)?)?;
    cases.push(Case {
        name: "uniform ring M=4 spectrum",
        residual: spectrum_mismatch(&ev, &circulant(4, 1.0, 1.0)),
        tol: 1e-10,
    });
    let ev = spectral::eigenvalues(&generator::build(&flat(4), ControlPoint::new(1.0, 0.25))?)?;
    cases.push(Case {
        name: "uniform ring M=4 u=0.25 spectrum",
        residual: spectrum_mismatch(&ev, &circulant(4, 2.0, 1.0)),
        tol: 1e-10,
    });
    let ev = spectral::eigenvalues(&generator::build(&flat(16), ControlPoint::new(1.0, 0.1))?)?;
    cases.push(Case {
        name: "uniform ring M=16 u=0.1 spectrum",
        residual: spectrum_mismatch(&ev, &circulant(16, 2.6, 1.0)),
        tol: 1e-10,
    });
    let s = spectral::decompose(&generator::build(&flat(8), ControlPoint::new(1.0, 0.3))?)?;
    cases.push(Case {
        name: "uniform ring M=8 u=0.3 biorthonormality",
        residual: s.biorthonormality_residual(),
        tol: 1e-8,
    });

    // π ∝ exp(-x²) on the harmonic grid; the Gaussian tail beyond |x| = 5 is negligible.
    let spec = harmonic(128);
    let g = generator::build(&spec, db)?;
    let dx = 10.0 / 128.0;
    let xs = generator::grid_positions(128, [-5.0, 5.0]);
    let density_err = xs
        .iter()
        .zip(g.pi().iter())
        .map(|(x, p)| (p / dx - (-x * x).exp() / PI.sqrt()).abs())
        .fold(0.0, f64::max)
        * PI.sqrt();
    cases.push(Case {
        name: "harmonic grid density",
        residual: density_err,
        tol: 1e-3,
    });
    let g64 = spectral::gap(&generator::build(&harmonic(64), db)?)?;
    let g128 = spectral::gap(&g)?;
    cases.push(Case {
        name: "harmonic grid gap extrapolates to 2",
        residual: ((4.0 * g128 - g64) / 3.0 - 2.0).abs(),
        tol: 1e-5,
    });

    let cos_ring = SystemSpec::Ring {
        size: 8,
        potential: Some(PotentialSpec::Cosine { amplitude: 1.0 }),
    };
    let g = generator::build(&cos_ring, db)?;
    let p = Protocol::constant(db, 2.0, 8)?;
    let traj = evolve::propagate(&cos_ring, &p, &DensityState::new(0.0, g.pi().clone())?, 1)?;
    let drift = traj
        .states()
        .iter()
        .map(|s| (&s.rho - g.pi()).amax())
        .fold(0.0, f64::max);
    cases.push(Case {
        name: "stationary density is preserved",
        residual: drift,
        tol: 1e-10,
    });
    let spectra = RunSpectra::compute(&cos_ring, &p)?;
    cases.push(Case {
        name: "cosine ring detailed-balance eigenrelation",
        residual: spectral::check_db_relation(spectra.final_db(), g.pi()),
        tol: 1e-10,
    });
    Ok(cases)
}

/// Run the battery, writing one line per invariant. Returns whether all
/// invariants passed with tolerances multiplied by `tol_scale`.
pub fn run<W: Write>(mut out: W, tol_scale: f64) -> io::Result<bool> {
    let cases = match battery() {
        Ok(c) => c,
        Err(e) => {
            writeln!(out, "[FAIL] battery aborted: {e}")?;
            return Ok(false);
        }
    };
    let mut passed = 0;
    for c in &cases {
        let tol = c.tol * tol_scale;
        let ok = c.residual <= tol;
        passed += usize::from(ok);
        let tag = if ok { "PASS" } else { "FAIL" };
        writeln!(out, "[{tag}] {}: residual {:.3e} (tol {:.1e})", c.name, c.residual, tol)?;
    }
    writeln!(out, "selftest: {passed}/{} passed", cases.len())?;
    Ok(passed == cases.len())
}
