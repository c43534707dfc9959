use anneal_bound::bounds;
use anneal_bound::evolve::{self, DensityState};
use anneal_bound::generator::{self, Boundary, ControlPoint, PotentialSpec, SystemSpec};
use anneal_bound::protocol::Protocol;
use anneal_bound::spectral;
use nalgebra::DVector;

fn grid(size: usize, potential: PotentialSpec, domain: [f64; 2]) -> SystemSpec {
    SystemSpec::FpGrid {
        size,
        potential,
        boundary: Boundary::Reflecting,
        domain,
    }
}

/// Composite Simpson rule with `n` (even) panels.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let inner: f64 = (1..n)
        .map(|k| f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 })
        .sum();
    (f(a) + f(b) + inner) * h / 3.0
}

fn density_error(potential: PotentialSpec, gamma: f64, size: usize, domain: [f64; 2]) -> f64 {
    let spec = grid(size, potential.clone(), domain);
    let g = generator::build(&spec, ControlPoint::new(gamma, 0.0)).unwrap();
    let weight = |x: f64| (-2.0 * potential.eval(x) / gamma).exp();
    let z = simpson(weight, domain[0], domain[1], 20_000);
    let dx = (domain[1] - domain[0]) / size as f64;
    let xs = generator::grid_positions(size, domain);
    let peak = xs.iter().map(|&x| weight(x) / z).fold(0.0, f64::max);
    xs.iter()
        .zip(g.pi().iter())
        .map(|(&x, p)| (p / dx - weight(x) / z).abs())
        .fold(0.0, f64::max)
        / peak
}

#[test]
fn harmonic_grid_density_matches_quadrature() {
    let err = density_error(PotentialSpec::Harmonic { stiffness: 1.0 }, 1.0, 128, [-5.0, 5.0]);
    assert!(err <= 1e-3, "{err}");
}

#[test]
fn double_well_grid_density_matches_quadrature() {
    let err = density_error(PotentialSpec::DoubleWell { barrier: 1.0 }, 0.7, 128, [-2.5, 2.5]);
    assert!(err <= 1e-3, "{err}");
}

#[test]
fn harmonic_gap_converges_to_continuum() {
    // Continuum relaxation rate for V = x²/2 at γ = 1 is 2; the scheme is second order.
    let gap = |m: usize| {
        let g = generator::build(
            &grid(m, PotentialSpec::Harmonic { stiffness: 1.0 }, [-5.0, 5.0]),
            ControlPoint::new(1.0, 0.0),
        )
        .unwrap();
        spectral::gap(&g).unwrap()
    };
    let (g64, g128, g256) = (gap(64), gap(128), gap(256));
    assert!((2.0 - g64) > (2.0 - g128) && (2.0 - g128) > (2.0 - g256) && g256 < 2.0);
    let ratio = (2.0 - g64) / (2.0 - g128);
    assert!((ratio - 4.0).abs() < 0.1, "{ratio}");
    let extrapolated = (4.0 * g256 - g128) / 3.0;
    assert!((extrapolated - 2.0).abs() < 1e-5, "{extrapolated}");
}

#[test]
fn double_well_ramp_conserves_mass() {
    let spec = grid(128, PotentialSpec::DoubleWell { barrier: 1.0 }, [-2.5, 2.5]);
    let p = Protocol::linear(2.0, 0.5, 0.0, 5.0, 50).unwrap();
    let g0 = generator::build(&spec, p.at(0.0).unwrap()).unwrap();
    let traj = evolve::propagate(&spec, &p, &DensityState::new(0.0, g0.pi().clone()).unwrap(), 1).unwrap();
    assert_eq!(traj.states().len(), 51);
    assert!(traj.max_conservation_error() <= 1e-10);
    assert!(traj.clip_total() <= 1e-9);
    assert!(traj.last().rho.min() >= 0.0);
}

#[test]
fn displaced_gaussian_relaxation_respects_speed_limit() {
    let m = 128;
    let spec = grid(m, PotentialSpec::Harmonic { stiffness: 1.0 }, [-5.0, 5.0]);
    let g = generator::build(&spec, ControlPoint::new(1.0, 0.0)).unwrap();
    let xs = generator::grid_positions(m, [-5.0, 5.0]);
    let mut rho = DVector::from_iterator(m, xs.iter().map(|x| (-(x - 2.0) * (x - 2.0)).exp()));
    rho /= rho.sum();
    let rho0 = DensityState::new(0.0, rho).unwrap();
    let d0 = evolve::fixed_overlap(&rho0.rho, &rho0.rho, g.pi());
    for fraction in [0.5, 0.1, 0.01] {
        let target = 1.0 + fraction * (d0 - 1.0);
        let relax = evolve::relax_fixed(&g, &rho0, target, 10.0).unwrap();
        let tau_min = bounds::csl_tau_min(&g, &rho0.rho, &relax.rho_star).unwrap();
        assert!(relax.t_star >= tau_min * (1.0 - 1e-6), "{} < {tau_min}", relax.t_star);
        // The upper bound holds too for a fixed detailed-balance operator.
        let dstar = evolve::fixed_overlap(&rho0.rho, &relax.rho_star, g.pi());
        let tau_max = bounds::tau_max(d0, dstar, spectral::gap(&g).unwrap()).unwrap();
        assert!(relax.t_star <= tau_max * (1.0 + 1e-9) + 10.0 / 1024.0 / 16.0);
    }
}

#[test]
fn spin_pair_relaxation_has_glauber_gap() {
    // Two spins, J = 1, h = 0, against the 4×4 Glauber rate matrix written out by hand.
    let gamma = 1.5f64;
    let w = |de: f64| 1.0 / (1.0 + (de / gamma).exp());
    // States 0=↓↓, 1=↑↓, 2=↓↑, 3=↑↑; E = -2J s1 s2 for N = 2.
    let e = [-2.0, 2.0, 2.0, -2.0];
    let flips = [(0, 1), (0, 2), (1, 3), (2, 3)];
    let mut l = nalgebra::DMatrix::<f64>::zeros(4, 4);
    for (a, b) in flips {
        for (s, t) in [(a, b), (b, a)] {
            let r = w(e[t] - e[s]);
            l[(s, s)] += r;
            l[(t, s)] -= r;
        }
    }
    let mut oracle: Vec<f64> = l.eigenvalues().unwrap().iter().copied().collect();
    oracle.sort_by(f64::total_cmp);
    let g = generator::build(
        &SystemSpec::SpinRing {
            size: 2,
            coupling: 1.0,
            field: 0.0,
        },
        ControlPoint::new(gamma, 0.0),
    )
    .unwrap();
    assert!((spectral::gap(&g).unwrap() - oracle[1]).abs() < 1e-12);
}
