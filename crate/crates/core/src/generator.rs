//! Finite-state Fokker-Planck generators.
//!
//! A [`Generator`] holds the dense operator `L` of the master equation
//! `dρ/dt = -L ρ` together with its stationary distribution `π`. Column `i`
//! of `L` carries the outflow of state `i`: `L[i][i] = Σ_j R(i→j)` and
//! `L[j][i] = -R(i→j)`, so every column sums to zero.
//!
//! Every kind is built from a potential `W` with nearest-neighbour (or
//! single-flip) moves satisfying detailed balance against `π ∝ exp(-2W)`.
//! A nonzero control `u` then adds a uniform circulation around the ring
//! cycle, which leaves `π` untouched but breaks detailed balance.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest spin chain accepted; the dense state space is `2^N`.
pub const MAX_SPINS: usize = 16;

/// Smallest grid accepted for `fp_grid`.
pub const MIN_GRID: usize = 8;

const DB_RELATIVE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Periodic,
    Reflecting,
}

/// Potential `V(x)`; the generator at noise strength `γ` uses `W = V/γ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialSpec {
    /// `V(x) = Σ_k c_k x^k`, coefficients in ascending order.
    Polynomial { coefficients: Vec<f64> },
    /// `V(x) = barrier · (x² - 1)²`.
    DoubleWell { barrier: f64 },
    /// `V(x) = stiffness · x² / 2`.
    Harmonic { stiffness: f64 },
    /// `V(x) = amplitude · cos(x)`, natural on a ring of angles.
    Cosine { amplitude: f64 },
}

impl PotentialSpec {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            PotentialSpec::Polynomial { coefficients } => coefficients.iter().rev().fold(0.0, |acc, &c| acc * x + c),
            PotentialSpec::DoubleWell { barrier } => {
                let s = x * x - 1.0;
                barrier * s * s
            }
            PotentialSpec::Harmonic { stiffness } => 0.5 * stiffness * x * x,
            PotentialSpec::Cosine { amplitude } => amplitude * x.cos(),
        }
    }

    /// Whether `V → +∞` in both directions.
    pub fn is_confining(&self) -> bool {
        match self {
            PotentialSpec::Polynomial { coefficients } => {
                let Some(degree) = coefficients.iter().rposition(|&c| c != 0.0) else {
                    return false;
                };
                degree >= 2 && degree % 2 == 0 && coefficients[degree] > 0.0
            }
            PotentialSpec::DoubleWell { barrier } => *barrier > 0.0,
            PotentialSpec::Harmonic { stiffness } => *stiffness > 0.0,
            PotentialSpec::Cosine { .. } => false,
        }
    }
}

/// The four supported state-space kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSpec {
    /// Two states with rates `[R(0→1), R(1→0)]` at `γ = 1`.
    TwoState { rates: [f64; 2] },
    /// `size` sites on a cycle at angles `2πi/size`; flat when no potential is given.
    Ring {
        size: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        potential: Option<PotentialSpec>,
    },
    /// Cell-centred grid discretisation of a one-dimensional Fokker-Planck operator.
    FpGrid {
        size: usize,
        potential: PotentialSpec,
        boundary: Boundary,
        domain: [f64; 2],
    },
    /// Periodic Ising chain of `size` spins under Glauber single-flip dynamics.
    SpinRing {
        size: usize,
        coupling: f64,
        #[serde(default)]
        field: f64,
    },
}

impl SystemSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            SystemSpec::TwoState { .. } => "two_state",
            SystemSpec::Ring { .. } => "ring",
            SystemSpec::FpGrid { .. } => "fp_grid",
            SystemSpec::SpinRing { .. } => "spin_ring",
        }
    }

    /// Number of states `M`.
    pub fn num_states(&self) -> usize {
        match self {
            SystemSpec::TwoState { .. } => 2,
            SystemSpec::Ring { size, .. } | SystemSpec::FpGrid { size, .. } => *size,
            SystemSpec::SpinRing { size, .. } => 1usize << (*size).min(MAX_SPINS),
        }
    }

    /// Whether the state graph contains the designated cycle that carries flow.
    pub fn has_cycle(&self) -> bool {
        matches!(
            self,
            SystemSpec::Ring { .. }
                | SystemSpec::FpGrid {
                    boundary: Boundary::Periodic,
                    ..
                }
        )
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SystemSpec::TwoState { rates } => {
                if !rates.iter().all(|r| r.is_finite() && *r > 0.0) {
                    return Err(Error::InvalidSpec(format!(
                        "two_state rates must be positive and finite, got {rates:?}"
                    )));
                }
            }
            SystemSpec::Ring { size, potential } => {
                if *size < 3 {
                    return Err(Error::InvalidSpec(format!("ring size must be >= 3, got {size}")));
                }
                if let Some(p) = potential {
                    check_potential_values(p, &ring_positions(*size))?;
                }
            }
            SystemSpec::FpGrid {
                size,
                potential,
                boundary,
                domain,
            } => {
                if *size < MIN_GRID {
                    return Err(Error::InvalidSpec(format!(
                        "fp_grid size must be >= {MIN_GRID}, got {size}"
                    )));
                }
                let [lo, hi] = *domain;
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(Error::InvalidSpec(format!(
                        "fp_grid domain must satisfy x_lo < x_hi, got [{lo}, {hi}]"
                    )));
                }
                if *boundary == Boundary::Reflecting && !potential.is_confining() {
                    return Err(Error::BadPotential(format!(
                        "{potential:?} is not confining; reflecting grids need V -> +inf on both sides"
                    )));
                }
                check_potential_values(potential, &grid_positions(*size, *domain))?;
            }
            SystemSpec::SpinRing { size, coupling, field } => {
                if !(2..=MAX_SPINS).contains(size) {
                    return Err(Error::InvalidSpec(format!(
                        "spin_ring needs 2 <= N <= {MAX_SPINS} spins, got {size}"
                    )));
                }
                if !coupling.is_finite() || !field.is_finite() {
                    return Err(Error::InvalidSpec("spin_ring coupling and field must be finite".into()));
                }
            }
        }
        Ok(())
    }
}

fn check_potential_values(potential: &PotentialSpec, xs: &[f64]) -> Result<()> {
    if let PotentialSpec::Polynomial { coefficients } = potential {
        if coefficients.is_empty() {
            return Err(Error::BadPotential("polynomial without coefficients".into()));
        }
    }
    match xs.iter().find(|&&x| !potential.eval(x).is_finite()) {
        Some(x) => Err(Error::BadPotential(format!("V({x}) is not finite"))),
        None => Ok(()),
    }
}

/// Angles of the ring sites.
pub fn ring_positions(size: usize) -> Vec<f64> {
    (0..size).map(|i| 2.0 * PI * i as f64 / size as f64).collect()
}

/// Cell centres of a grid over `[x_lo, x_hi]`.
pub fn grid_positions(size: usize, domain: [f64; 2]) -> Vec<f64> {
    let dx = (domain[1] - domain[0]) / size as f64;
    (0..size).map(|i| domain[0] + (i as f64 + 0.5) * dx).collect()
}

/// Ising energy `E(s) = -J Σ s_i s_{i+1} - h Σ s_i` on a periodic chain; bit `i`
/// of `state` set means spin `i` is up.
pub fn spin_energy(state: usize, spins: usize, coupling: f64, field: f64) -> f64 {
    let spin = |i: usize| if state >> (i % spins) & 1 == 1 { 1.0 } else { -1.0 };
    let bonds: f64 = (0..spins).map(|i| spin(i) * spin(i + 1)).sum();
    let magnetisation: f64 = (0..spins).map(spin).sum();
    -coupling * bonds - field * magnetisation
}

/// Control parameters: noise strength `γ` and circulation amplitude `u`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlPoint {
    pub gamma: f64,
    #[serde(default)]
    pub u: f64,
}

impl ControlPoint {
    pub fn new(gamma: f64, u: f64) -> Self {
        Self { gamma, u }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::InvalidControl(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        if !self.u.is_finite() {
            return Err(Error::InvalidControl(format!("u must be finite, got {}", self.u)));
        }
        Ok(())
    }

    /// Bit-exact key for caches.
    pub fn key(&self) -> (u64, u64) {
        (self.gamma.to_bits(), self.u.to_bits())
    }
}

/// A validated rate operator with its stationary distribution.
#[derive(Debug, Clone)]
pub struct Generator {
    matrix: DMatrix<f64>,
    pi: DVector<f64>,
    control: ControlPoint,
    detailed_balance: bool,
    has_cycle: bool,
    kind: &'static str,
}

impl Generator {
    /// Assemble from a rate table `rates[(i, j)] = R(i→j)` (diagonal ignored).
    pub(crate) fn from_rates(
        rates: &DMatrix<f64>,
        pi: DVector<f64>,
        control: ControlPoint,
        has_cycle: bool,
        kind: &'static str,
    ) -> Self {
        let m = rates.nrows();
        let mut matrix = DMatrix::zeros(m, m);
        for i in 0..m {
            let mut out = 0.0;
            for j in 0..m {
                if i != j {
                    matrix[(j, i)] = -rates[(i, j)];
                    out += rates[(i, j)];
                }
            }
            matrix[(i, i)] = out;
        }
        let detailed_balance = pairwise_balanced(&matrix, &pi);
        Self {
            matrix,
            pi,
            control,
            detailed_balance,
            has_cycle,
            kind,
        }
    }

    /// Operator `L` in the convention `dρ/dt = -L ρ`.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Stationary distribution (cell probabilities summing to one).
    pub fn pi(&self) -> &DVector<f64> {
        &self.pi
    }

    pub fn control(&self) -> ControlPoint {
        self.control
    }

    pub fn is_detailed_balance(&self) -> bool {
        self.detailed_balance
    }

    pub fn size(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn kind(&self) -> &'static str {
        self.kind
    }

    /// Transition rate `R(from→to)`.
    pub fn rate(&self, from: usize, to: usize) -> f64 {
        -self.matrix[(to, from)]
    }

    /// Largest absolute column sum of `L`.
    pub fn max_column_sum(&self) -> f64 {
        self.matrix.column_iter().map(|c| c.sum().abs()).fold(0.0, f64::max)
    }

    /// `‖L π‖∞`.
    pub fn stationarity_residual(&self) -> f64 {
        (&self.matrix * &self.pi).amax()
    }

    /// Infinity norm of `L`.
    pub fn norm_inf(&self) -> f64 {
        self.matrix
            .row_iter()
            .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

fn pairwise_balanced(matrix: &DMatrix<f64>, pi: &DVector<f64>) -> bool {
    let m = matrix.nrows();
    for i in 0..m {
        for j in (i + 1)..m {
            let forward = -matrix[(j, i)] * pi[i];
            let backward = -matrix[(i, j)] * pi[j];
            let scale = forward.abs().max(backward.abs());
            if (forward - backward).abs() > DB_RELATIVE_TOL * scale {
                return false;
            }
        }
    }
    true
}

/// Normalised `exp(-2 W)` computed with the minimum shifted out.
fn boltzmann(w: &[f64]) -> DVector<f64> {
    let w_min = w.iter().copied().fold(f64::INFINITY, f64::min);
    let mut pi = DVector::from_iterator(w.len(), w.iter().map(|&wi| (-2.0 * (wi - w_min)).exp()));
    let z = pi.sum();
    pi /= z;
    pi
}

/// Nearest-neighbour rates `prefactor · exp(-(W_j - W_i))` on a chain or cycle.
fn neighbour_rates(w: &[f64], prefactor: f64, periodic: bool) -> DMatrix<f64> {
    let m = w.len();
    let mut rates = DMatrix::zeros(m, m);
    for i in 0..m {
        let neighbours = [(i + 1) % m, (i + m - 1) % m];
        for (k, &j) in neighbours.iter().enumerate() {
            let wraps = (k == 0 && i == m - 1) || (k == 1 && i == 0);
            if wraps && !periodic {
                continue;
            }
            rates[(i, j)] = prefactor * (-(w[j] - w[i])).exp();
        }
    }
    rates
}

/// Build `L_{γ,u}` for a system: the detailed-balance part at `γ`, then the
/// circulation for `u` through [`add_flow`].
pub fn build(spec: &SystemSpec, control: ControlPoint) -> Result<Generator> {
    spec.validate()?;
    control.validate()?;
    let gamma = control.gamma;
    let kind = spec.kind_name();
    let base_control = ControlPoint::new(gamma, 0.0);

    let (rates, pi) = match spec {
        SystemSpec::TwoState { rates } => {
            // R(i→j) = k·exp(-(W_j - W_i)) reproduces `rates` at γ = 1.
            let [a, b] = *rates;
            let w = [0.0, 0.5 * (b / a).ln() / gamma];
            (neighbour_rates(&w, (a * b).sqrt(), false), boltzmann(&w))
        }
        SystemSpec::Ring { size, potential } => {
            let w: Vec<f64> = match potential {
                Some(p) => ring_positions(*size).iter().map(|&x| p.eval(x) / gamma).collect(),
                None => vec![0.0; *size],
            };
            (neighbour_rates(&w, 1.0, true), boltzmann(&w))
        }
        SystemSpec::FpGrid {
            size,
            potential,
            boundary,
            domain,
        } => {
            let xs = grid_positions(*size, *domain);
            let dx = (domain[1] - domain[0]) / *size as f64;
            let w: Vec<f64> = xs.iter().map(|&x| potential.eval(x) / gamma).collect();
            let periodic = *boundary == Boundary::Periodic;
            (neighbour_rates(&w, dx.powi(-2), periodic), boltzmann(&w))
        }
        SystemSpec::SpinRing { size, coupling, field } => {
            let n = *size;
            let m = 1usize << n;
            let energies: Vec<f64> = (0..m).map(|s| spin_energy(s, n, *coupling, *field)).collect();
            let mut rates = DMatrix::zeros(m, m);
            for s in 0..m {
                for i in 0..n {
                    let t = s ^ (1 << i);
                    rates[(s, t)] = glauber_rate((energies[t] - energies[s]) / gamma);
                }
            }
            let w: Vec<f64> = energies.iter().map(|e| 0.5 * e / gamma).collect();
            (rates, boltzmann(&w))
        }
    };

    let generator = Generator::from_rates(&rates, pi, base_control, spec.has_cycle(), kind);
    add_flow(&generator, control.u)
}

/// Heat-bath flip rate `1 / (1 + exp(ΔE/γ))` without cancellation.
fn glauber_rate(scaled_delta: f64) -> f64 {
    if scaled_delta > 0.0 {
        let e = (-scaled_delta).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + scaled_delta.exp())
    }
}

/// Add a stationary circulation of strength `u` around the cycle `0 → 1 → … → M-1 → 0`
/// by raising each forward rate by `u / π_i`. The stationary distribution is unchanged.
pub fn add_flow(gen: &Generator, u: f64) -> Result<Generator> {
    if !u.is_finite() {
        return Err(Error::InvalidControl(format!("u must be finite, got {u}")));
    }
    if u == 0.0 {
        return Ok(gen.clone());
    }
    if !gen.has_cycle {
        return Err(Error::FlowUnsupported(gen.kind));
    }
    let m = gen.size();
    let mut matrix = gen.matrix.clone();
    for i in 0..m {
        let j = (i + 1) % m;
        let increment = u / gen.pi[i];
        let rate = gen.rate(i, j) + increment;
        if rate < 0.0 {
            return Err(Error::FlowInfeasible {
                u,
                from: i,
                to: j,
                rate,
            });
        }
        matrix[(j, i)] -= increment;
        matrix[(i, i)] += increment;
    }
    let detailed_balance = pairwise_balanced(&matrix, &gen.pi);
    Ok(Generator {
        matrix,
        pi: gen.pi.clone(),
        control: ControlPoint::new(gen.control.gamma, gen.control.u + u),
        detailed_balance,
        has_cycle: gen.has_cycle,
        kind: gen.kind,
    })
}

/// Solve for the null vector of `L` directly, independent of the analytic `π`.
pub fn stationary(gen: &Generator) -> Result<DVector<f64>> {
    let m = gen.size();
    let l = gen.matrix();

    let mut sv: Vec<f64> = l.clone().singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let threshold = 10.0 * f64::EPSILON * m as f64 * sv[0];
    if sv[m - 2] <= threshold {
        return Err(Error::NonUniqueStationary { second: sv[m - 2] });
    }

    // Columns of L sum to zero, so one row is redundant: swap it for normalisation.
    let mut bordered = l.clone();
    bordered.row_mut(m - 1).fill(1.0);
    let mut rhs = DVector::zeros(m);
    rhs[m - 1] = 1.0;
    let mut x = bordered
        .lu()
        .solve(&rhs)
        .ok_or(Error::NonUniqueStationary { second: sv[m - 2] })?;
    let total = x.sum();
    x /= total;
    Ok(x)
}
