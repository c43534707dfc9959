//! Biorthogonal eigendecomposition of generators.
//!
//! Right eigenfunctions `φ_k` satisfy `L φ_k = λ_k φ_k`, left ones `ψ_k`
//! satisfy `Lᵀ ψ_k = λ_k ψ_k`, and the pair families obey
//! `Σ_x ψ_k(x) φ_l(x) = δ_kl` together with the completeness relation
//! `Σ_n φ_n(x) ψ_n(y) = δ_xy`.
//!
//! Both routes diagonalise the π-balanced operator `P^{-1/2} L P^{1/2}`
//! (with `P = diag π`). Under detailed balance that operator is symmetric
//! and a symmetric solver gives an orthonormal basis, so `φ_k = ψ_k π`
//! holds to rounding. Otherwise the general real eigensolver is used and
//! the left family comes from inverting the right eigenvector matrix.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::generator::{self, ControlPoint, Generator, SystemSpec};

/// Eigenvector matrices with condition number above this are treated as defective.
pub const MAX_CONDITION: f64 = 1e8;

/// Ordered spectrum with biorthonormal eigenfunction families.
#[derive(Debug, Clone)]
pub struct Spectrum {
    eigenvalues: Vec<Complex64>,
    right: DMatrix<Complex64>,
    left: DMatrix<Complex64>,
    condition: f64,
}

impl Spectrum {
    pub fn eigenvalues(&self) -> &[Complex64] {
        &self.eigenvalues
    }

    /// Rows are the right eigenfunctions `φ_k`.
    pub fn right(&self) -> &DMatrix<Complex64> {
        &self.right
    }

    /// Rows are the left eigenfunctions `ψ_k`.
    pub fn left(&self) -> &DMatrix<Complex64> {
        &self.left
    }

    /// `Re λ₁`.
    pub fn gap(&self) -> f64 {
        self.eigenvalues.get(1).map_or(f64::NAN, |l| l.re)
    }

    pub fn size(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Condition number of the eigenvector matrix in the π-balanced frame.
    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// `max_{k,l} |Σ_x ψ_k(x) φ_l(x) - δ_kl|`.
    pub fn biorthonormality_residual(&self) -> f64 {
        identity_residual(&(&self.left * self.right.transpose()))
    }

    /// `max_{x,y} |Σ_n φ_n(x) ψ_n(y) - δ_xy|`.
    pub fn completeness_residual(&self) -> f64 {
        identity_residual(&(self.right.transpose() * &self.left))
    }

    /// Largest distance from an eigenvalue to the nearest conjugate of another.
    pub fn conjugate_pairing_mismatch(&self) -> f64 {
        self.eigenvalues
            .iter()
            .map(|l| {
                self.eigenvalues
                    .iter()
                    .map(|m| (l - m.conj()).norm())
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    }
}

pub fn identity_residual(m: &DMatrix<Complex64>) -> f64 {
    let mut worst: f64 = 0.0;
    for ((i, j), v) in m
        .iter()
        .enumerate()
        .map(|(idx, v)| ((idx % m.nrows(), idx / m.nrows()), v))
    {
        let target = if i == j { 1.0 } else { 0.0 };
        worst = worst.max((v - target).norm());
    }
    worst
}

/// Order by real part, then imaginary part inside clusters of equal real part.
fn canonical_order(values: &[Complex64], tol: f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].re.total_cmp(&values[b].re).then(a.cmp(&b)));
    let mut out = Vec::with_capacity(idx.len());
    let mut start = 0;
    while start < idx.len() {
        let anchor = values[idx[start]].re;
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]].re - anchor <= tol {
            end += 1;
        }
        let mut cluster = idx[start..end].to_vec();
        cluster.sort_by(|&a, &b| match values[a].im.total_cmp(&values[b].im) {
            Ordering::Equal => a.cmp(&b),
            o => o,
        });
        out.extend(cluster);
        start = end;
    }
    out
}

fn ordering_tolerance(gen: &Generator) -> f64 {
    1e-10 * gen.norm_inf().max(1.0)
}

/// `P^{-1/2} L P^{1/2}`.
fn balanced(gen: &Generator) -> (DMatrix<f64>, DVector<f64>) {
    let sqrt_pi = gen.pi().map(f64::sqrt);
    let m = gen.size();
    let l = gen.matrix();
    let h = DMatrix::from_fn(m, m, |i, j| l[(i, j)] * sqrt_pi[j] / sqrt_pi[i]);
    (h, sqrt_pi)
}

fn symmetric_part(h: &DMatrix<f64>) -> DMatrix<f64> {
    (h + h.transpose()) * 0.5
}

fn to_faer(m: &DMatrix<f64>) -> faer::Mat<f64> {
    faer::Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Index of the first entry whose magnitude is within rounding of the maximum.
fn dominant_entry(v: impl Iterator<Item = f64> + Clone) -> usize {
    let max = v.clone().fold(0.0, f64::max);
    v.into_iter().position(|a| a >= max * (1.0 - 1e-9)).unwrap_or(0)
}

/// Sorted eigenvalues of `L` without eigenvectors.
pub fn eigenvalues(gen: &Generator) -> Result<Vec<Complex64>> {
    let (h, _) = balanced(gen);
    let raw: Vec<Complex64> = if gen.is_detailed_balance() {
        SymmetricEigen::new(symmetric_part(&h))
            .eigenvalues
            .iter()
            .map(|&v| Complex64::new(v, 0.0))
            .collect()
    } else {
        to_faer(&h)
            .eigenvalues()
            .map_err(|e| Error::Eigensolver(format!("{e:?}")))?
    };
    let order = canonical_order(&raw, ordering_tolerance(gen));
    Ok(order.into_iter().map(|i| raw[i]).collect())
}

/// Spectral gap `Re λ₁` of a generator.
pub fn gap(gen: &Generator) -> Result<f64> {
    Ok(eigenvalues(gen)?[1].re)
}

/// Full biorthonormal decomposition with the canonical normalisation
/// `φ₀ = π`, `ψ₀ = 1`, `Σ_x ψ_k φ_k = 1`, and the largest-magnitude entry
/// of each `φ_k` real and positive.
pub fn decompose(gen: &Generator) -> Result<Spectrum> {
    let m = gen.size();
    let (h, sqrt_pi) = balanced(gen);
    let tol = ordering_tolerance(gen);

    // Columns of `v` are eigenvectors of the balanced operator.
    let (raw_values, v, condition): (Vec<Complex64>, DMatrix<Complex64>, f64) = if gen.is_detailed_balance() {
        let eig = SymmetricEigen::new(symmetric_part(&h));
        let values = eig.eigenvalues.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        (values, eig.eigenvectors.map(|x| Complex64::new(x, 0.0)), 1.0)
    } else {
        let evd = to_faer(&h).eigen().map_err(|e| Error::Eigensolver(format!("{e:?}")))?;
        let s = evd.S().column_vector();
        let u = evd.U();
        let values = (0..m).map(|k| s[k]).collect();
        let v = DMatrix::from_fn(m, m, |i, j| u[(i, j)]);
        (values, v, f64::NAN)
    };

    let order = canonical_order(&raw_values, tol);
    let eigenvalues: Vec<Complex64> = order.iter().map(|&k| raw_values[k]).collect();

    let mut basis = DMatrix::<Complex64>::zeros(m, m);
    for (k, &src) in order.iter().enumerate() {
        let mut col = v.column(src).into_owned();
        let norm = col.norm();
        col /= Complex64::new(norm, 0.0);
        let pivot = dominant_entry(col.iter().zip(sqrt_pi.iter()).map(|(c, s)| (c * s).norm()));
        let phase = col[pivot] / col[pivot].norm();
        col /= phase;
        basis.set_column(k, &col);
    }

    let (inverse, condition) = if gen.is_detailed_balance() {
        (basis.adjoint(), condition)
    } else {
        let sv = basis.clone().singular_values();
        let smax = sv.max();
        let smin = sv.min();
        let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if !(condition <= MAX_CONDITION) {
            return Err(Error::DefectiveSpectrum { condition });
        }
        let inverse = basis
            .clone()
            .try_inverse()
            .ok_or(Error::DefectiveSpectrum { condition })?;
        (inverse, condition)
    };

    let mut right = DMatrix::from_fn(m, m, |k, x| basis[(x, k)] * sqrt_pi[x]);
    let mut left = DMatrix::from_fn(m, m, |k, x| inverse[(k, x)] / sqrt_pi[x]);
    for x in 0..m {
        right[(0, x)] = Complex64::new(gen.pi()[x], 0.0);
        left[(0, x)] = Complex64::new(1.0, 0.0);
    }

    Ok(Spectrum {
        eigenvalues,
        right,
        left,
        condition,
    })
}

/// `max_{k,x} |φ_k(x) - ψ_k(x) π(x)|`; small exactly when the pairs are
/// related through the stationary distribution, as under detailed balance.
pub fn check_db_relation(spec: &Spectrum, pi: &DVector<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..spec.size() {
        for x in 0..pi.len() {
            let diff = spec.right[(k, x)] - spec.left[(k, x)] * pi[x];
            worst = worst.max(diff.norm());
        }
    }
    worst
}

/// The imaginary-time Schrödinger form `H_F = P^{-1/2} L P^{1/2}` of a
/// detailed-balance generator.
#[derive(Debug, Clone)]
pub struct SymmetrizedOperator {
    matrix: DMatrix<f64>,
    sqrt_pi: DVector<f64>,
}

impl SymmetrizedOperator {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Elementwise `√π`, the expected ground state.
    pub fn sqrt_pi(&self) -> &DVector<f64> {
        &self.sqrt_pi
    }

    /// `max |H - Hᵀ|`.
    pub fn asymmetry(&self) -> f64 {
        (&self.matrix - self.matrix.transpose()).amax()
    }

    /// Ascending eigenvalues.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut vals: Vec<f64> = SymmetricEigen::new(symmetric_part(&self.matrix))
            .eigenvalues
            .iter()
            .copied()
            .collect();
        vals.sort_by(f64::total_cmp);
        vals
    }

    /// Unit eigenvector of the smallest eigenvalue, sign chosen positive-sum.
    pub fn ground_vector(&self) -> DVector<f64> {
        let eig = SymmetricEigen::new(symmetric_part(&self.matrix));
        let idx = eig.eigenvalues.imin();
        let mut g = eig.eigenvectors.column(idx).into_owned();
        if g.sum() < 0.0 {
            g = -g;
        }
        g
    }
}

pub fn symmetrize(gen: &Generator) -> Result<SymmetrizedOperator> {
    if !gen.is_detailed_balance() {
        return Err(Error::RequiresDetailedBalance);
    }
    if let Some(index) = gen.pi().iter().position(|&p| p <= 0.0) {
        return Err(Error::SingularStationary { index });
    }
    let (matrix, sqrt_pi) = balanced(gen);
    Ok(SymmetrizedOperator { matrix, sqrt_pi })
}

/// One entry of a gap sweep.
#[derive(Debug)]
pub struct GapPoint {
    pub u: f64,
    pub gap: Result<f64>,
}

/// `Re λ₁^{γ,u}` for each `u`, evaluated in parallel; order follows `u_values`.
pub fn gap_sweep(spec: &SystemSpec, gamma: f64, u_values: &[f64]) -> Vec<GapPoint> {
    u_values
        .par_iter()
        .map(|&u| GapPoint {
            u,
            gap: generator::build(spec, ControlPoint::new(gamma, u)).and_then(|g| gap(&g)),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{build, PotentialSpec};
    use std::f64::consts::PI;

    fn ring(m: usize, potential: Option<PotentialSpec>, u: f64) -> Generator {
        build(&SystemSpec::Ring { size: m, potential }, ControlPoint::new(1.0, u)).unwrap()
    }

    fn two_state() -> Generator {
        build(&SystemSpec::TwoState { rates: [1.0, 2.0] }, ControlPoint::new(1.0, 0.0)).unwrap()
    }

    #[test]
    fn two_state_spectrum() {
        let s = decompose(&two_state()).unwrap();
        assert!(s.eigenvalues()[0].norm() < 1e-14);
        assert!((s.eigenvalues()[1] - Complex64::new(3.0, 0.0)).norm() < 1e-14);
        assert!((s.gap() - 3.0).abs() < 1e-14);
        assert!(s.biorthonormality_residual() < 1e-14);
        assert!(s.completeness_residual() < 1e-14);
    }

    #[test]
    fn flat_ring_matches_circulant() {
        let s = decompose(&ring(4, None, 0.0)).unwrap();
        let expected = [0.0, 2.0, 2.0, 4.0];
        for (l, e) in s.eigenvalues().iter().zip(expected) {
            assert!((l - Complex64::new(e, 0.0)).norm() < 1e-12, "{l} vs {e}");
        }
        assert!((s.gap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn flowing_ring_has_conjugate_pair() {
        let s = decompose(&ring(4, None, 0.25)).unwrap();
        let ev = s.eigenvalues();
        assert!(ev[0].norm() < 1e-12);
        assert!((ev[1] - Complex64::new(3.0, -1.0)).norm() < 1e-12);
        assert!((ev[2] - Complex64::new(3.0, 1.0)).norm() < 1e-12);
        assert!((ev[3] - Complex64::new(6.0, 0.0)).norm() < 1e-12);
        assert!((s.gap() - 3.0).abs() < 1e-12);
        assert!(s.conjugate_pairing_mismatch() < 1e-10);
        assert!(s.biorthonormality_residual() < 1e-10);
    }

    #[test]
    fn normalisation_conventions() {
        let g = ring(8, Some(PotentialSpec::Cosine { amplitude: 1.0 }), 0.1);
        let s = decompose(&g).unwrap();
        for x in 0..8 {
            assert_eq!(s.right()[(0, x)].re, g.pi()[x]);
            assert_eq!(s.left()[(0, x)].re, 1.0);
        }
        for k in 0..8 {
            let row: Vec<Complex64> = s.right().row(k).iter().copied().collect();
            let pivot = dominant_entry(row.iter().map(|c| c.norm()));
            assert!(row[pivot].im.abs() < 1e-12 && row[pivot].re > 0.0);
            let pair: Complex64 = (0..8).map(|x| s.left()[(k, x)] * s.right()[(k, x)]).sum();
            assert!((pair - 1.0).norm() < 1e-10);
        }
    }

    #[test]
    fn db_relation_holds_only_with_detailed_balance() {
        let g = two_state();
        let s = decompose(&g).unwrap();
        assert!(check_db_relation(&s, g.pi()) <= 1e-12);

        let cos = ring(16, Some(PotentialSpec::Cosine { amplitude: 1.0 }), 0.0);
        let s = decompose(&cos).unwrap();
        assert!(check_db_relation(&s, cos.pi()) <= 1e-10);

        let g = ring(4, None, 0.25);
        let s = decompose(&g).unwrap();
        assert!(check_db_relation(&s, g.pi()) > 0.1);
    }

    #[test]
    fn symmetrize_requires_detailed_balance() {
        assert!(matches!(
            symmetrize(&ring(4, None, 0.25)),
            Err(Error::RequiresDetailedBalance)
        ));
    }

    #[test]
    fn symmetrized_two_state_keeps_spectrum() {
        let h = symmetrize(&two_state()).unwrap();
        let vals = h.eigenvalues();
        assert!(vals[0].abs() < 1e-14);
        assert!((vals[1] - 3.0).abs() < 1e-14);
        assert!(h.asymmetry() < 1e-15);
        assert!((h.matrix() * h.sqrt_pi()).amax() < 1e-14);
    }

    #[test]
    fn ordering_breaks_ties_by_imaginary_part() {
        let vals = [
            Complex64::new(1.0, 2.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(1.0 + 1e-15, -2.0),
            Complex64::new(0.5, 0.0),
        ];
        assert_eq!(canonical_order(&vals, 1e-10), vec![1, 3, 2, 0]);
    }

    #[test]
    fn sweep_on_flat_ring() {
        let spec = SystemSpec::Ring {
            size: 4,
            potential: None,
        };
        let pts = gap_sweep(&spec, 1.0, &[0.0, 0.25, -0.3]);
        assert!((pts[0].gap.as_ref().unwrap() - 2.0).abs() < 1e-12);
        assert!((pts[1].gap.as_ref().unwrap() - 3.0).abs() < 1e-12);
        assert!(matches!(pts[2].gap, Err(Error::FlowInfeasible { .. })));
    }

    #[test]
    fn sweep_zero_entry_matches_decompose() {
        let spec = SystemSpec::Ring {
            size: 12,
            potential: Some(PotentialSpec::Cosine { amplitude: 0.7 }),
        };
        let g = build(&spec, ControlPoint::new(1.0, 0.0)).unwrap();
        let pts = gap_sweep(&spec, 1.0, &[0.0]);
        assert_eq!(*pts[0].gap.as_ref().unwrap(), decompose(&g).unwrap().gap());
    }

    #[test]
    fn larger_flowing_ring_matches_circulant_formula() {
        // forward a = 1 + u/π, backward b = 1 on a uniform ring.
        let m = 9;
        let u = 0.05;
        let a = 1.0 + u * m as f64;
        let b = 1.0;
        let s = decompose(&ring(m, None, u)).unwrap();
        let expected: Vec<Complex64> = (0..m)
            .map(|k| {
                let th = 2.0 * PI * k as f64 / m as f64;
                Complex64::new(a + b, 0.0) - a * Complex64::from_polar(1.0, -th) - b * Complex64::from_polar(1.0, th)
            })
            .collect();
        for e in &expected {
            let nearest = s
                .eigenvalues()
                .iter()
                .map(|l| (l - e).norm())
                .fold(f64::INFINITY, f64::min);
            assert!(nearest < 1e-10, "{e} missing");
        }
        assert!(s.eigenvalues().windows(2).all(|w| w[1].re >= w[0].re - 1e-10));
    }
}
