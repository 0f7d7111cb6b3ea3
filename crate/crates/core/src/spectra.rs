//! Singular spectra of shifted linearizations, the symmetrized ESD `F_n(z, x, r)`,
//! Stieltjes transforms and partial traces of the resolvent of `V(z, r)`.
//!
//! One Hermitian eigendecomposition of `V` is done per `(trial, z)`; everything that
//! depends on the spectral parameter `w` is then evaluated from the cached eigenpairs
//! in `O(nm)` per point.

use std::sync::Once;

use faer::linalg::solvers::DenseSolveCore;
use faer::{c64, Mat, Side};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linearization::{hermitize, DenseMatrix, Hermitization, ShiftedMatrix};

/// Largest `nm` for which full eigenvectors and explicit resolvents are kept.
pub const DIAGNOSTIC_MAX_NM: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectraError {
    #[error("eigensolver failed: {0}")]
    Eigen(String),
    #[error("spectral parameter must lie in the upper half-plane, got Im w = {0}")]
    NotUpperHalfPlane(f64),
    #[error("block index {alpha} outside 1..={max}")]
    BlockIndex { alpha: usize, max: usize },
    #[error("spectrum was computed without block weights")]
    MissingBlockWeights,
    #[error("spectrum was computed without eigenvectors")]
    MissingEigenvectors,
    #[error("explicit resolvent diagnostics are limited to dimension {max}, got {dim}")]
    TooLarge { dim: usize, max: usize },
    #[error("row index {index} out of range for dimension {dim}")]
    Index { index: usize, dim: usize },
    #[error("descent factor must be >= 1, got {0}")]
    DescentFactor(f64),
}

fn sequential_linalg() {
    static INIT: Once = Once::new();
    // single-threaded eigensolves keep results bit-identical across worker counts
    INIT.call_once(|| faer::set_global_parallelism(faer::Par::Seq));
}

fn check_upper(w: c64) -> Result<(), SpectraError> {
    if w.im > 0.0 {
        Ok(())
    } else {
        Err(SpectraError::NotUpperHalfPlane(w.im))
    }
}

/// How much eigen-data to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumDetail {
    /// Eigenvalues only: enough for `F_n`, `m_n` and the log-potential.
    Values,
    /// Adds per-block eigenvector mass for partial traces.
    BlockWeights,
    /// Adds full eigenvectors (only for `nm <= DIAGNOSTIC_MAX_NM`).
    Diagnostic,
}

#[derive(Debug, Clone)]
pub struct SingularSpectrum {
    pub z: c64,
    pub r: f64,
    n: usize,
    m: usize,
    /// `s_1 >= ... >= s_nm >= 0`.
    values: Vec<f64>,
    /// Eigenvalues of `V`, ascending, length `2nm`.
    eigenvalues: Vec<f64>,
    /// Row-major `2nm x 2m`: entry `(k, a)` is the squared mass of eigenvector `k` on block `a`.
    block_weights: Option<Vec<f64>>,
    eigenvectors: Option<DenseMatrix>,
}

impl SingularSpectrum {
    /// Spectrum from explicit singular values, without eigenvector data.
    pub fn from_values(z: c64, n: usize, m: usize, mut values: Vec<f64>) -> Self {
        values.sort_by(|a, b| b.total_cmp(a));
        let mut eigenvalues: Vec<f64> = values.iter().map(|s| -s).chain(values.iter().copied()).collect();
        eigenvalues.sort_by(f64::total_cmp);
        SingularSpectrum { z, r: 0.0, n, m, values, eigenvalues, block_weights: None, eigenvectors: None }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn has_block_weights(&self) -> bool {
        self.block_weights.is_some()
    }

    /// Aggregated squared eigenvector mass of eigenpair `k` on block `alpha` (1-based).
    pub fn block_weight(&self, k: usize, alpha: usize) -> Option<f64> {
        let blocks = 2 * self.m;
        if alpha < 1 || alpha > blocks {
            return None;
        }
        self.block_weights.as_ref().and_then(|bw| bw.get(k * blocks + alpha - 1).copied())
    }

    pub fn s_max(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }

    pub fn s_min(&self) -> f64 {
        self.values.last().copied().unwrap_or(0.0)
    }

    /// Sorted symmetrized atoms `{-s_j} U {s_j}`.
    pub fn symmetrized_atoms(&self) -> Vec<f64> {
        let mut atoms: Vec<f64> = self.values.iter().map(|s| -s).chain(self.values.iter().copied()).collect();
        atoms.sort_by(f64::total_cmp);
        atoms
    }

    /// `F_n(z, x)`: fraction of the `2nm` symmetrized atoms that are `<= x`.
    pub fn esd_cdf(&self, x: f64) -> f64 {
        let total = 2 * self.values.len();
        if total == 0 {
            return 0.0;
        }
        // values are descending; count s_j <= x and -s_j <= x
        let pos = self.values.iter().filter(|&&s| s <= x).count();
        let neg = self.values.iter().filter(|&&s| -s <= x).count();
        (pos + neg) as f64 / total as f64
    }

    /// Left limit `F_n(z, x^-)`.
    pub fn esd_cdf_left(&self, x: f64) -> f64 {
        let total = 2 * self.values.len();
        if total == 0 {
            return 0.0;
        }
        let pos = self.values.iter().filter(|&&s| s < x).count();
        let neg = self.values.iter().filter(|&&s| -s < x).count();
        (pos + neg) as f64 / total as f64
    }

    /// `m_n(z, w) = (1/2nm) sum_j [1/(s_j - w) + 1/(-s_j - w)]`.
    pub fn empirical_stieltjes(&self, w: c64) -> Result<c64, SpectraError> {
        check_upper(w)?;
        Ok(self.stieltjes_unchecked(w))
    }

    pub(crate) fn stieltjes_unchecked(&self, w: c64) -> c64 {
        let w2 = w * w;
        let sum: c64 = self.values.iter().map(|&s| (w * -2.0) / (w2 - s * s)).sum();
        sum / (2 * self.values.len()) as f64
    }

    /// `m_n^(alpha)(z, w) = (1/n) sum_{j} R_{j_alpha j_alpha}(w)` for `alpha` in `1..=2m`.
    pub fn partial_trace(&self, alpha: usize, w: c64) -> Result<c64, SpectraError> {
        check_upper(w)?;
        let blocks = 2 * self.m;
        if alpha < 1 || alpha > blocks {
            return Err(SpectraError::BlockIndex { alpha, max: blocks });
        }
        let bw = self.block_weights.as_ref().ok_or(SpectraError::MissingBlockWeights)?;
        let sum: c64 = self
            .eigenvalues
            .iter()
            .enumerate()
            .map(|(k, &lambda)| bw[k * blocks + alpha - 1] / (c64::new(lambda, 0.0) - w))
            .sum();
        Ok(sum / self.n as f64)
    }

    /// All `2m` partial traces at once.
    pub fn partial_traces(&self, w: c64) -> Result<Vec<c64>, SpectraError> {
        check_upper(w)?;
        let blocks = 2 * self.m;
        let bw = self.block_weights.as_ref().ok_or(SpectraError::MissingBlockWeights)?;
        let mut out = vec![c64::new(0.0, 0.0); blocks];
        for (k, &lambda) in self.eigenvalues.iter().enumerate() {
            let g = (c64::new(lambda, 0.0) - w).inv();
            for (a, slot) in out.iter_mut().enumerate() {
                *slot += g * bw[k * blocks + a];
            }
        }
        Ok(out.into_iter().map(|x| x / self.n as f64).collect())
    }

    /// `R_{jk}(w)` from the stored eigenpairs (diagnostic mode only).
    pub fn resolvent_entry(&self, j: usize, k: usize, w: c64) -> Result<c64, SpectraError> {
        check_upper(w)?;
        let u = self.eigenvectors.as_ref().ok_or(SpectraError::MissingEigenvectors)?;
        let dim = self.eigenvalues.len();
        if j >= dim || k >= dim {
            return Err(SpectraError::Index { index: j.max(k), dim });
        }
        let mut acc = c64::new(0.0, 0.0);
        for (l, &lambda) in self.eigenvalues.iter().enumerate() {
            acc += u.get(j, l) * u.get(k, l).conj() / (c64::new(lambda, 0.0) - w);
        }
        Ok(acc)
    }
}

fn block_weights_of<F: Fn(usize, usize) -> f64>(dim: usize, n: usize, blocks: usize, mass: F) -> Vec<f64> {
    let mut bw = vec![0.0; dim * blocks];
    for k in 0..dim {
        for a in 0..blocks {
            let mut acc = 0.0;
            for i in a * n..(a + 1) * n {
                acc += mass(i, k);
            }
            bw[k * blocks + a] = acc;
        }
    }
    bw
}

/// Hermitian eigendecomposition of `V(z, r)` and the derived singular spectrum.
pub fn singular_spectrum(s: &ShiftedMatrix, detail: SpectrumDetail) -> Result<SingularSpectrum, SpectraError> {
    let v = hermitize(s);
    let mut spec = spectrum_of_hermitization(&v, detail)?;
    spec.z = s.z;
    spec.r = s.r;
    Ok(spec)
}

/// Same as [`singular_spectrum`] for an explicit Hermitian embedding.
pub fn spectrum_of_hermitization(v: &Hermitization, detail: SpectrumDetail) -> Result<SingularSpectrum, SpectraError> {
    sequential_linalg();
    let dim = v.dim();
    let (n, m) = (v.n(), v.m());
    let blocks = 2 * m;
    let detail = if detail == SpectrumDetail::Diagnostic && dim / 2 > DIAGNOSTIC_MAX_NM {
        SpectrumDetail::BlockWeights
    } else {
        detail
    };
    let eig_err = |e: faer::linalg::evd::EvdError| SpectraError::Eigen(format!("{e:?}"));

    let (eigenvalues, block_weights, eigenvectors) = match (v.matrix(), detail) {
        (DenseMatrix::Real(a), SpectrumDetail::Values) => (a.self_adjoint_eigenvalues(Side::Lower).map_err(eig_err)?, None, None),
        (DenseMatrix::Complex(a), SpectrumDetail::Values) => {
            (a.self_adjoint_eigenvalues(Side::Lower).map_err(eig_err)?, None, None)
        }
        (DenseMatrix::Real(a), _) => {
            let evd = a.self_adjoint_eigen(Side::Lower).map_err(eig_err)?;
            let vals: Vec<f64> = evd.S().column_vector().iter().copied().collect();
            let u = evd.U();
            let bw = block_weights_of(dim, n, blocks, |i, k| u[(i, k)] * u[(i, k)]);
            let vecs = (detail == SpectrumDetail::Diagnostic).then(|| DenseMatrix::Real(u.to_owned()));
            (vals, Some(bw), vecs)
        }
        (DenseMatrix::Complex(a), _) => {
            let evd = a.self_adjoint_eigen(Side::Lower).map_err(eig_err)?;
            let vals: Vec<f64> = evd.S().column_vector().iter().map(|x| x.re).collect();
            let u = evd.U();
            let bw = block_weights_of(dim, n, blocks, |i, k| u[(i, k)].norm_sqr());
            let vecs = (detail == SpectrumDetail::Diagnostic).then(|| DenseMatrix::Complex(u.to_owned()));
            (vals, Some(bw), vecs)
        }
    };
    if eigenvalues.iter().any(|x| !x.is_finite()) {
        return Err(SpectraError::Eigen("non-finite eigenvalue".into()));
    }
    // eigenvalues ascend; pair the j-th largest with the j-th smallest
    let half = dim / 2;
    let values: Vec<f64> = (0..half).map(|j| 0.5 * (eigenvalues[dim - 1 - j] - eigenvalues[j])).collect();
    Ok(SingularSpectrum {
        z: c64::new(0.0, 0.0),
        r: 0.0,
        n,
        m,
        values,
        eigenvalues,
        block_weights,
        eigenvectors,
    })
}

pub fn esd_cdf(spec: &SingularSpectrum, x: f64) -> f64 {
    spec.esd_cdf(x)
}

pub fn empirical_stieltjes(spec: &SingularSpectrum, w: c64) -> Result<c64, SpectraError> {
    spec.empirical_stieltjes(w)
}

pub fn partial_trace(spec: &SingularSpectrum, alpha: usize, w: c64) -> Result<c64, SpectraError> {
    spec.partial_trace(alpha, w)
}

/// Eigenvalues `lambda_1..lambda_n` of a (generally non-Hermitian) square matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexSpectrum {
    pub eigenvalues: Vec<c64>,
}

impl ComplexSpectrum {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// `N_B` for the closed disk `B(center, radius)`.
    pub fn count_in_disk(&self, center: c64, radius: f64) -> usize {
        self.eigenvalues.iter().filter(|l| (**l - center).norm() <= radius).count()
    }

    /// `N_B` for the closed axis-aligned rectangle `[re0, re1] x [im0, im1]`.
    pub fn count_in_rect(&self, re: (f64, f64), im: (f64, f64)) -> usize {
        self.eigenvalues
            .iter()
            .filter(|l| l.re >= re.0 && l.re <= re.1 && l.im >= im.0 && l.im <= im.1)
            .count()
    }

    pub fn moduli(&self) -> Vec<f64> {
        self.eigenvalues.iter().map(|l| l.norm()).collect()
    }

    pub fn arguments(&self) -> Vec<f64> {
        self.eigenvalues.iter().map(|l| l.arg()).collect()
    }
}

pub fn product_eigenvalues(x: &DenseMatrix) -> Result<ComplexSpectrum, SpectraError> {
    sequential_linalg();
    let err = |e: faer::linalg::evd::EvdError| SpectraError::Eigen(format!("{e:?}"));
    let eigenvalues = match x {
        DenseMatrix::Real(a) => a.eigenvalues().map_err(err)?,
        DenseMatrix::Complex(a) => a.eigenvalues().map_err(err)?,
    };
    if eigenvalues.iter().any(|l| !l.re.is_finite() || !l.im.is_finite()) {
        return Err(SpectraError::Eigen("non-finite eigenvalue".into()));
    }
    Ok(ComplexSpectrum { eigenvalues })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtremeValues {
    pub s_min: f64,
    pub s_max: f64,
    pub omega_event: bool,
}

/// Smallest/largest singular value and whether `s_min >= threshold` and `s_max <= K`.
pub fn extreme_value_monitor(spec: &SingularSpectrum, k_norm: f64, threshold: f64) -> ExtremeValues {
    let (s_min, s_max) = (spec.s_min(), spec.s_max());
    ExtremeValues { s_min, s_max, omega_event: s_min >= threshold && s_min > 0.0 && s_max <= k_norm }
}

// Explicit-resolvent diagnostics. These invert V - wI by LU and never touch the
// eigensolver, so they are an independent route to the same quantities.

fn check_small(v: &Hermitization) -> Result<(), SpectraError> {
    if v.dim() > 2 * DIAGNOSTIC_MAX_NM {
        return Err(SpectraError::TooLarge { dim: v.dim(), max: 2 * DIAGNOSTIC_MAX_NM });
    }
    Ok(())
}

/// `(V - wI)^{-1}` by partial-pivot LU.
pub fn explicit_resolvent(v: &Hermitization, w: c64) -> Result<Mat<c64>, SpectraError> {
    check_upper(w)?;
    check_small(v)?;
    let mut a = v.matrix().to_complex();
    for i in 0..a.nrows() {
        a[(i, i)] -= w;
    }
    Ok(a.partial_piv_lu().inverse())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// `sum_k |R_jk(w)|^2 <= (1/v) Im R_jj(w)`.
pub fn resolvent_row_check(v: &Hermitization, w: c64, j: usize) -> Result<RowCheck, SpectraError> {
    if j >= v.dim() {
        return Err(SpectraError::Index { index: j, dim: v.dim() });
    }
    let r = explicit_resolvent(v, w)?;
    let lhs: f64 = (0..r.ncols()).map(|k| r[(j, k)].norm_sqr()).sum();
    let rhs = r[(j, j)].im / w.im;
    Ok(RowCheck { lhs, rhs, holds: lhs <= rhs + 1e-10 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub residual: f64,
    pub scale: f64,
    pub holds: bool,
}

fn max_row_sum(a: &Mat<c64>) -> f64 {
    (0..a.nrows()).map(|i| (0..a.ncols()).map(|j| a[(i, j)].norm()).sum::<f64>()).fold(0.0, f64::max)
}

/// Max entrywise residual of `R(w1) - R(w2) - (w1 - w2) R(w1) R(w2)`.
pub fn resolvent_identity_check(v: &Hermitization, w1: c64, w2: c64) -> Result<IdentityCheck, SpectraError> {
    let r1 = explicit_resolvent(v, w1)?;
    let r2 = explicit_resolvent(v, w2)?;
    let prod = &r1 * &r2;
    let dw = w1 - w2;
    let mut residual: f64 = 0.0;
    for i in 0..r1.nrows() {
        for j in 0..r1.ncols() {
            residual = residual.max((r1[(i, j)] - r2[(i, j)] - dw * prod[(i, j)]).norm());
        }
    }
    // operator norms bounded by the max row sum (Hermitian resolvent => 1- and inf-norms agree)
    let scale = max_row_sum(&r1) * max_row_sum(&r2);
    Ok(IdentityCheck { residual, scale, holds: residual <= 1e-10 * scale.max(1.0) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescentCheck {
    /// `|R_jj(u + iv/s)| / |R_jj(u + iv)|`
    pub modulus_ratio: f64,
    /// `Im R_jj(u + iv/s) / Im R_jj(u + iv)`
    pub imag_ratio: f64,
    pub holds: bool,
}

/// One-descent inequalities for the diagonal resolvent entry `j` with ratio `s >= 1`.
pub fn descent_property_check(v: &Hermitization, u: f64, v_im: f64, s: f64, j: usize) -> Result<DescentCheck, SpectraError> {
    if !(s >= 1.0) {
        return Err(SpectraError::DescentFactor(s));
    }
    if j >= v.dim() {
        return Err(SpectraError::Index { index: j, dim: v.dim() });
    }
    let hi = explicit_resolvent(v, c64::new(u, v_im))?[(j, j)];
    let lo = explicit_resolvent(v, c64::new(u, v_im / s))?[(j, j)];
    let modulus_ratio = lo.norm() / hi.norm();
    let imag_ratio = lo.im / hi.im;
    let slack = 1e-10;
    let holds = lo.norm() <= s * hi.norm() * (1.0 + slack) && lo.im <= s * hi.im * (1.0 + slack);
    Ok(DescentCheck { modulus_ratio, imag_ratio, holds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linearization::{build_linearization, from_dense, shift, ProductModel};

    fn diag_shifted(entries: &[f64]) -> ShiftedMatrix {
        let d = entries.len();
        from_dense(DenseMatrix::Real(Mat::from_fn(d, d, |i, j| if i == j { entries[i] } else { 0.0 })), 1)
    }

    #[test]
    fn diagonal_singular_values() {
        let spec = singular_spectrum(&diag_shifted(&[3.0, -4.0]), SpectrumDetail::Values).unwrap();
        assert!((spec.values()[0] - 4.0).abs() < 1e-14);
        assert!((spec.values()[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn zero_matrix_spectrum() {
        let spec = singular_spectrum(&diag_shifted(&[0.0; 4]), SpectrumDetail::Values).unwrap();
        assert!(spec.values().iter().all(|&s| s.abs() < 1e-15));
    }

    #[test]
    fn esd_small_cases() {
        let z = c64::new(0.0, 0.0);
        let one = SingularSpectrum::from_values(z, 1, 1, vec![1.0]);
        assert_eq!(one.esd_cdf(0.0), 0.5);
        assert_eq!(one.esd_cdf(2.0), 1.0);
        let two = SingularSpectrum::from_values(z, 2, 1, vec![1.0, 2.0]);
        assert_eq!(two.esd_cdf(1.5), 0.75);
        // F(-x) + F(x^-) = 1
        for x in [0.3, 1.0, 1.7, 2.0, 5.0] {
            assert_eq!(two.esd_cdf(-x) + two.esd_cdf_left(x), 1.0);
        }
    }

    #[test]
    fn stieltjes_hand_values() {
        let z = c64::new(0.0, 0.0);
        let one = SingularSpectrum::from_values(z, 1, 1, vec![1.0]);
        let m = one.empirical_stieltjes(c64::new(0.0, 1.0)).unwrap();
        assert!((m - c64::new(0.0, 0.5)).norm() < 1e-15);

        let spec = SingularSpectrum::from_values(z, 3, 1, vec![0.2, 1.1, 2.5]);
        let m = spec.empirical_stieltjes(c64::new(0.0, 0.7)).unwrap();
        assert!(m.re.abs() < 1e-15 && m.im > 0.0);

        let w = c64::new(3e5, 8e5);
        let m = spec.empirical_stieltjes(w).unwrap();
        assert!((m + w.inv()).norm() / w.inv().norm() < 1e-5);

        assert!(matches!(spec.empirical_stieltjes(c64::new(1.0, 0.0)), Err(SpectraError::NotUpperHalfPlane(_))));
    }

    #[test]
    fn partial_traces_of_diagonal_block() {
        // W(z) = diag(a, b) with n = 2, m = 1: V has blocks [[0, D], [D, 0]]
        let (a, b) = (0.7, -1.3);
        let spec = singular_spectrum(&diag_shifted_n(&[a, b], 2), SpectrumDetail::BlockWeights).unwrap();
        let w = c64::new(0.2, 0.4);
        // each 2x2 block [[0, d], [d, 0]] has resolvent diagonal w / (d^2 - w^2)
        let diag = |d: f64| w / (c64::new(d * d, 0.0) - w * w);
        let expect = (diag(a) + diag(b)) / 2.0;
        let m1 = spec.partial_trace(1, w).unwrap();
        let m2 = spec.partial_trace(2, w).unwrap();
        assert!((m1 - expect).norm() < 1e-12);
        assert!((m2 - expect).norm() < 1e-12);
        let mn = spec.empirical_stieltjes(w).unwrap();
        assert!(((m1 + m2) / 2.0 - mn).norm() < 1e-12);
        assert!(matches!(spec.partial_trace(3, w), Err(SpectraError::BlockIndex { .. })));
    }

    fn diag_shifted_n(entries: &[f64], n: usize) -> ShiftedMatrix {
        let d = entries.len();
        from_dense(DenseMatrix::Real(Mat::from_fn(d, d, |i, j| if i == j { entries[i] } else { 0.0 })), n)
    }

    #[test]
    fn values_only_has_no_partial_traces() {
        let spec = singular_spectrum(&diag_shifted(&[1.0, 2.0]), SpectrumDetail::Values).unwrap();
        assert!(matches!(spec.partial_trace(1, c64::new(0.0, 1.0)), Err(SpectraError::MissingBlockWeights)));
    }

    #[test]
    fn block_weights_are_normalized() {
        let mut rng = crate::ensembles::stream_rng(4, 0, 0);
        let factors: Vec<Mat<f64>> = (0..2)
            .map(|_| Mat::from_fn(3, 3, |_, _| rand::Rng::random::<f64>(&mut rng) - 0.5))
            .collect();
        let w = build_linearization(&ProductModel::new(factors).unwrap());
        let s = shift(&w, c64::new(0.1, 0.4), 0.0, c64::new(0.0, 0.0)).unwrap();
        let spec = singular_spectrum(&s, SpectrumDetail::BlockWeights).unwrap();
        for k in 0..spec.eigenvalues().len() {
            let total: f64 = (1..=4).map(|a| spec.block_weight(k, a).unwrap()).sum();
            assert!((total - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn diagnostic_entries_match_lu_resolvent() {
        let mut rng = crate::ensembles::stream_rng(8, 0, 0);
        let factors = vec![Mat::from_fn(4, 4, |_, _| rand::Rng::random::<f64>(&mut rng) - 0.5)];
        let w = build_linearization(&ProductModel::new(factors).unwrap());
        let s = shift(&w, c64::new(0.3, 0.2), 0.0, c64::new(0.0, 0.0)).unwrap();
        let spec = singular_spectrum(&s, SpectrumDetail::Diagnostic).unwrap();
        let v = hermitize(&s);
        let wp = c64::new(-0.1, 0.25);
        let r = explicit_resolvent(&v, wp).unwrap();
        for j in 0..8 {
            for k in 0..8 {
                assert!((spec.resolvent_entry(j, k, wp).unwrap() - r[(j, k)]).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn complex_spectra_hand_cases() {
        let d = Mat::from_fn(2, 2, |i, j| match (i, j) {
            (0, 0) => c64::new(0.5, 0.0),
            (1, 1) => c64::new(0.0, -0.2),
            _ => c64::new(0.0, 0.0),
        });
        let mut ev = product_eigenvalues(&DenseMatrix::Complex(d)).unwrap().eigenvalues;
        ev.sort_by(|a, b| b.re.total_cmp(&a.re));
        assert!((ev[0] - c64::new(0.5, 0.0)).norm() < 1e-14);
        assert!((ev[1] - c64::new(0.0, -0.2)).norm() < 1e-14);

        // companion matrix of x^2 - 1
        let c = Mat::from_fn(2, 2, |i, j| if i != j { 1.0 } else { 0.0 });
        let spec = product_eigenvalues(&DenseMatrix::Real(c)).unwrap();
        let mut re: Vec<f64> = spec.eigenvalues.iter().map(|l| l.re).collect();
        re.sort_by(f64::total_cmp);
        assert!((re[0] + 1.0).abs() < 1e-14 && (re[1] - 1.0).abs() < 1e-14);
        assert_eq!(spec.count_in_disk(c64::new(1.0, 0.0), 0.1), 1);
        assert_eq!(spec.count_in_rect((-2.0, 2.0), (-0.1, 0.1)), 2);
    }

    #[test]
    fn omega_event_cases() {
        let z = c64::new(0.0, 0.0);
        let spec = SingularSpectrum::from_values(z, 3, 1, vec![3.0, 1.0, 0.1]);
        let ev = extreme_value_monitor(&spec, 5.0, 0.05);
        assert!(ev.omega_event);
        assert_eq!((ev.s_min, ev.s_max), (0.1, 3.0));
        let spec = SingularSpectrum::from_values(z, 3, 1, vec![3.0, 1.0, 0.0]);
        assert!(!extreme_value_monitor(&spec, 5.0, 1e-300).omega_event);
    }

    fn one_by_one_zero() -> Hermitization {
        Hermitization::from_matrix(DenseMatrix::Real(Mat::zeros(1, 1)), 1, 1)
    }

    #[test]
    fn row_check_saturates_for_zero_matrix() {
        let c = resolvent_row_check(&one_by_one_zero(), c64::new(0.0, 1.0), 0).unwrap();
        assert!((c.lhs - 1.0).abs() < 1e-15 && (c.rhs - 1.0).abs() < 1e-15 && c.holds);
    }

    #[test]
    fn row_check_equality_for_diagonal() {
        let v = Hermitization::from_matrix(
            DenseMatrix::Real(Mat::from_fn(3, 3, |i, j| if i == j { i as f64 - 1.0 } else { 0.0 })),
            1,
            1,
        );
        for j in 0..3 {
            let c = resolvent_row_check(&v, c64::new(0.3, 0.5), j).unwrap();
            assert!((c.lhs - c.rhs).abs() < 1e-14 && c.holds);
        }
    }

    #[test]
    fn identity_check_trivial_cases() {
        let v = one_by_one_zero();
        let w = c64::new(0.2, 0.9);
        assert_eq!(resolvent_identity_check(&v, w, w).unwrap().residual, 0.0);
        // 1x1 [a]: 1/(a-w1) - 1/(a-w2) = (w1-w2)/((a-w1)(a-w2))
        let a = 0.4;
        let va = Hermitization::from_matrix(DenseMatrix::Real(Mat::from_fn(1, 1, |_, _| a)), 1, 1);
        let (w1, w2) = (c64::new(0.1, 0.3), c64::new(-2.0, 1.5));
        let c = resolvent_identity_check(&va, w1, w2).unwrap();
        assert!(c.residual < 1e-15 && c.holds);
        assert!(matches!(resolvent_identity_check(&va, w1, c64::new(0.0, -1.0)), Err(SpectraError::NotUpperHalfPlane(_))));
    }

    #[test]
    fn descent_cases() {
        let v = one_by_one_zero();
        let c = descent_property_check(&v, 0.0, 0.5, 1.0, 0).unwrap();
        assert!(c.holds && (c.modulus_ratio - 1.0).abs() < 1e-14);
        // R(iv) = i/v: the ratio saturates at s
        let c = descent_property_check(&v, 0.0, 0.5, 3.0, 0).unwrap();
        assert!(c.holds && (c.modulus_ratio - 3.0).abs() < 1e-12);
        assert!(matches!(descent_property_check(&v, 0.0, 0.5, 0.5, 0), Err(SpectraError::DescentFactor(_))));
    }

    #[test]
    fn explicit_resolvent_size_limit() {
        let v = Hermitization::from_matrix(DenseMatrix::Real(Mat::zeros(130, 130)), 65, 1);
        assert!(matches!(explicit_resolvent(&v, c64::new(0.0, 1.0)), Err(SpectraError::TooLarge { .. })));
    }
}
