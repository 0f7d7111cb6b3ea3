//! Block-cyclic linearization of a product of square matrices, its shifts
//! `W(z, r) = W - r zeta I - z I`, and the Hermitian embedding
//! `V = [[0, W(z, r)], [W(z, r)^*, 0]]`.

use faer::{c64, Mat};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinearizationError {
    #[error("product needs at least one factor")]
    Empty,
    #[error("factor {index} has shape {rows}x{cols}, expected {n}x{n}")]
    DimensionMismatch { index: usize, rows: usize, cols: usize, n: usize },
    #[error("|zeta| = {0} exceeds 1")]
    ZetaOutsideDisk(f64),
    #[error("regularization radius r = {0} must be non-negative")]
    NegativeRadius(f64),
}

/// `m` square real factors of common size `n`.
#[derive(Debug, Clone)]
pub struct ProductModel {
    n: usize,
    factors: Vec<Mat<f64>>,
}

impl ProductModel {
    pub fn new(factors: Vec<Mat<f64>>) -> Result<Self, LinearizationError> {
        let first = factors.first().ok_or(LinearizationError::Empty)?;
        let n = first.nrows();
        for (index, f) in factors.iter().enumerate() {
            if f.nrows() != n || f.ncols() != n {
                return Err(LinearizationError::DimensionMismatch { index, rows: f.nrows(), cols: f.ncols(), n });
            }
        }
        Ok(ProductModel { n, factors })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.factors.len()
    }

    pub fn factors(&self) -> &[Mat<f64>] {
        &self.factors
    }
}

/// The `nm x nm` matrix with blocks `X^(1)..X^(m-1)` on the block superdiagonal and
/// `X^(m)` in the lower-left corner, all scaled by `n^{-1/2}`.
#[derive(Debug, Clone)]
pub struct BlockLinearization {
    n: usize,
    m: usize,
    w: Mat<f64>,
}

impl BlockLinearization {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.n * self.m
    }

    pub fn matrix(&self) -> &Mat<f64> {
        &self.w
    }

    /// Block column holding factor `q` (1-based) in block row `q`.
    pub fn block_column(m: usize, q: usize) -> usize {
        q % m
    }
}

pub fn build_linearization(model: &ProductModel) -> BlockLinearization {
    let (n, m) = (model.n(), model.m());
    let scale = 1.0 / (n as f64).sqrt();
    let mut w = Mat::<f64>::zeros(n * m, n * m);
    for (q0, factor) in model.factors().iter().enumerate() {
        let row0 = q0 * n;
        let col0 = BlockLinearization::block_column(m, q0 + 1) * n;
        for j in 0..n {
            for i in 0..n {
                w[(row0 + i, col0 + j)] = scale * factor[(i, j)];
            }
        }
    }
    BlockLinearization { n, m, w }
}

/// `n^{-m/2} X^(1) X^(2) ... X^(m)`. Real, since every factor is real.
pub fn product_matrix(model: &ProductModel) -> Mat<f64> {
    let scale = 1.0 / (model.n() as f64).sqrt();
    let mut acc = &model.factors()[0] * faer::Scale(scale);
    for f in &model.factors()[1..] {
        acc = (&acc * f) * faer::Scale(scale);
    }
    acc
}

/// Dense storage for a matrix that is real when the shift is real.
#[derive(Debug, Clone)]
pub enum DenseMatrix {
    Real(Mat<f64>),
    Complex(Mat<c64>),
}

impl DenseMatrix {
    pub fn nrows(&self) -> usize {
        match self {
            DenseMatrix::Real(a) => a.nrows(),
            DenseMatrix::Complex(a) => a.nrows(),
        }
    }

    pub fn ncols(&self) -> usize {
        match self {
            DenseMatrix::Real(a) => a.ncols(),
            DenseMatrix::Complex(a) => a.ncols(),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> c64 {
        match self {
            DenseMatrix::Real(a) => c64::new(a[(i, j)], 0.0),
            DenseMatrix::Complex(a) => a[(i, j)],
        }
    }

    pub fn to_complex(&self) -> Mat<c64> {
        match self {
            DenseMatrix::Real(a) => Mat::from_fn(a.nrows(), a.ncols(), |i, j| c64::new(a[(i, j)], 0.0)),
            DenseMatrix::Complex(a) => a.clone(),
        }
    }

    pub fn is_real(&self) -> bool {
        matches!(self, DenseMatrix::Real(_))
    }
}

/// `W(z, r) = W - r zeta I - z I`.
#[derive(Debug, Clone)]
pub struct ShiftedMatrix {
    pub z: c64,
    pub r: f64,
    pub zeta: c64,
    n: usize,
    m: usize,
    data: DenseMatrix,
}

impl ShiftedMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.n * self.m
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.data
    }

    /// Total diagonal shift `z + r zeta`.
    pub fn diagonal_shift(&self) -> c64 {
        self.z + self.zeta * self.r
    }
}

pub fn shift(base: &BlockLinearization, z: c64, r: f64, zeta: c64) -> Result<ShiftedMatrix, LinearizationError> {
    if zeta.norm() > 1.0 {
        return Err(LinearizationError::ZetaOutsideDisk(zeta.norm()));
    }
    if !(r >= 0.0) {
        return Err(LinearizationError::NegativeRadius(r));
    }
    let c = z + zeta * r;
    let w = base.matrix();
    let dim = w.nrows();
    let data = if c.im == 0.0 {
        let mut a = w.clone();
        for i in 0..dim {
            a[(i, i)] -= c.re;
        }
        DenseMatrix::Real(a)
    } else {
        let mut a = Mat::from_fn(dim, dim, |i, j| c64::new(w[(i, j)], 0.0));
        for i in 0..dim {
            a[(i, i)] -= c;
        }
        DenseMatrix::Complex(a)
    };
    Ok(ShiftedMatrix { z, r, zeta, n: base.n(), m: base.m(), data })
}

/// Wraps an arbitrary square matrix as a shifted matrix with no further shift, for
/// hand-built inputs such as diagonal test matrices. `n` is the block size.
pub fn from_dense(data: DenseMatrix, n: usize) -> ShiftedMatrix {
    let m = data.nrows() / n.max(1);
    ShiftedMatrix { z: c64::new(0.0, 0.0), r: 0.0, zeta: c64::new(0.0, 0.0), n, m, data }
}

/// `2nm x 2nm` Hermitian matrix `[[0, W(z, r)], [W(z, r)^*, 0]]`.
#[derive(Debug, Clone)]
pub struct Hermitization {
    n: usize,
    m: usize,
    v: DenseMatrix,
}

impl Hermitization {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.v.nrows()
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.v
    }

    /// Wraps an explicit Hermitian matrix. The caller guarantees `v = v^*`.
    pub fn from_matrix(v: DenseMatrix, n: usize, m: usize) -> Self {
        Hermitization { n, m, v }
    }
}

pub fn hermitize(s: &ShiftedMatrix) -> Hermitization {
    let d = s.dim();
    let v = match s.matrix() {
        DenseMatrix::Real(a) => {
            let mut v = Mat::<f64>::zeros(2 * d, 2 * d);
            for j in 0..d {
                for i in 0..d {
                    v[(i, d + j)] = a[(i, j)];
                    v[(d + j, i)] = a[(i, j)];
                }
            }
            DenseMatrix::Real(v)
        }
        DenseMatrix::Complex(a) => {
            let mut v = Mat::<c64>::zeros(2 * d, 2 * d);
            for j in 0..d {
                for i in 0..d {
                    v[(i, d + j)] = a[(i, j)];
                    v[(d + j, i)] = a[(i, j)].conj();
                }
            }
            DenseMatrix::Complex(v)
        }
    };
    Hermitization { n: s.n(), m: s.m(), v }
}

/// Uniform point of the closed unit disk (radial square-root sampling).
pub fn sample_unit_disk<R: Rng + ?Sized>(rng: &mut R) -> c64 {
    let radius = rng.random::<f64>().sqrt();
    let angle = 2.0 * std::f64::consts::PI * rng.random::<f64>();
    c64::from_polar(radius, angle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensembles::stream_rng;

    fn random_factors(n: usize, m: usize, seed: u64) -> Vec<Mat<f64>> {
        let mut rng = stream_rng(seed, 0, 0);
        (0..m).map(|_| Mat::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5)).collect()
    }

    #[test]
    fn single_factor_is_scaled_copy() {
        let f = random_factors(3, 1, 1);
        let model = ProductModel::new(f.clone()).unwrap();
        let w = build_linearization(&model);
        for i in 0..3 {
            for j in 0..3 {
                assert!((w.matrix()[(i, j)] - f[0][(i, j)] / 3f64.sqrt()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn block_pattern_has_m_n_squared_slots() {
        let (n, m) = (3, 4);
        let ones = vec![Mat::<f64>::from_fn(n, n, |_, _| 1.0); m];
        let w = build_linearization(&ProductModel::new(ones).unwrap());
        let mut nonzero = 0;
        for i in 0..n * m {
            for j in 0..n * m {
                if w.matrix()[(i, j)] != 0.0 {
                    nonzero += 1;
                    let (bi, bj) = (i / n, j / n);
                    assert_eq!(bj, (bi + 1) % m);
                }
            }
        }
        assert_eq!(nonzero, m * n * n);
    }

    #[test]
    fn identity_cube() {
        // W^3 = n^{-3/2} I for identity factors
        let n = 2;
        let ids = vec![Mat::<f64>::identity(n, n); 3];
        let w = build_linearization(&ProductModel::new(ids).unwrap());
        let w3 = w.matrix() * w.matrix() * w.matrix();
        let expect = (n as f64).powf(-1.5);
        for i in 0..6 {
            for j in 0..6 {
                let target = if i == j { expect } else { 0.0 };
                assert!((w3[(i, j)] - target).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn product_scaling() {
        let ids = vec![Mat::<f64>::identity(4, 4); 2];
        let x = product_matrix(&ProductModel::new(ids).unwrap());
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(x[(i, j)], if i == j { 0.25 } else { 0.0 });
            }
        }
    }

    #[test]
    fn product_matches_naive_loops() {
        let f = random_factors(2, 2, 9);
        let x = product_matrix(&ProductModel::new(f.clone()).unwrap());
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..2 {
                    acc += f[0][(i, k)] * f[1][(k, j)];
                }
                assert!((x[(i, j)] - acc / 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_factors_rejected() {
        let f = vec![Mat::<f64>::zeros(2, 2), Mat::<f64>::zeros(3, 3)];
        assert!(matches!(ProductModel::new(f), Err(LinearizationError::DimensionMismatch { index: 1, .. })));
        assert!(matches!(ProductModel::new(vec![]), Err(LinearizationError::Empty)));
    }

    #[test]
    fn shifts_touch_only_the_diagonal() {
        let f = random_factors(2, 1, 3);
        let w = build_linearization(&ProductModel::new(f).unwrap());
        let zero = c64::new(0.0, 0.0);
        let s0 = shift(&w, zero, 0.0, zero).unwrap();
        let DenseMatrix::Real(a) = s0.matrix() else { panic!("real shift should stay real") };
        assert_eq!(a, w.matrix());

        let s1 = shift(&w, c64::new(1.0, 0.0), 0.0, zero).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let d = if i == j { 1.0 } else { 0.0 };
                assert_eq!(s1.matrix().get(i, j).re, w.matrix()[(i, j)] - d);
            }
        }

        let z = c64::new(0.3, 0.1);
        let s2 = shift(&w, z, 1e-3, c64::new(0.0, 1.0)).unwrap();
        assert!(!s2.matrix().is_real());
        for i in 0..2 {
            let expect = c64::new(w.matrix()[(i, i)], 0.0) - (z + c64::new(0.0, 1e-3));
            assert_eq!(s2.matrix().get(i, i), expect);
        }
    }

    #[test]
    fn shift_errors() {
        let w = build_linearization(&ProductModel::new(random_factors(2, 1, 3)).unwrap());
        let z = c64::new(0.0, 0.0);
        assert!(matches!(shift(&w, z, 0.1, c64::new(1.0, 0.5)), Err(LinearizationError::ZetaOutsideDisk(_))));
        assert!(matches!(shift(&w, z, -0.1, z), Err(LinearizationError::NegativeRadius(_))));
    }

    #[test]
    fn hermitization_is_exactly_self_adjoint() {
        let w = build_linearization(&ProductModel::new(random_factors(3, 2, 5)).unwrap());
        let s = shift(&w, c64::new(0.2, -0.7), 0.0, c64::new(0.0, 0.0)).unwrap();
        let h = hermitize(&s);
        let d = h.dim();
        assert_eq!(d, 12);
        for i in 0..d {
            for j in 0..d {
                assert_eq!(h.matrix().get(i, j), h.matrix().get(j, i).conj());
            }
        }
    }

    #[test]
    fn unit_disk_sampling() {
        let mut rng = stream_rng(11, 0, 0);
        let pts: Vec<c64> = (0..100_000).map(|_| sample_unit_disk(&mut rng)).collect();
        assert!(pts.iter().all(|p| p.norm() <= 1.0));
        let inner = pts.iter().filter(|p| p.norm() <= 0.5).count() as f64 / pts.len() as f64;
        assert!((inner - 0.25).abs() < 0.01);
        let mean: c64 = pts.iter().sum::<c64>() / pts.len() as f64;
        assert!(mean.norm() < 0.01);
    }
}
