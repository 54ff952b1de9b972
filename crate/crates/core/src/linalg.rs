//! Dense small-matrix numerics: matrix exponential, controllability Gramian,
//! PSD square root and SPD solves.
//!
//! Storage is `nalgebra::DMatrix<f64>`. Everything here is pure; the matrices
//! involved are at most a few dozen rows.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative Frobenius asymmetry accepted by [`PsdMatrix::new`].
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Negative-eigenvalue slack (relative to spectral norm) accepted by [`PsdMatrix::new`].
pub const PSD_TOL: f64 = 1e-10;
/// Negative eigenvalues below `-SQRT_PSD_TOL * spectral_norm` make [`psd_sqrt`] fail.
pub const SQRT_PSD_TOL: f64 = 1e-8;
/// Minimum eigenvalue ratio, after unit-diagonal scaling, for [`solve_spd`].
pub const SPD_TOL: f64 = 1e-12;

/// A symmetric positive semidefinite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdMatrix(Matrix);

impl PsdMatrix {
    /// Validates symmetry and semidefiniteness, then stores the symmetrized matrix.
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::dim(format!(
                "PSD matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        check_finite(&m, "PSD matrix")?;
        let norm = m.norm();
        let asym = (&m - m.transpose()).norm();
        if asym > SYMMETRY_TOL * norm.max(f64::MIN_POSITIVE) && asym > 0.0 {
            return Err(Error::invalid(format!(
                "matrix not symmetric (relative asymmetry {:e})",
                asym / norm
            )));
        }
        let sym = symmetrize(&m);
        let eig = SymmetricEigen::new(sym.clone());
        let (min, spectral) = extremes(&eig.eigenvalues);
        if min < -PSD_TOL * spectral {
            return Err(Error::NotPsd {
                min_eigenvalue: min,
                tolerance: PSD_TOL * spectral,
            });
        }
        Ok(PsdMatrix(sym))
    }

    /// Symmetrizes a matrix that is PSD by construction (Gramians, bridge
    /// covariances) without the eigenvalue check. Round-off may leave tiny
    /// negative eigenvalues; [`psd_sqrt`] clamps them.
    pub fn from_symmetric_part(m: &Matrix) -> Self {
        PsdMatrix(symmetrize(m))
    }

    pub fn zeros(n: usize) -> Self {
        PsdMatrix(Matrix::zeros(n, n))
    }

    pub fn identity(n: usize) -> Self {
        PsdMatrix(Matrix::identity(n, n))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    /// Smallest and largest-magnitude eigenvalues.
    pub fn eigen_extremes(&self) -> (f64, f64) {
        let eig = SymmetricEigen::new(self.0.clone());
        extremes(&eig.eigenvalues)
    }

    /// `x' S x`.
    pub fn quad_form(&self, x: &Vector) -> f64 {
        x.dot(&(&self.0 * x))
    }
}

impl std::ops::Deref for PsdMatrix {
    type Target = Matrix;

    fn deref(&self) -> &Matrix {
        &self.0
    }
}

fn extremes(eigs: &Vector) -> (f64, f64) {
    let min = eigs.iter().copied().fold(f64::INFINITY, f64::min);
    let spectral = eigs.iter().fold(0.0f64, |a, &e| a.max(e.abs()));
    (min, spectral)
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

pub(crate) fn check_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} has non-finite entries")))
    }
}

/// Builds a matrix from row-major nested rows.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
    let nrows = rows.len();
    if nrows == 0 {
        return Err(Error::dim("matrix needs at least one row"));
    }
    let ncols = rows[0].len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::dim("matrix rows must be non-empty and of equal length"));
    }
    let m = Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]);
    check_finite(&m, "matrix")?;
    Ok(m)
}

pub fn matrix_to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Relative Frobenius distance `|a - b| / |b|` (absolute when `b = 0`).
pub fn rel_frobenius(a: &Matrix, b: &Matrix) -> f64 {
    let diff = (a - b).norm();
    let scale = b.norm();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

// Padé(13) coefficients for scaling and squaring.
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA13: f64 = 5.371920351148152;

fn norm1(m: &Matrix) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `exp(M t)` by scaling and squaring around a degree-13 Padé approximant.
pub fn mat_exp(m: &Matrix, t: f64) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::dim(format!(
            "mat_exp needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if !t.is_finite() {
        return Err(Error::NonFinite(format!("mat_exp time {t}")));
    }
    check_finite(m, "mat_exp input")?;
    let n = m.nrows();
    let a = m * t;
    let norm = norm1(&a);
    let squarings = if norm > THETA13 {
        (norm / THETA13).log2().ceil() as i32
    } else {
        0
    };
    let a = a / 2f64.powi(squarings);

    let b = &PADE13;
    let ident = Matrix::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;

    let u_inner = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9]);
    let u = &a * (u_inner + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &ident * b[1]);
    let v_inner = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8]);
    let v = v_inner + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &ident * b[0];

    let denom = &v - &u;
    let numer = &v + &u;
    let mut r = denom
        .lu()
        .solve(&numer)
        .ok_or_else(|| Error::NonFinite("Padé denominator singular in mat_exp".into()))?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    check_finite(&r, "mat_exp result")?;
    Ok(r)
}

/// Controllability Gramian `∫_0^t e^{(t-s)A} B B' e^{(t-s)A'} ds`.
pub fn gramian(a: &Matrix, b: &Matrix, t: f64) -> Result<PsdMatrix> {
    Ok(van_loan(a, b, t)?.1)
}

/// `(e^{tA}, Φ_t)` from one block exponential.
///
/// Van Loan's method: with `M = [[-A, BB'], [0, A']]` and `e^{Mt} = [[F11, F12], [0, F22]]`,
/// `e^{tA} = F22'` and the Gramian is `F22' F12`.
pub fn van_loan(a: &Matrix, b: &Matrix, t: f64) -> Result<(Matrix, PsdMatrix)> {
    let n = a.nrows();
    if !a.is_square() || b.nrows() != n || b.ncols() == 0 {
        return Err(Error::dim(format!(
            "gramian needs A n×n and B n×m, got A {}x{} and B {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::invalid(format!("gramian time must be >= 0, got {t}")));
    }
    if t == 0.0 {
        return Ok((Matrix::identity(n, n), PsdMatrix::zeros(n)));
    }
    let mut block = Matrix::zeros(2 * n, 2 * n);
    block.view_mut((0, 0), (n, n)).copy_from(&(-a));
    block.view_mut((0, n), (n, n)).copy_from(&(b * b.transpose()));
    block.view_mut((n, n), (n, n)).copy_from(&a.transpose());
    let e = mat_exp(&block, t)?;
    let f12 = e.view((0, n), (n, n));
    let exp_t = e.view((n, n), (n, n)).transpose();
    let phi = PsdMatrix::from_symmetric_part(&(&exp_t * f12));
    Ok((exp_t, phi))
}

/// Symmetric square root; tiny negative eigenvalues are clamped to zero.
pub fn psd_sqrt(s: &PsdMatrix) -> Result<Matrix> {
    let n = s.dim();
    if n == 0 {
        return Ok(Matrix::zeros(0, 0));
    }
    let eig = SymmetricEigen::new(s.as_matrix().clone());
    let (min, spectral) = extremes(&eig.eigenvalues);
    if min < -SQRT_PSD_TOL * spectral {
        return Err(Error::NotPsd {
            min_eigenvalue: min,
            tolerance: SQRT_PSD_TOL * spectral,
        });
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let r = v * Matrix::from_diagonal(&roots) * v.transpose();
    Ok(symmetrize(&r))
}

/// Solves `S X = V` for strictly positive definite `S`.
pub fn solve_spd(s: &PsdMatrix, v: &Matrix) -> Result<Matrix> {
    if v.nrows() != s.dim() {
        return Err(Error::dim(format!(
            "solve_spd: S is {}x{} but V has {} rows",
            s.dim(),
            s.dim(),
            v.nrows()
        )));
    }
    let chol = spd_factor(s)?;
    Ok(chol.solve(v))
}

/// Cholesky factor of `S` after a conditioning check on the unit-diagonal
/// scaling `D^{-1/2} S D^{-1/2}`, which is what bounds the factor's accuracy.
pub fn spd_factor(s: &PsdMatrix) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    let diag = s.as_matrix().diagonal();
    let (_, spectral) = s.eigen_extremes();
    if diag.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::Singular {
            min_eigenvalue: diag.min().min(0.0),
            spectral_norm: spectral,
        });
    }
    let scale = diag.map(|d| d.sqrt().recip());
    let scaled = PsdMatrix::from_symmetric_part(&s.as_matrix().component_mul(&(&scale * scale.transpose())));
    let (min, max) = scaled.eigen_extremes();
    if !(min > SPD_TOL * max) {
        return Err(Error::Singular {
            min_eigenvalue: min,
            spectral_norm: max,
        });
    }
    Cholesky::new(s.as_matrix().clone()).ok_or(Error::Singular {
        min_eigenvalue: min,
        spectral_norm: max,
    })
}

/// `log det S` from a Cholesky factor.
pub fn log_det(chol: &Cholesky<f64, nalgebra::Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Row-major copy of a small matrix for allocation-free matrix-vector products.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FlatMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// `out = M x`
    #[inline]
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    /// `x' M x` for square `M`.
    #[inline]
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.data
            .chunks_exact(self.cols)
            .zip(x)
            .map(|(row, xi)| xi * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }
}

impl From<&Matrix> for FlatMatrix {
    fn from(m: &Matrix) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            data.extend(m.row(i).iter());
        }
        FlatMatrix {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}
