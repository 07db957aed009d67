//! Small dense matrices, exact-series discretization and a discrete Riccati
//! solver. Sizes here never exceed a handful of rows, so everything is plain
//! row-major `Vec<f64>` with no blocking or SIMD.

use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

use thiserror::Error;

/// Pivot magnitude below which a linear solve is declared singular.
pub const SINGULAR_PIVOT: f64 = 1e-12;
/// Series terms are accumulated until the max-abs entry of a term drops below this.
pub const SERIES_TOL: f64 = 1e-14;
/// Hard cap on series terms before declaring divergence.
pub const SERIES_MAX_TERMS: usize = 50;
/// Riccati fixed point tolerance on `max |P_{k+1} - P_k|`.
pub const RICCATI_TOL: f64 = 1e-10;
/// Riccati iteration cap.
pub const RICCATI_MAX_ITERS: usize = 100_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("singular matrix: pivot magnitude {pivot:e} below {SINGULAR_PIVOT:e}")]
    Singular { pivot: f64 },
    #[error("matrix exponential series did not converge after {terms} terms (dt too large for the spectral radius)")]
    SeriesDivergence { terms: usize },
    #[error("discretization step {dt} outside (0, 0.1]")]
    InvalidStep { dt: f64 },
    #[error(
        "Riccati recursion did not converge within {iterations} iterations (residual {residual:e})"
    )]
    Unstabilizable { iterations: usize, residual: f64 },
    #[error("LQR gain does not stabilize the closed loop (spectral radius {radius})")]
    NotStabilizing { radius: f64 },
}

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    /// Builds a matrix from row-major entries. Panics if the entry count does
    /// not match `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix entry count {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        Matrix { rows, cols, data }
    }

    pub fn from_rows<const C: usize>(rows: &[[f64; C]]) -> Self {
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Matrix::from_vec(rows.len(), C, data)
    }

    pub fn column(values: &[f64]) -> Self {
        Matrix::from_vec(values.len(), 1, values.to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Induced infinity norm (max absolute row sum).
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|i| (0..self.cols).map(|j| self[(i, j)].abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(self + selfᵀ) / 2`.
    pub fn symmetrized(&self) -> Matrix {
        assert!(self.is_square(), "symmetrize requires a square matrix");
        let mut s = self.clone();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let v = 0.5 * (self[(i, j)] + self[(j, i)]);
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
        }
        s
    }

    /// `self · x` for a plain vector.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "mul_vec dimension mismatch");
        (0..self.rows)
            .map(|i| {
                self.data[i * self.cols..(i + 1) * self.cols]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    /// `xᵀ · self · x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.mul_vec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    /// Solves `self · X = rhs` by Gaussian elimination with partial pivoting.
    pub fn solve(&self, rhs: &Matrix) -> Result<Matrix, NumericsError> {
        assert!(self.is_square(), "solve requires a square left operand");
        assert_eq!(self.rows, rhs.rows, "solve dimension mismatch");
        let n = self.rows;
        let m = rhs.cols;
        let mut a = self.data.clone();
        let mut b = rhs.data.clone();
        for col in 0..n {
            let (piv_row, piv_val) =
                (col..n)
                    .map(|r| (r, a[r * n + col].abs()))
                    .fold(
                        (col, -1.0),
                        |best, cur| if cur.1 > best.1 { cur } else { best },
                    );
            if piv_val < SINGULAR_PIVOT {
                return Err(NumericsError::Singular { pivot: piv_val });
            }
            if piv_row != col {
                for j in 0..n {
                    a.swap(col * n + j, piv_row * n + j);
                }
                for j in 0..m {
                    b.swap(col * m + j, piv_row * m + j);
                }
            }
            let p = a[col * n + col];
            for r in (col + 1)..n {
                let f = a[r * n + col] / p;
                if f == 0.0 {
                    continue;
                }
                for j in col..n {
                    a[r * n + j] -= f * a[col * n + j];
                }
                for j in 0..m {
                    b[r * m + j] -= f * b[col * m + j];
                }
            }
        }
        let mut x = vec![0.0; n * m];
        for r in (0..n).rev() {
            for j in 0..m {
                let mut acc = b[r * m + j];
                for k in (r + 1)..n {
                    acc -= a[r * n + k] * x[k * m + j];
                }
                x[r * m + j] = acc / a[r * n + r];
            }
        }
        Ok(Matrix::from_vec(n, m, x))
    }

    /// Copies `block` into `self` with its top-left corner at `(r0, c0)`.
    pub fn set_block(&mut self, r0: usize, c0: usize, block: &Matrix) {
        assert!(r0 + block.rows <= self.rows && c0 + block.cols <= self.cols);
        for i in 0..block.rows {
            for j in 0..block.cols {
                self[(r0 + i, c0 + j)] = block[(i, j)];
            }
        }
    }

    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Matrix {
        assert!(r0 + rows <= self.rows && c0 + cols <= self.cols);
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                out[(i, j)] = self[(r0 + i, c0 + j)];
            }
        }
        out
    }

    /// Estimate of the spectral radius from `‖M^k‖^{1/k}` with `k = 2^squarings`,
    /// i.e. power iteration on the matrix itself, computed by repeated squaring
    /// with renormalization to stay in range.
    pub fn spectral_radius(&self) -> f64 {
        assert!(self.is_square(), "spectral radius requires a square matrix");
        const SQUARINGS: u32 = 24;
        let mut m = self.clone();
        let mut log_scale = 0.0_f64;
        for _ in 0..SQUARINGS {
            let s = m.norm_inf();
            if s == 0.0 {
                return 0.0;
            }
            m = m.scale(1.0 / s);
            log_scale += s.ln();
            m = &m * &m;
            log_scale *= 2.0;
        }
        let s = m.norm_inf();
        if s == 0.0 {
            return 0.0;
        }
        ((log_scale + s.ln()) / f64::from(1u32 << SQUARINGS)).exp()
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", &self.data[i * self.cols..(i + 1) * self.cols])?;
        }
        write!(f, "]")
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl Mul for &Matrix {
    type Output = Matrix;
    fn mul(self, rhs: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, rhs.rows,
            "multiply dimension mismatch: {}x{} * {}x{}",
            self.rows, self.cols, rhs.rows, rhs.cols
        );
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                let dst = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (d, b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        out
    }
}

impl Add for &Matrix {
    type Output = Matrix;
    fn add(self, rhs: &Matrix) -> Matrix {
        assert!(
            self.rows == rhs.rows && self.cols == rhs.cols,
            "add dimension mismatch"
        );
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }
}

impl Sub for &Matrix {
    type Output = Matrix;
    fn sub(self, rhs: &Matrix) -> Matrix {
        assert!(
            self.rows == rhs.rows && self.cols == rhs.cols,
            "sub dimension mismatch"
        );
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }
}

impl Neg for &Matrix {
    type Output = Matrix;
    fn neg(self) -> Matrix {
        self.scale(-1.0)
    }
}

/// Zero-order-hold discretization of `ẋ = A x + B u`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSystem {
    pub a: Matrix,
    pub b: Matrix,
    pub dt: f64,
}

impl DiscreteSystem {
    pub fn new(a: Matrix, b: Matrix, dt: f64) -> Self {
        assert!(dt > 0.0, "dt must be positive");
        assert!(a.is_square(), "A_d must be square");
        assert_eq!(a.rows(), b.rows(), "B_d rows must match A_d");
        DiscreteSystem { a, b, dt }
    }

    pub fn states(&self) -> usize {
        self.a.rows()
    }

    pub fn inputs(&self) -> usize {
        self.b.cols()
    }
}

/// `A_d = exp(A·dt)` and `B_d = (∫₀^dt exp(As) ds)·B` by truncated power series.
pub fn discretize(a: &Matrix, b: &Matrix, dt: f64) -> Result<DiscreteSystem, NumericsError> {
    assert!(a.is_square(), "discretize requires square A");
    assert_eq!(a.rows(), b.rows(), "B rows must match A");
    if !(dt > 0.0 && dt <= 0.1) {
        return Err(NumericsError::InvalidStep { dt });
    }
    let n = a.rows();
    let ad = a.scale(dt);
    // exp term k: (A dt)^k / k!; integral term k: A^k dt^{k+1} / (k+1)! = exp term k · dt/(k+1)
    let mut term = Matrix::identity(n);
    let mut exp_sum = Matrix::identity(n);
    let mut int_sum = Matrix::identity(n).scale(dt);
    let mut converged = false;
    for k in 1..=SERIES_MAX_TERMS {
        term = (&term * &ad).scale(1.0 / k as f64);
        let int_term = term.scale(dt / (k + 1) as f64);
        exp_sum = &exp_sum + &term;
        int_sum = &int_sum + &int_term;
        if term.max_abs() < SERIES_TOL && int_term.max_abs() < SERIES_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(NumericsError::SeriesDivergence {
            terms: SERIES_MAX_TERMS,
        });
    }
    Ok(DiscreteSystem::new(exp_sum, &int_sum * b, dt))
}

/// One step of the discrete Riccati map
/// `Q + AᵀPA − AᵀPB (R + BᵀPB)⁻¹ BᵀPA`.
pub fn riccati_step(
    sys: &DiscreteSystem,
    q: &Matrix,
    r: &Matrix,
    p: &Matrix,
) -> Result<Matrix, NumericsError> {
    let at = sys.a.transpose();
    let bt = sys.b.transpose();
    let pa = p * &sys.a;
    let pb = p * &sys.b;
    let s = r + &(&bt * &pb);
    let gain = s.solve(&(&bt * &pa))?;
    let next = &(q + &(&at * &pa)) - &(&(&at * &pb) * &gain);
    Ok(next.symmetrized())
}

/// `K = (R + BᵀPB)⁻¹ BᵀPA`.
pub fn lqr_gain(sys: &DiscreteSystem, r: &Matrix, p: &Matrix) -> Result<Matrix, NumericsError> {
    let bt = sys.b.transpose();
    let s = r + &(&(&bt * p) * &sys.b);
    s.solve(&(&(&bt * p) * &sys.a))
}

/// Infinite-horizon discrete LQR by fixed-point iteration of the Riccati map
/// from `P₀ = Q`. Returns `(K, P)` with `u = −K x`.
pub fn dlqr(
    sys: &DiscreteSystem,
    q: &Matrix,
    r: &Matrix,
) -> Result<(Matrix, Matrix), NumericsError> {
    let n = sys.states();
    let m = sys.inputs();
    assert!(q.rows() == n && q.cols() == n, "Q must be {n}x{n}");
    assert!(r.rows() == m && r.cols() == m, "R must be {m}x{m}");

    let mut p = q.symmetrized();
    let mut residual = f64::INFINITY;
    let mut converged = false;
    for _ in 0..RICCATI_MAX_ITERS {
        let next = riccati_step(sys, q, r, &p)?;
        residual = (&next - &p).max_abs();
        p = next;
        if !residual.is_finite() {
            break;
        }
        if residual < RICCATI_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(NumericsError::Unstabilizable {
            iterations: RICCATI_MAX_ITERS,
            residual,
        });
    }
    let k = lqr_gain(sys, r, &p)?;
    let closed = &sys.a - &(&sys.b * &k);
    let radius = closed.spectral_radius();
    if !(radius < 1.0) {
        return Err(NumericsError::NotStabilizing { radius });
    }
    Ok((k, p))
}
