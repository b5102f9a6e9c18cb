//! Small dense linear-algebra kernel: solve, Kronecker product, spectral
//! radius, and nonnegative least squares. Everything here operates on
//! matrices of a handful of rows and columns, so plain row-major storage
//! and O(n^3) algorithms are the right tool.

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
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
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "entry count must be rows*cols");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn add_at(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] += v;
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn is_nonnegative(&self) -> bool {
        self.data.iter().all(|&x| x >= 0.0)
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.add_at(i, j, a * other.get(k, j));
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "dimension mismatch");
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let mut acc = 0.0;
            for j in 0..self.cols {
                acc += self.get(i, j) * v[j];
            }
            out[i] = acc;
        }
        out
    }

    /// Max absolute entry.
    pub fn inf_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| x * s).collect(),
        }
    }

    /// (self + self') / 2; used to clean up numerically asymmetric inverses.
    pub fn symmetrized(&self) -> Matrix {
        assert!(self.is_square());
        let mut out = self.clone();
        for i in 0..self.rows {
            for j in 0..i {
                let v = 0.5 * (self.get(i, j) + self.get(j, i));
                out.set(i, j, v);
                out.set(j, i, v);
            }
        }
        out
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols))
            .map(|i| self.get(i, i))
            .collect()
    }
}

/// Solve A x = b by Gaussian elimination with partial pivoting, followed by
/// one step of iterative refinement.
pub fn solve(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    assert!(a.is_square(), "solve requires a square matrix");
    assert_eq!(a.rows(), b.len(), "rhs length mismatch");
    let x = solve_raw(a, b)?;
    // One refinement pass; residual is cheap at these sizes.
    let r: Vec<f64> = a
        .mul_vec(&x)
        .iter()
        .zip(b)
        .map(|(ax, bi)| bi - ax)
        .collect();
    let dx = solve_raw(a, &r)?;
    Ok(x.iter().zip(&dx).map(|(xi, di)| xi + di).collect())
}

fn solve_raw(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    let mut m = a.clone();
    let mut x = b.to_vec();
    // Row scales for the relative pivot test.
    let scales: Vec<f64> = (0..n)
        .map(|i| {
            (0..n)
                .fold(0.0f64, |s, j| s.max(m.get(i, j).abs()))
                .max(1e-300)
        })
        .collect();
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let (mut piv, mut best) = (k, m.get(perm[k], k).abs() / scales[perm[k]]);
        for i in (k + 1)..n {
            let v = m.get(perm[i], k).abs() / scales[perm[i]];
            if v > best {
                piv = i;
                best = v;
            }
        }
        if best < 1e-12 {
            return Err(Error::SingularMatrix(format!(
                "pivot {:.3e} below threshold at column {k}",
                m.get(perm[piv], k)
            )));
        }
        perm.swap(k, piv);
        let pk = perm[k];
        let d = m.get(pk, k);
        for i in (k + 1)..n {
            let pi = perm[i];
            let f = m.get(pi, k) / d;
            if f == 0.0 {
                continue;
            }
            m.set(pi, k, 0.0);
            for j in (k + 1)..n {
                m.add_at(pi, j, -f * m.get(pk, j));
            }
            x[pi] -= f * x[pk];
        }
    }
    let mut out = vec![0.0; n];
    for k in (0..n).rev() {
        let pk = perm[k];
        let mut acc = x[pk];
        for j in (k + 1)..n {
            acc -= m.get(pk, j) * out[j];
        }
        out[k] = acc / m.get(pk, k);
    }
    Ok(out)
}

/// Invert a small square matrix column by column.
pub fn invert(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    let mut out = Matrix::zeros(n, n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let col = solve(a, &e)?;
        for i in 0..n {
            out.set(i, j, col[i]);
        }
    }
    Ok(out)
}

/// Kronecker product: (pq) x (rs) block matrix with blocks a_ij * B.
pub fn kronecker(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows() * b.rows(), a.cols() * b.cols());
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            let aij = a.get(i, j);
            if aij == 0.0 {
                continue;
            }
            for k in 0..b.rows() {
                for l in 0..b.cols() {
                    out.set(i * b.rows() + k, j * b.cols() + l, aij * b.get(k, l));
                }
            }
        }
    }
    out
}

const POWER_ITER_CAP: usize = 10_000;

/// Largest eigenvalue modulus of a square matrix.
///
/// Nonnegative matrices take the power-iteration path with Rayleigh-quotient
/// stopping. Matrices with negative entries (Z-valued companion means) can
/// have a dominant complex pair, where power iteration cycles; those fall
/// through to a Gelfand norm-growth estimate, as do periodic nonnegative
/// companions that fail to settle.
pub fn spectral_radius(a: &Matrix) -> Result<f64> {
    assert!(a.is_square(), "spectral radius requires a square matrix");
    let n = a.rows();
    if n == 0 {
        return Ok(0.0);
    }
    if a.inf_norm() == 0.0 {
        return Ok(0.0);
    }
    if !a.data.iter().all(|x| x.is_finite()) {
        return Err(Error::NumericalBreakdown("non-finite matrix entry".into()));
    }
    if a.is_nonnegative() {
        if let Some(rho) = power_iteration(a) {
            return Ok(rho);
        }
    }
    gelfand_radius(a)
}

fn power_iteration(a: &Matrix) -> Option<f64> {
    let n = a.rows();
    let mut v = vec![1.0; n];
    let mut lambda_prev = f64::NAN;
    for _ in 0..POWER_ITER_CAP {
        let av = a.mul_vec(&v);
        let norm = av.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        if norm == 0.0 {
            // Nilpotent action on the current vector.
            return Some(0.0);
        }
        let vv: f64 = v.iter().map(|x| x * x).sum();
        let vav: f64 = v.iter().zip(&av).map(|(x, y)| x * y).sum();
        let lambda = vav / vv;
        for (vi, avi) in v.iter_mut().zip(&av) {
            *vi = avi / norm;
        }
        if (lambda - lambda_prev).abs() <= 1e-10 * lambda.abs().max(1.0) {
            return Some(lambda.abs());
        }
        lambda_prev = lambda;
    }
    None
}

/// rho = lim ||A^(2^j)||^(1/2^j) by repeated squaring with renormalization.
fn gelfand_radius(a: &Matrix) -> Result<f64> {
    let s0 = a.inf_norm();
    let mut b = a.scale(1.0 / s0);
    let mut log_norm = s0.ln(); // log ||A^(2^j)|| with ||b|| == 1
    let mut prev = f64::NAN;
    for j in 1..=64u32 {
        let c = b.matmul(&b);
        let s = c.inf_norm();
        if s == 0.0 {
            return Ok(0.0);
        }
        b = c.scale(1.0 / s);
        log_norm = 2.0 * log_norm + s.ln();
        let rho = (log_norm / (1u64 << j) as f64).exp();
        if !rho.is_finite() {
            return Err(Error::NoConvergence {
                iterations: j as usize,
                context: "spectral radius squaring produced non-finite value".into(),
            });
        }
        if j > 8 && (rho - prev).abs() <= 1e-12 * rho.max(1e-300) {
            return Ok(rho);
        }
        prev = rho;
    }
    Ok(prev)
}

/// Nonnegative least squares solution with its active set.
#[derive(Debug, Clone)]
pub struct NnlsSolution {
    pub x: Vec<f64>,
    /// true where the nonnegativity constraint is binding (x_j forced to 0).
    pub active: Vec<bool>,
}

/// Lawson-Hanson active-set method for min ||Ax - b||_2 subject to x >= 0.
pub fn nnls(a: &Matrix, b: &[f64]) -> Result<NnlsSolution> {
    assert_eq!(a.rows(), b.len(), "rhs length mismatch");
    let m = a.rows();
    let nv = a.cols();

    // Column equilibration keeps the normal-equation subproblems sane when
    // regressors mix 1 and Y^2 scales.
    let mut col_scale = vec![1.0; nv];
    for (j, cs) in col_scale.iter_mut().enumerate() {
        let norm: f64 = (0..m).map(|i| a.get(i, j).powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            *cs = norm;
        }
    }

    let mut passive = vec![false; nv];
    let mut x = vec![0.0; nv]; // scaled coordinates
    let b_norm: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dual_tol = 1e-10 * b_norm.max(1.0);
    let cap = 50 + 10 * nv * nv;

    for _outer in 0..cap {
        // Dual vector w = A'(b - Ax) in scaled coordinates.
        let mut resid = b.to_vec();
        for j in 0..nv {
            if x[j] != 0.0 {
                for (i, ri) in resid.iter_mut().enumerate() {
                    *ri -= a.get(i, j) / col_scale[j] * x[j];
                }
            }
        }
        let mut best: Option<(usize, f64)> = None;
        for j in 0..nv {
            if passive[j] {
                continue;
            }
            let wj: f64 = (0..m).map(|i| a.get(i, j) / col_scale[j] * resid[i]).sum();
            if wj > dual_tol && best.map(|(_, bw)| wj > bw).unwrap_or(true) {
                best = Some((j, wj));
            }
        }
        let Some((jstar, _)) = best else {
            // KKT satisfied.
            let xs: Vec<f64> = x.iter().zip(&col_scale).map(|(v, s)| v / s).collect();
            let active: Vec<bool> = xs.iter().map(|&v| v == 0.0).collect();
            return Ok(NnlsSolution { x: xs, active });
        };
        passive[jstar] = true;

        // Inner loop: restore feasibility of the passive-set LS solution.
        for _inner in 0..cap {
            let z = passive_ls(a, b, &passive, &col_scale)?;
            let mut alpha = f64::INFINITY;
            let mut blocking = None;
            for j in 0..nv {
                if passive[j] && z[j] <= 0.0 {
                    let t = x[j] / (x[j] - z[j]);
                    if t < alpha {
                        alpha = t;
                        blocking = Some(j);
                    }
                }
            }
            match blocking {
                None => {
                    x = z;
                    break;
                }
                Some(_) => {
                    for j in 0..nv {
                        if passive[j] {
                            x[j] += alpha * (z[j] - x[j]);
                            if x[j] <= 1e-14 {
                                x[j] = 0.0;
                                passive[j] = false;
                            }
                        }
                    }
                }
            }
        }
    }
    Err(Error::NoConvergence {
        iterations: cap,
        context: "nnls active-set cycling".into(),
    })
}

/// Least squares restricted to passive columns via normal equations.
fn passive_ls(a: &Matrix, b: &[f64], passive: &[bool], col_scale: &[f64]) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..a.cols()).filter(|&j| passive[j]).collect();
    let k = idx.len();
    let m = a.rows();
    let mut gram = Matrix::zeros(k, k);
    let mut rhs = vec![0.0; k];
    for (p, &jp) in idx.iter().enumerate() {
        for (q, &jq) in idx.iter().enumerate().take(p + 1) {
            let mut acc = 0.0;
            for i in 0..m {
                acc += a.get(i, jp) / col_scale[jp] * a.get(i, jq) / col_scale[jq];
            }
            gram.set(p, q, acc);
            gram.set(q, p, acc);
        }
        rhs[p] = (0..m).map(|i| a.get(i, jp) / col_scale[jp] * b[i]).sum();
    }
    let z = solve(&gram, &rhs)?;
    let mut out = vec![0.0; a.cols()];
    for (p, &j) in idx.iter().enumerate() {
        out[j] = z[p];
    }
    Ok(out)
}
