//! Dense row-major matrices and a one-sided Jacobi SVD.
//!
//! Everything here runs in `f64` with a fixed accumulation order, so the same
//! input always produces bit-identical output regardless of thread count.

use std::fmt;

use crate::error::{Error, Result};

/// Sweep cap for the Jacobi iteration.
pub const MAX_SWEEPS: usize = 100;

/// Off-diagonal threshold, relative to `‖M‖_F`.
const OFF_DIAGONAL_TOL: f64 = 1e-12;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting bad lengths and NaN/Inf.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / cols.max(1),
                col: pos % cols.max(1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        Self::from_fn(n, n, |r, c| if r == c { values[r] } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scale(&self, k: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// Columns in the given order, as a new `rows × idx.len()` matrix.
    pub fn select_columns(&self, idx: &[usize]) -> Result<Matrix> {
        if let Some(&bad) = idx.iter().find(|&&c| c >= self.cols) {
            return Err(Error::Shape(format!(
                "column {bad} out of range for {} columns",
                self.cols
            )));
        }
        Ok(Matrix::from_fn(self.rows, idx.len(), |r, c| {
            self.get(r, idx[c])
        }))
    }

    /// Contiguous column block `[start, end)`.
    pub fn column_block(&self, start: usize, end: usize) -> Result<Matrix> {
        if start > end || end > self.cols {
            return Err(Error::Shape(format!(
                "column block {start}..{end} out of range for {} columns",
                self.cols
            )));
        }
        Ok(Matrix::from_fn(self.rows, end - start, |r, c| {
            self.get(r, start + c)
        }))
    }

    /// Contiguous row block `[start, end)`.
    pub fn row_block(&self, start: usize, end: usize) -> Result<Matrix> {
        if start > end || end > self.rows {
            return Err(Error::Shape(format!(
                "row block {start}..{end} out of range for {} rows",
                self.rows
            )));
        }
        Ok(Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        })
    }

    /// Horizontal concatenation `[a ‖ b ‖ ...]`.
    pub fn hconcat(parts: &[&Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |m| m.rows);
        if parts.iter().any(|m| m.rows != rows) {
            return Err(Error::Shape("hconcat needs equal row counts".into()));
        }
        let cols = parts.iter().map(|m| m.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for m in parts {
                data.extend_from_slice(m.row(r));
            }
        }
        Ok(Matrix { rows, cols, data })
    }
}

/// `a · b` with a fixed `i, k, j` loop order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let dst = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            for (d, bkj) in dst.iter_mut().zip(b.row(k)) {
                *d += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Row vector times matrix, `x · m`.
pub fn vecmat(x: &[f64], m: &Matrix) -> Result<Vec<f64>> {
    if x.len() != m.rows {
        return Err(Error::Shape(format!(
            "vector of length {} against {}x{} matrix",
            x.len(),
            m.rows,
            m.cols
        )));
    }
    let mut out = vec![0.0; m.cols];
    for (k, &xk) in x.iter().enumerate() {
        for (o, mkj) in out.iter_mut().zip(m.row(k)) {
            *o += xk * mkj;
        }
    }
    Ok(out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvdResult {
    /// `m × m`, orthogonal.
    pub u: Matrix,
    /// Non-increasing, non-negative; length `min(m, n)`.
    pub sigma: Vec<f64>,
    /// `n × n`, rows are right singular vectors.
    pub vt: Matrix,
}

impl SvdResult {
    /// `U · diag(σ) · Vᵀ` using the thin part of `U` and `Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let (m, n) = (self.u.rows, self.vt.cols);
        let k = self.sigma.len();
        Matrix::from_fn(m, n, |r, c| {
            (0..k)
                .map(|i| self.u.get(r, i) * self.sigma[i] * self.vt.get(i, c))
                .sum()
        })
    }
}

/// Full SVD by one-sided (Hestenes) Jacobi rotations.
///
/// Left singular vectors are sign-normalized so that the largest-magnitude
/// entry of each column of `u` is positive (first such entry on ties).
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if m.rows == 0 || m.cols == 0 {
        return Err(Error::Shape("svd of an empty matrix".into()));
    }
    if let Some(pos) = m.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            row: pos / m.cols,
            col: pos % m.cols,
        });
    }

    let (mut u, sigma, mut vt) = if m.rows >= m.cols {
        let (u, s, v) = jacobi_tall(m)?;
        (u, s, v.transpose())
    } else {
        // Mᵀ = U' Σ V'ᵀ  ⇒  M = V' Σ U'ᵀ
        let (u_t, s, v_t) = jacobi_tall(&m.transpose())?;
        (v_t, s, u_t.transpose())
    };

    for j in 0..u.cols {
        let mut best = 0;
        for i in 1..u.rows {
            if u.get(i, j).abs() > u.get(best, j).abs() {
                best = i;
            }
        }
        if u.get(best, j) < 0.0 {
            for i in 0..u.rows {
                u.set(i, j, -u.get(i, j));
            }
            if j < vt.rows {
                for c in 0..vt.cols {
                    vt.set(j, c, -vt.get(j, c));
                }
            }
        }
    }

    Ok(SvdResult { u, sigma, vt })
}

/// Jacobi on a tall (`rows >= cols`) matrix. Returns full `U` (m×m), `σ`, and
/// `V` (n×n, columns are right singular vectors).
fn jacobi_tall(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let (m, n) = a.shape();
    let mut w: Vec<Vec<f64>> = (0..n).map(|c| a.column(c)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|c| (0..n).map(|r| if r == c { 1.0 } else { 0.0 }).collect())
        .collect();

    let norm = a.frobenius_norm();
    let abs_floor = (OFF_DIAGONAL_TOL * norm).powi(2);
    let rel_tol = f64::EPSILON * m as f64;

    let mut converged = norm == 0.0;
    let mut residual = 0.0;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        residual = 0.0_f64;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q], &w[q]);
                let gamma = dot(&w[p], &w[q]);
                let scale = (alpha * beta).sqrt();
                if gamma.abs() <= abs_floor || gamma.abs() <= rel_tol * scale {
                    continue;
                }
                residual = residual.max(gamma.abs() / scale);
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut w, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            sweeps: MAX_SWEEPS,
            residual,
        });
    }

    let norms: Vec<f64> = w.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let sigma: Vec<f64> = order.iter().map(|&i| norms[i]).collect();
    let sigma_max = sigma[0];
    let negligible = sigma_max * f64::EPSILON * (m.max(n) as f64);

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(m);
    for &i in &order {
        if norms[i] > negligible && norms[i] > 0.0 {
            u_cols.push(w[i].iter().map(|x| x / norms[i]).collect());
        } else {
            break;
        }
    }
    complete_basis(&mut u_cols, m);

    let u = Matrix::from_fn(m, m, |r, c| u_cols[c][r]);
    let v_sorted = Matrix::from_fn(n, n, |r, c| v[order[c]][r]);
    Ok((u, sigma, v_sorted))
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Extends orthonormal columns to a basis of `ℝ^dim` with Gram–Schmidt over
/// the standard basis, in index order.
fn complete_basis(cols: &mut Vec<Vec<f64>>, dim: usize) {
    let mut e = 0;
    while cols.len() < dim && e < dim {
        let mut cand = vec![0.0; dim];
        cand[e] = 1.0;
        for _ in 0..2 {
            for c in cols.iter() {
                let proj = dot(&cand, c);
                for (x, y) in cand.iter_mut().zip(c) {
                    *x -= proj * y;
                }
            }
        }
        let len = dot(&cand, &cand).sqrt();
        if len > 1e-6 {
            cols.push(cand.into_iter().map(|x| x / len).collect());
        }
        e += 1;
    }
}

/// Rank-`r` truncation `a = U[:, :r]`, `b = (Σ Vᵀ)[:r, :]`.
pub fn truncated_factors(m: &Matrix, r: usize) -> Result<(Matrix, Matrix)> {
    let max = m.rows.min(m.cols);
    if r == 0 || r > max {
        return Err(Error::Rank {
            rank: r,
            min: 1,
            max,
        });
    }
    let s = svd(m)?;
    Ok(factors_from_svd(&s, r))
}

/// Splits an existing decomposition at rank `r` (caller checks bounds).
pub fn factors_from_svd(s: &SvdResult, r: usize) -> (Matrix, Matrix) {
    let a = Matrix::from_fn(s.u.rows, r, |i, j| s.u.get(i, j));
    let b = Matrix::from_fn(r, s.vt.cols, |i, j| s.sigma[i] * s.vt.get(i, j));
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn lcg_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut s = seed;
        Matrix::from_fn(rows, cols, |_, _| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(matches!(
            Matrix::new(2, 2, vec![1.0; 3]),
            Err(Error::Shape(_))
        ));
        assert_eq!(
            Matrix::new(2, 2, vec![1.0, 2.0, f64::NAN, 0.0]),
            Err(Error::NonFinite { row: 1, col: 0 })
        );
    }

    #[test]
    fn matmul_small_cases() {
        let a = lcg_matrix(3, 4, 1);
        assert_eq!(matmul(&Matrix::identity(3), &a).unwrap(), a);
        let p = matmul(&m(&[&[1., 2.], &[3., 4.]]), &m(&[&[0., 1.], &[1., 0.]])).unwrap();
        assert_eq!(p, m(&[&[2., 1.], &[4., 3.]]));
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn svd_diagonal_and_rank_one() {
        let s = svd(&Matrix::diag(&[3.0, 2.0, 1.0])).unwrap();
        assert_eq!(s.sigma, vec![3.0, 2.0, 1.0]);

        let u = [1.0, -2.0, 2.0];
        let v = [3.0, 4.0];
        let outer = Matrix::from_fn(3, 2, |i, j| u[i] * v[j]);
        let s = svd(&outer).unwrap();
        assert!((s.sigma[0] - 15.0).abs() < 1e-12);
        assert!(s.sigma[1].abs() < 1e-12);
    }

    #[test]
    fn svd_sign_convention_and_wide_input() {
        let a = lcg_matrix(4, 9, 7);
        let s = svd(&a).unwrap();
        assert_eq!(s.u.shape(), (4, 4));
        assert_eq!(s.vt.shape(), (9, 9));
        for j in 0..4 {
            let col = s.u.column(j);
            let best = col
                .iter()
                .enumerate()
                .fold(0, |b, (i, x)| if x.abs() > col[b].abs() { i } else { b });
            assert!(col[best] > 0.0);
        }
        let err = s.reconstruct().sub(&a).unwrap().frobenius_norm();
        assert!(err <= 1e-8 * a.frobenius_norm());
    }

    #[test]
    fn svd_zero_matrix() {
        let s = svd(&Matrix::zeros(3, 2)).unwrap();
        assert_eq!(s.sigma, vec![0.0, 0.0]);
        let utu = matmul(&s.u.transpose(), &s.u).unwrap();
        assert!(utu.sub(&Matrix::identity(3)).unwrap().frobenius_norm() < 1e-12);
    }

    #[test]
    fn truncated_rank_bounds() {
        let a = lcg_matrix(4, 3, 3);
        assert_eq!(
            truncated_factors(&a, 0),
            Err(Error::Rank {
                rank: 0,
                min: 1,
                max: 3
            })
        );
        assert!(truncated_factors(&a, 4).is_err());
        let (fa, fb) = truncated_factors(&a, 2).unwrap();
        assert_eq!(fa.shape(), (4, 2));
        assert_eq!(fb.shape(), (2, 3));
    }

    #[test]
    fn select_and_concat() {
        let a = m(&[&[1., 2., 3.], &[4., 5., 6.]]);
        let sel = a.select_columns(&[2, 0]).unwrap();
        assert_eq!(sel, m(&[&[3., 1.], &[6., 4.]]));
        let cat = Matrix::hconcat(&[&a, &sel]).unwrap();
        assert_eq!(cat.row(1), &[4., 5., 6., 6., 4.]);
        assert_eq!(cat.column_block(3, 5).unwrap(), sel);
        assert!(a.select_columns(&[3]).is_err());
    }
}
