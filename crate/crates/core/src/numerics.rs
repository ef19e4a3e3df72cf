//! Minimal dense linear algebra and statistics.
//!
//! Row-major `f64` storage throughout. Sizes here are desk scale (hundreds,
//! not millions), so the implementations favor clarity over blocking or SIMD:
//! a straight triple-loop matmul and a power-iteration spectral norm are
//! accurate and fast enough for every caller in this crate.
//!
//! The module also hosts [`alloc_watch`], a thread-local log of matrix
//! allocations. Tests use it to prove that the sketched training path never
//! materializes a full `d x d` weight on the client side.

use crate::error::{Error, Result};

/// Thread-local log of `Matrix` allocations, for memory-contract tests.
///
/// While a watch is active, every `Matrix` allocation on the current thread
/// records its `(rows, cols)`. `Vector` allocations are not logged: the
/// compressed training path is allowed to hold full-length vectors, just not
/// full-size weight matrices.
pub mod alloc_watch {
    use std::cell::RefCell;

    thread_local! {
        static LOG: RefCell<Option<Vec<(usize, usize)>>> = const { RefCell::new(None) };
    }

    /// Starts recording matrix allocations on this thread.
    pub fn start() {
        LOG.with(|l| *l.borrow_mut() = Some(Vec::new()));
    }

    /// Stops recording and returns every `(rows, cols)` allocated since
    /// [`start`]. Returns an empty list if no watch was active.
    pub fn stop() -> Vec<(usize, usize)> {
        LOG.with(|l| l.borrow_mut().take().unwrap_or_default())
    }

    pub(crate) fn record(rows: usize, cols: usize) {
        LOG.with(|l| {
            if let Some(v) = l.borrow_mut().as_mut() {
                v.push((rows, cols));
            }
        });
    }
}

/// Dense row-major matrix. `data.len() == rows * cols` always holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// All-zeros matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        alloc_watch::record(rows, cols);
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Wraps an existing row-major buffer. Errors if the length does not
    /// match `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        alloc_watch::record(rows, cols);
        Ok(Matrix { rows, cols, data })
    }

    /// Builds from explicit rows. Errors if rows are ragged or empty.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput { op: "Matrix::from_rows" });
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("Matrix::from_rows", "ragged rows"));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), cols, data)
    }

    /// Identity matrix of order `n`.
    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
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

    /// Borrow of row `i` as a slice.
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// `self * other`. Errors on inner-dimension mismatch.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("{}x{} times {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * v`. Errors on dimension mismatch.
    pub fn matvec(&self, v: &Vector) -> Result<Vector> {
        if self.cols != v.len() {
            return Err(Error::shape(
                "matvec",
                format!("{}x{} times len {}", self.rows, self.cols, v.len()),
            ));
        }
        let mut out = Vector::zeros(self.rows);
        for i in 0..self.rows {
            let mut acc = 0.0;
            let row = self.row(i);
            for (a, b) in row.iter().zip(v.data()) {
                acc += a * b;
            }
            out.data[i] = acc;
        }
        Ok(out)
    }

    /// `self^T * v` without materializing the transpose.
    pub fn matvec_transposed(&self, v: &Vector) -> Result<Vector> {
        if self.rows != v.len() {
            return Err(Error::shape(
                "matvec_transposed",
                format!("{}x{} transposed times len {}", self.rows, self.cols, v.len()),
            ));
        }
        let mut out = Vector::zeros(self.cols);
        for i in 0..self.rows {
            let a = v.data[i];
            if a == 0.0 {
                continue;
            }
            for (o, &b) in out.data.iter_mut().zip(self.row(i)) {
                *o += a * b;
            }
        }
        Ok(out)
    }

    /// `self^T * other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "matmul_tn",
                format!(
                    "{}x{} transposed times {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            for i in 0..self.cols {
                let a = self.data[k * self.cols + i];
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "matmul_nt",
                format!(
                    "{}x{} times {}x{} transposed",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let arow = self.row(i);
            for j in 0..other.rows {
                let mut acc = 0.0;
                for (a, b) in arow.iter().zip(other.row(j)) {
                    acc += a * b;
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        Ok(out)
    }

    /// Transposed copy.
    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// In-place elementwise scaling.
    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        let mut out = self.clone_tracked();
        out.scale(s);
        out
    }

    /// `self += other`. Errors on shape mismatch.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.zip_assign("Matrix::add_assign", other, |a, b| a + b)
    }

    /// `self -= other`. Errors on shape mismatch.
    pub fn sub_assign(&mut self, other: &Matrix) -> Result<()> {
        self.zip_assign("Matrix::sub_assign", other, |a, b| a - b)
    }

    /// `self += alpha * other`. Errors on shape mismatch.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.zip_assign("Matrix::axpy", other, |a, b| a + alpha * b)
    }

    fn zip_assign(
        &mut self,
        op: &'static str,
        other: &Matrix,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(
                op,
                format!("{}x{} with {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = f(*a, b);
        }
        Ok(())
    }

    /// Frobenius inner product `<self, other>`.
    pub fn frob_inner(&self, other: &Matrix) -> Result<f64> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(
                "frob_inner",
                format!("{}x{} with {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Frobenius norm, `sqrt(sum of squares)`.
    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest absolute entry (0 for an empty matrix).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// True when every entry is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Clone that also reports to the allocation watch. `Clone::clone` is kept
    /// untracked so that test scaffolding can hold copies freely.
    pub fn clone_tracked(&self) -> Matrix {
        alloc_watch::record(self.rows, self.cols);
        self.clone()
    }
}

/// Dense `f64` vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn zeros(n: usize) -> Self {
        Vector { data: vec![0.0; n] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Vector { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        self.data[i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, v: f64) {
        self.data[i] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Euclidean norm.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::shape(
                "Vector::dot",
                format!("len {} with len {}", self.len(), other.len()),
            ));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn add_assign(&mut self, other: &Vector) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::shape(
                "Vector::add_assign",
                format!("len {} with len {}", self.len(), other.len()),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Vector) -> Result<Vector> {
        if self.len() != other.len() {
            return Err(Error::shape(
                "Vector::sub",
                format!("len {} with len {}", self.len(), other.len()),
            ));
        }
        Ok(Vector::from_vec(
            self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        ))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Outer product `u * v^T`.
pub fn outer(u: &Vector, v: &Vector) -> Matrix {
    let mut out = Matrix::zeros(u.len(), v.len());
    for i in 0..u.len() {
        let a = u.get(i);
        if a == 0.0 {
            continue;
        }
        for (o, &b) in out.row_mut(i).iter_mut().zip(v.data()) {
            *o = a * b;
        }
    }
    out
}

/// Result of a power-iteration spectral norm estimate.
#[derive(Debug, Clone, Copy)]
pub struct SpectralEstimate {
    /// Estimated largest singular value.
    pub value: f64,
    /// False when the iteration hit its cap before successive estimates
    /// settled within tolerance; `value` is then the best estimate so far.
    pub converged: bool,
    /// Iterations actually used.
    pub iterations: usize,
}

/// Largest singular value of `m` by power iteration on `m^T m`.
///
/// Convergence means two successive estimates within `tol * max(1, sigma)`.
/// For matrices whose top two singular values coincide the iterate still
/// converges in value, just not to a unique vector, so the estimate remains
/// valid. A zero matrix returns 0 immediately.
pub fn spectral_norm(m: &Matrix, max_iters: usize, tol: f64) -> SpectralEstimate {
    if m.frobenius_norm() == 0.0 {
        return SpectralEstimate { value: 0.0, converged: true, iterations: 0 };
    }
    // Deterministic pseudo-random start so the iterate is never exactly
    // orthogonal to the top singular subspace for structured inputs.
    let mut v = Vector::from_vec(
        (0..m.cols())
            .map(|j| {
                let bits = crate::seeding::mix64(0x5EED_0001 ^ j as u64);
                // Map to (-1, 1), avoiding exact zero.
                (bits >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0 + 1e-12
            })
            .collect(),
    );
    let norm = v.l2_norm();
    v.scale(1.0 / norm);

    let mut sigma_prev = f64::NAN;
    for it in 1..=max_iters {
        let w = m.matvec(&v).expect("spectral_norm: internal shape");
        let z = m.matvec_transposed(&w).expect("spectral_norm: internal shape");
        let zn = z.l2_norm();
        if zn == 0.0 {
            // v landed in the null space; the matrix is nonzero, so restart
            // from a shifted deterministic vector.
            let mut v2 = Vector::from_vec(
                (0..m.cols())
                    .map(|j| {
                        let bits = crate::seeding::mix64(0xBAD5_EED ^ (j as u64).wrapping_mul(3));
                        (bits >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0 + 1e-12
                    })
                    .collect(),
            );
            let n2 = v2.l2_norm();
            v2.scale(1.0 / n2);
            v = v2;
            continue;
        }
        let sigma = zn.sqrt();
        let settled =
            sigma_prev.is_finite() && (sigma - sigma_prev).abs() <= tol * sigma.max(1.0);
        if settled {
            return SpectralEstimate { value: sigma, converged: true, iterations: it };
        }
        sigma_prev = sigma;
        let mut next = z;
        next.scale(1.0 / zn);
        v = next;
    }
    SpectralEstimate { value: sigma_prev, converged: false, iterations: max_iters }
}

/// Median of a slice. Even lengths average the two middle order statistics.
/// Errors on empty input or non-finite entries.
pub fn median_of(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput { op: "median_of" });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("median_of"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("median_of: finite values"));
    let n = sorted.len();
    if n % 2 == 1 {
        Ok(sorted[n / 2])
    } else {
        Ok((sorted[n / 2 - 1] + sorted[n / 2]) / 2.0)
    }
}

/// Median plus the positions that produced it, for gradient routing.
///
/// Odd length: the single middle order statistic with weight 1. Even length:
/// the two middle order statistics with weight 1/2 each. Ties sort by
/// original index, so selection is deterministic. Returns `(median, picks)`
/// where each pick is `(original_index, weight)`.
pub fn median_with_sources(values: &[f64]) -> Result<(f64, Vec<(usize, f64)>)> {
    if values.is_empty() {
        return Err(Error::EmptyInput { op: "median_with_sources" });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("median_with_sources"));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .expect("median_with_sources: finite values")
            .then(a.cmp(&b))
    });
    let n = order.len();
    if n % 2 == 1 {
        let mid = order[n / 2];
        Ok((values[mid], vec![(mid, 1.0)]))
    } else {
        let lo = order[n / 2 - 1];
        let hi = order[n / 2];
        Ok(((values[lo] + values[hi]) / 2.0, vec![(lo, 0.5), (hi, 0.5)]))
    }
}

/// Index of the largest entry, lowest index on ties. `None` when empty.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            None => best = Some(i),
            Some(b) if v > values[b] => best = Some(i),
            _ => {}
        }
    }
    best
}
