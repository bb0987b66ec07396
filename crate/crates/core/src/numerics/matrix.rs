use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PamError, Result};

/// Output rows per parallel task. Fixed so that the partition, and therefore
/// every floating-point reduction, is independent of the thread count.
const ROW_BLOCK: usize = 32;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
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
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(PamError::shape(
                "Matrix::from_vec",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(PamError::shape(
                    "Matrix::from_rows",
                    format!("row {i} has length {}, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Gathers the given rows of `self` into a new matrix.
    pub fn select_rows(&self, ids: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(ids.len() * self.cols);
        for &i in ids {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: ids.len(),
            cols: self.cols,
            data,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[f64]) {
        debug_assert_eq!(bias.len(), self.cols);
        for row in self.data.chunks_exact_mut(self.cols) {
            for (x, b) in row.iter_mut().zip(bias) {
                *x += b;
            }
        }
    }

    /// Column sums, accumulated in row order.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.row_iter() {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Rounds every entry to the nearest `f32`, the on-disk precision.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}

#[derive(Clone, Copy)]
enum Layout {
    Normal,
    Transposed,
}

/// Strides `(row, col)` of the logical operand.
fn strides(m: &Matrix, layout: Layout) -> (isize, isize) {
    match layout {
        Layout::Normal => (m.cols as isize, 1),
        Layout::Transposed => (1, m.cols as isize),
    }
}

fn logical_shape(m: &Matrix, layout: Layout) -> (usize, usize) {
    match layout {
        Layout::Normal => (m.rows, m.cols),
        Layout::Transposed => (m.cols, m.rows),
    }
}

fn gemm(op: &'static str, a: &Matrix, la: Layout, b: &Matrix, lb: Layout) -> Result<Matrix> {
    let (m, k) = logical_shape(a, la);
    let (k2, n) = logical_shape(b, lb);
    if k != k2 {
        return Err(PamError::shape(
            op,
            format!("inner dimensions differ: {m}x{k} times {k2}x{n}"),
        ));
    }
    let mut out = Matrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return Ok(out);
    }
    let (rsa, csa) = strides(a, la);
    let (rsb, csb) = strides(b, lb);
    out.data
        .par_chunks_mut(ROW_BLOCK * n)
        .enumerate()
        .for_each(|(block, c_chunk)| {
            let row0 = block * ROW_BLOCK;
            let rows = c_chunk.len() / n;
            // SAFETY: every pointer/stride pair addresses memory inside the
            // borrowed slices: rows row0..row0+rows of the logical A (m x k),
            // all of the logical B (k x n), and the exclusive C chunk.
            unsafe {
                let a_ptr = a.data.as_ptr().offset(row0 as isize * rsa);
                matrixmultiply::dgemm(
                    rows,
                    k,
                    n,
                    1.0,
                    a_ptr,
                    rsa,
                    csa,
                    b.data.as_ptr(),
                    rsb,
                    csb,
                    0.0,
                    c_chunk.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        });
    Ok(out)
}

/// `a · b`
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    gemm("matmul", a, Layout::Normal, b, Layout::Normal)
}

/// `aᵀ · b`
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    gemm("matmul_tn", a, Layout::Transposed, b, Layout::Normal)
}

/// `a · bᵀ`
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    gemm("matmul_nt", a, Layout::Normal, b, Layout::Transposed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Domain};
    use rand::Rng;

    fn random(rows: usize, cols: usize, stream: u64) -> Matrix {
        let mut rng = substream(7, Domain::Init, stream);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn identity_is_neutral() {
        let a = random(4, 4, 0);
        assert_eq!(matmul(&Matrix::identity(4), &a).unwrap(), a);
    }

    #[test]
    fn scalar_product() {
        let a = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        let b = Matrix::from_vec(1, 1, vec![3.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().as_slice(), &[6.0]);
    }

    #[test]
    fn matches_naive_loop() {
        let a = random(7, 5, 1);
        let b = random(5, 3, 2);
        let fast = matmul(&a, &b).unwrap();
        let slow = naive(&a, &b);
        for (x, y) in fast.as_slice().iter().zip(slow.as_slice()) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn transposed_variants_match_explicit_transpose() {
        let a = random(9, 6, 3);
        let b = random(9, 4, 4);
        let c = random(5, 6, 5);
        let tn = matmul_tn(&a, &b).unwrap();
        let tn_ref = naive(&a.transpose(), &b);
        let nt = matmul_nt(&a, &c).unwrap();
        let nt_ref = naive(&a, &c.transpose());
        for (x, y) in tn.as_slice().iter().zip(tn_ref.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in nt.as_slice().iter().zip(nt_ref.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = random(2, 3, 6);
        let b = random(2, 3, 7);
        assert!(matches!(matmul(&a, &b), Err(PamError::Shape { .. })));
    }

    #[test]
    fn result_is_independent_of_thread_count() {
        let a = random(130, 70, 8);
        let b = random(70, 90, 9);
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool4 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let one = pool1.install(|| matmul(&a, &b).unwrap());
        let four = pool4.install(|| matmul(&a, &b).unwrap());
        assert_eq!(one, four);
        // A single row block computed on its own must agree bit for bit too.
        let head = a.select_rows(&(0..ROW_BLOCK).collect::<Vec<_>>());
        let head_out = matmul(&head, &b).unwrap();
        assert_eq!(head_out.row(5), one.row(5));
    }
}
