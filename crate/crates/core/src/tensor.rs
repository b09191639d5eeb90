//! Dense row-major `f64` matrices.
//!
//! Everything in the crate (activations, weights, relevances, gradients) is
//! carried by [`Matrix`]. There are no views or strides; operations allocate.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, left is {left:?}, right is {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix of {rows}x{cols} needs {expected} values, got {actual}")]
    BadLength {
        rows: usize,
        cols: usize,
        expected: usize,
        actual: usize,
    },
    #[error("matrix dimensions must be positive, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// `x + eps * sign(x)` with `sign(0) = +1`, so the result is never zero for `eps > 0`.
#[inline]
pub fn stabilize(x: f64, eps: f64) -> f64 {
    if x >= 0.0 {
        x + eps
    } else {
        x - eps
    }
}

/// Per-entry binary operations supported by [`Matrix::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    /// `a / (b + eps * sign(b))`.
    StabilizedDiv(f64),
}

impl Elementwise {
    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Elementwise::Add => a + b,
            Elementwise::Sub => a - b,
            Elementwise::Mul => a * b,
            Elementwise::StabilizedDiv(eps) => a / stabilize(b, eps),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Elementwise::Add => "add",
            Elementwise::Sub => "sub",
            Elementwise::Mul => "mul",
            Elementwise::StabilizedDiv(_) => "stabilized_div",
        }
    }
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(TensorError::EmptyShape { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(TensorError::BadLength {
                rows,
                cols,
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged or empty input; meant
    /// for literals in code and tests.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        assert!(!rows.is_empty() && !rows[0].is_empty(), "empty matrix literal");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged matrix literal");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self::new(1, values.len(), values.to_vec()).expect("row vector must be nonempty")
    }

    pub fn column_vector(values: &[f64]) -> Self {
        Self::new(values.len(), 1, values.to_vec()).expect("column vector must be nonempty")
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let cols = self.cols;
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (n, m) = (self.rows, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for (p, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(p)) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix {
            rows: n,
            cols: m,
            data: out,
        })
    }

    /// `self^T * other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(TensorError::ShapeMismatch {
                op: "t_matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (n, m) = (self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for p in 0..self.rows {
            let b_row = other.row(p);
            for (i, &a) in self.row(p).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out[i * m..(i + 1) * m].iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix {
            rows: n,
            cols: m,
            data: out,
        })
    }

    /// `self * other^T` without materializing the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_t",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (n, m) = (self.rows, other.rows);
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let a = self.row(i);
            for j in 0..m {
                out.push(dot(a, other.row(j)));
            }
        }
        Ok(Matrix {
            rows: n,
            cols: m,
            data: out,
        })
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Matrix {
        let mut out = self.clone();
        for r in 0..out.rows {
            softmax_in_place(out.row_mut(r));
        }
        out
    }

    pub fn elementwise(&self, other: &Matrix, op: Elementwise) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op: op.name(),
                left: self.shape(),
                right: other.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| op.apply(a, b))
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.elementwise(other, Elementwise::Add)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.elementwise(other, Elementwise::Sub)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.elementwise(other, Elementwise::Mul)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add_assign",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).iter().sum()).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{}) [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            if r > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        if self.rows > 8 {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Matrix::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c, Matrix::from_rows(&[&[19.0, 22.0], &[43.0, 50.0]]));
    }

    #[test]
    fn matmul_identity_and_zero() {
        let m = Matrix::from_rows(&[&[1.5, -2.0], &[0.25, 4.0]]);
        assert_eq!(Matrix::identity(2).matmul(&m).unwrap(), m);
        assert_eq!(Matrix::zeros(2, 2).matmul(&m).unwrap(), Matrix::zeros(2, 2));
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let err = Matrix::zeros(2, 3).matmul(&Matrix::zeros(2, 3)).unwrap_err();
        assert!(err.to_string().contains("matmul"));
        assert!(matches!(err, TensorError::ShapeMismatch { left: (2, 3), right: (2, 3), .. }));
    }

    #[test]
    fn matmul_matches_naive_on_random_8x8() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = random(&mut rng, 8, 8);
            let b = random(&mut rng, 8, 8);
            assert!(a.matmul(&b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        }
    }

    #[test]
    fn transposed_products_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 5, 3);
        let b = random(&mut rng, 5, 4);
        let c = random(&mut rng, 6, 3);
        assert!(a.t_matmul(&b).unwrap().max_abs_diff(&a.transpose().matmul(&b).unwrap()) < 1e-14);
        assert!(a.matmul_t(&c).unwrap().max_abs_diff(&a.matmul(&c.transpose()).unwrap()) < 1e-14);
    }

    #[test]
    fn softmax_examples() {
        let s = Matrix::from_rows(&[&[0.0, 0.0, 0.0]]).softmax_rows();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = Matrix::from_rows(&[&[1000.0, 0.0]]).softmax_rows();
        assert!((s.get(0, 0) - 1.0).abs() < 1e-12 && s.get(0, 1).abs() < 1e-12);
        let s = Matrix::from_rows(&[&[0.0, 2f64.ln()]]).softmax_rows();
        assert!((s.get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.get(0, 1) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn elementwise_examples() {
        let m = Matrix::from_rows(&[&[1.0, -2.0]]);
        assert_eq!(m.add(&Matrix::zeros(1, 2)).unwrap(), m);
        let one = Matrix::from_rows(&[&[1.0]]);
        let zero = Matrix::from_rows(&[&[0.0]]);
        let q = one.elementwise(&zero, Elementwise::StabilizedDiv(1e-6)).unwrap();
        assert!((q.get(0, 0) - 1e6).abs() < 1e-6);
        let six = Matrix::from_rows(&[&[6.0]]);
        let twelve = Matrix::from_rows(&[&[12.0]]);
        let q = six.elementwise(&twelve, Elementwise::StabilizedDiv(1e-6)).unwrap();
        assert!((q.get(0, 0) - 6.0 / (12.0 + 1e-6)).abs() < 1e-15);
        assert!(q.get(0, 0) < 0.5);
        assert!(m.add(&Matrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn stabilizer_sign_convention() {
        assert_eq!(stabilize(0.0, 0.5), 0.5);
        assert_eq!(stabilize(-1.0, 0.5), -1.5);
        assert_eq!(stabilize(2.0, 0.5), 2.5);
    }

    #[test]
    fn constructor_checks() {
        assert!(matches!(Matrix::new(2, 2, vec![0.0; 3]), Err(TensorError::BadLength { .. })));
        assert!(matches!(Matrix::new(0, 2, vec![]), Err(TensorError::EmptyShape { .. })));
    }

    fn matrix_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        prop::collection::vec(-50.0f64..50.0, rows * cols)
            .prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(m in (1usize..6, 1usize..9).prop_flat_map(|(r, c)| matrix_strategy(r, c))) {
            let s = m.softmax_rows();
            for r in 0..s.rows() {
                let total: f64 = s.row(r).iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                prop_assert!(s.row(r).iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn matmul_is_associative(
            a in matrix_strategy(3, 4),
            b in matrix_strategy(4, 5),
            c in matrix_strategy(5, 2),
        ) {
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.max_abs().max(1.0);
            prop_assert!(left.max_abs_diff(&right) < 1e-9 * scale);
        }
    }
}
