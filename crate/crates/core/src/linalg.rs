//! Dense row-major `f64` matrices.
//!
//! Every reduction accumulates left to right in index order, so results are
//! bitwise reproducible for identical inputs. Nothing here reassociates sums.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TdnError};

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Entrywise nonlinearities used by the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative at pre-activation `x` given the already computed output `y`.
    /// The ReLU subgradient at exactly zero is zero.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }

    pub fn code(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Sigmoid => 2,
            Activation::Identity => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Sigmoid),
            3 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Logistic function, evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
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
            return Err(TdnError::validation(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
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

    pub fn row_vector(values: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    /// Uniform entries in `[-bound, bound)`.
    pub fn random_uniform<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Matrix { rows, cols, data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn max(&self) -> Option<f64> {
        self.data.iter().copied().reduce(f64::max)
    }

    pub fn min(&self) -> Option<f64> {
        self.data.iter().copied().reduce(f64::min)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(TdnError::shape("matmul", self.shape(), other.shape()));
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(n, m);
        // i-p-j loop order keeps every out[i][j] a left-to-right sum over p.
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out.data[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_transposed(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(TdnError::shape(
                "matmul_transposed",
                self.shape(),
                other.shape(),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(self.row(i), other.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn transposed_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(TdnError::shape(
                "transposed_matmul",
                self.shape(),
                other.shape(),
            ));
        }
        let (k, n, m) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(n, m);
        for p in 0..k {
            let a_row = self.row(p);
            let b_row = other.row(p);
            for (i, &a) in a_row.iter().enumerate() {
                let out_row = &mut out.data[i * m..(i + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(TdnError::shape(op, self.shape(), other.shape()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(TdnError::shape("add_assign", self.shape(), other.shape()));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
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

    pub fn map_elementwise(&self, act: Activation) -> Matrix {
        self.map(|v| act.apply(v))
    }

    /// Column vector (N×1) of row sums.
    pub fn row_sums(&self) -> Matrix {
        let data = (0..self.rows).map(|i| self.row(i).iter().sum()).collect();
        Matrix {
            rows: self.rows,
            cols: 1,
            data,
        }
    }

    /// Row vector (1×d) of column sums, accumulated top to bottom.
    pub fn col_sums(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for i in 0..self.rows {
            for (o, &v) in out.data.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        out
    }

    pub fn mean_over_rows(&self) -> Result<Matrix> {
        if self.rows == 0 {
            return Err(TdnError::EmptyInput("mean_over_rows of a matrix with no rows"));
        }
        Ok(self.col_sums().scale(1.0 / self.rows as f64))
    }

    /// Adds a 1×d row to every row.
    pub fn broadcast_add_row(&self, row: &Matrix) -> Result<Matrix> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(TdnError::shape("broadcast_add_row", self.shape(), row.shape()));
        }
        let mut out = self.clone();
        for i in 0..out.rows {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&row.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    pub fn horizontal_concat(blocks: &[Matrix]) -> Result<Matrix> {
        let Some(first) = blocks.first() else {
            return Err(TdnError::EmptyInput("horizontal_concat of zero blocks"));
        };
        let rows = first.rows;
        if let Some(bad) = blocks.iter().find(|b| b.rows != rows) {
            return Err(TdnError::shape("horizontal_concat", first.shape(), bad.shape()));
        }
        let cols: usize = blocks.iter().map(|b| b.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for b in blocks {
                data.extend_from_slice(b.row(i));
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Inverse of [`Matrix::horizontal_concat`] for equal-width blocks.
    pub fn split_columns(&self, parts: usize) -> Result<Vec<Matrix>> {
        if parts == 0 || self.cols % parts != 0 {
            return Err(TdnError::validation(format!(
                "cannot split {} columns into {parts} equal blocks",
                self.cols
            )));
        }
        let width = self.cols / parts;
        Ok((0..parts)
            .map(|p| self.column_block(p * width, width))
            .collect())
    }

    pub fn column_block(&self, start: usize, width: usize) -> Matrix {
        assert!(start + width <= self.cols, "column block out of range");
        let mut data = Vec::with_capacity(self.rows * width);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..start + width]);
        }
        Matrix {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    /// Reorders rows: output row `i` is input row `perm[i]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Matrix {
        assert_eq!(perm.len(), self.rows);
        let mut data = Vec::with_capacity(self.data.len());
        for &p in perm {
            data.extend_from_slice(self.row(p));
        }
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    /// `P · self · Pᵀ` for the permutation `perm` (square matrices).
    pub fn permute_symmetric(&self, perm: &[usize]) -> Matrix {
        assert_eq!(self.rows, self.cols);
        assert_eq!(perm.len(), self.rows);
        let n = self.rows;
        let mut out = Matrix::zeros(n, n);
        for (i, &pi) in perm.iter().enumerate() {
            for (j, &pj) in perm.iter().enumerate() {
                out.data[i * n + j] = self.data[pi * n + pj];
            }
        }
        out
    }

    /// Power-iteration estimate of the largest eigenvalue magnitude.
    ///
    /// Returns the growth factor `‖S v‖ / ‖v‖` of the final iterate, which for
    /// symmetric input never exceeds the true spectral radius.
    pub fn dominant_abs_eigenvalue(&self, iters: usize, seed: u64) -> Result<f64> {
        if self.rows != self.cols {
            return Err(TdnError::shape(
                "dominant_abs_eigenvalue",
                self.shape(),
                (self.cols, self.rows),
            ));
        }
        if iters == 0 {
            return Err(TdnError::validation("power iteration needs at least one step"));
        }
        let n = self.rows;
        if n == 0 || self.data.iter().all(|&v| v == 0.0) {
            return Ok(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        normalize_in_place(&mut v);
        let mut estimate = 0.0;
        let mut w = vec![0.0; n];
        for _ in 0..iters {
            for (i, wi) in w.iter_mut().enumerate() {
                *wi = dot(self.row(i), &v);
            }
            estimate = norm(&w);
            if estimate == 0.0 {
                return Ok(0.0);
            }
            for (vi, &wi) in v.iter_mut().zip(&w) {
                *vi = wi / estimate;
            }
        }
        Ok(estimate)
    }
}

/// Index-ordered dot product.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn normalize_in_place(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for p in 0..a.cols() {
                    s += a.get(i, p) * b.get(p, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let m = Matrix::from_rows(&[vec![1.5, -2.0, 0.25], vec![3.0, 4.0, -1.0], vec![0.0, 7.0, 2.0]]);
        assert_eq!(Matrix::identity(3).matmul(&m).unwrap(), m);
        assert_eq!(m.matmul(&Matrix::identity(3)).unwrap(), m);
    }

    #[test]
    fn matmul_swap_columns() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let expected = Matrix::from_rows(&[vec![2.0, 1.0], vec![4.0, 3.0]]);
        assert_eq!(a.matmul(&b).unwrap(), expected);
        assert_eq!(brute_matmul(&a, &b), expected);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let err = a.matmul(&Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3 vs 2x3"), "{msg}");
    }

    #[test]
    fn elementwise_maps() {
        let r = Matrix::row_vector(&[-1.0, 0.0, 2.0]).map_elementwise(Activation::Relu);
        assert_eq!(r.as_slice(), &[0.0, 0.0, 2.0]);
        assert_eq!(Matrix::row_vector(&[0.0]).map_elementwise(Activation::Tanh).get(0, 0), 0.0);
        assert_eq!(Matrix::row_vector(&[0.0]).map_elementwise(Activation::Sigmoid).get(0, 0), 0.5);
        assert!(sigmoid(-800.0).is_finite() && sigmoid(800.0) == 1.0);
    }

    #[test]
    fn power_iteration_cases() {
        let i4 = Matrix::identity(4);
        assert!((i4.dominant_abs_eigenvalue(50, 3).unwrap() - 1.0).abs() < 1e-9);
        let swap = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert!((swap.dominant_abs_eigenvalue(100, 3).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(Matrix::zeros(3, 3).dominant_abs_eigenvalue(10, 0).unwrap(), 0.0);
        assert!(Matrix::zeros(2, 3).dominant_abs_eigenvalue(10, 0).is_err());
    }

    #[test]
    fn power_iteration_diagonal() {
        let d = Matrix::from_rows(&[vec![-3.0, 0.0], vec![0.0, 1.0]]);
        assert!((d.dominant_abs_eigenvalue(200, 11).unwrap() - 3.0).abs() < 1e-9);
    }

    #[test]
    fn split_and_small_helpers() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]]);
        let parts = m.split_columns(2).unwrap();
        assert_eq!(parts[1], Matrix::from_rows(&[vec![3.0, 4.0], vec![7.0, 8.0]]));
        assert!(m.split_columns(3).is_err());
        assert_eq!(m.row_sums().as_slice(), &[10.0, 26.0]);
        assert_eq!(m.mean_over_rows().unwrap().as_slice(), &[3.0, 4.0, 5.0, 6.0]);
        let b = m.broadcast_add_row(&Matrix::row_vector(&[1.0, 1.0, 1.0, 1.0])).unwrap();
        assert_eq!(b.get(1, 3), 9.0);
        assert!(m.broadcast_add_row(&Matrix::row_vector(&[1.0])).is_err());
        assert!(Matrix::zeros(0, 2).mean_over_rows().is_err());
    }

    fn arb_matrix(max: usize) -> impl Strategy<Value = Matrix> {
        (1..=max, 1..=max).prop_flat_map(|(r, c)| {
            prop::collection::vec(-10.0f64..10.0, r * c)
                .prop_map(move |d| Matrix::from_vec(r, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn transpose_is_an_involution(m in arb_matrix(7)) {
            prop_assert_eq!(m.transpose().transpose(), m);
        }

        #[test]
        fn identity_products_are_bitwise(m in arb_matrix(7)) {
            prop_assert_eq!(m.matmul(&Matrix::identity(m.cols())).unwrap(), m.clone());
            prop_assert_eq!(Matrix::identity(m.rows()).matmul(&m).unwrap(), m);
        }

        #[test]
        fn concat_then_split_recovers_blocks(blocks in (1usize..5, 1usize..4, 1usize..5).prop_flat_map(|(k, w, r)| {
            prop::collection::vec(prop::collection::vec(-5.0f64..5.0, r * w), k)
                .prop_map(move |bs| bs.into_iter().map(|d| Matrix::from_vec(r, w, d).unwrap()).collect::<Vec<_>>())
        })) {
            let joined = Matrix::horizontal_concat(&blocks).unwrap();
            prop_assert_eq!(joined.split_columns(blocks.len()).unwrap(), blocks);
        }

        #[test]
        fn fused_products_match_reference((a, b) in (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(n, k, m)| {
            (prop::collection::vec(-3.0f64..3.0, n * k), prop::collection::vec(-3.0f64..3.0, k * m))
                .prop_map(move |(x, y)| (Matrix::from_vec(n, k, x).unwrap(), Matrix::from_vec(k, m, y).unwrap()))
        })) {
            let reference = brute_matmul(&a, &b);
            prop_assert_eq!(a.matmul(&b).unwrap(), reference.clone());
            prop_assert_eq!(a.matmul_transposed(&b.transpose()).unwrap(), reference.clone());
            prop_assert_eq!(a.transpose().transposed_matmul(&b).unwrap(), reference);
        }

        #[test]
        fn operations_are_pure(a in arb_matrix(5)) {
            let p1 = a.matmul(&a.transpose()).unwrap();
            let p2 = a.matmul(&a.transpose()).unwrap();
            prop_assert_eq!(p1.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            p2.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
