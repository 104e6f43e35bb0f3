//! Dense and sparse kernels shared by the model, plus the reverse-mode tape
//! and the finite-difference gradient checker.

pub mod gradcheck;
pub mod tape;

use crate::error::{CkmlError, Result};

/// Row-major dense matrix of `f64`.
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

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(CkmlError::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(CkmlError::Shape("ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Same data viewed with a different row/column split.
    pub fn reshaped(mut self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.data.len() {
            return Err(CkmlError::Shape(format!(
                "cannot reshape {}x{} into {rows}x{cols}",
                self.rows, self.cols
            )));
        }
        self.rows = rows;
        self.cols = cols;
        Ok(self)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(CkmlError::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Compressed sparse rows. Column indices are strictly increasing within a
/// row; `weights`, when present, runs parallel to `indices`.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    n_rows: usize,
    n_cols: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    weights: Option<Vec<f64>>,
}

impl Csr {
    pub fn empty(n_rows: usize, n_cols: usize) -> Self {
        Csr {
            n_rows,
            n_cols,
            offsets: vec![0; n_rows + 1],
            indices: Vec::new(),
            weights: None,
        }
    }

    /// Builds from (row, col) pairs; duplicates collapse.
    pub fn from_pairs(n_rows: usize, n_cols: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut sorted: Vec<(usize, usize)> = pairs.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut offsets = vec![0usize; n_rows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        for &(r, c) in &sorted {
            if r >= n_rows || c >= n_cols {
                return Err(CkmlError::Shape(format!(
                    "entry ({r},{c}) outside {n_rows}x{n_cols}"
                )));
            }
            offsets[r + 1] += 1;
            indices.push(c);
        }
        for r in 0..n_rows {
            offsets[r + 1] += offsets[r];
        }
        Ok(Csr {
            n_rows,
            n_cols,
            offsets,
            indices,
            weights: None,
        })
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.indices.len() {
            return Err(CkmlError::Shape("weight count differs from nnz".into()));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    #[inline]
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    #[inline]
    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    #[inline]
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    #[inline]
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    #[inline]
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[usize] {
        &self.indices[self.offsets[r]..self.offsets[r + 1]]
    }

    #[inline]
    pub fn degree(&self, r: usize) -> usize {
        self.offsets[r + 1] - self.offsets[r]
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.n_rows).map(|r| self.degree(r)).collect()
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        self.row(r).binary_search(&c).is_ok()
    }

    #[inline]
    pub fn weight_at(&self, pos: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[pos])
    }

    pub fn transpose(&self) -> Csr {
        let mut counts = vec![0usize; self.n_cols + 1];
        for &c in &self.indices {
            counts[c + 1] += 1;
        }
        for c in 0..self.n_cols {
            counts[c + 1] += counts[c];
        }
        let offsets = counts.clone();
        let mut cursor = counts;
        let mut indices = vec![0usize; self.nnz()];
        let mut weights = self.weights.as_ref().map(|_| vec![0.0; self.nnz()]);
        // rows visited in increasing order, so transposed rows stay sorted
        for r in 0..self.n_rows {
            for pos in self.offsets[r]..self.offsets[r + 1] {
                let c = self.indices[pos];
                let dst = cursor[c];
                cursor[c] += 1;
                indices[dst] = r;
                if let (Some(w), Some(src)) = (weights.as_mut(), self.weights.as_ref()) {
                    w[dst] = src[pos];
                }
            }
        }
        Csr {
            n_rows: self.n_cols,
            n_cols: self.n_rows,
            offsets,
            indices,
            weights,
        }
    }

    /// Copy of the structure with weights set by `normalization`.
    /// `row_degrees`/`col_degrees` are the degrees used for the symmetric form;
    /// for a square symmetric graph both are the node degrees.
    pub fn normalized(
        &self,
        normalization: Normalization,
        row_degrees: &[usize],
        col_degrees: &[usize],
    ) -> Csr {
        let mut weights = Vec::with_capacity(self.nnz());
        for r in 0..self.n_rows {
            for pos in self.offsets[r]..self.offsets[r + 1] {
                let c = self.indices[pos];
                let base = self.weight_at(pos);
                let w = match normalization {
                    Normalization::None => base,
                    Normalization::RowMean => base / self.degree(r) as f64,
                    Normalization::SymmetricDegree => {
                        base / ((row_degrees[r] * col_degrees[c]) as f64).sqrt()
                    }
                };
                weights.push(w);
            }
        }
        Csr {
            weights: Some(weights),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    None,
    RowMean,
    SymmetricDegree,
}

/// Sparse-dense product with on-the-fly normalization. Symmetric-degree
/// normalization uses row degrees on the left and the transpose's row
/// degrees on the right.
pub fn spmm(adjacency: &Csr, dense: &Matrix, normalization: Normalization) -> Result<Matrix> {
    if adjacency.n_cols() != dense.rows() {
        return Err(CkmlError::Shape(format!(
            "spmm adjacency {}x{} with dense {}x{}",
            adjacency.n_rows(),
            adjacency.n_cols(),
            dense.rows(),
            dense.cols()
        )));
    }
    let normed = match normalization {
        Normalization::None => adjacency.clone(),
        _ => {
            let row_deg = adjacency.degrees();
            let col_deg = adjacency.transpose().degrees();
            adjacency.normalized(normalization, &row_deg, &col_deg)
        }
    };
    Ok(spmm_weighted(&normed, dense))
}

/// `adjacency · dense` using the stored weights (1.0 when absent).
pub fn spmm_weighted(adjacency: &Csr, dense: &Matrix) -> Matrix {
    let cols = dense.cols();
    let mut out = Matrix::zeros(adjacency.n_rows(), cols);
    for r in 0..adjacency.n_rows() {
        let out_row = &mut out.data[r * cols..(r + 1) * cols];
        for pos in adjacency.offsets[r]..adjacency.offsets[r + 1] {
            let w = adjacency.weight_at(pos);
            let src = dense.row(adjacency.indices[pos]);
            for (o, &v) in out_row.iter_mut().zip(src) {
                *o += w * v;
            }
        }
    }
    out
}

/// `adjacencyᵀ · dense` without materializing the transpose.
pub fn spmm_transposed(adjacency: &Csr, dense: &Matrix) -> Matrix {
    let cols = dense.cols();
    let mut out = Matrix::zeros(adjacency.n_cols(), cols);
    for r in 0..adjacency.n_rows() {
        let src = dense.row(r);
        for pos in adjacency.offsets[r]..adjacency.offsets[r + 1] {
            let w = adjacency.weight_at(pos);
            let c = adjacency.indices[pos];
            let out_row = &mut out.data[c * cols..(c + 1) * cols];
            for (o, &v) in out_row.iter_mut().zip(src) {
                *o += w * v;
            }
        }
    }
    out
}

pub fn softmax_with_temperature(values: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(CkmlError::Numeric(format!("temperature must be positive, got {tau}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CkmlError::Numeric("non-finite softmax input".into()));
    }
    let mut out: Vec<f64> = values.iter().map(|v| v / tau).collect();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in values.iter_mut() {
        *v /= total;
    }
}

#[inline]
pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

/// Lowest index of the maximum value.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// ln(1 + eˣ) without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_for_equal_inputs() {
        let p = softmax_with_temperature(&[2.5, 2.5, 2.5], 0.3).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_single_and_closed_form() {
        assert_eq!(softmax_with_temperature(&[7.0], 1.0).unwrap(), vec![1.0]);
        let p = softmax_with_temperature(&[0.0, 3f64.ln()], 1.0).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-12);
        assert!((p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_nonpositive_tau() {
        assert!(softmax_with_temperature(&[1.0], 0.0).is_err());
        assert!(softmax_with_temperature(&[1.0], -1.0).is_err());
    }

    #[test]
    fn softmax_survives_large_inputs() {
        let p = softmax_with_temperature(&[1000.0, 1001.0], 1.0).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn leaky_relu_cases() {
        assert_eq!(leaky_relu(0.0, 0.2), 0.0);
        assert_eq!(leaky_relu(2.0, 0.01), 2.0);
        assert!((leaky_relu(-1.0, 0.2) + 0.2).abs() < 1e-15);
    }

    #[test]
    fn spmm_empty_adjacency_gives_zeros() {
        let adj = Csr::empty(3, 3);
        let dense = Matrix::filled(3, 2, 1.5);
        let out = spmm(&adj, &dense, Normalization::SymmetricDegree).unwrap();
        assert_eq!(out, Matrix::zeros(3, 2));
    }

    #[test]
    fn spmm_row_mean_swaps_pair() {
        let adj = Csr::from_pairs(2, 2, &[(0, 1), (1, 0)]).unwrap();
        let dense = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let out = spmm(&adj, &dense, Normalization::RowMean).unwrap();
        assert_eq!(out.row(0), &[3.0, 4.0]);
        assert_eq!(out.row(1), &[1.0, 2.0]);
    }

    #[test]
    fn spmm_symmetric_path_graph() {
        // path 0-1-2: degrees 1,2,1; row 1 = 1/sqrt(2*1) + 1/sqrt(2*1)
        let adj = Csr::from_pairs(3, 3, &[(0, 1), (1, 0), (1, 2), (2, 1)]).unwrap();
        let out = spmm(&adj, &Matrix::filled(3, 1, 1.0), Normalization::SymmetricDegree).unwrap();
        assert!((out[(1, 0)] - 2f64.sqrt()).abs() < 1e-15);
        assert!((out[(0, 0)] - 1.0 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn spmm_shape_mismatch() {
        let adj = Csr::empty(2, 3);
        assert!(spmm(&adj, &Matrix::zeros(2, 1), Normalization::None).is_err());
    }

    #[test]
    fn transpose_round_trip() {
        let adj = Csr::from_pairs(3, 4, &[(0, 3), (2, 1), (0, 0), (1, 1)]).unwrap();
        let t = adj.transpose();
        assert_eq!(t.n_rows(), 4);
        assert!(t.contains(3, 0) && t.contains(1, 2) && t.contains(1, 1));
        assert_eq!(t.transpose(), adj);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!(softplus(-40.0) < 1e-12);
        assert!((softplus(40.0) - 40.0).abs() < 1e-12);
        assert!(softplus(1e6).is_finite());
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_shift_invariant(v in prop::collection::vec(-20.0f64..20.0, 1..8), c in -50.0f64..50.0) {
            let a = softmax_with_temperature(&v, 1.0).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = softmax_with_temperature(&shifted, 1.0).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_argmax_stable_under_tau(v in prop::collection::vec(-5.0f64..5.0, 1..8), tau in 0.05f64..30.0) {
            let p = softmax_with_temperature(&v, tau).unwrap();
            prop_assert_eq!(argmax(&p), argmax(&v));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn row_mean_preserves_constants(pairs in prop::collection::vec((0usize..6, 0usize..6), 0..20), c in -3.0f64..3.0) {
            let adj = Csr::from_pairs(6, 6, &pairs).unwrap();
            let out = spmm(&adj, &Matrix::filled(6, 2, c), Normalization::RowMean).unwrap();
            for r in 0..6 {
                if adj.degree(r) > 0 {
                    prop_assert!((out[(r, 0)] - c).abs() < 1e-12);
                } else {
                    prop_assert_eq!(out[(r, 0)], 0.0);
                }
            }
        }
    }
}
