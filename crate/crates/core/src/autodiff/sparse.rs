use serde::{Deserialize, Serialize};

use super::matrix::DenseMatrix;
use crate::error::{shape_err, Error, Result};

/// Compressed sparse row matrix.
///
/// Column indices are strictly increasing within each row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseCsr {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseCsr {
    /// Builds a matrix from raw CSR arrays and validates every invariant.
    pub fn new(
        rows: usize,
        cols: usize,
        indptr: Vec<usize>,
        indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if indptr.len() != rows + 1 || indptr[0] != 0 {
            return Err(Error::InvalidArgument(format!(
                "indptr must have {} entries starting at 0",
                rows + 1
            )));
        }
        if indices.len() != values.len() || *indptr.last().unwrap() != indices.len() {
            return Err(Error::InvalidArgument(
                "indptr, indices and values disagree on nnz".into(),
            ));
        }
        for r in 0..rows {
            if indptr[r] > indptr[r + 1] {
                return Err(Error::InvalidArgument(format!("indptr decreases at row {r}")));
            }
            let row = &indices[indptr[r]..indptr[r + 1]];
            for w in row.windows(2) {
                if w[0] >= w[1] {
                    return Err(Error::InvalidArgument(format!(
                        "column indices not strictly increasing in row {r}"
                    )));
                }
            }
            if let Some(&c) = row.last() {
                if c >= cols {
                    return Err(Error::InvalidArgument(format!(
                        "column {c} out of range in row {r}"
                    )));
                }
            }
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sparse value {v}")));
        }
        Ok(Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        for &(r, c, _) in &sorted {
            if r >= rows || c >= cols {
                return shape_err(
                    "SparseCsr::from_triplets",
                    format!("entry ({r}, {c}) outside {rows}x{cols}"),
                );
            }
        }
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0; rows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Self::new(rows, cols, indptr, indices, values)
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let n = values.len();
        Self {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: values.to_vec(),
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            indptr: vec![0; rows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn from_dense(m: &DenseMatrix) -> Self {
        let mut triplets = Vec::new();
        for i in 0..m.rows() {
            for (j, &v) in m.row(i).iter().enumerate() {
                if v != 0.0 {
                    triplets.push((i, j, v));
                }
            }
        }
        Self::from_triplets(m.rows(), m.cols(), &triplets).expect("dense entries are in range")
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Same sparsity pattern with new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return shape_err(
                "SparseCsr::with_values",
                format!("pattern has {} nonzeros, got {}", self.nnz(), values.len()),
            );
        }
        Ok(Self {
            values,
            ..self.clone()
        })
    }

    /// Column indices and values of row `r`.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.indptr[r]..self.indptr[r + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        match cols.binary_search(&c) {
            Ok(pos) => vals[pos],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                m.set(r, c, v);
            }
        }
        m
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.cols + 1];
        for &c in &self.indices {
            counts[c + 1] += 1;
        }
        for c in 0..self.cols {
            counts[c + 1] += counts[c];
        }
        let mut next = counts.clone();
        let mut indices = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                let pos = next[c];
                indices[pos] = r;
                values[pos] = v;
                next[c] += 1;
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            indptr: counts,
            indices,
            values,
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).1.iter().sum()).collect()
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols && *self == self.transpose()
    }

    /// `self * h` for dense `h`. Rows are reduced in column-index order, so
    /// the result is bit-stable.
    pub fn spmm(&self, h: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != h.rows() {
            return shape_err(
                "spmm",
                format!("sparse {}x{} x dense {:?}", self.rows, self.cols, h.shape()),
            );
        }
        let k = h.cols();
        let mut out = DenseMatrix::zeros(self.rows, k);
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            let out_row = out.row_mut(r);
            for (&c, &v) in cols.iter().zip(vals) {
                for (o, &x) in out_row.iter_mut().zip(h.row(c)) {
                    *o += v * x;
                }
            }
        }
        Ok(out)
    }

    /// `self^T * g` without materialising the transpose.
    pub fn spmm_t(&self, g: &DenseMatrix) -> Result<DenseMatrix> {
        if self.rows != g.rows() {
            return shape_err(
                "spmm_t",
                format!("sparse {}x{}^T x dense {:?}", self.rows, self.cols, g.shape()),
            );
        }
        let k = g.cols();
        let mut out = DenseMatrix::zeros(self.cols, k);
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            let g_row = g.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                for (o, &x) in out.row_mut(c).iter_mut().zip(g_row) {
                    *o += v * x;
                }
            }
        }
        Ok(out)
    }

    /// Sparse-sparse product `self * other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return shape_err(
                "sparse matmul",
                format!("{}x{} x {}x{}", self.rows, self.cols, other.rows, other.cols),
            );
        }
        let mut indptr = vec![0usize; self.rows + 1];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        let mut acc = vec![0.0; other.cols];
        let mut touched = vec![false; other.cols];
        let mut cols_in_row: Vec<usize> = Vec::new();
        for r in 0..self.rows {
            let (a_cols, a_vals) = self.row(r);
            for (&k, &a) in a_cols.iter().zip(a_vals) {
                let (b_cols, b_vals) = other.row(k);
                for (&c, &b) in b_cols.iter().zip(b_vals) {
                    if !touched[c] {
                        touched[c] = true;
                        cols_in_row.push(c);
                    }
                    acc[c] += a * b;
                }
            }
            cols_in_row.sort_unstable();
            for &c in &cols_in_row {
                indices.push(c);
                values.push(acc[c]);
                acc[c] = 0.0;
                touched[c] = false;
            }
            cols_in_row.clear();
            indptr[r + 1] = indices.len();
        }
        Ok(Self {
            rows: self.rows,
            cols: other.cols,
            indptr,
            indices,
            values,
        })
    }

    /// `self + other`; the pattern is the union of both patterns.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return shape_err(
                "sparse add",
                format!("{}x{} + {}x{}", self.rows, self.cols, other.rows, other.cols),
            );
        }
        let mut indptr = vec![0usize; self.rows + 1];
        let mut indices = Vec::with_capacity(self.nnz() + other.nnz());
        let mut values = Vec::with_capacity(self.nnz() + other.nnz());
        for r in 0..self.rows {
            let (ac, av) = self.row(r);
            let (bc, bv) = other.row(r);
            let (mut i, mut j) = (0, 0);
            while i < ac.len() || j < bc.len() {
                if j == bc.len() || (i < ac.len() && ac[i] < bc[j]) {
                    indices.push(ac[i]);
                    values.push(av[i]);
                    i += 1;
                } else if i == ac.len() || bc[j] < ac[i] {
                    indices.push(bc[j]);
                    values.push(bv[j]);
                    j += 1;
                } else {
                    indices.push(ac[i]);
                    values.push(av[i] + bv[j]);
                    i += 1;
                    j += 1;
                }
            }
            indptr[r + 1] = indices.len();
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }

    /// Multiplies row `r` by `factors[r]`.
    pub fn scale_rows(&self, factors: &[f64]) -> Self {
        let mut values = self.values.clone();
        for r in 0..self.rows {
            for v in &mut values[self.indptr[r]..self.indptr[r + 1]] {
                *v *= factors[r];
            }
        }
        Self {
            values,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_sum_duplicates_and_sort() {
        let s = SparseCsr::from_triplets(2, 3, &[(1, 2, 1.0), (0, 1, 2.0), (1, 0, 1.0), (1, 2, 0.5)])
            .unwrap();
        assert_eq!(s.indptr(), &[0, 1, 3]);
        assert_eq!(s.indices(), &[1, 0, 2]);
        assert_eq!(s.values(), &[2.0, 1.0, 1.5]);
    }

    #[test]
    fn new_rejects_unsorted_rows() {
        assert!(SparseCsr::new(1, 3, vec![0, 2], vec![2, 1], vec![1.0, 1.0]).is_err());
        assert!(SparseCsr::new(1, 3, vec![0, 2], vec![1, 1], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn identity_spmm_is_noop() {
        let h = DenseMatrix::from_fn(3, 2, |i, j| (i * 3 + j) as f64);
        assert_eq!(SparseCsr::identity(3).spmm(&h).unwrap(), h);
    }

    #[test]
    fn empty_row_gives_zero_output_row() {
        let s = SparseCsr::from_triplets(3, 3, &[(0, 1, 1.0), (2, 0, 2.0)]).unwrap();
        let h = DenseMatrix::filled(3, 2, 1.0);
        let out = s.spmm(&h).unwrap();
        assert_eq!(out.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn sparse_product_and_sum_match_dense() {
        let a = SparseCsr::from_triplets(3, 3, &[(0, 1, 1.0), (1, 2, 2.0), (2, 0, 3.0), (2, 2, 1.0)])
            .unwrap();
        let b = SparseCsr::from_triplets(3, 3, &[(0, 0, 1.0), (1, 1, 4.0), (2, 1, 1.0)]).unwrap();
        let dense = a.to_dense().matmul(&b.to_dense()).unwrap();
        assert_eq!(a.matmul(&b).unwrap().to_dense(), dense);
        let sum = a.to_dense().add(&b.to_dense()).unwrap();
        assert_eq!(a.add(&b).unwrap().to_dense(), sum);
        assert_eq!(a.transpose().to_dense(), a.to_dense().transpose());
    }
}
