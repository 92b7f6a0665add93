//! Compressed sparse row matrices.
//!
//! Used for the normalized adjacencies of the tissue graphs and for the
//! child-mean pooling operator between the two scales.

use ndarray::Array2;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

/// A square, symmetric sparse matrix over graph nodes.
pub type SparseAdjacency = SparseMatrix;

impl SparseMatrix {
    /// Builds a matrix from `(row, col, value)` triplets. Duplicate
    /// coordinates are rejected; entries are sorted by row then column.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        triplets.sort_by_key(|t| (t.0, t.1));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for &(r, c, v) in &triplets {
            if r >= rows || c >= cols {
                return Err(Error::Invalid(format!(
                    "sparse entry ({r}, {c}) outside {rows}x{cols}"
                )));
            }
            if last == Some((r, c)) {
                return Err(Error::Invalid(format!("duplicate sparse entry ({r}, {c})")));
            }
            if !v.is_finite() {
                return Err(Error::Invalid(format!("non-finite sparse entry ({r}, {c})")));
            }
            last = Some((r, c));
            indptr[r + 1] += 1;
            indices.push(c);
            values.push(v);
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Ok(SparseMatrix {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of one row.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.indptr[r]..self.indptr[r + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    /// Entries as `(row, col, value)` in row-major order.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| {
            let (cols, vals) = self.row(r);
            cols.iter().zip(vals).map(move |(&c, &v)| (r, c, v))
        })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        match cols.binary_search(&c) {
            Ok(i) => vals[i],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows, self.cols));
        for (r, c, v) in self.triplets() {
            out[[r, c]] = v;
        }
        out
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols && self.triplets().all(|(r, c, v)| self.get(c, r) == v)
    }

    pub fn transpose(&self) -> SparseMatrix {
        let triplets = self.triplets().map(|(r, c, v)| (c, r, v)).collect();
        SparseMatrix::from_triplets(self.cols, self.rows, triplets)
            .expect("transpose of a valid matrix is valid")
    }

    /// `self · x` for a dense right-hand side.
    pub fn matmul_dense(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.nrows() != self.cols {
            return Err(Error::Shape {
                op: "spmm",
                lhs: (self.rows, self.cols),
                rhs: x.dim(),
            });
        }
        let mut out = Array2::zeros((self.rows, x.ncols()));
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            let mut dst = out.row_mut(r);
            for (&c, &v) in cols.iter().zip(vals) {
                dst.scaled_add(v, &x.row(c));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · x` without materializing the transpose.
    pub fn transpose_matmul_dense(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.nrows() != self.rows {
            return Err(Error::Shape {
                op: "spmm_t",
                lhs: (self.cols, self.rows),
                rhs: x.dim(),
            });
        }
        let mut out = Array2::zeros((self.cols, x.ncols()));
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            let src = x.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                out.row_mut(c).scaled_add(v, &src);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn spmm_matches_dense() {
        let m = SparseMatrix::from_triplets(
            2,
            3,
            vec![(1, 2, 3.0), (0, 0, 1.0), (0, 2, -2.0)],
        )
        .unwrap();
        let x = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        assert_eq!(m.matmul_dense(&x).unwrap(), m.to_dense().dot(&x));
        let y = array![[1.0], [-1.0]];
        assert_eq!(
            m.transpose_matmul_dense(&y).unwrap(),
            m.to_dense().t().dot(&y)
        );
    }

    #[test]
    fn duplicates_rejected() {
        assert!(SparseMatrix::from_triplets(2, 2, vec![(0, 1, 1.0), (0, 1, 2.0)]).is_err());
    }
}
