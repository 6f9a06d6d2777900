use super::{NumericsError, Result, Tensor};

/// Compressed sparse row matrix. Used for constant operators (normalized
/// adjacencies, pooling maps) applied to dense tape values.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Duplicate coordinates are summed. Explicit zeros are kept.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        if let Some(&(r, c, _)) = sorted.iter().find(|(r, c, _)| *r >= rows || *c >= cols) {
            return Err(NumericsError::Invalid {
                op: "sparse",
                msg: format!("entry ({r},{c}) outside {rows}x{cols}"),
            });
        }
        sorted.sort_by_key(|a| (a.0, a.1));
        let mut indptr = vec![0usize; rows + 1];
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
        Ok(Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn from_dense(t: &Tensor) -> Self {
        let mut trip = Vec::new();
        for r in 0..t.rows() {
            for (c, &v) in t.row(r).iter().enumerate() {
                if v != 0.0 {
                    trip.push((r, c, v));
                }
            }
        }
        Self::from_triplets(t.rows(), t.cols(), &trip).expect("in-range by construction")
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

    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.rows, self.cols]);
        for r in 0..self.rows {
            for (c, v) in self.row_entries(r) {
                let cur = t.get(r, c);
                t.set(r, c, cur + v);
            }
        }
        t
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut trip = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            for (c, v) in self.row_entries(r) {
                trip.push((c, r, v));
            }
        }
        Self::from_triplets(self.cols, self.rows, &trip).expect("in-range by construction")
    }

    /// `self * dense`
    pub fn matmul(&self, dense: &Tensor) -> Result<Tensor> {
        if dense.rows() != self.cols {
            return Err(NumericsError::Shape {
                op: "spmm",
                lhs: vec![self.rows, self.cols],
                rhs: dense.shape().to_vec(),
            });
        }
        let n = dense.cols();
        let mut out = Tensor::zeros(&[self.rows, n]);
        for r in 0..self.rows {
            let dst = out.row_mut(r);
            for k in self.indptr[r]..self.indptr[r + 1] {
                let v = self.values[k];
                let src = dense.row(self.indices[k]);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
        Ok(out)
    }

    /// `self^T * dense` without materializing the transpose.
    pub fn matmul_t(&self, dense: &Tensor) -> Result<Tensor> {
        if dense.rows() != self.rows {
            return Err(NumericsError::Shape {
                op: "spmm_t",
                lhs: vec![self.rows, self.cols],
                rhs: dense.shape().to_vec(),
            });
        }
        let n = dense.cols();
        let mut out = Tensor::zeros(&[self.cols, n]);
        for r in 0..self.rows {
            let src = dense.row(r).to_vec();
            for k in self.indptr[r]..self.indptr[r + 1] {
                let v = self.values[k];
                let dst = out.row_mut(self.indices[k]);
                for (d, s) in dst.iter_mut().zip(&src) {
                    *d += v * s;
                }
            }
        }
        Ok(out)
    }
}
