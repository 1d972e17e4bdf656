//! Compressed-row sparse matrices with a fixed symmetric pattern.

/// Square CSR matrix. The pattern is fixed at construction; values may be
/// rewritten in place, which is what incremental stiffness updates rely on.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_offsets: Vec<usize>,
    pub col_indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds the pattern from an iterator of (row, col) pairs; duplicate
    /// pairs collapse into one slot. Columns are sorted per row.
    pub fn from_pattern(n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut per_row: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (r, c) in pairs {
            per_row[r].push(c);
        }
        let mut row_offsets = Vec::with_capacity(n + 1);
        let mut col_indices = Vec::new();
        row_offsets.push(0);
        for cols in &mut per_row {
            cols.sort_unstable();
            cols.dedup();
            col_indices.extend_from_slice(cols);
            row_offsets.push(col_indices.len());
        }
        let nnz = col_indices.len();
        CsrMatrix { n, row_offsets, col_indices, values: vec![0.0; nnz] }
    }

    pub fn nnz(&self) -> usize {
        self.col_indices.len()
    }

    /// Value-slot index of entry (r, c); the pattern must contain it.
    pub fn slot(&self, r: usize, c: usize) -> Option<usize> {
        let lo = self.row_offsets[r];
        let hi = self.row_offsets[r + 1];
        self.col_indices[lo..hi].binary_search(&c).ok().map(|k| lo + k)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.slot(r, c).map(|s| self.values[s]).unwrap_or(0.0)
    }

    pub fn clear_values(&mut self) {
        self.values.fill(0.0);
    }

    /// y = A x
    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(y.len(), self.n);
        for r in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_offsets[r]..self.row_offsets[r + 1] {
                acc += self.values[k] * x[self.col_indices[k]];
            }
            y[r] = acc;
        }
    }

    pub fn mul_vec_alloc(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul_vec(x, &mut y);
        y
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|r| self.get(r, r)).collect()
    }

    /// Dense copy, for small-system oracles.
    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.n, self.n);
        for r in 0..self.n {
            for k in self.row_offsets[r]..self.row_offsets[r + 1] {
                m[(r, self.col_indices[k])] = self.values[k];
            }
        }
        m
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pattern_and_matvec() {
        let mut a = CsrMatrix::from_pattern(3, [(0, 0), (0, 2), (1, 1), (2, 0), (2, 2), (0, 2)]);
        assert_eq!(a.nnz(), 5);
        for (i, j, v) in [(0, 0, 2.0), (0, 2, 1.0), (1, 1, 3.0), (2, 0, 1.0), (2, 2, 4.0)] {
            let s = a.slot(i, j).unwrap();
            a.values[s] = v;
        }
        let y = a.mul_vec_alloc(&[1.0, 2.0, 3.0]);
        assert_eq!(y, vec![5.0, 6.0, 13.0]);
        assert!(a.slot(1, 0).is_none());
    }

    #[test]
    fn columns_sorted_per_row() {
        let a = CsrMatrix::from_pattern(2, [(0, 1), (0, 0), (1, 1)]);
        assert_eq!(&a.col_indices[a.row_offsets[0]..a.row_offsets[1]], &[0, 1]);
    }
}
