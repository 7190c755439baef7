//! Compressed sparse row (CSR) matrices.
//!
//! The assembly path accumulates triplets in a [`SparseBuilder`] (duplicate
//! entries are summed, matching finite-element assembly semantics) and
//! freezes them into an immutable [`SparseMatrix`]. Within each row the
//! column indices are strictly increasing and all stored values are finite;
//! both invariants are checked at construction.

use crate::error::{Error, Result};

/// Immutable sparse matrix in CSR format.
///
/// Invariants (validated by [`SparseBuilder::build`] and
/// [`SparseMatrix::from_csr`]):
///
/// - `row_offsets.len() == nrows + 1`, nondecreasing, ending at
///   `col_indices.len()`;
/// - within each row, column indices are strictly increasing and less than
///   `ncols`;
/// - every stored value is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds a CSR matrix from raw components, validating all invariants.
    pub fn from_csr(
        nrows: usize,
        ncols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if row_offsets.len() != nrows + 1 {
            return Err(Error::DimensionMismatch(format!(
                "row_offsets length {} != nrows + 1 = {}",
                row_offsets.len(),
                nrows + 1
            )));
        }
        if col_indices.len() != values.len() {
            return Err(Error::DimensionMismatch(format!(
                "col_indices length {} != values length {}",
                col_indices.len(),
                values.len()
            )));
        }
        if row_offsets[0] != 0 || row_offsets[nrows] != col_indices.len() {
            return Err(Error::InvalidArgument(
                "row_offsets must start at 0 and end at nnz".into(),
            ));
        }
        for r in 0..nrows {
            let (lo, hi) = (row_offsets[r], row_offsets[r + 1]);
            if lo > hi {
                return Err(Error::InvalidArgument(format!(
                    "row_offsets decreasing at row {r}"
                )));
            }
            let mut prev: Option<usize> = None;
            for k in lo..hi {
                let c = col_indices[k];
                if c >= ncols {
                    return Err(Error::InvalidArgument(format!(
                        "column index {c} out of bounds in row {r} (ncols = {ncols})"
                    )));
                }
                if let Some(p) = prev {
                    if c <= p {
                        return Err(Error::InvalidArgument(format!(
                            "column indices not strictly increasing in row {r}"
                        )));
                    }
                }
                prev = Some(c);
                if !values[k].is_finite() {
                    return Err(Error::NonFinite(format!(
                        "matrix entry ({r}, {c}) is not finite"
                    )));
                }
            }
        }
        Ok(SparseMatrix {
            nrows,
            ncols,
            row_offsets,
            col_indices,
            values,
        })
    }

    /// Number of rows.
    #[inline]
    pub fn nrows(&self) -> usize {
        self.nrows
    }

    /// Number of columns.
    #[inline]
    pub fn ncols(&self) -> usize {
        self.ncols
    }

    /// Number of stored entries.
    #[inline]
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Row offset slice (length `nrows + 1`).
    #[inline]
    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    /// Column index slice (length `nnz`).
    #[inline]
    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    /// Value slice (length `nnz`).
    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Iterator over the stored entries `(col, value)` of one row.
    #[inline]
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.row_offsets[r];
        let hi = self.row_offsets[r + 1];
        self.col_indices[lo..hi]
            .iter()
            .copied()
            .zip(self.values[lo..hi].iter().copied())
    }

    /// Matrix–vector product `A·x`.
    ///
    /// Panics if `x.len() != ncols` (shape errors here are programming
    /// errors; fallible paths validate shapes before calling).
    pub fn spmv(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols, "spmv shape mismatch");
        let mut y = vec![0.0; self.nrows];
        self.spmv_into(x, &mut y);
        y
    }

    /// Matrix–vector product writing into a preallocated buffer.
    pub fn spmv_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols, "spmv shape mismatch");
        assert_eq!(y.len(), self.nrows, "spmv output shape mismatch");
        for (r, yr) in y.iter_mut().enumerate() {
            let lo = self.row_offsets[r];
            let hi = self.row_offsets[r + 1];
            let mut acc = 0.0;
            for k in lo..hi {
                acc += self.values[k] * x[self.col_indices[k]];
            }
            *yr = acc;
        }
    }

    /// Transposed product `Aᵀ·x`.
    pub fn spmv_transpose(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows, "spmv_transpose shape mismatch");
        let mut y = vec![0.0; self.ncols];
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            let lo = self.row_offsets[r];
            let hi = self.row_offsets[r + 1];
            for k in lo..hi {
                y[self.col_indices[k]] += self.values[k] * xr;
            }
        }
        y
    }

    /// The transpose as a new CSR matrix.
    pub fn transpose(&self) -> SparseMatrix {
        let mut counts = vec![0usize; self.ncols];
        for &c in &self.col_indices {
            counts[c] += 1;
        }
        let mut offsets = vec![0usize; self.ncols + 1];
        for c in 0..self.ncols {
            offsets[c + 1] = offsets[c] + counts[c];
        }
        let mut cols = vec![0usize; self.nnz()];
        let mut vals = vec![0.0; self.nnz()];
        let mut next = offsets.clone();
        for r in 0..self.nrows {
            for k in self.row_offsets[r]..self.row_offsets[r + 1] {
                let c = self.col_indices[k];
                let slot = next[c];
                cols[slot] = r;
                vals[slot] = self.values[k];
                next[c] += 1;
            }
        }
        // Rows of the transpose are filled in increasing source-row order,
        // so column indices are already strictly increasing.
        SparseMatrix {
            nrows: self.ncols,
            ncols: self.nrows,
            row_offsets: offsets,
            col_indices: cols,
            values: vals,
        }
    }

    /// Main diagonal (length `min(nrows, ncols)`), zeros where absent.
    pub fn diagonal(&self) -> Vec<f64> {
        let n = self.nrows.min(self.ncols);
        let mut d = vec![0.0; n];
        for (r, dr) in d.iter_mut().enumerate() {
            for (c, v) in self.row(r) {
                if c == r {
                    *dr = v;
                    break;
                }
            }
        }
        d
    }

    /// Row sums (mass lumping when applied to a mass matrix).
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.nrows)
            .map(|r| self.row(r).map(|(_, v)| v).sum())
            .collect()
    }

    /// Maximum absolute symmetry defect `|a_ij − a_ji|`; 0 for square
    /// symmetric matrices. Used by tests and SPD-solver validation.
    pub fn symmetry_defect(&self) -> f64 {
        if self.nrows != self.ncols {
            return f64::INFINITY;
        }
        let t = self.transpose();
        let mut defect: f64 = 0.0;
        for r in 0..self.nrows {
            let mut a = self.row(r).peekable();
            let mut b = t.row(r).peekable();
            loop {
                match (a.peek().copied(), b.peek().copied()) {
                    (Some((ca, va)), Some((cb, vb))) => {
                        if ca == cb {
                            defect = defect.max((va - vb).abs());
                            a.next();
                            b.next();
                        } else if ca < cb {
                            defect = defect.max(va.abs());
                            a.next();
                        } else {
                            defect = defect.max(vb.abs());
                            b.next();
                        }
                    }
                    (Some((_, va)), None) => {
                        defect = defect.max(va.abs());
                        a.next();
                    }
                    (None, Some((_, vb))) => {
                        defect = defect.max(vb.abs());
                        b.next();
                    }
                    (None, None) => break,
                }
            }
        }
        defect
    }

    /// Dense copy, rows-major; intended for small oracle comparisons only.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut dense = vec![vec![0.0; self.ncols]; self.nrows];
        for (r, row) in dense.iter_mut().enumerate() {
            for (c, v) in self.row(r) {
                row[c] = v;
            }
        }
        dense
    }
}

/// Triplet accumulator for CSR assembly. Duplicate `(row, col)` entries are
/// summed when the matrix is built.
#[derive(Debug, Clone)]
pub struct SparseBuilder {
    nrows: usize,
    ncols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl SparseBuilder {
    /// Creates an empty builder for an `nrows × ncols` matrix.
    pub fn new(nrows: usize, ncols: usize) -> Self {
        SparseBuilder {
            nrows,
            ncols,
            entries: Vec::new(),
        }
    }

    /// Creates a builder with preallocated triplet capacity.
    pub fn with_capacity(nrows: usize, ncols: usize, cap: usize) -> Self {
        SparseBuilder {
            nrows,
            ncols,
            entries: Vec::with_capacity(cap),
        }
    }

    /// Records `A[row, col] += value`. Panics on out-of-range indices.
    pub fn add(&mut self, row: usize, col: usize, value: f64) {
        assert!(
            row < self.nrows && col < self.ncols,
            "triplet ({row}, {col}) out of bounds for {}x{}",
            self.nrows,
            self.ncols
        );
        self.entries.push((row, col, value));
    }

    /// Freezes the builder into a validated CSR matrix, summing duplicates.
    pub fn build(mut self) -> Result<SparseMatrix> {
        // Deterministic: sort by (row, col), then merge equal keys.
        self.entries.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_offsets = vec![0usize; self.nrows + 1];
        let mut col_indices: Vec<usize> = Vec::with_capacity(self.entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(self.entries.len());
        let mut iter = self.entries.iter().peekable();
        for r in 0..self.nrows {
            while let Some(&&(er, ec, ev)) = iter.peek() {
                if er != r {
                    break;
                }
                iter.next();
                let mut acc = ev;
                while let Some(&&(nr, nc, nv)) = iter.peek() {
                    if nr == r && nc == ec {
                        acc += nv;
                        iter.next();
                    } else {
                        break;
                    }
                }
                col_indices.push(ec);
                values.push(acc);
            }
            row_offsets[r + 1] = col_indices.len();
        }
        SparseMatrix::from_csr(self.nrows, self.ncols, row_offsets, col_indices, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_sums_duplicates_and_sorts() {
        let mut b = SparseBuilder::new(2, 3);
        b.add(1, 2, 0.5);
        b.add(0, 1, 1.0);
        b.add(1, 2, 0.25);
        b.add(0, 0, 2.0);
        let a = b.build().unwrap();
        assert_eq!(a.nnz(), 3);
        assert_eq!(a.row(0).collect::<Vec<_>>(), vec![(0, 2.0), (1, 1.0)]);
        assert_eq!(a.row(1).collect::<Vec<_>>(), vec![(2, 0.75)]);
    }

    #[test]
    fn from_csr_rejects_unsorted_columns() {
        let err = SparseMatrix::from_csr(1, 3, vec![0, 2], vec![2, 0], vec![1.0, 1.0]);
        assert!(err.is_err());
    }

    #[test]
    fn from_csr_rejects_non_finite() {
        let err = SparseMatrix::from_csr(1, 2, vec![0, 1], vec![0], vec![f64::NAN]);
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn spmv_matches_dense() {
        let mut b = SparseBuilder::new(3, 2);
        b.add(0, 0, 1.0);
        b.add(0, 1, 2.0);
        b.add(1, 1, -1.0);
        b.add(2, 0, 3.0);
        let a = b.build().unwrap();
        let x = [1.0, 2.0];
        let y = a.spmv(&x);
        assert_eq!(y, vec![5.0, -2.0, 3.0]);
        let yt = a.spmv_transpose(&[1.0, 1.0, 1.0]);
        assert_eq!(yt, vec![4.0, 1.0]);
    }

    #[test]
    fn transpose_round_trip() {
        let mut b = SparseBuilder::new(3, 4);
        b.add(0, 3, 1.5);
        b.add(2, 0, -2.0);
        b.add(1, 1, 4.0);
        b.add(0, 1, 0.5);
        let a = b.build().unwrap();
        let att = a.transpose().transpose();
        assert_eq!(a, att);
    }

    #[test]
    fn symmetry_defect_detects_asymmetry() {
        let mut b = SparseBuilder::new(2, 2);
        b.add(0, 1, 1.0);
        b.add(1, 0, 1.0 + 1e-9);
        b.add(0, 0, 1.0);
        b.add(1, 1, 1.0);
        let a = b.build().unwrap();
        assert!((a.symmetry_defect() - 1e-9).abs() < 1e-15);
    }
}
