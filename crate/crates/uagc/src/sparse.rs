//! Compressed-row sparse matrices.
//!
//! Used for the sensor adjacency and its walk-normalized forms; values are
//! constants during training (gradients flow through the dense operand of
//! sparse-dense products only).

use std::io::{BufRead, Write};

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("duplicate entry at ({0}, {1})")]
    DuplicateEntry(usize, usize),
    #[error("entry ({0}, {1}) outside {2}x{3}")]
    IndexOutOfRange(usize, usize, usize, usize),
    #[error("non-finite value at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
}

/// Immutable CSR matrix with entries sorted by (row, col).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix<T> {
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> SparseMatrix<T> {
    /// Builds from (row, col, value) triplets. Rejects duplicates and
    /// non-finite values; entries that are exactly zero are dropped so the
    /// stored support is the nonzero support.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        mut triplets: Vec<(usize, usize, T)>,
    ) -> Result<Self, SparseError> {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        for w in triplets.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
                return Err(SparseError::DuplicateEntry(w[0].0, w[0].1));
            }
        }
        let mut indptr = vec![0usize; n_rows + 1];
        let mut col_indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        for (r, c, v) in triplets {
            if r >= n_rows || c >= n_cols {
                return Err(SparseError::IndexOutOfRange(r, c, n_rows, n_cols));
            }
            if !v.is_finite() {
                return Err(SparseError::NonFinite(r, c));
            }
            if v.is_zero() {
                continue;
            }
            indptr[r + 1] += 1;
            col_indices.push(c);
            values.push(v);
        }
        for r in 0..n_rows {
            indptr[r + 1] += indptr[r];
        }
        Ok(Self {
            n_rows,
            n_cols,
            indptr,
            col_indices,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n_rows: n,
            n_cols: n,
            indptr: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: vec![T::one(); n],
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        let (lo, hi) = (self.indptr[r], self.indptr[r + 1]);
        match self.col_indices[lo..hi].binary_search(&c) {
            Ok(k) => self.values[lo + k],
            Err(_) => T::zero(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        (0..self.n_rows).flat_map(move |r| {
            let (lo, hi) = (self.indptr[r], self.indptr[r + 1]);
            self.col_indices[lo..hi]
                .iter()
                .zip(&self.values[lo..hi])
                .map(move |(&c, &v)| (r, c, v))
        })
    }

    pub fn row(&self, r: usize) -> (&[usize], &[T]) {
        let (lo, hi) = (self.indptr[r], self.indptr[r + 1]);
        (&self.col_indices[lo..hi], &self.values[lo..hi])
    }

    pub fn row_sums(&self) -> Vec<T> {
        let mut sums = vec![T::zero(); self.n_rows];
        for r in 0..self.n_rows {
            let (_, vals) = self.row(r);
            sums[r] = vals.iter().copied().sum();
        }
        sums
    }

    /// Multiplies each row by the given factor.
    pub fn scale_rows(&self, factors: &[T]) -> Self {
        assert_eq!(factors.len(), self.n_rows);
        let mut out = self.clone();
        for r in 0..self.n_rows {
            let (lo, hi) = (out.indptr[r], out.indptr[r + 1]);
            for v in &mut out.values[lo..hi] {
                *v = *v * factors[r];
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let triplets = self.iter().map(|(r, c, v)| (c, r, v)).collect();
        Self::from_triplets(self.n_cols, self.n_rows, triplets).expect("transpose of valid matrix")
    }

    /// Entry-wise product; the result's support is the support intersection.
    pub fn hadamard(&self, other: &Self) -> Result<Self, SparseError> {
        if self.n_rows != other.n_rows || self.n_cols != other.n_cols {
            return Err(SparseError::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.n_rows, self.n_cols, other.n_rows, other.n_cols
            )));
        }
        let mut triplets = Vec::new();
        for (r, c, v) in self.iter() {
            let w = other.get(r, c);
            let prod = v * w;
            if !prod.is_zero() {
                triplets.push((r, c, prod));
            }
        }
        Self::from_triplets(self.n_rows, self.n_cols, triplets)
    }

    /// `out = self · x` where `x` is row-major `(x_rows, x_cols)` and
    /// `x_rows` is a multiple of `n_cols`; the product is applied
    /// independently to each `n_cols`-row block (batched windows share one
    /// operator). Accumulation follows CSR order, so results are exactly
    /// reproducible.
    pub fn matmul_dense(&self, x: &[T], x_rows: usize, x_cols: usize, out: &mut [T]) {
        assert_eq!(x.len(), x_rows * x_cols, "spmm: input size");
        assert!(
            x_rows % self.n_cols == 0,
            "spmm: input rows {} not a multiple of operator cols {}",
            x_rows,
            self.n_cols
        );
        let blocks = x_rows / self.n_cols;
        assert_eq!(out.len(), blocks * self.n_rows * x_cols, "spmm: output size");
        for v in out.iter_mut() {
            *v = T::zero();
        }
        for b in 0..blocks {
            let x_base = b * self.n_cols;
            let y_base = b * self.n_rows;
            for r in 0..self.n_rows {
                let (cols, vals) = self.row(r);
                let y_row = &mut out[(y_base + r) * x_cols..(y_base + r + 1) * x_cols];
                for (&c, &a) in cols.iter().zip(vals) {
                    let x_row = &x[(x_base + c) * x_cols..(x_base + c + 1) * x_cols];
                    for (y, &xv) in y_row.iter_mut().zip(x_row) {
                        *y += a * xv;
                    }
                }
            }
        }
    }

    /// Writes `# uagc-sparse v1 rows=<n> cols=<n>` then `i,j,value` lines
    /// sorted by (i, j), values as shortest round-trip decimals.
    pub fn write(&self, out: &mut impl Write) -> Result<(), SparseError> {
        writeln!(out, "# uagc-sparse v1 rows={} cols={}", self.n_rows, self.n_cols)?;
        for (r, c, v) in self.iter() {
            writeln!(out, "{r},{c},{v}")?;
        }
        Ok(())
    }

    pub fn read(input: impl BufRead) -> Result<Self, SparseError> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or(SparseError::Format {
                line: 1,
                msg: "empty file".into(),
            })??;
        let rest = header
            .strip_prefix("# uagc-sparse v1 rows=")
            .ok_or_else(|| SparseError::Format {
                line: 1,
                msg: format!("bad header `{header}`"),
            })?;
        let (rows_s, cols_s) = rest.split_once(" cols=").ok_or_else(|| SparseError::Format {
            line: 1,
            msg: format!("bad header `{header}`"),
        })?;
        let parse_dim = |s: &str| {
            s.trim().parse::<usize>().map_err(|_| SparseError::Format {
                line: 1,
                msg: format!("bad dimension `{s}`"),
            })
        };
        let n_rows = parse_dim(rows_s)?;
        let n_cols = parse_dim(cols_s)?;
        let mut triplets = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            let lineno = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let mut next = || {
                fields.next().ok_or(SparseError::Format {
                    line: lineno,
                    msg: "expected i,j,value".into(),
                })
            };
            let r = next()?.trim().parse::<usize>().map_err(|_| SparseError::Format {
                line: lineno,
                msg: "bad row index".into(),
            })?;
            let c = next()?.trim().parse::<usize>().map_err(|_| SparseError::Format {
                line: lineno,
                msg: "bad col index".into(),
            })?;
            let v = next()?.trim().parse::<f64>().map_err(|_| SparseError::Format {
                line: lineno,
                msg: "bad value".into(),
            })?;
            triplets.push((r, c, T::from_f64(v)));
        }
        Self::from_triplets(n_rows, n_cols, triplets)
    }

    /// Dense row-major copy, for small-matrix tests.
    pub fn to_dense(&self) -> Vec<T> {
        let mut dense = vec![T::zero(); self.n_rows * self.n_cols];
        for (r, c, v) in self.iter() {
            dense[r * self.n_cols + c] = v;
        }
        dense
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    type M = SparseMatrix<f64>;

    #[test]
    fn construction_rules() {
        let m = M::from_triplets(2, 3, vec![(0, 1, 2.0), (1, 2, 0.0), (1, 0, -1.0)]).unwrap();
        assert_eq!(m.nnz(), 2); // exact zero dropped
        assert_eq!(m.get(0, 1), 2.0);
        assert_eq!(m.get(1, 0), -1.0);
        assert_eq!(m.get(1, 2), 0.0);
        assert!(matches!(
            M::from_triplets(2, 2, vec![(0, 0, 1.0), (0, 0, 2.0)]),
            Err(SparseError::DuplicateEntry(0, 0))
        ));
        assert!(matches!(
            M::from_triplets(2, 2, vec![(5, 0, 1.0)]),
            Err(SparseError::IndexOutOfRange(..))
        ));
        assert!(matches!(
            M::from_triplets(2, 2, vec![(0, 0, f64::NAN)]),
            Err(SparseError::NonFinite(0, 0))
        ));
    }

    #[test]
    fn identity_spmm_is_identity() {
        let eye = M::identity(4);
        let x: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let mut y = vec![0.0; 12];
        eye.matmul_dense(&x, 4, 3, &mut y);
        assert_eq!(x, y);
    }

    #[test]
    fn block_batched_spmm() {
        // A = [[0,1],[2,0]] applied to two stacked 2x1 blocks.
        let a = M::from_triplets(2, 2, vec![(0, 1, 1.0), (1, 0, 2.0)]).unwrap();
        let x = [10.0, 20.0, 30.0, 40.0];
        let mut y = vec![0.0; 4];
        a.matmul_dense(&x, 4, 1, &mut y);
        assert_eq!(y, [20.0, 20.0, 40.0, 60.0]);
    }

    #[test]
    fn transpose_round_trip() {
        let m = M::from_triplets(3, 2, vec![(0, 1, 5.0), (2, 0, 1.5), (1, 1, -2.0)]).unwrap();
        assert_eq!(m.transpose().transpose(), m);
        assert_eq!(m.transpose().get(1, 0), 5.0);
    }

    #[test]
    fn file_round_trip_bit_identical() {
        let m = M::from_triplets(3, 3, vec![(0, 0, 1.0), (1, 2, 0.1 + 0.2), (2, 1, 1e-30)]).unwrap();
        let mut bytes = Vec::new();
        m.write(&mut bytes).unwrap();
        let m2 = M::read(std::io::Cursor::new(&bytes)).unwrap();
        assert_eq!(m, m2);
        let mut bytes2 = Vec::new();
        m2.write(&mut bytes2).unwrap();
        assert_eq!(bytes, bytes2);
    }

    proptest! {
        #[test]
        fn spmm_matches_dense_reference(
            seed in 0u64..500,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..6usize);
            let cols = rng.random_range(1..5usize);
            let mut triplets = Vec::new();
            for r in 0..n {
                for c in 0..n {
                    if rng.random_range(0.0..1.0) < 0.4 {
                        triplets.push((r, c, rng.random_range(-2.0..2.0)));
                    }
                }
            }
            let a = M::from_triplets(n, n, triplets).unwrap();
            let x: Vec<f64> = (0..n * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut y = vec![0.0; n * cols];
            a.matmul_dense(&x, n, cols, &mut y);
            let ad = a.to_dense();
            for r in 0..n {
                for c in 0..cols {
                    let mut want = 0.0;
                    for k in 0..n {
                        want += ad[r * n + k] * x[k * cols + c];
                    }
                    prop_assert!((y[r * cols + c] - want).abs() < 1e-12);
                }
            }
        }
    }
}
