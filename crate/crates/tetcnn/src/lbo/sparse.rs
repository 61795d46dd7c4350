//! Sparse matrix storage: symmetric CSR (upper triangle stored, mirrored on
//! access) and a small general CSR for non-symmetric coarse operators.

use ndarray::{Array2, ArrayView2, ArrayViewMut2};

/// Symmetric sparse matrix; only entries with `row <= col` are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymmetricMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col: Vec<u32>,
    val: Vec<f64>,
}

impl SparseSymmetricMatrix {
    /// Build from (row, col, value) triplets. Entries are canonicalized to the
    /// upper triangle, stably sorted, and duplicates summed in sorted order so
    /// the result is bit-reproducible for a fixed triplet sequence.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut entries: Vec<(u32, u32, f64)> = triplets
            .iter()
            .map(|&(i, j, v)| {
                debug_assert!(i < n && j < n);
                if i <= j {
                    (i as u32, j as u32, v)
                } else {
                    (j as u32, i as u32, v)
                }
            })
            .collect();
        entries.sort_by_key(|&(i, j, _)| (i, j));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col = Vec::with_capacity(entries.len());
        let mut val = Vec::with_capacity(entries.len());
        let mut iter = entries.into_iter().peekable();
        while let Some((i, j, mut v)) = iter.next() {
            while let Some(&(i2, j2, v2)) = iter.peek() {
                if i2 == i && j2 == j {
                    v += v2;
                    iter.next();
                } else {
                    break;
                }
            }
            row_ptr[i as usize + 1] += 1;
            col.push(j);
            val.push(v);
        }
        for r in 0..n {
            row_ptr[r + 1] += row_ptr[r];
        }
        SparseSymmetricMatrix { n, row_ptr, col, val }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Stored (upper-triangle) entry count.
    pub fn nnz_stored(&self) -> usize {
        self.val.len()
    }

    /// Logical nonzero count with the mirrored lower triangle included.
    pub fn nnz(&self) -> usize {
        let diag = self
            .iter_upper()
            .filter(|&(i, j, _)| i == j)
            .count();
        2 * self.val.len() - diag
    }

    /// Stored entries as (row, col, value) with `row <= col`.
    pub fn iter_upper(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| {
            (self.row_ptr[i]..self.row_ptr[i + 1])
                .map(move |k| (i, self.col[k] as usize, self.val[k]))
        })
    }

    /// Value at (i, j), mirroring across the diagonal; 0.0 off-pattern.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entry(i, j).unwrap_or(0.0)
    }

    /// Stored value at (i, j) (mirrored), or None when off-pattern.
    pub fn entry(&self, i: usize, j: usize) -> Option<f64> {
        let (r, c) = if i <= j { (i, j) } else { (j, i) };
        let lo = self.row_ptr[r];
        let hi = self.row_ptr[r + 1];
        match self.col[lo..hi].binary_search(&(c as u32)) {
            Ok(k) => Some(self.val[lo + k]),
            Err(_) => None,
        }
    }

    /// y = S x (dense vector).
    pub fn apply_vec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        assert_eq!(y.len(), self.n);
        y.fill(0.0);
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col[k] as usize;
                let v = self.val[k];
                y[i] += v * x[j];
                if j != i {
                    y[j] += v * x[i];
                }
            }
        }
    }

    /// Y = S X for an n x f feature matrix (row-major).
    pub fn apply_mat(&self, x: ArrayView2<'_, f64>, mut y: ArrayViewMut2<'_, f64>) {
        assert_eq!(x.nrows(), self.n);
        assert_eq!(y.nrows(), self.n);
        assert_eq!(x.ncols(), y.ncols());
        y.fill(0.0);
        let f = x.ncols();
        let xs = x.as_slice().expect("row-major features");
        let ys = y.as_slice_mut().expect("row-major output");
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col[k] as usize;
                let v = self.val[k];
                let (xi, xj) = (i * f, j * f);
                for c in 0..f {
                    ys[xi + c] += v * xs[xj + c];
                }
                if j != i {
                    for c in 0..f {
                        ys[xj + c] += v * xs[xi + c];
                    }
                }
            }
        }
    }

    /// Dense mirror of the full matrix.
    pub fn to_dense(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.n, self.n));
        for (i, j, v) in self.iter_upper() {
            m[(i, j)] = v;
            if i != j {
                m[(j, i)] = v;
            }
        }
        m
    }

    /// Row sums (S applied to the constant one-vector).
    pub fn row_sums(&self) -> Vec<f64> {
        let ones = vec![1.0; self.n];
        let mut out = vec![0.0; self.n];
        self.apply_vec(&ones, &mut out);
        out
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.val.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Off-diagonal pattern as canonical (i, j) pairs with i < j.
    pub fn offdiagonal_pattern(&self) -> Vec<(usize, usize)> {
        self.iter_upper()
            .filter(|&(i, j, _)| i != j)
            .map(|(i, j, _)| (i, j))
            .collect()
    }

    /// New matrix with every entry multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        for v in &mut out.val {
            *v *= s;
        }
        out
    }

    pub(crate) fn raw_parts(&self) -> (&[usize], &[u32], &[f64]) {
        (&self.row_ptr, &self.col, &self.val)
    }

    pub(crate) fn from_raw_parts(n: usize, row_ptr: Vec<usize>, col: Vec<u32>, val: Vec<f64>) -> Self {
        assert_eq!(row_ptr.len(), n + 1);
        assert_eq!(col.len(), val.len());
        SparseSymmetricMatrix { n, row_ptr, col, val }
    }
}

/// General (possibly non-symmetric) CSR matrix. Used for the literal
/// `G^T (D^-1 S) G` coarse operator, which loses symmetry.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGeneralMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col: Vec<u32>,
    val: Vec<f64>,
}

impl SparseGeneralMatrix {
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut entries: Vec<(u32, u32, f64)> = triplets
            .iter()
            .map(|&(i, j, v)| {
                debug_assert!(i < rows && j < cols);
                (i as u32, j as u32, v)
            })
            .collect();
        entries.sort_by_key(|&(i, j, _)| (i, j));
        let mut row_ptr = vec![0usize; rows + 1];
        let mut col = Vec::with_capacity(entries.len());
        let mut val = Vec::with_capacity(entries.len());
        let mut iter = entries.into_iter().peekable();
        while let Some((i, j, mut v)) = iter.next() {
            while let Some(&(i2, j2, v2)) = iter.peek() {
                if i2 == i && j2 == j {
                    v += v2;
                    iter.next();
                } else {
                    break;
                }
            }
            row_ptr[i as usize + 1] += 1;
            col.push(j);
            val.push(v);
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        SparseGeneralMatrix { rows, cols, row_ptr, col, val }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn nnz(&self) -> usize {
        self.val.len()
    }

    pub fn apply_vec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.cols);
        assert_eq!(y.len(), self.rows);
        for i in 0..self.rows {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.val[k] * x[self.col[k] as usize];
            }
            y[i] = acc;
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let ones = vec![1.0; self.cols];
        let mut out = vec![0.0; self.rows];
        self.apply_vec(&ones, &mut out);
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |i| {
            (self.row_ptr[i]..self.row_ptr[i + 1])
                .map(move |k| (i, self.col[k] as usize, self.val[k]))
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.val.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}
