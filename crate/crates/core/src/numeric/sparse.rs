use crate::error::{Error, Result};

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Build from `(row, col, value)` triplets; they must be sorted by row
    /// then column with no duplicates.
    pub fn from_sorted_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut indptr = vec![0usize; n_rows + 1];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if r >= n_rows || c >= n_cols {
                return Err(Error::Shape(format!("entry ({r},{c}) outside {n_rows}x{n_cols}")));
            }
            if last.is_some_and(|l| l >= (r, c)) {
                return Err(Error::Shape("triplets not strictly sorted".into()));
            }
            last = Some((r, c));
            indptr[r + 1] += 1;
            indices.push(c as u32);
            values.push(v);
        }
        for r in 0..n_rows {
            indptr[r + 1] += indptr[r];
        }
        Ok(Self {
            n_rows,
            n_cols,
            indptr,
            indices,
            values,
        })
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

    /// `(col, value)` pairs of one row.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .zip(&self.values[span])
            .map(|(&c, &v)| (c as usize, v))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.indptr[r]..self.indptr[r + 1];
        match self.indices[span.clone()].binary_search(&(c as u32)) {
            Ok(pos) => self.values[span.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_rows).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    /// `self · x` for a row-major `x` with `n_cols` rows and `width` columns.
    pub fn matmul_dense(&self, x: &[f64], width: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n_cols * width);
        let mut out = vec![0.0; self.n_rows * width];
        for (r, dst) in out.chunks_mut(width.max(1)).enumerate().take(self.n_rows) {
            for (c, v) in self.row(r) {
                let src = &x[c * width..(c + 1) * width];
                for (o, s) in dst.iter_mut().zip(src) {
                    *o += v * s;
                }
            }
        }
        out
    }

    /// `selfᵀ · g` for a row-major `g` with `n_rows` rows and `width` columns.
    pub fn transpose_matmul_dense(&self, g: &[f64], width: usize) -> Vec<f64> {
        debug_assert_eq!(g.len(), self.n_rows * width);
        let mut out = vec![0.0; self.n_cols * width];
        for r in 0..self.n_rows {
            let src = &g[r * width..(r + 1) * width];
            for (c, v) in self.row(r) {
                let dst = &mut out[c * width..(c + 1) * width];
                for (o, s) in dst.iter_mut().zip(src) {
                    *o += v * s;
                }
            }
        }
        out
    }
}
