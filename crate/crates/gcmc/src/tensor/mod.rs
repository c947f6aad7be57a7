//! Dense/sparse matrix kernels and deterministic randomness.
//!
//! This is the only numeric substrate in the crate: everything above it
//! (graph construction, the encoder/decoder, training) is written against
//! these few operations. All storage is 64-bit floats; kernels are
//! single-threaded with a fixed reduction order per output row, so results
//! are bitwise reproducible.

pub mod rng;

pub use rng::{derive_seed, Rng};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::shape(
                "DenseMatrix::from_values",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, values.len()),
            ));
        }
        Ok(DenseMatrix { rows, cols, values })
    }

    /// Convenience constructor for tests and small literals.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut values = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            values.extend_from_slice(row);
        }
        DenseMatrix { rows: r, cols: c, values }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    /// Matrix with entries drawn uniformly from [lo, hi).
    pub fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let values = (0..rows * cols).map(|_| rng.uniform(lo, hi)).collect();
        DenseMatrix { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.values[c * self.rows + r] = self.values[r * self.cols + c];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    /// `self += other`, shape-checked.
    pub fn add_assign(&mut self, other: &DenseMatrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(
                "DenseMatrix::add_assign",
                format!(
                    "{}x{} += {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }

    /// Scales every entry of row `r` by `s`.
    pub fn scale_row(&mut self, r: usize, s: f64) {
        for v in self.row_mut(r) {
            *v *= s;
        }
    }

    /// Copy of the column block [c0, c1).
    pub fn column_block(&self, c0: usize, c1: usize) -> DenseMatrix {
        assert!(c0 <= c1 && c1 <= self.cols);
        let mut out = DenseMatrix::zeros(self.rows, c1 - c0);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[c0..c1]);
        }
        out
    }
}

/// Compressed-sparse-row matrix. Column indices within each row are sorted
/// and unique, which fixes the reduction order of every kernel touching it.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<u32>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from (row, col, value) triplets. Duplicate (row, col) pairs are
    /// rejected; entries are sorted per row.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self> {
        for &(r, c, _) in triplets {
            if r >= rows || c >= cols {
                return Err(Error::shape(
                    "SparseMatrix::from_triplets",
                    format!("entry ({r},{c}) outside {rows}x{cols}"),
                ));
            }
        }
        let mut sorted: Vec<&(usize, usize, f64)> = triplets.iter().collect();
        sorted.sort_by_key(|&&(r, c, _)| (r, c));
        for pair in sorted.windows(2) {
            if pair[0].0 == pair[1].0 && pair[0].1 == pair[1].1 {
                return Err(Error::Data(format!(
                    "duplicate sparse entry at ({}, {})",
                    pair[0].0, pair[0].1
                )));
            }
        }
        let mut row_offsets = vec![0usize; rows + 1];
        for &&(r, _, _) in &sorted {
            row_offsets[r + 1] += 1;
        }
        for i in 1..=rows {
            row_offsets[i] += row_offsets[i - 1];
        }
        let col_indices = sorted.iter().map(|&&(_, c, _)| c as u32).collect();
        let values = sorted.iter().map(|&&(_, _, v)| v).collect();
        Ok(SparseMatrix {
            rows,
            cols,
            row_offsets,
            col_indices,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            rows: n,
            cols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n as u32).collect(),
            values: vec![1.0; n],
        }
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

    /// Column indices and values of row `r`.
    pub fn row_entries(&self, r: usize) -> (&[u32], &[f64]) {
        let lo = self.row_offsets[r];
        let hi = self.row_offsets[r + 1];
        (&self.col_indices[lo..hi], &self.values[lo..hi])
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut counts = vec![0usize; self.cols + 1];
        for &c in &self.col_indices {
            counts[c as usize + 1] += 1;
        }
        for i in 1..=self.cols {
            counts[i] += counts[i - 1];
        }
        let row_offsets = counts.clone();
        let mut cursor = counts;
        let mut col_indices = vec![0u32; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for r in 0..self.rows {
            let (cols, vals) = self.row_entries(r);
            for (&c, &v) in cols.iter().zip(vals) {
                let slot = cursor[c as usize];
                col_indices[slot] = r as u32;
                values[slot] = v;
                cursor[c as usize] += 1;
            }
        }
        SparseMatrix {
            rows: self.cols,
            cols: self.rows,
            row_offsets,
            col_indices,
            values,
        }
    }

    pub fn densify(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let (cols, vals) = self.row_entries(r);
            for (&c, &v) in cols.iter().zip(vals) {
                out.set(r, c as usize, v);
            }
        }
        out
    }
}

/// Sparse-dense product `a * b`. Cost O(nnz(a) * b.cols).
pub fn spmm(a: &SparseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "spmm",
            format!("{}x{} * {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    spmm_into_rows(a, b, None, &mut out);
    Ok(out)
}

/// Like [`spmm`] but computes only the listed output rows, writing output row
/// `k` for input row `rows[k]`. Used by mini-batch forward passes where only
/// a subset of receiver nodes is needed.
pub fn spmm_rows(a: &SparseMatrix, b: &DenseMatrix, rows: &[usize]) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "spmm_rows",
            format!("{}x{} * {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = DenseMatrix::zeros(rows.len(), b.cols);
    spmm_into_rows(a, b, Some(rows), &mut out);
    Ok(out)
}

fn spmm_into_rows(a: &SparseMatrix, b: &DenseMatrix, rows: Option<&[usize]>, out: &mut DenseMatrix) {
    let n_out = out.rows;
    for k in 0..n_out {
        let r = rows.map_or(k, |rs| rs[k]);
        let (cols, vals) = a.row_entries(r);
        let out_row = out.row_mut(k);
        for (&c, &v) in cols.iter().zip(vals) {
            let b_row = b.row(c as usize);
            for (o, &x) in out_row.iter_mut().zip(b_row) {
                *o += v * x;
            }
        }
    }
}

/// Accumulates `a^T * d` into `out`, where `d` holds one row per entry of
/// `rows` (or per row of `a` when `rows` is `None`). This is the adjoint of
/// [`spmm_rows`] and is computed by scattering, so no transposed copy of `a`
/// is needed.
pub fn spmm_transpose_accumulate(
    a: &SparseMatrix,
    d: &DenseMatrix,
    rows: Option<&[usize]>,
    out: &mut DenseMatrix,
) -> Result<()> {
    let n = rows.map_or(a.rows, <[usize]>::len);
    if d.rows != n || out.rows != a.cols || out.cols != d.cols {
        return Err(Error::shape(
            "spmm_transpose_accumulate",
            format!(
                "a {}x{}, d {}x{}, out {}x{}, rows {n}",
                a.rows, a.cols, d.rows, d.cols, out.rows, out.cols
            ),
        ));
    }
    for k in 0..n {
        let r = rows.map_or(k, |rs| rs[k]);
        let (cols, vals) = a.row_entries(r);
        let d_row = d.row(k);
        for (&c, &v) in cols.iter().zip(vals) {
            let out_row = out.row_mut(c as usize);
            for (o, &x) in out_row.iter_mut().zip(d_row) {
                *o += v * x;
            }
        }
    }
    Ok(())
}

/// Dense product `a * b` with an i-k-j loop order (contiguous inner axpy).
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} * {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = b.row(k);
            for (o, &x) in out_row.iter_mut().zip(b_row) {
                *o += aik * x;
            }
        }
    }
    Ok(out)
}

/// `a * b^T`: both operands are walked along contiguous rows.
pub fn matmul_nt(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.cols {
        return Err(Error::shape(
            "matmul_nt",
            format!("{}x{} * ({}x{})^T", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = DenseMatrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for j in 0..b.rows {
            let b_row = b.row(j);
            let mut acc = 0.0;
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out_row[j] = acc;
        }
    }
    Ok(out)
}

/// `a^T * b`, accumulated row-by-row of the operands (contiguous inner axpy).
pub fn matmul_tn(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows != b.rows {
        return Err(Error::shape(
            "matmul_tn",
            format!("({}x{})^T * {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = DenseMatrix::zeros(a.cols, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let b_row = b.row(i);
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let out_row = out.row_mut(k);
            for (o, &x) in out_row.iter_mut().zip(b_row) {
                *o += aik * x;
            }
        }
    }
    Ok(out)
}

/// Row-wise softmax, computed max-shifted for stability. Empty input maps to
/// empty output.
pub fn row_softmax(logits: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(logits.rows, logits.cols);
    for r in 0..logits.rows {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let out_row = out.row_mut(r);
        let mut sum = 0.0;
        for (o, &x) in out_row.iter_mut().zip(row) {
            let e = (x - max).exp();
            *o = e;
            sum += e;
        }
        for o in out_row.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// Element dropout mask: which entries were kept, plus the inverse-keep scale
/// applied to survivors.
#[derive(Clone, Debug)]
pub struct DropoutMask {
    keep: Vec<bool>,
    scale: f64,
}

impl DropoutMask {
    /// Samples a mask for a `rows x cols` matrix.
    pub fn sample(rows: usize, cols: usize, p: f64, rng: &mut Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidConfig(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        let keep = if p == 0.0 {
            vec![true; rows * cols]
        } else {
            (0..rows * cols).map(|_| !rng.bernoulli(p)).collect()
        };
        Ok(DropoutMask {
            keep,
            scale: 1.0 / (1.0 - p),
        })
    }

    pub fn all_keep(rows: usize, cols: usize) -> Self {
        DropoutMask {
            keep: vec![true; rows * cols],
            scale: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn kept(&self, idx: usize) -> bool {
        self.keep[idx]
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Applies the mask: kept entries are scaled by `1/(1-p)`, dropped
    /// entries become zero. Also the backward map for gradients.
    pub fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.values.len() != self.keep.len() {
            return Err(Error::shape(
                "DropoutMask::apply",
                format!("mask len {} vs matrix {}", self.keep.len(), x.values.len()),
            ));
        }
        let mut out = x.clone();
        for (v, &k) in out.values.iter_mut().zip(&self.keep) {
            *v = if k { *v * self.scale } else { 0.0 };
        }
        Ok(out)
    }
}

/// Inverted dropout on matrix entries: each entry is zeroed independently
/// with probability `p`; survivors are scaled by `1/(1-p)`. Returns the
/// dropped matrix together with the mask needed by backprop.
pub fn apply_unit_dropout(
    x: &DenseMatrix,
    p: f64,
    rng: &mut Rng,
) -> Result<(DenseMatrix, DropoutMask)> {
    let mask = DropoutMask::sample(x.rows, x.cols, p, rng)?;
    let dropped = mask.apply(x)?;
    Ok((dropped, mask))
}
