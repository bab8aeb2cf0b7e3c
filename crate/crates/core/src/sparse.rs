//! The sparse overlay `M_sp` and its pruning schedule.
//!
//! During training the overlay is a dense value buffer plus a binary mask.
//! Pruning only ever removes entries: once masked, a position stays zero
//! for the rest of the run. Row-wise lists of active columns are kept in
//! sync with the mask so products skip dead entries.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::dense::{axpy, dot, DenseMatrix};
use crate::error::{Error, Result};

/// Number of entries that stay active out of `total` at sparsity `s`,
/// i.e. `⌈(1 − s)·total⌉`.
///
/// Products that land within floating-point noise of an integer are
/// snapped to it first, so `(1 − 0.95)·10000` counts 500 and not 501.
pub fn active_count(total: usize, sparsity: f64) -> usize {
    let s = sparsity.clamp(0.0, 1.0);
    let exact = (1.0 - s) * total as f64;
    let nearest = libm::round(exact);
    let count = if libm::fabs(exact - nearest) <= 1e-9 * f64::max(1.0, total as f64) {
        nearest
    } else {
        libm::ceil(exact)
    };
    (count as usize).min(total)
}

/// Gradual pruning ramp `s(t) = s_f·(1 − (1 − (t − t₀)/(t₁ − t₀))^e)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PruneSchedule {
    pub target_sparsity: f64,
    pub start_step: u64,
    pub end_step: u64,
    pub exponent: f64,
}

impl PruneSchedule {
    pub fn new(target_sparsity: f64, start_step: u64, end_step: u64, exponent: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&target_sparsity) {
            return Err(Error::InvalidArgument(alloc::format!(
                "target sparsity {target_sparsity} outside [0, 1]"
            )));
        }
        if start_step >= end_step {
            return Err(Error::InvalidArgument(alloc::format!(
                "prune start step {start_step} must precede end step {end_step}"
            )));
        }
        if !(exponent > 0.0 && exponent.is_finite()) {
            return Err(Error::InvalidArgument(alloc::format!(
                "prune exponent must be positive, got {exponent}"
            )));
        }
        Ok(Self {
            target_sparsity,
            start_step,
            end_step,
            exponent,
        })
    }

    /// Cubic ramp between `start_step` and `end_step`.
    pub fn cubic(target_sparsity: f64, start_step: u64, end_step: u64) -> Result<Self> {
        Self::new(target_sparsity, start_step, end_step, 3.0)
    }

    pub fn sparsity_at(&self, step: u64) -> f64 {
        if step <= self.start_step {
            return 0.0;
        }
        if step >= self.end_step {
            return self.target_sparsity;
        }
        let frac = (step - self.start_step) as f64 / (self.end_step - self.start_step) as f64;
        let s = self.target_sparsity * (1.0 - libm::pow(1.0 - frac, self.exponent));
        s.clamp(0.0, self.target_sparsity)
    }
}

/// Dense-with-mask overlay matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseOverlay {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
    nnz: usize,
    // CSR view of the mask: columns of row i are col_idx[row_ptr[i]..row_ptr[i+1]]
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
}

impl SparseOverlay {
    /// All-active overlay of zeros.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_dense(DenseMatrix::zeros(rows, cols))
    }

    /// All-active overlay holding `m`.
    pub fn from_dense(m: DenseMatrix) -> Self {
        let (rows, cols) = m.shape();
        let mask = vec![true; rows * cols];
        let mut o = Self {
            rows,
            cols,
            values: m.into_vec(),
            mask,
            nnz: rows * cols,
            row_ptr: Vec::new(),
            col_idx: Vec::new(),
        };
        o.rebuild_index();
        o
    }

    /// Builds from a value buffer and mask; masked values must already be zero.
    pub fn from_parts(rows: usize, cols: usize, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        let dense = DenseMatrix::new(rows, cols, values)?;
        if mask.len() != dense.len() {
            return Err(Error::shape("SparseOverlay::from_parts", dense.len(), mask.len()));
        }
        if dense
            .as_slice()
            .iter()
            .zip(&mask)
            .any(|(&v, &keep)| !keep && v != 0.0)
        {
            return Err(Error::InvalidArgument(
                "inactive overlay positions must hold exactly zero".into(),
            ));
        }
        let nnz = mask.iter().filter(|&&m| m).count();
        let mut o = Self {
            rows,
            cols,
            values: dense.into_vec(),
            mask,
            nnz,
            row_ptr: Vec::new(),
            col_idx: Vec::new(),
        };
        o.rebuild_index();
        Ok(o)
    }

    /// Builds from `(row, col, value)` triples; unlisted positions are inactive.
    pub fn from_triples(rows: usize, cols: usize, triples: &[(usize, usize, f64)]) -> Result<Self> {
        let len = rows
            .checked_mul(cols)
            .ok_or(Error::Overflow("SparseOverlay::from_triples"))?;
        let mut values = vec![0.0; len];
        let mut mask = vec![false; len];
        for &(r, c, v) in triples {
            if r >= rows || c >= cols {
                return Err(Error::InvalidArgument(alloc::format!(
                    "triple ({r}, {c}) outside {rows}x{cols} overlay"
                )));
            }
            if mask[r * cols + c] {
                return Err(Error::InvalidArgument(alloc::format!(
                    "duplicate overlay triple at ({r}, {c})"
                )));
            }
            mask[r * cols + c] = true;
            values[r * cols + c] = v;
        }
        Self::from_parts(rows, cols, values, mask)
    }

    fn rebuild_index(&mut self) {
        self.row_ptr.clear();
        self.col_idx.clear();
        self.row_ptr.reserve(self.rows + 1);
        self.col_idx.reserve(self.nnz);
        self.row_ptr.push(0);
        for r in 0..self.rows {
            let mrow = &self.mask[r * self.cols..(r + 1) * self.cols];
            self.col_idx
                .extend(mrow.iter().enumerate().filter(|(_, &m)| m).map(|(c, _)| c as u32));
            self.row_ptr.push(self.col_idx.len());
        }
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
    pub fn nnz(&self) -> usize {
        self.nnz
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sparsity(&self) -> f64 {
        1.0 - self.nnz as f64 / self.values.len() as f64
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn is_active(&self, r: usize, c: usize) -> bool {
        self.mask[r * self.cols + c]
    }

    /// Mutable values alongside the (read-only) mask. Callers must leave
    /// inactive positions at zero; [`SparseOverlay::enforce_mask`] restores
    /// that if in doubt.
    pub fn values_and_mask_mut(&mut self) -> (&mut [f64], &[bool]) {
        (&mut self.values, &self.mask)
    }

    pub fn enforce_mask(&mut self) {
        for (v, &m) in self.values.iter_mut().zip(&self.mask) {
            if !m {
                *v = 0.0;
            }
        }
    }

    /// Active columns of row `r`.
    #[inline]
    pub(crate) fn row_cols(&self, r: usize) -> &[u32] {
        &self.col_idx[self.row_ptr[r]..self.row_ptr[r + 1]]
    }

    /// Active `(row, col, value)` entries in row-major order.
    pub fn triples(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| {
            self.row_cols(r)
                .iter()
                .map(move |&c| (r, c as usize, self.values[r * self.cols + c as usize]))
        })
    }

    /// `(values ⊙ mask)` as a dense matrix.
    pub fn to_dense(&self) -> DenseMatrix {
        DenseMatrix::new(self.rows, self.cols, self.values.clone()).expect("overlay values are finite")
    }

    /// Keeps the `⌈(1 − s)·rows·cols⌉` largest-magnitude active entries and
    /// permanently deactivates the rest. Ties keep the lower flat index.
    pub fn prune_to_sparsity(&mut self, sparsity: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&sparsity) {
            return Err(Error::InvalidArgument(alloc::format!(
                "sparsity {sparsity} outside [0, 1]"
            )));
        }
        let keep = active_count(self.values.len(), sparsity);
        if keep > self.nnz {
            return Err(Error::SparsityDecrease {
                current: self.sparsity(),
                requested: sparsity,
            });
        }
        if keep == self.nnz {
            return Ok(());
        }
        let mut active: Vec<u32> = Vec::with_capacity(self.nnz);
        active.extend(
            self.mask
                .iter()
                .enumerate()
                .filter(|(_, &m)| m)
                .map(|(i, _)| i as u32),
        );
        let values = &self.values;
        let by_importance = |a: &u32, b: &u32| -> Ordering {
            let (va, vb) = (libm::fabs(values[*a as usize]), libm::fabs(values[*b as usize]));
            vb.partial_cmp(&va).unwrap_or(Ordering::Equal).then(a.cmp(b))
        };
        if keep > 0 {
            active.select_nth_unstable_by(keep - 1, by_importance);
        }
        for &i in &active[keep..] {
            self.mask[i as usize] = false;
            self.values[i as usize] = 0.0;
        }
        self.nnz = keep;
        self.rebuild_index();
        Ok(())
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::shape("overlay_matvec", self.cols, x.len()));
        }
        let mut out = vec![0.0; self.rows];
        self.matvec_into(x, &mut out);
        Ok(out)
    }

    pub(crate) fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let vrow = &self.values[r * self.cols..(r + 1) * self.cols];
            let cols = self.row_cols(r);
            *o = if cols.len() == self.cols {
                dot(vrow, x)
            } else {
                cols.iter().map(|&c| vrow[c as usize] * x[c as usize]).sum()
            };
        }
    }

    /// Accumulates `g_W += g_out ⊗ x` on active entries and
    /// `g_x += Wᵀ g_out`.
    pub(crate) fn grad_accumulate(&self, x: &[f64], g_out: &[f64], g_w: &mut [f64], g_x: &mut [f64]) {
        for (r, &g) in g_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let base = r * self.cols;
            let cols = self.row_cols(r);
            if cols.len() == self.cols {
                axpy(g, x, &mut g_w[base..base + self.cols]);
                axpy(g, &self.values[base..base + self.cols], g_x);
                continue;
            }
            for &c in cols {
                let c = c as usize;
                g_w[base + c] += g * x[c];
                g_x[c] += g * self.values[base + c];
            }
        }
    }

    /// Plain masked SGD step `W −= lr·g` on active entries.
    pub fn apply_grad(&mut self, g: &DenseMatrix, lr: f64) -> Result<()> {
        if g.shape() != self.shape() {
            return Err(Error::shape(
                "overlay_apply_grad",
                alloc::format!("{}x{}", self.rows, self.cols),
                alloc::format!("{}x{}", g.rows(), g.cols()),
            ));
        }
        for ((v, &m), &gv) in self.values.iter_mut().zip(&self.mask).zip(g.as_slice()) {
            if m {
                *v -= lr * gv;
            }
        }
        Ok(())
    }
}
