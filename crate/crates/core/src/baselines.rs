//! Comparison compressors and budget matching.
//!
//! * [`LowRankPair`]: `W ≈ U·V` with rank `r`.
//! * [`PrunedDense`]: a dense matrix gradually magnitude-pruned with the
//!   same mask semantics as the DKP overlay.
//! * Small baseline: the same model with a smaller hidden size.
//!
//! [`budget_match`] converts a target compression factor into the discrete
//! knob of each method. Only the compressed matrix itself is counted; biases
//! and embeddings are excluded.

use alloc::vec;
use alloc::vec::Vec;

use crate::dense::{axpy, dot, DenseMatrix};
use crate::error::{Error, Result};
use crate::kron::{select_factor_shapes, FactorShapes};
use crate::rng::Rng;
use crate::sparse::{PruneSchedule, SparseOverlay};

#[derive(Clone, Debug, PartialEq)]
pub struct LowRankPair {
    u: DenseMatrix,
    v: DenseMatrix,
}

#[derive(Clone, Debug)]
pub struct LowRankCache {
    batch: usize,
    x: Vec<f64>,
    hidden: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowRankGrads {
    pub u: DenseMatrix,
    pub v: DenseMatrix,
}

impl LowRankPair {
    pub fn new(u: DenseMatrix, v: DenseMatrix) -> Result<Self> {
        if u.cols() != v.rows() {
            return Err(Error::shape("LowRankPair::new", u.cols(), v.rows()));
        }
        Ok(Self { u, v })
    }

    pub fn random(rows: usize, cols: usize, rank: usize, scale: f64, rng: &mut Rng) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidArgument("rank must be at least 1".into()));
        }
        let u = DenseMatrix::from_fn(rows, rank, |_, _| rng.uniform(-scale, scale));
        let v = DenseMatrix::from_fn(rank, cols, |_, _| rng.uniform(-scale, scale));
        Self::new(u, v)
    }

    /// Rank-`r` truncation of the SVD of `w`, singular values split evenly
    /// between the factors.
    pub fn from_svd(w: &DenseMatrix, rank: usize) -> Result<Self> {
        let svd = Svd::new(w);
        let k = svd.singular_values.len();
        if rank == 0 || rank > k {
            return Err(Error::InvalidArgument(alloc::format!(
                "rank {rank} outside 1..={k}"
            )));
        }
        let (m, n) = w.shape();
        let u = DenseMatrix::from_fn(m, rank, |i, j| {
            svd.u.get(i, j) * libm::sqrt(svd.singular_values[j])
        });
        let v = DenseMatrix::from_fn(rank, n, |i, j| {
            libm::sqrt(svd.singular_values[i]) * svd.vt.get(i, j)
        });
        Self::new(u, v)
    }

    pub fn u(&self) -> &DenseMatrix {
        &self.u
    }

    pub fn v(&self) -> &DenseMatrix {
        &self.v
    }

    pub fn factors_mut(&mut self) -> (&mut DenseMatrix, &mut DenseMatrix) {
        (&mut self.u, &mut self.v)
    }

    pub fn rank(&self) -> usize {
        self.u.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.u.rows(), self.v.cols())
    }

    pub fn param_count(&self) -> usize {
        self.u.len() + self.v.len()
    }

    pub fn materialize(&self) -> DenseMatrix {
        self.u.matmul(&self.v).expect("factor shapes agree")
    }

    /// `U (V x)`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_batch(x, 1)?.0)
    }

    pub fn forward_batch(&self, x: &[f64], batch: usize) -> Result<(Vec<f64>, LowRankCache)> {
        let (m, n) = self.shape();
        let r = self.rank();
        if x.len() != batch * n {
            return Err(Error::shape("lmf_matvec", batch * n, x.len()));
        }
        let mut hidden = vec![0.0; batch * r];
        let mut out = vec![0.0; batch * m];
        for s in 0..batch {
            let xs = &x[s * n..(s + 1) * n];
            let hs = &mut hidden[s * r..(s + 1) * r];
            for (k, h) in hs.iter_mut().enumerate() {
                *h = dot(self.v.row(k), xs);
            }
            for (i, o) in out[s * m..(s + 1) * m].iter_mut().enumerate() {
                *o = dot(self.u.row(i), hs);
            }
        }
        Ok((
            out,
            LowRankCache {
                batch,
                x: x.to_vec(),
                hidden,
            },
        ))
    }

    pub fn backward_batch(
        &self,
        cache: &LowRankCache,
        g_out: &[f64],
        grads: &mut LowRankGrads,
        g_x: &mut [f64],
    ) -> Result<()> {
        let (m, n) = self.shape();
        let r = self.rank();
        if g_out.len() != cache.batch * m {
            return Err(Error::shape("lmf_backward", cache.batch * m, g_out.len()));
        }
        let mut g_hidden = vec![0.0; r];
        for s in 0..cache.batch {
            let g = &g_out[s * m..(s + 1) * m];
            let hs = &cache.hidden[s * r..(s + 1) * r];
            let xs = &cache.x[s * n..(s + 1) * n];
            g_hidden.iter_mut().for_each(|v| *v = 0.0);
            for (i, &gi) in g.iter().enumerate() {
                axpy(gi, hs, &mut grads.u.as_mut_slice()[i * r..(i + 1) * r]);
                axpy(gi, self.u.row(i), &mut g_hidden);
            }
            let gxs = &mut g_x[s * n..(s + 1) * n];
            for (k, &gh) in g_hidden.iter().enumerate() {
                axpy(gh, xs, &mut grads.v.as_mut_slice()[k * n..(k + 1) * n]);
                axpy(gh, self.v.row(k), gxs);
            }
        }
        Ok(())
    }

    /// Single-vector backward: `(grads, g_x)`.
    pub fn backward(&self, x: &[f64], g_out: &[f64]) -> Result<(LowRankGrads, Vec<f64>)> {
        let (_, cache) = self.forward_batch(x, 1)?;
        let mut grads = LowRankGrads::zeros_for(self);
        let mut g_x = vec![0.0; self.shape().1];
        self.backward_batch(&cache, g_out, &mut grads, &mut g_x)?;
        Ok((grads, g_x))
    }
}

impl LowRankGrads {
    pub fn zeros_for(p: &LowRankPair) -> Self {
        Self {
            u: DenseMatrix::zeros(p.u.rows(), p.u.cols()),
            v: DenseMatrix::zeros(p.v.rows(), p.v.cols()),
        }
    }
}

/// Dense weights under gradual magnitude pruning.
#[derive(Clone, Debug, PartialEq)]
pub struct PrunedDense {
    weights: SparseOverlay,
    schedule: PruneSchedule,
}

impl PrunedDense {
    pub fn new(weights: DenseMatrix, schedule: PruneSchedule) -> Self {
        Self {
            weights: SparseOverlay::from_dense(weights),
            schedule,
        }
    }

    pub fn from_overlay(weights: SparseOverlay, schedule: PruneSchedule) -> Self {
        Self { weights, schedule }
    }

    pub fn weights(&self) -> &SparseOverlay {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut SparseOverlay {
        &mut self.weights
    }

    pub fn schedule(&self) -> &PruneSchedule {
        &self.schedule
    }

    pub fn shape(&self) -> (usize, usize) {
        self.weights.shape()
    }

    pub fn param_count(&self) -> usize {
        self.weights.nnz()
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.weights.matvec(x)
    }

    pub(crate) fn forward_batch(&self, x: &[f64], batch: usize) -> Result<Vec<f64>> {
        let (m, n) = self.shape();
        if x.len() != batch * n {
            return Err(Error::shape("pruned_matvec", batch * n, x.len()));
        }
        let mut out = vec![0.0; batch * m];
        for s in 0..batch {
            self.weights
                .matvec_into(&x[s * n..(s + 1) * n], &mut out[s * m..(s + 1) * m]);
        }
        Ok(out)
    }

    pub(crate) fn backward_batch(&self, x: &[f64], batch: usize, g_out: &[f64], g_w: &mut [f64], g_x: &mut [f64]) {
        let (m, n) = self.shape();
        for s in 0..batch {
            self.weights.grad_accumulate(
                &x[s * n..(s + 1) * n],
                &g_out[s * m..(s + 1) * m],
                g_w,
                &mut g_x[s * n..(s + 1) * n],
            );
        }
    }
}

/// Thin singular value decomposition `A = U·diag(σ)·Vᵀ`, `σ` descending.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: DenseMatrix,
    pub singular_values: Vec<f64>,
    pub vt: DenseMatrix,
}

impl Svd {
    /// One-sided Jacobi rotations on the columns.
    pub fn new(a: &DenseMatrix) -> Self {
        if a.rows() < a.cols() {
            let t = Svd::new(&a.transpose());
            return Svd {
                u: t.vt.transpose(),
                singular_values: t.singular_values,
                vt: t.u.transpose(),
            };
        }
        let (m, n) = a.shape();
        // column-major working copies
        let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.get(i, j)).collect()).collect();
        let mut v: Vec<Vec<f64>> = (0..n)
            .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        for _sweep in 0..60 {
            let mut rotated = false;
            for p in 0..n {
                for q in p + 1..n {
                    let alpha = dot(&cols[p], &cols[p]);
                    let beta = dot(&cols[q], &cols[q]);
                    let gamma = dot(&cols[p], &cols[q]);
                    if libm::fabs(gamma) <= 1e-15 * libm::sqrt(alpha * beta) || gamma == 0.0 {
                        continue;
                    }
                    rotated = true;
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let sign = if zeta >= 0.0 { 1.0 } else { -1.0 };
                    let t = sign / (libm::fabs(zeta) + libm::sqrt(1.0 + zeta * zeta));
                    let c = 1.0 / libm::sqrt(1.0 + t * t);
                    let s = c * t;
                    rotate(&mut cols, p, q, c, s);
                    rotate(&mut v, p, q, c, s);
                }
            }
            if !rotated {
                break;
            }
        }
        let mut order: Vec<(f64, usize)> = cols
            .iter()
            .enumerate()
            .map(|(j, c)| (libm::sqrt(dot(c, c)), j))
            .collect();
        order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(core::cmp::Ordering::Equal));
        let singular_values: Vec<f64> = order.iter().map(|&(s, _)| s).collect();
        let u = DenseMatrix::from_fn(m, n, |i, k| {
            let (s, j) = order[k];
            if s > 0.0 {
                cols[j][i] / s
            } else {
                0.0
            }
        });
        let vt = DenseMatrix::from_fn(n, n, |k, i| v[order[k].1][i]);
        Svd {
            u,
            singular_values,
            vt,
        }
    }
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CompressionMethod {
    Dense,
    Dkp,
    Prune,
    Lmf,
    SmallBaseline,
}

impl CompressionMethod {
    pub fn name(self) -> &'static str {
        match self {
            CompressionMethod::Dense => "dense",
            CompressionMethod::Dkp => "dkp",
            CompressionMethod::Prune => "prune",
            CompressionMethod::Lmf => "lmf",
            CompressionMethod::SmallBaseline => "small",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "dense" => CompressionMethod::Dense,
            "dkp" => CompressionMethod::Dkp,
            "prune" => CompressionMethod::Prune,
            "lmf" => CompressionMethod::Lmf,
            "small" => CompressionMethod::SmallBaseline,
            _ => return None,
        })
    }
}

/// The discrete hyperparameter a method uses to hit a parameter budget.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Budget {
    Dense,
    Dkp {
        shapes: FactorShapes,
        overlay_nnz: usize,
        sparsity: f64,
    },
    Prune {
        nnz: usize,
        sparsity: f64,
    },
    Lmf {
        rank: usize,
    },
    /// Hidden size of a `4h × 2h` gate matrix.
    Small {
        hidden: usize,
    },
}

impl Budget {
    /// Parameters of a compressed `rows × cols` matrix under this budget.
    pub fn param_count(&self, rows: usize, cols: usize) -> usize {
        match *self {
            Budget::Dense => rows * cols,
            Budget::Dkp {
                shapes, overlay_nnz, ..
            } => shapes.param_count() + overlay_nnz,
            Budget::Prune { nnz, .. } => nnz,
            Budget::Lmf { rank } => rank * (rows + cols),
            Budget::Small { hidden } => 8 * hidden * hidden,
        }
    }

    /// Short human-readable knob, e.g. `rank=5`.
    pub fn knob(&self) -> alloc::string::String {
        match *self {
            Budget::Dense => "dense".into(),
            Budget::Dkp { shapes, sparsity, .. } => alloc::format!(
                "kp={}x{},{}x{};sparsity={}",
                shapes.b.0, shapes.b.1, shapes.c.0, shapes.c.1, sparsity
            ),
            Budget::Prune { sparsity, .. } => alloc::format!("sparsity={sparsity}"),
            Budget::Lmf { rank } => alloc::format!("rank={rank}"),
            Budget::Small { hidden } => alloc::format!("hidden={hidden}"),
        }
    }
}

/// Hyperparameters giving roughly `rows·cols / factor` parameters, rounded
/// down to the method's discrete knob. Factor 1 returns [`Budget::Dense`].
pub fn budget_match(factor: f64, rows: usize, cols: usize, method: CompressionMethod) -> Result<Budget> {
    let shapes = if method == CompressionMethod::Dkp {
        Some(select_factor_shapes(rows, cols)?)
    } else {
        None
    };
    budget_match_with(factor, rows, cols, method, shapes)
}

/// As [`budget_match`] with explicit Kronecker factor shapes for DKP.
pub fn budget_match_with(
    factor: f64,
    rows: usize,
    cols: usize,
    method: CompressionMethod,
    kp_shapes: Option<FactorShapes>,
) -> Result<Budget> {
    if !(factor >= 1.0 && factor.is_finite()) {
        return Err(Error::InvalidArgument(alloc::format!(
            "compression factor must be >= 1, got {factor}"
        )));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument("empty layer".into()));
    }
    if factor == 1.0 || method == CompressionMethod::Dense {
        return Ok(Budget::Dense);
    }
    let dense = (rows * cols) as f64;
    let target = dense / factor;
    match method {
        CompressionMethod::Dense => Ok(Budget::Dense),
        CompressionMethod::Dkp => {
            let shapes = match kp_shapes {
                Some(s) => s,
                None => select_factor_shapes(rows, cols)?,
            };
            if shapes.product_shape() != (rows, cols) {
                return Err(Error::shape(
                    "budget_match (kp shapes)",
                    alloc::format!("{rows}x{cols}"),
                    alloc::format!("{:?}", shapes.product_shape()),
                ));
            }
            let kp = shapes.param_count() as f64;
            if kp > target {
                return Err(Error::Infeasible(alloc::format!(
                    "Kronecker factors alone hold {kp} parameters, above the budget {target:.1}"
                )));
            }
            let nnz = libm::floor(target - kp) as usize;
            Ok(Budget::Dkp {
                shapes,
                overlay_nnz: nnz,
                sparsity: 1.0 - nnz as f64 / dense,
            })
        }
        CompressionMethod::Prune => {
            let nnz = libm::floor(target) as usize;
            if nnz == 0 {
                return Err(Error::Infeasible(alloc::format!(
                    "pruning to {target:.3} weights leaves nothing"
                )));
            }
            Ok(Budget::Prune {
                nnz,
                sparsity: 1.0 - nnz as f64 / dense,
            })
        }
        CompressionMethod::Lmf => {
            let rank = libm::floor(target / (rows + cols) as f64) as usize;
            if rank == 0 {
                return Err(Error::Infeasible(alloc::format!(
                    "rank {:.3} is below 1",
                    target / (rows + cols) as f64
                )));
            }
            Ok(Budget::Lmf { rank })
        }
        CompressionMethod::SmallBaseline => {
            if rows != 2 * cols || cols % 2 != 0 {
                return Err(Error::InvalidArgument(alloc::format!(
                    "small baseline needs a 4h x 2h gate matrix, got {rows}x{cols}"
                )));
            }
            let mut hidden = libm::floor(libm::sqrt(target / 8.0)) as usize;
            while 8 * (hidden + 1) * (hidden + 1) <= target as usize {
                hidden += 1;
            }
            while hidden > 0 && (8 * hidden * hidden) as f64 > target {
                hidden -= 1;
            }
            if hidden == 0 {
                return Err(Error::Infeasible("hidden size below 1".into()));
            }
            Ok(Budget::Small { hidden })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_matrix(m: usize, n: usize, seed: u64) -> DenseMatrix {
        let mut rng = Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(m, n, |_, _| rng.uniform(-1.0, 1.0))
    }

    #[test]
    fn full_rank_svd_reconstructs() {
        for (m, n) in [(5, 3), (3, 5), (4, 4)] {
            let w = random_matrix(m, n, 3);
            let p = LowRankPair::from_svd(&w, m.min(n)).unwrap();
            assert!(p.materialize().max_abs_diff(&w).unwrap() < 1e-10);
        }
    }

    #[test]
    fn rank_one_ones_sums_input() {
        let p = LowRankPair::new(DenseMatrix::from_fn(3, 1, |_, _| 1.0), DenseMatrix::from_fn(1, 4, |_, _| 1.0))
            .unwrap();
        assert_eq!(p.matvec(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![10.0; 3]);
        assert!(p.matvec(&[1.0]).is_err());
    }

    #[test]
    fn lmf_gradients_match_finite_differences() {
        let mut rng = Rng::seed_from_u64(4);
        let p = LowRankPair::random(4, 5, 2, 1.0, &mut rng).unwrap();
        let x: Vec<f64> = (0..5).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let w: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let loss = |p: &LowRankPair, x: &[f64]| dot(&p.matvec(x).unwrap(), &w);
        let (g, gx) = p.backward(&x, &w).unwrap();
        let eps = 1e-6;
        let rel = |a: f64, n: f64| (a - n).abs() / f64::max(a.abs() + n.abs(), 1e-12);
        for i in 0..8 {
            let mut a = p.clone();
            a.factors_mut().0.as_mut_slice()[i] += eps;
            let mut b = p.clone();
            b.factors_mut().0.as_mut_slice()[i] -= eps;
            let n = (loss(&a, &x) - loss(&b, &x)) / (2.0 * eps);
            assert!(rel(g.u.as_slice()[i], n) < 1e-6);
        }
        for i in 0..10 {
            let mut a = p.clone();
            a.factors_mut().1.as_mut_slice()[i] += eps;
            let mut b = p.clone();
            b.factors_mut().1.as_mut_slice()[i] -= eps;
            let n = (loss(&a, &x) - loss(&b, &x)) / (2.0 * eps);
            assert!(rel(g.v.as_slice()[i], n) < 1e-6);
        }
        for i in 0..5 {
            let mut xp = x.clone();
            xp[i] += eps;
            let mut xq = x.clone();
            xq[i] -= eps;
            let n = (loss(&p, &xp) - loss(&p, &xq)) / (2.0 * eps);
            assert!(rel(gx[i], n) < 1e-6);
        }
    }

    #[test]
    fn budget_factor_one_is_dense() {
        for m in [
            CompressionMethod::Dkp,
            CompressionMethod::Prune,
            CompressionMethod::Lmf,
            CompressionMethod::SmallBaseline,
        ] {
            assert_eq!(budget_match(1.0, 200, 100, m).unwrap(), Budget::Dense);
        }
    }

    #[test]
    fn budget_worked_examples() {
        match budget_match(14.0, 100, 100, CompressionMethod::Dkp).unwrap() {
            Budget::Dkp { shapes, sparsity, .. } => {
                assert_eq!(shapes.param_count(), 200);
                assert_eq!(libm::round(sparsity * 100.0), 95.0);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(
            budget_match(10.0, 100, 100, CompressionMethod::Lmf).unwrap(),
            Budget::Lmf { rank: 5 }
        );
        assert_eq!(
            budget_match(25.0, 2600, 1300, CompressionMethod::SmallBaseline).unwrap(),
            Budget::Small { hidden: 130 }
        );
    }

    #[test]
    fn budget_errors() {
        assert!(budget_match(0.5, 10, 10, CompressionMethod::Lmf).is_err());
        assert!(matches!(
            budget_match(100.0, 10, 10, CompressionMethod::Lmf),
            Err(Error::Infeasible(_))
        ));
        assert!(matches!(
            budget_match(1000.0, 100, 100, CompressionMethod::Dkp),
            Err(Error::Infeasible(_))
        ));
        assert!(budget_match(2.0, 10, 10, CompressionMethod::SmallBaseline).is_err());
    }
}
