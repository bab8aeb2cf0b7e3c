//! The doped layer `W = α·(B ⊗ C) + β·M_sp`.
//!
//! Three parameterizations are supported: plain (`α = β = 1`, fixed), a
//! trainable overlay scale `β` with an `|β|` penalty, and trainable `α`
//! and `β` with an `|β| + |1/α|` penalty. Independently of the mode the
//! layer can apply co-matrix row dropout (CMR): during training each output
//! row of each branch is kept with probability `p` and rescaled by `1/p`,
//! so evaluation uses the plain sum.

use alloc::vec;
use alloc::vec::Vec;

use crate::dense::DenseMatrix;
use crate::error::{Error, Result};
use crate::kron::KronFactorPair;
use crate::nn::{ParamGroup, ParamMut, ParamRef, Parameterized};
use crate::rng::Rng;
use crate::sparse::SparseOverlay;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DkpMode {
    /// `W = B ⊗ C + M_sp`
    Plain,
    /// `W = B ⊗ C + β·M_sp`, penalized by `|β|`
    BetaScaled,
    /// `W = α·(B ⊗ C) + β·M_sp`, penalized by `|β| + |1/α|`
    AlphaBetaScaled,
}

impl DkpMode {
    pub fn alpha_trainable(self) -> bool {
        matches!(self, DkpMode::AlphaBetaScaled)
    }

    pub fn beta_trainable(self) -> bool {
        !matches!(self, DkpMode::Plain)
    }
}

/// Which branch receives updates on a block-coordinate-descent step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BcdPhase {
    TrainKpOnly,
    TrainSpOnly,
}

/// Alternates KP-only and SP-only phases of `period` steps, KP first.
pub fn bcd_gate(step: u64, period: u64) -> BcdPhase {
    if (step / period.max(1)) % 2 == 0 {
        BcdPhase::TrainKpOnly
    } else {
        BcdPhase::TrainSpOnly
    }
}

/// CMR keep probability as the overlay sparsifies: `base_p` at sparsity 0
/// rising linearly to 1 (CMR off) at the target sparsity.
pub fn cmr_keep_prob(base_p: f64, current_sparsity: f64, target_sparsity: f64) -> f64 {
    if current_sparsity >= target_sparsity {
        return 1.0;
    }
    let frac = (current_sparsity / target_sparsity).clamp(0.0, 1.0);
    (base_p + (1.0 - base_p) * frac).clamp(base_p, 1.0)
}

/// One draw of the per-row Bernoulli masks for both branches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CmrMaskDraw {
    pub bern1: Vec<bool>,
    pub bern2: Vec<bool>,
    pub draw_id: u64,
}

impl CmrMaskDraw {
    pub fn sample(rows: usize, keep_prob: f64, rng: &mut Rng) -> Self {
        let draw_id = rng.next_u64();
        let bern1 = (0..rows).map(|_| rng.bernoulli(keep_prob)).collect();
        let bern2 = (0..rows).map(|_| rng.bernoulli(keep_prob)).collect();
        Self { bern1, bern2, draw_id }
    }

    /// Both branches kept on every row.
    pub fn keep_all(rows: usize) -> Self {
        Self {
            bern1: vec![true; rows],
            bern2: vec![true; rows],
            draw_id: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DopedLayer {
    kp: KronFactorPair,
    overlay: SparseOverlay,
    alpha: f64,
    beta: f64,
    mode: DkpMode,
    keep_prob: f64,
    version: u64,
}

/// Forward values needed to replay the exact masked product in backward.
#[derive(Clone, Debug)]
pub struct DkpCache {
    version: u64,
    batch: usize,
    x: Vec<f64>,
    kron_out: Vec<f64>,
    overlay_out: Vec<f64>,
    /// Per-row multipliers `bern/p` for each branch, `batch × rows`.
    scales: Option<(Vec<f64>, Vec<f64>)>,
}

impl DkpCache {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Gradients of every doped-layer parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct DkpGrads {
    pub b: DenseMatrix,
    pub c: DenseMatrix,
    /// Dense `rows × cols`; zero at inactive overlay positions.
    pub overlay: DenseMatrix,
    pub alpha: f64,
    pub beta: f64,
}

impl DkpGrads {
    pub fn zeros_for(layer: &DopedLayer) -> Self {
        let (br, bc) = layer.kp.b().shape();
        let (cr, cc) = layer.kp.c().shape();
        let (r, c) = layer.overlay.shape();
        Self {
            b: DenseMatrix::zeros(br, bc),
            c: DenseMatrix::zeros(cr, cc),
            overlay: DenseMatrix::zeros(r, c),
            alpha: 0.0,
            beta: 0.0,
        }
    }
}

/// Result of a single-vector backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct DkpBackward {
    pub grads: DkpGrads,
    pub x: Vec<f64>,
}

/// Regularization value and its (sub)gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegTerm {
    pub loss: f64,
    pub g_alpha: f64,
    pub g_beta: f64,
}

/// Mutable view handed out for parameter updates.
pub struct DopedParamsMut<'a> {
    pub b: &'a mut DenseMatrix,
    pub c: &'a mut DenseMatrix,
    pub overlay: &'a mut [f64],
    pub overlay_mask: &'a [bool],
    pub alpha: &'a mut f64,
    pub beta: &'a mut f64,
}

impl DopedLayer {
    pub fn new(kp: KronFactorPair, overlay: SparseOverlay, mode: DkpMode) -> Result<Self> {
        if kp.shape() != overlay.shape() {
            return Err(Error::shape(
                "DopedLayer::new",
                alloc::format!("{:?}", kp.shape()),
                alloc::format!("{:?}", overlay.shape()),
            ));
        }
        Ok(Self {
            kp,
            overlay,
            alpha: 1.0,
            beta: 1.0,
            mode,
            keep_prob: 1.0,
            version: 0,
        })
    }

    pub fn with_scales(mut self, alpha: f64, beta: f64) -> Result<Self> {
        self.set_scales(alpha, beta)?;
        Ok(self)
    }

    /// Sets `α` and `β`. Values that the mode holds fixed must stay 1.
    pub fn set_scales(&mut self, alpha: f64, beta: f64) -> Result<()> {
        if !self.mode.alpha_trainable() && alpha != 1.0 {
            return Err(Error::InvalidArgument(alloc::format!(
                "alpha is fixed at 1 in {:?} mode",
                self.mode
            )));
        }
        if !self.mode.beta_trainable() && beta != 1.0 {
            return Err(Error::InvalidArgument(alloc::format!(
                "beta is fixed at 1 in {:?} mode",
                self.mode
            )));
        }
        if self.mode.alpha_trainable() && alpha == 0.0 {
            return Err(Error::SingularAlpha);
        }
        self.alpha = alpha;
        self.beta = beta;
        self.version += 1;
        Ok(())
    }

    pub fn kp(&self) -> &KronFactorPair {
        &self.kp
    }

    pub fn overlay(&self) -> &SparseOverlay {
        &self.overlay
    }

    /// Mutable overlay access, e.g. for pruning.
    pub fn overlay_mut(&mut self) -> &mut SparseOverlay {
        self.version += 1;
        &mut self.overlay
    }

    pub fn kp_mut(&mut self) -> &mut KronFactorPair {
        self.version += 1;
        &mut self.kp
    }

    pub fn parts_mut(&mut self) -> DopedParamsMut<'_> {
        self.version += 1;
        let (b, c) = self.kp.factors_mut();
        let (overlay, overlay_mask) = self.overlay.values_and_mask_mut();
        DopedParamsMut {
            b,
            c,
            overlay,
            overlay_mask,
            alpha: &mut self.alpha,
            beta: &mut self.beta,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn mode(&self) -> DkpMode {
        self.mode
    }

    pub fn keep_prob(&self) -> f64 {
        self.keep_prob
    }

    pub fn set_keep_prob(&mut self, p: f64) -> Result<()> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::InvalidArgument(alloc::format!(
                "keep probability must lie in (0, 1], got {p}"
            )));
        }
        self.keep_prob = p;
        Ok(())
    }

    /// `(rows, cols)` of `W`.
    pub fn shape(&self) -> (usize, usize) {
        self.overlay.shape()
    }

    /// Parameters actually stored: both factors plus active overlay entries.
    pub fn param_count(&self) -> usize {
        self.kp.param_count() + self.overlay.nnz()
    }

    /// Dense `α·(B ⊗ C) + β·M_sp`.
    pub fn materialize(&self) -> Result<DenseMatrix> {
        let mut w = self.kp.materialize()?;
        for (wv, &ov) in w.as_mut_slice().iter_mut().zip(self.overlay.values()) {
            *wv = self.alpha * *wv + self.beta * ov;
        }
        Ok(w)
    }

    /// Draws CMR masks for `batch` samples when dropout is active.
    pub fn draw_masks(&self, batch: usize, rng: &mut Rng) -> Option<Vec<CmrMaskDraw>> {
        if self.keep_prob >= 1.0 {
            return None;
        }
        let rows = self.overlay.rows();
        Some((0..batch).map(|_| CmrMaskDraw::sample(rows, self.keep_prob, rng)).collect())
    }

    /// Training-mode forward for one input: draws fresh masks when `p < 1`.
    /// With `training == false` or `p = 1` this is exactly the eval product.
    pub fn forward(&self, x: &[f64], training: bool, rng: &mut Rng) -> Result<(Vec<f64>, DkpCache)> {
        let masks = if training { self.draw_masks(1, rng) } else { None };
        self.forward_batch(x, 1, masks.as_deref())
    }

    /// Forward for one input with an explicit (possibly frozen) mask draw.
    pub fn forward_with_masks(
        &self,
        x: &[f64],
        masks: Option<&CmrMaskDraw>,
    ) -> Result<(Vec<f64>, DkpCache)> {
        self.forward_batch(x, 1, masks.map(core::slice::from_ref))
    }

    pub fn forward_eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_batch(x, 1, None)?.0)
    }

    /// Forward for `batch` inputs stored row-major in `x` (`batch × cols`).
    /// `masks`, when given, holds one draw per sample.
    pub fn forward_batch(
        &self,
        x: &[f64],
        batch: usize,
        masks: Option<&[CmrMaskDraw]>,
    ) -> Result<(Vec<f64>, DkpCache)> {
        let (rows, cols) = self.shape();
        if x.len() != batch * cols {
            return Err(Error::shape("dkp_forward", batch * cols, x.len()));
        }
        if let Some(m) = masks {
            if m.len() != batch {
                return Err(Error::shape("dkp_forward (masks)", batch, m.len()));
            }
            if let Some(bad) = m.iter().find(|d| d.bern1.len() != rows || d.bern2.len() != rows) {
                return Err(Error::shape("dkp_forward (mask rows)", rows, bad.bern1.len()));
            }
        }
        let mut kron_out = vec![0.0; batch * rows];
        let mut overlay_out = vec![0.0; batch * rows];
        for s in 0..batch {
            let xs = &x[s * cols..(s + 1) * cols];
            self.kp.matvec_into(xs, &mut kron_out[s * rows..(s + 1) * rows]);
            self.overlay.matvec_into(xs, &mut overlay_out[s * rows..(s + 1) * rows]);
        }
        let scales = masks.map(|m| {
            let inv_p = 1.0 / self.keep_prob;
            let expand = |pick: fn(&CmrMaskDraw) -> &[bool]| -> Vec<f64> {
                m.iter()
                    .flat_map(|d| pick(d).iter().map(|&k| if k { inv_p } else { 0.0 }))
                    .collect()
            };
            (expand(|d| &d.bern1), expand(|d| &d.bern2))
        });
        let out = match &scales {
            None => kron_out
                .iter()
                .zip(&overlay_out)
                .map(|(k, s)| self.alpha * k + self.beta * s)
                .collect(),
            Some((a, b)) => (0..batch * rows)
                .map(|i| self.alpha * kron_out[i] * a[i] + self.beta * overlay_out[i] * b[i])
                .collect(),
        };
        Ok((
            out,
            DkpCache {
                version: self.version,
                batch,
                x: x.to_vec(),
                kron_out,
                overlay_out,
                scales,
            },
        ))
    }

    pub fn backward(&self, cache: &DkpCache, g_out: &[f64]) -> Result<DkpBackward> {
        let mut grads = DkpGrads::zeros_for(self);
        let mut g_x = vec![0.0; cache.batch * self.shape().1];
        self.backward_batch(cache, g_out, &mut grads, &mut g_x)?;
        Ok(DkpBackward { grads, x: g_x })
    }

    /// Accumulates parameter gradients into `grads` and input gradients
    /// into `g_x` (`batch × cols`).
    pub fn backward_batch(
        &self,
        cache: &DkpCache,
        g_out: &[f64],
        grads: &mut DkpGrads,
        g_x: &mut [f64],
    ) -> Result<()> {
        if cache.version != self.version {
            return Err(Error::StaleCache);
        }
        let (rows, cols) = self.shape();
        let batch = cache.batch;
        if g_out.len() != batch * rows {
            return Err(Error::shape("dkp_backward", batch * rows, g_out.len()));
        }
        if g_x.len() != batch * cols {
            return Err(Error::shape("dkp_backward (g_x)", batch * cols, g_x.len()));
        }
        let mut gk = vec![0.0; rows];
        let mut gs = vec![0.0; rows];
        for s in 0..batch {
            let span = s * rows..(s + 1) * rows;
            let g = &g_out[span.clone()];
            let k = &cache.kron_out[span.clone()];
            let o = &cache.overlay_out[span.clone()];
            match &cache.scales {
                None => {
                    for j in 0..rows {
                        grads.alpha += g[j] * k[j];
                        grads.beta += g[j] * o[j];
                        gk[j] = g[j] * self.alpha;
                        gs[j] = g[j] * self.beta;
                    }
                }
                Some((a, b)) => {
                    let (a, b) = (&a[span.clone()], &b[span]);
                    for j in 0..rows {
                        grads.alpha += g[j] * k[j] * a[j];
                        grads.beta += g[j] * o[j] * b[j];
                        gk[j] = g[j] * self.alpha * a[j];
                        gs[j] = g[j] * self.beta * b[j];
                    }
                }
            }
            let xs = &cache.x[s * cols..(s + 1) * cols];
            let gxs = &mut g_x[s * cols..(s + 1) * cols];
            self.kp.grad_accumulate(
                xs,
                &gk,
                grads.b.as_mut_slice(),
                grads.c.as_mut_slice(),
                gxs,
            );
            self.overlay
                .grad_accumulate(xs, &gs, grads.overlay.as_mut_slice(), gxs);
        }
        Ok(())
    }

    /// Penalty on the branch scales: `λ_β|β|` (β-scaled) or
    /// `λ_β|β| + λ_α|1/α|` (α/β-scaled). Subgradient of `|·|` at 0 is 0.
    pub fn regularization(&self, lambda_beta: f64, lambda_alpha: f64) -> Result<RegTerm> {
        let sign = |v: f64| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        };
        match self.mode {
            DkpMode::Plain => Ok(RegTerm {
                loss: 0.0,
                g_alpha: 0.0,
                g_beta: 0.0,
            }),
            DkpMode::BetaScaled => Ok(RegTerm {
                loss: lambda_beta * libm::fabs(self.beta),
                g_alpha: 0.0,
                g_beta: lambda_beta * sign(self.beta),
            }),
            DkpMode::AlphaBetaScaled => {
                if self.alpha == 0.0 {
                    return Err(Error::SingularAlpha);
                }
                let a = self.alpha;
                Ok(RegTerm {
                    loss: lambda_beta * libm::fabs(self.beta) + lambda_alpha * libm::fabs(1.0 / a),
                    g_alpha: -lambda_alpha * sign(a) / (a * a),
                    g_beta: lambda_beta * sign(self.beta),
                })
            }
        }
    }
}

impl Parameterized for DopedLayer {
    /// `kp_b`, `kp_c`, `overlay`, `alpha`, `beta`.
    fn params(&self) -> Vec<ParamRef<'_>> {
        let (br, bc) = self.kp.b().shape();
        let (cr, cc) = self.kp.c().shape();
        let (r, c) = self.overlay.shape();
        vec![
            ParamRef {
                name: "kp_b".into(),
                shape: vec![br, bc],
                values: self.kp.b().as_slice(),
                mask: None,
                group: ParamGroup::Kp,
                trainable: true,
            },
            ParamRef {
                name: "kp_c".into(),
                shape: vec![cr, cc],
                values: self.kp.c().as_slice(),
                mask: None,
                group: ParamGroup::Kp,
                trainable: true,
            },
            ParamRef {
                name: "overlay".into(),
                shape: vec![r, c],
                values: self.overlay.values(),
                mask: Some(self.overlay.mask()),
                group: ParamGroup::Sp,
                trainable: true,
            },
            ParamRef {
                name: "alpha".into(),
                shape: vec![1],
                values: core::slice::from_ref(&self.alpha),
                mask: None,
                group: ParamGroup::Kp,
                trainable: self.mode.alpha_trainable(),
            },
            ParamRef {
                name: "beta".into(),
                shape: vec![1],
                values: core::slice::from_ref(&self.beta),
                mask: None,
                group: ParamGroup::Sp,
                trainable: self.mode.beta_trainable(),
            },
        ]
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mode = self.mode;
        let p = self.parts_mut();
        let shape_b = vec![p.b.rows(), p.b.cols()];
        let shape_c = vec![p.c.rows(), p.c.cols()];
        let shape_o = vec![shape_b[0] * shape_c[0], shape_b[1] * shape_c[1]];
        vec![
            ParamMut {
                name: "kp_b".into(),
                shape: shape_b,
                values: p.b.as_mut_slice(),
                mask: None,
                group: ParamGroup::Kp,
                trainable: true,
            },
            ParamMut {
                name: "kp_c".into(),
                shape: shape_c,
                values: p.c.as_mut_slice(),
                mask: None,
                group: ParamGroup::Kp,
                trainable: true,
            },
            ParamMut {
                name: "overlay".into(),
                shape: shape_o,
                values: p.overlay,
                mask: Some(p.overlay_mask),
                group: ParamGroup::Sp,
                trainable: true,
            },
            ParamMut {
                name: "alpha".into(),
                shape: vec![1],
                values: core::slice::from_mut(p.alpha),
                mask: None,
                group: ParamGroup::Kp,
                trainable: mode.alpha_trainable(),
            },
            ParamMut {
                name: "beta".into(),
                shape: vec![1],
                values: core::slice::from_mut(p.beta),
                mask: None,
                group: ParamGroup::Sp,
                trainable: mode.beta_trainable(),
            },
        ]
    }
}

impl DkpGrads {
    /// Buffers in [`Parameterized`] order.
    pub fn tensors(&self) -> [&[f64]; 5] {
        [
            self.b.as_slice(),
            self.c.as_slice(),
            self.overlay.as_slice(),
            core::slice::from_ref(&self.alpha),
            core::slice::from_ref(&self.beta),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.b.as_mut_slice(),
            self.c.as_mut_slice(),
            self.overlay.as_mut_slice(),
            core::slice::from_mut(&mut self.alpha),
            core::slice::from_mut(&mut self.beta),
        ]
    }
}
