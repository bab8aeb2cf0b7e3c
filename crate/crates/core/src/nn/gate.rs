//! The `4h × 2h` LSTM gate matrix behind one of several parameterizations.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::baselines::{LowRankCache, LowRankGrads, LowRankPair, PrunedDense};
use crate::dense::{axpy, dot, DenseMatrix};
use crate::dkp::{CmrMaskDraw, DkpCache, DkpGrads, DopedLayer};
use crate::error::{Error, Result};
use crate::nn::{ParamGroup, ParamMut, ParamRef, Parameterized};

#[derive(Clone, Debug, PartialEq)]
pub enum GateLayer {
    Dense(DenseMatrix),
    Doped(DopedLayer),
    LowRank(LowRankPair),
    Pruned(PrunedDense),
}

#[derive(Clone, Debug)]
pub enum GateCache {
    Dense { batch: usize, x: Vec<f64> },
    Doped(DkpCache),
    LowRank(LowRankCache),
    Pruned { batch: usize, x: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub enum GateGrads {
    Dense(DenseMatrix),
    Doped(DkpGrads),
    LowRank(LowRankGrads),
    Pruned(DenseMatrix),
}

impl GateLayer {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            GateLayer::Dense(w) => w.shape(),
            GateLayer::Doped(l) => l.shape(),
            GateLayer::LowRank(p) => p.shape(),
            GateLayer::Pruned(p) => p.shape(),
        }
    }

    /// Stored parameter count (active entries only for sparse tensors).
    pub fn param_count(&self) -> usize {
        match self {
            GateLayer::Dense(w) => w.len(),
            GateLayer::Doped(l) => l.param_count(),
            GateLayer::LowRank(p) => p.param_count(),
            GateLayer::Pruned(p) => p.param_count(),
        }
    }

    pub fn as_doped(&self) -> Option<&DopedLayer> {
        match self {
            GateLayer::Doped(l) => Some(l),
            _ => None,
        }
    }

    pub fn as_doped_mut(&mut self) -> Option<&mut DopedLayer> {
        match self {
            GateLayer::Doped(l) => Some(l),
            _ => None,
        }
    }

    /// The dense matrix this layer multiplies by in evaluation mode.
    pub fn materialize(&self) -> Result<DenseMatrix> {
        match self {
            GateLayer::Dense(w) => Ok(w.clone()),
            GateLayer::Doped(l) => l.materialize(),
            GateLayer::LowRank(p) => Ok(p.materialize()),
            GateLayer::Pruned(p) => Ok(p.weights().to_dense()),
        }
    }

    pub fn zero_grads(&self) -> GateGrads {
        match self {
            GateLayer::Dense(w) => GateGrads::Dense(DenseMatrix::zeros(w.rows(), w.cols())),
            GateLayer::Doped(l) => GateGrads::Doped(DkpGrads::zeros_for(l)),
            GateLayer::LowRank(p) => GateGrads::LowRank(LowRankGrads::zeros_for(p)),
            GateLayer::Pruned(p) => {
                let (r, c) = p.shape();
                GateGrads::Pruned(DenseMatrix::zeros(r, c))
            }
        }
    }

    /// `batch` products at once; `x` is `batch × cols`, output `batch × rows`.
    /// CMR masks only apply to doped layers.
    pub fn forward_batch(
        &self,
        x: &[f64],
        batch: usize,
        masks: Option<&[CmrMaskDraw]>,
    ) -> Result<(Vec<f64>, GateCache)> {
        let (m, n) = self.shape();
        if x.len() != batch * n {
            return Err(Error::shape("gate forward", batch * n, x.len()));
        }
        match self {
            GateLayer::Dense(w) => {
                let mut out = vec![0.0; batch * m];
                for s in 0..batch {
                    let xs = &x[s * n..(s + 1) * n];
                    for (i, o) in out[s * m..(s + 1) * m].iter_mut().enumerate() {
                        *o = dot(w.row(i), xs);
                    }
                }
                Ok((
                    out,
                    GateCache::Dense {
                        batch,
                        x: x.to_vec(),
                    },
                ))
            }
            GateLayer::Doped(l) => {
                let (out, cache) = l.forward_batch(x, batch, masks)?;
                Ok((out, GateCache::Doped(cache)))
            }
            GateLayer::LowRank(p) => {
                let (out, cache) = p.forward_batch(x, batch)?;
                Ok((out, GateCache::LowRank(cache)))
            }
            GateLayer::Pruned(p) => {
                let out = p.forward_batch(x, batch)?;
                Ok((
                    out,
                    GateCache::Pruned {
                        batch,
                        x: x.to_vec(),
                    },
                ))
            }
        }
    }

    /// Accumulates parameter gradients into `grads` and adds `∂L/∂x` to `g_x`.
    pub fn backward_batch(
        &self,
        cache: &GateCache,
        g_out: &[f64],
        grads: &mut GateGrads,
        g_x: &mut [f64],
    ) -> Result<()> {
        let (m, n) = self.shape();
        match (self, cache, grads) {
            (GateLayer::Dense(w), GateCache::Dense { batch, x }, GateGrads::Dense(gw)) => {
                for s in 0..*batch {
                    let xs = &x[s * n..(s + 1) * n];
                    let gs = &g_out[s * m..(s + 1) * m];
                    let gxs = &mut g_x[s * n..(s + 1) * n];
                    for (i, &g) in gs.iter().enumerate() {
                        axpy(g, xs, &mut gw.as_mut_slice()[i * n..(i + 1) * n]);
                        axpy(g, w.row(i), gxs);
                    }
                }
                Ok(())
            }
            (GateLayer::Doped(l), GateCache::Doped(c), GateGrads::Doped(g)) => {
                l.backward_batch(c, g_out, g, g_x)
            }
            (GateLayer::LowRank(p), GateCache::LowRank(c), GateGrads::LowRank(g)) => {
                p.backward_batch(c, g_out, g, g_x)
            }
            (GateLayer::Pruned(p), GateCache::Pruned { batch, x }, GateGrads::Pruned(gw)) => {
                p.backward_batch(x, *batch, g_out, gw.as_mut_slice(), g_x);
                Ok(())
            }
            _ => Err(Error::InvalidArgument(
                "gate cache or gradient kind does not match the layer".into(),
            )),
        }
    }

    pub(crate) fn named_params<'a>(&'a self, prefix: &str) -> Vec<ParamRef<'a>> {
        match self {
            GateLayer::Dense(w) => vec![ParamRef {
                name: format!("{prefix}.weight"),
                shape: vec![w.rows(), w.cols()],
                values: w.as_slice(),
                mask: None,
                group: ParamGroup::Shared,
                trainable: true,
            }],
            GateLayer::Doped(l) => l
                .params()
                .into_iter()
                .map(|p| ParamRef {
                    name: format!("{prefix}.{}", p.name),
                    ..p
                })
                .collect(),
            GateLayer::LowRank(p) => vec![
                ParamRef {
                    name: format!("{prefix}.u"),
                    shape: vec![p.u().rows(), p.u().cols()],
                    values: p.u().as_slice(),
                    mask: None,
                    group: ParamGroup::Shared,
                    trainable: true,
                },
                ParamRef {
                    name: format!("{prefix}.v"),
                    shape: vec![p.v().rows(), p.v().cols()],
                    values: p.v().as_slice(),
                    mask: None,
                    group: ParamGroup::Shared,
                    trainable: true,
                },
            ],
            GateLayer::Pruned(p) => {
                let w = p.weights();
                vec![ParamRef {
                    name: format!("{prefix}.weight"),
                    shape: vec![w.rows(), w.cols()],
                    values: w.values(),
                    mask: Some(w.mask()),
                    group: ParamGroup::Shared,
                    trainable: true,
                }]
            }
        }
    }

    pub(crate) fn named_params_mut<'a>(&'a mut self, prefix: &str) -> Vec<ParamMut<'a>> {
        match self {
            GateLayer::Dense(w) => {
                let shape = vec![w.rows(), w.cols()];
                vec![ParamMut {
                    name: format!("{prefix}.weight"),
                    shape,
                    values: w.as_mut_slice(),
                    mask: None,
                    group: ParamGroup::Shared,
                    trainable: true,
                }]
            }
            GateLayer::Doped(l) => l
                .params_mut()
                .into_iter()
                .map(|p| ParamMut {
                    name: format!("{prefix}.{}", p.name),
                    ..p
                })
                .collect(),
            GateLayer::LowRank(p) => {
                let (u, v) = p.factors_mut();
                let (su, sv) = (vec![u.rows(), u.cols()], vec![v.rows(), v.cols()]);
                vec![
                    ParamMut {
                        name: format!("{prefix}.u"),
                        shape: su,
                        values: u.as_mut_slice(),
                        mask: None,
                        group: ParamGroup::Shared,
                        trainable: true,
                    },
                    ParamMut {
                        name: format!("{prefix}.v"),
                        shape: sv,
                        values: v.as_mut_slice(),
                        mask: None,
                        group: ParamGroup::Shared,
                        trainable: true,
                    },
                ]
            }
            GateLayer::Pruned(p) => {
                let w = p.weights_mut();
                let shape = vec![w.rows(), w.cols()];
                let (values, mask) = w.values_and_mask_mut();
                vec![ParamMut {
                    name: format!("{prefix}.weight"),
                    shape,
                    values,
                    mask: Some(mask),
                    group: ParamGroup::Shared,
                    trainable: true,
                }]
            }
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            GateLayer::Dense(_) => "dense",
            GateLayer::Doped(_) => "dkp",
            GateLayer::LowRank(_) => "lmf",
            GateLayer::Pruned(_) => "prune",
        }
    }
}

impl GateGrads {
    /// Buffers in the same order as the layer's parameters.
    pub fn tensors(&self) -> Vec<&[f64]> {
        match self {
            GateGrads::Dense(w) | GateGrads::Pruned(w) => vec![w.as_slice()],
            GateGrads::Doped(g) => g.tensors().to_vec(),
            GateGrads::LowRank(g) => vec![g.u.as_slice(), g.v.as_slice()],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            GateGrads::Dense(w) | GateGrads::Pruned(w) => vec![w.as_mut_slice()],
            GateGrads::Doped(g) => g.tensors_mut().into_iter().collect(),
            GateGrads::LowRank(g) => vec![g.u.as_mut_slice(), g.v.as_mut_slice()],
        }
    }
}

