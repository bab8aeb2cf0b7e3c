//! Parameter accounting and training-curve records.
//!
//! Compression factors count stored values only: Kronecker factors, active
//! sparse entries and any other compressed parameters. Sparse index storage
//! and biases are excluded; [`CompressionReport::factor_with_index_overhead`]
//! charges one index per sparse value for comparison.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::dkp::BcdPhase;
use crate::kron::FactorShapes;
use crate::sparse::active_count;

/// `dense / (kp + ⌈(1 − s)·dense⌉)` for a doped `rows × cols` matrix.
pub fn compression_factor(rows: usize, cols: usize, kp: FactorShapes, sparsity: f64) -> f64 {
    compression_factor_from_counts(rows * cols, kp.param_count(), sparsity)
}

pub fn compression_factor_from_counts(dense_params: usize, kp_params: usize, sparsity: f64) -> f64 {
    let stored = kp_params + active_count(dense_params, sparsity);
    dense_params as f64 / stored as f64
}

/// How many times more trainable parameters a dense overlay has than the
/// Kronecker branch.
pub fn update_ratio(dense_params: usize, kp_params: usize) -> f64 {
    dense_params as f64 / kp_params as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCounts {
    pub name: String,
    pub dense_params: usize,
    pub kp_params: usize,
    pub sparse_nnz: usize,
    /// Low-rank factors or shrunken dense weights.
    pub other_params: usize,
}

impl LayerCounts {
    pub fn total(&self) -> usize {
        self.kp_params + self.sparse_nnz + self.other_params
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressionReport {
    pub layers: Vec<LayerCounts>,
}

impl CompressionReport {
    pub fn new(layers: Vec<LayerCounts>) -> Self {
        Self { layers }
    }

    pub fn dense_params(&self) -> usize {
        self.layers.iter().map(|l| l.dense_params).sum()
    }

    pub fn kp_params(&self) -> usize {
        self.layers.iter().map(|l| l.kp_params).sum()
    }

    pub fn sparse_nnz(&self) -> usize {
        self.layers.iter().map(|l| l.sparse_nnz).sum()
    }

    pub fn other_params(&self) -> usize {
        self.layers.iter().map(|l| l.other_params).sum()
    }

    pub fn total_params(&self) -> usize {
        self.layers.iter().map(LayerCounts::total).sum()
    }

    pub fn factor(&self) -> f64 {
        self.dense_params() as f64 / self.total_params() as f64
    }

    pub fn factor_with_index_overhead(&self) -> f64 {
        self.dense_params() as f64 / (self.total_params() + self.sparse_nnz()) as f64
    }
}

impl fmt::Display for CompressionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<16} {:>12} {:>10} {:>12} {:>10} {:>12} {:>10}",
            "layer", "dense", "kp", "sparse_nnz", "other", "total", "factor"
        )?;
        for l in &self.layers {
            writeln!(
                f,
                "{:<16} {:>12} {:>10} {:>12} {:>10} {:>12} {:>10.3}",
                l.name,
                l.dense_params,
                l.kp_params,
                l.sparse_nnz,
                l.other_params,
                l.total(),
                l.dense_params as f64 / l.total() as f64
            )?;
        }
        writeln!(
            f,
            "{:<16} {:>12} {:>10} {:>12} {:>10} {:>12} {:>10.3}",
            "total",
            self.dense_params(),
            self.kp_params(),
            self.sparse_nnz(),
            self.other_params(),
            self.total_params(),
            self.factor()
        )?;
        write!(
            f,
            "compression factor {:.3}x (values only), {:.3}x with one index per sparse value",
            self.factor(),
            self.factor_with_index_overhead()
        )
    }
}

/// One evaluation point of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub epoch: u32,
    pub step: u64,
    pub train_ppl: f64,
    /// Only filled at points where validation ran.
    pub valid_ppl: Option<f64>,
    pub sparsity: f64,
    pub keep_prob: f64,
    pub bcd_phase: Option<BcdPhase>,
}

pub fn bcd_phase_label(phase: Option<BcdPhase>) -> &'static str {
    match phase {
        None => "none",
        Some(BcdPhase::TrainKpOnly) => "kp",
        Some(BcdPhase::TrainSpOnly) => "sp",
    }
}

pub fn parse_bcd_phase(s: &str) -> Option<Option<BcdPhase>> {
    match s {
        "none" => Some(None),
        "kp" => Some(Some(BcdPhase::TrainKpOnly)),
        "sp" => Some(Some(BcdPhase::TrainSpOnly)),
        _ => None,
    }
}
