//! Hand-differentiated language-model stack.
//!
//! Every layer exposes its tensors through [`Parameterized`] in a fixed
//! order; gradient containers list their buffers in the same order so the
//! optimizer, the gradient checker and checkpoints can zip them.

use alloc::string::String;
use alloc::vec::Vec;

mod gate;
mod gradcheck;
mod loss;
mod lstm;
mod model;
mod optim;

pub use gate::{GateCache, GateGrads, GateLayer};
pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, TensorCheck};
pub use loss::softmax_xent;
pub use lstm::{lstm_step, lstm_step_backward, LstmLayer, LstmStepCache};
pub use model::{ForwardPass, LmGrads, LmModel, LstmState, MaskPlan};
pub use optim::{Optimizer, OptimizerKind, OptimizerState, SlotState, StepStats};

/// Which branch of a doped layer a tensor belongs to; block coordinate
/// descent freezes one of the first two.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Kp,
    Sp,
    Shared,
}

#[derive(Debug)]
pub struct ParamRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: &'a [f64],
    /// Active positions for pruned tensors.
    pub mask: Option<&'a [bool]>,
    pub group: ParamGroup,
    pub trainable: bool,
}

#[derive(Debug)]
pub struct ParamMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: &'a mut [f64],
    pub mask: Option<&'a [bool]>,
    pub group: ParamGroup,
    pub trainable: bool,
}

pub trait Parameterized {
    fn params(&self) -> Vec<ParamRef<'_>>;
    fn params_mut(&mut self) -> Vec<ParamMut<'_>>;
}
