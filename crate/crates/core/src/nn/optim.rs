use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::{ParamGroup, Parameterized};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        OptimizerKind::Sgd { lr, momentum }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerKind::Sgd { lr, .. } | OptimizerKind::Adam { lr, .. } => lr,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd { .. } => "sgd",
            OptimizerKind::Adam { .. } => "adam",
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerKind::Sgd { lr, momentum } => lr > 0.0 && (0.0..1.0).contains(&momentum),
            OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                lr > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Moment buffers for one tensor. SGD uses only `m` (velocity).
#[derive(Clone, Debug, PartialEq)]
pub struct SlotState {
    pub name: String,
    pub steps: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub clip_norm: Option<f64>,
    pub slots: Vec<SlotState>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
    pub tensors_updated: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    state: OptimizerState,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, clip_norm: Option<f64>) -> Result<Self> {
        kind.validate()?;
        if let Some(c) = clip_norm {
            if !(c > 0.0) {
                return Err(Error::InvalidArgument(format!("clip norm must be positive, got {c}")));
            }
        }
        Ok(Self {
            state: OptimizerState {
                kind,
                clip_norm,
                slots: Vec::new(),
            },
        })
    }

    pub fn from_state(state: OptimizerState) -> Result<Self> {
        let mut opt = Self::new(state.kind, state.clip_norm)?;
        opt.state.slots = state.slots;
        Ok(opt)
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn kind(&self) -> OptimizerKind {
        self.state.kind
    }

    pub fn set_lr(&mut self, new_lr: f64) -> Result<()> {
        let mut kind = self.state.kind;
        match &mut kind {
            OptimizerKind::Sgd { lr, .. } | OptimizerKind::Adam { lr, .. } => *lr = new_lr,
        }
        kind.validate()?;
        self.state.kind = kind;
        Ok(())
    }

    /// Updates every trainable tensor outside `blocked`. Inactive masked
    /// entries are untouched, and a blocked tensor keeps its moments and
    /// step count unchanged. `grads` must follow the model's parameter order.
    pub fn step<P: Parameterized + ?Sized>(
        &mut self,
        model: &mut P,
        grads: &[&[f64]],
        blocked: Option<ParamGroup>,
    ) -> Result<StepStats> {
        let mut params = model.params_mut();
        if params.len() != grads.len() {
            return Err(Error::shape("Optimizer::step", params.len(), grads.len()));
        }
        if self.state.slots.is_empty() {
            self.state.slots = params
                .iter()
                .map(|p| SlotState {
                    name: p.name.clone(),
                    steps: 0,
                    m: Vec::new(),
                    v: Vec::new(),
                })
                .collect();
        } else if self.state.slots.len() != params.len()
            || self.state.slots.iter().zip(&params).any(|(s, p)| s.name != p.name)
        {
            return Err(Error::InvalidArgument("optimizer state does not match the model's parameters".into()));
        }

        let active = |p: &super::ParamMut<'_>| p.trainable && Some(p.group) != blocked;
        let mut sq = 0.0;
        for (p, g) in params.iter().zip(grads) {
            if g.len() != p.values.len() {
                return Err(Error::shape("Optimizer::step", format!("{} of {}", p.name, p.values.len()), g.len()));
            }
            if !active(p) {
                continue;
            }
            for (i, &gi) in g.iter().enumerate() {
                if p.mask.map_or(true, |m| m[i]) {
                    if !gi.is_finite() {
                        return Err(Error::NonFinite(format!("gradient of {}", p.name)));
                    }
                    sq += gi * gi;
                }
            }
        }
        let grad_norm = libm::sqrt(sq);
        let coef = match self.state.clip_norm {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };

        let kind = self.state.kind;
        let mut updated = 0;
        for ((p, g), slot) in params.iter_mut().zip(grads).zip(self.state.slots.iter_mut()) {
            if !active(p) {
                continue;
            }
            updated += 1;
            let n = p.values.len();
            if slot.m.len() != n {
                slot.m = vec![0.0; n];
            }
            slot.steps += 1;
            match kind {
                OptimizerKind::Sgd { lr, momentum } => {
                    for i in 0..n {
                        if p.mask.is_some_and(|m| !m[i]) {
                            continue;
                        }
                        slot.m[i] = momentum * slot.m[i] + coef * g[i];
                        p.values[i] -= lr * slot.m[i];
                    }
                }
                OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                    if slot.v.len() != n {
                        slot.v = vec![0.0; n];
                    }
                    let t = slot.steps as i32;
                    let c1 = 1.0 - libm::pow(beta1, t as f64);
                    let c2 = 1.0 - libm::pow(beta2, t as f64);
                    for i in 0..n {
                        if p.mask.is_some_and(|m| !m[i]) {
                            continue;
                        }
                        let gi = coef * g[i];
                        slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * gi;
                        slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * gi * gi;
                        p.values[i] -= lr * (slot.m[i] / c1) / (libm::sqrt(slot.v[i] / c2) + eps);
                    }
                }
            }
        }
        Ok(StepStats {
            grad_norm,
            clipped: coef < 1.0,
            tensors_updated: updated,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamMut, ParamRef};

    struct Toy {
        a: Vec<f64>,
        b: Vec<f64>,
        mask: Vec<bool>,
    }

    impl Parameterized for Toy {
        fn params(&self) -> Vec<ParamRef<'_>> {
            vec![
                ParamRef {
                    name: "a".into(),
                    shape: vec![2],
                    values: &self.a,
                    mask: None,
                    group: ParamGroup::Kp,
                    trainable: true,
                },
                ParamRef {
                    name: "b".into(),
                    shape: vec![2],
                    values: &self.b,
                    mask: Some(&self.mask),
                    group: ParamGroup::Sp,
                    trainable: true,
                },
            ]
        }

        fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
            vec![
                ParamMut {
                    name: "a".into(),
                    shape: vec![2],
                    values: &mut self.a,
                    mask: None,
                    group: ParamGroup::Kp,
                    trainable: true,
                },
                ParamMut {
                    name: "b".into(),
                    shape: vec![2],
                    values: &mut self.b,
                    mask: Some(&self.mask),
                    group: ParamGroup::Sp,
                    trainable: true,
                },
            ]
        }
    }

    fn toy() -> Toy {
        Toy {
            a: vec![1.0, 2.0],
            b: vec![3.0, 0.0],
            mask: vec![true, false],
        }
    }

    #[test]
    fn sgd_momentum_two_steps() {
        let mut t = toy();
        let mut opt = Optimizer::new(OptimizerKind::sgd(0.1, 0.5), None).unwrap();
        let g = [1.0, -1.0];
        opt.step(&mut t, &[&g, &g], None).unwrap();
        opt.step(&mut t, &[&g, &g], None).unwrap();
        // v1 = g, v2 = 1.5 g, total displacement 0.25 g
        assert!((t.a[0] - 0.75).abs() < 1e-15 && (t.a[1] - 2.25).abs() < 1e-15);
        assert_eq!(t.b[1], 0.0);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut t = toy();
        let mut opt = Optimizer::new(OptimizerKind::adam(0.01), None).unwrap();
        opt.step(&mut t, &[&[3.0, -0.2], &[5.0, 9.0]], None).unwrap();
        assert!((t.a[0] - 0.99).abs() < 1e-9);
        assert!((t.a[1] - 2.01).abs() < 1e-9);
        assert!((t.b[0] - 2.99).abs() < 1e-9);
        assert_eq!(t.b[1], 0.0);
    }

    #[test]
    fn blocked_group_is_untouched() {
        let mut t = toy();
        let mut opt = Optimizer::new(OptimizerKind::adam(0.01), None).unwrap();
        let g = [1.0, 1.0];
        opt.step(&mut t, &[&g, &g], None).unwrap();
        let before_b = t.b.clone();
        let slot_before = opt.state().slots[1].clone();
        let stats = opt.step(&mut t, &[&g, &g], Some(ParamGroup::Sp)).unwrap();
        assert_eq!(stats.tensors_updated, 1);
        assert_eq!(t.b, before_b);
        assert_eq!(opt.state().slots[1], slot_before);
        assert_eq!(opt.state().slots[0].steps, 2);
    }

    #[test]
    fn clipping_scales_to_norm() {
        let mut t = toy();
        let mut opt = Optimizer::new(OptimizerKind::sgd(1.0, 0.0), Some(1.0)).unwrap();
        let stats = opt.step(&mut t, &[&[3.0, 4.0], &[0.0, 100.0]], None).unwrap();
        // masked entry does not count toward the norm
        assert_eq!(stats.grad_norm, 5.0);
        assert!(stats.clipped);
        assert!((t.a[0] - 0.4).abs() < 1e-15 && (t.a[1] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_is_an_error_and_changes_nothing() {
        let mut t = toy();
        let mut opt = Optimizer::new(OptimizerKind::sgd(0.1, 0.9), None).unwrap();
        let err = opt.step(&mut t, &[&[f64::NAN, 0.0], &[0.0, 0.0]], None).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(t.a, vec![1.0, 2.0]);
    }

    #[test]
    fn rejects_bad_settings() {
        assert!(Optimizer::new(OptimizerKind::sgd(0.0, 0.5), None).is_err());
        assert!(Optimizer::new(OptimizerKind::sgd(0.1, 1.0), None).is_err());
        assert!(Optimizer::new(OptimizerKind::adam(0.1), Some(0.0)).is_err());
    }
}
