//! Central finite-difference checks against analytic gradients.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::Parameterized;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Lower bound on the relative-error denominator, so entries whose true
    /// gradient is near zero are judged by absolute error instead.
    pub floor: f64,
    /// Check at most this many evenly spaced entries per tensor.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            floor: 1e-4,
            max_entries: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel: f64,
    pub mean_rel: f64,
    /// Flat index of the worst entry with its analytic and numeric values.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel).fold(0.0, f64::max)
    }

    pub fn passes(&self, threshold: f64) -> bool {
        self.tensors.iter().all(|t| t.max_rel < threshold)
    }

    pub fn failing(&self, threshold: f64) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(move |t| !(t.max_rel < threshold))
    }

    pub fn get(&self, name: &str) -> Option<&TensorCheck> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// `|a − n| / max(|a| + |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = libm::fabs(analytic - numeric);
    diff / (libm::fabs(analytic) + libm::fabs(numeric)).max(floor)
}

/// Compares `analytic` (one buffer per parameter tensor, in parameter
/// order) with central differences of `loss`. Frozen tensors and inactive
/// masked entries are skipped. Parameters are restored afterwards.
pub fn grad_check<M, F>(model: &mut M, analytic: &[&[f64]], mut loss: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    M: Parameterized + ?Sized,
    F: FnMut(&M) -> Result<f64>,
{
    if !(opts.eps > 0.0) || !(opts.floor > 0.0) {
        return Err(Error::InvalidArgument("eps and floor must be positive".into()));
    }
    let layout: Vec<(String, usize, Option<Vec<bool>>, bool)> = model
        .params()
        .into_iter()
        .map(|p| (p.name, p.values.len(), p.mask.map(<[bool]>::to_vec), p.trainable))
        .collect();
    if layout.len() != analytic.len() {
        return Err(Error::shape("grad_check", layout.len(), analytic.len()));
    }
    let mut tensors = Vec::new();
    for (k, (name, len, mask, trainable)) in layout.into_iter().enumerate() {
        if analytic[k].len() != len {
            return Err(Error::shape("grad_check", len, analytic[k].len()));
        }
        if !trainable {
            continue;
        }
        let candidates: Vec<usize> = (0..len).filter(|&i| mask.as_ref().map_or(true, |m| m[i])).collect();
        let picked: Vec<usize> = match opts.max_entries {
            Some(cap) if candidates.len() > cap && cap > 0 => {
                (0..cap).map(|j| candidates[j * candidates.len() / cap]).collect()
            }
            _ => candidates,
        };
        let mut check = TensorCheck {
            name,
            checked: picked.len(),
            max_rel: 0.0,
            mean_rel: 0.0,
            worst: None,
        };
        for &i in &picked {
            let orig = model.params_mut()[k].values[i];
            model.params_mut()[k].values[i] = orig + opts.eps;
            let plus = loss(model);
            model.params_mut()[k].values[i] = orig - opts.eps;
            let minus = loss(model);
            model.params_mut()[k].values[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.eps);
            let a = analytic[k][i];
            let rel = relative_error(a, numeric, opts.floor);
            check.mean_rel += rel;
            if check.worst.is_none() || rel > check.max_rel || rel.is_nan() {
                check.max_rel = if rel.is_nan() { f64::INFINITY } else { rel };
                check.worst = Some((i, a, numeric));
            }
        }
        if check.checked > 0 {
            check.mean_rel /= check.checked as f64;
        }
        tensors.push(check);
    }
    Ok(GradCheckReport { tensors })
}
