//! The statistical penalty `λ · Σ_slices nll(slice)` plus weight decay.
//!
//! Slices are the 3×3 kernels of scoped tensors, enumerated exactly as
//! [`crate::tensorio::extract_filters`] does: leading indices in row-major
//! order, each kernel flattened row-major.

use glob::Pattern;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::gmm::GaussianMixture;
use crate::numeric::KahanSum;
use crate::tensor::{ParamSet, Tensor};
use crate::tensorio::FILTER_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientMode {
    /// Gradient of the best-scoring component only.
    #[default]
    Approximate,
    /// Responsibility-weighted gradient of the full mixture.
    Exact,
}

/// Which parameter tensors receive the penalty.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Scope {
    /// Every tensor whose trailing dimensions are 3×3.
    #[default]
    AllConv3x3,
    /// Tensors whose names match any of these glob patterns.
    Patterns(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RegConfig {
    pub lambda: f64,
    /// Weight decay coefficient, applied to every trainable parameter.
    pub alpha: f64,
    pub gradient_mode: GradientMode,
    pub scope: Scope,
}

impl RegConfig {
    pub fn new(lambda: f64, alpha: f64) -> Self {
        Self {
            lambda,
            alpha,
            ..Self::default()
        }
    }

    pub fn with_mode(mut self, mode: GradientMode) -> Self {
        self.gradient_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) || !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "lambda ({}) and alpha ({}) must be finite and nonnegative",
                self.lambda, self.alpha
            )));
        }
        Ok(())
    }

    /// Names of the scoped tensors, in parameter order.
    pub fn scoped<'a>(&self, params: &'a ParamSet) -> Result<Vec<&'a str>> {
        match &self.scope {
            Scope::AllConv3x3 => Ok(params
                .iter()
                .filter(|(_, t)| t.has_3x3_slices())
                .map(|(n, _)| n.as_str())
                .collect()),
            Scope::Patterns(pats) => {
                let compiled = pats
                    .iter()
                    .map(|p| Pattern::new(p).map_err(|e| Error::Config(format!("bad scope pattern {p:?}: {e}"))))
                    .collect::<Result<Vec<_>>>()?;
                let mut out = Vec::new();
                for (name, t) in params {
                    if compiled.iter().any(|p| p.matches(name)) {
                        if !t.has_3x3_slices() {
                            return Err(Error::Config(format!(
                                "scoped tensor {name:?} has shape {:?}, not trailing 3x3",
                                t.shape()
                            )));
                        }
                        out.push(name.as_str());
                    }
                }
                Ok(out)
            }
        }
    }
}

fn check_model(m: &GaussianMixture) -> Result<()> {
    if m.dim() != FILTER_DIM {
        return Err(Error::DimMismatch {
            expected: FILTER_DIM,
            got: m.dim(),
        });
    }
    Ok(())
}

/// Per-slice NLL of one tensor, slices in order.
fn tensor_slice_nll(t: &Tensor, m: &GaussianMixture) -> Vec<f64> {
    let n = t.len() / FILTER_DIM;
    let data = t.data();
    exec::map_chunks(n, 256, |range| {
        let mut scratch = vec![0.0; m.k()];
        range
            .map(|s| -m.logpdf_unchecked(&data[s * FILTER_DIM..(s + 1) * FILTER_DIM], &mut scratch))
            .collect::<Vec<_>>()
    })
    .concat()
}

/// `λ · Σ nll(slice)` over all scoped slices.
pub fn reg_loss(params: &ParamSet, m: &GaussianMixture, cfg: &RegConfig) -> Result<f64> {
    cfg.validate()?;
    let scoped = cfg.scoped(params)?;
    if cfg.lambda == 0.0 {
        return Ok(0.0);
    }
    check_model(m)?;
    let mut sum = KahanSum::new();
    for name in scoped {
        for v in tensor_slice_nll(&params[name], m) {
            sum.add(v);
        }
    }
    Ok(cfg.lambda * sum.value())
}

/// Gradient of [`reg_loss`] for every parameter; unscoped tensors get zeros.
pub fn reg_grad(params: &ParamSet, m: &GaussianMixture, cfg: &RegConfig) -> Result<ParamSet> {
    cfg.validate()?;
    let scoped = cfg.scoped(params)?;
    let mut grads: ParamSet = params
        .iter()
        .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
        .collect();
    if cfg.lambda == 0.0 {
        return Ok(grads);
    }
    check_model(m)?;
    for name in scoped {
        let data = params[name].data();
        let n = data.len() / FILTER_DIM;
        let per_slice = exec::map_chunks(n, 256, |range| {
            let mut scratch = vec![0.0; m.k()];
            let mut g = vec![0.0; range.len() * FILTER_DIM];
            for (local, s) in range.enumerate() {
                let w = &data[s * FILTER_DIM..(s + 1) * FILTER_DIM];
                let out = &mut g[local * FILTER_DIM..(local + 1) * FILTER_DIM];
                match cfg.gradient_mode {
                    GradientMode::Approximate => m.grad_approx_into(w, &mut scratch, out),
                    GradientMode::Exact => m.grad_exact_into(w, &mut scratch, out),
                }
            }
            g
        })
        .concat();
        let dst = grads.get_mut(name).expect("scoped name exists").data_mut();
        for (d, g) in dst.iter_mut().zip(per_slice) {
            *d = cfg.lambda * g;
        }
    }
    Ok(grads)
}

/// `α · ½ · Σ w²` over every parameter.
pub fn weight_decay(params: &ParamSet, alpha: f64) -> f64 {
    let mut sum = KahanSum::new();
    for t in params.values() {
        for &v in t.data() {
            sum.add(v * v);
        }
    }
    alpha * 0.5 * sum.value()
}

/// Classification loss plus weight decay plus the statistical penalty.
///
/// `m` may be `None` only when `cfg.lambda` is zero.
pub fn total_objective(
    class_loss: f64,
    params: &ParamSet,
    m: Option<&GaussianMixture>,
    cfg: &RegConfig,
) -> Result<f64> {
    cfg.validate()?;
    let reg = match m {
        Some(m) => reg_loss(params, m, cfg)?,
        None if cfg.lambda == 0.0 => 0.0,
        None => return Err(Error::Config("lambda > 0 requires a mixture model".into())),
    };
    Ok(class_loss + weight_decay(params, cfg.alpha) + reg)
}
