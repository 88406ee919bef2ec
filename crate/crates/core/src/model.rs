//! An assembled model: kernel, link and environment.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covariates::{CovariateError, CovariateProcessSpec};
use crate::kernels::{KernelError, ObservationKernel};
use crate::links::{LinkError, LinkSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Covariate(#[from] CovariateError),
    #[error("invalid model: {0}")]
    Invalid(String),
}

/// Norm used on the state space: absolute value, or the sup norm for vector
/// states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormTag {
    #[default]
    Abs,
    Inf,
}

fn default_alpha() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kernel: ObservationKernel,
    pub link: LinkSpec,
    pub covariates: CovariateProcessSpec,
    /// Exponent with `V(s) >= |s|^alpha`.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub norm: NormTag,
}

impl ModelSpec {
    pub fn new(kernel: ObservationKernel, link: LinkSpec, covariates: CovariateProcessSpec) -> Self {
        let norm = if kernel.state_dim() > 1 { NormTag::Inf } else { NormTag::Abs };
        ModelSpec {
            kernel,
            link,
            covariates,
            alpha: 1.0,
            norm,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.kernel.state_dim()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.kernel.validate()?;
        self.covariates.validate()?;
        self.link.check_compatible(&self.kernel)?;
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(ModelError::Invalid(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        let expected = if self.state_dim() > 1 { NormTag::Inf } else { NormTag::Abs };
        if self.norm != expected && self.state_dim() > 1 {
            return Err(ModelError::Invalid("vector states use the sup norm".into()));
        }
        Ok(())
    }

    /// Canonical start state: the lower end of the state space, else zero.
    pub fn default_start(&self) -> Vec<f64> {
        let lo = self.kernel.domain_lower().unwrap_or(0.0);
        let lo = self.link.floor.map_or(lo, |f| f.max(lo));
        vec![lo; self.state_dim()]
    }

    /// Lyapunov function `V(s) = 1 + |s|`.
    pub fn lyapunov(&self, s: &[f64]) -> f64 {
        1.0 + s.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}
