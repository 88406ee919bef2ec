//! Drift certificates `P_x V <= gamma(x) V + delta(x)` with `V(s) = 1 + |s|`.
//!
//! Scalar kernels go through the growth envelope of the link and the constant
//! `D` of `E|Y|^i <= |s| + D`: `gamma = kappa + kappa_tilde` and
//! `delta = (1 - gamma)^+ + kappa_tilde D + delta_tilde`. Binary and
//! categorical kernels only need the contraction constant: `gamma = kappa` and
//! `delta = (1 - kappa)^+ + max_y |f(0, y, x)|`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covariates::CoefficientMap;
use crate::kernels::KernelError;
use crate::links::{EnvelopeCase, GrowthEnvelope, LinkError, LinkSpec};
use crate::model::ModelSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DriftError {
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftRoute {
    /// Linear growth envelope with the kernel's absolute-moment constant.
    LinearEnvelope,
    /// Threshold link bounded by the componentwise maxima of its regimes.
    ThresholdMaxima,
    /// Threshold link with bounded inner intervals.
    ThresholdBoundedInterval,
    /// ARMA-like link through its growth envelope.
    ArmaEnvelope,
    /// Finite observation space: contraction alone gives the drift.
    CategoricalContraction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DeltaForm {
    Envelope {
        kappa_tilde: CoefficientMap,
        delta_tilde: CoefficientMap,
        drift_constant: f64,
    },
    Categorical {
        link: LinkSpec,
        categories: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftCertificate {
    pub route: DriftRoute,
    pub gamma: CoefficientMap,
    pub delta: DeltaForm,
    pub order: u32,
    pub envelope: Option<GrowthEnvelope>,
}

impl DriftCertificate {
    pub fn gamma_at(&self, x: &[f64]) -> f64 {
        self.gamma.eval(x)
    }

    pub fn delta_at(&self, x: &[f64]) -> f64 {
        let g = self.gamma_at(x);
        (1.0 - g).max(0.0) + self.delta_excess_at(x)
    }

    /// The part of `delta` beyond `(1 - gamma)^+`.
    pub fn delta_excess_at(&self, x: &[f64]) -> f64 {
        match &self.delta {
            DeltaForm::Envelope {
                kappa_tilde,
                delta_tilde,
                drift_constant,
            } => kappa_tilde.eval(x) * drift_constant + delta_tilde.eval(x),
            DeltaForm::Categorical { link, categories } => max_abs_at_zero(link, *categories, x),
        }
    }

    pub fn drift_constant(&self) -> Option<f64> {
        match &self.delta {
            DeltaForm::Envelope { drift_constant, .. } => Some(*drift_constant),
            DeltaForm::Categorical { .. } => None,
        }
    }
}

/// `max_y |f(0, y, x)|` over a finite observation space.
pub fn max_abs_at_zero(link: &LinkSpec, categories: usize, x: &[f64]) -> f64 {
    let zero = vec![0.0; link.state_dim()];
    let mut out = vec![0.0; link.state_dim()];
    (0..categories)
        .map(|y| {
            link.apply_into(&zero, y as f64, x, &mut out);
            out.iter().fold(0.0f64, |m, v| m.max(v.abs()))
        })
        .fold(0.0, f64::max)
}

pub fn drift_certificate(model: &ModelSpec) -> Result<DriftCertificate, DriftError> {
    let kernel = &model.kernel;
    if kernel.is_categorical() {
        let categories = kernel.state_dim() + 1;
        return Ok(DriftCertificate {
            route: DriftRoute::CategoricalContraction,
            gamma: model.link.contraction_map(),
            delta: DeltaForm::Categorical {
                link: model.link.clone(),
                categories,
            },
            order: 1,
            envelope: None,
        });
    }
    let envelope = model.link.growth_envelope()?;
    let drift_constant = kernel
        .conditional_moment(&model.default_start(), model.link.order())?
        .drift_constant;
    let route = match envelope.case {
        EnvelopeCase::Linear | EnvelopeCase::Categorical => DriftRoute::LinearEnvelope,
        EnvelopeCase::ThresholdMaxima => DriftRoute::ThresholdMaxima,
        EnvelopeCase::ThresholdBoundedInterval => DriftRoute::ThresholdBoundedInterval,
        EnvelopeCase::ArmaLike => DriftRoute::ArmaEnvelope,
    };
    Ok(DriftCertificate {
        route,
        gamma: CoefficientMap::sum_of(vec![envelope.kappa_map.clone(), envelope.kappa_tilde_map.clone()]),
        delta: DeltaForm::Envelope {
            kappa_tilde: envelope.kappa_tilde_map.clone(),
            delta_tilde: envelope.delta_map.clone(),
            drift_constant,
        },
        order: envelope.order,
        envelope: Some(envelope),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariates::CovariateProcessSpec;
    use crate::kernels::ObservationKernel;
    use crate::links::LinkForm;

    #[test]
    fn linear_poisson_certificate() {
        let m = ModelSpec::new(
            ObservationKernel::Poisson,
            LinkSpec::linear_constant(0.4, 0.3, 1.0, 1),
            CovariateProcessSpec::Constant { value: vec![1.0] },
        );
        let c = drift_certificate(&m).unwrap();
        assert_eq!(c.route, DriftRoute::LinearEnvelope);
        assert!((c.gamma_at(&[1.0]) - 0.7).abs() < 1e-15);
        assert!((c.delta_at(&[1.0]) - 1.3).abs() < 1e-15);
    }

    #[test]
    fn binary_certificate_uses_contraction() {
        let link = LinkSpec::new(LinkForm::Linear {
            kappa: CoefficientMap::constant(0.9),
            kappa_tilde: CoefficientMap::Affine { c0: 0.0, c1: 1.0 },
            delta_tilde: CoefficientMap::constant(-0.5),
            order: 1,
        });
        let m = ModelSpec::new(
            ObservationKernel::BernoulliLogit,
            link,
            CovariateProcessSpec::Constant { value: vec![2.0] },
        );
        let c = drift_certificate(&m).unwrap();
        assert_eq!(c.route, DriftRoute::CategoricalContraction);
        assert!((c.gamma_at(&[2.0]) - 0.9).abs() < 1e-15);
        // max(|-0.5|, |2 - 0.5|) + 0.1
        assert!((c.delta_at(&[2.0]) - 1.6).abs() < 1e-12);
    }
}
