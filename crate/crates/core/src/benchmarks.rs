//! Reference models used by the acceptance suite and the sample manifests.

use crate::covariates::{CoefficientMap, CovariateProcessSpec, Marginal};
use crate::kernels::ObservationKernel;
use crate::links::{LinkForm, LinkSpec};
use crate::model::ModelSpec;

/// Poisson INGARCH with i.i.d. `Uniform(0, 1)` covariates scaling the
/// observation feedback:
/// `lambda_{t+1} = 0.4 lambda_t + 0.3 X_t Y_t + 1`.
pub fn poisson_ingarch_x() -> ModelSpec {
    let link = LinkSpec::new(LinkForm::Linear {
        kappa: CoefficientMap::constant(0.4),
        kappa_tilde: CoefficientMap::AffineAbs { c0: 0.0, c1: 0.3 },
        delta_tilde: CoefficientMap::constant(1.0),
        order: 1,
    });
    ModelSpec::new(ObservationKernel::Poisson, link, uniform_env())
}

/// Logistic binary model with a covariate interaction and standard normal
/// covariates: `lambda_{t+1} = 0.5 lambda_t + X_t Y_t - 0.5`.
pub fn bernoulli_logit() -> ModelSpec {
    let link = LinkSpec::new(LinkForm::Linear {
        kappa: CoefficientMap::constant(0.5),
        kappa_tilde: CoefficientMap::Affine { c0: 0.0, c1: 1.0 },
        delta_tilde: CoefficientMap::constant(-0.5),
        order: 1,
    });
    let env = CovariateProcessSpec::Iid {
        marginal: Marginal::Gaussian { mean: 0.0, sd: 1.0 },
        dim: 1,
    };
    ModelSpec::new(ObservationKernel::BernoulliLogit, link, env)
}

/// The Poisson benchmark with an expanding latent recursion, `kappa = 1.1`.
pub fn explosive_poisson() -> ModelSpec {
    let mut m = poisson_ingarch_x();
    if let LinkForm::Linear { kappa, .. } = &mut m.link.form {
        *kappa = CoefficientMap::constant(1.1);
    }
    m
}

fn uniform_env() -> CovariateProcessSpec {
    CovariateProcessSpec::Iid {
        marginal: Marginal::Uniform { lo: 0.0, hi: 1.0 },
        dim: 1,
    }
}

/// Looks up a benchmark by its manifest name.
pub fn by_name(name: &str) -> Option<ModelSpec> {
    match name {
        "poisson_ingarch_x" => Some(poisson_ingarch_x()),
        "bernoulli_logit" => Some(bernoulli_logit()),
        "explosive_poisson" => Some(explosive_poisson()),
        _ => None,
    }
}

pub const NAMES: [&str; 3] = ["poisson_ingarch_x", "bernoulli_logit", "explosive_poisson"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmarks_validate() {
        for name in NAMES {
            by_name(name).unwrap().validate().unwrap();
        }
        assert!(by_name("missing").is_none());
    }
}
