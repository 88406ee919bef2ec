//! Latent recursions `f(s, y, x)` and the contraction and growth envelopes the
//! verifiers consume.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covariates::CoefficientMap;
use crate::kernels::ObservationKernel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinkError {
    #[error("link output {value} leaves the kernel state space")]
    DomainViolation { value: f64 },
    #[error("regression map grows faster than the linear order")]
    UnboundedG,
    #[error("link incompatible with kernel: {0}")]
    Incompatible(String),
    #[error("invalid link spec: {0}")]
    InvalidSpec(String),
}

/// Coefficients of one threshold regime: `kappa s + kappa_tilde y^i + intercept`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Regime {
    pub kappa: CoefficientMap,
    pub kappa_tilde: CoefficientMap,
    pub intercept: CoefficientMap,
}

/// Interval `I(x)` selecting the inner regime. `None` endpoints are infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "interval", rename_all = "snake_case", deny_unknown_fields)]
pub enum IntervalMap {
    FixedInterval { lo: Option<f64>, hi: Option<f64> },
    /// `[lo * sum|x_k|, hi * sum|x_k|]`
    CovariateScaled { lo: f64, hi: f64 },
}

impl IntervalMap {
    pub fn bounds(&self, x: &[f64]) -> (f64, f64) {
        match self {
            IntervalMap::FixedInterval { lo, hi } => (lo.unwrap_or(f64::NEG_INFINITY), hi.unwrap_or(f64::INFINITY)),
            IntervalMap::CovariateScaled { lo, hi } => {
                let scale: f64 = x.iter().map(|v| v.abs()).sum();
                (lo * scale, hi * scale)
            }
        }
    }

    pub fn contains(&self, y: f64, x: &[f64]) -> bool {
        let (lo, hi) = self.bounds(x);
        y >= lo && y <= hi
    }

    fn validate(&self) -> Result<(), LinkError> {
        let ok = match self {
            IntervalMap::FixedInterval { lo, hi } => match (lo, hi) {
                (Some(l), Some(h)) => l <= h,
                _ => true,
            },
            IntervalMap::CovariateScaled { lo, hi } => lo <= hi && lo.is_finite() && hi.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(LinkError::InvalidSpec("interval requires lo <= hi".into()))
        }
    }

    /// `x -> sup_{y in I(x)} |y|^order`, when finite for every `x`.
    pub fn sup_abs_power(&self, order: u32) -> Option<CoefficientMap> {
        match self {
            IntervalMap::FixedInterval { lo: Some(l), hi: Some(h) } => {
                Some(CoefficientMap::constant(l.abs().max(h.abs()).powi(order as i32)))
            }
            IntervalMap::FixedInterval { .. } => None,
            IntervalMap::CovariateScaled { lo, hi } => Some(CoefficientMap::PowAbs {
                scale: lo.abs().max(hi.abs()).powi(order as i32),
                power: order as f64,
            }),
        }
    }
}

/// The regression part `g(y, x)` of an ARMA-like recursion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regression", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegressionMap {
    /// `slope(x) y + intercept(x)`
    Linear { slope: CoefficientMap, intercept: CoefficientMap },
    /// Linear pieces below and above `threshold`.
    Threshold { threshold: f64, below: Box<RegressionMap>, above: Box<RegressionMap> },
    /// `scale(x) tanh(y) + intercept(x)`
    Tanh { scale: CoefficientMap, intercept: CoefficientMap },
    /// `sum_k coefficients[k] y^k`
    Polynomial { coefficients: Vec<f64> },
}

impl RegressionMap {
    pub fn eval(&self, y: f64, x: &[f64]) -> f64 {
        match self {
            RegressionMap::Linear { slope, intercept } => slope.eval(x) * y + intercept.eval(x),
            RegressionMap::Threshold { threshold, below, above } => {
                if y <= *threshold {
                    below.eval(y, x)
                } else {
                    above.eval(y, x)
                }
            }
            RegressionMap::Tanh { scale, intercept } => scale.eval(x) * y.tanh() + intercept.eval(x),
            RegressionMap::Polynomial { coefficients } => coefficients.iter().rev().fold(0.0, |acc, c| acc * y + c),
        }
    }

    /// Maps `(A, B)` with `|g(y, x)| <= A(x)|y| + B(x)`.
    pub fn linear_growth(&self) -> Result<(CoefficientMap, CoefficientMap), LinkError> {
        match self {
            RegressionMap::Linear { slope, intercept } => Ok((slope.abs(), intercept.abs())),
            RegressionMap::Threshold { below, above, .. } => {
                let (a1, b1) = below.linear_growth()?;
                let (a2, b2) = above.linear_growth()?;
                Ok((CoefficientMap::max_of(vec![a1, a2]), CoefficientMap::max_of(vec![b1, b2])))
            }
            RegressionMap::Tanh { scale, intercept } => Ok((
                CoefficientMap::constant(0.0),
                CoefficientMap::sum_of(vec![scale.abs(), intercept.abs()]),
            )),
            RegressionMap::Polynomial { coefficients } => {
                if coefficients.iter().skip(2).any(|c| *c != 0.0) {
                    return Err(LinkError::UnboundedG);
                }
                let c0 = coefficients.first().copied().unwrap_or(0.0);
                let c1 = coefficients.get(1).copied().unwrap_or(0.0);
                Ok((CoefficientMap::constant(c1.abs()), CoefficientMap::constant(c0.abs())))
            }
        }
    }
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum LinkForm {
    /// `kappa(x) s + kappa_tilde(x) y^order + delta_tilde(x)`
    Linear {
        kappa: CoefficientMap,
        kappa_tilde: CoefficientMap,
        delta_tilde: CoefficientMap,
        #[serde(default = "one")]
        order: u32,
    },
    /// Inner regime when `y` lies in `I(x)`, outer regime otherwise.
    Threshold {
        regime_in: Regime,
        regime_out: Regime,
        interval: IntervalMap,
        #[serde(default = "one")]
        order: u32,
    },
    /// `a(x) s + g(y, x) - a(x) y`
    ArmaLike { a: CoefficientMap, g: RegressionMap },
    /// Vector recursion for categorical observations:
    /// `f(s, y, x)_j = kappa(x) s_j + effect_scale(x) effects[j][y] + intercept[j]`,
    /// with `effects` of shape `(N-1) x N`.
    CategoricalLinear {
        kappa: CoefficientMap,
        effects: Vec<Vec<f64>>,
        effect_scale: CoefficientMap,
        intercept: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub form: LinkForm,
    /// Output is clamped below at this value when set.
    #[serde(default)]
    pub floor: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvelopeCase {
    Linear,
    ThresholdMaxima,
    ThresholdBoundedInterval,
    ArmaLike,
    Categorical,
}

/// `|f(s,y,x)| <= kappa(x)|s| + kappa_tilde(x)|y|^order + delta(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthEnvelope {
    pub kappa_map: CoefficientMap,
    pub kappa_tilde_map: CoefficientMap,
    pub delta_map: CoefficientMap,
    pub order: u32,
    pub is_contractive_in_s: bool,
    pub case: EnvelopeCase,
}

impl GrowthEnvelope {
    pub fn bound(&self, s: f64, y: f64, x: &[f64]) -> f64 {
        self.kappa_map.eval(x) * s.abs() + self.kappa_tilde_map.eval(x) * y.abs().powi(self.order as i32) + self.delta_map.eval(x)
    }
}

fn power(y: f64, order: u32) -> f64 {
    if order == 2 {
        y * y
    } else {
        y
    }
}

impl LinkSpec {
    pub fn new(form: LinkForm) -> Self {
        LinkSpec { form, floor: None }
    }

    pub fn with_floor(mut self, floor: f64) -> Self {
        self.floor = Some(floor);
        self
    }

    /// Convenience constructor for a linear link with constant coefficients.
    pub fn linear_constant(kappa: f64, kappa_tilde: f64, delta_tilde: f64, order: u32) -> Self {
        LinkSpec::new(LinkForm::Linear {
            kappa: CoefficientMap::constant(kappa),
            kappa_tilde: CoefficientMap::constant(kappa_tilde),
            delta_tilde: CoefficientMap::constant(delta_tilde),
            order,
        })
    }

    pub fn order(&self) -> u32 {
        match &self.form {
            LinkForm::Linear { order, .. } | LinkForm::Threshold { order, .. } => *order,
            LinkForm::ArmaLike { .. } | LinkForm::CategoricalLinear { .. } => 1,
        }
    }

    pub fn state_dim(&self) -> usize {
        match &self.form {
            LinkForm::CategoricalLinear { intercept, .. } => intercept.len(),
            _ => 1,
        }
    }

    /// For scalar links, `f(s, y, x) = slope * s + offset` before the floor.
    pub fn affine_parts(&self, y: f64, x: &[f64]) -> (f64, f64) {
        match &self.form {
            LinkForm::Linear {
                kappa,
                kappa_tilde,
                delta_tilde,
                order,
            } => (kappa.eval(x), kappa_tilde.eval(x) * power(y, *order) + delta_tilde.eval(x)),
            LinkForm::Threshold {
                regime_in,
                regime_out,
                interval,
                order,
            } => {
                let r = if interval.contains(y, x) { regime_in } else { regime_out };
                (r.kappa.eval(x), r.kappa_tilde.eval(x) * power(y, *order) + r.intercept.eval(x))
            }
            LinkForm::ArmaLike { a, g } => {
                let ax = a.eval(x);
                (ax, g.eval(y, x) - ax * y)
            }
            LinkForm::CategoricalLinear { .. } => panic!("categorical links have vector states"),
        }
    }

    pub fn clamp(&self, v: f64) -> f64 {
        match self.floor {
            Some(c) => v.max(c),
            None => v,
        }
    }

    /// Scalar evaluation with the floor applied.
    pub fn apply_scalar(&self, s: f64, y: f64, x: &[f64]) -> f64 {
        let (slope, offset) = self.affine_parts(y, x);
        self.clamp(slope * s + offset)
    }

    /// Evaluates `f(s, y, x)` into `out` (same length as `s`).
    pub fn apply_into(&self, s: &[f64], y: f64, x: &[f64], out: &mut [f64]) {
        match &self.form {
            LinkForm::CategoricalLinear {
                kappa,
                effects,
                effect_scale,
                intercept,
            } => {
                let k = kappa.eval(x);
                let scale = effect_scale.eval(x);
                let cat = y as usize;
                for j in 0..s.len() {
                    out[j] = self.clamp(k * s[j] + scale * effects[j][cat] + intercept[j]);
                }
            }
            _ => out[0] = self.apply_scalar(s[0], y, x),
        }
    }

    /// Evaluates `f(s, y, x)` and checks the result against the kernel state space.
    pub fn apply(&self, kernel: &ObservationKernel, s: &[f64], y: f64, x: &[f64]) -> Result<Vec<f64>, LinkError> {
        let mut out = vec![0.0; s.len()];
        self.apply_into(s, y, x, &mut out);
        for &v in &out {
            if !v.is_finite() || kernel.domain_lower().is_some_and(|lo| v < lo) {
                return Err(LinkError::DomainViolation { value: v });
            }
        }
        Ok(out)
    }

    /// Lipschitz constant of `s -> f(s, y, x)` for each `x`.
    pub fn contraction_map(&self) -> CoefficientMap {
        match &self.form {
            LinkForm::Linear { kappa, .. } | LinkForm::CategoricalLinear { kappa, .. } => kappa.abs(),
            LinkForm::Threshold { regime_in, regime_out, .. } => {
                CoefficientMap::max_of(vec![regime_in.kappa.abs(), regime_out.kappa.abs()])
            }
            LinkForm::ArmaLike { a, .. } => a.abs(),
        }
    }

    /// Growth envelope; threshold links with bounded `I(x)` use the refined
    /// bound that moves the inner regime's observation term into the intercept.
    pub fn growth_envelope(&self) -> Result<GrowthEnvelope, LinkError> {
        let order = self.order();
        let (kappa_map, kappa_tilde_map, delta_map, case) = match &self.form {
            LinkForm::Linear {
                kappa,
                kappa_tilde,
                delta_tilde,
                ..
            } => (kappa.abs(), kappa_tilde.abs(), delta_tilde.abs(), EnvelopeCase::Linear),
            LinkForm::Threshold {
                regime_in,
                regime_out,
                interval,
                ..
            } => match interval.sup_abs_power(order) {
                Some(sup) => (
                    CoefficientMap::max_of(vec![regime_in.kappa.abs(), regime_out.kappa.abs()]),
                    regime_out.kappa_tilde.abs(),
                    CoefficientMap::max_of(vec![
                        CoefficientMap::sum_of(vec![
                            regime_in.intercept.abs(),
                            CoefficientMap::product_of(vec![regime_in.kappa_tilde.abs(), sup]),
                        ]),
                        regime_out.intercept.abs(),
                    ]),
                    EnvelopeCase::ThresholdBoundedInterval,
                ),
                None => self.threshold_maxima(regime_in, regime_out),
            },
            LinkForm::ArmaLike { a, g } => {
                let (slope, intercept) = g.linear_growth()?;
                (
                    a.abs(),
                    CoefficientMap::sum_of(vec![slope, a.abs()]),
                    intercept,
                    EnvelopeCase::ArmaLike,
                )
            }
            LinkForm::CategoricalLinear {
                kappa,
                effects,
                effect_scale,
                intercept,
            } => {
                let max_effect = effects.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
                let max_intercept = intercept.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                (
                    kappa.abs(),
                    CoefficientMap::constant(0.0),
                    CoefficientMap::sum_of(vec![effect_scale.abs().scaled(max_effect), CoefficientMap::constant(max_intercept)]),
                    EnvelopeCase::Categorical,
                )
            }
        };
        let is_contractive_in_s = kappa_map.as_constant().is_some_and(|c| c < 1.0);
        Ok(GrowthEnvelope {
            kappa_map,
            kappa_tilde_map,
            delta_map,
            order,
            is_contractive_in_s,
            case,
        })
    }

    /// Envelope built from componentwise maxima of the two regimes.
    pub fn threshold_maxima_envelope(&self) -> Option<GrowthEnvelope> {
        let LinkForm::Threshold { regime_in, regime_out, order, .. } = &self.form else {
            return None;
        };
        let (kappa_map, kappa_tilde_map, delta_map, case) = self.threshold_maxima(regime_in, regime_out);
        let is_contractive_in_s = kappa_map.as_constant().is_some_and(|c| c < 1.0);
        Some(GrowthEnvelope {
            kappa_map,
            kappa_tilde_map,
            delta_map,
            order: *order,
            is_contractive_in_s,
            case,
        })
    }

    fn threshold_maxima(
        &self,
        regime_in: &Regime,
        regime_out: &Regime,
    ) -> (CoefficientMap, CoefficientMap, CoefficientMap, EnvelopeCase) {
        (
            CoefficientMap::max_of(vec![regime_in.kappa.abs(), regime_out.kappa.abs()]),
            CoefficientMap::max_of(vec![regime_in.kappa_tilde.abs(), regime_out.kappa_tilde.abs()]),
            CoefficientMap::max_of(vec![regime_in.intercept.abs(), regime_out.intercept.abs()]),
            EnvelopeCase::ThresholdMaxima,
        )
    }

    fn maps(&self) -> Vec<&CoefficientMap> {
        match &self.form {
            LinkForm::Linear {
                kappa,
                kappa_tilde,
                delta_tilde,
                ..
            } => vec![kappa, kappa_tilde, delta_tilde],
            LinkForm::Threshold { regime_in, regime_out, .. } => vec![
                &regime_in.kappa,
                &regime_in.kappa_tilde,
                &regime_in.intercept,
                &regime_out.kappa,
                &regime_out.kappa_tilde,
                &regime_out.intercept,
            ],
            LinkForm::ArmaLike { a, .. } => vec![a],
            LinkForm::CategoricalLinear { kappa, effect_scale, .. } => vec![kappa, effect_scale],
        }
    }

    /// Shape checks that do not involve a kernel.
    pub fn validate(&self) -> Result<(), LinkError> {
        for m in self.maps() {
            m.validate().map_err(LinkError::InvalidSpec)?;
        }
        if !matches!(self.order(), 1 | 2) {
            return Err(LinkError::InvalidSpec(format!("order must be 1 or 2, got {}", self.order())));
        }
        if let Some(f) = self.floor {
            if !f.is_finite() {
                return Err(LinkError::InvalidSpec("floor must be finite".into()));
            }
        }
        match &self.form {
            LinkForm::Threshold { interval, .. } => interval.validate()?,
            LinkForm::CategoricalLinear { effects, intercept, .. } => {
                let d = intercept.len();
                if d == 0 || effects.len() != d || effects.iter().any(|row| row.len() != d + 1) {
                    return Err(LinkError::InvalidSpec("effects must be (N-1) x N with N-1 intercepts".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Structural compatibility with a kernel: dimensions, moment order and
    /// guaranteed membership of the output in the kernel state space.
    pub fn check_compatible(&self, kernel: &ObservationKernel) -> Result<(), LinkError> {
        self.validate()?;
        let categorical_link = matches!(self.form, LinkForm::CategoricalLinear { .. });
        let multinomial = matches!(kernel, ObservationKernel::Multinomial { .. });
        if categorical_link != multinomial {
            return Err(LinkError::Incompatible(
                "categorical links pair exactly with multinomial kernels".into(),
            ));
        }
        if self.state_dim() != kernel.state_dim() {
            return Err(LinkError::Incompatible(format!(
                "link state dimension {} vs kernel {}",
                self.state_dim(),
                kernel.state_dim()
            )));
        }
        if !kernel.is_categorical() && self.order() != kernel.moment_order() {
            return Err(LinkError::Incompatible(format!(
                "link order {} but the {} kernel supports order {}",
                self.order(),
                kernel.family_name(),
                kernel.moment_order()
            )));
        }
        let Some(lower) = kernel.domain_lower() else {
            return Ok(());
        };
        if let Some(f) = self.floor {
            if f < lower {
                return Err(LinkError::Incompatible(format!("floor {f} below the state space bound {lower}")));
            }
            return Ok(());
        }
        let structural = match &self.form {
            LinkForm::Linear {
                kappa,
                kappa_tilde,
                delta_tilde,
                ..
            } => kappa.is_nonnegative() && kappa_tilde.is_nonnegative() && delta_tilde.lower_bound() >= lower,
            LinkForm::Threshold { regime_in, regime_out, .. } => [regime_in, regime_out].iter().all(|r| {
                r.kappa.is_nonnegative() && r.kappa_tilde.is_nonnegative() && r.intercept.lower_bound() >= lower
            }),
            _ => false,
        };
        if structural {
            Ok(())
        } else {
            Err(LinkError::Incompatible(format!(
                "output may fall below {lower}; use nonnegative coefficients with a large enough intercept or set a floor"
            )))
        }
    }
}
