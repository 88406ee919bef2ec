//! Observation kernels `p(.|s)`: sampling, total-variation bounds and oracle,
//! maximal coupling, and conditional absolute moments.

use rand::RngCore;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Gamma, StudentsT};
use statrs::function::beta::beta_reg;
use statrs::function::gamma::{gamma_ur, ln_gamma};
use thiserror::Error;

use crate::numeric::{integrate, ln_normal_sf, logistic, normal_cdf, normal_pdf, normal_quantile, normal_sf};
use crate::rng::open_uniform;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("state {state} outside the domain of the {family} kernel")]
    StateOutOfDomain { family: &'static str, state: String },
    #[error("total-variation oracle could not reach tolerance {0}")]
    ToleranceUnreachable(f64),
    #[error("conditional moment of order {order} unsupported for the {family} kernel")]
    UnsupportedOrder { family: &'static str, order: u32 },
    #[error("invalid kernel parameters: {0}")]
    InvalidKernel(String),
    #[error("overlap rejection sampler exceeded {0} attempts")]
    CouplingBudgetExceeded(u64),
}

/// Zero-mean symmetric unimodal noise densities for location kernels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "density", rename_all = "snake_case", deny_unknown_fields)]
pub enum LocationDensity {
    Gaussian { sigma: f64 },
    Laplace { b: f64 },
    StudentT { nu: f64 },
}

impl LocationDensity {
    fn student(nu: f64) -> StudentsT {
        StudentsT::new(0.0, 1.0, nu).expect("validated degrees of freedom")
    }

    pub fn pdf(&self, e: f64) -> f64 {
        match *self {
            LocationDensity::Gaussian { sigma } => normal_pdf(e / sigma) / sigma,
            LocationDensity::Laplace { b } => (-e.abs() / b).exp() / (2.0 * b),
            LocationDensity::StudentT { nu } => Self::student(nu).pdf(e),
        }
    }

    pub fn ln_pdf(&self, e: f64) -> f64 {
        match *self {
            LocationDensity::Gaussian { sigma } => {
                -0.5 * (e / sigma).powi(2) - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
            }
            LocationDensity::Laplace { b } => -e.abs() / b - (2.0 * b).ln(),
            LocationDensity::StudentT { nu } => Self::student(nu).ln_pdf(e),
        }
    }

    pub fn cdf(&self, e: f64) -> f64 {
        match *self {
            LocationDensity::Gaussian { sigma } => normal_cdf(e / sigma),
            LocationDensity::Laplace { b } => {
                if e < 0.0 {
                    0.5 * (e / b).exp()
                } else {
                    1.0 - 0.5 * (-e / b).exp()
                }
            }
            LocationDensity::StudentT { nu } => Self::student(nu).cdf(e),
        }
    }

    /// `ln F(-a)` for `a >= 0`, accurate in the far tail.
    fn ln_lower_tail(&self, a: f64) -> f64 {
        match *self {
            LocationDensity::Gaussian { sigma } => ln_normal_sf(a / sigma),
            LocationDensity::Laplace { b } => (0.5f64).ln() - a / b,
            LocationDensity::StudentT { nu } => Self::student(nu).cdf(-a).ln(),
        }
    }

    pub fn quantile(&self, u: f64) -> f64 {
        match *self {
            LocationDensity::Gaussian { sigma } => sigma * normal_quantile(u),
            LocationDensity::Laplace { b } => {
                if u < 0.5 {
                    b * (2.0 * u).ln()
                } else {
                    -b * (2.0 * (1.0 - u)).ln()
                }
            }
            LocationDensity::StudentT { nu } => Self::student(nu).inverse_cdf(u),
        }
    }

    /// `E|e|`.
    pub fn mean_abs(&self) -> f64 {
        match *self {
            LocationDensity::Gaussian { sigma } => sigma * (2.0 / std::f64::consts::PI).sqrt(),
            LocationDensity::Laplace { b } => b,
            LocationDensity::StudentT { nu } => 2.0 * nu * self.pdf(0.0) / (nu - 1.0),
        }
    }

    /// `E|s + e|`.
    pub fn mean_abs_shifted(&self, s: f64) -> f64 {
        let a = s.abs();
        match *self {
            LocationDensity::Gaussian { sigma } => a * (1.0 - 2.0 * normal_cdf(-a / sigma)) + 2.0 * sigma * normal_pdf(a / sigma),
            LocationDensity::Laplace { b } => a + b * (-a / b).exp(),
            LocationDensity::StudentT { nu } => {
                a * (1.0 - 2.0 * self.cdf(-a)) + 2.0 * (nu + a * a) / (nu - 1.0) * self.pdf(a)
            }
        }
    }

    /// Exponent of the natural `phi(h) = D (h + h^p)` form.
    fn natural_power(&self) -> Option<i32> {
        match self {
            LocationDensity::Gaussian { .. } => Some(2),
            LocationDensity::Laplace { .. } => Some(1),
            LocationDensity::StudentT { .. } => None,
        }
    }
}

/// The family `p(.|s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObservationKernel {
    Poisson,
    /// `NB(r, s/(s+r))`, mean `s`.
    NegBinomial { r: u32 },
    BernoulliLogit,
    BernoulliProbit,
    /// Categories `0..categories`, softmax of `(0, s_1, .., s_{N-1})`.
    Multinomial { categories: usize },
    /// `y = sqrt(s) e`, `e` standard normal, states in `[c_minus, inf)`.
    GarchGaussian { c_minus: f64 },
    /// `y = s + e`.
    Location { density: LocationDensity },
}

/// `phi(h) = sum_j coefficients[j] * h^(j+1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiSpec {
    pub coefficients: Vec<f64>,
}

impl PhiSpec {
    pub fn linear(c: f64) -> Self {
        PhiSpec { coefficients: vec![c] }
    }

    pub fn eval(&self, h: f64) -> f64 {
        self.coefficients
            .iter()
            .enumerate()
            .map(|(j, c)| c * h.powi(j as i32 + 1))
            .sum()
    }

    pub fn degree(&self) -> usize {
        self.coefficients.iter().rposition(|c| *c > 0.0).map_or(0, |j| j + 1)
    }

    /// Coefficient of the linear term.
    pub fn first(&self) -> f64 {
        self.coefficients.first().copied().unwrap_or(0.0)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        PhiSpec {
            coefficients: self.coefficients.iter().map(|c| c * factor).collect(),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.coefficients.iter().all(|c| *c >= 0.0) && self.coefficients.iter().any(|c| *c > 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoupleDraw {
    pub y: f64,
    pub y_prime: f64,
    pub met: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionalMoment {
    /// `E |Y|^i` under `p(.|s)`.
    pub value: f64,
    /// `D` with `E |Y|^i <= |s| + D` for every state.
    pub drift_constant: f64,
}

/// Safety margin applied to numerically certified constants.
pub const CERTIFICATION_MARGIN: f64 = 1.05;
/// Separations used to certify numeric constants and to build test grids.
pub const H_MIN: f64 = 1e-4;
pub const H_MAX: f64 = 1e2;
const CERTIFICATION_POINTS: usize = 2001;
/// Tail mass left out of the pmf tables used for coupling.
const COUPLING_TAIL: f64 = 1e-12;
/// Count laws whose joint support would need more table entries than this are
/// coupled by rejection instead.
const COUPLING_TABLE_LIMIT: f64 = 1e6;
/// Rejection attempts allowed in the continuous maximal coupling.
pub const MAX_REJECTION_ATTEMPTS: u64 = 1_000_000;
/// Counts above this mean are inverted from an approximate quantile start.
const SEQUENTIAL_MEAN_LIMIT: f64 = 600.0;
/// Beyond this standard deviation count inversion bisects on the CDF.
const WALK_SD_LIMIT: f64 = 1e3;
/// Above this mean, count draws use the limit law; the incomplete gamma and
/// beta functions lose accuracy beyond it.
const COUNT_APPROX_LIMIT: f64 = 1e10;

/// `ln k! - [(k + 1/2) ln k - k + ln(2 pi)/2]`.
fn stirling_error(k: f64) -> f64 {
    if k < 16.0 {
        ln_gamma(k + 1.0) - (k + 0.5) * k.ln() + k - 0.5 * std::f64::consts::TAU.ln()
    } else {
        let k2 = k * k;
        (1.0 / 12.0 - (1.0 / 360.0 - (1.0 / 1260.0) / k2) / k2) / k
    }
}

/// `k ln(k / m) + m - k`, computed without cancellation near `k = m`.
fn deviance(k: f64, m: f64) -> f64 {
    let d = k - m;
    if d.abs() < 0.1 * (k + m) {
        k * (d / m).ln_1p() - d
    } else {
        k * (k / m).ln() + m - k
    }
}

/// `ln Gamma(k + r) - ln Gamma(k + 1)` for `k >= 0`, `r >= 1`.
fn ln_gamma_ratio(k: f64, r: f64) -> f64 {
    if k < 16.0 || r - 1.0 > k {
        return ln_gamma(k + r) - ln_gamma(k + 1.0);
    }
    let j = r - 1.0;
    (k + 0.5) * (j / k).ln_1p() + j * (k + j).ln() - j + stirling_error(k + j) - stirling_error(k)
}

fn certification_grid() -> impl Iterator<Item = f64> {
    let (a, b) = (H_MIN.ln(), H_MAX.ln());
    (0..CERTIFICATION_POINTS).map(move |i| (a + (b - a) * i as f64 / (CERTIFICATION_POINTS - 1) as f64).exp())
}

/// Smallest `d` (times the margin) with `-ln overlap(h) <= d * shape(h)` on the
/// certification grid.
fn certify_constant<O: Fn(f64) -> f64, S: Fn(f64) -> f64>(ln_overlap: O, shape: S) -> f64 {
    CERTIFICATION_MARGIN
        * certification_grid()
            .map(|h| -ln_overlap(h) / shape(h))
            .fold(0.0, f64::max)
}

/// Poisson or negative-binomial law on the nonnegative integers.
#[derive(Debug, Clone, Copy)]
enum CountLaw {
    Poisson { mean: f64 },
    NegBin { r: f64, mean: f64 },
}

impl CountLaw {
    fn mean(&self) -> f64 {
        match *self {
            CountLaw::Poisson { mean } | CountLaw::NegBin { mean, .. } => mean,
        }
    }

    fn sd(&self) -> f64 {
        match *self {
            CountLaw::Poisson { mean } => mean.sqrt(),
            CountLaw::NegBin { r, mean } => (mean + mean * mean / r).sqrt(),
        }
    }

    fn mode(&self) -> u64 {
        match *self {
            CountLaw::Poisson { mean } => mean.floor() as u64,
            CountLaw::NegBin { r, mean } => {
                let q = mean / (mean + r);
                if r > 1.0 {
                    ((r - 1.0) * q / (1.0 - q)).floor() as u64
                } else {
                    0
                }
            }
        }
    }

    fn ln_pmf(&self, k: u64) -> f64 {
        let kf = k as f64;
        match *self {
            CountLaw::Poisson { mean } => {
                if mean == 0.0 {
                    return if k == 0 { 0.0 } else { f64::NEG_INFINITY };
                }
                if k == 0 {
                    return -mean;
                }
                // Saddle-point form, free of the cancellation in k ln(mean) - mean - ln k!.
                -stirling_error(kf) - deviance(kf, mean) - 0.5 * (std::f64::consts::TAU * kf).ln()
            }
            CountLaw::NegBin { r, mean } => {
                if mean == 0.0 {
                    return if k == 0 { 0.0 } else { f64::NEG_INFINITY };
                }
                let lq = -(r / mean).ln_1p();
                let l1q = -(mean / r).ln_1p();
                ln_gamma_ratio(kf, r) - ln_gamma(r) + r * l1q + kf * lq
            }
        }
    }

    /// `p(k+1) / p(k)`.
    fn ratio_up(&self, k: u64) -> f64 {
        let kf = k as f64;
        match *self {
            CountLaw::Poisson { mean } => mean / (kf + 1.0),
            CountLaw::NegBin { r, mean } => (kf + r) / (kf + 1.0) * (mean / (mean + r)),
        }
    }

    fn cdf(&self, k: u64) -> f64 {
        let kf = k as f64;
        match *self {
            CountLaw::Poisson { mean } => {
                if mean == 0.0 {
                    1.0
                } else {
                    gamma_ur(kf + 1.0, mean)
                }
            }
            CountLaw::NegBin { r, mean } => {
                if mean == 0.0 {
                    1.0
                } else {
                    beta_reg(r, kf + 1.0, r / (r + mean))
                }
            }
        }
    }

    fn quantile(&self, u: f64) -> f64 {
        let mean = self.mean();
        if mean == 0.0 {
            return 0.0;
        }
        if mean < SEQUENTIAL_MEAN_LIMIT {
            let mut k = 0u64;
            let mut p = self.ln_pmf(0).exp();
            let mut acc = p;
            while u > acc {
                p *= self.ratio_up(k);
                k += 1;
                acc += p;
                if p == 0.0 && (k as f64) > mean {
                    break;
                }
            }
            return k as f64;
        }
        if mean > COUNT_APPROX_LIMIT {
            return self.limit_quantile(u);
        }
        // Start from a normal approximation with a skewness correction, then
        // walk with exact pmf ratios from one CDF evaluation.
        let (sd, skew) = match *self {
            CountLaw::Poisson { mean } => (mean.sqrt(), 1.0 / mean.sqrt()),
            CountLaw::NegBin { r, mean } => {
                let var = mean + mean * mean / r;
                let q = mean / (mean + r);
                (var.sqrt(), (1.0 + q) / (r * q).sqrt())
            }
        };
        let z = normal_quantile(u);
        let approx = mean + sd * (z + skew * (z * z - 1.0) / 6.0) - 0.5;
        let mut k = approx.round().max(0.0) as u64;
        if sd > WALK_SD_LIMIT {
            return self.bisect(u, k, sd) as f64;
        }
        let mut cdf = self.cdf(k);
        let mut p = self.ln_pmf(k).exp();
        if cdf >= u {
            while k > 0 && cdf - p >= u {
                cdf -= p;
                p /= self.ratio_up(k - 1);
                k -= 1;
            }
        } else {
            while cdf < u {
                p *= self.ratio_up(k);
                k += 1;
                cdf += p;
                if p == 0.0 {
                    break;
                }
            }
        }
        k as f64
    }

    /// Quantile of the large-mean limit: a skew-corrected normal for Poisson,
    /// `mean / r` times a `Gamma(r, 1)` variable for the negative binomial.
    fn limit_quantile(&self, u: f64) -> f64 {
        match *self {
            CountLaw::Poisson { mean } => {
                let z = normal_quantile(u);
                (mean + mean.sqrt() * z + (z * z - 1.0) / 6.0).round().max(0.0)
            }
            CountLaw::NegBin { r, mean } => {
                let g = Gamma::new(r, 1.0).expect("positive shape");
                (mean / r * g.inverse_cdf(u)).round().max(0.0)
            }
        }
    }

    /// Smallest `k` with `cdf(k) >= u`, bracketing outward from `start` in
    /// steps of `width`.
    fn bisect(&self, u: f64, start: u64, width: f64) -> u64 {
        let step = width.ceil() as u64;
        let (mut lo, mut hi) = (start, start);
        let mut span = step;
        while lo > 0 && self.cdf(lo) >= u {
            lo = lo.saturating_sub(span);
            span = span.saturating_mul(2);
        }
        if lo == 0 && self.cdf(0) >= u {
            return 0;
        }
        span = step;
        while self.cdf(hi) < u {
            hi = hi.saturating_add(span);
            span = span.saturating_mul(2);
        }
        // Invariant: cdf(lo) < u <= cdf(hi).
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if self.cdf(mid) >= u {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }

    /// Consecutive pmf values covering all but `eps` of the mass, grown
    /// outward from the mode. Returns `(first support point, pmf, outside)`.
    fn table(&self, eps: f64) -> (i64, Vec<f64>, f64) {
        if self.mean() == 0.0 {
            return (0, vec![1.0], 0.0);
        }
        let m = self.mode();
        let pm = self.ln_pmf(m).exp();
        let mut up = vec![pm];
        let mut down: Vec<f64> = Vec::new();
        let mut total = pm;
        let mut hi_k = m;
        let mut lo_k = m;
        let mut next_up = pm * self.ratio_up(m);
        let mut next_down = if m > 0 { pm / self.ratio_up(m - 1) } else { 0.0 };
        while 1.0 - total >= eps && (next_up > 1e-17 || next_down > 1e-17) {
            if next_up >= next_down {
                up.push(next_up);
                total += next_up;
                hi_k += 1;
                next_up *= self.ratio_up(hi_k);
            } else {
                down.push(next_down);
                total += next_down;
                lo_k -= 1;
                next_down = if lo_k > 0 { next_down / self.ratio_up(lo_k - 1) } else { 0.0 };
            }
        }
        down.reverse();
        down.extend(up);
        (lo_k as i64, down, (1.0 - total).max(0.0))
    }
}

/// Finite pmf table: `probs[i]` is the mass of support point `offset + i`.
#[derive(Debug, Clone)]
struct PmfTable {
    offset: i64,
    probs: Vec<f64>,
    outside: f64,
}

impl PmfTable {
    fn get(&self, k: i64) -> f64 {
        if k < self.offset {
            return 0.0;
        }
        self.probs.get((k - self.offset) as usize).copied().unwrap_or(0.0)
    }

    fn end(&self) -> i64 {
        self.offset + self.probs.len() as i64
    }
}

/// Draws an index from unnormalized weights by inversion.
fn pick(weights: &[f64], total: f64, u: f64) -> usize {
    let target = u * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if target < acc {
            return i;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

fn softmax_with_baseline(s: &[f64]) -> Vec<f64> {
    let m = s.iter().copied().fold(0.0, f64::max);
    let mut w: Vec<f64> = std::iter::once(-m).chain(s.iter().map(|v| v - m)).map(f64::exp).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

impl ObservationKernel {
    pub fn family_name(&self) -> &'static str {
        match self {
            ObservationKernel::Poisson => "poisson",
            ObservationKernel::NegBinomial { .. } => "neg_binomial",
            ObservationKernel::BernoulliLogit => "bernoulli_logit",
            ObservationKernel::BernoulliProbit => "bernoulli_probit",
            ObservationKernel::Multinomial { .. } => "multinomial",
            ObservationKernel::GarchGaussian { .. } => "garch_gaussian",
            ObservationKernel::Location { .. } => "location",
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            ObservationKernel::Multinomial { categories } => categories - 1,
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        let bad = |m: String| Err(KernelError::InvalidKernel(m));
        match *self {
            ObservationKernel::NegBinomial { r } if r == 0 => bad("r must be positive".into()),
            ObservationKernel::Multinomial { categories } if categories < 2 => {
                bad("at least two categories required".into())
            }
            ObservationKernel::GarchGaussian { c_minus } if !(c_minus > 0.0 && c_minus.is_finite()) => {
                bad(format!("c_minus must be positive, got {c_minus}"))
            }
            ObservationKernel::Location { density } => match density {
                LocationDensity::Gaussian { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                    bad("sigma must be positive".into())
                }
                LocationDensity::Laplace { b } if !(b > 0.0 && b.is_finite()) => bad("b must be positive".into()),
                LocationDensity::StudentT { nu } if !(nu >= 2.0 && nu.is_finite()) => {
                    bad("StudentT requires nu >= 2".into())
                }
                _ => Ok(()),
            },
            _ => Ok(()),
        }
    }

    /// Lower end of the scalar state space, if any.
    pub fn domain_lower(&self) -> Option<f64> {
        match *self {
            ObservationKernel::Poisson | ObservationKernel::NegBinomial { .. } => Some(0.0),
            ObservationKernel::GarchGaussian { c_minus } => Some(c_minus),
            _ => None,
        }
    }

    pub fn is_discrete(&self) -> bool {
        !matches!(self, ObservationKernel::GarchGaussian { .. } | ObservationKernel::Location { .. })
    }

    /// Whether the observation space is finite (binary or categorical).
    pub fn is_categorical(&self) -> bool {
        matches!(
            self,
            ObservationKernel::BernoulliLogit | ObservationKernel::BernoulliProbit | ObservationKernel::Multinomial { .. }
        )
    }

    pub fn check_state(&self, s: &[f64]) -> Result<(), KernelError> {
        let ok = s.len() == self.state_dim()
            && s.iter().all(|v| v.is_finite())
            && self.domain_lower().is_none_or(|lo| s[0] >= lo);
        if ok {
            Ok(())
        } else {
            Err(KernelError::StateOutOfDomain {
                family: self.family_name(),
                state: format!("{s:?}"),
            })
        }
    }

    /// Family norm of `s - s'`: absolute value, or the sup norm for
    /// multinomial states.
    pub fn distance(&self, s: &[f64], s_prime: &[f64]) -> f64 {
        s.iter().zip(s_prime).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    fn count_law(&self, s: f64) -> Option<CountLaw> {
        match *self {
            ObservationKernel::Poisson => Some(CountLaw::Poisson { mean: s }),
            ObservationKernel::NegBinomial { r } => Some(CountLaw::NegBin { r: r as f64, mean: s }),
            _ => None,
        }
    }

    /// Probability of `y = 1` for binary kernels.
    fn success_probability(&self, s: f64) -> (f64, f64) {
        match self {
            ObservationKernel::BernoulliLogit => (logistic(s), logistic(-s)),
            _ => (normal_cdf(s), normal_sf(s)),
        }
    }

    /// Category probabilities (multinomial) or the pair `(p(0), p(1))` (binary).
    pub fn category_probs(&self, s: &[f64]) -> Option<Vec<f64>> {
        match self {
            ObservationKernel::Multinomial { .. } => Some(softmax_with_baseline(s)),
            ObservationKernel::BernoulliLogit | ObservationKernel::BernoulliProbit => {
                let (p1, p0) = self.success_probability(s[0]);
                Some(vec![p0, p1])
            }
            _ => None,
        }
    }

    fn pmf_table(&self, s: &[f64], eps: f64) -> Option<PmfTable> {
        if let Some(law) = self.count_law(s[0]) {
            let (offset, probs, outside) = law.table(eps);
            return Some(PmfTable { offset, probs, outside });
        }
        self.category_probs(s).map(|probs| PmfTable {
            offset: 0,
            probs,
            outside: 0.0,
        })
    }

    /// Probability mass of `y` (discrete kernels only).
    pub fn pmf(&self, s: &[f64], y: i64) -> Option<f64> {
        if let Some(law) = self.count_law(s[0]) {
            return Some(if y < 0 { 0.0 } else { law.ln_pmf(y as u64).exp() });
        }
        self.category_probs(s).map(|p| if y < 0 { 0.0 } else { p.get(y as usize).copied().unwrap_or(0.0) })
    }

    /// `P(Y <= y)` for scalar kernels.
    pub fn cdf(&self, s: f64, y: f64) -> f64 {
        match *self {
            ObservationKernel::Poisson | ObservationKernel::NegBinomial { .. } => {
                if y < 0.0 {
                    0.0
                } else {
                    self.count_law(s).expect("count kernel").cdf(y.floor() as u64)
                }
            }
            ObservationKernel::BernoulliLogit | ObservationKernel::BernoulliProbit => {
                let (_, p0) = self.success_probability(s);
                if y < 0.0 {
                    0.0
                } else if y < 1.0 {
                    p0
                } else {
                    1.0
                }
            }
            ObservationKernel::Multinomial { .. } => panic!("cdf is defined for scalar kernels only"),
            ObservationKernel::GarchGaussian { .. } => normal_cdf(y / s.sqrt()),
            ObservationKernel::Location { density } => density.cdf(y - s),
        }
    }

    /// Log density of `y` (continuous kernels only).
    pub fn ln_density(&self, s: f64, y: f64) -> f64 {
        match *self {
            ObservationKernel::GarchGaussian { .. } => {
                -0.5 * y * y / s - 0.5 * (2.0 * std::f64::consts::PI * s).ln()
            }
            ObservationKernel::Location { density } => density.ln_pdf(y - s),
            ObservationKernel::Poisson | ObservationKernel::NegBinomial { .. } => {
                let law = self.count_law(s).expect("count kernel");
                if y < 0.0 || y.fract() != 0.0 {
                    f64::NEG_INFINITY
                } else {
                    law.ln_pmf(y as u64)
                }
            }
            _ => panic!("density requested for a categorical kernel"),
        }
    }

    /// Inverse-CDF draw driven by a single uniform; nondecreasing in `u`.
    pub fn sample_with_uniform(&self, s: &[f64], u: f64) -> f64 {
        match *self {
            ObservationKernel::Poisson | ObservationKernel::NegBinomial { .. } => {
                self.count_law(s[0]).expect("count kernel").quantile(u)
            }
            ObservationKernel::BernoulliLogit | ObservationKernel::BernoulliProbit => {
                let (_, p0) = self.success_probability(s[0]);
                if u > p0 {
                    1.0
                } else {
                    0.0
                }
            }
            ObservationKernel::Multinomial { .. } => {
                let p = softmax_with_baseline(s);
                pick(&p, 1.0, u) as f64
            }
            ObservationKernel::GarchGaussian { .. } => s[0].sqrt() * normal_quantile(u),
            ObservationKernel::Location { density } => s[0] + density.quantile(u),
        }
    }

    /// Draws `y ~ p(.|s)`.
    pub fn sample<R: RngCore + ?Sized>(&self, s: &[f64], rng: &mut R) -> Result<f64, KernelError> {
        self.check_state(s)?;
        Ok(self.sample_with_uniform(s, open_uniform(rng)))
    }

    /// `phi` with concrete coefficients.
    pub fn phi(&self) -> PhiSpec {
        match *self {
            ObservationKernel::Poisson
            | ObservationKernel::NegBinomial { .. }
            | ObservationKernel::BernoulliLogit
            | ObservationKernel::Multinomial { .. } => PhiSpec::linear(1.0),
            ObservationKernel::BernoulliProbit => {
                let d = certify_constant(|h| (2.0f64).ln() + ln_normal_sf(h / 2.0), |h| h + h * h);
                PhiSpec { coefficients: vec![d, d] }
            }
            ObservationKernel::GarchGaussian { c_minus } => {
                // The 1/(2c) term keeps the bound valid when c_minus > 1.
                let c = (1.0 / (2.0 * c_minus.powf(1.5))).max(1.0 / (2.0 * c_minus));
                PhiSpec::linear(c)
            }
            ObservationKernel::Location { density } => {
                let ln_overlap = |h: f64| (2.0f64).ln() + density.ln_lower_tail(h / 2.0);
                match density.natural_power() {
                    Some(p) => {
                        let d = certify_constant(ln_overlap, |h| h + h.powi(p));
                        let mut coefficients = vec![0.0; p as usize];
                        coefficients[0] += d;
                        coefficients[p as usize - 1] += d;
                        PhiSpec { coefficients }
                    }
                    None => PhiSpec::linear(certify_constant(ln_overlap, |h| h)),
                }
            }
        }
    }

    /// `1 - exp(-phi(|s - s'|))`.
    pub fn tv_bound(&self, s: &[f64], s_prime: &[f64]) -> Result<f64, KernelError> {
        self.tv_bound_with_phi(s, s_prime, &self.phi())
    }

    pub fn tv_bound_with_phi(&self, s: &[f64], s_prime: &[f64], phi: &PhiSpec) -> Result<f64, KernelError> {
        self.check_state(s)?;
        self.check_state(s_prime)?;
        Ok(-(-phi.eval(self.distance(s, s_prime))).exp_m1())
    }

    /// Exact-oracle total variation within `tol`.
    pub fn tv_exact(&self, s: &[f64], s_prime: &[f64], tol: f64) -> Result<f64, KernelError> {
        self.check_state(s)?;
        self.check_state(s_prime)?;
        if !(tol > 0.0 && tol <= 1e-3) {
            return Err(KernelError::InvalidKernel(format!("tolerance {tol} outside (0, 1e-3]")));
        }
        if s == s_prime {
            return Ok(0.0);
        }
        if self.is_discrete() {
            let p = self.pmf_table(s, tol / 4.0).expect("discrete");
            let q = self.pmf_table(s_prime, tol / 4.0).expect("discrete");
            let lo = p.offset.min(q.offset);
            let hi = p.end().max(q.end());
            let inside: f64 = (lo..hi).map(|k| (p.get(k) - q.get(k)).abs()).sum();
            // The unseen tails contribute between 0 and (out_p + out_q) / 2.
            return Ok((0.5 * inside + 0.25 * (p.outside + q.outside)).min(1.0));
        }
        let (a, b) = (s[0], s_prime[0]);
        let (lo, hi, mut breaks) = match *self {
            ObservationKernel::GarchGaussian { .. } => {
                let z = normal_quantile(1.0 - tol / 32.0);
                let w = z * a.max(b).sqrt();
                let mut br = vec![-w, 0.0, w];
                let cross2 = (b / a).ln() * a * b / (b - a);
                if cross2 > 0.0 {
                    br.extend([-cross2.sqrt(), cross2.sqrt()]);
                }
                (-w, w, br)
            }
            ObservationKernel::Location { density } => {
                let q = density.quantile(1.0 - tol / 32.0);
                let (l, h) = (a.min(b) - q, a.max(b) + q);
                (l, h, vec![l, a, b, 0.5 * (a + b), h])
            }
            _ => unreachable!("continuous kernels only"),
        };
        breaks.retain(|x| *x >= lo && *x <= hi);
        let overlap = integrate(
            |y| self.ln_density(a, y).min(self.ln_density(b, y)).exp(),
            &breaks,
            tol / 2.0,
            4000,
        )
        .ok_or(KernelError::ToleranceUnreachable(tol))?;
        Ok((1.0 - overlap.value).clamp(0.0, 1.0))
    }

    /// Prepares a reusable maximal coupling of `p(.|s)` and `p(.|s')`.
    pub fn coupler(&self, s: &[f64], s_prime: &[f64]) -> Result<PairCoupler, KernelError> {
        self.check_state(s)?;
        self.check_state(s_prime)?;
        if s == s_prime {
            return Ok(PairCoupler::Identical {
                kernel: *self,
                s: s.to_vec(),
            });
        }
        let wide = match (self.count_law(s[0]), self.count_law(s_prime[0])) {
            (Some(a), Some(b)) => (a.mean() - b.mean()).abs() + 20.0 * (a.sd() + b.sd()) > COUPLING_TABLE_LIMIT,
            _ => false,
        };
        if self.is_discrete() && !wide {
            let p = self.pmf_table(s, COUPLING_TAIL).expect("discrete");
            let q = self.pmf_table(s_prime, COUPLING_TAIL).expect("discrete");
            let offset = p.offset.min(q.offset);
            let end = p.end().max(q.end());
            let mut overlap = Vec::with_capacity((end - offset) as usize);
            let mut rest_p = Vec::with_capacity(overlap.capacity());
            let mut rest_q = Vec::with_capacity(overlap.capacity());
            for k in offset..end {
                let (a, b) = (p.get(k), q.get(k));
                let m = a.min(b);
                overlap.push(m);
                rest_p.push(a - m);
                rest_q.push(b - m);
            }
            let overlap_mass: f64 = overlap.iter().sum();
            let rest_p_mass: f64 = rest_p.iter().sum();
            let rest_q_mass: f64 = rest_q.iter().sum();
            // Normalize so the overlap probability and residual laws are
            // consistent on the retained support.
            let total_p = overlap_mass + rest_p_mass;
            let total_q = overlap_mass + rest_q_mass;
            let meet_probability = overlap_mass / total_p.max(total_q);
            return Ok(PairCoupler::Discrete {
                offset,
                overlap,
                overlap_mass,
                rest_p,
                rest_p_mass,
                rest_q,
                rest_q_mass,
                meet_probability,
            });
        }
        Ok(PairCoupler::Rejection {
            kernel: *self,
            s: s[0],
            s_prime: s_prime[0],
        })
    }

    /// One draw from the maximal coupling of `p(.|s)` and `p(.|s')`.
    pub fn maximal_couple<R: RngCore + ?Sized>(
        &self,
        s: &[f64],
        s_prime: &[f64],
        rng: &mut R,
    ) -> Result<CoupleDraw, KernelError> {
        self.coupler(s, s_prime)?.draw(rng)
    }

    /// `E|Y|^order` and the constant `D` of `E|Y|^order <= |s| + D`.
    pub fn conditional_moment(&self, s: &[f64], order: u32) -> Result<ConditionalMoment, KernelError> {
        self.check_state(s)?;
        let unsupported = Err(KernelError::UnsupportedOrder {
            family: self.family_name(),
            order,
        });
        let expected = self.moment_order();
        if order != expected {
            return unsupported;
        }
        let (value, drift_constant) = match *self {
            ObservationKernel::Poisson | ObservationKernel::NegBinomial { .. } => (s[0], 0.0),
            ObservationKernel::BernoulliLogit | ObservationKernel::BernoulliProbit => {
                (self.success_probability(s[0]).0, 1.0)
            }
            ObservationKernel::Multinomial { .. } => (1.0 - softmax_with_baseline(s)[0], 1.0),
            ObservationKernel::GarchGaussian { .. } => (s[0], 0.0),
            ObservationKernel::Location { density } => (density.mean_abs_shifted(s[0]), density.mean_abs()),
        };
        Ok(ConditionalMoment { value, drift_constant })
    }

    /// The moment order `i` used by the linear drift route: 2 for GARCH, else 1.
    pub fn moment_order(&self) -> u32 {
        match self {
            ObservationKernel::GarchGaussian { .. } => 2,
            _ => 1,
        }
    }

    /// Standard certification grid: 40 log-spaced separations in
    /// `[1e-4, 1e2]` times five base states.
    pub fn standard_grid(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        let hs: Vec<f64> = (0..40)
            .map(|i| (H_MIN.ln() + (H_MAX.ln() - H_MIN.ln()) * i as f64 / 39.0).exp())
            .collect();
        let mut pairs = Vec::with_capacity(200);
        match *self {
            ObservationKernel::Multinomial { categories } => {
                let d = categories - 1;
                let bases: [f64; 5] = [0.0, -1.0, 0.5, 2.0, -3.0];
                for (b_idx, base) in bases.iter().enumerate() {
                    let s: Vec<f64> = (0..d).map(|j| base * (1.0 + 0.25 * j as f64)).collect();
                    let dir: Vec<f64> = (0..d)
                        .map(|j| if (j + b_idx) % 2 == 0 { 1.0 } else { -0.5 })
                        .collect();
                    for h in &hs {
                        let sp: Vec<f64> = s.iter().zip(&dir).map(|(a, v)| a + h * v).collect();
                        pairs.push((s.clone(), sp));
                    }
                }
            }
            _ => {
                let bases: Vec<f64> = match *self {
                    ObservationKernel::Poisson | ObservationKernel::NegBinomial { .. } => {
                        vec![0.0, 0.5, 2.0, 10.0, 50.0]
                    }
                    ObservationKernel::BernoulliLogit | ObservationKernel::BernoulliProbit => {
                        vec![-3.0, -1.0, 0.0, 0.7, 2.5]
                    }
                    ObservationKernel::GarchGaussian { c_minus } => {
                        [1.0, 2.0, 5.0, 20.0, 100.0].iter().map(|m| m * c_minus).collect()
                    }
                    _ => vec![-2.0, 0.0, 0.5, 3.0, 10.0],
                };
                for base in &bases {
                    for h in &hs {
                        let (s, sp) = match self {
                            // Centered pairs are the worst case for binary kernels.
                            ObservationKernel::BernoulliLogit | ObservationKernel::BernoulliProbit
                                if *base == 0.0 =>
                            {
                                (-h / 2.0, h / 2.0)
                            }
                            _ => (*base, base + h),
                        };
                        pairs.push((vec![s], vec![sp]));
                    }
                }
            }
        }
        pairs
    }
}

/// A maximal coupling prepared for a fixed pair of states.
#[derive(Debug, Clone)]
pub enum PairCoupler {
    Identical {
        kernel: ObservationKernel,
        s: Vec<f64>,
    },
    Discrete {
        offset: i64,
        overlap: Vec<f64>,
        overlap_mass: f64,
        rest_p: Vec<f64>,
        rest_p_mass: f64,
        rest_q: Vec<f64>,
        rest_q_mass: f64,
        meet_probability: f64,
    },
    /// Rejection sampling against the two densities; used for continuous
    /// kernels and for count laws too spread out to tabulate.
    Rejection {
        kernel: ObservationKernel,
        s: f64,
        s_prime: f64,
    },
}

impl PairCoupler {
    pub fn draw<R: RngCore + ?Sized>(&self, rng: &mut R) -> Result<CoupleDraw, KernelError> {
        match self {
            PairCoupler::Identical { kernel, s } => {
                let y = kernel.sample_with_uniform(s, open_uniform(rng));
                Ok(CoupleDraw { y, y_prime: y, met: true })
            }
            PairCoupler::Discrete {
                offset,
                overlap,
                overlap_mass,
                rest_p,
                rest_p_mass,
                rest_q,
                rest_q_mass,
                meet_probability,
            } => {
                let u = open_uniform(rng);
                if u < *meet_probability || *rest_p_mass <= 0.0 || *rest_q_mass <= 0.0 {
                    let k = pick(overlap, *overlap_mass, open_uniform(rng));
                    let y = (offset + k as i64) as f64;
                    return Ok(CoupleDraw { y, y_prime: y, met: true });
                }
                let y = (offset + pick(rest_p, *rest_p_mass, open_uniform(rng)) as i64) as f64;
                let y_prime = (offset + pick(rest_q, *rest_q_mass, open_uniform(rng)) as i64) as f64;
                Ok(CoupleDraw { y, y_prime, met: false })
            }
            PairCoupler::Rejection { kernel, s, s_prime } => {
                let y = kernel.sample_with_uniform(&[*s], open_uniform(rng));
                let (lp, lq) = (kernel.ln_density(*s, y), kernel.ln_density(*s_prime, y));
                if open_uniform(rng).ln() + lp <= lq {
                    return Ok(CoupleDraw { y, y_prime: y, met: true });
                }
                for _ in 0..MAX_REJECTION_ATTEMPTS {
                    let yp = kernel.sample_with_uniform(&[*s_prime], open_uniform(rng));
                    let (lp, lq) = (kernel.ln_density(*s, yp), kernel.ln_density(*s_prime, yp));
                    if open_uniform(rng).ln() + lq > lp {
                        return Ok(CoupleDraw { y, y_prime: yp, met: false });
                    }
                }
                Err(KernelError::CouplingBudgetExceeded(MAX_REJECTION_ATTEMPTS))
            }
        }
    }

    /// Probability that a draw has `met = true`.
    pub fn meet_probability(&self, tol: f64) -> Result<f64, KernelError> {
        match self {
            PairCoupler::Identical { .. } => Ok(1.0),
            PairCoupler::Discrete { meet_probability, .. } => Ok(*meet_probability),
            PairCoupler::Rejection { kernel, s, s_prime } => Ok(1.0 - kernel.tv_exact(&[*s], &[*s_prime], tol)?),
        }
    }
}

/// Sharper negative-binomial bound `1 - (1 + h/r)^(-r)`.
pub fn neg_binomial_sharp_bound(r: u32, h: f64) -> f64 {
    1.0 - (1.0 + h / r as f64).powf(-(r as f64))
}

/// Rows `s, s_prime, tv_exact, tv_bound` as CSV.
pub fn tv_table_csv(kernel: &ObservationKernel, pairs: &[(Vec<f64>, Vec<f64>)], tol: f64) -> Result<String, KernelError> {
    let fmt_state = |s: &[f64]| s.iter().map(|v| crate::io::fmt_float(*v)).collect::<Vec<_>>().join(";");
    let mut rows = Vec::with_capacity(pairs.len());
    for (s, sp) in pairs {
        rows.push(vec![
            fmt_state(s),
            fmt_state(sp),
            crate::io::fmt_float(kernel.tv_exact(s, sp, tol)?),
            crate::io::fmt_float(kernel.tv_bound(s, sp)?),
        ]);
    }
    Ok(crate::io::csv_string(&["s", "s_prime", "tv_exact", "tv_bound"], rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, StreamFamily};

    fn rng(i: u64) -> rand_chacha::ChaCha8Rng {
        StreamFamily::new(99, domain::GRID).at(i, 0)
    }

    #[test]
    fn poisson_at_zero_is_point_mass() {
        let k = ObservationKernel::Poisson;
        let mut r = rng(0);
        for _ in 0..1000 {
            assert_eq!(k.sample(&[0.0], &mut r).unwrap(), 0.0);
        }
        assert!(matches!(k.sample(&[-1.0], &mut r), Err(KernelError::StateOutOfDomain { .. })));
    }

    #[test]
    fn poisson_quantile_paths_agree() {
        // Sequential and bisection inversion must agree around the switch.
        let law = CountLaw::Poisson { mean: 599.0 };
        let law2 = CountLaw::Poisson { mean: 601.0 };
        for &u in &[1e-9, 0.1, 0.5, 0.9, 1.0 - 1e-9] {
            let k = law.quantile(u) as u64;
            assert!(law.cdf(k) >= u - 1e-12 && (k == 0 || law.cdf(k - 1) < u + 1e-12));
            let k2 = law2.quantile(u) as u64;
            assert!(law2.cdf(k2) >= u && (k2 == 0 || law2.cdf(k2 - 1) < u));
        }
    }

    #[test]
    fn large_mean_inversion_is_exact() {
        for law in [
            CountLaw::Poisson { mean: 1e6 },
            CountLaw::Poisson { mean: 1e8 },
            CountLaw::NegBin { r: 2.0, mean: 1e4 },
            CountLaw::NegBin { r: 50.0, mean: 700.0 },
        ] {
            for &u in &[1e-10, 0.01, 0.5, 0.97, 1.0 - 1e-10] {
                let k = law.quantile(u) as u64;
                let tol = 1e-10;
                assert!(law.cdf(k) >= u - tol, "{law:?} u={u} k={k}");
                assert!(k == 0 || law.cdf(k - 1) < u + tol, "{law:?} u={u} k={k}");
            }
        }
    }

    #[test]
    fn neg_binomial_pmf_matches_closed_form() {
        // NB(r=3, q=0.4): C(k+2, k) 0.6^3 0.4^k.
        let law = CountLaw::NegBin { r: 3.0, mean: 2.0 };
        for k in 0..10u64 {
            let binom = ((k + 1) * (k + 2) / 2) as f64;
            let expected = binom * 0.6f64.powi(3) * 0.4f64.powi(k as i32);
            assert!((law.ln_pmf(k).exp() - expected).abs() < 1e-14);
        }
        assert!((law.cdf(0) - 0.216).abs() < 1e-14);
    }

    #[test]
    fn count_tables_cover_mass() {
        for law in [CountLaw::Poisson { mean: 0.3 }, CountLaw::Poisson { mean: 150.0 }, CountLaw::NegBin { r: 1.0, mean: 40.0 }] {
            let (_, probs, outside) = law.table(1e-12);
            let total: f64 = probs.iter().sum();
            assert!(outside < 1e-12 && (total - 1.0).abs() < 1e-11, "{law:?}: {total}");
        }
    }

    #[test]
    fn phi_values() {
        assert_eq!(ObservationKernel::Poisson.phi(), PhiSpec::linear(1.0));
        assert_eq!(ObservationKernel::GarchGaussian { c_minus: 1.0 }.phi(), PhiSpec::linear(0.5));
        let probit = ObservationKernel::BernoulliProbit.phi();
        assert_eq!(probit.degree(), 2);
        // the small-h slope of -ln(2(1 - Phi(h/2))) is 1/sqrt(2 pi)
        assert!(probit.first() > INV_SQRT_2PI_TEST && probit.first() < 1.06 * INV_SQRT_2PI_TEST);
        let laplace = ObservationKernel::Location {
            density: LocationDensity::Laplace { b: 2.0 },
        };
        assert!((laplace.phi().first() - 2.0 * 1.05 / 8.0).abs() < 1e-12);
    }

    const INV_SQRT_2PI_TEST: f64 = 0.398_942_280_401_432_7;

    #[test]
    fn tv_bound_examples() {
        let p = ObservationKernel::Poisson;
        assert_eq!(p.tv_bound(&[1.0], &[1.0]).unwrap(), 0.0);
        assert!((p.tv_bound(&[0.0], &[2f64.ln()]).unwrap() - 0.5).abs() < 1e-15);
        assert!((neg_binomial_sharp_bound(2, 2.0) - 0.75).abs() < 1e-15);
        let nb = ObservationKernel::NegBinomial { r: 2 };
        assert!((nb.tv_bound(&[1.0], &[3.0]).unwrap() - (1.0 - (-2f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn tv_exact_examples() {
        let p = ObservationKernel::Poisson;
        assert!((p.tv_exact(&[0.0], &[2f64.ln()], 1e-8).unwrap() - 0.5).abs() < 1e-8);
        let g = ObservationKernel::Location {
            density: LocationDensity::Gaussian { sigma: 1.0 },
        };
        let expected = 2.0 * normal_cdf(1.0) - 1.0;
        assert!((g.tv_exact(&[0.0], &[2.0], 1e-8).unwrap() - expected).abs() < 1e-8);
        assert_eq!(g.tv_exact(&[0.3], &[0.3], 1e-8).unwrap(), 0.0);
        assert!(g.tv_exact(&[0.0], &[1.0], 0.1).is_err());
    }

    #[test]
    fn garch_tv_matches_closed_form() {
        // N(0,a) vs N(0,b): densities cross at +-y*, TV = P_a(|Y|<y*) - P_b(|Y|<y*).
        let k = ObservationKernel::GarchGaussian { c_minus: 0.5 };
        for &(a, b) in &[(1.0f64, 2.0f64), (4.0, 400.0), (0.5, 0.5001)] {
            let y = ((b / a).ln() * a * b / (b - a)).sqrt();
            let expected = (2.0 * normal_cdf(y / a.sqrt()) - 1.0) - (2.0 * normal_cdf(y / b.sqrt()) - 1.0);
            let got = k.tv_exact(&[a], &[b], 1e-9).unwrap();
            assert!((got - expected).abs() < 1e-8, "{a},{b}: {got} vs {expected}");
        }
    }

    #[test]
    fn multinomial_normalization() {
        for s in [vec![0.0, 0.0], vec![700.0, -700.0], vec![-3.0, 5.5]] {
            let p = softmax_with_baseline(&s);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conditional_moment_examples() {
        let m = ObservationKernel::Poisson.conditional_moment(&[3.0], 1).unwrap();
        assert_eq!((m.value, m.drift_constant), (3.0, 0.0));
        let m = ObservationKernel::GarchGaussian { c_minus: 1.0 }.conditional_moment(&[5.0], 2).unwrap();
        assert_eq!((m.value, m.drift_constant), (5.0, 0.0));
        let lap = ObservationKernel::Location {
            density: LocationDensity::Laplace { b: 1.0 },
        };
        let m = lap.conditional_moment(&[0.0], 1).unwrap();
        assert!((m.value - 1.0).abs() < 1e-15 && m.drift_constant == 1.0);
        assert!(ObservationKernel::Poisson.conditional_moment(&[1.0], 2).is_err());
    }

    #[test]
    fn location_absolute_moment_by_quadrature() {
        for density in [
            LocationDensity::Gaussian { sigma: 1.5 },
            LocationDensity::Laplace { b: 0.7 },
            LocationDensity::StudentT { nu: 3.0 },
        ] {
            for &s in &[-2.0, 0.0, 0.4, 5.0] {
                let tail = if matches!(density, LocationDensity::StudentT { .. }) { 1e5 } else { 60.0 };
                let q = integrate(|e| (s + e).abs() * density.pdf(e), &[-tail, -s, 0.0, tail], 1e-9, 20000).unwrap();
                let closed = density.mean_abs_shifted(s);
                let slack = if tail > 100.0 { 1e-4 } else { 1e-8 };
                assert!((q.value - closed).abs() < slack, "{density:?} s={s}: {} vs {closed}", q.value);
                assert!(closed <= s.abs() + density.mean_abs() + 1e-12);
            }
        }
    }

    #[test]
    fn identical_states_always_meet() {
        let k = ObservationKernel::NegBinomial { r: 3 };
        let mut r = rng(5);
        for _ in 0..100 {
            let d = k.maximal_couple(&[2.0], &[2.0], &mut r).unwrap();
            assert!(d.met && d.y == d.y_prime);
        }
    }

    #[test]
    fn kernel_json_uses_family_tag() {
        let k = ObservationKernel::Location {
            density: LocationDensity::StudentT { nu: 4.0 },
        };
        let json = serde_json::to_string(&k).unwrap();
        assert_eq!(json, r#"{"family":"location","density":{"density":"student_t","nu":4.0}}"#);
        assert_eq!(serde_json::from_str::<ObservationKernel>(r#"{"family":"poisson"}"#).unwrap(), ObservationKernel::Poisson);
    }

    #[test]
    fn stable_log_pmf_matches_direct_formula() {
        for &(mean, k) in &[(3.5, 0u64), (3.5, 7), (40.0, 25), (600.0, 640), (1e4, 9_870)] {
            let direct = k as f64 * f64::ln(mean) - mean - ln_gamma(k as f64 + 1.0);
            let law = CountLaw::Poisson { mean };
            assert!((law.ln_pmf(k) - direct).abs() < 1e-10 * direct.abs().max(1.0), "{mean} {k}");
            let nb = CountLaw::NegBin { r: 4.0, mean };
            let q = mean / (mean + 4.0);
            let direct = ln_gamma(k as f64 + 4.0) - ln_gamma(4.0) - ln_gamma(k as f64 + 1.0)
                + 4.0 * (1.0 - q).ln()
                + k as f64 * q.ln();
            assert!((nb.ln_pmf(k) - direct).abs() < 1e-10 * direct.abs().max(1.0), "{mean} {k}");
        }
    }

    #[test]
    fn huge_means_sample_quickly() {
        for kernel in [ObservationKernel::Poisson, ObservationKernel::NegBinomial { r: 3 }] {
            let mut m = 1.0f64;
            while m < 1e200 {
                let y = kernel.sample_with_uniform(&[m], 0.3);
                assert!(y.is_finite() && y >= 0.0);
                m = 3.0 * m + 1.0;
            }
        }
        // Poisson mass below the mean at u = 0.3 lies about half a standard deviation out.
        let m = 3e14;
        let z = (ObservationKernel::Poisson.sample_with_uniform(&[m], 0.3) - m) / m.sqrt();
        assert!((z + 0.5244).abs() < 1e-3, "{z}");
    }

    #[test]
    fn far_apart_counts_couple_without_tables() {
        let c = ObservationKernel::Poisson.coupler(&[0.5], &[1e9]).unwrap();
        assert!(matches!(c, PairCoupler::Rejection { .. }));
        let d = c.draw(&mut rng(3)).unwrap();
        assert!(!d.met);
    }
}
