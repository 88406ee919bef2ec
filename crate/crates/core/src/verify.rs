//! Certification of the contraction (A1), drift (A2) and total-variation (A3)
//! conditions for a model, with three-way Monte Carlo verdicts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covariates::{log_moment_of, stationary_sample, CovariateError, LogKind, MomentEstimate, SignVerdict};
use crate::drift::{drift_certificate, max_abs_at_zero, DriftCertificate, DriftError, DriftRoute};
use crate::kernels::{KernelError, ObservationKernel, PhiSpec};
use crate::links::LinkForm;
use crate::model::{ModelSpec, NormTag};
use crate::rng::{domain, open_uniform, split_seed, StreamFamily};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const MIN_MC_SAMPLES: usize = 10_000;
pub const MIN_GRID_SIZE: usize = 50;
/// Accuracy requested from the exact total-variation oracle. Kept fixed so
/// the verdict is monotone in the user tolerance.
pub const ORACLE_TOLERANCE: f64 = 1e-8;
const LIPSCHITZ_TRIPLES: usize = 1000;
const LIPSCHITZ_SLACK: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Covariate(#[from] CovariateError),
    #[error("unsupported combination: {0}")]
    UnsupportedCombination(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

impl Verdict {
    /// Process exit status for this verdict.
    pub fn exit_code(self) -> i32 {
        match self {
            Verdict::Pass => 0,
            Verdict::Fail => 2,
            Verdict::Inconclusive => 3,
        }
    }

    fn from_sign(v: SignVerdict) -> Self {
        match v {
            SignVerdict::Negative => Verdict::Pass,
            SignVerdict::Nonnegative => Verdict::Fail,
            SignVerdict::Inconclusive => Verdict::Inconclusive,
        }
    }

    /// Fail dominates, then inconclusive.
    pub fn combine(verdicts: &[Verdict]) -> Verdict {
        if verdicts.contains(&Verdict::Fail) {
            Verdict::Fail
        } else if verdicts.contains(&Verdict::Inconclusive) {
            Verdict::Inconclusive
        } else {
            Verdict::Pass
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzCheck {
    pub triples: usize,
    /// Largest `|f(s,y,x) - f(s',y,x)| - kappa(x)|s - s'|` seen.
    pub max_excess: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct A1Report {
    pub kappa_map: String,
    pub log_moment: MomentEstimate,
    pub lipschitz: LipschitzCheck,
    pub verdict: Verdict,
    pub mc_n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedMoment {
    pub name: String,
    pub estimate: MomentEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct A2Report {
    pub route: Option<DriftRoute>,
    pub order: u32,
    pub lyapunov: String,
    pub kappa_envelope: Option<String>,
    pub kappa_tilde_envelope: Option<String>,
    pub delta_tilde_envelope: Option<String>,
    /// `D` in `E|Y|^i <= |s| + D`.
    pub drift_constant: Option<f64>,
    /// `E log gamma(X_0)` for the certificate's `gamma`.
    pub gamma_log_moment: Option<MomentEstimate>,
    /// `E log+ delta_tilde(X_0)`, or `E log+ max_y |f(0, y, X_0)|` on the categorical route.
    pub delta_log_plus_moment: Option<MomentEstimate>,
    /// Conditions that decide the verdict when they differ from the `gamma` moment.
    pub conditions: Vec<NamedMoment>,
    pub structural_error: Option<String>,
    pub verdict: Verdict,
    pub mc_n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct A3Report {
    pub family: String,
    pub phi_coefficients: Vec<f64>,
    pub norm: NormTag,
    pub grid_pairs: usize,
    pub h_range: (f64, f64),
    pub tol: f64,
    pub oracle_tol: f64,
    /// Largest `tv_exact - tv_bound` over the grid.
    pub max_violation: f64,
    pub worst_pair: Option<(Vec<f64>, Vec<f64>)>,
    pub verdict: Verdict,
}

fn random_state(kernel: &ObservationKernel, u: &mut impl FnMut() -> f64) -> Vec<f64> {
    let d = kernel.state_dim();
    match kernel.domain_lower() {
        Some(lo) => (0..d).map(|_| lo + 20.0 * u()).collect(),
        None => (0..d).map(|_| -10.0 + 20.0 * u()).collect(),
    }
}

fn lipschitz_check(model: &ModelSpec, seed: u64) -> LipschitzCheck {
    let kappa = model.link.contraction_map();
    let xs = stationary_sample(&model.covariates, LIPSCHITZ_TRIPLES, split_seed(seed, 1));
    let fam = StreamFamily::new(seed, domain::GRID);
    let d = model.state_dim();
    let (mut out, mut out_p) = (vec![0.0; d], vec![0.0; d]);
    let mut max_excess = f64::NEG_INFINITY;
    for (i, x) in xs.iter().enumerate() {
        let mut rng = fam.at(i as u64, 0);
        let mut u = || open_uniform(&mut rng);
        let s = random_state(&model.kernel, &mut u);
        let sp = random_state(&model.kernel, &mut u);
        let y = model.kernel.sample_with_uniform(&s, u());
        model.link.apply_into(&s, y, x, &mut out);
        model.link.apply_into(&sp, y, x, &mut out_p);
        let lhs = model.kernel.distance(&out, &out_p);
        let rhs = kappa.eval(x) * model.kernel.distance(&s, &sp);
        max_excess = max_excess.max(lhs - rhs - LIPSCHITZ_SLACK * rhs.max(1.0));
    }
    LipschitzCheck {
        triples: xs.len(),
        max_excess,
        passed: max_excess <= 0.0,
    }
}

fn require_samples(mc_n: usize) -> Result<(), VerifyError> {
    if mc_n < MIN_MC_SAMPLES {
        return Err(VerifyError::InvalidArgument(format!(
            "at least {MIN_MC_SAMPLES} Monte Carlo samples are required, got {mc_n}"
        )));
    }
    Ok(())
}

/// Sign of `E log kappa(X_0)` and the Lipschitz inequality on random triples.
pub fn check_a1(model: &ModelSpec, mc_n: usize, seed: u64) -> Result<A1Report, VerifyError> {
    require_samples(mc_n)?;
    let kappa = model.link.contraction_map();
    let log_moment = log_moment_of(|x| kappa.eval(x), &model.covariates, mc_n, seed, LogKind::Log)?;
    let lipschitz = lipschitz_check(model, seed);
    let verdict = if lipschitz.passed {
        Verdict::from_sign(log_moment.verdict)
    } else {
        Verdict::Fail
    };
    Ok(A1Report {
        kappa_map: kappa.describe(),
        log_moment,
        lipschitz,
        verdict,
        mc_n,
        seed,
    })
}

/// Drift condition through the route the kernel and link admit.
pub fn check_a2(model: &ModelSpec, mc_n: usize, seed: u64) -> Result<A2Report, VerifyError> {
    require_samples(mc_n)?;
    let kernel = &model.kernel;
    let link = &model.link;
    if !kernel.is_categorical() && link.order() != kernel.moment_order() {
        return Err(VerifyError::UnsupportedCombination(format!(
            "link order {} but the {} kernel supports order {}",
            link.order(),
            kernel.family_name(),
            kernel.moment_order()
        )));
    }
    let mut report = A2Report {
        route: None,
        order: link.order(),
        lyapunov: "V(s) = 1 + |s|".into(),
        kappa_envelope: None,
        kappa_tilde_envelope: None,
        delta_tilde_envelope: None,
        drift_constant: None,
        gamma_log_moment: None,
        delta_log_plus_moment: None,
        conditions: Vec::new(),
        structural_error: None,
        verdict: Verdict::Fail,
        mc_n,
        seed,
    };
    if let Err(e) = model.validate() {
        report.structural_error = Some(e.to_string());
    }
    let cert: DriftCertificate = match drift_certificate(model) {
        Ok(c) => c,
        Err(DriftError::Link(e)) => {
            report.structural_error.get_or_insert(e.to_string());
            return Ok(report);
        }
        Err(DriftError::Kernel(e)) => return Err(e.into()),
    };
    report.route = Some(cert.route);
    report.order = cert.order;
    report.drift_constant = cert.drift_constant();
    if let Some(env) = &cert.envelope {
        report.kappa_envelope = Some(env.kappa_map.describe());
        report.kappa_tilde_envelope = Some(env.kappa_tilde_map.describe());
        report.delta_tilde_envelope = Some(env.delta_map.describe());
    }
    let gamma = log_moment_of(|x| cert.gamma_at(x), &model.covariates, mc_n, seed, LogKind::Log)?;
    let delta_plus = match (&cert.envelope, cert.route) {
        (_, DriftRoute::CategoricalContraction) => {
            let categories = kernel.state_dim() + 1;
            log_moment_of(
                |x| max_abs_at_zero(link, categories, x),
                &model.covariates,
                mc_n,
                seed,
                LogKind::LogPlus,
            )?
        }
        (Some(env), _) => log_moment_of(|x| env.delta_map.eval(x), &model.covariates, mc_n, seed, LogKind::LogPlus)?,
        (None, _) => unreachable!("scalar routes carry an envelope"),
    };
    let verdict = if cert.route == DriftRoute::ThresholdBoundedInterval {
        // Bounded inner interval: the contraction moment together with the
        // outer regime's combined coefficient.
        let LinkForm::Threshold { regime_out, .. } = &link.form else {
            unreachable!("bounded-interval route comes from a threshold link")
        };
        let kappa = link.contraction_map();
        let k = log_moment_of(|x| kappa.eval(x), &model.covariates, mc_n, seed, LogKind::Log)?;
        let outer = log_moment_of(
            |x| regime_out.kappa.eval(x).abs() + regime_out.kappa_tilde.eval(x).abs(),
            &model.covariates,
            mc_n,
            seed,
            LogKind::Log,
        )?;
        let v = Verdict::combine(&[Verdict::from_sign(k.verdict), Verdict::from_sign(outer.verdict)]);
        report.conditions = vec![
            NamedMoment {
                name: "E log kappa".into(),
                estimate: k,
            },
            NamedMoment {
                name: "E log(|kappa_out| + |kappa_tilde_out|)".into(),
                estimate: outer,
            },
        ];
        v
    } else {
        Verdict::from_sign(gamma.verdict)
    };
    report.gamma_log_moment = Some(gamma);
    report.delta_log_plus_moment = Some(delta_plus);
    report.verdict = if report.structural_error.is_some() { Verdict::Fail } else { verdict };
    Ok(report)
}

/// Total-variation bound with the kernel's own `phi`.
pub fn check_a3(model: &ModelSpec, grid_size: usize, tol: f64) -> Result<A3Report, VerifyError> {
    check_a3_with_phi(&model.kernel, &model.kernel.phi(), grid_size, tol)
}

/// Certifies `tv_exact <= 1 - exp(-phi(h)) + tol` on the standard grid.
pub fn check_a3_with_phi(kernel: &ObservationKernel, phi: &PhiSpec, grid_size: usize, tol: f64) -> Result<A3Report, VerifyError> {
    if grid_size < MIN_GRID_SIZE {
        return Err(VerifyError::InvalidArgument(format!(
            "grid size must be at least {MIN_GRID_SIZE}, got {grid_size}"
        )));
    }
    if !(tol >= 0.0) {
        return Err(VerifyError::InvalidArgument(format!("tolerance must be nonnegative, got {tol}")));
    }
    let full = kernel.standard_grid();
    let take = grid_size.min(full.len());
    let pairs: Vec<_> = (0..take).map(|i| full[i * full.len() / take].clone()).collect();
    let mut max_violation = f64::NEG_INFINITY;
    let mut worst_pair = None;
    let (mut h_lo, mut h_hi) = (f64::INFINITY, 0.0f64);
    for (s, sp) in &pairs {
        let exact = kernel.tv_exact(s, sp, ORACLE_TOLERANCE)?;
        let bound = kernel.tv_bound_with_phi(s, sp, phi)?;
        let h = kernel.distance(s, sp);
        h_lo = h_lo.min(h);
        h_hi = h_hi.max(h);
        if exact - bound > max_violation {
            max_violation = exact - bound;
            worst_pair = Some((s.clone(), sp.clone()));
        }
    }
    Ok(A3Report {
        family: kernel.family_name().into(),
        phi_coefficients: phi.coefficients.clone(),
        norm: if kernel.state_dim() > 1 { NormTag::Inf } else { NormTag::Abs },
        grid_pairs: pairs.len(),
        h_range: (h_lo, h_hi),
        tol,
        oracle_tol: ORACLE_TOLERANCE,
        max_violation,
        worst_pair,
        verdict: if max_violation <= tol { Verdict::Pass } else { Verdict::Fail },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    #[serde(default = "default_mc_n")]
    pub mc_n: usize,
    #[serde(default = "default_grid_size")]
    pub grid_size: usize,
    #[serde(default = "default_tv_tol")]
    pub tv_tol: f64,
}

fn default_mc_n() -> usize {
    100_000
}

fn default_grid_size() -> usize {
    200
}

fn default_tv_tol() -> f64 {
    1e-6
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            mc_n: default_mc_n(),
            grid_size: default_grid_size(),
            tv_tol: default_tv_tol(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub schema_version: u32,
    pub seed: u64,
    pub config: VerifyConfig,
    pub a1: A1Report,
    pub a2: A2Report,
    pub a3: A3Report,
    pub overall: Verdict,
}

impl VerificationReport {
    pub fn to_json(&self) -> String {
        // Going through `Value` sorts object keys.
        let value = serde_json::to_value(self).expect("report serializes");
        serde_json::to_string_pretty(&value).expect("value serializes")
    }

    pub fn to_text(&self) -> String {
        let mut lines = vec![format!("overall: {:?}", self.overall)];
        let m = &self.a1.log_moment;
        lines.push(format!(
            "A1 {:?}: kappa = {}, E log kappa = {:.6} +/- {:.2e}, Lipschitz max excess {:.3e} over {} triples",
            self.a1.verdict, self.a1.kappa_map, m.mean, m.std_error, self.a1.lipschitz.max_excess, self.a1.lipschitz.triples
        ));
        let route = self.a2.route.map_or("none".to_string(), |r| format!("{r:?}"));
        let gamma = self
            .a2
            .gamma_log_moment
            .as_ref()
            .map_or("n/a".to_string(), |g| format!("{:.6} +/- {:.2e}", g.mean, g.std_error));
        lines.push(format!(
            "A2 {:?}: route {}, E log gamma = {}, D = {}{}",
            self.a2.verdict,
            route,
            gamma,
            self.a2.drift_constant.map_or("n/a".to_string(), |d| format!("{d}")),
            self.a2
                .structural_error
                .as_ref()
                .map_or(String::new(), |e| format!(", structural error: {e}"))
        ));
        for c in &self.a2.conditions {
            lines.push(format!("   {} = {:.6} +/- {:.2e}", c.name, c.estimate.mean, c.estimate.std_error));
        }
        lines.push(format!(
            "A3 {:?}: {} phi {:?}, max violation {:.3e} over {} pairs (tol {:e})",
            self.a3.verdict, self.a3.family, self.a3.phi_coefficients, self.a3.max_violation, self.a3.grid_pairs, self.a3.tol
        ));
        lines.join("\n") + "\n"
    }
}

/// Runs the three checks; all Monte Carlo estimates share `seed`.
pub fn full_report(model: &ModelSpec, config: &VerifyConfig, seed: u64) -> Result<VerificationReport, VerifyError> {
    let a1 = check_a1(model, config.mc_n, seed)?;
    let a2 = check_a2(model, config.mc_n, seed)?;
    let a3 = check_a3(model, config.grid_size, config.tv_tol)?;
    let overall = Verdict::combine(&[a1.verdict, a2.verdict, a3.verdict]);
    Ok(VerificationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        seed,
        config: config.clone(),
        a1,
        a2,
        a3,
        overall,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariates::{CoefficientMap, CovariateProcessSpec, Marginal};
    use crate::kernels::ObservationKernel;
    use crate::links::{IntervalMap, LinkSpec, Regime};

    fn constant_env() -> CovariateProcessSpec {
        CovariateProcessSpec::Constant { value: vec![1.0] }
    }

    fn normal_env() -> CovariateProcessSpec {
        CovariateProcessSpec::Iid {
            marginal: Marginal::Gaussian { mean: 0.0, sd: 1.0 },
            dim: 1,
        }
    }

    fn c(v: f64) -> CoefficientMap {
        CoefficientMap::constant(v)
    }

    #[test]
    fn a1_linear_and_threshold() {
        let m = ModelSpec::new(ObservationKernel::Poisson, LinkSpec::linear_constant(0.4, 0.3, 1.0, 1), constant_env());
        let r = check_a1(&m, 10_000, 1).unwrap();
        assert_eq!(r.verdict, Verdict::Pass);
        assert!((r.log_moment.mean - 0.4f64.ln()).abs() < 1e-12);

        let thr = LinkSpec::new(LinkForm::Threshold {
            regime_in: Regime { kappa: c(0.2), kappa_tilde: c(0.1), intercept: c(1.0) },
            regime_out: Regime { kappa: c(0.5), kappa_tilde: c(0.1), intercept: c(1.0) },
            interval: IntervalMap::FixedInterval { lo: Some(0.0), hi: Some(3.0) },
            order: 1,
        });
        let m = ModelSpec::new(ObservationKernel::Poisson, thr, constant_env());
        let r = check_a1(&m, 10_000, 1).unwrap();
        assert_eq!(r.verdict, Verdict::Pass);
        assert!((r.log_moment.mean - 0.5f64.ln()).abs() < 1e-12);
        assert!(r.lipschitz.passed);
    }

    #[test]
    fn a1_boundary_is_inconclusive() {
        let link = LinkSpec::new(LinkForm::Linear {
            kappa: CoefficientMap::ExpAffine { c0: 0.0, c1: 1.0 },
            kappa_tilde: c(0.0),
            delta_tilde: c(0.0),
            order: 1,
        });
        let m = ModelSpec::new(ObservationKernel::Location { density: crate::kernels::LocationDensity::Gaussian { sigma: 1.0 } }, link, normal_env());
        assert_eq!(check_a1(&m, 100_000, 4).unwrap().verdict, Verdict::Inconclusive);
    }

    #[test]
    fn a2_poisson_linear() {
        let m = ModelSpec::new(ObservationKernel::Poisson, LinkSpec::linear_constant(0.4, 0.3, 1.0, 1), constant_env());
        let r = check_a2(&m, 10_000, 1).unwrap();
        assert_eq!(r.verdict, Verdict::Pass);
        assert_eq!(r.route, Some(DriftRoute::LinearEnvelope));
        assert_eq!(r.drift_constant, Some(0.0));
        assert!((r.gamma_log_moment.unwrap().mean - 0.7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn a2_order_mismatch_is_an_error() {
        let m = ModelSpec::new(ObservationKernel::Poisson, LinkSpec::linear_constant(0.4, 0.3, 1.0, 2), constant_env());
        assert!(matches!(check_a2(&m, 10_000, 1), Err(VerifyError::UnsupportedCombination(_))));
    }

    #[test]
    fn a3_corrupted_phi_fails() {
        let k = ObservationKernel::BernoulliProbit;
        let ok = check_a3_with_phi(&k, &k.phi(), 200, 1e-6).unwrap();
        assert_eq!(ok.verdict, Verdict::Pass);
        let bad = check_a3_with_phi(&k, &k.phi().scaled(0.5), 200, 1e-6).unwrap();
        assert_eq!(bad.verdict, Verdict::Fail);
        assert!(bad.max_violation > 0.0);
    }

    #[test]
    fn explosive_contraction_fails_overall() {
        let m = ModelSpec::new(ObservationKernel::Poisson, LinkSpec::linear_constant(1.1, 0.0, 1.0, 1), constant_env());
        let cfg = VerifyConfig { mc_n: 10_000, ..VerifyConfig::default() };
        let r = full_report(&m, &cfg, 1).unwrap();
        assert_eq!(r.a1.verdict, Verdict::Fail);
        assert_eq!(r.overall, Verdict::Fail);
        assert!(r.to_json().contains("\"schema_version\": 1"));
    }
}
