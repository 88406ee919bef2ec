//! Backward iterations `delta_s P_{X_{-n}} ... P_{X_{-1}}` on a fixed
//! environment path.
//!
//! Replica `j` draws its observation at time `t` from stream `(seed, j, t)`
//! whatever the start state or the number of steps, so measures built from
//! different starts or horizons are coupled through common random numbers.
//! Scalar chains are tracked as a reference chain plus an exact offset: once
//! two chains share their observations the offset contracts by the link slope
//! without being absorbed into the rounding of the reference value.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::wasserstein::wasserstein1;
use super::{advance, column_names, require_cover, EngineError};
use crate::covariates::{generate_path, CovariatePath};
use crate::io::{csv_string, fmt_float};
use crate::links::LinkError;
use crate::model::ModelSpec;
use crate::numeric::two_sum;
use crate::rng::{domain, open_uniform, StreamFamily};

/// Chains leaving `[-DIVERGENCE_CEILING, DIVERGENCE_CEILING]` are declared divergent.
pub const DIVERGENCE_CEILING: f64 = 1e8;
pub const INITIAL_BACKWARD_STEPS: usize = 25;
const MIN_REPLICAS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    pub dim: usize,
    /// Uniformly weighted points, flattened.
    pub points: Vec<f64>,
    /// Low-order parts of scalar points; the represented value is `points[i] + low[i]`.
    pub low: Option<Vec<f64>>,
    pub n_steps: usize,
    pub start: Vec<f64>,
    /// Time at which the measure lives.
    pub t_end: i64,
    pub seed: u64,
    pub replicas: usize,
}

impl EmpiricalMeasure {
    pub fn from_points(dim: usize, points: Vec<f64>) -> Self {
        assert!(dim > 0 && points.len() % dim == 0, "points do not match the dimension");
        let replicas = points.len() / dim;
        Self {
            dim,
            points,
            low: None,
            n_steps: 0,
            start: Vec::new(),
            t_end: 0,
            seed: 0,
            replicas,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    /// Scalar points as `(high, low)` pairs.
    pub fn pairs(&self) -> Vec<(f64, f64)> {
        match &self.low {
            Some(low) => self.points.iter().copied().zip(low.iter().copied()).collect(),
            None => self.points.iter().map(|p| (*p, 0.0)).collect(),
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.len().max(1) as f64;
        (0..self.dim)
            .map(|k| (0..self.len()).map(|i| self.points[i * self.dim + k]).sum::<f64>() / n)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut header = vec!["replica".to_string()];
        header.extend(column_names("lambda", self.dim));
        let rows = (0..self.len()).map(|i| {
            let mut row = vec![i.to_string()];
            match &self.low {
                Some(low) => row.push(fmt_float(self.points[i] + low[i])),
                None => row.extend(self.point(i).iter().map(|v| fmt_float(*v))),
            }
            row
        });
        csv_string(&header, rows)
    }
}

fn check_ceiling(v: f64, t: i64) -> Result<(), EngineError> {
    if v.abs() > DIVERGENCE_CEILING {
        Err(EngineError::Diverged {
            t,
            ceiling: DIVERGENCE_CEILING,
        })
    } else {
        Ok(())
    }
}

fn check_domain(model: &ModelSpec, v: f64) -> Result<(), EngineError> {
    if !v.is_finite() || model.kernel.domain_lower().is_some_and(|lo| v < lo) {
        Err(LinkError::DomainViolation { value: v }.into())
    } else {
        Ok(())
    }
}

/// One replica from every start over `[t_end - n, t_end - 1]`; returns the
/// `(high, low)` value per start.
fn scalar_replica(
    model: &ModelSpec,
    starts: &[f64],
    n: usize,
    t_end: i64,
    path: &CovariatePath,
    fam: &StreamFamily,
    replica: u64,
) -> Result<Vec<(f64, f64)>, EngineError> {
    let link = &model.link;
    let floor = link.floor;
    let mut reference = model.default_start()[0];
    let mut offsets: Vec<f64> = starts.iter().map(|s| s - reference).collect();
    for t in t_end - n as i64..t_end {
        let u = open_uniform(&mut fam.at(replica, t));
        let x = path.at(t);
        let y_ref = model.kernel.sample_with_uniform(&[reference], u);
        let (slope, offset) = link.affine_parts(y_ref, x);
        let raw_ref = slope * reference + offset;
        let next_ref = link.clamp(raw_ref);
        check_domain(model, next_ref)?;
        check_ceiling(next_ref, t)?;
        for d in offsets.iter_mut() {
            if *d == 0.0 {
                continue;
            }
            let v = reference + *d;
            let y = model.kernel.sample_with_uniform(&[v], u);
            let next_d = if y == y_ref {
                let scaled = slope * *d;
                match floor {
                    Some(f) if raw_ref < f || raw_ref + scaled < f => link.clamp(raw_ref + scaled) - next_ref,
                    _ => scaled,
                }
            } else {
                link.apply_scalar(v, y, x) - next_ref
            };
            let next_v = next_ref + next_d;
            check_domain(model, next_v)?;
            check_ceiling(next_v, t)?;
            *d = next_d;
        }
        reference = next_ref;
    }
    Ok(offsets.iter().map(|d| two_sum(reference, *d)).collect())
}

fn vector_replica(
    model: &ModelSpec,
    starts: &[Vec<f64>],
    n: usize,
    t_end: i64,
    path: &CovariatePath,
    fam: &StreamFamily,
    replica: u64,
) -> Result<Vec<Vec<f64>>, EngineError> {
    let mut states: Vec<Vec<f64>> = starts.to_vec();
    let mut next = vec![0.0; model.state_dim()];
    for t in t_end - n as i64..t_end {
        let u = open_uniform(&mut fam.at(replica, t));
        let x = path.at(t);
        for s in states.iter_mut() {
            let y = model.kernel.sample_with_uniform(s, u);
            advance(model, s, y, x, &mut next)?;
            for &v in next.iter() {
                check_ceiling(v, t)?;
            }
            s.copy_from_slice(&next);
        }
    }
    Ok(states)
}

/// Backward measures from several starts, all living at time `t_end`; the
/// path must cover `[t_end - n, t_end - 1]`.
pub fn backward_measures_to(
    model: &ModelSpec,
    starts: &[Vec<f64>],
    n: usize,
    t_end: i64,
    path: &CovariatePath,
    replicas: usize,
    seed: u64,
) -> Result<Vec<EmpiricalMeasure>, EngineError> {
    if n == 0 {
        return Err(EngineError::InvalidArgument("at least one backward step is required".into()));
    }
    if replicas < MIN_REPLICAS {
        return Err(EngineError::InvalidArgument(format!(
            "at least {MIN_REPLICAS} replicas are required, got {replicas}"
        )));
    }
    for s in starts {
        model.kernel.check_state(s)?;
    }
    require_cover(path, t_end - n as i64, t_end - 1)?;
    let fam = StreamFamily::new(seed, domain::OBSERVATION);
    let d = model.state_dim();
    let make = |i: usize| EmpiricalMeasure {
        dim: d,
        points: Vec::with_capacity(replicas * d),
        low: None,
        n_steps: n,
        start: starts[i].clone(),
        t_end,
        seed,
        replicas,
    };
    let mut out: Vec<EmpiricalMeasure> = (0..starts.len()).map(make).collect();
    if d == 1 && !model.kernel.is_categorical() {
        let scalar_starts: Vec<f64> = starts.iter().map(|s| s[0]).collect();
        let rows: Vec<Vec<(f64, f64)>> = (0..replicas)
            .into_par_iter()
            .map(|j| scalar_replica(model, &scalar_starts, n, t_end, path, &fam, j as u64))
            .collect::<Result<_, _>>()?;
        for m in out.iter_mut() {
            m.low = Some(Vec::with_capacity(replicas));
        }
        for row in rows {
            for (m, (hi, lo)) in out.iter_mut().zip(row) {
                m.points.push(hi);
                m.low.as_mut().expect("allocated above").push(lo);
            }
        }
    } else {
        let rows: Vec<Vec<Vec<f64>>> = (0..replicas)
            .into_par_iter()
            .map(|j| vector_replica(model, starts, n, t_end, path, &fam, j as u64))
            .collect::<Result<_, _>>()?;
        for row in rows {
            for (m, s) in out.iter_mut().zip(row) {
                m.points.extend_from_slice(&s);
            }
        }
    }
    Ok(out)
}

/// Backward measures at time 0 from several starts.
pub fn backward_measures(
    model: &ModelSpec,
    starts: &[Vec<f64>],
    n: usize,
    path: &CovariatePath,
    replicas: usize,
    seed: u64,
) -> Result<Vec<EmpiricalMeasure>, EngineError> {
    backward_measures_to(model, starts, n, 0, path, replicas, seed)
}

/// Empirical law of `lambda_0` after `n` steps from `lambda_{-n} = s0`.
pub fn backward_measure(
    model: &ModelSpec,
    s0: &[f64],
    n: usize,
    path: &CovariatePath,
    replicas: usize,
    seed: u64,
) -> Result<EmpiricalMeasure, EngineError> {
    let mut v = backward_measures(model, &[s0.to_vec()], n, path, replicas, seed)?;
    Ok(v.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    /// The largest allowed horizon was reached with the gap still above tolerance.
    MaxStepsReached,
    /// A chain left the state space or the divergence ceiling.
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryOutcome {
    /// Last measure computed; absent when the first horizon already diverged.
    pub measure: Option<EmpiricalMeasure>,
    pub n: usize,
    /// `W1(mu_{n/2}, mu_n)` at the final doubling.
    pub achieved_gap: Option<f64>,
    pub converged: bool,
    pub reason: StopReason,
    /// `(n, W1(mu_n, mu_2n))` per doubling.
    pub history: Vec<(usize, f64)>,
    pub tol: f64,
    pub diagnostic: Option<String>,
}

fn is_divergence(e: &EngineError) -> bool {
    matches!(e, EngineError::Diverged { .. } | EngineError::Link(LinkError::DomainViolation { .. }))
}

/// Approximates the law at time 0 by doubling the backward horizon from
/// `INITIAL_BACKWARD_STEPS` until consecutive measures are within `tol`.
/// Divergence and exhaustion of `max_n` are reported in the outcome, not as errors.
pub fn stationary_sampler(
    model: &ModelSpec,
    tol: f64,
    max_n: usize,
    replicas: usize,
    seed: u64,
) -> Result<StationaryOutcome, EngineError> {
    model.validate()?;
    if !(tol > 0.0) {
        return Err(EngineError::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    let ratio = max_n / INITIAL_BACKWARD_STEPS;
    if max_n % INITIAL_BACKWARD_STEPS != 0 || !ratio.is_power_of_two() {
        return Err(EngineError::InvalidArgument(format!(
            "max_n must be {INITIAL_BACKWARD_STEPS} times a power of two, got {max_n}"
        )));
    }
    let path = generate_path(&model.covariates, -(max_n as i64), -1, seed)?;
    let start = model.default_start();
    let mut outcome = StationaryOutcome {
        measure: None,
        n: INITIAL_BACKWARD_STEPS,
        achieved_gap: None,
        converged: false,
        reason: StopReason::MaxStepsReached,
        history: Vec::new(),
        tol,
        diagnostic: None,
    };
    let diverged = |mut o: StationaryOutcome, e: EngineError| {
        o.reason = StopReason::Diverged;
        o.diagnostic = Some(e.to_string());
        o
    };
    let mut n = INITIAL_BACKWARD_STEPS;
    let mut current = match backward_measure(model, &start, n, &path, replicas, seed) {
        Ok(m) => m,
        Err(e) if is_divergence(&e) => return Ok(diverged(outcome, e)),
        Err(e) => return Err(e),
    };
    loop {
        outcome.measure = Some(current.clone());
        outcome.n = n;
        if 2 * n > max_n {
            outcome.diagnostic = Some(format!(
                "gap stayed above {tol} up to n = {n}{}",
                outcome.achieved_gap.map_or(String::new(), |g| format!(" (last gap {g})"))
            ));
            return Ok(outcome);
        }
        let doubled = match backward_measure(model, &start, 2 * n, &path, replicas, seed) {
            Ok(m) => m,
            Err(e) if is_divergence(&e) => return Ok(diverged(outcome, e)),
            Err(e) => return Err(e),
        };
        let gap = wasserstein1(&current, &doubled)?.value;
        outcome.history.push((n, gap));
        outcome.achieved_gap = Some(gap);
        n *= 2;
        current = doubled;
        if gap < tol {
            outcome.measure = Some(current);
            outcome.n = n;
            outcome.converged = true;
            outcome.reason = StopReason::Converged;
            return Ok(outcome);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub n_steps: usize,
    /// `W1` between the pushed measure and the measure at time 1 with `2n` steps.
    pub distance: f64,
    pub threshold: f64,
    pub passed: bool,
    pub pushed: EmpiricalMeasure,
}

/// Pushes a time-0 measure one step through `P_{X_0}` and compares it with the
/// backward measure at time 1 built with twice the horizon. Replica `j` of the
/// push reuses the time-0 observation stream of replica `j`.
pub fn invariance_check(model: &ModelSpec, measure: &EmpiricalMeasure, tol: f64) -> Result<InvarianceReport, EngineError> {
    if measure.t_end != 0 || measure.n_steps == 0 {
        return Err(EngineError::InvalidArgument("expected a backward measure at time 0".into()));
    }
    let n = measure.n_steps;
    let seed = measure.seed;
    let path = generate_path(&model.covariates, -(2 * n as i64) + 1, 0, seed)?;
    let fam = StreamFamily::new(seed, domain::OBSERVATION);
    let x = path.at(0);
    let d = measure.dim;
    let pairs = measure.pairs();
    let pushed_rows: Vec<Vec<f64>> = (0..measure.len())
        .into_par_iter()
        .map(|j| {
            let s: Vec<f64> = if measure.low.is_some() {
                vec![pairs[j].0 + pairs[j].1]
            } else {
                measure.point(j).to_vec()
            };
            let u = open_uniform(&mut fam.at(j as u64, 0));
            let y = model.kernel.sample_with_uniform(&s, u);
            let mut out = vec![0.0; d];
            advance(model, &s, y, x, &mut out)?;
            Ok(out)
        })
        .collect::<Result<_, EngineError>>()?;
    let mut pushed = EmpiricalMeasure::from_points(d, pushed_rows.concat());
    pushed.n_steps = n;
    pushed.start = measure.start.clone();
    pushed.t_end = 1;
    pushed.seed = seed;
    let reference = backward_measures_to(model, &[measure.start.clone()], 2 * n, 1, &path, measure.len(), seed)?.remove(0);
    let distance = wasserstein1(&pushed, &reference)?.value;
    let threshold = 2.0 * tol;
    Ok(InvarianceReport {
        n_steps: n,
        distance,
        threshold,
        passed: distance <= threshold,
        pushed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariates::CovariateProcessSpec;
    use crate::kernels::ObservationKernel;
    use crate::links::LinkSpec;

    fn poisson(kappa: f64, kt: f64, dt: f64) -> ModelSpec {
        ModelSpec::new(
            ObservationKernel::Poisson,
            LinkSpec::linear_constant(kappa, kt, dt, 1),
            CovariateProcessSpec::Constant { value: vec![1.0] },
        )
    }

    #[test]
    fn one_deterministic_step() {
        let m = poisson(0.0, 0.0, 2.5);
        let path = generate_path(&m.covariates, -1, -1, 0).unwrap();
        let mu = backward_measure(&m, &[4.0], 1, &path, 100, 1).unwrap();
        assert!(mu.pairs().iter().all(|(h, l)| h + l == 2.5));
    }

    #[test]
    fn offsets_match_plain_simulation() {
        let m = poisson(0.4, 0.3, 1.0);
        let path = generate_path(&m.covariates, -30, -1, 0).unwrap();
        let fam = StreamFamily::new(5, domain::OBSERVATION);
        let mu = backward_measure(&m, &[3.0], 30, &path, 100, 5).unwrap();
        for j in 0..100 {
            let mut s = 3.0;
            for t in -30..0 {
                let y = m.kernel.sample_with_uniform(&[s], open_uniform(&mut fam.at(j, t)));
                s = m.link.apply_scalar(s, y, path.at(t));
            }
            let (h, l) = mu.pairs()[j as usize];
            assert!((h + l - s).abs() < 1e-12 * s.max(1.0));
        }
    }

    #[test]
    fn two_starts_get_close() {
        let m = poisson(0.4, 0.3, 1.0);
        let path = generate_path(&m.covariates, -200, -1, 0).unwrap();
        let ms = backward_measures(&m, &[vec![0.0], vec![10.0]], 200, &path, 200, 7).unwrap();
        let w = wasserstein1(&ms[0], &ms[1]).unwrap().value;
        assert!(w > 0.0 && w < 0.02, "{w}");
    }

    #[test]
    fn too_few_replicas_rejected() {
        let m = poisson(0.4, 0.3, 1.0);
        let path = generate_path(&m.covariates, -5, -1, 0).unwrap();
        assert!(backward_measure(&m, &[0.0], 5, &path, 10, 1).is_err());
        assert!(matches!(
            backward_measure(&m, &[0.0], 6, &path, 100, 1),
            Err(EngineError::PathTooShort { .. })
        ));
    }

    #[test]
    fn memoryless_converges_at_first_doubling() {
        let out = stationary_sampler(&poisson(0.0, 0.0, 2.0), 0.01, 400, 100, 3).unwrap();
        assert!(out.converged);
        assert_eq!(out.n, 50);
        assert_eq!(out.history.len(), 1);
    }

    #[test]
    fn explosive_link_is_not_converged() {
        let out = stationary_sampler(&poisson(1.1, 0.0, 1.0), 0.01, 400, 100, 3).unwrap();
        assert!(!out.converged);
        assert_ne!(out.reason, StopReason::Converged);
    }

    #[test]
    fn invariance_on_contractive_model() {
        let m = poisson(0.4, 0.3, 1.0);
        let out = stationary_sampler(&m, 0.01, 800, 500, 11).unwrap();
        assert!(out.converged);
        let rep = invariance_check(&m, out.measure.as_ref().unwrap(), 0.01).unwrap();
        assert!(rep.passed, "{}", rep.distance);
    }
}
