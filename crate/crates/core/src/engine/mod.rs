//! Forward simulation, coupled chains, backward iterations and diagnostics.

mod backward;
mod coupling;
mod wasserstein;
mod wstats;

pub use backward::{
    backward_measure, backward_measures, backward_measures_to, invariance_check, stationary_sampler,
    EmpiricalMeasure, InvarianceReport, StationaryOutcome, StopReason, DIVERGENCE_CEILING, INITIAL_BACKWARD_STEPS,
};
pub use coupling::{couple_forward, couple_replicas, CouplingSummary, CouplingTrace};
pub use wasserstein::{
    monotone_coupling_1d, w1_assignment, w1_line_flow, wasserstein1, wasserstein1_with, W1Method, W1Result,
    ASSIGNMENT_LIMIT,
};
pub use wstats::{
    calibrate_thresholds, default_horizon, regeneration_times, w_stats, w_stats_from_sequences, Calibration,
    Regeneration, WStats,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covariates::{generate_path, CovariateError, CovariatePath};
use crate::drift::DriftError;
use crate::io::{csv_string, fmt_float};
use crate::kernels::KernelError;
use crate::links::LinkError;
use crate::model::{ModelError, ModelSpec};
use crate::rng::{domain, open_uniform, StreamFamily};

pub use crate::model::NormTag;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Covariate(#[from] CovariateError),
    #[error(transparent)]
    Drift(#[from] DriftError),
    #[error("path covers [{have_min}, {have_max}] but [{need_min}, {need_max}] is required")]
    PathTooShort {
        need_min: i64,
        need_max: i64,
        have_min: i64,
        have_max: i64,
    },
    #[error("measures have {left} and {right} points and bootstrap is disabled")]
    SizeMismatch { left: usize, right: usize },
    #[error("latent state left [-{ceiling:e}, {ceiling:e}] at time {t}")]
    Diverged { t: i64, ceiling: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub(crate) fn require_cover(path: &CovariatePath, t0: i64, t1: i64) -> Result<(), EngineError> {
    if path.covers(t0, t1) {
        Ok(())
    } else {
        Err(EngineError::PathTooShort {
            need_min: t0,
            need_max: t1,
            have_min: path.t_min,
            have_max: path.t_max,
        })
    }
}

/// Applies the link and checks the result against the kernel state space.
pub(crate) fn advance(model: &ModelSpec, s: &[f64], y: f64, x: &[f64], out: &mut [f64]) -> Result<(), EngineError> {
    model.link.apply_into(s, y, x, out);
    for &v in out.iter() {
        if !v.is_finite() || model.kernel.domain_lower().is_some_and(|lo| v < lo) {
            return Err(LinkError::DomainViolation { value: v }.into());
        }
    }
    Ok(())
}

/// A sample path of `(X_t, lambda_t, Y_t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub t_min: i64,
    pub t_max: i64,
    pub state_dim: usize,
    /// `lambda_t` for `t = t_min ..= t_max`, flattened.
    pub lambda: Vec<f64>,
    pub y: Vec<f64>,
    pub path: CovariatePath,
    pub seed: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn lambda_at(&self, t: i64) -> &[f64] {
        let i = (t - self.t_min) as usize * self.state_dim;
        &self.lambda[i..i + self.state_dim]
    }

    pub fn y_at(&self, t: i64) -> f64 {
        self.y[(t - self.t_min) as usize]
    }

    pub fn to_csv(&self) -> String {
        let mut header = vec!["t".to_string()];
        header.extend(column_names("x", self.path.dim));
        header.extend(column_names("lambda", self.state_dim));
        header.push("y".into());
        let rows = (self.t_min..=self.t_max).map(|t| {
            let mut row = vec![t.to_string()];
            row.extend(self.path.at(t).iter().map(|v| fmt_float(*v)));
            row.extend(self.lambda_at(t).iter().map(|v| fmt_float(*v)));
            row.push(fmt_float(self.y_at(t)));
            row
        });
        csv_string(&header, rows)
    }
}

pub(crate) fn column_names(base: &str, dim: usize) -> Vec<String> {
    if dim == 1 {
        vec![base.to_string()]
    } else {
        (1..=dim).map(|k| format!("{base}_{k}")).collect()
    }
}

/// Simulates the model on `[t0, t1]` from `lambda_{t0} = s0`.
pub fn simulate(model: &ModelSpec, s0: &[f64], t0: i64, t1: i64, seed: u64) -> Result<Trajectory, EngineError> {
    model.validate()?;
    let path = generate_path(&model.covariates, t0, t1, seed)?;
    simulate_on_path(model, s0, &path, seed)
}

/// Simulates along a given environment path; the observation at time `t`
/// uses stream `(seed, t)`.
pub fn simulate_on_path(model: &ModelSpec, s0: &[f64], path: &CovariatePath, seed: u64) -> Result<Trajectory, EngineError> {
    model.kernel.check_state(s0)?;
    let fam = StreamFamily::new(seed, domain::OBSERVATION);
    let d = model.state_dim();
    let len = path.len();
    let mut lambda = Vec::with_capacity(len * d);
    let mut y = Vec::with_capacity(len);
    let mut s = s0.to_vec();
    let mut next = vec![0.0; d];
    for t in path.t_min..=path.t_max {
        lambda.extend_from_slice(&s);
        let u = open_uniform(&mut fam.at(0, t));
        let obs = model.kernel.sample_with_uniform(&s, u);
        y.push(obs);
        if t < path.t_max {
            advance(model, &s, obs, path.at(t), &mut next)?;
            std::mem::swap(&mut s, &mut next);
        }
    }
    Ok(Trajectory {
        t_min: path.t_min,
        t_max: path.t_max,
        state_dim: d,
        lambda,
        y,
        path: path.clone(),
        seed,
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
    fn memoryless_link_is_constant() {
        let traj = simulate(&poisson(0.0, 0.0, 2.0), &[7.0], 0, 50, 3).unwrap();
        for t in 1..=50 {
            assert_eq!(traj.lambda_at(t), &[2.0]);
        }
        assert_eq!(traj.lambda_at(0), &[7.0]);
    }

    #[test]
    fn simulation_is_deterministic() {
        let m = poisson(0.4, 0.3, 1.0);
        assert_eq!(simulate(&m, &[1.0], 0, 500, 9).unwrap(), simulate(&m, &[1.0], 0, 500, 9).unwrap());
        assert_ne!(simulate(&m, &[1.0], 0, 500, 9).unwrap().y, simulate(&m, &[1.0], 0, 500, 10).unwrap().y);
    }

    #[test]
    fn recursion_holds_exactly() {
        let m = poisson(0.4, 0.3, 1.0);
        let traj = simulate(&m, &[0.0], 0, 200, 1).unwrap();
        for t in 0..200 {
            let next = m.link.apply_scalar(traj.lambda_at(t)[0], traj.y_at(t), traj.path.at(t));
            assert_eq!(next, traj.lambda_at(t + 1)[0]);
        }
    }

    #[test]
    fn csv_header() {
        let traj = simulate(&poisson(0.4, 0.3, 1.0), &[0.0], 0, 3, 1).unwrap();
        let csv = traj.to_csv();
        assert!(csv.starts_with("t,x,lambda,y\n0,"));
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn divergent_model_reports_domain_violation() {
        let err = simulate(&poisson(3.0, 0.0, 1.0), &[1.0], 0, 2000, 1).unwrap_err();
        assert!(matches!(err, EngineError::Link(LinkError::DomainViolation { .. })));
    }
}
