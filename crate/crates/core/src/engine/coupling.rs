//! Two chains in one environment, observations drawn from the maximal coupling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{advance, column_names, require_cover, EngineError};
use crate::covariates::CovariatePath;
use crate::io::{csv_string, fmt_float};
use crate::model::ModelSpec;
use crate::rng::{domain, split_seed, StreamFamily};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingTrace {
    pub t_min: i64,
    pub t_max: i64,
    pub state_dim: usize,
    /// `lambda_t` for `t = t_min ..= t_max + 1`, flattened.
    pub lambda: Vec<f64>,
    pub lambda_prime: Vec<f64>,
    pub y: Vec<f64>,
    pub y_prime: Vec<f64>,
    pub met: Vec<bool>,
    /// First `T` with `met_t` for every recorded `t >= T`.
    pub meet_time: Option<i64>,
    /// No meeting inside the horizon.
    pub censored: bool,
    /// Sum of `|lambda_t - lambda'_t|` over recorded `t >= meet_time`.
    pub lambda_gap_sum: f64,
    pub path_hash: String,
    pub seed: u64,
}

impl CouplingTrace {
    pub fn horizon(&self) -> usize {
        self.y.len()
    }

    pub fn lambda_at(&self, t: i64) -> &[f64] {
        let i = (t - self.t_min) as usize * self.state_dim;
        &self.lambda[i..i + self.state_dim]
    }

    pub fn lambda_prime_at(&self, t: i64) -> &[f64] {
        let i = (t - self.t_min) as usize * self.state_dim;
        &self.lambda_prime[i..i + self.state_dim]
    }

    pub fn gap_at(&self, t: i64) -> f64 {
        self.lambda_at(t)
            .iter()
            .zip(self.lambda_prime_at(t))
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Largest excess of `|gap_{t+1}| - kappa(X_t) |gap_t|` after the meeting time.
    pub fn max_contraction_excess(&self, model: &ModelSpec, path: &CovariatePath) -> f64 {
        let Some(t0) = self.meet_time else {
            return f64::NEG_INFINITY;
        };
        let kappa = model.link.contraction_map();
        (t0..=self.t_max)
            .map(|t| self.gap_at(t + 1) - kappa.eval(path.at(t)) * self.gap_at(t))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_csv(&self, path: &CovariatePath) -> String {
        let d = self.state_dim;
        let mut header = vec!["t".to_string()];
        header.extend(column_names("x", path.dim));
        header.extend(column_names("lambda", d));
        header.push("y".into());
        header.extend(column_names("lambda_prime", d));
        header.extend(["y_prime".to_string(), "met".to_string()]);
        let rows = (self.t_min..=self.t_max).map(|t| {
            let i = (t - self.t_min) as usize;
            let mut row = vec![t.to_string()];
            row.extend(path.at(t).iter().map(|v| fmt_float(*v)));
            row.extend(self.lambda_at(t).iter().map(|v| fmt_float(*v)));
            row.push(fmt_float(self.y[i]));
            row.extend(self.lambda_prime_at(t).iter().map(|v| fmt_float(*v)));
            row.push(fmt_float(self.y_prime[i]));
            row.push(if self.met[i] { "1".into() } else { "0".into() });
            row
        });
        csv_string(&header, rows)
    }
}

/// Runs both chains over the whole path, `lambda_{t_min} = s0`,
/// `lambda'_{t_min} = s0_prime`.
pub fn couple_forward(
    model: &ModelSpec,
    s0: &[f64],
    s0_prime: &[f64],
    path: &CovariatePath,
    seed: u64,
) -> Result<CouplingTrace, EngineError> {
    model.kernel.check_state(s0)?;
    model.kernel.check_state(s0_prime)?;
    require_cover(path, path.t_min, path.t_max)?;
    let fam = StreamFamily::new(seed, domain::COUPLING);
    let d = model.state_dim();
    let len = path.len();
    let mut lambda = Vec::with_capacity((len + 1) * d);
    let mut lambda_prime = Vec::with_capacity((len + 1) * d);
    let mut y = Vec::with_capacity(len);
    let mut y_prime = Vec::with_capacity(len);
    let mut met = Vec::with_capacity(len);
    let (mut s, mut sp) = (s0.to_vec(), s0_prime.to_vec());
    let (mut next, mut next_p) = (vec![0.0; d], vec![0.0; d]);
    for t in path.t_min..=path.t_max {
        lambda.extend_from_slice(&s);
        lambda_prime.extend_from_slice(&sp);
        let draw = model.kernel.maximal_couple(&s, &sp, &mut fam.at(0, t))?;
        y.push(draw.y);
        y_prime.push(draw.y_prime);
        met.push(draw.met);
        let x = path.at(t);
        advance(model, &s, draw.y, x, &mut next)?;
        advance(model, &sp, draw.y_prime, x, &mut next_p)?;
        std::mem::swap(&mut s, &mut next);
        std::mem::swap(&mut sp, &mut next_p);
    }
    lambda.extend_from_slice(&s);
    lambda_prime.extend_from_slice(&sp);
    let tail_start = met.iter().rposition(|m| !m).map_or(0, |i| i + 1);
    let meet_time = (tail_start < len).then(|| path.t_min + tail_start as i64);
    let mut trace = CouplingTrace {
        t_min: path.t_min,
        t_max: path.t_max,
        state_dim: d,
        lambda,
        lambda_prime,
        y,
        y_prime,
        met,
        meet_time,
        censored: meet_time.is_none(),
        lambda_gap_sum: 0.0,
        path_hash: path.spec_hash.clone(),
        seed,
    };
    if let Some(t0) = meet_time {
        trace.lambda_gap_sum = (t0..=path.t_max).map(|t| trace.gap_at(t)).sum();
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingSummary {
    pub replicas: usize,
    pub horizon: usize,
    /// Replicas whose meeting time falls strictly before the end of the path.
    pub met_before_horizon: usize,
    pub censored: usize,
    pub meeting_frequency: f64,
    pub mean_meet_offset: Option<f64>,
}

/// Independent replicas on one path; replica `j` uses `split_seed(seed, j)`.
pub fn couple_replicas(
    model: &ModelSpec,
    s0: &[f64],
    s0_prime: &[f64],
    path: &CovariatePath,
    replicas: usize,
    seed: u64,
) -> Result<(Vec<CouplingTrace>, CouplingSummary), EngineError> {
    let traces: Vec<CouplingTrace> = (0..replicas)
        .into_par_iter()
        .map(|j| couple_forward(model, s0, s0_prime, path, split_seed(seed, j as u64)))
        .collect::<Result<_, _>>()?;
    let horizon = path.len();
    let met_before: Vec<i64> = traces
        .iter()
        .filter_map(|tr| tr.meet_time.filter(|t| *t < path.t_max))
        .map(|t| t - path.t_min)
        .collect();
    let summary = CouplingSummary {
        replicas,
        horizon,
        met_before_horizon: met_before.len(),
        censored: traces.iter().filter(|t| t.censored).count(),
        meeting_frequency: met_before.len() as f64 / replicas.max(1) as f64,
        mean_meet_offset: (!met_before.is_empty())
            .then(|| met_before.iter().sum::<i64>() as f64 / met_before.len() as f64),
    };
    Ok((traces, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariates::{generate_path, CovariateProcessSpec};
    use crate::kernels::ObservationKernel;
    use crate::links::LinkSpec;

    fn model() -> ModelSpec {
        ModelSpec::new(
            ObservationKernel::Poisson,
            LinkSpec::linear_constant(0.4, 0.3, 1.0, 1),
            CovariateProcessSpec::Constant { value: vec![1.0] },
        )
    }

    #[test]
    fn equal_starts_stay_glued() {
        let m = model();
        let path = generate_path(&m.covariates, 0, 99, 1).unwrap();
        let tr = couple_forward(&m, &[2.0], &[2.0], &path, 5).unwrap();
        assert!(tr.met.iter().all(|b| *b));
        assert_eq!(tr.meet_time, Some(0));
        assert_eq!(tr.lambda_gap_sum, 0.0);
    }

    #[test]
    fn gap_contracts_after_meeting() {
        let m = model();
        let path = generate_path(&m.covariates, 0, 199, 1).unwrap();
        for seed in 0..50 {
            let tr = couple_forward(&m, &[0.0], &[10.0], &path, seed).unwrap();
            if tr.meet_time.is_some() {
                assert!(tr.max_contraction_excess(&m, &path) <= 1e-12);
            }
        }
    }

    #[test]
    fn replicas_are_deterministic() {
        let m = model();
        let path = generate_path(&m.covariates, 0, 99, 1).unwrap();
        let (a, sa) = couple_replicas(&m, &[0.0], &[10.0], &path, 20, 3).unwrap();
        let (b, sb) = couple_replicas(&m, &[0.0], &[10.0], &path, 20, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert!(a[0].to_csv(&path).starts_with("t,x,lambda,y,lambda_prime,y_prime,met\n"));
    }
}
