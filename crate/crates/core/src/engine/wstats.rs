//! Environment statistics that control the drift and contraction of the chain
//! along a covariate path, and the regeneration times they induce.
//!
//! With `gamma_t, delta_t` from the drift certificate and `kappa_t` from the
//! contraction map, the truncated statistics at time `t` are
//!
//! * `W1 = sum_{i=0}^{H} gamma_{t-1} ... gamma_{t-i} delta_{t-i-1}`
//! * `W2 = max_{h <= j <= H} gamma_{t-1} ... gamma_{t-j}`
//! * `W3`, the same with `kappa`
//! * `W4 = sum_{s=0}^{H} phi(kappa_{t+s} ... kappa_t)`

use serde::{Deserialize, Serialize};

use super::{require_cover, EngineError};
use crate::covariates::CovariatePath;
use crate::drift::drift_certificate;
use crate::kernels::PhiSpec;
use crate::model::ModelSpec;

/// Target for the geometric tail estimate when picking `H`.
pub const DEFAULT_TAIL_TOLERANCE: f64 = 1e-6;
pub const MAX_HORIZON: usize = 2000;
const SPACING_GRID_MAX: usize = 50;
const THRESHOLD_GRID: [f64; 10] = [2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0, 512.0, 1024.0];
const MIN_EVENT_FREQUENCY: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailEstimates {
    /// `exp(mean log gamma)` over the path.
    pub rho_gamma: f64,
    pub rho_kappa: f64,
    /// Estimated size of the neglected terms of each statistic.
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WStats {
    /// First and last interior times.
    pub t_min: i64,
    pub t_max: i64,
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    pub w3: Vec<f64>,
    pub w4: Vec<f64>,
    pub h: usize,
    pub horizon: usize,
    pub tail: TailEstimates,
}

impl WStats {
    pub fn len(&self) -> usize {
        self.w1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w1.is_empty()
    }

    /// Whether time index `i` meets the thresholds for `c`.
    pub fn passes(&self, i: usize, c: f64) -> bool {
        let contraction = 1.0 - 1.0 / c;
        self.w1[i] <= c && self.w2[i] <= contraction && self.w3[i] <= contraction && self.w4[i] <= c
    }

    /// Smallest `c` for which index `i` passes.
    pub fn admitting_threshold(&self, i: usize) -> f64 {
        let inv = |w: f64| if w < 1.0 { 1.0 / (1.0 - w) } else { f64::INFINITY };
        self.w1[i].max(self.w4[i]).max(inv(self.w2[i])).max(inv(self.w3[i]))
    }

    pub fn event_frequency(&self, c: f64) -> f64 {
        (0..self.len()).filter(|&i| self.passes(i, c)).count() as f64 / self.len().max(1) as f64
    }
}

fn geometric_rate(seq: &[f64]) -> f64 {
    let mean_log = seq.iter().map(|v| v.ln()).sum::<f64>() / seq.len().max(1) as f64;
    mean_log.exp()
}

fn tails(gamma: &[f64], delta: &[f64], kappa: &[f64], phi: &PhiSpec, horizon: usize) -> TailEstimates {
    let rho_gamma = geometric_rate(gamma);
    let rho_kappa = geometric_rate(kappa);
    let mean_delta = delta.iter().sum::<f64>() / delta.len().max(1) as f64;
    let geometric = |rho: f64, first: i32| {
        if rho < 1.0 {
            rho.powi(first) / (1.0 - rho)
        } else {
            f64::INFINITY
        }
    };
    let h = horizon as i32;
    let w4 = phi
        .coefficients
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let r = rho_kappa.powi(j as i32 + 1);
            c.abs() * geometric(r, h + 2)
        })
        .sum();
    TailEstimates {
        rho_gamma,
        rho_kappa,
        w1: mean_delta * geometric(rho_gamma, h + 1),
        w2: if rho_gamma < 1.0 { rho_gamma.powi(h + 1) } else { f64::INFINITY },
        w3: if rho_kappa < 1.0 { rho_kappa.powi(h + 1) } else { f64::INFINITY },
        w4,
    }
}

/// Smallest horizon whose estimated tails all fall below
/// `DEFAULT_TAIL_TOLERANCE`, capped at `MAX_HORIZON`.
pub fn default_horizon(gamma: &[f64], delta: &[f64], kappa: &[f64], phi: &PhiSpec) -> usize {
    (1..=MAX_HORIZON)
        .find(|&h| {
            let t = tails(gamma, delta, kappa, phi, h);
            t.w1.max(t.w2).max(t.w3).max(t.w4) < DEFAULT_TAIL_TOLERANCE
        })
        .unwrap_or(MAX_HORIZON)
}

/// Statistics from per-time sequences starting at `t_min`.
pub fn w_stats_from_sequences(
    gamma: &[f64],
    delta: &[f64],
    kappa: &[f64],
    phi: &PhiSpec,
    t_min: i64,
    h: usize,
    horizon: usize,
) -> Result<WStats, EngineError> {
    if h == 0 || horizon < h {
        return Err(EngineError::InvalidArgument(format!(
            "need horizon >= h >= 1, got h = {h}, horizon = {horizon}"
        )));
    }
    let len = gamma.len();
    if delta.len() != len || kappa.len() != len {
        return Err(EngineError::InvalidArgument("sequences differ in length".into()));
    }
    let first = horizon + 1;
    if len < 2 * horizon + 2 {
        return Err(EngineError::PathTooShort {
            need_min: t_min,
            need_max: t_min + 2 * horizon as i64 + 1,
            have_min: t_min,
            have_max: t_min + len as i64 - 1,
        });
    }
    let last = len - 1 - horizon;
    let count = last - first + 1;
    let (mut w1, mut w2, mut w3, mut w4) = (
        Vec::with_capacity(count),
        Vec::with_capacity(count),
        Vec::with_capacity(count),
        Vec::with_capacity(count),
    );
    for t in first..=last {
        let mut prod = 1.0;
        let mut sum = 0.0;
        let mut sup_g = 0.0f64;
        let mut prod_k = 1.0;
        let mut sup_k = 0.0f64;
        for i in 0..=horizon {
            sum += prod * delta[t - i - 1];
            if i < horizon {
                prod *= gamma[t - i - 1];
                prod_k *= kappa[t - i - 1];
                if i + 1 >= h {
                    sup_g = sup_g.max(prod);
                    sup_k = sup_k.max(prod_k);
                }
            }
        }
        let mut forward = 1.0;
        let mut w4_t = 0.0;
        for s in 0..=horizon {
            forward *= kappa[t + s];
            w4_t += phi.eval(forward);
        }
        w1.push(sum);
        w2.push(sup_g);
        w3.push(sup_k);
        w4.push(w4_t);
    }
    Ok(WStats {
        t_min: t_min + first as i64,
        t_max: t_min + last as i64,
        w1,
        w2,
        w3,
        w4,
        h,
        horizon,
        tail: tails(gamma, delta, kappa, phi, horizon),
    })
}

fn sequences(model: &ModelSpec, path: &CovariatePath) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), EngineError> {
    let cert = drift_certificate(model)?;
    let kappa_map = model.link.contraction_map();
    let xs = (path.t_min..=path.t_max).map(|t| path.at(t));
    let mut gamma = Vec::with_capacity(path.len());
    let mut delta = Vec::with_capacity(path.len());
    let mut kappa = Vec::with_capacity(path.len());
    for x in xs {
        gamma.push(cert.gamma_at(x));
        delta.push(cert.delta_at(x));
        kappa.push(kappa_map.eval(x));
    }
    Ok((gamma, delta, kappa))
}

/// Statistics along `path`; `horizon = None` picks the default truncation.
pub fn w_stats(model: &ModelSpec, path: &CovariatePath, h: usize, horizon: Option<usize>) -> Result<WStats, EngineError> {
    require_cover(path, path.t_min, path.t_max)?;
    let (gamma, delta, kappa) = sequences(model, path)?;
    let phi = model.kernel.phi();
    let horizon = horizon.unwrap_or_else(|| default_horizon(&gamma, &delta, &kappa, &phi).max(h));
    w_stats_from_sequences(&gamma, &delta, &kappa, &phi, path.t_min, h, horizon)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regeneration {
    pub times: Vec<i64>,
    /// `M_n = #{i : tau_i <= n}` for `n = stats.t_min ..= stats.t_max`.
    pub counts: Vec<usize>,
    pub c: f64,
    pub h: usize,
    /// Set when no time qualifies: the smallest threshold admitting one.
    pub smallest_admitting_c: Option<f64>,
}

impl Regeneration {
    pub fn count_at(&self, n: i64, t_min: i64) -> usize {
        self.counts[(n - t_min) as usize]
    }
}

/// Greedy left-to-right scan for times meeting the thresholds of `c`, each
/// more than `h` after the previous one.
pub fn regeneration_times(stats: &WStats, c: f64, h: usize) -> Result<Regeneration, EngineError> {
    if !(c > 1.0) {
        return Err(EngineError::InvalidArgument(format!("threshold must exceed 1, got {c}")));
    }
    let mut times = Vec::new();
    let mut counts = Vec::with_capacity(stats.len());
    let mut last: Option<i64> = None;
    for i in 0..stats.len() {
        let t = stats.t_min + i as i64;
        let spaced = last.is_none_or(|p| t - p > h as i64);
        if spaced && stats.passes(i, c) {
            times.push(t);
            last = Some(t);
        }
        counts.push(times.len());
    }
    let smallest_admitting_c = times.is_empty().then(|| {
        (0..stats.len())
            .map(|i| stats.admitting_threshold(i))
            .fold(f64::INFINITY, f64::min)
    });
    Ok(Regeneration {
        times,
        counts,
        c,
        h,
        smallest_admitting_c,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub h: usize,
    pub c: f64,
    pub frequency: f64,
    pub horizon: usize,
}

/// Smallest spacing `h` in `1..=50` for which some threshold on the grid
/// `2, 4, ..., 1024` has event frequency at least 0.01 on the pilot path,
/// and the smallest such threshold. `None` when no pair qualifies.
pub fn calibrate_thresholds(model: &ModelSpec, pilot: &CovariatePath) -> Result<Option<Calibration>, EngineError> {
    let (gamma, delta, kappa) = sequences(model, pilot)?;
    let phi = model.kernel.phi();
    let base = default_horizon(&gamma, &delta, &kappa, &phi);
    for h in 1..=SPACING_GRID_MAX {
        let horizon = base.max(h);
        let stats = w_stats_from_sequences(&gamma, &delta, &kappa, &phi, pilot.t_min, h, horizon)?;
        if let Some(&c) = THRESHOLD_GRID.iter().find(|&&c| stats.event_frequency(c) >= MIN_EVENT_FREQUENCY) {
            return Ok(Some(Calibration {
                h,
                c,
                frequency: stats.event_frequency(c),
                horizon,
            }));
        }
    }
    Ok(None)
}
