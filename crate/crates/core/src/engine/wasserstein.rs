//! Exact Wasserstein-1 distance between empirical measures under the ground
//! cost `min(|s - s'|, 1)`.
//!
//! On the line the truncated cost is the shortest-path metric of a graph whose
//! vertices are the sorted support points plus one hub: consecutive points are
//! joined by edges of length equal to their gap, and every point reaches the
//! hub at cost 1/2. The transport problem is then an uncapacitated min-cost
//! flow on that graph, solved exactly by dynamic programming over the integer
//! flow crossing each gap. Vector states fall back to an assignment solver.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::backward::EmpiricalMeasure;
use super::EngineError;
use crate::rng::{domain, open_uniform, split_seed, StreamFamily};

/// Largest point count solved by a single assignment problem.
pub const ASSIGNMENT_LIMIT: usize = 4096;
const SUBSAMPLE_DRAWS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum W1Method {
    LineFlow,
    Assignment,
    SubsampledAssignment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct W1Result {
    pub value: f64,
    /// Standard deviation across subsample draws; zero for exact methods.
    pub spread: f64,
    /// Cost of the sorted (monotone) coupling, an upper bound on the line.
    pub monotone_upper: Option<f64>,
    pub method: W1Method,
    /// Whether one measure was resampled to the other's size.
    pub bootstrapped: bool,
    pub n: usize,
}

fn cost(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())).min(1.0)
}

/// Exact `W1` between two equally sized point sets on the line. Points are
/// `(high, low)` pairs whose sum is the represented value.
pub fn w1_line_flow(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    assert_eq!(a.len(), b.len(), "equal sizes required");
    let m = a.len();
    if m == 0 {
        return 0.0;
    }
    let mut pts: Vec<(f64, f64, i64)> = a
        .iter()
        .map(|&(h, l)| (h, l, 1))
        .chain(b.iter().map(|&(h, l)| (h, l, -1)))
        .collect();
    pts.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    let width = 2 * m + 1;
    let mid = m as i64;
    let mut g = vec![f64::INFINITY; width];
    let mut shifted = vec![f64::INFINITY; width];
    g[m] = 0.0;
    for i in 0..pts.len() {
        let supply = pts[i].2;
        // Flow entering the point plus its supply, before any hub exchange.
        for (idx, slot) in shifted.iter_mut().enumerate() {
            let src = idx as i64 - supply;
            *slot = if src >= 0 && (src as usize) < width { g[src as usize] } else { f64::INFINITY };
        }
        // Exchange with the hub at cost 1/2 per unit.
        for idx in 1..width {
            let cand = shifted[idx - 1] + 0.5;
            if cand < shifted[idx] {
                shifted[idx] = cand;
            }
        }
        for idx in (0..width - 1).rev() {
            let cand = shifted[idx + 1] + 0.5;
            if cand < shifted[idx] {
                shifted[idx] = cand;
            }
        }
        if i + 1 < pts.len() {
            let gap = ((pts[i + 1].0 - pts[i].0) + (pts[i + 1].1 - pts[i].1)).max(0.0);
            for (idx, slot) in shifted.iter_mut().enumerate() {
                let f = (idx as i64 - mid).abs() as f64;
                if f > 0.0 {
                    *slot += gap * f;
                }
            }
        }
        std::mem::swap(&mut g, &mut shifted);
    }
    g[m] / m as f64
}

/// Exact `W1` by the Hungarian algorithm on flattened points of dimension `dim`.
pub fn w1_assignment(a: &[f64], b: &[f64], dim: usize) -> f64 {
    assert_eq!(a.len(), b.len(), "equal sizes required");
    let n = a.len() / dim;
    if n == 0 {
        return 0.0;
    }
    let c = |i: usize, j: usize| cost(&a[i * dim..(i + 1) * dim], &b[j * dim..(j + 1) * dim]);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let total: f64 = (1..=n).map(|j| c(p[j] - 1, j - 1)).sum();
    total / n as f64
}

/// Cost of pairing the sorted samples; an upper bound on `W1` on the line.
pub fn monotone_coupling_1d(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let sorted = |v: &[(f64, f64)]| {
        let mut s = v.to_vec();
        s.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
        s
    };
    let (sa, sb) = (sorted(a), sorted(b));
    let total: f64 = sa
        .iter()
        .zip(&sb)
        .map(|(x, y)| ((y.0 - x.0) + (y.1 - x.1)).abs().min(1.0))
        .sum();
    total / a.len().max(1) as f64
}

fn resample(measure: &EmpiricalMeasure, size: usize, rng: &mut impl RngCore) -> EmpiricalMeasure {
    let d = measure.dim;
    let n = measure.len();
    let mut out = measure.clone();
    out.points = Vec::with_capacity(size * d);
    let mut low = measure.low.as_ref().map(|_| Vec::with_capacity(size));
    for _ in 0..size {
        let i = ((open_uniform(rng) * n as f64) as usize).min(n - 1);
        out.points.extend_from_slice(&measure.points[i * d..(i + 1) * d]);
        if let (Some(l), Some(src)) = (low.as_mut(), measure.low.as_ref()) {
            l.push(src[i]);
        }
    }
    out.low = low;
    out.replicas = size;
    out
}

pub fn wasserstein1(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<W1Result, EngineError> {
    wasserstein1_with(mu, nu, true)
}

/// `W1` between two empirical measures. Unequal sizes are resolved by
/// resampling the smaller measure to the larger size when allowed.
pub fn wasserstein1_with(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, allow_bootstrap: bool) -> Result<W1Result, EngineError> {
    if mu.dim != nu.dim {
        return Err(EngineError::InvalidArgument("measures live in different dimensions".into()));
    }
    if mu.is_empty() || nu.is_empty() {
        return Err(EngineError::InvalidArgument("empty measure".into()));
    }
    let (mut a, mut b) = (mu.clone(), nu.clone());
    let mut bootstrapped = false;
    if a.len() != b.len() {
        if !allow_bootstrap {
            return Err(EngineError::SizeMismatch {
                left: a.len(),
                right: b.len(),
            });
        }
        let (small, large) = (a.len().min(b.len()), a.len().max(b.len()));
        let mut rng = StreamFamily::new(split_seed(small as u64, large as u64), domain::BOOTSTRAP).at(0, 0);
        if a.len() < b.len() {
            a = resample(&a, large, &mut rng);
        } else {
            b = resample(&b, large, &mut rng);
        }
        bootstrapped = true;
    }
    let n = a.len();
    if a.dim == 1 {
        let (pa, pb) = (a.pairs(), b.pairs());
        return Ok(W1Result {
            value: w1_line_flow(&pa, &pb),
            spread: 0.0,
            monotone_upper: Some(monotone_coupling_1d(&pa, &pb)),
            method: W1Method::LineFlow,
            bootstrapped,
            n,
        });
    }
    if n <= ASSIGNMENT_LIMIT {
        return Ok(W1Result {
            value: w1_assignment(&a.points, &b.points, a.dim),
            spread: 0.0,
            monotone_upper: None,
            method: W1Method::Assignment,
            bootstrapped,
            n,
        });
    }
    // Stratified subsamples: one random index from each of ASSIGNMENT_LIMIT
    // consecutive blocks of the points ordered by their first coordinate.
    let d = a.dim;
    let order = |m: &EmpiricalMeasure| {
        let mut idx: Vec<usize> = (0..m.len()).collect();
        idx.sort_by(|&i, &j| m.points[i * d].total_cmp(&m.points[j * d]));
        idx
    };
    let (oa, ob) = (order(&a), order(&b));
    let fam = StreamFamily::new(split_seed(n as u64, d as u64), domain::BOOTSTRAP);
    let values: Vec<f64> = (0..SUBSAMPLE_DRAWS)
        .map(|k| {
            let mut rng = fam.at(k as u64 + 1, 0);
            let mut take = |o: &[usize], m: &EmpiricalMeasure| {
                let mut pts = Vec::with_capacity(ASSIGNMENT_LIMIT * d);
                for s in 0..ASSIGNMENT_LIMIT {
                    let lo = s * n / ASSIGNMENT_LIMIT;
                    let hi = ((s + 1) * n / ASSIGNMENT_LIMIT).max(lo + 1);
                    let i = o[lo + ((open_uniform(&mut rng) * (hi - lo) as f64) as usize).min(hi - lo - 1)];
                    pts.extend_from_slice(&m.points[i * d..(i + 1) * d]);
                }
                pts
            };
            let (sa, sb) = (take(&oa, &a), take(&ob, &b));
            w1_assignment(&sa, &sb, d)
        })
        .collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    Ok(W1Result {
        value: mean,
        spread: var.sqrt(),
        monotone_upper: None,
        method: W1Method::SubsampledAssignment,
        bootstrapped,
        n,
    })
}
