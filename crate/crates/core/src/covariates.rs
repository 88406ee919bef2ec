//! Exogenous covariate processes, coefficient maps of the covariate, and
//! Monte Carlo log-moment estimation.

use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::numeric::normal_quantile;
use crate::rng::{domain, open_uniform, StreamFamily};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CovariateError {
    #[error("invalid covariate spec: {0}")]
    InvalidSpec(String),
    #[error("empty time range [{0}, {1}]")]
    EmptyRange(i64, i64),
    #[error("coefficient map is identically zero on the sampled support")]
    DegenerateMap,
    #[error("at least {min} samples required, got {got}")]
    TooFewSamples { min: usize, got: usize },
}

/// Marginal law of an i.i.d. draw or of an AR(1) innovation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case", deny_unknown_fields)]
pub enum Marginal {
    Gaussian { mean: f64, sd: f64 },
    Uniform { lo: f64, hi: f64 },
    PointMass { value: f64 },
}

impl Marginal {
    fn validate(&self) -> Result<(), CovariateError> {
        let ok = match *self {
            Marginal::Gaussian { mean, sd } => mean.is_finite() && sd.is_finite() && sd >= 0.0,
            Marginal::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo <= hi,
            Marginal::PointMass { value } => value.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(CovariateError::InvalidSpec(format!("bad marginal {self:?}")))
        }
    }

    /// Draw by inversion of one open uniform.
    pub fn draw<R: RngCore + ?Sized>(&self, rng: &mut R) -> f64 {
        let u = open_uniform(rng);
        match *self {
            Marginal::Gaussian { mean, sd } => mean + sd * normal_quantile(u),
            Marginal::Uniform { lo, hi } => lo + (hi - lo) * u,
            Marginal::PointMass { value } => value,
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Marginal::Gaussian { mean, .. } => mean,
            Marginal::Uniform { lo, hi } => 0.5 * (lo + hi),
            Marginal::PointMass { value } => value,
        }
    }
}

fn one() -> usize {
    1
}

/// The environment `X = (X_t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CovariateProcessSpec {
    Constant {
        value: Vec<f64>,
    },
    Iid {
        marginal: Marginal,
        #[serde(default = "one")]
        dim: usize,
    },
    /// Componentwise independent AR(1): `X_t = a X_{t-1} + e_t`.
    Ar1 {
        a: f64,
        noise: Marginal,
        #[serde(default = "one")]
        dim: usize,
    },
    FiniteStateMarkov {
        states: Vec<Vec<f64>>,
        transition: Vec<Vec<f64>>,
    },
}

/// AR(1) anchors are spaced this many steps apart.
const AR1_BLOCK: i64 = 256;
/// Longest look-back tried when coupling a finite chain from the past.
const CFTP_MAX_LOOKBACK: i64 = 1 << 16;

impl CovariateProcessSpec {
    pub fn dim(&self) -> usize {
        match self {
            CovariateProcessSpec::Constant { value } => value.len(),
            CovariateProcessSpec::Iid { dim, .. } | CovariateProcessSpec::Ar1 { dim, .. } => *dim,
            CovariateProcessSpec::FiniteStateMarkov { states, .. } => {
                states.first().map_or(0, Vec::len)
            }
        }
    }

    pub fn validate(&self) -> Result<(), CovariateError> {
        if self.dim() == 0 {
            return Err(CovariateError::InvalidSpec("dimension must be positive".into()));
        }
        match self {
            CovariateProcessSpec::Constant { value } => {
                if value.iter().any(|v| !v.is_finite()) {
                    return Err(CovariateError::InvalidSpec("non-finite constant".into()));
                }
            }
            CovariateProcessSpec::Iid { marginal, .. } => marginal.validate()?,
            CovariateProcessSpec::Ar1 { a, noise, .. } => {
                noise.validate()?;
                if !(a.abs() < 1.0) {
                    return Err(CovariateError::InvalidSpec(format!(
                        "AR(1) coefficient must satisfy |a| < 1, got {a}"
                    )));
                }
            }
            CovariateProcessSpec::FiniteStateMarkov { states, transition } => {
                let k = states.len();
                let d = self.dim();
                if states.iter().any(|s| s.len() != d || s.iter().any(|v| !v.is_finite())) {
                    return Err(CovariateError::InvalidSpec("ragged or non-finite states".into()));
                }
                if transition.len() != k || transition.iter().any(|r| r.len() != k) {
                    return Err(CovariateError::InvalidSpec(
                        "transition matrix must be square with one row per state".into(),
                    ));
                }
                for (i, row) in transition.iter().enumerate() {
                    if row.iter().any(|p| !(*p >= 0.0)) {
                        return Err(CovariateError::InvalidSpec(format!("negative entry in row {i}")));
                    }
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > 1e-12 {
                        return Err(CovariateError::InvalidSpec(format!(
                            "row {i} sums to {sum}, not 1"
                        )));
                    }
                }
                if !is_irreducible(transition) {
                    return Err(CovariateError::InvalidSpec("transition matrix is reducible".into()));
                }
            }
        }
        Ok(())
    }

    /// Short content hash of the canonical JSON form.
    pub fn spec_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Stationary vector of a finite-state chain (power iteration on the lazy
    /// chain `(P + I) / 2`, stopped when successive iterates differ by < 1e-12
    /// in L1).
    pub fn stationary_vector(&self) -> Option<Vec<f64>> {
        let CovariateProcessSpec::FiniteStateMarkov { transition, .. } = self else {
            return None;
        };
        Some(power_iteration(transition))
    }

    /// One draw from the stationary marginal of `X_0`.
    pub fn stationary_draw<R: RngCore + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            CovariateProcessSpec::Constant { value } => value.clone(),
            CovariateProcessSpec::Iid { marginal, dim } => (0..*dim).map(|_| marginal.draw(rng)).collect(),
            CovariateProcessSpec::Ar1 { a, noise, dim } => (0..*dim)
                .map(|_| match *noise {
                    Marginal::Gaussian { mean, sd } => {
                        let u = open_uniform(rng);
                        mean / (1.0 - a) + sd / (1.0 - a * a).sqrt() * normal_quantile(u)
                    }
                    _ => {
                        let mut x = 0.0;
                        for _ in 0..=ar1_burn_in(*a) {
                            x = a * x + noise.draw(rng);
                        }
                        x
                    }
                })
                .collect(),
            CovariateProcessSpec::FiniteStateMarkov { states, .. } => {
                let pi = self.stationary_vector().expect("finite chain");
                let idx = invert_row(&pi, open_uniform(rng));
                states[idx].clone()
            }
        }
    }
}

fn power_iteration(p: &[Vec<f64>]) -> Vec<f64> {
    let k = p.len();
    let mut pi = vec![1.0 / k as f64; k];
    for _ in 0..10_000_000 {
        let mut next = vec![0.0; k];
        for (i, row) in p.iter().enumerate() {
            for (j, pij) in row.iter().enumerate() {
                next[j] += 0.5 * pi[i] * pij;
            }
            next[i] += 0.5 * pi[i];
        }
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|v| *v /= total);
        let diff: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if diff < 1e-12 {
            break;
        }
    }
    pi
}

fn reach(adj: &dyn Fn(usize, usize) -> bool, k: usize) -> Vec<bool> {
    let mut seen = vec![false; k];
    let mut stack = vec![0usize];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for j in 0..k {
            if !seen[j] && adj(i, j) {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen
}

fn is_irreducible(p: &[Vec<f64>]) -> bool {
    let k = p.len();
    if k == 0 {
        return false;
    }
    let fwd = reach(&|i, j| p[i][j] > 0.0, k);
    let bwd = reach(&|i, j| p[j][i] > 0.0, k);
    fwd.iter().all(|&b| b) && bwd.iter().all(|&b| b)
}

/// Smallest index whose cumulative probability reaches `u`.
fn invert_row(row: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (j, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    row.iter().rposition(|p| *p > 0.0).unwrap_or(row.len() - 1)
}

/// Burn-in length: at least `10 * ceil(1 / (1 - |a|))` and long enough that
/// `|a|^J < 1e-17`.
pub fn ar1_burn_in(a: f64) -> usize {
    if a == 0.0 {
        return 0;
    }
    let base = 10.0 * (1.0 / (1.0 - a.abs())).ceil();
    let decay = ((1e-17f64).ln() / a.abs().ln()).ceil();
    base.max(decay) as usize
}

/// A realization of the environment on `[t_min, t_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariatePath {
    pub t_min: i64,
    pub t_max: i64,
    pub dim: usize,
    pub values: Vec<f64>,
    pub seed: u64,
    pub spec_hash: String,
}

impl CovariatePath {
    pub fn len(&self) -> usize {
        (self.t_max - self.t_min + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn covers(&self, t0: i64, t1: i64) -> bool {
        t0 >= self.t_min && t1 <= self.t_max
    }

    pub fn at(&self, t: i64) -> &[f64] {
        assert!(t >= self.t_min && t <= self.t_max, "time {t} outside path");
        let i = (t - self.t_min) as usize * self.dim;
        &self.values[i..i + self.dim]
    }

    pub fn restrict(&self, t0: i64, t1: i64) -> Option<CovariatePath> {
        if !self.covers(t0, t1) || t0 > t1 {
            return None;
        }
        let i0 = (t0 - self.t_min) as usize * self.dim;
        let i1 = (t1 - self.t_min + 1) as usize * self.dim;
        Some(CovariatePath {
            t_min: t0,
            t_max: t1,
            dim: self.dim,
            values: self.values[i0..i1].to_vec(),
            seed: self.seed,
            spec_hash: self.spec_hash.clone(),
        })
    }

    /// CSV rows `t, x_1..x_d`.
    pub fn to_csv(&self) -> String {
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.dim).map(|k| format!("x_{k}")));
        let rows = (self.t_min..=self.t_max).map(|t| {
            let mut row = vec![t.to_string()];
            row.extend(self.at(t).iter().map(|v| crate::io::fmt_float(*v)));
            row
        });
        crate::io::csv_string(&header, rows)
    }
}

fn ar1_anchor_value(a: f64, noise: &Marginal, fam: &StreamFamily, comp: u64, anchor: i64) -> f64 {
    let burn = ar1_burn_in(a) as i64;
    let mut x = match *noise {
        Marginal::Gaussian { mean, sd } => {
            let mut rng = fam.at(comp | (1 << 32), anchor);
            mean / (1.0 - a) + sd / (1.0 - a * a).sqrt() * normal_quantile(open_uniform(&mut rng))
        }
        _ => 0.0,
    };
    for k in (anchor - burn)..=anchor {
        x = a * x + noise.draw(&mut fam.at(comp, k));
    }
    x
}

fn fsm_update(transition: &[Vec<f64>], state: usize, u: f64) -> usize {
    invert_row(&transition[state], u)
}

fn fsm_uniform(fam: &StreamFamily, t: i64) -> f64 {
    open_uniform(&mut fam.at(0, t))
}

/// Value of the grand-coupled chain at `t`, obtained by coupling from the past.
fn fsm_state_at(transition: &[Vec<f64>], pi: &[f64], fam: &StreamFamily, t: i64) -> usize {
    let k = transition.len();
    let mut lookback = 1i64;
    while lookback <= CFTP_MAX_LOOKBACK {
        let mut states: Vec<usize> = (0..k).collect();
        for s in (t - lookback + 1)..=t {
            let u = fsm_uniform(fam, s);
            for st in states.iter_mut() {
                *st = fsm_update(transition, *st, u);
            }
        }
        if states.iter().all(|&s| s == states[0]) {
            return states[0];
        }
        lookback *= 2;
    }
    // No coalescence (e.g. a periodic chain): start from a stationary draw at
    // an aligned anchor.
    let anchor = (t - CFTP_MAX_LOOKBACK).div_euclid(CFTP_MAX_LOOKBACK) * CFTP_MAX_LOOKBACK;
    let mut state = invert_row(pi, open_uniform(&mut fam.at(1, anchor)));
    for s in (anchor + 1)..=t {
        state = fsm_update(transition, state, fsm_uniform(fam, s));
    }
    state
}

/// Sample the environment on `[t_min, t_max]`. The value at each time is a
/// pure function of `(spec, seed, t)`.
pub fn generate_path(
    spec: &CovariateProcessSpec,
    t_min: i64,
    t_max: i64,
    seed: u64,
) -> Result<CovariatePath, CovariateError> {
    spec.validate()?;
    if t_max < t_min {
        return Err(CovariateError::EmptyRange(t_min, t_max));
    }
    let dim = spec.dim();
    let len = (t_max - t_min + 1) as usize;
    let fam = StreamFamily::new(seed, domain::COVARIATE);
    let mut values = Vec::with_capacity(len * dim);
    match spec {
        CovariateProcessSpec::Constant { value } => {
            for _ in 0..len {
                values.extend_from_slice(value);
            }
        }
        CovariateProcessSpec::Iid { marginal, dim } => {
            for t in t_min..=t_max {
                for c in 0..*dim {
                    values.push(marginal.draw(&mut fam.at(c as u64, t)));
                }
            }
        }
        CovariateProcessSpec::Ar1 { a, noise, dim } => {
            let mut cols: Vec<Vec<f64>> = Vec::with_capacity(*dim);
            for c in 0..*dim as u64 {
                let mut col = Vec::with_capacity(len);
                let anchor0 = t_min.div_euclid(AR1_BLOCK) * AR1_BLOCK;
                let mut x = ar1_anchor_value(*a, noise, &fam, c, anchor0);
                for k in (anchor0 + 1)..t_min {
                    x = a * x + noise.draw(&mut fam.at(c, k));
                }
                for t in t_min..=t_max {
                    if t == anchor0 && t == t_min {
                        // already the anchor value
                    } else if t.rem_euclid(AR1_BLOCK) == 0 {
                        x = ar1_anchor_value(*a, noise, &fam, c, t);
                    } else {
                        x = a * x + noise.draw(&mut fam.at(c, t));
                    }
                    col.push(x);
                }
                cols.push(col);
            }
            for i in 0..len {
                for col in &cols {
                    values.push(col[i]);
                }
            }
        }
        CovariateProcessSpec::FiniteStateMarkov { states, transition } => {
            let pi = spec.stationary_vector().expect("finite chain");
            let mut state = fsm_state_at(transition, &pi, &fam, t_min);
            values.extend_from_slice(&states[state]);
            for t in (t_min + 1)..=t_max {
                state = fsm_update(transition, state, fsm_uniform(&fam, t));
                values.extend_from_slice(&states[state]);
            }
        }
    }
    Ok(CovariatePath {
        t_min,
        t_max,
        dim,
        values,
        seed,
        spec_hash: spec.spec_hash(),
    })
}

/// A covariate-dependent coefficient `x -> c(x)`.
///
/// The first five variants are the primitive menu; the rest are combinators
/// used when deriving contraction constants and growth envelopes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "map", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoefficientMap {
    Constant { c: f64 },
    /// `c0 + c1 * sum_k |x_k|`
    AffineAbs { c0: f64, c1: f64 },
    /// `c0 + c1 * sum_k x_k` (signed)
    Affine { c0: f64, c1: f64 },
    /// `exp(c0 + c1 * sum_k x_k)`
    ExpAffine { c0: f64, c1: f64 },
    /// Value attached to each finite state, matched on the first coordinate.
    Table { keys: Vec<f64>, values: Vec<f64> },
    /// `scale * (sum_k |x_k|)^power`
    PowAbs { scale: f64, power: f64 },
    Abs { of: Box<CoefficientMap> },
    PositivePart { of: Box<CoefficientMap> },
    Scaled { factor: f64, of: Box<CoefficientMap> },
    Sum { terms: Vec<CoefficientMap> },
    Max { terms: Vec<CoefficientMap> },
    Product { factors: Vec<CoefficientMap> },
}

impl CoefficientMap {
    pub fn constant(c: f64) -> Self {
        CoefficientMap::Constant { c }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            CoefficientMap::Constant { c } => *c,
            CoefficientMap::AffineAbs { c0, c1 } => c0 + c1 * x.iter().map(|v| v.abs()).sum::<f64>(),
            CoefficientMap::Affine { c0, c1 } => c0 + c1 * x.iter().sum::<f64>(),
            CoefficientMap::ExpAffine { c0, c1 } => (c0 + c1 * x.iter().sum::<f64>()).exp(),
            CoefficientMap::Table { keys, values } => {
                let key = x.first().copied().unwrap_or(0.0);
                let (idx, _) = keys
                    .iter()
                    .enumerate()
                    .min_by(|a, b| (a.1 - key).abs().total_cmp(&(b.1 - key).abs()))
                    .expect("nonempty table");
                values[idx]
            }
            CoefficientMap::PowAbs { scale, power } => {
                scale * x.iter().map(|v| v.abs()).sum::<f64>().powf(*power)
            }
            CoefficientMap::Abs { of } => of.eval(x).abs(),
            CoefficientMap::PositivePart { of } => of.eval(x).max(0.0),
            CoefficientMap::Scaled { factor, of } => factor * of.eval(x),
            CoefficientMap::Sum { terms } => terms.iter().map(|t| t.eval(x)).sum(),
            CoefficientMap::Max { terms } => terms.iter().map(|t| t.eval(x)).fold(f64::NEG_INFINITY, f64::max),
            CoefficientMap::Product { factors } => factors.iter().map(|t| t.eval(x)).product(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            CoefficientMap::Table { keys, values } => {
                if keys.is_empty() || keys.len() != values.len() {
                    return Err("table needs matching nonempty keys and values".into());
                }
            }
            CoefficientMap::PowAbs { power, .. } if *power < 0.0 => {
                return Err("power must be nonnegative".into());
            }
            CoefficientMap::Abs { of } | CoefficientMap::PositivePart { of } | CoefficientMap::Scaled { of, .. } => {
                of.validate()?
            }
            CoefficientMap::Sum { terms } | CoefficientMap::Max { terms } | CoefficientMap::Product { factors: terms } => {
                if terms.is_empty() {
                    return Err("combinator needs at least one term".into());
                }
                for t in terms {
                    t.validate()?;
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self {
            CoefficientMap::Constant { c } => Some(*c),
            CoefficientMap::AffineAbs { c0, c1 } | CoefficientMap::Affine { c0, c1 } if *c1 == 0.0 => Some(*c0),
            CoefficientMap::ExpAffine { c0, c1 } if *c1 == 0.0 => Some(c0.exp()),
            CoefficientMap::PowAbs { scale, .. } if *scale == 0.0 => Some(0.0),
            _ => None,
        }
    }

    /// Structural guarantee that `eval(x) >= 0` for every `x`.
    pub fn is_nonnegative(&self) -> bool {
        self.lower_bound() >= 0.0
    }

    /// A structural lower bound valid for every covariate value.
    pub fn lower_bound(&self) -> f64 {
        match self {
            CoefficientMap::Constant { c } => *c,
            CoefficientMap::AffineAbs { c0, c1 } => {
                if *c1 >= 0.0 {
                    *c0
                } else {
                    f64::NEG_INFINITY
                }
            }
            CoefficientMap::Affine { c0, c1 } => {
                if *c1 == 0.0 {
                    *c0
                } else {
                    f64::NEG_INFINITY
                }
            }
            CoefficientMap::ExpAffine { .. } => 0.0,
            CoefficientMap::Table { values, .. } => values.iter().copied().fold(f64::INFINITY, f64::min),
            CoefficientMap::PowAbs { scale, .. } => {
                if *scale >= 0.0 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            CoefficientMap::Abs { .. } | CoefficientMap::PositivePart { .. } => 0.0,
            CoefficientMap::Scaled { factor, of } => {
                if *factor == 0.0 {
                    0.0
                } else if *factor > 0.0 {
                    factor * of.lower_bound()
                } else {
                    f64::NEG_INFINITY
                }
            }
            CoefficientMap::Sum { terms } => terms.iter().map(|t| t.lower_bound()).sum(),
            CoefficientMap::Max { terms } => terms.iter().map(|t| t.lower_bound()).fold(f64::NEG_INFINITY, f64::max),
            CoefficientMap::Product { factors } => {
                let lbs: Vec<f64> = factors.iter().map(|t| t.lower_bound()).collect();
                if lbs.iter().all(|&v| v >= 0.0) {
                    lbs.iter().product()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    /// `|c(x)|`, folded when the sign is structurally known.
    pub fn abs(&self) -> Self {
        if let Some(c) = self.as_constant() {
            return CoefficientMap::constant(c.abs());
        }
        if self.is_nonnegative() {
            return self.clone();
        }
        CoefficientMap::Abs { of: Box::new(self.clone()) }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        if let Some(c) = self.as_constant() {
            return CoefficientMap::constant(factor * c);
        }
        if factor == 1.0 {
            return self.clone();
        }
        CoefficientMap::Scaled {
            factor,
            of: Box::new(self.clone()),
        }
    }

    pub fn positive_part(&self) -> Self {
        if let Some(c) = self.as_constant() {
            return CoefficientMap::constant(c.max(0.0));
        }
        if self.is_nonnegative() {
            return self.clone();
        }
        CoefficientMap::PositivePart { of: Box::new(self.clone()) }
    }

    pub fn sum_of(terms: Vec<CoefficientMap>) -> Self {
        let mut constant = 0.0;
        let mut rest = Vec::new();
        for t in terms {
            match t.as_constant() {
                Some(c) => constant += c,
                None => rest.push(t),
            }
        }
        if rest.is_empty() {
            return CoefficientMap::constant(constant);
        }
        if constant != 0.0 {
            rest.push(CoefficientMap::constant(constant));
        }
        if rest.len() == 1 {
            rest.pop().expect("one term")
        } else {
            CoefficientMap::Sum { terms: rest }
        }
    }

    pub fn max_of(terms: Vec<CoefficientMap>) -> Self {
        let mut constant: Option<f64> = None;
        let mut rest: Vec<CoefficientMap> = Vec::new();
        for t in terms {
            match t.as_constant() {
                Some(c) => constant = Some(constant.map_or(c, |m: f64| m.max(c))),
                None => {
                    if !rest.contains(&t) {
                        rest.push(t)
                    }
                }
            }
        }
        if rest.is_empty() {
            return CoefficientMap::constant(constant.unwrap_or(f64::NEG_INFINITY));
        }
        if let Some(c) = constant {
            rest.push(CoefficientMap::constant(c));
        }
        if rest.len() == 1 {
            rest.pop().expect("one term")
        } else {
            CoefficientMap::Max { terms: rest }
        }
    }

    pub fn product_of(factors: Vec<CoefficientMap>) -> Self {
        let mut constant = 1.0;
        let mut rest = Vec::new();
        for t in factors {
            match t.as_constant() {
                Some(c) => constant *= c,
                None => rest.push(t),
            }
        }
        if rest.is_empty() || constant == 0.0 {
            return CoefficientMap::constant(constant);
        }
        let base = if rest.len() == 1 {
            rest.pop().expect("one factor")
        } else {
            CoefficientMap::Product { factors: rest }
        };
        base.scaled(constant)
    }

    pub fn describe(&self) -> String {
        serde_json::to_string(self).expect("map serializes")
    }
}

/// Three-way sign decision at 99% confidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignVerdict {
    Negative,
    Nonnegative,
    Inconclusive,
}

/// Two-sided 99% normal quantile.
pub const Z99: f64 = 2.576;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub verdict: SignVerdict,
    /// Samples whose value was floored at 1e-300 before taking the log.
    pub n_floored: usize,
}

impl MomentEstimate {
    fn from_samples(samples: &[f64], n_floored: usize) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = if samples.len() > 1 {
            samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let std_error = (var / n).sqrt();
        let verdict = if mean + Z99 * std_error < 0.0 {
            SignVerdict::Negative
        } else if mean - Z99 * std_error > 0.0 {
            SignVerdict::Nonnegative
        } else {
            SignVerdict::Inconclusive
        };
        MomentEstimate {
            mean,
            std_error,
            n_samples: samples.len(),
            verdict,
            n_floored,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogKind {
    /// `ln v`
    Log,
    /// `ln max(v, 1)`
    LogPlus,
}

const LOG_FLOOR: f64 = 1e-300;
pub const MIN_MOMENT_SAMPLES: usize = 100;

/// Draws `n` independent stationary covariates, sample `i` from stream `i`.
pub fn stationary_sample(spec: &CovariateProcessSpec, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let fam = StreamFamily::new(seed, domain::MOMENT);
    (0..n)
        .map(|i| {
            let mut rng: ChaCha8Rng = fam.at(i as u64, 0);
            spec.stationary_draw(&mut rng)
        })
        .collect()
}

/// Monte Carlo estimate of `E ln |g(X_0)|` (or its `ln^+` variant).
pub fn log_moment_of<F: Fn(&[f64]) -> f64>(
    g: F,
    spec: &CovariateProcessSpec,
    n: usize,
    seed: u64,
    kind: LogKind,
) -> Result<MomentEstimate, CovariateError> {
    spec.validate()?;
    if n < MIN_MOMENT_SAMPLES {
        return Err(CovariateError::TooFewSamples {
            min: MIN_MOMENT_SAMPLES,
            got: n,
        });
    }
    let draws = stationary_sample(spec, n, seed);
    let mut floored = 0usize;
    let samples: Vec<f64> = draws
        .iter()
        .map(|x| {
            let mut v = g(x).abs();
            if !(v >= LOG_FLOOR) {
                floored += 1;
                v = LOG_FLOOR;
            }
            match kind {
                LogKind::Log => v.ln(),
                LogKind::LogPlus => v.max(1.0).ln(),
            }
        })
        .collect();
    if floored == n {
        return Err(CovariateError::DegenerateMap);
    }
    Ok(MomentEstimate::from_samples(&samples, floored))
}

pub fn log_moment_estimate(
    map: &CoefficientMap,
    spec: &CovariateProcessSpec,
    n: usize,
    seed: u64,
) -> Result<MomentEstimate, CovariateError> {
    log_moment_of(|x| map.eval(x), spec, n, seed, LogKind::Log)
}

/// Plain Monte Carlo mean of `g(X_0)` with its standard error.
pub fn mean_of<F: Fn(&[f64]) -> f64>(g: F, spec: &CovariateProcessSpec, n: usize, seed: u64) -> (f64, f64) {
    let vals: Vec<f64> = stationary_sample(spec, n, seed).iter().map(|x| g(x)).collect();
    let m = vals.iter().sum::<f64>() / n as f64;
    let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n as f64 - 1.0).max(1.0);
    (m, (var / n as f64).sqrt())
}
