//! Special functions and quadrature shared by the kernels and verifiers.

use statrs::function::erf::{erfc, erfc_inv};

pub const SQRT_2: f64 = std::f64::consts::SQRT_2;
pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Upper tail `1 - Φ(x)` without cancellation.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * erfc(x / SQRT_2)
}

/// `ln(1 - Φ(x))`, accurate far into the upper tail.
pub fn ln_normal_sf(x: f64) -> f64 {
    if x < 30.0 {
        normal_sf(x).ln()
    } else {
        let x2 = x * x;
        // Asymptotic (Mills ratio) expansion.
        -0.5 * x2 - (x * (2.0 * std::f64::consts::PI).sqrt()).ln()
            + (1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2)).ln()
    }
}

/// Standard normal quantile: inverse-erfc start polished by one Halley step.
pub fn normal_quantile(u: f64) -> f64 {
    let x = -SQRT_2 * erfc_inv(2.0 * u);
    if !x.is_finite() {
        return x;
    }
    let pdf = normal_pdf(x);
    if pdf == 0.0 {
        return x;
    }
    // residual of the tail on the side nearest u keeps relative accuracy
    let r = if u < 0.5 { normal_cdf(x) - u } else { (1.0 - u) - normal_sf(x) };
    let step = r / pdf;
    x - step / (1.0 + 0.5 * x * step)
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Error-free sum: returns `(s, e)` with `s = fl(a + b)` and `a + b = s + e` exactly.
pub fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let e = (a - (s - bb)) + (b - bb);
    (s, e)
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        kron += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    let value = kron * h;
    let err = ((kron - gauss) * h).abs();
    (value, err)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadrature {
    pub value: f64,
    pub error: f64,
    pub intervals: usize,
}

/// Globally adaptive Gauss–Kronrod (7/15) integration over `[a, b]` with
/// optional interior breakpoints. Returns `None` if `max_intervals` is
/// exhausted before the error estimate drops below `abs_tol`.
pub fn integrate<F: Fn(f64) -> f64>(
    f: F,
    breakpoints: &[f64],
    abs_tol: f64,
    max_intervals: usize,
) -> Option<Quadrature> {
    let mut pts: Vec<f64> = breakpoints.iter().copied().filter(|x| x.is_finite()).collect();
    pts.sort_by(|x, y| x.total_cmp(y));
    pts.dedup();
    if pts.len() < 2 {
        return None;
    }
    let mut pieces: Vec<(f64, f64, f64, f64)> = pts
        .windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| {
            let (v, e) = gk15(&f, w[0], w[1]);
            (w[0], w[1], v, e)
        })
        .collect();
    loop {
        let total_err: f64 = pieces.iter().map(|p| p.3).sum();
        if total_err <= abs_tol {
            let value = pieces.iter().map(|p| p.2).sum();
            return Some(Quadrature {
                value,
                error: total_err,
                intervals: pieces.len(),
            });
        }
        if pieces.len() >= max_intervals {
            return None;
        }
        let (idx, _) = pieces
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .expect("nonempty");
        let (a, b, _, _) = pieces.swap_remove(idx);
        let m = 0.5 * (a + b);
        if !(m > a && m < b) {
            return None;
        }
        let (v1, e1) = gk15(&f, a, m);
        let (v2, e2) = gk15(&f, m, b);
        pieces.push((a, m, v1, e1));
        pieces.push((m, b, v2, e2));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_tail_log_matches_direct_in_overlap() {
        for &x in &[1.0, 5.0, 20.0, 29.0] {
            let direct = normal_sf(x).ln();
            let asym = {
                let x2 = x * x;
                -0.5 * x2 - (x * (2.0 * std::f64::consts::PI).sqrt()).ln()
                    + (1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2)).ln()
            };
            if x >= 20.0 {
                assert!((direct - asym).abs() < 1e-6, "{x}: {direct} vs {asym}");
            }
        }
        assert!(ln_normal_sf(100.0) < -5000.0);
        assert!(ln_normal_sf(100.0).is_finite());
    }

    #[test]
    fn quantile_inverts_cdf() {
        for &u in &[1e-12, 0.01, 0.3, 0.5, 0.9, 1.0 - 1e-9] {
            let x = normal_quantile(u);
            assert!((normal_cdf(x) - u).abs() < 1e-12 * u.max(1e-3) + 1e-15);
        }
    }

    #[test]
    fn quadrature_handles_kinks() {
        let q = integrate(|x: f64| x.abs(), &[-1.0, 2.0], 1e-12, 1000).unwrap();
        assert!((q.value - 2.5).abs() < 1e-10);
        let q = integrate(normal_pdf, &[-12.0, 0.0, 12.0], 1e-13, 1000).unwrap();
        assert!((q.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_sum_is_exact() {
        let (s, e) = two_sum(1.0, 1e-20);
        assert_eq!(s, 1.0);
        assert_eq!(e, 1e-20);
    }
}
