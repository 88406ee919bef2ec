//! Distributional checks of the observation kernels against independent oracles.

use obsdrive::kernels::{LocationDensity, ObservationKernel};
use obsdrive::numeric::{logistic, normal_cdf};
use obsdrive::rng::{open_uniform, StreamFamily};

fn uniforms(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = StreamFamily::new(seed, 99).at(0, 0);
    (0..n).map(|_| open_uniform(&mut rng)).collect()
}

/// Poisson pmf by the product recursion, independent of the crate's log-space form.
fn poisson_pmf(mean: f64, kmax: usize) -> Vec<f64> {
    let mut p = vec![(-mean).exp()];
    for k in 1..=kmax {
        p.push(p[k - 1] * mean / k as f64);
    }
    p
}

#[test]
fn poisson_draws_pass_chi_square() {
    let k = ObservationKernel::Poisson;
    let mean = 3.7;
    let n = 20_000;
    let probs = poisson_pmf(mean, 11);
    let mut counts = [0usize; 13];
    for u in uniforms(n, 1) {
        let y = k.sample_with_uniform(&[mean], u) as usize;
        counts[y.min(12)] += 1;
    }
    let tail = 1.0 - probs.iter().sum::<f64>();
    let expected: Vec<f64> = probs.iter().chain([tail].iter()).map(|p| p * n as f64).collect();
    let chi2: f64 = counts.iter().zip(&expected).map(|(o, e)| (*o as f64 - e).powi(2) / e).sum();
    // 12 degrees of freedom; 0.999 quantile is 32.9.
    assert!(chi2 < 32.9, "chi2 = {chi2}");
}

#[test]
fn poisson_pmf_matches_recursion() {
    let k = ObservationKernel::Poisson;
    for mean in [0.3, 4.0, 25.0, 180.0] {
        let oracle = poisson_pmf(mean, 400);
        for y in [0usize, 1, 5, 30, 200] {
            let got = k.pmf(&[mean], y as i64).unwrap();
            assert!((got - oracle[y]).abs() <= 1e-12 * oracle[y].max(1e-300), "mean {mean} y {y}");
        }
    }
}

#[test]
fn poisson_tv_matches_direct_sum() {
    let k = ObservationKernel::Poisson;
    for (a, b) in [(1.0, 2.0), (0.0, 0.5), (10.0, 13.0), (50.0, 50.01)] {
        let (p, q) = (poisson_pmf(a, 600), poisson_pmf(b, 600));
        let oracle = 0.5 * p.iter().zip(&q).map(|(x, y)| (x - y).abs()).sum::<f64>();
        let got = k.tv_exact(&[a], &[b], 1e-12).unwrap();
        assert!((got - oracle).abs() <= 1e-10, "{a} vs {b}: {got} {oracle}");
    }
}

#[test]
fn binary_tv_is_probability_gap() {
    let k = ObservationKernel::BernoulliLogit;
    for (a, b) in [(-1.0, 0.5), (0.0, 3.0), (2.0, 2.0001)] {
        let got = k.tv_exact(&[a], &[b], 1e-12).unwrap();
        assert!((got - (logistic(b) - logistic(a)).abs()).abs() <= 1e-14);
    }
}

#[test]
fn garch_tv_matches_closed_form() {
    let k = ObservationKernel::GarchGaussian { c_minus: 0.1 };
    for (s, sp) in [(1.0f64, 2.0f64), (0.5, 0.55), (3.0, 30.0)] {
        // The densities of N(0, s) and N(0, s') cross at +-x.
        let x = (s * sp * (sp / s).ln() / (sp - s)).sqrt();
        let oracle = 2.0 * (normal_cdf(x / s.sqrt()) - normal_cdf(x / sp.sqrt()));
        let got = k.tv_exact(&[s], &[sp], 1e-12).unwrap();
        assert!((got - oracle).abs() <= 1e-9, "{s} {sp}: {got} vs {oracle}");
    }
}

#[test]
fn gaussian_location_draws_pass_ks() {
    let k = ObservationKernel::Location {
        density: LocationDensity::Gaussian { sigma: 1.0 },
    };
    let mut ys: Vec<f64> = uniforms(10_000, 2).iter().map(|u| k.sample_with_uniform(&[0.7], *u)).collect();
    ys.sort_by(f64::total_cmp);
    let n = ys.len() as f64;
    let d = ys
        .iter()
        .enumerate()
        .map(|(i, y)| {
            let f = normal_cdf(y - 0.7);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max);
    // 0.999 critical value is 1.95 / sqrt(n).
    assert!(d < 1.95 / n.sqrt(), "KS distance {d}");
}

#[test]
fn multinomial_probabilities_sum_to_one() {
    let k = ObservationKernel::Multinomial { categories: 4 };
    let p = k.category_probs(&[0.3, -1.0, 2.0]).unwrap();
    assert_eq!(p.len(), 4);
    assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-15);
    // Softmax of (0, s): the first category has weight 1 / (1 + sum exp(s)).
    let denom = 1.0 + 0.3f64.exp() + (-1.0f64).exp() + 2.0f64.exp();
    assert!((p[0] - 1.0 / denom).abs() <= 1e-15);
}
