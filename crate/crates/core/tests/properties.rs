use obsdrive::benchmarks::poisson_ingarch_x;
use obsdrive::covariates::generate_path;
use obsdrive::engine::{couple_forward, w1_assignment, w1_line_flow, wasserstein1, EmpiricalMeasure};
use obsdrive::kernels::ObservationKernel;
use obsdrive::rng::{split_seed, StreamFamily};
use proptest::prelude::*;
use rand::RngCore;

fn measure(points: &[f64]) -> EmpiricalMeasure {
    EmpiricalMeasure::from_points(1, points.to_vec())
}

fn w1(a: &[f64], b: &[f64]) -> f64 {
    wasserstein1(&measure(a), &measure(b)).unwrap().value
}

fn pairs(v: &[f64]) -> Vec<(f64, f64)> {
    v.iter().map(|x| (*x, 0.0)).collect()
}

fn equal_sets(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1..max).prop_flat_map(|n| {
        (
            prop::collection::vec(-3.0f64..3.0, n),
            prop::collection::vec(-3.0f64..3.0, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn w1_is_a_bounded_symmetric_distance((a, b) in equal_sets(40)) {
        let ab = w1(&a, &b);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - w1(&b, &a)).abs() <= 1e-12);
        prop_assert_eq!(w1(&a, &a), 0.0);
    }

    #[test]
    fn line_flow_matches_assignment((a, b) in equal_sets(14)) {
        let flow = w1_line_flow(&pairs(&a), &pairs(&b));
        let hungarian = w1_assignment(&a, &b, 1);
        prop_assert!((flow - hungarian).abs() <= 1e-12, "{} vs {}", flow, hungarian);
    }

    #[test]
    fn w1_triangle_inequality(
        a in prop::collection::vec(-3.0f64..3.0, 20),
        b in prop::collection::vec(-3.0f64..3.0, 20),
        c in prop::collection::vec(-3.0f64..3.0, 20),
    ) {
        prop_assert!(w1(&a, &c) <= w1(&a, &b) + w1(&b, &c) + 1e-12);
    }

    #[test]
    fn shifting_costs_at_most_the_shift(a in prop::collection::vec(-3.0f64..3.0, 1..30), h in 0.0f64..1.0) {
        // Truncation can make a crossed matching cheaper than the shift itself.
        let b: Vec<f64> = a.iter().map(|x| x + h).collect();
        prop_assert!(w1(&a, &b) <= h + 1e-12);
        prop_assert!((w1(&a[..1], &b[..1]) - h).abs() <= 1e-12);
    }

    #[test]
    fn poisson_tv_is_within_bound(s in 0.0f64..60.0, h in 0.0f64..20.0) {
        let k = ObservationKernel::Poisson;
        let tv = k.tv_exact(&[s], &[s + h], 1e-10).unwrap();
        let back = k.tv_exact(&[s + h], &[s], 1e-10).unwrap();
        prop_assert!((0.0..=1.0).contains(&tv));
        prop_assert!((tv - back).abs() <= 1e-9);
        prop_assert!(tv <= k.tv_bound(&[s], &[s + h]).unwrap() + 1e-9);
    }

    #[test]
    fn benchmark_link_contracts_in_the_latent_argument(
        s in 0.0f64..50.0, sp in 0.0f64..50.0, y in 0u32..40, x in 0.0f64..1.0,
    ) {
        let link = &poisson_ingarch_x().link;
        let kappa = link.contraction_map().eval(&[x]);
        let gap = (link.apply_scalar(s, y as f64, &[x]) - link.apply_scalar(sp, y as f64, &[x])).abs();
        prop_assert!(gap <= kappa * (s - sp).abs() + 1e-12);
    }

    #[test]
    fn met_chains_stay_met(seed in any::<u64>(), gap in 0.0f64..30.0) {
        let model = poisson_ingarch_x();
        let path = generate_path(&model.covariates, 0, 149, seed).unwrap();
        let trace = couple_forward(&model, &[0.0], &[gap], &path, seed).unwrap();
        if let Some(t) = trace.meet_time {
            let first = (t - trace.t_min) as usize;
            prop_assert!(trace.met[first..].iter().all(|m| *m));
            prop_assert!(trace.y[first..] == trace.y_prime[first..]);
        }
        prop_assert_eq!(trace.censored, trace.meet_time.is_none());
    }

    #[test]
    fn streams_are_addressable(seed in any::<u64>(), replica in 0u64..1000, t in -500i64..500) {
        let fam = StreamFamily::new(seed, 7);
        let (mut a, mut b) = (fam.at(replica, t), StreamFamily::new(seed, 7).at(replica, t));
        prop_assert_eq!(a.next_u64(), b.next_u64());
        let mut other = fam.at(replica, t + 1);
        prop_assert_ne!(fam.at(replica, t).next_u64(), other.next_u64());
        prop_assert_ne!(split_seed(seed, replica), split_seed(seed, replica + 1));
    }
}
