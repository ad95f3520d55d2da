//! Property tests for the stochastic-approximation recursion.

use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use softq::features::{build_features, certify_kappa, FeatureKind, KappaMethod};
use softq::mdp::{chain_kernel, random_mdp, Policy};
use softq::oracle::{mean_field, solve_theta_star, Temperature};
use softq::parallel::Parallelism;
use softq::sa::{run, RunConfig, ScheduleCheck, StepSchedule};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn mean_step_contracts_up_to_the_remainder(seed in 0u64..500) {
        let m = random_mdp(5, 3, 2, 0.5, seed).unwrap();
        let c = chain_kernel(&m, &Policy::uniform(5, 3)).unwrap();
        let f = build_features(FeatureKind::RandomProjection, &m, 6, seed).unwrap();
        let kappa = certify_kappa(&f, &m, &c, KappaMethod::ExactEnumeration, 0, 0, Parallelism::Sequential).unwrap().kappa;
        prop_assume!(kappa > 0.0);
        let lambda = Temperature::new(0.5).unwrap();
        let star = solve_theta_star(&f, &m, &c, lambda, 1e-12, 10_000).unwrap().theta;
        let at_star = mean_field(&star, &f, &m, &c, lambda);
        let coef = m.discount() / (2.0 * lambda.get());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..200 {
            let raw = DVector::from_fn(6, |_, _| rng.sample::<f64, _>(StandardNormal));
            let delta = raw.normalize() * rng.random_range(0.0..0.1);
            let theta: Vec<f64> = star.iter().zip(delta.iter()).map(|(a, b)| a + b).collect();
            let alpha = rng.random_range(0.0..kappa / 8.0);
            let step = &delta + (mean_field(&theta, &f, &m, &c, lambda) - &at_star) * alpha;
            let r = delta.norm();
            prop_assert!(step.norm() <= (1.0 - alpha * kappa / 4.0) * r + coef * alpha * r * r + 1e-10);
        }
    }

    #[test]
    fn streaming_average_equals_offline_mean(seed in any::<u64>(), n in 1u64..3000, c0 in 0.05f64..2.0) {
        let m = random_mdp(3, 2, 2, 0.5, 1).unwrap();
        let c = chain_kernel(&m, &Policy::uniform(3, 2)).unwrap();
        let f = build_features(FeatureKind::RandomProjection, &m, 3, 1).unwrap();
        let lambda = Temperature::new(0.5).unwrap();
        let schedule = StepSchedule::new(c0, 10.0, 0.75).unwrap();
        let mut config = RunConfig::new(n, seed, lambda, schedule);
        config.checkpoints = softq::sa::geometric_grid(1, n, 8);
        config.retain_iterates = true;
        let r = run(&m, &c, &f, &config, &ScheduleCheck::Override).unwrap();
        let its = r.iterates.as_ref().unwrap();
        prop_assert_eq!(its.len() as u64, n);
        let avg = r.pr_average.as_ref().unwrap();
        for i in 0..3 {
            let mean = its.iter().map(|v| v[i]).sum::<f64>() / n as f64;
            prop_assert!((mean - avg[i]).abs() <= 1e-12 * (1.0 + mean.abs()));
        }
    }
}
