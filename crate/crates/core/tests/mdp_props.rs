//! Property tests for the observation chain.

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use softq::mdp::{balance_residual, chain_kernel, random_mdp, sample_trajectory, MixingTime, Policy, Start};

fn random_policy(ns: usize, na: usize, seed: u64) -> Policy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probs = Vec::with_capacity(ns * na);
    for _ in 0..ns {
        let row: Vec<f64> = (0..na).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = row.iter().sum();
        probs.extend(row.iter().map(|p| p / total));
    }
    Policy::new(ns, na, probs).unwrap()
}

fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn stationary_law_balances_and_factorizes(
        ns in 1usize..6,
        na in 1usize..4,
        branching in 1usize..6,
        seed in any::<u64>(),
    ) {
        let m = random_mdp(ns, na, branching.min(ns), 0.5, seed).unwrap();
        let pi = random_policy(ns, na, seed ^ 1);
        let c = chain_kernel(&m, &pi);
        // Reducible or periodic chains are rejected upstream; only certified ones count.
        prop_assume!(c.is_ok());
        let c = c.unwrap();
        let mu = c.stationary();
        prop_assert!(balance_residual(c.kernel(), mu) <= 1e-12);
        prop_assert!((mu.sum() - 1.0).abs() <= 1e-12);
        let nu = c.state_marginal();
        for (s, nu_s) in nu.iter().enumerate() {
            for a in 0..na {
                for (next, p) in m.next_dist(s, a).iter().enumerate() {
                    let z = (s * na + a) * ns + next;
                    prop_assert!((mu[z] - nu_s * pi.prob(s, a) * p).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn mixing_time_bound_holds_at_every_horizon(
        ns in 2usize..5,
        na in 1usize..3,
        seed in any::<u64>(),
    ) {
        let m = random_mdp(ns, na, 2, 0.5, seed).unwrap();
        let c = chain_kernel(&m, &Policy::uniform(ns, na)).unwrap();
        let horizon = 10 * c.n_triples();
        if let MixingTime::Certified(t_mix) = c.mixing_time() {
            let n = c.n_triples();
            let mu: Vec<f64> = c.stationary().iter().cloned().collect();
            let mut power = DMatrix::<f64>::identity(n, n);
            for t in 1..=horizon {
                power = &power * c.kernel();
                let worst = (0..n)
                    .map(|z| tv(power.row(z).transpose().as_slice(), &mu))
                    .fold(0.0, f64::max);
                prop_assert!(worst <= 0.25f64.powi((t / t_mix) as i32) + 1e-12, "t = {t}, t_mix = {t_mix}");
            }
        }
    }
}

#[test]
fn stationary_trajectory_means_match_the_stationary_law() {
    let m = random_mdp(5, 3, 2, 0.5, 4).unwrap();
    let c = chain_kernel(&m, &Policy::uniform(5, 3)).unwrap();
    let t_mix = c.mixing_time().certified().unwrap() as f64;
    let n = 1_000_000;
    let path = sample_trajectory(&m, c.behavior(), n, 9, Start::Stationary(&c)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..8 {
        let f: Vec<f64> = (0..c.n_triples()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let exact: f64 = f.iter().zip(c.stationary().iter()).map(|(a, b)| a * b).sum();
        let values: Vec<f64> = path.iter().map(|z| f[m.triple_index(*z)]).collect();
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((mean - exact).abs() <= 4.0 * sd / (n as f64).sqrt() * t_mix, "{mean} vs {exact}");
    }
}
