use modelloop::config::ExecutionMode;
use modelloop::{
    basel_bound, make_covariance, run_experiment, run_trial, theorem1_weights, CovarianceSpec, DataDistribution,
    ExperimentConfig, LoopOptions, LoopState, RngStream, Strategy, Weights,
};
use proptest::prelude::*;
use proptest::strategy::Strategy as _;

fn distribution(dim: usize, sigma: f64) -> DataDistribution {
    let w: Vec<f64> = (0..dim).map(|i| 1.0 - 0.3 * i as f64).collect();
    DataDistribution::new(
        make_covariance(&CovarianceSpec::Isotropic(dim)).unwrap(),
        Weights::from_slice(&w).unwrap(),
        sigma,
    )
    .unwrap()
}

fn rel_close(a: &Weights, b: &Weights, tol: f64) -> bool {
    let scale = a.as_vector().amax().max(b.as_vector().amax()).max(1.0);
    (a.as_vector() - b.as_vector()).amax() <= tol * scale
}

fn accumulate_matches_closed_form(dim: usize, samples: usize, n: usize, seed: u64) -> bool {
    let dist = distribution(dim, 1.0);
    let options = LoopOptions {
        record_noise: true,
        ..LoopOptions::default()
    };
    let mut rng = RngStream::new(seed, 0);
    let mut state = LoopState::initialize(&dist, samples, options, &mut rng).unwrap();
    for _ in 1..n {
        state.step(Strategy::Accumulate, &dist, &mut rng).unwrap();
    }
    let closed = theorem1_weights(state.base_design(), state.noise_ledger().unwrap(), dist.true_weights()).unwrap();
    rel_close(state.current_weights(), &closed, 1e-8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn accumulate_weights_follow_closed_form(
        (dim, samples) in (1usize..=20).prop_flat_map(|d| (Just(d), (d + 2)..=200)),
        n in 1usize..=50,
        seed in any::<u64>(),
    ) {
        prop_assert!(accumulate_matches_closed_form(dim, samples, n, seed));
    }

    #[test]
    fn execution_modes_agree(
        dim in 1usize..8,
        extra in 2usize..30,
        n in 1usize..15,
        seed in any::<u64>(),
    ) {
        let mut cfg = ExperimentConfig::new(Strategy::Accumulate, dim, dim + extra, 1.0, n, 2, seed);
        let fast = run_trial(&cfg, &mut RngStream::new(seed, 0)).unwrap();
        cfg.execution_mode = ExecutionMode::Materialized;
        let slow = run_trial(&cfg, &mut RngStream::new(seed, 0)).unwrap();
        for (a, b) in fast.per_iteration_error.iter().zip(&slow.per_iteration_error) {
            prop_assert!((a - b).abs() <= 1e-8 * a.abs().max(b.abs()).max(1e-300));
        }
    }

    #[test]
    fn noiseless_loops_stay_at_truth(dim in 1usize..6, extra in 1usize..10, n in 1usize..12, seed in any::<u64>()) {
        for s in Strategy::ALL {
            for mode in [ExecutionMode::SufficientStats, ExecutionMode::Materialized] {
                let mut cfg = ExperimentConfig::new(s, dim, dim + extra, 0.0, n, 2, seed);
                cfg.execution_mode = mode;
                let r = run_trial(&cfg, &mut RngStream::new(seed, 3)).unwrap();
                prop_assert!(r.per_iteration_error.iter().all(|e| *e < 1e-24), "{s}: {:?}", r.per_iteration_error);
            }
        }
    }

    #[test]
    fn strategies_coincide_at_first_fit(dim in 1usize..8, extra in 1usize..20, seed in any::<u64>()) {
        let dist = distribution(dim, 0.7);
        let first: Vec<Weights> = Strategy::ALL
            .iter()
            .map(|_| {
                LoopState::initialize(&dist, dim + extra, LoopOptions::default(), &mut RngStream::new(seed, 9))
                    .unwrap()
                    .current_weights()
                    .clone()
            })
            .collect();
        prop_assert!(first.windows(2).all(|w| w[0] == w[1]));
    }
}

#[test]
fn fixed_closed_form_sweep() {
    for seed in 0..100 {
        assert!(accumulate_matches_closed_form(5, 20, 30, seed), "seed {seed}");
    }
}

#[test]
fn accumulate_stays_below_basel_bound() {
    let cfg = ExperimentConfig::new(Strategy::Accumulate, 10, 100, 1.0, 100, 1_000, 42);
    let agg = run_experiment(&cfg).unwrap();
    let bound = basel_bound(1.0, 10, 100).unwrap();
    for (m, se) in agg.per_iteration_mean.iter().zip(&agg.per_iteration_stderr) {
        assert!(*m <= bound + 4.0 * se, "{m} > {bound} + 4·{se}");
    }
}

#[test]
fn stderr_halves_when_trials_quadruple() {
    let small = run_experiment(&ExperimentConfig::new(Strategy::Replace, 5, 30, 1.0, 5, 2_000, 8)).unwrap();
    let large = run_experiment(&ExperimentConfig::new(Strategy::Replace, 5, 30, 1.0, 5, 8_000, 8)).unwrap();
    for (s, l) in small.per_iteration_stderr.iter().zip(&large.per_iteration_stderr) {
        let ratio = s / l;
        assert!((ratio / 2.0 - 1.0).abs() <= 0.2, "ratio {ratio}");
    }
}

#[test]
fn experiment_is_independent_of_thread_count() {
    let cfg = ExperimentConfig::new(Strategy::ReplaceMultiple, 4, 12, 1.0, 6, 500, 3);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_experiment(&cfg).unwrap())
    };
    let one = run(1);
    for threads in [2, 7] {
        let other = run(threads);
        assert_eq!(one.per_iteration_mean, other.per_iteration_mean);
        assert_eq!(one.per_iteration_stderr, other.per_iteration_stderr);
    }
}
