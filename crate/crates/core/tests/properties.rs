//! Property tests for the invariants the pipeline relies on.

use proptest::prelude::*;

use remac_lab::envs::{generate_dataset, EnvConfig, OBS_DIM};
use remac_lab::harness::config::ExperimentConfig;
use remac_lab::harness::io::{decode_dataset, decode_policy, encode_dataset, encode_policy, round_to_f32};
use remac_lab::harness::metrics::{average_over_horizons, summarize, EpisodeStats};
use remac_lab::numerics::{Matrix, Rng};
use remac_lab::policy::{ActionChunk, ChunkRole, ChunkSpec, Normalizer, PolicyParams};
use remac_lab::remac::{delta_loss, masked_fm_loss, prefix_mask};
use remac_lab::runtime::{
    corrupt_delay, discretize_delay, estimate_delay, temporal_ensemble_action, valid_horizons, Corruption,
};
use remac_lab::sampler::{build_prior, FreezeLength, SamplerConfig};

const D: usize = 2;

fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, n)
}

fn loss_inputs() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (2usize..10).prop_flat_map(|p| {
        (
            Just(p),
            0..p,
            vec_strategy(p * D),
            vec_strategy(p * D),
            vec_strategy(p * D),
        )
    })
}

proptest! {
    #[test]
    fn delta_loss_equals_masked_loss((p, d, u_hat, u_base, u) in loss_inputs()) {
        let w = prefix_mask(d, p).unwrap().weights();
        let lm = masked_fm_loss(&u_hat, &u, &w, D).unwrap();
        let ld = delta_loss(&u_hat, &u_base, &u, &w, D).unwrap();
        prop_assert!((lm - ld).abs() <= 1e-9 * lm.max(1.0));
    }

    #[test]
    fn masked_rows_never_move_the_loss((p, d, u_hat, _b, u) in loss_inputs(), noise in vec_strategy(20)) {
        let w = prefix_mask(d, p).unwrap().weights();
        let base = masked_fm_loss(&u_hat, &u, &w, D).unwrap();
        let mut moved = u_hat.clone();
        for (i, v) in moved.iter_mut().take(d * D).enumerate() {
            *v += noise[i % noise.len()];
        }
        prop_assert_eq!(masked_fm_loss(&moved, &u, &w, D).unwrap(), base);
    }

    #[test]
    fn prefix_mask_counts(p in 1usize..16, d in 0usize..16) {
        prop_assume!(d < p);
        let m = prefix_mask(d, p).unwrap();
        prop_assert_eq!(m.len(), p);
        prop_assert_eq!(m.delay(), d);
        prop_assert_eq!(m.weights().iter().filter(|&&w| w == 1.0).count(), p - d);
        prop_assert!((0..p).all(|k| m.is_active(k) == (k >= d)));
    }

    #[test]
    fn valid_horizons_match_the_bounds(p in 1usize..16, d in 0usize..16) {
        let hs = valid_horizons(d, p);
        for h in 1..=p {
            prop_assert_eq!(hs.contains(&h), h >= d.max(1) && h + d <= p);
        }
    }

    #[test]
    fn discretization_is_monotone(a in 0.0f64..500.0, b in 0.0f64..500.0, dt in 1.0f64..60.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (dl, dh) = (discretize_delay(lo, dt).unwrap(), discretize_delay(hi, dt).unwrap());
        prop_assert!(dl <= dh);
        prop_assert!(dl as f64 * dt <= lo + 1e-9);
    }

    #[test]
    fn corrupted_delays_stay_in_range(d in 0usize..6, max_d in 0usize..6, seed in any::<u64>()) {
        let mut rng = Rng::new(seed, 0);
        for c in [Corruption::None, Corruption::Noisy, Corruption::Spiky, Corruption::NoisySpiky] {
            let v = corrupt_delay(d.min(max_d), c, max_d, &mut rng);
            prop_assert!(v <= max_d);
        }
    }

    #[test]
    fn estimate_is_the_window_maximum(history in prop::collection::vec(0usize..10, 1..20), window in 1usize..8) {
        let est = estimate_delay(&history, window).unwrap();
        let tail = &history[history.len().saturating_sub(window)..];
        prop_assert_eq!(est, *tail.iter().max().unwrap());
    }

    #[test]
    fn ensemble_is_a_convex_combination(
        actions in prop::collection::vec(vec_strategy(D), 1..6),
        decay in 0.0f64..2.0,
    ) {
        let proposals: Vec<(usize, &[f64])> = actions.iter().enumerate().map(|(i, a)| (i, a.as_slice())).collect();
        let out = temporal_ensemble_action(&proposals, decay).unwrap();
        for j in 0..D {
            let lo = actions.iter().map(|a| a[j]).fold(f64::MAX, f64::min);
            let hi = actions.iter().map(|a| a[j]).fold(f64::MIN, f64::max);
            prop_assert!(out[j] >= lo - 1e-9 && out[j] <= hi + 1e-9);
        }
    }

    #[test]
    fn prior_shifts_the_unexecuted_tail(p in 2usize..10, h_off in 0usize..10, values in vec_strategy(20)) {
        let h = 1 + h_off % p;
        let prev = ActionChunk {
            role: ChunkRole::PretrainedSample,
            values: Matrix::from_fn(p, D, |r, c| values[(r * D + c) % values.len()]),
        };
        let prior = build_prior(&prev, h, p, 0).unwrap();
        prop_assert_eq!(prior.valid_rows, p - h);
        for k in 0..p {
            let expect: Vec<f64> = if k < p - h { prev.values.row(k + h).to_vec() } else { vec![0.0; D] };
            prop_assert_eq!(prior.chunk.values.row(k), expect.as_slice());
        }
    }

    #[test]
    fn frozen_rows_never_cover_the_whole_chunk(p in 2usize..12, est in 0usize..20, h_off in 0usize..12) {
        let h = 1 + h_off % p;
        for freeze in [FreezeLength::Delay, FreezeLength::Overlap] {
            let cfg = SamplerConfig { freeze, ..SamplerConfig::default() };
            prop_assert!(cfg.frozen_rows(est, h, p) < p);
        }
    }

    #[test]
    fn normalizer_round_trips(
        mean in vec_strategy(D),
        scale in prop::collection::vec(0.1f64..4.0, D),
        chunk in vec_strategy(8 * D),
    ) {
        let norm = Normalizer { obs_mean: vec![0.0], obs_std: vec![1.0], act_mean: mean, act_std: scale };
        let m = Matrix::from_vec(8, D, chunk.clone()).unwrap();
        let back = norm.denorm_chunk(&norm.norm_chunk(&m), 8);
        for (a, b) in back.as_slice().iter().zip(&chunk) {
            prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn failures_count_at_the_cap(outcomes in prop::collection::vec((any::<bool>(), 1usize..300), 1..30)) {
        let cap = 300;
        let stats: Vec<EpisodeStats> = outcomes
            .iter()
            .enumerate()
            .map(|(i, &(ok, t))| EpisodeStats {
                strategy: "x".into(),
                d: 1,
                h: 2,
                seed: i as u64,
                success: ok,
                collided: false,
                completion_tick: if ok { t } else { cap },
                boundary_jump_sum: 0.0,
                boundary_count: 0,
                within_jump_sum: 0.0,
                within_count: 0,
                speed_sum: 0.0,
                accel_sum: 0.0,
                ticks: 1,
            })
            .collect();
        let m = summarize(&stats).unwrap();
        let expect: f64 = outcomes.iter().map(|&(ok, t)| if ok { t } else { cap } as f64).sum::<f64>() / outcomes.len() as f64;
        prop_assert!((m.mean_ticks - expect).abs() < 1e-9);
        let wins = outcomes.iter().filter(|o| o.0).count() as f64;
        prop_assert!((m.success_rate - wins / outcomes.len() as f64).abs() < 1e-12);
        let avg = average_over_horizons(std::slice::from_ref(&m)).unwrap();
        prop_assert_eq!(avg.success_rate, m.success_rate);
    }

    #[test]
    fn config_round_trips(episodes in 1usize..5000, delays in prop::collection::vec(0usize..8, 1..5), seed_dt in 1u32..100) {
        let mut cfg = ExperimentConfig::default();
        cfg.sweep.episodes = episodes;
        cfg.sweep.delays = delays;
        cfg.sweep.dt_ms = seed_dt as f64 * 0.5;
        prop_assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoints_round_trip_bitwise(seed in any::<u64>(), width in 2usize..12) {
        let spec = ChunkSpec::default();
        let mut p = PolicyParams::init(spec, OBS_DIM, &[width, width], Normalizer::identity(OBS_DIM, D), &mut Rng::new(seed, 1)).unwrap();
        round_to_f32(&mut p);
        prop_assert_eq!(decode_policy(&encode_policy(&p)).unwrap(), p);
    }

    #[test]
    fn datasets_round_trip(seed in any::<u64>(), episodes in 1usize..4) {
        let ds = generate_dataset(&EnvConfig::point_reach(), episodes, 8, seed);
        prop_assume!(ds.is_ok());
        let ds = ds.unwrap();
        let bytes = encode_dataset(&ds);
        let back = decode_dataset(&bytes).unwrap();
        prop_assert_eq!(encode_dataset(&back), bytes);
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn rng_forks_are_reproducible(seed in any::<u64>(), stream in any::<u64>(), path in prop::collection::vec(any::<u64>(), 0..4)) {
        let a = Rng::new(seed, stream).fork_path(&path).next_u64();
        let b = Rng::new(seed, stream).fork_path(&path).next_u64();
        prop_assert_eq!(a, b);
    }
}
