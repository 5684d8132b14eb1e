//! Acceptance suite: every criterion runs and prints one PASS/FAIL line.
//! The process exits non-zero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use remac_lab::adapters::{max_probe_gap, params_checksum, AdaptedPolicy, AdapterConfig};
use remac_lab::envs::{Dataset, EnvConfig, OBS_DIM};
use remac_lab::harness::config::{AblationAxis, ExperimentConfig};
use remac_lab::harness::pipeline::{finetune, generate, pretrain_base};
use remac_lab::harness::sweep::{
    ablation_variants, episode_seed, run_ablation, run_grid, run_kinematics, run_robustness, sweep_arms, EvalGrid,
    SweepOutput,
};
use remac_lab::numerics::{grad_check, Rng};
use remac_lab::policy::{integrate, ActionChunk, ChunkRole, ChunkSpec, Normalizer, PolicyParams, VelocityField};
use remac_lab::remac::{delta_grad, delta_loss, masked_fm_grad, masked_fm_loss, prefix_mask, total_loss, LossWeights};
use remac_lab::runtime::{
    corrupt_delay, discretize_delay, run_episode, valid_horizons, Corruption, DelaySpec, EpisodeSetup, ExecStrategy,
    StrategyKind,
};
use remac_lab::sampler::{gaussian_start, prefix_preserved_integrate, PriorChunk};

const MASTER: u64 = 0;
const P: usize = 8;
const D: usize = 2;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn normals(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

fn loss_identity() -> Outcome {
    let t = Instant::now();
    let mut rng = Rng::new(11, 0);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let d = rng.int_inclusive(0, P - 1);
        let w = prefix_mask(d, P).unwrap().weights();
        let (u_hat, u_base, u) = (
            normals(&mut rng, P * D),
            normals(&mut rng, P * D),
            normals(&mut rng, P * D),
        );
        let lm = masked_fm_loss(&u_hat, &u, &w, D).unwrap();
        let ld = delta_loss(&u_hat, &u_base, &u, &w, D).unwrap();
        worst = worst.max((ld - lm).abs() / lm.max(1.0));
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-9 && secs < 1.0,
        format!("max scaled gap {worst:.2e}, {secs:.3}s"),
    )
}

fn loss_locality() -> Outcome {
    let mut rng = Rng::new(12, 0);
    let mut changed = 0;
    for _ in 0..1000 {
        let d = rng.int_inclusive(1, P - 1);
        let w = prefix_mask(d, P).unwrap().weights();
        let (u_hat, u) = (normals(&mut rng, P * D), normals(&mut rng, P * D));
        let lm = masked_fm_loss(&u_hat, &u, &w, D).unwrap();
        let (mut u_hat2, mut u2) = (u_hat.clone(), u.clone());
        let k = rng.int_inclusive(0, d - 1);
        for j in 0..D {
            u_hat2[k * D + j] += 10.0 * rng.normal();
            u2[k * D + j] -= 10.0 * rng.normal();
        }
        let a = masked_fm_loss(&u_hat2, &u, &w, D).unwrap();
        let b = masked_fm_loss(&u_hat, &u2, &w, D).unwrap();
        changed += (a != lm) as usize + (b != lm) as usize;
    }
    outcome(
        changed == 0,
        format!("{changed} of 2000 perturbations changed the loss"),
    )
}

fn probe_policy(seed: u64) -> PolicyParams {
    let spec = ChunkSpec {
        horizon: 4,
        action_dim: D,
        exec_horizon: 2,
        integration_steps: 3,
    };
    let norm = Normalizer {
        obs_mean: vec![0.2, -0.1, 0.0],
        obs_std: vec![1.5, 0.5, 2.0],
        act_mean: vec![0.1, -0.3],
        act_std: vec![0.7, 1.9],
    };
    let mut p = PolicyParams::init(spec, 3, &[10, 10], norm, &mut Rng::new(seed, 2)).unwrap();
    let mut rng = Rng::new(seed, 9);
    let flat: Vec<f64> = p.net.flat_params().iter().map(|v| v + 0.1 * rng.normal()).collect();
    p.net.set_flat_params(&flat).unwrap();
    p
}

fn gradient_fidelity() -> Outcome {
    let t = Instant::now();
    let base = probe_policy(21);
    let weights = LossWeights::default();
    let mut worst = 0.0f64;
    for (trial, embed) in [(0u64, true), (1, false), (2, true)] {
        let cfg = AdapterConfig {
            mask_embedding: embed,
            ..AdapterConfig::default()
        };
        let mut rng = Rng::new(31, trial);
        let mut a = AdaptedPolicy::attach(base.clone(), &cfg, &mut rng).unwrap();
        let flat: Vec<f64> = a.flat_trainable().iter().map(|_| 0.3 * rng.normal()).collect();
        a.set_flat_trainable(&flat).unwrap();
        let (t0, t1) = base.layout().time;
        if let Some(first) = a.pairs.iter_mut().find(|p| p.layer == 0) {
            for r in 0..first.down.rows() {
                for c in t0..t1 {
                    first.down.set(r, c, 0.0);
                }
            }
        }
        let chunk = normals(&mut rng, 8);
        let obs = normals(&mut rng, 3);
        let u = normals(&mut rng, 8);
        let tau = rng.uniform();
        let mask = prefix_mask(1 + trial as usize, 4).unwrap();
        let w = mask.weights();
        let zeros = vec![0.0; 4];
        let u_base = base
            .net
            .predict(&base.layout().assemble(&chunk, &obs, tau, &zeros))
            .unwrap();
        let f = |theta: &[f64]| {
            let mut probe = a.clone();
            probe.set_flat_trainable(theta).unwrap();
            let (y, cache) = probe.forward_train(&chunk, &obs, tau, Some(&mask)).unwrap();
            let lm = masked_fm_loss(&y, &u, &w, D).unwrap();
            let ld = delta_loss(&y, &u_base, &u, &w, D).unwrap();
            let gm = masked_fm_grad(&y, &u, &w, D).unwrap();
            let gd = delta_grad(&y, &u_base, &u, &w, D).unwrap();
            let dy: Vec<f64> = gm
                .iter()
                .zip(&gd)
                .map(|(m, d)| weights.masked * m + weights.delta * d)
                .collect();
            (
                total_loss(lm, ld, weights),
                probe.backward_train(&cache, &dy).unwrap().flatten(),
            )
        };
        worst = worst.max(grad_check(f, &a.flat_trainable(), 1e-6));
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-4 && secs < 30.0,
        format!("max relative error {worst:.2e}, {secs:.2}s"),
    )
}

fn delay_machinery() -> Outcome {
    let d = discretize_delay(76.0, 20.0).unwrap();
    let counts: Vec<usize> = (0..5).map(|d| valid_horizons(d, P).len()).collect();
    let mut rng = Rng::new(41, 0);
    let n = 10_000;
    let mut noisy = [0usize; 3];
    for _ in 0..n {
        let v = corrupt_delay(3, Corruption::Noisy, 4, &mut rng);
        if (2..=4).contains(&v) {
            noisy[v - 2] += 1;
        }
    }
    let spikes = (0..n)
        .filter(|_| corrupt_delay(1, Corruption::Spiky, 4, &mut rng) == 4)
        .count();
    let noisy_ok = noisy.iter().all(|&c| (c as f64 / n as f64 - 1.0 / 3.0).abs() <= 0.03);
    let spike_rate = spikes as f64 / n as f64;
    let pass = d == 3 && counts == [8, 7, 5, 3, 1] && noisy_ok && (spike_rate - 0.10).abs() <= 0.02;
    outcome(
        pass,
        format!("d={d}, valid-h counts {counts:?}, noisy split {noisy:?}, spike rate {spike_rate:.3}"),
    )
}

/// Trained policies and evaluation results shared by the trend criteria.
struct Fixture {
    cfg: ExperimentConfig,
    dataset: Dataset,
    base: PolicyParams,
    adapter: AdaptedPolicy,
    tuned: PolicyParams,
    checksum_before: String,
    checksum_after: String,
}

fn build_fixture() -> Fixture {
    let cfg = ExperimentConfig::default();
    assert_eq!(cfg.env, EnvConfig::point_reach());
    let t = Instant::now();
    let dataset = generate(&cfg.env, cfg.data.episodes, &cfg.chunk, MASTER).unwrap();
    let (base, _) = pretrain_base(&dataset, cfg.chunk, &cfg.pretrain, MASTER).unwrap();
    eprintln!("  fixture: base policy ready after {:.0}s", t.elapsed().as_secs_f64());
    let checksum_before = params_checksum(&base);
    let run = finetune(&base, &dataset, &cfg.train, &cfg.adapter, MASTER).unwrap();
    let checksum_after = params_checksum(&base);
    eprintln!("  fixture: adapter ready after {:.0}s", t.elapsed().as_secs_f64());
    Fixture {
        cfg,
        dataset,
        base,
        adapter: run.adapter,
        tuned: run.merged,
        checksum_before,
        checksum_after,
    }
}

fn prefix_preservation(fx: &Fixture) -> Outcome {
    let mut chunks = 0;
    let mut violations = 0;
    for d in 1..5 {
        for h in valid_horizons(d, P) {
            let mut strategy = ExecStrategy::new(StrategyKind::Remac);
            strategy.params = fx.cfg.strategy;
            let setup = EpisodeSetup {
                env: &fx.cfg.env,
                policy: &fx.tuned,
                strategy,
                spec: ChunkSpec {
                    exec_horizon: h,
                    ..fx.cfg.chunk
                },
                delay: DelaySpec::for_delay(d, 20.0),
            };
            for i in 0..3 {
                let record = run_episode(setup, episode_seed(MASTER, d, h, i)).unwrap();
                for c in record.chunks.iter().filter(|c| c.prior.is_some()) {
                    let prior = c.prior.as_ref().unwrap();
                    chunks += 1;
                    let frozen = c.delay_estimate;
                    if c.frozen_rows != frozen || (0..frozen).any(|k| c.actions.row(k) != prior.row(k)) {
                        violations += 1;
                    }
                }
            }
        }
    }
    let mut rng = Rng::new(51, 0);
    let all_ones = prefix_mask(0, P).unwrap();
    let mut mismatches = 0;
    for _ in 0..20 {
        let obs = normals(&mut rng, OBS_DIM);
        let start = gaussian_start(&fx.tuned, &mut rng);
        let prior = PriorChunk {
            chunk: ActionChunk {
                role: ChunkRole::Prior,
                values: start.values.clone(),
            },
            valid_rows: 0,
            source: 0,
        };
        let n = fx.cfg.chunk.integration_steps;
        let a = prefix_preserved_integrate(&fx.tuned, &obs, &prior, &all_ones, n).unwrap();
        let b = integrate(&fx.tuned, &obs, &start, n, Some(&all_ones)).unwrap();
        mismatches += (a.values != b.values) as usize;
    }
    outcome(
        chunks > 0 && violations == 0 && mismatches == 0,
        format!("{violations} violations over {chunks} chunks; {mismatches}/20 all-ones mismatches"),
    )
}

fn adapter_contracts(fx: &Fixture) -> Outcome {
    let fresh = AdaptedPolicy::attach(fx.base.clone(), &fx.cfg.adapter, &mut Rng::new(61, 0)).unwrap();
    let mut rng = Rng::new(62, 0);
    let mut differ = 0;
    for _ in 0..100 {
        let state = ActionChunk {
            role: ChunkRole::Intermediate,
            values: gaussian_start(&fx.base, &mut rng).values,
        };
        let obs = normals(&mut rng, OBS_DIM);
        let tau = rng.uniform();
        let m = prefix_mask(rng.int_inclusive(0, P - 1), P).unwrap();
        let a = fresh.velocity(&state, &obs, tau, Some(&m)).unwrap();
        let b = fx.base.velocity(&state, &obs, tau, Some(&m)).unwrap();
        differ += (a != b) as usize;
    }
    let gap = max_probe_gap(&fx.adapter, &fx.tuned, OBS_DIM, 100, &mut Rng::new(63, 0)).unwrap();
    let untouched = fx.checksum_before == fx.checksum_after && params_checksum(fx.adapter.base()) == fx.checksum_before;
    outcome(
        differ == 0 && gap <= 1e-6 && untouched,
        format!("{differ}/100 fresh-adapter mismatches, merge gap {gap:.2e}, base checksum unchanged: {untouched}"),
    )
}

fn success(out: &SweepOutput, label: &str, d: usize) -> f64 {
    out.per_delay_row(label, d).unwrap().success_rate
}

fn delay_trend(main: &SweepOutput, secs: f64) -> Outcome {
    let mut notes = Vec::new();
    let mut monotone = true;
    for kind in [
        StrategyKind::Sync,
        StrategyKind::NaiveAsync,
        StrategyKind::TemporalEnsemble,
        StrategyKind::RtcLite,
        StrategyKind::Remac,
    ] {
        let s: Vec<f64> = (0..5).map(|d| success(main, kind.name(), d)).collect();
        let rises: Vec<f64> = s.windows(2).map(|w| w[1] - w[0]).filter(|&x| x > 0.0).collect();
        let ok = rises.is_empty() || (rises.len() == 1 && rises[0] <= 0.02 + 1e-12);
        monotone &= ok;
        let row: Vec<String> = s.iter().map(|v| format!("{:.3}", v)).collect();
        notes.push(format!("{}=[{}]", kind.name(), row.join(",")));
    }
    let gap = |d| success(main, "remac", d) - success(main, "naive-async", d);
    let ticks = |l: &str, d| main.per_delay_row(l, d).unwrap().mean_ticks;
    let b = (0..5).all(|d| gap(d) >= 0.0);
    let c = [3, 4].iter().all(|&d| gap(d) >= 0.05 - 1e-12);
    let dd = [2, 3, 4].iter().all(|&d| ticks("remac", d) <= ticks("naive-async", d));
    let gaps: Vec<String> = (0..5).map(|d| format!("{:+.3}", gap(d))).collect();
    outcome(
        monotone && b && c && dd && secs <= 1800.0,
        format!(
            "(a) {monotone} (b) {b} (c) {c} (d) {dd}; remac-naive by d [{}]; {}; {secs:.0}s",
            gaps.join(","),
            notes.join(" ")
        ),
    )
}

fn kinematics(fx: &Fixture) -> Outcome {
    let report = run_kinematics(
        &fx.cfg.env,
        &fx.base,
        &fx.tuned,
        fx.cfg.strategy,
        &fx.cfg.kinematics,
        fx.cfg.chunk,
        MASTER,
    )
    .unwrap();
    let sync = report.row("sync").unwrap();
    let remac = report.row("remac").unwrap();
    let n = report.shared_seeds.len();
    let pass = n >= 15 && sync.boundary_j >= 2.0 * remac.boundary_j && remac.boundary_j <= 1.5 * remac.within_j;
    outcome(
        pass,
        format!(
            "d={} over {n} shared episodes: sync J {:.4}, remac J {:.4} (within {:.4})",
            report.delay_ticks, sync.boundary_j, remac.boundary_j, remac.within_j
        ),
    )
}

fn robustness(fx: &Fixture, main: &SweepOutput) -> Outcome {
    let noisy = run_robustness(&fx.cfg, &fx.cfg.env, &fx.tuned, MASTER).unwrap();
    let label = format!("remac-{}", fx.cfg.robustness.corruption.name());
    let mut pass = true;
    let mut notes = Vec::new();
    for d in 0..5 {
        let acc = success(main, "remac", d);
        let cor = success(&noisy, &label, d);
        pass &= acc - cor <= 0.15 + 1e-12;
        if d >= 2 {
            pass &= cor >= success(main, "naive-async", d);
        }
        notes.push(format!("d{d} {acc:.3}->{cor:.3}"));
    }
    outcome(pass, notes.join(", "))
}

fn ablation(fx: &Fixture) -> Outcome {
    let mut cfg = fx.cfg.clone();
    cfg.ablation.axes = vec![AblationAxis::ComponentStack];
    cfg.ablation.delays = vec![4];
    let out = run_ablation(&cfg, &cfg.env, &fx.base, &fx.dataset, Some(&fx.tuned), MASTER).unwrap();
    let labels: Vec<String> = ablation_variants(&cfg, AblationAxis::ComponentStack)
        .into_iter()
        .map(|v| v.label)
        .collect();
    let s = |l: &str| out.success(AblationAxis::ComponentStack, l, 4).unwrap();
    let (naive, lora, prefix, full) = (s("naive"), s("+lora"), s("+prefix-masking"), s("+delta-loss"));
    let tol = 0.02 + 1e-12;
    let pass = full + tol > prefix && prefix + tol > lora && (lora - naive).abs() <= 0.03 + 1e-12;
    let row: Vec<String> = labels.iter().map(|l| format!("{l} {:.3}", s(l))).collect();
    outcome(pass, format!("d=4: {}", row.join(", ")))
}

fn run_cli(args: &[&str], out: &Path) -> bool {
    Command::new(env!("CARGO_BIN_EXE_remac-lab"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("REMAC_LAB_THREADS", "2")
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.toml");
    std::fs::write(
        &config,
        "[data]\nepisodes = 40\n[pretrain]\nepochs = 3\nhidden = [16, 16]\n[train]\nepochs = 1\n\
         [sweep]\nepisodes = 4\ndelays = [0, 2, 4]\n[kinematics]\nepisodes = 6\n",
    )
    .unwrap();
    let cfg = config.to_str().unwrap();
    let mut identical = 0;
    let mut compared = 0;
    let mut ok = true;
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        ok &= run_cli(&["sweep", "--config", cfg, "--seed", "5"], &out);
        let staged = dir.path().join(format!("{run}-staged"));
        ok &= run_cli(&["gen-data", "--config", cfg, "--seed", "5"], &staged);
        let data = staged.join("dataset.bin");
        ok &= run_cli(
            &[
                "remac",
                "--config",
                cfg,
                "--seed",
                "5",
                "--data",
                data.to_str().unwrap(),
            ],
            &staged,
        );
        let (base, adapter) = (staged.join("base.ckpt"), staged.join("adapter.bin"));
        ok &= run_cli(
            &[
                "eval",
                "--config",
                cfg,
                "--seed",
                "5",
                "--base",
                base.to_str().unwrap(),
                "--adapter",
                adapter.to_str().unwrap(),
            ],
            &staged.join("eval"),
        );
    }
    let files = [
        "summary.csv",
        "summary_episodes.csv",
        "robustness.csv",
        "kinematics.csv",
    ];
    for f in files {
        compared += 1;
        let a = std::fs::read(dir.path().join("a").join(f));
        let b = std::fs::read(dir.path().join("b").join(f));
        identical += matches!((a, b), (Ok(a), Ok(b)) if a == b) as usize;
    }
    for (x, y) in [("a-staged/eval", "b-staged/eval"), ("a", "a-staged/eval")] {
        compared += 1;
        let a = std::fs::read(dir.path().join(x).join("summary.csv"));
        let b = std::fs::read(dir.path().join(y).join("summary.csv"));
        identical += matches!((a, b), (Ok(a), Ok(b)) if a == b) as usize;
    }
    outcome(
        ok && identical == compared,
        format!("all runs exit 0: {ok}; {identical}/{compared} summary files byte-identical"),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |id: usize, name: &'static str, o: Outcome| {
        println!(
            "criterion {id:>2} [{}] {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((id, name, o));
    };
    report(1, "delta-loss identity", loss_identity());
    report(2, "masked-loss locality", loss_locality());
    report(3, "gradient fidelity", gradient_fidelity());
    report(6, "delay machinery", delay_machinery());
    report(11, "CLI determinism", cli_determinism());

    let fx = build_fixture();
    report(4, "prefix preservation", prefix_preservation(&fx));
    report(5, "adapter contracts", adapter_contracts(&fx));
    let t = Instant::now();
    let arms = sweep_arms(&fx.cfg, &fx.base, Some(&fx.tuned)).unwrap();
    let main_sweep = run_grid(&fx.cfg.env, &arms, &EvalGrid::from_config(&fx.cfg), MASTER).unwrap();
    report(
        7,
        "success and completion vs. delay",
        delay_trend(&main_sweep, t.elapsed().as_secs_f64()),
    );
    report(8, "boundary kinematics", kinematics(&fx));
    report(9, "robustness to corrupted delays", robustness(&fx, &main_sweep));
    report(10, "component-stack ablation", ablation(&fx));

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
