//! Subcommand bodies. Each stage loads its inputs from files when given and
//! otherwise rebuilds them from the config and master seed, so every command
//! is a pure function of `(config, seed)` plus its input files.

use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::ExperimentConfig;
use super::io::{
    load_adapter, load_dataset, load_policy, read_csv, save_adapter, save_dataset, save_policy, write_csv, write_text,
};
use super::metrics::{MetricsSummary, SummaryRow};
use super::pipeline::{finetune, generate, merge_copy, pretrain_base};
use super::plot::{kinematics_overlay, success_vs_delay, ticks_vs_delay};
use super::sweep::{
    run_ablation, run_grid, run_kinematics, run_robustness, sweep_arms, EvalGrid, KinematicsReport, SweepOutput,
};
use crate::envs::Dataset;
use crate::error::{Error, Result};
use crate::policy::PolicyParams;

pub const DATASET_FILE: &str = "dataset.bin";
pub const BASE_FILE: &str = "base.ckpt";
pub const ADAPTER_FILE: &str = "adapter.bin";
pub const MERGED_FILE: &str = "remac.ckpt";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Inputs shared by every subcommand.
#[derive(Clone, Debug)]
pub struct RunContext {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub data: Option<PathBuf>,
    pub base: Option<PathBuf>,
    pub adapter: Option<PathBuf>,
}

impl RunContext {
    pub fn new(config: ExperimentConfig, seed: u64, out: impl Into<PathBuf>) -> Self {
        Self {
            config,
            seed,
            out: out.into(),
            data: None,
            base: None,
            adapter: None,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn prepare(&self) -> Result<()> {
        for p in [&self.data, &self.base, &self.adapter].into_iter().flatten() {
            if !p.is_file() {
                return Err(Error::io(p, std::io::ErrorKind::NotFound.into()));
            }
        }
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        write_text(&self.path("config.toml"), &self.config.to_toml())
    }

    fn log(&self, msg: &str) {
        eprintln!("[remac-lab] {msg}");
    }

    fn dataset(&self) -> Result<Dataset> {
        match &self.data {
            Some(p) => load_dataset(p),
            None => {
                self.log("generating demonstrations");
                generate(
                    &self.config.env,
                    self.config.data.episodes,
                    &self.config.chunk,
                    self.seed,
                )
            }
        }
    }

    fn base_policy(&self, ds: Option<&Dataset>) -> Result<PolicyParams> {
        match &self.base {
            Some(p) => load_policy(p),
            None => {
                let ds = ds.ok_or_else(missing_dataset)?;
                self.log("pretraining base policy");
                Ok(pretrain_base(ds, self.config.chunk, &self.config.pretrain, self.seed)?.0)
            }
        }
    }

    fn tuned_policy(&self, base: &PolicyParams, ds: Option<&Dataset>) -> Result<PolicyParams> {
        match &self.adapter {
            Some(p) => merge_copy(&load_adapter(p, base.clone())?),
            None => {
                let ds = ds.ok_or_else(missing_dataset)?;
                self.log("fine-tuning adapter");
                Ok(finetune(base, ds, &self.config.train, &self.config.adapter, self.seed)?.merged)
            }
        }
    }

    /// Whether a stage needs the dataset: only when something is trained.
    fn needs_data(&self, tuned: bool) -> bool {
        self.base.is_none() || (tuned && self.adapter.is_none())
    }

    fn maybe_dataset(&self, tuned: bool) -> Result<Option<Dataset>> {
        if self.needs_data(tuned) {
            self.dataset().map(Some)
        } else {
            Ok(None)
        }
    }
}

fn missing_dataset() -> Error {
    Error::InvalidArgument("a dataset is required to train".into())
}

pub fn gen_data(ctx: &RunContext) -> Result<()> {
    ctx.prepare()?;
    let ds = ctx.dataset()?;
    save_dataset(&ctx.path(DATASET_FILE), &ds)?;
    ctx.log(&format!(
        "{} pairs from {}/{} successful episodes",
        ds.pairs.len(),
        ds.header.episodes,
        ds.header.attempted
    ));
    Ok(())
}

pub fn pretrain(ctx: &RunContext) -> Result<()> {
    ctx.prepare()?;
    let ds = ctx.dataset()?;
    ctx.log("pretraining base policy");
    let (params, log) = pretrain_base(&ds, ctx.config.chunk, &ctx.config.pretrain, ctx.seed)?;
    save_policy(&ctx.path(BASE_FILE), &params)?;
    write_text(
        &ctx.path("pretrain_log.json"),
        &serde_json::to_string_pretty(&log).expect("plain log"),
    )
}

pub fn remac(ctx: &RunContext) -> Result<()> {
    ctx.prepare()?;
    let ds = ctx.dataset()?;
    let base = ctx.base_policy(Some(&ds))?;
    ctx.log("fine-tuning adapter");
    let run = finetune(&base, &ds, &ctx.config.train, &ctx.config.adapter, ctx.seed)?;
    save_adapter(&ctx.path(ADAPTER_FILE), &run.adapter)?;
    save_policy(&ctx.path(MERGED_FILE), &run.merged)?;
    if ctx.base.is_none() {
        save_policy(&ctx.path(BASE_FILE), &base)?;
    }
    write_text(&ctx.path("train_log.jsonl"), &run.log.to_jsonl())
}

fn summary_rows(out: &SweepOutput) -> Vec<SummaryRow> {
    // per-d average follows its cells for each strategy and delay
    let mut rows = Vec::new();
    for avg in &out.per_delay {
        rows.extend(
            out.cells
                .iter()
                .filter(|c| c.strategy == avg.strategy && c.d == avg.d)
                .map(SummaryRow::from),
        );
        rows.push(SummaryRow::from(avg));
    }
    rows
}

fn write_sweep(ctx: &RunContext, name: &str, out: &SweepOutput, episodes: bool) -> Result<()> {
    write_csv(&ctx.path(name), &summary_rows(out))?;
    if episodes {
        let stem = name.trim_end_matches(".csv");
        write_csv(&ctx.path(&format!("{stem}_episodes.csv")), &out.episodes)?;
    }
    Ok(())
}

/// Configured strategies on the delay/horizon grid.
pub fn eval(ctx: &RunContext) -> Result<SweepOutput> {
    ctx.prepare()?;
    let wants_remac = ctx
        .config
        .sweep
        .strategies
        .contains(&crate::runtime::StrategyKind::Remac);
    let ds = ctx.maybe_dataset(wants_remac)?;
    let base = ctx.base_policy(ds.as_ref())?;
    let tuned = if wants_remac {
        Some(ctx.tuned_policy(&base, ds.as_ref())?)
    } else {
        None
    };
    ctx.log("evaluating");
    let arms = sweep_arms(&ctx.config, &base, tuned.as_ref())?;
    let out = run_grid(&ctx.config.env, &arms, &EvalGrid::from_config(&ctx.config), ctx.seed)?;
    write_sweep(ctx, SUMMARY_FILE, &out, ctx.config.sweep.episode_records)?;
    Ok(out)
}

#[derive(Serialize)]
struct TraceRow<'a> {
    strategy: &'a str,
    tick: usize,
    speed: f64,
    accel: f64,
    jump: f64,
    boundary: bool,
}

fn write_kinematics(ctx: &RunContext, report: &KinematicsReport) -> Result<()> {
    write_csv(&ctx.path("kinematics.csv"), &report.rows)?;
    let trace: Vec<TraceRow<'_>> = report
        .traces
        .iter()
        .flat_map(|(label, t)| {
            (0..t.speed.len()).map(move |k| TraceRow {
                strategy: label,
                tick: k,
                speed: t.speed[k],
                accel: t.accel[k],
                jump: t.jump[k],
                boundary: t.boundary[k],
            })
        })
        .collect();
    write_csv(&ctx.path("kinematics_trace.csv"), &trace)?;
    if !report.traces.is_empty() {
        let svg = kinematics_overlay(&report.traces, ctx.config.plot.width, ctx.config.plot.height)?;
        write_text(&ctx.path("kinematics.svg"), &svg)?;
    }
    Ok(())
}

fn write_plots(ctx: &RunContext, rows: &[MetricsSummary]) -> Result<()> {
    let (w, h) = (ctx.config.plot.width, ctx.config.plot.height);
    write_text(&ctx.path("success_vs_delay.svg"), &success_vs_delay(rows, w, h)?)?;
    write_text(&ctx.path("ticks_vs_delay.svg"), &ticks_vs_delay(rows, w, h)?)
}

/// Everything downstream of one trained pair of policies.
pub struct SweepReport {
    pub main: SweepOutput,
    pub robustness: Option<SweepOutput>,
    pub kinematics: Option<KinematicsReport>,
}

/// Full pipeline: train (unless checkpoints are given), the main sweep, the
/// robustness sweep, the kinematics comparison and plots.
pub fn sweep(ctx: &RunContext) -> Result<SweepReport> {
    ctx.prepare()?;
    let ds = ctx.maybe_dataset(true)?;
    let base = ctx.base_policy(ds.as_ref())?;
    let tuned = ctx.tuned_policy(&base, ds.as_ref())?;
    if ctx.base.is_none() {
        save_policy(&ctx.path(BASE_FILE), &base)?;
    }
    if ctx.adapter.is_none() {
        save_policy(&ctx.path(MERGED_FILE), &tuned)?;
    }
    let cfg = &ctx.config;
    ctx.log("main sweep");
    let arms = sweep_arms(cfg, &base, Some(&tuned))?;
    let main = run_grid(&cfg.env, &arms, &EvalGrid::from_config(cfg), ctx.seed)?;
    write_sweep(ctx, SUMMARY_FILE, &main, cfg.sweep.episode_records)?;
    let robustness = if cfg.robustness.enabled {
        ctx.log("robustness sweep");
        let r = run_robustness(cfg, &cfg.env, &tuned, ctx.seed)?;
        write_sweep(ctx, "robustness.csv", &r, false)?;
        Some(r)
    } else {
        None
    };
    let kinematics = if cfg.kinematics.enabled {
        ctx.log("kinematics comparison");
        let k = run_kinematics(
            &cfg.env,
            &base,
            &tuned,
            cfg.strategy,
            &cfg.kinematics,
            cfg.chunk,
            ctx.seed,
        )?;
        write_kinematics(ctx, &k)?;
        Some(k)
    } else {
        None
    };
    write_plots(ctx, &main.per_delay)?;
    Ok(SweepReport {
        main,
        robustness,
        kinematics,
    })
}

#[derive(Serialize)]
struct AblationRow {
    axis: String,
    variant: String,
    d: usize,
    success_rate: f64,
    mean_ticks: f64,
}

pub fn ablate(ctx: &RunContext) -> Result<super::sweep::AblationOutput> {
    ctx.prepare()?;
    let ds = ctx.dataset()?;
    let base = ctx.base_policy(Some(&ds))?;
    ctx.log("ablation matrix");
    let out = run_ablation(&ctx.config, &ctx.config.env, &base, &ds, None, ctx.seed)?;
    write_sweep(ctx, "ablation.csv", &out.sweep, false)?;
    let table: Vec<AblationRow> = out
        .sweep
        .per_delay
        .iter()
        .map(|m| {
            let (axis, variant) = m.strategy.split_once('/').unwrap_or(("", &m.strategy));
            let r = SummaryRow::from(m);
            AblationRow {
                axis: axis.to_string(),
                variant: variant.to_string(),
                d: m.d,
                success_rate: r.success_rate,
                mean_ticks: r.mean_ticks,
            }
        })
        .collect();
    write_csv(&ctx.path("ablation_table.csv"), &table)?;
    Ok(out)
}

/// Re-render plots from an existing summary table.
pub fn plot(ctx: &RunContext, summary: &Path) -> Result<()> {
    ctx.prepare()?;
    let rows: Vec<SummaryRow> = read_csv(summary)?;
    let per_delay: Vec<MetricsSummary> = rows
        .iter()
        .filter(|r| r.h_or_avg == "avg")
        .map(|r| MetricsSummary {
            strategy: r.strategy.clone(),
            d: r.d,
            h: None,
            episodes: r.episodes,
            success_rate: r.success_rate,
            mean_ticks: r.mean_ticks,
            boundary_j: r.boundary_j,
            within_j: r.within_j,
            mean_speed: 0.0,
            mean_accel: 0.0,
        })
        .collect();
    write_plots(ctx, &per_delay)
}
