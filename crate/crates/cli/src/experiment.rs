//! Experiment orchestration: seeded runs against full-step references,
//! tolerance search with an on-disk cache, sweeps, and CSV reporting.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use trendskip::metrics::RunComparison;
use trendskip::oracle::initial_noise;
use trendskip::{
    compare_runs, run_policy, search_tolerance, NoiseSchedule, PolicyKind, RunConfig, RunTrace, ScheduleSpec,
    SearchOptions, SnapshotPolicy, ToleranceProfile,
};

use crate::config::{ExperimentConfig, SigmaSetting};
use crate::error::{CliError, CliResult};
use crate::specs::{tolerance_cache_key, ResolvedModel};

pub const FORMAT_VERSION: u32 = 1;
pub const OUT_DIR_ENV: &str = "TRENDSKIP_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "trendskip-out";

/// Config plus everything resolved from it.
pub struct Context {
    pub cfg: ExperimentConfig,
    pub sched_spec: ScheduleSpec,
    pub sched: NoiseSchedule,
    pub model: ResolvedModel,
}

impl Context {
    pub fn new(cfg: ExperimentConfig) -> CliResult<Self> {
        cfg.check()?;
        let sched_spec = cfg.schedule_spec()?;
        let sched = sched_spec.build().map_err(CliError::validation)?;
        let model = cfg.model_spec()?.resolve(sched_spec.kind)?;
        model.check_conditions(&cfg.model.conditions)?;
        model.check_conditions(cfg.search_conditions())?;
        Ok(Self { cfg, sched_spec, sched, model })
    }

    /// Condition used for the `i`-th seed of the run list.
    pub fn condition_for(&self, i: usize) -> usize {
        let c = &self.cfg.model.conditions;
        c[i % c.len()]
    }

    pub fn run_config(&self, alpha: f64, warmup: usize, sigma: f64, seed: u64, condition: usize) -> RunConfig {
        RunConfig {
            alpha,
            warmup,
            sigma,
            seed,
            condition,
            snapshot: self.cfg.run.snapshot,
            deviation_metric: self.cfg.policy.deviation,
        }
    }

    pub fn initial_noise(&self, seed: u64) -> trendskip::Latent {
        initial_noise(self.model.dim, seed, self.model.shape)
    }

    /// One seeded run of `policy` and its full-step reference.
    pub fn run_pair(&self, policy: PolicyKind, rc: &RunConfig) -> trendskip::Result<(RunTrace, RunTrace)> {
        let x = self.initial_noise(rc.seed);
        let full = run_policy(PolicyKind::Full, &self.model.model, &self.sched, &x, rc)?;
        let accel = if policy == PolicyKind::Full {
            full.clone()
        } else {
            run_policy(policy, &self.model.model, &self.sched, &x, rc)?
        };
        Ok((accel, full))
    }
}

/// Output directory: explicit choice, else config, else the environment
/// variable, else [`DEFAULT_OUT_DIR`].
pub fn resolve_out_dir(flag: Option<&Path>, cfg: Option<&ExperimentConfig>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.and_then(|c| c.run.out_dir.as_ref()).map(PathBuf::from))
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileFile {
    pub format_version: u32,
    pub cache_key: String,
    pub config: serde_json::Value,
    #[serde(flatten)]
    pub profile: ToleranceProfile,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(CliError::runtime)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Run the tolerance search for the config, or load it from the cache under
/// `out_dir/tolerance-cache`.
pub fn searched_profile(ctx: &Context, out_dir: &Path) -> CliResult<ProfileFile> {
    let s = &ctx.cfg.search;
    let conditions = ctx.cfg.search_conditions();
    let extra = format!("|{:?}|{}", s.sim_metric, s.base_seed);
    let key = tolerance_cache_key(&ctx.model, &ctx.sched_spec, conditions, s.seeds, &extra);
    let cache = out_dir.join("tolerance-cache").join(format!("{key}.json"));
    if let Ok(text) = fs::read_to_string(&cache) {
        if let Ok(hit) = serde_json::from_str::<ProfileFile>(&text) {
            if hit.cache_key == key && hit.format_version == FORMAT_VERSION {
                return Ok(hit);
            }
        }
    }
    let opts = SearchOptions { sim_metric: s.sim_metric, base_seed: s.base_seed };
    let profile = search_tolerance(&ctx.model.model, &ctx.sched, conditions, s.seeds, opts)
        .map_err(CliError::runtime)?;
    let file = ProfileFile {
        format_version: FORMAT_VERSION,
        cache_key: key,
        config: serde_json::json!({
            "model": ctx.cfg.model.spec,
            "schedule": ctx.sched_spec.to_string(),
            "conditions": conditions,
            "seeds": s.seeds,
            "sim_metric": s.sim_metric,
            "base_seed": s.base_seed,
        }),
        profile,
    };
    write_json(&cache, &file)?;
    Ok(file)
}

/// Numeric sigma from the config, running (or loading) the search if asked.
pub fn resolve_sigma(ctx: &Context, out_dir: &Path) -> CliResult<f64> {
    match ctx.cfg.policy.sigma {
        SigmaSetting::Value(v) => Ok(v),
        SigmaSetting::Search => {
            let file = searched_profile(ctx, out_dir)?;
            write_json(&out_dir.join("tolerance_profile.json"), &file)?;
            file.profile.sigma.ok_or_else(|| CliError::Runtime("search found no change point".into()))
        }
    }
}

/// One line of the summary CSV; column order is fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub seed: u64,
    pub policy: String,
    pub sigma: f64,
    pub nfe: usize,
    pub speedup: f64,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: Option<f64>,
}

impl SummaryRow {
    pub fn new(seed: u64, policy: PolicyKind, sigma: f64, c: &RunComparison) -> Self {
        Self {
            seed,
            policy: policy.as_str().into(),
            sigma,
            nfe: c.nfe_accel,
            speedup: c.speedup,
            mse: c.final_mse,
            psnr: c.final_psnr,
            ssim: c.final_ssim,
        }
    }
}

/// The config as embedded in artifacts: output location removed, since it
/// does not affect results.
pub fn embedded_config(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.run.out_dir = None;
    c.to_json()
}

/// CSV with `#` comment lines carrying the format version and config.
pub fn write_csv<T: Serialize>(path: &Path, comments: &[(&str, String)], rows: &[T]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut buf = Vec::new();
    writeln!(buf, "# format_version={FORMAT_VERSION}").map_err(CliError::runtime)?;
    for (k, v) in comments {
        writeln!(buf, "# {k}={v}").map_err(CliError::runtime)?;
    }
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in rows {
            w.serialize(r).map_err(CliError::runtime)?;
        }
        w.flush().map_err(CliError::runtime)?;
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub sigma: f64,
    pub rows: Vec<SummaryRow>,
    pub summary_path: PathBuf,
}

#[derive(Serialize)]
struct ComparisonFile<'a> {
    format_version: u32,
    config: serde_json::Value,
    seed: u64,
    condition: usize,
    comparison: &'a RunComparison,
}

/// Run every configured seed, write traces, comparisons and `summary.csv`.
/// Failed seeds leave the other outputs in place and yield a partial-output error.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> CliResult<ExperimentOutcome> {
    let ctx = Context::new(cfg.clone())?;
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let sigma = resolve_sigma(&ctx, out_dir)?;
    let policy = cfg.policy.kind;
    let cfg_json = embedded_config(cfg);
    let cfg_value: serde_json::Value = serde_json::from_str(&cfg_json).map_err(CliError::runtime)?;

    let results: Vec<CliResult<SummaryRow>> = cfg
        .run
        .seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| {
            let cond = ctx.condition_for(i);
            let rc = ctx.run_config(cfg.policy.alpha, cfg.policy.warmup, sigma, seed, cond);
            let (accel, full) = ctx.run_pair(policy, &rc).map_err(CliError::runtime)?;
            let cmp = compare_runs(&accel, &full).map_err(CliError::runtime)?;
            let stem = format!("{}-seed{seed}", policy.as_str());
            let trace_path = out_dir.join("traces").join(format!("{stem}.jsonl"));
            fs::create_dir_all(trace_path.parent().unwrap()).map_err(|e| io_err(&trace_path, e))?;
            accel.save(&trace_path).map_err(|e| io_err(&trace_path, e))?;
            let file = ComparisonFile {
                format_version: FORMAT_VERSION,
                config: cfg_value.clone(),
                seed,
                condition: cond,
                comparison: &cmp,
            };
            write_json(&out_dir.join("comparisons").join(format!("{stem}.json")), &file)?;
            Ok(SummaryRow::new(seed, policy, sigma, &cmp))
        })
        .collect();

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (r, seed) in results.into_iter().zip(&cfg.run.seeds) {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => failures.push(format!("seed {seed}: {e}")),
        }
    }
    let summary_path = out_dir.join("summary.csv");
    if rows.is_empty() {
        return Err(CliError::Runtime(failures.join("; ")));
    }
    let comments = [("config", cfg_json), ("sigma", sigma.to_string())];
    write_csv(&summary_path, &comments, &rows)?;
    if !failures.is_empty() {
        return Err(CliError::Partial(failures.join("; ")));
    }
    Ok(ExperimentOutcome { sigma, rows, summary_path })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub n: usize,
    pub sigma: f64,
    pub seed: u64,
    pub policy: String,
    pub nfe: usize,
    pub speedup: f64,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub alpha: f64,
    pub n: usize,
    pub sigma: f64,
    pub seeds: usize,
    pub mean_nfe: f64,
    pub mean_speedup: f64,
    pub mean_mse: f64,
    pub mean_ssim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub cells: Vec<SweepCell>,
}

/// Grid over sigma, alpha and warmup (each defaulting to the single configured
/// value) times the seed list. Writes `sweep.csv` (one row per cell and seed)
/// and `sweep_cells.csv` (per-cell means).
pub fn run_sweep(cfg: &ExperimentConfig, out_dir: &Path) -> CliResult<SweepOutcome> {
    let ctx = Context::new(cfg.clone())?;
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let sigmas = if cfg.sweep.sigmas.is_empty() { vec![resolve_sigma(&ctx, out_dir)?] } else { cfg.sweep.sigmas.clone() };
    let alphas = if cfg.sweep.alphas.is_empty() { vec![cfg.policy.alpha] } else { cfg.sweep.alphas.clone() };
    let warmups = if cfg.sweep.warmups.is_empty() { vec![cfg.policy.warmup] } else { cfg.sweep.warmups.clone() };
    let mut cells = Vec::new();
    for &a in &alphas {
        for &n in &warmups {
            for &s in &sigmas {
                cells.push((a, n, s));
            }
        }
    }
    let policy = cfg.policy.kind;
    let jobs: Vec<((f64, usize, f64), usize, u64)> = cells
        .iter()
        .flat_map(|&c| cfg.run.seeds.iter().enumerate().map(move |(i, &seed)| (c, i, seed)))
        .collect();
    let rows: Vec<SweepRow> = jobs
        .par_iter()
        .map(|&((alpha, n, sigma), i, seed)| {
            let rc = ctx.run_config(alpha, n, sigma, seed, ctx.condition_for(i));
            let (accel, full) = ctx.run_pair(policy, &rc).map_err(CliError::runtime)?;
            let c = compare_runs(&accel, &full).map_err(CliError::runtime)?;
            Ok(SweepRow {
                alpha,
                n,
                sigma,
                seed,
                policy: policy.as_str().into(),
                nfe: c.nfe_accel,
                speedup: c.speedup,
                mse: c.final_mse,
                psnr: c.final_psnr,
                ssim: c.final_ssim,
            })
        })
        .collect::<CliResult<_>>()?;

    let per = cfg.run.seeds.len();
    let summary: Vec<SweepCell> = cells
        .iter()
        .zip(rows.chunks(per))
        .map(|(&(alpha, n, sigma), chunk)| {
            let m = per as f64;
            let mean = |f: &dyn Fn(&SweepRow) -> f64| chunk.iter().map(f).sum::<f64>() / m;
            let ssim = chunk.iter().map(|r| r.ssim).collect::<Option<Vec<f64>>>().map(|v| v.iter().sum::<f64>() / m);
            SweepCell {
                alpha,
                n,
                sigma,
                seeds: per,
                mean_nfe: mean(&|r| r.nfe as f64),
                mean_speedup: mean(&|r| r.speedup),
                mean_mse: mean(&|r| r.mse),
                mean_ssim: ssim,
            }
        })
        .collect();
    let comments = [("config", embedded_config(cfg))];
    write_csv(&out_dir.join("sweep.csv"), &comments, &rows)?;
    write_csv(&out_dir.join("sweep_cells.csv"), &comments, &summary)?;
    Ok(SweepOutcome { rows, cells: summary })
}

/// Log-spaced threshold grid from `lo` to `hi`, `count` points.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count).map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp()).collect()
}

/// Threshold at which `policy` spends the same NFE as `target_nfe` on this
/// seed: the smallest grid value with equal NFE, else the value whose NFE is
/// the smallest one above the target, else the largest NFE below it.
pub fn match_nfe(
    ctx: &Context,
    policy: PolicyKind,
    base: &RunConfig,
    target_nfe: usize,
    grid: &[f64],
) -> trendskip::Result<(f64, RunTrace)> {
    let x = ctx.initial_noise(base.seed);
    let runs: Vec<(f64, RunTrace)> = grid
        .iter()
        .map(|&sigma| {
            let rc = RunConfig { sigma, snapshot: SnapshotPolicy::Hashes, ..base.clone() };
            run_policy(policy, &ctx.model.model, &ctx.sched, &x, &rc).map(|t| (sigma, t))
        })
        .collect::<trendskip::Result<_>>()?;
    let pick = runs
        .iter()
        .position(|(_, t)| t.nfe == target_nfe)
        .or_else(|| {
            runs.iter()
                .enumerate()
                .filter(|(_, (_, t))| t.nfe > target_nfe)
                .min_by_key(|(i, (_, t))| (t.nfe, *i))
                .map(|(i, _)| i)
        })
        .or_else(|| runs.iter().enumerate().max_by_key(|(i, (_, t))| (t.nfe, usize::MAX - i)).map(|(i, _)| i))
        .expect("grid is nonempty");
    Ok(runs.into_iter().nth(pick).expect("index in range"))
}
