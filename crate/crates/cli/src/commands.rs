use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use trendskip::analysis::bound_report_norm;
use trendskip::{
    compare_runs, run_policy, search_tolerance, DeviationMetric, Norm, PolicyKind, RunTrace, ScheduleSpec,
    SearchOptions, SimMetric, SnapshotPolicy,
};

use crate::config::{ExperimentConfig, SigmaSetting};
use crate::error::{CliError, CliResult};
use crate::experiment::{
    resolve_out_dir, resolve_sigma, run_experiment, run_sweep, write_csv, write_json, Context, FORMAT_VERSION,
};
use crate::specs::ModelSpec;

#[derive(Debug, Parser)]
#[command(name = "trendskip", version, about = "Trend-extrapolated step skipping on analytic diffusion models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a policy over the configured seeds against full-step references.
    Run(ExperimentArgs),
    /// Profile a model and locate its error tolerance.
    SearchTolerance(SearchArgs),
    /// Grid over sigma, alpha and warmup values.
    Sweep(ExperimentArgs),
    /// Exact round errors and relaxed bounds for a recorded trace.
    AnalyzeTrace(AnalyzeArgs),
    /// Compare an accelerated trace against a full-step trace.
    Compare(CompareArgs),
    /// Record one run with full latent snapshots.
    RecordTrace(RecordArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum NormArg {
    L2,
    L1,
}

/// Config file plus per-key overrides; flags win over the file.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Comma-separated condition ids.
    #[arg(long, value_delimiter = ',')]
    pub conditions: Option<Vec<usize>>,
    #[arg(long)]
    pub policy: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// `search` or a number.
    #[arg(long)]
    pub sigma: Option<String>,
    /// Comma-separated run seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub snapshot: Option<String>,
    #[arg(long)]
    pub deviation: Option<String>,
    /// Profiling runs per condition for `--sigma search`.
    #[arg(long)]
    pub search_seeds: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub sweep_sigmas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub sweep_alphas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub sweep_warmups: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub schedule: String,
    /// Number of conditions to profile (ids 0..n).
    #[arg(long, default_value_t = 1)]
    pub conditions: usize,
    /// Profiling runs per condition.
    #[arg(long, default_value_t = 8)]
    pub seeds: usize,
    #[arg(long, default_value = "cosine")]
    pub sim_metric: String,
    #[arg(long, default_value_t = 0)]
    pub base_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub model: String,
    #[arg(long, value_enum, default_value = "l2")]
    pub norm: NormArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub accel: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RecordArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Output trace; defaults to `<out dir>/record-<policy>-seed<seed>.jsonl`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn parse_value<T: serde::de::DeserializeOwned>(what: &str, text: &str) -> CliResult<T> {
    serde_json::from_value(serde_json::Value::String(text.into()))
        .map_err(|_| CliError::Validation(format!("invalid {what} `{text}`")))
}

impl ConfigArgs {
    /// Load the config file (if any) and apply flag overrides, then validate.
    pub fn resolve(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
                toml::from_str::<ExperimentConfig>(&text)
                    .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?
            }
            None => {
                let (Some(s), Some(m)) = (&self.schedule, &self.model) else {
                    return Err(CliError::Validation("give --config or both --schedule and --model".into()));
                };
                ExperimentConfig::new(s, m)
            }
        };
        if let Some(v) = &self.schedule {
            cfg.schedule.spec = v.clone();
        }
        if let Some(v) = &self.model {
            cfg.model.spec = v.clone();
        }
        if let Some(v) = &self.conditions {
            cfg.model.conditions = v.clone();
        }
        if let Some(v) = &self.policy {
            cfg.policy.kind = PolicyKind::parse(v).map_err(CliError::validation)?;
        }
        if let Some(v) = self.alpha {
            cfg.policy.alpha = v;
        }
        if let Some(v) = self.warmup {
            cfg.policy.warmup = v;
        }
        if let Some(v) = &self.sigma {
            cfg.policy.sigma = SigmaSetting::parse(v).map_err(CliError::Validation)?;
        }
        if let Some(v) = &self.seeds {
            cfg.run.seeds = v.clone();
        }
        if let Some(v) = &self.snapshot {
            cfg.run.snapshot = parse_value::<SnapshotPolicy>("snapshot policy", v)?;
        }
        if let Some(v) = &self.deviation {
            cfg.policy.deviation = parse_value::<DeviationMetric>("deviation metric", v)?;
        }
        if let Some(v) = self.search_seeds {
            cfg.search.seeds = v;
        }
        if let Some(v) = &self.sweep_sigmas {
            cfg.sweep.sigmas = v.clone();
        }
        if let Some(v) = &self.sweep_alphas {
            cfg.sweep.alphas = v.clone();
        }
        if let Some(v) = &self.sweep_warmups {
            cfg.sweep.warmups = v.clone();
        }
        cfg.check()?;
        Ok(cfg)
    }
}

#[derive(Serialize)]
struct Wrapped<'a, T: Serialize> {
    format_version: u32,
    config: serde_json::Value,
    #[serde(flatten)]
    body: &'a T,
}

fn load_trace(path: &Path) -> CliResult<RunTrace> {
    RunTrace::load(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

/// Execute a parsed command; returns the line printed on success.
pub fn execute(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::Run(a) => {
            let cfg = a.cfg.resolve()?;
            let out = resolve_out_dir(a.out_dir.as_deref(), Some(&cfg));
            let o = run_experiment(&cfg, &out)?;
            Ok(format!("{} rows, sigma={}, summary at {}", o.rows.len(), o.sigma, o.summary_path.display()))
        }
        Command::Sweep(a) => {
            let cfg = a.cfg.resolve()?;
            let out = resolve_out_dir(a.out_dir.as_deref(), Some(&cfg));
            let o = run_sweep(&cfg, &out)?;
            Ok(format!("{} rows in {} cells, written to {}", o.rows.len(), o.cells.len(), out.display()))
        }
        Command::SearchTolerance(a) => {
            let spec = ScheduleSpec::parse(&a.schedule).map_err(CliError::validation)?;
            let sched = spec.build().map_err(CliError::validation)?;
            let model = ModelSpec::parse(&a.model)?.resolve(spec.kind)?;
            let conditions: Vec<usize> = (0..a.conditions).collect();
            model.check_conditions(&conditions)?;
            let sim_metric = parse_value::<SimMetric>("similarity metric", &a.sim_metric)?;
            let opts = SearchOptions { sim_metric, base_seed: a.base_seed };
            let profile = search_tolerance(&model.model, &sched, &conditions, a.seeds, opts).map_err(|e| match e {
                trendskip::Error::EmptyInput(_) | trendskip::Error::ShapeMissing => CliError::validation(e),
                other => CliError::runtime(other),
            })?;
            let config = serde_json::json!({
                "model": a.model, "schedule": spec.to_string(), "conditions": conditions,
                "seeds": a.seeds, "sim_metric": sim_metric, "base_seed": a.base_seed,
            });
            write_json(&a.out, &Wrapped { format_version: FORMAT_VERSION, config, body: &profile })?;
            Ok(format!("sigma={:?} at index {:?}", profile.sigma, profile.change_index))
        }
        Command::AnalyzeTrace(a) => {
            let trace = load_trace(&a.input)?;
            let sched = trace.config.schedule.build().map_err(CliError::validation)?;
            let model = ModelSpec::parse(&a.model)?.resolve(sched.kind)?;
            let norm = match a.norm {
                NormArg::L2 => Norm::L2,
                NormArg::L1 => Norm::L1,
            };
            let report = bound_report_norm(&trace, &model.model, &sched, norm).map_err(|e| match e {
                trendskip::Error::MissingSnapshot(_) | trendskip::Error::ConfigMismatch(_) => CliError::validation(e),
                other => CliError::runtime(other),
            })?;
            let config = serde_json::to_string(&trace.config).map_err(CliError::runtime)?;
            write_csv(&a.out, &[("config", config), ("model", a.model.clone())], &report.rows)?;
            Ok(format!("{} rounds, {} above the relaxed bound", report.rows.len(), report.violations()))
        }
        Command::Compare(a) => {
            let accel = load_trace(&a.accel)?;
            let full = load_trace(&a.reference)?;
            let cmp = compare_runs(&accel, &full).map_err(CliError::validation)?;
            let config = serde_json::json!({ "accel": accel.config, "ref": full.config });
            write_json(&a.out, &Wrapped { format_version: FORMAT_VERSION, config, body: &cmp })?;
            Ok(format!("speedup={} mse={}", cmp.speedup, cmp.final_mse))
        }
        Command::RecordTrace(a) => {
            let mut cfg = a.cfg.resolve()?;
            cfg.run.snapshot = SnapshotPolicy::Full;
            let out_dir = resolve_out_dir(a.out_dir.as_deref(), Some(&cfg));
            let ctx = Context::new(cfg.clone())?;
            let sigma = resolve_sigma(&ctx, &out_dir)?;
            let seed = cfg.run.seeds[0];
            let rc = ctx.run_config(cfg.policy.alpha, cfg.policy.warmup, sigma, seed, ctx.condition_for(0));
            let x = ctx.initial_noise(seed);
            let trace = run_policy(cfg.policy.kind, &ctx.model.model, &ctx.sched, &x, &rc).map_err(CliError::runtime)?;
            let path = a.out.unwrap_or_else(|| {
                out_dir.join(format!("record-{}-seed{seed}.jsonl", cfg.policy.kind.as_str()))
            });
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(CliError::runtime)?;
            }
            trace.save(&path).map_err(CliError::runtime)?;
            Ok(format!("nfe={} written to {}", trace.nfe, path.display()))
        }
    }
}

/// Parse arguments, execute, and return the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("trendskip: {e}");
            e.exit_code()
        }
    }
}
