//! Step-skipping controllers.
//!
//! The trend controller runs `n + 1` warmup inferences, then alternates
//! rounds of `k` extrapolated steps and one real inference. The real
//! inference compares its output against the extrapolation, grows or shrinks
//! the window, and folds the new residual into an exponentially weighted
//! trend. The last denoising step is always a real inference.
//!
//! The baselines reuse the same window mechanism and differ only in how the
//! skipped outputs are produced.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::mixture::ConditionId;
use crate::oracle::OracleModel;
use crate::schedule::{denoise_step, NoiseSchedule};
use crate::trace::{Action, Phase, RunTrace, SnapshotPolicy, StepRecord, TraceConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    /// Exponentially averaged trend, spread evenly over an adaptive window.
    Etc,
    /// Real inference at every step.
    Full,
    /// Skipped steps reuse the last output unchanged.
    NaiveReuse,
    /// Skipped steps add the last raw residual in full (smoothing 1, no spreading).
    ResidualTrend,
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Etc => "etc",
            PolicyKind::Full => "full",
            PolicyKind::NaiveReuse => "naive-reuse",
            PolicyKind::ResidualTrend => "residual-trend",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "etc" => Ok(PolicyKind::Etc),
            "full" => Ok(PolicyKind::Full),
            "naive-reuse" => Ok(PolicyKind::NaiveReuse),
            "residual-trend" => Ok(PolicyKind::ResidualTrend),
            other => Err(Error::Parse(format!("unknown policy `{other}`"))),
        }
    }
}

/// Scalar reduction of the extrapolation error at a real inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeviationMetric {
    #[default]
    MeanAbs,
    Rms,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub alpha: f64,
    pub warmup: usize,
    pub sigma: f64,
    pub seed: u64,
    pub condition: ConditionId,
    pub snapshot: SnapshotPolicy,
    pub deviation_metric: DeviationMetric,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            warmup: 6,
            sigma: 0.1,
            seed: 0,
            condition: 0,
            snapshot: SnapshotPolicy::Hashes,
            deviation_metric: DeviationMetric::MeanAbs,
        }
    }
}

/// One step of the exponential trend average. The first residual becomes the
/// trend as is.
pub fn ema_update(delta_prev: Option<&Latent>, d: &Latent, alpha: f64) -> Result<Latent> {
    if !d.is_finite() {
        return Err(Error::NonFinite("residual"));
    }
    match delta_prev {
        None => Ok(d.clone()),
        Some(prev) => prev.lincomb(1.0 - alpha, d, alpha),
    }
}

/// Extrapolated output at burst position `s` of `k`: `base + (s / k) * delta`.
pub fn approx_output(base: &Latent, delta: &Latent, k: usize, s: usize) -> Result<Latent> {
    if k == 0 {
        return Err(Error::KZero);
    }
    if s == 0 || s > k {
        return Err(Error::StepOutOfRange { s, k });
    }
    base.axpy(s as f64 / k as f64, delta)
}

/// Mean absolute value of `eps_real - last - delta`.
pub fn deviation(eps_real: &Latent, last: &Latent, delta: &Latent) -> Result<f64> {
    deviation_with(DeviationMetric::MeanAbs, eps_real, last, delta)
}

pub fn deviation_with(
    metric: DeviationMetric,
    eps_real: &Latent,
    last: &Latent,
    delta: &Latent,
) -> Result<f64> {
    eps_real.check_dim(last)?;
    eps_real.check_dim(delta)?;
    let n = eps_real.dim().max(1) as f64;
    let residuals = eps_real.values.iter().zip(&last.values).zip(&delta.values).map(|((e, p), d)| e - p - d);
    Ok(match metric {
        DeviationMetric::MeanAbs => residuals.map(f64::abs).sum::<f64>() / n,
        DeviationMetric::Rms => (residuals.map(|r| r * r).sum::<f64>() / n).sqrt(),
    })
}

/// Grow the window after an accurate extrapolation, shrink it (not below zero)
/// otherwise, and never let it exceed `remaining_steps - 1`.
pub fn window_update(k: usize, dev: f64, sigma: f64, remaining_steps: usize) -> usize {
    let next = if dev < sigma { k + 1 } else { k.saturating_sub(1) };
    next.min(remaining_steps.saturating_sub(1))
}

/// How skipped steps are filled in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fill {
    /// `P <- P + delta / k` at every skipped step.
    Spread,
    /// `P` unchanged.
    Reuse,
    /// `base + delta` at every skipped step.
    Whole,
}

struct Recorder<'a> {
    snapshot: SnapshotPolicy,
    records: Vec<StepRecord>,
    model: &'a OracleModel,
    sched: &'a NoiseSchedule,
    condition: ConditionId,
    nfe: usize,
}

impl Recorder<'_> {
    fn infer(&mut self, x: &Latent, t: usize) -> Result<Latent> {
        self.nfe += 1;
        self.model.predict(x, t, self.sched, self.condition)
    }

    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        t: usize,
        action: Action,
        phase: Phase,
        k: usize,
        deviation: Option<f64>,
        trend_before: Option<&Latent>,
        trend_after: Option<&Latent>,
        x: &Latent,
        out: &Latent,
    ) {
        let full = self.snapshot == SnapshotPolicy::Full;
        self.records.push(StepRecord {
            t,
            action,
            phase,
            k,
            deviation,
            delta_norm: trend_after.map_or(0.0, Latent::norm_l2),
            output_hash: out.content_hash(),
            latent: full.then(|| x.clone()),
            output: full.then(|| out.clone()),
            trend: if full { trend_before.cloned() } else { None },
        });
    }
}

fn validate(sched: &NoiseSchedule, cfg: &RunConfig) -> Result<()> {
    if !(cfg.alpha > 0.0 && cfg.alpha <= 1.0) {
        return Err(Error::InvalidConfig(format!("alpha={} outside (0, 1]", cfg.alpha)));
    }
    if !(cfg.sigma > 0.0 && cfg.sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!("sigma={} must be positive and finite", cfg.sigma)));
    }
    if cfg.warmup + 2 > sched.steps {
        return Err(Error::InvalidConfig(format!(
            "warmup n={} needs n + 2 <= T={}",
            cfg.warmup, sched.steps
        )));
    }
    Ok(())
}

fn trace_config(policy: PolicyKind, alpha: f64, sched: &NoiseSchedule, cfg: &RunConfig) -> Result<TraceConfig> {
    let schedule = sched
        .spec
        .ok_or_else(|| Error::InvalidConfig("schedule was not built from a spec".into()))?;
    Ok(TraceConfig {
        policy,
        alpha,
        warmup: cfg.warmup,
        sigma: cfg.sigma,
        deviation_metric: cfg.deviation_metric,
        schedule,
        seed: cfg.seed,
        condition: cfg.condition,
        snapshot: cfg.snapshot,
    })
}

/// Trend-extrapolating sampler with adaptive approximation window.
pub fn run_etc(
    model: &OracleModel,
    sched: &NoiseSchedule,
    x_init: &Latent,
    cfg: &RunConfig,
) -> Result<RunTrace> {
    run_policy(PolicyKind::Etc, model, sched, x_init, cfg)
}

/// One of the comparison policies; `PolicyKind::Etc` is rejected here.
pub fn run_baseline(
    policy: PolicyKind,
    model: &OracleModel,
    sched: &NoiseSchedule,
    x_init: &Latent,
    cfg: &RunConfig,
) -> Result<RunTrace> {
    if policy == PolicyKind::Etc {
        return Err(Error::InvalidConfig("use run_etc for the trend controller".into()));
    }
    run_policy(policy, model, sched, x_init, cfg)
}

pub fn run_policy(
    policy: PolicyKind,
    model: &OracleModel,
    sched: &NoiseSchedule,
    x_init: &Latent,
    cfg: &RunConfig,
) -> Result<RunTrace> {
    validate(sched, cfg)?;
    match policy {
        PolicyKind::Full => run_full(model, sched, x_init, cfg),
        PolicyKind::Etc => run_controlled(Fill::Spread, cfg.alpha, policy, model, sched, x_init, cfg),
        PolicyKind::NaiveReuse => run_controlled(Fill::Reuse, cfg.alpha, policy, model, sched, x_init, cfg),
        PolicyKind::ResidualTrend => run_controlled(Fill::Whole, 1.0, policy, model, sched, x_init, cfg),
    }
}

fn run_full(
    model: &OracleModel,
    sched: &NoiseSchedule,
    x_init: &Latent,
    cfg: &RunConfig,
) -> Result<RunTrace> {
    let mut rec = Recorder { snapshot: cfg.snapshot, records: Vec::with_capacity(sched.steps), model, sched, condition: cfg.condition, nfe: 0 };
    let mut x = x_init.clone();
    for t in (1..=sched.steps).rev() {
        let eps = rec.infer(&x, t)?;
        rec.push(t, Action::Real, Phase::Plain, 0, None, None, None, &x, &eps);
        x = denoise_step(&x, &eps, t, sched)?;
    }
    Ok(RunTrace {
        config: trace_config(PolicyKind::Full, cfg.alpha, sched, cfg)?,
        nfe: rec.nfe,
        records: rec.records,
        total_steps: sched.steps,
        final_latent: x,
    })
}

fn run_controlled(
    fill: Fill,
    alpha: f64,
    policy: PolicyKind,
    model: &OracleModel,
    sched: &NoiseSchedule,
    x_init: &Latent,
    cfg: &RunConfig,
) -> Result<RunTrace> {
    let steps = sched.steps;
    let mut rec = Recorder { snapshot: cfg.snapshot, records: Vec::with_capacity(steps), model, sched, condition: cfg.condition, nfe: 0 };
    let mut x = x_init.clone();
    let mut delta: Option<Latent> = None;
    let mut k = 0usize;

    // warmup: real inferences at t = T, ..., T - n
    let mut last: Option<Latent> = None;
    for t in (steps - cfg.warmup..=steps).rev() {
        let eps = rec.infer(&x, t)?;
        let before = delta.clone();
        if let Some(p) = &last {
            delta = Some(ema_update(delta.as_ref(), &eps.sub(p)?, alpha)?);
        }
        rec.push(t, Action::Real, Phase::Warmup, 0, None, before.as_ref(), delta.as_ref(), &x, &eps);
        x = denoise_step(&x, &eps, t, sched)?;
        last = Some(eps);
    }
    let mut last = last.expect("warmup performs at least one inference");

    // rounds of k extrapolated steps and one real inference; x currently holds x_t
    let mut t = steps - cfg.warmup - 1;
    while t >= 2 {
        let zero = Latent::zeros(x.dim());
        let trend = delta.clone().unwrap_or_else(|| zero.clone());
        let base = last.clone();
        for _ in 0..k {
            let out = match fill {
                Fill::Spread => last.axpy(1.0 / k as f64, &trend)?,
                Fill::Reuse => last.clone(),
                Fill::Whole => base.add(&trend)?,
            };
            rec.push(t, Action::Approx, Phase::Burst, k, None, delta.as_ref(), delta.as_ref(), &x, &out);
            x = denoise_step(&x, &out, t, sched)?;
            last = out;
            t -= 1;
        }

        let eps = rec.infer(&x, t)?;
        let dev = deviation_with(cfg.deviation_metric, &eps, &last, &trend)?;
        // after this step t - 1 steps remain, the last of which is reserved
        let remaining = t - 2;
        if remaining >= 1 {
            k = window_update(k, dev, cfg.sigma, remaining);
        }
        let before = delta.clone();
        delta = Some(ema_update(delta.as_ref(), &eps.sub(&last)?, alpha)?);
        rec.push(t, Action::Real, Phase::Check, k, Some(dev), before.as_ref(), delta.as_ref(), &x, &eps);
        x = denoise_step(&x, &eps, t, sched)?;
        last = eps;
        t -= 1;
    }

    debug_assert_eq!(t, 1);
    let eps = rec.infer(&x, 1)?;
    rec.push(1, Action::Real, Phase::Final, k, None, delta.as_ref(), delta.as_ref(), &x, &eps);
    x = denoise_step(&x, &eps, 1, sched)?;

    Ok(RunTrace {
        config: trace_config(policy, alpha, sched, cfg)?,
        nfe: rec.nfe,
        records: rec.records,
        total_steps: steps,
        final_latent: x,
    })
}
