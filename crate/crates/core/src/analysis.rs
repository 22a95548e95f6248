//! Round-by-round error accounting for trend-controller traces.
//!
//! A round is `k` extrapolated steps followed by one real inference. For each
//! round a ghost trajectory replays the skipped steps with real model calls
//! from the round's actual start latent. That gives the error-free latent at
//! the round's end, the ideal outputs along the way, and the correction term
//! `sigma_r` (real output at the check minus the ideal one).
//!
//! Notation used below, per round `r` with base output `B_r` (the real output
//! the round extrapolates from) and trend `Delta_r`:
//!
//! * `d_s = G_s - (B_r - sigma_{r-1})`, the ideal residual to burst step `s`;
//! * `D_r = eps(x_true, t_check) - B_r`, the ideal change over the round;
//! * `Delta_{r+1} = c_r Delta_r + alpha (D_r + sigma_r)`, with
//!   `c_r = 1 - 2 alpha` when `k_r >= 1` and `1 - alpha` when `k_r = 0`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{Latent, Norm};
use crate::oracle::OracleModel;
use crate::policy::PolicyKind;
use crate::schedule::{denoise_step, NoiseSchedule};
use crate::trace::{Action, Phase, RunTrace, StepRecord};

/// Trend after feeding `d_1..d_n` through the exponential average, evaluated
/// directly: `(1-a)^(n-1) d_1 + a * sum_{j>=2} (1-a)^(n-j) d_j`.
pub fn closed_form_trend(d_list: &[Latent], alpha: f64) -> Result<Latent> {
    let n = d_list.len();
    let first = d_list.first().ok_or(Error::EmptyInput("no residuals"))?;
    let mut out = first.scale((1.0 - alpha).powi(n as i32 - 1));
    for (j, d) in d_list.iter().enumerate().skip(1) {
        out = out.axpy(alpha * (1.0 - alpha).powi((n - 1 - j) as i32), d)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRound {
    pub k: usize,
    /// First timestep of the round (the check timestep when `k = 0`).
    pub t_start: usize,
    pub t_check: usize,
    /// Correction term at this round's real inference.
    pub sigma: Latent,
    /// Ideal output change over the round, `D_r`.
    pub residual: Latent,
    /// Ideal residuals `d_1..d_k` in step order.
    pub segment: Vec<Latent>,
    /// Trend the controller actually used, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trend: Option<Latent>,
}

impl LedgerRound {
    fn c(&self, alpha: f64) -> f64 {
        if self.k >= 1 {
            1.0 - 2.0 * alpha
        } else {
            1.0 - alpha
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorLedger {
    pub alpha: f64,
    pub warmup: usize,
    pub steps: usize,
    /// Differences between consecutive warmup outputs.
    pub warmup_residuals: Vec<Latent>,
    pub rounds: Vec<LedgerRound>,
}

impl ErrorLedger {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_residuals.len() != self.warmup {
            return Err(Error::LengthMismatch { expected: self.warmup, found: self.warmup_residuals.len() });
        }
        let covered: usize = self.rounds.iter().map(|r| r.k + 1).sum::<usize>() + self.warmup + 2;
        if covered != self.steps {
            return Err(Error::IncompleteLedger(format!("rounds cover {covered} of {} steps", self.steps)));
        }
        let mut prev = self.steps - self.warmup;
        for r in &self.rounds {
            if r.t_start >= prev || r.t_check + r.k != r.t_start || r.segment.len() != r.k {
                return Err(Error::IncompleteLedger(format!("round at t={} is inconsistent", r.t_start)));
            }
            prev = r.t_check;
        }
        Ok(())
    }

    fn round(&self, r: usize) -> Result<&LedgerRound> {
        if r == 0 {
            return Err(Error::InvalidParameter("rounds are numbered from 1".into()));
        }
        self.rounds
            .get(r - 1)
            .ok_or_else(|| Error::IncompleteLedger(format!("round {r} of {}", self.rounds.len())))
    }

    fn sigma_before(&self, r: usize) -> Option<&Latent> {
        (r >= 2).then(|| &self.rounds[r - 2].sigma)
    }

    /// Index (1-based) of the first round with `k >= 1`.
    fn first_active(&self) -> Option<usize> {
        self.rounds.iter().position(|r| r.k >= 1).map(|i| i + 1)
    }

    /// Closed-form trend in effect during round `r`.
    pub fn round_trend(&self, r: usize) -> Result<Latent> {
        self.round(r)?;
        match self.first_active() {
            Some(r1) if r > r1 => {
                let start = self.initial_trend(r1)?;
                let prod = |from: usize| -> f64 {
                    (from..r).map(|l| self.rounds[l - 1].c(self.alpha)).product()
                };
                let mut out = start.scale(prod(r1));
                for m in r1..r {
                    let rm = &self.rounds[m - 1];
                    let w = self.alpha * prod(m + 1);
                    out = out.axpy(w, &rm.residual.add(&rm.sigma)?)?;
                }
                Ok(out)
            }
            _ => self.initial_trend(r),
        }
    }

    /// Trend for a round preceded only by `k = 0` rounds, which act as extra
    /// warmup inferences.
    fn initial_trend(&self, r: usize) -> Result<Latent> {
        let mut ds = self.warmup_residuals.clone();
        ds.extend(self.rounds[..r - 1].iter().map(|x| x.residual.clone()));
        closed_form_trend(&ds, self.alpha)
    }
}

/// `||sum_{m=0}^{k-1} ((k-m)/k * delta - d_{k-m})||`, the first-round bound;
/// `d_segment` is in step order.
pub fn relaxed_bound_first_round(d_segment: &[Latent], delta: &Latent, k1: usize) -> Result<f64> {
    relaxed_bound_first_round_norm(d_segment, delta, k1, Norm::L2)
}

pub fn relaxed_bound_first_round_norm(d_segment: &[Latent], delta: &Latent, k1: usize, norm: Norm) -> Result<f64> {
    if k1 == 0 {
        return Err(Error::KZero);
    }
    if d_segment.len() != k1 {
        return Err(Error::LengthMismatch { expected: k1, found: d_segment.len() });
    }
    let mut acc = Latent::zeros(delta.dim());
    for m in 0..k1 {
        let w = (k1 - m) as f64 / k1 as f64;
        acc = acc.add(&delta.scale(w).sub(&d_segment[k1 - m - 1])?)?;
    }
    Ok(norm.of(&acc))
}

/// Bound for round `r` (1-based) with the trend in closed form.
pub fn relaxed_bound_general(ledger: &ErrorLedger, r: usize) -> Result<f64> {
    relaxed_bound_general_norm(ledger, r, Norm::L2)
}

pub fn relaxed_bound_general_norm(ledger: &ErrorLedger, r: usize, norm: Norm) -> Result<f64> {
    let round = ledger.round(r)?;
    let trend = ledger.round_trend(r)?;
    match ledger.sigma_before(r) {
        Some(sigma) if ledger.first_active().is_some_and(|r1| r > r1) => {
            let k = round.k;
            if k == 0 {
                return Err(Error::KZero);
            }
            let mut acc = Latent::zeros(trend.dim());
            for m in 0..k {
                let w = (k - m) as f64 / k as f64;
                let term = sigma.axpy(w, &trend)?.sub(&round.segment[k - m - 1])?;
                acc = acc.add(&term)?;
            }
            Ok(norm.of(&acc))
        }
        _ => relaxed_bound_first_round_norm(&round.segment, &trend, round.k, norm),
    }
}

/// Smoothing 0.5 form of the round-`r` bound:
/// `||sum_m ((1 + w_m/2) sigma_{r-1} + (w_m/2) D_{r-1} - d_{k-m})||`,
/// `w_m = (k - m)/k`. Defined when the previous round extrapolated (`k >= 1`).
pub fn eq8_bound(ledger: &ErrorLedger, r: usize) -> Result<Option<f64>> {
    eq8_bound_norm(ledger, r, Norm::L2)
}

pub fn eq8_bound_norm(ledger: &ErrorLedger, r: usize, norm: Norm) -> Result<Option<f64>> {
    let round = ledger.round(r)?;
    if ledger.alpha != 0.5 || r < 2 || ledger.rounds[r - 2].k == 0 || round.k == 0 {
        return Ok(None);
    }
    let prev = &ledger.rounds[r - 2];
    let k = round.k;
    let mut acc = Latent::zeros(prev.sigma.dim());
    for m in 0..k {
        let half = (k - m) as f64 / (2 * k) as f64;
        let term = prev.sigma.scale(1.0 + half).axpy(half, &prev.residual)?.sub(&round.segment[k - m - 1])?;
        acc = acc.add(&term)?;
    }
    Ok(Some(norm.of(&acc)))
}

/// Exact error of one round: ghost simulation and the term-by-term sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundError {
    /// `||x_true - x'||` from the ghost replay.
    pub simulated: f64,
    /// `||sum_s (prod f) g (sigma_{r-1} + (s/k) Delta - d_s)||`.
    pub term_by_term: f64,
    /// `sum_s ||(prod f) g (...)||`, a guaranteed upper bound.
    pub triangle: f64,
}

impl RoundError {
    pub fn relative_gap(&self) -> f64 {
        let scale = self.simulated.abs().max(self.term_by_term.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.simulated - self.term_by_term).abs() / scale
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceAnalysis {
    pub ledger: ErrorLedger,
    /// One entry per ledger round.
    pub errors: Vec<RoundError>,
}

struct RoundView<'a> {
    bursts: &'a [StepRecord],
    check: &'a StepRecord,
    base: &'a Latent,
}

struct Ghost {
    outputs: Vec<Latent>,
    x_true: Latent,
    eps_end: Latent,
}

fn snapshot<'a>(r: &'a StepRecord, field: Option<&'a Latent>) -> Result<&'a Latent> {
    field.ok_or(Error::MissingSnapshot(r.t))
}

fn split_rounds(trace: &RunTrace) -> Result<(Vec<&StepRecord>, Vec<RoundView<'_>>)> {
    if trace.config.policy != PolicyKind::Etc {
        return Err(Error::ConfigMismatch(format!(
            "error analysis needs a trend-controller trace, got {}",
            trace.config.policy.as_str()
        )));
    }
    let recs = &trace.records;
    let n = trace.config.warmup;
    if recs.len() < n + 2 || recs[..=n].iter().any(|r| r.phase != Phase::Warmup) {
        return Err(Error::IncompleteLedger("warmup records missing".into()));
    }
    let warm: Vec<&StepRecord> = recs[..=n].iter().collect();
    let mut rounds = Vec::new();
    let mut base = snapshot(&recs[n], recs[n].output.as_ref())?;
    let mut i = n + 1;
    while i < recs.len() && recs[i].phase != Phase::Final {
        let start = i;
        while i < recs.len() && recs[i].phase == Phase::Burst {
            i += 1;
        }
        let check = recs.get(i).filter(|r| r.phase == Phase::Check).ok_or_else(|| {
            Error::IncompleteLedger(format!("burst starting at t={} has no check", recs[start].t))
        })?;
        rounds.push(RoundView { bursts: &recs[start..i], check, base });
        base = snapshot(check, check.output.as_ref())?;
        i += 1;
    }
    if i + 1 != recs.len() {
        return Err(Error::IncompleteLedger("trace does not end with one final step".into()));
    }
    Ok((warm, rounds))
}

fn run_ghost(
    view: &RoundView<'_>,
    model: &OracleModel,
    sched: &NoiseSchedule,
    cond: usize,
) -> Result<Ghost> {
    let first = view.bursts.first().unwrap_or(view.check);
    let mut x = snapshot(first, first.latent.as_ref())?.clone();
    let mut outputs = Vec::with_capacity(view.bursts.len());
    for r in view.bursts {
        let eps = model.predict(&x, r.t, sched, cond)?;
        x = denoise_step(&x, &eps, r.t, sched)?;
        outputs.push(eps);
    }
    let eps_end = if view.bursts.is_empty() {
        snapshot(view.check, view.check.output.as_ref())?.clone()
    } else {
        model.predict(&x, view.check.t, sched, cond)?
    };
    Ok(Ghost { outputs, x_true: x, eps_end })
}

/// Build the ledger and exact per-round errors for a trace recorded with full
/// snapshots. Costs one extra model call per recorded step.
pub fn analyze_trace(trace: &RunTrace, model: &OracleModel, sched: &NoiseSchedule) -> Result<TraceAnalysis> {
    analyze_trace_norm(trace, model, sched, Norm::L2)
}

pub fn analyze_trace_norm(
    trace: &RunTrace,
    model: &OracleModel,
    sched: &NoiseSchedule,
    norm: Norm,
) -> Result<TraceAnalysis> {
    if sched.steps != trace.total_steps {
        return Err(Error::ConfigMismatch(format!(
            "schedule has {} steps, trace {}",
            sched.steps, trace.total_steps
        )));
    }
    let (warm, views) = split_rounds(trace)?;
    let cond = trace.config.condition;
    let alpha = trace.config.alpha;

    let mut warmup_residuals = Vec::with_capacity(warm.len() - 1);
    for pair in warm.windows(2) {
        let a = snapshot(pair[0], pair[0].output.as_ref())?;
        let b = snapshot(pair[1], pair[1].output.as_ref())?;
        warmup_residuals.push(b.sub(a)?);
    }

    let ghosts: Vec<Ghost> =
        views.par_iter().map(|v| run_ghost(v, model, sched, cond)).collect::<Result<_>>()?;

    let dim = warm[0].output.as_ref().map_or(0, Latent::dim);
    let mut rounds = Vec::with_capacity(views.len());
    let mut errors = Vec::with_capacity(views.len());
    let mut sigma_prev = Latent::zeros(dim);
    for (view, ghost) in views.iter().zip(&ghosts) {
        let k = view.bursts.len();
        let check_out = snapshot(view.check, view.check.output.as_ref())?;
        let x_approx = snapshot(view.check, view.check.latent.as_ref())?;
        let trend = view
            .bursts
            .first()
            .unwrap_or(view.check)
            .trend
            .clone()
            .unwrap_or_else(|| Latent::zeros(dim));
        let sigma = if k == 0 { Latent::zeros(dim) } else { check_out.sub(&ghost.eps_end)? };
        let ideal_base = view.base.sub(&sigma_prev)?;
        let segment: Vec<Latent> =
            ghost.outputs.iter().map(|g| g.sub(&ideal_base)).collect::<Result<_>>()?;

        let mut sum = Latent::zeros(dim);
        let mut triangle = 0.0;
        for (s, r) in view.bursts.iter().enumerate() {
            let (_, g) = sched.coefficients(r.t)?;
            let carry: f64 = view.bursts[s + 1..].iter().map(|l| sched.f[l.t - 1]).product();
            let w = (s + 1) as f64 / k as f64;
            let term = sigma_prev.axpy(w, &trend)?.sub(&segment[s])?.scale(carry * g);
            triangle += norm.of(&term);
            sum = sum.add(&term)?;
        }
        errors.push(RoundError {
            simulated: norm.of(&ghost.x_true.sub(x_approx)?),
            term_by_term: norm.of(&sum),
            triangle,
        });
        rounds.push(LedgerRound {
            k,
            t_start: view.bursts.first().unwrap_or(view.check).t,
            t_check: view.check.t,
            residual: ghost.eps_end.sub(view.base)?,
            segment,
            trend: Some(trend),
            sigma: sigma.clone(),
        });
        sigma_prev = sigma;
    }

    let ledger = ErrorLedger {
        alpha,
        warmup: trace.config.warmup,
        steps: trace.total_steps,
        warmup_residuals,
        rounds,
    };
    ledger.validate()?;
    Ok(TraceAnalysis { ledger, errors })
}

/// Exact error of round `r` (1-based over all rounds of the trace).
pub fn exact_round_error(
    trace: &RunTrace,
    model: &OracleModel,
    sched: &NoiseSchedule,
    r: usize,
) -> Result<RoundError> {
    let analysis = analyze_trace(trace, model, sched)?;
    analysis.ledger.round(r)?;
    Ok(analysis.errors[r - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub round: usize,
    pub t_start: usize,
    pub k: usize,
    pub exact_error: f64,
    pub bound_a19: f64,
    pub bound_eq8_alpha_half: Option<f64>,
    pub violated: bool,
    pub triangle_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub rows: Vec<BoundRow>,
}

impl BoundReport {
    pub fn violations(&self) -> usize {
        self.rows.iter().filter(|r| r.violated).count()
    }
}

/// Exact error against the relaxed bounds for every round that extrapolated.
pub fn bound_report(trace: &RunTrace, model: &OracleModel, sched: &NoiseSchedule) -> Result<BoundReport> {
    bound_report_norm(trace, model, sched, Norm::L2)
}

pub fn bound_report_norm(
    trace: &RunTrace,
    model: &OracleModel,
    sched: &NoiseSchedule,
    norm: Norm,
) -> Result<BoundReport> {
    let analysis = analyze_trace_norm(trace, model, sched, norm)?;
    report_from_analysis(&analysis, norm)
}

pub fn report_from_analysis(analysis: &TraceAnalysis, norm: Norm) -> Result<BoundReport> {
    let ledger = &analysis.ledger;
    let mut rows = Vec::new();
    for (i, (round, err)) in ledger.rounds.iter().zip(&analysis.errors).enumerate() {
        if round.k == 0 {
            continue;
        }
        let r = i + 1;
        let bound = relaxed_bound_general_norm(ledger, r, norm)?;
        rows.push(BoundRow {
            round: r,
            t_start: round.t_start,
            k: round.k,
            exact_error: err.simulated,
            bound_a19: bound,
            bound_eq8_alpha_half: eq8_bound_norm(ledger, r, norm)?,
            violated: err.simulated > bound,
            triangle_bound: err.triangle,
        });
    }
    Ok(BoundReport { rows })
}

/// Whether any record of the trace is an extrapolated step.
pub fn has_extrapolation(trace: &RunTrace) -> bool {
    trace.records.iter().any(|r| r.action == Action::Approx)
}
