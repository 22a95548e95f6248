//! Per-model error-tolerance search.
//!
//! Full sampling runs record how much the model output moves between
//! consecutive steps. Each of those magnitudes is then injected as noise into
//! the clean final sample, and the similarity to the unperturbed sample is
//! scored. Averaged over conditions and seeds, the similarity curve splits into
//! an early low-similarity regime and a late stable regime; the output
//! difference at the split is the tolerance.
//!
//! Index `i` of the difference and similarity lists refers to the change
//! between the outputs at timesteps `T - i` and `T - i - 1`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::changepoint::detect_change_point;
use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::metrics::ssim_grid;
use crate::mixture::ConditionId;
use crate::oracle::{initial_noise, perturb_latent, OracleModel, PerturbMode};
use crate::schedule::{denoise_step, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimMetric {
    #[default]
    Cosine,
    OneMinusNrmse,
    /// Global SSIM; needs grid-shaped latents.
    Ssim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToleranceProfile {
    #[serde(rename = "L")]
    pub diffs: Vec<f64>,
    #[serde(rename = "S")]
    pub similarity: Vec<f64>,
    pub change_index: Option<usize>,
    pub sigma: Option<f64>,
}

/// Mean absolute change of the model output between consecutive steps of a
/// full sampling run, plus the clean final latent.
pub fn collect_diff_profile(
    model: &OracleModel,
    sched: &NoiseSchedule,
    x_init: &Latent,
    cond: ConditionId,
) -> Result<(Vec<f64>, Latent)> {
    let mut x = x_init.clone();
    let mut prev: Option<Latent> = None;
    let mut diffs = Vec::with_capacity(sched.steps.saturating_sub(1));
    for t in (1..=sched.steps).rev() {
        let eps = model.predict(&x, t, sched, cond)?;
        if let Some(p) = &prev {
            diffs.push(eps.sub(p)?.mean_abs());
        }
        x = denoise_step(&x, &eps, t, sched)?;
        prev = Some(eps);
    }
    Ok((diffs, x))
}

pub fn cosine_similarity(a: &Latent, b: &Latent) -> Result<f64> {
    let dot = a.dot(b)?;
    let (na, nb) = (a.norm_l2(), b.norm_l2());
    if na == 0.0 || nb == 0.0 {
        return Ok(if a == b { 1.0 } else { 0.0 });
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn similarity(metric: SimMetric, perturbed: &Latent, clean: &Latent) -> Result<f64> {
    match metric {
        SimMetric::Cosine => cosine_similarity(perturbed, clean),
        SimMetric::OneMinusNrmse => {
            let denom = clean.norm_l2();
            let err = perturbed.sub(clean)?.norm_l2();
            if denom == 0.0 {
                return Ok(if err == 0.0 { 1.0 } else { -1.0 });
            }
            Ok((1.0 - err / denom).clamp(-1.0, 1.0))
        }
        SimMetric::Ssim => {
            let lo = clean.values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = clean.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let range = if hi > lo { hi - lo } else { 1.0 };
            ssim_grid(perturbed, clean, range)
        }
    }
}

/// Similarity of the clean latent to itself plus seeded noise of mean
/// absolute magnitude `diffs[i]`, for every `i`. One noise direction is drawn
/// per seed and rescaled for each entry.
pub fn perturb_similarity(
    final_latent: &Latent,
    diffs: &[f64],
    seed: u64,
    metric: SimMetric,
) -> Result<Vec<f64>> {
    if diffs.iter().any(|d| d.is_nan() || *d < 0.0) {
        return Err(Error::InvalidParameter("output differences must be nonnegative".into()));
    }
    diffs
        .iter()
        .map(|&m| {
            let perturbed = perturb_latent(final_latent, m, PerturbMode::ScaledNoise { seed })?;
            similarity(metric, &perturbed, final_latent)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchOptions {
    pub sim_metric: SimMetric,
    /// Offset mixed into every initial-noise and perturbation seed.
    pub base_seed: u64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self { sim_metric: SimMetric::Cosine, base_seed: 0 }
    }
}

/// Initial-noise seed for the `j`-th profiling run of condition `cond`.
pub fn profiling_seed(base: u64, cond: ConditionId, j: usize) -> u64 {
    base.wrapping_add(((cond as u64) << 32) | j as u64)
}

const PERTURB_SALT: u64 = 0x5EED_0FC0_FFEE;

/// Averaged difference and similarity curves over every `(condition, seed)`
/// pair, the detected split of the mean similarity curve, and the mean
/// difference at that split.
pub fn search_tolerance(
    model: &OracleModel,
    sched: &NoiseSchedule,
    conditions: &[ConditionId],
    seeds_per_condition: usize,
    opts: SearchOptions,
) -> Result<ToleranceProfile> {
    if conditions.is_empty() {
        return Err(Error::EmptyInput("no conditions to profile"));
    }
    if seeds_per_condition == 0 {
        return Err(Error::EmptyInput("no seeds per condition"));
    }
    let dim = model.dim().ok_or_else(|| Error::InvalidConfig("model dimension is unknown".into()))?;
    let shape = model.shape();
    let jobs: Vec<(ConditionId, usize)> =
        conditions.iter().flat_map(|&c| (0..seeds_per_condition).map(move |j| (c, j))).collect();

    let curves: Vec<(Vec<f64>, Vec<f64>)> = jobs
        .par_iter()
        .map(|&(cond, j)| {
            let seed = profiling_seed(opts.base_seed, cond, j);
            let x_init = initial_noise(dim, seed, shape);
            let (diffs, clean) = collect_diff_profile(model, sched, &x_init, cond)?;
            let sim = perturb_similarity(&clean, &diffs, seed ^ PERTURB_SALT, opts.sim_metric)?;
            Ok((diffs, sim))
        })
        .collect::<Result<_>>()?;

    let len = sched.steps - 1;
    let mut diffs = vec![0.0; len];
    let mut similarity = vec![0.0; len];
    for (l, s) in &curves {
        for i in 0..len {
            diffs[i] += l[i];
            similarity[i] += s[i];
        }
    }
    let count = curves.len() as f64;
    diffs.iter_mut().for_each(|v| *v /= count);
    similarity.iter_mut().for_each(|v| *v /= count);

    let change_index = detect_change_point(&similarity)?;
    Ok(ToleranceProfile { sigma: Some(diffs[change_index]), change_index: Some(change_index), diffs, similarity })
}
