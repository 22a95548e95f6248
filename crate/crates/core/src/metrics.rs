//! Sample-quality metrics between an accelerated run and its full reference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::trace::RunTrace;

pub const PSNR_CAP_DB: f64 = 99.0;

pub fn mse(a: &Latent, b: &Latent) -> Result<f64> {
    let d = a.sub(b)?;
    if d.dim() == 0 {
        return Err(Error::EmptyInput("empty latent"));
    }
    Ok(d.values.iter().map(|v| v * v).sum::<f64>() / d.dim() as f64)
}

/// Peak signal-to-noise ratio in dB; capped at [`PSNR_CAP_DB`] for
/// effectively identical inputs.
pub fn psnr(a: &Latent, b: &Latent, peak: f64) -> Result<f64> {
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::InvalidParameter(format!("peak={peak}")));
    }
    let m = mse(a, b)?;
    if m < 1e-12 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP_DB))
}

/// Single-window SSIM over the whole grid.
pub fn ssim_grid(a: &Latent, b: &Latent, dynamic_range: f64) -> Result<f64> {
    a.check_dim(b)?;
    match (a.shape, b.shape) {
        (Some(sa), Some(sb)) if sa != sb => return Err(Error::ShapeMismatch(sa, sb)),
        (None, _) | (_, None) => return Err(Error::ShapeMissing),
        _ => {}
    }
    if !(dynamic_range > 0.0 && dynamic_range.is_finite()) {
        return Err(Error::InvalidParameter(format!("dynamic range={dynamic_range}")));
    }
    let n = a.dim() as f64;
    let c1 = (0.01 * dynamic_range).powi(2);
    let c2 = (0.03 * dynamic_range).powi(2);
    let ma = a.values.iter().sum::<f64>() / n;
    let mb = b.values.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in a.values.iter().zip(&b.values) {
        let (dx, dy) = (x - ma, y - mb);
        va += dx * dx;
        vb += dy * dy;
        cov += dx * dy;
    }
    va /= n;
    vb /= n;
    cov /= n;
    if a == b {
        return Ok(1.0);
    }
    let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
    let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
    Ok(num / den)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunComparison {
    pub nfe_accel: usize,
    pub nfe_full: usize,
    pub speedup: f64,
    pub final_mse: f64,
    pub final_psnr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_ssim: Option<f64>,
    /// Range of the reference final latent, used as PSNR peak and SSIM range.
    pub peak: f64,
    /// `(t, ||x_full - x_accel||_2)` at every timestep where both runs kept a latent.
    #[serde(default)]
    pub per_step_deviation: Vec<(usize, f64)>,
}

/// Compare final latents and, where snapshots exist, per-step latents.
pub fn compare_runs(accel: &RunTrace, full: &RunTrace) -> Result<RunComparison> {
    let (a, r) = (&accel.final_latent, &full.final_latent);
    let (ca, cf) = (&accel.config, &full.config);
    if accel.total_steps != full.total_steps
        || ca.schedule != cf.schedule
        || ca.seed != cf.seed
        || ca.condition != cf.condition
    {
        return Err(Error::ConfigMismatch(format!(
            "runs differ in schedule, seed or condition ({} vs {} steps, seed {} vs {}, condition {} vs {})",
            accel.total_steps, full.total_steps, ca.seed, cf.seed, ca.condition, cf.condition
        )));
    }
    if accel.nfe == 0 {
        return Err(Error::DegenerateInput("accelerated run has zero NFE"));
    }
    let lo = r.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = r.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let peak = if hi > lo { hi - lo } else { 1.0 };
    let final_ssim = match (r.shape, a.shape) {
        (Some(_), Some(_)) => Some(ssim_grid(a, r, peak)?),
        _ => None,
    };
    let mut per_step_deviation = Vec::new();
    for rec in &full.records {
        if let (Some(xr), Some(xa)) =
            (rec.latent.as_ref(), accel.record_at(rec.t).and_then(|x| x.latent.as_ref()))
        {
            per_step_deviation.push((rec.t, xr.sub(xa)?.norm_l2()));
        }
    }
    Ok(RunComparison {
        nfe_accel: accel.nfe,
        nfe_full: full.nfe,
        speedup: full.nfe as f64 / accel.nfe as f64,
        final_mse: mse(a, r)?,
        final_psnr: psnr(a, r, peak)?,
        final_ssim,
        peak,
        per_step_deviation,
    })
}
