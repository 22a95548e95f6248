//! Model-output predictors: exact Gaussian-mixture oracles, recorded-trace
//! playback, and a wrapper that perturbs the latent before delegating.

use std::collections::BTreeMap;

#[cfg(test)]
use rand::SeedableRng;
#[cfg(test)]
use rand_chacha::ChaCha8Rng;
#[cfg(test)]
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::mixture::{ConditionId, GaussianMixture, MixtureFamily};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::trace::{Action, RunTrace};

/// Optimal noise prediction `E[noise | x_t = x]` for a variance-preserving
/// schedule, i.e. `-s_t * grad log p_t(x)`.
pub fn gmm_eps_oracle(
    x: &Latent,
    t: usize,
    sched: &NoiseSchedule,
    gmm: &GaussianMixture,
) -> Result<Latent> {
    if sched.kind != ScheduleKind::VariancePreservingDdim {
        return Err(Error::KindMismatch(format!(
            "noise oracle needs a variance-preserving schedule, got {}",
            sched.kind.as_str()
        )));
    }
    if t > sched.steps {
        return Err(Error::TimestepOutOfRange { t, steps: sched.steps });
    }
    let (a, s) = (sched.a[t], sched.s[t]);
    let resp = gmm.responsibilities(x, a, s)?;
    let mut out = vec![0.0; x.dim()];
    for (i, r) in resp.iter().enumerate() {
        for (d, o) in out.iter_mut().enumerate() {
            let var = a * a * gmm.variances[i][d] + s * s;
            *o += r * (x.values[d] - a * gmm.means[i][d]) / var;
        }
    }
    let eps = Latent { values: out.into_iter().map(|v| s * v).collect(), shape: x.shape };
    finite(eps, "noise oracle")
}

/// Optimal velocity `E[noise - x0 | x_tau = x]` for the linear path
/// `x_tau = (1 - tau) x0 + tau * noise`.
pub fn gmm_velocity_oracle(x: &Latent, tau: f64, gmm: &GaussianMixture) -> Result<Latent> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::TauOutOfRange(tau));
    }
    let x0 = gmm.posterior_mean(x, 1.0 - tau, tau)?;
    let v = x.sub(&x0)?.scale(1.0 / tau);
    finite(v, "velocity oracle")
}

fn finite(x: Latent, what: &'static str) -> Result<Latent> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite(what))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum PerturbMode {
    SubtractConstant,
    ScaledNoise { seed: u64 },
}

/// Shift `x` by a constant or by seeded Gaussian noise whose mean absolute
/// value equals `magnitude`.
pub fn perturb_latent(x: &Latent, magnitude: f64, mode: PerturbMode) -> Result<Latent> {
    if !(magnitude >= 0.0 && magnitude.is_finite()) {
        return Err(Error::InvalidParameter(format!("perturbation magnitude {magnitude}")));
    }
    if magnitude == 0.0 {
        return Ok(x.clone());
    }
    match mode {
        PerturbMode::SubtractConstant => {
            Ok(Latent { values: x.values.iter().map(|v| v - magnitude).collect(), shape: x.shape })
        }
        PerturbMode::ScaledNoise { seed } => {
            let z = Latent::standard_normal(x.dim(), seed);
            let mean_abs = z.mean_abs();
            if mean_abs == 0.0 {
                return Err(Error::DegenerateInput("noise draw is identically zero"));
            }
            x.axpy(magnitude / mean_abs, &z)
        }
    }
}

/// Recorded real-inference outputs keyed by timestep.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlaybackTable {
    outputs: BTreeMap<usize, Latent>,
}

impl PlaybackTable {
    /// Real-inference outputs of a trace recorded with full snapshots.
    pub fn from_trace(trace: &RunTrace) -> Result<Self> {
        let mut outputs = BTreeMap::new();
        for r in trace.records.iter().filter(|r| r.action == Action::Real) {
            let out = r.output.clone().ok_or(Error::MissingSnapshot(r.t))?;
            outputs.insert(r.t, out);
        }
        Ok(Self { outputs })
    }

    pub fn from_outputs(outputs: impl IntoIterator<Item = (usize, Latent)>) -> Self {
        Self { outputs: outputs.into_iter().collect() }
    }

    pub fn get(&self, t: usize) -> Result<&Latent> {
        self.outputs.get(&t).ok_or(Error::MissingTimestep(t))
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

/// Playback of the recorded output at `t`, bit-exact.
pub fn trace_playback(table: &PlaybackTable, t: usize) -> Result<Latent> {
    table.get(t).cloned()
}

/// A model-output predictor `eps(x, t, c)`.
#[derive(Debug, Clone, PartialEq)]
pub enum OracleModel {
    GmmEps(MixtureFamily),
    GmmVelocity(MixtureFamily),
    Playback(PlaybackTable),
    Perturbed { inner: Box<OracleModel>, magnitude: f64, mode: PerturbMode },
}

impl OracleModel {
    /// The exact mixture oracle matching the schedule's parametrization.
    pub fn gmm_for(kind: ScheduleKind, family: MixtureFamily) -> Self {
        match kind {
            ScheduleKind::VariancePreservingDdim => OracleModel::GmmEps(family),
            ScheduleKind::RectifiedFlow => OracleModel::GmmVelocity(family),
        }
    }

    pub fn family(&self) -> Option<&MixtureFamily> {
        match self {
            OracleModel::GmmEps(f) | OracleModel::GmmVelocity(f) => Some(f),
            OracleModel::Playback(_) => None,
            OracleModel::Perturbed { inner, .. } => inner.family(),
        }
    }

    pub fn dim(&self) -> Option<usize> {
        match self {
            OracleModel::Playback(table) => table.outputs.values().next().map(Latent::dim),
            _ => self.family().map(MixtureFamily::dim),
        }
    }

    pub fn shape(&self) -> Option<(usize, usize)> {
        match self {
            OracleModel::Playback(table) => table.outputs.values().next().and_then(|l| l.shape),
            _ => self.family().and_then(|f| f.shape),
        }
    }

    pub fn predict(
        &self,
        x: &Latent,
        t: usize,
        sched: &NoiseSchedule,
        cond: ConditionId,
    ) -> Result<Latent> {
        sched.check_timestep(t)?;
        match self {
            OracleModel::GmmEps(fam) => gmm_eps_oracle(x, t, sched, fam.get(cond)?),
            OracleModel::GmmVelocity(fam) => {
                if sched.kind != ScheduleKind::RectifiedFlow {
                    return Err(Error::KindMismatch(format!(
                        "velocity oracle needs a rectified-flow schedule, got {}",
                        sched.kind.as_str()
                    )));
                }
                gmm_velocity_oracle(x, sched.tau(t), fam.get(cond)?)
            }
            OracleModel::Playback(table) => {
                let out = trace_playback(table, t)?;
                x.check_dim(&out)?;
                Ok(out)
            }
            OracleModel::Perturbed { inner, magnitude, mode } => {
                let mode = match *mode {
                    PerturbMode::ScaledNoise { seed } => PerturbMode::ScaledNoise {
                        seed: seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                    },
                    m => m,
                };
                let shifted = perturb_latent(x, *magnitude, mode)?;
                inner.predict(&shifted, t, sched, cond)
            }
        }
    }
}

/// Standard-normal draw used as `x_T` for a run with this seed.
pub fn initial_noise(dim: usize, seed: u64, shape: Option<(usize, usize)>) -> Latent {
    let mut x = Latent::standard_normal(dim, seed);
    x.shape = shape;
    x
}

/// Helper for tests and oracles: one standard normal vector from an explicit rng.
#[cfg(test)]
pub(crate) fn normal_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Seeded rng shared by Monte-Carlo helpers.
#[cfg(test)]
pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
