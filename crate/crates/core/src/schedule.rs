//! Noise schedules and the generic one-step update
//! `x_{t-1} = f(t-1) * x_t - g(t-1) * model_output`.
//!
//! Timesteps run from `T` down to `0`. The coefficient arrays `f` and `g` have
//! length `T` and are indexed by `t - 1`, so the step that consumes the model
//! output at timestep `t` reads `f[t - 1]` and `g[t - 1]`. The signal/noise
//! scales `a` and `s` have length `T + 1` and are indexed by `t` directly, with
//! `t = 0` the clean-data end of the trajectory.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::Latent;

/// Number of discrete forward-process steps the variance-preserving betas are
/// laid out over. Inference timesteps are an even subsampling of this grid.
pub const TRAIN_STEPS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    VariancePreservingDdim,
    RectifiedFlow,
}

impl ScheduleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::VariancePreservingDdim => "variance-preserving-ddim",
            ScheduleKind::RectifiedFlow => "rectified-flow",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    #[serde(rename = "T")]
    pub steps: usize,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub a: Vec<f64>,
    pub s: Vec<f64>,
    /// Recipe this schedule was built from, when it came from one.
    #[serde(skip)]
    pub spec: Option<ScheduleSpec>,
}

/// Linearly spaced betas over the training grid, `betas[i]` for step `i + 1`.
fn linear_betas(beta_min: f64, beta_max: f64) -> Vec<f64> {
    let span = (TRAIN_STEPS - 1) as f64;
    (0..TRAIN_STEPS).map(|i| beta_min + (beta_max - beta_min) * i as f64 / span).collect()
}

/// Training-grid index for inference timestep `t` of `steps`.
fn train_index(t: usize, steps: usize) -> usize {
    t * TRAIN_STEPS / steps
}

/// Deterministic DDIM-style coefficients over a linear-beta variance-preserving
/// forward process.
///
/// `f(t-1) = a_{t-1} / a_t` and `g(t-1) = a_{t-1} s_t / a_t - s_{t-1}`.
pub fn build_vp_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if !(2..=TRAIN_STEPS).contains(&steps) {
        return Err(Error::InvalidParameter(format!(
            "T={steps} must lie in 2..={TRAIN_STEPS}"
        )));
    }
    if !(beta_min > 0.0 && beta_min < beta_max && beta_max < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}"
        )));
    }
    let betas = linear_betas(beta_min, beta_max);
    let mut alpha_bar = Vec::with_capacity(TRAIN_STEPS + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }

    let mut a = Vec::with_capacity(steps + 1);
    let mut s = Vec::with_capacity(steps + 1);
    for t in 0..=steps {
        let ab = alpha_bar[train_index(t, steps)];
        a.push(ab.sqrt());
        s.push((1.0 - ab).sqrt());
    }
    let f = (1..=steps).map(|t| a[t - 1] / a[t]).collect();
    let g = (1..=steps).map(|t| a[t - 1] * s[t] / a[t] - s[t - 1]).collect();

    Ok(NoiseSchedule {
        kind: ScheduleKind::VariancePreservingDdim,
        steps,
        f,
        g,
        a,
        s,
        spec: Some(ScheduleSpec { kind: ScheduleKind::VariancePreservingDdim, steps, beta_min, beta_max }),
    })
}

/// Euler discretization of `dx = v dtau` on the uniform grid `tau_t = t / T`.
///
/// `a_t = 1 - tau_t` and `s_t = tau_t` are the interpolation weights of
/// `x_tau = (1 - tau) x_0 + tau * noise`.
pub fn build_flow_schedule(steps: usize) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::InvalidParameter(format!("T={steps} must be at least 2")));
    }
    let tau: Vec<f64> = (0..=steps).map(|t| t as f64 / steps as f64).collect();
    let f = vec![1.0; steps];
    let g = (1..=steps).map(|t| tau[t] - tau[t - 1]).collect();
    let a = tau.iter().map(|x| 1.0 - x).collect();
    Ok(NoiseSchedule { kind: ScheduleKind::RectifiedFlow, steps, f, g, a, s: tau, spec: Some(ScheduleSpec::flow(steps)) })
}

impl NoiseSchedule {
    /// Flow time of timestep `t`. Only meaningful for rectified-flow schedules.
    pub fn tau(&self, t: usize) -> f64 {
        t as f64 / self.steps as f64
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::TimestepOutOfRange { t, steps: self.steps });
        }
        Ok(())
    }

    /// Coefficients `(f(t-1), g(t-1))` applied when stepping away from timestep `t`.
    pub fn coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check_timestep(t)?;
        Ok((self.f[t - 1], self.g[t - 1]))
    }

    /// Whether every `f` and `g` entry is at most one, the premise of the
    /// coefficient-free error relaxations.
    pub fn coefficients_at_most_one(&self) -> bool {
        self.f.iter().chain(&self.g).all(|&c| c <= 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.steps;
        if n < 2 {
            return Err(Error::InvalidParameter("T must be at least 2".into()));
        }
        if self.f.len() != n || self.g.len() != n {
            return Err(Error::LengthMismatch { expected: n, found: self.f.len().min(self.g.len()) });
        }
        if self.a.len() != n + 1 || self.s.len() != n + 1 {
            return Err(Error::LengthMismatch {
                expected: n + 1,
                found: self.a.len().min(self.s.len()),
            });
        }
        let all = self.f.iter().chain(&self.g).chain(&self.a).chain(&self.s);
        if !all.clone().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("schedule coefficient"));
        }
        if self.kind == ScheduleKind::VariancePreservingDdim {
            for t in 0..=n {
                if ((self.a[t] * self.a[t] + self.s[t] * self.s[t]) - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidParameter(format!("a^2 + s^2 != 1 at t={t}")));
                }
                if t > 0 && !(self.a[t - 1] > self.a[t] && self.s[t - 1] < self.s[t]) {
                    return Err(Error::InvalidParameter(format!("scales not monotone at t={t}")));
                }
            }
            if self.f.iter().any(|&f| f <= 0.0) || self.g.iter().any(|&g| !(0.0..=1.0).contains(&g)) {
                return Err(Error::InvalidParameter("coefficient out of range".into()));
            }
        }
        Ok(())
    }
}

pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 2e-2;

/// Recipe from which a [`NoiseSchedule`] is rebuilt; this is what traces and
/// configs record instead of the coefficient arrays.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
    #[serde(default = "default_beta_min")]
    pub beta_min: f64,
    #[serde(default = "default_beta_max")]
    pub beta_max: f64,
}

fn default_beta_min() -> f64 {
    DEFAULT_BETA_MIN
}

fn default_beta_max() -> f64 {
    DEFAULT_BETA_MAX
}

impl ScheduleSpec {
    pub fn vp(steps: usize) -> Self {
        Self {
            kind: ScheduleKind::VariancePreservingDdim,
            steps,
            beta_min: DEFAULT_BETA_MIN,
            beta_max: DEFAULT_BETA_MAX,
        }
    }

    pub fn flow(steps: usize) -> Self {
        Self { kind: ScheduleKind::RectifiedFlow, ..Self::vp(steps) }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        match self.kind {
            ScheduleKind::VariancePreservingDdim => {
                build_vp_schedule(self.steps, self.beta_min, self.beta_max)
            }
            ScheduleKind::RectifiedFlow => build_flow_schedule(self.steps),
        }
    }

    /// Parse `vp:<T>`, `vp:<T>:<beta_min>:<beta_max>` or `flow:<T>`.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("schedule spec `{text}`; expected vp:<T>[:<bmin>:<bmax>] or flow:<T>"));
        let parts: Vec<&str> = text.trim().split(':').collect();
        let steps: usize = parts.get(1).ok_or_else(bad)?.parse().map_err(|_| bad())?;
        match (parts[0], parts.len()) {
            ("vp", 2) => Ok(Self::vp(steps)),
            ("vp", 4) => Ok(Self {
                beta_min: parts[2].parse().map_err(|_| bad())?,
                beta_max: parts[3].parse().map_err(|_| bad())?,
                ..Self::vp(steps)
            }),
            ("flow", 2) => Ok(Self::flow(steps)),
            _ => Err(bad()),
        }
    }
}

impl std::fmt::Display for ScheduleSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.kind {
            ScheduleKind::VariancePreservingDdim => {
                write!(f, "vp:{}:{}:{}", self.steps, self.beta_min, self.beta_max)
            }
            ScheduleKind::RectifiedFlow => write!(f, "flow:{}", self.steps),
        }
    }
}

/// One deterministic denoising step away from timestep `t`. Inputs are not modified.
pub fn denoise_step(x: &Latent, eps: &Latent, t: usize, sched: &NoiseSchedule) -> Result<Latent> {
    x.check_dim(eps)?;
    let (f, g) = sched.coefficients(t)?;
    let values = x.values.iter().zip(&eps.values).map(|(&xv, &ev)| f * xv - g * ev).collect();
    Ok(Latent { values, shape: x.shape })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Signal scale recomputed as `exp(0.5 * sum(ln(1 - beta)))` over the
    /// training grid, independent of the running product above.
    fn oracle_scales(t: usize, steps: usize, beta_min: f64, beta_max: f64) -> (f64, f64) {
        let j = t * TRAIN_STEPS / steps;
        let log_ab: f64 = (1..=j)
            .map(|i| {
                let beta = beta_min + (beta_max - beta_min) * (i - 1) as f64 / 999.0;
                (1.0 - beta).ln()
            })
            .sum();
        let ab = log_ab.exp();
        (ab.sqrt(), (1.0 - ab).sqrt())
    }

    #[test]
    fn vp_rejects_bad_parameters() {
        assert!(build_vp_schedule(1, 1e-4, 2e-2).is_err());
        assert!(build_vp_schedule(10, 2e-2, 1e-4).is_err());
        assert!(build_vp_schedule(10, 0.0, 1e-2).is_err());
        assert!(build_vp_schedule(10, 1e-4, 1.0).is_err());
        assert!(build_vp_schedule(1001, 1e-4, 2e-2).is_err());
    }

    #[test]
    fn vp_variance_preservation_at_data_end() {
        let s = build_vp_schedule(50, 1e-4, 2e-2).unwrap();
        assert!((s.a[0] * s.a[0] + s.s[0] * s.s[0] - 1.0).abs() <= 1e-12);
        s.validate().unwrap();
    }

    #[test]
    fn vp_coefficients_match_direct_evaluation() {
        let (bmin, bmax) = (1e-4, 2e-2);
        let s = build_vp_schedule(50, bmin, bmax).unwrap();
        for t in 1..=50 {
            let (a_prev, s_prev) = oracle_scales(t - 1, 50, bmin, bmax);
            let (a_t, s_t) = oracle_scales(t, 50, bmin, bmax);
            let g = a_prev * s_t / a_t - s_prev;
            let f = a_prev / a_t;
            assert!((s.g[t - 1] - g).abs() < 1e-12, "g at t={t}");
            assert!((s.f[t - 1] - f).abs() < 1e-12, "f at t={t}");
            assert!(s.g[t - 1] >= 0.0);
        }
    }

    #[test]
    fn vp_near_zero_noise_is_near_identity() {
        // g scales like sqrt(beta), f - 1 like beta
        for (bmin, f_tol, g_tol) in [(1e-6, 1e-3, 0.05), (1e-10, 1e-7, 1e-3)] {
            let s = build_vp_schedule(2, bmin, 2.0 * bmin).unwrap();
            for t in 1..=2 {
                let (f, g) = s.coefficients(t).unwrap();
                assert!(f >= 1.0 && f - 1.0 < f_tol && (0.0..g_tol).contains(&g), "f={f} g={g}");
            }
        }
    }

    #[test]
    fn vp_retain_coefficient_exceeds_one() {
        // a_t grows toward t = 0, so a_{t-1} / a_t > 1 at every step: the
        // coefficient-free relaxation premise holds for g but not for f.
        let s = build_vp_schedule(50, 1e-4, 2e-2).unwrap();
        assert!(s.f.iter().all(|&f| f > 1.0));
        assert!(s.g.iter().all(|&g| (0.0..=1.0).contains(&g)));
        assert!(!s.coefficients_at_most_one());
    }

    #[test]
    fn flow_uniform_grid() {
        let s = build_flow_schedule(4).unwrap();
        let taus: Vec<f64> = (0..=4).rev().map(|t| s.tau(t)).collect();
        assert_eq!(taus, vec![1.0, 0.75, 0.5, 0.25, 0.0]);
        assert!(s.g.iter().all(|&g| (g - 0.25).abs() < 1e-15));
        assert!(s.f.iter().all(|&f| f == 1.0));
        assert_eq!(s.kind, ScheduleKind::RectifiedFlow);
        assert!(s.coefficients_at_most_one());

        let two = build_flow_schedule(2).unwrap();
        assert_eq!(two.g, vec![0.5, 0.5]);
        assert!(build_flow_schedule(1).is_err());
    }

    #[test]
    fn denoise_step_arithmetic() {
        let sched = NoiseSchedule {
            kind: ScheduleKind::RectifiedFlow,
            steps: 2,
            f: vec![0.5, 1.0],
            g: vec![0.25, 0.1],
            a: vec![1.0, 0.5, 0.0],
            s: vec![0.0, 0.5, 1.0],
            spec: None,
        };
        let x = Latent::new(vec![2.0]);
        let e = Latent::new(vec![1.0]);
        assert_eq!(denoise_step(&x, &e, 1, &sched).unwrap().values, vec![0.75]);
        let y = denoise_step(&Latent::new(vec![0.0, 0.0]), &Latent::new(vec![1.0, -1.0]), 2, &sched)
            .unwrap();
        assert_eq!(y.values, vec![-0.1, 0.1]);

        let id = NoiseSchedule { f: vec![1.0, 1.0], g: vec![0.0, 0.0], ..sched.clone() };
        let z = Latent::new(vec![0.3, -7.0]);
        assert_eq!(denoise_step(&z, &Latent::new(vec![5.0, 5.0]), 1, &id).unwrap(), z);
    }

    #[test]
    fn denoise_step_errors() {
        let s = build_flow_schedule(4).unwrap();
        let x = Latent::new(vec![1.0, 2.0]);
        assert!(matches!(
            denoise_step(&x, &Latent::new(vec![1.0]), 1, &s),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(denoise_step(&x, &x, 0, &s), Err(Error::TimestepOutOfRange { .. })));
        assert!(matches!(denoise_step(&x, &x, 5, &s), Err(Error::TimestepOutOfRange { .. })));
    }

    #[test]
    fn schedule_json_shape() {
        let s = build_flow_schedule(3).unwrap();
        let v: serde_json::Value = serde_json::to_value(&s).unwrap();
        assert_eq!(v["kind"], "rectified-flow");
        assert_eq!(v["T"], 3);
        for key in ["f", "g", "a", "s"] {
            assert!(v[key].is_array());
        }
        let back: NoiseSchedule = serde_json::from_value(v).unwrap();
        assert_eq!((back.f, back.g, back.a, back.s), (s.f, s.g, s.a, s.s));
    }

    #[test]
    fn spec_strings_round_trip() {
        let v = ScheduleSpec::parse("vp:50").unwrap();
        assert_eq!(v, ScheduleSpec::vp(50));
        assert_eq!(ScheduleSpec::parse(&v.to_string()).unwrap(), v);
        let f = ScheduleSpec::parse("flow:8").unwrap();
        assert_eq!(f.build().unwrap().kind, ScheduleKind::RectifiedFlow);
        assert_eq!(ScheduleSpec::parse("vp:20:0.001:0.01").unwrap().beta_max, 0.01);
        assert!(ScheduleSpec::parse("cosine:20").is_err());
        assert!(ScheduleSpec::parse("vp").is_err());
    }

    proptest! {
        #[test]
        fn denoise_step_is_homogeneous(
            xs in prop::collection::vec(-5.0f64..5.0, 4),
            es in prop::collection::vec(-5.0f64..5.0, 4),
            c in -3.0f64..3.0,
            t in 1usize..=50,
        ) {
            let s = build_vp_schedule(50, 1e-4, 2e-2).unwrap();
            let x = Latent::new(xs);
            let e = Latent::new(es);
            let lhs = denoise_step(&x.scale(c), &e.scale(c), t, &s).unwrap();
            let rhs = denoise_step(&x, &e, t, &s).unwrap().scale(c);
            for (l, r) in lhs.values.iter().zip(&rhs.values) {
                prop_assert!((l - r).abs() <= 1e-12);
            }
        }
    }
}
