//! Trend-extrapolated step skipping for deterministic diffusion samplers.
//!
//! The crate pairs a step-skipping controller with exact Gaussian-mixture
//! oracles, so every accelerated trajectory can be compared against the
//! exact full-step trajectory it approximates.

pub mod analysis;
pub mod changepoint;
pub mod error;
pub mod latent;
pub mod metrics;
pub mod mixture;
pub mod oracle;
pub mod policy;
pub mod schedule;
pub mod tolerance;
pub mod trace;

pub use analysis::{analyze_trace, bound_report, closed_form_trend, BoundReport, BoundRow, ErrorLedger, LedgerRound};
pub use changepoint::detect_change_point;
pub use error::{Error, Result};
pub use latent::{Latent, Norm};
pub use metrics::{compare_runs, mse, psnr, ssim_grid, RunComparison};
pub use mixture::{ConditionId, GaussianMixture, MixtureFamily};
pub use oracle::{OracleModel, PerturbMode, PlaybackTable};
pub use policy::{run_baseline, run_etc, run_policy, DeviationMetric, PolicyKind, RunConfig};
pub use schedule::{denoise_step, NoiseSchedule, ScheduleKind, ScheduleSpec};
pub use tolerance::{search_tolerance, SearchOptions, SimMetric, ToleranceProfile};
pub use trace::{Action, Phase, RunTrace, SnapshotPolicy, StepRecord};
