//! Experiment configuration.
//!
//! The file is TOML with fixed sections; unknown keys are rejected. Only
//! `[schedule]` and `[model]` are required:
//!
//! ```toml
//! [schedule]
//! spec = "vp:50"              # vp:<T>[:<beta_min>:<beta_max>] or flow:<T>
//!
//! [model]
//! spec = "builtin:standard2d" # gmm:<path> | trace:<path> | builtin:standard2d | builtin:grid8x8
//! conditions = [0]
//!
//! [policy]
//! kind = "etc"                # etc | full | naive-reuse | residual-trend
//! alpha = 0.5
//! warmup = 6
//! sigma = "search"            # or a positive number
//! deviation = "mean-abs"      # mean-abs | rms
//!
//! [search]
//! seeds = 8                   # profiling runs per condition
//! sim_metric = "cosine"       # cosine | one-minus-nrmse | ssim
//! base_seed = 0
//! # conditions = [0]          # defaults to model.conditions
//!
//! [run]
//! seeds = [0, 1, 2]
//! snapshot = "hashes"         # hashes | full
//! # out_dir = "results"
//!
//! [sweep]
//! sigmas = [0.01, 0.03]
//! alphas = [0.3, 0.5, 0.7]
//! warmups = [2, 6]
//! ```

use std::fmt;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use trendskip::{DeviationMetric, PolicyKind, ScheduleSpec, SimMetric, SnapshotPolicy};

use crate::error::{CliError, CliResult};
use crate::specs::ModelSpec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaSetting {
    Search,
    Value(f64),
}

impl Serialize for SigmaSetting {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            SigmaSetting::Search => s.serialize_str("search"),
            SigmaSetting::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for SigmaSetting {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = SigmaSetting;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("\"search\" or a positive number")
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<SigmaSetting, E> {
                SigmaSetting::parse(v).map_err(E::custom)
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<SigmaSetting, E> {
                Ok(SigmaSetting::Value(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<SigmaSetting, E> {
                Ok(SigmaSetting::Value(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<SigmaSetting, E> {
                Ok(SigmaSetting::Value(v as f64))
            }
        }
        d.deserialize_any(V)
    }
}

impl SigmaSetting {
    pub fn parse(text: &str) -> Result<Self, String> {
        match text.trim() {
            "search" => Ok(SigmaSetting::Search),
            other => other
                .parse::<f64>()
                .map(SigmaSetting::Value)
                .map_err(|_| format!("sigma `{other}` is neither \"search\" nor a number")),
        }
    }
}

fn default_conditions() -> Vec<usize> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub spec: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub spec: String,
    #[serde(default = "default_conditions")]
    pub conditions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub kind: PolicyKind,
    pub alpha: f64,
    pub warmup: usize,
    pub sigma: SigmaSetting,
    pub deviation: DeviationMetric,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            kind: PolicyKind::Etc,
            alpha: 0.5,
            warmup: 6,
            sigma: SigmaSetting::Search,
            deviation: DeviationMetric::MeanAbs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conditions: Option<Vec<usize>>,
    pub seeds: usize,
    pub sim_metric: SimMetric,
    pub base_seed: u64,
}

impl Default for SearchSection {
    fn default() -> Self {
        Self { conditions: None, seeds: 8, sim_metric: SimMetric::Cosine, base_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub snapshot: SnapshotPolicy,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seeds: vec![0], snapshot: SnapshotPolicy::Hashes, out_dir: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub sigmas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub warmups: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schedule: ScheduleSection,
    pub model: ModelSection,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default)]
    pub search: SearchSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

impl ExperimentConfig {
    pub fn new(schedule: &str, model: &str) -> Self {
        Self {
            schedule: ScheduleSection { spec: schedule.into() },
            model: ModelSection { spec: model.into(), conditions: default_conditions() },
            policy: PolicySection::default(),
            search: SearchSection::default(),
            run: RunSection::default(),
            sweep: SweepSection::default(),
        }
    }

    pub fn schedule_spec(&self) -> CliResult<ScheduleSpec> {
        ScheduleSpec::parse(&self.schedule.spec).map_err(CliError::validation)
    }

    pub fn model_spec(&self) -> CliResult<ModelSpec> {
        ModelSpec::parse(&self.model.spec)
    }

    pub fn search_conditions(&self) -> &[usize] {
        self.search.conditions.as_deref().unwrap_or(&self.model.conditions)
    }

    /// Range and consistency checks that need no file access.
    pub fn check(&self) -> CliResult<()> {
        let sched = self.schedule_spec()?;
        sched.build().map_err(CliError::validation)?;
        self.model_spec()?;
        let bad = |m: String| Err(CliError::Validation(m));
        let check_alpha = |a: f64| a > 0.0 && a <= 1.0;
        let check_warmup = |n: usize| n + 2 <= sched.steps;
        if !check_alpha(self.policy.alpha) {
            return bad(format!("policy.alpha = {} must lie in (0, 1]", self.policy.alpha));
        }
        if !check_warmup(self.policy.warmup) {
            return bad(format!("policy.warmup = {} needs warmup + 2 <= T = {}", self.policy.warmup, sched.steps));
        }
        if let SigmaSetting::Value(s) = self.policy.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("policy.sigma = {s} must be positive"));
            }
        }
        if self.model.conditions.is_empty() {
            return bad("model.conditions is empty".into());
        }
        if self.run.seeds.is_empty() {
            return bad("run.seeds is empty".into());
        }
        // TOML integers are signed 64-bit
        if let Some(s) = self.run.seeds.iter().chain([&self.search.base_seed]).find(|s| **s > i64::MAX as u64) {
            return bad(format!("seed {s} exceeds {}", i64::MAX));
        }
        if self.search.seeds == 0 || self.search_conditions().is_empty() {
            return bad("search needs at least one condition and one seed".into());
        }
        if let Some(a) = self.sweep.alphas.iter().find(|a| !check_alpha(**a)) {
            return bad(format!("sweep.alphas contains {a}"));
        }
        if let Some(n) = self.sweep.warmups.iter().find(|n| !check_warmup(**n)) {
            return bad(format!("sweep.warmups contains {n}, needs n + 2 <= T"));
        }
        if let Some(s) = self.sweep.sigmas.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return bad(format!("sweep.sigmas contains {s}"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Parse and validate a config document.
pub fn parse_config(text: &str) -> CliResult<ExperimentConfig> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
    cfg.check()?;
    Ok(cfg)
}
