//! Per-step records of a sampling run and their JSON-lines encoding.
//!
//! A trace file is one header line carrying the run configuration, one line
//! per denoising step in execution order (timestep `T` first), and a closing
//! summary line with the totals and the final latent.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::mixture::ConditionId;
use crate::policy::{DeviationMetric, PolicyKind};
use crate::schedule::ScheduleSpec;

pub const TRACE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    Real,
    Approx,
}

/// Where in the controller loop a step was taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    /// Unconditional real inference before any approximation.
    Warmup,
    /// Output extrapolated from the trend inside a burst.
    Burst,
    /// Real inference closing a round; updates the window and the trend.
    Check,
    /// The unconditional last step.
    Final,
    /// Plain full sampling.
    Plain,
}

/// Whether full latents are stored on each record or only output hashes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SnapshotPolicy {
    #[default]
    Hashes,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub action: Action,
    pub phase: Phase,
    /// Burst length for burst steps, the updated window for check steps.
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deviation: Option<f64>,
    /// L2 norm of the trend after this step (0 while no trend exists).
    pub delta_norm: f64,
    pub output_hash: String,
    /// Latent consumed by this step, `x_t`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<Latent>,
    /// Model output (real or approximated) used by this step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<Latent>,
    /// Trend in effect when the step was taken, before any update it causes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trend: Option<Latent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    pub policy: PolicyKind,
    pub alpha: f64,
    pub warmup: usize,
    pub sigma: f64,
    #[serde(default)]
    pub deviation_metric: DeviationMetric,
    pub schedule: ScheduleSpec,
    pub seed: u64,
    pub condition: ConditionId,
    pub snapshot: SnapshotPolicy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub config: TraceConfig,
    pub records: Vec<StepRecord>,
    pub nfe: usize,
    pub total_steps: usize,
    pub final_latent: Latent,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: TraceConfig,
}

#[derive(Serialize, Deserialize)]
struct Summary {
    nfe: usize,
    total_steps: usize,
    final_latent: Latent,
}

#[derive(Serialize, Deserialize)]
struct SummaryLine {
    summary: Summary,
}

impl RunTrace {
    pub fn steps(&self) -> usize {
        self.config.schedule.steps
    }

    pub fn record_at(&self, t: usize) -> Option<&StepRecord> {
        // records are stored from t = T downward
        let idx = self.steps().checked_sub(t)?;
        self.records.get(idx).filter(|r| r.t == t)
    }

    /// Structural checks every well-formed trace satisfies.
    pub fn validate(&self) -> Result<()> {
        let steps = self.steps();
        if self.records.len() != steps || self.total_steps != steps {
            return Err(Error::InvalidConfig(format!(
                "trace covers {} of {steps} steps",
                self.records.len()
            )));
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.t != steps - i {
                return Err(Error::InvalidConfig(format!("record {i} has t={}", r.t)));
            }
        }
        let real = self.records.iter().filter(|r| r.action == Action::Real).count();
        if real != self.nfe {
            return Err(Error::InvalidConfig(format!("nfe {} but {real} real records", self.nfe)));
        }
        if self.records.last().map(|r| r.action) != Some(Action::Real) {
            return Err(Error::InvalidConfig("final step is not a real inference".into()));
        }
        if self.config.policy != PolicyKind::Full {
            let warm = self.config.warmup + 1;
            if self.records.iter().take(warm).any(|r| r.action != Action::Real) {
                return Err(Error::InvalidConfig("warmup contains approximations".into()));
            }
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header { format_version: TRACE_FORMAT_VERSION, config: self.config.clone() };
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            writeln!(w)?;
        }
        let summary = SummaryLine {
            summary: Summary {
                nfe: self.nfe,
                total_steps: self.total_steps,
                final_latent: self.final_latent.clone(),
            },
        };
        serde_json::to_writer(&mut w, &summary)?;
        writeln!(w)?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let lines: Vec<String> =
            r.lines().collect::<std::io::Result<Vec<_>>>()?.into_iter().filter(|l| !l.trim().is_empty()).collect();
        if lines.len() < 2 {
            return Err(Error::Parse("trace needs a header and a summary line".into()));
        }
        let header: Header = serde_json::from_str(&lines[0])?;
        if header.format_version != TRACE_FORMAT_VERSION {
            return Err(Error::Parse(format!("unsupported trace format {}", header.format_version)));
        }
        let summary: SummaryLine = serde_json::from_str(&lines[lines.len() - 1])?;
        let records = lines[1..lines.len() - 1]
            .iter()
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse(format!("trace line {}: {e}", i + 2)))
            })
            .collect::<Result<Vec<StepRecord>>>()?;
        let trace = RunTrace {
            config: header.config,
            records,
            nfe: summary.summary.nfe,
            total_steps: summary.summary.total_steps,
            final_latent: summary.summary.final_latent,
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(file))
    }
}
