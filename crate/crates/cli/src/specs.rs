//! Model spec strings and their resolution into oracles.

use std::path::PathBuf;

use sha2::{Digest, Sha256};
use trendskip::{MixtureFamily, OracleModel, PlaybackTable, RunTrace, ScheduleKind, ScheduleSpec};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Gmm(PathBuf),
    Trace(PathBuf),
    Standard2d,
    Grid8x8,
}

impl ModelSpec {
    pub fn parse(text: &str) -> CliResult<Self> {
        let (kind, rest) = text.split_once(':').ok_or_else(|| {
            CliError::Validation(format!("model spec `{text}`; expected gmm:<path>, trace:<path> or builtin:<name>"))
        })?;
        match (kind, rest) {
            ("gmm", p) if !p.is_empty() => Ok(ModelSpec::Gmm(p.into())),
            ("trace", p) if !p.is_empty() => Ok(ModelSpec::Trace(p.into())),
            ("builtin", "standard2d") => Ok(ModelSpec::Standard2d),
            ("builtin", "grid8x8") => Ok(ModelSpec::Grid8x8),
            _ => Err(CliError::Validation(format!("unknown model spec `{text}`"))),
        }
    }

    /// Load files and build the oracle matching the schedule's parametrization.
    pub fn resolve(&self, kind: ScheduleKind) -> CliResult<ResolvedModel> {
        let read = |p: &PathBuf| {
            std::fs::read(p).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))
        };
        let (model, bytes, conditions) = match self {
            ModelSpec::Standard2d | ModelSpec::Grid8x8 => {
                let (name, fam) = if *self == ModelSpec::Standard2d {
                    ("builtin:standard2d", MixtureFamily::standard_2d())
                } else {
                    ("builtin:grid8x8", MixtureFamily::grid_8x8())
                };
                let n = fam.conditions.len();
                (OracleModel::gmm_for(kind, fam), name.as_bytes().to_vec(), Some(n))
            }
            ModelSpec::Gmm(p) => {
                let bytes = read(p)?;
                let text = String::from_utf8_lossy(&bytes);
                let fam = MixtureFamily::from_json(&text)
                    .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
                let n = fam.conditions.len();
                (OracleModel::gmm_for(kind, fam), bytes, Some(n))
            }
            ModelSpec::Trace(p) => {
                let bytes = read(p)?;
                let trace = RunTrace::read_jsonl(&bytes[..])
                    .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
                let table = PlaybackTable::from_trace(&trace)
                    .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
                (OracleModel::Playback(table), bytes, None)
            }
        };
        let dim = model.dim().ok_or_else(|| CliError::Validation("model has no recorded outputs".into()))?;
        Ok(ResolvedModel { shape: model.shape(), model, dim, conditions, spec_bytes: bytes })
    }
}

#[derive(Debug, Clone)]
pub struct ResolvedModel {
    pub model: OracleModel,
    pub dim: usize,
    pub shape: Option<(usize, usize)>,
    /// Number of registered conditions; playback models accept any id.
    pub conditions: Option<usize>,
    /// Bytes identifying the model: the file contents, or the builtin name.
    pub spec_bytes: Vec<u8>,
}

impl ResolvedModel {
    pub fn check_conditions(&self, ids: &[usize]) -> CliResult<()> {
        if let (Some(n), Some(bad)) = (self.conditions, ids.iter().find(|c| Some(**c) >= self.conditions)) {
            return Err(CliError::Validation(format!("condition {bad} out of range; model has {n}")));
        }
        Ok(())
    }
}

/// Hex key identifying a tolerance search: model bytes, schedule, condition ids
/// and profiling seeds.
pub fn tolerance_cache_key(
    model: &ResolvedModel,
    sched: &ScheduleSpec,
    conditions: &[usize],
    seeds: usize,
    extra: &str,
) -> String {
    let mut h = Sha256::new();
    h.update((model.spec_bytes.len() as u64).to_le_bytes());
    h.update(&model.spec_bytes);
    h.update(sched.to_string().as_bytes());
    h.update(b"|");
    for c in conditions {
        h.update((*c as u64).to_le_bytes());
    }
    h.update(b"|");
    h.update((seeds as u64).to_le_bytes());
    h.update(extra.as_bytes());
    h.finalize().iter().take(12).map(|b| format!("{b:02x}")).collect()
}
