//! Latent vectors and the elementwise arithmetic the samplers need.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A flat real vector, optionally annotated with a `(height, width)` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<(usize, usize)>,
}

impl Latent {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values, shape: None }
    }

    pub fn zeros(dim: usize) -> Self {
        Self::new(vec![0.0; dim])
    }

    pub fn with_shape(values: Vec<f64>, height: usize, width: usize) -> Result<Self> {
        if height * width != values.len() {
            return Err(Error::InvalidParameter(format!(
                "grid {height}x{width} does not hold {} values",
                values.len()
            )));
        }
        Ok(Self { values, shape: Some((height, width)) })
    }

    /// Standard normal draw from a ChaCha8 stream seeded with `seed`.
    pub fn standard_normal(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new((0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_dim(&self, other: &Latent) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: other.dim() });
        }
        Ok(())
    }

    fn zip_with(&self, other: &Latent, op: impl Fn(f64, f64) -> f64) -> Result<Latent> {
        self.check_dim(other)?;
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| op(a, b)).collect();
        Ok(Latent { values, shape: self.shape })
    }

    pub fn add(&self, other: &Latent) -> Result<Latent> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Latent) -> Result<Latent> {
        self.zip_with(other, |a, b| a - b)
    }

    /// `self + c * other`
    pub fn axpy(&self, c: f64, other: &Latent) -> Result<Latent> {
        self.zip_with(other, |a, b| a + c * b)
    }

    /// `a * self + b * other`
    pub fn lincomb(&self, a: f64, other: &Latent, b: f64) -> Result<Latent> {
        self.zip_with(other, |x, y| a * x + b * y)
    }

    pub fn scale(&self, c: f64) -> Latent {
        Latent { values: self.values.iter().map(|v| c * v).collect(), shape: self.shape }
    }

    pub fn norm_l2(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn norm_l1(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }

    pub fn mean_abs(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.norm_l1() / self.dim() as f64
    }

    pub fn dot(&self, other: &Latent) -> Result<f64> {
        self.check_dim(other)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }

    /// Short content hash over the little-endian bit patterns of the values.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for v in &self.values {
            hasher.update(v.to_le_bytes());
        }
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Which norm to use where the analysis leaves it open.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Norm {
    #[default]
    L2,
    L1,
}

impl Norm {
    pub fn of(self, x: &Latent) -> f64 {
        match self {
            Norm::L2 => x.norm_l2(),
            Norm::L1 => x.norm_l1(),
        }
    }
}
