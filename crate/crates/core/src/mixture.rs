//! Diagonal-covariance Gaussian mixtures and their closed-form posteriors under
//! the affine corruption `x = signal * x0 + noise * z`, `z ~ N(0, I)`.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::Latent;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> Result<Self> {
        let gmm = Self { weights, means, variances };
        gmm.validate()?;
        Ok(gmm)
    }

    /// Isotropic components sharing one variance.
    pub fn isotropic(weights: Vec<f64>, means: Vec<Vec<f64>>, variance: f64) -> Result<Self> {
        let variances = means.iter().map(|m| vec![variance; m.len()]).collect();
        Self::new(weights, means, variances)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 {
            return Err(Error::EmptyInput("mixture has no components"));
        }
        if self.means.len() != k || self.variances.len() != k {
            return Err(Error::LengthMismatch { expected: k, found: self.means.len() });
        }
        if self.weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidParameter("mixture weights must be positive".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!("mixture weights sum to {total}")));
        }
        let dim = self.means[0].len();
        if dim == 0 {
            return Err(Error::EmptyInput("mixture dimension is zero"));
        }
        for (m, v) in self.means.iter().zip(&self.variances) {
            if m.len() != dim || v.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: m.len().min(v.len()) });
            }
            if m.iter().any(|x| !x.is_finite()) || v.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return Err(Error::InvalidParameter("means finite, variances positive".into()));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    fn check_dim(&self, x: &Latent) -> Result<()> {
        if x.dim() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: x.dim() });
        }
        Ok(())
    }

    /// Posterior component probabilities given `x = signal * x0 + noise * z`,
    /// computed in log space with max subtraction.
    pub fn responsibilities(&self, x: &Latent, signal: f64, noise: f64) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let logs: Vec<f64> = (0..self.components())
            .map(|i| {
                let mut lp = self.weights[i].ln();
                for d in 0..self.dim() {
                    let var = signal * signal * self.variances[i][d] + noise * noise;
                    let r = x.values[d] - signal * self.means[i][d];
                    lp -= 0.5 * ((2.0 * PI * var).ln() + r * r / var);
                }
                lp
            })
            .collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        Ok(exps.into_iter().map(|e| e / z).collect())
    }

    /// `E[x0 | x]` under `x = signal * x0 + noise * z`.
    pub fn posterior_mean(&self, x: &Latent, signal: f64, noise: f64) -> Result<Latent> {
        let resp = self.responsibilities(x, signal, noise)?;
        let mut out = vec![0.0; self.dim()];
        for (i, r) in resp.iter().enumerate() {
            for (d, o) in out.iter_mut().enumerate() {
                let mu = self.means[i][d];
                let var0 = self.variances[i][d];
                let var = signal * signal * var0 + noise * noise;
                *o += r * (mu + var0 * signal * (x.values[d] - signal * mu) / var);
            }
        }
        Ok(Latent { values: out, shape: x.shape })
    }

    /// Draw `(component, x0)` pairs; used by tests and Monte-Carlo checks.
    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> (usize, Vec<f64>) {
        use rand_distr::{Distribution, StandardNormal};
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut comp = self.components() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                comp = i;
                break;
            }
        }
        let x = (0..self.dim())
            .map(|d| {
                let z: f64 = StandardNormal.sample(rng);
                self.means[comp][d] + self.variances[comp][d].sqrt() * z
            })
            .collect();
        (comp, x)
    }
}

/// Integer label selecting one registered mixture; stands in for a text condition.
pub type ConditionId = usize;

/// A registered set of mixtures, one per condition id, sharing a dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureFamily {
    pub conditions: Vec<GaussianMixture>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<(usize, usize)>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MixtureFile {
    Family(MixtureFamily),
    Single(GaussianMixture),
}

impl MixtureFamily {
    pub fn new(conditions: Vec<GaussianMixture>, shape: Option<(usize, usize)>) -> Result<Self> {
        let fam = Self { conditions, shape };
        fam.validate()?;
        Ok(fam)
    }

    pub fn single(gmm: GaussianMixture) -> Result<Self> {
        Self::new(vec![gmm], None)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.conditions.first().ok_or(Error::EmptyInput("family has no mixtures"))?;
        for g in &self.conditions {
            g.validate()?;
            if g.dim() != first.dim() {
                return Err(Error::DimensionMismatch { expected: first.dim(), found: g.dim() });
            }
        }
        if let Some((h, w)) = self.shape {
            if h * w != first.dim() {
                return Err(Error::InvalidParameter(format!("grid {h}x{w} vs dim {}", first.dim())));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.conditions[0].dim()
    }

    pub fn get(&self, cond: ConditionId) -> Result<&GaussianMixture> {
        self.conditions.get(cond).ok_or(Error::UnknownCondition(cond))
    }

    /// Parse `{weights, means, variances}` or `{conditions: [...], shape?}`.
    pub fn from_json(text: &str) -> Result<Self> {
        match serde_json::from_str::<MixtureFile>(text)? {
            MixtureFile::Family(f) => {
                f.validate()?;
                Ok(f)
            }
            MixtureFile::Single(g) => Self::single(g),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Two unit-variance components at distance 3 from the origin, equal
    /// weights. Condition `c` rotates the pair by `c * pi / 8`; condition 0
    /// puts the means at `(+-3, 0)`.
    pub fn standard_2d() -> Self {
        let conditions = (0..8)
            .map(|c| {
                let (sin, cos) = (c as f64 * PI / 8.0).sin_cos();
                GaussianMixture::isotropic(
                    vec![0.5, 0.5],
                    vec![vec![3.0 * cos, 3.0 * sin], vec![-3.0 * cos, -3.0 * sin]],
                    1.0,
                )
                .expect("builtin mixture is valid")
            })
            .collect();
        Self { conditions, shape: None }
    }

    /// Three smooth 8x8 image patterns with small per-pixel variance. Condition
    /// `c` rotates every pattern by `c` quarter turns.
    pub fn grid_8x8() -> Self {
        const N: usize = 8;
        let patterns: Vec<Box<dyn Fn(f64, f64) -> f64>> = vec![
            Box::new(|_r, c| (c - 3.5) / 3.5),
            Box::new(|r, c| ((r - 3.5).powi(2) + (c - 3.5).powi(2)).sqrt() / 2.5 - 1.0),
            Box::new(|r, c| (PI * r / 7.0).cos() * (PI * c / 7.0).sin()),
        ];
        let conditions = (0..4)
            .map(|quarter| {
                let means = patterns
                    .iter()
                    .map(|p| {
                        let mut img = vec![0.0; N * N];
                        for r in 0..N {
                            for c in 0..N {
                                let (rr, cc) = match quarter {
                                    0 => (r, c),
                                    1 => (c, N - 1 - r),
                                    2 => (N - 1 - r, N - 1 - c),
                                    _ => (N - 1 - c, r),
                                };
                                img[r * N + c] = p(rr as f64, cc as f64);
                            }
                        }
                        img
                    })
                    .collect();
                GaussianMixture::isotropic(vec![0.3, 0.3, 0.4], means, 0.05)
                    .expect("builtin mixture is valid")
            })
            .collect();
        Self { conditions, shape: Some((N, N)) }
    }
}
