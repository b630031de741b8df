//! The latent projector, hypersphere normalization, and dynamic noise
//! sampling: `μ = rms_normalize(A_p(features))`, `z = μ + |σ|⊙ε` with
//! `σ ~ N(0, C_σ)` drawn fresh every step.

use candle_core::{DType, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::error::{GaeError, Result};
use crate::nn::{self, ParamBuilder, LATENT_RMS_EPS};
use crate::rng;

/// Whether a latent tensor holds the deterministic mean or a noisy sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentKind {
    Mean,
    Sample,
}

/// Latent tokens `[B, N, d]` over an `h × w` grid.
#[derive(Debug, Clone)]
pub struct LatentTensor {
    pub values: Tensor,
    pub grid: (usize, usize),
    pub kind: LatentKind,
    /// The `C_σ` that produced a sample; 0 for means.
    pub c_sigma: f64,
}

impl LatentTensor {
    pub fn dim(&self) -> Result<usize> {
        Ok(self.values.dims3()?.2)
    }
}

/// Granularity of the sampled noise scale. The default draws one scalar per
/// sample; the per-token alternative keeps the same half-normal magnitude
/// statistics but decorrelates scales across positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseGranularity {
    #[default]
    PerSample,
    PerToken,
}

/// Configuration of the noise-scale distribution.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub c_sigma: f64,
    #[serde(default)]
    pub granularity: NoiseGranularity,
}

impl NoiseConfig {
    pub fn new(c_sigma: f64) -> Result<Self> {
        let cfg = Self {
            c_sigma,
            granularity: NoiseGranularity::PerSample,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.c_sigma) {
            return Err(GaeError::config(format!(
                "c_sigma must lie in [0, 1], got {}",
                self.c_sigma
            )));
        }
        Ok(())
    }
}

/// The projector `A_p`: a weight-only linear map from encoder hidden width
/// to the latent dimension.
pub struct LatentProjector {
    weight: Tensor,
    pub hidden_dim: usize,
    pub latent_dim: usize,
}

impl LatentProjector {
    pub fn new(pb: &ParamBuilder, hidden_dim: usize, latent_dim: usize) -> Result<Self> {
        let std = (1.0 / hidden_dim as f64).sqrt();
        let weight = pb.take("weight", &[latent_dim, hidden_dim], nn::Init::Normal(std))?;
        Ok(Self {
            weight,
            hidden_dim,
            latent_dim,
        })
    }

    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let (b, n, d) = features.dims3()?;
        if d != self.hidden_dim {
            return Err(GaeError::shape(format!(
                "projector expects hidden dim {}, got {d}",
                self.hidden_dim
            )));
        }
        let flat = features.reshape((b * n, d))?;
        let out = flat.matmul(&self.weight.t()?)?;
        Ok(out.reshape((b, n, self.latent_dim))?)
    }
}

/// `μ = rms_normalize(A_p(features))`; every latent token lands on the
/// radius-√d shell (per-token RMS 1).
pub fn project_latent(
    features: &Tensor,
    grid: (usize, usize),
    projector: &LatentProjector,
) -> Result<LatentTensor> {
    let raw = projector.forward(features)?;
    let values = nn::rms_normalize(&raw, LATENT_RMS_EPS)?;
    Ok(LatentTensor {
        values,
        grid,
        kind: LatentKind::Mean,
        c_sigma: 0.0,
    })
}

/// Draw noise scales `σ ~ N(0, C_σ)`. Per-sample granularity yields shape
/// `[B, 1, 1]`; per-token yields `[B, N, 1]`. Either broadcasts over the
/// latent channels.
pub fn sample_noise_scale(
    cfg: &NoiseConfig,
    batch: usize,
    tokens: usize,
    dtype: DType,
    device: &candle_core::Device,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    cfg.validate()?;
    if batch == 0 {
        return Err(GaeError::shape("batch must be >= 1"));
    }
    let shape: &[usize] = match cfg.granularity {
        NoiseGranularity::PerSample => &[batch, 1, 1],
        NoiseGranularity::PerToken => &[batch, tokens, 1],
    };
    let std_normal = rng::randn(rng, shape, dtype, device)?;
    Ok((std_normal * cfg.c_sigma)?)
}

/// The draw behind one perturbation, kept for diagnostics.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub sigma: Tensor,
    pub eps: Tensor,
}

/// `z = μ + |σ|⊙ε` with `ε ~ N(0, 1)`. Noise enters as a constant, so
/// `∂z/∂μ` is the identity.
pub fn perturb_latent(
    mu: &LatentTensor,
    sigma: &Tensor,
    rng: &mut ChaCha8Rng,
    c_sigma: f64,
) -> Result<(LatentTensor, NoiseDraw)> {
    if mu.kind != LatentKind::Mean {
        return Err(GaeError::shape("perturb_latent expects a mean latent"));
    }
    let dims = mu.values.dims3()?;
    let eps = rng::randn(
        rng,
        &[dims.0, dims.1, dims.2],
        mu.values.dtype(),
        mu.values.device(),
    )?;
    let scale = sigma.abs()?.broadcast_as(mu.values.shape())?;
    let z = (&mu.values + (scale * &eps)?)?;
    Ok((
        LatentTensor {
            values: z,
            grid: mu.grid,
            kind: LatentKind::Sample,
            c_sigma,
        },
        NoiseDraw {
            sigma: sigma.clone(),
            eps,
        },
    ))
}

/// One training-time latent draw: sample scales, perturb, return both the
/// sample and the mean that produced it.
pub fn noisy_latent(
    mu: &LatentTensor,
    cfg: &NoiseConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(LatentTensor, NoiseDraw)> {
    let (b, n, _) = mu.values.dims3()?;
    let sigma = sample_noise_scale(cfg, b, n, mu.values.dtype(), mu.values.device(), rng)?;
    perturb_latent(mu, &sigma, rng, cfg.c_sigma)
}
