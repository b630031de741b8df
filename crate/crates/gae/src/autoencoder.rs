//! The full autoencoder: `E_p` -> latent head -> `D_p`. The default head is
//! the RMS-normalized projector with dynamic noise; the alternative is the
//! KL-VAE comparison head (mean + log-variance, reparameterized sample,
//! analytic KL penalty, no hypersphere constraint).

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{Linear, Module};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BackboneConfig, PixelDecoder, PixelEncoder};
use crate::data::{Dataset, LatentCache, LatentCacheHeader};
use crate::error::{GaeError, Result};
use crate::latent::{
    self, LatentKind, LatentProjector, LatentTensor, NoiseConfig, NoiseDraw,
};
use crate::losses;
use crate::nn::{ParamStore};
use crate::rng::{self, Stream};

/// Which latent head the autoencoder carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LatentHeadKind {
    #[default]
    Rms,
    Kl,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AeConfig {
    pub backbone: BackboneConfig,
    pub image_size: usize,
    pub latent_dim: usize,
    #[serde(default)]
    pub head: LatentHeadKind,
    pub noise: NoiseConfig,
    /// KL head only.
    #[serde(default = "default_kl_weight")]
    pub kl_weight: f64,
}

fn default_kl_weight() -> f64 {
    0.1
}

impl AeConfig {
    pub fn desk() -> Self {
        Self {
            backbone: BackboneConfig {
                hidden_dim: 96,
                layers: 4,
                heads: 4,
                mlp_ratio: 2.0,
                patch: 8,
                qk_norm: false,
            },
            image_size: 64,
            latent_dim: 16,
            head: LatentHeadKind::Rms,
            noise: NoiseConfig {
                c_sigma: 0.2,
                granularity: Default::default(),
            },
            kl_weight: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.noise.validate()?;
        if self.image_size % self.backbone.patch != 0 {
            return Err(GaeError::config(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.backbone.patch
            )));
        }
        if self.latent_dim == 0 {
            return Err(GaeError::config("latent_dim must be positive"));
        }
        Ok(())
    }
}

enum Head {
    Rms(LatentProjector),
    Kl { mean: Linear, logvar: Linear },
}

/// What the encoder produced for one training step. `features` are the raw
/// encoder tokens before the latent head, kept around for pre-projector
/// supervision.
pub enum TrainEncoding {
    Rms {
        features: Tensor,
        mu: LatentTensor,
        z: LatentTensor,
        draw: NoiseDraw,
    },
    Kl {
        features: Tensor,
        mean: Tensor,
        logvar: Tensor,
        z: Tensor,
    },
}

impl TrainEncoding {
    /// The tokens fed to the decoder.
    pub fn sample(&self) -> &Tensor {
        match self {
            TrainEncoding::Rms { z, .. } => &z.values,
            TrainEncoding::Kl { z, .. } => z,
        }
    }

    /// Raw encoder tokens `[B, N, hidden]`.
    pub fn features(&self) -> &Tensor {
        match self {
            TrainEncoding::Rms { features, .. } => features,
            TrainEncoding::Kl { features, .. } => features,
        }
    }
}

pub struct Autoencoder {
    encoder: PixelEncoder,
    head: Head,
    decoder: PixelDecoder,
    store: ParamStore,
    cfg: AeConfig,
}

impl Autoencoder {
    /// Build all parameters from the model-init stream in a fixed order.
    pub fn new(cfg: AeConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new();
        let pb = store.builder(rng::stream_rng(seed, Stream::ModelInit), dtype, device);
        let encoder = PixelEncoder::new(&pb.sub("enc"), cfg.backbone, cfg.image_size)?;
        let head = match cfg.head {
            LatentHeadKind::Rms => Head::Rms(LatentProjector::new(
                &pb.sub("head"),
                cfg.backbone.hidden_dim,
                cfg.latent_dim,
            )?),
            LatentHeadKind::Kl => Head::Kl {
                mean: pb.sub("head").linear("mean", cfg.backbone.hidden_dim, cfg.latent_dim)?,
                logvar: pb
                    .sub("head")
                    .linear("logvar", cfg.backbone.hidden_dim, cfg.latent_dim)?,
            },
        };
        let decoder = PixelDecoder::new(&pb.sub("dec"), cfg.backbone, cfg.image_size, cfg.latent_dim)?;
        Ok(Self {
            encoder,
            head,
            decoder,
            store,
            cfg,
        })
    }

    pub fn config(&self) -> &AeConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn grid(&self) -> (usize, usize) {
        self.encoder.grid()
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    pub fn encoder(&self) -> &PixelEncoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &PixelDecoder {
        &self.decoder
    }

    /// Raw `E_p` features before any latent head.
    pub fn encode_features(&self, pixels: &Tensor) -> Result<Tensor> {
        Ok(self.encoder.forward(pixels)?.tokens)
    }

    /// Deterministic latent used by evaluation, caching, and diffusion:
    /// μ for the RMS head, the mean head output for the KL arm.
    pub fn encode_mean(&self, pixels: &Tensor) -> Result<LatentTensor> {
        let features = self.encoder.forward(pixels)?;
        match &self.head {
            Head::Rms(proj) => latent::project_latent(&features.tokens, features.grid, proj),
            Head::Kl { mean, .. } => Ok(LatentTensor {
                values: mean.forward(&features.tokens)?,
                grid: features.grid,
                kind: LatentKind::Mean,
                c_sigma: 0.0,
            }),
        }
    }

    /// Training-time encoding with fresh noise from `rng`.
    pub fn encode_train(&self, pixels: &Tensor, rng: &mut ChaCha8Rng) -> Result<TrainEncoding> {
        let features = self.encoder.forward(pixels)?;
        match &self.head {
            Head::Rms(proj) => {
                let mu = latent::project_latent(&features.tokens, features.grid, proj)?;
                let (z, draw) = latent::noisy_latent(&mu, &self.cfg.noise, rng)?;
                Ok(TrainEncoding::Rms {
                    features: features.tokens,
                    mu,
                    z,
                    draw,
                })
            }
            Head::Kl { mean, logvar } => {
                let m = mean.forward(&features.tokens)?;
                let lv = logvar.forward(&features.tokens)?;
                let z = losses::reparameterize(&m, &lv, rng)?;
                Ok(TrainEncoding::Kl {
                    features: features.tokens,
                    mean: m,
                    logvar: lv,
                    z,
                })
            }
        }
    }

    /// Decode latent tokens `[B, N, d]` to pixels.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.decoder.forward_tokens(z, self.grid())
    }

    /// Full train-mode pass: returns the reconstruction and the encoding.
    pub fn forward_train(
        &self,
        pixels: &Tensor,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, TrainEncoding)> {
        let enc = self.encode_train(pixels, rng)?;
        let x_hat = self.decode(enc.sample())?;
        Ok((x_hat, enc))
    }

    /// Deterministic eval-mode reconstruction through the mean latent.
    pub fn reconstruct(&self, pixels: &Tensor) -> Result<Tensor> {
        let mu = self.encode_mean(pixels)?;
        self.decode(&mu.values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path)
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.store.load(path)
    }

    /// Encode the whole dataset in index order and write the latent cache.
    pub fn cache_latents(
        &self,
        dataset: &Dataset,
        batch_size: usize,
        device: &Device,
        path: &Path,
    ) -> Result<LatentCache> {
        let grid = self.grid();
        let dim = self.cfg.latent_dim;
        let mut values = Vec::with_capacity(dataset.len() * grid.0 * grid.1 * dim);
        let indices: Vec<usize> = (0..dataset.len()).collect();
        for chunk in indices.chunks(batch_size) {
            let batch = dataset.batch(chunk, device)?;
            let pixels = batch.pixels.to_dtype(self.store_dtype()?)?;
            let mu = self.encode_mean(&pixels)?;
            let flat = mu
                .values
                .to_dtype(DType::F32)?
                .flatten_all()?
                .to_vec1::<f32>()?;
            values.extend_from_slice(&flat);
        }
        let cache = LatentCache {
            header: LatentCacheHeader {
                version: 1,
                count: dataset.len(),
                grid,
                dim,
                checkpoint_hash: self.store.content_hash()?,
                class_count: dataset.class_count(),
                labels: dataset.labels(),
                ids: dataset.ids(),
            },
            values,
        };
        cache.write(path)?;
        Ok(cache)
    }

    fn store_dtype(&self) -> Result<DType> {
        let named = self.store.named_vars();
        named
            .first()
            .map(|(_, v)| v.as_tensor().dtype())
            .ok_or_else(|| GaeError::Other("empty parameter store".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{randn, stream_rng};

    fn tiny_cfg(head: LatentHeadKind) -> AeConfig {
        AeConfig {
            backbone: BackboneConfig {
                hidden_dim: 16,
                layers: 1,
                heads: 2,
                mlp_ratio: 2.0,
                patch: 4,
                qk_norm: false,
            },
            image_size: 8,
            latent_dim: 6,
            head,
            noise: NoiseConfig {
                c_sigma: 0.2,
                granularity: Default::default(),
            },
            kl_weight: 0.1,
        }
    }

    #[test]
    fn roundtrip_shapes_and_mean_geometry() {
        let dev = Device::Cpu;
        let ae = Autoencoder::new(tiny_cfg(LatentHeadKind::Rms), 3, DType::F32, &dev).unwrap();
        let mut r = stream_rng(4, Stream::DataOrder);
        let img = randn(&mut r, &[2, 3, 8, 8], DType::F32, &dev).unwrap();
        let mu = ae.encode_mean(&img).unwrap();
        assert_eq!(mu.values.dims(), &[2, 4, 6]);
        let rms = mu
            .values
            .sqr()
            .unwrap()
            .mean(2)
            .unwrap()
            .sqrt()
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        for v in rms {
            assert!((v - 1.0).abs() < 1e-5, "token rms {v}");
        }
        let x_hat = ae.reconstruct(&img).unwrap();
        assert_eq!(x_hat.dims(), img.dims());
    }

    #[test]
    fn same_seed_same_model_hash() {
        let dev = Device::Cpu;
        let a = Autoencoder::new(tiny_cfg(LatentHeadKind::Rms), 11, DType::F32, &dev).unwrap();
        let b = Autoencoder::new(tiny_cfg(LatentHeadKind::Rms), 11, DType::F32, &dev).unwrap();
        assert_eq!(
            a.store().content_hash().unwrap(),
            b.store().content_hash().unwrap()
        );
        let c = Autoencoder::new(tiny_cfg(LatentHeadKind::Rms), 12, DType::F32, &dev).unwrap();
        assert_ne!(
            a.store().content_hash().unwrap(),
            c.store().content_hash().unwrap()
        );
    }

    #[test]
    fn kl_head_emits_mean_and_logvar() {
        let dev = Device::Cpu;
        let ae = Autoencoder::new(tiny_cfg(LatentHeadKind::Kl), 5, DType::F32, &dev).unwrap();
        let mut r = stream_rng(6, Stream::DataOrder);
        let img = randn(&mut r, &[2, 3, 8, 8], DType::F32, &dev).unwrap();
        let mut nr = stream_rng(7, Stream::LatentNoise);
        match ae.encode_train(&img, &mut nr).unwrap() {
            TrainEncoding::Kl {
                features,
                mean,
                logvar,
                z,
            } => {
                assert_eq!(features.dims(), &[2, 4, 16]);
                assert_eq!(mean.dims(), &[2, 4, 6]);
                assert_eq!(logvar.dims(), &[2, 4, 6]);
                assert_eq!(z.dims(), &[2, 4, 6]);
            }
            _ => panic!("expected KL encoding"),
        }
    }

    #[test]
    fn latent_cache_matches_fresh_encode() {
        let dev = Device::Cpu;
        let dir = tempfile::tempdir().unwrap();
        // Build a 2-class dataset of 4x 8x8 PNG images.
        for (class, shade) in [("a", 40u8), ("b", 200u8)] {
            let cdir = dir.path().join("train").join(class);
            std::fs::create_dir_all(&cdir).unwrap();
            for i in 0..2 {
                let img = image::RgbImage::from_pixel(8, 8, image::Rgb([shade, shade / 2, i * 90]));
                img.save(cdir.join(format!("{i}.png"))).unwrap();
            }
        }
        let ds = Dataset::open(dir.path(), crate::data::Split::Train, 8).unwrap();
        let ae = Autoencoder::new(tiny_cfg(LatentHeadKind::Rms), 9, DType::F32, &dev).unwrap();
        let cache_path = dir.path().join("latents.bin");
        let cache = ae.cache_latents(&ds, 3, &dev, &cache_path).unwrap();
        let reloaded = LatentCache::read(&cache_path).unwrap();
        assert_eq!(reloaded.values, cache.values);
        assert_eq!(reloaded.header.checkpoint_hash, ae.store().content_hash().unwrap());

        // Same batch composition as the cache pass, so the f32 arithmetic
        // is bit-identical.
        let batch = ds.batch(&[0, 1, 2], &dev).unwrap();
        let fresh = ae.encode_mean(&batch.pixels).unwrap();
        let fresh_vals = fresh
            .values
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        let n = reloaded.record_len();
        assert_eq!(&reloaded.values[..3 * n], fresh_vals.as_slice());
    }
}
