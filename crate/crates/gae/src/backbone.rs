//! The pixel-space transformer pair: encoder `E_p` over patch tokens and
//! decoder `D_p` back to pixels. Both are plain ViTs with RMS-normalized
//! pre-norm blocks and gated feedforwards; positions are learned additive
//! embeddings over the fixed patch grid.

use candle_core::Tensor;
use candle_nn::{Linear, Module};

use crate::data::{patchify, unpatchify, TokenGrid};
use crate::error::{GaeError, Result};
use crate::latent::LatentTensor;
use crate::nn::{Block, Init, ParamBuilder, RmsNorm};

/// Width/depth of one transformer tower.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub patch: usize,
    #[serde(default)]
    pub qk_norm: bool,
}

impl BackboneConfig {
    pub fn vit_s() -> Self {
        Self {
            hidden_dim: 384,
            layers: 12,
            heads: 6,
            mlp_ratio: 4.0,
            patch: 16,
            qk_norm: false,
        }
    }

    pub fn vit_b() -> Self {
        Self {
            hidden_dim: 768,
            layers: 12,
            heads: 12,
            mlp_ratio: 4.0,
            patch: 16,
            qk_norm: false,
        }
    }

    pub fn vit_l() -> Self {
        Self {
            hidden_dim: 1024,
            layers: 24,
            heads: 16,
            mlp_ratio: 4.0,
            patch: 16,
            qk_norm: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(GaeError::config("backbone needs at least one layer"));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(GaeError::config(format!(
                "hidden_dim {} not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.patch == 0 {
            return Err(GaeError::config("patch size must be positive"));
        }
        Ok(())
    }
}

fn tower(pb: &ParamBuilder, cfg: &BackboneConfig) -> Result<Vec<Block>> {
    (0..cfg.layers)
        .map(|i| {
            Block::new(
                &pb.sub(format!("block{i}")),
                cfg.hidden_dim,
                cfg.heads,
                cfg.mlp_ratio,
                cfg.qk_norm,
            )
        })
        .collect()
}

/// `E_p`: pixels -> patch tokens -> transformer -> `[B, N, hidden]`.
pub struct PixelEncoder {
    cfg: BackboneConfig,
    patch_embed: Linear,
    pos: Tensor,
    blocks: Vec<Block>,
    final_norm: RmsNorm,
    grid: (usize, usize),
}

impl PixelEncoder {
    pub fn new(pb: &ParamBuilder, cfg: BackboneConfig, image_size: usize) -> Result<Self> {
        cfg.validate()?;
        if image_size % cfg.patch != 0 {
            return Err(GaeError::config(format!(
                "image size {image_size} not divisible by patch {}",
                cfg.patch
            )));
        }
        let side = image_size / cfg.patch;
        let n = side * side;
        let in_dim = cfg.patch * cfg.patch * 3;
        Ok(Self {
            patch_embed: pb.linear("patch_embed", in_dim, cfg.hidden_dim)?,
            pos: pb.take("pos", &[1, n, cfg.hidden_dim], Init::Normal(0.02))?,
            blocks: tower(&pb.sub("enc"), &cfg)?,
            final_norm: RmsNorm::new(pb, "final_norm", cfg.hidden_dim)?,
            grid: (side, side),
            cfg,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// `[B, 3, H, W]` pixels to `[B, N, hidden]` features.
    pub fn forward(&self, pixels: &Tensor) -> Result<TokenGrid> {
        let tokens = patchify(pixels, self.cfg.patch)?;
        if tokens.grid != self.grid {
            return Err(GaeError::shape(format!(
                "encoder built for grid {:?}, got {:?}",
                self.grid, tokens.grid
            )));
        }
        let mut x = self
            .patch_embed
            .forward(&tokens.tokens)?
            .broadcast_add(&self.pos)?;
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        let x = self.final_norm.forward(&x)?;
        TokenGrid::new(x, self.grid)
    }
}

/// `D_p`: latent tokens -> transformer -> per-patch pixels -> image.
pub struct PixelDecoder {
    cfg: BackboneConfig,
    in_proj: Linear,
    pos: Tensor,
    blocks: Vec<Block>,
    final_norm: RmsNorm,
    out: Linear,
    grid: (usize, usize),
    latent_dim: usize,
}

impl PixelDecoder {
    pub fn new(
        pb: &ParamBuilder,
        cfg: BackboneConfig,
        image_size: usize,
        latent_dim: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if image_size % cfg.patch != 0 {
            return Err(GaeError::config(format!(
                "image size {image_size} not divisible by patch {}",
                cfg.patch
            )));
        }
        let side = image_size / cfg.patch;
        let n = side * side;
        let out_dim = cfg.patch * cfg.patch * 3;
        Ok(Self {
            in_proj: pb.linear("in_proj", latent_dim, cfg.hidden_dim)?,
            pos: pb.take("pos", &[1, n, cfg.hidden_dim], Init::Normal(0.02))?,
            blocks: tower(&pb.sub("dec"), &cfg)?,
            final_norm: RmsNorm::new(pb, "final_norm", cfg.hidden_dim)?,
            out: pb.linear("out", cfg.hidden_dim, out_dim)?,
            grid: (side, side),
            latent_dim,
            cfg,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// Latent tokens to `[B, 3, H, W]` pixels (unclamped reals).
    pub fn forward(&self, z: &LatentTensor) -> Result<Tensor> {
        self.forward_tokens(&z.values, z.grid)
    }

    /// Same as [`forward`](Self::forward) for a raw `[B, N, d]` tensor.
    pub fn forward_tokens(&self, z: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
        let (_, _, d) = z.dims3()?;
        if d != self.latent_dim {
            return Err(GaeError::shape(format!(
                "decoder expects latent dim {}, got {d}",
                self.latent_dim
            )));
        }
        if grid != self.grid {
            return Err(GaeError::shape(format!(
                "decoder built for grid {:?}, got {:?}",
                self.grid, grid
            )));
        }
        let mut x = self.in_proj.forward(z)?.broadcast_add(&self.pos)?;
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        let x = self.final_norm.forward(&x)?;
        let tokens = self.out.forward(&x)?;
        unpatchify(&TokenGrid::new(tokens, self.grid)?, self.cfg.patch)
    }
}
