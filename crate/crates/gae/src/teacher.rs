//! The semantic branch: a frozen feature backbone `f_vfm`, the trainable
//! downsampler `E_sp` (three variants), the throwaway decoder `D_sp`, the
//! cosine distillation objective, and the SVD projection baseline.
//!
//! At desk scale the frozen backbone is a randomly initialized ViT; real
//! foundation-model features can be supplied instead through the
//! precomputed-feature file format.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{Linear, Module};
use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BackboneConfig, PixelEncoder};
use crate::data::{Dataset, ImageBatch};
use crate::error::{GaeError, Result};
use crate::nn::{
    AdamW, Block, Init, ParamBuilder, ParamStore, RmsNorm, SelfAttention,
};
use crate::rng::{self, Stream};

/// Frozen per-token features `[B, N, D_t]` from the semantic backbone.
#[derive(Debug, Clone)]
pub struct TeacherFeatures {
    pub values: Tensor,
    pub grid: (usize, usize),
    pub backbone_id: String,
}

impl TeacherFeatures {
    pub fn dim(&self) -> Result<usize> {
        Ok(self.values.dims3()?.2)
    }
}

/// Configuration of the desk-scale frozen teacher backbone.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub backbone: BackboneConfig,
    /// Apply |x| to the final features. Rectified random features carry
    /// phase-invariant energy information, which is what makes a random
    /// frozen backbone a usable stand-in teacher.
    pub rectify: bool,
}

impl TeacherConfig {
    pub fn desk() -> Self {
        // Wide and shallow: rectified random features keep the most class
        // energy when they are mixed through few layers.
        Self {
            backbone: BackboneConfig {
                hidden_dim: 256,
                layers: 1,
                heads: 4,
                mlp_ratio: 2.0,
                patch: 8,
                qk_norm: false,
            },
            rectify: true,
        }
    }
}

/// The frozen backbone `f_vfm`. Parameters are built once from the teacher
/// init stream and never receive gradients; every output is detached.
pub struct FrozenTeacher {
    enc: PixelEncoder,
    store: ParamStore,
    rectify: bool,
    id: String,
}

impl FrozenTeacher {
    pub fn new(
        cfg: &TeacherConfig,
        image_size: usize,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let store = ParamStore::new();
        let r = rng::substream_rng(seed, Stream::TeacherInit, 0);
        let pb = store.builder(r, dtype, device);
        let enc = PixelEncoder::new(&pb.sub("vfm"), cfg.backbone, image_size)?;
        let id = format!(
            "frozen-vit-{}x{}-p{}-seed{seed}",
            cfg.backbone.hidden_dim, cfg.backbone.layers, cfg.backbone.patch
        );
        Ok(Self {
            enc,
            store,
            rectify: cfg.rectify,
            id,
        })
    }

    pub fn dim(&self) -> usize {
        self.enc.config().hidden_dim
    }

    pub fn grid(&self) -> (usize, usize) {
        self.enc.grid()
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// `f_vfm(x)`: detached features, bitwise-deterministic per input.
    pub fn extract(&self, pixels: &Tensor) -> Result<TeacherFeatures> {
        let grid = self.enc.forward(pixels)?;
        let mut values = grid.tokens;
        if self.rectify {
            values = values.abs()?;
        }
        Ok(TeacherFeatures {
            values: values.detach(),
            grid: grid.grid,
            backbone_id: self.id.clone(),
        })
    }

    /// GAP embedding `[B, D_t]` used as the Fréchet-distance feature space.
    pub fn embed(&self, pixels: &Tensor) -> Result<Tensor> {
        let f = self.extract(pixels)?;
        Ok(f.values.mean(1)?)
    }
}

/// Source of teacher features: computed by a frozen backbone or looked up
/// from a precomputed-feature file.
pub enum TeacherSource {
    Frozen(FrozenTeacher),
    File(TeacherFeatureStore),
}

impl TeacherSource {
    pub fn features_for(&self, batch: &ImageBatch) -> Result<TeacherFeatures> {
        match self {
            TeacherSource::Frozen(t) => t.extract(&batch.pixels),
            TeacherSource::File(store) => store.lookup(batch),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            TeacherSource::Frozen(t) => t.dim(),
            TeacherSource::File(s) => s.header.dim,
        }
    }

    pub fn backbone_id(&self) -> &str {
        match self {
            TeacherSource::Frozen(t) => t.id(),
            TeacherSource::File(s) => &s.header.backbone_id,
        }
    }
}

const FEATURE_FILE_MAGIC: &[u8; 8] = b"GAETFEA1";

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TeacherFeatureHeader {
    pub version: u32,
    pub backbone_id: String,
    pub dim: usize,
    pub grid: (usize, usize),
    pub count: usize,
    pub ids: Vec<String>,
}

/// Precomputed teacher features keyed by sample id: JSON header followed by
/// contiguous little-endian f32 records of `h*w*dim` values each.
pub struct TeacherFeatureStore {
    pub header: TeacherFeatureHeader,
    values: Vec<f32>,
    index: HashMap<String, usize>,
    device: Device,
}

impl TeacherFeatureStore {
    pub fn write(
        path: &Path,
        header: &TeacherFeatureHeader,
        values: &[f32],
    ) -> Result<()> {
        let expect = header.count * header.grid.0 * header.grid.1 * header.dim;
        if values.len() != expect {
            return Err(GaeError::shape(format!(
                "feature payload has {} values, header implies {expect}",
                values.len()
            )));
        }
        let head = serde_json::to_vec(header)
            .map_err(|e| GaeError::Other(format!("feature header: {e}")))?;
        let mut f = std::fs::File::create(path).map_err(|e| GaeError::io(path, e))?;
        f.write_all(FEATURE_FILE_MAGIC)
            .and_then(|_| f.write_all(&(head.len() as u64).to_le_bytes()))
            .and_then(|_| f.write_all(&head))
            .map_err(|e| GaeError::io(path, e))?;
        let mut bytes = Vec::with_capacity(values.len() * 4);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&bytes).map_err(|e| GaeError::io(path, e))?;
        Ok(())
    }

    pub fn read(path: &Path, device: &Device) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| GaeError::io(path, e))?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic).map_err(|e| GaeError::io(path, e))?;
        if &magic != FEATURE_FILE_MAGIC {
            return Err(GaeError::Other(format!(
                "{} is not a teacher feature file",
                path.display()
            )));
        }
        let mut len_bytes = [0u8; 8];
        f.read_exact(&mut len_bytes).map_err(|e| GaeError::io(path, e))?;
        let mut head = vec![0u8; u64::from_le_bytes(len_bytes) as usize];
        f.read_exact(&mut head).map_err(|e| GaeError::io(path, e))?;
        let header: TeacherFeatureHeader = serde_json::from_slice(&head)
            .map_err(|e| GaeError::Other(format!("feature header: {e}")))?;
        let mut rest = Vec::new();
        f.read_to_end(&mut rest).map_err(|e| GaeError::io(path, e))?;
        let expect = header.count * header.grid.0 * header.grid.1 * header.dim * 4;
        if rest.len() != expect {
            return Err(GaeError::Other(format!(
                "feature payload is {} bytes, expected {expect}",
                rest.len()
            )));
        }
        let values: Vec<f32> = rest
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let index = header
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Ok(Self {
            header,
            values,
            index,
            device: device.clone(),
        })
    }

    pub fn lookup(&self, batch: &ImageBatch) -> Result<TeacherFeatures> {
        let n = self.header.grid.0 * self.header.grid.1;
        let d = self.header.dim;
        let mut data = Vec::with_capacity(batch.ids.len() * n * d);
        for id in &batch.ids {
            let &i = self.index.get(id).ok_or_else(|| {
                GaeError::Other(format!("sample id {id} missing from feature file"))
            })?;
            data.extend_from_slice(&self.values[i * n * d..(i + 1) * n * d]);
        }
        Ok(TeacherFeatures {
            values: Tensor::from_vec(data, (batch.ids.len(), n, d), &self.device)?,
            grid: self.header.grid,
            backbone_id: self.header.backbone_id.clone(),
        })
    }
}

/// Rank-d linear compressor fitted by eigendecomposition of the centered
/// scatter matrix; `matrix` columns are orthonormal.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SvdProjection {
    /// `D_t x d`, column-orthonormal, row-major.
    pub matrix: Vec<f64>,
    pub mean: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub fitted_on: usize,
}

impl SvdProjection {
    fn mat(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.in_dim, self.out_dim, &self.matrix)
    }

    /// `(X - mean) @ M`, applied over the trailing dimension.
    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let dt = *dims.last().unwrap();
        if dt != self.in_dim {
            return Err(GaeError::shape(format!(
                "projection expects dim {}, got {dt}",
                self.in_dim
            )));
        }
        let dev = x.device().clone();
        let dtype = x.dtype();
        let mean = Tensor::from_vec(self.mean.clone(), (self.in_dim,), &dev)?.to_dtype(dtype)?;
        let m = Tensor::from_vec(self.matrix.clone(), (self.in_dim, self.out_dim), &dev)?
            .to_dtype(dtype)?;
        let flat = x.reshape(((), dt))?;
        let centered = flat.broadcast_sub(&mean)?;
        let proj = centered.matmul(&m)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim;
        Ok(proj.reshape(out_dims)?)
    }

    /// `Z @ M^T + mean`, the least-squares lift back to feature space.
    pub fn lift(&self, z: &Tensor) -> Result<Tensor> {
        let dims = z.dims().to_vec();
        let d = *dims.last().unwrap();
        if d != self.out_dim {
            return Err(GaeError::shape(format!(
                "lift expects dim {}, got {d}",
                self.out_dim
            )));
        }
        let dev = z.device().clone();
        let dtype = z.dtype();
        let mean = Tensor::from_vec(self.mean.clone(), (self.in_dim,), &dev)?.to_dtype(dtype)?;
        let m = Tensor::from_vec(self.matrix.clone(), (self.in_dim, self.out_dim), &dev)?
            .to_dtype(dtype)?;
        let flat = z.reshape(((), d))?;
        let lifted = flat.matmul(&m.t()?)?.broadcast_add(&mean)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.in_dim;
        Ok(lifted.reshape(out_dims)?)
    }

    /// Mean squared reconstruction residual of project-then-lift on `x`.
    pub fn residual(&self, x: &Tensor) -> Result<f64> {
        let lifted = self.lift(&self.project(x)?)?;
        let err = (x - lifted)?.sqr()?.mean_all()?;
        Ok(err.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }

    /// Column orthonormality defect `max |M^T M - I|`.
    pub fn orthonormality_defect(&self) -> f64 {
        let m = self.mat();
        let gram = m.transpose() * &m;
        let mut worst = 0.0f64;
        for i in 0..self.out_dim {
            for j in 0..self.out_dim {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram[(i, j)] - target).abs());
            }
        }
        worst
    }
}

/// Fit the top-d projection on a `[K, D_t]` sample matrix by decomposing the
/// mean-centered scatter matrix.
pub fn fit_svd_projection(features: &Tensor, d: usize) -> Result<SvdProjection> {
    let (k, dt) = features.dims2()?;
    if k < d {
        return Err(GaeError::config(format!(
            "need at least {d} samples to fit a rank-{d} projection, got {k}"
        )));
    }
    if d > dt {
        return Err(GaeError::config(format!(
            "rank {d} exceeds feature dim {dt}"
        )));
    }
    let rows = features.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let x = DMatrix::from_row_slice(k, dt, &rows);
    let mean = x.row_mean();
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let scatter = centered.transpose() * &centered;
    let eig = scatter.symmetric_eigen();
    // Eigenpairs sorted by descending eigenvalue.
    let mut order: Vec<usize> = (0..dt).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut matrix = Vec::with_capacity(dt * d);
    for r in 0..dt {
        for &c in order.iter().take(d) {
            matrix.push(eig.eigenvectors[(r, c)]);
        }
    }
    Ok(SvdProjection {
        matrix,
        mean: mean.iter().copied().collect(),
        in_dim: dt,
        out_dim: d,
        fitted_on: k,
    })
}

/// A random column-orthonormal `D_t x d` baseline (QR of a Gaussian draw),
/// sharing the fitted mean so residual comparisons are like-for-like.
pub fn random_orthonormal_projection(
    rng: &mut ChaCha8Rng,
    mean: &[f64],
    d: usize,
) -> Result<SvdProjection> {
    use rand_distr::{Distribution, StandardNormal};
    let dt = mean.len();
    let data: Vec<f64> = (0..dt * d)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    let g = DMatrix::from_row_slice(dt, d, &data);
    let qr = g.qr();
    let q = qr.q();
    let mut matrix = Vec::with_capacity(dt * d);
    for r in 0..dt {
        for c in 0..d {
            matrix.push(q[(r, c)]);
        }
    }
    Ok(SvdProjection {
        matrix,
        mean: mean.to_vec(),
        in_dim: dt,
        out_dim: d,
        fitted_on: 0,
    })
}

/// Partition `[B, H, W, C]` into `[B*(H/w)*(W/w), w*w, C]` windows.
pub fn window_partition(x: &Tensor, w: usize) -> Result<Tensor> {
    let (b, h, wd, c) = x.dims4()?;
    if h % w != 0 || wd % w != 0 {
        return Err(GaeError::shape(format!(
            "grid {h}x{wd} not divisible by window {w}"
        )));
    }
    Ok(x
        .reshape((b, h / w, w, wd / w, w, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b * (h / w) * (wd / w), w * w, c))?)
}

/// Inverse of [`window_partition`] for the given output geometry.
pub fn window_reverse(windows: &Tensor, w: usize, b: usize, h: usize, wd: usize) -> Result<Tensor> {
    let (nw, ww, c) = windows.dims3()?;
    if ww != w * w || nw != b * (h / w) * (wd / w) {
        return Err(GaeError::shape(format!(
            "window tensor {nw}x{ww} does not match {b}x{h}x{wd} with window {w}"
        )));
    }
    Ok(windows
        .reshape((b, h / w, wd / w, w, w, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, h, wd, c))?)
}

/// Patch convolution with window reshaping: partition into `w x w` windows,
/// flatten each to `w²·C`, multiply by `W_proj ∈ (w²·C) x (w²·d)`, unflatten
/// to `w² x d`, and reverse the partition.
pub fn patch_conv(x: &Tensor, w: usize, w_proj: &Tensor) -> Result<Tensor> {
    let (b, h, wd, c) = x.dims4()?;
    let (in_dim, out_dim) = w_proj.dims2()?;
    if in_dim != w * w * c {
        return Err(GaeError::shape(format!(
            "W_proj input dim {in_dim} != w^2*C = {}",
            w * w * c
        )));
    }
    if out_dim % (w * w) != 0 {
        return Err(GaeError::shape(format!(
            "W_proj output dim {out_dim} not divisible by w^2 = {}",
            w * w
        )));
    }
    let d = out_dim / (w * w);
    let windows = window_partition(x, w)?;
    let nw = windows.dims3()?.0;
    let flat = windows.reshape((nw, w * w * c))?;
    let proj = flat.matmul(w_proj)?;
    let back = proj.reshape((nw, w * w, d))?;
    window_reverse(&back, w, b, h, wd)
}

/// Downsampler architecture selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownsamplerVariant {
    SingleAttn,
    AttnLinear,
    AttnPatchconv,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownsamplerSpec {
    pub variant: DownsamplerVariant,
    /// Window size, used by the patch-conv variant only.
    pub window: usize,
    pub out_dim: usize,
}

impl DownsamplerSpec {
    pub fn new(variant: DownsamplerVariant, out_dim: usize) -> Self {
        Self {
            variant,
            window: 2,
            out_dim,
        }
    }
}

enum DownsamplerHead {
    Linear(Linear),
    PatchConv { w_proj: Tensor, window: usize },
}

enum DownsamplerBody {
    /// Pre-norm self-attention with residual, no feedforward.
    AttnOnly { norm: RmsNorm, attn: SelfAttention },
    /// Full transformer block.
    Block(Block),
}

/// `E_sp`: compresses frozen teacher features `[B, N, D_t]` to `[B, N, d]`.
pub struct Downsampler {
    body: DownsamplerBody,
    head: DownsamplerHead,
    spec: DownsamplerSpec,
    in_dim: usize,
}

impl Downsampler {
    pub fn new(
        pb: &ParamBuilder,
        spec: DownsamplerSpec,
        in_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        let d = spec.out_dim;
        let body = match spec.variant {
            DownsamplerVariant::SingleAttn => DownsamplerBody::AttnOnly {
                norm: RmsNorm::new(pb, "norm", in_dim)?,
                attn: SelfAttention::new(&pb.sub("attn"), in_dim, heads, false)?,
            },
            _ => DownsamplerBody::Block(Block::new(&pb.sub("block"), in_dim, heads, 4.0, false)?),
        };
        let head = match spec.variant {
            DownsamplerVariant::AttnPatchconv => {
                let w = spec.window;
                if w == 0 {
                    return Err(GaeError::config("patch-conv window must be positive"));
                }
                let std = (1.0 / (w * w * in_dim) as f64).sqrt();
                DownsamplerHead::PatchConv {
                    w_proj: pb.take(
                        "w_proj",
                        &[w * w * in_dim, w * w * d],
                        Init::Normal(std),
                    )?,
                    window: w,
                }
            }
            _ => DownsamplerHead::Linear(pb.linear("proj", in_dim, d)?),
        };
        Ok(Self {
            body,
            head,
            spec,
            in_dim,
        })
    }

    pub fn spec(&self) -> &DownsamplerSpec {
        &self.spec
    }

    /// `[B, N, D_t]` over grid `(h, w)` to `[B, N, d]`.
    pub fn forward(&self, features: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
        let (b, n, dt) = features.dims3()?;
        if dt != self.in_dim {
            return Err(GaeError::shape(format!(
                "downsampler expects dim {}, got {dt}",
                self.in_dim
            )));
        }
        if n != grid.0 * grid.1 {
            return Err(GaeError::shape(format!(
                "token count {n} does not match grid {:?}",
                grid
            )));
        }
        let x = match &self.body {
            DownsamplerBody::AttnOnly { norm, attn } => {
                (features + attn.forward(&norm.forward(features)?)?)?
            }
            DownsamplerBody::Block(blk) => blk.forward(features)?,
        };
        match &self.head {
            DownsamplerHead::Linear(l) => Ok(l.forward(&x)?),
            DownsamplerHead::PatchConv { w_proj, window } => {
                if grid.0 % window != 0 || grid.1 % window != 0 {
                    return Err(GaeError::shape(format!(
                        "grid {:?} not divisible by window {window}",
                        grid
                    )));
                }
                let spatial = x.reshape((b, grid.0, grid.1, dt))?;
                let out = patch_conv(&spatial, *window, w_proj)?;
                Ok(out.reshape((b, n, self.spec.out_dim))?)
            }
        }
    }
}

/// Configuration for the auxiliary semantic decoder `D_sp`.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemanticDecoderConfig {
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl SemanticDecoderConfig {
    pub fn paper() -> Self {
        Self {
            hidden_dim: 1024,
            layers: 4,
            heads: 16,
            mlp_ratio: 4.0,
        }
    }

    pub fn desk() -> Self {
        Self {
            hidden_dim: 64,
            layers: 2,
            heads: 4,
            mlp_ratio: 2.0,
        }
    }
}

/// `D_sp`: lifts compressed semantic tokens back to teacher width. Trained
/// jointly with `E_sp`, then discarded.
pub struct SemanticDecoder {
    in_proj: Linear,
    pos: Tensor,
    blocks: Vec<Block>,
    final_norm: RmsNorm,
    out: Linear,
}

impl SemanticDecoder {
    pub fn new(
        pb: &ParamBuilder,
        cfg: &SemanticDecoderConfig,
        in_dim: usize,
        out_dim: usize,
        tokens: usize,
    ) -> Result<Self> {
        let blocks = (0..cfg.layers)
            .map(|i| {
                Block::new(
                    &pb.sub(format!("block{i}")),
                    cfg.hidden_dim,
                    cfg.heads,
                    cfg.mlp_ratio,
                    false,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            in_proj: pb.linear("in_proj", in_dim, cfg.hidden_dim)?,
            pos: pb.take("pos", &[1, tokens, cfg.hidden_dim], Init::Normal(0.02))?,
            blocks,
            final_norm: RmsNorm::new(pb, "final_norm", cfg.hidden_dim)?,
            out: pb.linear("out", cfg.hidden_dim, out_dim)?,
        })
    }

    pub fn forward(&self, z_sp: &Tensor) -> Result<Tensor> {
        let mut x = self.in_proj.forward(z_sp)?.broadcast_add(&self.pos)?;
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        Ok(self.out.forward(&self.final_norm.forward(&x)?)?)
    }
}

/// `L_spt`: mean over tokens of the negative cosine similarity between the
/// reconstructed and original teacher features. Range `[-1, 1]`.
pub fn distill_loss(f_hat: &Tensor, f: &Tensor) -> Result<Tensor> {
    if f_hat.dims() != f.dims() {
        return Err(GaeError::shape(format!(
            "distill shapes differ: {:?} vs {:?}",
            f_hat.dims(),
            f.dims()
        )));
    }
    let eps = 1e-8;
    let dot = (f_hat * f)?.sum(D::Minus1)?;
    let na = f_hat.sqr()?.sum(D::Minus1)?.sqrt()?;
    let nb = f.sqr()?.sum(D::Minus1)?.sqrt()?;
    let cos = (dot / ((na * nb)? + eps)?)?;
    Ok(cos.mean_all()?.neg()?)
}

/// Options for the teacher pre-training phase.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub heads: usize,
    pub decoder: SemanticDecoderConfig,
    /// Epochs to wait before the divergence check (loss must be < 0 after).
    pub warmup_epochs: usize,
}

impl TeacherTrainConfig {
    pub fn desk() -> Self {
        Self {
            epochs: 8,
            batch_size: 64,
            lr: 1e-3,
            heads: 4,
            decoder: SemanticDecoderConfig::desk(),
            warmup_epochs: 2,
        }
    }
}

pub struct TeacherTrainOutput {
    /// `E_sp` parameters only; `D_sp` is dropped.
    pub downsampler: Downsampler,
    pub store: ParamStore,
    /// Per-epoch mean distillation loss.
    pub curve: Vec<(usize, f64)>,
    pub final_loss: f64,
}

/// Epoch-driven joint trainer for `E_sp` and `D_sp` on frozen backbone
/// features with the cosine objective. Callers can persist both stores and
/// the optimizer between epochs; `D_sp` is dropped at the end.
pub struct TeacherTrainer<'a> {
    dataset: &'a Dataset,
    teacher: &'a FrozenTeacher,
    downsampler: Downsampler,
    decoder: SemanticDecoder,
    esp_store: ParamStore,
    dsp_store: ParamStore,
    opt: AdamW,
    cfg: TeacherTrainConfig,
    seed: u64,
    dtype: DType,
    device: Device,
    curve: Vec<(usize, f64)>,
}

impl<'a> TeacherTrainer<'a> {
    pub fn new(
        dataset: &'a Dataset,
        teacher: &'a FrozenTeacher,
        spec: DownsamplerSpec,
        cfg: &TeacherTrainConfig,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let esp_store = ParamStore::new();
        let dsp_store = ParamStore::new();
        let esp_pb =
            esp_store.builder(rng::substream_rng(seed, Stream::TeacherInit, 1), dtype, device);
        let dsp_pb =
            dsp_store.builder(rng::substream_rng(seed, Stream::TeacherInit, 2), dtype, device);
        let downsampler = Downsampler::new(&esp_pb.sub("esp"), spec, teacher.dim(), cfg.heads)?;
        let grid = teacher.grid();
        let decoder = SemanticDecoder::new(
            &dsp_pb.sub("dsp"),
            &cfg.decoder,
            spec.out_dim,
            teacher.dim(),
            grid.0 * grid.1,
        )?;
        let mut joint: Vec<(String, candle_core::Var)> = Vec::new();
        for (n, v) in esp_store.named_vars() {
            joint.push((format!("esp.{n}"), v));
        }
        for (n, v) in dsp_store.named_vars() {
            joint.push((format!("dsp.{n}"), v));
        }
        let opt = AdamW::new(joint, (0.9, 0.95), 0.0)?;
        Ok(Self {
            dataset,
            teacher,
            downsampler,
            decoder,
            esp_store,
            dsp_store,
            opt,
            cfg: cfg.clone(),
            seed,
            dtype,
            device: device.clone(),
            curve: Vec::new(),
        })
    }

    pub fn esp_store(&self) -> &ParamStore {
        &self.esp_store
    }

    pub fn esp_store_mut(&mut self) -> &mut ParamStore {
        &mut self.esp_store
    }

    pub fn dsp_store(&self) -> &ParamStore {
        &self.dsp_store
    }

    pub fn dsp_store_mut(&mut self) -> &mut ParamStore {
        &mut self.dsp_store
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt
    }

    pub fn downsampler(&self) -> &Downsampler {
        &self.downsampler
    }

    /// Restore optimizer moments when resuming mid-run.
    pub fn load_optimizer_state(
        &mut self,
        state: &std::collections::HashMap<String, Tensor>,
        step: usize,
    ) -> Result<()> {
        self.opt.load_state(state, step)
    }

    /// One pass over the dataset. Returns the epoch's mean distillation
    /// loss; aborts on divergence past the warmup epochs.
    pub fn run_epoch(&mut self, epoch: usize) -> Result<f64> {
        let batches = self.dataset.epoch_batches(
            self.seed,
            epoch as u64,
            self.cfg.batch_size,
            true,
            false,
            &self.device,
        )?;
        let mut sum = 0.0;
        let mut count = 0usize;
        for batch in &batches {
            let pixels = batch.pixels.to_dtype(self.dtype)?;
            let f = self.teacher.extract(&pixels)?;
            let z_sp = self.downsampler.forward(&f.values, f.grid)?;
            let f_hat = self.decoder.forward(&z_sp)?;
            let loss = distill_loss(&f_hat, &f.values)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(GaeError::TrainAbort(format!(
                    "teacher loss non-finite at epoch {epoch}"
                )));
            }
            let grads = loss.backward()?;
            self.opt.step(&grads, self.cfg.lr)?;
            sum += value;
            count += 1;
        }
        let mean = sum / count.max(1) as f64;
        self.curve.push((epoch, mean));
        log::info!("teacher epoch {epoch}: distill loss {mean:.4}");
        if epoch >= self.cfg.warmup_epochs && mean > 0.0 {
            return Err(GaeError::TrainAbort(format!(
                "teacher distillation diverged: loss {mean:.4} > 0 after epoch {epoch}"
            )));
        }
        Ok(mean)
    }

    /// Drop `D_sp` and hand back `E_sp` with its store.
    pub fn into_output(self) -> TeacherTrainOutput {
        let final_loss = self.curve.last().map(|&(_, l)| l).unwrap_or(f64::NAN);
        TeacherTrainOutput {
            downsampler: self.downsampler,
            store: self.esp_store,
            curve: self.curve,
            final_loss,
        }
    }
}

/// Train `E_sp` and `D_sp` jointly for the configured number of epochs,
/// then discard `D_sp`.
pub fn train_teacher(
    dataset: &Dataset,
    teacher: &FrozenTeacher,
    spec: DownsamplerSpec,
    cfg: &TeacherTrainConfig,
    seed: u64,
    dtype: DType,
    device: &Device,
) -> Result<TeacherTrainOutput> {
    let mut trainer = TeacherTrainer::new(dataset, teacher, spec, cfg, seed, dtype, device)?;
    for epoch in 0..cfg.epochs {
        trainer.run_epoch(epoch)?;
    }
    Ok(trainer.into_output())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{randn, stream_rng};

    fn dev() -> Device {
        Device::Cpu
    }

    #[test]
    fn frozen_teacher_is_deterministic_and_gradient_free() {
        let d = dev();
        let cfg = TeacherConfig {
            backbone: BackboneConfig {
                hidden_dim: 16,
                layers: 2,
                heads: 2,
                mlp_ratio: 2.0,
                patch: 4,
                qk_norm: false,
            },
            rectify: true,
        };
        let teacher = FrozenTeacher::new(&cfg, 8, 7, DType::F32, &d).unwrap();
        let mut r = stream_rng(1, Stream::DataOrder);
        let img = randn(&mut r, &[2, 3, 8, 8], DType::F32, &d).unwrap();
        let a = teacher.extract(&img).unwrap();
        let b = teacher.extract(&img).unwrap();
        let diff = (&a.values - &b.values)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(diff, 0.0);

        // Backward through a loss on the features must not reach the
        // backbone parameters.
        let loss = a.values.sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        for (_, var) in teacher.store().named_vars() {
            assert!(grads.get(var.as_tensor()).is_none());
        }
    }

    #[test]
    fn svd_recovers_exact_low_rank_data() {
        let d = dev();
        let mut r = stream_rng(5, Stream::TeacherInit);
        // Rank-3 data in 10 dims: Z (40x3) times a random basis (3x10).
        let z = randn(&mut r, &[40, 3], DType::F64, &d).unwrap();
        let basis = randn(&mut r, &[3, 10], DType::F64, &d).unwrap();
        let x = z.matmul(&basis).unwrap();
        let proj = fit_svd_projection(&x, 3).unwrap();
        assert!(proj.orthonormality_defect() < 1e-5);
        assert!(proj.residual(&x).unwrap() < 1e-6);
    }

    #[test]
    fn svd_full_rank_has_zero_residual() {
        let d = dev();
        let mut r = stream_rng(6, Stream::TeacherInit);
        let x = randn(&mut r, &[30, 6], DType::F64, &d).unwrap();
        let proj = fit_svd_projection(&x, 6).unwrap();
        assert!(proj.residual(&x).unwrap() < 1e-10);
    }

    #[test]
    fn svd_needs_enough_samples() {
        let x = Tensor::zeros((3, 8), DType::F64, &dev()).unwrap();
        assert!(fit_svd_projection(&x, 4).is_err());
    }

    #[test]
    fn svd_beats_random_projections() {
        let d = dev();
        let mut r = stream_rng(7, Stream::TeacherInit);
        let x = randn(&mut r, &[100, 12], DType::F64, &d).unwrap();
        // Stretch a few directions so the spectrum is anisotropic.
        let scale = Tensor::from_vec(
            vec![5.0f64, 4.0, 3.0, 1.0, 1.0, 0.5, 0.5, 0.3, 0.3, 0.2, 0.2, 0.1],
            (12,),
            &d,
        )
        .unwrap();
        let x = x.broadcast_mul(&scale).unwrap();
        let fitted = fit_svd_projection(&x, 4).unwrap();
        let fitted_res = fitted.residual(&x).unwrap();
        let mut rr = stream_rng(8, Stream::TeacherInit);
        for _ in 0..20 {
            let rand_proj = random_orthonormal_projection(&mut rr, &fitted.mean, 4).unwrap();
            assert!(rand_proj.orthonormality_defect() < 1e-8);
            let res = rand_proj.residual(&x).unwrap();
            assert!(
                fitted_res <= res + 1e-12,
                "random projection beat the fit: {res} < {fitted_res}"
            );
        }
    }

    #[test]
    fn window_roundtrip_is_identity() {
        let d = dev();
        let mut r = stream_rng(9, Stream::TeacherInit);
        let x = randn(&mut r, &[2, 4, 6, 5], DType::F32, &d).unwrap();
        let parts = window_partition(&x, 2).unwrap();
        assert_eq!(parts.dims(), &[2 * 2 * 3, 4, 5]);
        let back = window_reverse(&parts, 2, 2, 4, 6).unwrap();
        let diff = (&x - back).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn patch_conv_identity_projection() {
        let d = dev();
        let mut r = stream_rng(10, Stream::TeacherInit);
        let x = randn(&mut r, &[1, 4, 4, 3], DType::F32, &d).unwrap();
        let w = 2;
        let dim = w * w * 3;
        let eye = Tensor::eye(dim, DType::F32, &d).unwrap();
        let y = patch_conv(&x, w, &eye).unwrap();
        let diff = (&x - y).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn patch_conv_matches_naive_loop() {
        let d = dev();
        let mut r = stream_rng(11, Stream::TeacherInit);
        let (b, h, wd, c, w, out_d) = (2, 4, 6, 3, 2, 5);
        let x = randn(&mut r, &[b, h, wd, c], DType::F32, &d).unwrap();
        let w_proj = randn(&mut r, &[w * w * c, w * w * out_d], DType::F32, &d).unwrap();
        let fast = patch_conv(&x, w, &w_proj).unwrap();

        let xv = x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let pv = w_proj.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let mut naive = vec![0f32; b * h * wd * out_d];
        for bi in 0..b {
            for wy in 0..h / w {
                for wx in 0..wd / w {
                    // Flatten this window in (dy, dx, channel) order.
                    let mut flat = vec![0f32; w * w * c];
                    for dy in 0..w {
                        for dx in 0..w {
                            for ch in 0..c {
                                let y = wy * w + dy;
                                let xx = wx * w + dx;
                                flat[(dy * w + dx) * c + ch] =
                                    xv[((bi * h + y) * wd + xx) * c + ch];
                            }
                        }
                    }
                    let mut out = vec![0f32; w * w * out_d];
                    for (i, f) in flat.iter().enumerate() {
                        for (j, o) in out.iter_mut().enumerate() {
                            *o += f * pv[i * (w * w * out_d) + j];
                        }
                    }
                    for dy in 0..w {
                        for dx in 0..w {
                            for ch in 0..out_d {
                                let y = wy * w + dy;
                                let xx = wx * w + dx;
                                naive[((bi * h + y) * wd + xx) * out_d + ch] =
                                    out[(dy * w + dx) * out_d + ch];
                            }
                        }
                    }
                }
            }
        }
        let fv = fast.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let max_diff = fv
            .iter()
            .zip(naive.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff < 1e-5, "max abs diff {max_diff}");
    }

    #[test]
    fn patch_conv_is_linear() {
        let d = dev();
        let mut r = stream_rng(12, Stream::TeacherInit);
        let x1 = randn(&mut r, &[1, 4, 4, 2], DType::F32, &d).unwrap();
        let x2 = randn(&mut r, &[1, 4, 4, 2], DType::F32, &d).unwrap();
        let w_proj = randn(&mut r, &[8, 12], DType::F32, &d).unwrap();
        let lhs = patch_conv(
            &((&x1 * 2.0).unwrap() + (&x2 * -0.5).unwrap()).unwrap(),
            2,
            &w_proj,
        )
        .unwrap();
        let rhs = ((patch_conv(&x1, 2, &w_proj).unwrap() * 2.0).unwrap()
            + (patch_conv(&x2, 2, &w_proj).unwrap() * -0.5).unwrap())
        .unwrap();
        let diff = (lhs - rhs).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-5);
    }

    #[test]
    fn downsampler_variants_share_output_shape() {
        let d = dev();
        let mut r = stream_rng(13, Stream::TeacherInit);
        let f = randn(&mut r, &[2, 16, 24], DType::F32, &d).unwrap();
        for variant in [
            DownsamplerVariant::SingleAttn,
            DownsamplerVariant::AttnLinear,
            DownsamplerVariant::AttnPatchconv,
        ] {
            let store = ParamStore::new();
            let pb = store.builder(stream_rng(14, Stream::TeacherInit), DType::F32, &d);
            let ds = Downsampler::new(&pb.sub("esp"), DownsamplerSpec::new(variant, 6), 24, 4)
                .unwrap();
            let out = ds.forward(&f, (4, 4)).unwrap();
            assert_eq!(out.dims(), &[2, 16, 6], "variant {variant:?}");
        }
    }

    #[test]
    fn degenerate_attn_linear_equals_svd_path() {
        let d = dev();
        let mut r = stream_rng(15, Stream::TeacherInit);
        let f = randn(&mut r, &[3, 8, 10], DType::F64, &d).unwrap();
        let flat = f.reshape((24, 10)).unwrap();
        let svd = fit_svd_projection(&flat, 4).unwrap();

        let store = ParamStore::new();
        let pb = store.builder(stream_rng(16, Stream::TeacherInit), DType::F64, &d);
        let ds = Downsampler::new(
            &pb.sub("esp"),
            DownsamplerSpec::new(DownsamplerVariant::AttnLinear, 4),
            10,
            2,
        )
        .unwrap();
        // Zero the residual branches so the block is the identity, then
        // load the SVD map into the head: W = M^T, b = -mean @ M.
        let m = DMatrix::from_row_slice(10, 4, &svd.matrix);
        let mean = nalgebra::DVector::from_column_slice(&svd.mean);
        let bias_vec = -(m.transpose() * mean);
        for (name, var) in store.named_vars() {
            if name.ends_with("block.attn.out.weight") || name.ends_with("block.mlp.out.weight") {
                var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
            }
            if name.ends_with("block.attn.out.bias") || name.ends_with("block.mlp.out.bias") {
                var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
            }
            if name.ends_with("esp.proj.weight") {
                let mut wt = Vec::with_capacity(40);
                for row in 0..4 {
                    for col in 0..10 {
                        wt.push(m[(col, row)]);
                    }
                }
                var.set(&Tensor::from_vec(wt, (4, 10), &d).unwrap()).unwrap();
            }
            if name.ends_with("esp.proj.bias") {
                let bv: Vec<f64> = bias_vec.iter().copied().collect();
                var.set(&Tensor::from_vec(bv, (4,), &d).unwrap()).unwrap();
            }
        }
        let got = ds.forward(&f, (2, 4)).unwrap();
        let want = svd.project(&f).unwrap();
        let diff = (got - want).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-10, "max abs diff {diff}");
    }

    #[test]
    fn distill_loss_endpoints() {
        let d = dev();
        let mut r = stream_rng(17, Stream::TeacherInit);
        let f = randn(&mut r, &[2, 4, 8], DType::F64, &d).unwrap();
        let same = distill_loss(&f, &f).unwrap().to_scalar::<f64>().unwrap();
        assert!((same + 1.0).abs() < 1e-6, "cos(x,x) loss {same}");
        let anti = distill_loss(&f.neg().unwrap(), &f).unwrap().to_scalar::<f64>().unwrap();
        assert!((anti - 1.0).abs() < 1e-6, "antipodal loss {anti}");
        // Orthogonal per token: pair (a, 0) vs (0, b) in a 2-channel split.
        let a = randn(&mut r, &[1, 3, 4], DType::F64, &d).unwrap();
        let z = Tensor::zeros((1, 3, 4), DType::F64, &d).unwrap();
        let left = Tensor::cat(&[&a, &z], 2).unwrap();
        let right = Tensor::cat(&[&z, &a], 2).unwrap();
        let ortho = distill_loss(&left, &right).unwrap().to_scalar::<f64>().unwrap();
        assert!(ortho.abs() < 1e-6, "orthogonal loss {ortho}");
    }

    #[test]
    fn distill_loss_zero_norm_is_finite() {
        let d = dev();
        let z = Tensor::zeros((1, 2, 4), DType::F64, &d).unwrap();
        let f = Tensor::ones((1, 2, 4), DType::F64, &d).unwrap();
        let v = distill_loss(&z, &f).unwrap().to_scalar::<f64>().unwrap();
        assert!(v.is_finite());
    }

    #[test]
    fn semantic_decoder_shape() {
        let d = dev();
        let store = ParamStore::new();
        let pb = store.builder(stream_rng(18, Stream::TeacherInit), DType::F32, &d);
        let cfg = SemanticDecoderConfig {
            hidden_dim: 16,
            layers: 2,
            heads: 2,
            mlp_ratio: 2.0,
        };
        let dec = SemanticDecoder::new(&pb.sub("dsp"), &cfg, 4, 24, 9).unwrap();
        let mut r = stream_rng(19, Stream::TeacherInit);
        let z = randn(&mut r, &[2, 9, 4], DType::F32, &d).unwrap();
        let out = dec.forward(&z).unwrap();
        assert_eq!(out.dims(), &[2, 9, 24]);
    }

    #[test]
    fn feature_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.bin");
        let header = TeacherFeatureHeader {
            version: 1,
            backbone_id: "test".into(),
            dim: 3,
            grid: (2, 2),
            count: 2,
            ids: vec!["a/x.png".into(), "b/y.png".into()],
        };
        let values: Vec<f32> = (0..2 * 4 * 3).map(|i| i as f32 * 0.5).collect();
        TeacherFeatureStore::write(&path, &header, &values).unwrap();
        let store = TeacherFeatureStore::read(&path, &dev()).unwrap();
        let batch = ImageBatch {
            pixels: Tensor::zeros((1, 3, 4, 4), DType::F32, &dev()).unwrap(),
            labels: vec![1],
            ids: vec!["b/y.png".into()],
        };
        let f = store.lookup(&batch).unwrap();
        assert_eq!(f.values.dims(), &[1, 4, 3]);
        let got = f.values.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(got, values[12..].to_vec());
    }
}
