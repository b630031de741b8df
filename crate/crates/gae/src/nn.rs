//! Neural-net plumbing shared by every model in the crate: a deterministic
//! parameter store, transformer building blocks, a hand-rolled AdamW with
//! checkpointable state, EMA shadows, and parameter hashing.
//!
//! Parameters are always created through [`ParamBuilder`] with an explicit
//! rng handle, never through thread-local randomness, so that two runs with
//! the same seed build bit-identical models.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::ops::softmax;
use candle_nn::{Linear, Module, VarMap};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{GaeError, Result};
use crate::rng;

/// Numerically safe floor for every RMS normalization in the crate.
pub const RMS_EPS: f64 = 1e-6;

/// Epsilon for the latent hypersphere projection. Much smaller than the
/// block-norm epsilon so unit RMS holds to 1e-5 even for low-energy tokens.
pub const LATENT_RMS_EPS: f64 = 1e-8;

/// Initialization recipe for a single parameter tensor.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Zero-mean Gaussian with the given standard deviation.
    Normal(f64),
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
}

/// Owns the named trainable parameters of one model.
pub struct ParamStore {
    varmap: VarMap,
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            varmap: VarMap::new(),
        }
    }

    /// Root builder for a model; `rng` drives every random init in build order.
    pub fn builder(&self, rng: ChaCha8Rng, dtype: DType, device: &Device) -> ParamBuilder<'_> {
        ParamBuilder {
            store: self,
            rng: Rc::new(RefCell::new(rng)),
            dtype,
            device: device.clone(),
            prefix: String::new(),
        }
    }

    /// Named parameters in sorted-name order. The order is the stable
    /// identity used for optimizer state keys and content hashing.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let data = self.varmap.data().lock().unwrap();
        let mut out: Vec<(String, Var)> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.named_vars().into_iter().map(|(_, v)| v).collect()
    }

    pub fn param_count(&self) -> usize {
        self.named_vars()
            .iter()
            .map(|(_, v)| v.as_tensor().elem_count())
            .sum()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.varmap.save(path)?;
        Ok(())
    }

    /// Load values into already-built parameters (shapes must match).
    pub fn load(&mut self, path: &std::path::Path) -> Result<()> {
        self.varmap.load(path)?;
        Ok(())
    }

    /// SHA-256 over sorted `(name, shape, little-endian values)`.
    pub fn content_hash(&self) -> Result<String> {
        let named: Vec<(String, Tensor)> = self
            .named_vars()
            .into_iter()
            .map(|(n, v)| (n, v.as_tensor().clone()))
            .collect();
        hash_named_tensors(&named)
    }
}

/// SHA-256 over `(name, shape, little-endian values)` in the given order.
pub fn hash_named_tensors(named: &[(String, Tensor)]) -> Result<String> {
    let mut hasher = Sha256::new();
    for (name, t) in named {
        hasher.update(name.as_bytes());
        for d in t.dims() {
            hasher.update(d.to_le_bytes());
        }
        match t.dtype() {
            DType::F64 => {
                for v in t.flatten_all()?.to_vec1::<f64>()? {
                    hasher.update(v.to_le_bytes());
                }
            }
            _ => {
                for v in t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Scoped parameter factory. `sub("enc").take("w", ...)` creates `enc.w`.
pub struct ParamBuilder<'a> {
    store: &'a ParamStore,
    rng: Rc<RefCell<ChaCha8Rng>>,
    dtype: DType,
    device: Device,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn sub(&self, name: impl AsRef<str>) -> ParamBuilder<'a> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamBuilder {
            store: self.store,
            rng: Rc::clone(&self.rng),
            dtype: self.dtype,
            device: self.device.clone(),
            prefix,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Create (or fetch, if already created) a named parameter.
    pub fn take(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        let mut data = self.store.varmap.data().lock().unwrap();
        if let Some(var) = data.get(&full) {
            if var.as_tensor().dims() != shape {
                return Err(GaeError::shape(format!(
                    "parameter {full} exists with shape {:?}, requested {:?}",
                    var.as_tensor().dims(),
                    shape
                )));
            }
            return Ok(var.as_tensor().clone());
        }
        let mut r = self.rng.borrow_mut();
        let t = match init {
            Init::Zeros => Tensor::zeros(shape, self.dtype, &self.device)?,
            Init::Ones => Tensor::ones(shape, self.dtype, &self.device)?,
            Init::Const(c) => (Tensor::ones(shape, self.dtype, &self.device)? * c)?,
            Init::Normal(std) => (rng::randn(&mut r, shape, self.dtype, &self.device)? * std)?,
            Init::Uniform(b) => {
                rng::rand_uniform(&mut r, shape, -b, b, self.dtype, &self.device)?
            }
        };
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        data.insert(full, var);
        Ok(out)
    }

    /// Linear layer with fan-in scaled Gaussian weights and zero bias.
    pub fn linear(&self, name: &str, in_dim: usize, out_dim: usize) -> Result<Linear> {
        let std = (1.0 / in_dim as f64).sqrt();
        let w = self
            .sub(name)
            .take("weight", &[out_dim, in_dim], Init::Normal(std))?;
        let b = self.sub(name).take("bias", &[out_dim], Init::Zeros)?;
        Ok(Linear::new(w, Some(b)))
    }

    /// Linear layer with all-zero weights and bias (adaLN gates, etc.).
    pub fn linear_zeros(&self, name: &str, in_dim: usize, out_dim: usize) -> Result<Linear> {
        let w = self.sub(name).take("weight", &[out_dim, in_dim], Init::Zeros)?;
        let b = self.sub(name).take("bias", &[out_dim], Init::Zeros)?;
        Ok(Linear::new(w, Some(b)))
    }
}

/// Parameter-free RMS normalization over the trailing dimension:
/// `x / sqrt(mean(x^2) + eps)`.
pub fn rms_normalize(x: &Tensor, eps: f64) -> Result<Tensor> {
    let ms = x.sqr()?.mean_keepdim(D::Minus1)?;
    let denom = (ms + eps)?.sqrt()?;
    Ok(x.broadcast_div(&denom)?)
}

/// RMS norm with a learned per-channel gain, used inside transformer blocks.
pub struct RmsNorm {
    gain: Tensor,
    eps: f64,
}

impl RmsNorm {
    pub fn new(pb: &ParamBuilder, name: &str, dim: usize) -> Result<Self> {
        let gain = pb.sub(name).take("gain", &[dim], Init::Ones)?;
        Ok(Self {
            gain,
            eps: RMS_EPS,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(rms_normalize(x, self.eps)?.broadcast_mul(&self.gain)?)
    }
}

/// Gated feedforward (SiLU gate). Inner width is `mlp_ratio * hidden`;
/// gate and value projections are sized accordingly.
pub struct GatedMlp {
    gate: Linear,
    value: Linear,
    out: Linear,
}

impl GatedMlp {
    pub fn new(pb: &ParamBuilder, hidden: usize, mlp_ratio: f64) -> Result<Self> {
        let inner = ((hidden as f64) * mlp_ratio).round() as usize;
        let inner = inner.max(1);
        Ok(Self {
            gate: pb.linear("gate", hidden, inner)?,
            value: pb.linear("value", hidden, inner)?,
            out: pb.linear("out", inner, hidden)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let g = self.gate.forward(x)?.silu()?;
        let v = self.value.forward(x)?;
        Ok(self.out.forward(&(g * v)?)?)
    }
}

/// Multi-head self-attention over `[B, N, dim]` tokens with optional
/// RMS normalization of queries and keys.
pub struct SelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    head_dim: usize,
    qk_gain: Option<(Tensor, Tensor)>,
}

impl SelfAttention {
    pub fn new(pb: &ParamBuilder, dim: usize, heads: usize, qk_norm: bool) -> Result<Self> {
        Self::with_out_dim(pb, dim, heads, qk_norm, dim)
    }

    /// Variant whose output projection maps to `out_dim` instead of `dim`.
    pub fn with_out_dim(
        pb: &ParamBuilder,
        dim: usize,
        heads: usize,
        qk_norm: bool,
        out_dim: usize,
    ) -> Result<Self> {
        if dim % heads != 0 {
            return Err(GaeError::config(format!(
                "attention dim {dim} not divisible by heads {heads}"
            )));
        }
        let head_dim = dim / heads;
        let qk_gain = if qk_norm {
            let qg = pb.take("q_gain", &[head_dim], Init::Ones)?;
            let kg = pb.take("k_gain", &[head_dim], Init::Ones)?;
            Some((qg, kg))
        } else {
            None
        };
        Ok(Self {
            q: pb.linear("q", dim, dim)?,
            k: pb.linear("k", dim, dim)?,
            v: pb.linear("v", dim, dim)?,
            out: pb.linear("out", dim, out_dim)?,
            heads,
            head_dim,
            qk_gain,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, _) = x.dims3()?;
        Ok(x.reshape((b, n, self.heads, self.head_dim))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, _) = x.dims3()?;
        let mut q = self.split_heads(&self.q.forward(x)?)?;
        let mut k = self.split_heads(&self.k.forward(x)?)?;
        let v = self.split_heads(&self.v.forward(x)?)?;
        if let Some((qg, kg)) = &self.qk_gain {
            q = rms_normalize(&q, RMS_EPS)?.broadcast_mul(qg)?;
            k = rms_normalize(&k, RMS_EPS)?.broadcast_mul(kg)?;
        }
        let scale = (self.head_dim as f64).powf(-0.5);
        let att = (q.matmul(&k.transpose(2, 3)?)? * scale)?;
        let att = softmax(&att, D::Minus1)?;
        let y = att.matmul(&v)?;
        let y = y.transpose(1, 2)?.reshape((b, n, self.heads * self.head_dim))?;
        Ok(self.out.forward(&y)?)
    }
}

/// Pre-norm transformer block: RMSNorm -> attention -> residual,
/// RMSNorm -> gated MLP -> residual. Token count and width are preserved.
pub struct Block {
    norm1: RmsNorm,
    attn: SelfAttention,
    norm2: RmsNorm,
    mlp: GatedMlp,
}

impl Block {
    pub fn new(
        pb: &ParamBuilder,
        dim: usize,
        heads: usize,
        mlp_ratio: f64,
        qk_norm: bool,
    ) -> Result<Self> {
        Ok(Self {
            norm1: RmsNorm::new(pb, "norm1", dim)?,
            attn: SelfAttention::new(&pb.sub("attn"), dim, heads, qk_norm)?,
            norm2: RmsNorm::new(pb, "norm2", dim)?,
            mlp: GatedMlp::new(&pb.sub("mlp"), dim, mlp_ratio)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        let x = (&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?;
        Ok(x)
    }
}

/// AdamW with decoupled weight decay and exposed moment state, so a
/// checkpoint can resume the optimizer exactly.
pub struct AdamW {
    entries: Vec<AdamEntry>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: usize,
}

struct AdamEntry {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
}

impl AdamW {
    pub fn new(named_vars: Vec<(String, Var)>, betas: (f64, f64), weight_decay: f64) -> Result<Self> {
        let entries = named_vars
            .into_iter()
            .map(|(name, var)| {
                let t = var.as_tensor();
                Ok(AdamEntry {
                    m: t.zeros_like()?,
                    v: t.zeros_like()?,
                    name,
                    var,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            entries,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            step: 0,
        })
    }

    pub fn step(&mut self, grads: &candle_core::backprop::GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for e in self.entries.iter_mut() {
            let Some(g) = grads.get(e.var.as_tensor()) else {
                continue;
            };
            e.m = ((&e.m * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            e.v = ((&e.v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&e.m / bc1)?;
            let v_hat = (&e.v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            let mut next = (e.var.as_tensor() - (update * lr)?)?;
            if self.weight_decay > 0.0 {
                next = (next - (e.var.as_tensor() * (lr * self.weight_decay))?)?;
            }
            e.var.set(&next)?;
        }
        Ok(())
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Moment tensors keyed for checkpointing (`m.<name>`, `v.<name>`).
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(self.entries.len() * 2);
        for e in &self.entries {
            out.push((format!("m.{}", e.name), e.m.clone()));
            out.push((format!("v.{}", e.name), e.v.clone()));
        }
        out
    }

    pub fn load_state(&mut self, state: &HashMap<String, Tensor>, step: usize) -> Result<()> {
        for e in self.entries.iter_mut() {
            let m = state
                .get(&format!("m.{}", e.name))
                .ok_or_else(|| GaeError::Checkpoint(format!("missing optimizer state m.{}", e.name)))?;
            let v = state
                .get(&format!("v.{}", e.name))
                .ok_or_else(|| GaeError::Checkpoint(format!("missing optimizer state v.{}", e.name)))?;
            e.m = m.clone();
            e.v = v.clone();
        }
        self.step = step;
        Ok(())
    }
}

/// Exponential moving average of a parameter set.
pub struct Ema {
    decay: f64,
    shadow: Vec<(String, Tensor)>,
}

impl Ema {
    pub fn new(named_vars: &[(String, Var)], decay: f64) -> Result<Self> {
        let shadow = named_vars
            .iter()
            .map(|(n, v)| Ok((n.clone(), v.as_tensor().copy()?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { decay, shadow })
    }

    /// `ema <- decay * ema + (1 - decay) * theta`
    pub fn update(&mut self, named_vars: &[(String, Var)]) -> Result<()> {
        for ((_, s), (_, v)) in self.shadow.iter_mut().zip(named_vars.iter()) {
            *s = ((&*s * self.decay)? + (v.as_tensor() * (1.0 - self.decay))?)?;
        }
        Ok(())
    }

    pub fn shadow(&self) -> &[(String, Tensor)] {
        &self.shadow
    }

    /// Write the shadow values into a matching parameter store.
    pub fn apply_to(&self, named_vars: &[(String, Var)]) -> Result<()> {
        for ((sn, s), (vn, v)) in self.shadow.iter().zip(named_vars.iter()) {
            if sn != vn {
                return Err(GaeError::Checkpoint(format!(
                    "ema/param name mismatch: {sn} vs {vn}"
                )));
            }
            v.set(s)?;
        }
        Ok(())
    }

    pub fn load(&mut self, state: &HashMap<String, Tensor>) -> Result<()> {
        for (n, s) in self.shadow.iter_mut() {
            let t = state
                .get(n)
                .ok_or_else(|| GaeError::Checkpoint(format!("missing ema tensor {n}")))?;
            *s = t.clone();
        }
        Ok(())
    }
}

/// Cosine decay from `peak` to `min_lr` after a linear warmup.
pub fn cosine_warmup_lr(step: usize, total: usize, warmup: usize, peak: f64, min_lr: f64) -> f64 {
    if warmup > 0 && step < warmup {
        return peak * (step as f64 + 1.0) / warmup as f64;
    }
    let total = total.max(warmup + 1);
    let p = (step - warmup) as f64 / (total - warmup) as f64;
    let p = p.clamp(0.0, 1.0);
    min_lr + 0.5 * (peak - min_lr) * (1.0 + (std::f64::consts::PI * p).cos())
}

/// Sinusoidal embedding of a scalar in `[0, 1]`, DiT-style.
pub fn timestep_embedding(t: &Tensor, dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let dev = t.device();
    let freqs: Vec<f64> = (0..half)
        .map(|i| (10_000f64).powf(-(i as f64) / half as f64))
        .collect();
    let freqs = Tensor::from_vec(freqs, &[half], dev)?.to_dtype(t.dtype())?;
    let args = t.unsqueeze(1)?.broadcast_mul(&freqs.unsqueeze(0)?)?;
    let emb = Tensor::cat(&[args.sin()?, args.cos()?], 1)?;
    if dim % 2 == 1 {
        let (b, _) = emb.dims2()?;
        let pad = Tensor::zeros((b, 1), emb.dtype(), dev)?;
        return Ok(Tensor::cat(&[emb, pad], 1)?);
    }
    Ok(emb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn pb(store: &ParamStore, seed: u64) -> ParamBuilder<'_> {
        store.builder(stream_rng(seed, Stream::ModelInit), DType::F32, &Device::Cpu)
    }

    #[test]
    fn rms_normalize_constant_vector_gives_ones() {
        let x = (Tensor::ones((2, 4), DType::F64, &Device::Cpu).unwrap() * 3.5).unwrap();
        let y = rms_normalize(&x, RMS_EPS).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for e in v {
            assert!((e - 1.0).abs() < 1e-6, "got {e}");
        }
    }

    #[test]
    fn rms_normalize_unit_rms() {
        let mut r = stream_rng(1, Stream::ModelInit);
        let x = rng::randn(&mut r, &[5, 16], DType::F32, &Device::Cpu).unwrap();
        let y = rms_normalize(&x, RMS_EPS).unwrap();
        let ms = y
            .sqr()
            .unwrap()
            .mean(D::Minus1)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        for m in ms {
            assert!((m.sqrt() - 1.0).abs() < 1e-5, "rms {}", m.sqrt());
        }
    }

    #[test]
    fn rms_normalize_zero_vector_stays_zero() {
        let x = Tensor::zeros((1, 8), DType::F32, &Device::Cpu).unwrap();
        let y = rms_normalize(&x, RMS_EPS).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|e| *e == 0.0 && e.is_finite()));
    }

    #[test]
    fn block_preserves_shape() {
        let store = ParamStore::new();
        let b = Block::new(&pb(&store, 2).sub("blk"), 16, 4, 4.0, false).unwrap();
        let mut r = stream_rng(3, Stream::ModelInit);
        let x = rng::randn(&mut r, &[2, 5, 16], DType::F32, &Device::Cpu).unwrap();
        let y = b.forward(&x).unwrap();
        assert_eq!(y.dims(), x.dims());
    }

    #[test]
    fn gated_mlp_parameter_arithmetic() {
        let store = ParamStore::new();
        let hidden = 12;
        let ratio = 4.0;
        GatedMlp::new(&pb(&store, 4).sub("mlp"), hidden, ratio).unwrap();
        let inner = (hidden as f64 * ratio) as usize;
        // gate + value: hidden->inner with bias, out: inner->hidden with bias
        let expect = 2 * (hidden * inner + inner) + inner * hidden + hidden;
        assert_eq!(store.param_count(), expect);
    }

    #[test]
    fn same_seed_same_params() {
        let s1 = ParamStore::new();
        let s2 = ParamStore::new();
        Block::new(&pb(&s1, 9).sub("b"), 8, 2, 2.0, true).unwrap();
        Block::new(&pb(&s2, 9).sub("b"), 8, 2, 2.0, true).unwrap();
        assert_eq!(s1.content_hash().unwrap(), s2.content_hash().unwrap());
    }

    #[test]
    fn adamw_single_step_closed_form() {
        // One step on f(x) = x^2/2 from x=1: g=1, m_hat=1, v_hat=1,
        // update = lr * 1/(1+eps), plus decoupled decay lr*wd*x.
        let store = ParamStore::new();
        let x = pb(&store, 0).take("x", &[1], Init::Ones).unwrap();
        let mut opt = AdamW::new(store.named_vars(), (0.9, 0.999), 0.1).unwrap();
        let loss = (x.sqr().unwrap() * 0.5).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        opt.step(&grads, 0.01).unwrap();
        let got = store.named_vars()[0].1.as_tensor().to_vec1::<f32>().unwrap()[0];
        let expect = 1.0 - 0.01 * (1.0 / (1.0 + 1e-8)) - 0.01 * 0.1 * 1.0;
        assert!((got - expect as f32).abs() < 1e-6, "{got} vs {expect}");
    }

    #[test]
    fn ema_update_formula() {
        let store = ParamStore::new();
        let _x = pb(&store, 0).take("x", &[2], Init::Ones).unwrap();
        let named = store.named_vars();
        let mut ema = Ema::new(&named, 0.9999).unwrap();
        // Move the parameter to 3.0 and update once.
        named[0]
            .1
            .set(&(Tensor::ones((2,), DType::F32, &Device::Cpu).unwrap() * 3.0).unwrap())
            .unwrap();
        ema.update(&named).unwrap();
        let s = ema.shadow()[0].1.to_vec1::<f32>().unwrap()[0];
        let expect = 0.9999 * 1.0 + 0.0001 * 3.0;
        assert!((s - expect as f32).abs() < 1e-7, "{s} vs {expect}");
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let peak = 2e-4;
        let min = 2e-5;
        let total = 1000;
        let w = 100;
        assert!(cosine_warmup_lr(0, total, w, peak, min) < peak * 0.02 + 1e-12);
        assert!((cosine_warmup_lr(w, total, w, peak, min) - peak).abs() < 1e-9);
        assert!((cosine_warmup_lr(total, total, w, peak, min) - min).abs() < 1e-9);
    }
}
