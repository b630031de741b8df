//! Latent diffusion transformer trained with a rectified-flow velocity
//! objective on cached μ latents, plus timeshifted ODE/SDE samplers with
//! interval-limited classifier-free guidance.

use candle_core::{DType, Device, Tensor};
use candle_nn::Module;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{GaeError, Result};
use crate::eval;
use crate::nn::{self, AdamW, Ema, GatedMlp, Init, ParamBuilder, ParamStore, SelfAttention};
use crate::rng::{self, Stream};

/// Model and optimization settings for the latent diffusion stage.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub ema_decay: f64,
    pub lr: f64,
    /// Timeshift parameter `s` of `t' = s t / (1 + (s - 1) t)`.
    pub timeshift: f64,
    pub class_count: usize,
    /// Probability of replacing a label with the null class during training.
    pub uncond_drop_prob: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 384,
            layers: 12,
            heads: 6,
            mlp_ratio: 4.0,
            ema_decay: 0.9999,
            lr: 2e-4,
            timeshift: 1.0,
            class_count: 10,
            uncond_drop_prob: 0.1,
            epochs: 10,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ema_decay) || self.ema_decay == 0.0 {
            return Err(GaeError::config("ema_decay must lie in (0, 1)"));
        }
        if self.timeshift <= 0.0 {
            return Err(GaeError::config("timeshift must be positive"));
        }
        if self.hidden_dim == 0 || self.layers == 0 || self.heads == 0 {
            return Err(GaeError::config("model dims must be positive"));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(GaeError::config("hidden_dim must divide by heads"));
        }
        if !(0.0..=1.0).contains(&self.uncond_drop_prob) {
            return Err(GaeError::config("uncond_drop_prob must lie in [0, 1]"));
        }
        if self.class_count == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(GaeError::config("class_count, epochs, batch_size must be positive"));
        }
        Ok(())
    }
}

/// Sampler settings. `weight == 1` or `interval == 0` disables guidance.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub weight: f64,
    /// Fraction of the time axis where guidance is active.
    pub interval: f64,
    pub sampler: SamplerKind,
    pub steps: usize,
    /// Anchor the active interval at the low-noise end instead of the
    /// default high-noise end.
    #[serde(default)]
    pub flip_interval: bool,
    /// SDE churn strength; 0 reduces the SDE sampler to the ODE path.
    #[serde(default = "default_churn")]
    pub churn: f64,
}

fn default_churn() -> f64 {
    1.0
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            weight: 1.0,
            interval: 0.3,
            sampler: SamplerKind::Ode,
            steps: 250,
            flip_interval: false,
            churn: 1.0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.weight < 1.0 {
            return Err(GaeError::config("guidance weight must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.interval) {
            return Err(GaeError::config("guidance interval must lie in [0, 1]"));
        }
        if self.steps == 0 {
            return Err(GaeError::config("sampler needs at least one step"));
        }
        if self.churn < 0.0 {
            return Err(GaeError::config("churn must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ode,
    Sde,
}

/// `t' = s t / (1 + (s - 1) t)`: a monotone bijection of [0, 1] fixing the
/// endpoints for every `s > 0`.
pub fn apply_timeshift(t: f64, s: f64) -> f64 {
    s * t / (1.0 + (s - 1.0) * t)
}

/// Combine conditional and unconditional velocities. `w = 1` returns the
/// conditional velocity tensor itself, bitwise.
pub fn guided_velocity(
    v_cond: &Tensor,
    v_uncond: &Tensor,
    g: &GuidanceConfig,
    t: f64,
) -> Result<Tensor> {
    if g.weight == 1.0 || !guidance_active(g, t) {
        return Ok(v_cond.clone());
    }
    // v_uncond + w (v_cond - v_uncond)
    Ok(((v_cond - v_uncond)? * g.weight)?.add(v_uncond)?)
}

/// Whether guidance applies at time `t`. The active window sits at the
/// high-noise end `[0, interval)` by default, or `(1 - interval, 1]` when
/// flipped.
pub fn guidance_active(g: &GuidanceConfig, t: f64) -> bool {
    if g.interval <= 0.0 {
        return false;
    }
    if g.flip_interval {
        t > 1.0 - g.interval
    } else {
        t < g.interval
    }
}

struct DitBlock {
    attn: SelfAttention,
    mlp: GatedMlp,
    modulation: candle_nn::Linear,
}

impl DitBlock {
    fn new(pb: &ParamBuilder, dim: usize, heads: usize, mlp_ratio: f64) -> Result<Self> {
        let attn = SelfAttention::new(&pb.sub("attn"), dim, heads, false)?;
        let mlp = GatedMlp::new(&pb.sub("mlp"), dim, mlp_ratio)?;
        let w = pb.take("mod.weight", &[6 * dim, dim], Init::Zeros)?;
        let b = pb.take("mod.bias", &[6 * dim], Init::Zeros)?;
        Ok(Self {
            attn,
            mlp,
            modulation: candle_nn::Linear::new(w, Some(b)),
        })
    }

    fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let dim = x.dim(2)?;
        let m = self.modulation.forward(&cond.silu()?)?; // [B, 6 dim]
        let part = |i: usize| -> Result<Tensor> {
            Ok(m.narrow(1, i * dim, dim)?.unsqueeze(1)?)
        };
        let (shift_a, scale_a, gate_a) = (part(0)?, part(1)?, part(2)?);
        let (shift_m, scale_m, gate_m) = (part(3)?, part(4)?, part(5)?);
        let h = nn::rms_normalize(x, nn::RMS_EPS)?
            .broadcast_mul(&(scale_a + 1.0)?)?
            .broadcast_add(&shift_a)?;
        let x = (x + self.attn.forward(&h)?.broadcast_mul(&gate_a)?)?;
        let h = nn::rms_normalize(&x, nn::RMS_EPS)?
            .broadcast_mul(&(scale_m + 1.0)?)?
            .broadcast_add(&shift_m)?;
        let out = (&x + self.mlp.forward(&h)?.broadcast_mul(&gate_m)?)?;
        Ok(out)
    }
}

/// Velocity-field transformer over latent tokens, conditioned on timestep
/// and class label through adaptive normalization. Zero-initialized gates
/// and output head make the initial velocity field identically zero.
pub struct DiT {
    in_proj: candle_nn::Linear,
    pos: Tensor,
    label_embed: Tensor,
    t_mlp: (candle_nn::Linear, candle_nn::Linear),
    blocks: Vec<DitBlock>,
    out_mod: candle_nn::Linear,
    out: candle_nn::Linear,
    store: ParamStore,
    cfg: DiffusionConfig,
    latent_dim: usize,
    tokens: usize,
}

impl DiT {
    pub fn new(
        cfg: DiffusionConfig,
        latent_dim: usize,
        tokens: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new();
        let pb = store.builder(rng::stream_rng(cfg.seed, Stream::DiffusionInit), dtype, device);
        let dim = cfg.hidden_dim;
        let in_proj = pb.linear("in_proj", latent_dim, dim)?;
        let pos = pb.take("pos", &[1, tokens, dim], Init::Normal(0.02))?;
        // Row class_count is the null (unconditional) class.
        let label_embed = pb.take(
            "label_embed",
            &[cfg.class_count + 1, dim],
            Init::Normal(0.02),
        )?;
        let t_mlp = (
            pb.sub("t_mlp").linear("fc1", dim, dim)?,
            pb.sub("t_mlp").linear("fc2", dim, dim)?,
        );
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            blocks.push(DitBlock::new(
                &pb.sub(&format!("block{i}")),
                dim,
                cfg.heads,
                cfg.mlp_ratio,
            )?);
        }
        let w = pb.take("out_mod.weight", &[2 * dim, dim], Init::Zeros)?;
        let b = pb.take("out_mod.bias", &[2 * dim], Init::Zeros)?;
        let out_mod = candle_nn::Linear::new(w, Some(b));
        let ow = pb.take("out.weight", &[latent_dim, dim], Init::Zeros)?;
        let ob = pb.take("out.bias", &[latent_dim], Init::Zeros)?;
        let out = candle_nn::Linear::new(ow, Some(ob));
        Ok(Self {
            in_proj,
            pos,
            label_embed,
            t_mlp,
            blocks,
            out_mod,
            out,
            store,
            cfg,
            latent_dim,
            tokens,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn config(&self) -> &DiffusionConfig {
        &self.cfg
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn null_class(&self) -> u32 {
        self.cfg.class_count as u32
    }

    fn condition(&self, t: &Tensor, labels: &Tensor) -> Result<Tensor> {
        let temb = nn::timestep_embedding(t, self.cfg.hidden_dim)?;
        let temb = self.t_mlp.1.forward(&self.t_mlp.0.forward(&temb)?.silu()?)?;
        let lemb = self.label_embed.index_select(labels, 0)?;
        Ok((temb + lemb)?)
    }

    /// Predicted velocity for noisy latents `x` `[B, N, d]` at times `t`
    /// `[B]` (values in [0, 1]) under integer labels `[B]` (class_count is
    /// the null class).
    pub fn forward(&self, x: &Tensor, t: &Tensor, labels: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        if n != self.tokens || d != self.latent_dim {
            return Err(GaeError::shape(format!(
                "model expects [{}, {}] tokens, got [{n}, {d}]",
                self.tokens, self.latent_dim
            )));
        }
        if t.dims() != [b] || labels.dims() != [b] {
            return Err(GaeError::shape("t and labels must be [B]"));
        }
        let cond = self.condition(t, labels)?;
        let mut h = self.in_proj.forward(x)?.broadcast_add(&self.pos)?;
        for blk in &self.blocks {
            h = blk.forward(&h, &cond)?;
        }
        let dim = self.cfg.hidden_dim;
        let m = self.out_mod.forward(&cond.silu()?)?;
        let shift = m.narrow(1, 0, dim)?.unsqueeze(1)?;
        let scale = m.narrow(1, dim, dim)?.unsqueeze(1)?;
        let h = nn::rms_normalize(&h, nn::RMS_EPS)?
            .broadcast_mul(&(scale + 1.0)?)?
            .broadcast_add(&shift)?;
        Ok(self.out.forward(&h)?)
    }
}

/// Replace labels with the null class with probability `p`.
pub fn drop_labels(labels: &[u32], null_class: u32, p: f64, rng: &mut ChaCha8Rng) -> Vec<u32> {
    labels
        .iter()
        .map(|&l| if rng.random::<f64>() < p { null_class } else { l })
        .collect()
}

/// Rectified-flow objective: `x_t = (1 - t) eps + t mu`, velocity target
/// `mu - eps`, mean squared error. `t` values must lie in (0, 1); label
/// dropout is the caller's job (see [`drop_labels`]).
pub fn flow_loss(
    model: &DiT,
    mu: &Tensor,
    t: &Tensor,
    labels: &Tensor,
    eps: &Tensor,
) -> Result<Tensor> {
    let (b, _, _) = mu.dims3()?;
    if t.dims() != [b] {
        return Err(GaeError::shape("t must be [B]"));
    }
    let tb = t.reshape((b, 1, 1))?;
    let x_t = (eps.broadcast_mul(&(1.0 - &tb)?)? + mu.broadcast_mul(&tb)?)?;
    let target = (mu - eps)?;
    let v = model.forward(&x_t, t, labels)?;
    let loss = (v - target)?.sqr()?.mean_all()?;
    let val = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !val.is_finite() {
        return Err(GaeError::TrainAbort(format!("non-finite flow loss: {val}")));
    }
    Ok(loss)
}

fn velocity_at(
    model: &DiT,
    x: &Tensor,
    t: f64,
    labels: &Tensor,
    null_labels: &Tensor,
    g: &GuidanceConfig,
) -> Result<Tensor> {
    let b = x.dim(0)?;
    let tt = Tensor::full(t, (b,), x.device())?.to_dtype(x.dtype())?;
    let v_cond = model.forward(x, &tt, labels)?;
    if g.weight == 1.0 || !guidance_active(g, t) {
        return Ok(v_cond);
    }
    let v_uncond = model.forward(x, &tt, null_labels)?;
    guided_velocity(&v_cond, &v_uncond, g, t)
}

/// Integrate the learned velocity field from pure noise at `t = 0` to a
/// latent batch at `t = 1` over the timeshifted grid. The SDE sampler adds
/// Euler–Maruyama churn that vanishes as `churn -> 0`, recovering the ODE
/// path exactly.
pub fn sample(
    model: &DiT,
    g: &GuidanceConfig,
    labels: &[u32],
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    g.validate()?;
    let device = model.pos.device().clone();
    let dtype = model.pos.dtype();
    let b = labels.len();
    if b == 0 {
        return Err(GaeError::config("sample needs at least one label"));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > model.null_class()) {
        return Err(GaeError::config(format!("label {bad} out of range")));
    }
    let label_t = Tensor::from_vec(labels.to_vec(), (b,), &device)?;
    let null_t = Tensor::from_vec(vec![model.null_class(); b], (b,), &device)?;
    let shape = [b, model.tokens(), model.latent_dim()];
    let mut x = rng::randn(rng, &shape, dtype, &device)?;
    let s = model.config().timeshift;
    let grid: Vec<f64> = (0..=g.steps)
        .map(|i| apply_timeshift(i as f64 / g.steps as f64, s))
        .collect();
    for i in 0..g.steps {
        let (t0, t1) = (grid[i], grid[i + 1]);
        let dt = t1 - t0;
        let v = velocity_at(model, &x, t0, &label_t, &null_t, g)?;
        x = match g.sampler {
            SamplerKind::Ode => (x + (v * dt)?)?,
            SamplerKind::Sde => {
                // eps_hat = x - t v; drift = v - (churn^2 / 2) eps_hat
                // (the (1 - t) factors of score and noise scale cancel);
                // diffusion = churn sqrt(1 - t) dW.
                let c2 = g.churn * g.churn;
                let eps_hat = (&x - (&v * t0)?)?;
                let drift = ((&v - (eps_hat * (c2 / 2.0))?)? * dt)?;
                let noise = rng::randn(rng, &shape, dtype, &device)?;
                let sigma = g.churn * (1.0 - t0).max(0.0).sqrt() * dt.abs().sqrt();
                ((x + drift)? + (noise * sigma)?)?
            }
        };
        let probe = x
            .narrow(1, 0, 1)?
            .flatten_all()?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?;
        if probe.iter().any(|v| !v.is_finite()) {
            return Err(GaeError::TrainAbort(format!(
                "non-finite sampler state at step {i} (t = {t0:.4})"
            )));
        }
    }
    Ok(x)
}

/// One point of the per-epoch training curve.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DiffusionCurvePoint {
    pub epoch: usize,
    pub mean_loss: f64,
    pub fd_small: f64,
}

pub struct DiffusionTrainOutput {
    pub model: DiT,
    pub ema: Ema,
    pub curve: Vec<DiffusionCurvePoint>,
}

/// FD-small between two latent batches: token-flattened features when small
/// enough, token-averaged otherwise.
pub fn latent_fd(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (_, n, d) = a.dims3()?;
    let (ma, mb) = if n * d <= 512 {
        (
            eval::feature_matrix(a, eval::ProbeMode::Flatten)?,
            eval::feature_matrix(b, eval::ProbeMode::Flatten)?,
        )
    } else {
        (
            eval::feature_matrix(a, eval::ProbeMode::Gap)?,
            eval::feature_matrix(b, eval::ProbeMode::Gap)?,
        )
    };
    eval::frechet_distance(&ma, &mb)
}

/// Write the EMA weights into a twin model for sampling and evaluation.
pub fn ema_model(model: &DiT, ema: &Ema, dtype: DType, device: &Device) -> Result<DiT> {
    let twin = DiT::new(
        model.config().clone(),
        model.latent_dim(),
        model.tokens(),
        dtype,
        device,
    )?;
    ema.apply_to(&twin.store().named_vars())?;
    Ok(twin)
}

/// Epoch-driven trainer over cached mean latents, so callers can persist
/// state between epochs. Per epoch it draws samples from the EMA weights
/// and records FD-small against held-out latents.
pub struct DiffusionTrainer {
    model: DiT,
    named: Vec<(String, candle_core::Var)>,
    opt: AdamW,
    ema: Ema,
    cfg: DiffusionConfig,
    latents: Tensor,
    labels: Vec<u32>,
    val_latents: Tensor,
    probe_labels: Vec<u32>,
    dtype: DType,
    device: Device,
    /// Global step counter across epochs; drives the per-step rng streams.
    step: u64,
}

impl DiffusionTrainer {
    pub fn new(
        latents: &Tensor,
        labels: &[u32],
        val_latents: &Tensor,
        cfg: &DiffusionConfig,
        fd_probe: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        cfg.validate()?;
        let (count, tokens, dim) = latents.dims3()?;
        if labels.len() != count {
            return Err(GaeError::shape("latent/label count mismatch"));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= cfg.class_count) {
            return Err(GaeError::config(format!(
                "label {bad} exceeds class_count {}",
                cfg.class_count
            )));
        }
        let model = DiT::new(cfg.clone(), dim, tokens, dtype, device)?;
        let named = model.store().named_vars();
        let opt = AdamW::new(named.clone(), (0.9, 0.95), 0.0)?;
        let ema = Ema::new(&named, cfg.ema_decay)?;
        let probe_labels: Vec<u32> = (0..fd_probe.max(2))
            .map(|i| (i % cfg.class_count) as u32)
            .collect();
        Ok(Self {
            model,
            named,
            opt,
            ema,
            cfg: cfg.clone(),
            latents: latents.clone(),
            labels: labels.to_vec(),
            val_latents: val_latents.clone(),
            probe_labels,
            dtype,
            device: device.clone(),
            step: 0,
        })
    }

    pub fn model(&self) -> &DiT {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut DiT {
        &mut self.model
    }

    pub fn ema(&self) -> &Ema {
        &self.ema
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt
    }

    pub fn global_step(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.labels.len().div_ceil(self.cfg.batch_size)
    }

    /// Restore optimizer moments, EMA shadow, and the step counter when
    /// resuming from a checkpoint (model weights load via the store).
    pub fn load_state(
        &mut self,
        opt_state: (&std::collections::HashMap<String, Tensor>, usize),
        ema_shadow: &std::collections::HashMap<String, Tensor>,
        step: u64,
    ) -> Result<()> {
        self.opt.load_state(opt_state.0, opt_state.1)?;
        self.ema.load(ema_shadow)?;
        self.step = step;
        Ok(())
    }

    /// One pass over the training latents.
    pub fn run_epoch(&mut self, epoch: usize) -> Result<DiffusionCurvePoint> {
        let device = self.device.clone();
        let mut order_rng = rng::substream_rng(self.cfg.seed, Stream::DiffusionTrain, epoch as u64);
        let mut order: Vec<usize> = (0..self.labels.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(self.cfg.batch_size) {
            let mut r =
                rng::substream_rng(self.cfg.seed, Stream::DiffusionTrain, (1 << 32) | self.step);
            let idx = Tensor::from_vec(
                chunk.iter().map(|&i| i as u32).collect::<Vec<_>>(),
                (chunk.len(),),
                &device,
            )?;
            let mu = self.latents.index_select(&idx, 0)?;
            let batch_labels: Vec<u32> = chunk.iter().map(|&i| self.labels[i]).collect();
            let dropped = drop_labels(
                &batch_labels,
                self.cfg.class_count as u32,
                self.cfg.uncond_drop_prob,
                &mut r,
            );
            let label_t = Tensor::from_vec(dropped, (chunk.len(),), &device)?;
            // Uniform times pushed through the training-side timeshift,
            // kept strictly inside (0, 1).
            let t_vals: Vec<f64> = (0..chunk.len())
                .map(|_| {
                    let u: f64 = r.random_range(1e-4..1.0 - 1e-4);
                    apply_timeshift(u, self.cfg.timeshift)
                })
                .collect();
            let t = Tensor::from_vec(t_vals, (chunk.len(),), &device)?.to_dtype(self.dtype)?;
            let eps = rng::randn(&mut r, mu.dims(), self.dtype, &device)?;
            let loss = flow_loss(&self.model, &mu, &t, &label_t, &eps)?;
            let grads = loss.backward()?;
            self.opt.step(&grads, self.cfg.lr)?;
            self.ema.update(&self.named)?;
            loss_sum += loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            batches += 1;
            self.step += 1;
        }
        let twin = ema_model(&self.model, &self.ema, self.dtype, &device)?;
        let mut sample_rng = rng::substream_rng(self.cfg.seed, Stream::Sampling, epoch as u64);
        let g = GuidanceConfig {
            steps: 36,
            weight: 1.0,
            ..Default::default()
        };
        let drawn = sample(&twin, &g, &self.probe_labels, &mut sample_rng)?;
        let fd = latent_fd(&drawn, &self.val_latents)?;
        let point = DiffusionCurvePoint {
            epoch,
            mean_loss: loss_sum / batches.max(1) as f64,
            fd_small: fd,
        };
        log::info!(
            "diffusion epoch {epoch}: loss {:.5} fd {:.4}",
            point.mean_loss,
            point.fd_small
        );
        Ok(point)
    }
}

/// Train for the configured number of epochs in one call.
pub fn train_diffusion(
    latents: &Tensor,
    labels: &[u32],
    val_latents: &Tensor,
    cfg: &DiffusionConfig,
    fd_probe: usize,
    dtype: DType,
    device: &Device,
) -> Result<DiffusionTrainOutput> {
    let mut trainer =
        DiffusionTrainer::new(latents, labels, val_latents, cfg, fd_probe, dtype, device)?;
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        curve.push(trainer.run_epoch(epoch)?);
    }
    let DiffusionTrainer { model, ema, .. } = trainer;
    Ok(DiffusionTrainOutput { model, ema, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use candle_core::Var;

    fn dev() -> Device {
        Device::Cpu
    }

    fn tiny_cfg() -> DiffusionConfig {
        DiffusionConfig {
            hidden_dim: 32,
            layers: 2,
            heads: 2,
            mlp_ratio: 2.0,
            epochs: 1,
            batch_size: 8,
            class_count: 4,
            timeshift: 1.0,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn timeshift_properties() {
        assert_eq!(apply_timeshift(0.0, 0.4), 0.0);
        assert!((apply_timeshift(1.0, 0.4) - 1.0).abs() < 1e-12);
        for t in [0.1, 0.3, 0.7, 0.9] {
            assert!((apply_timeshift(t, 1.0) - t).abs() < 1e-12);
        }
        let v = apply_timeshift(0.5, 0.4);
        assert!((v - 0.4 * 0.5 / (1.0 - 0.6 * 0.5)).abs() < 1e-12);
        assert!((v - 0.2857142857142857).abs() < 1e-12);
        // Strict monotonicity on a grid, for several s.
        for s in [0.4, 0.5, 0.7, 1.0, 2.5] {
            let mut prev = -1.0;
            for i in 0..=100 {
                let t = apply_timeshift(i as f64 / 100.0, s);
                assert!(t > prev, "timeshift not monotone at s={s}");
                prev = t;
            }
        }
    }

    #[test]
    fn guidance_algebra() {
        let d = dev();
        let mut r = stream_rng(1, Stream::Sampling);
        let vc = rng::randn(&mut r, &[2, 3, 4], DType::F32, &d).unwrap();
        let vu = rng::randn(&mut r, &[2, 3, 4], DType::F32, &d).unwrap();
        let mut g = GuidanceConfig {
            weight: 1.0,
            interval: 0.3,
            ..Default::default()
        };
        // w = 1: bitwise the conditional tensor.
        let out = guided_velocity(&vc, &vu, &g, 0.1).unwrap();
        let diff = (out - &vc).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
        // interval = 0: never active.
        g.weight = 3.3;
        g.interval = 0.0;
        assert!(!guidance_active(&g, 0.0));
        let out = guided_velocity(&vc, &vu, &g, 0.0).unwrap();
        let diff = (out - &vc).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
        // Active window formula.
        g.interval = 0.3;
        assert!(guidance_active(&g, 0.0) && guidance_active(&g, 0.29));
        assert!(!guidance_active(&g, 0.3) && !guidance_active(&g, 0.9));
        g.flip_interval = true;
        assert!(!guidance_active(&g, 0.5) && guidance_active(&g, 0.8));
        // v_cond == v_uncond: guidance is a no-op at any weight.
        g.flip_interval = false;
        let out = guided_velocity(&vc, &vc, &g, 0.1).unwrap();
        let diff = (out - &vc).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-6);
    }

    #[test]
    fn perfect_oracle_gives_zero_flow_loss() {
        let d = dev();
        let mut r = stream_rng(2, Stream::DiffusionTrain);
        let mu = rng::randn(&mut r, &[2, 4, 8], DType::F64, &d).unwrap();
        let eps = rng::randn(&mut r, &[2, 4, 8], DType::F64, &d).unwrap();
        // Instead of a model, check the identity target = mu - eps directly:
        // plugging the target back as v gives exactly zero.
        let t = Tensor::from_vec(vec![0.3f64, 0.8], (2,), &d).unwrap();
        let tb = t.reshape((2, 1, 1)).unwrap();
        let x_t = (eps.broadcast_mul(&(1.0 - &tb).unwrap()).unwrap()
            + mu.broadcast_mul(&tb).unwrap())
        .unwrap();
        let target = (&mu - &eps).unwrap();
        let recon_mu = (&x_t + target.broadcast_mul(&(1.0 - &tb).unwrap()).unwrap()).unwrap();
        let diff = (recon_mu - &mu)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(diff < 1e-12, "x_t + (1 - t) v must recover mu, diff {diff}");
    }

    #[test]
    fn model_shapes_and_zero_init_velocity() {
        let d = dev();
        let model = DiT::new(tiny_cfg(), 8, 4, DType::F32, &d).unwrap();
        let mut r = stream_rng(4, Stream::DiffusionTrain);
        let x = rng::randn(&mut r, &[3, 4, 8], DType::F32, &d).unwrap();
        let t = Tensor::from_vec(vec![0.2f32, 0.5, 0.9], (3,), &d).unwrap();
        let labels = Tensor::from_vec(vec![0u32, 1, 4], (3,), &d).unwrap();
        let v = model.forward(&x, &t, &labels).unwrap();
        assert_eq!(v.dims(), &[3, 4, 8]);
        // Zero-initialized output head and gates: v = 0 at initialization.
        let m = v.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(m, 0.0);
    }

    #[test]
    fn flow_loss_gradient_check() {
        let d = dev();
        let cfg = DiffusionConfig {
            hidden_dim: 16,
            layers: 2,
            heads: 2,
            mlp_ratio: 2.0,
            class_count: 3,
            seed: 9,
            ..Default::default()
        };
        let model = DiT::new(cfg, 4, 2, DType::F64, &d).unwrap();
        // Perturb the zero-init head so gradients are non-trivial.
        let mut r = stream_rng(5, Stream::DiffusionTrain);
        for (name, var) in model.store().named_vars() {
            if name.contains("out.") || name.contains("mod.") {
                let noise = rng::randn(&mut r, var.as_tensor().dims(), DType::F64, &d).unwrap();
                var.set(&((var.as_tensor() + (noise * 0.05).unwrap()).unwrap())).unwrap();
            }
        }
        let mu = rng::randn(&mut r, &[2, 2, 4], DType::F64, &d).unwrap();
        let eps = rng::randn(&mut r, &[2, 2, 4], DType::F64, &d).unwrap();
        let t = Tensor::from_vec(vec![0.35f64, 0.7], (2,), &d).unwrap();
        let labels = Tensor::from_vec(vec![0u32, 2], (2,), &d).unwrap();
        // Check a subset of parameters to keep the runtime small.
        let named: Vec<_> = model
            .store()
            .named_vars()
            .into_iter()
            .filter(|(n, _)| n.contains("block1.mod") || n.contains("out.") || n == "in_proj.weight")
            .collect();
        let err = crate::gradcheck::max_rel_err(
            &named,
            || flow_loss(&model, &mu, &t, &labels, &eps),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "flow loss grad rel err {err}");
    }

    #[test]
    fn ode_sampling_is_deterministic_and_shaped() {
        let d = dev();
        let model = DiT::new(tiny_cfg(), 8, 4, DType::F32, &d).unwrap();
        let g = GuidanceConfig {
            steps: 5,
            weight: 1.0,
            ..Default::default()
        };
        let labels = vec![0u32, 3];
        let a = sample(&model, &g, &labels, &mut stream_rng(7, Stream::Sampling)).unwrap();
        let b = sample(&model, &g, &labels, &mut stream_rng(7, Stream::Sampling)).unwrap();
        assert_eq!(a.dims(), &[2, 4, 8]);
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn guided_w1_bitwise_equals_unguided() {
        let d = dev();
        let model = DiT::new(tiny_cfg(), 8, 4, DType::F32, &d).unwrap();
        let labels = vec![1u32, 2];
        let unguided = GuidanceConfig {
            steps: 4,
            weight: 1.0,
            interval: 0.0,
            ..Default::default()
        };
        let w1 = GuidanceConfig {
            steps: 4,
            weight: 1.0,
            interval: 0.5,
            ..Default::default()
        };
        let a = sample(&model, &unguided, &labels, &mut stream_rng(8, Stream::Sampling)).unwrap();
        let b = sample(&model, &w1, &labels, &mut stream_rng(8, Stream::Sampling)).unwrap();
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn sde_with_zero_churn_equals_ode() {
        let d = dev();
        let model = DiT::new(tiny_cfg(), 8, 4, DType::F32, &d).unwrap();
        let labels = vec![0u32];
        let ode = GuidanceConfig {
            steps: 4,
            sampler: SamplerKind::Ode,
            weight: 1.0,
            ..Default::default()
        };
        let sde0 = GuidanceConfig {
            steps: 4,
            sampler: SamplerKind::Sde,
            churn: 0.0,
            weight: 1.0,
            ..Default::default()
        };
        let a = sample(&model, &ode, &labels, &mut stream_rng(9, Stream::Sampling)).unwrap();
        let b = sample(&model, &sde0, &labels, &mut stream_rng(9, Stream::Sampling)).unwrap();
        let diff = (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        // The SDE path consumes extra rng draws for its (zero-scaled) noise,
        // but the state update itself must match the ODE exactly.
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn label_dropout_extremes() {
        let mut r = stream_rng(10, Stream::DiffusionTrain);
        let labels = vec![0u32, 1, 2, 3];
        let kept = drop_labels(&labels, 9, 0.0, &mut r);
        assert_eq!(kept, labels);
        let dropped = drop_labels(&labels, 9, 1.0, &mut r);
        assert_eq!(dropped, vec![9, 9, 9, 9]);
    }

    #[test]
    fn ema_update_drifts_toward_params() {
        let d = dev();
        let v = Var::from_tensor(&Tensor::ones((2,), DType::F32, &d).unwrap()).unwrap();
        let named = vec![("w".to_string(), v.clone())];
        let mut ema = Ema::new(&named, 0.9).unwrap();
        v.set(&Tensor::zeros((2,), DType::F32, &d).unwrap()).unwrap();
        ema.update(&named).unwrap();
        let s = ema.shadow()[0].1.to_vec1::<f32>().unwrap();
        assert!((s[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn tiny_training_runs_and_returns_curve() {
        let d = dev();
        let mut r = stream_rng(11, Stream::DiffusionTrain);
        let latents = rng::randn(&mut r, &[24, 4, 8], DType::F32, &d).unwrap();
        let labels: Vec<u32> = (0..24).map(|i| (i % 4) as u32).collect();
        let val = rng::randn(&mut r, &[16, 4, 8], DType::F32, &d).unwrap();
        let cfg = DiffusionConfig {
            epochs: 2,
            batch_size: 8,
            ..tiny_cfg()
        };
        let out = train_diffusion(&latents, &labels, &val, &cfg, 8, DType::F32, &d).unwrap();
        assert_eq!(out.curve.len(), 2);
        for p in &out.curve {
            assert!(p.mean_loss.is_finite() && p.fd_small.is_finite());
        }
    }
}
