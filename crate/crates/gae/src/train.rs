//! The autoencoder training loop: composite pixel objective, adversarial
//! critic, semantic supervision, and the KL comparison arm, driven epoch by
//! epoch so callers can checkpoint between epochs.

use candle_core::{DType, Device, Tensor};

use crate::alignment::{self, AlignmentHead, AlignmentVariant, LatentTargetSource, SpLossForm};
use crate::autoencoder::{Autoencoder, TrainEncoding};
use crate::data::Dataset;
use crate::error::{GaeError, Result};
use crate::latent::{LatentKind, LatentTensor};
use crate::losses::{
    self, LossBundle, LossParts, LossWeights, PatchDiscriminator, PerceptualNet,
};
use crate::nn::{self, AdamW, ParamStore};
use crate::rng::{self, Stream};
use crate::teacher::FrozenTeacher;

/// Hyperparameters for one autoencoder training run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainAeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate of the cosine schedule.
    pub peak_lr: f64,
    /// Floor of the cosine schedule.
    pub min_lr: f64,
    /// Warmup length as a fraction of total steps.
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    /// The adversarial weight ramps linearly from zero over this fraction
    /// of total steps.
    pub gan_warmup_frac: f64,
    pub disc_lr: f64,
    pub disc_base_channels: usize,
    pub perceptual_channels: Vec<usize>,
    pub alignment: AlignmentVariant,
    pub sp_loss_form: SpLossForm,
    /// RMS-normalize teacher targets before the semantic loss.
    pub normalize_sp_target: bool,
    pub hflip: bool,
    pub seed: u64,
}

impl Default for TrainAeConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 16,
            peak_lr: 2e-4,
            min_lr: 2e-5,
            warmup_frac: 0.05,
            weight_decay: 0.0,
            weights: LossWeights::default(),
            gan_warmup_frac: 0.2,
            disc_lr: 2e-4,
            disc_base_channels: 32,
            perceptual_channels: vec![16, 32, 64],
            alignment: AlignmentVariant::Latent,
            sp_loss_form: SpLossForm::Mse,
            normalize_sp_target: true,
            hflip: true,
            seed: 0,
        }
    }
}

impl TrainAeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(GaeError::config("epochs and batch_size must be positive"));
        }
        if self.peak_lr <= 0.0 || self.min_lr < 0.0 || self.min_lr > self.peak_lr {
            return Err(GaeError::config("need 0 < min_lr <= peak_lr"));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) || !(0.0..=1.0).contains(&self.gan_warmup_frac) {
            return Err(GaeError::config("warmup fractions must lie in [0, 1)"));
        }
        self.weights.validate()
    }
}

/// Semantic supervision wiring. `latent_target` is required when the
/// alignment variant is `latent`.
pub struct Supervision<'a> {
    pub teacher: &'a FrozenTeacher,
    pub latent_target: Option<LatentTargetSource<'a>>,
}

/// Owns everything mutable about a run except the autoencoder parameters
/// themselves (which live in the `Autoencoder`'s store and are updated in
/// place).
pub struct AeTrainer<'a> {
    ae: &'a Autoencoder,
    data: &'a Dataset,
    sp: Option<Supervision<'a>>,
    cfg: TrainAeConfig,
    head: Option<AlignmentHead>,
    aux_store: ParamStore,
    disc: Option<PatchDiscriminator>,
    perceptual: PerceptualNet,
    opt_g: AdamW,
    opt_d: Option<AdamW>,
    per_epoch: usize,
    total_steps: usize,
    warmup_steps: usize,
    device: Device,
}

impl<'a> AeTrainer<'a> {
    pub fn new(
        ae: &'a Autoencoder,
        data: &'a Dataset,
        sp: Option<Supervision<'a>>,
        cfg: TrainAeConfig,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.weights.lambda_sp > 0.0 {
            let sup = sp
                .as_ref()
                .ok_or_else(|| GaeError::config("lambda_sp > 0 requires a teacher"))?;
            if cfg.alignment == AlignmentVariant::Latent && sup.latent_target.is_none() {
                return Err(GaeError::config(
                    "latent alignment requires a latent target source",
                ));
            }
        }
        let aux_store = ParamStore::new();
        let head = match (&sp, cfg.weights.lambda_sp > 0.0) {
            (Some(sup), true) => {
                let pb = aux_store.builder(
                    rng::substream_rng(cfg.seed, Stream::ModelInit, 0xa119),
                    dtype,
                    device,
                );
                Some(AlignmentHead::new(
                    &pb.sub("align"),
                    cfg.alignment,
                    ae.config().backbone.hidden_dim,
                    ae.latent_dim(),
                    sup.teacher.dim(),
                )?)
            }
            _ => None,
        };
        let disc = if cfg.weights.lambda_gan > 0.0 {
            Some(PatchDiscriminator::new(
                cfg.seed,
                cfg.disc_base_channels,
                dtype,
                device,
            )?)
        } else {
            None
        };
        let perceptual = PerceptualNet::new(cfg.seed, &cfg.perceptual_channels, dtype, device)?;
        let mut gen_vars = ae.store().named_vars();
        gen_vars.extend(aux_store.named_vars());
        let opt_g = AdamW::new(gen_vars, (0.9, 0.95), cfg.weight_decay)?;
        let opt_d = disc
            .as_ref()
            .map(|d| AdamW::new(d.store().named_vars(), (0.9, 0.95), 0.0))
            .transpose()?;
        let per_epoch = data.len().div_ceil(cfg.batch_size);
        if per_epoch == 0 {
            return Err(GaeError::config("dataset is empty"));
        }
        let total_steps = per_epoch * cfg.epochs;
        let warmup_steps = (cfg.warmup_frac * total_steps as f64).round() as usize;
        Ok(Self {
            ae,
            data,
            sp,
            cfg,
            head,
            aux_store,
            disc,
            perceptual,
            opt_g,
            opt_d,
            per_epoch,
            total_steps,
            warmup_steps,
            device: device.clone(),
        })
    }

    pub fn config(&self) -> &TrainAeConfig {
        &self.cfg
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    /// Alignment-head parameters (empty store unless pre/post supervision
    /// is active). Callers persist this alongside the model.
    pub fn aux_store(&self) -> &ParamStore {
        &self.aux_store
    }

    pub fn aux_store_mut(&mut self) -> &mut ParamStore {
        &mut self.aux_store
    }

    pub fn disc_store(&self) -> Option<&ParamStore> {
        self.disc.as_ref().map(|d| d.store())
    }

    pub fn disc_store_mut(&mut self) -> Option<&mut ParamStore> {
        self.disc.as_mut().map(|d| d.store_mut())
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt_g
    }

    pub fn disc_optimizer(&self) -> Option<&AdamW> {
        self.opt_d.as_ref()
    }

    /// Restore optimizer moments when resuming mid-run.
    pub fn load_optimizer_state(
        &mut self,
        gen: (&std::collections::HashMap<String, Tensor>, usize),
        disc: Option<(&std::collections::HashMap<String, Tensor>, usize)>,
    ) -> Result<()> {
        self.opt_g.load_state(gen.0, gen.1)?;
        if let (Some(opt), Some((state, step))) = (self.opt_d.as_mut(), disc) {
            opt.load_state(state, step)?;
        }
        Ok(())
    }

    /// Run one epoch (0-based). Returns the per-step loss bundles, each of
    /// which has already passed the accounting invariant.
    pub fn run_epoch(&mut self, epoch: usize) -> Result<Vec<LossBundle>> {
        if epoch >= self.cfg.epochs {
            return Err(GaeError::config(format!(
                "epoch {epoch} outside the configured budget {}",
                self.cfg.epochs
            )));
        }
        let batches = self.data.epoch_batches(
            self.cfg.seed,
            epoch as u64,
            self.cfg.batch_size,
            true,
            self.cfg.hflip,
            &self.device,
        )?;
        let mut log = Vec::with_capacity(batches.len());
        for (bi, batch) in batches.iter().enumerate() {
            let step = epoch * self.per_epoch + bi;
            let lr = nn::cosine_warmup_lr(
                step,
                self.total_steps,
                self.warmup_steps,
                self.cfg.peak_lr,
                self.cfg.min_lr,
            );
            let mut noise_rng = rng::substream_rng(self.cfg.seed, Stream::LatentNoise, step as u64);
            let (x_hat, enc) = self.ae.forward_train(&batch.pixels, &mut noise_rng)?;
            let rec = losses::recon_l1(&x_hat, &batch.pixels)?;
            let lpips = self.perceptual.distance(&x_hat, &batch.pixels)?;
            let gan_pair = self
                .disc
                .as_ref()
                .map(|d| losses::gan_losses(d, &x_hat, &batch.pixels))
                .transpose()?;
            let sp = self.sp_loss(&enc, &batch.pixels)?;
            let kl = match &enc {
                TrainEncoding::Kl { mean, logvar, .. } => Some((
                    losses::kl_divergence(mean, logvar)?,
                    self.ae.config().kl_weight,
                )),
                TrainEncoding::Rms { .. } => None,
            };
            let eff_gan = losses::gan_weight_at(
                step,
                self.total_steps,
                self.cfg.weights.lambda_gan,
                self.cfg.gan_warmup_frac,
            );
            let parts = LossParts {
                rec,
                lpips,
                gan_g: gan_pair.as_ref().map(|(g, _)| g.clone()),
                sp,
                kl,
            };
            let (total, mut bundle) = losses::total_loss(&self.cfg.weights, &parts, step, eff_gan)?;
            let grads = total.backward()?;
            self.opt_g.step(&grads, lr)?;
            if let (Some((_, d_loss)), Some(opt_d)) = (&gan_pair, self.opt_d.as_mut()) {
                bundle.gan_d = d_loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                if !bundle.gan_d.is_finite() {
                    return Err(GaeError::TrainAbort(format!(
                        "non-finite critic loss at step {step}"
                    )));
                }
                let d_grads = d_loss.backward()?;
                opt_d.step(&d_grads, self.cfg.disc_lr)?;
            }
            bundle.check(&self.cfg.weights)?;
            log.push(bundle);
        }
        Ok(log)
    }

    fn sp_loss(&self, enc: &TrainEncoding, pixels: &Tensor) -> Result<Option<Tensor>> {
        let (Some(sup), Some(head)) = (&self.sp, &self.head) else {
            return Ok(None);
        };
        let f = sup.teacher.extract(pixels)?;
        let mu = || -> LatentTensor {
            match enc {
                TrainEncoding::Rms { mu, .. } => mu.clone(),
                TrainEncoding::Kl { mean, .. } => LatentTensor {
                    values: mean.clone(),
                    grid: self.ae.grid(),
                    kind: LatentKind::Mean,
                    c_sigma: 0.0,
                },
            }
        };
        let loss = match self.cfg.alignment {
            AlignmentVariant::Latent => {
                let source = sup
                    .latent_target
                    .as_ref()
                    .ok_or_else(|| GaeError::config("latent alignment lost its target source"))?;
                let target = source.target(&f.values, f.grid, self.cfg.normalize_sp_target)?;
                alignment::sp_loss_latent(&mu(), &target)?
            }
            AlignmentVariant::Pre => {
                let adapter = head
                    .adapter
                    .as_ref()
                    .ok_or_else(|| GaeError::config("pre alignment needs its adapter"))?;
                alignment::sp_loss_pre(enc.features(), &f.values, adapter, self.cfg.sp_loss_form)?
            }
            AlignmentVariant::Post => {
                let expansion = head
                    .expansion
                    .as_ref()
                    .ok_or_else(|| GaeError::config("post alignment needs its expansion head"))?;
                alignment::sp_loss_post(&mu(), expansion, &f.values, self.cfg.sp_loss_form)?
            }
        };
        Ok(Some(loss))
    }
}

/// Convenience wrapper: run every epoch and return the concatenated log.
pub fn train_autoencoder(
    ae: &Autoencoder,
    data: &Dataset,
    sp: Option<Supervision<'_>>,
    cfg: TrainAeConfig,
    dtype: DType,
    device: &Device,
) -> Result<Vec<LossBundle>> {
    let epochs = cfg.epochs;
    let mut trainer = AeTrainer::new(ae, data, sp, cfg, dtype, device)?;
    let mut log = Vec::new();
    for epoch in 0..epochs {
        log.extend(trainer.run_epoch(epoch)?);
    }
    Ok(log)
}

/// Mean of a logged field per epoch, for curve plots.
pub fn epoch_means(log: &[LossBundle], per_epoch: usize, f: impl Fn(&LossBundle) -> f64) -> Vec<f64> {
    log.chunks(per_epoch)
        .map(|c| c.iter().map(&f).sum::<f64>() / c.len().max(1) as f64)
        .collect()
}
