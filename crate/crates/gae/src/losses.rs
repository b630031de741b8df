//! The composite training objective: pixel L1, perceptual distance through a
//! fixed conv pyramid, hinge adversarial terms from a patch critic, the
//! semantic-preservation term's weighting, and the KL comparison arm.

use candle_core::{DType, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, Module};
use rand_chacha::ChaCha8Rng;

use crate::error::{GaeError, Result};
use crate::nn::{Init, ParamStore};
use crate::rng::{self, Stream};

/// The four balancing scalars of the total objective.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_lpips: f64,
    pub lambda_gan: f64,
    pub lambda_sp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rec: 1.0,
            lambda_lpips: 1.0,
            lambda_gan: 0.5,
            lambda_sp: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_rec", self.lambda_rec),
            ("lambda_lpips", self.lambda_lpips),
            ("lambda_gan", self.lambda_gan),
            ("lambda_sp", self.lambda_sp),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(GaeError::config(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Mean absolute error over all pixels.
pub fn recon_l1(x_hat: &Tensor, x: &Tensor) -> Result<Tensor> {
    if x_hat.dims() != x.dims() {
        return Err(GaeError::shape(format!(
            "l1 shapes differ: {:?} vs {:?}",
            x_hat.dims(),
            x.dims()
        )));
    }
    Ok((x_hat - x)?.abs()?.mean_all()?)
}

/// A fixed multi-scale conv feature pyramid standing in for the perceptual
/// network: strided 3x3 convolutions with SiLU, built once from its own init
/// stream and never trained. Distances are computed on channelwise
/// unit-normalized feature maps, LPIPS-style.
pub struct PerceptualNet {
    stages: Vec<Conv2d>,
    store: ParamStore,
}

impl PerceptualNet {
    pub fn new(seed: u64, channels: &[usize], dtype: DType, device: &candle_core::Device) -> Result<Self> {
        let store = ParamStore::new();
        let pb = store.builder(rng::substream_rng(seed, Stream::ModelInit, 0xfeed), dtype, device);
        let mut stages = Vec::new();
        let mut in_c = 3;
        for (i, &out_c) in channels.iter().enumerate() {
            let std = (1.0 / (in_c * 9) as f64).sqrt();
            let w = pb.take(&format!("conv{i}.weight"), &[out_c, in_c, 3, 3], Init::Normal(std))?;
            let cfg = Conv2dConfig {
                padding: 1,
                stride: 2,
                dilation: 1,
                groups: 1,
                cudnn_fwd_algo: None,
            };
            stages.push(Conv2d::new(w, None, cfg));
            in_c = out_c;
        }
        Ok(Self { stages, store })
    }

    pub fn desk(seed: u64, dtype: DType, device: &candle_core::Device) -> Result<Self> {
        Self::new(seed, &[16, 32, 64], dtype, device)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut maps = Vec::with_capacity(self.stages.len());
        let mut cur = x.clone();
        for conv in &self.stages {
            cur = conv.forward(&cur)?.silu()?;
            maps.push(cur.clone());
        }
        Ok(maps)
    }

    /// Symmetric perceptual distance; 0 iff the inputs are identical.
    pub fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.dims() != b.dims() {
            return Err(GaeError::shape(format!(
                "perceptual shapes differ: {:?} vs {:?}",
                a.dims(),
                b.dims()
            )));
        }
        let fa = self.features(a)?;
        let fb = self.features(b)?;
        let mut total: Option<Tensor> = None;
        for (ma, mb) in fa.iter().zip(fb.iter()) {
            let na = unit_normalize_channels(ma)?;
            let nb = unit_normalize_channels(mb)?;
            let term = (na - nb)?.sqr()?.mean_all()?;
            total = Some(match total {
                Some(t) => (t + term)?,
                None => term,
            });
        }
        Ok((total.unwrap() / self.stages.len() as f64)?)
    }
}

/// Normalize each spatial location's channel vector to unit L2 norm.
fn unit_normalize_channels(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(1)?.sqrt()?;
    Ok(x.broadcast_div(&(norm + 1e-8)?)?)
}

/// Patch-level convolutional critic over images in `[-1, 1]`. Outputs one
/// logit per receptive-field patch.
pub struct PatchDiscriminator {
    convs: Vec<(Tensor, Option<Tensor>, Conv2dConfig)>,
    store: ParamStore,
}

impl PatchDiscriminator {
    pub fn new(seed: u64, base: usize, dtype: DType, device: &candle_core::Device) -> Result<Self> {
        let store = ParamStore::new();
        let pb = store.builder(rng::stream_rng(seed, Stream::DiscInit), dtype, device);
        let plan = [
            (3, base, 4, 2),
            (base, base * 2, 4, 2),
            (base * 2, base * 4, 4, 2),
            (base * 4, 1, 3, 1),
        ];
        let mut convs = Vec::new();
        for (i, &(in_c, out_c, k, stride)) in plan.iter().enumerate() {
            let std = (1.0 / (in_c * k * k) as f64).sqrt();
            let w = pb.take(
                &format!("conv{i}.weight"),
                &[out_c, in_c, k, k],
                Init::Normal(std),
            )?;
            let b = pb.take(&format!("conv{i}.bias"), &[out_c], Init::Zeros)?;
            let cfg = Conv2dConfig {
                padding: k / 2,
                stride,
                dilation: 1,
                groups: 1,
                cudnn_fwd_algo: None,
            };
            convs.push((w, Some(b), cfg));
        }
        Ok(Self { convs, store })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn run(&self, x: &Tensor, detach_weights: bool) -> Result<Tensor> {
        let mut cur = x.clone();
        let last = self.convs.len() - 1;
        for (i, (w, b, cfg)) in self.convs.iter().enumerate() {
            let (w, b) = if detach_weights {
                (w.detach(), b.as_ref().map(|t| t.detach()))
            } else {
                (w.clone(), b.clone())
            };
            cur = Conv2d::new(w, b, *cfg).forward(&cur)?;
            if i != last {
                cur = cur.silu()?;
            }
        }
        Ok(cur)
    }

    /// Critic scores with trainable weights (discriminator updates).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, false)
    }

    /// Critic scores through detached weights: gradients reach the input
    /// but never the critic parameters (generator updates).
    pub fn forward_frozen(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, true)
    }
}

/// Hinge GAN pair. The discriminator loss sees a detached `x_hat`; the
/// generator loss runs through frozen critic weights, so neither update
/// leaks into the other's parameters.
pub fn gan_losses(
    disc: &PatchDiscriminator,
    x_hat: &Tensor,
    x: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let d_real = disc.forward(x)?;
    let d_fake = disc.forward(&x_hat.detach())?;
    let one = 1.0;
    let d_loss = ((one - d_real)?.relu()?.mean_all()? + (d_fake + one)?.relu()?.mean_all()?)?;
    let g_scores = disc.forward_frozen(x_hat)?;
    let g_loss = g_scores.mean_all()?.neg()?;
    Ok((g_loss, d_loss))
}

/// Adversarial weight ramp: 0 at step 0, linear up to `lambda_gan` at
/// `warmup_frac * total_steps`, constant after.
pub fn gan_weight_at(step: usize, total_steps: usize, lambda_gan: f64, warmup_frac: f64) -> f64 {
    let ramp_steps = (total_steps as f64 * warmup_frac).ceil().max(1.0);
    lambda_gan * (step as f64 / ramp_steps).min(1.0)
}

/// Scalar readout of one optimization step. `total` must equal the weighted
/// sum of the parts with the *effective* (warmed-up) adversarial weight.
/// The `kl` term is zero everywhere except in the KL comparison arm.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LossBundle {
    pub step: usize,
    pub rec: f64,
    pub lpips: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub sp: f64,
    #[serde(default)]
    pub kl: f64,
    #[serde(default)]
    pub kl_weight: f64,
    pub total: f64,
    pub effective_gan_weight: f64,
}

impl LossBundle {
    /// Recompute the Eq. 3 weighted sum from the logged parts.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        w.lambda_rec * self.rec
            + w.lambda_lpips * self.lpips
            + self.effective_gan_weight * self.gan_g
            + w.lambda_sp * self.sp
            + self.kl_weight * self.kl
    }

    pub fn check(&self, w: &LossWeights) -> Result<()> {
        let want = self.weighted_sum(w);
        if (self.total - want).abs() > 1e-6 {
            return Err(GaeError::Other(format!(
                "loss bundle out of balance at step {}: total {} vs weighted sum {want}",
                self.step, self.total
            )));
        }
        Ok(())
    }
}

/// Differentiable parts entering the total objective. Absent adversarial,
/// semantic, or KL terms contribute zero.
pub struct LossParts {
    pub rec: Tensor,
    pub lpips: Tensor,
    pub gan_g: Option<Tensor>,
    pub sp: Option<Tensor>,
    /// KL comparison arm only: `(kl term, kl weight)`.
    pub kl: Option<(Tensor, f64)>,
}

/// Compose the total objective with the given effective adversarial weight.
/// Returns the backprop-ready scalar and the logged bundle; non-finite parts
/// abort the step.
pub fn total_loss(
    weights: &LossWeights,
    parts: &LossParts,
    step: usize,
    effective_gan_weight: f64,
) -> Result<(Tensor, LossBundle)> {
    let rec = scalar_f64(&parts.rec)?;
    let lpips = scalar_f64(&parts.lpips)?;
    let gan_g = parts.gan_g.as_ref().map(scalar_f64).transpose()?.unwrap_or(0.0);
    let sp = parts.sp.as_ref().map(scalar_f64).transpose()?.unwrap_or(0.0);
    let kl = parts
        .kl
        .as_ref()
        .map(|(t, _)| scalar_f64(t))
        .transpose()?
        .unwrap_or(0.0);
    let kl_weight = parts.kl.as_ref().map(|(_, w)| *w).unwrap_or(0.0);
    for (name, v) in [
        ("rec", rec),
        ("lpips", lpips),
        ("gan_g", gan_g),
        ("sp", sp),
        ("kl", kl),
    ] {
        if !v.is_finite() {
            return Err(GaeError::TrainAbort(format!(
                "non-finite {name} loss at step {step}: {v}"
            )));
        }
    }
    let mut total = ((&parts.rec * weights.lambda_rec)?
        + (&parts.lpips * weights.lambda_lpips)?)?;
    if let Some(g) = &parts.gan_g {
        total = (total + (g * effective_gan_weight)?)?;
    }
    if let Some(s) = &parts.sp {
        total = (total + (s * weights.lambda_sp)?)?;
    }
    if let Some((k, w)) = &parts.kl {
        total = (total + (k * *w)?)?;
    }
    // The logged total is recombined from the logged parts in f64 so the
    // bundle invariant is independent of the training dtype's summation
    // order; it agrees with the backprop tensor to working precision.
    let mut bundle = LossBundle {
        step,
        rec,
        lpips,
        gan_g,
        gan_d: 0.0,
        sp,
        kl,
        kl_weight,
        total: 0.0,
        effective_gan_weight,
    };
    bundle.total = bundle.weighted_sum(weights);
    let tensor_total = scalar_f64(&total)?;
    if (tensor_total - bundle.total).abs() > 1e-3 * bundle.total.abs().max(1.0) {
        return Err(GaeError::TrainAbort(format!(
            "loss tensor {tensor_total} drifted from its decomposition {} at step {step}",
            bundle.total
        )));
    }
    Ok((total, bundle))
}

fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Per-element KL divergence of `N(mean, exp(logvar))` to the unit Gaussian,
/// averaged over all elements: `0.5 * (mean² + exp(logvar) - 1 - logvar)`.
pub fn kl_divergence(mean: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    if mean.dims() != logvar.dims() {
        return Err(GaeError::shape("kl mean/logvar shape mismatch"));
    }
    // Group the non-mean terms so logvar = 0 contributes exactly zero and
    // the per-element value reduces to m²/2 without cancellation error.
    let extra = ((logvar.exp()? - 1.0)? - logvar)?;
    let kl = (mean.sqr()? + extra)?;
    Ok((kl * 0.5)?.mean_all()?)
}

/// Reparameterized Gaussian sample `mean + exp(0.5·logvar) ⊙ ε`.
pub fn reparameterize(mean: &Tensor, logvar: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let eps = rng::randn(rng, mean.dims(), mean.dtype(), mean.device())?;
    let std = (logvar * 0.5)?.exp()?;
    Ok((mean + (std * eps)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{randn, stream_rng};
    use candle_core::Device;

    fn dev() -> Device {
        Device::Cpu
    }

    #[test]
    fn l1_basics() {
        let d = dev();
        let mut r = stream_rng(1, Stream::ModelInit);
        let x = randn(&mut r, &[2, 3, 8, 8], DType::F32, &d).unwrap();
        let same = recon_l1(&x, &x).unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(same, 0.0);
        let shifted = (&x + 0.5).unwrap();
        let off = recon_l1(&shifted, &x).unwrap().to_scalar::<f32>().unwrap();
        assert!((off - 0.5).abs() < 1e-6);
        let ab = recon_l1(&shifted, &x).unwrap().to_scalar::<f32>().unwrap();
        let ba = recon_l1(&x, &shifted).unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn perceptual_zero_iff_identical_and_symmetric() {
        let d = dev();
        let net = PerceptualNet::new(3, &[8, 16], DType::F32, &d).unwrap();
        let mut r = stream_rng(2, Stream::ModelInit);
        let x = randn(&mut r, &[1, 3, 16, 16], DType::F32, &d).unwrap();
        let same = net.distance(&x, &x).unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(same, 0.0);
        let y = randn(&mut r, &[1, 3, 16, 16], DType::F32, &d).unwrap();
        let xy = net.distance(&x, &y).unwrap().to_scalar::<f32>().unwrap();
        let yx = net.distance(&y, &x).unwrap().to_scalar::<f32>().unwrap();
        assert!((xy - yx).abs() < 1e-7);
        assert!(xy > 0.0);
        let neg = net.distance(&x.neg().unwrap(), &x).unwrap().to_scalar::<f32>().unwrap();
        assert!(neg > 0.0, "f(-x) should differ from f(x)");
    }

    #[test]
    fn hinge_losses_for_zeroed_critic() {
        let d = dev();
        let disc = PatchDiscriminator::new(4, 8, DType::F32, &d).unwrap();
        // Zero every parameter so D ≡ 0.
        for (_, var) in disc.store().named_vars() {
            var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
        }
        let mut r = stream_rng(5, Stream::ModelInit);
        let x = randn(&mut r, &[2, 3, 16, 16], DType::F32, &d).unwrap();
        let y = randn(&mut r, &[2, 3, 16, 16], DType::F32, &d).unwrap();
        let (g, dl) = gan_losses(&disc, &y, &x).unwrap();
        assert_eq!(g.to_scalar::<f32>().unwrap(), 0.0);
        assert!((dl.to_scalar::<f32>().unwrap() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn generator_step_never_touches_critic_params() {
        let d = dev();
        let disc = PatchDiscriminator::new(6, 8, DType::F32, &d).unwrap();
        let mut r = stream_rng(7, Stream::ModelInit);
        let x = randn(&mut r, &[1, 3, 16, 16], DType::F32, &d).unwrap();
        let x_hat_var = candle_core::Var::from_tensor(
            &randn(&mut r, &[1, 3, 16, 16], DType::F32, &d).unwrap(),
        )
        .unwrap();
        let (g_loss, d_loss) = gan_losses(&disc, x_hat_var.as_tensor(), &x).unwrap();

        let g_grads = g_loss.backward().unwrap();
        for (_, var) in disc.store().named_vars() {
            assert!(g_grads.get(var.as_tensor()).is_none(), "leaked into critic");
        }
        assert!(g_grads.get(x_hat_var.as_tensor()).is_some(), "no grad to generator output");

        let d_grads = d_loss.backward().unwrap();
        assert!(d_grads.get(x_hat_var.as_tensor()).is_none(), "leaked into generator");
        let mut any = false;
        for (_, var) in disc.store().named_vars() {
            any |= d_grads.get(var.as_tensor()).is_some();
        }
        assert!(any, "critic got no gradient");
    }

    #[test]
    fn warmup_ramp() {
        let lam = 0.5;
        assert_eq!(gan_weight_at(0, 100, lam, 0.2), 0.0);
        assert!((gan_weight_at(10, 100, lam, 0.2) - 0.25).abs() < 1e-12);
        assert_eq!(gan_weight_at(20, 100, lam, 0.2), lam);
        assert_eq!(gan_weight_at(90, 100, lam, 0.2), lam);
    }

    #[test]
    fn total_matches_weighted_sum() {
        let d = dev();
        let w = LossWeights::default();
        let one = Tensor::ones((), DType::F32, &d).unwrap();
        let parts = LossParts {
            rec: one.clone(),
            lpips: one.clone(),
            gan_g: Some(one.clone()),
            sp: Some(one.clone()),
            kl: None,
        };
        let (total, bundle) = total_loss(&w, &parts, 0, w.lambda_gan).unwrap();
        assert!((total.to_scalar::<f32>().unwrap() - 3.5).abs() < 1e-6);
        bundle.check(&w).unwrap();
    }

    #[test]
    fn non_finite_part_aborts() {
        let d = dev();
        let w = LossWeights::default();
        let nan = (Tensor::zeros((), DType::F32, &d).unwrap() / 0.0).unwrap();
        let parts = LossParts {
            rec: nan,
            lpips: Tensor::zeros((), DType::F32, &d).unwrap(),
            gan_g: None,
            sp: None,
            kl: None,
        };
        match total_loss(&w, &parts, 3, 0.0) {
            Err(GaeError::TrainAbort(_)) => {}
            other => panic!("expected TrainAbort, got {other:?}"),
        }
    }

    #[test]
    fn kl_closed_forms() {
        let d = dev();
        let zeros = Tensor::zeros((2, 3), DType::F64, &d).unwrap();
        let matched = kl_divergence(&zeros, &zeros).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(matched, 0.0);
        let m = (Tensor::ones((2, 3), DType::F64, &d).unwrap() * 0.8).unwrap();
        let kl = kl_divergence(&m, &zeros).unwrap().to_scalar::<f64>().unwrap();
        assert!((kl - 0.8 * 0.8 / 2.0).abs() < 1e-12, "kl {kl}");
    }

    #[test]
    fn reparameterization_statistics() {
        let d = dev();
        let mean = (Tensor::ones((1, 64), DType::F64, &d).unwrap() * 2.0).unwrap();
        let logvar = Tensor::zeros((1, 64), DType::F64, &d).unwrap();
        let mut r = stream_rng(9, Stream::LatentNoise);
        let mut sum = 0.0;
        let n = 2000;
        for _ in 0..n {
            let z = reparameterize(&mean, &logvar, &mut r).unwrap();
            sum += z.mean_all().unwrap().to_scalar::<f64>().unwrap();
        }
        let avg = sum / n as f64;
        assert!((avg - 2.0).abs() < 0.05, "sample mean {avg}");
    }
}
