//! Evaluation harness: linear probes on latents, reconstruction metrics
//! (PSNR, SSIM), Fréchet distance between feature distributions, and the
//! noise-robustness probe. Everything here is read-only with respect to
//! model parameters.

use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;

use crate::autoencoder::Autoencoder;
use crate::data::{Dataset, ImageBatch};
use crate::error::{GaeError, Result};
use crate::losses::PerceptualNet;
use crate::rng::{self, Stream};
use crate::teacher::FrozenTeacher;

/// Which pooling the probe applies to `[B, N, D]` tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    Flatten,
    Gap,
}

/// Multinomial logistic-regression probe settings. Plain SGD, constant
/// learning rate, no weight decay.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.008,
            batch_size: 2048,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ProbeResult {
    /// Test accuracy in [0, 1].
    pub accuracy: f64,
    /// Train accuracy in [0, 1].
    pub train_accuracy: f64,
    pub classes: usize,
    pub feature_dim: usize,
}

/// Convert `[B, N, D]` tokens to a probe feature matrix.
pub fn feature_matrix(tokens: &Tensor, mode: ProbeMode) -> Result<DMatrix<f64>> {
    let (b, n, d) = tokens.dims3()?;
    let pooled = match mode {
        ProbeMode::Flatten => tokens.reshape((b, n * d))?,
        ProbeMode::Gap => tokens.mean(1)?,
    };
    let cols = pooled.dim(1)?;
    let flat = pooled.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(DMatrix::from_row_iterator(b, cols, flat))
}

fn softmax_rows(logits: &mut DMatrix<f64>) {
    for mut row in logits.row_iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

fn probe_accuracy(x: &DMatrix<f64>, labels: &[u32], w: &DMatrix<f64>, bias: &DVector<f64>) -> f64 {
    let logits = x * w;
    let mut hits = 0usize;
    for (i, label) in labels.iter().enumerate() {
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for c in 0..w.ncols() {
            let v = logits[(i, c)] + bias[c];
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        if best == *label as usize {
            hits += 1;
        }
    }
    hits as f64 / labels.len().max(1) as f64
}

/// Fit a linear classifier on `train` and report accuracy on `test`.
/// Runs entirely in f64. Model parameters are not involved: this consumes
/// already-extracted features.
pub fn linear_probe(
    train: (&DMatrix<f64>, &[u32]),
    test: (&DMatrix<f64>, &[u32]),
    class_count: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let (x, y) = train;
    if x.nrows() != y.len() || test.0.nrows() != test.1.len() {
        return Err(GaeError::shape("probe features and labels disagree"));
    }
    if class_count < 2 {
        return Err(GaeError::config("probe needs at least two classes"));
    }
    if let Some(bad) = y.iter().chain(test.1.iter()).find(|l| **l as usize >= class_count) {
        return Err(GaeError::config(format!(
            "label {bad} out of range for {class_count} classes"
        )));
    }
    let f = x.ncols();
    let mut w = DMatrix::<f64>::zeros(f, class_count);
    let mut bias = DVector::<f64>::zeros(class_count);
    let n = x.nrows();
    let bsz = cfg.batch_size.min(n).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        let mut r = rng::substream_rng(cfg.seed, Stream::Probe, epoch as u64);
        order.shuffle(&mut r);
        for chunk in order.chunks(bsz) {
            let xb = DMatrix::from_fn(chunk.len(), f, |i, j| x[(chunk[i], j)]);
            let mut p = &xb * &w;
            for (i, mut row) in p.row_iter_mut().enumerate() {
                let _ = i;
                row += bias.transpose();
            }
            softmax_rows(&mut p);
            for (i, idx) in chunk.iter().enumerate() {
                p[(i, y[*idx] as usize)] -= 1.0;
            }
            let scale = 1.0 / chunk.len() as f64;
            let grad_w = xb.transpose() * &p * scale;
            w -= cfg.lr * grad_w;
            for c in 0..class_count {
                let g: f64 = p.column(c).sum() * scale;
                bias[c] -= cfg.lr * g;
            }
        }
    }
    Ok(ProbeResult {
        accuracy: probe_accuracy(test.0, test.1, &w, &bias),
        train_accuracy: probe_accuracy(x, y, &w, &bias),
        classes: class_count,
        feature_dim: f,
    })
}

/// Peak signal-to-noise ratio in dB. Inputs are `[-1, 1]` images; the metric
/// is computed after rescaling to `[0, 1]` and clamping. Identical images
/// report the 99 dB cap.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(GaeError::shape("psnr inputs must share a shape"));
    }
    let a01 = ((a + 1.0)? / 2.0)?.clamp(0.0, 1.0)?;
    let b01 = ((b + 1.0)? / 2.0)?.clamp(0.0, 1.0)?;
    let mse = (a01 - b01)?
        .sqr()?
        .to_dtype(DType::F64)?
        .mean_all()?
        .to_scalar::<f64>()?;
    if mse <= 1e-12 {
        return Ok(99.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(99.0))
}

fn gaussian_window(size: usize, sigma: f64, channels: usize, dev: &Device) -> Result<Tensor> {
    let half = (size as f64 - 1.0) / 2.0;
    let mut vals = Vec::with_capacity(size * size);
    let mut sum = 0.0;
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - half;
            let dx = x as f64 - half;
            let v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            vals.push(v);
            sum += v;
        }
    }
    for v in vals.iter_mut() {
        *v /= sum;
    }
    let one = Tensor::from_vec(vals, (1, 1, size, size), dev)?.to_dtype(DType::F64)?;
    // Depthwise kernel: [channels, 1, k, k].
    Tensor::cat(&vec![&one; channels], 0).map_err(Into::into)
}

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// k1 = 0.01, k2 = 0.03 on the `[0, 1]` dynamic range. Inputs are `[-1, 1]`
/// images of shape `[B, C, H, W]`.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(GaeError::shape("ssim inputs must share a shape"));
    }
    let (_, c, h, w) = a.dims4()?;
    let size = 11usize;
    if h < size || w < size {
        return Err(GaeError::shape(format!(
            "ssim needs images of at least {size}x{size}, got {h}x{w}"
        )));
    }
    let dev = a.device().clone();
    let a01 = ((a + 1.0)? / 2.0)?.clamp(0.0, 1.0)?.to_dtype(DType::F64)?;
    let b01 = ((b + 1.0)? / 2.0)?.clamp(0.0, 1.0)?.to_dtype(DType::F64)?;
    let win = gaussian_window(size, 1.5, c, &dev)?;
    let conv = |x: &Tensor| -> Result<Tensor> {
        x.conv2d(&win, 0, 1, 1, c).map_err(Into::into)
    };
    let mu_a = conv(&a01)?;
    let mu_b = conv(&b01)?;
    let mu_a2 = mu_a.sqr()?;
    let mu_b2 = mu_b.sqr()?;
    let mu_ab = (&mu_a * &mu_b)?;
    let var_a = (conv(&a01.sqr()?)? - &mu_a2)?;
    let var_b = (conv(&b01.sqr()?)? - &mu_b2)?;
    let cov = (conv(&(&a01 * &b01)?)? - &mu_ab)?;
    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;
    let num = (((mu_ab * 2.0)? + c1)? * ((cov * 2.0)? + c2)?)?;
    let den = (((mu_a2 + mu_b2)? + c1)? * ((var_a + var_b)? + c2)?)?;
    let map = (num / den)?;
    Ok(map.mean_all()?.to_scalar::<f64>()?)
}

fn mean_and_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let d = x.ncols();
    let mut mean = DVector::<f64>::zeros(d);
    for i in 0..n {
        for j in 0..d {
            mean[j] += x[(i, j)];
        }
    }
    mean /= n as f64;
    let mut centered = x.clone();
    for i in 0..n {
        for j in 0..d {
            centered[(i, j)] -= mean[j];
        }
    }
    let denom = (n.max(2) - 1) as f64;
    let cov = centered.transpose() * centered / denom;
    (mean, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let sym = (m + m.transpose()) / 2.0;
    let eig = SymmetricEigen::new(sym);
    let mut min_ev = f64::INFINITY;
    let mut d = DMatrix::<f64>::zeros(m.nrows(), m.ncols());
    for (i, ev) in eig.eigenvalues.iter().enumerate() {
        min_ev = min_ev.min(*ev);
        d[(i, i)] = ev.max(0.0).sqrt();
    }
    (&eig.eigenvectors * d * eig.eigenvectors.transpose(), min_ev)
}

fn frechet_once(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> (f64, f64) {
    let diff = mu_a - mu_b;
    let mean_term = diff.dot(&diff);
    let (sqrt_a, _) = sym_sqrt(cov_a);
    let inner = &sqrt_a * cov_b * &sqrt_a;
    let sym = (&inner + inner.transpose()) / 2.0;
    let eig = SymmetricEigen::new(sym);
    let scale = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(0.0f64, |a, b| a.max(b.abs()))
        .max(1.0);
    let min_ev = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|ev| ev.max(0.0).sqrt()).sum();
    let fd = mean_term + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    (fd, min_ev / scale)
}

/// Fréchet distance between two Gaussian fits,
/// `|mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa Sb)^{1/2})`, computed through the
/// symmetric form `(Sa^{1/2} Sb Sa^{1/2})^{1/2}`. If the product matrix
/// comes out indefinite beyond tolerance, both covariances are regularized
/// with a small multiple of the identity and the distance is recomputed
/// once (logged).
pub fn frechet_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(GaeError::shape("frechet feature widths differ"));
    }
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(GaeError::config("frechet needs at least two samples per side"));
    }
    let (mu_a, cov_a) = mean_and_cov(a);
    let (mu_b, cov_b) = mean_and_cov(b);
    let (fd, rel_min_ev) = frechet_once(&mu_a, &cov_a, &mu_b, &cov_b);
    if rel_min_ev < -1e-8 || !fd.is_finite() {
        let d = cov_a.nrows();
        let eps = 1e-6 * (cov_a.trace() + cov_b.trace()).max(1e-12) / (2.0 * d as f64);
        log::warn!(
            "frechet product matrix indefinite (relative min eigenvalue {rel_min_ev:.3e}); retrying with eps {eps:.3e}"
        );
        let reg = DMatrix::<f64>::identity(d, d) * eps;
        let (fd2, _) = frechet_once(&mu_a, &(cov_a + &reg), &mu_b, &(cov_b + reg.clone()));
        return Ok(fd2.max(0.0));
    }
    Ok(fd.max(0.0))
}

/// Row-major `[B, D]` tensor to a feature matrix.
pub fn embedding_matrix(t: &Tensor) -> Result<DMatrix<f64>> {
    let (b, d) = t.dims2()?;
    let flat = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(DMatrix::from_row_iterator(b, d, flat))
}

/// One point of the noise-robustness sweep.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct NoisePoint {
    pub sigma: f64,
    pub l1: f64,
    pub psnr: f64,
    /// Fréchet distance of decoded-vs-real teacher embeddings, present when
    /// the sweep ran with a feature extractor.
    #[serde(default)]
    pub fd_small: Option<f64>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct NoiseRobustnessReport {
    pub points: Vec<NoisePoint>,
}

impl NoiseRobustnessReport {
    /// `(L1(sigma) - L1(0)) / L1(0)` for the grid point closest to `sigma`.
    pub fn relative_degradation(&self, sigma: f64) -> Option<f64> {
        let base = self.points.iter().find(|p| p.sigma == 0.0)?.l1;
        if base <= 0.0 {
            return None;
        }
        let point = self
            .points
            .iter()
            .min_by(|x, y| (x.sigma - sigma).abs().total_cmp(&(y.sigma - sigma).abs()))?;
        Some((point.l1 - base) / base)
    }

    /// The L1 curve must be non-decreasing in sigma, up to a relative slack
    /// between adjacent grid points.
    pub fn check_l1_monotone(&self, slack: f64) -> bool {
        self.points
            .windows(2)
            .all(|w| w[1].l1 >= w[0].l1 * (1.0 - slack))
    }
}

/// Decode `mu + sigma * eps` over a grid of injected noise scales and
/// measure reconstruction error against the clean pixels. The same epsilon
/// draw is reused across the grid so points differ only in scale. With a
/// feature extractor, each point also records the Fréchet distance between
/// decoded and real embeddings.
pub fn noise_robustness(
    ae: &Autoencoder,
    batches: &[ImageBatch],
    sigmas: &[f64],
    seed: u64,
    teacher: Option<&FrozenTeacher>,
) -> Result<NoiseRobustnessReport> {
    if batches.is_empty() || sigmas.is_empty() {
        return Err(GaeError::config("noise probe needs batches and a sigma grid"));
    }
    if sigmas.windows(2).any(|w| w[1] <= w[0]) || sigmas[0] < 0.0 {
        return Err(GaeError::config(
            "sigma grid must be non-negative and strictly increasing",
        ));
    }
    let real_embeds = match teacher {
        Some(t) => {
            let per: Vec<Tensor> =
                batches.iter().map(|b| t.embed(&b.pixels)).collect::<Result<_>>()?;
            Some(embedding_matrix(&Tensor::cat(&per, 0)?)?)
        }
        None => None,
    };
    let mut points = Vec::with_capacity(sigmas.len());
    for sigma in sigmas {
        let mut l1_sum = 0.0;
        let mut psnr_sum = 0.0;
        let mut recon_embeds = Vec::new();
        for (bi, batch) in batches.iter().enumerate() {
            let mu = ae.encode_mean(&batch.pixels)?;
            let mut r = rng::substream_rng(seed, Stream::Probe, (bi as u64) << 8);
            let eps = rng::randn(&mut r, mu.values.dims(), mu.values.dtype(), mu.values.device())?;
            let z = (&mu.values + (eps * *sigma)?)?;
            let recon = ae.decode(&z)?;
            let l1 = (recon.clone() - &batch.pixels)?
                .abs()?
                .to_dtype(DType::F64)?
                .mean_all()?
                .to_scalar::<f64>()?;
            l1_sum += l1;
            psnr_sum += psnr(&recon, &batch.pixels)?;
            if let Some(t) = teacher {
                recon_embeds.push(t.embed(&recon)?);
            }
        }
        let fd_small = match &real_embeds {
            Some(real) => {
                let recon = embedding_matrix(&Tensor::cat(&recon_embeds, 0)?)?;
                Some(frechet_distance(&recon, real)?)
            }
            None => None,
        };
        let n = batches.len() as f64;
        points.push(NoisePoint {
            sigma: *sigma,
            l1: l1_sum / n,
            psnr: psnr_sum / n,
            fd_small,
        });
    }
    Ok(NoiseRobustnessReport { points })
}

/// Full evaluation record for a trained autoencoder.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ProbeReport {
    /// Linear-probe accuracy on flattened latents, in [0, 1].
    pub lp_flatten: f64,
    /// Linear-probe accuracy on token-averaged latents, in [0, 1].
    pub lp_gap: f64,
    /// Reconstruction PSNR in dB.
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
    /// Fréchet distance between teacher embeddings of reconstructions and
    /// real validation images.
    pub fd_small: f64,
    pub robustness: NoiseRobustnessReport,
}

impl ProbeReport {
    pub fn validate(&self) -> Result<()> {
        let sig: Vec<f64> = self.robustness.points.iter().map(|p| p.sigma).collect();
        if sig.windows(2).any(|w| w[1] <= w[0]) {
            return Err(GaeError::config(
                "robustness sigmas must be strictly increasing",
            ));
        }
        for v in [self.lp_flatten, self.lp_gap] {
            if !(0.0..=1.0).contains(&v) {
                return Err(GaeError::config("probe accuracies must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Evaluation settings shared by the report assembly and the noise probe.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub probe: ProbeConfig,
    pub batch_size: usize,
    pub sigmas: Vec<f64>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe: ProbeConfig::default(),
            batch_size: 64,
            sigmas: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            seed: 0,
        }
    }
}

fn index_chunks(n: usize, batch: usize) -> Vec<Vec<usize>> {
    (0..n)
        .collect::<Vec<_>>()
        .chunks(batch.max(1))
        .map(|c| c.to_vec())
        .collect()
}

pub fn dataset_batches(data: &Dataset, batch: usize, device: &Device) -> Result<Vec<ImageBatch>> {
    index_chunks(data.len(), batch)
        .iter()
        .map(|c| data.batch(c, device))
        .collect()
}

pub fn mean_latents(ae: &Autoencoder, batches: &[ImageBatch]) -> Result<Tensor> {
    let per: Vec<Tensor> = batches
        .iter()
        .map(|b| Ok(ae.encode_mean(&b.pixels)?.values))
        .collect::<Result<_>>()?;
    Ok(Tensor::cat(&per, 0)?)
}

pub fn batch_labels(batches: &[ImageBatch]) -> Vec<u32> {
    batches.iter().flat_map(|b| b.labels.clone()).collect()
}

/// Assemble the full report: linear probes (flatten and GAP) trained on the
/// train split and scored on the validation split, reconstruction metrics,
/// Fréchet distance over teacher embeddings, and the noise-robustness
/// sweep. Model parameters are never updated.
pub fn evaluate(
    ae: &Autoencoder,
    teacher: &FrozenTeacher,
    perceptual: &PerceptualNet,
    train_data: &Dataset,
    val_data: &Dataset,
    cfg: &EvalConfig,
    device: &Device,
) -> Result<ProbeReport> {
    if train_data.class_count() != val_data.class_count() {
        return Err(GaeError::config("train/val class counts differ"));
    }
    let train_batches = dataset_batches(train_data, cfg.batch_size, device)?;
    let val_batches = dataset_batches(val_data, cfg.batch_size, device)?;

    let train_latents = mean_latents(ae, &train_batches)?;
    let val_latents = mean_latents(ae, &val_batches)?;
    let train_labels = batch_labels(&train_batches);
    let val_labels = batch_labels(&val_batches);
    let classes = train_data.class_count();

    let probe = |mode: ProbeMode| -> Result<f64> {
        let tr = feature_matrix(&train_latents, mode)?;
        let va = feature_matrix(&val_latents, mode)?;
        Ok(linear_probe((&tr, &train_labels), (&va, &val_labels), classes, &cfg.probe)?.accuracy)
    };
    let lp_flatten = probe(ProbeMode::Flatten)?;
    let lp_gap = probe(ProbeMode::Gap)?;

    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    let mut lpips_sum = 0.0;
    let mut real_embeds = Vec::new();
    let mut recon_embeds = Vec::new();
    for batch in &val_batches {
        let recon = ae.reconstruct(&batch.pixels)?;
        psnr_sum += psnr(&recon, &batch.pixels)?;
        ssim_sum += ssim(&recon, &batch.pixels)?;
        lpips_sum += perceptual
            .distance(&recon, &batch.pixels)?
            .to_dtype(DType::F64)?
            .to_scalar::<f64>()?;
        real_embeds.push(teacher.embed(&batch.pixels)?);
        recon_embeds.push(teacher.embed(&recon)?);
    }
    let n = val_batches.len() as f64;
    let fd_small = frechet_distance(
        &embedding_matrix(&Tensor::cat(&recon_embeds, 0)?)?,
        &embedding_matrix(&Tensor::cat(&real_embeds, 0)?)?,
    )?;

    let robustness = noise_robustness(ae, &val_batches, &cfg.sigmas, cfg.seed, None)?;
    let report = ProbeReport {
        lp_flatten,
        lp_gap,
        psnr: psnr_sum / n,
        ssim: ssim_sum / n,
        perceptual: lpips_sum / n,
        fd_small,
        robustness,
    };
    report.validate()?;
    Ok(report)
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
    fn psnr_identical_hits_cap() {
        let d = dev();
        let x = randn(&mut stream_rng(1, Stream::Probe), &[1, 3, 16, 16], DType::F32, &d)
            .unwrap()
            .clamp(-1.0, 1.0)
            .unwrap();
        assert_eq!(psnr(&x, &x).unwrap(), 99.0);
    }

    #[test]
    fn psnr_tenth_offset_is_twenty_db() {
        let d = dev();
        let a = Tensor::zeros((1, 3, 8, 8), DType::F64, &d).unwrap();
        // 0.2 apart in [-1, 1] is 0.1 apart in [0, 1].
        let b = (&a + 0.2).unwrap();
        let v = psnr(&a, &b).unwrap();
        assert!((v - 20.0).abs() < 1e-9, "psnr {v}");
    }

    #[test]
    fn ssim_self_is_one() {
        let d = dev();
        let x = randn(&mut stream_rng(2, Stream::Probe), &[1, 3, 16, 16], DType::F32, &d)
            .unwrap()
            .clamp(-1.0, 1.0)
            .unwrap();
        let v = ssim(&x, &x).unwrap();
        assert!((v - 1.0).abs() < 1e-9, "ssim {v}");
    }

    #[test]
    fn ssim_decreases_with_noise() {
        let d = dev();
        let x = randn(&mut stream_rng(3, Stream::Probe), &[1, 3, 16, 16], DType::F32, &d)
            .unwrap()
            .clamp(-0.8, 0.8)
            .unwrap();
        let noise = randn(&mut stream_rng(4, Stream::Probe), &[1, 3, 16, 16], DType::F32, &d).unwrap();
        let y = (&x + (noise * 0.3).unwrap()).unwrap();
        let v = ssim(&x, &y).unwrap();
        assert!(v < 0.999 && v > -1.0);
    }

    #[test]
    fn frechet_self_is_zero() {
        let mut r = stream_rng(5, Stream::Probe);
        let n = 200;
        let d = 6;
        let data = DMatrix::from_fn(n, d, |_, _| {
            use rand_distr::Distribution;
            <rand_distr::StandardNormal as Distribution<f64>>::sample(&rand_distr::StandardNormal, &mut r)
        });
        let fd = frechet_distance(&data, &data).unwrap();
        assert!(fd.abs() < 1e-6, "fd(a,a) = {fd}");
    }

    #[test]
    fn frechet_detects_mean_shift() {
        let mut r = stream_rng(6, Stream::Probe);
        let n = 500;
        let d = 4;
        let sample = |r: &mut rand_chacha::ChaCha8Rng, shift: f64| {
            DMatrix::from_fn(n, d, |_, _| {
                use rand_distr::Distribution;
                shift
                    + <rand_distr::StandardNormal as Distribution<f64>>::sample(
                        &rand_distr::StandardNormal,
                        r,
                    )
            })
        };
        let a = sample(&mut r, 0.0);
        let b = sample(&mut r, 1.0);
        let fd = frechet_distance(&a, &b).unwrap();
        // True value is d * shift^2 = 4 plus sampling error.
        assert!(fd > 2.0, "fd {fd}");
    }

    #[test]
    fn frechet_scales_with_shift() {
        let mut r = stream_rng(7, Stream::Probe);
        let n = 400;
        let d = 3;
        let base = DMatrix::from_fn(n, d, |_, _| {
            use rand_distr::Distribution;
            <rand_distr::StandardNormal as Distribution<f64>>::sample(&rand_distr::StandardNormal, &mut r)
        });
        let shift_by = |m: &DMatrix<f64>, s: f64| m.map(|v| v + s);
        let near = frechet_distance(&base, &shift_by(&base, 0.5)).unwrap();
        let far = frechet_distance(&base, &shift_by(&base, 2.0)).unwrap();
        assert!(far > near, "far {far} near {near}");
        // Pure translation of identical samples: FD = d * s^2 exactly.
        assert!((near - d as f64 * 0.25).abs() < 1e-6);
    }

    #[test]
    fn probe_learns_linearly_separable_data() {
        let n = 300;
        let f = 8;
        let mut r = stream_rng(8, Stream::Probe);
        use rand::Rng;
        use rand_distr::Distribution;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..n {
            let label = r.random_range(0..3u32);
            let mut row = vec![0.0f64; f];
            for (j, item) in row.iter_mut().enumerate() {
                let noise: f64 = <rand_distr::StandardNormal as Distribution<f64>>::sample(
                    &rand_distr::StandardNormal,
                    &mut r,
                );
                *item = 0.3 * noise + if j == label as usize { 2.0 } else { 0.0 };
            }
            xs.push(row);
            ys.push(label);
        }
        let x = DMatrix::from_fn(n, f, |i, j| xs[i][j]);
        let split = 240;
        let xtr = x.rows(0, split).into_owned();
        let xte = x.rows(split, n - split).into_owned();
        let cfg = ProbeConfig {
            epochs: 40,
            batch_size: 64,
            ..Default::default()
        };
        let res = linear_probe((&xtr, &ys[..split]), (&xte, &ys[split..]), 3, &cfg).unwrap();
        assert!(res.accuracy > 0.95, "probe accuracy {}", res.accuracy);
    }

    #[test]
    fn probe_rejects_bad_labels() {
        let x = DMatrix::<f64>::zeros(4, 2);
        let y = vec![0u32, 1, 2, 5];
        let err = linear_probe((&x, &y), (&x, &y), 3, &ProbeConfig::default());
        assert!(err.is_err());
    }

    #[test]
    fn feature_matrix_modes() {
        let d = dev();
        let t = Tensor::from_vec(
            (0..24).map(|v| v as f32).collect::<Vec<_>>(),
            (2, 3, 4),
            &d,
        )
        .unwrap();
        let flat = feature_matrix(&t, ProbeMode::Flatten).unwrap();
        assert_eq!((flat.nrows(), flat.ncols()), (2, 12));
        assert_eq!(flat[(0, 0)], 0.0);
        assert_eq!(flat[(1, 11)], 23.0);
        let gap = feature_matrix(&t, ProbeMode::Gap).unwrap();
        assert_eq!((gap.nrows(), gap.ncols()), (2, 4));
        // Token mean of [0,4,8] is 4.
        assert_eq!(gap[(0, 0)], 4.0);
    }

    #[test]
    fn probe_on_random_labels_sits_at_chance() {
        let classes = 4usize;
        let n = 400;
        let f = 6;
        let mut r = stream_rng(31, Stream::Probe);
        use rand::Rng;
        use rand_distr::Distribution;
        let x = DMatrix::from_fn(n, f, |_, _| {
            <rand_distr::StandardNormal as Distribution<f64>>::sample(
                &rand_distr::StandardNormal,
                &mut r,
            )
        });
        let y: Vec<u32> = (0..n).map(|_| r.random_range(0..classes as u32)).collect();
        let split = 200;
        let cfg = ProbeConfig {
            epochs: 30,
            batch_size: 64,
            ..Default::default()
        };
        let res = linear_probe(
            (&x.rows(0, split).into_owned(), &y[..split]),
            (&x.rows(split, n - split).into_owned(), &y[split..]),
            classes,
            &cfg,
        )
        .unwrap();
        // Chance is 0.25; allow 3 standard errors of a binomial draw.
        let se = (0.25 * 0.75 / (n - split) as f64).sqrt();
        assert!(
            (res.accuracy - 0.25).abs() < 3.0 * se + 0.05,
            "accuracy {} should sit at chance",
            res.accuracy
        );
    }

    #[test]
    fn gap_equals_flatten_on_constant_tokens() {
        let d = dev();
        // Features constant across tokens: GAP equals any single token, so
        // GAP probing must match flatten probing on the per-token vector.
        let n = 120;
        let feat = 3;
        let mut r = stream_rng(32, Stream::Probe);
        let one = randn(&mut r, &[n, 1, feat], DType::F64, &d).unwrap();
        let labels: Vec<u32> = (0..n).map(|i| (i % 3) as u32).collect();
        let bias = Tensor::from_vec(
            labels.iter().map(|&l| l as f64).collect::<Vec<_>>(),
            (n, 1, 1),
            &d,
        )
        .unwrap();
        let one = one.broadcast_add(&bias).unwrap();
        let tokens = Tensor::cat(&[&one, &one, &one, &one], 1).unwrap();
        let gap = feature_matrix(&tokens, ProbeMode::Gap).unwrap();
        let single = feature_matrix(&one, ProbeMode::Flatten).unwrap();
        assert!((gap.clone() - single).abs().max() < 1e-12);
        // Permuting token order leaves GAP features unchanged.
        let perm = Tensor::cat(
            &[
                tokens.narrow(1, 2, 2).unwrap(),
                tokens.narrow(1, 0, 2).unwrap(),
            ],
            1,
        )
        .unwrap();
        let gap_perm = feature_matrix(&perm, ProbeMode::Gap).unwrap();
        assert!((gap - gap_perm).abs().max() < 1e-12);
    }

    #[test]
    fn frechet_symmetric_and_rotation_invariant() {
        let mut r = stream_rng(33, Stream::Probe);
        use rand_distr::Distribution;
        let mut draw = |n: usize, d: usize, off: f64| {
            DMatrix::from_fn(n, d, |_, j| {
                let v: f64 = <rand_distr::StandardNormal as Distribution<f64>>::sample(
                    &rand_distr::StandardNormal,
                    &mut r,
                );
                v + off * j as f64
            })
        };
        let a = draw(200, 3, 0.0);
        let b = draw(200, 3, 0.4);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-6, "FD not symmetric: {ab} vs {ba}");
        // Householder reflection: an exactly orthogonal transform.
        let v = DVector::from_vec(vec![1.0, 2.0, -1.5]).normalize();
        let q = DMatrix::identity(3, 3) - 2.0 * &v * v.transpose();
        let aq = &a * &q;
        let bq = &b * &q;
        let rot = frechet_distance(&aq, &bq).unwrap();
        assert!(
            (ab - rot).abs() < 1e-4 * ab.max(1.0),
            "FD changed under rotation: {ab} vs {rot}"
        );
    }

    #[test]
    fn noise_probe_zero_sigma_matches_plain_reconstruction() {
        use crate::autoencoder::{AeConfig, Autoencoder};
        use crate::backbone::BackboneConfig;
        let d = dev();
        let cfg = AeConfig {
            backbone: BackboneConfig {
                hidden_dim: 32,
                layers: 1,
                heads: 2,
                mlp_ratio: 2.0,
                patch: 8,
                qk_norm: false,
            },
            image_size: 16,
            latent_dim: 8,
            head: Default::default(),
            noise: crate::latent::NoiseConfig {
                c_sigma: 0.2,
                granularity: Default::default(),
            },
            kl_weight: 0.1,
        };
        let ae = Autoencoder::new(cfg, 21, DType::F32, &d).unwrap();
        let pixels = randn(&mut stream_rng(22, Stream::Probe), &[4, 3, 16, 16], DType::F32, &d)
            .unwrap()
            .clamp(-1.0, 1.0)
            .unwrap();
        let batch = crate::data::ImageBatch {
            pixels: pixels.clone(),
            labels: vec![0; 4],
            ids: (0..4).map(|i| format!("img{i}")).collect(),
        };
        let report =
            noise_robustness(&ae, &[batch], &[0.0, 0.2], 5, None).unwrap();
        let recon = ae.reconstruct(&pixels).unwrap();
        let plain_l1 = (recon.clone() - &pixels)
            .unwrap()
            .abs()
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
            .mean_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        let p0 = &report.points[0];
        assert!((p0.l1 - plain_l1).abs() < 1e-7, "{} vs {plain_l1}", p0.l1);
        assert!((p0.psnr - psnr(&recon, &pixels).unwrap()).abs() < 1e-9);
        // Strictly increasing grid enforced.
        let bad = noise_robustness(
            &ae,
            &[crate::data::ImageBatch {
                pixels,
                labels: vec![0; 4],
                ids: vec![String::new(); 4],
            }],
            &[0.2, 0.1],
            5,
            None,
        );
        assert!(bad.is_err());
    }
}
