//! Where semantic supervision attaches to the autoencoder: on the encoder's
//! hidden features (pre), on an expansion of the latent (post), or directly
//! on the latent mean against a compressed teacher target (latent, the
//! default). Also hosts the pilot study comparing all three.

use candle_core::{DType, Device, Tensor};
use candle_nn::{Linear, Module};

use crate::autoencoder::{AeConfig, Autoencoder};
use crate::data::Dataset;
use crate::error::{GaeError, Result};
use crate::eval::{self, ProbeConfig, ProbeMode};
use crate::latent::{LatentKind, LatentTensor};
use crate::nn::{self, ParamBuilder, LATENT_RMS_EPS};
use crate::teacher::{self, Downsampler, FrozenTeacher, SvdProjection};
use crate::train::{self, Supervision, TrainAeConfig};

/// Supervision site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentVariant {
    Pre,
    Post,
    #[default]
    Latent,
}

/// Distance used by the pre/post paradigms (the latent paradigm is always
/// mean squared error).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpLossForm {
    #[default]
    Mse,
    Cosine,
}

/// Trainable parameters a paradigm needs beyond the autoencoder itself.
pub struct AlignmentHead {
    pub variant: AlignmentVariant,
    /// Pre only: hidden_dim -> D_t.
    pub adapter: Option<Linear>,
    /// Post only: d -> D_t.
    pub expansion: Option<Linear>,
}

impl AlignmentHead {
    pub fn new(
        pb: &ParamBuilder,
        variant: AlignmentVariant,
        hidden_dim: usize,
        latent_dim: usize,
        teacher_dim: usize,
    ) -> Result<Self> {
        let (adapter, expansion) = match variant {
            AlignmentVariant::Pre => (Some(pb.linear("adapter", hidden_dim, teacher_dim)?), None),
            AlignmentVariant::Post => (None, Some(pb.linear("expansion", latent_dim, teacher_dim)?)),
            AlignmentVariant::Latent => (None, None),
        };
        Ok(Self {
            variant,
            adapter,
            expansion,
        })
    }
}

/// How the `B x N x d` target for the latent paradigm is produced from
/// teacher features.
pub enum LatentTargetSource<'a> {
    /// Trained `E_sp`.
    Downsampler(&'a Downsampler),
    /// Fixed SVD compression (the pilot's choice).
    Svd(&'a SvdProjection),
}

impl LatentTargetSource<'_> {
    /// Compress teacher features to the latent width; the result is detached
    /// so no gradient ever reaches the teacher side.
    pub fn target(
        &self,
        teacher_features: &Tensor,
        grid: (usize, usize),
        normalize: bool,
    ) -> Result<Tensor> {
        let raw = match self {
            LatentTargetSource::Downsampler(ds) => ds.forward(teacher_features, grid)?,
            LatentTargetSource::Svd(svd) => svd.project(teacher_features)?,
        };
        let raw = raw.detach();
        if normalize {
            Ok(nn::rms_normalize(&raw, LATENT_RMS_EPS)?)
        } else {
            Ok(raw)
        }
    }
}

fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(GaeError::shape(format!(
            "sp loss shapes differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok((a - b)?.sqr()?.mean_all()?)
}

fn cosine_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    // Mean over tokens of 1 - cos(a, b), so 0 at perfect alignment.
    Ok((crate::teacher::distill_loss(a, b)? + 1.0)?)
}

fn by_form(form: SpLossForm, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    match form {
        SpLossForm::Mse => mse(a, b),
        SpLossForm::Cosine => cosine_distance(a, b),
    }
}

/// `L_sp`: MSE between the latent mean and the compressed teacher target.
/// The target is detached inside, so gradients stop there.
pub fn sp_loss_latent(mu: &LatentTensor, target: &Tensor) -> Result<Tensor> {
    if mu.kind != LatentKind::Mean {
        return Err(GaeError::shape("sp_loss_latent expects the mean latent"));
    }
    mse(&mu.values, &target.detach())
}

/// Pre-projector supervision: adapted encoder features against raw teacher
/// features. The supervision site is before `A_p`, so this loss can never
/// produce a gradient into the projector.
pub fn sp_loss_pre(
    encoder_features: &Tensor,
    teacher_features: &Tensor,
    adapter: &Linear,
    form: SpLossForm,
) -> Result<Tensor> {
    let adapted = adapter.forward(encoder_features)?;
    by_form(form, &adapted, &teacher_features.detach())
}

/// Post-projector supervision: the latent is expanded back to teacher width
/// and matched against the raw teacher features.
pub fn sp_loss_post(
    mu: &LatentTensor,
    expansion: &Linear,
    teacher_features: &Tensor,
    form: SpLossForm,
) -> Result<Tensor> {
    if mu.kind != LatentKind::Mean {
        return Err(GaeError::shape("sp_loss_post expects the mean latent"));
    }
    let expanded = expansion.forward(&mu.values)?;
    by_form(form, &expanded, &teacher_features.detach())
}

/// One row of the pilot comparison.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PilotRow {
    pub name: String,
    /// Flatten linear-probe accuracy in [0, 1].
    pub lp_flatten: f64,
    pub fd_proxy: Option<f64>,
    pub failed: bool,
    pub note: String,
}

/// Pilot outcome: the three trained paradigms plus the two teacher
/// baselines.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PilotReport {
    pub rows: Vec<PilotRow>,
}

impl PilotReport {
    pub fn row(&self, name: &str) -> Option<&PilotRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Rendered fixed-width comparison table.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<14} {:>10} {:>10} {:>7}\n",
            "variant", "lp_flat", "fd_proxy", "status"
        );
        for r in &self.rows {
            let fd = r
                .fd_proxy
                .map(|v| format!("{v:.3}"))
                .unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "{:<14} {:>9.1}% {:>10} {:>7}\n",
                r.name,
                100.0 * r.lp_flatten,
                fd,
                if r.failed { "FAIL" } else { "ok" }
            ));
        }
        out
    }
}

/// Budget and model settings for the pilot. Every paradigm trains the same
/// architecture for the same number of epochs from the same initialization.
#[derive(Clone)]
pub struct PilotConfig {
    pub ae: AeConfig,
    pub train: TrainAeConfig,
    pub probe: ProbeConfig,
    /// Shared model-init seed; parameter hashes must agree at step 0.
    pub seed: u64,
    /// Cap on teacher token rows used to fit the SVD compression.
    pub svd_token_cap: usize,
    pub eval_batch: usize,
}

fn index_chunks(n: usize, bsz: usize) -> Vec<Vec<usize>> {
    (0..n)
        .collect::<Vec<_>>()
        .chunks(bsz.max(1))
        .map(|c| c.to_vec())
        .collect()
}

/// Teacher tokens for every sample of a split, in index order.
fn collect_teacher_features(
    data: &Dataset,
    teacher: &FrozenTeacher,
    bsz: usize,
    device: &Device,
) -> Result<Tensor> {
    let mut parts = Vec::new();
    for chunk in index_chunks(data.len(), bsz) {
        let batch = data.batch(&chunk, device)?;
        parts.push(teacher.extract(&batch.pixels)?.values);
    }
    Tensor::cat(&parts, 0).map_err(Into::into)
}

fn collect_latents(
    ae: &Autoencoder,
    data: &Dataset,
    bsz: usize,
    device: &Device,
) -> Result<Tensor> {
    let mut parts = Vec::new();
    for chunk in index_chunks(data.len(), bsz) {
        let batch = data.batch(&chunk, device)?;
        parts.push(ae.encode_mean(&batch.pixels)?.values);
    }
    Tensor::cat(&parts, 0).map_err(Into::into)
}

fn flatten_lp(
    train_tokens: &Tensor,
    val_tokens: &Tensor,
    train_labels: &[u32],
    val_labels: &[u32],
    classes: usize,
    probe: &ProbeConfig,
) -> Result<f64> {
    let xtr = eval::feature_matrix(train_tokens, ProbeMode::Flatten)?;
    let xva = eval::feature_matrix(val_tokens, ProbeMode::Flatten)?;
    Ok(eval::linear_probe((&xtr, train_labels), (&xva, val_labels), classes, probe)?.accuracy)
}

/// Fréchet distance between teacher embeddings of validation
/// reconstructions and of the validation images themselves.
fn reconstruction_fd(
    ae: &Autoencoder,
    data: &Dataset,
    teacher: &FrozenTeacher,
    bsz: usize,
    device: &Device,
) -> Result<f64> {
    let mut real = Vec::new();
    let mut fake = Vec::new();
    for chunk in index_chunks(data.len(), bsz) {
        let batch = data.batch(&chunk, device)?;
        real.push(teacher.embed(&batch.pixels)?);
        let recon = ae.reconstruct(&batch.pixels)?;
        fake.push(teacher.embed(&recon)?);
    }
    let real = eval::embedding_matrix(&Tensor::cat(&real, 0)?)?;
    let fake = eval::embedding_matrix(&Tensor::cat(&fake, 0)?)?;
    eval::frechet_distance(&real, &fake)
}

/// Train one autoencoder per paradigm under identical budgets and compare
/// them against linear probes on the teacher's own features (raw and
/// SVD-compressed). A diverging sub-run produces a flagged row instead of
/// failing the whole pilot.
pub fn run_alignment_pilot(
    train_data: &Dataset,
    val_data: &Dataset,
    teacher: &FrozenTeacher,
    cfg: &PilotConfig,
    dtype: DType,
    device: &Device,
) -> Result<PilotReport> {
    let train_labels = train_data.labels();
    let val_labels = val_data.labels();
    let classes = train_data.class_count();
    let latent_dim = cfg.ae.latent_dim;

    let train_feats = collect_teacher_features(train_data, teacher, cfg.eval_batch, device)?;
    let val_feats = collect_teacher_features(val_data, teacher, cfg.eval_batch, device)?;

    let (k, n, dt) = train_feats.dims3()?;
    let total = k * n;
    let rows = total.min(cfg.svd_token_cap.max(latent_dim + 1));
    // Evenly strided rows: the dataset is class-sorted, so a prefix would
    // fit the basis on a fraction of the classes.
    let idx: Vec<u32> = (0..rows).map(|i| (i * total / rows) as u32).collect();
    let idx = Tensor::from_vec(idx, &[rows], train_feats.device())?;
    let fit_rows = train_feats.reshape((total, dt))?.index_select(&idx, 0)?;
    let svd = teacher::fit_svd_projection(&fit_rows, latent_dim)?;

    // Paradigm sub-runs share one initialization per seed.
    let paradigms = [
        AlignmentVariant::Pre,
        AlignmentVariant::Post,
        AlignmentVariant::Latent,
    ];
    let models: Vec<Autoencoder> = paradigms
        .iter()
        .map(|_| Autoencoder::new(cfg.ae.clone(), cfg.seed, dtype, device))
        .collect::<Result<_>>()?;
    let hash0 = models[0].store().content_hash()?;
    for m in &models[1..] {
        if m.store().content_hash()? != hash0 {
            return Err(GaeError::Other(
                "pilot sub-runs drifted apart at initialization".into(),
            ));
        }
    }

    let mut rows_out = Vec::new();
    for (variant, ae) in paradigms.iter().zip(models.iter()) {
        let name = match variant {
            AlignmentVariant::Pre => "pre",
            AlignmentVariant::Post => "post",
            AlignmentVariant::Latent => "latent",
        };
        let train_cfg = TrainAeConfig {
            alignment: *variant,
            ..cfg.train.clone()
        };
        let sup = Supervision {
            teacher,
            latent_target: match variant {
                AlignmentVariant::Latent => Some(LatentTargetSource::Svd(&svd)),
                _ => None,
            },
        };
        match train::train_autoencoder(ae, train_data, Some(sup), train_cfg, dtype, device) {
            Ok(_log) => {
                let ltr = collect_latents(ae, train_data, cfg.eval_batch, device)?;
                let lva = collect_latents(ae, val_data, cfg.eval_batch, device)?;
                let lp = flatten_lp(&ltr, &lva, &train_labels, &val_labels, classes, &cfg.probe)?;
                let fd = reconstruction_fd(ae, val_data, teacher, cfg.eval_batch, device)?;
                rows_out.push(PilotRow {
                    name: name.into(),
                    lp_flatten: lp,
                    fd_proxy: Some(fd),
                    failed: false,
                    note: String::new(),
                });
            }
            Err(GaeError::TrainAbort(msg)) => {
                log::warn!("pilot sub-run {name} diverged: {msg}");
                rows_out.push(PilotRow {
                    name: name.into(),
                    lp_flatten: 0.0,
                    fd_proxy: None,
                    failed: true,
                    note: msg,
                });
            }
            Err(e) => return Err(e),
        }
    }

    let svd_train = svd.project(&train_feats)?;
    let svd_val = svd.project(&val_feats)?;
    rows_out.push(PilotRow {
        name: "svd_teacher".into(),
        lp_flatten: flatten_lp(&svd_train, &svd_val, &train_labels, &val_labels, classes, &cfg.probe)?,
        fd_proxy: None,
        failed: false,
        note: "linear probe on SVD-compressed teacher features".into(),
    });
    rows_out.push(PilotRow {
        name: "full_teacher".into(),
        lp_flatten: flatten_lp(&train_feats, &val_feats, &train_labels, &val_labels, classes, &cfg.probe)?,
        fd_proxy: None,
        failed: false,
        note: "linear probe on raw teacher features".into(),
    });

    Ok(PilotReport { rows: rows_out })
}
