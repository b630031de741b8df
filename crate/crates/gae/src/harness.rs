//! Command orchestration: run directories, CSV logs, JSON reports, plots,
//! and epoch-granular checkpointing with resume for every training stage.
//!
//! A run directory contains exactly: the resolved config snapshot
//! (`config.toml`), `checkpoints/`, `logs/` (CSV), `reports/` (JSON), and
//! `plots/` (PNG). Nothing is written outside `output_dir`.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};

use crate::alignment::{LatentTargetSource, PilotConfig};
use crate::autoencoder::Autoencoder;
use crate::checkpoint::{self, CheckpointMeta, Snapshot};
use crate::config::RunConfig;
use crate::data::{Dataset, Split};
use crate::diffusion::{self, DiffusionTrainer, DiT};
use crate::error::{GaeError, Result};
use crate::eval::{self, NoiseRobustnessReport};
use crate::losses::{LossBundle, PerceptualNet};
use crate::nn::{Ema, ParamStore};
use crate::plot::{self, PlotSpec, Series};
use crate::rng::{self, Stream};
use crate::teacher::{Downsampler, FrozenTeacher, TeacherTrainer};
use crate::train::{AeTrainer, Supervision};
use crate::{alignment, synth};

/// Everything the CLI can ask for. `MakeData` is the only command outside
/// the training/eval set; it materializes the bundled synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    MakeData,
    TrainTeacher,
    TrainAe,
    TrainDiffusion,
    Eval,
    ProbeNoise,
    PilotAlignment,
    Sample,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::MakeData => "make_data",
            Command::TrainTeacher => "train_teacher",
            Command::TrainAe => "train_ae",
            Command::TrainDiffusion => "train_diffusion",
            Command::Eval => "eval",
            Command::ProbeNoise => "probe_noise",
            Command::PilotAlignment => "pilot_alignment",
            Command::Sample => "sample",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "make_data" => Command::MakeData,
            "train_teacher" => Command::TrainTeacher,
            "train_ae" => Command::TrainAe,
            "train_diffusion" => Command::TrainDiffusion,
            "eval" => Command::Eval,
            "probe_noise" => Command::ProbeNoise,
            "pilot_alignment" => Command::PilotAlignment,
            "sample" => Command::Sample,
            other => {
                return Err(GaeError::config(format!(
                    "unknown command '{other}'; expected one of make_data, train_teacher, \
                     train_ae, train_diffusion, eval, probe_noise, pilot_alignment, sample"
                )))
            }
        })
    }
}

/// Layout of a single run directory.
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(cfg: &RunConfig) -> Self {
        Self { root: cfg.run_dir() }
    }

    pub fn config_snapshot(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn checkpoints(&self, stage: &str) -> PathBuf {
        self.root.join("checkpoints").join(stage)
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(format!("{name}.csv"))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.json"))
    }

    pub fn plot(&self, name: &str) -> PathBuf {
        self.root.join("plots").join(format!("{name}.png"))
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| GaeError::io(parent, e))?;
    }
    Ok(())
}

fn write_snapshot(cfg: &RunConfig, paths: &RunPaths) -> Result<()> {
    let path = paths.config_snapshot();
    ensure_parent(&path)?;
    std::fs::write(&path, cfg.to_toml()?).map_err(|e| GaeError::io(&path, e))?;
    Ok(())
}

fn write_report<T: serde::Serialize>(paths: &RunPaths, name: &str, value: &T) -> Result<PathBuf> {
    let path = paths.report(name);
    ensure_parent(&path)?;
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| GaeError::Other(format!("report encode: {e}")))?;
    std::fs::write(&path, text).map_err(|e| GaeError::io(&path, e))?;
    Ok(path)
}

/// Append-only CSV with a fixed header; `truncate_from` drops rows at or
/// past a step when a resumed run rewinds to its last checkpoint.
pub struct CsvLog {
    path: PathBuf,
    header: String,
}

impl CsvLog {
    pub fn open(path: PathBuf, header: &str) -> Result<Self> {
        ensure_parent(&path)?;
        if !path.exists() {
            std::fs::write(&path, format!("{header}\n")).map_err(|e| GaeError::io(&path, e))?;
        }
        Ok(Self {
            path,
            header: header.to_string(),
        })
    }

    pub fn append(&self, fields: &[String]) -> Result<()> {
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| GaeError::io(&self.path, e))?;
        writeln!(f, "{}", fields.join(",")).map_err(|e| GaeError::io(&self.path, e))?;
        Ok(())
    }

    /// Keep only data rows whose first column parses below `step`.
    pub fn truncate_from(&self, step: usize) -> Result<()> {
        let text = std::fs::read_to_string(&self.path).map_err(|e| GaeError::io(&self.path, e))?;
        let mut out = format!("{}\n", self.header);
        for line in text.lines().skip(1) {
            let first = line.split(',').next().unwrap_or("");
            if first.parse::<usize>().map(|s| s < step).unwrap_or(false) {
                out.push_str(line);
                out.push('\n');
            }
        }
        std::fs::write(&self.path, out).map_err(|e| GaeError::io(&self.path, e))?;
        Ok(())
    }
}

fn open_data(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    Dataset::open(&cfg.data_root, split, cfg.ae.image_size)
}

fn build_teacher(cfg: &RunConfig, device: &Device) -> Result<FrozenTeacher> {
    FrozenTeacher::new(
        &cfg.teacher,
        cfg.ae.image_size,
        cfg.teacher_seed,
        DType::F32,
        device,
    )
}

/// Load the downsampler trained by `train_teacher` from its latest
/// checkpoint. The store is returned alongside so the parameters stay
/// inspectable (content hash, re-saving).
fn load_downsampler(
    cfg: &RunConfig,
    paths: &RunPaths,
    teacher: &FrozenTeacher,
    device: &Device,
) -> Result<(Downsampler, ParamStore)> {
    let root = paths.checkpoints("teacher");
    let dir = checkpoint::latest(&root)?.ok_or_else(|| {
        GaeError::config(format!(
            "no teacher checkpoint under {}; run train_teacher first",
            root.display()
        ))
    })?;
    let meta = checkpoint::load_meta(&dir)?;
    let mut store = ParamStore::new();
    let dsp = {
        let pb = store.builder(
            rng::substream_rng(cfg.seed, Stream::TeacherInit, 1),
            DType::F32,
            device,
        );
        Downsampler::new(&pb.sub("esp"), cfg.downsampler, teacher.dim(), cfg.teacher_train.heads)?
    };
    checkpoint::load_store(&dir, "esp", &mut store, &meta)?;
    Ok((dsp, store))
}

/// Load the autoencoder from the run's latest AE checkpoint.
fn load_autoencoder(cfg: &RunConfig, paths: &RunPaths, device: &Device) -> Result<(Autoencoder, CheckpointMeta)> {
    let root = paths.checkpoints("ae");
    let dir = checkpoint::latest(&root)?.ok_or_else(|| {
        GaeError::config(format!(
            "no autoencoder checkpoint under {}; run train_ae first",
            root.display()
        ))
    })?;
    let meta = checkpoint::load_meta(&dir)?;
    let mut ae = Autoencoder::new(cfg.ae.clone(), cfg.seed, DType::F32, device)?;
    checkpoint::load_store(&dir, "model", ae.store_mut(), &meta)?;
    Ok((ae, meta))
}

/// Load the diffusion model with EMA weights applied, ready for sampling.
fn load_diffusion_ema(
    cfg: &RunConfig,
    paths: &RunPaths,
    latent_dim: usize,
    tokens: usize,
    device: &Device,
) -> Result<(DiT, CheckpointMeta)> {
    let root = paths.checkpoints("diffusion");
    let dir = checkpoint::latest(&root)?.ok_or_else(|| {
        GaeError::config(format!(
            "no diffusion checkpoint under {}; run train_diffusion first",
            root.display()
        ))
    })?;
    let meta = checkpoint::load_meta(&dir)?;
    let mut diff_cfg = cfg.diffusion.clone();
    if let Some(classes) = meta.config.get("class_count").and_then(|v| v.as_u64()) {
        diff_cfg.class_count = classes as usize;
    }
    let mut model = DiT::new(diff_cfg, latent_dim, tokens, DType::F32, device)?;
    checkpoint::load_store(&dir, "model", model.store_mut(), &meta)?;
    let shadow = checkpoint::load_tensor_group(&dir, "ema", &meta, device)?;
    let named = model.store().named_vars();
    let mut ema = Ema::new(&named, cfg.diffusion.ema_decay)?;
    ema.load(&shadow)?;
    ema.apply_to(&named)?;
    Ok((model, meta))
}

fn config_json(cfg: &RunConfig) -> Result<serde_json::Value> {
    serde_json::to_value(cfg).map_err(|e| GaeError::config(format!("config encode: {e}")))
}

/// Mean latents and labels over a dataset in deterministic index order.
pub fn cache_split_latents(
    ae: &Autoencoder,
    data: &Dataset,
    batch_size: usize,
    device: &Device,
) -> Result<(Tensor, Vec<u32>)> {
    let batches = eval::dataset_batches(data, batch_size, device)?;
    let latents = eval::mean_latents(ae, &batches)?;
    let labels = eval::batch_labels(&batches);
    Ok((latents, labels))
}

/// Dispatch a command against a resolved config.
pub fn run(cmd: Command, cfg: &RunConfig, device: &Device) -> Result<()> {
    let paths = RunPaths::new(cfg);
    if cmd != Command::MakeData {
        write_snapshot(cfg, &paths)?;
    }
    match cmd {
        Command::MakeData => cmd_make_data(cfg),
        Command::TrainTeacher => cmd_train_teacher(cfg, &paths, device),
        Command::TrainAe => cmd_train_ae(cfg, &paths, device),
        Command::TrainDiffusion => cmd_train_diffusion(cfg, &paths, device),
        Command::Eval => cmd_eval(cfg, &paths, device).map(|_| ()),
        Command::ProbeNoise => cmd_probe_noise(cfg, &paths, device).map(|_| ()),
        Command::PilotAlignment => cmd_pilot_alignment(cfg, &paths, device).map(|_| ()),
        Command::Sample => cmd_sample(cfg, &paths, device).map(|_| ()),
    }
}

pub fn cmd_make_data(cfg: &RunConfig) -> Result<()> {
    let summary = synth::generate(&cfg.data_root, &cfg.synth)?;
    println!(
        "wrote {} images across {} classes under {}",
        summary.written,
        summary.classes.len(),
        cfg.data_root.display()
    );
    Ok(())
}

pub fn cmd_train_teacher(cfg: &RunConfig, paths: &RunPaths, device: &Device) -> Result<()> {
    let data = open_data(cfg, Split::Train)?;
    let teacher = build_teacher(cfg, device)?;
    let ckpt_root = paths.checkpoints("teacher");
    let mut trainer = TeacherTrainer::new(
        &data,
        &teacher,
        cfg.downsampler,
        &cfg.teacher_train,
        cfg.seed,
        DType::F32,
        device,
    )?;
    let mut start_epoch = 0usize;
    if let Some(dir) = checkpoint::latest(&ckpt_root)? {
        let meta = checkpoint::load_meta(&dir)?;
        if meta.epoch >= cfg.teacher_train.epochs {
            println!("teacher already trained for {} epochs; nothing to do", meta.epoch);
            return Ok(());
        }
        checkpoint::load_store(&dir, "esp", trainer.esp_store_mut(), &meta)?;
        checkpoint::load_store(&dir, "dsp", trainer.dsp_store_mut(), &meta)?;
        let state = candle_core::safetensors::load(dir.join("opt_g.safetensors"), device)?;
        let step = *meta
            .optimizer_steps
            .get("g")
            .ok_or_else(|| GaeError::Checkpoint("teacher checkpoint lacks optimizer".into()))?;
        trainer.load_optimizer_state(&state, step)?;
        start_epoch = meta.epoch;
        log::info!("resuming teacher training from epoch {start_epoch}");
    }
    let log = CsvLog::open(paths.log("train_teacher"), "epoch,distill_loss")?;
    log.truncate_from(start_epoch)?;
    let mut curve: Vec<(f64, f64)> = Vec::new();
    for epoch in start_epoch..cfg.teacher_train.epochs {
        let mean = trainer.run_epoch(epoch)?;
        log.append(&[epoch.to_string(), mean.to_string()])?;
        curve.push((epoch as f64, mean));
        checkpoint::save_snapshot(
            &ckpt_root,
            &Snapshot {
                kind: "teacher",
                step: epoch + 1,
                epoch: epoch + 1,
                config: config_json(cfg)?,
                stores: vec![
                    ("esp".into(), trainer.esp_store()),
                    ("dsp".into(), trainer.dsp_store()),
                ],
                optimizers: vec![("g".into(), trainer.optimizer())],
                tensor_groups: vec![],
            },
        )?;
    }
    if !curve.is_empty() {
        plot::line_plot(
            &paths.plot("train_teacher"),
            &PlotSpec {
                title: "downsampler distillation".into(),
                x_label: "epoch".into(),
                y_label: "loss".into(),
                ..Default::default()
            },
            &[Series::new("distill", curve)],
        )?;
    }
    let out = trainer.into_output();
    println!("teacher final distill loss: {:.4}", out.final_loss);
    Ok(())
}

const AE_CSV_HEADER: &str = "step,rec,lpips,gan_g,gan_d,sp,kl,total,effective_gan_weight";

fn bundle_row(b: &LossBundle) -> Vec<String> {
    vec![
        b.step.to_string(),
        b.rec.to_string(),
        b.lpips.to_string(),
        b.gan_g.to_string(),
        b.gan_d.to_string(),
        b.sp.to_string(),
        b.kl.to_string(),
        b.total.to_string(),
        b.effective_gan_weight.to_string(),
    ]
}

pub fn cmd_train_ae(cfg: &RunConfig, paths: &RunPaths, device: &Device) -> Result<()> {
    let data = open_data(cfg, Split::Train)?;
    let mut ae = Autoencoder::new(cfg.ae.clone(), cfg.seed, DType::F32, device)?;

    // Resolve a resume point before the trainer borrows the model; the model
    // weights load here, trainer-owned state (aux/disc/optimizers) below.
    let ckpt_root = paths.checkpoints("ae");
    let mut resume: Option<(PathBuf, CheckpointMeta)> = None;
    if let Some(dir) = checkpoint::latest(&ckpt_root)? {
        let meta = checkpoint::load_meta(&dir)?;
        if meta.epoch >= cfg.train.epochs {
            println!(
                "autoencoder already trained for {} epochs; nothing to do",
                meta.epoch
            );
            return Ok(());
        }
        checkpoint::load_store(&dir, "model", ae.store_mut(), &meta)?;
        resume = Some((dir, meta));
    }
    let ae = ae;

    // Semantic supervision wiring depends on the alignment paradigm.
    let needs_teacher = cfg.train.weights.lambda_sp > 0.0;
    let teacher = if needs_teacher {
        Some(build_teacher(cfg, device)?)
    } else {
        None
    };
    let dsp = match (&teacher, cfg.train.alignment) {
        (Some(t), crate::alignment::AlignmentVariant::Latent) => {
            Some(load_downsampler(cfg, paths, t, device)?)
        }
        _ => None,
    };
    let sp = teacher.as_ref().map(|t| Supervision {
        teacher: t,
        latent_target: dsp.as_ref().map(|(d, _)| LatentTargetSource::Downsampler(d)),
    });

    let mut trainer = AeTrainer::new(&ae, &data, sp, cfg.train.clone(), DType::F32, device)?;
    let per_epoch = trainer.steps_per_epoch();
    let mut start_epoch = 0usize;
    if let Some((dir, meta)) = &resume {
        if meta.hashes.contains_key("aux") {
            checkpoint::load_store(dir, "aux", trainer.aux_store_mut(), meta)?;
        }
        if meta.hashes.contains_key("disc") {
            if let Some(ds) = trainer.disc_store_mut() {
                checkpoint::load_store(dir, "disc", ds, meta)?;
            }
        }
        let g_state = candle_core::safetensors::load(dir.join("opt_g.safetensors"), device)?;
        let g_step = *meta
            .optimizer_steps
            .get("g")
            .ok_or_else(|| GaeError::Checkpoint("ae checkpoint lacks optimizer state".into()))?;
        let d_loaded;
        let d_state = if meta.optimizer_steps.contains_key("d") {
            d_loaded = candle_core::safetensors::load(dir.join("opt_d.safetensors"), device)?;
            Some((&d_loaded, meta.optimizer_steps["d"]))
        } else {
            None
        };
        trainer.load_optimizer_state((&g_state, g_step), d_state)?;
        start_epoch = meta.epoch;
        log::info!("resuming autoencoder training from epoch {start_epoch}");
    }

    let log = CsvLog::open(paths.log("train_ae"), AE_CSV_HEADER)?;
    log.truncate_from(start_epoch * per_epoch)?;
    let mut tail: Vec<LossBundle> = Vec::new();
    for epoch in start_epoch..cfg.train.epochs {
        let bundles = trainer.run_epoch(epoch)?;
        for b in &bundles {
            log.append(&bundle_row(b))?;
        }
        tail.extend(bundles);
        let step = (epoch + 1) * per_epoch;
        let mut stores = vec![("model".into(), ae.store())];
        if !trainer.aux_store().named_vars().is_empty() {
            stores.push(("aux".into(), trainer.aux_store()));
        }
        if let Some(ds) = trainer.disc_store() {
            stores.push(("disc".into(), ds));
        }
        let mut optimizers = vec![("g".into(), trainer.optimizer())];
        if let Some(od) = trainer.disc_optimizer() {
            optimizers.push(("d".into(), od));
        }
        checkpoint::save_snapshot(
            &ckpt_root,
            &Snapshot {
                kind: "autoencoder",
                step,
                epoch: epoch + 1,
                config: config_json(cfg)?,
                stores,
                optimizers,
                tensor_groups: vec![],
            },
        )?;
    }
    if !tail.is_empty() {
        let series = |f: fn(&LossBundle) -> f64, name: &str| {
            Series::new(
                name,
                tail.iter().map(|b| (b.step as f64, f(b))).collect::<Vec<_>>(),
            )
        };
        plot::line_plot(
            &paths.plot("train_ae"),
            &PlotSpec {
                title: "autoencoder training".into(),
                x_label: "step".into(),
                y_label: "loss".into(),
                ..Default::default()
            },
            &[
                series(|b| b.total, "total"),
                series(|b| b.rec, "rec"),
                series(|b| b.sp, "sp"),
            ],
        )?;
        let last = tail.last().unwrap();
        println!(
            "autoencoder trained to step {}: total {:.4}, rec {:.4}",
            last.step, last.total, last.rec
        );
    }
    Ok(())
}

pub fn cmd_train_diffusion(cfg: &RunConfig, paths: &RunPaths, device: &Device) -> Result<()> {
    let (ae, _) = load_autoencoder(cfg, paths, device)?;
    let train_data = open_data(cfg, Split::Train)?;
    let val_data = open_data(cfg, Split::Val)?;
    let (latents, labels) = cache_split_latents(&ae, &train_data, cfg.eval.batch_size, device)?;
    let (val_latents, _) = cache_split_latents(&ae, &val_data, cfg.eval.batch_size, device)?;

    let mut diff_cfg = cfg.diffusion.clone();
    if diff_cfg.class_count != train_data.class_count() {
        log::info!(
            "diffusion class_count {} adjusted to dataset's {}",
            diff_cfg.class_count,
            train_data.class_count()
        );
        diff_cfg.class_count = train_data.class_count();
    }
    let fd_probe = val_latents.dim(0)?.min(256);
    let mut trainer = DiffusionTrainer::new(
        &latents,
        &labels,
        &val_latents,
        &diff_cfg,
        fd_probe,
        DType::F32,
        device,
    )?;
    let ckpt_root = paths.checkpoints("diffusion");
    let mut start_epoch = 0usize;
    if let Some(dir) = checkpoint::latest(&ckpt_root)? {
        let meta = checkpoint::load_meta(&dir)?;
        if meta.epoch >= diff_cfg.epochs {
            println!("diffusion already trained for {} epochs; nothing to do", meta.epoch);
            return Ok(());
        }
        checkpoint::load_store(&dir, "model", trainer.model_mut().store_mut(), &meta)?;
        let shadow = checkpoint::load_tensor_group(&dir, "ema", &meta, device)?;
        let state = candle_core::safetensors::load(dir.join("opt_g.safetensors"), device)?;
        let step = *meta
            .optimizer_steps
            .get("g")
            .ok_or_else(|| GaeError::Checkpoint("diffusion checkpoint lacks optimizer".into()))?;
        trainer.load_state((&state, step), &shadow, meta.step as u64)?;
        start_epoch = meta.epoch;
        log::info!("resuming diffusion training from epoch {start_epoch}");
    }

    let log = CsvLog::open(paths.log("train_diffusion"), "epoch,mean_loss,fd_small")?;
    log.truncate_from(start_epoch)?;
    let mut diff_json = serde_json::to_value(&diff_cfg)
        .map_err(|e| GaeError::config(format!("config encode: {e}")))?;
    if let (serde_json::Value::Object(target), Ok(serde_json::Value::Object(run))) =
        (&mut diff_json, config_json(cfg))
    {
        for (k, v) in run {
            target.entry(k).or_insert(v);
        }
    }
    let mut curve = Vec::new();
    for epoch in start_epoch..diff_cfg.epochs {
        let point = trainer.run_epoch(epoch)?;
        log.append(&[
            point.epoch.to_string(),
            point.mean_loss.to_string(),
            point.fd_small.to_string(),
        ])?;
        curve.push(point);
        checkpoint::save_snapshot(
            &ckpt_root,
            &Snapshot {
                kind: "diffusion",
                step: trainer.global_step() as usize,
                epoch: epoch + 1,
                config: diff_json.clone(),
                stores: vec![("model".into(), trainer.model().store())],
                optimizers: vec![("g".into(), trainer.optimizer())],
                tensor_groups: vec![("ema".into(), trainer.ema().shadow().to_vec())],
            },
        )?;
    }
    if !curve.is_empty() {
        plot::line_plot(
            &paths.plot("train_diffusion"),
            &PlotSpec {
                title: "latent diffusion".into(),
                x_label: "epoch".into(),
                y_label: "fd".into(),
                ..Default::default()
            },
            &[Series::new(
                "fd_small",
                curve.iter().map(|p| (p.epoch as f64, p.fd_small)).collect(),
            )],
        )?;
        let last = curve.last().unwrap();
        println!(
            "diffusion trained to epoch {}: loss {:.4}, fd {:.4}",
            last.epoch, last.mean_loss, last.fd_small
        );
    }
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, paths: &RunPaths, device: &Device) -> Result<eval::ProbeReport> {
    let (ae, _) = load_autoencoder(cfg, paths, device)?;
    let teacher = build_teacher(cfg, device)?;
    let perceptual = PerceptualNet::new(
        cfg.train.seed,
        &cfg.train.perceptual_channels,
        DType::F32,
        device,
    )?;
    let train_data = open_data(cfg, Split::Train)?;
    let val_data = open_data(cfg, Split::Val)?;
    let hash_before = ae.store().content_hash()?;
    let report = eval::evaluate(&ae, &teacher, &perceptual, &train_data, &val_data, &cfg.eval, device)?;
    let hash_after = ae.store().content_hash()?;
    if hash_before != hash_after {
        return Err(GaeError::Other(
            "evaluation must not update model parameters".into(),
        ));
    }
    write_report(paths, "eval", &report)?;
    plot_robustness(paths, &report.robustness)?;
    println!(
        "eval: lp_flatten {:.3} lp_gap {:.3} psnr {:.2} ssim {:.3} fd {:.3}",
        report.lp_flatten, report.lp_gap, report.psnr, report.ssim, report.fd_small
    );
    Ok(report)
}

fn plot_robustness(paths: &RunPaths, robustness: &NoiseRobustnessReport) -> Result<()> {
    let l1: Vec<(f64, f64)> = robustness.points.iter().map(|p| (p.sigma, p.l1)).collect();
    let mut series = vec![Series::new("l1", l1)];
    let fd: Vec<(f64, f64)> = robustness
        .points
        .iter()
        .filter_map(|p| p.fd_small.map(|fd| (p.sigma, fd)))
        .collect();
    if !fd.is_empty() {
        series.push(Series::new("fd", fd));
    }
    plot::line_plot(
        &paths.plot("robustness"),
        &PlotSpec {
            title: "decoder noise robustness".into(),
            x_label: "sigma".into(),
            y_label: "error".into(),
            ..Default::default()
        },
        &series,
    )
}

pub fn cmd_probe_noise(
    cfg: &RunConfig,
    paths: &RunPaths,
    device: &Device,
) -> Result<NoiseRobustnessReport> {
    let (ae, _) = load_autoencoder(cfg, paths, device)?;
    let teacher = build_teacher(cfg, device)?;
    let val_data = open_data(cfg, Split::Val)?;
    let batches = eval::dataset_batches(&val_data, cfg.eval.batch_size, device)?;
    let hash_before = ae.store().content_hash()?;
    let report =
        eval::noise_robustness(&ae, &batches, &cfg.eval.sigmas, cfg.eval.seed, Some(&teacher))?;
    if ae.store().content_hash()? != hash_before {
        return Err(GaeError::Other("noise probe must not update parameters".into()));
    }
    write_report(paths, "noise", &report)?;
    plot_robustness(paths, &report)?;
    for p in &report.points {
        println!(
            "sigma {:.2}: l1 {:.4} psnr {:.2} fd {}",
            p.sigma,
            p.l1,
            p.psnr,
            p.fd_small.map(|f| format!("{f:.3}")).unwrap_or_else(|| "-".into())
        );
    }
    Ok(report)
}

pub fn cmd_pilot_alignment(
    cfg: &RunConfig,
    paths: &RunPaths,
    device: &Device,
) -> Result<alignment::PilotReport> {
    let train_data = open_data(cfg, Split::Train)?;
    let val_data = open_data(cfg, Split::Val)?;
    let teacher = build_teacher(cfg, device)?;
    let pilot = PilotConfig {
        ae: cfg.ae.clone(),
        train: cfg.train.clone(),
        probe: cfg.eval.probe.clone(),
        seed: cfg.seed,
        svd_token_cap: cfg.svd_token_cap,
        eval_batch: cfg.eval.batch_size,
    };
    let report =
        alignment::run_alignment_pilot(&train_data, &val_data, &teacher, &pilot, DType::F32, device)?;
    write_report(paths, "pilot", &report)?;
    println!("{}", report.table());
    Ok(report)
}

/// Decode latents to a `[0, 255]` RGB image grid.
pub fn image_grid(pixels: &Tensor, cols: usize) -> Result<image::RgbImage> {
    let (b, c, h, w) = pixels.dims4()?;
    if c != 3 {
        return Err(GaeError::shape("image grid expects RGB"));
    }
    let cols = cols.min(b).max(1);
    let rows = b.div_ceil(cols);
    let canvas_w = (cols * w) as u32;
    let canvas_h = (rows * h) as u32;
    let mut canvas = image::RgbImage::from_pixel(canvas_w, canvas_h, image::Rgb([0, 0, 0]));
    let data = ((pixels.clamp(-1.0, 1.0)? + 1.0)? * 127.5)?
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    for i in 0..b {
        let (gx, gy) = (i % cols, i / cols);
        for y in 0..h {
            for x in 0..w {
                let px = |ch: usize| data[((i * 3 + ch) * h + y) * w + x].round().clamp(0.0, 255.0) as u8;
                canvas.put_pixel(
                    (gx * w + x) as u32,
                    (gy * h + y) as u32,
                    image::Rgb([px(0), px(1), px(2)]),
                );
            }
        }
    }
    Ok(canvas)
}

pub fn cmd_sample(cfg: &RunConfig, paths: &RunPaths, device: &Device) -> Result<PathBuf> {
    let (ae, _) = load_autoencoder(cfg, paths, device)?;
    let (gh, gw) = ae.grid();
    let (model, _) = load_diffusion_ema(cfg, paths, ae.latent_dim(), gh * gw, device)?;
    let labels: Vec<u32> = if cfg.sample.labels.is_empty() {
        (0..cfg.sample.count)
            .map(|i| (i % model.config().class_count) as u32)
            .collect()
    } else {
        cfg.sample.labels.clone()
    };
    let mut rng = rng::stream_rng(cfg.seed, Stream::Sampling);
    let latents = diffusion::sample(&model, &cfg.guidance, &labels, &mut rng)?;
    let pixels = ae.decode(&latents)?;
    let grid = image_grid(&pixels, cfg.sample.cols)?;
    let path = paths.plot("samples");
    ensure_parent(&path)?;
    grid.save(&path)
        .map_err(|e| GaeError::Other(format!("grid save {}: {e}", path.display())))?;
    println!("wrote {} samples to {}", labels.len(), path.display());
    Ok(path)
}
