//! Scratch: decoder depth effect on E_sp separability + full arm matrix.
use candle_core::{DType, Device, Tensor};
use gae::alignment::{AlignmentVariant, LatentTargetSource};
use gae::autoencoder::{AeConfig, Autoencoder, LatentHeadKind};
use gae::backbone::BackboneConfig;
use gae::data::{Dataset, Split};
use gae::eval::{linear_probe, ProbeConfig};
use gae::latent::{NoiseConfig, NoiseGranularity};
use gae::nn::{rms_normalize, LATENT_RMS_EPS};
use gae::teacher::{fit_svd_projection, DownsamplerSpec, DownsamplerVariant, FrozenTeacher,
                   SemanticDecoderConfig, TeacherConfig, TeacherTrainConfig, TeacherTrainer};
use gae::train::{AeTrainer, Supervision, TrainAeConfig};
use nalgebra::DMatrix;

fn to_mat(t: &Tensor) -> DMatrix<f64> {
    let (k, n, d) = t.dims3().unwrap();
    let v = t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    DMatrix::from_fn(k, n * d, |r, c| v[r * n * d + c])
}

fn feats(teacher: &FrozenTeacher, data: &Dataset, dev: &Device) -> Tensor {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut parts = Vec::new();
    for chunk in idx.chunks(32) {
        let b = data.batch(chunk, dev).unwrap();
        parts.push(teacher.extract(&b.pixels).unwrap().values);
    }
    Tensor::cat(&parts, 0).unwrap()
}

fn latents(ae: &Autoencoder, data: &Dataset, dev: &Device) -> Tensor {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut parts = Vec::new();
    for chunk in idx.chunks(32) {
        let b = data.batch(chunk, dev).unwrap();
        parts.push(ae.encode_mean(&b.pixels).unwrap().values);
    }
    Tensor::cat(&parts, 0).unwrap()
}

fn ae_cfg() -> AeConfig {
    AeConfig {
        backbone: BackboneConfig { hidden_dim: 64, layers: 3, heads: 4, mlp_ratio: 2.0, patch: 8, qk_norm: false },
        image_size: 64,
        latent_dim: 16,
        head: LatentHeadKind::Rms,
        noise: NoiseConfig { c_sigma: 0.2, granularity: NoiseGranularity::PerSample },
        kl_weight: 0.1,
    }
}

fn train_cfg(lambda_sp: f64) -> TrainAeConfig {
    let mut c = TrainAeConfig::default();
    c.epochs = 16;
    c.batch_size = 16;
    c.weights.lambda_gan = 0.0;
    c.weights.lambda_sp = lambda_sp;
    c.alignment = AlignmentVariant::Latent;
    c.seed = 0;
    c
}

fn main() {
    let dev = Device::Cpu;
    let root = std::path::Path::new("/tmp/smoke/acc_data");
    let tr = Dataset::open(root, Split::Train, 64).unwrap();
    let va = Dataset::open(root, Split::Val, 64).unwrap();
    let (ytr, yva) = (tr.labels(), va.labels());
    let probe = ProbeConfig::default();
    let teacher = FrozenTeacher::new(&TeacherConfig::desk(), 64, 17, DType::F32, &dev).unwrap();
    let ftr = feats(&teacher, &tr, &dev);
    let fva = feats(&teacher, &va, &dev);
    let (k, n, d) = ftr.dims3().unwrap();
    let grid = teacher.grid();

    // Linear-decoder downsampler
    for dec_layers in [] as [usize; 0] {
        let spec = DownsamplerSpec::new(DownsamplerVariant::AttnPatchconv, 16);
        let mut cfg = TeacherTrainConfig::desk();
        cfg.decoder = SemanticDecoderConfig { hidden_dim: 64, layers: dec_layers, heads: 4, mlp_ratio: 2.0 };
        cfg.epochs = 6;
        let mut trainer = TeacherTrainer::new(&tr, &teacher, spec, &cfg, 0, DType::F32, &dev).unwrap();
        let mut last = f64::NAN;
        for e in 0..6 { last = trainer.run_epoch(e).unwrap(); }
        let out = trainer.into_output();
        let dtr = rms_normalize(&out.downsampler.forward(&ftr, grid).unwrap(), LATENT_RMS_EPS).unwrap();
        let dva = rms_normalize(&out.downsampler.forward(&fva, grid).unwrap(), LATENT_RMS_EPS).unwrap();
        let lp = linear_probe((&to_mat(&dtr), &ytr), (&to_mat(&dva), &yva), 10, &probe).unwrap();
        println!("esp dec_layers={dec_layers} distill {last:.3} norm-probe {:.3}", lp.accuracy);
    }

    // SVD target
    let total = k * n;
    let rows = total.min(4096);
    let idx: Vec<u32> = (0..rows).map(|i| (i * total / rows) as u32).collect();
    let idx = Tensor::from_vec(idx, &[rows], &dev).unwrap();
    let fit = ftr.reshape((total, d)).unwrap().index_select(&idx, 0).unwrap();
    let svd = fit_svd_projection(&fit, 16).unwrap();

    // Arms: unsup, sup via SVD target
    for (name, lambda_sp, use_svd) in [("unsup", 0.0, false), ("sup_svd", 1.0, true)] {
        let ae = Autoencoder::new(ae_cfg(), 0, DType::F32, &dev).unwrap();
        let sup = if lambda_sp > 0.0 {
            Some(Supervision {
                teacher: &teacher,
                latent_target: if use_svd { Some(LatentTargetSource::Svd(&svd)) } else { None },
            })
        } else { None };
        let mut trn = AeTrainer::new(&ae, &tr, sup, train_cfg(lambda_sp), DType::F32, &dev).unwrap();
        let mut last_sp = 0.0;
        for e in 0..16 {
            let bundles = trn.run_epoch(e).unwrap();
            last_sp = bundles.last().unwrap().sp;
        }
        let ltr = latents(&ae, &tr, &dev);
        let lva = latents(&ae, &va, &dev);
        let lp = linear_probe((&to_mat(&ltr), &ytr), (&to_mat(&lva), &yva), 10, &probe).unwrap();
        let strong = ProbeConfig { epochs: 300, lr: 0.02, ..probe.clone() };
        let lp2 = linear_probe((&to_mat(&ltr), &ytr), (&to_mat(&lva), &yva), 10, &strong).unwrap();
        println!("{name} sp_end {last_sp:.3} mu-probe {:.3} strong {:.3}", lp.accuracy, lp2.accuracy);
    }
}
