//! Synthetic grating dataset: classes are (spatial frequency, orientation)
//! pairs while phase, amplitude, tint, DC offset, and pixel noise are
//! randomized per sample. Phase randomization makes the classes invisible
//! to a linear probe on raw pixels, so probe accuracy has to come from
//! phase-invariant features.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Split;
use crate::error::{GaeError, Result};
use crate::rng::{self, Stream};

/// Frequencies (cycles per image) available to class construction. Spaced
/// near-octave so adjacent frequency classes keep a wide energy margin.
const FREQS: [f64; 5] = [2.0, 4.0, 8.0, 16.0, 28.0];

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Number of classes; even, at most 10. Class `c` renders frequency
    /// `FREQS[c / 2]` at orientation `c % 2` (vertical / horizontal bars).
    pub classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Additive pixel noise standard deviation in [0, 1] units.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            train_per_class: 64,
            val_per_class: 16,
            image_size: 64,
            seed: 7,
            noise: 0.02,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes % 2 != 0 || self.classes > 2 * FREQS.len() {
            return Err(GaeError::config(format!(
                "classes must be even and at most {}, got {}",
                2 * FREQS.len(),
                self.classes
            )));
        }
        if self.train_per_class == 0 || self.val_per_class == 0 {
            return Err(GaeError::config("per-class sample counts must be positive"));
        }
        if self.image_size < 8 {
            return Err(GaeError::config("image_size must be at least 8"));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(GaeError::config("noise must lie in [0, 0.5]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SynthSummary {
    pub written: usize,
    pub classes: Vec<String>,
}

fn class_name(c: usize) -> String {
    format!("class_{c:02}")
}

/// Render one sample into an RGB buffer. All randomness comes from `r`.
fn render(cfg: &SynthConfig, class: usize, r: &mut rand_chacha::ChaCha8Rng) -> Vec<u8> {
    let s = cfg.image_size;
    let freq = FREQS[class / 2];
    let vertical = class % 2 == 0;
    let phase: f64 = r.random_range(0.0..std::f64::consts::TAU);
    // Amplitude in [-1, 1] pixel units; halved when composing in [0, 1].
    let amp: f64 = r.random_range(0.35..0.6);
    let dc: [f64; 3] = [
        r.random_range(-0.35..0.35),
        r.random_range(-0.35..0.35),
        r.random_range(-0.35..0.35),
    ];
    let tint: [f64; 3] = [
        r.random_range(0.6..1.0),
        r.random_range(0.6..1.0),
        r.random_range(0.6..1.0),
    ];
    let mut buf = vec![0u8; s * s * 3];
    for y in 0..s {
        for x in 0..s {
            let u = if vertical { x } else { y } as f64;
            let g = (std::f64::consts::TAU * freq * u / s as f64 + phase).sin();
            for c in 0..3 {
                let noise: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, r);
                let v = 0.5 + dc[c] / 2.0 + amp / 2.0 * tint[c] * g + cfg.noise * noise;
                buf[(y * s + x) * 3 + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    buf
}

fn write_split(root: &Path, split: Split, per_class: usize, cfg: &SynthConfig) -> Result<usize> {
    let mut written = 0;
    for class in 0..cfg.classes {
        let dir = root.join(split.as_str()).join(class_name(class));
        std::fs::create_dir_all(&dir).map_err(|e| GaeError::io(&dir, e))?;
        for i in 0..per_class {
            let mut r = rng::substream_rng(
                cfg.seed ^ split.tag(),
                Stream::Synth,
                ((class as u64) << 32) | i as u64,
            );
            let buf = render(cfg, class, &mut r);
            let path = dir.join(format!("img_{i:05}.png"));
            let img = image::RgbImage::from_vec(
                cfg.image_size as u32,
                cfg.image_size as u32,
                buf,
            )
            .expect("buffer size matches dimensions");
            img.save(&path)
                .map_err(|e| GaeError::Other(format!("writing {}: {e}", path.display())))?;
            written += 1;
        }
    }
    Ok(written)
}

/// Generate the train and val splits under `root`. Regenerating with the
/// same config overwrites files with identical bytes.
pub fn generate(root: &Path, cfg: &SynthConfig) -> Result<SynthSummary> {
    cfg.validate()?;
    let mut written = write_split(root, Split::Train, cfg.train_per_class, cfg)?;
    written += write_split(root, Split::Val, cfg.val_per_class, cfg)?;
    Ok(SynthSummary {
        written,
        classes: (0..cfg.classes).map(class_name).collect(),
    })
}
