//! Dataset ingestion, patchification, and the latent cache container.
//!
//! Datasets live on disk as `<root>/<split>/<class>/<image files>`. Images
//! are decoded once at open time; batch order is a pure function of
//! `(seed, split, epoch)`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
#[cfg(test)]
use candle_core::DType;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{GaeError, Result};
use crate::rng;

/// A batch of images in `[-1, 1]`, shaped `[B, 3, H, W]`, with class labels
/// and stable sample identifiers.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub pixels: Tensor,
    pub labels: Vec<u32>,
    pub ids: Vec<String>,
}

impl ImageBatch {
    pub fn batch_size(&self) -> usize {
        self.pixels.dims4().map(|(b, _, _, _)| b).unwrap_or(0)
    }

    pub fn image_size(&self) -> Result<(usize, usize)> {
        let (_, _, h, w) = self.pixels.dims4()?;
        Ok((h, w))
    }
}

/// Tokens laid out over a spatial grid; `N = h * w`, row-major.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    pub tokens: Tensor,
    pub grid: (usize, usize),
}

impl TokenGrid {
    pub fn new(tokens: Tensor, grid: (usize, usize)) -> Result<Self> {
        let (_, n, _) = tokens.dims3()?;
        if n != grid.0 * grid.1 {
            return Err(GaeError::shape(format!(
                "token count {n} does not match grid {}x{}",
                grid.0, grid.1
            )));
        }
        Ok(Self { tokens, grid })
    }

    pub fn token_dim(&self) -> Result<usize> {
        Ok(self.tokens.dims3()?.2)
    }
}

/// Split a `[B, 3, H, W]` image tensor into flattened non-overlapping
/// patches: `[B, (H/p)*(W/p), p*p*3]`. Patch features are laid out as
/// `(py, px, channel)` with channel fastest.
pub fn patchify(pixels: &Tensor, patch: usize) -> Result<TokenGrid> {
    let (b, c, height, width) = pixels.dims4()?;
    if height % patch != 0 || width % patch != 0 {
        return Err(GaeError::shape(format!(
            "image {height}x{width} not divisible by patch {patch}"
        )));
    }
    let (h, w) = (height / patch, width / patch);
    let tokens = pixels
        .reshape((b, c, h, patch, w, patch))?
        .permute((0, 2, 4, 3, 5, 1))?
        .contiguous()?
        .reshape((b, h * w, patch * patch * c))?;
    TokenGrid::new(tokens, (h, w))
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(grid: &TokenGrid, patch: usize) -> Result<Tensor> {
    let (b, n, d) = grid.tokens.dims3()?;
    let (h, w) = grid.grid;
    if n != h * w {
        return Err(GaeError::shape(format!(
            "grid shape {h}x{w} does not match token count {n}"
        )));
    }
    if d % (patch * patch) != 0 {
        return Err(GaeError::shape(format!(
            "token length {d} not divisible by patch*patch = {}",
            patch * patch
        )));
    }
    let c = d / (patch * patch);
    let img = grid
        .tokens
        .reshape((b, h, w, patch, patch, c))?
        .permute((0, 5, 1, 3, 2, 4))?
        .contiguous()?
        .reshape((b, c, h * patch, w * patch))?;
    Ok(img)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    pub(crate) fn tag(&self) -> u64 {
        match self {
            Split::Train => 0x7261_696e,
            Split::Val => 0x76_616c,
        }
    }
}

struct Item {
    id: String,
    label: u32,
    // RGB bytes, size*size*3, row-major.
    rgb: Vec<u8>,
}

/// An in-memory labeled image dataset.
pub struct Dataset {
    items: Vec<Item>,
    classes: Vec<String>,
    image_size: usize,
    split: Split,
}

impl Dataset {
    /// Open `<root>/<split>` and decode every image. Missing or empty
    /// directories are fatal; corrupt images are skipped with a warning.
    pub fn open(root: &Path, split: Split, image_size: usize) -> Result<Self> {
        let dir = root.join(split.as_str());
        if !dir.is_dir() {
            return Err(GaeError::config(format!(
                "dataset split directory not found: {}",
                dir.display()
            )));
        }
        let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| GaeError::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        class_dirs.sort();
        if class_dirs.is_empty() {
            return Err(GaeError::config(format!(
                "no class directories under {}",
                dir.display()
            )));
        }
        let mut items = Vec::new();
        let mut classes = Vec::new();
        for (label, cdir) in class_dirs.iter().enumerate() {
            let class_name = cdir
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let mut files: Vec<PathBuf> = std::fs::read_dir(cdir)
                .map_err(|e| GaeError::io(cdir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            for f in files {
                match load_rgb(&f, image_size) {
                    Ok(rgb) => items.push(Item {
                        id: format!("{}/{}", class_name, f.file_name().unwrap().to_string_lossy()),
                        label: label as u32,
                        rgb,
                    }),
                    Err(e) => log::warn!("skipping corrupt image {}: {e}", f.display()),
                }
            }
            classes.push(class_name);
        }
        if items.is_empty() {
            return Err(GaeError::config(format!(
                "no readable images under {}",
                dir.display()
            )));
        }
        Ok(Self {
            items,
            classes,
            image_size,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn labels(&self) -> Vec<u32> {
        self.items.iter().map(|it| it.label).collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.items.iter().map(|it| it.id.clone()).collect()
    }

    /// Deterministic item order for `(seed, split, epoch)`.
    pub fn epoch_order(&self, seed: u64, epoch: u64, shuffle: bool) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.items.len()).collect();
        if shuffle {
            let mut r = rng::substream_rng(seed ^ self.split.tag(), rng::Stream::DataOrder, epoch);
            order.shuffle(&mut r);
        }
        order
    }

    /// Batches for one epoch. Horizontal flips (train augmentation) are
    /// drawn from the same `(seed, split, epoch)` stream, so parallel
    /// consumers see identical contents.
    pub fn epoch_batches(
        &self,
        seed: u64,
        epoch: u64,
        batch_size: usize,
        shuffle: bool,
        hflip: bool,
        device: &Device,
    ) -> Result<Vec<ImageBatch>> {
        let order = self.epoch_order(seed, epoch, shuffle);
        let mut flip_rng =
            rng::substream_rng(seed ^ self.split.tag() ^ 0xf11f, rng::Stream::DataOrder, epoch);
        let flips: Vec<bool> = order
            .iter()
            .map(|_| hflip && flip_rng.random::<bool>())
            .collect();
        let mut out = Vec::new();
        for (chunk, flip_chunk) in order.chunks(batch_size).zip(flips.chunks(batch_size)) {
            out.push(self.make_batch(chunk, flip_chunk, device)?);
        }
        Ok(out)
    }

    /// A single batch of the given indices in order, no augmentation.
    pub fn batch(&self, indices: &[usize], device: &Device) -> Result<ImageBatch> {
        let flips = vec![false; indices.len()];
        self.make_batch(indices, &flips, device)
    }

    fn make_batch(&self, indices: &[usize], flips: &[bool], device: &Device) -> Result<ImageBatch> {
        let s = self.image_size;
        let b = indices.len();
        let mut data = vec![0f32; b * 3 * s * s];
        let mut labels = Vec::with_capacity(b);
        let mut ids = Vec::with_capacity(b);
        for (bi, (&idx, &flip)) in indices.iter().zip(flips.iter()).enumerate() {
            let item = &self.items[idx];
            labels.push(item.label);
            ids.push(item.id.clone());
            for y in 0..s {
                for x in 0..s {
                    let sx = if flip { s - 1 - x } else { x };
                    let src = (y * s + sx) * 3;
                    for c in 0..3 {
                        let v = item.rgb[src + c] as f32 / 255.0 * 2.0 - 1.0;
                        data[((bi * 3 + c) * s + y) * s + x] = v;
                    }
                }
            }
        }
        let pixels = Tensor::from_vec(data, (b, 3, s, s), device)?;
        Ok(ImageBatch {
            pixels,
            labels,
            ids,
        })
    }
}

fn load_rgb(path: &Path, size: usize) -> std::result::Result<Vec<u8>, image::ImageError> {
    let img = image::open(path)?;
    let img = img.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let img = if w == size && h == size {
        img
    } else {
        // Resize the shorter side to `size`, then center-crop.
        let scale = size as f64 / w.min(h) as f64;
        let (nw, nh) = (
            (w as f64 * scale).round().max(size as f64) as u32,
            (h as f64 * scale).round().max(size as f64) as u32,
        );
        let resized = image::imageops::resize(&img, nw, nh, image::imageops::FilterType::Triangle);
        let x0 = (nw - size as u32) / 2;
        let y0 = (nh - size as u32) / 2;
        image::imageops::crop_imm(&resized, x0, y0, size as u32, size as u32).to_image()
    };
    Ok(img.into_raw())
}

const LATENT_CACHE_MAGIC: &[u8; 8] = b"GAELATC1";

/// Self-describing header for the latent cache file.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LatentCacheHeader {
    pub version: u32,
    pub count: usize,
    pub grid: (usize, usize),
    pub dim: usize,
    pub checkpoint_hash: String,
    pub class_count: usize,
    pub labels: Vec<u32>,
    pub ids: Vec<String>,
}

/// Cached latent means: one `h*w*dim` float record per sample, stored as
/// contiguous little-endian f32 after a JSON header.
pub struct LatentCache {
    pub header: LatentCacheHeader,
    pub values: Vec<f32>,
}

impl LatentCache {
    pub fn record_len(&self) -> usize {
        self.header.grid.0 * self.header.grid.1 * self.header.dim
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let head = serde_json::to_vec(&self.header)
            .map_err(|e| GaeError::Other(format!("latent cache header: {e}")))?;
        let mut f = std::fs::File::create(path).map_err(|e| GaeError::io(path, e))?;
        f.write_all(LATENT_CACHE_MAGIC)
            .and_then(|_| f.write_all(&(head.len() as u64).to_le_bytes()))
            .and_then(|_| f.write_all(&head))
            .map_err(|e| GaeError::io(path, e))?;
        let mut bytes = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&bytes).map_err(|e| GaeError::io(path, e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| GaeError::io(path, e))?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic).map_err(|e| GaeError::io(path, e))?;
        if &magic != LATENT_CACHE_MAGIC {
            return Err(GaeError::Other(format!(
                "{} is not a latent cache file",
                path.display()
            )));
        }
        let mut len_bytes = [0u8; 8];
        f.read_exact(&mut len_bytes).map_err(|e| GaeError::io(path, e))?;
        let head_len = u64::from_le_bytes(len_bytes) as usize;
        let mut head = vec![0u8; head_len];
        f.read_exact(&mut head).map_err(|e| GaeError::io(path, e))?;
        let header: LatentCacheHeader = serde_json::from_slice(&head)
            .map_err(|e| GaeError::Other(format!("latent cache header: {e}")))?;
        let mut rest = Vec::new();
        f.read_to_end(&mut rest).map_err(|e| GaeError::io(path, e))?;
        let expect = header.count * header.grid.0 * header.grid.1 * header.dim * 4;
        if rest.len() != expect {
            return Err(GaeError::Other(format!(
                "latent cache payload is {} bytes, expected {expect}",
                rest.len()
            )));
        }
        let values: Vec<f32> = rest
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { header, values })
    }

    /// Record `i` as an `[h*w, dim]` tensor.
    pub fn record(&self, i: usize, device: &Device) -> Result<Tensor> {
        let n = self.record_len();
        let rec = self.values[i * n..(i + 1) * n].to_vec();
        Ok(Tensor::from_vec(
            rec,
            (self.header.grid.0 * self.header.grid.1, self.header.dim),
            device,
        )?)
    }

    /// All records as a `[count, h*w, dim]` tensor.
    pub fn all(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(
            self.values.clone(),
            (
                self.header.count,
                self.header.grid.0 * self.header.grid.1,
                self.header.dim,
            ),
            device,
        )?)
    }

    /// Batch of records as `[B, h*w, dim]`.
    pub fn batch(&self, indices: &[usize], device: &Device) -> Result<(Tensor, Vec<u32>)> {
        let n = self.record_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.values[i * n..(i + 1) * n]);
            labels.push(self.header.labels[i]);
        }
        let t = Tensor::from_vec(
            data,
            (
                indices.len(),
                self.header.grid.0 * self.header.grid.1,
                self.header.dim,
            ),
            device,
        )?;
        Ok((t, labels))
    }
}

/// Map a sample-id to its record index.
pub fn id_index(header: &LatentCacheHeader) -> HashMap<&str, usize> {
    header
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{randn, stream_rng, Stream};

    #[test]
    fn patchify_shape_arithmetic() {
        let mut r = stream_rng(0, Stream::DataOrder);
        let img = randn(&mut r, &[2, 3, 32, 32], DType::F32, &Device::Cpu).unwrap();
        let grid = patchify(&img, 16).unwrap();
        assert_eq!(grid.grid, (2, 2));
        assert_eq!(grid.tokens.dims(), &[2, 4, 768]);
    }

    #[test]
    fn patchify_roundtrip_exact() {
        let mut r = stream_rng(1, Stream::DataOrder);
        let img = randn(&mut r, &[2, 3, 16, 24], DType::F32, &Device::Cpu).unwrap();
        let grid = patchify(&img, 8).unwrap();
        assert_eq!(grid.grid, (2, 3));
        let back = unpatchify(&grid, 8).unwrap();
        let diff = (img - back)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn unpatchify_then_patchify_identity() {
        let mut r = stream_rng(2, Stream::DataOrder);
        let tokens = randn(&mut r, &[1, 4, 768], DType::F32, &Device::Cpu).unwrap();
        let grid = TokenGrid::new(tokens.clone(), (2, 2)).unwrap();
        let img = unpatchify(&grid, 16).unwrap();
        assert_eq!(img.dims(), &[1, 3, 32, 32]);
        let grid2 = patchify(&img, 16).unwrap();
        let diff = (grid2.tokens - tokens)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn patchify_rejects_nondivisible() {
        let img = Tensor::zeros((1, 3, 30, 30), DType::F32, &Device::Cpu).unwrap();
        assert!(patchify(&img, 16).is_err());
    }

    #[test]
    fn token_grid_count_mismatch_rejected() {
        let tokens = Tensor::zeros((1, 5, 768), DType::F32, &Device::Cpu).unwrap();
        assert!(TokenGrid::new(tokens, (2, 2)).is_err());
    }

    #[test]
    fn latent_cache_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("latents.bin");
        let header = LatentCacheHeader {
            version: 1,
            count: 3,
            grid: (2, 2),
            dim: 4,
            checkpoint_hash: "abc".into(),
            class_count: 2,
            labels: vec![0, 1, 0],
            ids: vec!["a".into(), "b".into(), "c".into()],
        };
        let values: Vec<f32> = (0..3 * 16).map(|i| (i as f32).sin()).collect();
        let cache = LatentCache {
            header,
            values: values.clone(),
        };
        cache.write(&path).unwrap();
        let back = LatentCache::read(&path).unwrap();
        assert_eq!(back.values, values);
        assert_eq!(back.header.labels, vec![0, 1, 0]);
        assert_eq!(back.header.checkpoint_hash, "abc");
    }

    #[test]
    fn missing_dataset_dir_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let err = match Dataset::open(dir.path(), Split::Train, 32) {
            Err(e) => e,
            Ok(_) => panic!("open succeeded on empty directory"),
        };
        assert!(matches!(err, GaeError::Config(_)));
    }
}
