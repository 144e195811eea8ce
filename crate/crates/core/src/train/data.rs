//! Paired image datasets, patch sampling and deterministic batch order.
//!
//! A dataset root holds `input/` and `gt/`; files pair by name. Which pairs
//! and which crop windows form a batch is a pure function of the seed and
//! the step, so a resumed run sees exactly the data an uninterrupted one would.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::{Rgb32FImage, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::reflect_pad;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Decodes an image to a `(3, H, W)` `f32` tensor in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img: Rgb32FImage = image::open(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
        .to_rgb32f();
    let (w, h) = img.dimensions();
    let t = Tensor::from_vec(img.into_raw(), (h as usize, w as usize, 3), &Device::Cpu)?;
    Ok(t.permute((2, 0, 1))?.contiguous()?)
}

/// Clamps to `[0, 1]`, rounds to 8 bits and writes a PNG (or whatever the
/// extension names). Accepts `(3, H, W)` or `(1, 3, H, W)`.
pub fn save_image(t: &Tensor, path: &Path) -> Result<()> {
    let t = if t.rank() == 4 { t.squeeze(0)? } else { t.clone() };
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::invalid("save_image", format!("expected 3 channels, got {c}")));
    }
    let data: Vec<f32> = t
        .to_dtype(DType::F32)?
        .clamp(0f32, 1f32)?
        .permute((1, 2, 0))?
        .flatten_all()?
        .to_vec1()?;
    let bytes: Vec<u8> = data.iter().map(|v| (v * 255.0).round() as u8).collect();
    let img = RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer sized from the tensor");
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    out.sort();
    Ok(out)
}

/// A degraded image and its ground truth, both `(3, H, W)` in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ImagePairRecord {
    pub name: String,
    pub input_path: Option<PathBuf>,
    pub gt_path: Option<PathBuf>,
    pub input: Tensor,
    pub gt: Tensor,
}

impl ImagePairRecord {
    pub fn new(name: String, input: Tensor, gt: Tensor) -> Result<Self> {
        let (ci, hi, wi) = input.dims3()?;
        let (cg, hg, wg) = gt.dims3()?;
        if ci != 3 || cg != 3 || (hi, wi) != (hg, wg) {
            return Err(Error::Dataset(format!(
                "{name}: input is {ci}x{hi}x{wi} but ground truth is {cg}x{hg}x{wg}"
            )));
        }
        Ok(Self { name, input_path: None, gt_path: None, input, gt })
    }
}

#[derive(Debug, Clone)]
enum Source {
    Folder(Vec<(String, PathBuf, PathBuf)>),
    Memory(Vec<ImagePairRecord>),
}

#[derive(Debug, Clone)]
pub struct Dataset {
    source: Source,
}

impl Dataset {
    /// Pairs `root/input/<name>` with `root/gt/<name>`. Every input must
    /// have a ground truth; the error lists all that do not.
    pub fn open(root: &Path) -> Result<Self> {
        let input_dir = root.join("input");
        let gt_dir = root.join("gt");
        for d in [&input_dir, &gt_dir] {
            if !d.is_dir() {
                return Err(Error::Dataset(format!(
                    "{} is not a directory; expected `input/` and `gt/` under {}",
                    d.display(),
                    root.display()
                )));
            }
        }
        let mut pairs = Vec::new();
        let mut missing = Vec::new();
        for p in list_images(&input_dir)? {
            let name = p.file_name().unwrap().to_string_lossy().to_string();
            let gt = gt_dir.join(&name);
            if gt.is_file() {
                pairs.push((name, p, gt));
            } else {
                missing.push(name);
            }
        }
        if !missing.is_empty() {
            return Err(Error::Dataset(format!(
                "no ground truth in {} for: {}",
                gt_dir.display(),
                missing.join(", ")
            )));
        }
        if pairs.is_empty() {
            return Err(Error::Dataset(format!("no images found in {}", input_dir.display())));
        }
        Ok(Self { source: Source::Folder(pairs) })
    }

    pub fn from_records(records: Vec<ImagePairRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Dataset("empty dataset".into()));
        }
        Ok(Self { source: Source::Memory(records) })
    }

    /// `n` smooth `size x size` scenes, each paired with a darkened,
    /// gamma-compressed copy.
    pub fn synthetic(n: usize, size: usize, seed: u64) -> Result<Self> {
        let records = (0..n)
            .map(|i| {
                let gt = synthetic_scene(size, seed.wrapping_add(i as u64))?;
                let input = (gt.powf(1.3)? * 0.35)?;
                ImagePairRecord::new(format!("synthetic_{i:02}.png"), input, gt)
            })
            .collect::<Result<_>>()?;
        Self::from_records(records)
    }

    pub fn len(&self) -> usize {
        match &self.source {
            Source::Folder(p) => p.len(),
            Source::Memory(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn record(&self, i: usize) -> Result<ImagePairRecord> {
        match &self.source {
            Source::Folder(pairs) => {
                let (name, ip, gp) = &pairs[i];
                let mut r = ImagePairRecord::new(name.clone(), load_image(ip)?, load_image(gp)?)?;
                r.input_path = Some(ip.clone());
                r.gt_path = Some(gp.clone());
                Ok(r)
            }
            Source::Memory(r) => Ok(r[i].clone()),
        }
    }
}

fn synthetic_scene(size: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(3 * size * size);
    for _ in 0..3 {
        let waves: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| (rng.random_range(0.5..3.0), rng.random_range(0.5..3.0), rng.random_range(0.0..6.28)))
            .collect();
        let bias: f64 = rng.random_range(0.35..0.65);
        for y in 0..size {
            for x in 0..size {
                let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
                let s: f64 = waves
                    .iter()
                    .map(|(fx, fy, ph)| (std::f64::consts::TAU * (fx * u + fy * v) + ph).sin())
                    .sum::<f64>()
                    / 3.0;
                data.push((bias + 0.3 * s).clamp(0.05, 0.95) as f32);
            }
        }
    }
    Ok(Tensor::from_vec(data, (3, size, size), &Device::Cpu)?)
}

/// The same window (and flips) cut from both images. Images smaller than
/// `size` are reflect-padded first; when the image already is `size`
/// square no random draw is spent on the window.
pub fn sample_patch(record: &ImagePairRecord, size: usize, flips: bool, rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor)> {
    let (_, h, w) = record.input.dims3()?;
    let pad = |t: &Tensor| -> Result<Tensor> {
        if h >= size && w >= size {
            return Ok(t.clone());
        }
        reflect_pad(&t.unsqueeze(0)?, 0, size.saturating_sub(h), 0, size.saturating_sub(w))?
            .squeeze(0)
            .map_err(Into::into)
    };
    let (input, gt) = (pad(&record.input)?, pad(&record.gt)?);
    let (_, h, w) = input.dims3()?;
    let (y, x) = if h == size && w == size {
        (0, 0)
    } else {
        (rng.random_range(0..=h - size), rng.random_range(0..=w - size))
    };
    let mut a = input.narrow(1, y, size)?.narrow(2, x, size)?.contiguous()?;
    let mut b = gt.narrow(1, y, size)?.narrow(2, x, size)?.contiguous()?;
    if flips {
        let (fh, fv) = (rng.random_bool(0.5), rng.random_bool(0.5));
        for (flip, axis) in [(fh, 2), (fv, 1)] {
            if flip {
                let idx: Vec<u32> = (0..size as u32).rev().collect();
                let idx = Tensor::new(idx.as_slice(), &Device::Cpu)?;
                a = a.index_select(&idx, axis)?;
                b = b.index_select(&idx, axis)?;
            }
        }
    }
    Ok((a.contiguous()?, b.contiguous()?))
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // SplitMix64 finalizer over a simple combination.
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Dataset order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch, 0)));
    order
}

/// Record indices for batch `step`, walking epoch permutations back to back.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    (0..batch as u64)
        .map(|j| {
            let pos = step * batch as u64 + j;
            epoch_order(n, seed, pos / n as u64)[(pos % n as u64) as usize]
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// `(B, 3, P, P)`.
    pub input: Tensor,
    pub target: Tensor,
}

/// Assembles the batch for `step`.
pub fn batch_for_step(
    data: &Dataset,
    step: u64,
    batch: usize,
    patch: usize,
    flips: bool,
    seed: u64,
) -> Result<Batch> {
    let mut inputs = Vec::with_capacity(batch);
    let mut targets = Vec::with_capacity(batch);
    for (j, idx) in batch_indices(data.len(), batch, seed, step).into_iter().enumerate() {
        let record = data.record(idx)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, step, j as u64 + 1));
        let (a, b) = sample_patch(&record, patch, flips, &mut rng)?;
        inputs.push(a);
        targets.push(b);
    }
    Ok(Batch { input: Tensor::stack(&inputs, 0)?, target: Tensor::stack(&targets, 0)? })
}
