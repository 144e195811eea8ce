//! Neural discrimination priors.
//!
//! The three high-resolution features are concatenated and reduced by an
//! `s x s`, stride-`s` mixer to the low-resolution grid. The prior at each
//! element is `1 / sqrt(exp(|mixed - y|))`, i.e. `exp(-|mixed - y| / 2)`,
//! which is 1 where the two agree and decays toward 0 as they diverge.

use std::path::{Path, PathBuf};

use candle_core::Tensor;
use image::GrayImage;

use crate::error::{Error, Result};
use crate::nn::{Conv, ConvSpec};
use crate::params::{join, ParamStore};
use crate::tensor::{dims4, ensure_same_shape};

/// Differences above this are clamped before exponentiation so the prior
/// never underflows to exactly zero (`exp(-40) ~ 4.2e-18`).
pub const NDP_DIFF_CLAMP: f64 = 80.0;

/// A prior map with every element in `(0, 1]`.
#[derive(Debug, Clone)]
pub struct PriorMap(Tensor);

impl PriorMap {
    pub(crate) fn from_tensor(t: Tensor) -> Self {
        Self(t)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        let d = self.0.dims();
        (d[0], d[1], d[2], d[3])
    }
}

/// The `H_i` operator: concatenation followed by a non-overlapping `s x s` reduction.
#[derive(Debug, Clone)]
pub enum Mixer {
    /// A single dense strided conv, `3C -> C`.
    Strided(Conv),
    /// A depthwise strided conv over the `3C` concatenation followed by a
    /// pointwise `3C -> C` projection.
    Factorized { dw: Conv, pw: Conv },
}

impl Mixer {
    pub fn strided(store: &mut ParamStore, path: &str, channels: usize, factor: usize) -> Result<Self> {
        Ok(Mixer::Strided(Conv::new(
            store,
            path,
            ConvSpec::strided(3 * channels, channels, factor),
        )?))
    }

    pub fn factorized(store: &mut ParamStore, path: &str, channels: usize, factor: usize) -> Result<Self> {
        Ok(Mixer::Factorized {
            dw: Conv::new(store, &join(path, "dw"), ConvSpec::depthwise_strided(3 * channels, factor))?,
            pw: Conv::new(store, &join(path, "pw"), ConvSpec::pointwise(3 * channels, channels))?,
        })
    }

    pub fn specs(&self) -> Vec<ConvSpec> {
        match self {
            Mixer::Strided(c) => vec![c.spec],
            Mixer::Factorized { dw, pw } => vec![dw.spec, pw.spec],
        }
    }

    pub fn factor(&self) -> usize {
        match self {
            Mixer::Strided(c) => c.spec.stride,
            Mixer::Factorized { dw, .. } => dw.spec.stride,
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Mixer::Strided(c) => c.forward(x),
            Mixer::Factorized { dw, pw } => pw.forward(&dw.forward(x)?),
        }
    }
}

/// Concatenates `(x1, x2, x3)` along channels and reduces to `(N, C, H/s, W/s)`.
pub fn multiscale_mix(x1: &Tensor, x2: &Tensor, x3: &Tensor, mixer: &Mixer) -> Result<Tensor> {
    ensure_same_shape("multiscale_mix", x1, x2)?;
    ensure_same_shape("multiscale_mix", x1, x3)?;
    let (_, _, h, w) = dims4("multiscale_mix", x1)?;
    let s = mixer.factor();
    if h % s != 0 {
        return Err(Error::NotDivisible { op: "multiscale_mix", axis: "height", size: h, factor: s });
    }
    if w % s != 0 {
        return Err(Error::NotDivisible { op: "multiscale_mix", axis: "width", size: w, factor: s });
    }
    mixer.forward(&Tensor::cat(&[x1, x2, x3], 1)?)
}

/// Elementwise `exp(-min(|mixed - y|, 80) / 2)`.
///
/// `|d|` is formed as `d * sign(d)` so its gradient at `d == 0` is zero.
pub fn compute_ndp(mixed: &Tensor, y: &Tensor) -> Result<PriorMap> {
    ensure_same_shape("compute_ndp", mixed, y)?;
    let d = (mixed - y)?;
    let abs = (&d * d.sign()?.detach())?;
    let abs = abs.minimum(NDP_DIFF_CLAMP)?;
    Ok(PriorMap(abs.affine(-0.5, 0.0)?.exp()?))
}

/// The prior for one transformer block, from that block's own input.
pub fn ndp_for_block(
    block_input: &Tensor,
    hr_feats: (&Tensor, &Tensor, &Tensor),
    mixer: &Mixer,
) -> Result<PriorMap> {
    let mixed = multiscale_mix(hr_feats.0, hr_feats.1, hr_feats.2, mixer)?;
    compute_ndp(&mixed, block_input)
}

/// Channel-mean of batch element 0, min-max stretched to `0..=255`.
/// A constant map becomes uniform 128.
pub fn prior_to_gray(prior: &PriorMap) -> Result<GrayImage> {
    let (_, _, h, w) = prior.dims4();
    let mean: Vec<f64> = prior
        .as_tensor()
        .narrow(0, 0, 1)?
        .mean_keepdim(1)?
        .to_dtype(candle_core::DType::F64)?
        .flatten_all()?
        .to_vec1()?;
    let lo = mean.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let pixels: Vec<u8> = if hi > lo {
        mean.iter()
            .map(|v| (255.0 * (v - lo) / (hi - lo)).round() as u8)
            .collect()
    } else {
        vec![128; mean.len()]
    };
    Ok(GrayImage::from_raw(w as u32, h as u32, pixels).expect("buffer sized from the map"))
}

pub fn dump_ndp_map(prior: &PriorMap, path: &Path) -> Result<()> {
    prior_to_gray(prior)?
        .save(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Writes `ndp_block{i:02}.png` for every prior into `dir`, creating it if needed.
pub fn dump_ndp_maps(priors: &[PriorMap], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    priors
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let path = dir.join(format!("ndp_block{i:02}.png"));
            dump_ndp_map(p, &path)?;
            Ok(path)
        })
        .collect()
}
