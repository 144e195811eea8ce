//! Training objective: L1 in the spatial and frequency domains on both outputs.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::SpectralL1;
use crate::tensor::{dims4, ensure_same_shape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the super-resolution branch.
    pub alpha_sr: f64,
    /// Weight of the frequency term inside each branch loss.
    pub lambda_freq: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha_sr: 0.5, lambda_freq: 0.1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.alpha_sr >= 0.0 && self.alpha_sr.is_finite()) {
            errs.push(format!("alpha_sr must be non-negative, got {}", self.alpha_sr));
        }
        if !(self.lambda_freq >= 0.0 && self.lambda_freq.is_finite()) {
            errs.push(format!("lambda_freq must be non-negative, got {}", self.lambda_freq));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }
}

/// `mean|p - t| + lambda * mean|DFT2(p) - DFT2(t)|`, with an unnormalized
/// DFT per plane and the frequency mean taken over all bins.
pub fn phi_loss(pred: &Tensor, target: &Tensor, lambda_freq: f64) -> Result<Tensor> {
    ensure_same_shape("phi_loss", pred, target)?;
    dims4("phi_loss", pred)?;
    let d = (pred - target)?;
    // `d * sign(d)` rather than `abs` so a zero difference has zero gradient.
    let spatial = (&d * d.sign()?.detach())?.mean_all()?;
    if lambda_freq == 0.0 {
        return Ok(spatial);
    }
    let n = d.elem_count() as f64;
    let freq = d.contiguous()?.apply_op1(SpectralL1)?.affine(lambda_freq / n, 0.0)?;
    Ok((spatial + freq)?)
}

/// The two branch losses and their weighted sum.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub total: Tensor,
    pub main: Tensor,
    /// Unweighted; present whenever an SR image was given.
    pub sr: Option<Tensor>,
}

/// `phi(restored, target) + alpha_sr * phi(sr_image, target)`.
pub fn total_loss(restored: &Tensor, sr_image: Option<&Tensor>, target: &Tensor, cfg: &LossConfig) -> Result<LossParts> {
    let main = phi_loss(restored, target, cfg.lambda_freq)?;
    let (total, sr) = match sr_image {
        Some(sr) => {
            let s = phi_loss(sr, target, cfg.lambda_freq)?;
            let total = if cfg.alpha_sr == 0.0 { main.clone() } else { (&main + s.affine(cfg.alpha_sr, 0.0)?)? };
            (total, Some(s))
        }
        None => (main.clone(), None),
    };
    Ok(LossParts { total, main, sr })
}
