//! Cosine-annealed learning rate.

use crate::error::{Error, Result};

/// `lr_min + (lr_init - lr_min) (1 + cos(pi step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_init: f64, lr_min: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::invalid("cosine_lr", format!("step {step} is past total_steps {total_steps}")));
    }
    if total_steps == 0 {
        return Ok(lr_init);
    }
    if step == total_steps {
        return Ok(lr_min);
    }
    let t = step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_init - lr_min) * (1.0 + (std::f64::consts::PI * t).cos()))
}
