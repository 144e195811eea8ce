//! Wall-clock profiling of warm forward passes.

use std::time::Instant;

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeProfile {
    pub height: usize,
    pub width: usize,
    pub reps: usize,
    /// Seconds per pass.
    pub samples: Vec<f64>,
    pub mean_s: f64,
    pub variance: f64,
    pub hardware: String,
}

impl RuntimeProfile {
    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// CPU model name and logical core count, best effort.
pub fn hardware_string() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|v| v.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{cpu} ({threads} threads, cpu backend)")
}

/// Mean and population variance of `reps` timed passes after `warmup`
/// untimed ones, on an untracked copy of `model`.
pub fn profile_runtime(model: &Model, h: usize, w: usize, reps: usize, warmup: usize) -> Result<RuntimeProfile> {
    if reps == 0 {
        return Err(Error::invalid("profile_runtime", "reps must be at least 1"));
    }
    let model = model.frozen()?;
    let input = ImageTensor::new(Tensor::rand(0f32, 1., (1, 3, h, w), &Device::Cpu)?)?;
    for _ in 0..warmup {
        model.forward(&input)?;
    }
    let samples: Vec<f64> = (0..reps)
        .map(|_| {
            let t = Instant::now();
            model.forward(&input).map(|_| t.elapsed().as_secs_f64())
        })
        .collect::<Result<_>>()?;
    let mean_s = samples.iter().sum::<f64>() / reps as f64;
    let variance = samples.iter().map(|s| (s - mean_s).powi(2)).sum::<f64>() / reps as f64;
    Ok(RuntimeProfile { height: h, width: w, reps, samples, mean_s, variance, hardware: hardware_string() })
}
