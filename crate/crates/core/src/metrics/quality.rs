//! Full-reference image quality: PSNR and SSIM on RGB in `[0, peak]`.

use std::fmt::Write as _;

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::tensor::{dims4, ensure_same_shape};

fn values(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)
}

/// `10 log10(peak^2 / MSE)`, `+inf` when the inputs are identical.
pub fn psnr(x: &Tensor, y: &Tensor, peak: f64) -> Result<f64> {
    ensure_same_shape("psnr", x, y)?;
    let (a, b) = (values(x)?, values(y)?);
    let mse = a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub peak: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, peak: 1.0 }
    }
}

fn gaussian(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..window).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-region separable filtering of one `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..k).map(|t| g[t] * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..k).map(|t| g[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, g: &[f64], c1: f64, c2: f64) -> f64 {
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (mx, my) = (filter_valid(x, h, w, g), filter_valid(y, h, w, g));
    let (exx, eyy, exy) = (filter_valid(&xx, h, w, g), filter_valid(&yy, h, w, g), filter_valid(&xy, h, w, g));
    let n = mx.len();
    (0..n)
        .map(|i| {
            let (a, b) = (mx[i], my[i]);
            let vx = exx[i] - a * a;
            let vy = eyy[i] - b * b;
            let cov = exy[i] - a * b;
            ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (vx + vy + c2))
        })
        .sum::<f64>()
        / n as f64
}

/// Gaussian-windowed SSIM over valid positions, averaged over every plane.
pub fn ssim(x: &Tensor, y: &Tensor, params: SsimParams) -> Result<f64> {
    ensure_same_shape("ssim", x, y)?;
    let (n, c, h, w) = dims4("ssim", x)?;
    if h < params.window || w < params.window {
        return Err(Error::invalid(
            "ssim",
            format!("{h}x{w} image is smaller than the {0}x{0} window", params.window),
        ));
    }
    let g = gaussian(params.window, params.sigma);
    let c1 = (0.01 * params.peak).powi(2);
    let c2 = (0.03 * params.peak).powi(2);
    let (a, b) = (values(x)?, values(y)?);
    let plane = h * w;
    let total: f64 = (0..n * c)
        .map(|p| ssim_plane(&a[p * plane..(p + 1) * plane], &b[p * plane..(p + 1) * plane], h, w, &g, c1, c2))
        .sum();
    Ok(total / (n * c) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageScore {
    pub image: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<ImageScore>,
    pub param_count: Option<usize>,
    pub flops: Option<u64>,
    pub runtime_s: Option<f64>,
}

impl MetricsReport {
    pub fn mean_psnr(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.psnr))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.ssim))
    }

    /// `image,psnr,ssim` with one row per image.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("image,psnr,ssim\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.image, fmt_metric(r.psnr), fmt_metric(r.ssim));
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "images: {}", self.rows.len());
        let _ = writeln!(s, "mean_psnr: {}", fmt_metric(self.mean_psnr()));
        let _ = writeln!(s, "mean_ssim: {}", fmt_metric(self.mean_ssim()));
        if let Some(p) = self.param_count {
            let _ = writeln!(s, "params: {p}");
        }
        if let Some(f) = self.flops {
            let _ = writeln!(s, "flops: {f}");
        }
        if let Some(t) = self.runtime_s {
            let _ = writeln!(s, "runtime_s: {t:.6}");
        }
        s
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Six decimals; infinities print as `inf`.
pub fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.6}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use proptest::prelude::*;

    fn img(v: f32, shape: (usize, usize, usize, usize)) -> Tensor {
        (Tensor::ones(shape, DType::F32, &Device::Cpu).unwrap() * v as f64).unwrap()
    }

    /// Direct windowed sums, no separability.
    fn naive_ssim(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
        let k = 11;
        let c = 5.0;
        let mut wts = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                wts[i * k + j] = (-((i as f64 - c).powi(2) + (j as f64 - c).powi(2)) / (2.0 * 1.5 * 1.5)).exp();
            }
        }
        let z: f64 = wts.iter().sum();
        wts.iter_mut().for_each(|v| *v /= z);
        let (c1, c2) = (1e-4, 9e-4);
        let mut acc = 0.0;
        let mut n = 0;
        for i in 0..=h - k {
            for j in 0..=w - k {
                let (mut mx, mut my) = (0.0, 0.0);
                for a in 0..k {
                    for b in 0..k {
                        mx += wts[a * k + b] * x[(i + a) * w + j + b];
                        my += wts[a * k + b] * y[(i + a) * w + j + b];
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for a in 0..k {
                    for b in 0..k {
                        let dx = x[(i + a) * w + j + b] - mx;
                        let dy = y[(i + a) * w + j + b] - my;
                        vx += wts[a * k + b] * dx * dx;
                        vy += wts[a * k + b] * dy * dy;
                        cov += wts[a * k + b] * dx * dy;
                    }
                }
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                n += 1;
            }
        }
        acc / n as f64
    }

    #[test]
    fn psnr_closed_forms() {
        let z = img(0.0, (1, 3, 8, 8));
        assert_eq!(psnr(&z, &z, 1.0).unwrap(), f64::INFINITY);
        assert!((psnr(&z, &img(0.1, (1, 3, 8, 8)), 1.0).unwrap() - 20.0).abs() < 1e-5);
        assert!((psnr(&z, &img(0.5, (1, 3, 8, 8)), 1.0).unwrap() - 6.0206).abs() < 1e-3);
    }

    #[test]
    fn psnr_falls_with_noise() {
        let x = Tensor::rand(0f32, 1., (1, 3, 16, 16), &Device::Cpu).unwrap();
        let noise = Tensor::randn(0f32, 1., (1, 3, 16, 16), &Device::Cpu).unwrap();
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let y = (&x + (&noise * amp).unwrap()).unwrap();
            let p = psnr(&x, &y, 1.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_identity_and_constants() {
        let x = Tensor::rand(0f32, 1., (1, 3, 16, 16), &Device::Cpu).unwrap();
        assert_eq!(ssim(&x, &x, SsimParams::default()).unwrap(), 1.0);
        let s = ssim(&img(0.0, (1, 1, 11, 11)), &img(1.0, (1, 1, 11, 11)), SsimParams::default()).unwrap();
        assert!((s - 1e-4 / (1.0 + 1e-4)).abs() < 1e-9, "{s}");
    }

    #[test]
    fn ssim_matches_naive_windows() {
        let x = Tensor::rand(0f64, 1., (1, 2, 17, 14), &Device::Cpu).unwrap();
        let y = Tensor::rand(0f64, 1., (1, 2, 17, 14), &Device::Cpu).unwrap();
        let (a, b) = (values(&x).unwrap(), values(&y).unwrap());
        let p = 17 * 14;
        let expected = (naive_ssim(&a[..p], &b[..p], 17, 14) + naive_ssim(&a[p..], &b[p..], 17, 14)) / 2.0;
        assert!((ssim(&x, &y, SsimParams::default()).unwrap() - expected).abs() < 1e-5);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let x = img(0.0, (1, 1, 10, 20));
        assert!(ssim(&x, &x, SsimParams::default()).is_err());
    }

    #[test]
    fn report_means_and_csv() {
        let r = MetricsReport {
            rows: vec![
                ImageScore { image: "a.png".into(), psnr: 20.0, ssim: 0.5 },
                ImageScore { image: "b.png".into(), psnr: 30.0, ssim: 0.7 },
            ],
            ..Default::default()
        };
        assert_eq!(r.mean_psnr(), 25.0);
        assert!((r.mean_ssim() - 0.6).abs() < 1e-12);
        assert_eq!(r.to_csv().lines().count(), 3);
        let inf = MetricsReport {
            rows: vec![ImageScore { image: "x".into(), psnr: f64::INFINITY, ssim: 1.0 }],
            ..Default::default()
        };
        assert!(inf.summary().contains("mean_psnr: inf"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn metrics_are_symmetric(
            a in proptest::collection::vec(0f32..1.0, 432),
            b in proptest::collection::vec(0f32..1.0, 432),
        ) {
            let x = Tensor::from_vec(a, (1, 3, 12, 12), &Device::Cpu).unwrap();
            let y = Tensor::from_vec(b, (1, 3, 12, 12), &Device::Cpu).unwrap();
            prop_assert_eq!(psnr(&x, &y, 1.0).unwrap(), psnr(&y, &x, 1.0).unwrap());
            prop_assert!((ssim(&x, &y, SsimParams::default()).unwrap() - ssim(&y, &x, SsimParams::default()).unwrap()).abs() < 1e-12);
        }
    }
}
