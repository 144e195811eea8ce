//! Hand-written CPU kernels registered as differentiable custom ops.
//!
//! candle lowers grouped convolutions to one im2col per group, which is two
//! orders of magnitude too slow for the 7x7 depthwise layers run at full image
//! resolution, and it has no Fourier transform. Both gaps are filled here.

use std::ops::{AddAssign, Mul};

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

type CResult<T> = candle_core::Result<T>;

fn contiguous<'a, T>(data: &'a [T], layout: &Layout, op: &'static str) -> CResult<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("{op}: input must be contiguous"),
    }
}

fn rank4(layout: &Layout, op: &'static str) -> CResult<(usize, usize, usize, usize)> {
    match *layout.dims() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref d => candle_core::bail!("{op}: expected rank-4 tensor, got {d:?}"),
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    batch: usize,
    channels: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    kernel: usize,
    stride: usize,
}

impl Geometry {
    fn new(
        op: &'static str,
        (batch, channels, in_h, in_w): (usize, usize, usize, usize),
        kernel: usize,
        stride: usize,
    ) -> CResult<Self> {
        if in_h < kernel || in_w < kernel {
            candle_core::bail!("{op}: input {in_h}x{in_w} smaller than kernel {kernel}");
        }
        Ok(Self {
            batch,
            channels,
            in_h,
            in_w,
            out_h: (in_h - kernel) / stride + 1,
            out_w: (in_w - kernel) / stride + 1,
            kernel,
            stride,
        })
    }
}

fn dw_forward<T>(g: Geometry, x: &[T], w: &[T]) -> Vec<T>
where
    T: Copy + Default + Mul<Output = T> + AddAssign,
{
    let (k, s) = (g.kernel, g.stride);
    let plane_in = g.in_h * g.in_w;
    let plane_out = g.out_h * g.out_w;
    let mut out = vec![T::default(); g.batch * g.channels * plane_out];
    for b in 0..g.batch {
        for c in 0..g.channels {
            let xin = &x[(b * g.channels + c) * plane_in..][..plane_in];
            let dst = &mut out[(b * g.channels + c) * plane_out..][..plane_out];
            let wk = &w[c * k * k..][..k * k];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wk[ky * k + kx];
                    for oy in 0..g.out_h {
                        let row = &xin[(oy * s + ky) * g.in_w + kx..];
                        let orow = &mut dst[oy * g.out_w..][..g.out_w];
                        if s == 1 {
                            for (o, &xv) in orow.iter_mut().zip(&row[..g.out_w]) {
                                *o += wv * xv;
                            }
                        } else {
                            for (ox, o) in orow.iter_mut().enumerate() {
                                *o += wv * row[ox * s];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn dw_input_grad<T>(g: Geometry, grad: &[T], w: &[T]) -> Vec<T>
where
    T: Copy + Default + Mul<Output = T> + AddAssign,
{
    let (k, s) = (g.kernel, g.stride);
    let plane_in = g.in_h * g.in_w;
    let plane_out = g.out_h * g.out_w;
    let mut gx = vec![T::default(); g.batch * g.channels * plane_in];
    for b in 0..g.batch {
        for c in 0..g.channels {
            let go = &grad[(b * g.channels + c) * plane_out..][..plane_out];
            let dst = &mut gx[(b * g.channels + c) * plane_in..][..plane_in];
            let wk = &w[c * k * k..][..k * k];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wk[ky * k + kx];
                    for oy in 0..g.out_h {
                        let grow = &go[oy * g.out_w..][..g.out_w];
                        let base = (oy * s + ky) * g.in_w + kx;
                        if s == 1 {
                            for (d, &gv) in dst[base..base + g.out_w].iter_mut().zip(grow) {
                                *d += wv * gv;
                            }
                        } else {
                            for (ox, &gv) in grow.iter().enumerate() {
                                dst[base + ox * s] += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

fn dw_weight_grad<T>(g: Geometry, x: &[T], grad: &[T]) -> Vec<T>
where
    T: Copy + Default + Mul<Output = T> + AddAssign,
{
    let (k, s) = (g.kernel, g.stride);
    let plane_in = g.in_h * g.in_w;
    let plane_out = g.out_h * g.out_w;
    let mut gw = vec![T::default(); g.channels * k * k];
    for b in 0..g.batch {
        for c in 0..g.channels {
            let xin = &x[(b * g.channels + c) * plane_in..][..plane_in];
            let go = &grad[(b * g.channels + c) * plane_out..][..plane_out];
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = T::default();
                    for oy in 0..g.out_h {
                        let row = &xin[(oy * s + ky) * g.in_w + kx..];
                        let grow = &go[oy * g.out_w..][..g.out_w];
                        if s == 1 {
                            for (&gv, &xv) in grow.iter().zip(&row[..g.out_w]) {
                                acc += gv * xv;
                            }
                        } else {
                            for (ox, &gv) in grow.iter().enumerate() {
                                acc += gv * row[ox * s];
                            }
                        }
                    }
                    gw[c * k * k + ky * k + kx] += acc;
                }
            }
        }
    }
    gw
}

/// Depthwise cross-correlation without padding: `(N,C,H,W) x (C,1,k,k)`.
pub struct DepthwiseConv {
    pub kernel: usize,
    pub stride: usize,
}

impl CustomOp2 for DepthwiseConv {
    fn name(&self) -> &'static str {
        "depthwise-conv"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let g = Geometry::new(self.name(), rank4(l1, self.name())?, self.kernel, self.stride)?;
        if l2.dims() != [g.channels, 1, self.kernel, self.kernel] {
            candle_core::bail!("depthwise-conv: kernel shape {:?} does not fit input", l2.dims());
        }
        let shape = Shape::from((g.batch, g.channels, g.out_h, g.out_w));
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => CpuStorage::F32(dw_forward(
                g,
                contiguous(x, l1, self.name())?,
                contiguous(w, l2, self.name())?,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(w)) => CpuStorage::F64(dw_forward(
                g,
                contiguous(x, l1, self.name())?,
                contiguous(w, l2, self.name())?,
            )),
            _ => candle_core::bail!("depthwise-conv: only matching f32/f64 inputs are supported"),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        input: &Tensor,
        weight: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let (_, _, h, w) = input.dims4()?;
        let gx = grad.apply_op2_no_bwd(
            &weight.contiguous()?,
            &DepthwiseInputGrad {
                kernel: self.kernel,
                stride: self.stride,
                in_h: h,
                in_w: w,
            },
        )?;
        let gw = input.contiguous()?.apply_op2_no_bwd(
            &grad,
            &DepthwiseWeightGrad {
                kernel: self.kernel,
                stride: self.stride,
            },
        )?;
        Ok((Some(gx), Some(gw)))
    }
}

struct DepthwiseInputGrad {
    kernel: usize,
    stride: usize,
    in_h: usize,
    in_w: usize,
}

impl CustomOp2 for DepthwiseInputGrad {
    fn name(&self) -> &'static str {
        "depthwise-conv-input-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let (n, c, _, _) = rank4(l1, self.name())?;
        let g = Geometry::new(self.name(), (n, c, self.in_h, self.in_w), self.kernel, self.stride)?;
        let shape = Shape::from((n, c, self.in_h, self.in_w));
        let out = match (s1, s2) {
            (CpuStorage::F32(go), CpuStorage::F32(w)) => CpuStorage::F32(dw_input_grad(
                g,
                contiguous(go, l1, self.name())?,
                contiguous(w, l2, self.name())?,
            )),
            (CpuStorage::F64(go), CpuStorage::F64(w)) => CpuStorage::F64(dw_input_grad(
                g,
                contiguous(go, l1, self.name())?,
                contiguous(w, l2, self.name())?,
            )),
            _ => candle_core::bail!("{}: unsupported dtype", self.name()),
        };
        Ok((out, shape))
    }
}

struct DepthwiseWeightGrad {
    kernel: usize,
    stride: usize,
}

impl CustomOp2 for DepthwiseWeightGrad {
    fn name(&self) -> &'static str {
        "depthwise-conv-weight-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let g = Geometry::new(self.name(), rank4(l1, self.name())?, self.kernel, self.stride)?;
        let k = self.kernel;
        let shape = Shape::from((g.channels, 1, k, k));
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(go)) => CpuStorage::F32(dw_weight_grad(
                g,
                contiguous(x, l1, self.name())?,
                contiguous(go, l2, self.name())?,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(go)) => CpuStorage::F64(dw_weight_grad(
                g,
                contiguous(x, l1, self.name())?,
                contiguous(go, l2, self.name())?,
            )),
            _ => candle_core::bail!("{}: unsupported dtype", self.name()),
        };
        Ok((out, shape))
    }
}

/// In-place unnormalized 2-D DFT of every `(n, c)` plane of a row-major NCHW buffer.
fn dft2_planes(buf: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for plane in buf.chunks_exact_mut(h * w) {
        for row in plane.chunks_exact_mut(w) {
            row_fft.process(row);
        }
        for x in 0..w {
            for y in 0..h {
                column[y] = plane[y * w + x];
            }
            col_fft.process(&mut column);
            for y in 0..h {
                plane[y * w + x] = column[y];
            }
        }
    }
}

fn spectrum(data: &[f64], h: usize, w: usize) -> Vec<Complex<f64>> {
    let mut buf: Vec<Complex<f64>> = data.iter().map(|&v| Complex::new(v, 0.0)).collect();
    dft2_planes(&mut buf, h, w, false);
    buf
}

fn to_f64(s: &CpuStorage, l: &Layout, op: &'static str) -> CResult<Vec<f64>> {
    Ok(match s {
        CpuStorage::F32(v) => contiguous(v, l, op)?.iter().map(|&x| x as f64).collect(),
        CpuStorage::F64(v) => contiguous(v, l, op)?.to_vec(),
        _ => candle_core::bail!("{op}: unsupported dtype"),
    })
}

fn like(s: &CpuStorage, v: Vec<f64>) -> CpuStorage {
    match s {
        CpuStorage::F32(_) => CpuStorage::F32(v.into_iter().map(|x| x as f32).collect()),
        _ => CpuStorage::F64(v),
    }
}

/// Sum over all planes and bins of `|DFT2(x)|`, returned as a scalar.
pub(crate) struct SpectralL1;

impl CustomOp1 for SpectralL1 {
    fn name(&self) -> &'static str {
        "spectral-l1"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (_, _, h, w) = rank4(l, self.name())?;
        let spec = spectrum(&to_f64(s, l, self.name())?, h, w);
        let total: f64 = spec.iter().map(|z| z.norm()).sum();
        Ok((like(s, vec![total]), Shape::from(())))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let g = arg.contiguous()?.apply_op1_no_bwd(&SpectralL1Grad)?;
        Ok(Some(g.broadcast_mul(grad)?))
    }
}

/// d/dx of `sum |DFT2(x)|`: the real part of the unnormalized inverse DFT
/// of the unit phasors `X/|X|`, with zero bins contributing nothing.
struct SpectralL1Grad;

impl CustomOp1 for SpectralL1Grad {
    fn name(&self) -> &'static str {
        "spectral-l1-grad"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (_, _, h, w) = rank4(l, self.name())?;
        let mut spec = spectrum(&to_f64(s, l, self.name())?, h, w);
        for z in spec.iter_mut() {
            let m = z.norm();
            *z = if m > 0.0 { *z / m } else { Complex::new(0.0, 0.0) };
        }
        dft2_planes(&mut spec, h, w, true);
        let grad: Vec<f64> = spec.iter().map(|z| z.re).collect();
        Ok((like(s, grad), l.shape().clone()))
    }
}
