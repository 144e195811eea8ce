//! Low-level layers shared by every stage of the network.
//!
//! All stride-1 convolutions reflect-pad so spatial size is preserved. Strided
//! convolutions are non-overlapping (`stride == kernel`) and require the input
//! to tile exactly.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::kernels::DepthwiseConv;
use crate::params::{join, Init, ParamStore};
use crate::tensor::{dims4, reflect_pad};

pub const LAYER_NORM_EPS: f64 = 1e-6;
const GRN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    /// 1x1 channel mixing.
    Pointwise,
    /// One k x k filter per channel; `stride` is 1 or equal to `kernel`.
    Depthwise,
    /// Full k x k, stride 1.
    Dense,
    /// Full k x k with `stride == kernel`.
    Strided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kind: ConvKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn pointwise(cin: usize, cout: usize) -> Self {
        Self {
            kind: ConvKind::Pointwise,
            in_channels: cin,
            out_channels: cout,
            kernel: 1,
            stride: 1,
            bias: true,
        }
    }

    pub fn depthwise(channels: usize, kernel: usize) -> Self {
        Self {
            kind: ConvKind::Depthwise,
            in_channels: channels,
            out_channels: channels,
            kernel,
            stride: 1,
            bias: true,
        }
    }

    /// Depthwise with `stride == kernel`: one filter per channel per tile.
    pub fn depthwise_strided(channels: usize, kernel: usize) -> Self {
        Self {
            stride: kernel,
            ..Self::depthwise(channels, kernel)
        }
    }

    pub fn dense(cin: usize, cout: usize, kernel: usize) -> Self {
        Self {
            kind: ConvKind::Dense,
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride: 1,
            bias: true,
        }
    }

    pub fn strided(cin: usize, cout: usize, kernel: usize) -> Self {
        Self {
            kind: ConvKind::Strided,
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride: kernel,
            bias: true,
        }
    }

    pub fn groups(&self) -> usize {
        match self.kind {
            ConvKind::Depthwise => self.in_channels,
            _ => 1,
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups(),
            self.kernel,
            self.kernel,
        ]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels / self.groups() * self.kernel * self.kernel
    }

    pub fn num_params(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + if self.bias { self.out_channels } else { 0 }
    }

    /// Multiply-accumulates for one output pixel, across all output channels.
    pub fn macs_per_output_pixel(&self) -> usize {
        self.fan_in() * self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("ConvSpec", msg));
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel == 0 {
            return bad(format!("empty dimension in {self:?}"));
        }
        match self.kind {
            ConvKind::Pointwise if self.kernel != 1 || self.stride != 1 => {
                bad("pointwise conv must be 1x1, stride 1".into())
            }
            ConvKind::Depthwise if self.in_channels != self.out_channels => bad(format!(
                "depthwise conv requires in_channels == out_channels, got {} -> {}",
                self.in_channels, self.out_channels
            )),
            ConvKind::Depthwise if self.stride != 1 && self.stride != self.kernel => {
                bad("depthwise stride must be 1 or equal to the kernel".into())
            }
            ConvKind::Depthwise | ConvKind::Dense if self.stride == 1 && self.kernel % 2 == 0 => {
                bad(format!("stride-1 conv needs an odd kernel, got {}", self.kernel))
            }
            ConvKind::Dense if self.stride != 1 => bad("dense conv is stride 1".into()),
            ConvKind::Strided if self.stride != self.kernel => {
                bad("strided conv requires stride == kernel".into())
            }
            _ => Ok(()),
        }
    }
}

/// Cross-correlation of `x` with `weight` under `spec`.
pub fn apply_conv(x: &Tensor, spec: &ConvSpec, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, c, h, w) = dims4("apply_conv", x)?;
    if c != spec.in_channels {
        return Err(Error::ShapeMismatch {
            op: "apply_conv",
            expected: vec![n, spec.in_channels, h, w],
            actual: x.dims().to_vec(),
        });
    }
    if spec.stride > 1 {
        if h % spec.stride != 0 {
            return Err(Error::NotDivisible { op: "apply_conv", axis: "height", size: h, factor: spec.stride });
        }
        if w % spec.stride != 0 {
            return Err(Error::NotDivisible { op: "apply_conv", axis: "width", size: w, factor: spec.stride });
        }
    }
    let pad = if spec.stride == 1 { (spec.kernel - 1) / 2 } else { 0 };
    let y = match spec.kind {
        ConvKind::Pointwise => {
            let w2 = weight.reshape((spec.out_channels, spec.in_channels))?;
            w2.broadcast_matmul(&x.reshape((n, c, h * w))?)?
                .reshape((n, spec.out_channels, h, w))?
        }
        ConvKind::Depthwise => {
            let xp = reflect_pad(x, pad, pad, pad, pad)?.contiguous()?;
            xp.apply_op2(
                &weight.contiguous()?,
                DepthwiseConv {
                    kernel: spec.kernel,
                    stride: spec.stride,
                },
            )?
        }
        ConvKind::Dense | ConvKind::Strided => {
            let xp = reflect_pad(x, pad, pad, pad, pad)?;
            xp.conv2d(weight, 0, spec.stride, 1, 1)?
        }
    };
    match bias {
        Some(b) => Ok(y.broadcast_add(&b.reshape((1, spec.out_channels, 1, 1))?)?),
        None => Ok(y),
    }
}

/// A convolution whose weights live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Conv {
    pub spec: ConvSpec,
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Conv {
    pub fn new(store: &mut ParamStore, path: &str, spec: ConvSpec) -> Result<Self> {
        Self::with_init(store, path, spec, Init::FanInUniform { fan_in: spec.fan_in() })
    }

    /// Weight and bias both start at zero.
    pub fn zeroed(store: &mut ParamStore, path: &str, spec: ConvSpec) -> Result<Self> {
        Self::with_init(store, path, spec, Init::Zeros)
    }

    fn with_init(store: &mut ParamStore, path: &str, spec: ConvSpec, init: Init) -> Result<Self> {
        spec.validate()?;
        let weight = store.create(&join(path, "weight"), &spec.weight_shape(), init)?;
        let bias = if spec.bias {
            Some(store.create(&join(path, "bias"), &[spec.out_channels], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { spec, weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        apply_conv(x, &self.spec, &self.weight, self.bias.as_ref())
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }
}

/// Space-to-depth. Output channel `c*s*s + dy*s + dx` at `(i, j)` holds
/// input channel `c` at `(s*i + dy, s*j + dx)`.
pub fn pixel_unshuffle(x: &Tensor, s: usize) -> Result<Tensor> {
    let (n, c, h, w) = dims4("pixel_unshuffle", x)?;
    if s == 0 {
        return Err(Error::invalid("pixel_unshuffle", "factor must be positive"));
    }
    if h % s != 0 {
        return Err(Error::NotDivisible { op: "pixel_unshuffle", axis: "height", size: h, factor: s });
    }
    if w % s != 0 {
        return Err(Error::NotDivisible { op: "pixel_unshuffle", axis: "width", size: w, factor: s });
    }
    if s == 1 {
        return Ok(x.clone());
    }
    Ok(x.reshape((n, c, h / s, s, w / s, s))?
        .permute([0, 1, 3, 5, 2, 4])?
        .contiguous()?
        .reshape((n, c * s * s, h / s, w / s))?)
}

/// Depth-to-space; exact inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle(x: &Tensor, s: usize) -> Result<Tensor> {
    let (n, c, h, w) = dims4("pixel_shuffle", x)?;
    if s == 0 {
        return Err(Error::invalid("pixel_shuffle", "factor must be positive"));
    }
    if c % (s * s) != 0 {
        return Err(Error::NotDivisible { op: "pixel_shuffle", axis: "channels", size: c, factor: s * s });
    }
    if s == 1 {
        return Ok(x.clone());
    }
    let co = c / (s * s);
    Ok(x.reshape((n, co, s, s, h, w))?
        .permute([0, 1, 4, 2, 5, 3])?
        .contiguous()?
        .reshape((n, co, h * s, w * s))?)
}

/// Normalizes over the channel axis at each pixel, then applies a per-channel affine.
pub fn layer_norm(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = dims4("layer_norm", x)?;
    let mean = x.mean_keepdim(1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(1)?;
    let normed = centered.broadcast_div(&(var + LAYER_NORM_EPS)?.sqrt()?)?;
    Ok(normed
        .broadcast_mul(&weight.reshape((1, c, 1, 1))?)?
        .broadcast_add(&bias.reshape((1, c, 1, 1))?)?)
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, path: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: store.create(&join(path, "weight"), &[channels], Init::Const(1.0))?,
            bias: store.create(&join(path, "bias"), &[channels], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.weight, &self.bias)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }
}

/// Exact `x * Phi(x)` GELU.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

/// Global response normalization: `gamma * (x * N(x)) + beta + x` where
/// `N(x)` is each channel's spatial L2 norm divided by the mean norm.
pub fn grn(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = dims4("grn", x)?;
    let gx = x.sqr()?.sum_keepdim((2, 3))?.sqrt()?;
    let nx = gx.broadcast_div(&(gx.mean_keepdim(1)? + GRN_EPS)?)?;
    let gamma = gamma.reshape((1, c, 1, 1))?;
    let beta = beta.reshape((1, c, 1, 1))?;
    Ok((x.broadcast_mul(&nx)?.broadcast_mul(&gamma)?.broadcast_add(&beta)? + x)?)
}

#[derive(Debug, Clone)]
pub struct Grn {
    gamma: Tensor,
    beta: Tensor,
}

impl Grn {
    pub fn new(store: &mut ParamStore, path: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.create(&join(path, "gamma"), &[channels], Init::Zeros)?,
            beta: store.create(&join(path, "beta"), &[channels], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        grn(x, &self.gamma, &self.beta)
    }
}

/// ConvNeXt-v2 block: `x + pw(GRN(GELU(pw(LN(dw7x7(x))))))` with 4x expansion.
#[derive(Debug, Clone)]
pub struct ConvNextV2Block {
    dwconv: Conv,
    norm: LayerNorm,
    pwconv1: Conv,
    grn: Grn,
    pwconv2: Conv,
}

impl ConvNextV2Block {
    pub const KERNEL: usize = 7;
    pub const EXPANSION: usize = 4;

    pub fn new(store: &mut ParamStore, path: &str, channels: usize) -> Result<Self> {
        let hidden = channels * Self::EXPANSION;
        Ok(Self {
            dwconv: Conv::new(store, &join(path, "dwconv"), ConvSpec::depthwise(channels, Self::KERNEL))?,
            norm: LayerNorm::new(store, &join(path, "norm"), channels)?,
            pwconv1: Conv::new(store, &join(path, "pwconv1"), ConvSpec::pointwise(channels, hidden))?,
            grn: Grn::new(store, &join(path, "grn"), hidden)?,
            pwconv2: Conv::new(store, &join(path, "pwconv2"), ConvSpec::pointwise(hidden, channels))?,
        })
    }

    pub fn num_params(channels: usize) -> usize {
        let hidden = channels * Self::EXPANSION;
        ConvSpec::depthwise(channels, Self::KERNEL).num_params()
            + 2 * channels
            + ConvSpec::pointwise(channels, hidden).num_params()
            + 2 * hidden
            + ConvSpec::pointwise(hidden, channels).num_params()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.dwconv.forward(x)?;
        let y = self.norm.forward(&y)?;
        let y = gelu(&self.pwconv1.forward(&y)?)?;
        let y = self.grn.forward(&y)?;
        let y = self.pwconv2.forward(&y)?;
        Ok((x + y)?)
    }
}
