//! The rank-4 activation carrier and the shape helpers shared by every layer.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// A rank-4 `(batch, channels, height, width)` array.
///
/// Images carry intensities in `[0, 1]`; feature maps carry arbitrary finite
/// activations. Construction validates the rank and that no axis is empty.
#[derive(Debug, Clone)]
pub struct ImageTensor(Tensor);

impl ImageTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        let dims = t.dims();
        if dims.len() != 4 || dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(
                "ImageTensor",
                format!("expected rank-4 shape with non-empty axes, got {dims:?}"),
            ));
        }
        Ok(Self(t))
    }

    pub fn from_vec(data: Vec<f32>, shape: (usize, usize, usize, usize)) -> Result<Self> {
        let (n, c, h, w) = shape;
        if data.len() != n * c * h * w {
            return Err(Error::invalid(
                "ImageTensor",
                format!("{} values cannot fill shape {shape:?}", data.len()),
            ));
        }
        Self::new(Tensor::from_vec(data, (n, c, h, w), &Device::Cpu)?)
    }

    pub fn zeros(shape: (usize, usize, usize, usize), dtype: DType) -> Result<Self> {
        Self::new(Tensor::zeros(shape, dtype, &Device::Cpu)?)
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        let d = self.0.dims();
        (d[0], d[1], d[2], d[3])
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Flattened row-major values converted to `f64`.
    pub fn to_f64_vec(&self) -> Result<Vec<f64>> {
        Ok(self
            .0
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?)
    }

    pub fn to_f32_vec(&self) -> Result<Vec<f32>> {
        Ok(self
            .0
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?)
    }
}

impl AsRef<Tensor> for ImageTensor {
    fn as_ref(&self) -> &Tensor {
        &self.0
    }
}

pub(crate) fn dims4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.dims() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref d => Err(Error::invalid(op, format!("expected rank-4 input, got {d:?}"))),
    }
}

pub(crate) fn ensure_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            op,
            expected: a.dims().to_vec(),
            actual: b.dims().to_vec(),
        });
    }
    Ok(())
}

/// Source index for position `i` (which may lie outside `0..n`) under
/// mirror-without-edge-repeat reflection. Pads wider than the axis keep
/// bouncing between the borders.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

fn reflect_axis(t: &Tensor, axis: usize, before: usize, after: usize) -> Result<Tensor> {
    if before == 0 && after == 0 {
        return Ok(t.clone());
    }
    let n = t.dims()[axis];
    let idx: Vec<u32> = (-(before as isize)..(n + after) as isize)
        .map(|i| reflect_index(i, n) as u32)
        .collect();
    let idx = Tensor::new(idx.as_slice(), t.device())?;
    Ok(t.contiguous()?.index_select(&idx, axis)?)
}

/// Reflect-pads the two spatial axes of an NCHW tensor.
pub fn reflect_pad(t: &Tensor, top: usize, bottom: usize, left: usize, right: usize) -> Result<Tensor> {
    dims4("reflect_pad", t)?;
    let t = reflect_axis(t, 2, top, bottom)?;
    reflect_axis(&t, 3, left, right)
}

pub(crate) fn crop(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, _, th, tw) = dims4("crop", t)?;
    if th == h && tw == w {
        return Ok(t.clone());
    }
    Ok(t.narrow(2, 0, h)?.narrow(3, 0, w)?)
}
