use super::weight::{normalize_weight, WeightMode};
use crate::tape::ConvGeom;
use crate::tensor::{Tensor, TensorError, TensorResult};

/// Spatial padding. Zero padding embeds the input isometrically, so it does
/// not affect the Lipschitz bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    Valid,
    /// Output extent `ceil(in / stride)`, padding split top/left first.
    Same,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub padding: Padding,
    pub mode: WeightMode,
}

/// Number of stride positions whose window covers a given pixel, per axis.
pub(crate) fn overlap(kernel: usize, stride: usize) -> usize {
    kernel.div_ceil(stride)
}

impl ConvSpec {
    /// Input multiplier that makes the stacked-patch operator's bound match
    /// that of the flattened weight matrix: each pixel appears in at most
    /// `ceil(K1/S1) * ceil(K2/S2)` patches.
    pub fn copy_scale(&self) -> f64 {
        let k = overlap(self.kernel[0], self.stride[0]) * overlap(self.kernel[1], self.stride[1]);
        1.0 / (k as f64).sqrt()
    }

    pub fn geometry(&self, height: usize, width: usize) -> TensorResult<ConvGeom> {
        let mut out = [0; 2];
        let mut pad = [0; 2];
        for (axis, extent) in [height, width].into_iter().enumerate() {
            let (k, s) = (self.kernel[axis], self.stride[axis]);
            if k == 0 || s == 0 {
                return Err(TensorError::Invalid {
                    op: "conv",
                    msg: "kernel and stride must be positive".into(),
                });
            }
            match self.padding {
                Padding::Valid => {
                    if extent < k {
                        return Err(TensorError::ShapeMismatch {
                            op: "conv",
                            lhs: vec![height, width],
                            rhs: self.kernel.to_vec(),
                        });
                    }
                    out[axis] = (extent - k) / s + 1;
                }
                Padding::Same => {
                    out[axis] = extent.div_ceil(s);
                    let total = ((out[axis] - 1) * s + k).saturating_sub(extent);
                    pad[axis] = total / 2;
                }
            }
        }
        Ok(ConvGeom {
            channels: self.in_channels,
            height,
            width,
            kernel: self.kernel,
            stride: self.stride,
            pad,
            out_height: out[0],
            out_width: out[1],
        })
    }

    pub fn weight_shape(&self) -> [usize; 2] {
        [self.out_channels, self.in_channels * self.kernel[0] * self.kernel[1]]
    }
}

/// Convolution of a batch `x: [N, C, H, W]` with weights flattened to
/// `[out_channels, C*K1*K2]`, including the copy scale and the mode's
/// effective weight.
pub fn conv_forward(x: &Tensor, spec: &ConvSpec, w: &Tensor, bias: &Tensor) -> TensorResult<Tensor> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(TensorError::Invalid {
            op: "conv",
            msg: format!("expected [N, C, H, W], got {xs:?}"),
        });
    }
    if w.shape() != spec.weight_shape() {
        return Err(TensorError::ShapeMismatch {
            op: "conv",
            lhs: w.shape().to_vec(),
            rhs: spec.weight_shape().to_vec(),
        });
    }
    let geom = spec.geometry(xs[2], xs[3])?;
    let w = match spec.mode {
        WeightMode::Rescale => normalize_weight(w),
        _ => w.clone(),
    };
    super::eval(x, |t, v| {
        let s = t.scale(v, spec.copy_scale());
        let wv = t.leaf(w);
        let b = t.leaf(bias.clone());
        let y = t.conv2d(s, wv, geom)?;
        t.add_bias(y, b)
    })
}
