use super::conv::overlap;
use crate::tape::PoolGeom;
use crate::tensor::{Tensor, TensorError, TensorResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PoolSpec {
    pub window: [usize; 2],
    pub stride: [usize; 2],
}

impl PoolSpec {
    /// Largest number of windows sharing one input entry.
    pub fn overlap_factor(&self) -> usize {
        overlap(self.window[0], self.stride[0]) * overlap(self.window[1], self.stride[1])
    }

    /// `1/sqrt(K)`, or exactly 1 for disjoint windows.
    pub fn input_scale(&self) -> f64 {
        match self.overlap_factor() {
            1 => 1.0,
            k => 1.0 / (k as f64).sqrt(),
        }
    }

    pub fn geometry(&self, channels: usize, height: usize, width: usize) -> TensorResult<PoolGeom> {
        let [wh, ww] = self.window;
        let [sh, sw] = self.stride;
        if wh == 0 || ww == 0 || sh == 0 || sw == 0 {
            return Err(TensorError::Invalid {
                op: "pool",
                msg: "window and stride must be positive".into(),
            });
        }
        if height < wh || width < ww {
            return Err(TensorError::ShapeMismatch {
                op: "pool",
                lhs: vec![height, width],
                rhs: self.window.to_vec(),
            });
        }
        Ok(PoolGeom {
            channels,
            height,
            width,
            window: self.window,
            stride: self.stride,
            out_height: (height - wh) / sh + 1,
            out_width: (width - ww) / sw + 1,
        })
    }
}

fn pool(x: &Tensor, spec: &PoolSpec, max: bool) -> TensorResult<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(TensorError::Invalid {
            op: "pool",
            msg: format!("expected [N, C, H, W], got {s:?}"),
        });
    }
    let geom = spec.geometry(s[1], s[2], s[3])?;
    super::eval(x, |t, v| {
        let v = if spec.overlap_factor() > 1 {
            t.scale(v, spec.input_scale())
        } else {
            v
        };
        if max {
            t.max_pool(v, geom)
        } else {
            t.norm_pool(v, geom)
        }
    })
}

/// L2 norm of each (pre-scaled) window of `x: [N, C, H, W]`.
pub fn norm_pool(x: &Tensor, spec: &PoolSpec) -> TensorResult<Tensor> {
    pool(x, spec, false)
}

/// Window maximum with the same pre-scaling; used only for ablations.
pub fn max_pool(x: &Tensor, spec: &PoolSpec) -> TensorResult<Tensor> {
    pool(x, spec, true)
}
