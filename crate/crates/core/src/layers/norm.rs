use crate::tape::CenterAxes;
use crate::tensor::{Tensor, TensorError, TensorResult};

/// `s / max|s|`, so every multiplier lies in `[-1, 1]`. All-zero `s` is
/// returned unchanged.
pub fn clip_scale(s: &Tensor) -> Tensor {
    let m = s.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m > 0.0 {
        s.map(|v| v / m)
    } else {
        s.clone()
    }
}

/// Subtracts the per-sample mean over `axes`, then applies the clipped
/// per-channel `scale` if one is given.
pub fn mean_center(x: &Tensor, axes: CenterAxes, scale: Option<&Tensor>) -> TensorResult<Tensor> {
    if let Some(s) = scale {
        if x.shape().len() < 2 || s.shape() != [x.shape()[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "mean_center",
                lhs: x.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
    }
    super::eval(x, |t, v| {
        let c = t.mean_center(v, axes)?;
        match scale {
            Some(s) => {
                let sv = t.leaf(s.clone());
                let k = t.clip_scale(sv);
                t.mul_channel(c, k)
            }
            None => Ok(c),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centering_examples() {
        let c = Tensor::new(vec![2, 3], vec![4.0; 6]).unwrap();
        assert!(mean_center(&c, CenterAxes::All, None).unwrap().data().iter().all(|&v| v == 0.0));
        let z = Tensor::new(vec![1, 4], vec![1.0, -1.0, 2.0, -2.0]).unwrap();
        assert_eq!(mean_center(&z, CenterAxes::Channels, None).unwrap(), z);
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 3.0, 10.0, 20.0]).unwrap();
        let y = mean_center(&x, CenterAxes::Spatial, None).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0, -5.0, 5.0]);
        let y = mean_center(&x, CenterAxes::Channels, None).unwrap();
        assert_eq!(y.data(), &[-4.5, -8.5, 4.5, 8.5]);
        assert!(mean_center(&Tensor::new(vec![1, 3], vec![1.0; 3]).unwrap(), CenterAxes::Spatial, None).is_err());
    }

    #[test]
    fn scale_is_clipped() {
        assert_eq!(clip_scale(&Tensor::vector(vec![2.0, -4.0])).data(), &[0.5, -1.0]);
        let x = Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap();
        let y = mean_center(&x, CenterAxes::Channels, Some(&Tensor::vector(vec![3.0, 6.0]))).unwrap();
        assert_eq!(y.data(), &[0.5, -1.0]);
    }
}
