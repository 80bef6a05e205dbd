use candle_core::Tensor;

use crate::error::Result;
use crate::tensor::{FlowField, MotionTensor};

/// Keeps the magnitude gradient finite at zero flow while staying within
/// `1e-7` of the exact norm.
const MAG_EPS: f64 = 1e-14;

/// Stack `(u, v, |(u, v)|)` and pad to `T` frames by repeating the last flow map.
pub fn flow_to_motion(flow: &FlowField) -> Result<MotionTensor> {
    let o = flow.tensor();
    let p = o.dims()[1];
    let last = o.narrow(1, p - 1, 1)?;
    let o = Tensor::cat(&[o, &last], 1)?;
    let u = o.narrow(2, 0, 1)?;
    let v = o.narrow(2, 1, 1)?;
    let mag = (((u.sqr()? + v.sqr()?)? + MAG_EPS)?.sqrt()? - MAG_EPS.sqrt())?;
    MotionTensor::new(Tensor::cat(&[&u, &v, &mag], 2)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn zero_flow_maps_to_zero() {
        let f = FlowField::new(Tensor::zeros((2, 3, 2, 4, 4), DType::F64, &Device::Cpu).unwrap()).unwrap();
        let m = flow_to_motion(&f).unwrap();
        assert_eq!(m.tensor().dims(), &[2, 4, 3, 4, 4]);
        let s = m.tensor().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn three_four_five() {
        let u = Tensor::full(3.0f64, (1, 2, 1, 4, 4), &Device::Cpu).unwrap();
        let v = Tensor::full(4.0f64, (1, 2, 1, 4, 4), &Device::Cpu).unwrap();
        let f = FlowField::new(Tensor::cat(&[u, v], 2).unwrap()).unwrap();
        let m = flow_to_motion(&f).unwrap();
        let mag: Vec<f64> = m.tensor().narrow(2, 2, 1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(mag.iter().all(|x| (x - 5.0).abs() < 1e-6));
    }
}
