//! Symmetric per-tensor int8 quantization for frozen inference weights.

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub values: Vec<i8>,
    /// `max|x| / 127`; zero for an all-zero tensor.
    pub scale: f64,
}

pub fn quantize_int8(tensor: &Tensor) -> Result<QuantizedTensor> {
    if !tensor.is_finite() {
        return Err(Error::NonFinite { op: "quantize_int8" });
    }
    let max = tensor.max_abs();
    let scale = max / 127.0;
    let values = if scale == 0.0 {
        vec![0; tensor.numel()]
    } else {
        tensor
            .data()
            .iter()
            .map(|x| (x / scale).round().clamp(-127.0, 127.0) as i8)
            .collect()
    };
    Ok(QuantizedTensor {
        shape: tensor.shape().to_vec(),
        values,
        scale,
    })
}

pub fn dequantize_int8(q: &QuantizedTensor, dtype: DType) -> Tensor {
    Tensor::from_fn(&q.shape, dtype, |i| f64::from(q.values[i]) * q.scale)
}
