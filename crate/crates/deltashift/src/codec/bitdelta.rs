//! BitDelta: 1-bit sign quantization with a per-tensor scale.
//!
//! Each tensor stores `alpha = mean |delta|` and one sign bit per element
//! (`1` iff the element is `> 0`, so zeros quantize to `-alpha`). Decoding
//! yields `+-alpha`. For a fixed sign pattern `s`, `||delta - a s||_2` is
//! minimized exactly at `a = mean(s_i delta_i) = mean |delta_i|`, so the
//! stored scale is the l2-optimal one.

use crate::tensor::{Tensor, TensorMap};

use super::{BitDeltaCompressed, BitDeltaTensor, Codec, CodecError, CompressedDelta};

/// Compress a delta map to per-tensor sign bits plus an l2-optimal scale.
pub fn bitdelta_compress(delta: &TensorMap) -> Result<CompressedDelta, CodecError> {
    if delta.is_empty() {
        return Err(CodecError::EmptyInput);
    }
    let mut tensors = Vec::with_capacity(delta.len());
    for t in delta.tensors() {
        let data = t.data();
        let mut abs_sum = 0.0f64;
        let mut bits = vec![0u8; data.len().div_ceil(8)];
        for (i, &x) in data.iter().enumerate() {
            abs_sum += f64::from(x).abs();
            if x > 0.0 {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        let mean = if data.is_empty() {
            0.0
        } else {
            abs_sum / data.len() as f64
        };
        // Round the scale through f32: decoded tensors are f32, so this makes
        // compress -> decode -> compress reproduce identical bytes while
        // moving the scale by at most one f32 ulp (~6e-8 relative).
        let scale = f64::from(mean as f32);
        tensors.push(BitDeltaTensor {
            name: t.name().to_owned(),
            shape: t.shape().to_vec(),
            scale,
            bits,
        });
    }
    Ok(CompressedDelta::BitDelta(BitDeltaCompressed { tensors }))
}

/// Decode a BitDelta payload: every element becomes `+-alpha`.
pub fn bitdelta_decompress(c: &CompressedDelta) -> Result<TensorMap, CodecError> {
    let CompressedDelta::BitDelta(b) = c else {
        return Err(CodecError::WrongCodec {
            expected: Codec::BitDelta,
            got: c.codec(),
        });
    };
    let mut map = TensorMap::new();
    for t in &b.tensors {
        let alpha = t.scale as f32;
        let data = (0..t.elements()).map(|i| t.sign(i) * alpha).collect();
        map.insert(Tensor::new(t.name.clone(), t.shape.clone(), data)?)?;
    }
    Ok(map)
}
