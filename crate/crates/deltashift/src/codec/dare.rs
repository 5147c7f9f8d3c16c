//! DARE: random drop-and-rescale delta compression.
//!
//! Element `i` of tensor `name` survives iff `u(seed, name, i) >= sparse_rate`
//! for a counter-based uniform `u`, so the mask depends only on the config,
//! never on the data. Survivors are stored rescaled by `1 / (1 - sparse_rate)`
//! which makes the decoded delta an unbiased estimate of the input:
//! `E[decoded_i] = (1 - p) * delta_i / (1 - p) = delta_i`.
//!
//! Exact zeros among the survivors are not stored — absent indices decode to
//! zero anyway — so an all-zero delta compresses to a header-only payload.

use crate::rng;
use crate::tensor::{Tensor, TensorMap};

use super::{Codec, CodecError, CompressedDelta, DareCodecConfig, DareCompressed, DareTensor};

/// Indices of `0..len` kept by the mask for tensor `name` under `cfg`.
///
/// Shared by compression and by gradient code that must treat the mask as
/// fixed while varying the values.
pub(crate) fn kept_indices(name: &str, len: usize, cfg: DareCodecConfig) -> Vec<usize> {
    let key = rng::stream_key(cfg.seed, name);
    (0..len)
        .filter(|&i| rng::element_uniform(key, i as u64) >= cfg.sparse_rate)
        .collect()
}

/// Compress a delta map by random drop-and-rescale.
pub fn dare_compress(
    delta: &TensorMap,
    cfg: DareCodecConfig,
) -> Result<CompressedDelta, CodecError> {
    cfg.validate()?;
    if delta.is_empty() {
        return Err(CodecError::EmptyInput);
    }
    let rescale = 1.0 / (1.0 - cfg.sparse_rate);
    let mut tensors = Vec::with_capacity(delta.len());
    for t in delta.tensors() {
        let data = t.data();
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for i in kept_indices(t.name(), data.len(), cfg) {
            let x = data[i];
            if x != 0.0 {
                let v = (f64::from(x) * rescale) as f32;
                if !v.is_finite() {
                    return Err(CodecError::ValueOverflow {
                        name: t.name().to_owned(),
                        index: i,
                    });
                }
                indices.push(i as u64);
                values.push(v);
            }
        }
        tensors.push(DareTensor {
            name: t.name().to_owned(),
            shape: t.shape().to_vec(),
            indices,
            values,
        });
    }
    Ok(CompressedDelta::Dare(DareCompressed {
        config: cfg,
        tensors,
    }))
}

/// Decode a DARE payload back to a dense map (zeros at dropped positions).
pub fn dare_decompress(c: &CompressedDelta) -> Result<TensorMap, CodecError> {
    let CompressedDelta::Dare(d) = c else {
        return Err(CodecError::WrongCodec {
            expected: Codec::Dare,
            got: c.codec(),
        });
    };
    let mut map = TensorMap::new();
    for t in &d.tensors {
        let mut data = vec![0.0f32; t.elements()];
        for (&i, &v) in t.indices.iter().zip(&t.values) {
            data[i as usize] = v;
        }
        map.insert(Tensor::new(t.name.clone(), t.shape.clone(), data)?)?;
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::l2_norm;

    fn one_tensor(data: Vec<f32>) -> TensorMap {
        TensorMap::from_tensors(vec![Tensor::new("w", vec![data.len()], data).unwrap()]).unwrap()
    }

    fn cfg(p: f64, seed: u64) -> DareCodecConfig {
        DareCodecConfig {
            sparse_rate: p,
            seed,
        }
    }

    #[test]
    fn invalid_sparse_rate_is_rejected() {
        let m = one_tensor(vec![1.0]);
        for p in [1.0, 1.5, -0.1, f64::NAN] {
            assert!(matches!(
                dare_compress(&m, cfg(p, 0)),
                Err(CodecError::InvalidSparseRate(_))
            ));
        }
    }

    #[test]
    fn p_zero_is_exact_identity() {
        let data = vec![0.1f32, -2.5, 3.25, 1e-7, -0.75];
        let m = one_tensor(data.clone());
        let c = dare_compress(&m, cfg(0.0, 123)).unwrap();
        let back = dare_decompress(&c).unwrap();
        let got = back.get("w").unwrap().data();
        for (a, b) in data.iter().zip(got) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn zero_delta_stores_nothing() {
        let m = one_tensor(vec![0.0; 32]);
        for p in [0.0, 0.5, 0.99] {
            let c = dare_compress(&m, cfg(p, 7)).unwrap();
            let CompressedDelta::Dare(d) = &c else { unreachable!() };
            assert_eq!(d.tensors[0].indices.len(), 0);
            let back = dare_decompress(&c).unwrap();
            assert!(back.get("w").unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn compression_is_deterministic_for_equal_config() {
        let mut rng = crate::rng::SplitMix64::new(3);
        let data: Vec<f32> = (0..500).map(|_| rng.next_normal() as f32).collect();
        let m = one_tensor(data);
        let a = dare_compress(&m, cfg(0.5, 42)).unwrap();
        let b = dare_compress(&m, cfg(0.5, 42)).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        // A decompress in between does not disturb anything.
        let _ = dare_decompress(&a).unwrap();
        let c = dare_compress(&m, cfg(0.5, 42)).unwrap();
        assert_eq!(a.to_bytes(), c.to_bytes());
        // A different seed yields a different mask.
        let d = dare_compress(&m, cfg(0.5, 43)).unwrap();
        let (CompressedDelta::Dare(x), CompressedDelta::Dare(y)) = (&a, &d) else {
            unreachable!()
        };
        assert_ne!(x.tensors[0].indices, y.tensors[0].indices);
    }

    #[test]
    fn mask_is_value_independent() {
        // Same config, different values: identical kept-index sets.
        let m1 = one_tensor((0..200).map(|i| i as f32 + 1.0).collect());
        let m2 = one_tensor((0..200).map(|i| -(i as f32) - 5.0).collect());
        let c1 = dare_compress(&m1, cfg(0.7, 11)).unwrap();
        let c2 = dare_compress(&m2, cfg(0.7, 11)).unwrap();
        let (CompressedDelta::Dare(a), CompressedDelta::Dare(b)) = (&c1, &c2) else {
            unreachable!()
        };
        assert_eq!(a.tensors[0].indices, b.tensors[0].indices);
    }

    #[test]
    fn keep_rate_within_three_sigma() {
        let n = 100_000usize;
        let m = one_tensor(vec![1.0; n]);
        for p in [0.5, 0.9, 0.99] {
            let c = dare_compress(&m, cfg(p, 2718)).unwrap();
            let CompressedDelta::Dare(d) = &c else { unreachable!() };
            let rate = d.tensors[0].indices.len() as f64 / n as f64;
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!(
                (rate - (1.0 - p)).abs() <= 3.0 * sigma,
                "p={p}: rate {rate} vs {}",
                1.0 - p
            );
        }
    }

    #[test]
    fn decoded_mean_is_unbiased_all_ones() {
        // 1e5 ones at p = 0.9: the decoded mean is 1 in expectation with
        // sigma = sqrt(p / ((1-p) n)) = 0.009487, so a 3-sigma band of
        // [0.9715, 1.0285].
        let n = 100_000usize;
        let m = one_tensor(vec![1.0; n]);
        let c = dare_compress(&m, cfg(0.9, 31415)).unwrap();
        let decoded = dare_decompress(&c).unwrap();
        let mean: f64 = decoded
            .get("w")
            .unwrap()
            .data()
            .iter()
            .map(|&v| f64::from(v))
            .sum::<f64>()
            / n as f64;
        assert!((0.9715..=1.0285).contains(&mean), "mean {mean}");
    }

    #[test]
    fn per_element_expectation_over_seeds_is_unbiased() {
        // Monte-Carlo oracle over the Bernoulli model: averaging the decoded
        // value of a fixed element across many independent seeds recovers the
        // input value.
        let data = vec![2.0f32, -1.0, 0.5, 3.0];
        let m = one_tensor(data.clone());
        let p = 0.75f64;
        let trials = 4000u64;
        let mut sums = [0.0f64; 4];
        for seed in 0..trials {
            let c = dare_compress(&m, cfg(p, seed)).unwrap();
            let dec = dare_decompress(&c).unwrap();
            for (s, &v) in sums.iter_mut().zip(dec.get("w").unwrap().data()) {
                *s += f64::from(v);
            }
        }
        for (j, (&x, s)) in data.iter().zip(&sums).enumerate() {
            let mean = s / trials as f64;
            let sigma = f64::from(x).abs() * (p / (1.0 - p) / trials as f64).sqrt();
            assert!(
                (mean - f64::from(x)).abs() <= 3.0 * sigma,
                "element {j}: mean {mean} vs {x}"
            );
        }
    }

    #[test]
    fn rescale_preserves_norm_scale_statistically() {
        // ||decoded||^2 has expectation ||delta||^2 / (1-p); check the decoded
        // norm is in the right ballpark rather than shrunk by dropping.
        let mut rng = crate::rng::SplitMix64::new(8);
        let data: Vec<f32> = (0..50_000).map(|_| rng.next_normal() as f32).collect();
        let m = one_tensor(data.clone());
        let p = 0.9;
        let c = dare_compress(&m, cfg(p, 99)).unwrap();
        let dec = dare_decompress(&c).unwrap();
        let ratio = l2_norm(dec.get("w").unwrap().data()) / l2_norm(&data);
        let expected = (1.0 / (1.0 - p)).sqrt(); // ~3.16
        assert!(
            (ratio / expected - 1.0).abs() < 0.05,
            "norm ratio {ratio}, expected ~{expected}"
        );
    }

    #[test]
    fn overflow_on_rescale_is_an_error() {
        // Any kept f32::MAX doubles past the f32 range at p = 0.5; with 64
        // elements the chance the mask keeps none is 2^-64.
        let m = one_tensor(vec![f32::MAX; 64]);
        let err = dare_compress(&m, cfg(0.5, 0)).unwrap_err();
        assert!(matches!(err, CodecError::ValueOverflow { .. }));
    }

    #[test]
    fn wrong_codec_is_rejected() {
        let m = one_tensor(vec![1.0, -1.0]);
        let c = super::super::bitdelta_compress(&m).unwrap();
        assert!(matches!(
            dare_decompress(&c),
            Err(CodecError::WrongCodec { .. })
        ));
    }
}
