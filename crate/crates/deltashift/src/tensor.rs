//! Named f32 tensors and maps of them.
//!
//! A [`TensorMap`] is the in-memory form of a model checkpoint or a weight
//! delta: uniquely named dense f32 tensors kept in canonical (lexicographic by
//! name) order, so flattening, serialization, and reductions never depend on
//! insertion order. All stored data is f32; all dot/norm accumulation is f64.
//! Non-finite values are rejected at construction — nothing downstream has to
//! re-check.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("tensor name must be non-empty")]
    EmptyName,
    #[error("tensor name {0:?} exceeds the 65535-byte format limit")]
    NameTooLong(String),
    #[error("tensor {name:?}: shape {shape:?} implies {expected} elements, data has {got}")]
    ShapeMismatch {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("tensor {name:?}: non-finite value at flat index {index}")]
    NonFinite { name: String, index: usize },
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("maps are not aligned: {0}")]
    Alignment(String),
    #[error("dot product length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
}

/// A dense, named, validated f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Build a tensor, validating name, shape/data agreement, and finiteness.
    pub fn new(
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f32>,
    ) -> Result<Self, TensorError> {
        let name = name.into();
        if name.is_empty() {
            return Err(TensorError::EmptyName);
        }
        if name.len() > usize::from(u16::MAX) {
            return Err(TensorError::NameTooLong(name));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch {
                name,
                shape,
                expected,
                got: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { name, index });
        }
        Ok(Self { name, shape, data })
    }

    #[must_use]
    pub fn name(&self) -> &str {
        &self.name
    }

    #[must_use]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[must_use]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// An ordered collection of uniquely named tensors plus free-form metadata.
///
/// Tensors are always held in canonical order. Metadata is in-memory
/// provenance only; it is not part of the serialized checkpoint format.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorMap {
    tensors: Vec<Tensor>, // sorted by name, names unique
    metadata: BTreeMap<String, String>,
}

impl TensorMap {
    #[must_use]
    pub fn new() -> Self {
        Self::default()
    }

    /// Build from a list of tensors; order of the input does not matter.
    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self, TensorError> {
        let mut map = Self::new();
        for t in tensors {
            map.insert(t)?;
        }
        Ok(map)
    }

    /// Insert a tensor, keeping canonical order. Duplicate names are an error.
    pub fn insert(&mut self, tensor: Tensor) -> Result<(), TensorError> {
        match self
            .tensors
            .binary_search_by(|t| t.name.as_str().cmp(&tensor.name))
        {
            Ok(_) => Err(TensorError::DuplicateName(tensor.name)),
            Err(pos) => {
                self.tensors.insert(pos, tensor);
                Ok(())
            }
        }
    }

    #[must_use]
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .binary_search_by(|t| t.name.as_str().cmp(name))
            .ok()
            .map(|i| &self.tensors[i])
    }

    /// Tensors in canonical (lexicographic-by-name) order.
    #[must_use]
    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total element count across all tensors.
    #[must_use]
    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    #[must_use]
    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }

    /// Concatenate all tensor data in canonical order into one flat vector.
    #[must_use]
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.total_elements());
        for t in &self.tensors {
            out.extend_from_slice(&t.data);
        }
        out
    }

    /// Flatten only tensors whose name satisfies `keep`, in canonical order.
    #[must_use]
    pub fn flatten_filtered(&self, keep: impl Fn(&str) -> bool) -> Vec<f32> {
        let mut out = Vec::new();
        for t in &self.tensors {
            if keep(&t.name) {
                out.extend_from_slice(&t.data);
            }
        }
        out
    }

    /// Check that `other` has exactly the same tensor names and shapes.
    pub fn check_aligned(&self, other: &Self) -> Result<(), TensorError> {
        if self.len() != other.len() {
            return Err(TensorError::Alignment(format!(
                "tensor counts differ: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.name != b.name {
                return Err(TensorError::Alignment(format!(
                    "tensor names differ: {:?} vs {:?}",
                    a.name, b.name
                )));
            }
            if a.shape != b.shape {
                return Err(TensorError::Alignment(format!(
                    "tensor {:?}: shapes differ: {:?} vs {:?}",
                    a.name, a.shape, b.shape
                )));
            }
        }
        Ok(())
    }

    /// Elementwise combine two aligned maps. Metadata is not propagated.
    fn zip_with(&self, other: &Self, f: impl Fn(f32, f32) -> f32) -> Result<Self, TensorError> {
        self.check_aligned(other)?;
        let tensors = self
            .tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| {
                let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(a.name.clone(), a.shape.clone(), data)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            tensors,
            metadata: BTreeMap::new(),
        })
    }
}

/// Elementwise sum of two aligned maps.
pub fn map_add(a: &TensorMap, b: &TensorMap) -> Result<TensorMap, TensorError> {
    a.zip_with(b, |x, y| x + y)
}

/// Elementwise difference `a - b` of two aligned maps.
pub fn map_sub(a: &TensorMap, b: &TensorMap) -> Result<TensorMap, TensorError> {
    a.zip_with(b, |x, y| x - y)
}

/// Every element scaled by `s`.
pub fn map_scale(a: &TensorMap, s: f32) -> Result<TensorMap, TensorError> {
    let tensors = a
        .tensors
        .iter()
        .map(|t| {
            let data = t.data.iter().map(|&x| x * s).collect();
            Tensor::new(t.name.clone(), t.shape.clone(), data)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TensorMap {
        tensors,
        metadata: BTreeMap::new(),
    })
}

/// Dot product with 64-bit accumulation.
pub fn dot(u: &[f32], v: &[f32]) -> Result<f64, TensorError> {
    if u.len() != v.len() {
        return Err(TensorError::LengthMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    let mut acc = 0.0f64;
    for (&x, &y) in u.iter().zip(v) {
        acc += f64::from(x) * f64::from(y);
    }
    Ok(acc)
}

/// Euclidean norm with 64-bit accumulation.
#[must_use]
pub fn l2_norm(u: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for &x in u {
        acc += f64::from(x) * f64::from(x);
    }
    acc.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(name: &str, data: Vec<f32>) -> Tensor {
        let n = data.len();
        Tensor::new(name, vec![n], data).unwrap()
    }

    #[test]
    fn construction_validates_shape_product() {
        let err = Tensor::new("w", vec![2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { expected: 6, got: 5, .. }));
    }

    #[test]
    fn construction_rejects_non_finite() {
        for bad in [f32::NAN, f32::INFINITY, f32::NEG_INFINITY] {
            let err = Tensor::new("w", vec![3], vec![1.0, bad, 2.0]).unwrap_err();
            assert!(matches!(err, TensorError::NonFinite { index: 1, .. }));
        }
    }

    #[test]
    fn construction_rejects_empty_name() {
        assert!(matches!(
            Tensor::new("", vec![1], vec![0.0]),
            Err(TensorError::EmptyName)
        ));
    }

    #[test]
    fn zero_element_tensor_is_allowed() {
        let tz = Tensor::new("z", vec![0], vec![]).unwrap();
        assert!(tz.is_empty());
    }

    #[test]
    fn insert_rejects_duplicates() {
        let mut m = TensorMap::new();
        m.insert(t("a", vec![1.0])).unwrap();
        assert!(matches!(
            m.insert(t("a", vec![2.0])),
            Err(TensorError::DuplicateName(_))
        ));
    }

    #[test]
    fn flatten_is_insertion_order_independent() {
        let a = t("alpha", vec![1.0, 2.0]);
        let b = t("beta", vec![3.0]);
        let m1 = TensorMap::from_tensors(vec![a.clone(), b.clone()]).unwrap();
        let m2 = TensorMap::from_tensors(vec![b, a]).unwrap();
        assert_eq!(m1.flatten(), m2.flatten());
        assert_eq!(m1.flatten(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn flatten_filtered_selects_by_name() {
        let m = TensorMap::from_tensors(vec![
            t("layer0.weight", vec![1.0]),
            t("layer0.bias", vec![2.0]),
            t("layer1.weight", vec![3.0]),
        ])
        .unwrap();
        assert_eq!(
            m.flatten_filtered(|n| n.ends_with(".weight")),
            vec![1.0, 3.0]
        );
    }

    #[test]
    fn dot_hand_value() {
        assert_eq!(dot(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap(), 32.0);
    }

    #[test]
    fn dot_length_mismatch_errors() {
        assert!(matches!(
            dot(&[1.0], &[1.0, 2.0]),
            Err(TensorError::LengthMismatch { left: 1, right: 2 })
        ));
    }

    /// Oracle: Neumaier compensated summation, written independently of `dot`.
    fn compensated_dot(u: &[f32], v: &[f32]) -> f64 {
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        for (&x, &y) in u.iter().zip(v) {
            let term = f64::from(x) * f64::from(y);
            let t = sum + term;
            if sum.abs() >= term.abs() {
                comp += (sum - t) + term;
            } else {
                comp += (term - t) + sum;
            }
            sum = t;
        }
        sum + comp
    }

    #[test]
    fn dot_million_ones_matches_compensated_oracle() {
        let u = vec![1.0f32; 1_000_000];
        let d = dot(&u, &u).unwrap();
        assert_eq!(d, 1_000_000.0);
        assert_eq!(d, compensated_dot(&u, &u));
    }

    #[test]
    fn dot_mixed_magnitudes_stays_close_to_compensated_oracle() {
        // Large and small terms interleaved; f64 accumulation over f32 inputs
        // should agree with the compensated oracle to near machine precision.
        let mut rng = crate::rng::SplitMix64::new(11);
        let u: Vec<f32> = (0..10_000)
            .map(|i| {
                let scale = if i % 7 == 0 { 1e4 } else { 1e-3 };
                (rng.next_f64() - 0.5) as f32 * scale
            })
            .collect();
        let v: Vec<f32> = (0..10_000).map(|_| (rng.next_f64() - 0.5) as f32).collect();
        let plain = dot(&u, &v).unwrap();
        let oracle = compensated_dot(&u, &v);
        assert!((plain - oracle).abs() <= 1e-9 * oracle.abs().max(1.0));
    }

    #[test]
    fn l2_norm_hand_value() {
        assert_eq!(l2_norm(&[3.0, 4.0]), 5.0);
        assert_eq!(l2_norm(&[]), 0.0);
    }

    #[test]
    fn map_sub_elementwise() {
        let a = TensorMap::from_tensors(vec![t("w", vec![5.0, 7.0])]).unwrap();
        let b = TensorMap::from_tensors(vec![t("w", vec![2.0, 3.0])]).unwrap();
        let d = map_sub(&a, &b).unwrap();
        assert_eq!(d.get("w").unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn map_ops_reject_misaligned_maps() {
        let a = TensorMap::from_tensors(vec![t("w", vec![1.0, 2.0])]).unwrap();
        let b = TensorMap::from_tensors(vec![t("w", vec![1.0])]).unwrap();
        assert!(matches!(map_add(&a, &b), Err(TensorError::Alignment(_))));
        let c = TensorMap::from_tensors(vec![t("v", vec![1.0, 2.0])]).unwrap();
        assert!(matches!(map_sub(&a, &c), Err(TensorError::Alignment(_))));
    }

    #[test]
    fn map_scale_zero_gives_zeros() {
        let a = TensorMap::from_tensors(vec![t("w", vec![1.5, -2.0])]).unwrap();
        let z = map_scale(&a, 0.0).unwrap();
        assert_eq!(z.get("w").unwrap().data(), &[0.0, 0.0]);
    }

    prop_compose! {
        fn small_map()(n in 1usize..5)(
            datas in proptest::collection::vec(
                proptest::collection::vec(-1e3f32..1e3, 1..9), n..=n)
        ) -> TensorMap {
            let tensors = datas.into_iter().enumerate()
                .map(|(i, d)| t(&format!("t{i:02}"), d))
                .collect();
            TensorMap::from_tensors(tensors).unwrap()
        }
    }

    proptest! {
        /// Flattening commutes with elementwise map arithmetic.
        #[test]
        fn flatten_commutes_with_map_ops(a in small_map(), scale in -10.0f32..10.0) {
            let b = map_scale(&a, scale).unwrap();
            let sum = map_add(&a, &b).unwrap();
            let lhs = sum.flatten();
            let rhs: Vec<f32> = a.flatten().iter().zip(b.flatten().iter())
                .map(|(&x, &y)| x + y).collect();
            prop_assert_eq!(lhs, rhs);
        }

        /// dot is symmetric and l2_norm^2 equals dot(u, u).
        #[test]
        fn dot_symmetry_and_norm_identity(a in small_map()) {
            let u = a.flatten();
            let b = map_scale(&a, 0.5).unwrap();
            let v = b.flatten();
            prop_assert_eq!(dot(&u, &v).unwrap(), dot(&v, &u).unwrap());
            let n = l2_norm(&u);
            prop_assert!((n * n - dot(&u, &u).unwrap()).abs()
                <= 1e-12 * dot(&u, &u).unwrap().max(1.0));
        }

        /// a - b + b recovers a when all values share magnitude (exact in f32).
        #[test]
        fn sub_then_add_on_same_scale_values(vals in proptest::collection::vec(0.5f32..1.0, 1..16)) {
            let a = TensorMap::from_tensors(vec![t("w", vals.clone())]).unwrap();
            let b = TensorMap::from_tensors(vec![t("w", vals.iter().map(|v| v * 0.75).collect())]).unwrap();
            let back = map_add(&map_sub(&a, &b).unwrap(), &b).unwrap();
            // Sterbenz: b/2 <= a <= 2b elementwise makes the subtraction exact.
            prop_assert_eq!(back.get("w").unwrap().data(), a.get("w").unwrap().data());
        }
    }
}
