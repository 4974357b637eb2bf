use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Named collection of parameter tensors.
///
/// Serialized as a JSON object mapping each name to `{shape, data}`. Names are
/// kept sorted so the encoding is canonical.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Merges `other` into `self`; names must not collide.
    pub fn extend(&mut self, other: ParamSet) -> Result<()> {
        for (name, t) in other.tensors {
            if self.tensors.contains_key(&name) {
                return Err(Error::Contract(format!("duplicate parameter `{name}`")));
            }
            self.tensors.insert(name, t);
        }
        Ok(())
    }

    /// Subset containing the parameters whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_same_layout(&self, other: &ParamSet) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::shape(
                "param set",
                format!("{} vs {} tensors", self.tensors.len(), other.tensors.len()),
            ));
        }
        for ((ka, va), (kb, vb)) in self.tensors.iter().zip(&other.tensors) {
            if ka != kb {
                return Err(Error::shape("param set", format!("`{ka}` vs `{kb}`")));
            }
            if va.shape() != vb.shape() {
                return Err(Error::shape(
                    format!("param `{ka}`"),
                    format!("{:?} vs {:?}", va.shape(), vb.shape()),
                ));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    pub fn to_json(&self) -> Result<String> {
        if !self.is_finite() {
            return Err(Error::Contract(
                "cannot serialize non-finite parameters".into(),
            ));
        }
        serde_json::to_string(self).map_err(|e| Error::json("<params>", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json("<params>", e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_check_names_offender() {
        let mut a = ParamSet::new();
        a.insert("w", Tensor::zeros(&[2, 2]));
        let mut b = ParamSet::new();
        b.insert("w", Tensor::zeros(&[4]));
        let err = a.check_same_layout(&b).unwrap_err().to_string();
        assert!(err.contains("`w`"), "{err}");
    }

    #[test]
    fn non_finite_values_are_not_serialized() {
        let mut a = ParamSet::new();
        a.insert("w", Tensor::scalar(f64::NAN));
        assert!(a.to_json().is_err());
    }

    proptest! {
        #[test]
        fn json_round_trip_is_bit_exact(values in prop::collection::vec(-1e12f64..1e12, 1..40),
                                        tiny in prop::collection::vec(-1e-300f64..1e-300, 1..5)) {
            let mut p = ParamSet::new();
            p.insert("a.w", Tensor::new(vec![values.len()], values.clone()).unwrap());
            p.insert("b", Tensor::new(vec![tiny.len()], tiny.clone()).unwrap());
            let back = ParamSet::from_json(&p.to_json().unwrap()).unwrap();
            for (name, t) in p.iter() {
                let u = back.get(name).unwrap();
                prop_assert_eq!(t.shape(), u.shape());
                for (x, y) in t.data().iter().zip(u.data()) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }
}
