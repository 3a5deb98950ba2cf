//! Ordered collection of named tensors with per-tensor training flags.

use std::collections::HashMap;
use std::path::Path;

use serde_json::Value;

use crate::engine::{Graph, Grads, Tensor, Var};
use crate::scalar::Scalar;
use crate::tensorfile::{self, TensorBundle};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Appends a tensor; panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool, decay: bool) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            trainable,
            decay,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn param(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub fn param_mut(&mut self, i: usize) -> &mut Param<T> {
        &mut self.params[i]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        &self.params[self.index[name]].value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        let i = self.index[name];
        &mut self.params[i].value
    }

    /// `(trainable, frozen)` scalar counts.
    pub fn counts(&self) -> (usize, usize) {
        self.params.iter().fold((0, 0), |(t, f), p| {
            if p.trainable {
                (t + p.value.len(), f)
            } else {
                (t, f + p.value.len())
            }
        })
    }

    /// Places every tensor on `g`: trainable ones as parameters, the rest
    /// as constants.
    pub fn bind(&self, g: &Graph<T>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if p.trainable {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Gradients aligned with the parameter order; `None` for frozen or
    /// unreached tensors.
    pub fn collect_grads(&self, grads: &mut Grads<T>, vars: &[Var]) -> Vec<Option<Vec<T>>> {
        self.params
            .iter()
            .zip(vars)
            .map(|(p, &v)| if p.trainable { grads.take(v) } else { None })
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for p in &self.params {
            out.add(p.name.clone(), p.value.cast(), p.trainable, p.decay);
        }
        out
    }

    /// Saves all tensors; flags travel in the metadata.
    pub fn save(&self, path: impl AsRef<Path>, meta: Value) -> tensorfile::Result<()> {
        let flags: Vec<Value> = self
            .params
            .iter()
            .map(|p| serde_json::json!({"name": p.name, "trainable": p.trainable, "decay": p.decay}))
            .collect();
        let meta = serde_json::json!({"info": meta, "params": flags});
        let refs: Vec<(&str, &Tensor<T>)> = self.params.iter().map(|p| (p.name.as_str(), &p.value)).collect();
        tensorfile::save_tensors(path, &meta, &refs)
    }

    /// Inverse of [`ParamSet::save`]; returns the caller's metadata.
    pub fn load(path: impl AsRef<Path>) -> tensorfile::Result<(Self, Value)> {
        let path = path.as_ref();
        let bundle: TensorBundle<T> = tensorfile::load_tensors(path)?;
        let bad = |detail: &str| tensorfile::TensorFileError::Format {
            path: path.display().to_string(),
            detail: detail.to_string(),
        };
        let flags = bundle.meta["params"].as_array().ok_or_else(|| bad("missing parameter flags"))?;
        if flags.len() != bundle.tensors.len() {
            return Err(bad("flag count differs from tensor count"));
        }
        let mut set = ParamSet::new();
        for ((name, t), f) in bundle.tensors.into_iter().zip(flags) {
            if f["name"].as_str() != Some(name.as_str()) {
                return Err(bad("flag order differs from tensor order"));
            }
            set.add(
                name,
                t,
                f["trainable"].as_bool().unwrap_or(true),
                f["decay"].as_bool().unwrap_or(false),
            );
        }
        Ok((set, bundle.meta["info"].clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let mut s = ParamSet::<f32>::new();
        s.add("w", Tensor::filled(&[2, 2], 0.5), true, true);
        s.add("table", Tensor::filled(&[3], -1.0), false, false);
        assert_eq!(s.counts(), (4, 3));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.bin");
        s.save(&p, serde_json::json!({"step": 4})).unwrap();
        let (back, meta) = ParamSet::<f32>::load(&p).unwrap();
        assert_eq!(back, s);
        assert_eq!(meta["step"], 4);
    }

    #[test]
    fn bind_marks_frozen_as_constants() {
        let mut s = ParamSet::<f64>::new();
        s.add("a", Tensor::scalar(2.0), true, false);
        s.add("b", Tensor::scalar(3.0), false, false);
        let g = Graph::new();
        let v = s.bind(&g);
        let y = g.mul(v[0], v[1]).unwrap();
        let mut grads = g.backward(y).unwrap();
        let gs = s.collect_grads(&mut grads, &v);
        assert_eq!(gs[0].as_deref(), Some(&[3.0][..]));
        assert!(gs[1].is_none());
    }
}
