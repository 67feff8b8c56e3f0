//! Named parameter storage and tape binding.
//!
//! Parameters live as plain named arrays in a [`ParamSet`] (shareable,
//! serializable). A [`Binder`] lends them onto a tape for one forward pass:
//! as gradient leaves when training, as constants otherwise. Each name
//! binds once per tape so gradients accumulate correctly across reuses.

use std::cell::RefCell;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Param {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Param> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::shape(format!(
                "parameter shape {:?} implies {} values, got {}",
                shape,
                n,
                values.len()
            )));
        }
        Ok(Param { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Param {
        let n = shape.iter().product();
        Param {
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.values.clone()).expect("param invariant")
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Ordered name → parameter map. Iteration order is deterministic.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamSet {
    map: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) {
        self.map.insert(name.into(), param);
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.map
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter: {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter: {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// First name where `self` and `other` disagree on presence or shape.
    pub fn first_incompatibility(&self, other: &ParamSet) -> Option<String> {
        for (name, p) in &self.map {
            match other.map.get(name) {
                None => return Some(format!("missing parameter {name}")),
                Some(q) if q.shape != p.shape => {
                    return Some(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        q.shape, p.shape
                    ))
                }
                _ => {}
            }
        }
        other
            .map
            .keys()
            .find(|k| !self.map.contains_key(*k))
            .map(|k| format!("unexpected parameter {k}"))
    }

    pub fn bitwise_eq(&self, other: &ParamSet) -> bool {
        self.map.len() == other.map.len()
            && self.map.iter().zip(&other.map).all(|((an, ap), (bn, bp))| {
                an == bn
                    && ap.shape == bp.shape
                    && ap
                        .values
                        .iter()
                        .zip(&bp.values)
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Running batch-normalization statistics for one site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnState {
    pub fn init(channels: usize) -> BnState {
        BnState {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Exponential moving average update with the conventional 0.1 blend.
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        const BLEND: f64 = 0.1;
        for (r, &b) in self.mean.iter_mut().zip(batch_mean) {
            *r = (1.0 - BLEND) * *r + BLEND * b;
        }
        for (r, &b) in self.var.iter_mut().zip(batch_var) {
            *r = (1.0 - BLEND) * *r + BLEND * b;
        }
    }
}

/// Lends parameters onto one tape. `train` binds gradient leaves;
/// otherwise parameters enter as constants.
pub struct Binder<'a> {
    tape: &'a Tape,
    params: &'a ParamSet,
    train: bool,
    bound: RefCell<BTreeMap<String, Tensor>>,
}

impl<'a> Binder<'a> {
    pub fn new(tape: &'a Tape, params: &'a ParamSet, train: bool) -> Binder<'a> {
        Binder {
            tape,
            params,
            train,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn train(&self) -> bool {
        self.train
    }

    pub fn tape(&self) -> &'a Tape {
        self.tape
    }

    pub fn params(&self) -> &'a ParamSet {
        self.params
    }

    /// Tensor view of a named parameter on this tape.
    pub fn get(&self, name: &str) -> Result<Tensor> {
        if let Some(t) = self.bound.borrow().get(name) {
            return Ok(t.clone());
        }
        let param = self.params.get(name)?;
        let t = if self.train {
            self.tape.leaf(&param.tensor())
        } else {
            param.tensor()
        };
        self.bound.borrow_mut().insert(name.to_string(), t.clone());
        Ok(t)
    }

    /// Gradients populated by a completed backward pass, keyed by name.
    /// Bound parameters that received no gradient are omitted.
    pub fn grads(&self) -> BTreeMap<String, Vec<f64>> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(name, t)| t.grad().map(|g| (name.clone(), g)))
            .collect()
    }
}
