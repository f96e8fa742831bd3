use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::{Rng, Scalar, Tape, Tensor, Var};

use super::spec::{BlockStyle, MaskRole, ModelSpec};

/// Rng stream for backbone weights. Mask-module weights use their own stream
/// so a merging model and its no-merge twin share every backbone weight.
pub const BACKBONE_STREAM: u64 = 0;
pub const MASK_STREAM: u64 = 1;

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = value;
        } else {
            self.index.insert(name.clone(), self.names.len());
            self.names.push(name);
            self.tensors.push(value);
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Records every tensor on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// Deterministic initial weights for `spec`.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut bb = Rng::with_stream(seed, BACKBONE_STREAM);
        let mut mk = Rng::with_stream(seed, MASK_STREAM);
        let mut s = ParamStore::default();
        let d = spec.dim;

        s.insert("embed.weight", fan_in(&mut bb, spec.patch_dim(), d));
        s.insert("embed.bias", Tensor::zeros(&[d]));
        if spec.positional {
            s.insert("embed.pos", bb.normal_tensor(&[spec.tokens(), d], 0.02));
        }
        for b in spec.layout()? {
            let p = |k: &str| format!("blocks.{}.{k}", b.index);
            if b.style == BlockStyle::Efficient {
                s.insert(p("local.weight"), fan_in(&mut bb, d, d));
                s.insert(p("local.bias"), Tensor::zeros(&[d]));
            }
            s.insert(p("ln1.gamma"), Tensor::ones(&[d]));
            s.insert(p("ln1.beta"), Tensor::zeros(&[d]));
            let dh = spec.head_dim();
            for h in 0..spec.heads {
                for w in ["wq", "wk", "wv"] {
                    s.insert(p(&format!("attn.{w}.h{h}")), fan_in(&mut bb, d, dh));
                }
                s.insert(p(&format!("attn.wo.h{h}")), fan_in(&mut bb, dh, d));
            }
            if b.style == BlockStyle::Efficient {
                // The pair acts as one [2D, D] fusion layer.
                let std = (0.5 / d as f64).sqrt();
                s.insert(p("fuse.x"), bb.normal_tensor(&[d, d], std));
                s.insert(p("fuse.z"), bb.normal_tensor(&[d, d], std));
                s.insert(p("fuse.bias"), Tensor::zeros(&[d]));
            }
            s.insert(p("ln2.gamma"), Tensor::ones(&[d]));
            s.insert(p("ln2.beta"), Tensor::zeros(&[d]));
            let hidden = d * spec.mlp_ratio;
            s.insert(p("mlp.fc1.weight"), fan_in(&mut bb, d, hidden));
            s.insert(p("mlp.fc1.bias"), Tensor::zeros(&[hidden]));
            s.insert(p("mlp.fc2.weight"), fan_in(&mut bb, hidden, d));
            s.insert(p("mlp.fc2.bias"), Tensor::zeros(&[d]));

            match b.role {
                MaskRole::None => {}
                MaskRole::Init => {
                    s.insert(p("mask.f.weight"), fan_in(&mut mk, d, b.merged));
                    s.insert(p("mask.f.bias"), Tensor::zeros(&[b.merged]));
                }
                MaskRole::Chained => {
                    s.insert(p("mask.mlp.fc1.weight"), fan_in(&mut mk, d, d));
                    s.insert(p("mask.mlp.fc1.bias"), Tensor::zeros(&[d]));
                    s.insert(p("mask.mlp.fc2.weight"), Tensor::zeros(&[d, d]));
                    s.insert(p("mask.mlp.fc2.bias"), Tensor::zeros(&[d]));
                }
            }
        }
        s.insert("head.weight", fan_in(&mut bb, d, spec.classes));
        s.insert("head.bias", Tensor::zeros(&[spec.classes]));
        Ok(s)
    }
}

fn fan_in<T: Scalar>(rng: &mut Rng, fan: usize, out: usize) -> Tensor<T> {
    rng.normal_tensor(&[fan, out], (1.0 / fan as f64).sqrt())
}

/// Tape handles for a [`ParamStore`], looked up by name.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    /// Handles in store order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Whether `name` belongs to a mask module.
pub fn is_mask_param(name: &str) -> bool {
    name.contains(".mask.")
}
