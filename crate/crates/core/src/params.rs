//! Named parameter storage and the checkpoint format.
//!
//! Checkpoint layout (little-endian): `u32` entry count, then per entry a
//! `u32` byte length, the UTF-8 name, and the tensor in its binary encoding.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{Grads, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{read_u32, Tensor};

/// Ordered set of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Gradient of the loss with respect to one named parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub with_respect_to: String,
    pub value: Tensor,
}

/// Parameters placed on a [`Graph`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    /// Pairs `names` with already-created graph nodes, in order.
    pub fn from_vars(names: &[String], vars: &[Var]) -> Self {
        Self {
            vars: vars.to_vec(),
            index: names
                .iter()
                .enumerate()
                .map(|(i, n)| (n.clone(), i))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Argument(format!("unknown parameter {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.names.iter().position(|n| *n == name) {
            Some(i) => self.tensors[i] = t,
            None => {
                self.names.push(name);
                self.tensors.push(t);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Places every parameter on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        let index = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Bound { vars, index }
    }

    /// Collects per-parameter gradients after a backward pass.
    pub fn gradients(&self, bound: &Bound, grads: &Grads) -> Vec<Gradient> {
        self.names
            .iter()
            .zip(&self.tensors)
            .zip(&bound.vars)
            .map(|((n, t), &v)| Gradient {
                with_respect_to: n.clone(),
                value: grads.get_or_zeros(v, t.shape()),
            })
            .collect()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&(self.names.len() as u32).to_le_bytes())?;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            t.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let count = read_u32(r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            if len > 4096 {
                return Err(Error::Format(format!("parameter name of {len} bytes")));
            }
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)
                .map_err(|e| Error::Format(format!("truncated parameter name: {e}")))?;
            let name = String::from_utf8(buf)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let t = Tensor::read_from(r)
                .map_err(|e| Error::Format(format!("parameter {name}: {e}")))?;
            store.insert(name, t);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}
