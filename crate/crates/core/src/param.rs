//! Named parameters, their optimizer groups, and non-trainable buffers.

use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::error::{contract_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which part of the BURN setup a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Trainable classifier on top of the frozen teacher extractor.
    FpClassifier,
    /// Binary feature extractor (and its feature adapter).
    BinaryExtractor,
    /// Classifier head of the binary student.
    BinaryClassifier,
    /// Never updated and never receives gradients.
    Frozen,
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub group: ParamGroup,
}

static NEXT_SET_ID: AtomicU64 = AtomicU64::new(1);

/// Parameters and buffers of one network, in registration order.
#[derive(Debug)]
pub struct ParamSet {
    id: u64,
    params: Vec<Parameter>,
    buffers: Vec<(String, Tensor)>,
}

impl Clone for ParamSet {
    fn clone(&self) -> Self {
        ParamSet {
            id: NEXT_SET_ID.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
            buffers: self.buffers.clone(),
        }
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        ParamSet::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            id: NEXT_SET_ID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    fn name_taken(&self, name: &str) -> bool {
        self.params.iter().any(|p| p.name == name) || self.buffers.iter().any(|(n, _)| n == name)
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, group: ParamGroup) -> Result<usize> {
        let name = name.into();
        if self.name_taken(&name) {
            return contract_err(format!("duplicate parameter name `{name}`"));
        }
        let tensor = tensor.with_requires_grad(group != ParamGroup::Frozen);
        self.params.push(Parameter { name, tensor, group });
        Ok(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<usize> {
        let name = name.into();
        if self.name_taken(&name) {
            return contract_err(format!("duplicate buffer name `{name}`"));
        }
        self.buffers.push((name, tensor));
        Ok(self.buffers.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param(&self, idx: usize) -> &Parameter {
        &self.params[idx]
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn buffer(&self, idx: usize) -> &Tensor {
        &self.buffers[idx].1
    }

    pub fn buffer_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.buffers[idx].1
    }

    pub fn buffers(&self) -> &[(String, Tensor)] {
        &self.buffers
    }

    /// Moves every parameter of `group` into `to`.
    pub fn regroup(&mut self, from: ParamGroup, to: ParamGroup) {
        for p in self.params.iter_mut().filter(|p| p.group == from) {
            p.group = to;
            p.tensor.set_requires_grad(to != ParamGroup::Frozen);
            p.tensor.zero_grad();
        }
    }

    /// Puts parameter `idx` on the tape. Frozen parameters enter as
    /// constants so no gradient is ever computed for them.
    pub fn bind(&self, tape: &mut Tape, idx: usize) -> Var {
        let p = &self.params[idx];
        tape.bind(self.id, idx, &p.tensor, p.group != ParamGroup::Frozen)
    }

    /// Adds the gradients of all parameters this set bound on `tape`.
    pub fn collect_grads(&mut self, tape: &Tape) {
        for b in tape.bindings().iter().filter(|b| b.set_id == self.id) {
            if let Some(g) = tape.grad(b.var) {
                self.params[b.index].tensor.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// SHA-256 over names, shapes and values of parameters and buffers.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        let all = self
            .params
            .iter()
            .map(|p| (&p.name, &p.tensor))
            .chain(self.buffers.iter().map(|(n, t)| (n, t)));
        for (name, t) in all {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Hash restricted to one parameter group (buffers excluded).
    pub fn group_hash(&self, group: ParamGroup) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            h.update(p.name.as_bytes());
            for v in p.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Writes parameters and buffers into `ck` under `prefix`.
    pub fn export(&self, ck: &mut Checkpoint, prefix: &str, filter: impl Fn(&str) -> bool) {
        for p in &self.params {
            if filter(&p.name) {
                ck.insert(format!("{prefix}{}", p.name), &p.tensor);
            }
        }
        for (n, t) in &self.buffers {
            if filter(n) {
                ck.insert(format!("{prefix}{n}"), t);
            }
        }
    }

    /// Overwrites every parameter and buffer accepted by `filter` with the
    /// tensor of the same name under `prefix`. Names and shapes must match.
    pub fn import(&mut self, ck: &Checkpoint, prefix: &str, filter: impl Fn(&str) -> bool) -> Result<()> {
        let lookup = |name: &str, want: &Tensor| -> Result<Tensor> {
            let full = format!("{prefix}{name}");
            let t = ck.get(&full).ok_or_else(|| Error::Load {
                name: full.clone(),
                msg: "missing from checkpoint".into(),
            })?;
            if t.shape() != want.shape() {
                return Err(Error::Load {
                    name: full,
                    msg: format!("shape {:?}, expected {:?}", t.shape(), want.shape()),
                });
            }
            Ok(t.clone())
        };
        for p in self.params.iter_mut().filter(|p| filter(&p.name)) {
            let t = lookup(&p.name, &p.tensor)?;
            let rg = p.tensor.requires_grad();
            p.tensor = t.with_requires_grad(rg);
        }
        for (n, buf) in self.buffers.iter_mut().filter(|(n, _)| filter(n)) {
            *buf = lookup(n, buf)?;
        }
        Ok(())
    }
}
