//! Named parameter storage with per-group freeze flags.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamState};
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    PatchProjection,
    Encoder,
    MaskToken,
    Decoder,
    Predictor,
    Prompt,
    ForecastHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::PatchProjection,
        ParamGroup::Encoder,
        ParamGroup::MaskToken,
        ParamGroup::Decoder,
        ParamGroup::Predictor,
        ParamGroup::Prompt,
        ParamGroup::ForecastHead,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::PatchProjection => "patch_projection",
            ParamGroup::Encoder => "encoder",
            ParamGroup::MaskToken => "mask_token",
            ParamGroup::Decoder => "decoder",
            ParamGroup::Predictor => "predictor",
            ParamGroup::Prompt => "prompt",
            ParamGroup::ForecastHead => "forecast_head",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        ParamGroup::ALL.into_iter().find(|g| g.as_str() == s)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

/// Leaf vars for every parameter on one tape.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Binding from vars already on a tape, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Binding { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    frozen: BTreeSet<ParamGroup>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name(&name).is_some() {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        let tensor = tensor.with_requires_grad(!self.frozen.contains(&group));
        self.params.push(Param { name, group, tensor });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Groups that own at least one parameter.
    pub fn groups(&self) -> BTreeSet<ParamGroup> {
        self.params.iter().map(|p| p.group).collect()
    }

    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        self.frozen.contains(&group)
    }

    pub fn set_frozen(&mut self, group: ParamGroup, frozen: bool) {
        if frozen {
            self.frozen.insert(group);
        } else {
            self.frozen.remove(&group);
        }
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.tensor.set_requires_grad(!frozen);
        }
    }

    /// Freezes every group except those in `trainable`.
    pub fn train_only(&mut self, trainable: &[ParamGroup]) {
        for g in ParamGroup::ALL {
            self.set_frozen(g, !trainable.contains(&g));
        }
    }

    pub fn trainable_groups(&self) -> BTreeSet<ParamGroup> {
        self.groups().into_iter().filter(|g| !self.is_frozen(*g)).collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> Binding {
        Binding {
            vars: self.params.iter().map(|p| tape.leaf(&p.tensor)).collect(),
        }
    }

    /// Adds the tape gradients into each trainable parameter.
    pub fn accumulate(&mut self, binding: &Binding, grads: &Gradients) -> Result<()> {
        for (p, v) in self.params.iter_mut().zip(&binding.vars) {
            if let Some(g) = grads.get(*v) {
                p.tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Adam update over trainable parameters that hold a gradient, then clears
    /// gradients.
    pub fn adam_step(&mut self, state: &mut AdamState) -> Result<()> {
        let mut grads = Vec::new();
        for p in &self.params {
            if !self.frozen.contains(&p.group) {
                if let Some(g) = p.tensor.grad() {
                    grads.push((p.name.clone(), g.to_vec()));
                }
            }
        }
        let mut items = Vec::with_capacity(grads.len());
        let mut gi = grads.iter().peekable();
        for p in self.params.iter_mut() {
            if let Some((name, g)) = gi.peek() {
                if *name == p.name {
                    items.push((name.as_str(), &mut p.tensor, g.as_slice()));
                    gi.next();
                }
            }
        }
        adam_step(items, state)?;
        self.zero_grad();
        Ok(())
    }

    pub fn count(&self, group: ParamGroup) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.tensor.len()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !self.frozen.contains(&p.group))
            .map(|p| p.tensor.len())
            .sum()
    }

    /// SHA-256 over the names, shapes and little-endian bytes of a group.
    pub fn group_hash(&self, group: ParamGroup) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            h.update(p.name.as_bytes());
            for d in p.tensor.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in p.tensor.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn l2_grad_norm(&self, group: ParamGroup) -> f64 {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .filter_map(|p| p.tensor.grad())
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn freeze_flags_follow_groups() {
        let mut s = ParamStore::new();
        let a = s.add("a", ParamGroup::Encoder, Tensor::zeros(vec![2])).unwrap();
        let b = s.add("b", ParamGroup::Prompt, Tensor::zeros(vec![3])).unwrap();
        s.train_only(&[ParamGroup::Prompt]);
        assert!(!s.tensor(a).requires_grad());
        assert!(s.tensor(b).requires_grad());
        assert_eq!(s.trainable_count(), 3);
        assert_eq!(s.total_count(), 5);
        assert!(s.add("a", ParamGroup::Decoder, Tensor::zeros(vec![1])).is_err());
    }

    #[test]
    fn frozen_group_is_untouched_by_adam() {
        let mut s = ParamStore::new();
        let a = s.add("a", ParamGroup::Encoder, Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let b = s.add("b", ParamGroup::Prompt, Tensor::zeros(vec![2])).unwrap();
        s.train_only(&[ParamGroup::Prompt]);
        let before = s.group_hash(ParamGroup::Encoder);
        let mut tape = Tape::new();
        let bind = s.bind(&mut tape);
        let m = tape.mul(bind.var(a), bind.var(b)).unwrap();
        let loss = tape.sum(m);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(bind.var(a)).is_none());
        s.accumulate(&bind, &grads).unwrap();
        s.adam_step(&mut AdamState::with_lr(0.1)).unwrap();
        assert_eq!(before, s.group_hash(ParamGroup::Encoder));
        assert_ne!(s.tensor(b).data(), &[0.0, 0.0]);
    }
}
