//! Named parameter tensors and their binding into a computation graph.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// The four disjoint parameter groups of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GroupName {
    Encoder,
    Ctc,
    Attention,
    Adversary,
}

impl GroupName {
    pub const ALL: [GroupName; 4] = [
        GroupName::Encoder,
        GroupName::Ctc,
        GroupName::Attention,
        GroupName::Adversary,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GroupName::Encoder => "theta_e",
            GroupName::Ctc => "theta_c",
            GroupName::Attention => "theta_a",
            GroupName::Adversary => "theta_s",
        }
    }
}

impl fmt::Display for GroupName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamGroup {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// A group with the same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        ParamGroup {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Sets every value to zero (used for zero-parameter closed-form checks).
    pub fn fill(&mut self, value: f64) {
        for t in self.tensors.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = value);
        }
    }
}

/// All model parameters, one group per branch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: ParamGroup,
    pub ctc: ParamGroup,
    pub attention: ParamGroup,
    pub adversary: ParamGroup,
}

impl ModelParams {
    pub fn group(&self, name: GroupName) -> &ParamGroup {
        match name {
            GroupName::Encoder => &self.encoder,
            GroupName::Ctc => &self.ctc,
            GroupName::Attention => &self.attention,
            GroupName::Adversary => &self.adversary,
        }
    }

    pub fn group_mut(&mut self, name: GroupName) -> &mut ParamGroup {
        match name {
            GroupName::Encoder => &mut self.encoder,
            GroupName::Ctc => &mut self.ctc,
            GroupName::Attention => &mut self.attention,
            GroupName::Adversary => &mut self.adversary,
        }
    }
}

/// Graph leaves created for a [`ParamGroup`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    nodes: BTreeMap<String, NodeId>,
}

impl Bound {
    /// Adds every tensor of `group` to `g`, as trainable leaves if `trainable`.
    pub fn new(g: &mut Graph, group: &ParamGroup, trainable: bool) -> Self {
        let nodes = group
            .iter()
            .map(|(name, t)| {
                let id = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.clone(), id)
            })
            .collect();
        Bound { nodes }
    }

    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter `{name}` is not bound")))
    }

    /// Replaces the node bound to `name` (e.g. to differentiate with respect
    /// to a single tensor in a gradient check).
    pub fn with_node(mut self, name: &str, id: NodeId) -> Self {
        self.nodes.insert(name.to_string(), id);
        self
    }

    /// Gradients of every bound leaf after `backward` (zeros where none arrived).
    pub fn grads(&self, g: &Graph) -> ParamGroup {
        ParamGroup {
            tensors: self
                .nodes
                .iter()
                .map(|(k, &id)| (k.clone(), g.grad_or_zeros(id)))
                .collect(),
        }
    }
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("glorot shape")
}
