use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Which part of the multi-task model a parameter belongs to: the shared
/// backbone, the fusion head, or the segmentation head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    FusionHead,
    SegHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Backbone, ParamGroup::FusionHead, ParamGroup::SegHead];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::FusionHead => "fusion_head",
            ParamGroup::SegHead => "seg_head",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.as_str() == s)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub group: ParamGroup,
    pub tensor: Tensor<T>,
}

/// Named, ordered parameter collection. Each path carries exactly one group
/// tag, so the groups partition the set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams<T> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Real> ModelParams<T> {
    pub fn new() -> Self {
        Self { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, path: impl Into<String>, group: ParamGroup, tensor: Tensor<T>) -> Result<()> {
        let path = path.into();
        if self.entries.contains_key(&path) {
            return Err(Error::Param { path, msg: "duplicate parameter path".into() });
        }
        self.entries.insert(path, Param { group, tensor });
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Param<T>> {
        self.entries.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Param<T>> {
        self.entries.get_mut(path)
    }

    pub fn tensor(&self, path: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(path)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::Param { path: path.into(), msg: "missing".into() })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Scalar count per group, plus the total.
    pub fn count(&self, group: Option<ParamGroup>) -> usize {
        self.entries.values().filter(|p| group.is_none_or(|g| p.group == g)).map(|p| p.tensor.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| (k.clone(), Param { group: p.group, tensor: p.tensor.cast() }))
                .collect(),
        }
    }

    /// Copies values from `other`, which must hold the same paths, groups and
    /// shapes. Errors name the first disagreeing path.
    pub fn assign_from(&mut self, other: &ModelParams<T>) -> Result<()> {
        for (path, p) in &self.entries {
            let Some(o) = other.entries.get(path) else {
                return Err(Error::Param { path: path.clone(), msg: "missing from source".into() });
            };
            if o.tensor.shape() != p.tensor.shape() {
                return Err(Error::Param {
                    path: path.clone(),
                    msg: format!("shape {:?} does not match expected {:?}", o.tensor.shape(), p.tensor.shape()),
                });
            }
            if o.group != p.group {
                return Err(Error::Param { path: path.clone(), msg: format!("group {} != {}", o.group, p.group) });
            }
        }
        if let Some(extra) = other.entries.keys().find(|k| !self.entries.contains_key(*k)) {
            return Err(Error::Param { path: extra.clone(), msg: "unexpected parameter".into() });
        }
        for (path, p) in self.entries.iter_mut() {
            p.tensor = other.entries[path].tensor.clone();
        }
        Ok(())
    }

    /// Registers every parameter as a trainable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> BoundParams<'t, T> {
        let vars = self.entries.iter().map(|(k, p)| (k.clone(), tape.param(p.tensor.clone()))).collect();
        BoundParams { vars }
    }

    /// Registers every parameter as a constant, for gradient-free passes.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> BoundParams<'t, T> {
        let vars = self.entries.iter().map(|(k, p)| (k.clone(), tape.constant(p.tensor.clone()))).collect();
        BoundParams { vars }
    }
}

/// Parameters registered on a live tape.
pub struct BoundParams<'t, T: Real> {
    vars: IndexMap<String, Var<'t, T>>,
}

impl<'t, T: Real> BoundParams<'t, T> {
    pub fn var(&self, path: &str) -> Result<Var<'t, T>> {
        self.vars.get(path).copied().ok_or_else(|| Error::Param { path: path.into(), msg: "not bound".into() })
    }

    pub fn try_var(&self, path: &str) -> Option<Var<'t, T>> {
        self.vars.get(path).copied()
    }

    /// Gradients after backward, keyed like the source [`ModelParams`].
    pub fn grads(&self) -> Gradients<T> {
        Gradients { entries: self.vars.iter().map(|(k, v)| (k.clone(), v.grad())).collect() }
    }
}

#[derive(Clone, Debug)]
pub struct Gradients<T> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, path: &str) -> Option<&Tensor<T>> {
        self.entries.get(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Flattened concatenation over the parameters of `group`, in parameter order.
    pub fn flatten_group(&self, params: &ModelParams<T>, group: ParamGroup) -> Vec<T> {
        self.entries
            .iter()
            .filter(|(k, _)| params.get(k).is_some_and(|p| p.group == group))
            .flat_map(|(_, g)| g.data().iter().copied())
            .collect()
    }

    /// First parameter whose gradient holds a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries.iter().find(|(_, g)| !g.all_finite()).map(|(k, _)| k.as_str())
    }
}
