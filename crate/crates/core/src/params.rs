//! Named parameter and batch-norm state storage.
//!
//! Modules hold [`ParamId`]/[`NormId`] handles instead of tensors, so the
//! optimizer and checkpointing can walk a single ordered list.

use rand::RngCore;

use crate::autodiff::{BatchNormConfig, Mode, RunningStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NormId(usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Replaces every value, checking names and shapes line up.
    pub fn load(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.values.len() {
            return Err(Error::Consistency {
                name: "<parameters>".into(),
                detail: format!("expected {} tensors, got {}", self.values.len(), entries.len()),
            });
        }
        for ((slot, current), (name, value)) in self.names.iter().zip(&self.values).zip(&entries) {
            if slot != name || current.shape() != value.shape() {
                return Err(Error::Consistency {
                    name: name.clone(),
                    detail: format!(
                        "expected `{slot}` {:?}, got `{name}` {:?}",
                        current.shape(),
                        value.shape()
                    ),
                });
            }
        }
        self.values = entries.into_iter().map(|(_, v)| v).collect();
        Ok(())
    }

    /// Registers every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        Bindings {
            vars: self.values.iter().map(|v| tape.param(v.clone())).collect(),
        }
    }

    /// Registers every parameter as a constant (no gradients).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bindings {
        Bindings {
            vars: self.values.iter().map(|v| tape.constant(v.clone())).collect(),
        }
    }
}

/// Tape handles for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    /// Wraps handles that were registered in [`ParamStore`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bindings { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NormStore {
    names: Vec<String>,
    stats: Vec<RunningStats>,
}

impl NormStore {
    pub fn add(&mut self, name: impl Into<String>, stats: RunningStats) -> NormId {
        self.names.push(name.into());
        self.stats.push(stats);
        NormId(self.stats.len() - 1)
    }

    pub fn get(&self, id: NormId) -> &RunningStats {
        &self.stats[id.0]
    }

    pub fn get_mut(&mut self, id: NormId) -> &mut RunningStats {
        &mut self.stats[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RunningStats)> {
        self.names.iter().map(String::as_str).zip(&self.stats)
    }

    pub fn load(&mut self, entries: Vec<(String, RunningStats)>) -> Result<()> {
        if entries.len() != self.stats.len() {
            return Err(Error::Consistency {
                name: "<batch norm>".into(),
                detail: format!("expected {} entries, got {}", self.stats.len(), entries.len()),
            });
        }
        for (i, (name, s)) in entries.iter().enumerate() {
            if self.names[i] != *name || self.stats[i].channels() != s.channels() {
                return Err(Error::Consistency {
                    name: name.clone(),
                    detail: format!(
                        "expected `{}` with {} channels",
                        self.names[i],
                        self.stats[i].channels()
                    ),
                });
            }
        }
        self.stats = entries.into_iter().map(|(_, s)| s).collect();
        Ok(())
    }
}

/// Everything a module forward pass needs besides its own handles.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    pub vars: &'a Bindings,
    pub norms: &'a mut NormStore,
    pub mode: Mode,
    pub rng: &'a mut dyn RngCore,
    pub batchnorm: BatchNormConfig,
}

impl Forward<'_> {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars.var(id)
    }
}

/// U(-1/√fan_in, 1/√fan_in)
pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut dyn RngCore) -> Tensor {
    Tensor::uniform(shape.to_vec(), 1.0 / (fan_in as f64).sqrt(), rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn load_checks_names_and_shapes() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::zeros([2]));
        store.add("b", Tensor::zeros([1, 3]));
        assert_eq!(store.scalar_count(), 5);
        assert!(store
            .load(vec![("a".into(), Tensor::ones([2])), ("b".into(), Tensor::ones([3]))])
            .is_err());
        assert!(store
            .load(vec![
                ("b".into(), Tensor::ones([2])),
                ("a".into(), Tensor::ones([1, 3]))
            ])
            .is_err());
        store
            .load(vec![
                ("a".into(), Tensor::ones([2])),
                ("b".into(), Tensor::ones([1, 3])),
            ])
            .unwrap();
        assert_eq!(store.get(store.find("b").unwrap()).sum(), 3.0);
    }
}
