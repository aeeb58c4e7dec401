//! Named parameter storage and the per-step tape binding.

use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, VId};
use crate::tensor::Tensor4D;
use std::collections::HashMap;

/// How the optimizer treats a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Optimized with weight decay (conv/linear kernels).
    Weight,
    /// Optimized without decay (biases, normalization scale/shift).
    Gain,
    /// Never optimized (running statistics); copied verbatim at EMA time.
    Buffer,
}

/// Ordered map of named tensors. Iteration order is insertion order, which is
/// fixed by network construction and therefore deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor4D>,
    kinds: Vec<ParamKind>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, kind: ParamKind, value: Tensor4D) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::Integrity(format!("duplicate parameter `{name}`")));
        }
        let idx = self.names.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.kinds.push(kind);
        self.index.insert(name.to_string(), idx);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn idx(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn kind(&self, idx: usize) -> ParamKind {
        self.kinds[idx]
    }

    pub fn value(&self, idx: usize) -> &Tensor4D {
        &self.values[idx]
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Tensor4D {
        &mut self.values[idx]
    }

    pub fn get(&self, name: &str) -> Result<&Tensor4D> {
        self.idx(name)
            .map(|i| &self.values[i])
            .ok_or_else(|| Error::Integrity(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor4D> {
        match self.idx(name) {
            Some(i) => Ok(&mut self.values[i]),
            None => Err(Error::Integrity(format!("missing parameter `{name}`"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ParamKind, &Tensor4D)> {
        self.names
            .iter()
            .zip(&self.kinds)
            .zip(&self.values)
            .map(|((n, &k), v)| (n.as_str(), k, v))
    }

    /// Copy containing only the entries `keep` accepts, preserving order.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> ParamSet {
        let mut out = ParamSet::new();
        for (n, k, v) in self.iter() {
            if keep(n) {
                out.insert(n, k, v.clone()).expect("names stay unique");
            }
        }
        out
    }
}

/// Whether normalization layers use batch or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Momentum for folding batch statistics into running estimates.
pub const BN_MOMENTUM: f32 = 0.9;

/// Binds a [`ParamSet`] to a tape for one forward/backward pass: parameters
/// become leaves on first use, and train-mode batch-norm layers queue running
/// statistic updates for the caller to apply after the step.
pub struct TapeBind<'a> {
    pub tape: &'a mut Tape,
    params: &'a ParamSet,
    pub mode: Mode,
    track_grads: bool,
    ids: Vec<Option<VId>>,
    stat_updates: Vec<(usize, Vec<f32>)>,
}

impl<'a> TapeBind<'a> {
    /// The bound parameter set (outlives this binding's borrow of it).
    pub fn param_set(&self) -> &'a ParamSet {
        self.params
    }

    pub fn new(tape: &'a mut Tape, params: &'a ParamSet, mode: Mode, track_grads: bool) -> Self {
        let ids = vec![None; params.len()];
        TapeBind {
            tape,
            params,
            mode,
            track_grads,
            ids,
            stat_updates: Vec::new(),
        }
    }

    /// Tape id of a parameter, registering it as a leaf on first use.
    pub fn param(&mut self, name: &str) -> Result<VId> {
        let idx = self
            .params
            .idx(name)
            .ok_or_else(|| Error::Integrity(format!("missing parameter `{name}`")))?;
        if let Some(id) = self.ids[idx] {
            return Ok(id);
        }
        let id = self
            .tape
            .leaf(self.params.value(idx).clone(), self.track_grads);
        self.ids[idx] = Some(id);
        Ok(id)
    }

    /// Raw tensor of a buffer (running statistics).
    pub fn buffer(&self, name: &str) -> Result<&Tensor4D> {
        self.params.get(name)
    }

    /// Queues `running <- momentum * running + (1 - momentum) * batch`.
    /// Multiple passes in one step compound in call order.
    pub fn queue_stat_update(&mut self, name: &str, batch_stat: &[f32]) -> Result<()> {
        let idx = self
            .params
            .idx(name)
            .ok_or_else(|| Error::Integrity(format!("missing parameter `{name}`")))?;
        let base: Vec<f32> = match self.stat_updates.iter().rev().find(|(i, _)| *i == idx) {
            Some((_, pending)) => pending.clone(),
            None => self.params.value(idx).data().to_vec(),
        };
        let updated = base
            .iter()
            .zip(batch_stat)
            .map(|(&r, &b)| BN_MOMENTUM * r + (1.0 - BN_MOMENTUM) * b)
            .collect();
        self.stat_updates.push((idx, updated));
        Ok(())
    }

    /// Gradient accumulated for a parameter this pass, if any flowed.
    pub fn grad_of(&self, name: &str) -> Option<&Tensor4D> {
        let idx = self.params.idx(name)?;
        let id = self.ids[idx]?;
        self.tape.grad(id)
    }

    /// `(param index, tape id)` for every parameter touched this pass.
    pub fn touched(&self) -> Vec<(usize, VId)> {
        self.ids
            .iter()
            .enumerate()
            .filter_map(|(i, id)| id.map(|v| (i, v)))
            .collect()
    }

    /// Queued running-stat updates, to apply after the step.
    pub fn take_stat_updates(&mut self) -> Vec<(usize, Vec<f32>)> {
        std::mem::take(&mut self.stat_updates)
    }
}

/// Applies queued running-statistic updates.
pub fn apply_stat_updates(params: &mut ParamSet, updates: Vec<(usize, Vec<f32>)>) {
    for (idx, data) in updates {
        params.value_mut(idx).data_mut().copy_from_slice(&data);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_and_duplicates() {
        let mut ps = ParamSet::new();
        ps.insert("a.w", ParamKind::Weight, Tensor4D::zeros(1, 1, 1, 1)).unwrap();
        ps.insert("a.b", ParamKind::Gain, Tensor4D::zeros(1, 1, 1, 1)).unwrap();
        assert!(ps.insert("a.w", ParamKind::Weight, Tensor4D::zeros(1, 1, 1, 1)).is_err());
        let names: Vec<_> = ps.iter().map(|(n, _, _)| n.to_string()).collect();
        assert_eq!(names, vec!["a.w", "a.b"]);
    }

    #[test]
    fn filtered_preserves_order() {
        let mut ps = ParamSet::new();
        for n in ["enc.w", "pred.w", "proj.w"] {
            ps.insert(n, ParamKind::Weight, Tensor4D::zeros(1, 1, 1, 1)).unwrap();
        }
        let f = ps.filtered(|n| !n.starts_with("pred."));
        assert_eq!(f.len(), 2);
        assert_eq!(f.name(0), "enc.w");
        assert_eq!(f.name(1), "proj.w");
    }

    #[test]
    fn stat_update_blends_with_momentum() {
        let mut ps = ParamSet::new();
        ps.insert(
            "bn.rm",
            ParamKind::Buffer,
            Tensor4D::from_vec(1, 2, 1, 1, vec![1.0, -1.0]).unwrap(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let mut bind = TapeBind::new(&mut tape, &ps, Mode::Train, true);
        bind.queue_stat_update("bn.rm", &[0.0, 0.0]).unwrap();
        let ups = bind.take_stat_updates();
        apply_stat_updates(&mut ps, ups);
        assert_eq!(ps.get("bn.rm").unwrap().data(), &[0.9, -0.9]);
    }
}
