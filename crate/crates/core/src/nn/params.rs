use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD};

use super::Scalar;

/// Handle to a tensor in a [`Params`] registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Flat registry of named parameter tensors for one network.
///
/// Layers hold [`ParamId`] handles; the optimizer, the checkpoint writer and
/// gradient buffers all address parameters by index. Non-trainable entries
/// (batch-norm running statistics) are saved and restored but skipped by the
/// optimizer.
#[derive(Debug, Clone)]
pub struct Params<F> {
    names: Vec<String>,
    values: Vec<ArrayD<F>>,
    trainable: Vec<bool>,
}

impl<F: Scalar> Params<F> {
    pub fn new() -> Self {
        Params {
            names: Vec::new(),
            values: Vec::new(),
            trainable: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<F>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(trainable);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn get(&self, id: ParamId) -> ArrayViewD<'_, F> {
        self.values[id.0].view()
    }

    pub fn get_mut(&mut self, id: ParamId) -> ArrayViewMutD<'_, F> {
        self.values[id.0].view_mut()
    }

    pub fn tensor(&self, id: ParamId) -> &ArrayD<F> {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: ArrayD<F>) {
        assert_eq!(
            self.values[id.0].shape(),
            value.shape(),
            "shape mismatch assigning {}",
            self.names[id.0]
        );
        self.values[id.0] = value;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>, bool)> {
        self.names
            .iter()
            .zip(self.values.iter())
            .zip(self.trainable.iter())
            .map(|((n, v), t)| (n.as_str(), v, *t))
    }

    /// Total number of scalar elements across all tensors.
    pub fn num_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }
}

impl<F: Scalar> Default for Params<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient accumulator aligned with a [`Params`] registry.
///
/// Slots are lazily allocated; layers accumulate into them during backward.
#[derive(Debug)]
pub struct Grads<F> {
    slots: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn new(params: &Params<F>) -> Self {
        Grads {
            slots: (0..params.len()).map(|_| None).collect(),
        }
    }

    /// Add `grad` into the slot for `id`.
    pub fn accumulate(&mut self, id: ParamId, grad: ArrayD<F>) {
        match &mut self.slots[id.0] {
            Some(acc) => {
                assert_eq!(acc.shape(), grad.shape(), "gradient shape mismatch");
                *acc += &grad;
            }
            slot => *slot = Some(grad),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<ArrayViewD<'_, F>> {
        self.slots[id.0].as_ref().map(|g| g.view())
    }

    /// Gradient slot, or a zero tensor of the parameter's shape.
    pub fn get_or_zeros(&self, id: ParamId, params: &Params<F>) -> ArrayD<F> {
        match &self.slots[id.0] {
            Some(g) => g.clone(),
            None => ArrayD::zeros(params.get(id).raw_dim()),
        }
    }

    pub fn clear(&mut self) {
        for s in &mut self.slots {
            *s = None;
        }
    }
}
