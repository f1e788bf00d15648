//! Named trainable parameters with a stable iteration order.

use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParameterStore`]. Ids are assigned in
/// creation order and stay stable for the lifetime of the store, so they
/// double as the canonical checkpoint ordering.
pub type ParamId = usize;

/// What a parameter is, for optimizer policy. Weight decay applies only to
/// `Matrix`; biases, norm scales/shifts, and embedding tables are exempt.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Matrix,
    Bias,
    Norm,
    Embedding,
}

/// Learning-rate group for layer-wise decay during fine-tuning.
///
/// With decay `d` and encoder depth `n`: `Input` (patch embed + encoder
/// positions) gets `d^(n+1)`, `EncoderBlock(i)` gets `d^(n-i)`, and `Head`
/// (everything from the encoder's final norm onward, including the whole
/// decoder) gets `1.0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerGroup {
    Input,
    EncoderBlock(usize),
    Head,
}

#[derive(Debug)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub group: LayerGroup,
    pub tensor: Tensor,
}

/// Ordered collection of trainable tensors. Names are unique; iteration
/// order is creation order, which is fixed by the model-building code and
/// therefore deterministic for a given config.
#[derive(Debug, Default)]
pub struct ParameterStore {
    params: Vec<Param>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        kind: ParamKind,
        group: LayerGroup,
        shape: Vec<usize>,
        data: Vec<f64>,
    ) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name:?}"
        );
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "parameter {name:?}: shape {shape:?} does not match data length {}",
            data.len()
        );
        let id = self.params.len();
        self.params.push(Param {
            name,
            kind,
            group,
            tensor: Tensor::with_grad_slot(shape, data),
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().enumerate()
    }

    /// Total number of scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.data.len()).sum()
    }

    /// Add `grads[id]` into each parameter's grad slot. Accumulation happens
    /// in id order so the reduction is bit-deterministic.
    pub fn accumulate_grads(&mut self, grads: &[Option<Vec<f64>>]) {
        assert_eq!(grads.len(), self.params.len());
        for (param, g) in self.params.iter_mut().zip(grads) {
            if let Some(g) = g {
                let slot = param
                    .tensor
                    .grad
                    .get_or_insert_with(|| vec![0.0; param.tensor.data.len()]);
                assert_eq!(slot.len(), g.len());
                for (s, x) in slot.iter_mut().zip(g) {
                    *s += x;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.grad = None;
        }
    }

    /// Give every parameter a grad buffer, zero where nothing accumulated.
    /// A parameter the loss never reached has gradient zero, which is not
    /// the same as a missing buffer (that would be a caller bug).
    pub fn ensure_grads(&mut self) {
        for p in &mut self.params {
            p.tensor
                .grad
                .get_or_insert_with(|| vec![0.0; p.tensor.data.len()]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_follow_creation_order() {
        let mut store = ParameterStore::new();
        let a = store.add("a", ParamKind::Matrix, LayerGroup::Head, vec![2], vec![0.0; 2]);
        let b = store.add("b", ParamKind::Bias, LayerGroup::Head, vec![1], vec![0.0]);
        assert_eq!((a, b), (0, 1));
        let names: Vec<&str> = store.iter().map(|(_, p)| p.name.as_str()).collect();
        assert_eq!(names, ["a", "b"]);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_rejected() {
        let mut store = ParameterStore::new();
        store.add("a", ParamKind::Matrix, LayerGroup::Head, vec![1], vec![0.0]);
        store.add("a", ParamKind::Matrix, LayerGroup::Head, vec![1], vec![0.0]);
    }

    #[test]
    fn grad_accumulation_is_additive() {
        let mut store = ParameterStore::new();
        store.add("a", ParamKind::Matrix, LayerGroup::Head, vec![2], vec![1.0, 2.0]);
        store.accumulate_grads(&[Some(vec![1.0, 1.0])]);
        store.accumulate_grads(&[Some(vec![0.5, -1.0])]);
        assert_eq!(store.get(0).tensor.grad.as_deref(), Some(&[1.5, 0.0][..]));
    }
}
