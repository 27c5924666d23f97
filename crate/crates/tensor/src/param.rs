use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named, optionally frozen learnable tensor.
///
/// Frozen parameters still take part in the graph (gradients flow through the
/// ops that consume them) but the optimizer never writes their values.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub frozen: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        let mut tensor = tensor;
        tensor.requires_grad = true;
        self.params.push(Parameter {
            name,
            tensor,
            frozen: false,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id_of(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    /// Sets `frozen` on every parameter whose name starts with `prefix`.
    /// Returns the number of parameters touched.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = frozen;
            n += 1;
        }
        n
    }

    pub fn freeze_all(&mut self, frozen: bool) {
        for p in &mut self.params {
            p.frozen = frozen;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.grad = None;
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    frozen: p.frozen,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Plain SGD: `p <- p - lr * grad` for every trainable parameter, then clears
/// all gradients. Frozen parameters are left bit-identical.
pub fn sgd_step<T: Scalar>(params: &mut [Parameter<T>], lr: f64) -> Result<()> {
    if let Some(p) = params.iter().find(|p| !p.frozen && p.tensor.grad.is_none()) {
        return Err(TensorError::Contract(format!(
            "trainable parameter {} has no gradient",
            p.name
        )));
    }
    let lr = T::lit(lr);
    for p in params.iter_mut() {
        if let Some(grad) = p.tensor.grad.take() {
            if p.frozen || lr == T::zero() {
                continue;
            }
            for (v, g) in p.tensor.data_mut().iter_mut().zip(grad) {
                *v = *v - lr * g;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(value: f64, grad: f64, frozen: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(value)).unwrap();
        let p = s.get_mut(id);
        p.tensor.grad = Some(vec![grad]);
        p.frozen = frozen;
        s
    }

    #[test]
    fn sgd_updates_trainable() {
        let mut s = store_with(1.0, 0.5, false);
        sgd_step(s.params_mut(), 0.1).unwrap();
        assert_eq!(s.by_name("p").unwrap().tensor.data(), &[0.95]);
        assert!(s.by_name("p").unwrap().tensor.grad.is_none());
    }

    #[test]
    fn sgd_skips_frozen() {
        let mut s = store_with(1.0, 0.5, true);
        sgd_step(s.params_mut(), 0.1).unwrap();
        assert_eq!(s.by_name("p").unwrap().tensor.data()[0].to_bits(), 1.0f64.to_bits());
        assert!(s.by_name("p").unwrap().tensor.grad.is_none());
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut s = store_with(1.0, 0.5, false);
        sgd_step(s.params_mut(), 0.0).unwrap();
        assert_eq!(s.by_name("p").unwrap().tensor.data(), &[1.0]);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut s: ParamStore<f64> = ParamStore::new();
        s.add("w", Tensor::scalar(1.0)).unwrap();
        let err = sgd_step(s.params_mut(), 0.1).unwrap_err();
        assert!(matches!(err, TensorError::Contract(_)));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s: ParamStore<f32> = ParamStore::new();
        s.add("a", Tensor::scalar(1.0)).unwrap();
        assert!(s.add("a", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn prefix_freezing() {
        let mut s: ParamStore<f32> = ParamStore::new();
        s.add("enc.a", Tensor::scalar(1.0)).unwrap();
        s.add("enc.b", Tensor::scalar(1.0)).unwrap();
        s.add("head.w", Tensor::scalar(1.0)).unwrap();
        assert_eq!(s.set_frozen("enc.", true), 2);
        assert!(!s.by_name("head.w").unwrap().frozen);
    }
}
