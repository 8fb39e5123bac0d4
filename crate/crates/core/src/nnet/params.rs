use crate::error::{contract, Error, Result};
use crate::nnet::tape::Gradients;
use crate::nnet::Tensor;
use crate::Scalar;

/// Index into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    /// Freeze unit, e.g. `branch_a.stage2` or `head`.
    pub group: String,
    pub trainable: bool,
    value: Tensor<T>,
    grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn data(&self) -> &[T] {
        self.value.data()
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        self.value.data_mut()
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn grad(&self) -> &[T] {
        &self.grad
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    /// Mutable access to value and gradient at once.
    pub fn split_mut(&mut self) -> (&mut [T], &[T]) {
        (self.value.data_mut(), &self.grad)
    }
}

/// Named parameter registry with per-parameter trainable flags.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: impl Into<String>, value: Tensor<T>) -> ParamId {
        let grad = vec![T::zero(); value.numel()];
        self.params.push(Param {
            name: name.into(),
            group: group.into(),
            trainable: true,
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Distinct group names in registration order.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in &self.params {
            if !out.contains(&p.group) {
                out.push(p.group.clone());
            }
        }
        out
    }

    pub fn set_group_trainable(&mut self, group: &str, trainable: bool) -> Result<()> {
        let mut hit = false;
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.trainable = trainable;
            hit = true;
        }
        if !hit {
            return Err(Error::UnknownGroup(group.to_string()));
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds tape gradients into the trainable parameters, in registry order.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        let mut pairs: Vec<_> = grads.params().collect();
        pairs.sort_by_key(|(id, _)| *id);
        for (id, g) in pairs {
            let p = &mut self.params[id.0];
            if !p.trainable {
                continue;
            }
            contract!(
                g.len() == p.grad.len(),
                "gradient for {} has {} elements, expected {}",
                p.name,
                g.len(),
                p.grad.len()
            );
            for (a, &b) in p.grad.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.numel()).sum()
    }

    /// Replaces a value in place; shape must be unchanged.
    pub fn set_data(&mut self, id: ParamId, data: &[T]) -> Result<()> {
        let p = &mut self.params[id.0];
        contract!(
            data.len() == p.numel(),
            "{} expects {} values, got {}",
            p.name,
            p.numel(),
            data.len()
        );
        p.value.data_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group.clone(),
                    trainable: p.trainable,
                    value: p.value.cast(),
                    grad: p.grad.iter().map(|g| U::of(g.f64())).collect(),
                })
                .collect(),
        }
    }
}
