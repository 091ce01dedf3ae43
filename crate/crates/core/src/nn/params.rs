use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Element, Tape, Tensor, Var};

/// Weight of the previous estimate when folding in a new batch.
pub const BN_MOMENTUM: f64 = 0.9;

/// Named, ordered parameter tensors of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Element> ParamStore<T> {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Position of `name` in the store; the layout is fixed at construction.
    pub(crate) fn index(&self, name: &str) -> usize {
        self.names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    /// Puts every tensor on the tape, in store order.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces the tensor called `name`, keeping its shape.
    pub fn set(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let slot = self
            .get_mut(name)
            .ok_or_else(|| Error::Argument(format!("no parameter named `{name}`")))?;
        if slot.shape() != t.shape() {
            return Err(Error::Dimension(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                slot.shape(),
                t.shape()
            )));
        }
        *slot = t;
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Running mean/variance of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Element> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn update(&mut self, batch: &BatchStats<T>) {
        let keep = T::lit(BN_MOMENTUM);
        let take = T::one() - keep;
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = keep * *r + take * *b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = keep * *r + take * *b;
        }
    }

    pub fn cast<U: Element>(&self) -> RunningStats<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::lit(x.to_f64().unwrap())).collect();
        RunningStats {
            mean: c(&self.mean),
            var: c(&self.var),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_stats_momentum() {
        let mut r = RunningStats::<f64>::new(1);
        r.update(&BatchStats {
            mean: vec![1.0],
            var: vec![3.0],
        });
        assert!((r.mean[0] - 0.1).abs() < 1e-12);
        assert!((r.var[0] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn set_checks_shape() {
        let mut p = ParamStore::<f32>::default();
        p.push("w", Tensor::zeros(&[2, 2]));
        assert!(p.set("w", Tensor::ones(&[2, 2])).is_ok());
        assert!(p.set("w", Tensor::ones(&[4])).is_err());
        assert!(p.set("v", Tensor::ones(&[2, 2])).is_err());
        assert_eq!(p.get("w").unwrap().sum(), 4.0);
    }
}
