use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Element, Tensor};

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

/// First/second moment estimates per parameter tensor. Step counts are kept
/// per tensor so parameters skipped by an update keep their own bias
/// correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub steps: Vec<u64>,
}

impl<T: Element> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            steps: vec![0; store.len()],
        }
    }
}

/// One bias-corrected Adam update of every parameter in `store`.
pub fn adam_step<T: Element>(
    store: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    hp: &AdamHyper,
) -> Result<()> {
    let all = vec![true; store.len()];
    adam_step_masked(store, grads, &all, state, hp)
}

/// Adam update restricted to the parameters with `mask[i]` set; each of them
/// must have a gradient.
pub fn adam_step_masked<T: Element>(
    store: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    mask: &[bool],
    state: &mut AdamState<T>,
    hp: &AdamHyper,
) -> Result<()> {
    let n = store.len();
    if grads.len() != n || mask.len() != n || state.m.len() != n {
        return Err(Error::State(format!(
            "optimizer over {n} parameters got {} gradients, {} mask entries and {} moment slots",
            grads.len(),
            mask.len(),
            state.m.len()
        )));
    }
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let name = &store.names()[i];
        let g = grads[i]
            .as_ref()
            .ok_or_else(|| Error::State(format!("no gradient for parameter `{name}`")))?;
        if g.shape() != store.tensors()[i].shape() || state.m[i].shape() != g.shape() {
            return Err(Error::State(format!(
                "gradient of `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                store.tensors()[i].shape()
            )));
        }
    }
    let b1 = T::lit(hp.beta1);
    let b2 = T::lit(hp.beta2);
    let eps = T::lit(ADAM_EPS);
    for i in 0..n {
        let Some(g) = grads[i].as_ref().filter(|_| mask[i]) else { continue };
        state.steps[i] += 1;
        let t = state.steps[i] as i32;
        let c1 = T::lit(1.0 - hp.beta1.powi(t));
        let c2 = T::lit(1.0 - hp.beta2.powi(t));
        let lr = T::lit(hp.lr);
        let p = &mut store.tensors_mut()[i];
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let mh = *mi / c1;
            let vh = *vi / c2;
            *w = *w - lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp(lr: f64) -> AdamHyper {
        AdamHyper {
            lr,
            beta1: 0.5,
            beta2: 0.999,
        }
    }

    fn scalar_store(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::default();
        s.push("w", Tensor::from_f64(&[1], &[w]).unwrap());
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = scalar_store(0.7);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &[Some(Tensor::zeros(&[1]))], &mut st, &hp(2e-4)).unwrap();
        assert_eq!(s.tensors()[0].data(), &[0.7]);
        assert_eq!(st.steps, vec![1]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(0.0);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &[Some(Tensor::ones(&[1]))], &mut st, &hp(2e-4)).unwrap();
        assert!((s.tensors()[0].data()[0] + 2e-4).abs() < 1e-10);
    }

    #[test]
    fn quadratic_descends() {
        let mut s = scalar_store(1.0);
        let mut st = AdamState::new(&s);
        let mut prev = 1.0f64;
        for _ in 0..10 {
            let w = s.tensors()[0].data()[0];
            adam_step(&mut s, &[Some(Tensor::from_f64(&[1], &[2.0 * w]).unwrap())], &mut st, &hp(0.05)).unwrap();
            let now = s.tensors()[0].data()[0].abs();
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut s = scalar_store(1.0);
        s.push("bias", Tensor::zeros(&[2]));
        let mut st = AdamState::new(&s);
        let err = adam_step(&mut s, &[Some(Tensor::zeros(&[1])), None], &mut st, &hp(1e-3)).unwrap_err();
        assert!(matches!(&err, Error::State(m) if m.contains("bias")), "{err}");
        adam_step_masked(&mut s, &[Some(Tensor::ones(&[1])), None], &[true, false], &mut st, &hp(1e-3)).unwrap();
        assert_eq!(st.steps, vec![1, 0]);
    }
}
