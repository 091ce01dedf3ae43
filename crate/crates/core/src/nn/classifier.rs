use rand::Rng;

use super::{
    expect_shape, sigmoid_open, tanh_open, ArchConfig, ParamStore, CLASSIFIER_HIDDEN, INIT_STD, LEAK, SHARED_DIM,
};
use crate::error::Result;
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct ClassifierOutput {
    /// Recovered latent code `z̃`, `[B, z_dim]` in (-1, 1).
    pub z: Var,
    /// Attribute probabilities `c̃`, `[B, d]` in (0, 1).
    pub c: Var,
}

/// `C`: squeezes the shared embedding to 128 features, then splits into a
/// tanh latent head and a sigmoid attribute head.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams<T = f32> {
    pub params: ParamStore<T>,
}

impl<T: Element> ClassifierParams<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &ArchConfig, rng: &mut R) -> Self {
        let mut params = ParamStore::default();
        params.push("c.fc.w", Tensor::randn(&[SHARED_DIM, CLASSIFIER_HIDDEN], INIT_STD, rng));
        params.push("c.fc.b", Tensor::zeros(&[CLASSIFIER_HIDDEN]));
        params.push("c.z.w", Tensor::randn(&[CLASSIFIER_HIDDEN, cfg.z_dim], INIT_STD, rng));
        params.push("c.z.b", Tensor::zeros(&[cfg.z_dim]));
        params.push("c.c.w", Tensor::randn(&[CLASSIFIER_HIDDEN, cfg.attr_count], INIT_STD, rng));
        params.push("c.c.b", Tensor::zeros(&[cfg.attr_count]));
        ClassifierParams { params }
    }

    pub fn forward(&self, tape: &mut Tape<T>, p: &[Var], shared: Var) -> Result<ClassifierOutput> {
        let b = tape.shape(shared).first().copied().unwrap_or(0);
        expect_shape("classifier input", tape.shape(shared), &[b, SHARED_DIM])?;
        let ix = |name: &str| p[self.params.index(name)];
        let h = tape.linear(shared, ix("c.fc.w"), ix("c.fc.b"))?;
        let h = tape.leaky_relu(h, LEAK);
        let zl = tape.linear(h, ix("c.z.w"), ix("c.z.b"))?;
        let cl = tape.linear(h, ix("c.c.w"), ix("c.c.b"))?;
        Ok(ClassifierOutput {
            z: tanh_open(tape, zl),
            c: sigmoid_open(tape, cl),
        })
    }

    pub fn cast<U: Element>(&self) -> ClassifierParams<U> {
        ClassifierParams {
            params: self.params.cast(),
        }
    }
}
