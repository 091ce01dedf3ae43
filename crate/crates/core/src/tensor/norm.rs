use super::tape::{Op, Tape, Var};
use super::{Element, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

/// Which statistics a batch-norm layer normalizes with.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    /// Batch statistics; the observed mean/variance are returned so the
    /// caller can fold them into its running estimates.
    Train,
    /// Stored running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel statistics of one training batch. `var` is unbiased.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub(crate) fn batchnorm_backward<T: Element>(
    shape: &[usize],
    gamma: &[T],
    xhat: &[T],
    inv_std: &[T],
    train: bool,
    gy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (b, c) = (shape[0], shape[1]);
    let px: usize = shape[2..].iter().product();
    let count = T::from_usize(b * px).unwrap();
    let mut gx = vec![T::zero(); gy.len()];
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for ch in 0..c {
        let mut sg = T::zero();
        let mut sgx = T::zero();
        for n in 0..b {
            let off = (n * c + ch) * px;
            for i in off..off + px {
                sg = sg + gy[i];
                sgx = sgx + gy[i] * xhat[i];
            }
        }
        gg[ch] = sgx;
        gb[ch] = sg;
        let k = gamma[ch] * inv_std[ch];
        for n in 0..b {
            let off = (n * c + ch) * px;
            for i in off..off + px {
                gx[i] = if train {
                    k / count * (count * gy[i] - sg - xhat[i] * sgx)
                } else {
                    k * gy[i]
                };
            }
        }
    }
    (gx, gg, gb)
}

impl<T: Element> Tape<T> {
    /// Per-channel normalization of `[B, C, ...]` with affine `gamma`/`beta`
    /// of shape `[C]`, epsilon 1e-5.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::Dimension(format!("batch_norm needs [B, C, ...], got {shape:?}")));
        }
        let (b, c) = (shape[0], shape[1]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Dimension(format!(
                "batch_norm affine params {:?}/{:?} do not match {c} channels",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let px: usize = shape[2..].iter().product();
        let n = b * px;
        let eps = T::lit(BN_EPS);
        let xs = self.value(x).data();
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                if n < 2 {
                    return Err(Error::Argument(format!(
                        "batch_norm in train mode needs at least 2 values per channel, got {n}"
                    )));
                }
                let nf = T::from_usize(n).unwrap();
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for bi in 0..b {
                        let off = (bi * c + ch) * px;
                        s = s + xs[off..off + px].iter().copied().sum::<T>();
                    }
                    let m = s / nf;
                    let mut v = T::zero();
                    for bi in 0..b {
                        let off = (bi * c + ch) * px;
                        for &e in &xs[off..off + px] {
                            v = v + (e - m) * (e - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = v / nf;
                }
                let unbiased = var
                    .iter()
                    .map(|&v| v * nf / T::from_usize(n - 1).unwrap())
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Dimension(format!(
                        "running statistics of length {}/{} for {c} channels",
                        mean.len(),
                        var.len()
                    )));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * px;
                for i in off..off + px {
                    let h = (xs[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + be[ch];
                }
            }
        }
        let train = matches!(mode, BnMode::Train);
        let v = self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        );
        Ok((v, stats))
    }
}
