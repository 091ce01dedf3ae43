use rand::Rng;

use super::{
    expect_shape, sigmoid_open, ArchConfig, Mode, ParamStore, RunningStats, INIT_STD, KERNEL, LEAK, PAD, SHARED_DIM,
    STRIDE,
};
use crate::error::Result;
use crate::tensor::{BatchStats, BnMode, Conv2dSpec, Element, Tape, Tensor, Var};

/// Everything one discriminator pass exposes.
#[derive(Clone, Debug)]
pub struct DiscriminatorOutput {
    /// Probability that the input is real, `[B, 1]`.
    pub source: Var,
    /// Embedding consumed by the classifier, `[B, 1024]`.
    pub shared: Var,
    /// Activations after each of the four convolution stages.
    pub hidden: [Var; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams<T = f32> {
    pub params: ParamStore<T>,
    /// Running statistics of conv stages 2..4 (the first is not normalized).
    pub bn: Vec<RunningStats<T>>,
}

impl<T: Element> DiscriminatorParams<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &ArchConfig, rng: &mut R) -> Self {
        let widths = cfg.discriminator_widths();
        let mut params = ParamStore::default();
        let mut bn = Vec::new();
        let mut cin = 3;
        for (i, &cout) in widths.iter().enumerate() {
            let stage = i + 1;
            params.push(
                format!("d.conv{stage}.w"),
                Tensor::randn(&[cout, cin, KERNEL, KERNEL], INIT_STD, rng),
            );
            params.push(format!("d.conv{stage}.b"), Tensor::zeros(&[cout]));
            if stage > 1 {
                params.push(format!("d.bn{stage}.gamma"), Tensor::ones(&[cout]));
                params.push(format!("d.bn{stage}.beta"), Tensor::zeros(&[cout]));
                bn.push(RunningStats::new(cout));
            }
            cin = cout;
        }
        let flat = cfg.flat_features();
        params.push("d.shared.w", Tensor::randn(&[flat, SHARED_DIM], INIT_STD, rng));
        params.push("d.shared.b", Tensor::zeros(&[SHARED_DIM]));
        params.push("d.source.w", Tensor::randn(&[flat, 1], INIT_STD, rng));
        params.push("d.source.b", Tensor::zeros(&[1]));
        DiscriminatorParams { params, bn }
    }

    pub fn forward(
        &self,
        cfg: &ArchConfig,
        tape: &mut Tape<T>,
        p: &[Var],
        x: Var,
        mode: Mode,
    ) -> Result<(DiscriminatorOutput, Vec<BatchStats<T>>)> {
        let b = tape.shape(x).first().copied().unwrap_or(0);
        let s = cfg.image_size;
        expect_shape("discriminator input", tape.shape(x), &[b, 3, s, s])?;
        let ix = |name: &str| p[self.params.index(name)];
        let spec = Conv2dSpec::new(STRIDE, PAD);
        let mut stats = Vec::new();
        let mut hidden = Vec::with_capacity(4);
        let mut h = x;
        for stage in 1..=4 {
            h = tape.conv2d(h, ix(&format!("d.conv{stage}.w")), ix(&format!("d.conv{stage}.b")), spec)?;
            if stage > 1 {
                let rs = &self.bn[stage - 2];
                let bn_mode = match mode {
                    Mode::Train => BnMode::Train,
                    Mode::Eval => BnMode::Eval {
                        mean: &rs.mean,
                        var: &rs.var,
                    },
                };
                let gamma = ix(&format!("d.bn{stage}.gamma"));
                let beta = ix(&format!("d.bn{stage}.beta"));
                let (y, st) = tape.batch_norm(h, gamma, beta, bn_mode)?;
                stats.extend(st);
                h = y;
            }
            h = tape.leaky_relu(h, LEAK);
            hidden.push(h);
        }
        let flat = tape.flatten(h)?;
        let shared = tape.linear(flat, ix("d.shared.w"), ix("d.shared.b"))?;
        let shared = tape.leaky_relu(shared, LEAK);
        let logit = tape.linear(flat, ix("d.source.w"), ix("d.source.b"))?;
        let source = sigmoid_open(tape, logit);
        let hidden = [hidden[0], hidden[1], hidden[2], hidden[3]];
        Ok((DiscriminatorOutput { source, shared, hidden }, stats))
    }

    pub fn apply_stats(&mut self, stats: &[BatchStats<T>]) {
        for (r, s) in self.bn.iter_mut().zip(stats) {
            r.update(s);
        }
    }

    pub fn cast<U: Element>(&self) -> DiscriminatorParams<U> {
        DiscriminatorParams {
            params: self.params.cast(),
            bn: self.bn.iter().map(RunningStats::cast).collect(),
        }
    }
}
