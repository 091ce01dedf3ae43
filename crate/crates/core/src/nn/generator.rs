use rand::Rng;

use super::{expect_shape, tanh_open, ArchConfig, Mode, ParamStore, RunningStats, INIT_STD, KERNEL, PAD, STRIDE};
use crate::error::Result;
use crate::tensor::{BatchStats, BnMode, Conv2dSpec, Element, Tape, Tensor, Var};

/// `G(z, c)`: a fully-connected projection of `[z | c]` to a
/// `base × base` map followed by four stride-2 transposed convolutions.
/// Hidden stages use batch norm + ReLU, the output stage tanh.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams<T = f32> {
    pub params: ParamStore<T>,
    /// One entry per hidden stage: the projection and three deconvolutions.
    pub bn: Vec<RunningStats<T>>,
}

impl<T: Element> GeneratorParams<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &ArchConfig, rng: &mut R) -> Self {
        let widths = cfg.generator_widths();
        let base = cfg.base();
        let mut params = ParamStore::default();
        let fc_out = base * base * widths[0];
        params.push("g.fc.w", Tensor::randn(&[cfg.z_dim + cfg.attr_count, fc_out], INIT_STD, rng));
        params.push("g.fc.b", Tensor::zeros(&[fc_out]));
        params.push("g.bn0.gamma", Tensor::ones(&[widths[0]]));
        params.push("g.bn0.beta", Tensor::zeros(&[widths[0]]));
        let mut bn = vec![RunningStats::new(widths[0])];
        for stage in 1..=4 {
            let cin = widths[stage - 1];
            let cout = if stage == 4 { 3 } else { widths[stage] };
            params.push(
                format!("g.deconv{stage}.w"),
                Tensor::randn(&[cin, cout, KERNEL, KERNEL], INIT_STD, rng),
            );
            params.push(format!("g.deconv{stage}.b"), Tensor::zeros(&[cout]));
            if stage < 4 {
                params.push(format!("g.bn{stage}.gamma"), Tensor::ones(&[cout]));
                params.push(format!("g.bn{stage}.beta"), Tensor::zeros(&[cout]));
                bn.push(RunningStats::new(cout));
            }
        }
        GeneratorParams { params, bn }
    }

    /// Runs `G` on tape-bound parameters `p` (from [`ParamStore::bind`]).
    /// `z` is `[B, z_dim]`, `c` is `[B, d]`; returns `[B, 3, S, S]` and, in
    /// train mode, the batch statistics of each normalization stage.
    pub fn forward(
        &self,
        cfg: &ArchConfig,
        tape: &mut Tape<T>,
        p: &[Var],
        z: Var,
        c: Var,
        mode: Mode,
    ) -> Result<(Var, Vec<BatchStats<T>>)> {
        let b = tape.shape(z).first().copied().unwrap_or(0);
        expect_shape("generator latent input", tape.shape(z), &[b, cfg.z_dim])?;
        expect_shape("generator attribute input", tape.shape(c), &[b, cfg.attr_count])?;
        let ix = |name: &str| p[self.params.index(name)];
        let widths = cfg.generator_widths();
        let base = cfg.base();
        let mut stats = Vec::new();

        let input = tape.concat_cols(z, c)?;
        let h = tape.linear(input, ix("g.fc.w"), ix("g.fc.b"))?;
        let mut h = tape.reshape(h, &[b, widths[0], base, base])?;
        h = self.norm_relu(tape, h, ix("g.bn0.gamma"), ix("g.bn0.beta"), 0, mode, &mut stats)?;
        let mut side = base;
        let spec = Conv2dSpec::new(STRIDE, PAD);
        for stage in 1..=4 {
            side *= 2;
            h = tape.conv_transpose2d(
                h,
                ix(&format!("g.deconv{stage}.w")),
                ix(&format!("g.deconv{stage}.b")),
                spec,
                (side, side),
            )?;
            if stage < 4 {
                let gamma = ix(&format!("g.bn{stage}.gamma"));
                let beta = ix(&format!("g.bn{stage}.beta"));
                h = self.norm_relu(tape, h, gamma, beta, stage, mode, &mut stats)?;
            }
        }
        Ok((tanh_open(tape, h), stats))
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_relu(
        &self,
        tape: &mut Tape<T>,
        h: Var,
        gamma: Var,
        beta: Var,
        layer: usize,
        mode: Mode,
        stats: &mut Vec<BatchStats<T>>,
    ) -> Result<Var> {
        let rs = &self.bn[layer];
        let bn_mode = match mode {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval {
                mean: &rs.mean,
                var: &rs.var,
            },
        };
        let (y, s) = tape.batch_norm(h, gamma, beta, bn_mode)?;
        stats.extend(s);
        Ok(tape.relu(y))
    }

    pub fn apply_stats(&mut self, stats: &[BatchStats<T>]) {
        for (r, s) in self.bn.iter_mut().zip(stats) {
            r.update(s);
        }
    }

    pub fn cast<U: Element>(&self) -> GeneratorParams<U> {
        GeneratorParams {
            params: self.params.cast(),
            bn: self.bn.iter().map(RunningStats::cast).collect(),
        }
    }
}
