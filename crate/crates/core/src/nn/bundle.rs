use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ArchConfig, ClassifierParams, DiscriminatorParams, GeneratorParams, Mode};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor};

/// The complete parameter set of `G`, `D` and `C` plus what is needed to
/// interpret it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<T = f32> {
    pub arch: ArchConfig,
    /// Attribute names in `c` index order.
    pub attributes: Vec<String>,
    pub generator: GeneratorParams<T>,
    pub discriminator: DiscriminatorParams<T>,
    pub classifier: ClassifierParams<T>,
}

/// Normal(0, 0.02) weights, zero biases, unit batch-norm scale; a pure
/// function of `(cfg, seed)`.
pub fn init_params<T: Element>(cfg: &ArchConfig, seed: u64) -> Result<ModelBundle<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let generator = GeneratorParams::new(cfg, &mut rng);
    let discriminator = DiscriminatorParams::new(cfg, &mut rng);
    let classifier = ClassifierParams::new(cfg, &mut rng);
    Ok(ModelBundle {
        arch: cfg.clone(),
        attributes: (0..cfg.attr_count).map(|i| format!("attr_{i}")).collect(),
        generator,
        discriminator,
        classifier,
    })
}

impl<T: Element> ModelBundle<T> {
    pub fn with_attributes(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.arch.attr_count {
            return Err(Error::Argument(format!(
                "{} attribute names for a model with d = {}",
                names.len(),
                self.arch.attr_count
            )));
        }
        self.attributes = names;
        Ok(self)
    }

    pub fn attribute_index(&self, name: &str) -> Result<usize> {
        self.attributes
            .iter()
            .position(|a| a == name)
            .ok_or_else(|| Error::UnknownAttribute {
                name: name.to_string(),
                valid: self.attributes.clone(),
            })
    }

    pub fn image_size(&self) -> usize {
        self.arch.image_size
    }

    pub fn param_count(&self) -> usize {
        self.generator.params.numel() + self.discriminator.params.numel() + self.classifier.params.numel()
    }

    /// `G(z, c)` in eval mode.
    pub fn generate(&self, z: &Tensor<T>, c: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let gp = self.generator.params.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let cv = tape.constant(c.clone());
        let (x, _) = self.generator.forward(&self.arch, &mut tape, &gp, zv, cv, Mode::Eval)?;
        Ok(tape.value(x).clone())
    }

    /// Runs `D` and `C` in eval mode on `[B, 3, S, S]`.
    pub fn inspect(&self, x: &Tensor<T>) -> Result<Inspection<T>> {
        let mut tape = Tape::new();
        let dp = self.discriminator.params.bind(&mut tape, false);
        let cp = self.classifier.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let (d, _) = self.discriminator.forward(&self.arch, &mut tape, &dp, xv, Mode::Eval)?;
        let out = self.classifier.forward(&mut tape, &cp, d.shared)?;
        Ok(Inspection {
            source: tape.value(d.source).clone(),
            shared: tape.value(d.shared).clone(),
            hidden: d.hidden.iter().map(|&h| tape.value(h).clone()).collect(),
            z: tape.value(out.z).clone(),
            c: tape.value(out.c).clone(),
        })
    }

    /// `(z̃, c̃) = C(D(x))`.
    pub fn encode(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let i = self.inspect(x)?;
        Ok((i.z, i.c))
    }

    /// `G(C(D(x)))`: the reconstruction of `x`.
    pub fn rebuild(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (z, c) = self.encode(x)?;
        self.generate(&z, &c)
    }

    pub fn cast<U: Element>(&self) -> ModelBundle<U> {
        ModelBundle {
            arch: self.arch.clone(),
            attributes: self.attributes.clone(),
            generator: self.generator.cast(),
            discriminator: self.discriminator.cast(),
            classifier: self.classifier.cast(),
        }
    }
}

/// Eval-mode outputs of `D` and `C` for one batch.
#[derive(Clone, Debug)]
pub struct Inspection<T> {
    pub source: Tensor<T>,
    pub shared: Tensor<T>,
    pub hidden: Vec<Tensor<T>>,
    pub z: Tensor<T>,
    pub c: Tensor<T>,
}
