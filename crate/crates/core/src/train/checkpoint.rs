//! Binary checkpoint files.
//!
//! Layout: the 7-byte magic `ITGAN01`, a little-endian `u64` header length,
//! a UTF-8 JSON header, raw little-endian tensor payloads at the offsets the
//! header lists, and a trailing little-endian CRC32 of everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, Balancer, Optimizers, RngState, TrainConfig, Trainer};
use crate::error::{CheckpointError, Error, Result};
use crate::nn::{init_params, ArchConfig, ModelBundle, ParamStore, RunningStats};
use crate::tensor::{Element, Tensor};

const MAGIC_PREFIX: &[u8; 5] = b"ITGAN";
pub const FORMAT_VERSION: u32 = 1;
const MAGIC_LEN: usize = 7;
const MIN_LEN: usize = MAGIC_LEN + 8 + 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainerHeader {
    config: TrainConfig,
    iteration: u64,
    rng: RngState,
    balancer: Balancer,
    adam_steps: BTreeMap<String, Vec<u64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    attributes: Vec<String>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
    trainer: Option<TrainerHeader>,
    tensors: Vec<TensorEntry>,
}

/// Decoded checkpoint contents.
#[derive(Debug)]
pub struct Checkpoint {
    pub bundle: ModelBundle,
    pub meta: BTreeMap<String, String>,
    trainer: Option<(TrainerHeader, Optimizers)>,
}

impl Checkpoint {
    pub fn has_trainer_state(&self) -> bool {
        self.trainer.is_some()
    }

    pub fn train_config(&self) -> Option<&TrainConfig> {
        self.trainer.as_ref().map(|(h, _)| &h.config)
    }

    /// Rebuilds the trainer exactly where it stopped.
    pub fn into_trainer(self) -> Result<Trainer> {
        let (h, opt) = self
            .trainer
            .ok_or_else(|| Error::State("checkpoint holds no trainer state".into()))?;
        Trainer::from_parts(self.bundle, h.config, opt, h.rng.restore()?, h.balancer, h.iteration)
    }
}

struct Writer {
    entries: Vec<TensorEntry>,
    payload: Vec<u8>,
}

impl Writer {
    fn tensor(&mut self, name: String, t: &Tensor<f32>) {
        self.entries.push(TensorEntry {
            name,
            dtype: f32::DTYPE.into(),
            shape: t.shape().to_vec(),
            offset: self.payload.len(),
        });
        for &v in t.data() {
            v.put_le(&mut self.payload);
        }
    }

    fn store(&mut self, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.tensor(name.to_string(), t);
        }
    }

    fn stats(&mut self, prefix: &str, stats: &[RunningStats]) {
        for (i, s) in stats.iter().enumerate() {
            let v = |x: &Vec<f32>| Tensor::new(&[x.len()], x.clone()).expect("non-empty stats");
            self.tensor(format!("{prefix}.running{i}.mean"), &v(&s.mean));
            self.tensor(format!("{prefix}.running{i}.var"), &v(&s.var));
        }
    }

    fn adam(&mut self, net: &str, store: &ParamStore, st: &AdamState) {
        for (i, name) in store.names().iter().enumerate() {
            self.tensor(format!("adam.{net}.m.{name}"), &st.m[i]);
            self.tensor(format!("adam.{net}.v.{name}"), &st.v[i]);
        }
    }
}

fn encode(bundle: &ModelBundle, meta: &BTreeMap<String, String>, trainer: Option<&Trainer>) -> Result<Vec<u8>> {
    let mut w = Writer {
        entries: Vec::new(),
        payload: Vec::new(),
    };
    w.store(&bundle.generator.params);
    w.stats("g", &bundle.generator.bn);
    w.store(&bundle.discriminator.params);
    w.stats("d", &bundle.discriminator.bn);
    w.store(&bundle.classifier.params);
    let trainer_header = trainer.map(|t| {
        let o = &t.opt;
        w.adam("g", &bundle.generator.params, &o.g);
        w.adam("d", &bundle.discriminator.params, &o.d);
        w.adam("c", &bundle.classifier.params, &o.c);
        w.adam("g_inte", &bundle.generator.params, &o.g_inte);
        w.adam("d_inte", &bundle.discriminator.params, &o.d_inte);
        w.adam("c_inte", &bundle.classifier.params, &o.c_inte);
        TrainerHeader {
            config: t.config.clone(),
            iteration: t.iteration,
            rng: t.rng_state(),
            balancer: t.balancer.clone(),
            adam_steps: [("c", &o.c), ("c_inte", &o.c_inte), ("d", &o.d), ("d_inte", &o.d_inte), ("g", &o.g), ("g_inte", &o.g_inte)]
                .into_iter()
                .map(|(k, s)| (k.to_string(), s.steps.clone()))
                .collect(),
        }
    });
    let header = Header {
        arch: bundle.arch.clone(),
        attributes: bundle.attributes.clone(),
        meta: meta.clone(),
        trainer: trainer_header,
        tensors: w.entries,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(MIN_LEN + json.len() + w.payload.len());
    out.extend_from_slice(MAGIC_PREFIX);
    out.extend_from_slice(format!("{FORMAT_VERSION:02}").as_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&w.payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Serializes a model without optimizer state.
pub fn bundle_to_bytes(bundle: &ModelBundle, meta: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    encode(bundle, meta, None)
}

/// Serializes a model together with everything needed to resume training.
pub fn trainer_to_bytes(trainer: &Trainer, meta: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    encode(&trainer.bundle, meta, Some(trainer))
}

struct Reader<'a> {
    payload: &'a [u8],
    entries: BTreeMap<&'a str, &'a TensorEntry>,
}

impl Reader<'_> {
    fn tensor(&self, name: &str, want: &[usize]) -> Result<Tensor<f32>> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| CheckpointError::Header(format!("tensor `{name}` missing")))?;
        if e.shape != want {
            return Err(CheckpointError::Header(format!(
                "tensor `{name}` has shape {:?}, model expects {want:?}",
                e.shape
            ))
            .into());
        }
        if e.dtype != f32::DTYPE {
            return Err(CheckpointError::Header(format!("tensor `{name}` has dtype {}", e.dtype)).into());
        }
        let n: usize = want.iter().product();
        let end = e.offset.checked_add(n * f32::BYTES).filter(|&end| end <= self.payload.len());
        let Some(end) = end else {
            return Err(CheckpointError::Truncated(format!("payload of `{name}` runs past the end")).into());
        };
        let data = self.payload[e.offset..end]
            .chunks_exact(f32::BYTES)
            .map(f32::get_le)
            .collect();
        Tensor::new(want, data)
    }

    fn store(&self, store: &mut ParamStore) -> Result<()> {
        for i in 0..store.len() {
            let name = store.names()[i].clone();
            let shape = store.tensors()[i].shape().to_vec();
            store.tensors_mut()[i] = self.tensor(&name, &shape)?;
        }
        Ok(())
    }

    fn stats(&self, prefix: &str, stats: &mut [RunningStats]) -> Result<()> {
        for (i, s) in stats.iter_mut().enumerate() {
            let n = s.mean.len();
            s.mean = self.tensor(&format!("{prefix}.running{i}.mean"), &[n])?.into_data();
            s.var = self.tensor(&format!("{prefix}.running{i}.var"), &[n])?.into_data();
        }
        Ok(())
    }

    fn adam(&self, net: &str, store: &ParamStore, steps: Option<&Vec<u64>>) -> Result<AdamState> {
        let mut st = AdamState::new(store);
        let steps = steps.ok_or_else(|| CheckpointError::Header(format!("adam steps of `{net}` missing")))?;
        if steps.len() != store.len() {
            return Err(CheckpointError::Header(format!("adam steps of `{net}` have the wrong length")).into());
        }
        st.steps = steps.clone();
        for (i, name) in store.names().iter().enumerate() {
            let shape = store.tensors()[i].shape();
            st.m[i] = self.tensor(&format!("adam.{net}.m.{name}"), shape)?;
            st.v[i] = self.tensor(&format!("adam.{net}.v.{name}"), shape)?;
        }
        Ok(st)
    }
}

/// Validates and decodes checkpoint bytes. Nothing is returned unless the
/// whole file checks out.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MIN_LEN {
        return Err(CheckpointError::Truncated(format!("{} bytes is shorter than any checkpoint", bytes.len())).into());
    }
    if &bytes[..5] != MAGIC_PREFIX {
        return Err(CheckpointError::BadMagic.into());
    }
    let version: u32 = std::str::from_utf8(&bytes[5..MAGIC_LEN])
        .ok()
        .filter(|s| s.bytes().all(|b| b.is_ascii_digit()))
        .and_then(|s| s.parse().ok())
        .ok_or(CheckpointError::BadMagic)?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("four bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed }.into());
    }
    let hlen = u64::from_le_bytes(body[MAGIC_LEN..MAGIC_LEN + 8].try_into().expect("eight bytes"));
    let hstart = MAGIC_LEN + 8;
    let hend = usize::try_from(hlen)
        .ok()
        .and_then(|l| hstart.checked_add(l))
        .filter(|&e| e <= body.len())
        .ok_or_else(|| CheckpointError::Truncated("header length exceeds file".into()))?;
    let header: Header =
        serde_json::from_slice(&body[hstart..hend]).map_err(|e| CheckpointError::Header(e.to_string()))?;
    header.arch.validate()?;
    let reader = Reader {
        payload: &body[hend..],
        entries: header.tensors.iter().map(|e| (e.name.as_str(), e)).collect(),
    };
    let mut bundle: ModelBundle = init_params(&header.arch, 0)?;
    bundle = bundle.with_attributes(header.attributes.clone())?;
    reader.store(&mut bundle.generator.params)?;
    reader.stats("g", &mut bundle.generator.bn)?;
    reader.store(&mut bundle.discriminator.params)?;
    reader.stats("d", &mut bundle.discriminator.bn)?;
    reader.store(&mut bundle.classifier.params)?;
    let trainer = match header.trainer {
        None => None,
        Some(th) => {
            let opt = Optimizers {
                g: reader.adam("g", &bundle.generator.params, th.adam_steps.get("g"))?,
                d: reader.adam("d", &bundle.discriminator.params, th.adam_steps.get("d"))?,
                c: reader.adam("c", &bundle.classifier.params, th.adam_steps.get("c"))?,
                g_inte: reader.adam("g_inte", &bundle.generator.params, th.adam_steps.get("g_inte"))?,
                d_inte: reader.adam("d_inte", &bundle.discriminator.params, th.adam_steps.get("d_inte"))?,
                c_inte: reader.adam("c_inte", &bundle.classifier.params, th.adam_steps.get("c_inte"))?,
            };
            Some((th, opt))
        }
    };
    Ok(Checkpoint {
        bundle,
        meta: header.meta,
        trainer,
    })
}

/// Writes `bytes` next to `path` and renames it into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_bundle(bundle: &ModelBundle, meta: &BTreeMap<String, String>, path: &Path) -> Result<()> {
    write_atomic(path, &bundle_to_bytes(bundle, meta)?)
}

pub fn save_trainer(trainer: &Trainer, meta: &BTreeMap<String, String>, path: &Path) -> Result<()> {
    write_atomic(path, &trainer_to_bytes(trainer, meta)?)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelBundle {
        init_params(&ArchConfig::new(16, 3, 0.125).unwrap(), 4).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let meta = BTreeMap::from([("note".to_string(), "x".to_string())]);
        let b = tiny();
        let bytes = bundle_to_bytes(&b, &meta).unwrap();
        let ck = from_bytes(&bytes).unwrap();
        assert_eq!(ck.bundle, b);
        assert_eq!(ck.meta, meta);
        assert!(!ck.has_trainer_state());
        assert_eq!(bundle_to_bytes(&ck.bundle, &ck.meta).unwrap(), bytes);
        assert_eq!(&bytes[..7], b"ITGAN01");
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = bundle_to_bytes(&tiny(), &BTreeMap::new()).unwrap();
        let cut = &bytes[..bytes.len() - 100];
        assert!(matches!(
            from_bytes(cut),
            Err(Error::Checkpoint(CheckpointError::Checksum { .. }))
        ));
        assert!(matches!(
            from_bytes(&bytes[..10]),
            Err(Error::Checkpoint(CheckpointError::Truncated(_)))
        ));
        let mut flipped = bytes.clone();
        flipped[200] ^= 1;
        assert!(matches!(
            from_bytes(&flipped),
            Err(Error::Checkpoint(CheckpointError::Checksum { .. }))
        ));
        let mut v2 = bytes.clone();
        v2[6] = b'2';
        assert!(matches!(
            from_bytes(&v2),
            Err(Error::Checkpoint(CheckpointError::Version { found: 2, expected: 1 }))
        ));
        let mut junk = bytes;
        junk[0] = b'X';
        assert!(matches!(from_bytes(&junk), Err(Error::Checkpoint(CheckpointError::BadMagic))));
    }
}
