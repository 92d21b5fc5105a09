//! On-disk checkpoints.
//!
//! A checkpoint file is a header line `MTLCKPT 1`, one line of JSON manifest
//! (kind, precision, metadata, and the name, shape and byte offset of every
//! tensor), then the tensor payloads as little-endian floats. The frozen
//! backbone and the trainable state (adapters, heads, optimizer moments,
//! progress) are written to separate files so the latter stays small.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, FrozenBackbone};
use crate::error::{Error, Result};
use crate::heads::Verbalizer;
use crate::model::{Model, ModelSpec};
use crate::tensor::{Precision, Real, Tensor};
use crate::trainer::{AdamWConfig, BestEpoch, EpochRecord, Moments, OptimizerState, TrainConfig, Trainer};

const MAGIC: &str = "MTLCKPT 1";

pub const BACKBONE_FILE: &str = "backbone.ckpt";
pub const TRAINABLES_FILE: &str = "trainables.ckpt";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub precision: Precision,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// A checkpoint file read into memory.
#[derive(Clone, Debug)]
pub struct CheckpointFile {
    pub manifest: Manifest,
    payload: Vec<u8>,
}

impl CheckpointFile {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        let bad = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
        let header_end = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header"))?;
        if &bytes[..header_end] != MAGIC.as_bytes() {
            return Err(bad("not a checkpoint file"));
        }
        let rest = &bytes[header_end + 1..];
        let manifest_end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(&rest[..manifest_end]).map_err(|e| bad(&format!("bad manifest: {e}")))?;
        let payload = rest[manifest_end + 1..].to_vec();
        let width = manifest.precision.byte_width();
        for t in &manifest.tensors {
            let end = t.offset + t.shape.iter().product::<usize>() * width;
            if end > payload.len() {
                return Err(bad(&format!("tensor {} runs past the payload", t.name)));
            }
        }
        Ok(Self { manifest, payload })
    }

    pub fn has(&self, name: &str) -> bool {
        self.manifest.tensors.iter().any(|t| t.name == name)
    }

    /// Tensor `name`, converted to `F` if the file uses another precision.
    pub fn tensor<F: Real>(&self, name: &str) -> Result<Tensor<F>> {
        let entry = self
            .manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        let n: usize = entry.shape.iter().product();
        let width = self.manifest.precision.byte_width();
        let bytes = &self.payload[entry.offset..entry.offset + n * width];
        let data: Vec<F> = match self.manifest.precision {
            p if p == F::PRECISION => bytes.chunks_exact(width).map(F::read_le).collect(),
            Precision::F32 => bytes.chunks_exact(4).map(|b| F::of(f32::read_le(b).as_f64())).collect(),
            Precision::F64 => bytes.chunks_exact(8).map(|b| F::of(f64::read_le(b))).collect(),
        };
        Tensor::new(entry.shape.clone(), data)
    }

    pub fn meta<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        serde_json::from_value(self.manifest.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("bad {} metadata: {e}", self.manifest.kind)))
    }
}

/// Writes a checkpoint file with the given tensors.
pub fn write_checkpoint<F: Real>(
    path: &Path,
    kind: &str,
    meta: serde_json::Value,
    tensors: &[(String, &Tensor<F>)],
) -> Result<()> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        for &v in t.data() {
            v.write_le(&mut payload);
        }
    }
    let manifest = Manifest {
        kind: kind.to_string(),
        precision: F::PRECISION,
        meta,
        tensors: entries,
    };
    // Write beside the target and rename, so an interrupted write never
    // replaces a good checkpoint.
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
        writeln!(f, "{MAGIC}")?;
        writeln!(f, "{}", serde_json::to_string(&manifest)?)?;
        f.write_all(&payload)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct BackboneMeta {
    config: BackboneConfig,
    quantized: bool,
}

pub fn save_backbone<F: Real>(path: &Path, backbone: &FrozenBackbone<F>) -> Result<()> {
    let named = backbone.named_tensors();
    let tensors: Vec<(String, &Tensor<F>)> = named.iter().map(|(n, t)| (n.clone(), t.as_ref())).collect();
    let meta = serde_json::to_value(BackboneMeta {
        config: backbone.config().clone(),
        quantized: backbone.is_quantized(),
    })?;
    write_checkpoint(path, "backbone", meta, &tensors)
}

pub fn load_backbone<F: Real>(path: &Path) -> Result<FrozenBackbone<F>> {
    let file = CheckpointFile::read(path)?;
    if file.manifest.kind != "backbone" {
        return Err(Error::Checkpoint(format!("{} is not a backbone checkpoint", path.display())));
    }
    let meta: BackboneMeta = file.meta()?;
    FrozenBackbone::from_named_tensors(&meta.config, meta.quantized, |name| file.tensor(name))
}

#[derive(Serialize, Deserialize)]
struct MomentsMeta {
    param: String,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct TrainablesMeta {
    model: ModelSpec,
    verbalizer: Verbalizer,
    config: TrainConfig,
    optimizer: AdamWConfig,
    moments: Vec<MomentsMeta>,
    epoch: usize,
    step: usize,
    planned_steps: Option<usize>,
    history: Vec<EpochRecord>,
    best_epoch: Option<usize>,
    best_score: Option<f64>,
}

/// Writes `backbone.ckpt` (unless already present) and `trainables.ckpt`
/// into `dir`.
pub fn save_trainer<F: Real>(dir: &Path, trainer: &Trainer<F>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let backbone_path = dir.join(BACKBONE_FILE);
    if !backbone_path.exists() {
        save_backbone(&backbone_path, &trainer.model.backbone)?;
    }
    let store = &trainer.model.store;
    let mut owned: Vec<(String, Tensor<F>)> = Vec::new();
    let mut moments = Vec::new();
    for (id, p) in store.iter() {
        owned.push((format!("param.{}", p.name()), p.value().clone()));
        if let Some(m) = trainer.optimizer.moments(id) {
            moments.push(MomentsMeta {
                param: p.name().to_string(),
                step: m.step,
            });
            owned.push((format!("adam_m.{}", p.name()), Tensor::new(p.shape().to_vec(), m.m.clone())?));
            owned.push((format!("adam_v.{}", p.name()), Tensor::new(p.shape().to_vec(), m.v.clone())?));
        }
    }
    if let Some(best) = &trainer.best {
        for ((_, p), v) in store.iter().zip(&best.params) {
            owned.push((format!("best.{}", p.name()), v.clone()));
        }
    }
    let meta = TrainablesMeta {
        model: trainer.model.spec().clone(),
        verbalizer: trainer.model.verbalizer.clone(),
        config: trainer.config.clone(),
        optimizer: trainer.optimizer.config,
        moments,
        epoch: trainer.epoch,
        step: trainer.step,
        planned_steps: trainer.planned_steps,
        history: trainer.history.clone(),
        best_epoch: trainer.best.as_ref().map(|b| b.epoch),
        best_score: trainer.best.as_ref().and_then(|b| b.score),
    };
    let tensors: Vec<(String, &Tensor<F>)> = owned.iter().map(|(n, t)| (n.clone(), t)).collect();
    write_checkpoint(&dir.join(TRAINABLES_FILE), "trainables", serde_json::to_value(meta)?, &tensors)
}

/// Restores a trainer saved by [`save_trainer`].
pub fn load_trainer<F: Real>(dir: &Path) -> Result<Trainer<F>> {
    let backbone = load_backbone::<F>(&dir.join(BACKBONE_FILE))?;
    let file = CheckpointFile::read(&dir.join(TRAINABLES_FILE))?;
    if file.manifest.kind != "trainables" {
        return Err(Error::Checkpoint(format!("{} is not a trainables checkpoint", dir.display())));
    }
    let meta: TrainablesMeta = file.meta()?;
    let mut model = Model::with_backbone(&meta.model, backbone)?;
    model.verbalizer = meta.verbalizer;
    let names: Vec<String> = model.store.iter().map(|(_, p)| p.name().to_string()).collect();
    for ((_, p), name) in model.store.iter_mut().zip(&names) {
        let t = file.tensor::<F>(&format!("param.{name}"))?;
        if t.shape() != p.shape() {
            return Err(Error::Checkpoint(format!("{name} has shape {:?}, expected {:?}", t.shape(), p.shape())));
        }
        *p.value_mut() = t;
    }
    let mut optimizer = OptimizerState::new(meta.optimizer);
    for m in &meta.moments {
        let id = model
            .store
            .id(&m.param)
            .ok_or_else(|| Error::Checkpoint(format!("moments for unknown parameter {}", m.param)))?;
        optimizer.set_moments(
            id,
            Moments {
                m: file.tensor::<F>(&format!("adam_m.{}", m.param))?.into_data(),
                v: file.tensor::<F>(&format!("adam_v.{}", m.param))?.into_data(),
                step: m.step,
            },
        );
    }
    let best = match meta.best_epoch {
        Some(epoch) => Some(BestEpoch {
            epoch,
            score: meta.best_score,
            params: names
                .iter()
                .map(|n| file.tensor::<F>(&format!("best.{n}")))
                .collect::<Result<_>>()?,
        }),
        None => None,
    };
    let mut trainer = Trainer::from_model(&meta.config, model);
    trainer.optimizer = optimizer;
    trainer.epoch = meta.epoch;
    trainer.step = meta.step;
    trainer.planned_steps = meta.planned_steps;
    trainer.history = meta.history;
    trainer.best = best;
    Ok(trainer)
}

/// Reads only the trainable-state manifest, e.g. to find the precision a
/// checkpoint directory was written in.
pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    Ok(CheckpointFile::read(&dir.join(TRAINABLES_FILE))?.manifest)
}

pub fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoint")
}
