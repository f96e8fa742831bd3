use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ib::{ClusterState, IbReport};
use crate::numerics::{DType, RngState, Scalar, Tensor};
use crate::transformer::{Model, ModelSpec, ParamStore};

use super::config::{OptimizerKind, TrainConfig};
use super::optim::OptimState;

pub const MAGIC: &[u8; 8] = b"LTMCKPT1";
const VERSION: u32 = 1;

/// Metrics of one finished epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub merging: bool,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
}

/// Complete training state after `epoch` finished epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model<f32>,
    pub optim: OptimState,
    /// `[C, H·W]`
    pub input_centroids: Tensor<f64>,
    /// Per block, produced at the end of the last finished epoch.
    pub states: Vec<Option<ClusterState>>,
    pub epoch: usize,
    pub rng: RngState,
    pub history: Vec<EpochLog>,
    pub reports: Vec<IbReport>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    version: u32,
    config: TrainConfig,
    spec: ModelSpec,
    epoch: usize,
    rng: RngState,
    optimizer: OptimizerKind,
    optim_steps: Vec<u64>,
    state_epochs: Vec<Option<usize>>,
    history: Vec<EpochLog>,
    reports: Vec<IbReport>,
    tensors: Vec<TensorMeta>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorMeta {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
}

struct Writer {
    metas: Vec<TensorMeta>,
    payload: Vec<u8>,
}

impl Writer {
    fn push<T: Scalar>(&mut self, name: String, t: &Tensor<T>) {
        self.metas.push(TensorMeta {
            name,
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
        });
        for &v in t.data() {
            v.write_le(&mut self.payload);
        }
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer {
            metas: Vec::new(),
            payload: Vec::new(),
        };
        let params = &self.model.params;
        for (name, t) in params.iter() {
            w.push(format!("param/{name}"), t);
        }
        for (name, t) in params.names().iter().zip(&self.optim.first) {
            w.push(format!("optim.first/{name}"), t);
        }
        for (name, t) in params.names().iter().zip(&self.optim.second) {
            w.push(format!("optim.second/{name}"), t);
        }
        w.push("input_centroids".into(), &self.input_centroids);
        for (b, s) in self.states.iter().enumerate() {
            if let Some(s) = s {
                w.push(format!("state.{b}.merged_centroids"), &s.merged_centroids);
                w.push(format!("state.{b}.q"), &s.q);
                w.push(
                    format!("state.{b}.class_prior"),
                    &Tensor::new(&[s.classes()], s.class_prior.clone())?,
                );
            }
        }
        let meta = Meta {
            version: VERSION,
            config: self.config.clone(),
            spec: self.model.spec.clone(),
            epoch: self.epoch,
            rng: self.rng,
            optimizer: self.optim.kind,
            optim_steps: self.optim.steps.clone(),
            state_epochs: self.states.iter().map(|s| s.as_ref().map(|s| s.epoch)).collect(),
            history: self.history.clone(),
            reports: self.reports.clone(),
            tensors: w.metas,
        };
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(12 + json.len() + w.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&w.payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() {
            return if MAGIC.starts_with(bytes) {
                Err(Error::CheckpointTruncated)
            } else {
                Err(Error::CheckpointMagic)
            };
        }
        if bytes[..7] != MAGIC[..7] {
            return Err(Error::CheckpointMagic);
        }
        if bytes[7] != MAGIC[7] {
            return Err(Error::CheckpointVersion(bytes[7].wrapping_sub(b'0') as u32));
        }
        let len_bytes = bytes.get(8..12).ok_or(Error::CheckpointTruncated)?;
        let len = u32::from_le_bytes(len_bytes.try_into().expect("four bytes")) as usize;
        let json = bytes.get(12..12 + len).ok_or(Error::CheckpointTruncated)?;
        let meta: Meta = serde_json::from_slice(json).map_err(|e| Error::CheckpointFormat(format!("metadata: {e}")))?;
        if meta.version != VERSION {
            return Err(Error::CheckpointVersion(meta.version));
        }

        let mut reader = Reader {
            bytes: &bytes[12 + len..],
            metas: meta.tensors.iter(),
        };
        let reference = ParamStore::<f32>::init(&meta.spec, 0)?;
        let mut params = ParamStore::default();
        for name in reference.names() {
            params.insert(name.clone(), reader.next(&format!("param/{name}"))?);
        }
        let model = Model::new(meta.spec, params)?;
        let names = model.params.names();
        let first = names
            .iter()
            .map(|n| reader.next(&format!("optim.first/{n}")))
            .collect::<Result<Vec<_>>>()?;
        let second = match meta.optimizer {
            OptimizerKind::Adamw => names
                .iter()
                .map(|n| reader.next(&format!("optim.second/{n}")))
                .collect::<Result<Vec<_>>>()?,
            OptimizerKind::Sgd => Vec::new(),
        };
        let optim = OptimState {
            kind: meta.optimizer,
            steps: meta.optim_steps,
            first,
            second,
        };
        optim.check(&model.params)?;
        let input_centroids: Tensor<f64> = reader.next("input_centroids")?;
        let mut states = Vec::with_capacity(meta.state_epochs.len());
        for (b, e) in meta.state_epochs.iter().enumerate() {
            states.push(match e {
                None => None,
                Some(epoch) => {
                    let merged = reader.next(&format!("state.{b}.merged_centroids"))?;
                    let q = reader.next(&format!("state.{b}.q"))?;
                    let prior: Tensor<f64> = reader.next(&format!("state.{b}.class_prior"))?;
                    Some(ClusterState::new(
                        merged,
                        input_centroids.clone(),
                        q,
                        prior.into_data(),
                        *epoch,
                    )?)
                }
            });
        }
        reader.finish()?;
        if states.len() != model.layout().len() {
            return Err(Error::CheckpointFormat("cluster state count differs from depth".into()));
        }
        Ok(Checkpoint {
            config: meta.config,
            model,
            optim,
            input_centroids,
            states,
            epoch: meta.epoch,
            rng: meta.rng,
            history: meta.history,
            reports: meta.reports,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a, I> {
    bytes: &'a [u8],
    metas: I,
}

impl<'a, I: Iterator<Item = &'a TensorMeta>> Reader<'a, I> {
    fn next<T: Scalar>(&mut self, name: &str) -> Result<Tensor<T>> {
        let meta = self
            .metas
            .next()
            .ok_or_else(|| Error::CheckpointFormat(format!("missing tensor {name}")))?;
        if meta.name != name || meta.dtype != T::DTYPE {
            return Err(Error::CheckpointFormat(format!(
                "expected {name} ({:?}), found {} ({:?})",
                T::DTYPE,
                meta.name,
                meta.dtype
            )));
        }
        let count: usize = meta.shape.iter().product();
        let nbytes = count * T::BYTES;
        if self.bytes.len() < nbytes {
            return Err(Error::CheckpointTruncated);
        }
        let (head, rest) = self.bytes.split_at(nbytes);
        self.bytes = rest;
        let data = head.chunks_exact(T::BYTES).map(T::read_le).collect();
        Tensor::new(&meta.shape, data)
    }

    fn finish(mut self) -> Result<()> {
        if let Some(m) = self.metas.next() {
            return Err(Error::CheckpointFormat(format!("unexpected tensor {}", m.name)));
        }
        if !self.bytes.is_empty() {
            return Err(Error::CheckpointFormat(format!("{} trailing bytes", self.bytes.len())));
        }
        Ok(())
    }
}
