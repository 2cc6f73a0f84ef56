//! Binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "ST3D" | u32 version (1) | u32 header length | header JSON | f32 payloads
//! ```
//!
//! The UTF-8 JSON header holds the network spec, the epoch, optional
//! training state and a tensor directory of `{name, shape, offset}` entries,
//! where `offset` is the byte offset of the tensor within the payload.
//! Payloads follow in directory order with no padding. Optimizer
//! velocities are stored as tensors named `optim.velocity.<parameter>`.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Network, NetworkSpec};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};
use crate::train::optim::{PlateauSchedule, Sgd};
use crate::train::trainer::TrainState;

pub const MAGIC: [u8; 4] = *b"ST3D";
pub const VERSION: u32 = 1;
pub const VELOCITY_PREFIX: &str = "optim.velocity.";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: PlateauSchedule,
    pub best_loss: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    /// Completed training epochs.
    pub epoch: usize,
    pub tensors: Vec<NamedTensor>,
    pub training: Option<TrainingMeta>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    spec: NetworkSpec,
    epoch: usize,
    training: Option<TrainingMeta>,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: [usize; 5],
    offset: u64,
}

impl Checkpoint {
    /// Weights and running statistics of `net`.
    pub fn from_network(net: &Network, epoch: usize) -> Self {
        let tensors = net
            .params()
            .iter()
            .map(|(_, p)| NamedTensor {
                name: p.name.clone(),
                tensor: bare(&p.tensor),
            })
            .collect();
        Checkpoint {
            spec: net.spec().clone(),
            epoch,
            tensors,
            training: None,
        }
    }

    /// Network state plus optimizer velocities and schedule.
    pub fn from_training(net: &Network, state: &TrainState) -> Self {
        let mut ckpt = Self::from_network(net, state.epoch);
        for (name, v) in state.sgd.velocities() {
            let Some(p) = net.params().by_name(name) else {
                continue;
            };
            ckpt.tensors.push(NamedTensor {
                name: format!("{VELOCITY_PREFIX}{name}"),
                tensor: Tensor::from_vec(p.tensor.shape(), v.clone()).expect("velocity matches parameter"),
            });
        }
        ckpt.training = Some(TrainingMeta {
            lr: state.sgd.lr,
            momentum: state.sgd.momentum,
            weight_decay: state.sgd.weight_decay,
            schedule: state.schedule.clone(),
            best_loss: state.best_loss.is_finite().then_some(state.best_loss),
            seed: state.seed,
        });
        ckpt
    }

    fn network_tensors(&self) -> impl Iterator<Item = &NamedTensor> {
        self.tensors.iter().filter(|t| !t.name.starts_with(VELOCITY_PREFIX))
    }

    /// Copies every stored tensor into `net`. The spec and the set of
    /// parameter names must match exactly.
    pub fn apply_to(&self, net: &mut Network) -> Result<()> {
        if &self.spec != net.spec() {
            return Err(Error::SpecMismatch(format!(
                "checkpoint holds {:?} {:?}/{:?} with {} classes, network is {:?} {:?}/{:?} with {} classes",
                self.spec.variant,
                self.spec.stage_widths,
                self.spec.stage_blocks,
                self.spec.num_classes,
                net.spec().variant,
                net.spec().stage_widths,
                net.spec().stage_blocks,
                net.spec().num_classes
            )));
        }
        let stored: BTreeSet<&str> = self.network_tensors().map(|t| t.name.as_str()).collect();
        let wanted: BTreeSet<&str> = net.params().iter().map(|(_, p)| p.name.as_str()).collect();
        if stored != wanted {
            let missing: Vec<_> = wanted.difference(&stored).take(3).collect();
            let extra: Vec<_> = stored.difference(&wanted).take(3).collect();
            return Err(Error::SpecMismatch(format!(
                "parameter names differ (missing {missing:?}, unexpected {extra:?})"
            )));
        }
        for t in self.network_tensors() {
            let id = net.params().id(&t.name).expect("checked above");
            let expected = net.params().tensor(id).shape();
            if expected != t.tensor.shape() {
                return Err(Error::SpecMismatch(format!(
                    "{}: stored shape {} but network expects {}",
                    t.name,
                    t.tensor.shape(),
                    expected
                )));
            }
        }
        for t in self.network_tensors() {
            let id = net.params().id(&t.name).expect("checked above");
            net.params_mut().replace(id, t.tensor.clone());
        }
        Ok(())
    }

    /// Builds the stored network.
    pub fn to_network(&self) -> Result<Network> {
        let mut net = Network::new(&self.spec, &mut Rng::new(0))?;
        self.apply_to(&mut net)?;
        Ok(net)
    }

    /// Optimizer and schedule state, if the checkpoint was written during
    /// training.
    pub fn train_state(&self) -> Option<TrainState> {
        let meta = self.training.as_ref()?;
        let mut sgd = Sgd::new(meta.lr, meta.momentum, meta.weight_decay);
        for t in &self.tensors {
            if let Some(name) = t.name.strip_prefix(VELOCITY_PREFIX) {
                sgd.set_velocity(name, t.tensor.data().to_vec());
            }
        }
        Some(TrainState {
            epoch: self.epoch,
            sgd,
            schedule: meta.schedule.clone(),
            best_loss: meta.best_loss.unwrap_or(f64::INFINITY),
            seed: meta.seed,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|t| {
                let e = Entry {
                    name: t.name.clone(),
                    shape: t.tensor.shape().0,
                    offset,
                };
                offset += 4 * t.tensor.numel() as u64;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            spec: self.spec.clone(),
            epoch: self.epoch,
            training: self.training.clone(),
            tensors: entries,
        })?;
        let header_len = u32::try_from(header.len())
            .map_err(|_| Error::Checkpoint("header exceeds 4 GiB".into()))?;
        let mut out = Vec::with_capacity(12 + header.len() + offset as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 12 {
            return Err(bad("file is truncated"));
        }
        if bytes[..4] != MAGIC {
            return Err(bad("bad magic (not an ST3D checkpoint)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {VERSION})"
            )));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() < header_len {
            return Err(bad("file is truncated inside the header"));
        }
        let header: Header = serde_json::from_slice(&body[..header_len])?;
        let payload = &body[header_len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected_offset = 0usize;
        for e in header.tensors {
            let shape = Shape(e.shape);
            let len = 4 * shape.numel();
            if e.offset as usize != expected_offset {
                return Err(Error::Checkpoint(format!("{}: inconsistent offset", e.name)));
            }
            let end = expected_offset + len;
            let raw = payload
                .get(expected_offset..end)
                .ok_or_else(|| Error::Checkpoint(format!("file is truncated inside `{}`", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor {
                name: e.name,
                tensor: Tensor::from_vec(shape, data)?,
            });
            expected_offset = end;
        }
        if expected_offset != payload.len() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        Ok(Checkpoint {
            spec: header.spec,
            epoch: header.epoch,
            tensors,
            training: header.training,
        })
    }
}

fn bare(t: &Tensor) -> Tensor {
    Tensor::from_vec(t.shape(), t.data().to_vec()).expect("same shape")
}

/// Writes atomically: a temporary file in the target directory is renamed
/// into place.
pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let bytes = ckpt.to_bytes()?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Checkpoint::from_bytes(&bytes)
}
