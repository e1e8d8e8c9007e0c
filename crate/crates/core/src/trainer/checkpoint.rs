//! Binary checkpoint files: `RGAN`, version, named f32 arrays, JSON trailer.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{CurriculumState, TrainConfig};
use crate::critic::Critic;
use crate::error::{ensure, Error, Result};
use crate::seqmodel::Generator;
use crate::tensor::{Adam, AdamHyper, ParamStore, RmsProp, RmsPropHyper, Tensor};

pub const MAGIC: &[u8; 4] = b"RGAN";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Pretrain,
    Gan,
    Seq2seq,
    Diagnose,
}

/// Scalar optimizer state; the moment arrays live in the array section
/// under `opt.<name>.<slot>.<param>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "lowercase")]
pub enum OptimizerScalars {
    Rmsprop { name: String, hyper: RmsPropHyper, steps: u64 },
    Adam { name: String, hyper: AdamHyper, steps: u64 },
}

impl OptimizerScalars {
    pub fn name(&self) -> &str {
        match self {
            OptimizerScalars::Rmsprop { name, .. } | OptimizerScalars::Adam { name, .. } => name,
        }
    }
}

/// Run counters. Epochs of every phase count towards `epoch`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Progress {
    pub epoch: usize,
    pub adversarial_epochs: usize,
    pub pending_retrain: usize,
    pub epochs_since_complete: usize,
    pub critic_steps: u64,
    pub generator_steps: u64,
    pub lr_generator: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trailer {
    pub kind: CheckpointKind,
    pub config: TrainConfig,
    pub curriculum: Option<CurriculumState>,
    pub progress: Progress,
    pub optimizers: Vec<OptimizerScalars>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arrays: Vec<(String, Tensor<f32>)>,
    pub trailer: Trailer,
}

fn read_u32(bytes: &[u8], at: &mut usize) -> Result<u32> {
    let end = *at + 4;
    ensure!(end <= bytes.len(), Checkpoint, "truncated at byte {}", *at);
    let v = u32::from_le_bytes(bytes[*at..end].try_into().expect("4 bytes"));
    *at = end;
    Ok(v)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = at.checked_add(n).filter(|&e| e <= bytes.len());
    let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", *at)))?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{what} {n} does not fit in u32")))
}

impl Checkpoint {
    pub fn new(kind: CheckpointKind, config: TrainConfig) -> Self {
        Self {
            arrays: Vec::new(),
            trailer: Trailer {
                kind,
                config,
                curriculum: None,
                progress: Progress::default(),
                optimizers: Vec::new(),
            },
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(self.arrays.len(), "array count")?.to_le_bytes());
        for (name, t) in &self.arrays {
            out.extend_from_slice(&len_u32(name.len(), "name length")?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&len_u32(t.shape().len(), "rank")?.to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&len_u32(d, "dimension")?.to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out.extend_from_slice(serde_json::to_string(&self.trailer)?.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        ensure!(bytes.len() >= 12 && &bytes[..4] == MAGIC, Checkpoint, "missing RGAN magic");
        let mut at = 4;
        let version = read_u32(bytes, &mut at)?;
        ensure!(version == VERSION, Checkpoint, "unsupported version {version}");
        let count = read_u32(bytes, &mut at)? as usize;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let n = read_u32(bytes, &mut at)? as usize;
            let name = std::str::from_utf8(take(bytes, &mut at, n)?)
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
                .to_string();
            let rank = read_u32(bytes, &mut at)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(bytes, &mut at)? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Checkpoint(format!("array {name}: shape overflows")))?;
            let raw = take(bytes, &mut at, numel.saturating_mul(4))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            arrays.push((name, Tensor::new(shape, data)?));
        }
        let trailer: Trailer = serde_json::from_slice(&bytes[at..])
            .map_err(|e| Error::Checkpoint(format!("trailer: {e}")))?;
        trailer.config.validate()?;
        Ok(Self { arrays, trailer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn array(&self, name: &str) -> Option<&Tensor<f32>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn push_params(&mut self, params: &ParamStore<f32>) {
        for (name, t) in params.iter() {
            self.arrays.push((name.to_string(), t.clone()));
        }
    }

    /// Arrays whose names start with `prefix`, as a store.
    pub fn params_with_prefix(&self, prefix: &str) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        for (name, t) in &self.arrays {
            if name.starts_with(prefix) {
                store.push(name.clone(), t.clone());
            }
        }
        store
    }

    pub fn has_critic(&self) -> bool {
        self.arrays.iter().any(|(n, _)| n.starts_with("critic."))
    }

    /// Generator rebuilt from the trailer config and the `gen.` arrays.
    pub fn generator(&self) -> Result<Generator<f32>> {
        let mut g = Generator::zeroed(self.trailer.config.generator_config())?;
        g.params_mut().load_from(&self.params_with_prefix("gen."))?;
        Ok(g)
    }

    pub fn critic(&self) -> Result<Critic<f32>> {
        let cfg = &self.trailer.config;
        let mut rng = crate::datagen::SeededRng::new(0);
        let mut c = Critic::new(cfg.critic_config(cfg.critic.depth), &mut rng)?;
        c.params_mut().load_from(&self.params_with_prefix("critic."))?;
        Ok(c)
    }

    pub fn push_rmsprop(&mut self, name: &str, opt: &RmsProp<f32>, params: &ParamStore<f32>) {
        for ((p, _), v) in params.iter().zip(&opt.sq_avg) {
            self.arrays.push((format!("opt.{name}.sq.{p}"), v.clone()));
        }
        self.trailer.optimizers.push(OptimizerScalars::Rmsprop {
            name: name.to_string(),
            hyper: opt.hyper,
            steps: opt.steps,
        });
    }

    pub fn push_adam(&mut self, name: &str, opt: &Adam<f32>, params: &ParamStore<f32>) {
        for ((p, _), m) in params.iter().zip(&opt.m) {
            self.arrays.push((format!("opt.{name}.m.{p}"), m.clone()));
        }
        for ((p, _), v) in params.iter().zip(&opt.v) {
            self.arrays.push((format!("opt.{name}.v.{p}"), v.clone()));
        }
        self.trailer.optimizers.push(OptimizerScalars::Adam {
            name: name.to_string(),
            hyper: opt.hyper,
            steps: opt.steps,
        });
    }

    fn scalars(&self, name: &str) -> Option<&OptimizerScalars> {
        self.trailer.optimizers.iter().find(|o| o.name() == name)
    }

    fn moments(&self, name: &str, slot: &str, params: &ParamStore<f32>) -> Result<Vec<Tensor<f32>>> {
        params
            .iter()
            .map(|(p, t)| {
                let key = format!("opt.{name}.{slot}.{p}");
                let a = self
                    .array(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer array {key}")))?;
                ensure!(a.shape() == t.shape(), Checkpoint, "optimizer array {key} has shape {:?}", a.shape());
                Ok(a.clone())
            })
            .collect()
    }

    /// Saved RMSprop state for `name`, if one was stored.
    pub fn rmsprop(&self, name: &str, params: &ParamStore<f32>) -> Result<Option<RmsProp<f32>>> {
        match self.scalars(name) {
            None => Ok(None),
            Some(OptimizerScalars::Rmsprop { hyper, steps, .. }) => Ok(Some(RmsProp {
                hyper: *hyper,
                sq_avg: self.moments(name, "sq", params)?,
                steps: *steps,
            })),
            Some(_) => Err(Error::Checkpoint(format!("optimizer {name} is not RMSprop"))),
        }
    }

    pub fn adam(&self, name: &str, params: &ParamStore<f32>) -> Result<Option<Adam<f32>>> {
        match self.scalars(name) {
            None => Ok(None),
            Some(OptimizerScalars::Adam { hyper, steps, .. }) => Ok(Some(Adam {
                hyper: *hyper,
                m: self.moments(name, "m", params)?,
                v: self.moments(name, "v", params)?,
                steps: *steps,
            })),
            Some(_) => Err(Error::Checkpoint(format!("optimizer {name} is not Adam"))),
        }
    }
}
