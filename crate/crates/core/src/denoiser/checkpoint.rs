//! Binary checkpoint container: magic, format version, JSON header, then
//! little-endian `f64` arrays in header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamW;
use super::params::{DenoiserConfig, DenoiserParams};
use crate::diffusion::{make_schedule, NoiseSchedule};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MVLIFTCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    LineConditioned,
    MultiView,
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub schedule: NoiseSchedule,
    pub params: DenoiserParams,
    pub optimizer: Option<AdamW>,
    /// Number of completed training steps.
    pub train_step: u64,
}

#[derive(Serialize, Deserialize)]
struct ScheduleHeader {
    steps: usize,
    beta_start: f64,
    beta_end: f64,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    clip_norm: f64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: CheckpointKind,
    schedule: ScheduleHeader,
    config: DenoiserConfig,
    train_step: u64,
    optimizer: Option<OptimizerHeader>,
    tensors: Vec<TensorHeader>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn layout(p: &DenoiserParams, with_opt: bool) -> Vec<TensorHeader> {
    let base: Vec<TensorHeader> = p
        .tensors()
        .into_iter()
        .map(|(name, a)| TensorHeader {
            name,
            shape: a.shape().to_vec(),
        })
        .collect();
    let mut out = Vec::new();
    for prefix in [None, Some("adam_m."), Some("adam_v.")] {
        if prefix.is_some() && !with_opt {
            continue;
        }
        out.extend(base.iter().map(|t| TensorHeader {
            name: format!("{}{}", prefix.unwrap_or(""), t.name),
            shape: t.shape.clone(),
        }));
    }
    out
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let (beta_start, beta_end) = ck.schedule.beta_range();
    let header = Header {
        kind: ck.kind,
        schedule: ScheduleHeader {
            steps: ck.schedule.steps(),
            beta_start,
            beta_end,
        },
        config: ck.params.config.clone(),
        train_step: ck.train_step,
        optimizer: ck.optimizer.as_ref().map(|o| OptimizerHeader {
            learning_rate: o.learning_rate,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            clip_norm: o.clip_norm,
            step: o.step,
        }),
        tensors: layout(&ck.params, ck.optimizer.is_some()),
    };
    let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
    let mut buf = Vec::with_capacity(json.len() + 8 * ck.params.parameter_count() * 3 + 32);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    let mut sets = vec![&ck.params];
    if let Some(o) = &ck.optimizer {
        sets.push(&o.m);
        sets.push(&o.v);
    }
    for set in sets {
        for (_, a) in set.tensors() {
            for v in a.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn take<'a>(data: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if data.len() < n {
        return Err(bad("file is truncated"));
    }
    let (head, rest) = data.split_at(n);
    *data = rest;
    Ok(head)
}

fn fill(set: &mut DenoiserParams, data: &mut &[u8]) -> Result<()> {
    for (_, mut a) in set.tensors_mut() {
        let bytes = take(data, a.len() * 8)?;
        for (v, chunk) in a.iter_mut().zip(bytes.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut raw = Vec::new();
    fs::File::open(path)?.read_to_end(&mut raw)?;
    let mut data: &[u8] = &raw;
    if take(&mut data, 8)? != MAGIC {
        return Err(bad(format!("{} is not a checkpoint file", path.display())));
    }
    let version = u32::from_le_bytes(take(&mut data, 4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(take(&mut data, 8)?.try_into().expect("8 bytes")) as usize;
    let header: Header =
        serde_json::from_slice(take(&mut data, len)?).map_err(|e| bad(format!("bad header: {e}")))?;
    let schedule = make_schedule(
        header.schedule.steps,
        header.schedule.beta_start,
        header.schedule.beta_end,
    )?;
    let mut params = DenoiserParams::zeros(&header.config)?;
    let expected = layout(&params, header.optimizer.is_some());
    for (i, exp) in expected.iter().enumerate() {
        let found = header.tensors.get(i);
        match found {
            Some(t) if t.name == exp.name && t.shape == exp.shape => {}
            Some(t) if t.name == exp.name => {
                return Err(Error::ShapeMismatch {
                    name: exp.name.clone(),
                    expected: exp.shape.clone(),
                    found: t.shape.clone(),
                })
            }
            _ => {
                return Err(Error::ShapeMismatch {
                    name: exp.name.clone(),
                    expected: exp.shape.clone(),
                    found: Vec::new(),
                })
            }
        }
    }
    if let Some(extra) = header.tensors.get(expected.len()) {
        return Err(bad(format!("unexpected parameter `{}`", extra.name)));
    }
    fill(&mut params, &mut data)?;
    let optimizer = match header.optimizer {
        Some(o) => {
            let mut opt = AdamW::new(&params, o.learning_rate, o.clip_norm);
            opt.beta1 = o.beta1;
            opt.beta2 = o.beta2;
            opt.eps = o.eps;
            opt.weight_decay = o.weight_decay;
            opt.step = o.step;
            fill(&mut opt.m, &mut data)?;
            fill(&mut opt.v, &mut data)?;
            Some(opt)
        }
        None => None,
    };
    if !data.is_empty() {
        return Err(bad("trailing bytes after parameter data"));
    }
    if header.config.diffusion_steps != schedule.steps() {
        return Err(bad("schedule length disagrees with the step embedding"));
    }
    Ok(Checkpoint {
        kind: header.kind,
        schedule,
        params,
        optimizer,
        train_step: header.train_step,
    })
}

impl Checkpoint {
    /// Checks that parameters match a caller-provided configuration.
    pub fn expect_config(&self, config: &DenoiserConfig) -> Result<()> {
        let want = DenoiserParams::zeros(config)?;
        let want = layout(&want, false);
        let have = layout(&self.params, false);
        for (w, h) in want.iter().zip(&have) {
            if w.name != h.name || w.shape != h.shape {
                return Err(Error::ShapeMismatch {
                    name: w.name.clone(),
                    expected: w.shape.clone(),
                    found: if w.name == h.name { h.shape.clone() } else { Vec::new() },
                });
            }
        }
        if want.len() != have.len() {
            let name = want.get(have.len()).or(have.get(want.len())).map(|t| t.name.clone());
            return Err(Error::ShapeMismatch {
                name: name.unwrap_or_default(),
                expected: Vec::new(),
                found: Vec::new(),
            });
        }
        Ok(())
    }
}
