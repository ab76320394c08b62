//! Versioned binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic    8 bytes  "AFMCKPT\0"
//! version  u32
//! kind     u32 length + UTF-8
//! count    u32
//! tensor   repeated `count` times:
//!          u32 name length + UTF-8 name
//!          u32 rank, then u64 per dimension
//!          f64 per element, row-major
//! crc32    u32 over every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::controller::{ControllerNet, MaskTable};
use crate::error::{AfmError, Result};
use crate::mask::{NeuronMask, TaskId};
use crate::matrix::Matrix2D;
use crate::nn::{Activation, Network, OptimizerKind, OptimizerState};
use crate::supervised::{AfmModel, TaskStatus};

pub const MAGIC: &[u8; 8] = b"AFMCKPT\0";
pub const VERSION: u32 = 1;

pub const KIND_SUPERVISED: &str = "supervised";
pub const KIND_RL: &str = "rl";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Result<()> {
        let name = name.into();
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(AfmError::Tensor {
                tensor: name,
                detail: format!("shape {shape:?} holds {len} values, got {}", data.len()),
            });
        }
        if self.index.contains_key(&name) {
            return Err(AfmError::Tensor {
                tensor: name,
                detail: "stored twice".into(),
            });
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.tensors.push(Tensor {
            name,
            shape: shape.to_vec(),
            data,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i]).ok_or_else(|| AfmError::Tensor {
            tensor: name.into(),
            detail: "missing".into(),
        })
    }

    /// Data of `name`, which must have exactly `shape`.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&[f64]> {
        let t = self.get(name)?;
        if t.shape != shape {
            return Err(AfmError::Tensor {
                tensor: name.into(),
                detail: format!("stored shape {:?}, expected {shape:?}", t.shape),
            });
        }
        Ok(&t.data)
    }

    /// Names starting with `prefix`, in storage order.
    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.tensors.iter().map(|t| t.name.as_str()).filter(move |n| n.starts_with(prefix))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 {
            return Err(AfmError::Corruption(format!("{} bytes is too short for a checkpoint", bytes.len())));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(AfmError::Corruption("missing checkpoint magic".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(AfmError::Corruption(format!(
                "checksum {actual:08x} does not match stored {stored:08x}"
            )));
        }
        let mut r = Reader {
            bytes: body,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(AfmError::UnsupportedVersion {
                found: version,
                expected: VERSION,
            });
        }
        let mut ckpt = Checkpoint::new(r.string()?);
        let count = r.u32()?;
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| AfmError::Corruption(format!("`{name}` dimension overflows")))?);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= r.remaining() / 8)
                .ok_or_else(|| AfmError::Corruption(format!("`{name}` claims more data than the file holds")))?;
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            ckpt.push(name, &shape, data).map_err(|e| AfmError::Corruption(e.to_string()))?;
        }
        if r.remaining() != 0 {
            return Err(AfmError::Corruption(format!("{} trailing bytes", r.remaining())));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| AfmError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| AfmError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn push_network(&mut self, prefix: &str, net: &Network) -> Result<()> {
        for (i, layer) in net.layers.iter().enumerate() {
            let w = &layer.weights;
            self.push(format!("{prefix}/layer{i}/weights"), &[w.rows(), w.cols()], w.as_slice().to_vec())?;
            self.push(format!("{prefix}/layer{i}/bias"), &[layer.bias.len()], layer.bias.clone())?;
            let act = match layer.activation {
                Activation::ReLU => 0.0,
                Activation::Identity => 1.0,
            };
            self.push(format!("{prefix}/layer{i}/activation"), &[1], vec![act])?;
        }
        Ok(())
    }

    /// Restores a network laid out like `template`; every tensor must
    /// match the template's shape.
    pub fn read_network(&self, prefix: &str, template: &Network) -> Result<Network> {
        let mut net = template.clone();
        for (i, layer) in net.layers.iter_mut().enumerate() {
            let (rows, cols) = (layer.weights.rows(), layer.weights.cols());
            let w = self.expect(&format!("{prefix}/layer{i}/weights"), &[rows, cols])?;
            layer.weights = Matrix2D::from_vec(rows, cols, w.to_vec())?;
            layer.bias = self.expect(&format!("{prefix}/layer{i}/bias"), &[cols])?.to_vec();
            let name = format!("{prefix}/layer{i}/activation");
            layer.activation = match self.expect(&name, &[1])?[0] {
                0.0 => Activation::ReLU,
                1.0 => Activation::Identity,
                a => {
                    return Err(AfmError::Tensor {
                        tensor: name,
                        detail: format!("unknown activation code {a}"),
                    })
                }
            };
        }
        let extra = format!("{prefix}/layer{}/weights", net.layers.len());
        if self.index.contains_key(&extra) {
            return Err(AfmError::Tensor {
                tensor: extra,
                detail: format!("network `{prefix}` has more layers than expected"),
            });
        }
        Ok(net)
    }

    pub fn push_mask(&mut self, name: &str, mask: &NeuronMask) -> Result<()> {
        self.push(name, &[mask.len()], mask.as_gate())
    }

    pub fn read_mask(&self, name: &str, width: usize) -> Result<NeuronMask> {
        let data = self.expect(name, &[width])?;
        let bits = data
            .iter()
            .map(|&v| match v {
                0.0 => Ok(false),
                1.0 => Ok(true),
                v => Err(AfmError::Tensor {
                    tensor: name.into(),
                    detail: format!("mask entry {v} is not 0 or 1"),
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(NeuronMask::from_bools(bits))
    }

    pub fn push_mask_table(&mut self, prefix: &str, masks: &MaskTable) -> Result<()> {
        for (task, mask) in masks {
            self.push_mask(&format!("{prefix}/{task}"), mask)?;
        }
        Ok(())
    }

    pub fn read_mask_table(&self, prefix: &str, width: usize) -> Result<MaskTable> {
        let lead = format!("{prefix}/task");
        let names: Vec<String> = self.names_with_prefix(&lead).map(str::to_owned).collect();
        names
            .into_iter()
            .map(|name| {
                let id: u32 = name[lead.len()..].parse().map_err(|_| AfmError::Tensor {
                    tensor: name.clone(),
                    detail: "task suffix is not a number".into(),
                })?;
                let task = TaskId(id);
                Ok((task, self.read_mask(&name, width)?.with_task(task)))
            })
            .collect()
    }

    pub fn push_optimizer(&mut self, prefix: &str, opt: &OptimizerState) -> Result<()> {
        let hyper = match opt.kind {
            OptimizerKind::Sgd => vec![0.0, opt.learning_rate, 0.0, 0.0, 0.0],
            OptimizerKind::Adam { beta1, beta2, eps } => vec![1.0, opt.learning_rate, beta1, beta2, eps],
            OptimizerKind::RmsProp { alpha, eps } => vec![2.0, opt.learning_rate, alpha, eps, 0.0],
        };
        self.push(format!("{prefix}/hyper"), &[5], hyper)?;
        self.push_u64(&format!("{prefix}/steps"), opt.step_count)?;
        self.push(format!("{prefix}/buffers"), &[1], vec![opt.first_moment.len() as f64])?;
        for (i, (m, v)) in opt.first_moment.iter().zip(&opt.second_moment).enumerate() {
            self.push(format!("{prefix}/first{i}"), &[m.len()], m.clone())?;
            self.push(format!("{prefix}/second{i}"), &[v.len()], v.clone())?;
        }
        Ok(())
    }

    /// Restores an optimizer whose moment buffers, when present, match the
    /// parameter tensors of `net`.
    pub fn read_optimizer(&self, prefix: &str, net: &Network) -> Result<OptimizerState> {
        let name = format!("{prefix}/hyper");
        let h = self.expect(&name, &[5])?;
        let kind = match h[0] {
            0.0 => OptimizerKind::Sgd,
            1.0 => OptimizerKind::Adam {
                beta1: h[2],
                beta2: h[3],
                eps: h[4],
            },
            2.0 => OptimizerKind::RmsProp { alpha: h[2], eps: h[3] },
            k => {
                return Err(AfmError::Tensor {
                    tensor: name,
                    detail: format!("unknown optimizer code {k}"),
                })
            }
        };
        let mut opt = OptimizerState::new(kind, h[1]);
        opt.step_count = self.read_u64(&format!("{prefix}/steps"))?;
        let buffers = self.expect(&format!("{prefix}/buffers"), &[1])?[0] as usize;
        if buffers > 0 {
            let shapes: Vec<usize> = net.param_slices().iter().map(|s| s.len()).collect();
            if buffers != shapes.len() {
                return Err(AfmError::Tensor {
                    tensor: format!("{prefix}/buffers"),
                    detail: format!("{buffers} moment buffers for {} parameter tensors", shapes.len()),
                });
            }
            for (i, &len) in shapes.iter().enumerate() {
                opt.first_moment.push(self.expect(&format!("{prefix}/first{i}"), &[len])?.to_vec());
                opt.second_moment.push(self.expect(&format!("{prefix}/second{i}"), &[len])?.to_vec());
            }
        }
        Ok(opt)
    }

    /// Stores a `u64` exactly as two 32-bit halves.
    pub fn push_u64(&mut self, name: &str, v: u64) -> Result<()> {
        self.push(name, &[2], vec![(v >> 32) as f64, (v & 0xffff_ffff) as f64])
    }

    pub fn read_u64(&self, name: &str) -> Result<u64> {
        let d = self.expect(name, &[2])?;
        let half = |x: f64| -> Result<u64> {
            if x >= 0.0 && x <= u32::MAX as f64 && x.fract() == 0.0 {
                Ok(x as u64)
            } else {
                Err(AfmError::Tensor {
                    tensor: name.into(),
                    detail: format!("{x} is not a 32-bit half"),
                })
            }
        };
        Ok((half(d[0])? << 32) | half(d[1])?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.remaining() < n {
            return Err(AfmError::Corruption(format!("unexpected end of data at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| AfmError::Corruption("name is not UTF-8".into()))
    }
}

fn status_code(s: TaskStatus) -> f64 {
    match s {
        TaskStatus::Untrained => 0.0,
        TaskStatus::MaskFound => 1.0,
        TaskStatus::Trained => 2.0,
    }
}

fn status_from_code(code: f64, name: &str) -> Result<TaskStatus> {
    Ok(match code {
        0.0 => TaskStatus::Untrained,
        1.0 => TaskStatus::MaskFound,
        2.0 => TaskStatus::Trained,
        c => {
            return Err(AfmError::Tensor {
                tensor: name.into(),
                detail: format!("unknown status code {c}"),
            })
        }
    })
}

/// Networks, masks and optimizer states of a supervised model. Reports
/// (history, retention) are not stored.
pub fn supervised_checkpoint(model: &AfmModel) -> Result<Checkpoint> {
    let mut c = Checkpoint::new(KIND_SUPERVISED);
    c.push_network("net", &model.net)?;
    c.push_network("controller", &model.controller.net)?;
    c.push("controller/emit_threshold", &[1], vec![model.controller.emit_threshold])?;
    c.push_mask_table("masks", &model.masks)?;
    let order: Vec<f64> = model.task_order.iter().map(|t| t.0 as f64).collect();
    c.push("task_order", &[order.len()], order)?;
    let status: Vec<f64> = model
        .task_order
        .iter()
        .map(|t| status_code(model.status.get(t).copied().unwrap_or(TaskStatus::Untrained)))
        .collect();
    c.push("task_status", &[status.len()], status)?;
    for (task, opt) in &model.optimizers {
        c.push_optimizer(&format!("optimizer/{task}"), opt)?;
    }
    c.push_optimizer("controller_optimizer", &model.controller_optimizer)?;
    c.push_u64("seed", model.seed)?;
    Ok(c)
}

/// Restores a supervised model into the layout of `template`.
pub fn restore_supervised(c: &Checkpoint, template: &AfmModel) -> Result<AfmModel> {
    let mut model = template.clone();
    model.net = c.read_network("net", &template.net)?;
    model.controller = ControllerNet {
        net: c.read_network("controller", &template.controller.net)?,
        emit_threshold: c.expect("controller/emit_threshold", &[1])?[0],
    };
    model.masks = c.read_mask_table("masks", model.hidden_width())?;
    let n = c.get("task_order")?.data.len();
    model.task_order = c.expect("task_order", &[n])?.iter().map(|&v| TaskId(v as u32)).collect();
    model.status = model
        .task_order
        .iter()
        .zip(c.expect("task_status", &[n])?)
        .map(|(&t, &code)| Ok((t, status_from_code(code, "task_status")?)))
        .collect::<Result<_>>()?;
    model.optimizers = model
        .task_order
        .iter()
        .map(|&t| Ok((t, c.read_optimizer(&format!("optimizer/{t}"), &model.net)?)))
        .collect::<Result<_>>()?;
    model.controller_optimizer = c.read_optimizer("controller_optimizer", &model.controller.net)?;
    model.seed = c.read_u64("seed")?;
    model.history.clear();
    model.retention = None;
    model.error = None;
    if c.kind != KIND_SUPERVISED {
        return Err(AfmError::Config(format!("checkpoint holds a `{}` model, not a supervised one", c.kind)));
    }
    Ok(model)
}

/// Q-network, controller and masks of a reinforcement-learning run.
pub fn rl_checkpoint(net: &Network, controller: &ControllerNet, masks: &MaskTable) -> Result<Checkpoint> {
    let mut c = Checkpoint::new(KIND_RL);
    c.push_network("net", net)?;
    c.push_network("controller", &controller.net)?;
    c.push("controller/emit_threshold", &[1], vec![controller.emit_threshold])?;
    c.push_mask_table("masks", masks)?;
    Ok(c)
}

pub fn restore_rl(c: &Checkpoint, net: &Network, controller: &ControllerNet) -> Result<(Network, ControllerNet, MaskTable)> {
    let q = c.read_network("net", net)?;
    let ctrl = ControllerNet {
        net: c.read_network("controller", &controller.net)?,
        emit_threshold: c.expect("controller/emit_threshold", &[1])?[0],
    };
    let masks = c.read_mask_table("masks", q.layers[0].fan_out())?;
    if c.kind != KIND_RL {
        return Err(AfmError::Config(format!("checkpoint holds a `{}` model, not an rl one", c.kind)));
    }
    Ok((q, ctrl, masks))
}
