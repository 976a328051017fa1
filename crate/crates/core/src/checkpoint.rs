//! Model checkpoints.
//!
//! Layout, little-endian:
//!
//! ```text
//! "ZAPCKPT1" | u32 n | n × tensor
//! [ "CFGJSON1" | u32 len | model config as JSON ]
//! [ "OPTSTAT1" | u8 kind | u64 step | u32 k | k × f64 hyper | u32 n | n × tensor ]
//! tensor = u16 name_len | name | u8 rank | rank × u32 dim | f32 payload
//! ```
//!
//! Optimizer tensors are named `<param>:<slot>`, e.g. `fc.weight:m`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ConvNet, ModelConfig, Param};
use crate::optim::{Optimizer, OptimizerKind, OptimizerSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ZAPCKPT1";
const CONFIG_MAGIC: &[u8; 8] = b"CFGJSON1";
const STATE_MAGIC: &[u8; 8] = b"OPTSTAT1";

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub spec: OptimizerSpec,
    pub step: u64,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl OptimizerState {
    pub fn capture(spec: &OptimizerSpec, opt: &Optimizer<f32>) -> Self {
        OptimizerState {
            spec: *spec,
            step: opt.step_count(),
            tensors: opt
                .buffers()
                .into_iter()
                .map(|(i, slot, t)| (format!("{}:{slot}", Param::ALL[i].name()), t.clone()))
                .collect(),
        }
    }

    pub fn restore(&self) -> Result<Optimizer<f32>> {
        let mut opt = self.spec.build::<f32>(Param::ALL.len());
        for (name, t) in &self.tensors {
            let (p, slot) = name
                .split_once(':')
                .ok_or_else(|| Error::Invalid(format!("bad optimizer tensor name {name:?}")))?;
            let p = Param::from_name(p).ok_or_else(|| Error::Invalid(format!("unknown parameter {p:?}")))?;
            opt.set_buffer(p.index(), slot, t.clone())?;
        }
        opt.set_step_count(self.step);
        Ok(opt)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub config: Option<ModelConfig>,
    pub state: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn from_model(model: &ConvNet, state: Option<OptimizerState>) -> Self {
        Checkpoint {
            tensors: Param::ALL
                .iter()
                .map(|p| (p.name().to_string(), model.param(*p).clone()))
                .collect(),
            config: Some(model.config().clone()),
            state,
        }
    }

    /// Rebuilds the model; without a stored config, dimensions are inferred
    /// from the tensors with default conv settings.
    pub fn to_model(&self, input: (usize, usize, usize)) -> Result<ConvNet> {
        let mut params = Vec::with_capacity(Param::ALL.len());
        for p in Param::ALL {
            let t = self
                .tensors
                .iter()
                .find(|(n, _)| n == p.name())
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Invalid(format!("checkpoint lacks {}", p.name())))?;
            params.push(t);
        }
        let config = match &self.config {
            Some(c) => c.clone(),
            None => {
                let w1 = params[0].shape();
                let fc = params[Param::FcWeight.index()].shape();
                if w1.len() != 4 || fc.len() != 2 {
                    return Err(Error::Invalid("unexpected parameter ranks".into()));
                }
                ModelConfig::new(w1[0], input, fc[0])
            }
        };
        ConvNet::from_params(config, params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        put_tensors(&mut b, &self.tensors)?;
        if let Some(c) = &self.config {
            let json = serde_json::to_vec(c).map_err(|e| Error::Invalid(e.to_string()))?;
            b.extend_from_slice(CONFIG_MAGIC);
            b.extend_from_slice(&(json.len() as u32).to_le_bytes());
            b.extend_from_slice(&json);
        }
        if let Some(s) = &self.state {
            b.extend_from_slice(STATE_MAGIC);
            b.push(match s.spec.kind {
                OptimizerKind::Sgd => 0,
                OptimizerKind::Adam => 1,
            });
            b.extend_from_slice(&s.step.to_le_bytes());
            let hyper = [s.spec.lr, s.spec.momentum, s.spec.beta1, s.spec.beta2, s.spec.eps];
            b.extend_from_slice(&(hyper.len() as u32).to_le_bytes());
            for h in hyper {
                b.extend_from_slice(&h.to_le_bytes());
            }
            put_tensors(&mut b, &s.tensors)?;
        }
        Ok(b)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let mut r = Reader { b: bytes, pos: 0, path };
        let magic = r.take(8)?;
        if &magic[..7] != b"ZAPCKPT" {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        if magic[7] != MAGIC[7] {
            return Err(Error::format(
                path,
                format!("unsupported checkpoint version {:?}", magic[7] as char),
            ));
        }
        let tensors = r.tensors()?;
        let mut config = None;
        let mut state = None;
        while r.pos < bytes.len() {
            let tag = r.take(8)?;
            if tag == CONFIG_MAGIC && config.is_none() && state.is_none() {
                let len = r.u32()? as usize;
                let json = r.take(len)?;
                config = Some(serde_json::from_slice(json).map_err(|e| Error::format(path, e.to_string()))?);
            } else if tag == STATE_MAGIC && state.is_none() {
                let kind = match r.take(1)?[0] {
                    0 => OptimizerKind::Sgd,
                    1 => OptimizerKind::Adam,
                    k => return Err(Error::format(path, format!("unknown optimizer kind {k}"))),
                };
                let step = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
                let k = r.u32()? as usize;
                if k != 5 {
                    return Err(Error::format(path, format!("expected 5 optimizer hyperparameters, found {k}")));
                }
                let mut h = [0f64; 5];
                for v in &mut h {
                    *v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
                }
                state = Some(OptimizerState {
                    spec: OptimizerSpec {
                        kind,
                        lr: h[0],
                        momentum: h[1],
                        beta1: h[2],
                        beta2: h[3],
                        eps: h[4],
                    },
                    step,
                    tensors: r.tensors()?,
                });
            } else {
                return Err(Error::format(path, format!("unexpected section {:?}", String::from_utf8_lossy(tag))));
            }
        }
        Ok(Checkpoint { tensors, config, state })
    }
}

fn put_tensors(b: &mut Vec<u8>, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    b.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let nb = name.as_bytes();
        let len = u16::try_from(nb.len()).map_err(|_| Error::Invalid(format!("tensor name too long: {name}")))?;
        let rank = u8::try_from(t.shape().len()).map_err(|_| Error::Invalid("tensor rank above 255".into()))?;
        b.extend_from_slice(&len.to_le_bytes());
        b.extend_from_slice(nb);
        b.push(rank);
        for &d in t.shape() {
            b.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.b.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tensors(&mut self) -> Result<Vec<(String, Tensor<f32>)>> {
        let n = self.u32()? as usize;
        let mut out = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let len = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| Error::format(self.path, "tensor name is not UTF-8"))?
                .to_string();
            let rank = self.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = self.take(numel.checked_mul(4).ok_or_else(|| Error::format(self.path, "tensor too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            out.push((name, Tensor::new(shape, data)?));
        }
        Ok(out)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
