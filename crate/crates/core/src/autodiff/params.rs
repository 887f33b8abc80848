use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FPN1";
const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";
const ADAM_STEP: &str = "adam.step";

struct Entry {
    tensor: Tensor,
    trainable: bool,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Named tensors of a model: trainable weights plus non-trainable buffers
/// (normalization statistics), and the Adam moments of every weight.
///
/// A name whose last path segment starts with `running_` is a buffer; this is
/// how buffers are recognized again when a container is loaded.
#[derive(Default)]
pub struct ParameterStore {
    entries: BTreeMap<String, Entry>,
    step: u64,
}

fn is_buffer_name(name: &str) -> bool {
    name.rsplit('.').next().is_some_and(|s| s.starts_with("running_"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Parameter name → graph node, produced by [`ParameterStore::bind`].
pub type Bindings = BTreeMap<String, Var>;

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::invalid(format!("parameter `{name}` already exists")));
        }
        let n = tensor.len();
        self.entries.insert(
            name.to_string(),
            Entry {
                tensor,
                trainable: !is_buffer_name(name),
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Overwrites values; the shape must not change.
    pub fn set(&mut self, name: &str, data: &[f64]) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        if e.tensor.len() != data.len() {
            return Err(Error::ShapeMismatch {
                op: "ParameterStore::set",
                lhs: e.tensor.shape().to_vec(),
                rhs: vec![data.len()],
            });
        }
        e.tensor.data_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.values().filter(|e| e.trainable).map(|e| e.tensor.len()).sum()
    }

    pub fn adam_steps(&self) -> u64 {
        self.step
    }

    /// Adds every entry to the graph: weights as differentiable leaves, buffers as constants.
    pub fn bind(&self, g: &mut Graph) -> Bindings {
        self.entries
            .iter()
            .map(|(k, e)| {
                let v = if e.trainable {
                    g.param(e.tensor.clone())
                } else {
                    g.constant(e.tensor.clone())
                };
                (k.clone(), v)
            })
            .collect()
    }

    /// Gradients of the bound weights after `g.backward`. Weights that did not
    /// take part in the loss get zero gradients.
    pub fn gradients(&self, g: &Graph, bound: &Bindings) -> BTreeMap<String, Vec<f64>> {
        bound
            .iter()
            .filter(|(k, _)| self.is_trainable(k))
            .map(|(k, v)| {
                let grad = g
                    .grad(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; g.value(*v).len()]);
                (k.clone(), grad)
            })
            .collect()
    }

    /// One bias-corrected Adam update of every trainable entry.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Vec<f64>>, lr: f64, cfg: AdamConfig) -> Result<()> {
        for (name, e) in &self.entries {
            if e.trainable {
                match grads.get(name) {
                    None => return Err(Error::MissingGradient(name.clone())),
                    Some(g) if g.len() != e.tensor.len() => {
                        return Err(Error::ShapeMismatch {
                            op: "adam_step",
                            lhs: e.tensor.shape().to_vec(),
                            rhs: vec![g.len()],
                        })
                    }
                    _ => {}
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, e) in self.entries.iter_mut().filter(|(_, e)| e.trainable) {
            let g = &grads[name];
            let Entry { tensor, m, v, .. } = e;
            for (((p, m), v), &g) in tensor.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Copy of the weights and buffers without optimizer state.
    pub fn snapshot(&self) -> ParameterStore {
        let mut out = ParameterStore::new();
        for (k, e) in &self.entries {
            out.insert(k, e.tensor.clone()).expect("unique names");
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        fn put(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
            buf.extend((name.len() as u32).to_le_bytes());
            buf.extend(name.as_bytes());
            buf.push(DTYPE_F64);
            buf.extend((shape.len() as u32).to_le_bytes());
            for &d in shape {
                buf.extend((d as u64).to_le_bytes());
            }
            for v in data {
                buf.extend(v.to_le_bytes());
            }
        }
        let mut buf = MAGIC.to_vec();
        for (k, e) in &self.entries {
            put(&mut buf, k, e.tensor.shape(), e.tensor.data());
        }
        if self.step > 0 {
            for (k, e) in self.entries.iter().filter(|(_, e)| e.trainable) {
                put(&mut buf, &format!("{ADAM_M}{k}"), e.tensor.shape(), &e.m);
                put(&mut buf, &format!("{ADAM_V}{k}"), e.tensor.shape(), &e.v);
            }
            put(&mut buf, ADAM_STEP, &[], &[self.step as f64]);
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::invalid(format!("parameter container: {msg}"));
        if bytes.get(..4) != Some(MAGIC.as_slice()) {
            return Err(bad("missing FPN1 magic"));
        }
        let mut pos = 4;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated entry"))?;
            pos += n;
            Ok(s)
        };
        let mut store = ParameterStore::new();
        let mut moments: Vec<(String, Vec<f64>)> = Vec::new();
        let mut step = 0u64;
        loop {
            let Ok(len) = take(4) else { break };
            let len = u32::from_le_bytes(len.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(len)?)
                .map_err(|_| bad("entry name is not UTF-8"))?
                .to_string();
            let dtype = take(1)?[0];
            let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match dtype {
                DTYPE_F64 => take(8 * n)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                DTYPE_F32 => take(4 * n)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                d => return Err(bad(&format!("unknown dtype code {d}"))),
            };
            if name == ADAM_STEP {
                step = data.first().copied().unwrap_or(0.0) as u64;
            } else if name.starts_with(ADAM_M) || name.starts_with(ADAM_V) {
                moments.push((name, data));
            } else {
                store.insert(&name, Tensor::new(shape, data)?)?;
            }
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        for (name, data) in moments {
            let (is_m, key) = match name.strip_prefix(ADAM_M) {
                Some(k) => (true, k),
                None => (false, &name[ADAM_V.len()..]),
            };
            let e = store
                .entries
                .get_mut(key)
                .ok_or_else(|| bad(&format!("optimizer state for unknown `{key}`")))?;
            if data.len() != e.tensor.len() {
                return Err(bad(&format!("optimizer state size mismatch for `{key}`")));
            }
            if is_m {
                e.m = data;
            } else {
                e.v = data;
            }
        }
        store.step = step;
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

impl std::fmt::Debug for ParameterStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map()
            .entries(self.entries.iter().map(|(k, e)| (k, e.tensor.shape())))
            .finish()
    }
}
