use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::tensor::{AxisRole, Cursor, GridTensor};

use super::DenoiserConfig;

/// One named parameter with its gradient buffer and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Param {
    fn new(name: String, shape: Vec<usize>, value: Vec<f64>) -> Self {
        let n = value.len();
        Self {
            name,
            shape,
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Per-channel z-scoring statistics for targets and conditions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub target_mean: Vec<f64>,
    pub target_std: Vec<f64>,
    pub cond_mean: Vec<f64>,
    pub cond_std: Vec<f64>,
}

impl NormStats {
    pub fn identity(target: usize, cond: usize) -> Self {
        Self {
            target_mean: vec![0.0; target],
            target_std: vec![1.0; target],
            cond_mean: vec![0.0; cond],
            cond_std: vec![1.0; cond],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_mean.len() != self.target_std.len() || self.cond_mean.len() != self.cond_std.len() {
            bail!(Invalid, "normalization mean/std lengths differ");
        }
        if self
            .target_std
            .iter()
            .chain(&self.cond_std)
            .any(|s| !(s.is_finite() && *s > 0.0))
        {
            bail!(Invalid, "normalization std entries must be positive");
        }
        Ok(())
    }
}

/// Parameters of a [`DenoiserConfig`] network in creation order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    pub config: DenoiserConfig,
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
    pub stats: Option<NormStats>,
    /// Free-form description of what the network was trained for.
    pub meta: BTreeMap<String, String>,
    /// Number of Adam updates applied so far.
    pub adam_step: u64,
    pub(crate) grads_pending: bool,
}

pub type ParamId = usize;

impl ParamStore {
    pub(crate) fn empty(config: DenoiserConfig) -> Self {
        Self {
            config,
            params: Vec::new(),
            index: BTreeMap::new(),
            stats: None,
            meta: BTreeMap::new(),
            adam_step: 0,
            grads_pending: false,
        }
    }

    pub(crate) fn add(&mut self, name: String, shape: Vec<usize>, value: Vec<f64>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param::new(name, shape, value));
        id
    }

    pub(crate) fn add_normal(&mut self, rng: &mut impl Rng, name: String, shape: Vec<usize>, std: f64) -> ParamId {
        let n = shape.iter().product();
        let value = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        self.add(name, shape, value)
    }

    pub(crate) fn add_const(&mut self, name: String, shape: Vec<usize>, c: f64) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![c; n])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|i| &self.params[i])
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.params[id].value
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adds externally computed gradients into the buffers.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            if let Some(g) = g {
                for (a, b) in p.grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        self.grads_pending = true;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.grads_pending = false;
    }

    pub fn set_all(&mut self, value: f64) {
        for p in &mut self.params {
            p.value.iter_mut().for_each(|v| *v = value);
        }
    }

    /// Standard bias-corrected Adam update; clears the gradient buffers.
    pub fn adam_step(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<()> {
        if !self.grads_pending {
            bail!(Invalid, "adam_step called without accumulated gradients");
        }
        self.adam_step += 1;
        let t = self.adam_step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for p in &mut self.params {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                p.m[i] = beta1 * p.m[i] + (1.0 - beta1) * g;
                p.v[i] = beta2 * p.v[i] + (1.0 - beta2) * g * g;
                let mh = p.m[i] / c1;
                let vh = p.v[i] / c2;
                p.value[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        self.zero_grad();
        Ok(())
    }

    /// Writes the checkpoint container: `WDCK`, version, JSON header, then
    /// each parameter's value / first / second moment as named `WDT1`
    /// tensors.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            stats: self.stats.clone(),
            meta: self.meta.clone(),
            adam_step: self.adam_step,
            params: self.params.iter().map(|p| (p.name.clone(), p.shape.clone())).collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in &self.params {
            for (suffix, data) in [("", &p.value), (".adam_m", &p.m), (".adam_v", &p.v)] {
                let name = format!("{}{}", p.name, suffix);
                out.extend_from_slice(&(name.len() as u32).to_le_bytes());
                out.extend_from_slice(name.as_bytes());
                let roles = vec![AxisRole::Channel; p.shape.len()];
                let t = GridTensor::new(p.shape.clone(), roles, data.clone())?;
                out.extend_from_slice(&t.to_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut cur = Cursor { bytes: &bytes, pos: 0, origin: path };
        if cur.take(4)? != CKPT_MAGIC {
            return Err(Error::corrupt(path, "bad magic, expected WDCK"));
        }
        let version = cur.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Version {
                expected: CKPT_VERSION,
                found: version,
            });
        }
        let hlen = cur.u64()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(cur.take(hlen)?)
            .map_err(|e| Error::corrupt(path, format!("header: {e}")))?;
        let mut store = ParamStore::empty(header.config);
        store.stats = header.stats;
        store.meta = header.meta;
        store.adam_step = header.adam_step;
        for (name, shape) in header.params {
            let mut parts = Vec::with_capacity(3);
            for suffix in ["", ".adam_m", ".adam_v"] {
                let nlen = cur.u32()? as usize;
                let got = std::str::from_utf8(cur.take(nlen)?)
                    .map_err(|_| Error::corrupt(path, "tensor name is not utf-8"))?;
                let want = format!("{name}{suffix}");
                if got != want {
                    return Err(Error::corrupt(path, format!("expected tensor '{want}', found '{got}'")));
                }
                let (t, used) = GridTensor::from_bytes(&bytes[cur.pos..], path)?;
                cur.pos += used;
                if t.dims() != shape.as_slice() {
                    return Err(Error::corrupt(path, format!("tensor '{want}' has dims {:?}", t.dims())));
                }
                parts.push(t.into_data());
            }
            let v = parts.pop().unwrap();
            let m = parts.pop().unwrap();
            let value = parts.pop().unwrap();
            let id = store.add(name, shape, value);
            store.params[id].m = m;
            store.params[id].v = v;
        }
        if cur.pos != bytes.len() {
            return Err(Error::corrupt(path, "trailing bytes after last tensor"));
        }
        Ok(store)
    }
}

const CKPT_MAGIC: &[u8; 4] = b"WDCK";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: DenoiserConfig,
    stats: Option<NormStats>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
    adam_step: u64,
    params: Vec<(String, Vec<usize>)>,
}

/// Per-parameter gradients produced by one backward pass; `None` marks a
/// parameter the loss does not reach.
#[derive(Clone, Debug)]
pub struct Gradients(pub Vec<Option<Vec<f64>>>);

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.0[id].as_deref()
    }
}
