//! Named parameter store, AdamW, and the versioned checkpoint format.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// All learned state, keyed by dotted names ("det.enc0.attn.wq", ...).
///
/// BTreeMap keeps iteration order deterministic, which makes optimizer
/// updates, checkpoints, and freeze-checks bit-reproducible.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) {
        let prev = self.entries.insert(
            name.to_string(),
            Param { tensor, trainable },
        );
        assert!(prev.is_none(), "duplicate parameter name: {}", name);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter: {}", name))
            .tensor
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter: {}", name))
            .tensor
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries[name].trainable
    }

    /// Set the trainable flag on every parameter whose name starts with
    /// `prefix`. Returns how many parameters were touched.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter: {}", name))
            .trainable = trainable;
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    /// FNV-1a over the raw bit patterns of parameters under `prefix`;
    /// used to assert that frozen components stay bitwise untouched.
    pub fn bit_hash_prefix(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (name, p) in &self.entries {
            if !name.starts_with(prefix) {
                continue;
            }
            for b in name.as_bytes() {
                h = (h ^ *b as u64).wrapping_mul(0x100000001b3);
            }
            for v in p.tensor.data() {
                for b in v.to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    /// Bind every parameter into the graph (trainable ones as differentiable
    /// leaves, frozen ones as constants).
    pub fn bind_all(&self, g: &mut Graph) -> Bound {
        let mut map = HashMap::with_capacity(self.entries.len());
        for (name, p) in &self.entries {
            let id = if p.trainable {
                g.leaf(p.tensor.clone())
            } else {
                g.constant(p.tensor.clone())
            };
            map.insert(name.clone(), id);
        }
        Bound { map }
    }

    /// Collect gradients for all trainable parameters from a backward pass.
    pub fn collect_grads(&self, g: &Graph, bound: &Bound) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, p) in &self.entries {
            if !p.trainable {
                continue;
            }
            if let Some(grad) = g.grad(bound.id(name)) {
                out.insert(name.clone(), grad.clone());
            }
        }
        out
    }
}

/// Name -> graph leaf mapping for one forward/backward pass.
pub struct Bound {
    map: HashMap<String, NodeId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("parameter not bound: {}", name))
    }
}

/// Merge gradient maps by summation (used for batch accumulation).
pub fn accumulate_grads(total: &mut BTreeMap<String, Tensor>, part: BTreeMap<String, Tensor>) {
    for (name, grad) in part {
        match total.get_mut(&name) {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(grad.data()) {
                    *a += b;
                }
            }
            None => {
                total.insert(name, grad);
            }
        }
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update. `lr_for` maps a parameter name to its learning rate.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr_for: impl Fn(&str) -> f64,
    ) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (name, grad) in grads {
            if !store.is_trainable(name) {
                continue;
            }
            let lr = lr_for(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let w = store.get_mut(name);
            let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
            for k in 0..grad.numel() {
                let gk = grad.data()[k];
                let mk = b1 * m.data()[k] + (1.0 - b1) * gk;
                let vk = b2 * v.data()[k] + (1.0 - b2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                let m_hat = mk / bc1;
                let v_hat = vk / bc2;
                let wk = w.data()[k];
                w.data_mut()[k] = wk - lr * (m_hat / (v_hat.sqrt() + eps) + wd * wk);
            }
        }
    }
}

// ---- checkpoint format ----
//
// Layout: magic "ODETCKPT" | u32 version | u64 header_len | header JSON |
// f64 LE payload. The header lists every array in payload order.

const MAGIC: &[u8; 8] = b"ODETCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    step: u64,
    config: serde_json::Value,
    params: Vec<ArrayEntry>,
    optimizer_step: u64,
    optimizer_arrays: Vec<ArrayEntry>,
}

pub struct Checkpoint {
    pub step: u64,
    pub config: serde_json::Value,
    pub params: ParamStore,
    pub optimizer: AdamW,
}

pub fn save_checkpoint(
    path: &Path,
    step: u64,
    config: &serde_json::Value,
    store: &ParamStore,
    optimizer: &AdamW,
) -> Result<()> {
    let mut params = Vec::new();
    let mut payload: Vec<f64> = Vec::new();
    for (name, p) in store.iter() {
        params.push(ArrayEntry {
            name: name.to_string(),
            shape: p.tensor.shape().to_vec(),
            trainable: p.trainable,
        });
        payload.extend_from_slice(p.tensor.data());
    }
    let mut optimizer_arrays = Vec::new();
    for (name, m) in &optimizer.m {
        let v = &optimizer.v[name];
        optimizer_arrays.push(ArrayEntry {
            name: name.clone(),
            shape: m.shape().to_vec(),
            trainable: true,
        });
        payload.extend_from_slice(m.data());
        payload.extend_from_slice(v.data());
    }
    let header = Header {
        version: VERSION,
        step,
        config: config.clone(),
        params,
        optimizer_step: optimizer.step_count(),
        optimizer_arrays,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header encode: {}", e)))?;

    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    let mut bytes = Vec::with_capacity(payload.len() * 8);
    for v in &payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic (not an opendet checkpoint)",
            path.display()
        )));
    }
    let mut four = [0u8; 4];
    file.read_exact(&mut four)?;
    let version = u32::from_le_bytes(four);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            version
        )));
    }
    let mut eight = [0u8; 8];
    file.read_exact(&mut eight)?;
    let header_len = u64::from_le_bytes(eight) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("header decode: {}", e)))?;

    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    if rest.len() % 8 != 0 {
        return Err(Error::Checkpoint("truncated payload".into()));
    }
    let payload: Vec<f64> = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut cursor = 0usize;
    let mut take = |n: usize| -> Result<&[f64]> {
        if cursor + n > payload.len() {
            return Err(Error::Checkpoint("payload shorter than header".into()));
        }
        let s = &payload[cursor..cursor + n];
        cursor += n;
        Ok(s)
    };

    let mut store = ParamStore::new();
    for e in &header.params {
        let n: usize = e.shape.iter().product();
        let data = take(n)?.to_vec();
        store.insert(&e.name, Tensor::from_vec(data, &e.shape), e.trainable);
    }
    let mut optimizer = AdamW::new(0.0);
    optimizer.step = header.optimizer_step;
    for e in &header.optimizer_arrays {
        let n: usize = e.shape.iter().product();
        let m = take(n)?.to_vec();
        let v = take(n)?.to_vec();
        optimizer
            .m
            .insert(e.name.clone(), Tensor::from_vec(m, &e.shape));
        optimizer
            .v
            .insert(e.name.clone(), Tensor::from_vec(v, &e.shape));
    }
    if cursor != payload.len() {
        return Err(Error::Checkpoint("payload longer than header".into()));
    }

    Ok(Checkpoint {
        step: header.step,
        config: header.config,
        params: store,
        optimizer,
    })
}
