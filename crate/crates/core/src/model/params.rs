//! Named parameters, initialization and the binary checkpoint codec.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelError, Result};
use crate::autodiff::{Tape, Var};
use crate::tensor::{DType, Element, Tensor};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(ModelError::Config(format!("duplicate parameter name {name:?}")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.values.iter_mut()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Places every parameter on `tape` as a gradient-tracked leaf.
    pub fn bind(&self, tape: &Tape<T>) -> Vec<Var> {
        self.values.iter().map(|v| tape.leaf(v.clone())).collect()
    }

    /// Places every parameter on `tape` as a constant.
    pub fn bind_frozen(&self, tape: &Tape<T>) -> Vec<Var> {
        self.values.iter().map(|v| tape.constant(v.clone())).collect()
    }

    pub fn to_f64(&self) -> ParamStore<f64> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces values from checkpoint entries. Every parameter must be
    /// present with matching dtype and shape; unknown entries are errors.
    pub fn assign(&mut self, entries: Vec<CheckpointEntry>) -> Result<()> {
        if entries.len() != self.len() {
            return Err(ModelError::Checkpoint(format!(
                "checkpoint holds {} parameters, model expects {}",
                entries.len(),
                self.len()
            )));
        }
        for e in entries {
            let id = self
                .find(&e.name)
                .ok_or_else(|| ModelError::Checkpoint(format!("unknown parameter {:?}", e.name)))?;
            if e.dtype != T::DTYPE {
                return Err(ModelError::Checkpoint(format!(
                    "{}: stored as {}, model uses {}",
                    e.name,
                    e.dtype,
                    T::DTYPE
                )));
            }
            if e.shape != self.values[id.0].shape() {
                return Err(ModelError::Checkpoint(format!(
                    "{}: shape {:?} vs expected {:?}",
                    e.name,
                    e.shape,
                    self.values[id.0].shape()
                )));
            }
            let width = T::DTYPE.size_of();
            let data = e.raw.chunks(width).map(T::read_le).collect();
            self.values[id.0] = Tensor::new(e.shape, data)?;
        }
        Ok(())
    }
}

/// Parameter initialization rules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Normal with the given standard deviation, redrawn outside ±2σ.
    TruncNormal(f64),
    /// Uniform in `±1/√fan_in`.
    FanIn(usize),
    /// Inverse softplus of a log-uniform draw in `[lo, hi]`.
    InvSoftplusLogUniform(f64, f64),
    /// `ln(k + 1)` along the last axis, giving state poles `a_k = -(k + 1)`.
    S4dLog,
}

impl Init {
    pub fn sample<T: Element>(self, rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::TruncNormal(std) => {
                let normal = Normal::new(0.0, std).expect("positive std");
                (0..n)
                    .map(|_| loop {
                        let v: f64 = normal.sample(rng);
                        if v.abs() <= 2.0 * std {
                            break v;
                        }
                    })
                    .collect()
            }
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
            }
            Init::InvSoftplusLogUniform(lo, hi) => (0..n)
                .map(|_| {
                    let dt = (rng.random_range(lo.ln()..hi.ln())).exp();
                    dt + (-(-dt).exp_m1()).ln()
                })
                .collect(),
            Init::S4dLog => {
                let last = shape.last().copied().unwrap_or(1).max(1);
                (0..n).map(|i| ((i % last) as f64 + 1.0).ln()).collect()
            }
        };
        Tensor::from_f64(shape.to_vec(), &values).expect("shape matches")
    }
}

const MAGIC: &[u8; 4] = b"MCSR";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One decoded checkpoint record; `raw` holds little-endian values.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub raw: Vec<u8>,
}

pub fn save_checkpoint<T: Element>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + store.numel() * T::DTYPE.size_of());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let count = u32::try_from(store.len()).map_err(|_| ModelError::Checkpoint("too many parameters".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, value) in store.iter() {
        let len = u16::try_from(name.len()).map_err(|_| ModelError::Checkpoint(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.code());
        let rank = u8::try_from(value.rank()).map_err(|_| ModelError::Checkpoint(format!("{name}: rank too large")))?;
        out.push(rank);
        for &d in value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in value.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            ModelError::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Vec<CheckpointEntry>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(ModelError::Checkpoint("bad magic, expected MCSR".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32("parameter count")? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| ModelError::Checkpoint("name is not UTF-8".into()))?
            .to_string();
        let code = r.u8("dtype")?;
        let dtype = DType::from_code(code).ok_or_else(|| ModelError::Checkpoint(format!("{name}: dtype code {code}")))?;
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u64("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size_of()))
            .ok_or_else(|| ModelError::Checkpoint(format!("{name}: extents overflow")))?;
        let raw = r.take(numel, "values")?.to_vec();
        entries.push(CheckpointEntry { name, dtype, shape, raw });
    }
    if r.pos != bytes.len() {
        return Err(ModelError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(entries)
}
