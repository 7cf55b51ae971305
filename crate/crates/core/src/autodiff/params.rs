//! Named parameter storage, seeded initialization and the checkpoint format.
//!
//! Checkpoint layout (all integers and floats little-endian):
//!
//! ```text
//! magic    4 bytes  b"GOCK"
//! version  u32      currently 1
//! count    u32      number of records
//! record × count:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   rank     u32, dims (u64 × rank)
//!   values   f64 × product(dims), row-major
//! ```

use std::io::{Read, Write};
use std::ops::Index;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;

use crate::scalar::{cast, widen, Scalar};

use super::tape::{Tape, Var};
use super::tensor::{numel, Tensor};
use super::TensorError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GOCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Weight matrix `[fan_in, fan_out]` drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn add_weight<R: Rng>(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut R) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| cast(rng.gen_range(-bound..bound))).collect();
        self.add(name, Tensor::new(vec![fan_in, fan_out], data).expect("consistent shape"))
    }

    /// Zero bias row `[1, width]`.
    pub fn add_bias(&mut self, name: impl Into<String>, width: usize) -> ParamId {
        self.add(name, Tensor::zeros(&[1, width]))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
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
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total scalar count.
    pub fn size(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.ids().map(|id| tape.param(id, self.get(id).clone())).collect())
    }

    /// Registers every parameter as a constant (no gradients recorded).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.ids().map(|id| tape.constant(self.get(id).clone())).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }

    /// Converts every value into another scalar type.
    pub fn convert<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|t| Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| cast(widen(x))).collect()).unwrap())
                .collect(),
        }
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u32::<LittleEndian>(self.values.len() as u32)?;
        for (name, value) in self.names.iter().zip(&self.values) {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LittleEndian>(value.rank() as u32)?;
            for &d in value.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &x in value.data() {
                w.write_f64::<LittleEndian>(widen(x))?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = r.read_u32::<LittleEndian>()? as usize;
        let mut store = Self::new();
        for _ in 0..count {
            let len = r.read_u32::<LittleEndian>()? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| CheckpointError::Name)?;
            let rank = r.read_u32::<LittleEndian>()? as usize;
            let shape = (0..rank).map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let data = (0..numel(&shape)).map(|_| r.read_f64::<LittleEndian>().map(cast)).collect::<Result<Vec<T>, _>>()?;
            store.add(name, Tensor::new(shape, data)?);
        }
        Ok(store)
    }

    /// Lists every name/shape disagreement with `expected`; empty when compatible.
    pub fn shape_diff(&self, expected: &ParamStore<T>) -> Vec<String> {
        let mut diff = Vec::new();
        for (name, value) in expected.names.iter().zip(&expected.values) {
            match self.find(name) {
                None => diff.push(format!("missing {name} {:?}", value.shape())),
                Some(id) if self.get(id).shape() != value.shape() => {
                    diff.push(format!("{name}: expected {:?}, found {:?}", value.shape(), self.get(id).shape()))
                }
                Some(_) => {}
            }
        }
        for name in &self.names {
            if expected.find(name).is_none() {
                diff.push(format!("unexpected {name}"));
            }
        }
        diff
    }

    /// Copies values from `other` by name; shapes must already agree.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<(), CheckpointError> {
        let diff = other.shape_diff(self);
        if !diff.is_empty() {
            return Err(CheckpointError::Mismatch(diff));
        }
        for id in self.ids().collect::<Vec<_>>() {
            let src = other.find(&self.names[id.0]).expect("checked above");
            self.values[id.0] = other.values[src.0].clone();
        }
        Ok(())
    }
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("parameter name is not UTF-8")]
    Name,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint does not match the model: {}", .0.join("; "))]
    Mismatch(Vec<String>),
}
