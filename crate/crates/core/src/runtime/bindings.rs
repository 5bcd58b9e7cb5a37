//! Named user functions that fill the logic, reducer and spreader slots of a
//! compiled graph.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::graph::{NameKind, NodeId, Resolve};
use crate::mlkit::{accumulate, normalize, MlError};
use crate::tensor::{DenseTensor, TensorData, TensorError};

/// An immutable, cheaply shared list of tensors.
pub type Payload = Arc<Vec<DenseTensor>>;

pub fn payload(tensors: Vec<DenseTensor>) -> Payload {
    Arc::new(tensors)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LogicError {
    #[error(transparent)]
    Ml(#[from] MlError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Other(String),
}

impl LogicError {
    pub fn other(msg: impl Into<String>) -> Self {
        LogicError::Other(msg.into())
    }
}

/// What a logic stage produced for one invocation.
#[derive(Debug, Clone)]
pub enum Emit {
    Data(Payload),
    /// No more output; the node closes its outputs.
    End,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CallCtx {
    pub node: NodeId,
    pub round: u32,
    pub replica: Option<u32>,
}

/// Where a logic instance lives. Passed to factories once per node stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Site {
    pub node: NodeId,
    pub stage: usize,
    pub name: String,
    pub home: Option<String>,
    pub replica: Option<u32>,
    pub seed: u64,
}

pub trait Logic: Send {
    fn call(&mut self, ctx: &CallCtx, inputs: &[Payload]) -> Result<Emit, LogicError>;
}

impl<F> Logic for F
where
    F: FnMut(&CallCtx, &[Payload]) -> Result<Emit, LogicError> + Send,
{
    fn call(&mut self, ctx: &CallCtx, inputs: &[Payload]) -> Result<Emit, LogicError> {
        self(ctx, inputs)
    }
}

pub type LogicFactory = Arc<dyn Fn(&Site) -> Box<dyn Logic> + Send + Sync>;

/// Left fold over the inputs of a reduce node, in ascending source order.
pub trait Reducer: Send + Sync {
    fn combine(&self, acc: &mut Vec<DenseTensor>, next: &[DenseTensor]) -> Result<(), LogicError>;

    fn finish(&self, _acc: &mut Vec<DenseTensor>, _count: usize) -> Result<(), LogicError> {
        Ok(())
    }
}

pub trait Spreader: Send + Sync {
    fn spread(&self, input: &Payload, parts: usize) -> Result<Vec<Payload>, LogicError>;
}

fn check_arity(acc: &[DenseTensor], next: &[DenseTensor]) -> Result<(), LogicError> {
    if acc.len() != next.len() {
        return Err(LogicError::other(format!(
            "cannot combine {} tensors with {}",
            acc.len(),
            next.len()
        )));
    }
    Ok(())
}

/// Elementwise sum of f32 tensors.
pub struct Sum;

impl Reducer for Sum {
    fn combine(&self, acc: &mut Vec<DenseTensor>, next: &[DenseTensor]) -> Result<(), LogicError> {
        check_arity(acc, next)?;
        for (a, n) in acc.iter_mut().zip(next) {
            if a.shape() != n.shape() {
                return Err(LogicError::other(format!(
                    "shape {:?} does not match {:?}",
                    n.shape(),
                    a.shape()
                )));
            }
            accumulate(a.as_f32_mut()?, n.as_f32()?);
        }
        Ok(())
    }
}

/// Uniform mean of models.
pub struct FedAvg;

impl Reducer for FedAvg {
    fn combine(&self, acc: &mut Vec<DenseTensor>, next: &[DenseTensor]) -> Result<(), LogicError> {
        Sum.combine(acc, next)
    }

    fn finish(&self, acc: &mut Vec<DenseTensor>, count: usize) -> Result<(), LogicError> {
        for a in acc.iter_mut() {
            normalize(a.as_f32_mut()?, count);
        }
        Ok(())
    }
}

/// Concatenates corresponding tensors along the first axis.
pub struct Concat;

impl Reducer for Concat {
    fn combine(&self, acc: &mut Vec<DenseTensor>, next: &[DenseTensor]) -> Result<(), LogicError> {
        check_arity(acc, next)?;
        for (a, n) in acc.iter_mut().zip(next) {
            *a = concat_rows(&[a.clone(), n.clone()])?;
        }
        Ok(())
    }
}

/// Stacks tensors that agree on every axis but the first.
pub fn concat_rows(parts: &[DenseTensor]) -> Result<DenseTensor, LogicError> {
    let first = parts.first().ok_or_else(|| LogicError::other("nothing to concatenate"))?;
    let tail = first.shape().get(1..).ok_or_else(|| LogicError::other("cannot concatenate scalars"))?;
    let mut rows = 0u32;
    for p in parts {
        if p.dtype() != first.dtype() || p.shape().get(1..) != Some(tail) {
            return Err(LogicError::other(format!(
                "cannot concatenate {} {:?} with {} {:?}",
                p.dtype(),
                p.shape(),
                first.dtype(),
                first.shape()
            )));
        }
        rows += p.shape()[0];
    }
    let data = match first.data() {
        TensorData::F32(_) => TensorData::F32(parts.iter().flat_map(|p| p.as_f32().expect("dtype checked")).copied().collect()),
        TensorData::I64(_) => TensorData::I64(parts.iter().flat_map(|p| p.as_i64().expect("dtype checked")).copied().collect()),
        TensorData::U8(_) => TensorData::U8(parts.iter().flat_map(|p| p.as_u8().expect("dtype checked")).copied().collect()),
    };
    let mut shape = vec![rows];
    shape.extend_from_slice(tail);
    Ok(DenseTensor::new(shape, data)?)
}

/// Contiguous row blocks of one tensor; earlier blocks take the remainder.
pub fn split_rows(t: &DenseTensor, parts: usize) -> Result<Vec<DenseTensor>, LogicError> {
    let rows = *t.shape().first().ok_or_else(|| LogicError::other("cannot split a scalar"))? as usize;
    let row_len = t.shape()[1..].iter().map(|&d| d as usize).product::<usize>();
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let n = rows / parts + usize::from(i < rows % parts);
        let (a, b) = (start * row_len, (start + n) * row_len);
        let data = match t.data() {
            TensorData::F32(v) => TensorData::F32(v[a..b].to_vec()),
            TensorData::I64(v) => TensorData::I64(v[a..b].to_vec()),
            TensorData::U8(v) => TensorData::U8(v[a..b].to_vec()),
        };
        let mut shape = t.shape().to_vec();
        shape[0] = n as u32;
        out.push(DenseTensor::new(shape, data)?);
        start += n;
    }
    Ok(out)
}

/// Splits every tensor of the payload into row blocks; part `i` holds block
/// `i` of each tensor.
pub struct SplitRows;

impl Spreader for SplitRows {
    fn spread(&self, input: &Payload, parts: usize) -> Result<Vec<Payload>, LogicError> {
        let blocks = input
            .iter()
            .map(|t| split_rows(t, parts))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((0..parts)
            .map(|i| payload(blocks.iter().map(|b| b[i].clone()).collect()))
            .collect())
    }
}

/// Registry of named functions.
#[derive(Clone)]
pub struct Bindings {
    logic: BTreeMap<String, LogicFactory>,
    reducers: BTreeMap<String, Arc<dyn Reducer>>,
    spreaders: BTreeMap<String, Arc<dyn Spreader>>,
}

impl fmt::Debug for Bindings {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Bindings")
            .field("logic", &self.logic.keys().collect::<Vec<_>>())
            .field("reducers", &self.reducers.keys().collect::<Vec<_>>())
            .field("spreaders", &self.spreaders.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Default for Bindings {
    fn default() -> Self {
        Self::new()
    }
}

impl Bindings {
    /// Builtin reducers `FedAvg`, `sum`, `concat` and `F`, and the `split`
    /// spreader.
    pub fn new() -> Self {
        Bindings::empty()
            .with_reducer("FedAvg", FedAvg)
            .with_reducer("sum", Sum)
            .with_reducer("concat", Concat)
            .with_reducer("F", Concat)
            .with_spreader("split", SplitRows)
    }

    pub fn empty() -> Self {
        Bindings {
            logic: BTreeMap::new(),
            reducers: BTreeMap::new(),
            spreaders: BTreeMap::new(),
        }
    }

    /// Registers a factory that builds one logic instance per node stage.
    pub fn with_logic<F>(mut self, name: impl Into<String>, factory: F) -> Self
    where
        F: Fn(&Site) -> Box<dyn Logic> + Send + Sync + 'static,
    {
        self.logic.insert(name.into(), Arc::new(factory));
        self
    }

    /// Registers a stateless function shared by every site.
    pub fn with_fn<F>(self, name: impl Into<String>, f: F) -> Self
    where
        F: Fn(&CallCtx, &[Payload]) -> Result<Emit, LogicError> + Send + Sync + 'static,
    {
        let f = Arc::new(f);
        self.with_logic(name, move |_| {
            let f = Arc::clone(&f);
            Box::new(move |ctx: &CallCtx, inputs: &[Payload]| f(ctx, inputs))
        })
    }

    pub fn with_reducer(mut self, name: impl Into<String>, r: impl Reducer + 'static) -> Self {
        self.reducers.insert(name.into(), Arc::new(r));
        self
    }

    pub fn with_spreader(mut self, name: impl Into<String>, s: impl Spreader + 'static) -> Self {
        self.spreaders.insert(name.into(), Arc::new(s));
        self
    }

    pub fn logic(&self, name: &str) -> Option<&LogicFactory> {
        self.logic.get(name)
    }

    pub fn reducer(&self, name: &str) -> Option<&Arc<dyn Reducer>> {
        self.reducers.get(name)
    }

    pub fn spreader(&self, name: &str) -> Option<&Arc<dyn Spreader>> {
        self.spreaders.get(name)
    }

    pub fn logic_names(&self) -> impl Iterator<Item = &str> {
        self.logic.keys().map(String::as_str)
    }
}

impl Resolve for Bindings {
    fn resolves(&self, kind: NameKind, name: &str) -> bool {
        match kind {
            NameKind::Logic => self.logic.contains_key(name),
            NameKind::Reducer => self.reducers.contains_key(name),
            NameKind::Spreader => self.spreaders.contains_key(name),
        }
    }
}

/// Folds payloads in order with `r`.
pub fn fold(r: &dyn Reducer, items: &[Payload]) -> Result<Payload, LogicError> {
    let (first, rest) = items
        .split_first()
        .ok_or_else(|| LogicError::other("nothing to reduce"))?;
    let mut acc = first.as_ref().clone();
    for x in rest {
        r.combine(&mut acc, x)?;
    }
    r.finish(&mut acc, items.len())?;
    Ok(payload(acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlkit::{fedavg, mlp_init, Arch, ModelParams};

    #[test]
    fn fedavg_reducer_matches_kernel_bitwise() {
        let arch = Arch::new(vec![6, 4, 3]).unwrap();
        let models: Vec<ModelParams> = (0..5).map(|s| mlp_init(&arch, s)).collect();
        let items: Vec<Payload> = models.iter().map(|m| payload(m.to_tensors())).collect();
        let folded = fold(&FedAvg, &items).unwrap();
        let expected = fedavg(&models).unwrap();
        assert_eq!(ModelParams::from_tensors(&folded).unwrap(), expected);
    }

    #[test]
    fn concat_and_split_are_inverse() {
        let t = DenseTensor::from_i64(vec![5, 2], (0..10).collect()).unwrap();
        let parts = split_rows(&t, 3).unwrap();
        assert_eq!(parts.iter().map(|p| p.shape()[0]).collect::<Vec<_>>(), [2, 2, 1]);
        assert_eq!(concat_rows(&parts).unwrap(), t);

        let spread = SplitRows.spread(&payload(vec![t.clone(), t.clone()]), 2).unwrap();
        assert_eq!(spread.len(), 2);
        assert_eq!(spread[1][0].as_i64().unwrap(), [6, 7, 8, 9]);
        assert!(concat_rows(&[t, DenseTensor::vector(vec![1.0])]).is_err());
    }

    #[test]
    fn sum_rejects_mismatched_payloads() {
        let a = payload(vec![DenseTensor::vector(vec![1.0, 2.0])]);
        let b = payload(vec![DenseTensor::vector(vec![1.0])]);
        assert!(fold(&Sum, &[a.clone(), b]).is_err());
        assert_eq!(fold(&Sum, &[a.clone(), a]).unwrap()[0].as_f32().unwrap(), [2.0, 4.0]);
    }

    #[test]
    fn resolves_builtins_and_registered_logic() {
        let b = Bindings::new().with_fn("id", |_, x| Ok(Emit::Data(x[0].clone())));
        assert!(b.resolves(NameKind::Logic, "id"));
        assert!(b.resolves(NameKind::Reducer, "F"));
        assert!(b.resolves(NameKind::Spreader, "split"));
        assert!(!b.resolves(NameKind::Logic, "train"));
    }
}
