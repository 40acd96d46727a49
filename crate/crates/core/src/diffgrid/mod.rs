//! Reverse-mode autodiff over dense volumetric tensors.
//!
//! A [`Tape`] records eagerly-evaluated operations on rank-5 feature maps
//! `[n, c, d, h, w]` (plus the handful of flat shapes the heads need) and
//! replays them in reverse to accumulate gradients. Backward passes are
//! themselves expressed as tape operations, so a recorded gradient can be
//! differentiated again; the gradient penalty in `objectives` relies on
//! this to reach the critic parameters through its own input gradient.

mod gradcheck;
mod kernels;
mod tape;

use std::collections::HashMap;

use thiserror::Error;

use crate::scalar::Scalar;

pub use gradcheck::{gradcheck, GradCheckConfig, GradCheckReport, GradCheckRow};
pub use tape::{GradMap, NodeId, Tape};

/// Errors raised by tape operations and tensor constructors.
#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },
    #[error("{op}: spatial dims {dims:?} must be even to halve them")]
    OddSpatialDim { op: &'static str, dims: [usize; 3] },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("values length {got} does not match shape {shape:?} (expected {expected})")]
    Size {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("parameter block {0:?} already exists")]
    DuplicateParam(String),
    #[error("unknown parameter block {0:?}")]
    UnknownParam(String),
    #[error("{0}")]
    GradCheck(String),
}

fn shape_err(op: &'static str, msg: String) -> DiffError {
    DiffError::Shape { op, msg }
}

/// Dense tensor with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffTensor<S> {
    pub shape: Vec<usize>,
    pub values: Vec<S>,
    pub requires_grad: bool,
    pub grad: Option<Vec<S>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> DiffTensor<S> {
    pub fn new(shape: Vec<usize>, values: Vec<S>) -> Result<Self, DiffError> {
        let expected = numel(&shape);
        if values.len() != expected {
            return Err(DiffError::Size {
                shape,
                expected,
                got: values.len(),
            });
        }
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self {
            shape,
            values: vec![S::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, v: S) -> Self {
        let n = numel(&shape);
        Self {
            shape,
            values: vec![v; n],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as a differentiation target when bound to a tape.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Zero-filled gradient buffer, allocating it on first use.
    pub fn grad_mut(&mut self) -> &mut [S] {
        let n = self.values.len();
        self.grad.get_or_insert_with(|| vec![S::zero(); n])
    }

    pub fn clear_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(S::zero());
        }
    }
}

/// Named collection of trainable tensors.
///
/// Blocks keep their insertion order; binding, checkpointing and optimizer
/// state all iterate in that order, which keeps runs reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<S> {
    blocks: Vec<ParamBlock<S>>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone)]
pub struct ParamBlock<S> {
    pub name: String,
    pub value: DiffTensor<S>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        Self {
            blocks: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, mut value: DiffTensor<S>) -> Result<(), DiffError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(DiffError::DuplicateParam(name));
        }
        value.requires_grad = true;
        self.index.insert(name.clone(), self.blocks.len());
        self.blocks.push(ParamBlock { name, value });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&DiffTensor<S>, DiffError> {
        self.index
            .get(name)
            .map(|&i| &self.blocks[i].value)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut DiffTensor<S>, DiffError> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.blocks[i].value),
            None => Err(DiffError::UnknownParam(name.to_string())),
        }
    }

    pub fn blocks(&self) -> &[ParamBlock<S>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock<S>] {
        &mut self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Total number of scalar parameters across blocks.
    pub fn total_params(&self) -> usize {
        self.blocks.iter().map(|b| b.value.numel()).sum()
    }

    /// Inserts every block into `tape` as a gradient-requiring leaf.
    pub fn bind(&self, tape: &mut Tape<S>) -> TapeBinding {
        let ids = self
            .blocks
            .iter()
            .map(|b| tape.leaf_from(&b.value.shape, &b.value.values, true))
            .collect();
        TapeBinding { ids }
    }

    /// Inserts every block as a frozen constant; backward passes stop here.
    pub fn bind_const(&self, tape: &mut Tape<S>) -> TapeBinding {
        let ids = self
            .blocks
            .iter()
            .map(|b| tape.leaf_from(&b.value.shape, &b.value.values, false))
            .collect();
        TapeBinding { ids }
    }

    /// Copies gradients produced by a backward pass into the blocks.
    ///
    /// Blocks the loss never touched get a zero gradient.
    pub fn absorb_grads(&mut self, tape: &Tape<S>, binding: &TapeBinding, grads: &GradMap) {
        for (block, &id) in self.blocks.iter_mut().zip(&binding.ids) {
            let dst = block.value.grad_mut();
            match grads.grad_of(id) {
                Some(gid) => dst.copy_from_slice(tape.values(gid)),
                None => dst.fill(S::zero()),
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for b in &mut self.blocks {
            b.value.clear_grad();
        }
    }
}

/// Tape leaf ids for a bound [`ParamSet`], parallel to its blocks.
#[derive(Debug, Clone)]
pub struct TapeBinding {
    pub ids: Vec<NodeId>,
}

impl TapeBinding {
    pub fn id(&self, params: &ParamSet<impl Scalar>, name: &str) -> Result<NodeId, DiffError> {
        params
            .index
            .get(name)
            .map(|&i| self.ids[i])
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }
}
