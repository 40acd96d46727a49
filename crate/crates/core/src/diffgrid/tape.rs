//! Operation tape with graph-building reverse passes.
//!
//! Every operation is evaluated eagerly and recorded. [`Tape::backward_graph`]
//! emits the vector-Jacobian products as *new tape nodes*, so the result of a
//! backward pass can itself be differentiated — the gradient penalty uses
//! this to differentiate the critic's input gradient w.r.t. the critic
//! parameters. Reductions and accumulations run in fixed orders; identical
//! inputs give bit-identical results.

use std::rc::Rc;

use crate::scalar::Scalar;

use super::kernels;
use super::{numel, shape_err, DiffError, DiffTensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone)]
enum Op<S> {
    Leaf,
    Conv {
        ks: usize,
        x: NodeId,
        k: NodeId,
        b: Option<NodeId>,
    },
    ConvGradInput {
        ks: usize,
        u: NodeId,
        k: NodeId,
    },
    ConvGradKernel {
        ks: usize,
        x: NodeId,
        u: NodeId,
    },
    UpConv {
        x: NodeId,
        k: NodeId,
        b: Option<NodeId>,
    },
    UpConvGradInput {
        u: NodeId,
        k: NodeId,
    },
    UpConvGradKernel {
        x: NodeId,
        u: NodeId,
    },
    BiasGrad {
        u: NodeId,
    },
    BiasBroadcast {
        v: NodeId,
    },
    MaxPool2 {
        x: NodeId,
        idx: Rc<Vec<usize>>,
    },
    MaxUnpool2 {
        u: NodeId,
        idx: Rc<Vec<usize>>,
    },
    PoolGather {
        v: NodeId,
        idx: Rc<Vec<usize>>,
    },
    Relu {
        x: NodeId,
    },
    MulConst {
        x: NodeId,
        c: Rc<Vec<S>>,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    ColSum {
        x: NodeId,
    },
    RowBroadcast {
        v: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: S,
    },
    Offset {
        x: NodeId,
    },
    SumAll {
        x: NodeId,
    },
    FillScaled {
        x: NodeId,
        c: S,
    },
    SumSpatial {
        x: NodeId,
    },
    BroadcastSpatial {
        v: NodeId,
    },
    SumPerSample {
        x: NodeId,
    },
    BroadcastPerSample {
        v: NodeId,
    },
    Abs {
        x: NodeId,
    },
    Sqrt {
        x: NodeId,
    },
    Reshape {
        x: NodeId,
    },
}

impl<S> Op<S> {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match *self {
            Leaf => vec![],
            Conv { x, k, b, .. } | UpConv { x, k, b } => {
                let mut v = vec![x, k];
                if let Some(b) = b {
                    v.push(b);
                }
                v
            }
            ConvGradInput { u, k, .. } | UpConvGradInput { u, k } => vec![u, k],
            ConvGradKernel { x, u, .. } | UpConvGradKernel { x, u } => vec![x, u],
            BiasGrad { u } => vec![u],
            BiasBroadcast { v } => vec![v],
            MaxPool2 { x, .. } => vec![x],
            MaxUnpool2 { u, .. } => vec![u],
            PoolGather { v, .. } => vec![v],
            Relu { x } => vec![x],
            MulConst { x, .. } => vec![x],
            MatMul { a, b, .. } | Add { a, b } | Sub { a, b } | Mul { a, b } => vec![a, b],
            ColSum { x } => vec![x],
            RowBroadcast { v } => vec![v],
            Scale { x, .. } | Offset { x } => vec![x],
            SumAll { x } | FillScaled { x, .. } => vec![x],
            SumSpatial { x } => vec![x],
            BroadcastSpatial { v } => vec![v],
            SumPerSample { x } => vec![x],
            BroadcastPerSample { v } => vec![v],
            Abs { x } | Sqrt { x } | Reshape { x } => vec![x],
        }
    }
}

struct Node<S> {
    shape: Vec<usize>,
    values: Vec<S>,
    requires_grad: bool,
    op: Op<S>,
}

/// Gradient nodes produced by a backward pass, indexed by source node.
#[derive(Debug)]
pub struct GradMap {
    grads: Vec<Option<NodeId>>,
}

impl GradMap {
    /// Gradient node of `id`, if the pass produced one.
    pub fn grad_of(&self, id: NodeId) -> Option<NodeId> {
        self.grads.get(id.0).copied().flatten()
    }
}

/// Recorded computation over [`DiffTensor`] values.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn values(&self, id: NodeId) -> &[S] {
        &self.nodes[id.0].values
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> S {
        debug_assert_eq!(self.nodes[id.0].values.len(), 1);
        self.nodes[id.0].values[0]
    }

    /// Copies the node out as a plain tensor.
    pub fn to_tensor(&self, id: NodeId) -> DiffTensor<S> {
        let n = &self.nodes[id.0];
        DiffTensor {
            shape: n.shape.clone(),
            values: n.values.clone(),
            requires_grad: n.requires_grad,
            grad: None,
        }
    }

    pub fn leaf(&mut self, t: &DiffTensor<S>) -> NodeId {
        self.leaf_from(&t.shape, &t.values, t.requires_grad)
    }

    pub fn leaf_from(&mut self, shape: &[usize], values: &[S], requires_grad: bool) -> NodeId {
        debug_assert_eq!(numel(shape), values.len());
        self.push(shape.to_vec(), values.to_vec(), requires_grad, Op::Leaf)
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<S>, requires_grad: bool, op: Op<S>) -> NodeId {
        debug_assert_eq!(numel(&shape), values.len());
        self.nodes.push(Node {
            shape,
            values,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn dims5(&self, op: &'static str, id: NodeId) -> Result<[usize; 5], DiffError> {
        let s = &self.nodes[id.0].shape;
        if s.len() != 5 {
            return Err(shape_err(op, format!("expected a rank-5 map, got shape {s:?}")));
        }
        Ok([s[0], s[1], s[2], s[3], s[4]])
    }

    // ---- convolution family ----

    /// 3x3x3 convolution, zero padding 1, same-size output.
    pub fn conv3(&mut self, x: NodeId, k: NodeId, b: Option<NodeId>) -> Result<NodeId, DiffError> {
        self.conv(x, k, b, 3)
    }

    /// 1x1x1 convolution: a per-voxel channel map.
    pub fn conv1(&mut self, x: NodeId, k: NodeId, b: Option<NodeId>) -> Result<NodeId, DiffError> {
        self.conv(x, k, b, 1)
    }

    fn conv(
        &mut self,
        x: NodeId,
        k: NodeId,
        b: Option<NodeId>,
        ks: usize,
    ) -> Result<NodeId, DiffError> {
        const OP: &str = "conv";
        let [n, ci, d, h, w] = self.dims5(OP, x)?;
        let kshape = &self.nodes[k.0].shape;
        if kshape.len() != 5 || kshape[1] != ci || kshape[2] != ks || kshape[3] != ks || kshape[4] != ks
        {
            return Err(shape_err(
                OP,
                format!("kernel shape {kshape:?} does not match input channels {ci} and size {ks}"),
            ));
        }
        let co = kshape[0];
        if let Some(b) = b {
            let bs = &self.nodes[b.0].shape;
            if bs.as_slice() != [co] {
                return Err(shape_err(
                    OP,
                    format!("bias shape {bs:?} does not match {co} output channels"),
                ));
            }
        }
        Ok(self.op_conv(x, k, b, ks, [n, ci, d, h, w], co))
    }

    fn op_conv(
        &mut self,
        x: NodeId,
        k: NodeId,
        b: Option<NodeId>,
        ks: usize,
        dims: [usize; 5],
        co: usize,
    ) -> NodeId {
        let [n, _, d, h, w] = dims;
        let mut out = vec![S::zero(); n * co * d * h * w];
        kernels::conv_fwd(
            &self.nodes[x.0].values,
            dims,
            &self.nodes[k.0].values,
            co,
            ks,
            b.map(|b| self.nodes[b.0].values.as_slice()),
            &mut out,
        );
        let mut ids = vec![x, k];
        ids.extend(b);
        let rg = self.any_grad(&ids);
        self.push(vec![n, co, d, h, w], out, rg, Op::Conv { ks, x, k, b })
    }

    fn op_conv_grad_input(&mut self, u: NodeId, k: NodeId, ks: usize) -> NodeId {
        let [n, co, d, h, w] = [
            self.nodes[u.0].shape[0],
            self.nodes[u.0].shape[1],
            self.nodes[u.0].shape[2],
            self.nodes[u.0].shape[3],
            self.nodes[u.0].shape[4],
        ];
        let ci = self.nodes[k.0].shape[1];
        let mut out = vec![S::zero(); n * ci * d * h * w];
        kernels::conv_grad_input(
            &self.nodes[u.0].values,
            [n, co, d, h, w],
            &self.nodes[k.0].values,
            ci,
            ks,
            &mut out,
        );
        let rg = self.any_grad(&[u, k]);
        self.push(vec![n, ci, d, h, w], out, rg, Op::ConvGradInput { ks, u, k })
    }

    fn op_conv_grad_kernel(&mut self, x: NodeId, u: NodeId, ks: usize) -> NodeId {
        let xd = [
            self.nodes[x.0].shape[0],
            self.nodes[x.0].shape[1],
            self.nodes[x.0].shape[2],
            self.nodes[x.0].shape[3],
            self.nodes[x.0].shape[4],
        ];
        let co = self.nodes[u.0].shape[1];
        let mut out = vec![S::zero(); co * xd[1] * ks * ks * ks];
        kernels::conv_grad_kernel(
            &self.nodes[x.0].values,
            xd,
            &self.nodes[u.0].values,
            co,
            ks,
            &mut out,
        );
        let rg = self.any_grad(&[x, u]);
        self.push(
            vec![co, xd[1], ks, ks, ks],
            out,
            rg,
            Op::ConvGradKernel { ks, x, u },
        )
    }

    // ---- transposed convolution ----

    /// Transposed convolution, kernel 2, stride 2: doubles each spatial dim.
    pub fn upconv2(&mut self, x: NodeId, k: NodeId, b: Option<NodeId>) -> Result<NodeId, DiffError> {
        const OP: &str = "upconv2";
        let [n, ci, d, h, w] = self.dims5(OP, x)?;
        let kshape = &self.nodes[k.0].shape;
        if kshape.len() != 5 || kshape[0] != ci || kshape[2] != 2 || kshape[3] != 2 || kshape[4] != 2 {
            return Err(shape_err(
                OP,
                format!("kernel shape {kshape:?} does not match input channels {ci} and size 2"),
            ));
        }
        let co = kshape[1];
        if let Some(b) = b {
            let bs = &self.nodes[b.0].shape;
            if bs.as_slice() != [co] {
                return Err(shape_err(
                    OP,
                    format!("bias shape {bs:?} does not match {co} output channels"),
                ));
            }
        }
        Ok(self.op_upconv(x, k, b, [n, ci, d, h, w], co))
    }

    fn op_upconv(
        &mut self,
        x: NodeId,
        k: NodeId,
        b: Option<NodeId>,
        dims: [usize; 5],
        co: usize,
    ) -> NodeId {
        let [n, _, d, h, w] = dims;
        let mut out = vec![S::zero(); n * co * 8 * d * h * w];
        kernels::upconv_fwd(
            &self.nodes[x.0].values,
            dims,
            &self.nodes[k.0].values,
            co,
            b.map(|b| self.nodes[b.0].values.as_slice()),
            &mut out,
        );
        let mut ids = vec![x, k];
        ids.extend(b);
        let rg = self.any_grad(&ids);
        self.push(
            vec![n, co, 2 * d, 2 * h, 2 * w],
            out,
            rg,
            Op::UpConv { x, k, b },
        )
    }

    fn op_upconv_grad_input(&mut self, u: NodeId, k: NodeId) -> NodeId {
        let ud = [
            self.nodes[u.0].shape[0],
            self.nodes[u.0].shape[1],
            self.nodes[u.0].shape[2],
            self.nodes[u.0].shape[3],
            self.nodes[u.0].shape[4],
        ];
        let ci = self.nodes[k.0].shape[0];
        let mut out = vec![S::zero(); ud[0] * ci * ud[2] * ud[3] * ud[4] / 8];
        kernels::upconv_grad_input(
            &self.nodes[u.0].values,
            ud,
            &self.nodes[k.0].values,
            ci,
            &mut out,
        );
        let rg = self.any_grad(&[u, k]);
        self.push(
            vec![ud[0], ci, ud[2] / 2, ud[3] / 2, ud[4] / 2],
            out,
            rg,
            Op::UpConvGradInput { u, k },
        )
    }

    fn op_upconv_grad_kernel(&mut self, x: NodeId, u: NodeId) -> NodeId {
        let xd = [
            self.nodes[x.0].shape[0],
            self.nodes[x.0].shape[1],
            self.nodes[x.0].shape[2],
            self.nodes[x.0].shape[3],
            self.nodes[x.0].shape[4],
        ];
        let co = self.nodes[u.0].shape[1];
        let mut out = vec![S::zero(); xd[1] * co * 8];
        kernels::upconv_grad_kernel(
            &self.nodes[x.0].values,
            xd,
            &self.nodes[u.0].values,
            co,
            &mut out,
        );
        let rg = self.any_grad(&[x, u]);
        self.push(vec![xd[1], co, 2, 2, 2], out, rg, Op::UpConvGradKernel { x, u })
    }

    fn op_bias_grad(&mut self, u: NodeId) -> NodeId {
        let ud = [
            self.nodes[u.0].shape[0],
            self.nodes[u.0].shape[1],
            self.nodes[u.0].shape[2],
            self.nodes[u.0].shape[3],
            self.nodes[u.0].shape[4],
        ];
        let mut out = vec![S::zero(); ud[1]];
        kernels::bias_grad_ncdhw(&self.nodes[u.0].values, ud, &mut out);
        let rg = self.nodes[u.0].requires_grad;
        self.push(vec![ud[1]], out, rg, Op::BiasGrad { u })
    }

    fn op_bias_broadcast(&mut self, v: NodeId, like: &[usize]) -> NodeId {
        let [n, c, d, h, w] = [like[0], like[1], like[2], like[3], like[4]];
        let map = d * h * w;
        let vv = &self.nodes[v.0].values;
        let mut out = vec![S::zero(); n * c * map];
        for bn in 0..n {
            for ch in 0..c {
                out[(bn * c + ch) * map..][..map].fill(vv[ch]);
            }
        }
        let rg = self.nodes[v.0].requires_grad;
        self.push(like.to_vec(), out, rg, Op::BiasBroadcast { v })
    }

    // ---- pooling ----

    /// 2x2x2 max pooling with stride 2; ties route to the first row-major
    /// maximum.
    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        const OP: &str = "maxpool2";
        let [n, c, d, h, w] = self.dims5(OP, x)?;
        if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(DiffError::OddSpatialDim {
                op: OP,
                dims: [d, h, w],
            });
        }
        let mut out = vec![S::zero(); n * c * d * h * w / 8];
        let mut idx = Vec::new();
        kernels::maxpool_fwd(&self.nodes[x.0].values, [n, c, d, h, w], &mut out, &mut idx);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            vec![n, c, d / 2, h / 2, w / 2],
            out,
            rg,
            Op::MaxPool2 {
                x,
                idx: Rc::new(idx),
            },
        ))
    }

    fn op_max_unpool(&mut self, u: NodeId, idx: Rc<Vec<usize>>, like: &[usize]) -> NodeId {
        let mut out = vec![S::zero(); numel(like)];
        kernels::unpool_scatter(&self.nodes[u.0].values, &idx, &mut out);
        let rg = self.nodes[u.0].requires_grad;
        self.push(like.to_vec(), out, rg, Op::MaxUnpool2 { u, idx })
    }

    fn op_pool_gather(&mut self, v: NodeId, idx: Rc<Vec<usize>>, like: &[usize]) -> NodeId {
        let mut out = vec![S::zero(); numel(like)];
        kernels::pool_gather(&self.nodes[v.0].values, &idx, &mut out);
        let rg = self.nodes[v.0].requires_grad;
        self.push(like.to_vec(), out, rg, Op::PoolGather { v, idx })
    }

    // ---- pointwise ----

    /// Rectified linear unit; the gradient at exactly zero is zero.
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let values = self.nodes[x.0]
            .values
            .iter()
            .map(|&v| if v > S::zero() { v } else { S::zero() })
            .collect();
        let rg = self.nodes[x.0].requires_grad;
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, values, rg, Op::Relu { x })
    }

    /// Elementwise product with a constant array (not differentiated through).
    pub fn mul_const(&mut self, x: NodeId, c: Rc<Vec<S>>) -> Result<NodeId, DiffError> {
        if c.len() != self.nodes[x.0].values.len() {
            return Err(shape_err(
                "mul_const",
                format!(
                    "constant length {} does not match node length {}",
                    c.len(),
                    self.nodes[x.0].values.len()
                ),
            ));
        }
        Ok(self.op_mul_const(x, c))
    }

    fn op_mul_const(&mut self, x: NodeId, c: Rc<Vec<S>>) -> NodeId {
        let values = self.nodes[x.0]
            .values
            .iter()
            .zip(c.iter())
            .map(|(&a, &b)| a * b)
            .collect();
        let rg = self.nodes[x.0].requires_grad;
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, values, rg, Op::MulConst { x, c })
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let values = self.nodes[x.0].values.iter().map(|v| v.abs()).collect();
        let rg = self.nodes[x.0].requires_grad;
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, values, rg, Op::Abs { x })
    }

    /// Elementwise square root. The derivative diverges at zero; callers
    /// guard with a small offset where an argument can reach it.
    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let values = self.nodes[x.0].values.iter().map(|v| v.sqrt()).collect();
        let rg = self.nodes[x.0].requires_grad;
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, values, rg, Op::Sqrt { x })
    }

    // ---- linear / shape ----

    /// Fully connected layer: `x [n, k] * w [k, m] + b [m]`.
    pub fn fc(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        const OP: &str = "fc";
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        let bs = self.nodes[b.0].shape.clone();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(shape_err(
                OP,
                format!("input {xs:?} and weight {ws:?} do not chain"),
            ));
        }
        if bs.as_slice() != [ws[1]] {
            return Err(shape_err(
                OP,
                format!("bias {bs:?} does not match {} output features", ws[1]),
            ));
        }
        let mm = self.op_matmul(x, w, false, false);
        let bb = self.op_row_broadcast(b, xs[0]);
        Ok(self.op_add(mm, bb))
    }

    fn op_matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> NodeId {
        let asp = &self.nodes[a.0].shape;
        let bsp = &self.nodes[b.0].shape;
        let (n, k) = if ta { (asp[1], asp[0]) } else { (asp[0], asp[1]) };
        let (kb, m) = if tb { (bsp[1], bsp[0]) } else { (bsp[0], bsp[1]) };
        debug_assert_eq!(k, kb);
        let mut out = vec![S::zero(); n * m];
        kernels::matmul(
            &self.nodes[a.0].values,
            &self.nodes[b.0].values,
            n,
            k,
            m,
            ta,
            tb,
            &mut out,
        );
        let rg = self.any_grad(&[a, b]);
        self.push(vec![n, m], out, rg, Op::MatMul { a, b, ta, tb })
    }

    fn op_col_sum(&mut self, x: NodeId) -> NodeId {
        let (n, m) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
        let mut out = vec![S::zero(); m];
        for i in 0..n {
            let row = &self.nodes[x.0].values[i * m..][..m];
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(vec![m], out, rg, Op::ColSum { x })
    }

    fn op_row_broadcast(&mut self, v: NodeId, rows: usize) -> NodeId {
        let m = self.nodes[v.0].shape[0];
        let mut out = vec![S::zero(); rows * m];
        for i in 0..rows {
            out[i * m..][..m].copy_from_slice(&self.nodes[v.0].values);
        }
        let rg = self.nodes[v.0].requires_grad;
        self.push(vec![rows, m], out, rg, Op::RowBroadcast { v })
    }

    /// Collapses all non-batch dims: `[n, ...] -> [n, rest]`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let s = &self.nodes[x.0].shape;
        if s.is_empty() {
            return Err(shape_err("flatten", "scalar input has no batch dim".into()));
        }
        let n = s[0];
        let rest = numel(&s[1..]);
        self.reshape(x, vec![n, rest])
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, DiffError> {
        if numel(&shape) != self.nodes[x.0].values.len() {
            return Err(shape_err(
                "reshape",
                format!(
                    "cannot view {:?} as {shape:?}",
                    self.nodes[x.0].shape
                ),
            ));
        }
        let values = self.nodes[x.0].values.clone();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(shape, values, rg, Op::Reshape { x }))
    }

    // ---- arithmetic ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.check_same_shape("add", a, b)?;
        Ok(self.op_add(a, b))
    }

    fn op_add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, values, rg, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.check_same_shape("sub", a, b)?;
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| x - y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, values, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.check_same_shape("mul", a, b)?;
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, values, rg, Op::Mul { a, b }))
    }

    fn check_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), DiffError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(shape_err(
                op,
                format!(
                    "shapes {:?} and {:?} differ",
                    self.nodes[a.0].shape, self.nodes[b.0].shape
                ),
            ));
        }
        Ok(())
    }

    pub fn scale(&mut self, x: NodeId, c: S) -> NodeId {
        let values = self.nodes[x.0].values.iter().map(|&v| v * c).collect();
        let rg = self.nodes[x.0].requires_grad;
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, values, rg, Op::Scale { x, c })
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.scale(x, -S::one())
    }

    /// Adds a scalar constant to every element.
    pub fn offset(&mut self, x: NodeId, c: S) -> NodeId {
        let values = self.nodes[x.0].values.iter().map(|&v| v + c).collect();
        let rg = self.nodes[x.0].requires_grad;
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, values, rg, Op::Offset { x })
    }

    // ---- reductions / broadcasts ----

    /// Sum of every element, as a scalar node.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut acc = S::zero();
        for &v in &self.nodes[x.0].values {
            acc += v;
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(vec![], vec![acc], rg, Op::SumAll { x })
    }

    /// Mean of every element, as a scalar node.
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let n = self.nodes[x.0].values.len();
        if n == 0 {
            return Err(shape_err("mean", "empty tensor".into()));
        }
        let s = self.sum_all(x);
        Ok(self.scale(s, S::lit(1.0 / n as f64)))
    }

    fn op_fill_scaled(&mut self, x: NodeId, shape: &[usize], c: S) -> NodeId {
        let v = self.nodes[x.0].values[0] * c;
        let rg = self.nodes[x.0].requires_grad;
        self.push(shape.to_vec(), vec![v; numel(shape)], rg, Op::FillScaled { x, c })
    }

    /// Per-(sample, channel) mean over the spatial dims: `[n,c,d,h,w] -> [n,c]`.
    pub fn global_mean_spatial(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let [_, _, d, h, w] = self.dims5("global_mean_spatial", x)?;
        let s = self.op_sum_spatial(x);
        Ok(self.scale(s, S::lit(1.0 / (d * h * w) as f64)))
    }

    fn op_sum_spatial(&mut self, x: NodeId) -> NodeId {
        let [n, c, d, h, w] = [
            self.nodes[x.0].shape[0],
            self.nodes[x.0].shape[1],
            self.nodes[x.0].shape[2],
            self.nodes[x.0].shape[3],
            self.nodes[x.0].shape[4],
        ];
        let map = d * h * w;
        let mut out = vec![S::zero(); n * c];
        for i in 0..n * c {
            let mut acc = S::zero();
            for &v in &self.nodes[x.0].values[i * map..][..map] {
                acc += v;
            }
            out[i] = acc;
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(vec![n, c], out, rg, Op::SumSpatial { x })
    }

    fn op_broadcast_spatial(&mut self, v: NodeId, like: &[usize]) -> NodeId {
        let map = like[2] * like[3] * like[4];
        let mut out = vec![S::zero(); numel(like)];
        for (i, &val) in self.nodes[v.0].values.iter().enumerate() {
            out[i * map..][..map].fill(val);
        }
        let rg = self.nodes[v.0].requires_grad;
        self.push(like.to_vec(), out, rg, Op::BroadcastSpatial { v })
    }

    /// Per-sample sum over everything but the batch dim: `[n, ...] -> [n]`.
    pub fn sum_per_sample(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let s = &self.nodes[x.0].shape;
        if s.is_empty() {
            return Err(shape_err("sum_per_sample", "scalar input has no batch dim".into()));
        }
        let n = s[0];
        let per = numel(&s[1..]);
        let mut out = vec![S::zero(); n];
        for i in 0..n {
            let mut acc = S::zero();
            for &v in &self.nodes[x.0].values[i * per..][..per] {
                acc += v;
            }
            out[i] = acc;
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![n], out, rg, Op::SumPerSample { x }))
    }

    fn op_broadcast_per_sample(&mut self, v: NodeId, like: &[usize]) -> NodeId {
        let n = like[0];
        let per = numel(&like[1..]);
        let mut out = vec![S::zero(); n * per];
        for i in 0..n {
            out[i * per..][..per].fill(self.nodes[v.0].values[i]);
        }
        let rg = self.nodes[v.0].requires_grad;
        self.push(like.to_vec(), out, rg, Op::BroadcastPerSample { v })
    }

    // ---- backward ----

    /// Reverse pass from a scalar `from` w.r.t. every gradient-requiring
    /// leaf.
    pub fn backward(&mut self, from: NodeId) -> Result<GradMap, DiffError> {
        let wrt: Vec<NodeId> = (0..self.nodes.len())
            .filter(|&i| matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].requires_grad)
            .map(NodeId)
            .collect();
        self.backward_graph(from, &wrt)
    }

    /// Reverse pass from a scalar `from`, emitting gradient nodes for the
    /// nodes in `wrt` (and everything between them and `from`).
    ///
    /// The emitted nodes are ordinary tape operations, so a second backward
    /// pass over a value built from them differentiates through this one.
    pub fn backward_graph(&mut self, from: NodeId, wrt: &[NodeId]) -> Result<GradMap, DiffError> {
        if numel(&self.nodes[from.0].shape) != 1 {
            return Err(DiffError::NonScalarRoot {
                shape: self.nodes[from.0].shape.clone(),
            });
        }
        let upto = from.0 + 1;

        // Nodes whose gradient is wanted: wrt and everything downstream of it.
        let mut needed = vec![false; upto];
        for t in wrt {
            if t.0 < upto {
                needed[t.0] = true;
            }
        }
        for i in 0..upto {
            if !needed[i] && self.nodes[i].op.inputs().iter().any(|id| needed[id.0]) {
                needed[i] = true;
            }
        }

        // Nodes the root actually depends on.
        let mut live = vec![false; upto];
        live[from.0] = true;
        for i in (0..upto).rev() {
            if live[i] {
                for id in self.nodes[i].op.inputs() {
                    live[id.0] = true;
                }
            }
        }

        let mut grads: Vec<Option<NodeId>> = vec![None; upto];
        if needed[from.0] {
            grads[from.0] = Some(self.leaf_from(&[], &[S::one()], false));
        }
        for i in (0..upto).rev() {
            if !(live[i] && needed[i]) {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let op = self.nodes[i].op.clone();
            let contribs = self.emit_vjps(i, &op, g, &needed);
            for (target, contrib) in contribs {
                grads[target.0] = Some(match grads[target.0] {
                    None => contrib,
                    Some(prev) => self.op_add(prev, contrib),
                });
            }
        }
        Ok(GradMap { grads })
    }

    /// Emits gradient contributions of node `i` (with upstream gradient `g`)
    /// into each of its inputs that needs one.
    fn emit_vjps(
        &mut self,
        i: usize,
        op: &Op<S>,
        g: NodeId,
        needed: &[bool],
    ) -> Vec<(NodeId, NodeId)> {
        let want = |id: NodeId| needed[id.0];
        let mut out = Vec::new();
        match *op {
            Op::Leaf => {}
            Op::Conv { ks, x, k, b } => {
                if want(x) {
                    let c = self.op_conv_grad_input(g, k, ks);
                    out.push((x, c));
                }
                if want(k) {
                    let c = self.op_conv_grad_kernel(x, g, ks);
                    out.push((k, c));
                }
                if let Some(b) = b {
                    if want(b) {
                        let c = self.op_bias_grad(g);
                        out.push((b, c));
                    }
                }
            }
            Op::ConvGradInput { ks, u, k } => {
                if want(u) {
                    let co = self.nodes[u.0].shape[1];
                    let dims = [
                        self.nodes[g.0].shape[0],
                        self.nodes[g.0].shape[1],
                        self.nodes[g.0].shape[2],
                        self.nodes[g.0].shape[3],
                        self.nodes[g.0].shape[4],
                    ];
                    let c = self.op_conv(g, k, None, ks, dims, co);
                    out.push((u, c));
                }
                if want(k) {
                    let c = self.op_conv_grad_kernel(g, u, ks);
                    out.push((k, c));
                }
            }
            Op::ConvGradKernel { ks, x, u } => {
                if want(x) {
                    let c = self.op_conv_grad_input(u, g, ks);
                    out.push((x, c));
                }
                if want(u) {
                    let co = self.nodes[g.0].shape[0];
                    let dims = [
                        self.nodes[x.0].shape[0],
                        self.nodes[x.0].shape[1],
                        self.nodes[x.0].shape[2],
                        self.nodes[x.0].shape[3],
                        self.nodes[x.0].shape[4],
                    ];
                    let c = self.op_conv(x, g, None, ks, dims, co);
                    out.push((u, c));
                }
            }
            Op::UpConv { x, k, b } => {
                if want(x) {
                    let c = self.op_upconv_grad_input(g, k);
                    out.push((x, c));
                }
                if want(k) {
                    let c = self.op_upconv_grad_kernel(x, g);
                    out.push((k, c));
                }
                if let Some(b) = b {
                    if want(b) {
                        let c = self.op_bias_grad(g);
                        out.push((b, c));
                    }
                }
            }
            Op::UpConvGradInput { u, k } => {
                if want(u) {
                    let co = self.nodes[u.0].shape[1];
                    let dims = [
                        self.nodes[g.0].shape[0],
                        self.nodes[g.0].shape[1],
                        self.nodes[g.0].shape[2],
                        self.nodes[g.0].shape[3],
                        self.nodes[g.0].shape[4],
                    ];
                    let c = self.op_upconv(g, k, None, dims, co);
                    out.push((u, c));
                }
                if want(k) {
                    let c = self.op_upconv_grad_kernel(g, u);
                    out.push((k, c));
                }
            }
            Op::UpConvGradKernel { x, u } => {
                if want(x) {
                    let c = self.op_upconv_grad_input(u, g);
                    out.push((x, c));
                }
                if want(u) {
                    let co = self.nodes[g.0].shape[1];
                    let dims = [
                        self.nodes[x.0].shape[0],
                        self.nodes[x.0].shape[1],
                        self.nodes[x.0].shape[2],
                        self.nodes[x.0].shape[3],
                        self.nodes[x.0].shape[4],
                    ];
                    let c = self.op_upconv(x, g, None, dims, co);
                    out.push((u, c));
                }
            }
            Op::BiasGrad { u } => {
                if want(u) {
                    let like = self.nodes[u.0].shape.clone();
                    let c = self.op_bias_broadcast(g, &like);
                    out.push((u, c));
                }
            }
            Op::BiasBroadcast { v } => {
                if want(v) {
                    let c = self.op_bias_grad(g);
                    out.push((v, c));
                }
            }
            Op::MaxPool2 { x, ref idx } => {
                if want(x) {
                    let like = self.nodes[x.0].shape.clone();
                    let c = self.op_max_unpool(g, idx.clone(), &like);
                    out.push((x, c));
                }
            }
            Op::MaxUnpool2 { u, ref idx } => {
                if want(u) {
                    let like = self.nodes[u.0].shape.clone();
                    let c = self.op_pool_gather(g, idx.clone(), &like);
                    out.push((u, c));
                }
            }
            Op::PoolGather { v, ref idx } => {
                if want(v) {
                    let like = self.nodes[v.0].shape.clone();
                    let c = self.op_max_unpool(g, idx.clone(), &like);
                    out.push((v, c));
                }
            }
            Op::Relu { x } => {
                if want(x) {
                    let mask: Vec<S> = self.nodes[x.0]
                        .values
                        .iter()
                        .map(|&v| if v > S::zero() { S::one() } else { S::zero() })
                        .collect();
                    let c = self.op_mul_const(g, Rc::new(mask));
                    out.push((x, c));
                }
            }
            Op::MulConst { x, ref c } => {
                if want(x) {
                    let n = self.op_mul_const(g, c.clone());
                    out.push((x, n));
                }
            }
            Op::MatMul { a, b, ta, tb } => match (ta, tb) {
                (false, false) => {
                    if want(a) {
                        let c = self.op_matmul(g, b, false, true);
                        out.push((a, c));
                    }
                    if want(b) {
                        let c = self.op_matmul(a, g, true, false);
                        out.push((b, c));
                    }
                }
                (true, false) => {
                    if want(a) {
                        let c = self.op_matmul(b, g, false, true);
                        out.push((a, c));
                    }
                    if want(b) {
                        let c = self.op_matmul(a, g, false, false);
                        out.push((b, c));
                    }
                }
                (false, true) => {
                    if want(a) {
                        let c = self.op_matmul(g, b, false, false);
                        out.push((a, c));
                    }
                    if want(b) {
                        let c = self.op_matmul(g, a, true, false);
                        out.push((b, c));
                    }
                }
                (true, true) => unreachable!("doubly transposed product is never emitted"),
            },
            Op::ColSum { x } => {
                if want(x) {
                    let rows = self.nodes[x.0].shape[0];
                    let c = self.op_row_broadcast(g, rows);
                    out.push((x, c));
                }
            }
            Op::RowBroadcast { v } => {
                if want(v) {
                    let c = self.op_col_sum(g);
                    out.push((v, c));
                }
            }
            Op::Add { a, b } => {
                if want(a) {
                    out.push((a, g));
                }
                if want(b) {
                    out.push((b, g));
                }
            }
            Op::Sub { a, b } => {
                if want(a) {
                    out.push((a, g));
                }
                if want(b) {
                    let c = self.scale(g, -S::one());
                    out.push((b, c));
                }
            }
            Op::Mul { a, b } => {
                if want(a) {
                    let c = self.op_mul_pair(g, b);
                    out.push((a, c));
                }
                if want(b) {
                    let c = self.op_mul_pair(g, a);
                    out.push((b, c));
                }
            }
            Op::Scale { x, c } => {
                if want(x) {
                    let n = self.scale(g, c);
                    out.push((x, n));
                }
            }
            Op::Offset { x } => {
                if want(x) {
                    out.push((x, g));
                }
            }
            Op::SumAll { x } => {
                if want(x) {
                    let like = self.nodes[x.0].shape.clone();
                    let c = self.op_fill_scaled(g, &like, S::one());
                    out.push((x, c));
                }
            }
            Op::FillScaled { x, c } => {
                if want(x) {
                    let s = self.sum_all(g);
                    let n = self.scale(s, c);
                    out.push((x, n));
                }
            }
            Op::SumSpatial { x } => {
                if want(x) {
                    let like = self.nodes[x.0].shape.clone();
                    let c = self.op_broadcast_spatial(g, &like);
                    out.push((x, c));
                }
            }
            Op::BroadcastSpatial { v } => {
                if want(v) {
                    let c = self.op_sum_spatial(g);
                    out.push((v, c));
                }
            }
            Op::SumPerSample { x } => {
                if want(x) {
                    let like = self.nodes[x.0].shape.clone();
                    let c = self.op_broadcast_per_sample(g, &like);
                    out.push((x, c));
                }
            }
            Op::BroadcastPerSample { v } => {
                if want(v) {
                    let c = self
                        .sum_per_sample(g)
                        .expect("gradient of a broadcast has a batch dim");
                    out.push((v, c));
                }
            }
            Op::Abs { x } => {
                if want(x) {
                    let sign: Vec<S> = self.nodes[x.0]
                        .values
                        .iter()
                        .map(|&v| {
                            if v > S::zero() {
                                S::one()
                            } else if v < S::zero() {
                                -S::one()
                            } else {
                                S::zero()
                            }
                        })
                        .collect();
                    let c = self.op_mul_const(g, Rc::new(sign));
                    out.push((x, c));
                }
            }
            Op::Sqrt { x } => {
                if want(x) {
                    let half = S::lit(0.5);
                    let dv: Vec<S> = self.nodes[i].values.iter().map(|&s| half / s).collect();
                    let c = self.op_mul_const(g, Rc::new(dv));
                    out.push((x, c));
                }
            }
            Op::Reshape { x } => {
                if want(x) {
                    let like = self.nodes[x.0].shape.clone();
                    let c = self
                        .reshape(g, like)
                        .expect("gradient has the same element count");
                    out.push((x, c));
                }
            }
        }
        out
    }

    fn op_mul_pair(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, values, rg, Op::Mul { a, b })
    }
}
