//! Reverse-mode differentiation over a recorded-operation tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in order. Since
//! each node only references earlier nodes, a single reverse sweep over the
//! tape propagates adjoints. One graph belongs to one training step or one
//! inference call; it is not `Sync`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, ConvGeometry};
use super::{Tensor, TransformerWeights};
use crate::error::{dim_err, Error, Result};

pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// `[n×d] + [d]`
    AddRow(NodeId, NodeId),
    /// `[C×H×W] + [C]`
    AddChannel(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        geom: ConvGeometry,
    },
    Transpose(NodeId),
    Reshape(NodeId),
    SliceCols {
        src: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    Sum(NodeId),
    /// Scalar computed outside the tape with a precomputed local gradient.
    Reduction {
        src: NodeId,
        local_grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<usize, NodeId>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    id: NodeId,
    graph: &'g Graph,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op });
        Var { id: nodes.len() - 1, graph: self }
    }

    fn value(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A constant input: receives a gradient but is not a parameter.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// The named parameter as a leaf. Repeated requests share one node.
    pub fn param(&self, weights: &TransformerWeights, name: &str) -> Result<Var<'_>> {
        let id = weights.id(name)?;
        if let Some(&node) = self.params.borrow().get(&id) {
            return Ok(Var { id: node, graph: self });
        }
        let mut value = weights.by_id(id).value.clone();
        value.clear_grad();
        let var = self.push(value, Op::Param(id));
        self.params.borrow_mut().insert(id, var.id);
        Ok(var)
    }

    /// Concatenates 2-D nodes with equal row counts along the column axis.
    pub fn concat_cols<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts.first().ok_or_else(|| dim_err!("concat of zero tensors"))?;
        let (rows, _) = first.value().dims2()?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let mut widths = Vec::with_capacity(parts.len());
        for v in &values {
            let (r, c) = v.dims2()?;
            if r != rows {
                return Err(dim_err!("concat row mismatch: {r} vs {rows}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(i));
            }
        }
        Ok(self.push(Tensor::new([rows, total], data)?, Op::ConcatCols(parts.iter().map(|p| p.id).collect())))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let val = |i: NodeId| -> &Tensor { &nodes[i].value };
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (m, k) = val(*a).dims2()?;
                    let (_, n) = val(*b).dims2()?;
                    let bt = kernels::transpose(val(*b).data(), k, n);
                    accumulate(&mut grads, *a, kernels::gemm(&g, &bt, m, n, k));
                    let at = kernels::transpose(val(*a).data(), m, k);
                    accumulate(&mut grads, *b, kernels::gemm(&at, &g, k, m, n));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(a, b) => {
                    let d = val(*b).len();
                    let mut gb = vec![0.0; d];
                    for row in g.chunks_exact(d) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddChannel(a, b) => {
                    let c = val(*b).len();
                    let plane = g.len() / c;
                    let gb = g.chunks_exact(plane).map(|p| p.iter().sum()).collect();
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Mul(a, b) => {
                    let ga = g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                    let gb = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, k) => {
                    accumulate(&mut grads, *a, g.iter().map(|v| v * k).collect());
                }
                Op::Relu(a) => {
                    let ga = g
                        .iter()
                        .zip(val(*a).data())
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.iter().zip(node.value.data()).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let (_, c) = node.value.dims2()?;
                    let mut ga = vec![0.0; g.len()];
                    for ((dst, gr), yr) in ga.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(node.value.data().chunks_exact(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, gv), y) in dst.iter_mut().zip(gr).zip(yr) {
                            *d = y * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, gain, bias, normalized, inv_std } => {
                    let d = val(*gain).len();
                    let gn = val(*gain).data();
                    let mut gx = vec![0.0; g.len()];
                    let mut ggain = vec![0.0; d];
                    let mut gbias = vec![0.0; d];
                    for (i, ((gr, zr), dst)) in g
                        .chunks_exact(d)
                        .zip(normalized.chunks_exact(d))
                        .zip(gx.chunks_exact_mut(d))
                        .enumerate()
                    {
                        let mut mean_dz = 0.0;
                        let mut mean_dz_z = 0.0;
                        for j in 0..d {
                            let dz = gr[j] * gn[j];
                            mean_dz += dz;
                            mean_dz_z += dz * zr[j];
                            ggain[j] += gr[j] * zr[j];
                            gbias[j] += gr[j];
                        }
                        mean_dz /= d as f64;
                        mean_dz_z /= d as f64;
                        for j in 0..d {
                            dst[j] = inv_std[i] * (gr[j] * gn[j] - mean_dz - zr[j] * mean_dz_z);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gain, ggain);
                    accumulate(&mut grads, *bias, gbias);
                }
                Op::Conv2d { input, kernel, geom } => {
                    let gi = kernels::conv2d_backward_input(&g, val(*kernel).data(), geom);
                    let gk = kernels::conv2d_backward_kernel(&g, val(*input).data(), geom);
                    accumulate(&mut grads, *input, gi);
                    accumulate(&mut grads, *kernel, gk);
                }
                Op::Transpose(a) => {
                    let (r, c) = node.value.dims2()?;
                    accumulate(&mut grads, *a, kernels::transpose(&g, r, c));
                }
                Op::Reshape(a) => accumulate(&mut grads, *a, g),
                Op::SliceCols { src, start } => {
                    let (rows, cols) = val(*src).dims2()?;
                    let (_, width) = node.value.dims2()?;
                    let mut gs = vec![0.0; rows * cols];
                    for i in 0..rows {
                        gs[i * cols + start..i * cols + start + width]
                            .copy_from_slice(&g[i * width..(i + 1) * width]);
                    }
                    accumulate(&mut grads, *src, gs);
                }
                Op::ConcatCols(parts) => {
                    let (rows, total) = node.value.dims2()?;
                    let mut offset = 0;
                    for &p in parts {
                        let (_, c) = val(p).dims2()?;
                        let mut gp = Vec::with_capacity(rows * c);
                        for i in 0..rows {
                            gp.extend_from_slice(&g[i * total + offset..i * total + offset + c]);
                        }
                        accumulate(&mut grads, p, gp);
                        offset += c;
                    }
                }
                Op::Sum(a) => {
                    let n = val(*a).len();
                    accumulate(&mut grads, *a, vec![g[0]; n]);
                }
                Op::Reduction { src, local_grad } => {
                    accumulate(&mut grads, *src, local_grad.iter().map(|v| v * g[0]).collect());
                }
            }
        }

        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(p) => Some((p, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, g: Vec<f64>) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(&g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Graph::backward`]: adjoints of every leaf reached by the sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<usize, NodeId>,
}

impl Gradients {
    /// Gradient of a leaf; `None` when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Gradient of parameter `id` (index into [`TransformerWeights`]).
    pub fn param(&self, id: usize) -> Option<&[f64]> {
        self.params.get(&id).and_then(|&n| self.grads[n].as_deref())
    }

    /// Stores `∂loss/∂p` into every parameter's `grad`; parameters the loss
    /// does not touch receive exact zeros.
    pub fn write_to(&self, weights: &mut TransformerWeights) -> Result<()> {
        for id in 0..weights.len() {
            let g = match self.param(id) {
                Some(g) => g.to_vec(),
                None => vec![0.0; weights.by_id(id).value.len()],
            };
            weights.by_id_mut(id).value.set_grad(g)?;
        }
        Ok(())
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'g> {
        self.graph.push(value, op)
    }

    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let out = kernels::matmul(&self.value(), &other.value())?;
        Ok(self.unary(out, Op::MatMul(self.id, other.id)))
    }

    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let out = self.value().add(&other.value())?;
        Ok(self.unary(out, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.add(&other.scale(-1.0))
    }

    /// Adds a length-`d` bias to every row of an `n×d` matrix.
    pub fn add_row(&self, bias: &Var<'g>) -> Result<Var<'g>> {
        let x = self.value();
        let b = bias.value();
        let (_, d) = x.dims2()?;
        if b.len() != d {
            return Err(dim_err!("row bias length {} does not match width {d}", b.len()));
        }
        let mut out = x.as_ref().clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            for (o, v) in row.iter_mut().zip(b.data()) {
                *o += v;
            }
        }
        Ok(self.unary(out, Op::AddRow(self.id, bias.id)))
    }

    /// Adds a per-channel bias to a `C×H×W` map.
    pub fn add_channel(&self, bias: &Var<'g>) -> Result<Var<'g>> {
        let x = self.value();
        let b = bias.value();
        let (c, h, w) = x.dims3()?;
        if b.len() != c {
            return Err(dim_err!("channel bias length {} does not match {c} channels", b.len()));
        }
        let mut out = x.as_ref().clone();
        for (plane, bv) in out.data_mut().chunks_exact_mut(h * w).zip(b.data()) {
            for o in plane {
                *o += bv;
            }
        }
        Ok(self.unary(out, Op::AddChannel(self.id, bias.id)))
    }

    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let out = self.value().zip_map(&other.value(), |a, b| a * b)?;
        Ok(self.unary(out, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, k: f64) -> Var<'g> {
        let out = self.value().scale(k);
        self.unary(out, Op::Scale(self.id, k))
    }

    pub fn relu(&self) -> Var<'g> {
        let out = self.value().map(|v| v.max(0.0));
        self.unary(out, Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Var<'g> {
        let out = self.value().map(kernels::sigmoid);
        self.unary(out, Op::Sigmoid(self.id))
    }

    pub fn softmax_rows(&self) -> Result<Var<'g>> {
        let out = kernels::softmax(&self.value())?;
        Ok(self.unary(out, Op::Softmax(self.id)))
    }

    pub fn layernorm(&self, gain: &Var<'g>, bias: &Var<'g>, eps: f64) -> Result<Var<'g>> {
        let x = self.value();
        let (n, d) = x.dims2()?;
        let (gv, bv) = (gain.value(), bias.value());
        if gv.len() != d || bv.len() != d {
            return Err(dim_err!("layernorm affine params must have length {d}"));
        }
        let (out, cache) = kernels::layernorm_forward(x.data(), gv.data(), bv.data(), n, d, eps);
        Ok(self.unary(
            Tensor::new([n, d], out)?,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                normalized: cache.normalized,
                inv_std: cache.inv_std,
            },
        ))
    }

    pub fn conv2d(&self, kernel: &Var<'g>, stride: usize, padding: usize) -> Result<Var<'g>> {
        let x = self.value();
        let k = kernel.value();
        let geom = ConvGeometry::new(x.shape(), k.shape(), stride, padding)?;
        let out = kernels::conv2d_forward(x.data(), k.data(), &geom);
        Ok(self.unary(
            Tensor::new([geom.c_out, geom.out_h, geom.out_w], out)?,
            Op::Conv2d { input: self.id, kernel: kernel.id, geom },
        ))
    }

    pub fn transpose(&self) -> Result<Var<'g>> {
        let out = self.value().transpose()?;
        Ok(self.unary(out, Op::Transpose(self.id)))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'g>> {
        let out = self.value().reshape(shape)?;
        Ok(self.unary(out, Op::Reshape(self.id)))
    }

    /// Columns `start..end` of a 2-D node.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'g>> {
        let x = self.value();
        let (rows, cols) = x.dims2()?;
        if start > end || end > cols {
            return Err(dim_err!("column slice {start}..{end} out of range for width {cols}"));
        }
        let width = end - start;
        let mut data = Vec::with_capacity(rows * width);
        for i in 0..rows {
            data.extend_from_slice(&x.row(i)[start..end]);
        }
        Ok(self.unary(Tensor::new([rows, width], data)?, Op::SliceCols { src: self.id, start }))
    }

    pub fn sum(&self) -> Var<'g> {
        let total = self.value().sum();
        self.unary(Tensor::scalar(total), Op::Sum(self.id))
    }

    /// Records a scalar `value = f(self)` whose derivative `∂f/∂self` was
    /// computed by the caller.
    pub fn reduction(&self, value: f64, local_grad: Vec<f64>) -> Result<Var<'g>> {
        if local_grad.len() != self.value().len() {
            return Err(dim_err!("local gradient length does not match source"));
        }
        Ok(self.unary(Tensor::scalar(value), Op::Reduction { src: self.id, local_grad }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_loss_gradient_is_outer_product_structure() {
        // loss = sum(W·x): ∂/∂W[i,j] = x[j] for every row i.
        let g = Graph::new();
        let w = g.constant(Tensor::from_fn([3, 2], |i| i as f64 - 1.5));
        let x = g.constant(Tensor::new([2, 1], vec![0.25, -4.0]).unwrap());
        let loss = w.matmul(&x).unwrap().sum();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).unwrap(), &[0.25, -4.0, 0.25, -4.0, 0.25, -4.0]);
        assert_eq!(grads.wrt(x).unwrap(), &[1.5, 4.5]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = Graph::new();
        let x = g.constant(Tensor::zeros([2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn untouched_parameter_gets_exact_zero() {
        let mut w = TransformerWeights::new();
        w.insert("used", Tensor::full([2], 3.0)).unwrap();
        w.insert("unused", Tensor::full([2], 5.0)).unwrap();
        let g = Graph::new();
        let used = g.param(&w, "used").unwrap();
        let _unused = g.param(&w, "unused").unwrap();
        let loss = used.mul(&used).unwrap().sum();
        g.backward(loss).unwrap().write_to(&mut w).unwrap();
        assert_eq!(w.get("used").unwrap().grad().unwrap(), &[6.0, 6.0]);
        assert_eq!(w.get("unused").unwrap().grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn repeated_param_requests_share_a_node() {
        let mut w = TransformerWeights::new();
        w.insert("p", Tensor::full([1], 2.0)).unwrap();
        let g = Graph::new();
        let a = g.param(&w, "p").unwrap();
        let b = g.param(&w, "p").unwrap();
        assert_eq!(a.id(), b.id());
        let grads = g.backward(a.mul(&b).unwrap().sum()).unwrap();
        assert_eq!(grads.param(0).unwrap(), &[4.0]);
    }
}
