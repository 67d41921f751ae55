//! Tape of differentiable operations on `C x H x W` feature tensors.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the tape
//! visits every node after all of its consumers.

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::roialign::{roi_taps, RoiTaps};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv { x: NodeId, w: NodeId, b: NodeId, k: usize },
    ConvT4 { x: NodeId, w: NodeId, b: NodeId },
    Relu(NodeId),
    Sigmoid(NodeId),
    MaxPool { x: NodeId, argmax: Vec<usize> },
    UpsampleNearest(NodeId),
    Bilinear2x(NodeId),
    Add(NodeId, NodeId),
    Concat(Vec<NodeId>),
    RoiAlign { x: NodeId, taps: RoiTaps<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients by node; `None` where nothing flowed.
#[derive(Debug)]
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.0[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.0[id.0].take()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// `k x k` convolution (k odd), stride 1, same padding.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (c, h, wd) = self.value(x).chw()?;
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if ws.len() != 4 || ws[1] != c || ws[2] != ws[3] || ws[2].is_multiple_of(2) || bs != [ws[0]] {
            return Err(mismatch("conv2d", self.value(x).shape(), &ws));
        }
        let (o, k) = (ws[0], ws[2]);
        let out = kernels::conv2d(self.value(x).data(), c, h, wd, self.value(w).data(), self.value(b).data(), o, k);
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::new(vec![o, h, wd], out)?, Op::Conv { x, w, b, k }, rg))
    }

    /// 4x4 transposed convolution, stride 2, padding 1. `w` is `C x O x 4 x 4`.
    pub fn conv_transpose4(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (c, h, wd) = self.value(x).chw()?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[0] != c || ws[2] != 4 || ws[3] != 4 || self.value(b).shape() != [ws[1]] {
            return Err(mismatch("conv_transpose4", self.value(x).shape(), &ws));
        }
        let o = ws[1];
        let out = kernels::conv_transpose4(self.value(x).data(), c, h, wd, self.value(w).data(), self.value(b).data(), o);
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::new(vec![o, 2 * h, 2 * wd], out)?, Op::ConvT4 { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a.max(0.0)).collect()).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| kernels::sigmoid(a)).collect()).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(x).chw()?;
        let (out, argmax) = kernels::maxpool2(self.value(x).data(), c, h, w);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![c, h.div_ceil(2), w.div_ceil(2)], out)?, Op::MaxPool { x, argmax }, rg))
    }

    /// Nearest-neighbor resize to `(oh, ow)`.
    pub fn upsample_nearest(&mut self, x: NodeId, oh: usize, ow: usize) -> Result<NodeId> {
        let (c, h, w) = self.value(x).chw()?;
        let out = kernels::upsample_nearest(self.value(x).data(), c, h, w, oh, ow);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![c, oh, ow], out)?, Op::UpsampleNearest(x), rg))
    }

    pub fn bilinear2x(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(x).chw()?;
        let out = kernels::bilinear2x(self.value(x).data(), c, h, w);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![c, 2 * h, 2 * w], out)?, Op::Bilinear2x(x), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch("add", va.shape(), vb.shape()));
        }
        let out = Tensor::new(va.shape().to_vec(), va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect())?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Channel concatenation of `C_i x H x W` tensors.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let (_, h, w) = self.value(xs[0]).chw()?;
        let mut c_total = 0;
        let mut data = Vec::new();
        for &x in xs {
            let (c, hh, ww) = self.value(x).chw()?;
            if (hh, ww) != (h, w) {
                return Err(mismatch("concat", self.value(xs[0]).shape(), self.value(x).shape()));
            }
            c_total += c;
            data.extend_from_slice(self.value(x).data());
        }
        let rg = self.rg(xs);
        Ok(self.push(Tensor::new(vec![c_total, h, w], data)?, Op::Concat(xs.to_vec()), rg))
    }

    /// RoIAlign of an image-space `roi` from a feature map of the given stride.
    pub fn roi_align(&mut self, x: NodeId, roi: &BBox<f64>, stride: u32, out_size: usize, sampling_ratio: usize) -> Result<NodeId> {
        let (c, h, w) = self.value(x).chw()?;
        let taps = roi_taps(h, w, stride, roi, out_size, sampling_ratio)?;
        let out = taps.apply(self.value(x).data(), c, h * w);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![c, out_size, out_size], out)?, Op::RoiAlign { x, taps }, rg))
    }

    /// Reverse sweep from seed gradients (one per output node).
    pub fn backward(&self, seeds: Vec<(NodeId, Tensor)>) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            if g.shape() != self.value(id).shape() {
                return Err(mismatch("backward seed", g.shape(), self.value(id).shape()));
            }
            accumulate(&mut grads[id.0], g.into_data(), self.value(id).shape());
        }
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let gd = g.data();
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv { x, w, b, k } => {
                    let (c, h, wd) = self.value(*x).chw()?;
                    let o = self.value(*w).shape()[0];
                    let need_x = self.nodes[x.0].requires_grad;
                    let (gx, gw, gb) =
                        kernels::conv2d_backward(self.value(*x).data(), c, h, wd, self.value(*w).data(), o, *k, gd, need_x);
                    if let Some(gx) = gx {
                        accumulate(&mut grads[x.0], gx, self.value(*x).shape());
                    }
                    self.acc_if(&mut grads, *w, gw);
                    self.acc_if(&mut grads, *b, gb);
                }
                Op::ConvT4 { x, w, b } => {
                    let (c, h, wd) = self.value(*x).chw()?;
                    let o = self.value(*w).shape()[1];
                    let need_x = self.nodes[x.0].requires_grad;
                    let (gx, gw, gb) =
                        kernels::conv_transpose4_backward(self.value(*x).data(), c, h, wd, self.value(*w).data(), o, gd, need_x);
                    if let Some(gx) = gx {
                        accumulate(&mut grads[x.0], gx, self.value(*x).shape());
                    }
                    self.acc_if(&mut grads, *w, gw);
                    self.acc_if(&mut grads, *b, gb);
                }
                Op::Relu(x) => {
                    let gx = self.value(*x).data().iter().zip(gd).map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 }).collect();
                    self.acc_if(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let gx = node.value.data().iter().zip(gd).map(|(&s, &gv)| gv * s * (1.0 - s)).collect();
                    self.acc_if(&mut grads, *x, gx);
                }
                Op::MaxPool { x, argmax } => {
                    let mut gx = vec![0.0; self.value(*x).len()];
                    for (&src, &gv) in argmax.iter().zip(gd) {
                        gx[src] += gv;
                    }
                    self.acc_if(&mut grads, *x, gx);
                }
                Op::UpsampleNearest(x) => {
                    let (c, h, w) = self.value(*x).chw()?;
                    let (_, oh, ow) = node.value.chw()?;
                    self.acc_if(&mut grads, *x, kernels::upsample_nearest_backward(gd, c, h, w, oh, ow));
                }
                Op::Bilinear2x(x) => {
                    let (c, h, w) = self.value(*x).chw()?;
                    self.acc_if(&mut grads, *x, kernels::bilinear2x_backward(gd, c, h, w));
                }
                Op::Add(a, b) => {
                    self.acc_if(&mut grads, *a, gd.to_vec());
                    self.acc_if(&mut grads, *b, gd.to_vec());
                }
                Op::Concat(xs) => {
                    let mut offset = 0;
                    for &x in xs {
                        let n = self.value(x).len();
                        self.acc_if(&mut grads, x, gd[offset..offset + n].to_vec());
                        offset += n;
                    }
                }
                Op::RoiAlign { x, taps } => {
                    let (c, h, w) = self.value(*x).chw()?;
                    if self.nodes[x.0].requires_grad {
                        let slot = &mut grads[x.0];
                        let buf = slot.get_or_insert_with(|| Tensor::zeros(&[c, h, w]));
                        taps.apply_transpose(gd, c, h * w, buf.data_mut());
                    }
                }
            }
        }
        Ok(Gradients(grads))
    }

    fn acc_if(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Vec<f64>) {
        if self.nodes[id.0].requires_grad {
            accumulate(&mut grads[id.0], g, self.value(id).shape());
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Vec<f64>, shape: &[usize]) {
    match slot {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(Tensor::new(shape.to_vec(), g).expect("gradient shape")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[1, 2, 2]), true);
        let b = g.leaf(Tensor::zeros(&[1, 3, 2]), true);
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 2]") && err.contains("[1, 3, 2]"), "{err}");
        let w = g.leaf(Tensor::zeros(&[2, 3, 3, 3]), true);
        let bias = g.leaf(Tensor::zeros(&[2]), true);
        assert!(g.conv2d(a, w, bias).is_err());
    }

    #[test]
    fn frozen_inputs_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 2, 2], 1.0), false);
        let w = g.leaf(Tensor::full(&[1, 1, 1, 1], 2.0), true);
        let b = g.leaf(Tensor::zeros(&[1]), true);
        let y = g.conv2d(x, w, b).unwrap();
        let grads = g.backward(vec![(y, Tensor::full(&[1, 2, 2], 1.0))]).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[4.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[4.0]);
    }
}
