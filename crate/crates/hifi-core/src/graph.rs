//! Reverse-mode tape over the pure ops.
//!
//! A `Graph` records one forward computation; nodes are appended in
//! evaluation order, so reverse insertion order is a topological order and
//! `backward` walks it once, handing each node's gradient to the
//! hand-derived backward of the op that produced it. Accumulation happens
//! in that fixed order, which keeps runs bit-reproducible.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

type BackFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Result<Vec<Tensor>>>;

#[derive(Default)]
pub struct Graph {
    values: Vec<Tensor>,
    parents: Vec<Vec<NodeId>>,
    backs: Vec<Option<BackFn>>,
    requires: Vec<bool>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Inserts a leaf; only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, vec![], None, requires_grad)
    }

    /// Leaf that never takes gradient (inputs, frozen buffers, masks).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, parents: Vec<NodeId>, back: Option<BackFn>, requires: bool) -> NodeId {
        let req = requires || parents.iter().any(|p| self.requires[p.0]);
        self.values.push(value);
        self.parents.push(parents);
        self.backs.push(back);
        self.requires.push(req);
        self.grads.push(None);
        NodeId(self.values.len() - 1)
    }

    /// Runs reverse accumulation from a scalar node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.values[loss.0].shape()),
            });
        }
        self.values[loss.0].validate_finite("loss")?;
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(Tensor::ones(self.values[loss.0].shape()));
        for id in (0..=loss.0).rev() {
            if !self.requires[id] || self.backs[id].is_none() {
                continue;
            }
            let Some(gout) = self.grads[id].take() else { continue };
            let parent_ids = std::mem::take(&mut self.parents[id]);
            let parent_vals: Vec<&Tensor> = parent_ids.iter().map(|p| &self.values[p.0]).collect();
            let back = self.backs[id].as_ref().unwrap();
            let contribs = back(&self.values[id], &parent_vals, &gout)?;
            debug_assert_eq!(contribs.len(), parent_ids.len());
            drop(parent_vals);
            for (pid, contrib) in parent_ids.iter().zip(contribs) {
                if !self.requires[pid.0] {
                    continue;
                }
                match &mut self.grads[pid.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
            self.parents[id] = parent_ids;
            // Keep the gradient available on leaves and checkpointable nodes.
            self.grads[id] = Some(gout);
        }
        Ok(())
    }

    // -- arithmetic ---------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::ew_add(self.value(a), self.value(b))?;
        Ok(self.push(
            v,
            vec![a, b],
            Some(Box::new(|_, _, g| Ok(vec![g.clone(), g.clone()]))),
            false,
        ))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::ew_sub(self.value(a), self.value(b))?;
        Ok(self.push(
            v,
            vec![a, b],
            Some(Box::new(|_, _, g| Ok(vec![g.clone(), ops::scale(g, -1.0)]))),
            false,
        ))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::ew_mul(self.value(a), self.value(b))?;
        Ok(self.push(
            v,
            vec![a, b],
            Some(Box::new(|_, parents, g| {
                Ok(vec![ops::ew_mul(g, parents[1])?, ops::ew_mul(g, parents[0])?])
            })),
            false,
        ))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = ops::relu(self.value(a));
        self.push(
            v,
            vec![a],
            Some(Box::new(|_, parents, g| {
                let mut gx = g.clone();
                for (gv, &x) in gx.data_mut().iter_mut().zip(parents[0].data()) {
                    if x <= 0.0 {
                        *gv = 0.0;
                    }
                }
                Ok(vec![gx])
            })),
            false,
        )
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = ops::scale(self.value(a), factor);
        self.push(
            v,
            vec![a],
            Some(Box::new(move |_, _, g| Ok(vec![ops::scale(g, factor)]))),
            false,
        )
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = ops::add_scalar(self.value(a), c);
        self.push(v, vec![a], Some(Box::new(|_, _, g| Ok(vec![g.clone()]))), false)
    }

    /// Broadcast multiply of a [C,H,W] tensor by a [1,H,W] map.
    pub fn mul_mask(&mut self, a: NodeId, mask: NodeId) -> Result<NodeId> {
        let v = ops::mul_channel_broadcast(self.value(a), self.value(mask))?;
        Ok(self.push(
            v,
            vec![a, mask],
            Some(Box::new(|_, parents, g| {
                let (ga, gm) = ops::mul_channel_broadcast_backward(parents[0], parents[1], g)?;
                Ok(vec![ga, gm])
            })),
            false,
        ))
    }

    pub fn add_channel_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = ops::add_channel_bias(self.value(a), self.value(bias))?;
        Ok(self.push(
            v,
            vec![a, bias],
            Some(Box::new(|_, parents, g| {
                let c = parents[0].shape()[0];
                let plane = parents[0].shape()[1] * parents[0].shape()[2];
                let mut gb = vec![0.0; c];
                for ci in 0..c {
                    gb[ci] = g.data()[ci * plane..(ci + 1) * plane].iter().sum();
                }
                Ok(vec![g.clone(), Tensor::from_vec(gb)])
            })),
            false,
        ))
    }

    // -- linear algebra -----------------------------------------------------

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let v = ops::conv2d(self.value(input), self.value(kernel), self.value(bias), stride, pad)?;
        Ok(self.push(
            v,
            vec![input, kernel, bias],
            Some(Box::new(move |_, parents, g| {
                let (gi, gk, gb) = ops::conv2d_backward(parents[0], parents[1], stride, pad, g)?;
                Ok(vec![gi, gk, gb])
            })),
            false,
        ))
    }

    /// Per-channel correlation with a fixed (non-learned) square kernel.
    pub fn depthwise_fixed(&mut self, input: NodeId, kernel: Vec<f64>, k: usize, pad: usize) -> Result<NodeId> {
        let v = ops::depthwise_fixed(self.value(input), &kernel, k, pad)?;
        Ok(self.push(
            v,
            vec![input],
            Some(Box::new(move |_, _, g| {
                Ok(vec![ops::depthwise_fixed_backward(g, &kernel, k, pad)?])
            })),
            false,
        ))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(
            v,
            vec![a, b],
            Some(Box::new(|_, parents, g| {
                let (ga, gb) = ops::matmul_backward(parents[0], parents[1], g)?;
                Ok(vec![ga, gb])
            })),
            false,
        ))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = ops::transpose2(self.value(a))?;
        Ok(self.push(
            v,
            vec![a],
            Some(Box::new(|_, _, g| Ok(vec![ops::transpose2(g)?]))),
            false,
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshaped(shape)?;
        Ok(self.push(
            v,
            vec![a],
            Some(Box::new(|_, parents, g| Ok(vec![g.reshaped(parents[0].shape())?]))),
            false,
        ))
    }

    pub fn concat0(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = ops::concat0(&tensors)?;
        let ids = parts.to_vec();
        Ok(self.push(
            v,
            ids,
            Some(Box::new(|_, parents, g| {
                let mut out = Vec::with_capacity(parents.len());
                let mut offset = 0;
                for p in parents {
                    let n = p.numel();
                    let slice = g.data()[offset..offset + n].to_vec();
                    offset += n;
                    out.push(Tensor::new(p.shape().to_vec(), slice)?);
                }
                Ok(out)
            })),
            false,
        ))
    }

    // -- nonlinearities and reductions ---------------------------------------

    pub fn softmax(&mut self, logits: NodeId) -> Result<NodeId> {
        let v = ops::softmax(self.value(logits))?;
        Ok(self.push(
            v,
            vec![logits],
            Some(Box::new(|own, _, g| Ok(vec![ops::softmax_backward(own, g)?]))),
            false,
        ))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::softmax_rows(self.value(x))?;
        Ok(self.push(
            v,
            vec![x],
            Some(Box::new(|own, _, g| Ok(vec![ops::softmax_rows_backward(own, g)?]))),
            false,
        ))
    }

    pub fn down_avg(&mut self, a: NodeId, factor: usize) -> Result<NodeId> {
        let v = ops::down_avg(self.value(a), factor)?;
        Ok(self.push(
            v,
            vec![a],
            Some(Box::new(move |_, _, g| Ok(vec![ops::down_avg_backward(g, factor)?]))),
            false,
        ))
    }

    pub fn up_nearest(&mut self, a: NodeId, factor: usize) -> Result<NodeId> {
        let v = ops::up_nearest(self.value(a), factor)?;
        Ok(self.push(
            v,
            vec![a],
            Some(Box::new(move |_, _, g| Ok(vec![ops::up_nearest_backward(g, factor)?]))),
            false,
        ))
    }

    pub fn reduce(&mut self, op: ops::Reduce, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        let v = ops::reduce(op, self.value(a), axes)?;
        let axes = axes.to_vec();
        Ok(self.push(
            v,
            vec![a],
            Some(Box::new(move |own, parents, g| {
                Ok(vec![ops::reduce_backward(op, parents[0], own, &axes, g)?])
            })),
            false,
        ))
    }

    pub fn gather_map(&mut self, a: NodeId, map: Vec<Option<usize>>) -> Result<NodeId> {
        let v = ops::gather_map(self.value(a), &map)?;
        Ok(self.push(
            v,
            vec![a],
            Some(Box::new(move |_, parents, g| {
                Ok(vec![ops::gather_map_backward(parents[0].numel(), &map, g)])
            })),
            false,
        ))
    }

    pub fn pick(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        let v = ops::pick(self.value(a), index)?;
        Ok(self.push(
            v,
            vec![a],
            Some(Box::new(move |_, parents, g| {
                let mut gx = vec![0.0; parents[0].numel()];
                gx[index] = g.data()[0];
                Ok(vec![Tensor::from_vec(gx)])
            })),
            false,
        ))
    }

    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> NodeId {
        let v = ops::clamp_min(self.value(a), floor);
        self.push(
            v,
            vec![a],
            Some(Box::new(move |_, parents, g| {
                let mut gx = g.clone();
                for (gv, &x) in gx.data_mut().iter_mut().zip(parents[0].data()) {
                    if x < floor {
                        *gv = 0.0;
                    }
                }
                Ok(vec![gx])
            })),
            false,
        )
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = ops::ln(self.value(a));
        self.push(
            v,
            vec![a],
            Some(Box::new(|_, parents, g| {
                let mut gx = g.clone();
                for (gv, &x) in gx.data_mut().iter_mut().zip(parents[0].data()) {
                    *gv /= x;
                }
                Ok(vec![gx])
            })),
            false,
        )
    }

    /// Affine map of a vector: w [K,C] * x [C] + b [K].
    pub fn linear(&mut self, w: NodeId, x: NodeId, b: NodeId) -> Result<NodeId> {
        let c = self.value(x).numel();
        let col = self.reshape(x, &[c, 1])?;
        let prod = self.matmul(w, col)?;
        let k = self.value(prod).shape()[0];
        let flat = self.reshape(prod, &[k])?;
        self.add(flat, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::Reduce;

    fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + eps;
            let hi = f(&xp);
            xp[i] = x[i] - eps;
            let lo = f(&xp);
            xp[i] = x[i];
            g[i] = (hi - lo) / (2.0 * eps);
        }
        g
    }

    #[test]
    fn chain_rule_matches_finite_differences() {
        let a0 = vec![0.3, -0.7, 1.2, 0.4];
        let b0 = vec![0.5, 1.5, -0.25, 2.0];
        let eval = |av: &[f64], bv: &[f64]| -> (f64, Option<(Vec<f64>, Vec<f64>)>) {
            let mut g = Graph::new();
            let a = g.leaf(Tensor::new(vec![2, 2], av.to_vec()).unwrap(), true);
            let b = g.leaf(Tensor::new(vec![2, 2], bv.to_vec()).unwrap(), true);
            let prod = g.mul(a, b).unwrap();
            let s = g.add(prod, a).unwrap();
            let r = g.relu(s);
            let loss = g.reduce(Reduce::Sum, r, &[0, 1]).unwrap();
            let value = g.value(loss).item().unwrap();
            g.backward(loss).unwrap();
            let ga = g.grad(a).unwrap().data().to_vec();
            let gb = g.grad(b).unwrap().data().to_vec();
            (value, Some((ga, gb)))
        };
        let (_, grads) = eval(&a0, &b0);
        let (ga, gb) = grads.unwrap();
        let fa = central_diff(|x| eval(x, &b0).0, &a0, 1e-6);
        let fb = central_diff(|x| eval(&a0, x).0, &b0, 1e-6);
        for (an, fd) in ga.iter().zip(&fa) {
            assert!((an - fd).abs() < 1e-6, "a grad {an} vs fd {fd}");
        }
        for (an, fd) in gb.iter().zip(&fb) {
            assert!((an - fd).abs() < 1e-6, "b grad {an} vs fd {fd}");
        }
    }

    #[test]
    fn fanout_accumulates_gradients() {
        // loss = sum(x) + sum(x*x): grad = 1 + 2x
        let x0 = vec![0.5, -1.0, 2.0];
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(x0.clone()), true);
        let sq = g.mul(x, x).unwrap();
        let s1 = g.reduce(Reduce::Sum, x, &[0]).unwrap();
        let s2 = g.reduce(Reduce::Sum, sq, &[0]).unwrap();
        let loss = g.add(s1, s2).unwrap();
        g.backward(loss).unwrap();
        let gx = g.grad(x).unwrap();
        for (gv, &xv) in gx.data().iter().zip(&x0) {
            assert!((gv - (1.0 + 2.0 * xv)).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let c = g.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let p = g.mul(x, c).unwrap();
        let loss = g.reduce(Reduce::Sum, p, &[0]).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar_and_finite_loss() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        assert!(g.backward(x).is_err());

        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![f64::MAX]), true);
        let y = g.mul(x, x).unwrap();
        let loss = g.reduce(Reduce::Sum, y, &[0]).unwrap();
        assert!(g.backward(loss).is_err());
    }
}
