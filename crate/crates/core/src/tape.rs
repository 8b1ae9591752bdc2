//! Reverse-mode autodiff over [`Tensor`] values.
//!
//! A forward pass builds a fresh [`Tape`] per step; `backward` walks it in
//! reverse and accumulates gradients at every node, so callers can read
//! gradients of parameters as well as of intermediate activations.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Clamp bound for binary cross-entropy predictions.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        dilation: usize,
    },
    ConvT2 {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    MaxPool2 {
        x: NodeId,
        arg: Vec<u32>,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    ConcatChannels {
        xs: Vec<NodeId>,
    },
    Bilinear {
        x: NodeId,
    },
    /// Mean binary cross-entropy against a constant target, clamped predictions.
    Bce {
        pred: NodeId,
        target: Tensor,
    },
    /// Mean squared difference between two same-shape maps.
    PairMse {
        a: NodeId,
        b: NodeId,
    },
    /// Linear combination of scalar nodes.
    Combine {
        terms: Vec<(NodeId, f64)>,
    },
    /// Sum of squares of all elements (handy scalar objective for tests).
    SumSquares {
        x: NodeId,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated at `id` by the last `backward` call.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Stride-1 same-size convolution. `w: [cout, cin, k, k]`, `b: [cout]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, dilation: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        if wv.shape().len() != 4 || wv.shape()[2] != wv.shape()[3] {
            return Err(Error::Shape(format!(
                "conv weight must be [out,in,k,k], got {:?}",
                wv.shape()
            )));
        }
        if wv.shape()[2] % 2 == 0 {
            return Err(Error::Config(format!(
                "convolution kernels must be odd, got {}",
                wv.shape()[2]
            )));
        }
        if !xv.is_chw() || xv.c() != wv.shape()[1] {
            return Err(Error::Shape(format!(
                "conv input {:?} does not match weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        if bv.shape() != [wv.shape()[0]] {
            return Err(Error::Shape(format!(
                "conv bias {:?} does not match weight {:?}",
                bv.shape(),
                wv.shape()
            )));
        }
        let value = kernels::conv2d_forward(xv, wv, bv, dilation);
        Ok(self.push(value, Op::Conv2d { x, w, b, dilation }))
    }

    /// 2x2-stride-2 transposed convolution. `w: [cin, cout, 2, 2]`.
    pub fn conv_transpose2(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let wv = self.value(w);
        if wv.shape().len() != 4 || wv.shape()[2] != 2 || wv.shape()[3] != 2 {
            return Err(Error::Shape(format!(
                "transposed conv weight must be [in,out,2,2], got {:?}",
                wv.shape()
            )));
        }
        if xv.c() != wv.shape()[0] {
            return Err(Error::Shape(format!(
                "transposed conv input {:?} does not match weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let value = kernels::convt2_forward(xv, wv, self.value(b));
        Ok(self.push(value, Op::ConvT2 { x, w, b }))
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.h() % 2 != 0 || xv.w() % 2 != 0 {
            return Err(Error::Shape(format!(
                "2x2 pooling needs even spatial size, got {:?}",
                xv.shape()
            )));
        }
        let (value, arg) = kernels::maxpool2_forward(xv);
        Ok(self.push(value, Op::MaxPool2 { x, arg }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(value, Op::Sigmoid { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if !self.value(a).same_shape(self.value(b)) {
            return Err(Error::Shape(format!(
                "elementwise add on {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let value = Tensor::from_vec(
            self.value(a).shape(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x + y)
                .collect(),
        )?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Arity("concat of zero tensors".into()));
        }
        let (h, w) = (self.value(xs[0]).h(), self.value(xs[0]).w());
        let mut c = 0;
        for &id in xs {
            let v = self.value(id);
            if v.h() != h || v.w() != w {
                return Err(Error::Shape(format!(
                    "concat spatial mismatch: {:?} vs {}x{}",
                    v.shape(),
                    h,
                    w
                )));
            }
            c += v.c();
        }
        let mut data = Vec::with_capacity(c * h * w);
        for &id in xs {
            data.extend_from_slice(self.value(id).data());
        }
        let value = Tensor::from_vec(&[c, h, w], data)?;
        Ok(self.push(value, Op::ConcatChannels { xs: xs.to_vec() }))
    }

    pub fn upsample_bilinear(&mut self, x: NodeId, th: usize, tw: usize) -> NodeId {
        let value = kernels::bilinear_forward(self.value(x), th, tw);
        self.push(value, Op::Bilinear { x })
    }

    /// Mean binary cross-entropy of `pred` against a constant `target` in [0,1].
    /// Predictions are clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce(&mut self, pred: NodeId, target: Tensor) -> Result<NodeId> {
        let value = Tensor::scalar(crate::losses::bce(self.value(pred), &target)?);
        Ok(self.push(value, Op::Bce { pred, target }))
    }

    /// Mean squared difference between two same-shape maps (scalar output).
    pub fn pair_mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(crate::losses::mse_mean(self.value(a), self.value(b))?);
        Ok(self.push(value, Op::PairMse { a, b }))
    }

    /// `sum_i coeff_i * scalar_i`. All inputs must be scalars.
    pub fn combine(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut acc = 0.0;
        for &(id, coeff) in terms {
            if !self.value(id).is_scalar() {
                return Err(Error::Shape("combine on non-scalar node".into()));
            }
            acc += coeff * self.value(id).item();
        }
        Ok(self.push(
            Tensor::scalar(acc),
            Op::Combine {
                terms: terms.to_vec(),
            },
        ))
    }

    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        let acc: f64 = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(acc), Op::SumSquares { x })
    }

    fn accumulate(&mut self, id: NodeId, delta: Tensor) {
        match &mut self.nodes[id.0].grad {
            Some(g) => {
                for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gv += dv;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    /// Backpropagates from a scalar `root` (seed gradient 1.0), filling
    /// gradients for every node that contributes to it.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Shape("backward root must be a scalar".into()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(gy) = self.nodes[i].grad.clone() else {
                continue;
            };
            let deltas: Vec<(NodeId, Tensor)> = {
                let node = &self.nodes[i];
                match &node.op {
                    Op::Leaf => vec![],
                    Op::Conv2d { x, w, b, dilation } => {
                        let (dx, dw, db) = kernels::conv2d_backward(
                            self.value(*x),
                            self.value(*w),
                            &gy,
                            *dilation,
                        );
                        vec![(*x, dx), (*w, dw), (*b, db)]
                    }
                    Op::ConvT2 { x, w, b } => {
                        let (dx, dw, db) =
                            kernels::convt2_backward(self.value(*x), self.value(*w), &gy);
                        vec![(*x, dx), (*w, dw), (*b, db)]
                    }
                    Op::MaxPool2 { x, arg } => {
                        vec![(
                            *x,
                            kernels::maxpool2_backward(self.value(*x).shape(), arg, &gy),
                        )]
                    }
                    Op::Relu { x } => {
                        let dx = Tensor::from_vec(
                            gy.shape(),
                            self.value(*x)
                                .data()
                                .iter()
                                .zip(gy.data())
                                .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                                .collect(),
                        )?;
                        vec![(*x, dx)]
                    }
                    Op::Sigmoid { x } => {
                        let dx = Tensor::from_vec(
                            gy.shape(),
                            node.value
                                .data()
                                .iter()
                                .zip(gy.data())
                                .map(|(&y, &g)| g * y * (1.0 - y))
                                .collect(),
                        )?;
                        vec![(*x, dx)]
                    }
                    Op::Add { a, b } => vec![(*a, gy.clone()), (*b, gy.clone())],
                    Op::ConcatChannels { xs } => {
                        let (h, w) = (gy.h(), gy.w());
                        let mut out = Vec::with_capacity(xs.len());
                        let mut offset = 0;
                        for &id in xs {
                            let c = self.value(id).c();
                            let slice = gy.data()[offset * h * w..(offset + c) * h * w].to_vec();
                            out.push((id, Tensor::from_vec(&[c, h, w], slice)?));
                            offset += c;
                        }
                        out
                    }
                    Op::Bilinear { x } => {
                        vec![(*x, kernels::bilinear_backward(self.value(*x).shape(), &gy))]
                    }
                    Op::Bce { pred, target } => {
                        let g0 = gy.item();
                        let n = target.numel() as f64;
                        let dx = Tensor::from_vec(
                            target.shape(),
                            self.value(*pred)
                                .data()
                                .iter()
                                .zip(target.data())
                                .map(|(&p, &g)| {
                                    if (BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                                        g0 * ((1.0 - g) / (1.0 - p) - g / p) / n
                                    } else {
                                        0.0
                                    }
                                })
                                .collect(),
                        )?;
                        vec![(*pred, dx)]
                    }
                    Op::PairMse { a, b } => {
                        let g0 = gy.item();
                        let n = self.value(*a).numel() as f64;
                        let diffs: Vec<f64> = self
                            .value(*a)
                            .data()
                            .iter()
                            .zip(self.value(*b).data())
                            .map(|(x, y)| g0 * 2.0 * (x - y) / n)
                            .collect();
                        let shape = self.value(*a).shape().to_vec();
                        let da = Tensor::from_vec(&shape, diffs.clone())?;
                        let db = Tensor::from_vec(&shape, diffs.iter().map(|v| -v).collect())?;
                        vec![(*a, da), (*b, db)]
                    }
                    Op::Combine { terms } => {
                        let g0 = gy.item();
                        terms
                            .iter()
                            .map(|&(id, coeff)| (id, Tensor::scalar(g0 * coeff)))
                            .collect()
                    }
                    Op::SumSquares { x } => {
                        let g0 = gy.item();
                        vec![(*x, self.value(*x).map(|v| 2.0 * v * g0))]
                    }
                }
            };
            for (id, delta) in deltas {
                self.accumulate(id, delta);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled(shape: &[usize], f: impl Fn(usize) -> f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(f).collect()).unwrap()
    }

    #[test]
    fn sigmoid_range_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(filled(&[1, 2, 2], |i| i as f64 - 1.5));
        let y = tape.sigmoid(x);
        assert!(tape.value(y).data().iter().all(|&v| v > 0.0 && v < 1.0));
        let s = tape.sum_squares(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().all_finite());
    }

    #[test]
    fn bce_uniform_half_is_ln2() {
        let mut tape = Tape::new();
        let pred = tape.leaf(Tensor::full(&[1, 4, 4], 0.5));
        let gt = filled(&[1, 4, 4], |i| (i % 2) as f64);
        let loss = tape.bce(pred, gt).unwrap();
        assert!((tape.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_gradient_matches_finite_difference() {
        let base = filled(&[1, 3, 3], |i| 0.1 + 0.08 * i as f64);
        let gt = filled(&[1, 3, 3], |i| ((i * 7) % 3 == 0) as u8 as f64);
        let mut tape = Tape::new();
        let pred = tape.leaf(base.clone());
        let loss = tape.bce(pred, gt.clone()).unwrap();
        tape.backward(loss).unwrap();
        let grad = tape.grad(pred).unwrap().clone();
        let h = 1e-7;
        for i in 0..base.numel() {
            let mut plus = base.clone();
            plus.data_mut()[i] += h;
            let mut minus = base.clone();
            minus.data_mut()[i] -= h;
            let eval = |t: Tensor| {
                let mut tp = Tape::new();
                let p = tp.leaf(t);
                let l = tp.bce(p, gt.clone()).unwrap();
                tp.value(l).item()
            };
            let num = (eval(plus) - eval(minus)) / (2.0 * h);
            assert!((num - grad.data()[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn combine_weights_scalars() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(1.0));
        let b = tape.leaf(Tensor::scalar(2.0));
        let c = tape.combine(&[(a, 0.7), (b, 0.1)]).unwrap();
        assert!((tape.value(c).item() - 0.9).abs() < 1e-15);
        tape.backward(c).unwrap();
        assert_eq!(tape.grad(a).unwrap().item(), 0.7);
        assert_eq!(tape.grad(b).unwrap().item(), 0.1);
    }

    #[test]
    fn pair_mse_gradient_points_toward_peer() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::full(&[1, 2, 2], 0.2));
        let b = tape.leaf(Tensor::full(&[1, 2, 2], 0.6));
        let l = tape.pair_mse(a, b).unwrap();
        assert!((tape.value(l).item() - 0.16).abs() < 1e-15);
        tape.backward(l).unwrap();
        // d/da (a-b)^2 = 2(a-b) < 0 when a < b: descent moves a toward b
        assert!(tape.grad(a).unwrap().data().iter().all(|&g| g < 0.0));
        assert!(tape.grad(b).unwrap().data().iter().all(|&g| g > 0.0));
    }

    #[test]
    fn chained_graph_matches_finite_difference() {
        // conv -> relu -> pool -> conv -> sigmoid -> bce, checked end to end
        let x = filled(&[2, 4, 4], |i| (i as f64 * 0.37).sin() * 0.5);
        let w1 = filled(&[3, 2, 3, 3], |i| (i as f64 * 0.11).cos() * 0.3);
        let b1 = filled(&[3], |i| 0.01 * i as f64);
        let w2 = filled(&[1, 3, 3, 3], |i| (i as f64 * 0.23).sin() * 0.2);
        let b2 = filled(&[1], |_| 0.0);
        let gt = filled(&[1, 2, 2], |i| (i % 2) as f64);

        let run = |w1t: &Tensor| -> (f64, Option<Tensor>) {
            let mut tape = Tape::new();
            let xi = tape.leaf(x.clone());
            let w1i = tape.leaf(w1t.clone());
            let b1i = tape.leaf(b1.clone());
            let w2i = tape.leaf(w2.clone());
            let b2i = tape.leaf(b2.clone());
            let c1 = tape.conv2d(xi, w1i, b1i, 1).unwrap();
            let r = tape.relu(c1);
            let p = tape.maxpool2(r).unwrap();
            let c2 = tape.conv2d(p, w2i, b2i, 1).unwrap();
            let s = tape.sigmoid(c2);
            let l = tape.bce(s, gt.clone()).unwrap();
            let v = tape.value(l).item();
            tape.backward(l).unwrap();
            (v, tape.grad(w1i).cloned())
        };

        let (_, grad) = run(&w1);
        let grad = grad.unwrap();
        let h = 1e-6;
        for i in 0..w1.numel() {
            let mut plus = w1.clone();
            plus.data_mut()[i] += h;
            let mut minus = w1.clone();
            minus.data_mut()[i] -= h;
            let num = (run(&plus).0 - run(&minus).0) / (2.0 * h);
            let ana = grad.data()[i];
            assert!(
                (num - ana).abs() < 1e-6 * (1.0 + ana.abs()),
                "i={i}: {num} vs {ana}"
            );
        }
    }
}
