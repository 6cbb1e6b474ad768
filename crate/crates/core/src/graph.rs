//! Reverse-mode gradient tape.
//!
//! A [`Graph`] records every primitive executed on it. Values are owned by
//! the graph and addressed through [`Var`] handles. [`Graph::backward`]
//! walks the record in reverse execution order, visiting each node once and
//! summing gradients for values that feed several consumers.

use crate::error::{Error, Result};
use crate::ops::{self, Activation, BnSaved, ConvSpec, LabelMap, Mode};
use crate::tensor::{Element, Shape4, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<T: Element> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved<T>,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    AvgPool {
        x: Var,
    },
    Resize {
        x: Var,
        align_corners: bool,
    },
    Concat {
        xs: Vec<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    ScaleChannels {
        x: Var,
        gate: Var,
    },
    Dropout {
        x: Var,
        mask: Option<Vec<T>>,
    },
    Softmax {
        x: Var,
    },
    Sum {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        grad: Tensor4<T>,
    },
}

impl<T: Element> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Act { .. } => "activation",
            Op::AvgPool { .. } => "global_avg_pool",
            Op::Resize { .. } => "bilinear_resize",
            Op::Concat { .. } => "concat_channels",
            Op::Add { .. } => "add",
            Op::ScaleChannels { .. } => "scale_channels",
            Op::Dropout { .. } => "dropout",
            Op::Softmax { .. } => "softmax_channels",
            Op::Sum { .. } => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T: Element> {
    value: Tensor4<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by leaf [`Var`].
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor4<T>>>,
    /// Order in which non-leaf nodes were visited.
    pub visit_order: Vec<usize>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor4<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor4<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Hook for corrupting one op's backward pass, used to prove that the
/// gradient checker actually detects a broken kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaultInjection {
    pub op: &'static str,
    pub factor: f64,
}

#[derive(Default)]
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    fault: Option<FaultInjection>,
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn with_fault(mut self, fault: FaultInjection) -> Self {
        self.fault = Some(fault);
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is accumulated for it.
    pub fn constant(&mut self, t: Tensor4<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is returned by [`Graph::backward`].
    pub fn variable(&mut self, t: Tensor4<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape4 {
        self.nodes[v.0].value.shape()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let out = ops::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            spec,
        )?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv { x, w, b, spec: *spec }, rg))
    }

    /// Returns the output and the batch statistics (for running-stat updates).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor4<T>,
        running_var: &Tensor4<T>,
        mode: Mode,
    ) -> Result<(Var, BnSaved<T>)> {
        let (out, saved) = ops::batch_norm(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            mode,
            T::lit(ops::BN_EPSILON),
        )?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let var = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved: saved.clone(),
            },
            rg,
        );
        Ok((var, saved))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out = ops::activation(self.value(x), kind);
        let rg = self.rg(x);
        self.push(out, Op::Act { x, kind }, rg)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let out = ops::global_avg_pool(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::AvgPool { x }, rg)
    }

    pub fn bilinear_resize(&mut self, x: Var, target: (usize, usize), align_corners: bool) -> Result<Var> {
        let out = ops::bilinear_resize(self.value(x), target, align_corners)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Resize { x, align_corners }, rg))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor4<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat_channels(&vals)?;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(out, Op::Concat { xs: xs.to_vec() }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let out = ops::scale_channels(self.value(x), self.value(gate))?;
        let rg = self.rg(x) || self.rg(gate);
        Ok(self.push(out, Op::ScaleChannels { x, gate }, rg))
    }

    pub fn dropout(&mut self, x: Var, rate: f64, mode: Mode, seed: u64) -> Result<Var> {
        let (out, mask) = ops::dropout(self.value(x), rate, mode, seed)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let out = ops::softmax_channels(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Softmax { x }, rg)
    }

    /// Sum of all elements as a 1x1x1x1 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor4::full(Shape4::new(1, 1, 1, 1), s), Op::Sum { x }, rg)
    }

    /// Masked mean cross-entropy as a scalar node.
    pub fn cross_entropy(&mut self, logits: Var, labels: &LabelMap, valid: Option<&[bool]>) -> Result<Var> {
        let ce = ops::cross_entropy(self.value(logits), labels, valid)?;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor4::full(Shape4::new(1, 1, 1, 1), ce.loss),
            Op::CrossEntropy {
                logits,
                grad: ce.grad,
            },
            rg,
        ))
    }

    /// Backpropagates from a scalar node seeded with `seed` (usually 1).
    pub fn backward_with_seed(&self, output: Var, seed: T) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward called on an empty tape".into()));
        }
        let shape = self.shape(output);
        if shape.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {shape}"
            )));
        }
        self.backward_from(output, Tensor4::full(shape, seed))
    }

    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        self.backward_with_seed(output, T::one())
    }

    /// Backpropagates an arbitrary upstream gradient for `output`.
    pub fn backward_from(&self, output: Var, seed: Tensor4<T>) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward called on an empty tape".into()));
        }
        self.value(output).expect_same_shape("backward_from", &seed)?;
        let mut grads: Vec<Option<Tensor4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        let mut visit_order = Vec::new();

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            visit_order.push(i);
            if let Some(f) = self.fault.filter(|f| f.op == node.op.name()) {
                g = g.scale(T::lit(f.factor));
            }
            self.backprop_node(node, &g, &mut grads)?;
        }

        // keep leaf gradients only
        for (i, slot) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads, visit_order })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor4<T>>], v: Var, g: Tensor4<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor4<T>, grads: &mut [Option<Tensor4<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, spec } => {
                let cg = ops::conv2d_backward(self.value(*x), self.value(*w), g, spec, self.rg(*x))?;
                if let Some(gx) = cg.input {
                    self.accumulate(grads, *x, gx);
                }
                self.accumulate(grads, *w, cg.weight);
                if let (Some(b), Some(gb)) = (b, cg.bias) {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::BatchNorm { x, gamma, beta, saved } => {
                let (gx, gg, gb) = ops::batch_norm_backward(self.value(*x), self.value(*gamma), saved, g)?;
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gamma, gg.reshape(self.shape(*gamma))?);
                self.accumulate(grads, *beta, gb.reshape(self.shape(*beta))?);
            }
            Op::Act { x, kind } => {
                let gx = ops::activation_backward(self.value(*x), g, *kind);
                self.accumulate(grads, *x, gx);
            }
            Op::AvgPool { x } => {
                let gx = ops::global_avg_pool_backward(self.shape(*x), g);
                self.accumulate(grads, *x, gx);
            }
            Op::Resize { x, align_corners } => {
                let gx = ops::bilinear_resize_backward(self.shape(*x), g, *align_corners)?;
                self.accumulate(grads, *x, gx);
            }
            Op::Concat { xs } => {
                let channels: Vec<usize> = xs.iter().map(|&v| self.shape(v).c).collect();
                let parts = ops::split_channels(g, &channels)?;
                for (&v, part) in xs.iter().zip(parts) {
                    self.accumulate(grads, v, part);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::ScaleChannels { x, gate } => {
                let (gx, gg) = ops::scale_channels_backward(self.value(*x), self.value(*gate), g)?;
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gate, gg);
            }
            Op::Dropout { x, mask } => {
                let gx = match mask {
                    None => g.clone(),
                    Some(m) => {
                        let mut gx = g.clone();
                        for (d, &k) in gx.data_mut().iter_mut().zip(m) {
                            *d = *d * k;
                        }
                        gx
                    }
                };
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax { x } => {
                let gx = ops::softmax_channels_backward(&node.value, g);
                self.accumulate(grads, *x, gx);
            }
            Op::Sum { x } => {
                let s = g.data()[0];
                self.accumulate(grads, *x, Tensor4::full(self.shape(*x), s));
            }
            Op::CrossEntropy { logits, grad } => {
                let s = g.data()[0];
                self.accumulate(grads, *logits, grad.scale(s));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_tape_is_usage_error() {
        let g = Graph::<f64>::new();
        assert!(matches!(g.backward(Var(0)), Err(Error::Usage(_))));
    }

    #[test]
    fn non_scalar_backward_is_usage_error() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor4::full(Shape4::new(1, 1, 2, 2), 1.0));
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor4::from_fn(Shape4::new(2, 3, 4, 5), |n, c, y, x| (n + c + y + x) as f64));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x + x) -> dL/dx = 2
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor4::full(Shape4::new(1, 2, 2, 2), 0.5));
        let y = g.add(x, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn reverse_order_visits_each_node_once() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor4::full(Shape4::new(1, 1, 2, 2), 0.5));
        let a = g.activation(x, Activation::Relu);
        let b = g.activation(a, Activation::HSwish);
        let c = g.add(a, b).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.visit_order, vec![s.id(), c.id(), b.id(), a.id()]);
    }

    #[test]
    fn conv_sum_interior_input_grad_is_nine() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor4::from_fn(Shape4::new(1, 1, 5, 5), |_, _, y, x| (y * 5 + x) as f64));
        let w = g.constant(Tensor4::full(Shape4::new(1, 1, 3, 3), 1.0));
        let y = g.conv2d(x, w, None, &ConvSpec::same(1, 1, 3, 1)).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        let gx = grads.get(x).unwrap();
        for yy in 1..4 {
            for xx in 1..4 {
                assert_eq!(gx.at(0, 0, yy, xx), 9.0);
            }
        }
        assert_eq!(gx.at(0, 0, 0, 0), 4.0);
        assert!(grads.get(w).is_none());
    }
}
