//! Reverse-mode differentiation tape.
//!
//! Operations performed through a [`Tape`] record a backward rule per
//! node; [`Tape::backward`] consumes the tape and returns a [`GradStore`]
//! with a gradient for every `requires_grad` leaf. The same forward
//! kernels run whether or not an operation is traced, so traced and
//! untraced results are bitwise identical.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::{from_f64, Scalar};
use crate::tensor::ops::{self, Broadcast, ConvDims};
use crate::tensor::{Shape, Tensor, TensorId};

/// Index of a node on a tape. Nodes are stored in creation order, which
/// is a topological order by construction.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

struct Saved<S> {
    data: Arc<Vec<S>>,
}

impl<S: Scalar> Saved<S> {
    fn of(t: &Tensor<S>) -> Self {
        Saved { data: t.data_arc() }
    }
}

enum Rule<S: Scalar> {
    Leaf,
    Conv2d {
        input: Saved<S>,
        weight: Saved<S>,
        dims: ConvDims,
        has_bias: bool,
    },
    Relu {
        input: Saved<S>,
    },
    Sigmoid {
        output: Saved<S>,
    },
    Add {
        kind: Broadcast,
    },
    Mul {
        a: Saved<S>,
        b: Saved<S>,
        kind: Broadcast,
    },
    Scale {
        factor: S,
    },
    PixelShuffle {
        r: usize,
        in_shape: Shape,
    },
    PixelUnshuffle {
        r: usize,
        in_shape: Shape,
    },
    GlobalAvgPool {
        in_shape: Shape,
    },
    L1 {
        pred: Saved<S>,
        target: Saved<S>,
    },
}

struct Node<S: Scalar> {
    rule: Rule<S>,
    inputs: Vec<NodeId>,
    shape: Shape,
    requires_grad: bool,
    /// Set for leaves: the tensor this node stands for.
    leaf: Option<TensorId>,
}

/// Gradients of a scalar loss with respect to `requires_grad` leaves,
/// keyed by tensor identity.
pub struct GradStore<S: Scalar> {
    grads: HashMap<TensorId, Tensor<S>>,
}

impl<S: Scalar> GradStore<S> {
    pub fn get(&self, t: &Tensor<S>) -> Option<&Tensor<S>> {
        self.grads.get(&t.id())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Context that tensor operations run in: either a recording [`Tape`] or
/// the untraced [`Eval`].
pub trait Ops<S: Scalar> {
    fn conv2d(
        &mut self,
        input: &Tensor<S>,
        weight: &Tensor<S>,
        bias: Option<&Tensor<S>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<S>>;
    fn relu(&mut self, input: &Tensor<S>) -> Result<Tensor<S>>;
    fn sigmoid(&mut self, input: &Tensor<S>) -> Result<Tensor<S>>;
    fn add(&mut self, a: &Tensor<S>, other: &Tensor<S>) -> Result<Tensor<S>>;
    fn mul(&mut self, a: &Tensor<S>, other: &Tensor<S>) -> Result<Tensor<S>>;
    fn scale(&mut self, input: &Tensor<S>, factor: S) -> Result<Tensor<S>>;
    fn pixel_shuffle(&mut self, input: &Tensor<S>, r: usize) -> Result<Tensor<S>>;
    fn pixel_unshuffle(&mut self, input: &Tensor<S>, r: usize) -> Result<Tensor<S>>;
    fn global_avg_pool(&mut self, input: &Tensor<S>) -> Result<Tensor<S>>;
    fn l1_loss(&mut self, pred: &Tensor<S>, target: &Tensor<S>) -> Result<Tensor<S>>;
}

/// Untraced evaluation context (inference).
pub struct Eval;

impl<S: Scalar> Ops<S> for Eval {
    fn conv2d(
        &mut self,
        input: &Tensor<S>,
        weight: &Tensor<S>,
        bias: Option<&Tensor<S>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<S>> {
        ops::conv2d(input, weight, bias, stride, padding)
    }
    fn relu(&mut self, input: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(ops::relu(input))
    }
    fn sigmoid(&mut self, input: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(ops::sigmoid(input))
    }
    fn add(&mut self, a: &Tensor<S>, other: &Tensor<S>) -> Result<Tensor<S>> {
        ops::add(a, other)
    }
    fn mul(&mut self, a: &Tensor<S>, other: &Tensor<S>) -> Result<Tensor<S>> {
        ops::mul(a, other)
    }
    fn scale(&mut self, input: &Tensor<S>, factor: S) -> Result<Tensor<S>> {
        Ok(ops::scale(input, factor))
    }
    fn pixel_shuffle(&mut self, input: &Tensor<S>, r: usize) -> Result<Tensor<S>> {
        ops::pixel_shuffle(input, r)
    }
    fn pixel_unshuffle(&mut self, input: &Tensor<S>, r: usize) -> Result<Tensor<S>> {
        ops::pixel_unshuffle(input, r)
    }
    fn global_avg_pool(&mut self, input: &Tensor<S>) -> Result<Tensor<S>> {
        ops::global_avg_pool(input)
    }
    fn l1_loss(&mut self, pred: &Tensor<S>, target: &Tensor<S>) -> Result<Tensor<S>> {
        ops::l1_loss(pred, target)
    }
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    enrolled: HashMap<TensorId, NodeId>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            enrolled: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Node this tensor maps to, if it participates in the tape.
    pub fn node_of(&self, t: &Tensor<S>) -> Option<NodeId> {
        self.enrolled.get(&t.id()).copied()
    }

    /// A tensor used as an operation input joins the tape exactly once.
    fn enroll(&mut self, t: &Tensor<S>) -> NodeId {
        if let Some(&nid) = self.enrolled.get(&t.id()) {
            return nid;
        }
        let nid = NodeId(self.nodes.len());
        self.nodes.push(Node {
            rule: Rule::Leaf,
            inputs: Vec::new(),
            shape: t.shape(),
            requires_grad: t.requires_grad(),
            leaf: Some(t.id()),
        });
        self.enrolled.insert(t.id(), nid);
        nid
    }

    fn record(&mut self, rule: Rule<S>, inputs: Vec<NodeId>, out: Tensor<S>) -> Tensor<S> {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        let out = out.with_requires_grad(requires_grad);
        let nid = NodeId(self.nodes.len());
        self.nodes.push(Node {
            rule,
            inputs,
            shape: out.shape(),
            requires_grad,
            leaf: None,
        });
        self.enrolled.insert(out.id(), nid);
        out
    }

    /// Run the backward pass from a traced scalar, consuming the tape.
    /// Every `requires_grad` leaf receives a gradient (zeros when the
    /// loss does not depend on it).
    pub fn backward(self, loss: &Tensor<S>) -> Result<GradStore<S>> {
        let &loss_node = self.enrolled.get(&loss.id()).ok_or(Error::Untraced)?;
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss {
                numel: loss.numel(),
            });
        }

        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss_node.0] = Some(vec![S::one()]);

        for nid in (0..=loss_node.0).rev() {
            let Some(g) = grads[nid].take() else { continue };
            let node = &self.nodes[nid];
            if !node.requires_grad {
                continue;
            }
            if node.leaf.is_some() {
                grads[nid] = Some(g); // keep for collection below
                continue;
            }
            let input_grads = backprop_rule(node, &g);
            for (slot, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[slot.0].requires_grad {
                    continue;
                }
                match &mut grads[slot.0] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(ig) {
                            *a = *a + v;
                        }
                    }
                    slot_grad => *slot_grad = Some(ig),
                }
            }
        }

        let mut store = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            let Some(tid) = node.leaf else { continue };
            if !node.requires_grad {
                continue;
            }
            let data = grads[idx]
                .take()
                .unwrap_or_else(|| vec![S::zero(); node.shape.numel()]);
            store.insert(tid, Tensor::new(node.shape, data)?);
        }
        Ok(GradStore { grads: store })
    }
}

/// Gradients of one node's inputs given the upstream gradient, in input
/// order. `None` marks an input that cannot require a gradient.
fn backprop_rule<S: Scalar>(node: &Node<S>, g: &[S]) -> Vec<Option<Vec<S>>> {
    match &node.rule {
        Rule::Leaf => Vec::new(),
        Rule::Conv2d {
            input,
            weight,
            dims,
            has_bias,
        } => {
            let dx = ops::conv2d_bwd_input(g, &weight.data, dims);
            let dw = ops::conv2d_bwd_weight(g, &input.data, dims);
            let mut out = vec![Some(dx), Some(dw)];
            if *has_bias {
                out.push(Some(ops::conv2d_bwd_bias(g, dims)));
            }
            out
        }
        Rule::Relu { input } => {
            let dx = input
                .data
                .iter()
                .zip(g)
                .map(|(&x, &gv)| if x > S::zero() { gv } else { S::zero() })
                .collect();
            vec![Some(dx)]
        }
        Rule::Sigmoid { output } => {
            let dx = output
                .data
                .iter()
                .zip(g)
                .map(|(&y, &gv)| gv * y * (S::one() - y))
                .collect();
            vec![Some(dx)]
        }
        Rule::Add { kind } => match kind {
            Broadcast::Same => vec![Some(g.to_vec()), Some(g.to_vec())],
            Broadcast::PerChannel => {
                vec![Some(g.to_vec()), Some(reduce_spatial(g, node.shape))]
            }
        },
        Rule::Mul { a, b, kind } => match kind {
            Broadcast::Same => {
                let da = b.data.iter().zip(g).map(|(&y, &gv)| gv * y).collect();
                let db = a.data.iter().zip(g).map(|(&x, &gv)| gv * x).collect();
                vec![Some(da), Some(db)]
            }
            Broadcast::PerChannel => {
                let plane = node.shape.h * node.shape.w;
                let mut da = Vec::with_capacity(g.len());
                for (i, chunk) in g.chunks_exact(plane).enumerate() {
                    let y = b.data[i];
                    da.extend(chunk.iter().map(|&gv| gv * y));
                }
                let prod: Vec<S> = a.data.iter().zip(g).map(|(&x, &gv)| gv * x).collect();
                vec![Some(da), Some(reduce_spatial(&prod, node.shape))]
            }
        },
        Rule::Scale { factor } => vec![Some(g.iter().map(|&gv| gv * *factor).collect())],
        Rule::PixelShuffle { r, in_shape } => {
            // transpose of a permutation: unshuffle the upstream gradient
            let out_shape = Shape::new(in_shape.n, in_shape.c / (r * r), in_shape.h * r, in_shape.w * r);
            vec![Some(ops::pixel_unshuffle_fwd(g, out_shape, *r))]
        }
        Rule::PixelUnshuffle { r, in_shape } => {
            let out_shape = Shape::new(in_shape.n, in_shape.c * r * r, in_shape.h / r, in_shape.w / r);
            vec![Some(ops::pixel_shuffle_fwd(g, out_shape, *r))]
        }
        Rule::GlobalAvgPool { in_shape } => {
            let inv = from_f64::<S>(1.0 / (in_shape.h * in_shape.w) as f64);
            let plane = in_shape.h * in_shape.w;
            let mut dx = Vec::with_capacity(in_shape.numel());
            for &gu in g {
                dx.extend(std::iter::repeat_n(gu * inv, plane));
            }
            vec![Some(dx)]
        }
        Rule::L1 { pred, target } => {
            let inv = from_f64::<S>(1.0 / pred.data.len() as f64);
            let gv = g[0] * inv;
            let dp: Vec<S> = pred
                .data
                .iter()
                .zip(target.data.iter())
                .map(|(&p, &t)| {
                    if p > t {
                        gv
                    } else if p < t {
                        -gv
                    } else {
                        S::zero()
                    }
                })
                .collect();
            let dt = dp.iter().map(|&v| -v).collect();
            vec![Some(dp), Some(dt)]
        }
    }
}

/// Sum over H and W into shape (N, C, 1, 1); h-major order.
fn reduce_spatial<S: Scalar>(g: &[S], full: Shape) -> Vec<S> {
    let plane = full.h * full.w;
    g.chunks_exact(plane)
        .map(|chunk| {
            let mut acc = S::zero();
            for &v in chunk {
                acc = acc + v;
            }
            acc
        })
        .collect()
}

impl<S: Scalar> Ops<S> for Tape<S> {
    fn conv2d(
        &mut self,
        input: &Tensor<S>,
        weight: &Tensor<S>,
        bias: Option<&Tensor<S>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<S>> {
        let out = ops::conv2d(input, weight, bias, stride, padding)?;
        let dims = ops::conv_dims(input, weight, bias, stride, padding)?;
        let mut inputs = vec![self.enroll(input), self.enroll(weight)];
        if let Some(b) = bias {
            inputs.push(self.enroll(b));
        }
        Ok(self.record(
            Rule::Conv2d {
                input: Saved::of(input),
                weight: Saved::of(weight),
                dims,
                has_bias: bias.is_some(),
            },
            inputs,
            out,
        ))
    }

    fn relu(&mut self, input: &Tensor<S>) -> Result<Tensor<S>> {
        let out = ops::relu(input);
        let inputs = vec![self.enroll(input)];
        Ok(self.record(
            Rule::Relu {
                input: Saved::of(input),
            },
            inputs,
            out,
        ))
    }

    fn sigmoid(&mut self, input: &Tensor<S>) -> Result<Tensor<S>> {
        let out = ops::sigmoid(input);
        let inputs = vec![self.enroll(input)];
        Ok(self.record(
            Rule::Sigmoid {
                output: Saved::of(&out),
            },
            inputs,
            out,
        ))
    }

    fn add(&mut self, a: &Tensor<S>, other: &Tensor<S>) -> Result<Tensor<S>> {
        let kind = ops::broadcast_kind("add", a, other)?;
        let out = ops::add(a, other)?;
        let inputs = vec![self.enroll(a), self.enroll(other)];
        Ok(self.record(Rule::Add { kind }, inputs, out))
    }

    fn mul(&mut self, a: &Tensor<S>, other: &Tensor<S>) -> Result<Tensor<S>> {
        let kind = ops::broadcast_kind("mul", a, other)?;
        let out = ops::mul(a, other)?;
        let inputs = vec![self.enroll(a), self.enroll(other)];
        Ok(self.record(
            Rule::Mul {
                a: Saved::of(a),
                b: Saved::of(other),
                kind,
            },
            inputs,
            out,
        ))
    }

    fn scale(&mut self, input: &Tensor<S>, factor: S) -> Result<Tensor<S>> {
        let out = ops::scale(input, factor);
        let inputs = vec![self.enroll(input)];
        Ok(self.record(Rule::Scale { factor }, inputs, out))
    }

    fn pixel_shuffle(&mut self, input: &Tensor<S>, r: usize) -> Result<Tensor<S>> {
        let out = ops::pixel_shuffle(input, r)?;
        let inputs = vec![self.enroll(input)];
        Ok(self.record(
            Rule::PixelShuffle {
                r,
                in_shape: input.shape(),
            },
            inputs,
            out,
        ))
    }

    fn pixel_unshuffle(&mut self, input: &Tensor<S>, r: usize) -> Result<Tensor<S>> {
        let out = ops::pixel_unshuffle(input, r)?;
        let inputs = vec![self.enroll(input)];
        Ok(self.record(
            Rule::PixelUnshuffle {
                r,
                in_shape: input.shape(),
            },
            inputs,
            out,
        ))
    }

    fn global_avg_pool(&mut self, input: &Tensor<S>) -> Result<Tensor<S>> {
        let out = ops::global_avg_pool(input)?;
        let inputs = vec![self.enroll(input)];
        Ok(self.record(
            Rule::GlobalAvgPool {
                in_shape: input.shape(),
            },
            inputs,
            out,
        ))
    }

    fn l1_loss(&mut self, pred: &Tensor<S>, target: &Tensor<S>) -> Result<Tensor<S>> {
        let out = ops::l1_loss(pred, target)?;
        let inputs = vec![self.enroll(pred), self.enroll(target)];
        Ok(self.record(
            Rule::L1 {
                pred: Saved::of(pred),
                target: Saved::of(target),
            },
            inputs,
            out,
        ))
    }
}
