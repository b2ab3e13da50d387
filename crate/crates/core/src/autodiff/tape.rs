//! Wengert tape: forward ops append nodes, `backward` replays them in reverse.

use crate::error::{Error, Result};
use crate::quant::{self, FakeQuantSpec};
use crate::tensor::Tensor;

use super::conv::{self, ConvGeometry};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar,
    Relu,
    Sigmoid,
    Square,
    Sqrt,
    Ln,
    /// Explicit broadcast of singleton axes; carries the output->input index map.
    Expand(Vec<usize>),
    /// Keep-dims sum; carries the input->output index map.
    SumAxes(Vec<usize>),
    Reshape,
    Conv2d {
        geometry: ConvGeometry,
        cols: Vec<f64>,
    },
    ChannelBias,
    Dense,
    ConcatChannels,
    UpsampleNearest2x,
    Softmax,
    Nll(Vec<usize>),
    FakeQuant(FakeQuantSpec),
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub op: Op,
    pub inputs: Vec<Var>,
    pub value: Tensor,
    pub requires_grad: bool,
}

/// Reverse-mode computation record. One tape per forward pass; not shared across threads.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`; nodes not reached from the loss get zeros.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(Op::Leaf, vec![], value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(Op::Leaf, vec![], value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, op: Op, inputs: Vec<Var>, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(op, inputs, value, requires_grad))
    }

    /// Gradients of scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.backward_with(loss, Tensor::ones(&shape))
    }

    /// Backward pass seeded with an arbitrary upstream gradient for `output`.
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.shape(output) {
            return Err(Error::ShapeMismatch {
                op: "backward",
                lhs: self.shape(output).to_vec(),
                rhs: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let input_grads = self.node_backward(node, &upstream);
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[id] = Some(upstream);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn node_backward(&self, node: &Node, up: &Tensor) -> Vec<Option<Tensor>> {
        let val = |i: usize| &self.nodes[node.inputs[i].0].value;
        let wants = |i: usize| self.nodes[node.inputs[i].0].requires_grad;
        let out = &node.value;
        let g = up.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Add => vec![
                wants(0).then(|| reduce_to(up.clone(), val(0))),
                wants(1).then(|| reduce_to(up.clone(), val(1))),
            ],
            Op::Sub => vec![
                wants(0).then(|| reduce_to(up.clone(), val(0))),
                wants(1).then(|| reduce_to(up.map(|v| -v), val(1))),
            ],
            Op::Mul => {
                let (a, b) = (val(0), val(1));
                vec![
                    wants(0).then(|| reduce_to(binary_map(up, b, |g, b| g * b), a)),
                    wants(1).then(|| reduce_to(binary_map(up, a, |g, a| g * a), b)),
                ]
            }
            Op::Div => {
                let (a, b) = (val(0), val(1));
                let ga = wants(0).then(|| reduce_to(binary_map(up, b, |g, b| g / b), a));
                let gb = wants(1).then(|| {
                    // d(a/b)/db = -out / b
                    let t = binary_map(up, out, |g, o| g * o);
                    reduce_to(binary_map(&t, b, |t, b| -t / b), b)
                });
                vec![ga, gb]
            }
            Op::Scale(c) => vec![Some(up.map(|v| v * c))],
            Op::AddScalar => vec![Some(up.clone())],
            Op::Relu => vec![Some(zip(up, val(0), |g, x| if x > 0.0 { g } else { 0.0 }))],
            Op::Sigmoid => vec![Some(zip(up, out, |g, s| g * s * (1.0 - s)))],
            Op::Square => vec![Some(zip(up, val(0), |g, x| 2.0 * g * x))],
            Op::Sqrt => vec![Some(zip(up, out, |g, s| 0.5 * g / s))],
            Op::Ln => vec![Some(zip(up, val(0), |g, x| g / x))],
            Op::Expand(map) => {
                let mut gi = Tensor::zeros(val(0).shape());
                let d = gi.data_mut();
                for (i, &j) in map.iter().enumerate() {
                    d[j] += g[i];
                }
                vec![Some(gi)]
            }
            Op::SumAxes(map) => {
                let gi = Tensor::from_fn(val(0).shape(), |i| g[map[i]]);
                vec![Some(gi)]
            }
            Op::Reshape => vec![Some(up.reshape(val(0).shape()).expect("reshape grad"))],
            Op::Conv2d { geometry, cols } => {
                let (x, w) = (val(0), val(1));
                let (batch, oc) = (x.shape()[0], w.shape()[0]);
                let gx = wants(0).then(|| {
                    let d = conv::conv_backward_input(geometry, batch, oc, w.data(), g);
                    Tensor::new(x.shape().to_vec(), d).expect("conv dx")
                });
                let gw = wants(1).then(|| {
                    let d = conv::conv_backward_weight(geometry, batch, oc, cols, g);
                    Tensor::new(w.shape().to_vec(), d).expect("conv dw")
                });
                vec![gx, gw]
            }
            Op::ChannelBias => {
                let s = up.shape();
                let (batch, ch, plane) = (s[0], s[1], s[2] * s[3]);
                let gb = wants(1).then(|| {
                    let mut gb = vec![0.0; ch];
                    for b in 0..batch {
                        for (c, acc) in gb.iter_mut().enumerate() {
                            let base = (b * ch + c) * plane;
                            *acc += g[base..base + plane].iter().sum::<f64>();
                        }
                    }
                    Tensor::new(vec![ch], gb).expect("bias grad")
                });
                vec![Some(up.clone()), gb]
            }
            Op::Dense => {
                let (x, w) = (val(0), val(1));
                let (batch, n, m) = (x.shape()[0], x.shape()[1], w.shape()[0]);
                let gx = wants(0).then(|| {
                    let mut gx = vec![0.0; batch * n];
                    crate::linalg::gemm(batch, m, n, g, false, w.data(), false, 0.0, &mut gx);
                    Tensor::new(vec![batch, n], gx).expect("dense dx")
                });
                let gw = wants(1).then(|| {
                    let mut gw = vec![0.0; m * n];
                    crate::linalg::gemm(m, batch, n, g, true, x.data(), false, 0.0, &mut gw);
                    Tensor::new(vec![m, n], gw).expect("dense dw")
                });
                let gb = wants(2).then(|| {
                    let mut gb = vec![0.0; m];
                    for row in g.chunks(m) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    Tensor::new(vec![m], gb).expect("dense db")
                });
                vec![gx, gw, gb]
            }
            Op::ConcatChannels => {
                let (a, b) = (val(0), val(1));
                let (ga, gb) = split_channels(up, a.shape()[1], b.shape()[1]);
                vec![Some(ga), Some(gb)]
            }
            Op::UpsampleNearest2x => {
                let s = val(0).shape();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let mut gi = Tensor::zeros(s);
                let d = gi.data_mut();
                for p in 0..planes {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            d[(p * h + y / 2) * w + x / 2] += g[(p * 2 * h + y) * 2 * w + x];
                        }
                    }
                }
                vec![Some(gi)]
            }
            Op::Softmax => {
                let k = *out.shape().last().expect("softmax rank");
                let mut gi = vec![0.0; out.numel()];
                for ((gr, pr), dst) in g.chunks(k).zip(out.data().chunks(k)).zip(gi.chunks_mut(k)) {
                    let dot: f64 = gr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for ((d, &gv), &p) in dst.iter_mut().zip(gr).zip(pr) {
                        *d = p * (gv - dot);
                    }
                }
                vec![Some(Tensor::new(out.shape().to_vec(), gi).expect("softmax grad"))]
            }
            Op::Nll(labels) => {
                let p = val(0);
                let k = p.shape()[1];
                let batch = labels.len() as f64;
                let mut gi = Tensor::zeros(p.shape());
                for (b, &l) in labels.iter().enumerate() {
                    gi.data_mut()[b * k + l] = -g[0] / (batch * p.data()[b * k + l]);
                }
                vec![Some(gi)]
            }
            Op::FakeQuant(spec) => {
                let x = val(0);
                let param = val(1).item();
                let offset = node.inputs.get(2).map(|v| self.nodes[v.0].value.item()).unwrap_or(0.0);
                let grads = quant::fake_quant_backward(spec, x.data(), param, offset, g);
                let mut out = vec![
                    Some(Tensor::new(x.shape().to_vec(), grads.input).expect("fq dx")),
                    Some(Tensor::scalar(grads.param)),
                ];
                if node.inputs.len() > 2 {
                    out.push(Some(Tensor::scalar(grads.offset)));
                }
                out
            }
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    a.zip_map(b, f).expect("backward shapes agree")
}

/// Elementwise map where `b` may be a single-element tensor broadcast over `a`.
pub(crate) fn binary_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        zip(a, b, f)
    } else if b.numel() == 1 {
        let s = b.item();
        a.map(|v| f(v, s))
    } else {
        let s = a.item();
        b.map(|v| f(s, v))
    }
}

/// Sum a gradient down to the shape of a (possibly scalar-broadcast) operand.
fn reduce_to(g: Tensor, operand: &Tensor) -> Tensor {
    if g.shape() == operand.shape() {
        g
    } else {
        Tensor::new(operand.shape().to_vec(), vec![g.sum()]).expect("scalar grad")
    }
}

pub(crate) fn split_channels(t: &Tensor, ca: usize, cb: usize) -> (Tensor, Tensor) {
    let s = t.shape();
    let (batch, plane) = (s[0], s[2] * s[3]);
    let mut a = Vec::with_capacity(batch * ca * plane);
    let mut b = Vec::with_capacity(batch * cb * plane);
    for item in t.data().chunks((ca + cb) * plane) {
        a.extend_from_slice(&item[..ca * plane]);
        b.extend_from_slice(&item[ca * plane..]);
    }
    (
        Tensor::new(vec![batch, ca, s[2], s[3]], a).expect("split a"),
        Tensor::new(vec![batch, cb, s[2], s[3]], b).expect("split b"),
    )
}
