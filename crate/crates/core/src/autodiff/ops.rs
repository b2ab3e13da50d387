//! Forward operations. Each records its node on the tape and fails on shape
//! errors or non-finite results.

use crate::error::{Error, Result};
use crate::quant::{self, FakeQuantSpec};
use crate::tensor::{strides_of, Tensor};

use super::conv::{self, ConvGeometry};
use super::tape::{binary_map, Op, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Relu,
    Sigmoid,
    Square,
    Sqrt,
    Ln,
}

impl Tape {
    fn binary(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() && ta.numel() != 1 && tb.numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out = binary_map(ta, tb, f);
        self.push(op, vec![a, b], out, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub, "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul, "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div, "div", |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * c);
        self.push(Op::Scale(c), vec![a], out, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v + c);
        self.push(Op::AddScalar, vec![a], out, "add_scalar")
    }

    pub fn unary(&mut self, a: Var, kind: Elementwise) -> Result<Var> {
        let x = self.value(a);
        let (op, name, out) = match kind {
            Elementwise::Relu => (Op::Relu, "relu", x.map(|v| if v > 0.0 { v } else { 0.0 })),
            Elementwise::Sigmoid => (Op::Sigmoid, "sigmoid", x.map(sigmoid)),
            Elementwise::Square => (Op::Square, "square", x.map(|v| v * v)),
            Elementwise::Sqrt => (Op::Sqrt, "sqrt", x.map(f64::sqrt)),
            Elementwise::Ln => (Op::Ln, "ln", x.map(f64::ln)),
        };
        self.push(op, vec![a], out, name)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Elementwise::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Elementwise::Sigmoid)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Elementwise::Square)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Elementwise::Sqrt)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Elementwise::Ln)
    }

    /// Broadcast singleton axes of `a` up to `shape` (same rank required).
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let ok = src.ndim() == shape.len() && src.shape().iter().zip(shape).all(|(&s, &t)| s == t || s == 1);
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "expand",
                lhs: src.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let map = reduction_map(shape, src.shape());
        let out = Tensor::new(shape.to_vec(), map.iter().map(|&j| src.data()[j]).collect())?;
        self.push(Op::Expand(map), vec![a], out, "expand")
    }

    /// Sum over `axes`, keeping them as unit extents.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let src = self.value(a);
        if axes.is_empty() || axes.iter().any(|&ax| ax >= src.ndim()) {
            return Err(Error::InvalidShape {
                op: "sum_axes",
                detail: format!("axes {axes:?} for shape {:?}", src.shape()),
            });
        }
        let mut reduced = src.shape().to_vec();
        for &ax in axes {
            reduced[ax] = 1;
        }
        let map = reduction_map(src.shape(), &reduced);
        let mut out = Tensor::zeros(&reduced);
        for (i, &j) in map.iter().enumerate() {
            out.data_mut()[j] += src.data()[i];
        }
        self.push(Op::SumAxes(map), vec![a], out, "sum_axes")
    }

    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let count = self.reduction_count(a, axes)?;
        let s = self.sum_axes(a, axes)?;
        self.scale(s, 1.0 / count as f64)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).ndim()).collect();
        let s = self.sum_axes(a, &axes)?;
        self.reshape(s, &[1])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    fn reduction_count(&self, a: Var, axes: &[usize]) -> Result<usize> {
        let shape = self.shape(a);
        if axes.is_empty() || axes.iter().any(|&ax| ax >= shape.len()) {
            return Err(Error::InvalidShape {
                op: "reduce",
                detail: format!("empty or invalid reduction {axes:?} for {shape:?}"),
            });
        }
        Ok(axes.iter().map(|&ax| shape[ax]).product())
    }

    /// Population mean and variance over `axes` (kept as unit extents).
    pub fn reduce_stats(&mut self, a: Var, axes: &[usize]) -> Result<(Var, Var)> {
        let count = self.reduction_count(a, axes)?;
        let shape = self.shape(a).to_vec();
        let mean = self.mean_axes(a, axes)?;
        let mean_b = self.expand(mean, &shape)?;
        let centered = self.sub(a, mean_b)?;
        let sq = self.square(centered)?;
        let ss = self.sum_axes(sq, axes)?;
        let var = self.scale(ss, 1.0 / count as f64)?;
        Ok((mean, var))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push(Op::Reshape, vec![a], out, "reshape")
    }

    /// Zero-padded cross-correlation. `x: [B,C,H,W]`, `w: [O,C,k,k]`, `k` in {1,3}, stride in {1,2}.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            lhs: xs.clone(),
            rhs: ws.clone(),
        };
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(mismatch());
        }
        let k = ws[2];
        if !(k == 1 || k == 3) || !(stride == 1 || stride == 2) || xs[2] < k || xs[3] < k {
            return Err(Error::InvalidShape {
                op: "conv2d",
                detail: format!("kernel {k}, stride {stride}, input {xs:?}"),
            });
        }
        let geometry = ConvGeometry::new(xs[1], xs[2], xs[3], k, stride);
        let (out, cols) = conv::conv_forward(&geometry, xs[0], ws[0], self.value(x).data(), self.value(w).data());
        let out = Tensor::new(vec![xs[0], ws[0], geometry.out_height, geometry.out_width], out)?;
        self.push(Op::Conv2d { geometry, cols }, vec![x, w], out, "conv2d")
    }

    /// Adds `b[c]` to every position of channel `c` of `x: [B,C,H,W]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if xs.len() != 4 || bs != [xs[1]] {
            return Err(Error::ShapeMismatch {
                op: "channel_bias",
                lhs: xs,
                rhs: bs,
            });
        }
        let plane = xs[2] * xs[3];
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let bv = bias[i % xs[1]];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        self.push(Op::ChannelBias, vec![x, b], out, "channel_bias")
    }

    /// Affine map `x w^T + b` with `x: [B,N]`, `w: [M,N]`, `b: [M]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(Error::ShapeMismatch {
                op: "dense",
                lhs: xs,
                rhs: ws,
            });
        }
        let (batch, n, m) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; batch * m];
        crate::linalg::gemm(
            batch,
            n,
            m,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            0.0,
            &mut out,
        );
        let bias = self.value(b).data();
        for row in out.chunks_mut(m) {
            row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
        }
        let out = Tensor::new(vec![batch, m], out)?;
        self.push(Op::Dense, vec![x, w, b], out, "dense")
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let plane = sa[2] * sa[3];
        let mut data = Vec::with_capacity(ta.numel() + tb.numel());
        for (ia, ib) in ta.data().chunks(sa[1] * plane).zip(tb.data().chunks(sb[1] * plane)) {
            data.extend_from_slice(ia);
            data.extend_from_slice(ib);
        }
        let out = Tensor::new(vec![sa[0], sa[1] + sb[1], sa[2], sa[3]], data)?;
        self.push(Op::ConcatChannels, vec![a, b], out, "concat_channels")
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::InvalidShape {
                op: "upsample_nearest2x",
                detail: format!("{s:?}"),
            });
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let src = self.value(x).data();
        let mut data = vec![0.0; planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    data[(p * 2 * h + y) * 2 * w + xx] = src[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], data)?;
        self.push(Op::UpsampleNearest2x, vec![x], out, "upsample_nearest2x")
    }

    /// `[B,C,H,W] -> [B,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::InvalidShape {
                op: "global_avg_pool",
                detail: format!("{s:?}"),
            });
        }
        let m = self.mean_axes(x, &[2, 3])?;
        self.reshape(m, &[s[0], s[1]])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let k = *t.shape().last().expect("rank >= 1");
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(k) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(Op::Softmax, vec![x], out, "softmax")
    }

    /// Mean negative log-likelihood of `labels` under row-stochastic `probs: [B,K]`.
    pub fn nll(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let p = self.value(probs);
        let s = p.shape();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return Err(Error::InvalidShape {
                op: "nll",
                detail: format!("probs {s:?} with {} labels", labels.len()),
            });
        }
        let k = s[1];
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(b, &l)| p.data()[b * k + l].ln())
            .sum::<f64>()
            / labels.len() as f64;
        self.push(Op::Nll(labels.to_vec()), vec![probs], Tensor::scalar(loss), "nll")
    }

    /// Fake quantization of `x`. `param` is the step (uniform/LSQ) or the clip bound (PACT);
    /// `offset` is only given for offset-carrying quantizers.
    pub fn fake_quant(&mut self, x: Var, spec: FakeQuantSpec, param: Var, offset: Option<Var>) -> Result<Var> {
        let p = self.value(param).item();
        let o = offset.map(|v| self.value(v).item()).unwrap_or(0.0);
        let out = quant::fake_quant_forward(&spec, self.value(x).data(), p, o)?;
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        let mut inputs = vec![x, param];
        inputs.extend(offset);
        self.push(Op::FakeQuant(spec), inputs, out, "fake_quant")
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// For each flat index of `big`, the flat index of the matching element of `small`
/// (whose axes are either equal to `big`'s or 1).
fn reduction_map(big: &[usize], small: &[usize]) -> Vec<usize> {
    let small_strides = strides_of(small);
    let eff: Vec<usize> = small
        .iter()
        .zip(&small_strides)
        .map(|(&s, &st)| if s == 1 { 0 } else { st })
        .collect();
    let numel: usize = big.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; big.len()];
    let mut offset = 0usize;
    for _ in 0..numel {
        map.push(offset);
        for d in (0..big.len()).rev() {
            idx[d] += 1;
            offset += eff[d];
            if idx[d] < big[d] {
                break;
            }
            offset -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}
