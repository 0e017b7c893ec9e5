//! Define-by-run reverse-mode tape.
//!
//! Every primitive pushes its output onto the tape. Outputs that depend on a
//! gradient-requiring input keep a record of the primitive and its inputs;
//! everything else is stored as an inert leaf. `backward` walks the tape in
//! reverse insertion order, which is a topological order by construction.

use super::conv::{self, ConvGeometry};
use super::gemm::gemm;
use super::params::ParamSet;
use super::tensor::{strides, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Abs(Var),
    Minimum(Var, Var),
    Sum(Var),
    Mean(Var),
    Broadcast(Var),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::MatMul(a, b) | Op::Minimum(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Shift(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softplus(a)
            | Op::Abs(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Broadcast(a) => vec![*a],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias.iter().copied());
                v
            }
            Op::Slice { input, .. } => vec![*input],
            Op::Concat { inputs, .. } => inputs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Records a constant (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records parameter `idx` of `params` as a gradient-requiring leaf.
    pub fn param(&mut self, params: &ParamSet, idx: usize) -> Var {
        self.nodes.push(Node {
            value: params.get(idx).value.clone(),
            op: Op::Param(idx),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b), "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let t = self.zip_with(a, b, |x, y| x / y);
        self.push(t, Op::Div(a, b), "div")
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("minimum", a, b)?;
        let t = self.zip_with(a, b, f64::min);
        self.push(t, Op::Minimum(a, b), "minimum")
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c), "scale")
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x + c);
        self.push(t, Op::Shift(a), "shift")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push(t, Op::Relu(a), "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a), "sigmoid")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::exp);
        self.push(t, Op::Exp(a), "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::ln);
        self.push(t, Op::Log(a), "log")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(softplus);
        self.push(t, Op::Softplus(a), "softplus")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::abs);
        self.push(t, Op::Abs(a), "abs")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "reduce_sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), "reduce_mean")
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        let t = Tensor::new(vec![m, n], out)?;
        self.push(t, Op::MatMul(a, b), "matmul")
    }

    /// 2-D convolution over `[N, C_in, H, W]` with weight `[C_out, C_in, kh, kw]`
    /// and optional bias `[C_out]`. Zero padding, no dilation or groups.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeometry::new(
            self.value(input).shape(),
            self.value(weight).shape(),
            stride,
            padding,
        )?;
        if let Some(b) = bias {
            let sb = self.value(b).shape();
            if sb != [geom.c_out] {
                return Err(Error::shape("conv2d", format!("bias {sb:?}")));
            }
        }
        let bias_vals = bias.map(|b| self.value(b).data());
        let (out, cols) = conv::forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias_vals,
        );
        let t = Tensor::new(geom.output_shape(), out)?;
        let needs_cols = self.nodes[weight.0].requires_grad;
        let op = Op::Conv2d {
            input,
            weight,
            bias,
            geom,
            cols: if needs_cols { cols } else { Vec::new() },
        };
        self.push(t, op, "conv2d")
    }

    /// Broadcasts `a` to `shape` following right-aligned broadcasting rules.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let map = broadcast_map(src.shape(), shape)?;
        let data = map.iter().map(|&i| src.data()[i]).collect();
        let t = Tensor::new(shape.to_vec(), data)?;
        self.push(t, Op::Broadcast(a), "broadcast")
    }

    /// Takes `[start, end)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let src = self.value(a);
        let shape = src.shape();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("{shape:?} axis {axis} [{start}, {end})"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let (n_in, n_out) = (shape[axis], end - start);
        let mut data = Vec::with_capacity(outer * n_out * inner);
        for o in 0..outer {
            let base = (o * n_in + start) * inner;
            data.extend_from_slice(&src.data()[base..base + n_out * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = n_out;
        let t = Tensor::new(out_shape, data)?;
        self.push(
            t,
            Op::Slice {
                input: a,
                axis,
                start,
            },
            "slice",
        )
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(v) => self.value(*v).shape().to_vec(),
            None => return Err(Error::shape("concat", "no inputs")),
        };
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.value(*v).shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let n = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * n..(o + 1) * n]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(shape, data)?;
        self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            "concat",
        )
    }

    /// Back-propagates from the scalar `root`, accumulating gradients into
    /// every parameter registered on this tape, then clears the tape.
    ///
    /// Parameters registered but unreachable from `root` receive a zero
    /// gradient so that the optimizer sees a complete gradient set.
    pub fn backward(&mut self, root: Var, params: &mut ParamSet) -> Result<()> {
        let root_shape = self.value(root).shape().to_vec();
        if !self.value(root).is_scalar() {
            return Err(Error::NonScalarRoot(root_shape));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match (grads[i].take(), &node.op) {
                (Some(g), _) => g,
                (None, Op::Param(_)) => vec![0.0; node.value.len()],
                (None, _) => continue,
            };
            if !g.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite("backward"));
            }
            self.backprop_node(i, &g, &mut grads, params);
        }
        self.nodes.clear();
        Ok(())
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        params: &mut ParamSet,
    ) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut with_grad = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.nodes[v.0].requires_grad {
                let len = self.nodes[v.0].value.len();
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
                f(buf);
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::Param(idx) => params.accumulate_grad(*idx, g),
            Op::Add(a, b) => {
                with_grad(*a, &mut |buf| axpy(buf, g, 1.0));
                with_grad(*b, &mut |buf| axpy(buf, g, 1.0));
            }
            Op::Sub(a, b) => {
                with_grad(*a, &mut |buf| axpy(buf, g, 1.0));
                with_grad(*b, &mut |buf| axpy(buf, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                with_grad(*a, &mut |buf| {
                    for ((o, &gi), &x) in buf.iter_mut().zip(g).zip(vb) {
                        *o += gi * x;
                    }
                });
                with_grad(*b, &mut |buf| {
                    for ((o, &gi), &x) in buf.iter_mut().zip(g).zip(va) {
                        *o += gi * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                with_grad(*a, &mut |buf| {
                    for ((o, &gi), &d) in buf.iter_mut().zip(g).zip(vb) {
                        *o += gi / d;
                    }
                });
                with_grad(*b, &mut |buf| {
                    for (((o, &gi), &n), &d) in buf.iter_mut().zip(g).zip(va).zip(vb) {
                        *o -= gi * n / (d * d);
                    }
                });
            }
            Op::Minimum(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                with_grad(*a, &mut |buf| {
                    for (j, o) in buf.iter_mut().enumerate() {
                        if va[j] <= vb[j] {
                            *o += g[j];
                        }
                    }
                });
                with_grad(*b, &mut |buf| {
                    for (j, o) in buf.iter_mut().enumerate() {
                        if va[j] > vb[j] {
                            *o += g[j];
                        }
                    }
                });
            }
            Op::Scale(a, c) => with_grad(*a, &mut |buf| axpy(buf, g, *c)),
            Op::Shift(a) => with_grad(*a, &mut |buf| axpy(buf, g, 1.0)),
            Op::Relu(a) => {
                let x = val(*a);
                with_grad(*a, &mut |buf| {
                    for j in 0..buf.len() {
                        if x[j] > 0.0 {
                            buf[j] += g[j];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => with_grad(*a, &mut |buf| {
                for j in 0..buf.len() {
                    buf[j] += g[j] * y[j] * (1.0 - y[j]);
                }
            }),
            Op::Exp(a) => with_grad(*a, &mut |buf| {
                for j in 0..buf.len() {
                    buf[j] += g[j] * y[j];
                }
            }),
            Op::Log(a) => {
                let x = val(*a);
                with_grad(*a, &mut |buf| {
                    for j in 0..buf.len() {
                        buf[j] += g[j] / x[j];
                    }
                });
            }
            Op::Softplus(a) => {
                let x = val(*a);
                with_grad(*a, &mut |buf| {
                    for j in 0..buf.len() {
                        buf[j] += g[j] * sigmoid(x[j]);
                    }
                });
            }
            Op::Abs(a) => {
                let x = val(*a);
                with_grad(*a, &mut |buf| {
                    for j in 0..buf.len() {
                        if x[j] > 0.0 {
                            buf[j] += g[j];
                        } else if x[j] < 0.0 {
                            buf[j] -= g[j];
                        }
                    }
                });
            }
            Op::Sum(a) => with_grad(*a, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                with_grad(*a, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (val(*a), val(*b));
                // dA = G · Bᵀ, dB = Aᵀ · G
                with_grad(*a, &mut |buf| gemm(m, n, k, g, false, vb, true, buf, 1.0));
                with_grad(*b, &mut |buf| gemm(k, m, n, va, true, g, false, buf, 1.0));
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let w = val(*weight);
                if wants(*input) {
                    with_grad(*input, &mut |buf| conv::backward_input(geom, w, g, buf));
                }
                with_grad(*weight, &mut |buf| {
                    conv::backward_weight(geom, cols, g, buf)
                });
                if let Some(b) = bias {
                    with_grad(*b, &mut |buf| conv::backward_bias(geom, g, buf));
                }
            }
            Op::Broadcast(a) => {
                let map = broadcast_map(self.nodes[a.0].value.shape(), node.value.shape())
                    .expect("validated in forward");
                with_grad(*a, &mut |buf| {
                    for (j, &src) in map.iter().enumerate() {
                        buf[src] += g[j];
                    }
                });
            }
            Op::Slice { input, axis, start } => {
                let in_shape = self.nodes[input.0].value.shape();
                let out_shape = node.value.shape();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let (n_in, n_out) = (in_shape[*axis], out_shape[*axis]);
                with_grad(*input, &mut |buf| {
                    for o in 0..outer {
                        let dst = (o * n_in + start) * inner;
                        let src = o * n_out * inner;
                        axpy(
                            &mut buf[dst..dst + n_out * inner],
                            &g[src..src + n_out * inner],
                            1.0,
                        );
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let row = out_shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let n = self.nodes[v.0].value.shape()[*axis] * inner;
                    with_grad(*v, &mut |buf| {
                        for o in 0..outer {
                            let src = o * row + offset;
                            axpy(&mut buf[o * n..(o + 1) * n], &g[src..src + n], 1.0);
                        }
                    });
                    offset += n;
                }
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// For each flat index of `target`, the flat index in `source` it reads from.
fn broadcast_map(source: &[usize], target: &[usize]) -> Result<Vec<usize>> {
    if source.len() > target.len() {
        return Err(Error::shape(
            "broadcast",
            format!("{source:?} -> {target:?}"),
        ));
    }
    let lead = target.len() - source.len();
    let src_strides = strides(source);
    let mut eff = vec![0usize; target.len()];
    for (i, &d) in source.iter().enumerate() {
        let t = target[lead + i];
        if d == t {
            eff[lead + i] = src_strides[i];
        } else if d != 1 {
            return Err(Error::shape(
                "broadcast",
                format!("{source:?} -> {target:?}"),
            ));
        }
    }
    let n: usize = target.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; target.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(&eff).map(|(i, s)| i * s).sum());
        for ax in (0..target.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < target[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Ok(map)
}
