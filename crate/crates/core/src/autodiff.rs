//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! for every node reachable from a trainable leaf. Each forward op checks its
//! output for non-finite values and reports the op by name.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    ScaleChannels(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Concat(Vec<Var>, usize),
    SumAxes(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var, usize),
    GlobalAvgPool(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
    },
    CrossEntropy {
        logits: Var,
        target: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of a forward computation.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that needed one.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the root.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn finite(name: &str, t: Tensor) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        let row = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            for (o, &bkj) in row.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub(crate) fn softmax_raw(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| x[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..n {
                let e = (x[idx(k)] - max).exp();
                out[idx(k)] = e;
                total += e;
            }
            for k in 0..n {
                out[idx(k)] /= total;
            }
        }
    }
    out
}

/// Output extent of a valid (unpadded) convolution.
pub fn conv_out_extent(n: usize, kernel: usize, stride: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || n < kernel {
        None
    } else {
        Some((n - kernel) / stride + 1)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
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

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (p, q, r) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), p, q, r);
        let t = finite("matmul", Tensor::new(&[p, r], out)?)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::dim(format!("transpose of rank-{} tensor", s.len())));
        }
        let out = transpose_raw(self.value(a).data(), s[0], s[1]);
        let t = Tensor::new(&[s[1], s[0]], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut t = self.value(a).clone();
        t.add_assign(self.value(b));
        let t = finite("add", t)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let c = *sx.last().unwrap_or(&1);
        if sb.len() != 1 || sb[0] != c {
            return Err(Error::dim(format!("add_bias of {sb:?} onto {sx:?}")));
        }
        let b = self.value(bias).data().to_vec();
        let mut t = self.value(x).clone();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += b[i % c];
        }
        let t = finite("add_bias", t)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, Op::AddBias(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = finite("mul", Tensor::new(self.shape(a), data)?)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Multiplies every channel vector (last axis) of `x` by the matching
    /// scalar in `weights`, whose element count equals the number of positions.
    pub fn scale_channels(&mut self, x: Var, weights: Var) -> Result<Var> {
        let sx = self.shape(x);
        let c = *sx.last().unwrap_or(&1);
        let positions = self.value(x).numel() / c;
        if self.value(weights).numel() != positions {
            return Err(Error::dim(format!(
                "scale_channels of {sx:?} by {:?}",
                self.shape(weights)
            )));
        }
        let w = self.value(weights).data().to_vec();
        let mut t = self.value(x).clone();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v *= w[i / c];
        }
        let t = finite("scale_channels", t)?;
        let rg = self.rg(&[x, weights]);
        Ok(self.push(t, Op::ScaleChannels(x, weights), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let t = finite("scale", self.value(a).map(|x| x * factor))?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Scale(a, factor), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Relu(a), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(format!(
                    "concat of {base:?} and {s:?} along axis {axis}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                let chunk = n * inner;
                data.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(&shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Sums over `axes`, removing them from the shape. Summing every axis
    /// yields a rank-0 scalar.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.iter().any(|&ax| ax >= shape.len()) {
            return Err(Error::dim(format!("sum over {axes:?} of {shape:?}")));
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        let map = reduce_index_map(&shape, &axes);
        let mut out = vec![0.0; out_shape.iter().product()];
        for (i, &x) in self.value(a).data().iter().enumerate() {
            out[map[i]] += x;
        }
        let t = finite("sum_axes", Tensor::new(&out_shape, out)?)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::SumAxes(a, axes), rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.sum_axes(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("softmax axis {axis} of {shape:?}")));
        }
        let out = softmax_raw(self.value(a).data(), &shape, axis);
        let t = finite("softmax", Tensor::new(&shape, out)?)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Softmax(a, axis), rg))
    }

    /// Mean over the two spatial axes of an `h×w×C` map.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::Shape(format!(
                "global_avg_pool expects rank 3, got {s:?}"
            )));
        }
        let (hw, c) = (s[0] * s[1], s[2]);
        let mut out = vec![0.0; c];
        for (i, &v) in self.value(x).data().iter().enumerate() {
            out[i % c] += v;
        }
        for o in &mut out {
            *o /= hw as f64;
        }
        let t = finite("global_avg_pool", Tensor::new(&[c], out)?)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::GlobalAvgPool(x), rg))
    }

    /// Valid-padding 2-D convolution of an `H×W×Cin` input with a
    /// `kh×kw×Cin×Cout` kernel plus a `Cout` bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let (si, sw, sb) = (self.shape(input), self.shape(weight), self.shape(bias));
        if si.len() != 3 || sw.len() != 4 || sw[2] != si[2] || sb != [sw[3]] {
            return Err(Error::dim(format!(
                "conv2d input {si:?}, weight {sw:?}, bias {sb:?}"
            )));
        }
        let (h, w, cin) = (si[0], si[1], si[2]);
        let (kh, kw, cout) = (sw[0], sw[1], sw[3]);
        let (oh, ow) = match (
            conv_out_extent(h, kh, stride),
            conv_out_extent(w, kw, stride),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::dim(format!(
                    "conv2d kernel {kh}x{kw} stride {stride} does not fit {h}x{w}"
                )))
            }
        };
        let x = self.value(input).data();
        let k = self.value(weight).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; oh * ow * cout];
        for oy in 0..oh {
            for ox in 0..ow {
                let o = &mut out[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                o.copy_from_slice(b);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = oy * stride + ky;
                        let ix = ox * stride + kx;
                        let xin = &x[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                        for (ci, &xv) in xin.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let kr = &k[((ky * kw + kx) * cin + ci) * cout..][..cout];
                            for (ov, &kv) in o.iter_mut().zip(kr) {
                                *ov += xv * kv;
                            }
                        }
                    }
                }
            }
        }
        let t = finite("conv2d", Tensor::new(&[oh, ow, cout], out)?)?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
            },
            rg,
        ))
    }

    /// Softmax cross-entropy of a logit vector against a class index.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let z = self.value(logits).data();
        if target >= z.len() {
            return Err(Error::Argument(format!(
                "target class {target} with {} logits",
                z.len()
            )));
        }
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let t = finite("cross_entropy", Tensor::scalar(lse - z[target]))?;
        let rg = self.rg(&[logits]);
        Ok(self.push(t, Op::CrossEntropy { logits, target }, rg))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{op} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Reverse-mode pass from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(Error::dim(format!(
                "backward root must be scalar, got {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::ones(rv.shape()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (p, q, r) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(*a) {
                    let bt = transpose_raw(self.value(*b).data(), q, r);
                    let ga = matmul_raw(g.data(), &bt, p, r, q);
                    self.accumulate(grads, *a, Tensor::new(&[p, q], ga)?);
                }
                if self.requires_grad(*b) {
                    let at = transpose_raw(self.value(*a).data(), p, q);
                    let gb = matmul_raw(&at, g.data(), q, p, r);
                    self.accumulate(grads, *b, Tensor::new(&[q, r], gb)?);
                }
            }
            Op::Transpose(a) => {
                let s = g.shape();
                let ga = transpose_raw(g.data(), s[0], s[1]);
                self.accumulate(grads, *a, Tensor::new(&[s[1], s[0]], ga)?);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                let c = self.value(*b).numel();
                let mut gb = vec![0.0; c];
                for (k, &v) in g.data().iter().enumerate() {
                    gb[k % c] += v;
                }
                self.accumulate(grads, *b, Tensor::new(&[c], gb)?);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga: Vec<f64> = g.data().iter().zip(vb.data()).map(|(g, y)| g * y).collect();
                let gb: Vec<f64> = g.data().iter().zip(va.data()).map(|(g, x)| g * x).collect();
                self.accumulate(grads, *a, Tensor::new(va.shape(), ga)?);
                self.accumulate(grads, *b, Tensor::new(vb.shape(), gb)?);
            }
            Op::ScaleChannels(x, w) => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let c = *vx.shape().last().unwrap_or(&1);
                let wd = vw.data();
                let gx: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, gv)| gv * wd[k / c])
                    .collect();
                let mut gw = vec![0.0; wd.len()];
                for (k, (gv, xv)) in g.data().iter().zip(vx.data()).enumerate() {
                    gw[k / c] += gv * xv;
                }
                self.accumulate(grads, *x, Tensor::new(vx.shape(), gx)?);
                self.accumulate(grads, *w, Tensor::new(vw.shape(), gw)?);
            }
            Op::Scale(a, f) => {
                self.accumulate(grads, *a, g.map(|v| v * f));
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                let ga = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(va.shape(), ga)?);
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = split_axis(g.shape(), *axis);
                let total = g.shape()[*axis];
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p)[*axis];
                    if self.requires_grad(p) {
                        let mut gp = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            gp.extend_from_slice(&g.data()[start..start + n * inner]);
                        }
                        self.accumulate(grads, p, Tensor::new(self.shape(p), gp)?);
                    }
                    offset += n;
                }
            }
            Op::SumAxes(a, axes) => {
                let shape = self.shape(*a);
                let map = reduce_index_map(shape, axes);
                let ga = map.iter().map(|&m| g.data()[m]).collect();
                self.accumulate(grads, *a, Tensor::new(shape, ga)?);
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, g.reshape(self.shape(*a))?);
            }
            Op::Softmax(a, axis) => {
                let s = &node.value;
                let (outer, n, inner) = split_axis(s.shape(), *axis);
                let (sd, gd) = (s.data(), g.data());
                let mut ga = vec![0.0; sd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let dot: f64 = (0..n).map(|k| gd[idx(k)] * sd[idx(k)]).sum();
                        for k in 0..n {
                            ga[idx(k)] = sd[idx(k)] * (gd[idx(k)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(s.shape(), ga)?);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let (hw, c) = (s[0] * s[1], s[2]);
                let ga = (0..hw * c).map(|k| g.data()[k % c] / hw as f64).collect();
                self.accumulate(grads, *x, Tensor::new(s, ga)?);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
            } => self.conv2d_backward(*input, *weight, *bias, *stride, g, grads)?,
            Op::CrossEntropy { logits, target } => {
                let z = self.value(*logits);
                let mut p = softmax_raw(z.data(), &[z.numel()], 0);
                p[*target] -= 1.0;
                let gv = g.item();
                let ga = p.into_iter().map(|v| v * gv).collect();
                self.accumulate(grads, *logits, Tensor::new(z.shape(), ga)?);
            }
        }
        Ok(())
    }

    fn conv2d_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let (vi, vw) = (self.value(input), self.value(weight));
        let (w, cin) = (vi.shape()[1], vi.shape()[2]);
        let (kh, kw, cout) = (vw.shape()[0], vw.shape()[1], vw.shape()[3]);
        let (oh, ow) = (g.shape()[0], g.shape()[1]);
        let (x, k, gd) = (vi.data(), vw.data(), g.data());
        let want_x = self.requires_grad(input);
        let want_w = self.requires_grad(weight);
        let mut gx = vec![0.0; if want_x { x.len() } else { 0 }];
        let mut gw = vec![0.0; if want_w { k.len() } else { 0 }];
        let mut gb = vec![0.0; cout];
        for oy in 0..oh {
            for ox in 0..ow {
                let go = &gd[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                for (b, &v) in gb.iter_mut().zip(go) {
                    *b += v;
                }
                for ky in 0..kh {
                    for kx in 0..kw {
                        let base = (oy * stride + ky) * w + ox * stride + kx;
                        for ci in 0..cin {
                            let koff = ((ky * kw + kx) * cin + ci) * cout;
                            if want_x {
                                let kr = &k[koff..koff + cout];
                                gx[base * cin + ci] +=
                                    go.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>();
                            }
                            if want_w {
                                let xv = x[base * cin + ci];
                                if xv != 0.0 {
                                    for (gwv, &gv) in gw[koff..koff + cout].iter_mut().zip(go) {
                                        *gwv += xv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if want_x {
            self.accumulate(grads, input, Tensor::new(vi.shape(), gx)?);
        }
        if want_w {
            self.accumulate(grads, weight, Tensor::new(vw.shape(), gw)?);
        }
        self.accumulate(grads, bias, Tensor::new(&[cout], gb)?);
        Ok(())
    }
}

/// For each flat input index, the flat output index after summing `axes` away.
fn reduce_index_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let numel: usize = shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..numel {
        let mut o = 0;
        for (d, (&i, &ext)) in idx.iter().zip(shape).enumerate() {
            if !axes.contains(&d) {
                o = o * ext + i;
            }
        }
        out.push(o);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}
