//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its value and the handles of its
//! inputs. [`Tape::backward`] walks the nodes in exact reverse order of
//! execution, so a node's gradient is complete before it is propagated.

use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};

use super::kernels::{self, Window};
use super::{check_shape, numel, Tensor};
use crate::error::{Error, Result};

const COSINE_EPS: f32 = 1e-8;
const LAYER_NORM_EPS: f32 = 1e-5;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);
static COSINE_GUARD_HITS: AtomicU64 = AtomicU64::new(0);

/// Number of cosine similarities evaluated with a zero-norm operand since process start.
pub fn cosine_guard_hits() -> u64 {
    COSINE_GUARD_HITS.load(Ordering::Relaxed)
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    fn idx(self) -> usize {
        self.index as usize
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Detached,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    MeanAxis { x: Var, axis: usize },
    MatMul(Var, Var),
    Permute { x: Var, axes: Vec<usize> },
    Reshape(Var),
    AddBias { x: Var, bias: Var, axis: usize },
    Conv2d { x: Var, w: Var, stride: usize, padding: usize },
    ConvTranspose2d { x: Var, w: Var, stride: usize, padding: usize },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    Gelu(Var),
    Sigmoid(Var),
    Cosine { a: Var, b: Var },
    RowNorms(Var),
    Gather { table: Var, idx: Vec<usize> },
    StraightThrough { x: Var, table: Var, idx: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f32]> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.idx()).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` (if any) into `target`'s gradient buffer.
    pub fn accumulate_into(&self, var: Var, target: &mut Tensor) -> Result<()> {
        match self.get(var) {
            Some(g) => target.accumulate_grad(g),
            None => {
                let zeros = vec![0.0; target.numel()];
                target.accumulate_grad(&zeros)
            }
        }
    }
}

fn add_into(dst: &mut Option<Vec<f32>>, len: usize, f: impl FnOnce(&mut [f32])) {
    let buf = dst.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

fn gelu(x: f32) -> (f32, f32) {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    const A: f32 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn conv_window(x: &[usize], kh: usize, kw: usize, stride: usize, padding: usize) -> Window {
    Window {
        channels: x[1],
        height: x[2],
        width: x[3],
        kh,
        kw,
        stride,
        padding,
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Handles from before the reset are rejected afterwards.
    pub fn clear(&mut self) {
        self.nodes = Vec::new();
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    fn check(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id {
            return Err(Error::ForeignVar);
        }
        self.nodes.get(v.idx()).ok_or(Error::ForeignVar)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.idx()].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn item(&self, v: Var) -> f32 {
        self.value(v).data()[0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.idx()].needs_grad
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f32>, op: Op, needs_grad: bool) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let var = Var {
            tape: self.id,
            index: self.nodes.len() as u32,
        };
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            needs_grad,
        });
        Ok(var)
    }

    /// Records `tensor` as an input. It receives a gradient iff `requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs = tensor.requires_grad();
        let Tensor { shape, data, .. } = tensor;
        let var = Var {
            tape: self.id,
            index: self.nodes.len() as u32,
        };
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op: Op::Leaf,
            needs_grad: needs,
        });
        var
    }

    /// Records a copy of `tensor` (typically a model parameter).
    pub fn watch(&mut self, tensor: &Tensor) -> Var {
        let mut copy = Tensor::from_parts(tensor.shape().to_vec(), tensor.data().to_vec());
        copy.set_requires_grad(tensor.requires_grad());
        self.leaf(copy)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.check(a)?.value.shape(), self.check(b)?.value.shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn elementwise2(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        self.binary_shapes(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = va.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(name, shape, data, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var> {
        let v = self.check(x)?.value.clone();
        let data = v.data().iter().map(|e| e * factor).collect();
        let needs = self.needs(x);
        self.push("scale", v.shape().to_vec(), data, Op::Scale(x, factor), needs)
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Result<Var> {
        let v = &self.check(x)?.value;
        let data = v.data().iter().map(|e| e + c).collect();
        let shape = v.shape().to_vec();
        let needs = self.needs(x);
        self.push("add_scalar", shape, data, Op::AddScalar(x), needs)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = &self.check(x)?.value;
        let s: f32 = v.data().iter().sum();
        let needs = self.needs(x);
        self.push("sum", vec![1], vec![s], Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = &self.check(x)?.value;
        let s: f32 = v.data().iter().sum::<f32>() / v.numel() as f32;
        let needs = self.needs(x);
        self.push("mean", vec![1], vec![s], Op::Mean(x), needs)
    }

    /// Averages over one axis, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = &self.check(x)?.value;
        if axis >= v.rank() {
            return Err(Error::InvalidArgument(format!("axis {axis} out of range for {:?}", v.shape())));
        }
        let (outer, len, inner) = kernels::split_axis(v.shape(), axis);
        let mut out = vec![0.0f32; outer * inner];
        let d = v.data();
        for o in 0..outer {
            for a in 0..len {
                let src = &d[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        out.iter_mut().for_each(|e| *e /= len as f32);
        let mut shape: Vec<usize> = v.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let needs = self.needs(x);
        self.push("mean_axis", shape, out, Op::MeanAxis { x, axis }, needs)
    }

    /// Matrix product of `m×k` and `k×n` operands, or batched `b×m×k` by `b×k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.check(a)?.value.shape().to_vec();
        let sb = self.check(b)?.value.shape().to_vec();
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (batch, m, k, n) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (1, sa[0], sa[1], sb[1]),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => (sa[0], sa[1], sa[2], sb[2]),
            _ => return Err(mismatch()),
        };
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let mut out = vec![0.0f32; batch * m * n];
        for t in 0..batch {
            kernels::matmul_nn(
                &va[t * m * k..(t + 1) * m * k],
                &vb[t * k * n..(t + 1) * k * n],
                &mut out[t * m * n..(t + 1) * m * n],
                m,
                k,
                n,
                false,
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul", shape, out, Op::MatMul(a, b), needs)
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let v = &self.check(x)?.value;
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        if sorted != (0..v.rank()).collect::<Vec<_>>() {
            return Err(Error::InvalidArgument(format!(
                "{axes:?} is not a permutation of the axes of {:?}",
                v.shape()
            )));
        }
        let (shape, data) = kernels::permute(v.data(), v.shape(), axes);
        let needs = self.needs(x);
        self.push(
            "permute",
            shape,
            data,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            needs,
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.check(x)?.value.rank();
        if rank < 2 {
            return Err(Error::InvalidArgument("transpose needs rank >= 2".into()));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        check_shape(shape)?;
        let v = &self.check(x)?.value;
        if numel(shape) != v.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = v.data().to_vec();
        let needs = self.needs(x);
        self.push("reshape", shape.to_vec(), data, Op::Reshape(x), needs)
    }

    /// Adds a vector along `axis`, broadcasting over every other axis.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let v = &self.check(x)?.value;
        let b = &self.check(bias)?.value;
        if axis >= v.rank() || b.rank() != 1 || b.numel() != v.shape()[axis] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: v.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (outer, len, inner) = kernels::split_axis(v.shape(), axis);
        let mut data = v.data().to_vec();
        for o in 0..outer {
            for a in 0..len {
                let bv = b.data()[a];
                data[(o * len + a) * inner..(o * len + a + 1) * inner]
                    .iter_mut()
                    .for_each(|e| *e += bv);
            }
        }
        let shape = v.shape().to_vec();
        let needs = self.needs(x) || self.needs(bias);
        self.push("add_bias", shape, data, Op::AddBias { x, bias, axis }, needs)
    }

    /// Cross-correlation of `B×C×H×W` input with an `O×C×kh×kw` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let sx = self.check(x)?.value.shape().to_vec();
        let sw = self.check(w)?.value.shape().to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (kh, kw) = (sw[2], sw[3]);
        if kh > sx[2] + 2 * padding || kw > sx[3] + 2 * padding {
            return Err(Error::InvalidArgument(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                sx[2] + 2 * padding,
                sx[3] + 2 * padding
            )));
        }
        let win = conv_window(&sx, kh, kw, stride, padding);
        let (oh, ow) = (win.out_height(), win.out_width());
        let (batch, out_ch) = (sx[0], sw[0]);
        let plane = sx[1] * sx[2] * sx[3];
        let vx = self.value(x).data();
        let vw = self.value(w).data();
        let mut out = vec![0.0f32; batch * out_ch * oh * ow];
        for bi in 0..batch {
            let cols = kernels::im2col(&vx[bi * plane..(bi + 1) * plane], &win);
            kernels::matmul_nn(
                vw,
                &cols,
                &mut out[bi * out_ch * oh * ow..(bi + 1) * out_ch * oh * ow],
                out_ch,
                win.col_rows(),
                oh * ow,
                false,
            );
        }
        let needs = self.needs(x) || self.needs(w);
        self.push(
            "conv2d",
            vec![batch, out_ch, oh, ow],
            out,
            Op::Conv2d { x, w, stride, padding },
            needs,
        )
    }

    /// Transposed convolution of `B×Cin×H×W` input with a `Cin×Cout×kh×kw` kernel.
    ///
    /// Output extent is `(H−1)·stride − 2·padding + kh`; this is the adjoint of [`Tape::conv2d`].
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let sx = self.check(x)?.value.shape().to_vec();
        let sw = self.check(w)?.value.shape().to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (kh, kw) = (sw[2], sw[3]);
        let oh = ((sx[2] - 1) * stride + kh) as isize - 2 * padding as isize;
        let ow = ((sx[3] - 1) * stride + kw) as isize - 2 * padding as isize;
        if oh <= 0 || ow <= 0 {
            return Err(Error::InvalidArgument("transposed convolution output is empty".into()));
        }
        let (oh, ow) = (oh as usize, ow as usize);
        let (batch, cin, cout) = (sx[0], sx[1], sw[1]);
        let win = Window {
            channels: cout,
            height: oh,
            width: ow,
            kh,
            kw,
            stride,
            padding,
        };
        let hw = sx[2] * sx[3];
        let vx = self.value(x).data();
        let vw = self.value(w).data();
        let mut out = vec![0.0f32; batch * cout * oh * ow];
        for bi in 0..batch {
            let mut cols = vec![0.0f32; cout * kh * kw * hw];
            kernels::matmul_tn(vw, &vx[bi * cin * hw..(bi + 1) * cin * hw], &mut cols, cout * kh * kw, cin, hw, false);
            kernels::col2im(&cols, &win, &mut out[bi * cout * oh * ow..(bi + 1) * cout * oh * ow]);
        }
        let needs = self.needs(x) || self.needs(w);
        self.push(
            "conv_transpose2d",
            vec![batch, cout, oh, ow],
            out,
            Op::ConvTranspose2d { x, w, stride, padding },
            needs,
        )
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = &self.check(x)?.value;
        if axis >= v.rank() {
            return Err(Error::InvalidArgument(format!("axis {axis} out of range for {:?}", v.shape())));
        }
        let (outer, len, inner) = kernels::split_axis(v.shape(), axis);
        let d = v.data();
        let mut out = vec![0.0f32; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| d[at(a)]).fold(f32::NEG_INFINITY, f32::max);
                let mut total = 0.0f32;
                for a in 0..len {
                    let e = (d[at(a)] - max).exp();
                    out[at(a)] = e;
                    total += e;
                }
                for a in 0..len {
                    out[at(a)] /= total;
                }
            }
        }
        let shape = v.shape().to_vec();
        let needs = self.needs(x);
        self.push("softmax", shape, out, Op::Softmax { x, axis }, needs)
    }

    /// Normalizes over the last axis, then applies `gain` and `bias` (both of that length).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let v = &self.check(x)?.value;
        let d = *v.shape().last().unwrap_or(&0);
        let (g, b) = (&self.check(gain)?.value, &self.check(bias)?.value);
        if g.shape() != [d] || b.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: v.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let rows = v.numel() / d;
        let mut xhat = vec![0.0f32; v.numel()];
        let mut rstd = vec![0.0f32; rows];
        let mut out = vec![0.0f32; v.numel()];
        for r in 0..rows {
            let row = &v.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let shape = v.shape().to_vec();
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            needs,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = &self.check(x)?.value;
        let data = v.data().iter().map(|&e| gelu(e).0).collect();
        let shape = v.shape().to_vec();
        let needs = self.needs(x);
        self.push("gelu", shape, data, Op::Gelu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = &self.check(x)?.value;
        let data = v.data().iter().map(|&e| sigmoid(e)).collect();
        let shape = v.shape().to_vec();
        let needs = self.needs(x);
        self.push("sigmoid", shape, data, Op::Sigmoid(x), needs)
    }

    /// `dot(a, b) / (‖a‖·‖b‖ + 1e-8)` over all elements, as a scalar.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("cosine_similarity", a, b)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let dot: f32 = va.iter().zip(vb).map(|(x, y)| x * y).sum();
        let na = va.iter().map(|x| x * x).sum::<f32>().sqrt();
        let nb = vb.iter().map(|x| x * x).sum::<f32>().sqrt();
        if na == 0.0 || nb == 0.0 {
            COSINE_GUARD_HITS.fetch_add(1, Ordering::Relaxed);
        }
        let c = dot / (na * nb + COSINE_EPS);
        let needs = self.needs(a) || self.needs(b);
        self.push("cosine_similarity", vec![1], vec![c], Op::Cosine { a, b }, needs)
    }

    /// Same value as `x`, but no gradient flows back through it.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let v = &self.check(x)?.value;
        let (shape, data) = (v.shape().to_vec(), v.data().to_vec());
        self.push("stop_gradient", shape, data, Op::Detached, false)
    }

    /// Euclidean norm of every row of an `n×d` matrix, giving a length-`n` vector.
    pub fn row_norms(&mut self, x: Var) -> Result<Var> {
        let v = &self.check(x)?.value;
        if v.rank() != 2 {
            return Err(Error::InvalidArgument(format!("row_norms needs a matrix, got {:?}", v.shape())));
        }
        let d = v.shape()[1];
        let data = v.data().chunks(d).map(|r| r.iter().map(|e| e * e).sum::<f32>().sqrt()).collect();
        let n = v.shape()[0];
        let needs = self.needs(x);
        self.push("row_norms", vec![n], data, Op::RowNorms(x), needs)
    }

    fn gather_value(&self, table: Var, idx: &[usize]) -> Result<(Vec<usize>, Vec<f32>)> {
        let t = &self.check(table)?.value;
        if t.rank() != 2 || t.shape()[0] == 0 {
            return Err(Error::InvalidArgument(format!("gather needs a nonempty K×d table, got {:?}", t.shape())));
        }
        let (k, d) = (t.shape()[0], t.shape()[1]);
        if idx.is_empty() {
            return Err(Error::Empty("gather indices"));
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= k {
                return Err(Error::InvalidArgument(format!("row {i} out of range for {k} rows")));
            }
            data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        Ok((vec![idx.len(), d], data))
    }

    /// Selects rows of a `K×d` table; gradients scatter-add back into the table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (shape, data) = self.gather_value(table, idx)?;
        let needs = self.needs(table);
        self.push(
            "gather_rows",
            shape,
            data,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            needs,
        )
    }

    /// Forward value is `table[idx]`; backward copies the incoming gradient
    /// unchanged to `x` (straight-through) and scatter-adds it into the table rows.
    pub fn straight_through(&mut self, x: Var, table: Var, idx: &[usize]) -> Result<Var> {
        let (shape, data) = self.gather_value(table, idx)?;
        if self.check(x)?.value.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "straight_through",
                lhs: self.value(x).shape().to_vec(),
                rhs: shape,
            });
        }
        let needs = self.needs(x) || self.needs(table);
        self.push(
            "straight_through",
            shape,
            data,
            Op::StraightThrough {
                x,
                table,
                idx: idx.to_vec(),
            },
            needs,
        )
    }

    /// Mean squared difference between two equally shaped values.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let diff = self.sub(a, b)?;
        let sq = self.square(diff)?;
        self.mean(sq)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self.check(loss)?;
        if node.value.numel() != 1 {
            return Err(Error::NonScalarLoss(node.value.shape().to_vec()));
        }
        if !node.needs_grad {
            return Err(Error::DetachedLoss);
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.idx()] = Some(vec![1.0]);
        for i in (0..=loss.idx()).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let val = |v: Var| self.nodes[v.idx()].value.data();
        let len = |v: Var| self.nodes[v.idx()].value.numel();
        let want = |v: Var| self.nodes[v.idx()].needs_grad;
        match &node.op {
            Op::Leaf | Op::Detached => {}
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0f32), (*b, 1.0)] {
                    if want(v) {
                        add_into(&mut grads[v.idx()], g.len(), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += sign * g));
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0f32), (*b, -1.0)] {
                    if want(v) {
                        add_into(&mut grads[v.idx()], g.len(), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += sign * g));
                    }
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let vb = val(*b);
                    add_into(&mut grads[a.idx()], g.len(), |d| {
                        for ((d, g), y) in d.iter_mut().zip(g).zip(vb) {
                            *d += g * y;
                        }
                    });
                }
                if want(*b) {
                    let va = val(*a);
                    add_into(&mut grads[b.idx()], g.len(), |d| {
                        for ((d, g), x) in d.iter_mut().zip(g).zip(va) {
                            *d += g * x;
                        }
                    });
                }
            }
            Op::Scale(x, c) => {
                add_into(&mut grads[x.idx()], g.len(), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g));
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                add_into(&mut grads[x.idx()], g.len(), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::Sum(x) => {
                let n = len(*x);
                add_into(&mut grads[x.idx()], n, |d| d.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean(x) => {
                let n = len(*x);
                let share = g[0] / n as f32;
                add_into(&mut grads[x.idx()], n, |d| d.iter_mut().for_each(|d| *d += share));
            }
            Op::MeanAxis { x, axis } => {
                let shape = self.nodes[x.idx()].value.shape();
                let (outer, alen, inner) = kernels::split_axis(shape, *axis);
                let n = len(*x);
                add_into(&mut grads[x.idx()], n, |d| {
                    for o in 0..outer {
                        for a in 0..alen {
                            for i in 0..inner {
                                d[(o * alen + a) * inner + i] += g[o * inner + i] / alen as f32;
                            }
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let sa = self.nodes[a.idx()].value.shape();
                let sb = self.nodes[b.idx()].value.shape();
                let (batch, m, k, n) = if sa.len() == 2 {
                    (1, sa[0], sa[1], sb[1])
                } else {
                    (sa[0], sa[1], sa[2], sb[2])
                };
                let (va, vb) = (val(*a), val(*b));
                if want(*a) {
                    add_into(&mut grads[a.idx()], batch * m * k, |d| {
                        for t in 0..batch {
                            kernels::matmul_nt(
                                &g[t * m * n..(t + 1) * m * n],
                                &vb[t * k * n..(t + 1) * k * n],
                                &mut d[t * m * k..(t + 1) * m * k],
                                m,
                                n,
                                k,
                                true,
                            );
                        }
                    });
                }
                if want(*b) {
                    add_into(&mut grads[b.idx()], batch * k * n, |d| {
                        for t in 0..batch {
                            kernels::matmul_tn(
                                &va[t * m * k..(t + 1) * m * k],
                                &g[t * m * n..(t + 1) * m * n],
                                &mut d[t * k * n..(t + 1) * k * n],
                                k,
                                m,
                                n,
                                true,
                            );
                        }
                    });
                }
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0usize; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (_, back) = kernels::permute(g, node.value.shape(), &inverse);
                add_into(&mut grads[x.idx()], g.len(), |d| d.iter_mut().zip(&back).for_each(|(d, g)| *d += g));
            }
            Op::AddBias { x, bias, axis } => {
                if want(*x) {
                    add_into(&mut grads[x.idx()], g.len(), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                }
                if want(*bias) {
                    let (outer, alen, inner) = kernels::split_axis(node.value.shape(), *axis);
                    add_into(&mut grads[bias.idx()], alen, |d| {
                        for o in 0..outer {
                            for (a, dv) in d.iter_mut().enumerate() {
                                let start = (o * alen + a) * inner;
                                *dv += g[start..start + inner].iter().sum::<f32>();
                            }
                        }
                    });
                }
            }
            Op::Conv2d { x, w, stride, padding } => {
                let sx = self.nodes[x.idx()].value.shape();
                let sw = self.nodes[w.idx()].value.shape();
                let win = conv_window(sx, sw[2], sw[3], *stride, *padding);
                let (batch, out_ch) = (sx[0], sw[0]);
                let plane = sx[1] * sx[2] * sx[3];
                let (rows, cols_n) = (win.col_rows(), win.col_cols());
                let (vx, vw) = (val(*x), val(*w));
                let mut dw = want(*w).then(|| vec![0.0f32; out_ch * rows]);
                let mut dx = want(*x).then(|| vec![0.0f32; batch * plane]);
                for bi in 0..batch {
                    let gb = &g[bi * out_ch * cols_n..(bi + 1) * out_ch * cols_n];
                    if let Some(dw) = dw.as_mut() {
                        let cols = kernels::im2col(&vx[bi * plane..(bi + 1) * plane], &win);
                        kernels::matmul_nt(gb, &cols, dw, out_ch, cols_n, rows, true);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let mut dcols = vec![0.0f32; rows * cols_n];
                        kernels::matmul_tn(vw, gb, &mut dcols, rows, out_ch, cols_n, false);
                        kernels::col2im(&dcols, &win, &mut dx[bi * plane..(bi + 1) * plane]);
                    }
                }
                if let Some(dw) = dw {
                    add_into(&mut grads[w.idx()], dw.len(), |d| d.iter_mut().zip(&dw).for_each(|(d, g)| *d += g));
                }
                if let Some(dx) = dx {
                    add_into(&mut grads[x.idx()], dx.len(), |d| d.iter_mut().zip(&dx).for_each(|(d, g)| *d += g));
                }
            }
            Op::ConvTranspose2d { x, w, stride, padding } => {
                let sx = self.nodes[x.idx()].value.shape();
                let sw = self.nodes[w.idx()].value.shape();
                let so = node.value.shape();
                let (batch, cin, cout, kh, kw) = (sx[0], sx[1], sw[1], sw[2], sw[3]);
                let win = Window {
                    channels: cout,
                    height: so[2],
                    width: so[3],
                    kh,
                    kw,
                    stride: *stride,
                    padding: *padding,
                };
                let hw = sx[2] * sx[3];
                let out_plane = cout * so[2] * so[3];
                let rows = cout * kh * kw;
                let (vx, vw) = (val(*x), val(*w));
                let mut dw = want(*w).then(|| vec![0.0f32; cin * rows]);
                let mut dx = want(*x).then(|| vec![0.0f32; batch * cin * hw]);
                for bi in 0..batch {
                    let gcols = kernels::im2col(&g[bi * out_plane..(bi + 1) * out_plane], &win);
                    if let Some(dx) = dx.as_mut() {
                        kernels::matmul_nn(vw, &gcols, &mut dx[bi * cin * hw..(bi + 1) * cin * hw], cin, rows, hw, true);
                    }
                    if let Some(dw) = dw.as_mut() {
                        kernels::matmul_nt(&vx[bi * cin * hw..(bi + 1) * cin * hw], &gcols, dw, cin, hw, rows, true);
                    }
                }
                if let Some(dw) = dw {
                    add_into(&mut grads[w.idx()], dw.len(), |d| d.iter_mut().zip(&dw).for_each(|(d, g)| *d += g));
                }
                if let Some(dx) = dx {
                    add_into(&mut grads[x.idx()], dx.len(), |d| d.iter_mut().zip(&dx).for_each(|(d, g)| *d += g));
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, alen, inner) = kernels::split_axis(node.value.shape(), *axis);
                add_into(&mut grads[x.idx()], g.len(), |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| (o * alen + a) * inner + i;
                            let dot: f32 = (0..alen).map(|a| g[at(a)] * y[at(a)]).sum();
                            for a in 0..alen {
                                d[at(a)] += y[at(a)] * (g[at(a)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let dim = *node.value.shape().last().unwrap();
                let gv = val(*gain);
                if want(*gain) {
                    add_into(&mut grads[gain.idx()], dim, |d| {
                        for (gr, hr) in g.chunks(dim).zip(xhat.chunks(dim)) {
                            for j in 0..dim {
                                d[j] += gr[j] * hr[j];
                            }
                        }
                    });
                }
                if want(*bias) {
                    add_into(&mut grads[bias.idx()], dim, |d| {
                        for gr in g.chunks(dim) {
                            d.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                        }
                    });
                }
                if want(*x) {
                    add_into(&mut grads[x.idx()], g.len(), |d| {
                        for (r, (gr, hr)) in g.chunks(dim).zip(xhat.chunks(dim)).enumerate() {
                            let mut mean_dh = 0.0f32;
                            let mut mean_dh_h = 0.0f32;
                            for j in 0..dim {
                                let dh = gr[j] * gv[j];
                                mean_dh += dh;
                                mean_dh_h += dh * hr[j];
                            }
                            mean_dh /= dim as f32;
                            mean_dh_h /= dim as f32;
                            for j in 0..dim {
                                let dh = gr[j] * gv[j];
                                d[r * dim + j] += rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                            }
                        }
                    });
                }
            }
            Op::Gelu(x) => {
                let vx = val(*x);
                add_into(&mut grads[x.idx()], g.len(), |d| {
                    for ((d, g), &e) in d.iter_mut().zip(g).zip(vx) {
                        *d += g * gelu(e).1;
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                add_into(&mut grads[x.idx()], g.len(), |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * y * (1.0 - y);
                    }
                });
            }
            Op::Cosine { a, b } => {
                let (va, vb) = (val(*a), val(*b));
                let dot: f32 = va.iter().zip(vb).map(|(x, y)| x * y).sum();
                let na = va.iter().map(|x| x * x).sum::<f32>().sqrt();
                let nb = vb.iter().map(|x| x * x).sum::<f32>().sqrt();
                let denom = na * nb + COSINE_EPS;
                // d/da [dot / (|a||b| + eps)] = b/denom - dot·|b|·a / (|a|·denom²)
                let grad_for = |own: &[f32], other: &[f32], n_own: f32, n_other: f32, d: &mut [f32]| {
                    let radial = if n_own > 0.0 {
                        dot * n_other / (n_own * denom * denom)
                    } else {
                        0.0
                    };
                    for ((d, o), s) in d.iter_mut().zip(other).zip(own) {
                        *d += g[0] * (o / denom - radial * s);
                    }
                };
                if want(*a) {
                    add_into(&mut grads[a.idx()], va.len(), |d| grad_for(va, vb, na, nb, d));
                }
                if want(*b) {
                    add_into(&mut grads[b.idx()], vb.len(), |d| grad_for(vb, va, nb, na, d));
                }
            }
            Op::RowNorms(x) => {
                let vx = val(*x);
                let norms = node.value.data();
                let dim = vx.len() / norms.len().max(1);
                add_into(&mut grads[x.idx()], vx.len(), |d| {
                    for (r, &n) in norms.iter().enumerate() {
                        if n > 0.0 {
                            for j in 0..dim {
                                d[r * dim + j] += g[r] * vx[r * dim + j] / n;
                            }
                        }
                    }
                });
            }
            Op::Gather { table, idx } => {
                scatter_rows(grads, *table, len(*table), idx, g);
            }
            Op::StraightThrough { x, table, idx } => {
                if want(*x) {
                    add_into(&mut grads[x.idx()], g.len(), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                }
                if want(*table) {
                    scatter_rows(grads, *table, len(*table), idx, g);
                }
            }
        }
    }
}

fn scatter_rows(grads: &mut [Option<Vec<f32>>], table: Var, table_len: usize, idx: &[usize], g: &[f32]) {
    let dim = g.len() / idx.len();
    add_into(&mut grads[table.idx()], table_len, |d| {
        for (r, &i) in idx.iter().enumerate() {
            for j in 0..dim {
                d[i * dim + j] += g[r * dim + j];
            }
        }
    });
}
