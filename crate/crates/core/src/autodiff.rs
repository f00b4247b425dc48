//! Reverse-mode differentiation over a linear tape.
//!
//! Every forward op appends one node whose inputs are earlier nodes, so the
//! tape is topologically ordered by construction. [`Tape::backward`] walks it
//! once in reverse and accumulates into per-node gradient buffers in tape
//! order, which makes gradients bit-reproducible.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Norm floor used by [`Tape::cosine_similarity`].
pub const COSINE_EPS: f64 = 1e-8;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        /// Per-sample im2col buffers, kept only when the kernel needs a gradient
        /// and the convolution is not a plain 1x1.
        cols: Vec<T>,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2 {
        input: Var,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    GlobalAvgPool {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    Sum {
        input: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Stack {
        inputs: Vec<Var>,
    },
    Cosine {
        u: Var,
        v: Var,
        norm_u: T,
        norm_v: T,
        clamped_u: bool,
        clamped_v: bool,
        raw: T,
    },
    NegLogSoftmax {
        logits: Var,
        target: usize,
        probs: Vec<T>,
    },
    WeightedBce {
        pred: Var,
        target: Vec<T>,
        beta: T,
        eps: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    degenerate_norms: usize,
}

fn check_finite<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn shape_err<T>(op: &'static str, detail: String) -> Result<T> {
    Err(Error::Shape { op, detail })
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        &[n, c, h, w] => Ok([n, c, h, w]),
        other => shape_err(op, format!("expected a rank-4 tensor, got {other:?}")),
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    input: &[T],
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
    col: &mut [T],
) {
    let plane = out_h * out_w;
    for c in 0..channels {
        for i in 0..kh {
            for j in 0..kw {
                let row = ((c * kh + i) * kw + j) * plane;
                let (lo, hi) = valid_cols(j, stride, padding, width, out_w);
                for oy in 0..out_h {
                    let y = (oy * stride + i) as isize - padding as isize;
                    let dst = &mut col[row + oy * out_w..row + (oy + 1) * out_w];
                    if y < 0 || y >= height as isize || lo >= hi {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &input[(c * height + y as usize) * width..][..width];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if stride == 1 {
                        let x0 = lo + j - padding;
                        dst[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                    } else {
                        for (ox, d) in dst[lo..hi].iter_mut().enumerate() {
                            *d = src[(lo + ox) * stride + j - padding];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    col: &[T],
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
    grad: &mut [T],
) {
    let plane = out_h * out_w;
    for c in 0..channels {
        for i in 0..kh {
            for j in 0..kw {
                let row = ((c * kh + i) * kw + j) * plane;
                let (lo, hi) = valid_cols(j, stride, padding, width, out_w);
                if lo >= hi {
                    continue;
                }
                for oy in 0..out_h {
                    let y = (oy * stride + i) as isize - padding as isize;
                    if y < 0 || y >= height as isize {
                        continue;
                    }
                    let dst = &mut grad[(c * height + y as usize) * width..][..width];
                    let src = &col[row + oy * out_w + lo..row + oy * out_w + hi];
                    if stride == 1 {
                        let x0 = lo + j - padding;
                        for (d, &g) in dst[x0..x0 + hi - lo].iter_mut().zip(src) {
                            *d = *d + g;
                        }
                    } else {
                        for (ox, &g) in src.iter().enumerate() {
                            let x = (lo + ox) * stride + j - padding;
                            dst[x] = dst[x] + g;
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `lo..hi` whose tap `j` lands inside the unpadded row.
fn valid_cols(j: usize, stride: usize, padding: usize, width: usize, out_w: usize) -> (usize, usize) {
    // ox * stride + j - padding in [0, width)
    let lo = padding.saturating_sub(j).div_ceil(stride);
    let hi = if width + padding > j {
        (width + padding - j).div_ceil(stride).min(out_w)
    } else {
        0
    };
    (lo.min(hi), hi)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            degenerate_norms: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Number of cosine similarities whose operand norm hit the floor.
    pub fn degenerate_norms(&self) -> usize {
        self.degenerate_norms
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        check_finite("leaf", &value)?;
        Ok(self.push(value, requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let [n, c, h, w] = dims4("conv2d", self.shape(input))?;
        let [f, kc, kh, kw] = dims4("conv2d", self.shape(kernel))?;
        if kc != c {
            return shape_err("conv2d", format!("input has {c} channels, kernel expects {kc}"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return shape_err("conv2d", format!("kernel extents must be odd, got {kh}x{kw}"));
        }
        if stride == 0 {
            return shape_err("conv2d", "stride must be at least 1".into());
        }
        if self.shape(bias) != [f] {
            return shape_err(
                "conv2d",
                format!("bias shape {:?} does not match {f} filters", self.shape(bias)),
            );
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return shape_err("conv2d", format!("kernel {kh}x{kw} larger than padded input"));
        }
        let out_h = (h + 2 * padding - kh) / stride + 1;
        let out_w = (w + 2 * padding - kw) / stride + 1;
        let plane = out_h * out_w;
        let patch = c * kh * kw;
        let pointwise = kh == 1 && kw == 1 && stride == 1 && padding == 0;
        let keep_cols = self.nodes[kernel.0].requires_grad && !pointwise;

        let mut out = vec![T::zero(); n * f * plane];
        let mut cols = if keep_cols {
            vec![T::zero(); n * patch * plane]
        } else {
            Vec::new()
        };
        let mut scratch = if pointwise || keep_cols {
            Vec::new()
        } else {
            vec![T::zero(); patch * plane]
        };
        {
            let x = self.nodes[input.0].value.data();
            let k = self.nodes[kernel.0].value.data();
            let b = self.nodes[bias.0].value.data();
            for s in 0..n {
                let sample = &x[s * c * h * w..(s + 1) * c * h * w];
                let col: &[T] = if pointwise {
                    sample
                } else {
                    let buf = if keep_cols {
                        &mut cols[s * patch * plane..(s + 1) * patch * plane]
                    } else {
                        &mut scratch[..]
                    };
                    im2col(sample, c, h, w, kh, kw, stride, padding, out_h, out_w, buf);
                    buf
                };
                let dst = &mut out[s * f * plane..(s + 1) * f * plane];
                for (fi, row) in dst.chunks_mut(plane).enumerate() {
                    row.fill(b[fi]);
                }
                T::gemm(f, patch, plane, k, false, col, false, dst, T::one());
            }
        }
        let value = Tensor::new(vec![n, f, out_h, out_w], out)?;
        check_finite("conv2d", &value)?;
        let rg = self.any_grad(&[input, kernel, bias]);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
                cols,
            },
        ))
    }

    /// 2x2 max pooling with stride 2; ties resolve to the first cell in
    /// row-major window order.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = dims4("maxpool2", self.shape(input))?;
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err("maxpool2", format!("spatial extent {h}x{w} is not even"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.nodes[input.0].value.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, rg, Op::MaxPool2 { input, argmax }))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = dims4("upsample2", self.shape(input))?;
        let x = self.nodes[input.0].value.data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            let src = &x[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                let row = &src[(y / 2) * w..(y / 2 + 1) * w];
                for (xo, d) in dst[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                    *d = row[xo / 2];
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, rg, Op::Upsample2 { input }))
    }

    fn map_unary(
        &mut self,
        input: Var,
        op_name: &'static str,
        f: impl Fn(T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let src = &self.nodes[input.0].value;
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect())?;
        check_finite(op_name, &value)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, rg, op))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.map_unary(input, "relu", |v| v.max(T::zero()), Op::Relu { input })
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.map_unary(input, "sigmoid", sigmoid, Op::Sigmoid { input })
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        self.map_unary(input, "scale", |v| v * factor, Op::Scale { input, factor })
    }

    /// Element-wise product. `b` may also be a per-pixel map `[N,1,H,W]`
    /// broadcast over the channels of a rank-4 `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b);
        let broadcast = match (sa.as_slice(), sb) {
            (x, y) if x == y => false,
            (&[n, _, h, w], &[n2, 1, h2, w2]) if n == n2 && h == h2 && w == w2 => true,
            _ => return shape_err("elementwise_mul", format!("{sa:?} * {sb:?}")),
        };
        let xa = self.nodes[a.0].value.data();
        let xb = self.nodes[b.0].value.data();
        let out: Vec<T> = if broadcast {
            let (c, hw) = (sa[1], sa[2] * sa[3]);
            xa.iter()
                .enumerate()
                .map(|(i, &v)| v * xb[(i / (c * hw)) * hw + i % hw])
                .collect()
        } else {
            xa.iter().zip(xb).map(|(&p, &q)| p * q).collect()
        };
        let value = Tensor::new(sa, out)?;
        check_finite("elementwise_mul", &value)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Mul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(
                "elementwise_add",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            );
        }
        let xa = self.nodes[a.0].value.data();
        let xb = self.nodes[b.0].value.data();
        let out = xa.iter().zip(xb).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        check_finite("elementwise_add", &value)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Add { a, b }))
    }

    /// Concatenates two `[N,C,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = dims4("concat_channels", self.shape(a))?;
        let [nb, cb, hb, wb] = dims4("concat_channels", self.shape(b))?;
        if (n, h, w) != (nb, hb, wb) {
            return shape_err(
                "concat_channels",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            );
        }
        let xa = self.nodes[a.0].value.data();
        let xb = self.nodes[b.0].value.data();
        let (la, lb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (la + lb));
        for s in 0..n {
            out.extend_from_slice(&xa[s * la..(s + 1) * la]);
            out.extend_from_slice(&xb[s * lb..(s + 1) * lb]);
        }
        let value = Tensor::new(vec![n, ca + cb, h, w], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Concat { a, b }))
    }

    /// Per-channel spatial mean: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = dims4("global_avg_pool", self.shape(input))?;
        let hw = h * w;
        let denom = T::of(hw as f64);
        let x = self.nodes[input.0].value.data();
        let out = x
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<T>() / denom)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, rg, Op::GlobalAvgPool { input }))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.nodes[input.0].value.clone().reshape(shape)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, rg, Op::Reshape { input }))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total = self.nodes[input.0].value.data().iter().copied().sum::<T>();
        let value = Tensor::scalar(total);
        check_finite("sum", &value)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, rg, Op::Sum { input }))
    }

    /// Mean of several same-shape tensors, summed in the given order.
    pub fn mean(&mut self, inputs: &[Var]) -> Result<Var> {
        let Some((&first, rest)) = inputs.split_first() else {
            return shape_err("mean", "no operands".into());
        };
        let mut acc = first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        if inputs.len() == 1 {
            return Ok(acc);
        }
        self.scale(acc, T::one() / T::of(inputs.len() as f64))
    }

    /// Stacks one-element tensors into a `[len]` vector.
    pub fn stack(&mut self, inputs: &[Var]) -> Result<Var> {
        let mut out = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let t = &self.nodes[v.0].value;
            if t.numel() != 1 {
                return shape_err("stack", format!("operand of shape {:?}", t.shape()));
            }
            out.push(t.data()[0]);
        }
        let value = Tensor::new(vec![inputs.len()], out)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            value,
            rg,
            Op::Stack {
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// Cosine similarity of two same-shape tensors, as a `[1]` tensor.
    ///
    /// Norms below [`COSINE_EPS`] are clamped to it and counted in
    /// [`Tape::degenerate_norms`]. The result is clamped to `[-1, 1]`.
    pub fn cosine_similarity(&mut self, u: Var, v: Var) -> Result<Var> {
        if self.shape(u) != self.shape(v) {
            return shape_err(
                "cosine_similarity",
                format!("{:?} vs {:?}", self.shape(u), self.shape(v)),
            );
        }
        let xu = self.nodes[u.0].value.data();
        let xv = self.nodes[v.0].value.data();
        let eps = T::of(COSINE_EPS);
        let dot: T = xu.iter().zip(xv).map(|(&a, &b)| a * b).sum();
        let nu_raw = xu.iter().map(|&a| a * a).sum::<T>().sqrt();
        let nv_raw = xv.iter().map(|&a| a * a).sum::<T>().sqrt();
        let (clamped_u, clamped_v) = (nu_raw < eps, nv_raw < eps);
        if clamped_u || clamped_v {
            self.degenerate_norms += 1;
            log::warn!("degenerate prototype: vector norm below {COSINE_EPS:e}");
        }
        let norm_u = nu_raw.max(eps);
        let norm_v = nv_raw.max(eps);
        let raw = dot / (norm_u * norm_v);
        let value = Tensor::scalar(raw.max(-T::one()).min(T::one()));
        check_finite("cosine_similarity", &value)?;
        let rg = self.any_grad(&[u, v]);
        Ok(self.push(
            value,
            rg,
            Op::Cosine {
                u,
                v,
                norm_u,
                norm_v,
                clamped_u,
                clamped_v,
                raw,
            },
        ))
    }

    /// `-log softmax(logits)[target]` for a rank-1 `logits`.
    pub fn neg_log_softmax(&mut self, logits: Var, target: usize) -> Result<Var> {
        let x = self.nodes[logits.0].value.data();
        if self.shape(logits).len() != 1 || target >= x.len() {
            return shape_err(
                "neg_log_softmax",
                format!("target {target} for logits {:?}", self.shape(logits)),
            );
        }
        let max = x.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        let probs: Vec<T> = exps.iter().map(|&e| e / total).collect();
        let loss = total.ln() + max - x[target];
        let value = Tensor::scalar(loss);
        check_finite("neg_log_softmax", &value)?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            value,
            rg,
            Op::NegLogSoftmax {
                logits,
                target,
                probs,
            },
        ))
    }

    /// Mean over elements of `-[beta * y * ln(p) + (1 - y) * ln(1 - p)]` with
    /// `p` clamped to `[eps, 1 - eps]`. `target` is a constant.
    pub fn weighted_bce(&mut self, pred: Var, target: &[T], beta: T, eps: T) -> Result<Var> {
        let p = self.nodes[pred.0].value.data();
        if p.len() != target.len() {
            return shape_err(
                "weighted_bce",
                format!("{} predictions vs {} targets", p.len(), target.len()),
            );
        }
        let hi = T::one() - eps;
        let total: T = p
            .iter()
            .zip(target)
            .map(|(&q, &y)| {
                let q = q.max(eps).min(hi);
                -(beta * y * q.ln() + (T::one() - y) * (T::one() - q).ln())
            })
            .sum();
        let value = Tensor::scalar(total / T::of(p.len() as f64));
        check_finite("weighted_bce", &value)?;
        let rg = self.any_grad(&[pred]);
        Ok(self.push(
            value,
            rg,
            Op::WeightedBce {
                pred,
                target: target.to_vec(),
                beta,
                eps,
            },
        ))
    }

    /// Hash of every discrete branch taken by the recorded ops (relu gates,
    /// pooling winners, clamps). Two evaluations with equal signatures lie on
    /// the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => {
                    for &v in self.nodes[input.0].value.data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool2 { argmax, .. } => argmax.hash(&mut h),
                Op::Cosine {
                    clamped_u,
                    clamped_v,
                    raw,
                    ..
                } => {
                    (clamped_u, clamped_v).hash(&mut h);
                    (raw.abs() > T::one()).hash(&mut h);
                }
                Op::WeightedBce { pred, eps, .. } => {
                    let hi = T::one() - *eps;
                    for &q in self.nodes[pred.0].value.data() {
                        (q < *eps, q > hi).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Back-propagates from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return shape_err(
                "backward",
                format!("loss must be a scalar, got shape {:?}", loss_node.value.shape()),
            );
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let len = |v: Var| self.nodes[v.0].value.numel();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
                cols,
            } => {
                let [n, c, h, w] = dims4("conv2d", self.shape(*input)).expect("checked");
                let [f, _, kh, kw] = dims4("conv2d", self.shape(*kernel)).expect("checked");
                let [_, _, out_h, out_w] = dims4("conv2d", node.value.shape()).expect("checked");
                let plane = out_h * out_w;
                let patch = c * kh * kw;
                let pointwise = kh == 1 && kw == 1 && *stride == 1 && *padding == 0;
                let x = self.nodes[input.0].value.data();
                let k = self.nodes[kernel.0].value.data();
                if self.wants(*bias) {
                    let gb = accumulate(&mut grads[bias.0], f);
                    for s in 0..n {
                        for fi in 0..f {
                            let row = &g[(s * f + fi) * plane..(s * f + fi + 1) * plane];
                            gb[fi] = gb[fi] + row.iter().copied().sum::<T>();
                        }
                    }
                }
                if self.wants(*kernel) {
                    let mut gk = grads[kernel.0].take().unwrap_or_else(|| vec![T::zero(); len(*kernel)]);
                    for s in 0..n {
                        let gs = &g[s * f * plane..(s + 1) * f * plane];
                        let col = if pointwise {
                            &x[s * c * h * w..(s + 1) * c * h * w]
                        } else {
                            &cols[s * patch * plane..(s + 1) * patch * plane]
                        };
                        T::gemm(f, plane, patch, gs, false, col, true, &mut gk, T::one());
                    }
                    grads[kernel.0] = Some(gk);
                }
                if self.wants(*input) {
                    let gx = accumulate(&mut grads[input.0], n * c * h * w);
                    let mut dcol = vec![T::zero(); patch * plane];
                    for s in 0..n {
                        let gs = &g[s * f * plane..(s + 1) * f * plane];
                        let gxs = &mut gx[s * c * h * w..(s + 1) * c * h * w];
                        if pointwise {
                            T::gemm(patch, f, plane, k, true, gs, false, gxs, T::one());
                        } else {
                            T::gemm(patch, f, plane, k, true, gs, false, &mut dcol, T::zero());
                            col2im(&dcol, c, h, w, kh, kw, *stride, *padding, out_h, out_w, gxs);
                        }
                    }
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if self.wants(*input) {
                    let gx = accumulate(&mut grads[input.0], len(*input));
                    for (&src, &gv) in argmax.iter().zip(g) {
                        gx[src] = gx[src] + gv;
                    }
                }
            }
            Op::Upsample2 { input } => {
                if self.wants(*input) {
                    let [n, c, h, w] = dims4("upsample2", self.shape(*input)).expect("checked");
                    let ow = 2 * w;
                    let gx = accumulate(&mut grads[input.0], n * c * h * w);
                    for plane in 0..n * c {
                        let src = &g[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                        let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                        for y in 0..2 * h {
                            for x in 0..ow {
                                let d = &mut dst[(y / 2) * w + x / 2];
                                *d = *d + src[y * ow + x];
                            }
                        }
                    }
                }
            }
            Op::Relu { input } => {
                if self.wants(*input) {
                    let x = self.nodes[input.0].value.data();
                    let gx = accumulate(&mut grads[input.0], x.len());
                    for ((d, &xv), &gv) in gx.iter_mut().zip(x).zip(g) {
                        if xv > T::zero() {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::Sigmoid { input } => {
                if self.wants(*input) {
                    let y = node.value.data();
                    let gx = accumulate(&mut grads[input.0], y.len());
                    for ((d, &yv), &gv) in gx.iter_mut().zip(y).zip(g) {
                        *d = *d + gv * yv * (T::one() - yv);
                    }
                }
            }
            Op::Scale { input, factor } => {
                if self.wants(*input) {
                    let gx = accumulate(&mut grads[input.0], g.len());
                    for (d, &gv) in gx.iter_mut().zip(g) {
                        *d = *d + gv * *factor;
                    }
                }
            }
            Op::Mul { a, b } => {
                let xa = self.nodes[a.0].value.data();
                let xb = self.nodes[b.0].value.data();
                let broadcast = xa.len() != xb.len();
                let sa = self.shape(*a);
                let idx_b = |i: usize| {
                    if broadcast {
                        let (c, hw) = (sa[1], sa[2] * sa[3]);
                        (i / (c * hw)) * hw + i % hw
                    } else {
                        i
                    }
                };
                if self.wants(*a) {
                    let ga = accumulate(&mut grads[a.0], xa.len());
                    for (i, (d, &gv)) in ga.iter_mut().zip(g).enumerate() {
                        *d = *d + gv * xb[idx_b(i)];
                    }
                }
                if self.wants(*b) {
                    let gb = accumulate(&mut grads[b.0], xb.len());
                    for (i, (&gv, &av)) in g.iter().zip(xa).enumerate() {
                        let j = idx_b(i);
                        gb[j] = gb[j] + gv * av;
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.wants(*v) {
                        let gv = accumulate(&mut grads[v.0], g.len());
                        for (d, &x) in gv.iter_mut().zip(g) {
                            *d = *d + x;
                        }
                    }
                }
            }
            Op::Concat { a, b } => {
                let [n, ca, h, w] = dims4("concat", self.shape(*a)).expect("checked");
                let cb = self.shape(*b)[1];
                let (la, lb) = (ca * h * w, cb * h * w);
                for s in 0..n {
                    let gs = &g[s * (la + lb)..(s + 1) * (la + lb)];
                    if self.wants(*a) {
                        let ga = accumulate(&mut grads[a.0], n * la);
                        for (d, &x) in ga[s * la..(s + 1) * la].iter_mut().zip(&gs[..la]) {
                            *d = *d + x;
                        }
                    }
                    if self.wants(*b) {
                        let gb = accumulate(&mut grads[b.0], n * lb);
                        for (d, &x) in gb[s * lb..(s + 1) * lb].iter_mut().zip(&gs[la..]) {
                            *d = *d + x;
                        }
                    }
                }
            }
            Op::GlobalAvgPool { input } => {
                if self.wants(*input) {
                    let [_, _, h, w] = dims4("gap", self.shape(*input)).expect("checked");
                    let hw = h * w;
                    let inv = T::one() / T::of(hw as f64);
                    let gx = accumulate(&mut grads[input.0], len(*input));
                    for (plane, &gv) in gx.chunks_mut(hw).zip(g) {
                        for d in plane {
                            *d = *d + gv * inv;
                        }
                    }
                }
            }
            Op::Reshape { input } => {
                if self.wants(*input) {
                    let gx = accumulate(&mut grads[input.0], g.len());
                    for (d, &x) in gx.iter_mut().zip(g) {
                        *d = *d + x;
                    }
                }
            }
            Op::Sum { input } => {
                if self.wants(*input) {
                    let gx = accumulate(&mut grads[input.0], len(*input));
                    for d in gx.iter_mut() {
                        *d = *d + g[0];
                    }
                }
            }
            Op::Stack { inputs } => {
                for (&v, &gv) in inputs.iter().zip(g) {
                    if self.wants(v) {
                        let d = accumulate(&mut grads[v.0], 1);
                        d[0] = d[0] + gv;
                    }
                }
            }
            Op::Cosine {
                u,
                v,
                norm_u,
                norm_v,
                clamped_u,
                clamped_v,
                raw,
            } => {
                let xu = self.nodes[u.0].value.data();
                let xv = self.nodes[v.0].value.data();
                let inv = T::one() / (*norm_u * *norm_v);
                // d/du [u.v / (|u| |v|)] = v / (|u||v|) - s u / |u|^2, with the
                // second term absent when |u| was clamped to a constant.
                for (this, other, norm, clamped) in
                    [(u, xv, norm_u, clamped_u), (v, xu, norm_v, clamped_v)]
                {
                    if !self.wants(*this) {
                        continue;
                    }
                    let own = self.nodes[this.0].value.data();
                    let radial = if *clamped {
                        T::zero()
                    } else {
                        *raw / (*norm * *norm)
                    };
                    let d = accumulate(&mut grads[this.0], own.len());
                    for ((dst, &o), &x) in d.iter_mut().zip(other).zip(own) {
                        *dst = *dst + g[0] * (o * inv - radial * x);
                    }
                }
            }
            Op::NegLogSoftmax {
                logits,
                target,
                probs,
            } => {
                if self.wants(*logits) {
                    let d = accumulate(&mut grads[logits.0], probs.len());
                    for (i, (dst, &p)) in d.iter_mut().zip(probs).enumerate() {
                        let onehot = if i == *target { T::one() } else { T::zero() };
                        *dst = *dst + g[0] * (p - onehot);
                    }
                }
            }
            Op::WeightedBce {
                pred,
                target,
                beta,
                eps,
            } => {
                if self.wants(*pred) {
                    let p = self.nodes[pred.0].value.data();
                    let inv_n = T::one() / T::of(p.len() as f64);
                    let hi = T::one() - *eps;
                    let d = accumulate(&mut grads[pred.0], p.len());
                    for ((dst, &q), &y) in d.iter_mut().zip(p).zip(target) {
                        if q < *eps || q > hi {
                            continue;
                        }
                        let dq = -*beta * y / q + (T::one() - y) / (T::one() - q);
                        *dst = *dst + g[0] * dq * inv_n;
                    }
                }
            }
        }
    }
}
