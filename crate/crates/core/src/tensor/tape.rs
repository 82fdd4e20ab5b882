//! Define-by-run reverse-mode tape.
//!
//! Every operation appends a node holding its output value and the data its
//! backward rule needs. Nodes only reference earlier nodes, so the tape order
//! is a topological order and `backward` walks it once in reverse.

use std::sync::Arc;

use super::kernels::{conv_backward, conv_forward, conv_output_extent, ConvGeometry};
use super::{matmul_dims, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::group::{SpatialPlan, ValidMask};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Selects which elements of an `[N, C, H, W]` pair enter a masked loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ElementMask {
    /// Spatial validity over `(H, W)`, broadcast over batch and channels.
    pub spatial: Option<ValidMask>,
    /// Per-channel selection; `None` keeps every channel.
    pub channels: Option<Vec<bool>>,
}

impl ElementMask {
    pub fn spatial(mask: ValidMask) -> Self {
        ElementMask {
            spatial: Some(mask),
            channels: None,
        }
    }
}

pub enum BatchNormMode<'a, T> {
    /// Normalize with batch statistics over `(N, H, W)`.
    Train { eps: T },
    /// Normalize with the supplied running statistics.
    Eval {
        running_mean: &'a [T],
        running_var: &'a [T],
        eps: T,
    },
}

/// Per-channel statistics of a training-mode batch norm, used to update the
/// running averages. `var` is the unbiased estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    WeightedSum(Vec<(Var, T)>),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu(Var),
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    GroupPool {
        x: Var,
        argmax: Vec<u32>,
    },
    GlobalAvgPool(Var),
    Narrow {
        x: Var,
        offset: usize,
    },
    Resample {
        x: Var,
        plan: Arc<SpatialPlan>,
    },
    Mse {
        a: Var,
        b: Var,
        dresid: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
    grad: Option<Tensor<T>>,
}

/// Records a computation for reverse-mode differentiation. A tape is built
/// per step and confined to the thread that records it.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn nchw(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        &[n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::shape(op, format!("expected NCHW, got {shape:?}"))),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds a leaf. Leaves with `requires_grad` receive a gradient from
    /// [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient populated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn check_finite(&self, v: Var, name: &str) -> Result<()> {
        self.value(v).check_finite(name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("add", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("sub", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x - *y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mul", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|x| *x * k).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, k), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.data().iter().copied().sum::<T>() / T::lit(va.len() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// `sum_i k_i * v_i` over same-shaped operands.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| Error::invalid("weighted_sum of zero terms"))?;
        let shape = self.shape(first).to_vec();
        let mut acc = vec![T::zero(); self.value(first).len()];
        for &(v, k) in terms {
            let val = self.value(v);
            if val.shape() != shape.as_slice() {
                return Err(Error::shape("weighted_sum", format!("{shape:?} vs {:?}", val.shape())));
            }
            acc.iter_mut().zip(val.data()).for_each(|(a, x)| *a += k * *x);
        }
        let rg = terms.iter().any(|(v, _)| self.rg(*v));
        Ok(self.push(Tensor::from_parts(shape, acc), Op::WeightedSum(terms.to_vec()), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `x . w^T + b` with `x: [N, I]`, `w: [O, I]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (xs, ws) = (vx.shape(), vw.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("linear", format!("input {xs:?}, weight {ws:?}")));
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * o];
        T::gemm(n, i, o, T::one(), vx.data(), false, vw.data(), true, T::zero(), &mut out);
        if let Some(b) = b {
            let vb = self.value(b);
            if vb.shape() != [o] {
                return Err(Error::shape("linear", format!("bias {:?} for {o} outputs", vb.shape())));
            }
            for row in out.chunks_mut(o) {
                row.iter_mut().zip(vb.data()).for_each(|(y, bb)| *y += *bb);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::from_parts(vec![n, o], out), Op::Linear { x, w, b }, rg))
    }

    /// Cross-correlation with zero padding. `w: [C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.c_out] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {} outputs", self.shape(b), geom.c_out),
                ));
            }
        }
        let out = conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let out = Tensor::from_parts(geom.out_shape().to_vec(), out);
        Ok(self.push(out, Op::Conv { x, w, b, geom }, rg))
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let [n, c, h, w] = nchw("batch_norm", self.shape(x))?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::shape("batch_norm", format!("parameter {:?} for {c} channels", self.shape(p))));
            }
        }
        let hw = h * w;
        let m = n * hw;
        let xv = self.value(x).data();
        let (mean, var, eps, train) = match mode {
            BatchNormMode::Train { eps } => {
                if n < 2 {
                    return Err(Error::invalid("batch norm in train mode needs a batch of at least 2"));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for img in 0..n {
                        let o = (img * c + ch) * hw;
                        s += xv[o..o + hw].iter().copied().sum::<T>();
                    }
                    let mu = s / T::lit(m as f64);
                    let mut sq = T::zero();
                    for img in 0..n {
                        let o = (img * c + ch) * hw;
                        sq += xv[o..o + hw].iter().map(|v| (*v - mu) * (*v - mu)).sum::<T>();
                    }
                    mean[ch] = mu;
                    var[ch] = sq / T::lit(m as f64);
                }
                (mean, var, eps, true)
            }
            BatchNormMode::Eval {
                running_mean,
                running_var,
                eps,
            } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(Error::shape("batch_norm", "running statistics length"));
                }
                (running_mean.to_vec(), running_var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let (g, bta) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for img in 0..n {
            for ch in 0..c {
                let o = (img * c + ch) * hw;
                for i in o..o + hw {
                    let xh = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = xh * g[ch] + bta[ch];
                }
            }
        }
        let stats = train.then(|| {
            let unbias = T::lit(m as f64 / (m - 1) as f64);
            BatchStats {
                mean: mean.clone(),
                var: var.iter().map(|v| *v * unbias).collect(),
            }
        });
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let out = Tensor::from_parts(vec![n, c, h, w], out);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        );
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| if *v > T::zero() { *v } else { T::zero() }).collect();
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Unpadded max pooling with a square window. Ties route to the first
    /// maximal element in row-major window order.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let [n, c, h, w] = nchw("max_pool2d", self.shape(x))?;
        let (Some(oh), Some(ow)) = (conv_output_extent(h, k, stride, 0), conv_output_extent(w, k, stride, 0)) else {
            return Err(Error::shape("max_pool2d", format!("window {k} stride {stride} on {h}x{w}")));
        };
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * stride * w + j * stride;
                    for di in 0..k {
                        for dj in 0..k {
                            let idx = base + (i * stride + di) * w + j * stride + dj;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    let o = (plane * oh + i) * ow + j;
                    out[o] = xv[best];
                    argmax[o] = best as u32;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![n, c, oh, ow], out), Op::MaxPool { x, argmax }, rg))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = nchw("global_avg_pool", self.shape(x))?;
        let hw = h * w;
        let inv = T::one() / T::lit(hw as f64);
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![n, c], data), Op::GlobalAvgPool(x), rg))
    }

    /// Pixel-wise maximum over consecutive channel blocks. `blocks[j]` is the
    /// number of input channels pooled into output channel `j`. Ties route
    /// the gradient to the lowest channel index.
    pub fn group_pool(&mut self, x: Var, blocks: &[usize]) -> Result<Var> {
        let [n, c, h, w] = nchw("group_pool", self.shape(x))?;
        let total: usize = blocks.iter().sum();
        if total != c || blocks.contains(&0) {
            return Err(Error::shape(
                "group_pool",
                format!("layout covers {total} channels, input has {c}"),
            ));
        }
        let hw = h * w;
        let pooled = blocks.len();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * pooled * hw];
        let mut argmax = vec![0u32; out.len()];
        for img in 0..n {
            let mut ch0 = 0;
            for (j, &size) in blocks.iter().enumerate() {
                let dst = (img * pooled + j) * hw;
                let first = (img * c + ch0) * hw;
                out[dst..dst + hw].copy_from_slice(&xv[first..first + hw]);
                for p in 0..hw {
                    argmax[dst + p] = (first + p) as u32;
                }
                for ch in ch0 + 1..ch0 + size {
                    let src = (img * c + ch) * hw;
                    for p in 0..hw {
                        if xv[src + p] > out[dst + p] {
                            out[dst + p] = xv[src + p];
                            argmax[dst + p] = (src + p) as u32;
                        }
                    }
                }
                ch0 += size;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![n, pooled, h, w], out), Op::GroupPool { x, argmax }, rg))
    }

    /// Rows `start..start + len` of the leading dimension.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let out = vx.narrow(start, len)?;
        let offset = start * (vx.len() / vx.shape()[0]);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Narrow { x, offset }, rg))
    }

    /// Applies a spatial resampling plan to every `(H, W)` plane of `x`.
    pub fn resample(&mut self, x: Var, plan: Arc<SpatialPlan>) -> Result<Var> {
        let out = plan.apply(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Resample { x, plan }, rg))
    }

    /// Mean squared difference over the elements selected by `mask`.
    pub fn mse(&mut self, a: Var, b: Var, mask: Option<&ElementMask>) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mse", va, vb)?;
        let keep = element_keep(va.shape(), mask)?;
        let count = match &keep {
            Some(k) => k.iter().filter(|x| **x).count(),
            None => va.len(),
        };
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        let inv = T::one() / T::lit(count as f64);
        let two_inv = T::lit(2.0) * inv;
        let mut total = T::zero();
        let mut dresid = vec![T::zero(); va.len()];
        for (i, (x, y)) in va.data().iter().zip(vb.data()).enumerate() {
            if keep.as_ref().is_none_or(|k| k[i]) {
                let d = *x - *y;
                total += d * d;
                dresid[i] = d * two_inv;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(total * inv), Op::Mse { a, b, dresid }, rg))
    }

    /// Batch mean of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let &[n, k] = vl.shape() else {
            return Err(Error::shape("softmax_cross_entropy", format!("logits {:?}", vl.shape())));
        };
        if labels.len() != n {
            return Err(Error::shape("softmax_cross_entropy", format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for (r, row) in vl.data().chunks(k).enumerate() {
            let top = (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            let mx = row[top];
            // Sum of the non-maximal terms; ln_1p keeps tiny losses accurate.
            let mut rest = T::zero();
            for (j, (p, v)) in probs[r * k..(r + 1) * k].iter_mut().zip(row).enumerate() {
                *p = (*v - mx).exp();
                if j != top {
                    rest += *p;
                }
            }
            let z = T::one() + rest;
            for p in &mut probs[r * k..(r + 1) * k] {
                *p = *p / z;
            }
            loss += rest.ln_1p() - (row[labels[r]] - mx);
        }
        let loss = loss / T::lit(n as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Populates gradients of `loss` on every `requires_grad` leaf. Leaves
    /// not reachable from `loss` receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(dy);
                continue;
            }
            self.backprop(i, &dy, &mut grads);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let data = g.unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), data));
            }
        }
        Ok(())
    }

    fn backprop(&self, i: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let needs = |v: Var| nodes[v.0].requires_grad;
        // Accumulates `f(j)` into the gradient slot of `v` elementwise.
        let acc = |grads: &mut [Option<Vec<T>>], v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !needs(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
            f(slot);
        };

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += *d));
                acc(grads, *b, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += *d));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += *d));
                acc(grads, *b, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g -= *d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(grads, *a, &mut |g| {
                    for ((g, d), y) in g.iter_mut().zip(dy).zip(vb) {
                        *g += *d * *y;
                    }
                });
                acc(grads, *b, &mut |g| {
                    for ((g, d), x) in g.iter_mut().zip(dy).zip(va) {
                        *g += *d * *x;
                    }
                });
            }
            Op::Scale(a, k) => {
                acc(grads, *a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += *d * *k));
            }
            Op::Sum(a) => {
                let d = dy[0];
                acc(grads, *a, &mut |g| g.iter_mut().for_each(|g| *g += d));
            }
            Op::Mean(a) => {
                let d = dy[0] / T::lit(nodes[a.0].value.len() as f64);
                acc(grads, *a, &mut |g| g.iter_mut().for_each(|g| *g += d));
            }
            Op::WeightedSum(terms) => {
                for (v, k) in terms {
                    acc(grads, *v, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += *d * *k));
                }
            }
            Op::MatMul(a, b) => {
                let (m, k, n) = matmul_dims(nodes[a.0].value.shape(), nodes[b.0].value.shape()).expect("recorded shapes");
                // dA = dC . B^T, dB = A^T . dC
                acc(grads, *a, &mut |g| T::gemm(m, n, k, T::one(), dy, false, val(*b), true, T::one(), g));
                acc(grads, *b, &mut |g| T::gemm(k, m, n, T::one(), val(*a), true, dy, false, T::one(), g));
            }
            Op::Linear { x, w, b } => {
                let xs = nodes[x.0].value.shape();
                let (n, inp, o) = (xs[0], xs[1], nodes[w.0].value.shape()[0]);
                acc(grads, *x, &mut |g| T::gemm(n, o, inp, T::one(), dy, false, val(*w), false, T::one(), g));
                acc(grads, *w, &mut |g| T::gemm(o, n, inp, T::one(), dy, true, val(*x), false, T::one(), g));
                if let Some(b) = b {
                    acc(grads, *b, &mut |g| {
                        for row in dy.chunks(o) {
                            g.iter_mut().zip(row).for_each(|(g, d)| *g += *d);
                        }
                    });
                }
            }
            Op::Conv { x, w, b, geom } => {
                let cg = conv_backward(val(*x), val(*w), dy, geom, needs(*x));
                if let Some(dx) = &cg.dx {
                    acc(grads, *x, &mut |g| g.iter_mut().zip(dx).for_each(|(g, d)| *g += *d));
                }
                acc(grads, *w, &mut |g| g.iter_mut().zip(&cg.dw).for_each(|(g, d)| *g += *d));
                if let Some(b) = b {
                    acc(grads, *b, &mut |g| g.iter_mut().zip(&cg.db).for_each(|(g, d)| *g += *d));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let s = nodes[x.0].value.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let m = T::lit((n * hw) as f64);
                let gam = val(*gamma);
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for img in 0..n {
                    for ch in 0..c {
                        let o = (img * c + ch) * hw;
                        for p in o..o + hw {
                            sum_dy[ch] += dy[p];
                            sum_dy_xhat[ch] += dy[p] * xhat[p];
                        }
                    }
                }
                acc(grads, *gamma, &mut |g| g.iter_mut().zip(&sum_dy_xhat).for_each(|(g, d)| *g += *d));
                acc(grads, *beta, &mut |g| g.iter_mut().zip(&sum_dy).for_each(|(g, d)| *g += *d));
                acc(grads, *x, &mut |g| {
                    for img in 0..n {
                        for ch in 0..c {
                            let o = (img * c + ch) * hw;
                            let k = gam[ch] * inv_std[ch];
                            for p in o..o + hw {
                                if *train {
                                    g[p] += k * (dy[p] - (sum_dy[ch] + xhat[p] * sum_dy_xhat[ch]) / m);
                                } else {
                                    g[p] += k * dy[p];
                                }
                            }
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let out = nodes[i].value.data();
                acc(grads, *x, &mut |g| {
                    for ((g, d), y) in g.iter_mut().zip(dy).zip(out) {
                        if *y > T::zero() {
                            *g += *d;
                        }
                    }
                });
            }
            Op::MaxPool { x, argmax } | Op::GroupPool { x, argmax } => {
                acc(grads, *x, &mut |g| {
                    for (d, &src) in dy.iter().zip(argmax) {
                        g[src as usize] += *d;
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let s = nodes[x.0].value.shape();
                let hw = s[2] * s[3];
                let inv = T::one() / T::lit(hw as f64);
                acc(grads, *x, &mut |g| {
                    for (plane, d) in g.chunks_mut(hw).zip(dy) {
                        plane.iter_mut().for_each(|g| *g += *d * inv);
                    }
                });
            }
            Op::Narrow { x, offset } => {
                acc(grads, *x, &mut |g| {
                    g[*offset..*offset + dy.len()].iter_mut().zip(dy).for_each(|(g, d)| *g += *d);
                });
            }
            Op::Resample { x, plan } => {
                acc(grads, *x, &mut |g| plan.accumulate_transpose(dy, g));
            }
            Op::Mse { a, b, dresid } => {
                let d = dy[0];
                acc(grads, *a, &mut |g| g.iter_mut().zip(dresid).for_each(|(g, r)| *g += d * *r));
                acc(grads, *b, &mut |g| g.iter_mut().zip(dresid).for_each(|(g, r)| *g -= d * *r));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = probs.len() / labels.len();
                let scale = dy[0] / T::lit(labels.len() as f64);
                acc(grads, *logits, &mut |g| {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { T::one() } else { T::zero() };
                            g[r * k + j] += scale * (probs[r * k + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}

/// Expands a mask into a per-element keep flag for an `[N, C, H, W]` shape.
fn element_keep(shape: &[usize], mask: Option<&ElementMask>) -> Result<Option<Vec<bool>>> {
    let Some(mask) = mask else { return Ok(None) };
    if mask.spatial.is_none() && mask.channels.is_none() {
        return Ok(None);
    }
    let [n, c, h, w] = nchw("mse", shape)?;
    if let Some(s) = &mask.spatial {
        if s.height() != h || s.width() != w {
            return Err(Error::shape(
                "mse",
                format!("mask {}x{} for maps {h}x{w}", s.height(), s.width()),
            ));
        }
    }
    if let Some(ch) = &mask.channels {
        if ch.len() != c {
            return Err(Error::shape("mse", format!("channel mask of {} for {c} channels", ch.len())));
        }
    }
    let mut keep = Vec::with_capacity(n * c * h * w);
    for _ in 0..n {
        for ch in 0..c {
            let on = mask.channels.as_ref().is_none_or(|m| m[ch]);
            match &mask.spatial {
                Some(s) => keep.extend(s.bits().iter().map(|b| on && *b)),
                None => keep.extend(std::iter::repeat_n(on, h * w)),
            }
        }
    }
    Ok(Some(keep))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[0.5, -1.0, 2.0]));
        let l = tape.sum(x);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[2.0, -1.0]));
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, -2.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let l = tape.sum(x);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(y).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::<f64>::new();
        assert!(matches!(tape.backward(Var(0)), Err(Error::EmptyTape)));
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn mse_definition_and_empty_mask() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[1.0, 4.0]));
        let m = tape.mse(a, b, None).unwrap();
        assert_eq!(tape.value(m).item(), 2.0);
        let z = tape.mse(a, a, None).unwrap();
        assert_eq!(tape.value(z).item(), 0.0);

        let img = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let none = ElementMask::spatial(ValidMask::from_bits(2, 2, vec![false; 4]).unwrap());
        assert!(matches!(tape.mse(img, img, Some(&none)), Err(Error::EmptyMask)));
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::<f64>::zeros(&[1, 10]));
        let l = tape.softmax_cross_entropy(logits, &[3]).unwrap();
        assert!((tape.value(l).item() - 10f64.ln()).abs() < 1e-12);

        let mut sat = vec![0.0; 10];
        sat[4] = 1e6;
        let logits = tape.constant(t(&[1, 10], &sat));
        let l = tape.softmax_cross_entropy(logits, &[4]).unwrap();
        assert!(tape.value(l).item().abs() < 1e-12);
        assert!(matches!(
            tape.softmax_cross_entropy(logits, &[10]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn conv_all_ones() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[4.0; 4]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::<f32>::new();
        let data = Tensor::new(&[2, 1, 4, 5], crate::tensor::Fill::Uniform { seed: 1, low: -1.0, high: 1.0 }).unwrap();
        let x = tape.constant(data.clone());
        let w = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(tape.value(y), &data);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(tape.conv2d(x, w, None, 1, 0).is_err());
        let w = tape.constant(Tensor::zeros(&[1, 2, 5, 5]));
        assert!(tape.conv2d(x, w, None, 1, 0).is_err());
    }

    #[test]
    fn batch_norm_normalizes_and_gamma_zero() {
        // Two channels; channel values chosen to have mean 5, variance 4.
        let vals = [3.0, 7.0, 3.0, 7.0, 3.0, 7.0, 3.0, 7.0];
        let mut data = Vec::new();
        for img in 0..2 {
            for _ch in 0..2 {
                data.extend_from_slice(&vals[img * 4..img * 4 + 4]);
            }
        }
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 2, 2, 2], &data));
        let g = tape.constant(t(&[2], &[1.0, 1.0]));
        let b = tape.constant(t(&[2], &[0.0, 0.0]));
        let (y, stats) = tape.batch_norm(x, g, b, BatchNormMode::Train { eps: 0.0 }).unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![5.0, 5.0]);
        let out = tape.value(y).data();
        let mean: f64 = out.iter().sum::<f64>() / 16.0;
        let var: f64 = out.iter().map(|v| v * v).sum::<f64>() / 16.0 - mean * mean;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);

        let g0 = tape.constant(t(&[2], &[0.0, 0.0]));
        let b3 = tape.constant(t(&[2], &[3.0, -1.0]));
        let (y, _) = tape.batch_norm(x, g0, b3, BatchNormMode::Train { eps: 1e-5 }).unwrap();
        let out = tape.value(y).data();
        for img in 0..2 {
            assert!(out[img * 8..img * 8 + 4].iter().all(|v| *v == 3.0));
            assert!(out[img * 8 + 4..img * 8 + 8].iter().all(|v| *v == -1.0));
        }
    }

    #[test]
    fn batch_norm_train_needs_two_samples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let g = tape.constant(t(&[1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        assert!(tape.batch_norm(x, g, b, BatchNormMode::Train { eps: 1e-5 }).is_err());
    }

    #[test]
    fn eval_batch_norm_is_repeatable_affine_map() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(&[1, 2, 3, 3], crate::tensor::Fill::Normal { seed: 5, mean: 0.0, std: 2.0 }).unwrap());
        let g = tape.constant(Tensor::from_f64(&[2], &[1.5, 0.5]).unwrap());
        let b = tape.constant(Tensor::from_f64(&[2], &[0.1, -0.2]).unwrap());
        let (rm, rv) = ([0.3f32, -0.1], [2.0f32, 0.5]);
        let mode = || BatchNormMode::Eval { running_mean: &rm, running_var: &rv, eps: 1e-5 };
        let (y1, s1) = tape.batch_norm(x, g, b, mode()).unwrap();
        let (y2, _) = tape.batch_norm(x, g, b, mode()).unwrap();
        assert!(s1.is_none());
        assert_eq!(tape.value(y1), tape.value(y2));
    }

    #[test]
    fn group_pool_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 4, 1, 1], &[0.1, -2.0, 3.0, 0.0]));
        let y = tape.group_pool(x, &[4]).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0]);
        let id = tape.group_pool(x, &[1, 1, 1, 1]).unwrap();
        assert_eq!(tape.value(id), tape.value(x));
        assert!(tape.group_pool(x, &[2, 1]).is_err());
    }

    #[test]
    fn group_pool_ties_route_to_lowest_channel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[1, 3, 1, 1], &[1.0, 2.0, 2.0]));
        let y = tape.group_pool(x, &[3]).unwrap();
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn max_pool_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 2, 4], &[1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 8.0, 7.0]));
        let y = tape.max_pool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 8.0]);
    }
}
