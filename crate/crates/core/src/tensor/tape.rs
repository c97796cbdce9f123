//! Reverse-mode differentiation over an append-only operation record.
//!
//! Every operation evaluates eagerly and appends a node holding its value and
//! whatever it needs for the backward pass. Nodes are appended only after
//! their inputs exist, so the record is already in topological order and
//! [`Tape::backward`] is a single reverse sweep.

use std::sync::Arc;

use super::kernels::{self, ConvGeom, WarpJob};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Upsample2x(Var),
    Downsample2x(Var),
    Warp {
        input: Var,
        jobs: Arc<Vec<WarpJob<T>>>,
    },
    Overcomposite {
        input: Var,
        depth: usize,
    },
    Gather {
        input: Var,
        index: Arc<Vec<usize>>,
    },
    Sum(Var),
    MaskedL1 {
        pred: Var,
        target: Var,
        mask: Arc<Tensor<T>>,
        norm: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of executed operations.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    b.expect_shape(op, a.shape())
}

fn nchw<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::invalid(format!(
            "{op} expects an N x C x H x W tensor, got {:?}",
            t.shape()
        ))),
    }
}

fn add_into<T: Real>(slot: &mut Option<Tensor<T>>, shape: &[usize], delta: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.data_mut().iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => *slot = Some(Tensor::from_vec(shape, delta).expect("gradient shape")),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        if cfg!(debug_assertions) && inputs.iter().all(|v| self.nodes[v.0].value.all_finite()) {
            assert!(
                value.all_finite(),
                "non-finite output from finite inputs (node {})",
                self.nodes.len()
            );
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a value whose gradient is wanted.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let out = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { x * slope });
        self.push(out, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        });
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let parts: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat(&parts, axis)?;
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).narrow(axis, start, len)?;
        Ok(self.push(
            out,
            Op::Narrow {
                input: a,
                axis,
                start,
            },
            &[a],
        ))
    }

    /// 2D convolution with zero padding. `weight` is `O x C x k x k`, `bias`
    /// has `O` entries.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let [n, c, h, w] = nchw("conv2d", self.value(input))?;
        let [o, wc, k, k2] = nchw("conv2d weight", self.value(weight))?;
        if wc != c || k != k2 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                expected: vec![o, c, k, k],
                got: self.shape(weight).to_vec(),
            });
        }
        if stride == 0 || h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::invalid(format!(
                "conv2d: kernel {k} stride {stride} padding {padding} on {h}x{w}"
            )));
        }
        if let Some(b) = bias {
            self.value(b).expect_shape("conv2d bias", &[o])?;
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            o,
            k,
            stride,
            pad: padding,
        };
        let data = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let out = Tensor::from_vec(&[n, o, geom.out_h(), geom.out_w()], data)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &deps,
        ))
    }

    /// Doubles height and width: even samples copy the source, odd samples
    /// are the mean of their two neighbours (edge replicated).
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let [n, c, h, w] = nchw("upsample2x", self.value(a))?;
        let data = kernels::upsample2x_forward(n * c, h, w, self.value(a).data());
        let out = Tensor::from_vec(&[n, c, 2 * h, 2 * w], data)?;
        Ok(self.push(out, Op::Upsample2x(a), &[a]))
    }

    /// Keeps every second row and column, starting at index 0.
    pub fn downsample2x(&mut self, a: Var) -> Result<Var> {
        let [n, c, h, w] = nchw("downsample2x", self.value(a))?;
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    data.push(x[(p * h + 2 * y) * w + 2 * xx]);
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, oh, ow], data)?;
        Ok(self.push(out, Op::Downsample2x(a), &[a]))
    }

    pub(crate) fn warp(
        &mut self,
        input: Var,
        jobs: Arc<Vec<WarpJob<T>>>,
        out_n: usize,
        out_c: usize,
    ) -> Result<Var> {
        let [n, c, h, w] = nchw("warp", self.value(input))?;
        let first = jobs
            .first()
            .ok_or_else(|| Error::invalid("warp with no jobs"))?;
        let (oh, ow) = (first.plan.out_h, first.plan.out_w);
        for j in jobs.iter() {
            if j.src_n >= n
                || j.dst_n >= out_n
                || j.dst_c + c > out_c
                || j.plan.src_h != h
                || j.plan.src_w != w
                || j.plan.out_h != oh
                || j.plan.out_w != ow
            {
                return Err(Error::invalid(format!(
                    "warp job ({} -> {}, {}) inconsistent with input {:?}",
                    j.src_n,
                    j.dst_n,
                    j.dst_c,
                    self.shape(input)
                )));
            }
        }
        let x = self.value(input).data();
        let mut data = vec![T::zero(); out_n * out_c * oh * ow];
        for j in jobs.iter() {
            for ch in 0..c {
                let src = &x[(j.src_n * c + ch) * h * w..(j.src_n * c + ch + 1) * h * w];
                let off = (j.dst_n * out_c + j.dst_c + ch) * oh * ow;
                j.plan.apply_plane(src, &mut data[off..off + oh * ow]);
            }
        }
        let out = Tensor::from_vec(&[out_n, out_c, oh, ow], data)?;
        Ok(self.push(out, Op::Warp { input, jobs }, &[input]))
    }

    /// Closed-form overcompositing of `R x (D*4) x H x W` layered RGBA input
    /// (plane 0 farthest) into `R x 3 x H x W`.
    pub fn overcomposite(&mut self, input: Var, depth: usize) -> Result<Var> {
        let [r, dc, h, w] = nchw("overcomposite", self.value(input))?;
        if depth == 0 || dc != depth * 4 {
            return Err(Error::ShapeMismatch {
                op: "overcomposite",
                expected: vec![r, depth * 4, h, w],
                got: self.shape(input).to_vec(),
            });
        }
        let data = kernels::overcomposite_forward(r, depth, h * w, self.value(input).data());
        let out = Tensor::from_vec(&[r, 3, h, w], data)?;
        Ok(self.push(out, Op::Overcomposite { input, depth }, &[input]))
    }

    /// `out[i] = input[index[i]]` reshaped to `shape`.
    pub(crate) fn gather(&mut self, input: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let x = self.value(input).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= x.len()) {
            return Err(Error::invalid(format!("gather index {bad} out of range")));
        }
        let data = index.iter().map(|&i| x[i]).collect();
        let out = Tensor::from_vec(shape, data)?;
        Ok(self.push(out, Op::Gather { input, index }, &[input]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::from_f64(n as f64))
    }

    /// Mean absolute error over the elements selected by `mask`. The mask is
    /// `N x 1 x H x W` and broadcasts over the channels of `N x C x H x W`
    /// predictions. An all-zero mask yields zero loss.
    pub fn masked_l1(&mut self, pred: Var, target: Var, mask: &Tensor<T>) -> Result<Var> {
        same_shape("masked_l1", self.value(pred), self.value(target))?;
        let [n, c, h, w] = nchw("masked_l1", self.value(pred))?;
        mask.expect_shape("masked_l1 mask", &[n, 1, h, w])?;
        let weight = mask.sum() * T::from_f64(c as f64);
        let norm = if weight > T::zero() { weight } else { T::one() };
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let m = mask.data();
        let mut total = T::zero();
        for ni in 0..n {
            for ci in 0..c {
                for k in 0..h * w {
                    let i = (ni * c + ci) * h * w + k;
                    total += m[ni * h * w + k] * (p[i] - t[i]).abs();
                }
            }
        }
        let out = Tensor::scalar(total / norm);
        Ok(self.push(
            out,
            Op::MaskedL1 {
                pred,
                target,
                mask: Arc::new(mask.clone()),
                norm,
            },
            &[pred, target],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward (loss must be scalar)",
                expected: vec![],
                got: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            // intermediate gradients are dropped as soon as they are consumed
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, delta: Vec<T>| {
            if needs(v) {
                add_into(&mut grads[v.0], self.shape(v), delta);
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, gd.to_vec());
                send(*b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, gd.to_vec());
                send(*b, gd.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    send(*a, gd.iter().zip(bv).map(|(&g, &y)| g * y).collect());
                }
                if needs(*b) {
                    send(*b, gd.iter().zip(av).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Scale(a, f) => send(*a, gd.iter().map(|&x| x * *f).collect()),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                send(
                    *a,
                    gd.iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect(),
                );
            }
            Op::LeakyRelu(a, s) => {
                let x = self.value(*a).data();
                send(
                    *a,
                    gd.iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > T::zero() { g } else { g * *s })
                        .collect(),
                );
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                send(
                    *a,
                    gd.iter()
                        .zip(y)
                        .map(|(&g, &y)| g * y * (T::one() - y))
                        .collect(),
                );
            }
            Op::Concat { inputs, axis } => {
                let mut start = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if needs(v) {
                        let part = g.narrow(*axis, start, len).expect("concat grad");
                        send(v, part.into_vec());
                    }
                    start += len;
                }
            }
            Op::Reshape(a) => send(*a, gd.to_vec()),
            Op::Narrow { input, axis, start } => {
                let shape = self.shape(*input);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let n = shape[*axis];
                let len = g.shape()[*axis];
                let mut full = vec![T::zero(); shape.iter().product()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    full[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                send(*input, full);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (gi, gw, gb) = kernels::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    gd,
                    needs(*input),
                    needs(*weight),
                );
                if let Some(gi) = gi {
                    send(*input, gi);
                }
                if let Some(gw) = gw {
                    send(*weight, gw);
                }
                if let Some(b) = bias {
                    send(*b, gb);
                }
            }
            Op::Upsample2x(a) => {
                let s = self.shape(*a);
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                send(*a, kernels::upsample2x_backward(planes, h, w, gd));
            }
            Op::Downsample2x(a) => {
                let s = self.shape(*a);
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
                let mut full = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    for y in 0..oh {
                        for x in 0..ow {
                            full[(p * h + 2 * y) * w + 2 * x] = gd[(p * oh + y) * ow + x];
                        }
                    }
                }
                send(*a, full);
            }
            Op::Warp { input, jobs } => {
                let s = self.shape(*input);
                let (c, h, w) = (s[1], s[2], s[3]);
                let gs = g.shape();
                let (out_c, oh, ow) = (gs[1], gs[2], gs[3]);
                let mut full = vec![T::zero(); s.iter().product()];
                for j in jobs.iter() {
                    for ch in 0..c {
                        let off = (j.dst_n * out_c + j.dst_c + ch) * oh * ow;
                        let dst = (j.src_n * c + ch) * h * w;
                        j.plan
                            .adjoint_plane(&gd[off..off + oh * ow], &mut full[dst..dst + h * w]);
                    }
                }
                send(*input, full);
            }
            Op::Overcomposite { input, depth } => {
                let s = self.shape(*input);
                send(
                    *input,
                    kernels::overcomposite_backward(
                        s[0],
                        *depth,
                        s[2] * s[3],
                        self.value(*input).data(),
                        gd,
                    ),
                );
            }
            Op::Gather { input, index } => {
                let mut full = vec![T::zero(); self.value(*input).len()];
                for (&i, &gv) in index.iter().zip(gd) {
                    full[i] += gv;
                }
                send(*input, full);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                send(*a, vec![gd[0]; n]);
            }
            Op::MaskedL1 {
                pred,
                target,
                mask,
                norm,
            } => {
                let s = self.shape(*pred);
                let (c, hw) = (s[1], s[2] * s[3]);
                let p = self.value(*pred).data();
                let t = self.value(*target).data();
                let m = mask.data();
                let scale = gd[0] / *norm;
                let dp: Vec<T> = p
                    .iter()
                    .zip(t)
                    .enumerate()
                    .map(|(i, (&a, &b))| {
                        let mi = m[(i / (c * hw)) * hw + i % hw];
                        let sign = if a > b {
                            T::one()
                        } else if a < b {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        scale * mi * sign
                    })
                    .collect();
                if needs(*target) {
                    send(*target, dp.iter().map(|&x| -x).collect());
                }
                send(*pred, dp);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_fn(&[2, 3], |i| (i[0] + i[1]) as f64));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn sum_of_squares() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::ones(&[2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).item(), 0.5);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.leaf(Tensor::ones(&[2]));
        let x = tape.param(Tensor::ones(&[2]));
        let y = tape.mul(c, x).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert!(g.get(y).is_none());
        assert!(g.get(x).is_some());
    }

    #[test]
    fn concat_shape_and_mismatch() {
        let mut tape = Tape::<f32>::new();
        let parts: Vec<Var> = (0..4).map(|_| tape.leaf(Tensor::zeros(&[3, 5, 7]))).collect();
        let c = tape.concat(&parts, 0).unwrap();
        assert_eq!(tape.shape(c), &[12, 5, 7]);
        let odd = tape.leaf(Tensor::zeros(&[3, 4, 7]));
        assert!(tape.concat(&[parts[0], odd], 0).is_err());
        assert!(tape.add(parts[0], odd).is_err());
    }

    #[test]
    fn upsample_then_downsample_is_identity() {
        let mut tape = Tape::<f64>::new();
        let ramp = Tensor::from_fn(&[1, 2, 5, 6], |i| 0.3 * i[3] as f64 - 0.7 * i[2] as f64 + i[1] as f64);
        let x = tape.leaf(ramp.clone());
        let up = tape.upsample2x(x).unwrap();
        assert_eq!(tape.shape(up), &[1, 2, 10, 12]);
        let down = tape.downsample2x(up).unwrap();
        assert!(tape.value(down).max_abs_diff(&ramp) < 1e-6);
    }

    #[test]
    fn upsample_of_ramp_is_bilinear() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 1, 4, 4], |i| 2.0 * i[3] as f64 + i[2] as f64));
        let up = tape.upsample2x(x).unwrap();
        let v = tape.value(up);
        // interior samples lie on the ramp evaluated at half-integer positions
        for y in 0..7 {
            for x in 0..7 {
                let want = 2.0 * (x as f64 / 2.0) + y as f64 / 2.0;
                assert!((v.get(&[0, 0, y, x]) - want).abs() < 1e-12);
            }
        }
    }
}
