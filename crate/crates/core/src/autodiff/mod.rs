//! Tape-based reverse-mode automatic differentiation over [`Tensor4`].
//!
//! Operations are appended to a [`Graph`] as they execute, so the node list
//! is topologically ordered by construction. [`Graph::backward`] walks it
//! once in reverse and accumulates into the `grad` buffers of leaves that
//! were created with `requires_grad`.

pub mod gradcheck;
pub mod kernels;
pub mod reference;

use crate::error::{FpanError, Result};
use crate::tensor::{numel, Element, Shape, Tensor4};

use kernels::{ConvGeom, LayerNormCache};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    Concat(Vec<Var>),
    Add(Var, Var),
    Mul(Var, Var),
    BroadcastAdd(Var, Var),
    SoftmaxPositions(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: LayerNormCache<T>,
    },
    PixelShuffle(Var, usize),
    Matmul(Var, Var),
    Reshape(Var),
    Transpose(Var),
    L1 {
        pred: Var,
        target: Var,
        reduction: Reduction,
    },
    Sum(Var),
}

struct Node<T> {
    value: Tensor4<T>,
    op: Op<T>,
    /// True when some leaf upstream of this node requires a gradient.
    needs_grad: bool,
}

/// Summary of one [`Graph::backward`] pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackwardStats {
    /// Non-leaf operations whose backward rule ran.
    pub ops_visited: usize,
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Add an input or parameter. Gradients are tracked iff
    /// `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor4<T>) -> Var {
        let needs_grad = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, mut tensor: Tensor4<T>) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.grad = None;
        }
    }

    /// Move a node's tensor (with its gradient) out of the graph.
    pub fn take_leaf(&mut self, v: Var) -> Tensor4<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor4::zeros([0, 0, 0, 0]))
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Cross-correlation with zero padding. `weight` is `[cout, cin, kh, kw]`,
    /// `bias` is `[cout, 1, 1, 1]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, cin, h, w] = self.shape(input);
        let [cout, wcin, kh, kw] = self.shape(weight);
        if cin != wcin {
            return Err(FpanError::dim(format!(
                "conv2d: input has {cin} channels, weight expects {wcin}"
            )));
        }
        if stride == 0 {
            return Err(FpanError::usage("conv2d: stride must be >= 1"));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(FpanError::dim(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        if let Some(b) = bias {
            if numel(self.shape(b)) != cout {
                return Err(FpanError::dim(format!(
                    "conv2d: bias has {} elements, expected {cout}",
                    numel(self.shape(b))
                )));
            }
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            self.data(input),
            self.data(weight),
            bias.map(|b| self.data(b)),
            &geom,
        );
        let value = Tensor4::from_vec([n, cout, geom.ho, geom.wo], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let ng = self.ng(&deps);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            ng,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.ng(&[x]);
        self.push(value, Op::Relu(x), ng)
    }

    /// Concatenate along channels, in argument order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| FpanError::usage("concat_channels: no inputs"))?;
        let [n, _, h, w] = self.shape(first);
        let mut c_total = 0;
        for &x in xs {
            let [xn, xc, xh, xw] = self.shape(x);
            if (xn, xh, xw) != (n, h, w) {
                return Err(FpanError::dim(format!(
                    "concat_channels: {:?} incompatible with {:?}",
                    self.shape(x),
                    self.shape(first)
                )));
            }
            c_total += xc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * c_total * hw);
        for ni in 0..n {
            for &x in xs {
                let c = self.shape(x)[1];
                out.extend_from_slice(&self.data(x)[ni * c * hw..(ni + 1) * c * hw]);
            }
        }
        let value = Tensor4::from_vec([n, c_total, h, w], out)?;
        let ng = self.ng(xs);
        Ok(self.push(value, Op::Concat(xs.to_vec()), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(FpanError::dim(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let value = Tensor4::from_vec(self.shape(a), out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(FpanError::dim(format!(
                "mul: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let value = Tensor4::from_vec(self.shape(a), out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    /// `x [n, c, h, w] + v [n, c, 1, 1]`, replicating `v` over space.
    pub fn broadcast_add(&mut self, x: Var, v: Var) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if self.shape(v) != [n, c, 1, 1] {
            return Err(FpanError::dim(format!(
                "broadcast_add: {:?} cannot broadcast onto {:?}",
                self.shape(v),
                self.shape(x)
            )));
        }
        let hw = h * w;
        let vd = self.data(v);
        let out = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &e)| e + vd[i / hw])
            .collect();
        let value = Tensor4::from_vec([n, c, h, w], out)?;
        let ng = self.ng(&[x, v]);
        Ok(self.push(value, Op::BroadcastAdd(x, v), ng))
    }

    /// Per-sample softmax over the `h*w` positions of a single-channel map.
    pub fn softmax_positions(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if c != 1 {
            return Err(FpanError::dim(format!(
                "softmax_positions: expected one channel, got {c}"
            )));
        }
        let out = kernels::softmax_groups(self.data(x), h * w);
        let value = Tensor4::from_vec([n, 1, h, w], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::SoftmaxPositions(x), ng))
    }

    /// Per-sample normalization over channels of an `[n, c, 1, 1]` vector,
    /// followed by the affine map. `gamma`, `beta` hold `c` elements each.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if (h, w) != (1, 1) {
            return Err(FpanError::dim(format!(
                "layer_norm: expected [n, c, 1, 1], got {:?}",
                self.shape(x)
            )));
        }
        if numel(self.shape(gamma)) != c || numel(self.shape(beta)) != c {
            return Err(FpanError::dim("layer_norm: affine parameters must have c elements"));
        }
        let (out, cache) = kernels::layer_norm_forward(
            self.data(x),
            n,
            c,
            self.data(gamma),
            self.data(beta),
            T::from_f64_lossy(eps),
        );
        let value = Tensor4::from_vec([n, c, 1, 1], out)?;
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
            ng,
        ))
    }

    /// `[n, c*r*r, h, w] -> [n, c, r*h, r*w]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let shape = self.shape(x);
        let [n, c, h, w] = shape;
        if r == 0 || c % (r * r) != 0 {
            return Err(FpanError::dim(format!(
                "pixel_shuffle: {c} channels not divisible by {r}^2"
            )));
        }
        let out = kernels::pixel_shuffle_forward(self.data(x), shape, r);
        let value = Tensor4::from_vec([n, c / (r * r), h * r, w * r], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::PixelShuffle(x, r), ng))
    }

    /// Batched matrix product: `[n, 1, m, k] x [n, 1, k, p] -> [n, 1, m, p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [an, ac, m, k] = self.shape(a);
        let [bn, bc, k2, p] = self.shape(b);
        if ac != 1 || bc != 1 || an != bn {
            return Err(FpanError::dim(format!(
                "matmul: operands must be [n, 1, rows, cols], got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        if k != k2 {
            return Err(FpanError::dim(format!(
                "matmul: inner dimensions differ ({k} vs {k2})"
            )));
        }
        let out = kernels::batched_matmul(self.data(a), m, k, false, self.data(b), k, p, false, an);
        let value = Tensor4::from_vec([an, 1, m, p], out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Matmul(a, b), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(FpanError::dim(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.shape(x),
                shape
            )));
        }
        let value = Tensor4::from_vec(shape, self.data(x).to_vec())?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    /// Swap the last two axes of an `[n, 1, m, k]` tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let [n, c, m, k] = self.shape(x);
        if c != 1 {
            return Err(FpanError::dim("transpose: expected [n, 1, rows, cols]"));
        }
        let out = transpose_batched(self.data(x), n, m, k);
        let value = Tensor4::from_vec([n, 1, k, m], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::Transpose(x), ng))
    }

    /// Absolute-difference loss, averaged per element or summed.
    pub fn l1_loss(&mut self, pred: Var, target: Var, reduction: Reduction) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(FpanError::dim(format!(
                "l1_loss: {:?} vs {:?}",
                self.shape(pred),
                self.shape(target)
            )));
        }
        let total = kernels::compensated_sum(
            self.data(pred)
                .iter()
                .zip(self.data(target))
                .map(|(&p, &t)| (p - t).abs()),
        );
        let count = T::from_usize(self.value(pred).len().max(1)).unwrap();
        let v = match reduction {
            Reduction::Mean => total / count,
            Reduction::Sum => total,
        };
        let value = Tensor4::from_vec([1, 1, 1, 1], vec![v])?;
        let ng = self.ng(&[pred, target]);
        Ok(self.push(
            value,
            Op::L1 {
                pred,
                target,
                reduction,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = kernels::compensated_sum(self.data(x).iter().copied());
        let value = Tensor4::from_vec([1, 1, 1, 1], vec![total]).expect("scalar");
        let ng = self.ng(&[x]);
        self.push(value, Op::Sum(x), ng)
    }

    /// Reverse pass from a scalar. Leaf gradients accumulate (`+=`); the
    /// recorded operations stay in place, so calling this twice doubles them.
    pub fn backward(&mut self, loss: Var) -> Result<BackwardStats> {
        if self.value(loss).len() != 1 {
            return Err(FpanError::usage(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut ops_visited = 0;

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&gy);
                continue;
            }
            ops_visited += 1;
            for (input, g) in self.op_backward(i, &gy) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(g) {
                            *a = *a + b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(BackwardStats { ops_visited })
    }

    /// Gradients of node `i`'s inputs given its output gradient.
    fn op_backward(&self, i: usize, gy: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let gr = kernels::conv2d_backward(
                    self.data(*input),
                    self.data(*weight),
                    gy,
                    geom,
                    ng(*input),
                    ng(*weight),
                    bias.is_some_and(ng),
                );
                let mut out = Vec::new();
                if let Some(dx) = gr.dx {
                    out.push((*input, dx));
                }
                if let Some(dw) = gr.dw {
                    out.push((*weight, dw));
                }
                if let (Some(b), Some(db)) = (bias, gr.db) {
                    out.push((*b, db));
                }
                out
            }
            Op::Relu(x) => {
                let g = self
                    .data(*x)
                    .iter()
                    .zip(gy)
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                vec![(*x, g)]
            }
            Op::Concat(xs) => {
                let [n, c_total, h, w] = node.value.shape();
                let hw = h * w;
                let mut out = Vec::with_capacity(xs.len());
                let mut offset = 0;
                for &x in xs {
                    let c = self.shape(x)[1];
                    let mut g = Vec::with_capacity(n * c * hw);
                    for ni in 0..n {
                        let start = (ni * c_total + offset) * hw;
                        g.extend_from_slice(&gy[start..start + c * hw]);
                    }
                    offset += c;
                    out.push((x, g));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, gy.to_vec()), (*b, gy.to_vec())],
            Op::Mul(a, b) => {
                let ga = gy.iter().zip(self.data(*b)).map(|(&g, &v)| g * v).collect();
                let gb = gy.iter().zip(self.data(*a)).map(|(&g, &v)| g * v).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::BroadcastAdd(x, v) => {
                let [_, _, h, w] = node.value.shape();
                let gv = gy.chunks(h * w).map(|c| c.iter().copied().sum()).collect();
                vec![(*x, gy.to_vec()), (*v, gv)]
            }
            Op::SoftmaxPositions(x) => {
                let [_, _, h, w] = node.value.shape();
                vec![(*x, kernels::softmax_groups_backward(node.value.data(), gy, h * w))]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let [n, c, _, _] = node.value.shape();
                let (dx, dg, db) = kernels::layer_norm_backward(cache, self.data(*gamma), gy, n, c);
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::PixelShuffle(x, r) => {
                vec![(*x, kernels::pixel_unshuffle(gy, self.shape(*x), *r))]
            }
            Op::Matmul(a, b) => {
                let [n, _, m, k] = self.shape(*a);
                let p = self.shape(*b)[3];
                let mut out = Vec::new();
                if ng(*a) {
                    // ga = g [m, p] * b^T [p, k]
                    let ga = kernels::batched_matmul(gy, m, p, false, self.data(*b), k, p, true, n);
                    out.push((*a, ga));
                }
                if ng(*b) {
                    // gb = a^T [k, m] * g [m, p]
                    let gb = kernels::batched_matmul(self.data(*a), m, k, true, gy, m, p, false, n);
                    out.push((*b, gb));
                }
                out
            }
            Op::Reshape(x) => vec![(*x, gy.to_vec())],
            Op::Transpose(x) => {
                let [n, _, m, k] = self.shape(*x);
                // output is [n, 1, k, m]
                vec![(*x, transpose_batched(gy, n, k, m))]
            }
            Op::L1 {
                pred,
                target,
                reduction,
            } => {
                let scale = match reduction {
                    Reduction::Mean => gy[0] / T::from_usize(self.value(*pred).len().max(1)).unwrap(),
                    Reduction::Sum => gy[0],
                };
                let gp: Vec<T> = self
                    .data(*pred)
                    .iter()
                    .zip(self.data(*target))
                    .map(|(&p, &t)| {
                        if p > t {
                            scale
                        } else if p < t {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                let gt = gp.iter().map(|&g| -g).collect();
                vec![(*pred, gp), (*target, gt)]
            }
            Op::Sum(x) => vec![(*x, vec![gy[0]; self.value(*x).len()])],
        }
    }
}

fn transpose_batched<T: Element>(x: &[T], n: usize, m: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        let src = &x[b * m * k..(b + 1) * m * k];
        let dst = &mut out[b * m * k..(b + 1) * m * k];
        for i in 0..m {
            for j in 0..k {
                dst[j * m + i] = src[i * k + j];
            }
        }
    }
    out
}
