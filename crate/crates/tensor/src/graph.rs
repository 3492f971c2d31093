//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied to its [`Var`]s. Values are computed
//! eagerly; [`Graph::backward`] walks the tape in reverse and returns the
//! gradients of all leaves that require them. Graphs are cheap and meant to
//! be rebuilt for every forward pass.

use std::cell::{Ref, RefCell};
use std::collections::HashSet;

use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::real::{gemm, Real};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MulScalarVar(Var, Var),
    DivScalarVar(Var, Var),
    ClampMin(Var, T),
    Square(Var),
    Abs(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Tanh(Var),
    Softplus(Var),
    LeakyRelu(Var, T),
    Sum(Var),
    Mean(Var),
    SumPerSample(Var),
    MeanSpatial(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    AvgPool {
        x: Var,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Upsample2x(Var),
    ConcatChannels(Var, Var),
    ConcatBatch(Var, Var),
    SliceBatch {
        x: Var,
        start: usize,
    },
    InstanceNorm {
        x: Var,
        eps: T,
    },
    ChannelAffine {
        x: Var,
        scale: Option<Var>,
        shift: Option<Var>,
    },
    Blur {
        x: Var,
        kernel: Vec<T>,
    },
    MatMul(Var, Var),
    Transpose(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Gram(Var),
    SpatialDiff {
        x: Var,
        axis: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<(u64, ParamId)>,
}

pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
    frozen: RefCell<HashSet<u64>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the leaves of one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<Option<(u64, ParamId)>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Per-parameter gradients for `store`, summed over every leaf bound
    /// from it. `None` where the parameter did not take part.
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        let mut out: Vec<Option<Tensor<T>>> = vec![None; store.len()];
        for (g, p) in self.grads.iter().zip(&self.params) {
            if let (Some(g), Some((uid, id))) = (g, p) {
                if *uid == store.uid() {
                    match &mut out[id.0] {
                        Some(acc) => acc.add_assign(g),
                        slot => *slot = Some(g.clone()),
                    }
                }
            }
        }
        out
    }
}

fn nchw(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected NCHW tensor, got shape {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            frozen: RefCell::new(HashSet::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Parameters bound from `store` after this call are constants.
    pub fn freeze(&self, store: &ParamStore<T>) {
        self.frozen.borrow_mut().insert(store.uid());
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> T {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// Leaf without gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by `backward`.
    pub fn variable(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a parameter as a leaf. Frozen stores and non-trainable buffers
    /// produce constants.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        let entry = store.entry(id);
        let needs = entry.trainable && !self.frozen.borrow().contains(&store.uid());
        let v = self.push(entry.value.clone(), Op::Leaf, needs);
        self.nodes.borrow_mut()[v.0].param = Some((store.uid(), id));
        v
    }

    fn unary(&self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(a).map(f);
        let ng = self.ng(&[a]);
        self.push(value, op, ng)
    }

    fn binary(&self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
            va.zip_map(&vb, f)
        };
        let ng = self.ng(&[a, b]);
        self.push(value, op, ng)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&self, a: Var, c: T) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    /// `a * s` for a one-element `s`.
    pub fn mul_scalar_var(&self, a: Var, s: Var) -> Var {
        let sv = self.item(s);
        let value = self.value(a).scale(sv);
        let ng = self.ng(&[a, s]);
        self.push(value, Op::MulScalarVar(a, s), ng)
    }

    /// `a / s` for a one-element `s`.
    pub fn div_scalar_var(&self, a: Var, s: Var) -> Var {
        let sv = self.item(s);
        let value = self.value(a).map(|x| x / sv);
        let ng = self.ng(&[a, s]);
        self.push(value, Op::DivScalarVar(a, s), ng)
    }

    pub fn clamp_min(&self, a: Var, lo: T) -> Var {
        self.unary(a, Op::ClampMin(a, lo), |x| x.max(lo))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), |x| x.abs())
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), |x| x.ln())
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), |x| x.sqrt())
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn leaky_relu(&self, a: Var, slope: T) -> Var {
        self.unary(
            a,
            Op::LeakyRelu(a, slope),
            move |x| if x > T::zero() { x } else { x * slope },
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        self.leaky_relu(a, T::zero())
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&self, a: Var) -> Var {
        let s = self.value(a).mean();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// `[N, ...] -> [N]`.
    pub fn sum_per_sample(&self, a: Var) -> Var {
        let value = {
            let v = self.value(a);
            let n = v.dim(0);
            let inner = v.numel() / n;
            Tensor::from_fn(&[n], |i| v.data()[i * inner..(i + 1) * inner].iter().copied().sum())
        };
        let ng = self.ng(&[a]);
        self.push(value, Op::SumPerSample(a), ng)
    }

    pub fn mean_per_sample(&self, a: Var) -> Var {
        let shape = self.shape(a);
        let inner = shape[1..].iter().product::<usize>();
        let s = self.sum_per_sample(a);
        self.scale(s, T::one() / T::lit(inner as f64))
    }

    /// Global average pooling, `[N,C,H,W] -> [N,C]`.
    pub fn mean_spatial(&self, a: Var) -> Var {
        let value = {
            let v = self.value(a);
            let (n, c, h, w) = nchw(v.shape());
            let hw = h * w;
            let inv = T::one() / T::lit(hw as f64);
            Tensor::from_fn(&[n, c], |p| {
                v.data()[p * hw..(p + 1) * hw].iter().copied().sum::<T>() * inv
            })
        };
        let ng = self.ng(&[a]);
        self.push(value, Op::MeanSpatial(a), ng)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshape(shape);
        let ng = self.ng(&[a]);
        self.push(value, Op::Reshape(a), ng)
    }

    /// 2-D convolution. `w` is `[Cout, Cin, k, k]`, `b` is `[Cout]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let value = {
            let (vx, vw) = (self.value(x), self.value(w));
            let (n, c, h, wd) = nchw(vx.shape());
            let (cout, cin, k, k2) = nchw(vw.shape());
            assert_eq!(cin, c, "conv2d: input has {c} channels, kernel expects {cin}");
            assert_eq!(k, k2, "conv2d: non-square kernel");
            let g = ConvGeom {
                n,
                c,
                h,
                w: wd,
                k,
                stride,
                pad,
            };
            let vb = b.map(|b| self.value(b));
            let out = kernels::conv2d_forward(vx.data(), vw.data(), vb.as_ref().map(|t| t.data()), cout, &g);
            let (ho, wo) = g.out_hw();
            Tensor::new(&[n, cout, ho, wo], out)
        };
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(value, Op::Conv2d { x, w, b, stride, pad }, ng)
    }

    pub fn avg_pool(&self, x: Var, k: usize, stride: usize, pad: usize) -> Var {
        let value = {
            let vx = self.value(x);
            let (n, c, h, w) = nchw(vx.shape());
            let g = ConvGeom {
                n,
                c,
                h,
                w,
                k,
                stride,
                pad,
            };
            let (ho, wo) = g.out_hw();
            Tensor::new(&[n, c, ho, wo], kernels::avg_pool_forward(vx.data(), &g))
        };
        let ng = self.ng(&[x]);
        self.push(value, Op::AvgPool { x, k, stride, pad }, ng)
    }

    pub fn upsample2x(&self, x: Var) -> Var {
        let value = {
            let vx = self.value(x);
            let (n, c, h, w) = nchw(vx.shape());
            Tensor::new(
                &[n, c, 2 * h, 2 * w],
                kernels::upsample2x_forward(vx.data(), n * c, h, w),
            )
        };
        let ng = self.ng(&[x]);
        self.push(value, Op::Upsample2x(x), ng)
    }

    pub fn concat_channels(&self, a: Var, b: Var) -> Var {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            let (n, ca, h, w) = nchw(va.shape());
            let (nb, cb, hb, wb) = nchw(vb.shape());
            assert_eq!((n, h, w), (nb, hb, wb), "concat_channels: shape mismatch");
            let (pa, pb) = (ca * h * w, cb * h * w);
            let mut data = Vec::with_capacity(n * (pa + pb));
            for i in 0..n {
                data.extend_from_slice(&va.data()[i * pa..(i + 1) * pa]);
                data.extend_from_slice(&vb.data()[i * pb..(i + 1) * pb]);
            }
            Tensor::new(&[n, ca + cb, h, w], data)
        };
        let ng = self.ng(&[a, b]);
        self.push(value, Op::ConcatChannels(a, b), ng)
    }

    pub fn concat_batch(&self, a: Var, b: Var) -> Var {
        let value = Tensor::concat_outer(&[&self.value(a), &self.value(b)]);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::ConcatBatch(a, b), ng)
    }

    pub fn slice_batch(&self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice_outer(start, len);
        let ng = self.ng(&[x]);
        self.push(value, Op::SliceBatch { x, start }, ng)
    }

    pub fn instance_norm(&self, x: Var, eps: T) -> Var {
        let value = {
            let vx = self.value(x);
            let (n, c, h, w) = nchw(vx.shape());
            Tensor::new(vx.shape(), kernels::instance_norm_forward(vx.data(), n * c, h * w, eps))
        };
        let ng = self.ng(&[x]);
        self.push(value, Op::InstanceNorm { x, eps }, ng)
    }

    /// `x * scale[c] + shift[c]` over an NCHW tensor.
    pub fn channel_affine(&self, x: Var, scale: Option<Var>, shift: Option<Var>) -> Var {
        let value = {
            let vx = self.value(x);
            let (n, c, h, w) = nchw(vx.shape());
            let hw = h * w;
            let sc = scale.map(|s| self.value(s).data().to_vec());
            let sh = shift.map(|s| self.value(s).data().to_vec());
            let mut out = vx.data().to_vec();
            for i in 0..n {
                for ch in 0..c {
                    let a = sc.as_ref().map(|s| s[ch]).unwrap_or_else(T::one);
                    let b = sh.as_ref().map(|s| s[ch]).unwrap_or_else(T::zero);
                    for v in &mut out[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                        *v = *v * a + b;
                    }
                }
            }
            Tensor::new(vx.shape(), out)
        };
        let mut deps = vec![x];
        deps.extend(scale);
        deps.extend(shift);
        let ng = self.ng(&deps);
        self.push(value, Op::ChannelAffine { x, scale, shift }, ng)
    }

    /// Separable valid-mode correlation with a 1-D `kernel` on both axes.
    pub fn blur(&self, x: Var, kernel: &[T]) -> Var {
        let value = {
            let vx = self.value(x);
            let (n, c, h, w) = nchw(vx.shape());
            let k = kernel.len();
            assert!(k <= h && k <= w, "blur kernel larger than image");
            Tensor::new(
                &[n, c, h - k + 1, w - k + 1],
                kernels::blur_forward(vx.data(), n * c, h, w, kernel),
            )
        };
        let ng = self.ng(&[x]);
        self.push(
            value,
            Op::Blur {
                x,
                kernel: kernel.to_vec(),
            },
            ng,
        )
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(&self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&self, a: Var) -> Var {
        let value = self.value(a).transpose2();
        let ng = self.ng(&[a]);
        self.push(value, Op::Transpose(a), ng)
    }

    /// `x [N,F] · wᵀ + b` with `w [O,F]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let value = {
            let (vx, vw) = (self.value(x), self.value(w));
            let (n, f) = (vx.dim(0), vx.dim(1));
            let o = vw.dim(0);
            assert_eq!(vw.dim(1), f, "linear: feature mismatch");
            let mut out = vec![T::zero(); n * o];
            if let Some(b) = b {
                let vb = self.value(b);
                for row in out.chunks_mut(o) {
                    row.copy_from_slice(vb.data());
                }
            }
            gemm(n, f, o, vx.data(), false, vw.data(), true, T::one(), &mut out);
            Tensor::new(&[n, o], out)
        };
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(value, Op::Linear { x, w, b }, ng)
    }

    /// Per-sample channel Gram matrices `[N,C,H,W] -> [N,C,C]`, normalized by `C·H·W`.
    pub fn gram(&self, x: Var) -> Var {
        let value = {
            let vx = self.value(x);
            let (n, c, h, w) = nchw(vx.shape());
            Tensor::new(&[n, c, c], kernels::gram_forward(vx.data(), n, c, h * w))
        };
        let ng = self.ng(&[x]);
        self.push(value, Op::Gram(x), ng)
    }

    /// Forward difference along height (`axis = 2`) or width (`axis = 3`):
    /// `out[.., i, j] = x[.., i+1, j] − x[.., i, j]` (resp. `j+1`).
    pub fn spatial_diff(&self, x: Var, axis: usize) -> Var {
        assert!(axis == 2 || axis == 3, "spatial_diff axis must be 2 or 3");
        let value = {
            let vx = self.value(x);
            let (n, c, h, w) = nchw(vx.shape());
            let d = vx.data();
            if axis == 2 {
                Tensor::from_fn(&[n, c, h - 1, w], |i| {
                    let (p, rest) = (i / ((h - 1) * w), i % ((h - 1) * w));
                    let base = p * h * w + rest;
                    d[base + w] - d[base]
                })
            } else {
                Tensor::from_fn(&[n, c, h, w - 1], |i| {
                    let (row, j) = (i / (w - 1), i % (w - 1));
                    let base = row * w + j;
                    d[base + 1] - d[base]
                })
            }
        };
        let ng = self.ng(&[x]);
        self.push(value, Op::SpatialDiff { x, axis }, ng)
    }

    /// Reverse pass from the one-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        if nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape()));
        }
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            backprop(&nodes, node, &g, &mut grads);
        }
        let params = nodes.iter().map(|n| n.param).collect();
        Gradients { grads, params }
    }
}

/// `ln(1 + e^x)`, as evaluated by [`Graph::softplus`].
pub fn softplus<T: Real>(x: T) -> T {
    // log(1 + e^x) without overflow
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn accumulate<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    if !nodes[v.0].needs_grad {
        return;
    }
    debug_assert_eq!(nodes[v.0].value.shape(), g.shape(), "gradient shape mismatch");
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn backprop<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let val = |v: Var| &nodes[v.0].value;
    let needs = |v: Var| nodes[v.0].needs_grad;
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            if needs(*b) {
                accumulate(nodes, grads, *b, g.scale(-T::one()));
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                accumulate(nodes, grads, *a, g.zip_map(val(*b), |g, y| g * y));
            }
            if needs(*b) {
                accumulate(nodes, grads, *b, g.zip_map(val(*a), |g, x| g * x));
            }
        }
        Op::Div(a, b) => {
            if needs(*a) {
                accumulate(nodes, grads, *a, g.zip_map(val(*b), |g, d| g / d));
            }
            if needs(*b) {
                // d(a/b)/db = -(a/b)/b
                let t = y.zip_map(val(*b), |q, d| q / d);
                accumulate(nodes, grads, *b, g.zip_map(&t, |g, t| -g * t));
            }
        }
        Op::Scale(a, c) => accumulate(nodes, grads, *a, g.scale(*c)),
        Op::AddScalar(a) => accumulate(nodes, grads, *a, g.clone()),
        Op::MulScalarVar(a, s) => {
            let sv = val(*s).item();
            if needs(*a) {
                accumulate(nodes, grads, *a, g.scale(sv));
            }
            if needs(*s) {
                accumulate(nodes, grads, *s, Tensor::scalar(g.dot(val(*a))));
            }
        }
        Op::DivScalarVar(a, s) => {
            let sv = val(*s).item();
            if needs(*a) {
                accumulate(nodes, grads, *a, g.map(|v| v / sv));
            }
            if needs(*s) {
                accumulate(nodes, grads, *s, Tensor::scalar(-g.dot(val(*a)) / (sv * sv)));
            }
        }
        Op::ClampMin(a, lo) => {
            let lo = *lo;
            accumulate(
                nodes,
                grads,
                *a,
                g.zip_map(val(*a), |g, x| if x > lo { g } else { T::zero() }),
            );
        }
        Op::Square(a) => {
            let two = T::lit(2.0);
            accumulate(nodes, grads, *a, g.zip_map(val(*a), |g, x| two * x * g));
        }
        Op::Abs(a) => {
            accumulate(
                nodes,
                grads,
                *a,
                g.zip_map(val(*a), |g, x| g * x.signum() * T::lit((x != T::zero()) as u8 as f64)),
            );
        }
        Op::Exp(a) => accumulate(nodes, grads, *a, g.zip_map(y, |g, e| g * e)),
        Op::Ln(a) => accumulate(nodes, grads, *a, g.zip_map(val(*a), |g, x| g / x)),
        Op::Sqrt(a) => accumulate(nodes, grads, *a, g.zip_map(y, |g, r| g / (T::lit(2.0) * r))),
        Op::Tanh(a) => accumulate(nodes, grads, *a, g.zip_map(y, |g, t| g * (T::one() - t * t))),
        Op::Softplus(a) => accumulate(nodes, grads, *a, g.zip_map(val(*a), |g, x| g * sigmoid(x))),
        Op::LeakyRelu(a, slope) => {
            let s = *slope;
            accumulate(
                nodes,
                grads,
                *a,
                g.zip_map(val(*a), |g, x| if x > T::zero() { g } else { g * s }),
            );
        }
        Op::Sum(a) => {
            let gv = g.item();
            accumulate(nodes, grads, *a, Tensor::full(val(*a).shape(), gv));
        }
        Op::Mean(a) => {
            let xa = val(*a);
            let gv = g.item() / T::lit(xa.numel() as f64);
            accumulate(nodes, grads, *a, Tensor::full(xa.shape(), gv));
        }
        Op::SumPerSample(a) => {
            let xa = val(*a);
            let n = xa.dim(0);
            let inner = xa.numel() / n;
            accumulate(nodes, grads, *a, Tensor::from_fn(xa.shape(), |i| g.data()[i / inner]));
        }
        Op::MeanSpatial(a) => {
            let xa = val(*a);
            let (_, _, h, w) = nchw(xa.shape());
            let hw = h * w;
            let inv = T::one() / T::lit(hw as f64);
            accumulate(
                nodes,
                grads,
                *a,
                Tensor::from_fn(xa.shape(), |i| g.data()[i / hw] * inv),
            );
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, g.clone().reshape(val(*a).shape())),
        Op::Conv2d { x, w, b, stride, pad } => {
            let (vx, vw) = (val(*x), val(*w));
            let (n, c, h, wd) = nchw(vx.shape());
            let (cout, _, k, _) = nchw(vw.shape());
            let geom = ConvGeom {
                n,
                c,
                h,
                w: wd,
                k,
                stride: *stride,
                pad: *pad,
            };
            let want_db = b.map(needs).unwrap_or(false);
            let (dx, dw, db) = kernels::conv2d_backward(
                vx.data(),
                vw.data(),
                g.data(),
                cout,
                &geom,
                needs(*x),
                needs(*w),
                want_db,
            );
            if let Some(dx) = dx {
                accumulate(nodes, grads, *x, Tensor::new(vx.shape(), dx));
            }
            if let Some(dw) = dw {
                accumulate(nodes, grads, *w, Tensor::new(vw.shape(), dw));
            }
            if let (Some(db), Some(b)) = (db, b) {
                accumulate(nodes, grads, *b, Tensor::new(&[cout], db));
            }
        }
        Op::AvgPool { x, k, stride, pad } => {
            let vx = val(*x);
            let (n, c, h, w) = nchw(vx.shape());
            let geom = ConvGeom {
                n,
                c,
                h,
                w,
                k: *k,
                stride: *stride,
                pad: *pad,
            };
            accumulate(
                nodes,
                grads,
                *x,
                Tensor::new(vx.shape(), kernels::avg_pool_backward(g.data(), &geom)),
            );
        }
        Op::Upsample2x(x) => {
            let vx = val(*x);
            let (n, c, h, w) = nchw(vx.shape());
            accumulate(
                nodes,
                grads,
                *x,
                Tensor::new(vx.shape(), kernels::upsample2x_backward(g.data(), n * c, h, w)),
            );
        }
        Op::ConcatChannels(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (n, ca, h, w) = nchw(va.shape());
            let cb = vb.dim(1);
            let (pa, pb) = (ca * h * w, cb * h * w);
            if needs(*a) {
                let mut d = Vec::with_capacity(n * pa);
                for i in 0..n {
                    d.extend_from_slice(&g.data()[i * (pa + pb)..i * (pa + pb) + pa]);
                }
                accumulate(nodes, grads, *a, Tensor::new(va.shape(), d));
            }
            if needs(*b) {
                let mut d = Vec::with_capacity(n * pb);
                for i in 0..n {
                    d.extend_from_slice(&g.data()[i * (pa + pb) + pa..(i + 1) * (pa + pb)]);
                }
                accumulate(nodes, grads, *b, Tensor::new(vb.shape(), d));
            }
        }
        Op::ConcatBatch(a, b) => {
            let na = val(*a).dim(0);
            let nb = val(*b).dim(0);
            if needs(*a) {
                accumulate(nodes, grads, *a, g.slice_outer(0, na));
            }
            if needs(*b) {
                accumulate(nodes, grads, *b, g.slice_outer(na, nb));
            }
        }
        Op::SliceBatch { x, start } => {
            let vx = val(*x);
            let inner = vx.numel() / vx.dim(0);
            let mut d = Tensor::zeros(vx.shape());
            d.data_mut()[start * inner..start * inner + g.numel()].copy_from_slice(g.data());
            accumulate(nodes, grads, *x, d);
        }
        Op::InstanceNorm { x, eps } => {
            let vx = val(*x);
            let (n, c, h, w) = nchw(vx.shape());
            let dx = kernels::instance_norm_backward(vx.data(), y.data(), g.data(), n * c, h * w, *eps);
            accumulate(nodes, grads, *x, Tensor::new(vx.shape(), dx));
        }
        Op::ChannelAffine { x, scale, shift } => {
            let vx = val(*x);
            let (n, c, h, w) = nchw(vx.shape());
            let hw = h * w;
            if needs(*x) {
                let d = match scale {
                    Some(s) => {
                        let sv = val(*s);
                        Tensor::from_fn(vx.shape(), |i| g.data()[i] * sv.data()[(i / hw) % c])
                    }
                    None => g.clone(),
                };
                accumulate(nodes, grads, *x, d);
            }
            if let Some(s) = scale.filter(|s| needs(*s)) {
                let mut d = vec![T::zero(); c];
                for i in 0..n * c * hw {
                    d[(i / hw) % c] += g.data()[i] * vx.data()[i];
                }
                accumulate(nodes, grads, s, Tensor::new(&[c], d));
            }
            if let Some(s) = shift.filter(|s| needs(*s)) {
                let mut d = vec![T::zero(); c];
                for i in 0..n * c * hw {
                    d[(i / hw) % c] += g.data()[i];
                }
                accumulate(nodes, grads, s, Tensor::new(&[c], d));
            }
        }
        Op::Blur { x, kernel } => {
            let vx = val(*x);
            let (n, c, h, w) = nchw(vx.shape());
            accumulate(
                nodes,
                grads,
                *x,
                Tensor::new(vx.shape(), kernels::blur_backward(g.data(), n * c, h, w, kernel)),
            );
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k, n) = (va.dim(0), va.dim(1), vb.dim(1));
            if needs(*a) {
                let mut d = vec![T::zero(); m * k];
                gemm(m, n, k, g.data(), false, vb.data(), true, T::zero(), &mut d);
                accumulate(nodes, grads, *a, Tensor::new(&[m, k], d));
            }
            if needs(*b) {
                let mut d = vec![T::zero(); k * n];
                gemm(k, m, n, va.data(), true, g.data(), false, T::zero(), &mut d);
                accumulate(nodes, grads, *b, Tensor::new(&[k, n], d));
            }
        }
        Op::Transpose(a) => accumulate(nodes, grads, *a, g.transpose2()),
        Op::Linear { x, w, b } => {
            let (vx, vw) = (val(*x), val(*w));
            let (n, f, o) = (vx.dim(0), vx.dim(1), vw.dim(0));
            if needs(*x) {
                let mut d = vec![T::zero(); n * f];
                gemm(n, o, f, g.data(), false, vw.data(), false, T::zero(), &mut d);
                accumulate(nodes, grads, *x, Tensor::new(&[n, f], d));
            }
            if needs(*w) {
                let mut d = vec![T::zero(); o * f];
                gemm(o, n, f, g.data(), true, vx.data(), false, T::zero(), &mut d);
                accumulate(nodes, grads, *w, Tensor::new(&[o, f], d));
            }
            if let Some(b) = b.filter(|b| needs(*b)) {
                let mut d = vec![T::zero(); o];
                for row in g.data().chunks(o) {
                    for (acc, &v) in d.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                accumulate(nodes, grads, b, Tensor::new(&[o], d));
            }
        }
        Op::Gram(x) => {
            let vx = val(*x);
            let (n, c, h, w) = nchw(vx.shape());
            accumulate(
                nodes,
                grads,
                *x,
                Tensor::new(vx.shape(), kernels::gram_backward(vx.data(), g.data(), n, c, h * w)),
            );
        }
        Op::SpatialDiff { x, axis } => {
            let vx = val(*x);
            let (_, _, h, w) = nchw(vx.shape());
            let mut d = Tensor::zeros(vx.shape());
            let dd = d.data_mut();
            if *axis == 2 {
                for (i, &gv) in g.data().iter().enumerate() {
                    let (p, rest) = (i / ((h - 1) * w), i % ((h - 1) * w));
                    let base = p * h * w + rest;
                    dd[base + w] += gv;
                    dd[base] -= gv;
                }
            } else {
                for (i, &gv) in g.data().iter().enumerate() {
                    let (row, j) = (i / (w - 1), i % (w - 1));
                    let base = row * w + j;
                    dd[base + 1] += gv;
                    dd[base] -= gv;
                }
            }
            accumulate(nodes, grads, *x, d);
        }
    }
}
