use crate::kernels::{self, Dims, GroupStats};
use crate::{ParamId, ParamStore, Scalar, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Var, k: usize, cols: Option<Vec<S>> },
    Linear { x: Var, w: Var, b: Var },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: GroupStats<S> },
    Silu(Var),
    Add(Var, Var),
    AddChannels { x: Var, e: Var },
    AvgPool(Var),
    Upsample(Var),
    Concat(Vec<Var>),
    Unshuffle(Var),
    Shuffle(Var),
    Attention { q: Var, k: Var, v: Var, probs: Vec<S> },
    Mse { pred: Var, target: Var },
    Mae { pred: Var, target: Var },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Records a forward computation so it can be differentiated.
///
/// With gradients disabled nothing needed only for the backward pass is
/// retained, and [`Graph::backward`] panics.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grad_enabled: bool,
    /// Reused im2col buffer when columns need not be kept for backward.
    scratch: Vec<S>,
}

const GN_EPS: f64 = 1e-5;

impl<S: Scalar> Graph<S> {
    pub fn new(grad_enabled: bool) -> Self {
        Self { nodes: Vec::new(), grad_enabled, scratch: Vec::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Moves the value out, leaving an empty tensor behind.
    pub fn take(&mut self, v: Var) -> Tensor<S> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, parents: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && (matches!(op, Op::Param(_)) || parents.iter().any(|p| self.nodes[p.0].requires_grad));
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input.
    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), &[])
    }

    /// Same-padded, stride-1 convolution. `x: [Ci, N, H, W]`, `w: [Co, Ci, k, k]`, `b: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let d = Dims::of(self.shape(x));
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be [Co, Ci, k, k]");
        assert_eq!(ws[1], d.c, "conv input channels");
        assert_eq!(ws[2], ws[3], "square kernels only");
        assert!(ws[2] % 2 == 1, "odd kernels only");
        let (co, k) = (ws[0], ws[2]);
        let rows = d.c * k * k;
        let keep = self.grad_enabled && [x, w, b].iter().any(|v| self.nodes[v.0].requires_grad);
        let value;
        let mut cols = None;
        if k == 1 {
            value = kernels::affine_rows(self.value(w).data(), self.value(b).data(), self.value(x).data(), co, rows, d.plane());
        } else {
            let mut buf = if keep { Vec::new() } else { std::mem::take(&mut self.scratch) };
            // im2col writes every element, so stale contents are harmless.
            buf.resize(rows * d.plane(), S::zero());
            kernels::im2col(self.value(x).data(), d, k, &mut buf);
            value = kernels::affine_rows(self.value(w).data(), self.value(b).data(), &buf, co, rows, d.plane());
            if keep {
                cols = Some(buf);
            } else {
                self.scratch = buf;
            }
        }
        let out = Tensor::from_vec(&[co, d.n, d.h, d.w], value);
        self.push(out, Op::Conv { x, w, b, k, cols }, &[x, w, b])
    }

    /// Channel projection: `x: [Ci, ...]`, `w: [Co, Ci]`, `b: [Co]` gives `[Co, ...]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        assert_eq!(ws.len(), 2, "linear weight must be [Co, Ci]");
        assert_eq!(ws[1], xs[0], "linear input features");
        let co = ws[0];
        let p: usize = xs[1..].iter().product();
        let y = kernels::affine_rows(self.value(w).data(), self.value(b).data(), self.value(x).data(), co, xs[0], p);
        let mut shape = xs;
        shape[0] = co;
        self.push(Tensor::from_vec(&shape, y), Op::Linear { x, w, b }, &[x, w, b])
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let d = Dims::of(self.shape(x));
        assert!(groups > 0 && d.c.is_multiple_of(groups), "{} channels not divisible into {groups} groups", d.c);
        let (y, stats) =
            kernels::group_norm(self.value(x).data(), d, groups, self.value(gamma).data(), self.value(beta).data(), S::lit(GN_EPS));
        let out = Tensor::from_vec(&d.shape(), y);
        self.push(out, Op::GroupNorm { x, gamma, beta, groups, stats }, &[x, gamma, beta])
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v / (S::one() + (-v).exp()));
        self.push(out, Op::Silu(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// Adds a per-(channel, image) offset `e: [C, N]` to `x: [C, N, H, W]`.
    pub fn add_channels(&mut self, x: Var, e: Var) -> Var {
        let d = Dims::of(self.shape(x));
        assert_eq!(self.shape(e), &[d.c, d.n], "channel offset shape");
        let hw = d.h * d.w;
        let mut out = self.value(x).clone();
        for (plane, &off) in out.data_mut().chunks_mut(hw).zip(self.value(e).data()) {
            for v in plane {
                *v = *v + off;
            }
        }
        self.push(out, Op::AddChannels { x, e }, &[x, e])
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let d = Dims::of(self.shape(x));
        assert!(d.h.is_multiple_of(2) && d.w.is_multiple_of(2), "pooling needs even spatial size");
        let y = kernels::avg_pool2(self.value(x).data(), d);
        self.push(Tensor::from_vec(&[d.c, d.n, d.h / 2, d.w / 2], y), Op::AvgPool(x), &[x])
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let d = Dims::of(self.shape(x));
        let y = kernels::upsample2(self.value(x).data(), d);
        self.push(Tensor::from_vec(&[d.c, d.n, d.h * 2, d.w * 2], y), Op::Upsample(x), &[x])
    }

    /// Concatenates along the leading (channel) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(&s[1..], tail.as_slice(), "concat trailing dims");
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        self.push(Tensor::from_vec(&shape, data), Op::Concat(parts.to_vec()), parts)
    }

    /// Space-to-depth by 2.
    pub fn pixel_unshuffle(&mut self, x: Var) -> Var {
        let d = Dims::of(self.shape(x));
        assert!(d.h.is_multiple_of(2) && d.w.is_multiple_of(2), "unshuffle needs even spatial size");
        let y = kernels::pixel_unshuffle(self.value(x).data(), d, false);
        self.push(Tensor::from_vec(&[4 * d.c, d.n, d.h / 2, d.w / 2], y), Op::Unshuffle(x), &[x])
    }

    /// Depth-to-space by 2.
    pub fn pixel_shuffle(&mut self, x: Var) -> Var {
        let d = Dims::of(self.shape(x));
        assert!(d.c.is_multiple_of(4), "shuffle needs channels divisible by 4");
        let fine = Dims { c: d.c / 4, n: d.n, h: d.h * 2, w: d.w * 2 };
        let y = kernels::pixel_unshuffle(self.value(x).data(), fine, true);
        self.push(Tensor::from_vec(&fine.shape(), y), Op::Shuffle(x), &[x])
    }

    /// Per-image softmax attention over spatial positions. All inputs `[C, N, H, W]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Var {
        let d = Dims::of(self.shape(q));
        assert_eq!(self.shape(k), self.shape(q));
        assert_eq!(self.shape(v), self.shape(q));
        let (out, probs) = kernels::attention(self.value(q).data(), self.value(k).data(), self.value(v).data(), d.c, d.n, d.h * d.w);
        let probs = if self.grad_enabled { probs } else { Vec::new() };
        self.push(Tensor::from_vec(&d.shape(), out), Op::Attention { q, k, v, probs }, &[q, k, v])
    }

    /// Mean squared error, a scalar of shape `[1]`.
    pub fn mse(&mut self, pred: Var, target: Var) -> Var {
        assert_eq!(self.shape(pred), self.shape(target), "loss shapes");
        let n = S::from_usize(self.value(pred).len()).unwrap();
        let sum: S = self.value(pred).data().iter().zip(self.value(target).data()).map(|(&p, &t)| (p - t) * (p - t)).sum();
        self.push(Tensor::from_vec(&[1], vec![sum / n]), Op::Mse { pred, target }, &[pred, target])
    }

    /// Mean absolute error, a scalar of shape `[1]`.
    pub fn mae(&mut self, pred: Var, target: Var) -> Var {
        assert_eq!(self.shape(pred), self.shape(target), "loss shapes");
        let n = S::from_usize(self.value(pred).len()).unwrap();
        let sum: S = self.value(pred).data().iter().zip(self.value(target).data()).map(|(&p, &t)| (p - t).abs()).sum();
        self.push(Tensor::from_vec(&[1], vec![sum / n]), Op::Mae { pred, target }, &[pred, target])
    }

    /// Back-propagates from the scalar `loss`, adding parameter gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<S>) {
        assert!(self.grad_enabled, "backward on a graph built without gradients");
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let dst = store.grad_mut(*id).data_mut();
                    for (a, b) in dst.iter_mut().zip(&g) {
                        *a = *a + *b;
                    }
                }
                Op::Conv { x, w, b, k, cols } => {
                    let d = Dims::of(self.shape(*x));
                    let co = self.shape(*w)[0];
                    let rows = d.c * k * k;
                    let src = match cols {
                        Some(c) => c.as_slice(),
                        None => self.value(*x).data(),
                    };
                    let mut dw = self.wants(*w).then(|| vec![S::zero(); co * rows]);
                    let mut db = self.wants(*b).then(|| vec![S::zero(); co]);
                    let dcols = kernels::affine_rows_backward(
                        self.value(*w).data(),
                        src,
                        &g,
                        co,
                        rows,
                        d.plane(),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                        self.wants(*x),
                    );
                    if let Some(dc) = dcols {
                        let dx = if *k == 1 {
                            dc
                        } else {
                            let mut dx = vec![S::zero(); d.c * d.plane()];
                            kernels::col2im(&dc, d, *k, &mut dx);
                            dx
                        };
                        accumulate(&mut grads, *x, dx);
                    }
                    if let Some(dw) = dw {
                        accumulate(&mut grads, *w, dw);
                    }
                    if let Some(db) = db {
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Linear { x, w, b } => {
                    let xs = self.shape(*x);
                    let ci = xs[0];
                    let p: usize = xs[1..].iter().product();
                    let co = self.shape(*w)[0];
                    let mut dw = self.wants(*w).then(|| vec![S::zero(); co * ci]);
                    let mut db = self.wants(*b).then(|| vec![S::zero(); co]);
                    let dx = kernels::affine_rows_backward(
                        self.value(*w).data(),
                        self.value(*x).data(),
                        &g,
                        co,
                        ci,
                        p,
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                        self.wants(*x),
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    if let Some(dw) = dw {
                        accumulate(&mut grads, *w, dw);
                    }
                    if let Some(db) = db {
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::GroupNorm { x, gamma, beta, groups, stats } => {
                    let d = Dims::of(self.shape(*x));
                    let mut dg = self.wants(*gamma).then(|| vec![S::zero(); d.c]);
                    let mut dbe = self.wants(*beta).then(|| vec![S::zero(); d.c]);
                    let dx = kernels::group_norm_backward(
                        self.value(*x).data(),
                        &g,
                        d,
                        *groups,
                        self.value(*gamma).data(),
                        stats,
                        dg.as_deref_mut(),
                        dbe.as_deref_mut(),
                        self.wants(*x),
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    if let Some(dg) = dg {
                        accumulate(&mut grads, *gamma, dg);
                    }
                    if let Some(db) = dbe {
                        accumulate(&mut grads, *beta, db);
                    }
                }
                Op::Silu(x) => {
                    let dx = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&v, &gy)| {
                            let s = S::one() / (S::one() + (-v).exp());
                            gy * s * (S::one() + v * (S::one() - s))
                        })
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    if self.wants(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.wants(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::AddChannels { x, e } => {
                    if self.wants(*e) {
                        let d = Dims::of(self.shape(*x));
                        let de = g.chunks(d.h * d.w).map(|c| c.iter().copied().sum::<S>()).collect();
                        accumulate(&mut grads, *e, de);
                    }
                    if self.wants(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::AvgPool(x) => {
                    let dx = kernels::avg_pool2_backward(&g, Dims::of(self.shape(*x)));
                    accumulate(&mut grads, *x, dx);
                }
                Op::Upsample(x) => {
                    let dx = kernels::upsample2_backward(&g, Dims::of(self.shape(*x)));
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        if self.wants(p) {
                            accumulate(&mut grads, p, g[off..off + len].to_vec());
                        }
                        off += len;
                    }
                }
                Op::Unshuffle(x) => {
                    let d = Dims::of(self.shape(*x));
                    accumulate(&mut grads, *x, kernels::pixel_unshuffle(&g, d, true));
                }
                Op::Shuffle(x) => {
                    let d = Dims::of(node.value.shape());
                    accumulate(&mut grads, *x, kernels::pixel_unshuffle(&g, d, false));
                }
                Op::Attention { q, k, v, probs } => {
                    let d = Dims::of(self.shape(*q));
                    let (dq, dk, dv) = kernels::attention_backward(
                        self.value(*q).data(),
                        self.value(*k).data(),
                        self.value(*v).data(),
                        probs,
                        &g,
                        d.c,
                        d.n,
                        d.h * d.w,
                    );
                    for (var, grad) in [(*q, dq), (*k, dk), (*v, dv)] {
                        if self.wants(var) {
                            accumulate(&mut grads, var, grad);
                        }
                    }
                }
                Op::Mse { pred, target } => {
                    let n = S::from_usize(self.value(*pred).len()).unwrap();
                    let k = S::lit(2.0) * g[0] / n;
                    let diff: Vec<S> =
                        self.value(*pred).data().iter().zip(self.value(*target).data()).map(|(&p, &t)| (p - t) * k).collect();
                    if self.wants(*target) {
                        accumulate(&mut grads, *target, diff.iter().map(|&v| -v).collect());
                    }
                    if self.wants(*pred) {
                        accumulate(&mut grads, *pred, diff);
                    }
                }
                Op::Mae { pred, target } => {
                    let n = S::from_usize(self.value(*pred).len()).unwrap();
                    let k = g[0] / n;
                    let sign = |v: S| {
                        if v > S::zero() {
                            k
                        } else if v < S::zero() {
                            -k
                        } else {
                            S::zero()
                        }
                    };
                    let diff: Vec<S> =
                        self.value(*pred).data().iter().zip(self.value(*target).data()).map(|(&p, &t)| sign(p - t)).collect();
                    if self.wants(*target) {
                        accumulate(&mut grads, *target, diff.iter().map(|&v| -v).collect());
                    }
                    if self.wants(*pred) {
                        accumulate(&mut grads, *pred, diff);
                    }
                }
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, delta: Vec<S>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(&delta) {
                *a = *a + *b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}
