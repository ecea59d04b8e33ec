//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records one node per tracked operation. Each node keeps the ids
//! of its parents and a closure mapping the output gradient to parent
//! gradients; the closure owns (via `Rc`) exactly the forward values it needs.
//! Operations whose inputs are all untracked (images, detached maps) are not
//! recorded at all, so constants cost nothing beyond their forward value.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, gemm, ConvGeom, MatRef, ResizePlan};
use crate::tensor::{Real, Shape, Tensor};

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

/// A value on a tape. Cloning is cheap (reference-counted).
#[derive(Clone)]
pub struct Var<T = f32> {
    id: Option<usize>,
    value: Rc<Tensor<T>>,
}

impl<T: Real> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }
}

impl<T: Real> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value.shape())
            .finish()
    }
}

pub struct Tape<T = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients returned by [`Tape::backward`], indexed by variable.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        v.id.and_then(|i| self.grads[i].as_ref())
    }

    /// Gradient of `v`, or zeros when it did not influence the root.
    pub fn get_or_zeros(&self, v: &Var<T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, &b)| *a += b),
        None => *slot = Some(g),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            enabled: true,
        }
    }

    /// A tape that never records; every result is an untracked constant.
    pub fn inference() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf.
    pub fn leaf(&self, value: Tensor<T>) -> Var<T> {
        if !self.enabled {
            return self.constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: Vec::new(),
            backward: None,
        });
        Var {
            id: Some(nodes.len() - 1),
            value: Rc::new(value),
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var {
            id: None,
            value: Rc::new(value),
        }
    }

    /// Same value, cut from the graph.
    pub fn detach(&self, v: &Var<T>) -> Var<T> {
        Var {
            id: None,
            value: v.value.clone(),
        }
    }

    fn record(&self, value: Tensor<T>, parents: &[&Var<T>], backward: BackwardFn<T>) -> Var<T> {
        let tracked = self.enabled && parents.iter().any(|p| p.id.is_some());
        if !tracked {
            return self.constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        // Untracked parents get a sentinel so closures stay positionally aligned.
        let ids = parents.iter().map(|p| p.id.unwrap_or(usize::MAX)).collect();
        nodes.push(Node {
            parents: ids,
            backward: Some(backward),
        });
        Var {
            id: Some(nodes.len() - 1),
            value: Rc::new(value),
        }
    }

    /// Back-propagates from `root`, seeding its gradient with ones.
    pub fn backward(&self, root: &Var<T>) -> Grads<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root_id) = root.id else {
            return Grads { grads };
        };
        grads[root_id] = Some(Tensor::full(root.shape(), T::one()));
        for i in (0..=root_id).rev() {
            let node = &nodes[i];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[i].take() else { continue };
            let needs: Vec<bool> = node.parents.iter().map(|&p| p != usize::MAX).collect();
            for (slot, pg) in node.parents.iter().zip(backward(&g, &needs)) {
                if let (true, Some(pg)) = (*slot != usize::MAX, pg) {
                    accumulate(&mut grads[*slot], pg);
                }
            }
        }
        Grads { grads }
    }

    // ---- elementwise and broadcasting ------------------------------------

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.broadcast(a, b, BinOp::Add)
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.broadcast(a, b, BinOp::Sub)
    }

    /// Elementwise product; either side may broadcast along any unit axis.
    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.broadcast(a, b, BinOp::Mul)
    }

    fn broadcast(&self, a: &Var<T>, b: &Var<T>, op: BinOp) -> Result<Var<T>> {
        let (sa, sb) = (a.shape(), b.shape());
        let out_shape = Shape::new(
            bdim("channels", sa.c, sb.c)?,
            bdim("height", sa.h, sb.h)?,
            bdim("width", sa.w, sb.w)?,
        );
        let plan = Broadcast::new(sa, sb, out_shape);
        let (av, bv) = (a.value.clone(), b.value.clone());
        let out = if plan.same {
            av.data().iter().zip(bv.data()).map(|(&x, &y)| op.apply(x, y)).collect()
        } else {
            let mut out = vec![T::zero(); out_shape.numel()];
            plan.for_each(|o, i, j| {
                out[o] = op.apply(av.data()[i], bv.data()[j]);
            });
            out
        };
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.record(
            value,
            &[a, b],
            Box::new(move |g, needs| {
                if plan.same {
                    let gd = g.data();
                    let (ga, gb) = match op {
                        BinOp::Add => (needs[0].then(|| gd.to_vec()), needs[1].then(|| gd.to_vec())),
                        BinOp::Sub => (needs[0].then(|| gd.to_vec()), needs[1].then(|| gd.iter().map(|&v| -v).collect())),
                        BinOp::Mul => (
                            needs[0].then(|| gd.iter().zip(bv.data()).map(|(&v, &y)| v * y).collect()),
                            needs[1].then(|| gd.iter().zip(av.data()).map(|(&v, &x)| v * x).collect()),
                        ),
                    };
                    return vec![
                        ga.map(|d| Tensor::from_parts(sa, d)),
                        gb.map(|d| Tensor::from_parts(sb, d)),
                    ];
                }
                let mut ga = needs[0].then(|| vec![T::zero(); sa.numel()]);
                let mut gb = needs[1].then(|| vec![T::zero(); sb.numel()]);
                plan.for_each(|o, i, j| {
                    let go = g.data()[o];
                    let (da, db) = match op {
                        BinOp::Add => (go, go),
                        BinOp::Sub => (go, -go),
                        BinOp::Mul => (go * bv.data()[j], go * av.data()[i]),
                    };
                    if let Some(ga) = ga.as_mut() {
                        ga[i] += da;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[j] += db;
                    }
                });
                vec![
                    ga.map(|d| Tensor::from_parts(sa, d)),
                    gb.map(|d| Tensor::from_parts(sb, d)),
                ]
            }),
        ))
    }

    pub fn scale(&self, a: &Var<T>, s: T) -> Var<T> {
        let value = a.value.map(|v| v * s);
        self.record(
            value,
            &[a],
            Box::new(move |g, _| vec![Some(g.map(|v| v * s))]),
        )
    }

    pub fn abs(&self, a: &Var<T>) -> Var<T> {
        let av = a.value.clone();
        self.record(
            a.value.map(|v| v.abs()),
            &[a],
            Box::new(move |g, _| {
                let d = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&g, &x)| g * sign(x))
                    .collect();
                vec![Some(Tensor::from_parts(g.shape(), d))]
            }),
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self, a: &Var<T>) -> Var<T> {
        let av = a.value.clone();
        let th: Vec<T> = av.data().iter().map(|&x| tanh_via_exp(gelu_inner(x))).collect();
        let out = av
            .data()
            .iter()
            .zip(&th)
            .map(|(&x, &t)| T::lit(0.5) * x * (T::one() + t))
            .collect();
        self.record(
            Tensor::from_parts(av.shape(), out),
            &[a],
            Box::new(move |g, _| {
                let d = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .zip(&th)
                    .map(|((&g, &x), &t)| g * gelu_grad(x, t))
                    .collect();
                vec![Some(Tensor::from_parts(g.shape(), d))]
            }),
        )
    }

    /// Sum of all elements as a `(1,1,1)` scalar.
    pub fn sum(&self, a: &Var<T>) -> Var<T> {
        let shape = a.shape();
        self.record(
            Tensor::scalar(a.value.sum()),
            &[a],
            Box::new(move |g, _| vec![Some(Tensor::full(shape, g.item()))]),
        )
    }

    pub fn mean(&self, a: &Var<T>) -> Var<T> {
        let n = T::lit(a.value.len() as f64);
        let s = self.sum(a);
        self.scale(&s, T::one() / n)
    }

    // ---- structural ------------------------------------------------------

    pub fn concat_channels(&self, parts: &[&Var<T>]) -> Result<Var<T>> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let value = Tensor::concat_channels(&values)?;
        let bounds: Vec<(usize, usize)> = parts
            .iter()
            .scan(0, |c0, p| {
                let c = p.shape().c;
                *c0 += c;
                Some((*c0 - c, *c0))
            })
            .collect();
        Ok(self.record(
            value,
            parts,
            Box::new(move |g, needs| {
                bounds
                    .iter()
                    .zip(needs)
                    .map(|(&(c0, c1), &n)| n.then(|| g.slice_channels(c0, c1).expect("in range")))
                    .collect()
            }),
        ))
    }

    pub fn slice_channels(&self, a: &Var<T>, c0: usize, c1: usize) -> Result<Var<T>> {
        let value = a.value.slice_channels(c0, c1)?;
        let shape = a.shape();
        Ok(self.record(
            value,
            &[a],
            Box::new(move |g, _| {
                let mut full = vec![T::zero(); shape.numel()];
                let p = shape.plane();
                full[c0 * p..c1 * p].copy_from_slice(g.data());
                vec![Some(Tensor::from_parts(shape, full))]
            }),
        ))
    }

    // ---- layers ----------------------------------------------------------

    /// Cross-correlation. `weight` is `(cout, cin/groups, k*k)`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &self,
        x: &Var<T>,
        weight: &Var<T>,
        bias: Option<&Var<T>>,
        k: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var<T>> {
        let cout = weight.shape().c;
        let geom = ConvGeom::new(x.shape(), cout, k, stride, padding, groups)?;
        if weight.value.len() != geom.weight_len() {
            return Err(Error::dim("kernel", geom.weight_len(), weight.value.len()));
        }
        if let Some(b) = bias {
            if b.value.len() != cout {
                return Err(Error::dim("bias", cout, b.value.len()));
            }
        }
        let mut out = vec![T::zero(); geom.out_shape().numel()];
        kernels::conv_forward(
            &geom,
            x.value.data(),
            weight.value.data(),
            bias.map(|b| b.value.data()),
            &mut out,
        );
        let value = Tensor::from_parts(geom.out_shape(), out);
        let (xv, wv) = (x.value.clone(), weight.value.clone());
        let has_bias = bias.is_some();
        let mut parents = vec![x, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        Ok(self.record(
            value,
            &parents,
            Box::new(move |g, needs| {
                let mut gx = needs[0].then(|| vec![T::zero(); xv.len()]);
                let mut gw = needs[1].then(|| vec![T::zero(); wv.len()]);
                let mut gb = (has_bias && needs[2]).then(|| vec![T::zero(); geom.cout]);
                kernels::conv_backward(
                    &geom,
                    xv.data(),
                    wv.data(),
                    g.data(),
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                let mut res = vec![
                    gx.map(|d| Tensor::from_parts(xv.shape(), d)),
                    gw.map(|d| Tensor::from_parts(wv.shape(), d)),
                ];
                if has_bias {
                    res.push(gb.map(Tensor::from_vec));
                }
                res
            }),
        ))
    }

    pub fn softmax_channels(&self, a: &Var<T>) -> Var<T> {
        let value = crate::tensor::softmax_channels(&a.value);
        let y = Rc::new(value.clone());
        self.record(
            value,
            &[a],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); y.len()];
                kernels::softmax_channels_backward(y.shape(), y.data(), g.data(), &mut gx);
                vec![Some(Tensor::from_parts(y.shape(), gx))]
            }),
        )
    }

    pub fn global_average_pool(&self, a: &Var<T>) -> Result<Var<T>> {
        let value = crate::tensor::global_average_pool(&a.value)?;
        let shape = a.shape();
        Ok(self.record(
            value,
            &[a],
            Box::new(move |g, _| {
                let n = T::lit(shape.plane() as f64);
                let mut d = Vec::with_capacity(shape.numel());
                for c in 0..shape.c {
                    d.extend(std::iter::repeat(g.data()[c] / n).take(shape.plane()));
                }
                vec![Some(Tensor::from_parts(shape, d))]
            }),
        ))
    }

    pub fn bilinear_resize(&self, a: &Var<T>, new_h: usize, new_w: usize) -> Result<Var<T>> {
        let value = crate::tensor::bilinear_resize(&a.value, new_h, new_w)?;
        let shape = a.shape();
        if shape.h == new_h && shape.w == new_w {
            return Ok(self.record(value, &[a], Box::new(|g, _| vec![Some(g.clone())])));
        }
        let plan = ResizePlan::new(shape.h, shape.w, new_h, new_w);
        Ok(self.record(
            value,
            &[a],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); shape.numel()];
                kernels::resize_backward(&plan, shape.c, g.data(), &mut gx);
                vec![Some(Tensor::from_parts(shape, gx))]
            }),
        ))
    }

    /// Per-channel normalisation over spatial positions without centring or
    /// additive bias: `y = gamma_c * x / sqrt(var_c + eps)`.
    pub fn layer_norm(&self, x: &Var<T>, gamma: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        if gamma.value.len() != s.c {
            return Err(Error::dim("norm weight", s.c, gamma.value.len()));
        }
        let eps = T::lit(1e-5);
        let n = T::lit(s.plane() as f64);
        let p = s.plane();
        let xv = x.value.clone();
        let gv = gamma.value.clone();
        let mut mu = vec![T::zero(); s.c];
        let mut inv = vec![T::zero(); s.c];
        let mut out = vec![T::zero(); s.numel()];
        for c in 0..s.c {
            let ch = xv.channel(c);
            let m = ch.iter().copied().sum::<T>() / n;
            let var = ch.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            mu[c] = m;
            inv[c] = r;
            let k = gv.data()[c] * r;
            for (o, &v) in out[c * p..(c + 1) * p].iter_mut().zip(ch) {
                *o = k * v;
            }
        }
        Ok(self.record(
            Tensor::from_parts(s, out),
            &[x, gamma],
            Box::new(move |g, needs| {
                let mut gx = vec![T::zero(); s.numel()];
                let mut gg = vec![T::zero(); s.c];
                for c in 0..s.c {
                    let ch = xv.channel(c);
                    let gc = &g.data()[c * p..(c + 1) * p];
                    let gxsum = kernels::dot(gc, ch);
                    let r = inv[c];
                    gg[c] = gxsum * r;
                    if needs[0] {
                        let gam = gv.data()[c];
                        let k2 = gam * r * r * r * gxsum / n;
                        for ((d, &gi), &xi) in gx[c * p..(c + 1) * p].iter_mut().zip(gc).zip(ch) {
                            *d = gam * r * gi - k2 * (xi - mu[c]);
                        }
                    }
                }
                vec![
                    needs[0].then(|| Tensor::from_parts(s, gx)),
                    needs[1].then(|| Tensor::from_parts(gv.shape(), gg)),
                ]
            }),
        ))
    }

    /// Transposed (channel-to-channel) attention. `q`, `k`, `v` are `(C,H,W)`;
    /// channels are split into `heads` groups and each group attends over its
    /// own `d x d` channel affinity matrix, scaled by `temperature[head]`.
    pub fn channel_attention(
        &self,
        q: &Var<T>,
        k: &Var<T>,
        v: &Var<T>,
        temperature: &Var<T>,
        heads: usize,
    ) -> Result<Var<T>> {
        let s = q.shape();
        s.expect_eq(&k.shape())?;
        s.expect_eq(&v.shape())?;
        if heads == 0 || s.c % heads != 0 {
            return Err(Error::Config(format!(
                "{} channels are not divisible into {heads} attention heads",
                s.c
            )));
        }
        if temperature.value.len() != heads {
            return Err(Error::dim("temperature", heads, temperature.value.len()));
        }
        let fwd = AttentionCache::forward(&q.value, &k.value, &v.value, temperature.value.data(), heads);
        let value = Tensor::from_parts(s, fwd.out.clone());
        let vv = v.value.clone();
        let tv = temperature.value.clone();
        Ok(self.record(
            value,
            &[q, k, v, temperature],
            Box::new(move |g, _| {
                let (gq, gk, gvv, gt) = fwd.backward(g.data(), vv.data(), tv.data());
                vec![
                    Some(Tensor::from_parts(s, gq)),
                    Some(Tensor::from_parts(s, gk)),
                    Some(Tensor::from_parts(s, gvv)),
                    Some(Tensor::from_parts(tv.shape(), gt)),
                ]
            }),
        ))
    }

    /// Per-channel `|Gx| + |Gy|` with replicate-padded Sobel kernels.
    pub fn sobel_magnitude(&self, a: &Var<T>) -> Var<T> {
        let s = a.shape();
        let (gx, gy) = kernels::sobel(s, a.value.data());
        let out = gx.iter().zip(&gy).map(|(a, b)| a.abs() + b.abs()).collect();
        self.record(
            Tensor::from_parts(s, out),
            &[a],
            Box::new(move |g, _| {
                let ggx: Vec<T> = g.data().iter().zip(&gx).map(|(&g, &v)| g * sign(v)).collect();
                let ggy: Vec<T> = g.data().iter().zip(&gy).map(|(&g, &v)| g * sign(v)).collect();
                let mut gin = vec![T::zero(); s.numel()];
                kernels::sobel_backward(s, &ggx, &ggy, &mut gin);
                vec![Some(Tensor::from_parts(s, gin))]
            }),
        )
    }
}

/// Subgradient of `|x|`, zero at the kink.
#[inline]
fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu_inner<T: Real>(x: T) -> T {
    T::lit(GELU_C) * (x + T::lit(0.044715) * x * x * x)
}

/// `tanh` from one `exp` of a non-positive argument; for `f32` this is
/// several times cheaper than the libm `tanh`, and it cannot overflow.
#[inline]
fn tanh_via_exp<T: Real>(u: T) -> T {
    let e = (T::lit(-2.0) * u.abs()).exp();
    let t = (T::one() - e) / (T::one() + e);
    if u < T::zero() {
        -t
    } else {
        t
    }
}

#[cfg(test)]
pub(crate) fn gelu<T: Real>(x: T) -> T {
    T::lit(0.5) * x * (T::one() + tanh_via_exp(gelu_inner(x)))
}

/// Derivative of `gelu` given `t = tanh(inner(x))`.
#[inline]
fn gelu_grad<T: Real>(x: T, t: T) -> T {
    let dinner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * 0.044715) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * dinner
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
}

impl BinOp {
    #[inline]
    fn apply<T: Real>(self, a: T, b: T) -> T {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
        }
    }
}

fn bdim(axis: &'static str, a: usize, b: usize) -> Result<usize> {
    match (a, b) {
        _ if a == b => Ok(a),
        (1, n) | (n, 1) => Ok(n),
        _ => Err(Error::dim(axis, a, b)),
    }
}

/// Index mapping for a broadcast binary op (unit axes get stride 0).
#[derive(Clone, Copy)]
struct Broadcast {
    out: Shape,
    same: bool,
    a_strides: [usize; 3],
    b_strides: [usize; 3],
}

impl Broadcast {
    fn new(a: Shape, b: Shape, out: Shape) -> Self {
        let strides = |s: Shape| {
            [
                if s.c == 1 { 0 } else { s.h * s.w },
                if s.h == 1 { 0 } else { s.w },
                if s.w == 1 { 0 } else { 1 },
            ]
        };
        Broadcast {
            out,
            same: a == b,
            a_strides: strides(a),
            b_strides: strides(b),
        }
    }

    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        if self.same {
            for i in 0..self.out.numel() {
                f(i, i, i);
            }
            return;
        }
        let (sa, sb) = (self.a_strides, self.b_strides);
        let mut o = 0;
        for c in 0..self.out.c {
            for y in 0..self.out.h {
                let ia = c * sa[0] + y * sa[1];
                let ib = c * sb[0] + y * sb[1];
                for x in 0..self.out.w {
                    f(o, ia + x * sa[2], ib + x * sb[2]);
                    o += 1;
                }
            }
        }
    }
}

/// Forward state of channel attention, kept for the backward pass.
struct AttentionCache<T> {
    heads: usize,
    d: usize,
    n: usize,
    qn: Vec<T>,
    kn: Vec<T>,
    q_norm: Vec<T>,
    k_norm: Vec<T>,
    /// Per head `d x d` cosine similarities `qn kn^T`.
    cos: Vec<T>,
    /// Per head `d x d` row-stochastic matrices.
    attn: Vec<T>,
    out: Vec<T>,
}

const NORM_EPS: f64 = 1e-12;

fn l2_rows<T: Real>(x: &[T], rows: usize, n: usize) -> (Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); x.len()];
    let mut norms = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * n..(r + 1) * n];
        let nrm = kernels::dot(row, row).sqrt().max(T::lit(NORM_EPS));
        norms[r] = nrm;
        for (o, &v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
            *o = v / nrm;
        }
    }
    (out, norms)
}

impl<T: Real> AttentionCache<T> {
    fn forward(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, temp: &[T], heads: usize) -> Self {
        let s = q.shape();
        let (c, n) = (s.c, s.plane());
        let d = c / heads;
        let (qn, q_norm) = l2_rows(q.data(), c, n);
        let (kn, k_norm) = l2_rows(k.data(), c, n);
        let mut cos = vec![T::zero(); heads * d * d];
        let mut attn = vec![T::zero(); heads * d * d];
        let mut out = vec![T::zero(); c * n];
        let block = |h: usize| h * d * n..(h + 1) * d * n;
        for h in 0..heads {
            let cs = &mut cos[h * d * d..(h + 1) * d * d];
            gemm(d, n, d, MatRef::rows(&qn[block(h)], n), MatRef::cols(&kn[block(h)], n), T::zero(), cs);
            let a = &mut attn[h * d * d..(h + 1) * d * d];
            for i in 0..d {
                let row = &mut a[i * d..(i + 1) * d];
                for (r, &cv) in row.iter_mut().zip(&cs[i * d..(i + 1) * d]) {
                    *r = temp[h] * cv;
                }
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for r in row.iter_mut() {
                    *r = (*r - m).exp();
                    z += *r;
                }
                row.iter_mut().for_each(|r| *r /= z);
            }
            gemm(d, d, n, MatRef::rows(a, d), MatRef::rows(&v.data()[block(h)], n), T::zero(), &mut out[block(h)]);
        }
        AttentionCache {
            heads,
            d,
            n,
            qn,
            kn,
            q_norm,
            k_norm,
            cos,
            attn,
            out,
        }
    }

    fn backward(&self, g: &[T], v: &[T], temp: &[T]) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
        let (d, n) = (self.d, self.n);
        let c = self.heads * d;
        let mut gqn = vec![T::zero(); c * n];
        let mut gkn = vec![T::zero(); c * n];
        let mut gv = vec![T::zero(); c * n];
        let mut gt = vec![T::zero(); self.heads];
        let block = |h: usize| h * d * n..(h + 1) * d * n;
        let mut ga = vec![T::zero(); d * d];
        let mut ws = vec![T::zero(); d * d];
        for h in 0..self.heads {
            let a = &self.attn[h * d * d..(h + 1) * d * d];
            let cs = &self.cos[h * d * d..(h + 1) * d * d];
            let go = MatRef::rows(&g[block(h)], n);
            // dA = dO V^T ; dV = A^T dO
            gemm(d, n, d, go, MatRef::cols(&v[block(h)], n), T::zero(), &mut ga);
            gemm(d, d, n, MatRef::cols(a, d), go, T::zero(), &mut gv[block(h)]);
            // softmax rows -> dS, then S = t cos with cos = qn kn^T
            for i in 0..d {
                let inner: T = (0..d).map(|j| a[i * d + j] * ga[i * d + j]).sum();
                for j in 0..d {
                    let gs = a[i * d + j] * (ga[i * d + j] - inner);
                    gt[h] += gs * cs[i * d + j];
                    ws[i * d + j] = gs * temp[h];
                }
            }
            gemm(d, d, n, MatRef::rows(&ws, d), MatRef::rows(&self.kn[block(h)], n), T::zero(), &mut gqn[block(h)]);
            gemm(d, d, n, MatRef::cols(&ws, d), MatRef::rows(&self.qn[block(h)], n), T::zero(), &mut gkn[block(h)]);
        }
        let gq = l2_rows_backward(&self.qn, &self.q_norm, &gqn, c, n);
        let gk = l2_rows_backward(&self.kn, &self.k_norm, &gkn, c, n);
        (gq, gk, gv, gt)
    }
}

/// Gradient through `y = x / max(|x|, eps)` given `y`, the norms and `dy`.
fn l2_rows_backward<T: Real>(y: &[T], norms: &[T], gy: &[T], rows: usize, n: usize) -> Vec<T> {
    let mut gx = vec![T::zero(); y.len()];
    for r in 0..rows {
        let range = r * n..(r + 1) * n;
        let nrm = norms[r];
        if nrm <= T::lit(NORM_EPS) {
            for (d, &g) in gx[range.clone()].iter_mut().zip(&gy[range]) {
                *d = g / nrm;
            }
            continue;
        }
        let proj = kernels::dot(&y[range.clone()], &gy[range.clone()]);
        for ((d, &g), &yy) in gx[range.clone()].iter_mut().zip(&gy[range.clone()]).zip(&y[range]) {
            *d = (g - yy * proj) / nrm;
        }
    }
    gx
}

/// Row-stochastic attention matrices (one `d x d` block per head) for given
/// query and key maps; exposed for inspection and testing.
pub fn channel_attention_weights<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    temperature: &[T],
    heads: usize,
) -> Result<Vec<Tensor<T>>> {
    q.shape().expect_eq(&k.shape())?;
    if heads == 0 || q.shape().c % heads != 0 || temperature.len() != heads {
        return Err(Error::Config(format!(
            "{} channels / {heads} heads / {} temperatures",
            q.shape().c,
            temperature.len()
        )));
    }
    let cache = AttentionCache::forward(q, k, q, temperature, heads);
    let d = cache.d;
    Ok((0..heads)
        .map(|h| {
            Tensor::from_parts(
                Shape::new(1, d, d),
                cache.attn[h * d * d..(h + 1) * d * d].to_vec(),
            )
        })
        .collect())
}
