use super::conv::{self, ConvGeometry};
use super::{Real, Tensor4};
use crate::error::{Error, Result};
use std::sync::atomic::{AtomicU64, Ordering};

/// Lower/upper clamp applied to the argument of [`Graph::exp`].
pub const EXP_CLAMP: f64 = 20.0;
/// Magnitude floor applied to denominators in [`Graph::div`].
pub const DIV_EPS: f64 = 1e-6;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: ConvGeometry,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Exp(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Abs(usize),
    AvgPool(usize, usize),
    Sum(usize),
    Mean(usize),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, weight, bias, ..
            } => {
                let mut v = vec![input, weight];
                v.extend(bias);
                v
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Abs(a)
            | Op::AvgPool(a, _)
            | Op::Sum(a)
            | Op::Mean(a) => vec![a],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    op: Op,
    value: Tensor4<T>,
    requires_grad: bool,
    grad: Option<Tensor4<T>>,
}

/// Define-by-run tape. Nodes are appended in topological order as ops are
/// called; [`Graph::backward`] walks them in reverse.
#[derive(Debug)]
pub struct Graph<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: [usize; 4], b: [usize; 4]) -> Result<()> {
    const DIMS: [&str; 4] = ["batch", "channels", "height", "width"];
    for i in 0..4 {
        if a[i] != b[i] {
            return Err(Error::Shape {
                op,
                dim: DIMS[i],
                expected: a[i],
                found: b[i],
            });
        }
    }
    Ok(())
}

fn zip_map<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>, f: impl Fn(T, T) -> T) -> Tensor4<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor4::new(a.shape(), data).expect("same shape")
}

#[inline]
fn guard_denominator<T: Real>(d: T) -> (T, bool) {
    let eps = T::from_f64(DIV_EPS);
    if d.abs() < eps {
        (if d.is_sign_negative() { -eps } else { eps }, true)
    } else {
        (d, false)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.graph != self.id {
            return Err(Error::NotInGraph);
        }
        self.nodes.get(v.index).ok_or(Error::NotInGraph)
    }

    fn push(&mut self, op: Op, value: Tensor4<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Adds an input tensor. Parameters pass `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor4<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
            grad: None,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> Result<&Tensor4<T>> {
        Ok(&self.node(v)?.value)
    }

    /// Gradient of the last [`backward`](Self::backward) loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Result<Option<&Tensor4<T>>> {
        Ok(self.node(v)?.grad.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Result<Option<Tensor4<T>>> {
        self.node(v)?;
        Ok(self.nodes[v.index].grad.take())
    }

    /// Cross-correlation with weight `(out_ch, in_ch, kh, kw)` and optional
    /// bias of shape `(1, out_ch, 1, 1)`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let [n, c, h, w] = self.node(input)?.value.shape();
        let [oc, ic, kh, kw] = self.node(weight)?.value.shape();
        if stride == 0 {
            return Err(Error::Invalid("conv2d stride must be positive".into()));
        }
        if ic != c {
            return Err(Error::Shape {
                op: "conv2d",
                dim: "input channels",
                expected: ic,
                found: c,
            });
        }
        if let Some(b) = bias {
            let bs = self.node(b)?.value.shape();
            same_shape("conv2d bias", [1, oc, 1, 1], bs)?;
        }
        let out_h = conv::output_extent(h, kh, stride, padding).ok_or(Error::Shape {
            op: "conv2d",
            dim: "kernel height",
            expected: h + 2 * padding,
            found: kh,
        })?;
        let out_w = conv::output_extent(w, kw, stride, padding).ok_or(Error::Shape {
            op: "conv2d",
            dim: "kernel width",
            expected: w + 2 * padding,
            found: kw,
        })?;
        let geom = ConvGeometry {
            in_ch: c,
            in_h: h,
            in_w: w,
            out_ch: oc,
            kh,
            kw,
            stride,
            padding,
            out_h,
            out_w,
        };
        let data = conv::forward(
            &geom,
            n,
            self.nodes[input.index].value.data(),
            self.nodes[weight.index].value.data(),
            bias.map(|b| self.nodes[b.index].value.data()),
        );
        let value = Tensor4::new([n, oc, out_h, out_w], data)?;
        Ok(self.push(
            Op::Conv2d {
                input: input.index,
                weight: weight.index,
                bias: bias.map(|b| b.index),
                geom,
            },
            value,
        ))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (&self.node(a)?.value, &self.node(b)?.value);
        same_shape(name, va.shape(), vb.shape())?;
        let value = zip_map(va, vb, f);
        Ok(self.push(op, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.index, b.index))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.index, b.index))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.index, b.index))
    }

    /// Elementwise `a / b` with `|b|` floored at [`DIV_EPS`].
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            "div",
            a,
            b,
            |x, y| x / guard_denominator(y).0,
            Op::Div(a.index, b.index),
        )
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let c = T::from_f64(factor);
        let value = self.node(a)?.value.map(|x| x * c);
        Ok(self.push(Op::Scale(a.index, factor), value))
    }

    /// `exp` of the argument clamped to `[-EXP_CLAMP, EXP_CLAMP]`.
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let lim = T::from_f64(EXP_CLAMP);
        let value = self.node(a)?.value.map(|x| x.max(-lim).min(lim).exp());
        Ok(self.push(Op::Exp(a.index), value))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.node(a)?.value.map(|x| x.max(T::zero()));
        Ok(self.push(Op::Relu(a.index), value))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let s = T::from_f64(slope);
        let value = self
            .node(a)?
            .value
            .map(|x| if x > T::zero() { x } else { x * s });
        Ok(self.push(Op::LeakyRelu(a.index, slope), value))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let value = self.node(a)?.value.map(|x| x.abs());
        Ok(self.push(Op::Abs(a.index), value))
    }

    /// Non-overlapping `k x k` average pooling; spatial dims must divide by `k`.
    pub fn avg_pool(&mut self, a: Var, k: usize) -> Result<Var> {
        let src = &self.node(a)?.value;
        let [n, c, h, w] = src.shape();
        if k == 0 {
            return Err(Error::Invalid("pool size must be positive".into()));
        }
        if h % k != 0 {
            return Err(Error::Indivisible { size: h, factor: k });
        }
        if w % k != 0 {
            return Err(Error::Indivisible { size: w, factor: k });
        }
        let (oh, ow) = (h / k, w / k);
        let norm = T::from_f64(1.0 / (k * k) as f64);
        let value = Tensor4::from_fn([n, c, oh, ow], |[b, ch, y, x]| {
            let mut acc = T::zero();
            for dy in 0..k {
                for dx in 0..k {
                    acc = acc + src.at([b, ch, y * k + dy, x * k + dx]);
                }
            }
            acc * norm
        });
        Ok(self.push(Op::AvgPool(a.index, k), value))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self
            .node(a)?
            .value
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        Ok(self.push(Op::Sum(a.index), Tensor4::scalar(s)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = &self.node(a)?.value;
        let s = v.data().iter().fold(T::zero(), |acc, &x| acc + x);
        let m = s / T::from_f64(v.numel() as f64);
        Ok(self.push(Op::Mean(a.index), Tensor4::scalar(m)))
    }

    /// Reverse-mode sweep from a scalar `loss`. Afterwards every leaf created
    /// with `requires_grad` holds `d loss / d leaf`; interior gradients are
    /// dropped.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.node(loss)?.value.numel();
        if numel != 1 {
            return Err(Error::NotScalar(numel));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(vec![T::one()]);

        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            for (input, contrib) in self.local_grads(i, &g) {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(contrib) {
                            *a = *a + c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let shape = node.value.shape();
            let data = grads
                .get_mut(i)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
            node.grad = Some(Tensor4::new(shape, data)?);
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(usize, Vec<T>)> {
        let val = |j: usize| self.nodes[j].value.data();
        let needs = |j: usize| self.nodes[j].requires_grad;
        match self.nodes[i].op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let batch = self.nodes[input].value.shape()[0];
                let grads = conv::backward(
                    &geom,
                    batch,
                    val(input),
                    val(weight),
                    g,
                    needs(input),
                    needs(weight),
                    bias.is_some_and(needs),
                );
                let mut out = Vec::with_capacity(3);
                if let Some(gi) = grads.input {
                    out.push((input, gi));
                }
                if let Some(gw) = grads.weight {
                    out.push((weight, gw));
                }
                if let (Some(b), Some(gb)) = (bias, grads.bias) {
                    out.push((b, gb));
                }
                out
            }
            Op::Add(a, b) => vec![(a, g.to_vec()), (b, g.to_vec())],
            Op::Sub(a, b) => vec![(a, g.to_vec()), (b, g.iter().map(|&x| -x).collect())],
            Op::Mul(a, b) => {
                let ga = g.iter().zip(val(b)).map(|(&g, &y)| g * y).collect();
                let gb = g.iter().zip(val(a)).map(|(&g, &x)| g * x).collect();
                vec![(a, ga), (b, gb)]
            }
            Op::Div(a, b) => {
                let (xa, xb) = (val(a), val(b));
                let mut ga = Vec::with_capacity(g.len());
                let mut gb = Vec::with_capacity(g.len());
                for k in 0..g.len() {
                    let (d, clamped) = guard_denominator(xb[k]);
                    ga.push(g[k] / d);
                    gb.push(if clamped {
                        T::zero()
                    } else {
                        -g[k] * xa[k] / (d * d)
                    });
                }
                vec![(a, ga), (b, gb)]
            }
            Op::Scale(a, c) => {
                let c = T::from_f64(c);
                vec![(a, g.iter().map(|&x| x * c).collect())]
            }
            Op::Exp(a) => {
                let lim = T::from_f64(EXP_CLAMP);
                let out = self.nodes[i].value.data();
                let ga = g
                    .iter()
                    .zip(val(a))
                    .zip(out)
                    .map(|((&g, &x), &y)| if x.abs() > lim { T::zero() } else { g * y })
                    .collect();
                vec![(a, ga)]
            }
            Op::Relu(a) => {
                let ga = g
                    .iter()
                    .zip(val(a))
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                vec![(a, ga)]
            }
            Op::LeakyRelu(a, s) => {
                let s = T::from_f64(s);
                let ga = g
                    .iter()
                    .zip(val(a))
                    .map(|(&g, &x)| if x > T::zero() { g } else { g * s })
                    .collect();
                vec![(a, ga)]
            }
            Op::Abs(a) => {
                let ga = g
                    .iter()
                    .zip(val(a))
                    .map(|(&g, &x)| {
                        if x > T::zero() {
                            g
                        } else if x < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                vec![(a, ga)]
            }
            Op::AvgPool(a, k) => {
                let src = &self.nodes[a].value;
                let [n, c, h, w] = src.shape();
                let (oh, ow) = (h / k, w / k);
                let norm = T::from_f64(1.0 / (k * k) as f64);
                let mut ga = vec![T::zero(); src.numel()];
                for b in 0..n {
                    for ch in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                let go = g[((b * c + ch) * oh + y / k) * ow + x / k];
                                ga[src.index([b, ch, y, x])] = go * norm;
                            }
                        }
                    }
                }
                vec![(a, ga)]
            }
            Op::Sum(a) => vec![(a, vec![g[0]; self.nodes[a].value.numel()])],
            Op::Mean(a) => {
                let n = self.nodes[a].value.numel();
                vec![(a, vec![g[0] / T::from_f64(n as f64); n])]
            }
        }
    }
}
