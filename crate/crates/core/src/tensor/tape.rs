use std::collections::BTreeMap;

use super::kernels::{self, ConvDims};
use super::{expect_chw, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
        cols: Option<Vec<T>>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GlobalAvgPool(Var),
    Sigmoid(Var),
    Relu(Var),
    Concat {
        a: Var,
        b: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    ChannelScale {
        x: Var,
        s: Var,
    },
    SpatialScale {
        x: Var,
        s: Var,
    },
    MaxPool2 {
        x: Var,
        arg: Vec<u32>,
    },
    Upsample2(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<u8>,
        ignore: Option<u8>,
        counted: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of differentiable operations.
///
/// Inputs always precede the node that consumes them, so a single reverse sweep
/// visits every node once.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to the `requires_grad` leaves.
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar = f32> {
    leaves: BTreeMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.leaves.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input. Gradients are reported for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// Stride-1 convolution with zero padding `k / 2`; preserves `H × W`.
    ///
    /// `x: [Cin, H, W]`, `w: [Cout, Cin, k, k]` with odd `k`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let (cin, h, wd) = expect_chw("conv2d", self.value(x))?;
        let ws = self.value(w).shape().to_vec();
        let (cout, k) = match ws[..] {
            [co, ci, k1, k2] if ci == cin && k1 == k2 && k1 % 2 == 1 => (co, k1),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: self.value(x).shape().to_vec(),
                    rhs: ws,
                })
            }
        };
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![cout],
                    rhs: self.value(b).shape().to_vec(),
                });
            }
        }
        let dims = ConvDims {
            cin,
            cout,
            h,
            w: wd,
            k,
        };
        let (out, cols) = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &dims,
        );
        let value = Tensor::new(vec![cout, h, wd], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, k, cols }, &inputs))
    }

    /// Affine map `w · x + b` with `x: [n_in]`, `w: [n_out, n_in]`, `b: [n_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (n_out, n_in) = match (&xs[..], &ws[..]) {
            (&[n], &[o, i]) if n == i => (o, i),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "linear",
                    lhs: xs,
                    rhs: ws,
                })
            }
        };
        if let Some(b) = b {
            if self.value(b).shape() != [n_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear bias",
                    lhs: vec![n_out],
                    rhs: self.value(b).shape().to_vec(),
                });
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let out: Vec<T> = (0..n_out)
            .map(|o| {
                let dot = wv[o * n_in..(o + 1) * n_in]
                    .iter()
                    .zip(xv)
                    .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                match b {
                    Some(b) => dot + self.value(b).data()[o],
                    None => dot,
                }
            })
            .collect();
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            Tensor::new(vec![n_out], out)?,
            Op::Linear { x, w, b },
            &inputs,
        ))
    }

    /// `[C, H, W] → [C]`, mean over each channel plane.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let (c, h, w) = expect_chw("global_avg_pool", self.value(x))?;
        let hw = h * w;
        let denom = T::from_usize(hw).unwrap();
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() / denom)
            .collect();
        Ok(self.push(Tensor::new(vec![c], out)?, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu(x), &[x])
    }

    /// `[C1, H, W] ++ [C2, H, W] → [C1 + C2, H, W]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ca, ha, wa) = expect_chw("concat_channels", self.value(a))?;
        let (cb, hb, wb) = expect_chw("concat_channels", self.value(b))?;
        if (ha, wa) != (hb, wb) {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                lhs: vec![ca, ha, wa],
                rhs: vec![cb, hb, wb],
            });
        }
        let mut data = Vec::with_capacity((ca + cb) * ha * wa);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        Ok(self.push(
            Tensor::new(vec![ca + cb, ha, wa], data)?,
            Op::Concat { a, b },
            &[a, b],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(data, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(data, Op::Mul(a, b), &[a, b]))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor), &[x])
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Scales channel `c` of `x: [C, H, W]` by `s[c]`, `s: [C]`.
    pub fn channelwise_scale(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        let (c, h, w) = expect_chw("channelwise_scale", self.value(x))?;
        if self.value(s).shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "channelwise_scale",
                lhs: vec![c, h, w],
                rhs: self.value(s).shape().to_vec(),
            });
        }
        let hw = h * w;
        let sv = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv[i / hw])
            .collect();
        Ok(self.push(
            Tensor::new(vec![c, h, w], data)?,
            Op::ChannelScale { x, s },
            &[x, s],
        ))
    }

    /// Scales every channel of `x: [C, H, W]` by the map `s: [1, H, W]`.
    pub fn spatialwise_scale(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        let (c, h, w) = expect_chw("spatialwise_scale", self.value(x))?;
        if self.value(s).shape() != [1, h, w] {
            return Err(TensorError::ShapeMismatch {
                op: "spatialwise_scale",
                lhs: vec![c, h, w],
                rhs: self.value(s).shape().to_vec(),
            });
        }
        let hw = h * w;
        let sv = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv[i % hw])
            .collect();
        Ok(self.push(
            Tensor::new(vec![c, h, w], data)?,
            Op::SpatialScale { x, s },
            &[x, s],
        ))
    }

    /// 2×2 max pooling, stride 2. Requires even `H` and `W`.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var, TensorError> {
        let (c, h, w) = expect_chw("max_pool2", self.value(x))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::InvalidShape {
                op: "max_pool2",
                shape: vec![c, h, w],
                expected: "even H and W",
            });
        }
        let (out, arg) = kernels::max_pool2(self.value(x).data(), c, h, w);
        Ok(self.push(
            Tensor::new(vec![c, h / 2, w / 2], out)?,
            Op::MaxPool2 { x, arg },
            &[x],
        ))
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var, TensorError> {
        let (c, h, w) = expect_chw("upsample2", self.value(x))?;
        let out = kernels::upsample2(self.value(x).data(), c, h, w);
        Ok(self.push(
            Tensor::new(vec![c, 2 * h, 2 * w], out)?,
            Op::Upsample2(x),
            &[x],
        ))
    }

    /// Mean per-pixel softmax cross-entropy of `logits: [K, H, W]` against
    /// integer labels (`H·W` of them). Pixels labelled `ignore` are excluded;
    /// any other label outside `0..K` is an error.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u8],
        ignore: Option<u8>,
    ) -> Result<Var, TensorError> {
        let (k, h, w) = expect_chw("softmax_cross_entropy", self.value(logits))?;
        let hw = h * w;
        if targets.len() != hw {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: vec![k, h, w],
                rhs: vec![targets.len()],
            });
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); k * hw];
        let mut total = T::zero();
        let mut counted = 0usize;
        for (p, &t) in targets.iter().enumerate() {
            let max = (0..k)
                .map(|c| lv[c * hw + p])
                .fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for c in 0..k {
                let e = (lv[c * hw + p] - max).exp();
                probs[c * hw + p] = e;
                denom = denom + e;
            }
            for c in 0..k {
                probs[c * hw + p] = probs[c * hw + p] / denom;
            }
            if Some(t) == ignore {
                continue;
            }
            if t as usize >= k {
                return Err(TensorError::InvalidLabel {
                    label: t,
                    pixel: p,
                    classes: k,
                });
            }
            total = total + (denom.ln() + max - lv[t as usize * hw + p]);
            counted += 1;
        }
        let loss = if counted == 0 {
            T::zero()
        } else {
            total / T::from_usize(counted).unwrap()
        };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                ignore,
                counted,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `loss`. The tape is consumed; a second call
    /// without [`reset`](Self::reset) and a fresh forward pass is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaves = BTreeMap::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                if matches!(node.op, Op::Leaf) {
                    leaves.insert(Var(i), Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            self.propagate(i, g, &mut grads, &mut leaves);
        }
        Ok(Gradients { leaves })
    }

    fn propagate(
        &self,
        i: usize,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        leaves: &mut BTreeMap<Var, Tensor<T>>,
    ) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing
                    .iter_mut()
                    .zip(contrib)
                    .for_each(|(e, c)| *e = *e + c),
                slot => *slot = Some(contrib),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {
                leaves.insert(
                    Var(i),
                    Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"),
                );
            }
            Op::Conv2d { x, w, b, k, cols } => {
                let (cin, h, wd) = self.nodes[x.0].value.chw().unwrap();
                let cout = node.value.shape()[0];
                let dims = ConvDims {
                    cin,
                    cout,
                    h,
                    w: wd,
                    k: *k,
                };
                let out = kernels::conv2d_backward(
                    &g,
                    val(*x),
                    cols.as_deref(),
                    val(*w),
                    &dims,
                    needs(*x),
                    needs(*w),
                    b.is_some_and(needs),
                );
                if let Some(dx) = out.dx {
                    acc(*x, dx);
                }
                if let Some(dw) = out.dw {
                    acc(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, out.db) {
                    acc(*b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let xv = val(*x);
                let wv = val(*w);
                let n_in = xv.len();
                if needs(*x) {
                    let dx = (0..n_in)
                        .map(|j| {
                            g.iter()
                                .enumerate()
                                .fold(T::zero(), |s, (o, &go)| s + go * wv[o * n_in + j])
                        })
                        .collect();
                    acc(*x, dx);
                }
                if needs(*w) {
                    let dw = g
                        .iter()
                        .flat_map(|&go| xv.iter().map(move |&xj| go * xj))
                        .collect();
                    acc(*w, dw);
                }
                if let Some(b) = b {
                    acc(*b, g.clone());
                }
            }
            Op::GlobalAvgPool(x) => {
                let (_, h, w) = self.nodes[x.0].value.chw().unwrap();
                let hw = h * w;
                let inv = T::one() / T::from_usize(hw).unwrap();
                let dx = g
                    .iter()
                    .flat_map(|&gc| std::iter::repeat_n(gc * inv, hw))
                    .collect();
                acc(*x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gi, &y)| gi * y * (T::one() - y))
                    .collect();
                acc(*x, dx);
            }
            Op::Relu(x) => {
                let dx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                acc(*x, dx);
            }
            Op::Concat { a, b } => {
                let split = self.nodes[a.0].value.len();
                let mut g = g;
                let gb = g.split_off(split);
                acc(*a, g);
                acc(*b, gb);
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone());
                }
                acc(*b, g);
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(
                        *a,
                        g.iter().zip(val(*b)).map(|(&gi, &bv)| gi * bv).collect(),
                    );
                }
                if needs(*b) {
                    acc(
                        *b,
                        g.iter().zip(val(*a)).map(|(&gi, &av)| gi * av).collect(),
                    );
                }
            }
            Op::Scale(x, f) => acc(*x, g.iter().map(|&gi| gi * *f).collect()),
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.len();
                acc(*x, vec![g[0]; n]);
            }
            Op::ChannelScale { x, s } => {
                let (c, h, w) = self.nodes[x.0].value.chw().unwrap();
                let hw = h * w;
                let sv = val(*s);
                if needs(*x) {
                    acc(
                        *x,
                        g.iter()
                            .enumerate()
                            .map(|(i, &gi)| gi * sv[i / hw])
                            .collect(),
                    );
                }
                if needs(*s) {
                    let xv = val(*x);
                    let ds = (0..c)
                        .map(|ch| (ch * hw..(ch + 1) * hw).fold(T::zero(), |a, i| a + g[i] * xv[i]))
                        .collect();
                    acc(*s, ds);
                }
            }
            Op::SpatialScale { x, s } => {
                let (c, h, w) = self.nodes[x.0].value.chw().unwrap();
                let hw = h * w;
                let sv = val(*s);
                if needs(*x) {
                    acc(
                        *x,
                        g.iter()
                            .enumerate()
                            .map(|(i, &gi)| gi * sv[i % hw])
                            .collect(),
                    );
                }
                if needs(*s) {
                    let xv = val(*x);
                    let mut ds = vec![T::zero(); hw];
                    for ch in 0..c {
                        for (p, d) in ds.iter_mut().enumerate() {
                            *d = *d + g[ch * hw + p] * xv[ch * hw + p];
                        }
                    }
                    acc(*s, ds);
                }
            }
            Op::MaxPool2 { x, arg } => {
                let mut dx = vec![T::zero(); self.nodes[x.0].value.len()];
                for (&src, &gi) in arg.iter().zip(&g) {
                    dx[src as usize] = dx[src as usize] + gi;
                }
                acc(*x, dx);
            }
            Op::Upsample2(x) => {
                let (c, h, w) = self.nodes[x.0].value.chw().unwrap();
                acc(*x, kernels::upsample2_backward(&g, c, h, w));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets,
                ignore,
                counted,
            } => {
                let mut dl = vec![T::zero(); probs.len()];
                if *counted > 0 {
                    let hw = targets.len();
                    let scale = g[0] / T::from_usize(*counted).unwrap();
                    for (p, &t) in targets.iter().enumerate() {
                        if Some(t) == *ignore {
                            continue;
                        }
                        for c in 0..probs.len() / hw {
                            let onehot = if c == t as usize { T::one() } else { T::zero() };
                            dl[c * hw + p] = (probs[c * hw + p] - onehot) * scale;
                        }
                    }
                }
                acc(*logits, dl);
            }
        }
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}
