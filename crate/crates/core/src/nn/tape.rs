//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends one node holding its forward value and whatever it needs
//! for the backward sweep. [`Tape::backward`] walks the nodes in reverse and
//! returns gradients for every leaf created with [`Tape::leaf`].

use rand::Rng;

use super::conv::{conv_backward, conv_forward, tconv_backward, tconv_forward, ConvSpec, Geom};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a batch-norm node obtains its normalization statistics.
#[derive(Clone, Debug)]
pub enum BnMode<'a, T> {
    /// Normalize with the batch's own (biased) statistics.
    Batch,
    /// Normalize with fixed running statistics.
    Frozen { mean: &'a [T], var: &'a [T] },
}

/// Per-channel statistics observed by a training-mode batch-norm node.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance, as used for normalization.
    pub var: Vec<T>,
    /// Elements per channel the statistics were computed over.
    pub count: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Constant,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Geom,
        batch: usize,
        out_channels: usize,
    },
    TConv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Geom,
        batch: usize,
        in_channels: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        window: (usize, usize),
        stride: (usize, usize),
    },
    Upsample {
        x: Var,
        factor: (usize, usize),
    },
    MeanAxis {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleChannels {
        x: Var,
        w: Var,
    },
    MulSpatial {
        x: Var,
        a: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Concat {
        parts: Vec<(Var, usize)>,
    },
    Reshape(Var),
    Sum(Var),
    BceLogits {
        logits: Var,
        target: Vec<T>,
    },
    BceProb {
        prob: Var,
        target: Vec<T>,
        eps: T,
    },
    SoftDice {
        prob: Var,
        target: Vec<T>,
        smooth: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf [`Var`].
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Grads<T> {
    /// Gradient of a leaf; `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(&self.shapes[v.0], g.clone()).ok()
    }

    pub fn get_raw(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0)?.as_deref()
    }
}

#[derive(Debug, Default)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contrib) {
                *a += c;
            }
        }
        None => *slot = Some(contrib),
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input (data, targets, masks).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Fail with a diagnostic naming `layer` when `v` holds NaN or infinity.
    pub fn check_finite(&self, v: Var, layer: &str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite activation after {layer}")))
        }
    }

    /// Batched convolution: `x` is `N x C x spatial`, `w` is `[out, in, k...]`.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        spec.validate()?;
        let xs = self.shape(x).to_vec();
        let r = spec.spatial_rank();
        if xs.len() != r + 2 {
            return Err(Error::dim(
                "conv",
                format!("expected N x C plus {r} spatial axes, got shape {xs:?}"),
            ));
        }
        if xs[1] != spec.in_channels {
            return Err(Error::dim(
                "conv",
                format!(
                    "axis 1 (channels): input has {}, kernel expects {}",
                    xs[1], spec.in_channels
                ),
            ));
        }
        if self.shape(w) != spec.weight_shape().as_slice() {
            return Err(Error::dim(
                "conv",
                format!("weight shape {:?} != expected {:?}", self.shape(w), spec.weight_shape()),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [spec.out_channels] {
                return Err(Error::dim("conv", format!("bias shape {:?}", self.shape(b))));
            }
        }
        let geom = Geom::conv(spec, xs[1], &xs[2..])?;
        let batch = xs[0];
        let y = conv_forward(
            &geom,
            batch,
            spec.out_channels,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let mut shape = vec![batch, spec.out_channels];
        shape.extend(geom.output[3 - r..].iter());
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let op = Op::Conv {
            x,
            w,
            b,
            geom,
            batch,
            out_channels: spec.out_channels,
        };
        Ok(self.push(Tensor::new(&shape, y)?, op, needs))
    }

    /// Batched transposed convolution: `w` is `[in, out, k...]`.
    pub fn transposed_conv(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        spec.validate()?;
        let xs = self.shape(x).to_vec();
        let r = spec.spatial_rank();
        if xs.len() != r + 2 {
            return Err(Error::dim(
                "transposed_conv",
                format!("expected N x C plus {r} spatial axes, got shape {xs:?}"),
            ));
        }
        if xs[1] != spec.in_channels {
            return Err(Error::dim(
                "transposed_conv",
                format!(
                    "axis 1 (channels): input has {}, kernel expects {}",
                    xs[1], spec.in_channels
                ),
            ));
        }
        if self.shape(w) != spec.transposed_weight_shape().as_slice() {
            return Err(Error::dim(
                "transposed_conv",
                format!(
                    "weight shape {:?} != expected {:?}",
                    self.shape(w),
                    spec.transposed_weight_shape()
                ),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [spec.out_channels] {
                return Err(Error::dim("transposed_conv", format!("bias shape {:?}", self.shape(b))));
            }
        }
        let geom = Geom::transposed(spec, spec.out_channels, &xs[2..])?;
        let batch = xs[0];
        let y = tconv_forward(
            &geom,
            batch,
            spec.in_channels,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let mut shape = vec![batch, spec.out_channels];
        shape.extend(geom.input[3 - r..].iter());
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let op = Op::TConv {
            x,
            w,
            b,
            geom,
            batch,
            in_channels: spec.in_channels,
        };
        Ok(self.push(Tensor::new(&shape, y)?, op, needs))
    }

    fn pool_geometry(
        &self,
        op: &'static str,
        x: Var,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<(Vec<usize>, usize, usize, usize, usize, usize)> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::dim(op, format!("need at least two axes, got {s:?}")));
        }
        if window.0 == 0 || window.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::config(format!("{op}: window and stride must be positive")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let r = s.len();
        for (axis, n, k, st) in [(r - 2, h, window.0, stride.0), (r - 1, w, window.1, stride.1)] {
            if n < k || (n - k) % st != 0 {
                return Err(Error::dim(
                    op,
                    format!("axis {axis}: extent {n} not tiled by window {k} at stride {st}"),
                ));
            }
        }
        let oh = (h - window.0) / stride.0 + 1;
        let ow = (w - window.1) / stride.1 + 1;
        let planes = s[..r - 2].iter().product();
        let mut out = s.clone();
        out[r - 2] = oh;
        out[r - 1] = ow;
        Ok((out, planes, h, w, oh, ow))
    }

    /// Max pooling over the last two axes. Ties go to the first element in
    /// row-major window order.
    pub fn max_pool(&mut self, x: Var, window: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let (shape, planes, h, w, oh, ow) = self.pool_geometry("max_pool", x, window, stride)?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + (i * stride.0) * w + j * stride.1;
                    for a in 0..window.0 {
                        for b in 0..window.1 {
                            let idx = base + (i * stride.0 + a) * w + j * stride.1 + b;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MaxPool { x, argmax }, needs))
    }

    /// Average pooling over the last two axes.
    pub fn avg_pool(&mut self, x: Var, window: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let (shape, planes, h, w, oh, ow) = self.pool_geometry("avg_pool", x, window, stride)?;
        let src = self.value(x).data();
        let norm = T::one() / T::from_usize(window.0 * window.1).unwrap();
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = T::zero();
                    for a in 0..window.0 {
                        let row = base + (i * stride.0 + a) * w + j * stride.1;
                        acc += src[row..row + window.1].iter().copied().sum::<T>();
                    }
                    out.push(acc * norm);
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::AvgPool { x, window, stride }, needs))
    }

    /// Nearest-neighbour upsampling of the last two axes by integer factors:
    /// every input value fills a `factor.0 x factor.1` block.
    pub fn upsample_nearest(&mut self, x: Var, factor: (usize, usize)) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || factor.0 == 0 || factor.1 == 0 {
            return Err(Error::dim(
                "upsample_nearest",
                format!("shape {s:?}, factor {factor:?}"),
            ));
        }
        let r = s.len();
        let (h, w) = (s[r - 2], s[r - 1]);
        let (oh, ow) = (h * factor.0, w * factor.1);
        let planes: usize = s[..r - 2].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            for i in 0..oh {
                let row = &src[p * h * w + (i / factor.0) * w..p * h * w + (i / factor.0 + 1) * w];
                for j in 0..ow {
                    out.push(row[j / factor.1]);
                }
            }
        }
        let mut shape = s.clone();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Upsample { x, factor }, needs))
    }

    /// Arithmetic mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s.len() < 2 {
            return Err(Error::dim("mean_axis", format!("axis {axis} invalid for shape {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let axis_len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(x).data();
        let norm = T::one() / T::from_usize(axis_len).unwrap();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for a in 0..axis_len {
                let row = &src[(o * axis_len + a) * inner..(o * axis_len + a + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d += v;
                }
            }
            for d in dst.iter_mut() {
                *d *= norm;
            }
        }
        let mut shape = s.clone();
        shape.remove(axis);
        let needs = self.needs(x);
        let op = Op::MeanAxis {
            x,
            outer,
            axis_len,
            inner,
        };
        Ok(self.push(Tensor::new(&shape, out)?, op, needs))
    }

    /// Affine map `x W^T + b` with `x: N x K`, `W: M x K`, `b: M`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::dim(
                "linear",
                format!("axis 1: input {xs:?} incompatible with weight {ws:?}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::dim("linear", format!("bias shape {:?}", self.shape(b))));
            }
        }
        let (n, k, m) = (xs[0], xs[1], ws[0]);
        let mut y = vec![T::zero(); n * m];
        T::gemm(
            n,
            k,
            m,
            self.value(x).data(),
            (k, 1),
            self.value(w).data(),
            (1, k),
            T::zero(),
            &mut y,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in y.chunks_mut(m) {
                for (v, &bb) in row.iter_mut().zip(bias) {
                    *v += bb;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::new(&[n, m], y)?, Op::Linear { x, w, b }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(x);
        self.push(y, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid);
        let needs = self.needs(x);
        self.push(y, Op::Sigmoid(x), needs)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("operand shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let y = self.value(x).map(|v| v * c);
        let needs = self.needs(x);
        self.push(y, Op::Scale(x, c), needs)
    }

    /// `y[n, c, ..] = x[n, c, ..] * w[n, c]`.
    pub fn scale_channels(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        if xs.len() < 2 || ws != &xs[..2] {
            return Err(Error::dim(
                "scale_channels",
                format!("weights {ws:?} do not match leading axes of {xs:?}"),
            ));
        }
        let per: usize = xs[2..].iter().product();
        let wv = self.value(w).data();
        let data = self
            .value(x)
            .data()
            .chunks(per)
            .zip(wv)
            .flat_map(|(row, &s)| row.iter().map(move |&v| v * s))
            .collect();
        let t = Tensor::new(&xs, data)?;
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(t, Op::ScaleChannels { x, w }, needs))
    }

    /// `y[n, c, s] = x[n, c, s] * a[n, 0, s]` (one map shared across channels).
    pub fn mul_spatial(&mut self, x: Var, a: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let as_ = self.shape(a);
        if xs.len() < 3 || as_.len() != xs.len() || as_[0] != xs[0] || as_[1] != 1 || as_[2..] != xs[2..] {
            return Err(Error::dim(
                "mul_spatial",
                format!("map {as_:?} does not broadcast over {xs:?} along axis 1 only"),
            ));
        }
        let (n, c) = (xs[0], xs[1]);
        let per: usize = xs[2..].iter().product();
        let xv = self.value(x).data();
        let av = self.value(a).data();
        let mut data = Vec::with_capacity(xv.len());
        for i in 0..n {
            let map = &av[i * per..(i + 1) * per];
            for ch in 0..c {
                let row = &xv[(i * c + ch) * per..(i * c + ch + 1) * per];
                data.extend(row.iter().zip(map).map(|(&v, &m)| v * m));
            }
        }
        let t = Tensor::new(&xs, data)?;
        let needs = self.needs(x) || self.needs(a);
        Ok(self.push(t, Op::MulSpatial { x, a }, needs))
    }

    /// Batch normalization over axis 1 of an `N x C x ...` tensor.
    ///
    /// In [`BnMode::Batch`] the returned statistics are those of this batch;
    /// callers own any running-average bookkeeping.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::dim("batch_norm", format!("need N x C x ..., got {xs:?}")));
        }
        let (n, c) = (xs[0], xs[1]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(
                "batch_norm",
                format!("axis 1: scale/shift must have length {c}"),
            ));
        }
        if eps < T::zero() {
            return Err(Error::config("batch_norm epsilon must be nonnegative"));
        }
        let per: usize = xs[2..].iter().product();
        let count = n * per;
        let xv = self.value(x).data();
        let (mean, var, batch_stats) = match mode {
            BnMode::Batch => {
                let inv = T::one() / T::from_usize(count).unwrap();
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for i in 0..n {
                        s += xv[(i * c + ch) * per..(i * c + ch + 1) * per]
                            .iter()
                            .copied()
                            .sum::<T>();
                    }
                    let m = s * inv;
                    let mut q = T::zero();
                    for i in 0..n {
                        for &v in &xv[(i * c + ch) * per..(i * c + ch + 1) * per] {
                            q += (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = q * inv;
                }
                (mean, var, true)
            }
            BnMode::Frozen { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::dim("batch_norm", format!("running stats must have length {c}")));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut y = Vec::with_capacity(xv.len());
        for i in 0..n {
            for ch in 0..c {
                for &v in &xv[(i * c + ch) * per..(i * c + ch + 1) * per] {
                    let h = (v - mean[ch]) * inv_std[ch];
                    xhat.push(h);
                    y.push(g[ch] * h + b[ch]);
                }
            }
        }
        let t = Tensor::new(&xs, y)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let stats = batch_stats.then(|| BatchStats {
            mean: mean.clone(),
            var: var.clone(),
            count,
        });
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        };
        Ok((self.push(t, op, needs), stats))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout rate {p} outside [0, 1)")));
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(self.shape(x), data)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Dropout { x, mask }, needs))
    }

    /// Concatenate `N x C_i x ...` tensors along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::dim("concat", "no operands"))?)
            .to_vec();
        if first.len() < 2 {
            return Err(Error::dim("concat", format!("need N x C x ..., got {first:?}")));
        }
        let per: usize = first[2..].iter().product();
        let n = first[0];
        let mut channels = 0;
        let mut recorded = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != n || s[2..] != first[2..] {
                return Err(Error::dim(
                    "concat",
                    format!("operand {s:?} incompatible with {first:?} outside axis 1"),
                ));
            }
            recorded.push((p, s[1]));
            channels += s[1];
        }
        let mut data = Vec::with_capacity(n * channels * per);
        for i in 0..n {
            for &(p, c) in &recorded {
                data.extend_from_slice(&self.value(p).data()[i * c * per..(i + 1) * c * per]);
            }
        }
        let mut shape = first.clone();
        shape[1] = channels;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat { parts: recorded }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    fn target_values(&self, op: &'static str, x: Var, target: &Tensor<T>) -> Result<Vec<T>> {
        if target.len() != self.value(x).len() {
            return Err(Error::dim(
                op,
                format!("target shape {:?} vs prediction {:?}", target.shape(), self.shape(x)),
            ));
        }
        Ok(target.data().to_vec())
    }

    /// Mean binary cross-entropy computed from logits (numerically stable).
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let target = self.target_values("bce_with_logits", logits, target)?;
        let z = self.value(logits).data();
        let total: T = z
            .iter()
            .zip(&target)
            .map(|(&z, &t)| z.max(T::zero()) - z * t + (T::one() + (-z.abs()).exp()).ln())
            .sum();
        let loss = total / T::from_usize(z.len()).unwrap();
        let needs = self.needs(logits);
        Ok(self.push(Tensor::scalar(loss), Op::BceLogits { logits, target }, needs))
    }

    /// Mean binary cross-entropy of probabilities clamped to `[eps, 1 - eps]`.
    pub fn bce_prob(&mut self, prob: Var, target: &Tensor<T>, eps: T) -> Result<Var> {
        let target = self.target_values("bce_prob", prob, target)?;
        let p = self.value(prob).data();
        let hi = T::one() - eps;
        let total: T = p
            .iter()
            .zip(&target)
            .map(|(&p, &t)| {
                let q = p.max(eps).min(hi);
                -(t * q.ln() + (T::one() - t) * (T::one() - q).ln())
            })
            .sum();
        let loss = total / T::from_usize(p.len()).unwrap();
        let needs = self.needs(prob);
        Ok(self.push(Tensor::scalar(loss), Op::BceProb { prob, target, eps }, needs))
    }

    /// Soft Dice loss `1 - (2 sum(p g) + s) / (sum(p) + sum(g) + s)`, computed per
    /// sample (leading axis) and averaged over the batch.
    pub fn soft_dice(&mut self, prob: Var, target: &Tensor<T>, smooth: T) -> Result<Var> {
        let target = self.target_values("soft_dice", prob, target)?;
        let n = self.shape(prob)[0];
        let per = self.value(prob).len() / n;
        let p = self.value(prob).data();
        let mut total = T::zero();
        for i in 0..n {
            let (pi, gi) = (&p[i * per..(i + 1) * per], &target[i * per..(i + 1) * per]);
            let inter: T = pi.iter().zip(gi).map(|(&a, &b)| a * b).sum();
            let denom = pi.iter().copied().sum::<T>() + gi.iter().copied().sum::<T>() + smooth;
            total += T::one() - (inter + inter + smooth) / denom;
        }
        let loss = total / T::from_usize(n).unwrap();
        let needs = self.needs(prob);
        Ok(self.push(Tensor::scalar(loss), Op::SoftDice { prob, target, smooth }, needs))
    }

    /// Reverse sweep from the one-element tensor `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf | Op::Constant => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backward_node(node, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Grads { grads, shapes })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Conv {
                x,
                w,
                b,
                geom,
                batch,
                out_channels,
            } => {
                let (dx, dw, db) = conv_backward(geom, *batch, *out_channels, val(*x), val(*w), g, needs(*x));
                if needs(*x) {
                    accumulate(&mut grads[x.0], dx);
                }
                if needs(*w) {
                    accumulate(&mut grads[w.0], dw);
                }
                if let Some(b) = b.filter(|&b| needs(b)) {
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::TConv {
                x,
                w,
                b,
                geom,
                batch,
                in_channels,
            } => {
                let (dx, dw, db) = tconv_backward(geom, *batch, *in_channels, val(*x), val(*w), g, needs(*x));
                if needs(*x) {
                    accumulate(&mut grads[x.0], dx);
                }
                if needs(*w) {
                    accumulate(&mut grads[w.0], dw);
                }
                if let Some(b) = b.filter(|&b| needs(b)) {
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); val(*x).len()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    dx[idx] += gv;
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::AvgPool { x, window, stride } => {
                let xs = self.nodes[x.0].value.shape();
                let r = xs.len();
                let (h, w) = (xs[r - 2], xs[r - 1]);
                let os = node.value.shape();
                let (oh, ow) = (os[r - 2], os[r - 1]);
                let planes = g.len() / (oh * ow);
                let norm = T::one() / T::from_usize(window.0 * window.1).unwrap();
                let mut dx = vec![T::zero(); val(*x).len()];
                for p in 0..planes {
                    for i in 0..oh {
                        for j in 0..ow {
                            let gv = g[(p * oh + i) * ow + j] * norm;
                            for a in 0..window.0 {
                                let row = p * h * w + (i * stride.0 + a) * w + j * stride.1;
                                for d in &mut dx[row..row + window.1] {
                                    *d += gv;
                                }
                            }
                        }
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Upsample { x, factor } => {
                let xs = self.nodes[x.0].value.shape();
                let r = xs.len();
                let (h, w) = (xs[r - 2], xs[r - 1]);
                let (oh, ow) = (h * factor.0, w * factor.1);
                let planes = g.len() / (oh * ow);
                let mut dx = vec![T::zero(); val(*x).len()];
                for p in 0..planes {
                    for i in 0..oh {
                        for j in 0..ow {
                            dx[p * h * w + (i / factor.0) * w + j / factor.1] += g[(p * oh + i) * ow + j];
                        }
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::MeanAxis {
                x,
                outer,
                axis_len,
                inner,
            } => {
                let norm = T::one() / T::from_usize(*axis_len).unwrap();
                let mut dx = Vec::with_capacity(outer * axis_len * inner);
                for o in 0..*outer {
                    let row = &g[o * inner..(o + 1) * inner];
                    for _ in 0..*axis_len {
                        dx.extend(row.iter().map(|&v| v * norm));
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Linear { x, w, b } => {
                let xs = self.nodes[x.0].value.shape();
                let (n, k) = (xs[0], xs[1]);
                let m = self.nodes[w.0].value.shape()[0];
                if needs(*x) {
                    let mut dx = vec![T::zero(); n * k];
                    T::gemm(n, m, k, g, (m, 1), val(*w), (k, 1), T::zero(), &mut dx);
                    accumulate(&mut grads[x.0], dx);
                }
                if needs(*w) {
                    let mut dw = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g, (1, m), val(*x), (k, 1), T::zero(), &mut dw);
                    accumulate(&mut grads[w.0], dw);
                }
                if let Some(b) = b.filter(|&b| needs(b)) {
                    let mut db = vec![T::zero(); m];
                    for row in g.chunks(m) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Relu(x) => {
                let dx = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(&mut grads[x.0], dx);
            }
            Op::Sigmoid(x) => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&s, &gv)| gv * s * (T::one() - s))
                    .collect();
                accumulate(&mut grads[x.0], dx);
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if needs(*b) {
                    accumulate(&mut grads[b.0], g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], g.iter().zip(val(*b)).map(|(&gv, &v)| gv * v).collect());
                }
                if needs(*b) {
                    accumulate(&mut grads[b.0], g.iter().zip(val(*a)).map(|(&gv, &v)| gv * v).collect());
                }
            }
            Op::Scale(x, c) => {
                accumulate(&mut grads[x.0], g.iter().map(|&v| v * *c).collect());
            }
            Op::ScaleChannels { x, w } => {
                let wv = val(*w);
                let per = g.len() / wv.len();
                if needs(*x) {
                    let dx = g
                        .chunks(per)
                        .zip(wv)
                        .flat_map(|(row, &s)| row.iter().map(move |&v| v * s))
                        .collect();
                    accumulate(&mut grads[x.0], dx);
                }
                if needs(*w) {
                    let dw = g
                        .chunks(per)
                        .zip(val(*x).chunks(per))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(&a, &b)| a * b).sum())
                        .collect();
                    accumulate(&mut grads[w.0], dw);
                }
            }
            Op::MulSpatial { x, a } => {
                let xs = self.nodes[x.0].value.shape();
                let (n, c) = (xs[0], xs[1]);
                let per = g.len() / (n * c);
                let (xv, av) = (val(*x), val(*a));
                if needs(*x) {
                    let mut dx = Vec::with_capacity(g.len());
                    for i in 0..n {
                        let map = &av[i * per..(i + 1) * per];
                        for ch in 0..c {
                            let gr = &g[(i * c + ch) * per..(i * c + ch + 1) * per];
                            dx.extend(gr.iter().zip(map).map(|(&gv, &m)| gv * m));
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                if needs(*a) {
                    let mut da = vec![T::zero(); n * per];
                    for i in 0..n {
                        let dst = &mut da[i * per..(i + 1) * per];
                        for ch in 0..c {
                            let off = (i * c + ch) * per;
                            for ((d, &gv), &xv) in dst.iter_mut().zip(&g[off..off + per]).zip(&xv[off..off + per]) {
                                *d += gv * xv;
                            }
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xs = self.nodes[x.0].value.shape();
                let (n, c) = (xs[0], xs[1]);
                let per = g.len() / (n * c);
                let gam = val(*gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * per;
                        for (&gv, &h) in g[off..off + per].iter().zip(&xhat[off..off + per]) {
                            dgamma[ch] += gv * h;
                            dbeta[ch] += gv;
                        }
                    }
                }
                if needs(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    let m = T::from_usize(n * per).unwrap();
                    for ch in 0..c {
                        let k = gam[ch] * inv_std[ch];
                        for i in 0..n {
                            let off = (i * c + ch) * per;
                            for j in off..off + per {
                                dx[j] = if *batch_stats {
                                    k * (g[j] - dbeta[ch] / m - xhat[j] * dgamma[ch] / m)
                                } else {
                                    k * g[j]
                                };
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                if needs(*gamma) {
                    accumulate(&mut grads[gamma.0], dgamma);
                }
                if needs(*beta) {
                    accumulate(&mut grads[beta.0], dbeta);
                }
            }
            Op::Dropout { x, mask } => {
                accumulate(&mut grads[x.0], g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect());
            }
            Op::Concat { parts } => {
                let s = node.value.shape();
                let n = s[0];
                let per: usize = s[2..].iter().product();
                let total_c = s[1];
                let mut offset = 0;
                for &(p, c) in parts {
                    if needs(p) {
                        let mut dp = Vec::with_capacity(n * c * per);
                        for i in 0..n {
                            let start = (i * total_c + offset) * per;
                            dp.extend_from_slice(&g[start..start + c * per]);
                        }
                        accumulate(&mut grads[p.0], dp);
                    }
                    offset += c;
                }
            }
            Op::Reshape(x) => accumulate(&mut grads[x.0], g.to_vec()),
            Op::Sum(x) => accumulate(&mut grads[x.0], vec![g[0]; val(*x).len()]),
            Op::BceLogits { logits, target } => {
                let z = val(*logits);
                let k = g[0] / T::from_usize(z.len()).unwrap();
                let dx = z.iter().zip(target).map(|(&z, &t)| k * (sigmoid(z) - t)).collect();
                accumulate(&mut grads[logits.0], dx);
            }
            Op::BceProb { prob, target, eps } => {
                let p = val(*prob);
                let k = g[0] / T::from_usize(p.len()).unwrap();
                let hi = T::one() - *eps;
                let dx = p
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| {
                        if p < *eps || p > hi {
                            T::zero()
                        } else {
                            k * (-t / p + (T::one() - t) / (T::one() - p))
                        }
                    })
                    .collect();
                accumulate(&mut grads[prob.0], dx);
            }
            Op::SoftDice { prob, target, smooth } => {
                let p = val(*prob);
                let n = self.nodes[prob.0].value.shape()[0];
                let per = p.len() / n;
                let k = g[0] / T::from_usize(n).unwrap();
                let two = T::one() + T::one();
                let mut dx = Vec::with_capacity(p.len());
                for i in 0..n {
                    let (pi, gi) = (&p[i * per..(i + 1) * per], &target[i * per..(i + 1) * per]);
                    let inter: T = pi.iter().zip(gi).map(|(&a, &b)| a * b).sum();
                    let num = two * inter + *smooth;
                    let den = pi.iter().copied().sum::<T>() + gi.iter().copied().sum::<T>() + *smooth;
                    // d/dp_j of -(num / den)
                    dx.extend(gi.iter().map(|&t| -k * (two * t * den - num) / (den * den)));
                }
                accumulate(&mut grads[prob.0], dx);
            }
        }
    }
}
