use std::sync::Arc;

use super::kernels::{col2im_add, gemm, im2col, ConvGeom, Mat};
use super::Tensor;
use crate::error::{config_err, shape_err, Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Bilinear sample: four `(flat spatial index, weight)` taps.
type Taps = [(usize, f64); 4];

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        batch: usize,
        out_ch: usize,
        cols: Vec<Vec<f64>>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu(Var),
    Sigmoid(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Vec<f64>),
    Square(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    MeanSpatial(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<usize>,
    },
    BceLogits {
        x: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
        norm: f64,
    },
    SmoothL1 {
        x: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
        norm: f64,
        beta: f64,
    },
    Grl {
        x: Var,
        lambda: f64,
    },
    Reshape(Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Concat(Vec<Var>),
    RoiAlign {
        feat: Var,
        taps: Vec<Taps>,
        grid: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::MaxPool2 { .. } => "max_pool2d",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::MulConst(..) => "mul_const",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumLast(_) => "sum_last",
            Op::MeanSpatial(_) => "mean_spatial",
            Op::Softmax(_) => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::BceLogits { .. } => "bce_with_logits",
            Op::SmoothL1 { .. } => "smooth_l1",
            Op::Grl { .. } => "grl",
            Op::Reshape(_) => "reshape",
            Op::Gather { .. } => "gather_rows",
            Op::Concat(_) => "concat_rows",
            Op::RoiAlign { .. } => "roi_align",
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations. Node order is creation order; backward
/// visits nodes in exact reverse of it.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn smooth_l1(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * d * d / beta
    } else {
        a - 0.5 * beta
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!(
                "output of {} (node {})",
                op.name(),
                self.nodes.len()
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input tensor. Leaves with `requires_grad` accumulate
    /// gradients across [`Graph::backward`] calls.
    pub fn leaf(&mut self, value: impl Into<Arc<Tensor>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: value.into(),
            op: Op::Leaf,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    /// Moves a leaf's accumulated gradient out of the graph.
    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.leaf_grads[v.0].take()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    // ---------------------------------------------------------------- ops

    /// Cross-correlation of `x [N,C,H,W]` with `w [K,C,kh,kw]` plus optional
    /// bias `[K]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        if stride == 0 {
            return Err(config_err!("conv2d stride must be >= 1"));
        }
        let [n, c, h, wd] = self.value(x).dims4()?;
        let [k, wc, kh, kw] = self.value(w).dims4()?;
        if wc != c {
            return Err(shape_err!("conv2d: input has {c} channels, weight expects {wc}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [k] {
                return Err(shape_err!("conv2d: bias shape {:?}, expected [{k}]", self.shape(b)));
            }
        }
        let span_h = h + 2 * pad;
        let span_w = wd + 2 * pad;
        if span_h < kh || span_w < kw {
            return Err(config_err!("conv2d: kernel larger than padded input"));
        }
        if !(span_h - kh).is_multiple_of(stride) || !(span_w - kw).is_multiple_of(stride) {
            return Err(config_err!(
                "conv2d: ({h}x{wd}, pad {pad}, kernel {kh}x{kw}, stride {stride}) gives a non-integer output size"
            ));
        }
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            oh: (span_h - kh) / stride + 1,
            ow: (span_w - kw) / stride + 1,
        };
        let hw = geom.col_cols();
        let ckk = geom.col_rows();
        let keep_cols = self.requires_grad(w) && !geom.is_pointwise();
        let xv = self.nodes[x.0].value.clone();
        let wv = self.nodes[w.0].value.clone();
        let mut out = vec![0.0; n * k * hw];
        let mut saved = Vec::new();
        let mut cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; ckk * hw]
        };
        for i in 0..n {
            let xi = &xv.data()[i * c * h * wd..(i + 1) * c * h * wd];
            let src: &[f64] = if geom.is_pointwise() {
                xi
            } else {
                im2col(xi, &geom, &mut cols);
                &cols
            };
            let oi = &mut out[i * k * hw..(i + 1) * k * hw];
            gemm(k, ckk, hw, 1.0, Mat::rows(wv.data(), ckk), Mat::rows(src, hw), 0.0, oi);
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (kk, row) in oi.chunks_mut(hw).enumerate() {
                    row.iter_mut().for_each(|v| *v += bv[kk]);
                }
            }
            if keep_cols {
                saved.push(cols.clone());
            }
        }
        let value = Tensor::new(vec![n, k, geom.oh, geom.ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch: n,
                out_ch: k,
                cols: saved,
            },
            &inputs,
        )
    }

    /// `x [N,in] · wᵀ + b` with `w [out,in]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [n, din] = self.value(x).dims2()?;
        let [dout, win] = self.value(w).dims2()?;
        if win != din {
            return Err(shape_err!("linear: input width {din}, weight expects {win}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(shape_err!("linear: bias shape {:?}, expected [{dout}]", self.shape(b)));
            }
        }
        let mut out = vec![0.0; n * dout];
        gemm(
            n,
            din,
            dout,
            1.0,
            Mat::rows(self.value(x).data(), din),
            Mat::t(self.value(w).data(), din),
            0.0,
            &mut out,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Tensor::new(vec![n, dout], out)?, Op::Linear { x, w, b }, &inputs)
    }

    fn map_unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(value, op, &[x])
    }

    /// Rectifier; the subgradient at zero is zero.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map_unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map_unary(x, Op::AddScalar(x), |v| v + c)
    }

    /// `c - x`, e.g. the `(1 - D)` target-domain residual.
    pub fn rsub_scalar(&mut self, c: f64, x: Var) -> Result<Var> {
        let neg = self.scale(x, -1.0)?;
        self.add_scalar(neg, c)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, Op::Square(x), |v| v * v)
    }

    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v < 0.0) {
            return Err(Error::NonFinite("sqrt of a negative value".into()));
        }
        self.map_unary(x, Op::Sqrt(x), f64::sqrt)
    }

    /// Identity on the forward pass; multiplies the incoming gradient by
    /// `-lambda` on the backward pass.
    pub fn grl(&mut self, x: Var, lambda: f64) -> Result<Var> {
        if !(lambda >= 0.0) {
            return Err(config_err!("gradient reversal weight must be >= 0, got {lambda}"));
        }
        let value = self.nodes[x.0].value.clone();
        let requires_grad = self.nodes[x.0].requires_grad;
        self.nodes.push(Node {
            value,
            op: Op::Grl { x, lambda },
            requires_grad,
        });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(op.name(), av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise product with a constant (non-differentiated) tensor.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        same_shape("mul_const", self.value(x), c)?;
        let data = self.value(x).data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let value = Tensor::new(c.shape().to_vec(), data)?;
        self.push(value, Op::MulConst(x, c.data().to_vec()), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(shape_err!("mean of an empty tensor"));
        }
        let m = xv.sum() / xv.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Sums over the last dimension: `[.., D] -> [..]`.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let Some((&d, rest)) = xv.shape().split_last() else {
            return Err(shape_err!("sum_last on a scalar"));
        };
        let data = xv.data().chunks(d.max(1)).map(|r| r.iter().sum()).collect();
        let value = Tensor::new(rest.to_vec(), data)?;
        self.push(value, Op::SumLast(x), &[x])
    }

    /// Spatial average: `[N,C,H,W] -> [N,C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let hw = (h * w) as f64;
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / hw)
            .collect();
        self.push(Tensor::new(vec![n, c], data)?, Op::MeanSpatial(x), &[x])
    }

    /// 2×2 max pooling with stride 2; ties resolve to the first maximum.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(config_err!("max_pool2d needs even spatial size, got {h}x{w}"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let j = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[j] > xd[best] {
                            best = j;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        self.push(Tensor::new(vec![n, c, oh, ow], out)?, Op::MaxPool2 { x, argmax }, &[x])
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().ok_or_else(|| shape_err!("softmax on a scalar"))?;
        let mut out = vec![0.0; xv.len()];
        for (row, o) in xv.data().chunks(d).zip(out.chunks_mut(d)) {
            softmax_row(row, o);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of `logits [N,K]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let [n, k] = self.value(logits).dims2()?;
        if n == 0 || targets.len() != n {
            return Err(shape_err!("cross_entropy: {n} rows, {} targets", targets.len()));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= k) {
            return Err(shape_err!("cross_entropy: target {t} out of range for {k} classes"));
        }
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (i, row) in self.value(logits).data().chunks(k).enumerate() {
            softmax_row(row, &mut probs[i * k..(i + 1) * k]);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[targets[i]];
        }
        let op = Op::CrossEntropy {
            logits,
            probs,
            targets: targets.to_vec(),
        };
        self.push(Tensor::scalar(loss / n as f64), op, &[logits])
    }

    /// `Σ wᵢ · bce(σ(xᵢ), tᵢ) / norm` computed from logits.
    pub fn bce_with_logits(
        &mut self,
        x: Var,
        targets: &[f64],
        weights: &[f64],
        norm: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        if targets.len() != xv.len() || weights.len() != xv.len() {
            return Err(shape_err!("bce_with_logits: target/weight length mismatch"));
        }
        if !(norm > 0.0) {
            return Err(config_err!("bce_with_logits: normalizer must be positive"));
        }
        let loss: f64 = xv
            .data()
            .iter()
            .zip(targets.iter().zip(weights))
            .map(|(&v, (&t, &w))| w * (v.max(0.0) - v * t + (-v.abs()).exp().ln_1p()))
            .sum();
        let op = Op::BceLogits {
            x,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            norm,
        };
        self.push(Tensor::scalar(loss / norm), op, &[x])
    }

    /// `Σ wᵢ · smoothL1_β(xᵢ - tᵢ) / norm`.
    pub fn smooth_l1(
        &mut self,
        x: Var,
        targets: &[f64],
        weights: &[f64],
        beta: f64,
        norm: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        if targets.len() != xv.len() || weights.len() != xv.len() {
            return Err(shape_err!("smooth_l1: target/weight length mismatch"));
        }
        if !(norm > 0.0) || !(beta > 0.0) {
            return Err(config_err!("smooth_l1: beta and normalizer must be positive"));
        }
        let loss: f64 = xv
            .data()
            .iter()
            .zip(targets.iter().zip(weights))
            .map(|(&v, (&t, &w))| if w == 0.0 { 0.0 } else { w * smooth_l1(v - t, beta) })
            .sum();
        let op = Op::SmoothL1 {
            x,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            norm,
            beta,
        };
        self.push(Tensor::scalar(loss / norm), op, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape(x), &[x])
    }

    /// Selects rows (first-dimension slices) of `x` by index, with repetition.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let rows = *xv.shape().first().ok_or_else(|| shape_err!("gather_rows on a scalar"))?;
        let stride = xv.len().checked_div(rows).unwrap_or(0);
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            if i >= rows {
                return Err(shape_err!("gather_rows: index {i} out of {rows}"));
            }
            data.extend_from_slice(&xv.data()[i * stride..(i + 1) * stride]);
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = idx.len();
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::Gather { x, idx: idx.to_vec() }, &[x])
    }

    /// Stacks tensors along the first dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err!("concat_rows of nothing"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.shape().is_empty() || pv.shape()[1..] != tail[..] {
                return Err(shape_err!("concat_rows: incompatible shape {:?}", pv.shape()));
            }
            rows += pv.shape()[0];
            data.extend_from_slice(pv.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec()), parts)
    }

    /// Bilinear ROI sampling of `feat [1,C,H,W]` on a `grid × grid` lattice of
    /// bin centers. Boxes are `[x1,y1,x2,y2]` in image pixels; `stride` maps
    /// them onto the feature frame, where cell `j` is centered at `j`.
    /// Returns `[R, C, grid, grid]`.
    pub fn roi_align(&mut self, feat: Var, boxes: &[[f64; 4]], stride: f64, grid: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(feat).dims4()?;
        if n != 1 {
            return Err(shape_err!("roi_align expects a single feature map, got batch {n}"));
        }
        if grid == 0 || !(stride > 0.0) {
            return Err(config_err!("roi_align: grid and stride must be positive"));
        }
        let mut taps = Vec::with_capacity(boxes.len() * grid * grid);
        for b in boxes {
            let bw = b[2] - b[0];
            let bh = b[3] - b[1];
            if !(bw > 0.0 && bh > 0.0 && bw * bh >= 1.0) {
                return Err(shape_err!("roi_align: degenerate box {b:?}"));
            }
            let (x0, y0) = (b[0] / stride - 0.5, b[1] / stride - 0.5);
            let (sx, sy) = (bw / stride / grid as f64, bh / stride / grid as f64);
            for i in 0..grid {
                let y = (y0 + (i as f64 + 0.5) * sy).clamp(0.0, (h - 1) as f64);
                let yl = (y.floor() as usize).min(h - 1);
                let yh = (yl + 1).min(h - 1);
                let ly = y - yl as f64;
                for j in 0..grid {
                    let x = (x0 + (j as f64 + 0.5) * sx).clamp(0.0, (w - 1) as f64);
                    let xl = (x.floor() as usize).min(w - 1);
                    let xh = (xl + 1).min(w - 1);
                    let lx = x - xl as f64;
                    taps.push([
                        (yl * w + xl, (1.0 - ly) * (1.0 - lx)),
                        (yl * w + xh, (1.0 - ly) * lx),
                        (yh * w + xl, ly * (1.0 - lx)),
                        (yh * w + xh, ly * lx),
                    ]);
                }
            }
        }
        let gg = grid * grid;
        let fd = self.value(feat).data();
        let mut out = vec![0.0; boxes.len() * c * gg];
        for r in 0..boxes.len() {
            let rt = &taps[r * gg..(r + 1) * gg];
            for ch in 0..c {
                let plane = &fd[ch * h * w..(ch + 1) * h * w];
                let o = &mut out[(r * c + ch) * gg..(r * c + ch + 1) * gg];
                for (dst, t) in o.iter_mut().zip(rt) {
                    *dst = t.iter().map(|&(p, wt)| wt * plane[p]).sum();
                }
            }
        }
        let value = Tensor::new(vec![boxes.len(), c, grid, grid], out)?;
        self.push(value, Op::RoiAlign { feat, taps, grid }, &[feat])
    }

    // ----------------------------------------------------------- backward

    /// Back-propagates from a scalar `loss`, adding into every reachable
    /// `requires_grad` leaf's gradient. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                if node.requires_grad {
                    match &mut self.leaf_grads[i] {
                        Some(acc) => acc.iter_mut().zip(&gy).for_each(|(a, g)| *a += g),
                        slot => *slot = Some(gy),
                    }
                }
                continue;
            }
            backprop_node(&self.nodes, i, &gy, &mut grads);
        }
        Ok(())
    }
}

/// Returns the accumulation buffer for `v`, or `None` when `v` needs no gradient.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]))
}

fn backprop_node(nodes: &[Node], i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    let y = node.value.data();
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            x,
            w,
            b,
            geom,
            batch,
            out_ch,
            cols,
        } => {
            let (k, hw, ckk) = (*out_ch, geom.col_cols(), geom.col_rows());
            let xin = geom.c * geom.h * geom.w;
            if let Some(dw) = slot(nodes, grads, *w) {
                for n in 0..*batch {
                    let src = if geom.is_pointwise() {
                        &val(*x)[n * xin..(n + 1) * xin]
                    } else {
                        &cols[n][..]
                    };
                    gemm(
                        k,
                        hw,
                        ckk,
                        1.0,
                        Mat::rows(&gy[n * k * hw..(n + 1) * k * hw], hw),
                        Mat::t(src, hw),
                        1.0,
                        dw,
                    );
                }
            }
            if let Some(b) = b {
                if let Some(db) = slot(nodes, grads, *b) {
                    for n in 0..*batch {
                        for (kk, row) in gy[n * k * hw..(n + 1) * k * hw].chunks(hw).enumerate() {
                            db[kk] += row.iter().sum::<f64>();
                        }
                    }
                }
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                let wv = val(*w);
                let mut dcols = if geom.is_pointwise() {
                    Vec::new()
                } else {
                    vec![0.0; ckk * hw]
                };
                for n in 0..*batch {
                    let gyn = Mat::rows(&gy[n * k * hw..(n + 1) * k * hw], hw);
                    let dxn = &mut dx[n * xin..(n + 1) * xin];
                    if geom.is_pointwise() {
                        gemm(ckk, k, hw, 1.0, Mat::t(wv, ckk), gyn, 1.0, dxn);
                    } else {
                        gemm(ckk, k, hw, 1.0, Mat::t(wv, ckk), gyn, 0.0, &mut dcols);
                        col2im_add(&dcols, geom, dxn);
                    }
                }
            }
        }
        Op::Linear { x, w, b } => {
            let [n, din] = [nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]];
            let dout = nodes[w.0].value.shape()[0];
            if let Some(dx) = slot(nodes, grads, *x) {
                gemm(n, dout, din, 1.0, Mat::rows(gy, dout), Mat::rows(val(*w), din), 1.0, dx);
            }
            if let Some(dw) = slot(nodes, grads, *w) {
                gemm(dout, n, din, 1.0, Mat::t(gy, dout), Mat::rows(val(*x), din), 1.0, dw);
            }
            if let Some(b) = b {
                if let Some(db) = slot(nodes, grads, *b) {
                    for row in gy.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
        }
        Op::Relu(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, &g), &v) in dx.iter_mut().zip(gy).zip(y) {
                    if v > 0.0 {
                        *d += g;
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, &g), &s) in dx.iter_mut().zip(gy).zip(y) {
                    *d += g * s * (1.0 - s);
                }
            }
        }
        Op::MaxPool2 { x, argmax } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for (&j, &g) in argmax.iter().zip(gy) {
                    dx[j] += g;
                }
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(d) = slot(nodes, grads, *v) {
                    d.iter_mut().zip(gy).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = slot(nodes, grads, *a) {
                d.iter_mut().zip(gy).for_each(|(d, g)| *d += g);
            }
            if let Some(d) = slot(nodes, grads, *b) {
                d.iter_mut().zip(gy).for_each(|(d, g)| *d -= g);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[a.0].value.clone(), nodes[b.0].value.clone());
            if let Some(d) = slot(nodes, grads, *a) {
                for ((d, g), o) in d.iter_mut().zip(gy).zip(bv.data()) {
                    *d += g * o;
                }
            }
            if let Some(d) = slot(nodes, grads, *b) {
                for ((d, g), o) in d.iter_mut().zip(gy).zip(av.data()) {
                    *d += g * o;
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(d) = slot(nodes, grads, *x) {
                d.iter_mut().zip(gy).for_each(|(d, g)| *d += g * c);
            }
        }
        Op::AddScalar(x) | Op::Reshape(x) => {
            if let Some(d) = slot(nodes, grads, *x) {
                d.iter_mut().zip(gy).for_each(|(d, g)| *d += g);
            }
        }
        Op::MulConst(x, c) => {
            if let Some(d) = slot(nodes, grads, *x) {
                for ((d, g), c) in d.iter_mut().zip(gy).zip(c) {
                    *d += g * c;
                }
            }
        }
        Op::Square(x) => {
            if let Some(d) = slot(nodes, grads, *x) {
                for ((d, g), v) in d.iter_mut().zip(gy).zip(val(*x)) {
                    *d += 2.0 * v * g;
                }
            }
        }
        Op::Sqrt(x) => {
            if let Some(d) = slot(nodes, grads, *x) {
                for ((d, g), s) in d.iter_mut().zip(gy).zip(y) {
                    if *s > 0.0 {
                        *d += g * 0.5 / s;
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(d) = slot(nodes, grads, *x) {
                d.iter_mut().for_each(|d| *d += gy[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(d) = slot(nodes, grads, *x) {
                let g = gy[0] / d.len() as f64;
                d.iter_mut().for_each(|d| *d += g);
            }
        }
        Op::SumLast(x) => {
            if let Some(d) = slot(nodes, grads, *x) {
                let width = d.len() / gy.len().max(1);
                for (row, g) in d.chunks_mut(width.max(1)).zip(gy) {
                    row.iter_mut().for_each(|d| *d += g);
                }
            }
        }
        Op::MeanSpatial(x) => {
            if let Some(d) = slot(nodes, grads, *x) {
                let hw = d.len() / gy.len();
                let inv = 1.0 / hw as f64;
                for (plane, g) in d.chunks_mut(hw).zip(gy) {
                    plane.iter_mut().for_each(|d| *d += g * inv);
                }
            }
        }
        Op::Softmax(x) => {
            if let Some(d) = slot(nodes, grads, *x) {
                let k = *node.value.shape().last().unwrap_or(&1);
                for ((dr, gr), yr) in d.chunks_mut(k).zip(gy.chunks(k)).zip(y.chunks(k)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += y * (g - dot);
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            probs,
            targets,
        } => {
            if let Some(d) = slot(nodes, grads, *logits) {
                let n = targets.len();
                let k = probs.len() / n;
                let s = gy[0] / n as f64;
                for (r, &t) in targets.iter().enumerate() {
                    for c in 0..k {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        d[r * k + c] += s * (probs[r * k + c] - onehot);
                    }
                }
            }
        }
        Op::BceLogits {
            x,
            targets,
            weights,
            norm,
        } => {
            if let Some(d) = slot(nodes, grads, *x) {
                let s = gy[0] / norm;
                for (j, v) in val(*x).iter().enumerate() {
                    d[j] += s * weights[j] * (sigmoid(*v) - targets[j]);
                }
            }
        }
        Op::SmoothL1 {
            x,
            targets,
            weights,
            norm,
            beta,
        } => {
            if let Some(d) = slot(nodes, grads, *x) {
                let s = gy[0] / norm;
                for (j, v) in val(*x).iter().enumerate() {
                    if weights[j] == 0.0 {
                        continue;
                    }
                    let r = v - targets[j];
                    let dr = if r.abs() < *beta { r / beta } else { r.signum() };
                    d[j] += s * weights[j] * dr;
                }
            }
        }
        Op::Grl { x, lambda } => {
            if let Some(d) = slot(nodes, grads, *x) {
                d.iter_mut().zip(gy).for_each(|(d, g)| *d += -lambda * g);
            }
        }
        Op::Gather { x, idx } => {
            if let Some(d) = slot(nodes, grads, *x) {
                let stride = if idx.is_empty() { 0 } else { gy.len() / idx.len() };
                for (r, &i) in idx.iter().enumerate() {
                    let src = &gy[r * stride..(r + 1) * stride];
                    d[i * stride..(i + 1) * stride]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::Concat(parts) => {
            let mut off = 0;
            for p in parts {
                let len = nodes[p.0].value.len();
                if let Some(d) = slot(nodes, grads, *p) {
                    d.iter_mut().zip(&gy[off..off + len]).for_each(|(d, g)| *d += g);
                }
                off += len;
            }
        }
        Op::RoiAlign { feat, taps, grid } => {
            if let Some(d) = slot(nodes, grads, *feat) {
                let [_, c, h, w] = [
                    0,
                    nodes[feat.0].value.shape()[1],
                    nodes[feat.0].value.shape()[2],
                    nodes[feat.0].value.shape()[3],
                ];
                let gg = grid * grid;
                let rois = taps.len() / gg;
                for r in 0..rois {
                    let rt = &taps[r * gg..(r + 1) * gg];
                    for ch in 0..c {
                        let plane = &mut d[ch * h * w..(ch + 1) * h * w];
                        let g = &gy[(r * c + ch) * gg..(r * c + ch + 1) * gg];
                        for (t, &gv) in rt.iter().zip(g) {
                            for &(p, wt) in t {
                                plane[p] += wt * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}
