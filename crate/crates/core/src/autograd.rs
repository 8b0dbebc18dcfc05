//! A small reverse-mode tape covering the operations a residual CNN with
//! adapters and binary masks needs.
//!
//! Every node owns its forward value. `Tape::backward` walks the nodes in
//! reverse creation order, which is a valid topological order because a node
//! can only reference nodes created before it.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        geom: ConvGeom,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        s: NodeId,
    },
    Threshold {
        latent: NodeId,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: NodeId,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Concat {
        parts: Vec<NodeId>,
    },
    Slice {
        x: NodeId,
        start: usize,
    },
    CrossEntropy {
        logits: NodeId,
        grad: Tensor,
    },
    QuatLoss {
        q: NodeId,
        grad: Tensor,
    },
    Sum {
        x: NodeId,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Batch statistics observed by a training-mode batch-norm node.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the estimator running statistics track.
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// 2-D convolution without bias. `x` is `[N, C, H, W]`, `w` is
    /// `[C_out, C, k, k]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, geom: ConvGeom) -> Result<NodeId> {
        let out = conv2d_forward(self.value(x), self.value(w), geom)?;
        Ok(self.push(out, Op::Conv2d { x, w, geom }))
    }

    /// Batch normalization over every axis except axis 1. In training mode the
    /// batch statistics are used; otherwise `running` supplies mean and
    /// variance.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape(format!("batch norm needs rank >= 2, got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        if gv.len() != c || bv.len() != c {
            return Err(Error::Shape(format!(
                "batch norm affine size {} / {} vs {c} channels",
                gv.len(),
                bv.len()
            )));
        }
        let data = xv.data();
        let count = (n * spatial) as f64;
        let (mean, var_biased, stats) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec(), None),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * spatial;
                        mean[ch] += data[base..base + spatial].iter().sum::<f64>();
                    }
                }
                for m in &mut mean {
                    *m /= count;
                }
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * spatial;
                        var[ch] += data[base..base + spatial]
                            .iter()
                            .map(|v| (v - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                }
                for v in &mut var {
                    *v /= count;
                }
                let unbiased = var
                    .iter()
                    .map(|v| if count > 1.0 { v * count / (count - 1.0) } else { *v })
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = Tensor::zeros(&shape);
        let mut out = Tensor::zeros(&shape);
        {
            let xh = xhat.data_mut();
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * spatial;
                    for i in base..base + spatial {
                        xh[i] = (data[i] - mean[ch]) * inv_std[ch];
                    }
                }
            }
        }
        {
            let xh = xhat.data();
            let o = out.data_mut();
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * spatial;
                    for i in base..base + spatial {
                        o[i] = gv[ch] * xh[i] + bv[ch];
                    }
                }
            }
        }
        let train = stats.is_some();
        let id = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        );
        Ok((id, stats))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!("add {:?} + {:?}", av.shape(), bv.shape())));
        }
        let out = av.zip_map(bv, |p, q| p + q);
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!("mul {:?} * {:?}", av.shape(), bv.shape())));
        }
        let out = av.zip_map(bv, |p, q| p * q);
        Ok(self.push(out, Op::Mul { a, b }))
    }

    /// Multiplies a tensor by a single-element node.
    pub fn scale(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(Error::Shape(format!("scale factor must be scalar, got {:?}", sv.shape())));
        }
        let k = sv.data()[0];
        let out = self.value(x).map(|v| v * k);
        Ok(self.push(out, Op::Scale { x, s }))
    }

    /// Hard threshold `1[latent >= tau]` whose backward pass is the identity
    /// (straight-through estimator).
    pub fn threshold_ste(&mut self, latent: NodeId, tau: f64) -> NodeId {
        let out = self.value(latent).map(|v| if v >= tau { 1.0 } else { 0.0 });
        self.push(out, Op::Threshold { latent })
    }

    pub fn max_pool(&mut self, x: NodeId, kernel: usize, geom: ConvGeom) -> Result<NodeId> {
        let xv = self.value(x);
        let [n, c, h, w] = dims4(xv)?;
        let ho = (h + 2 * geom.padding - kernel) / geom.stride + 1;
        let wo = (w + 2 * geom.padding - kernel) / geom.stride + 1;
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let mut argmax = vec![0usize; n * c * ho * wo];
        let data = xv.data();
        let o = out.data_mut();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = base;
                    for ky in 0..kernel {
                        let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if data[idx] > best {
                                best = data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let oi = (plane * ho + oy) * wo + ox;
                    o[oi] = best;
                    argmax[oi] = best_idx;
                }
            }
        }
        Ok(self.push(out, Op::MaxPool { x, argmax }))
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let [n, c, h, w] = dims4(xv)?;
        let hw = (h * w) as f64;
        let data = xv.data();
        let out: Vec<f64> = (0..n * c)
            .map(|p| data[p * h * w..(p + 1) * h * w].iter().sum::<f64>() / hw)
            .collect();
        let out = Tensor::new(vec![n, c], out)?;
        Ok(self.push(out, Op::GlobalAvgPool { x }))
    }

    /// `x: [N, D]`, `w: [O, D]`, `b: [O]` -> `[N, O]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.shape().len() != 2 || wv.shape().len() != 2 || wv.dim(1) != xv.dim(1) {
            return Err(Error::Shape(format!(
                "linear {:?} x {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (n, d, o) = (xv.dim(0), xv.dim(1), wv.dim(0));
        if bv.len() != o {
            return Err(Error::Shape(format!("linear bias {} vs {o} outputs", bv.len())));
        }
        let mut out = Tensor::zeros(&[n, o]);
        {
            let xa = ArrayView2::from_shape((n, d), xv.data()).map_err(shape_err)?;
            let wa = ArrayView2::from_shape((o, d), wv.data()).map_err(shape_err)?;
            let bias = bv.data().to_vec();
            let od = out.data_mut();
            for (i, v) in od.iter_mut().enumerate() {
                *v = bias[i % o];
            }
            let mut oa = ArrayViewMut2::from_shape((n, o), od).map_err(shape_err)?;
            general_mat_mul(1.0, &xa, &wa.t(), 1.0, &mut oa);
        }
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    /// Concatenates `[N, D_i]` tensors along axis 1, in argument order.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = self.value(*parts.first().ok_or(Error::Empty("concat"))?);
        let n = first.dim(0);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 2 || v.dim(0) != n {
                return Err(Error::Shape(format!("concat part {:?}", v.shape())));
            }
            widths.push(v.dim(1));
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for row in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(row));
            }
        }
        let out = Tensor::new(vec![n, total], data)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Columns `start..start + len` of a `[N, D]` tensor.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || start + len > xv.dim(1) {
            return Err(Error::Shape(format!(
                "slice {start}..{} of {:?}",
                start + len,
                xv.shape()
            )));
        }
        let n = xv.dim(0);
        let mut data = Vec::with_capacity(n * len);
        for row in 0..n {
            data.extend_from_slice(&xv.row(row)[start..start + len]);
        }
        let out = Tensor::new(vec![n, len], data)?;
        Ok(self.push(out, Op::Slice { x, start }))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 || lv.dim(0) != labels.len() {
            return Err(Error::Shape(format!(
                "cross entropy logits {:?} vs {} labels",
                lv.shape(),
                labels.len()
            )));
        }
        let (n, k) = (lv.dim(0), lv.dim(1));
        let mut grad = Tensor::zeros(&[n, k]);
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(Error::Shape(format!("label {label} out of range for {k} classes")));
            }
            let row = lv.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            loss += denom.ln() + max - row[label];
            let g = &mut grad.data_mut()[i * k..(i + 1) * k];
            for j in 0..k {
                g[j] = (row[j] - max).exp() / denom / n as f64;
            }
            g[label] -= 1.0 / n as f64;
        }
        let out = Tensor::scalar(loss / n as f64);
        Ok(self.push(out, Op::CrossEntropy { logits, grad }))
    }

    /// Mean of `1 - |q̂ · q_gt|` where `q̂` is the normalized `[N, 4]` output.
    pub fn quaternion_loss(&mut self, q: NodeId, targets: &[[f64; 4]]) -> Result<NodeId> {
        let qv = self.value(q);
        if qv.shape() != [targets.len(), 4] {
            return Err(Error::Shape(format!(
                "quaternion loss {:?} vs {} targets",
                qv.shape(),
                targets.len()
            )));
        }
        let n = targets.len();
        let mut grad = Tensor::zeros(&[n, 4]);
        let mut loss = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let row = qv.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let unit: Vec<f64> = row.iter().map(|v| v / norm).collect();
            let dot: f64 = unit.iter().zip(t).map(|(a, b)| a * b).sum();
            let sign = if dot >= 0.0 { 1.0 } else { -1.0 };
            loss += 1.0 - dot.abs();
            let g = &mut grad.data_mut()[i * 4..(i + 1) * 4];
            for j in 0..4 {
                g[j] = -sign * (t[j] - unit[j] * dot) / norm / n as f64;
            }
        }
        let out = Tensor::scalar(loss / n as f64);
        Ok(self.push(out, Op::QuatLoss { q, grad }))
    }

    /// Sum of every entry, as a single-element tensor.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum { x })
    }

    /// Reverse pass from a single-element `root`.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape("backward root must be a scalar".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv2d { x, w, geom } => {
                    let (dx, dw) = conv2d_backward(self.value(*x), self.value(*w), &g, *geom)?;
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                } => {
                    let shape = xhat.shape();
                    let (n, c) = (shape[0], shape[1]);
                    let spatial: usize = shape[2..].iter().product();
                    let gv = self.value(*gamma).data();
                    let gd = g.data();
                    let xh = xhat.data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * spatial;
                            for i in base..base + spatial {
                                dgamma[ch] += gd[i] * xh[i];
                                dbeta[ch] += gd[i];
                            }
                        }
                    }
                    let mut dx = Tensor::zeros(shape);
                    let dxd = dx.data_mut();
                    let m = (n * spatial) as f64;
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * spatial;
                            for i in base..base + spatial {
                                dxd[i] = if *train {
                                    // dbeta and dgamma are the sums of dy and dy*xhat.
                                    gv[ch] * inv_std[ch] / m
                                        * (m * gd[i] - dbeta[ch] - xh[i] * dgamma[ch])
                                } else {
                                    gd[i] * gv[ch] * inv_std[ch]
                                };
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, Tensor::new(vec![c], dgamma)?);
                    accumulate(&mut grads, *beta, Tensor::new(vec![c], dbeta)?);
                }
                Op::Relu { x } => {
                    let dx = self.value(*x).zip_map(&g, |v, d| if v > 0.0 { d } else { 0.0 });
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Mul { a, b } => {
                    let da = g.zip_map(self.value(*b), |d, v| d * v);
                    let db = g.zip_map(self.value(*a), |d, v| d * v);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale { x, s } => {
                    let k = self.value(*s).data()[0];
                    let ds: f64 = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(d, v)| d * v)
                        .sum();
                    accumulate(&mut grads, *x, g.map(|d| d * k));
                    accumulate(&mut grads, *s, Tensor::new(self.value(*s).shape().to_vec(), vec![ds])?);
                }
                Op::Threshold { latent } => {
                    accumulate(&mut grads, *latent, g);
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    let dxd = dx.data_mut();
                    for (oi, &src) in argmax.iter().enumerate() {
                        dxd[src] += g.data()[oi];
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::GlobalAvgPool { x } => {
                    let shape = self.value(*x).shape().to_vec();
                    let hw = shape[2] * shape[3];
                    let mut dx = Tensor::zeros(&shape);
                    let dxd = dx.data_mut();
                    for (p, d) in g.data().iter().enumerate() {
                        let v = d / hw as f64;
                        for e in &mut dxd[p * hw..(p + 1) * hw] {
                            *e = v;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n, d, o) = (xv.dim(0), xv.dim(1), wv.dim(0));
                    let ga = ArrayView2::from_shape((n, o), g.data()).map_err(shape_err)?;
                    let xa = ArrayView2::from_shape((n, d), xv.data()).map_err(shape_err)?;
                    let wa = ArrayView2::from_shape((o, d), wv.data()).map_err(shape_err)?;
                    let mut dx = Tensor::zeros(&[n, d]);
                    let mut dw = Tensor::zeros(&[o, d]);
                    {
                        let mut dxa =
                            ArrayViewMut2::from_shape((n, d), dx.data_mut()).map_err(shape_err)?;
                        general_mat_mul(1.0, &ga, &wa, 0.0, &mut dxa);
                        let mut dwa =
                            ArrayViewMut2::from_shape((o, d), dw.data_mut()).map_err(shape_err)?;
                        general_mat_mul(1.0, &ga.t(), &xa, 0.0, &mut dwa);
                    }
                    let mut db = vec![0.0; o];
                    for row in 0..n {
                        for (j, v) in db.iter_mut().enumerate() {
                            *v += g.data()[row * o + j];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, Tensor::new(vec![o], db)?);
                }
                Op::Concat { parts } => {
                    let n = g.dim(0);
                    let total = g.dim(1);
                    let mut offset = 0;
                    for &p in parts {
                        let width = self.value(p).dim(1);
                        let mut dp = Vec::with_capacity(n * width);
                        for row in 0..n {
                            let start = row * total + offset;
                            dp.extend_from_slice(&g.data()[start..start + width]);
                        }
                        accumulate(&mut grads, p, Tensor::new(vec![n, width], dp)?);
                        offset += width;
                    }
                }
                Op::Slice { x, start } => {
                    let shape = self.value(*x).shape().to_vec();
                    let (n, d) = (shape[0], shape[1]);
                    let len = g.dim(1);
                    let mut dx = Tensor::zeros(&shape);
                    for row in 0..n {
                        dx.data_mut()[row * d + start..row * d + start + len]
                            .copy_from_slice(&g.data()[row * len..(row + 1) * len]);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::CrossEntropy { logits, grad } => {
                    let k = g.data()[0];
                    accumulate(&mut grads, *logits, grad.map(|v| v * k));
                }
                Op::QuatLoss { q, grad } => {
                    let k = g.data()[0];
                    accumulate(&mut grads, *q, grad.map(|v| v * k));
                }
                Op::Sum { x } => {
                    let k = g.data()[0];
                    accumulate(&mut grads, *x, Tensor::full(self.value(*x).shape(), k));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn shape_err(e: ndarray::ShapeError) -> Error {
    Error::Shape(e.to_string())
}

fn dims4(t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(Error::Shape(format!("expected [N, C, H, W], got {s:?}"))),
    }
}

struct ConvDims {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    ho: usize,
    wo: usize,
}

fn conv_dims(x: &Tensor, w: &Tensor, geom: ConvGeom) -> Result<ConvDims> {
    let [n, c_in, h, wd] = dims4(x)?;
    let [c_out, wc, k, k2] = dims4(w)?;
    if wc != c_in || k != k2 {
        return Err(Error::Shape(format!(
            "conv input {:?} with weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    if h + 2 * geom.padding < k || wd + 2 * geom.padding < k || geom.stride == 0 {
        return Err(Error::Shape(format!("conv kernel {k} larger than input {h}x{wd}")));
    }
    Ok(ConvDims {
        n,
        c_in,
        h,
        w: wd,
        c_out,
        k,
        ho: (h + 2 * geom.padding - k) / geom.stride + 1,
        wo: (wd + 2 * geom.padding - k) / geom.stride + 1,
    })
}

fn is_pointwise(d: &ConvDims, geom: ConvGeom) -> bool {
    d.k == 1 && geom.stride == 1 && geom.padding == 0
}

fn im2col(sample: &[f64], d: &ConvDims, geom: ConvGeom, cols: &mut [f64]) {
    let hw_out = d.ho * d.wo;
    for c in 0..d.c_in {
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = (c * d.k + ky) * d.k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..d.ho {
                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    for ox in 0..d.wo {
                        let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                        dst[oy * d.wo + ox] =
                            if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                                0.0
                            } else {
                                sample[(c * d.h + iy as usize) * d.w + ix as usize]
                            };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], d: &ConvDims, geom: ConvGeom, sample: &mut [f64]) {
    let hw_out = d.ho * d.wo;
    for c in 0..d.c_in {
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = (c * d.k + ky) * d.k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..d.ho {
                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for ox in 0..d.wo {
                        let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        sample[(c * d.h + iy as usize) * d.w + ix as usize] += src[oy * d.wo + ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, geom: ConvGeom) -> Result<Tensor> {
    let d = conv_dims(x, w, geom)?;
    let patch = d.c_in * d.k * d.k;
    let hw_out = d.ho * d.wo;
    let mut out = Tensor::zeros(&[d.n, d.c_out, d.ho, d.wo]);
    let wa = ArrayView2::from_shape((d.c_out, patch), w.data()).map_err(shape_err)?;
    let pointwise = is_pointwise(&d, geom);
    let mut cols = vec![0.0; if pointwise { 0 } else { patch * hw_out }];
    let in_stride = d.c_in * d.h * d.w;
    let out_stride = d.c_out * hw_out;
    for s in 0..d.n {
        let sample = &x.data()[s * in_stride..(s + 1) * in_stride];
        let colv = if pointwise {
            ArrayView2::from_shape((patch, hw_out), sample).map_err(shape_err)?
        } else {
            im2col(sample, &d, geom, &mut cols);
            ArrayView2::from_shape((patch, hw_out), &cols[..]).map_err(shape_err)?
        };
        let dst = &mut out.data_mut()[s * out_stride..(s + 1) * out_stride];
        let mut oa = ArrayViewMut2::from_shape((d.c_out, hw_out), dst).map_err(shape_err)?;
        general_mat_mul(1.0, &wa, &colv, 0.0, &mut oa);
    }
    Ok(out)
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad: &Tensor,
    geom: ConvGeom,
) -> Result<(Tensor, Tensor)> {
    let d = conv_dims(x, w, geom)?;
    let patch = d.c_in * d.k * d.k;
    let hw_out = d.ho * d.wo;
    let pointwise = is_pointwise(&d, geom);
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let wa = ArrayView2::from_shape((d.c_out, patch), w.data()).map_err(shape_err)?;
    let mut cols = vec![0.0; patch * hw_out];
    let mut dcols = vec![0.0; patch * hw_out];
    let in_stride = d.c_in * d.h * d.w;
    let out_stride = d.c_out * hw_out;
    for s in 0..d.n {
        let sample = &x.data()[s * in_stride..(s + 1) * in_stride];
        let gs = ArrayView2::from_shape((d.c_out, hw_out), &grad.data()[s * out_stride..(s + 1) * out_stride])
            .map_err(shape_err)?;
        if pointwise {
            cols.copy_from_slice(sample);
        } else {
            im2col(sample, &d, geom, &mut cols);
        }
        {
            let colv = ArrayView2::from_shape((patch, hw_out), &cols[..]).map_err(shape_err)?;
            let mut dwa =
                ArrayViewMut2::from_shape((d.c_out, patch), dw.data_mut()).map_err(shape_err)?;
            general_mat_mul(1.0, &gs, &colv.t(), 1.0, &mut dwa);
        }
        {
            let mut dca =
                ArrayViewMut2::from_shape((patch, hw_out), &mut dcols[..]).map_err(shape_err)?;
            general_mat_mul(1.0, &wa.t(), &gs, 0.0, &mut dca);
        }
        let dst = &mut dx.data_mut()[s * in_stride..(s + 1) * in_stride];
        if pointwise {
            for (a, b) in dst.iter_mut().zip(&dcols) {
                *a += b;
            }
        } else {
            col2im(&dcols, &d, geom, dst);
        }
    }
    Ok((dx, dw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type Graph<'a> = dyn Fn(&mut Tape, &[NodeId]) -> NodeId + 'a;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central finite differences with respect to every entry of `inputs[which]`.
    fn numeric_grad(inputs: &[Tensor], which: usize, f: &Graph<'_>) -> Vec<f64> {
        let h = 1e-6;
        let eval = |vals: &[Tensor]| {
            let mut tape = Tape::new();
            let ids: Vec<_> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
            let out = f(&mut tape, &ids);
            tape.value(out).data()[0]
        };
        (0..inputs[which].len())
            .map(|i| {
                let mut plus = inputs.to_vec();
                plus[which].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[which].data_mut()[i] -= h;
                (eval(&plus) - eval(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn check_grads(inputs: &[Tensor], f: &Graph<'_>) {
        let mut tape = Tape::new();
        let ids: Vec<_> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = f(&mut tape, &ids);
        let grads = tape.backward(out).unwrap();
        for (k, id) in ids.iter().enumerate() {
            let analytic = grads
                .get(*id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
            let numeric = numeric_grad(inputs, k, f);
            for (i, (a, n)) in analytic.data().iter().zip(&numeric).enumerate() {
                assert!(
                    (a - n).abs() <= 1e-5 * (1.0 + n.abs()),
                    "input {k} entry {i}: analytic {a} vs numeric {n}"
                );
            }
        }
    }

    /// Random linear functional so every output entry gets a distinct weight.
    fn weighted_sum(tape: &mut Tape, x: NodeId, seed: u64) -> NodeId {
        let shape = tape.value(x).shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wn = tape.leaf(random(&shape, &mut rng));
        let prod = tape.mul(x, wn).unwrap();
        tape.sum(prod)
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, stride, padding) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0), (7, 2, 3)] {
            let x = random(&[2, 3, 6, 6], &mut rng);
            let w = random(&[4, 3, k, k], &mut rng);
            check_grads(&[x, w], &|tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], ConvGeom { stride, padding }).unwrap();
                weighted_sum(tape, y, 7)
            });
        }
    }

    #[test]
    fn pointwise_conv_matches_channel_mixing() {
        let x = Tensor::new(vec![1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::new(vec![1, 2, 1, 1], vec![10.0, 100.0]).unwrap();
        let y = conv2d_forward(&x, &w, ConvGeom { stride: 1, padding: 0 }).unwrap();
        assert_eq!(y.data(), &[310.0, 420.0]);
    }

    #[test]
    fn batch_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[3, 2, 2, 2], &mut rng);
        let g = random(&[2], &mut rng);
        let b = random(&[2], &mut rng);
        check_grads(&[x.clone(), g.clone(), b.clone()], &|tape, ids| {
            let (y, _) = tape.batch_norm(ids[0], ids[1], ids[2], None).unwrap();
            weighted_sum(tape, y, 3)
        });
        let mean = [0.1, -0.2];
        let var = [0.5, 2.0];
        check_grads(&[x, g, b], &|tape, ids| {
            let (y, _) = tape
                .batch_norm(ids[0], ids[1], ids[2], Some((&mean, &var)))
                .unwrap();
            weighted_sum(tape, y, 3)
        });
    }

    #[test]
    fn batch_norm_reports_unbiased_batch_variance() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let g = tape.leaf(Tensor::full(&[1], 1.0));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let (_, stats) = tape.batch_norm(x, g, b, None).unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![2.5]);
        assert!((stats.var[0] - 5.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn elementwise_and_pooling_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[2, 2, 4, 4], &mut rng);
        let b = random(&[2, 2, 4, 4], &mut rng);
        let s = random(&[1], &mut rng);
        check_grads(&[a, b, s], &|tape, ids| {
            let m = tape.mul(ids[0], ids[1]).unwrap();
            let r = tape.relu(m);
            let sc = tape.scale(r, ids[2]).unwrap();
            let sum = tape.add(sc, ids[0]).unwrap();
            let p = tape.max_pool(sum, 3, ConvGeom { stride: 2, padding: 1 }).unwrap();
            let gp = tape.global_avg_pool(p).unwrap();
            weighted_sum(tape, gp, 5)
        });
    }

    #[test]
    fn head_and_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x1 = random(&[3, 2], &mut rng);
        let x2 = random(&[3, 3], &mut rng);
        let w = random(&[7, 5], &mut rng);
        let b = random(&[7], &mut rng);
        let h = 0.5f64.sqrt();
        let targets = [[1.0, 0.0, 0.0, 0.0], [h, 0.0, 0.0, h], [0.0, 0.0, 0.0, -1.0]];
        check_grads(&[x1, x2, w, b], &|tape, ids| {
            let f = tape.concat(&[ids[0], ids[1]]).unwrap();
            let out = tape.linear(f, ids[2], ids[3]).unwrap();
            let cls = tape.slice_cols(out, 0, 3).unwrap();
            let quat = tape.slice_cols(out, 3, 4).unwrap();
            let ce = tape.cross_entropy(cls, &[0, 2, 1]).unwrap();
            let ql = tape.quaternion_loss(quat, &targets).unwrap();
            tape.add(ce, ql).unwrap()
        });
    }

    #[test]
    fn threshold_is_binary_and_straight_through() {
        let mut tape = Tape::new();
        let latent = tape.leaf(Tensor::new(vec![3], vec![-0.1, 0.2, 0.0]).unwrap());
        let w = tape.leaf(Tensor::new(vec![3], vec![2.0, -3.0, 5.0]).unwrap());
        let m = tape.threshold_ste(latent, 0.005);
        assert_eq!(tape.value(m).data(), &[0.0, 1.0, 0.0]);
        let masked = tape.mul(m, w).unwrap();
        let total = tape.sum(masked);
        let grads = tape.backward(total).unwrap();
        // d/d latent of sum(mask * W) under the straight-through rule is W.
        assert_eq!(grads.get(latent).unwrap().data(), &[2.0, -3.0, 5.0]);
    }
}
