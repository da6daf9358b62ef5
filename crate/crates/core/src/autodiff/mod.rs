//! Reverse-mode differentiation over a recorded graph of tensor operations.
//!
//! A [`Graph`] is built by a forward pass: every operation appends a node whose
//! inputs were created earlier, so creation order is a topological order and
//! [`Graph::backward`] simply walks the node list in reverse. Backward of each
//! node *adds* into its inputs' gradient buffers, which is what makes a tensor
//! consumed by several operations (for example the shared trunk feeding both
//! heads) receive the sum of its consumers' gradients.
//!
//! Only the operations the sibling network needs are provided. Image-like
//! tensors are `[B, C, H, W]`.

mod kernels;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::ConvGeom;

/// Batch-norm numerical floor added to the variance.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in a running-stat update.
pub const BN_MOMENTUM: f64 = 0.9;
/// Probabilities are clamped below at this value before taking a log.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    Softmax(Var),
    Add(Var, Var),
    SelectChannel {
        x: Var,
        channel: usize,
    },
    ScaleByMap {
        map: Var,
        x: Var,
    },
    WeightedNll {
        probs: Var,
        coeffs: Vec<(usize, f64)>,
    },
    SumSquares(Vec<Var>),
    Sum(Var),
    Scale {
        x: Var,
        factor: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Mean and (unbiased) variance of one batch, per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Running statistics used by batch norm in evaluation mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// `running = 0.9 * running + 0.1 * batch`.
    pub fn update(&mut self, batch: &BatchStats) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
    }
}

/// Batch-norm normalization source.
#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a> {
    /// Normalize by the statistics of the current batch.
    Train,
    /// Normalize by stored running statistics.
    Eval(&'a RunningStats),
}

/// A recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
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

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant: no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// A trainable leaf: its gradient is populated by [`Graph::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Cross-correlation. `w` is `[C_out, C_in, k, k]`, `b` is `[C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let [batch, c_in, h, wd] = self.value(x).dims4("conv2d")?;
        let geom = match self.value(w).shape() {
            &[c_out, wc, k1, k2] if k1 == k2 && wc == c_in => ConvGeom::new(c_in, h, wd, c_out, k1, stride, padding)
                .ok_or_else(|| Error::dim("conv2d", format!("kernel {k1} too large for {h}x{wd}")))?,
            s => {
                return Err(Error::dim(
                    "conv2d",
                    format!("kernel {s:?} incompatible with {c_in} input channels"),
                ))
            }
        };
        let bias = self.check_bias("conv2d", b, geom.c_out)?;
        let out = kernels::conv_forward(self.value(x).data(), batch, self.value(w).data(), bias, &geom);
        let rg = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let t = Tensor::new(&[batch, geom.c_out, geom.ho, geom.wo], out)?;
        Ok(self.push(t, rg, Op::Conv2d { x, w, b, geom }))
    }

    /// Transposed convolution with kernel size `2 * stride`, producing exactly
    /// `stride * H` by `stride * W`. `w` is `[C_in, C_out, 2s, 2s]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        if stride != 2 && stride != 4 {
            return Err(Error::Config(format!("transposed convolution stride must be 2 or 4, got {stride}")));
        }
        let [batch, c_in, h, wd] = self.value(x).dims4("conv_transpose2d")?;
        let k = 2 * stride;
        let c_out = match self.value(w).shape() {
            &[wc, c_out, k1, k2] if wc == c_in && k1 == k && k2 == k => c_out,
            s => {
                return Err(Error::dim(
                    "conv_transpose2d",
                    format!("kernel {s:?} incompatible with {c_in} channels and stride {stride}"),
                ))
            }
        };
        // The forward strided conv maps [c_out, sH, sW] -> [c_in, H, W].
        let geom = ConvGeom::new(c_out, stride * h, stride * wd, c_in, k, stride, stride / 2)
            .expect("valid transposed geometry");
        debug_assert_eq!((geom.ho, geom.wo), (h, wd));
        let bias = self.check_bias("conv_transpose2d", b, c_out)?;
        let out = kernels::conv_transpose_forward(self.value(x).data(), batch, self.value(w).data(), bias, &geom);
        let rg = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let t = Tensor::new(&[batch, c_out, stride * h, stride * wd], out)?;
        Ok(self.push(t, rg, Op::ConvTranspose2d { x, w, b, geom }))
    }

    fn check_bias(&self, op: &'static str, b: Option<Var>, channels: usize) -> Result<Option<&[f64]>> {
        match b {
            None => Ok(None),
            Some(b) => {
                let t = self.value(b);
                if t.shape() != [channels] {
                    return Err(Error::dim(op, format!("bias {:?} for {channels} channels", t.shape())));
                }
                Ok(Some(t.data()))
            }
        }
    }

    /// Per-channel batch normalization over the batch and spatial axes.
    /// In train mode the batch statistics are returned for the caller to fold
    /// into its running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let [batch, c, h, w] = self.value(x).dims4("batch_norm")?;
        for v in [gamma, beta] {
            if self.value(v).shape() != [c] {
                return Err(Error::dim("batch_norm", format!("affine {:?} for {c} channels", self.value(v).shape())));
            }
        }
        let plane = h * w;
        let n = batch * plane;
        let xd = self.value(x).data();
        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                if n < 2 {
                    return Err(Error::dim("batch_norm", "train mode needs at least 2 values per channel"));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for b in 0..batch {
                    for ch in 0..c {
                        let s = &xd[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                        mean[ch] += s.iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                for b in 0..batch {
                    for ch in 0..c {
                        let s = &xd[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                        var[ch] += s.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                let unbiased = var.iter().map(|v| v * n as f64 / (n - 1) as f64).collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BatchNormMode::Eval(rs) => {
                if rs.mean.len() != c || rs.var.len() != c {
                    return Err(Error::dim("batch_norm", "running statistics channel count"));
                }
                (rs.mean.clone(), rs.var.clone(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            for ch in 0..c {
                let range = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                for i in range {
                    let xh = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let t = Tensor::new(&[batch, c, h, w], out)?;
        let batch_stats = stats.is_some();
        let v = self.push(
            t,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        );
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let t = Tensor::new(src.shape(), data).expect("same shape");
        let rg = self.needs(x);
        self.push(t, rg, Op::Relu(x))
    }

    /// Softmax over the channel axis at every pixel, max-subtracted.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let [batch, c, h, w] = self.value(x).dims4("softmax_channels")?;
        if c < 2 {
            return Err(Error::dim("softmax_channels", format!("need at least 2 channels, got {c}")));
        }
        let plane = h * w;
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            let base = b * c * plane;
            for p in 0..plane {
                let idx = |ch: usize| base + ch * plane + p;
                let m = (0..c).map(|ch| xd[idx(ch)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for ch in 0..c {
                    let e = (xd[idx(ch)] - m).exp();
                    out[idx(ch)] = e;
                    z += e;
                }
                for ch in 0..c {
                    out[idx(ch)] /= z;
                }
            }
        }
        let rg = self.needs(x);
        let t = Tensor::new(&[batch, c, h, w], out)?;
        Ok(self.push(t, rg, Op::Softmax(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(t, rg, Op::Add(a, b)))
    }

    /// Channel `channel` of a `[B,C,H,W]` tensor as `[B,1,H,W]`.
    pub fn select_channel(&mut self, x: Var, channel: usize) -> Result<Var> {
        let [batch, c, h, w] = self.value(x).dims4("select_channel")?;
        if channel >= c {
            return Err(Error::dim("select_channel", format!("channel {channel} of {c}")));
        }
        let plane = h * w;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(batch * plane);
        for b in 0..batch {
            let start = (b * c + channel) * plane;
            out.extend_from_slice(&xd[start..start + plane]);
        }
        let rg = self.needs(x);
        let t = Tensor::new(&[batch, 1, h, w], out)?;
        Ok(self.push(t, rg, Op::SelectChannel { x, channel }))
    }

    /// Multiplies every channel of `x` (`[B,C,H,W]`) by `map` (`[B,1,H,W]`).
    pub fn scale_by_map(&mut self, map: Var, x: Var) -> Result<Var> {
        let [batch, c, h, w] = self.value(x).dims4("scale_by_map")?;
        if self.value(map).shape() != [batch, 1, h, w] {
            return Err(Error::dim(
                "scale_by_map",
                format!("map {:?} for input {:?}", self.value(map).shape(), self.value(x).shape()),
            ));
        }
        let plane = h * w;
        let (md, xd) = (self.value(map).data(), self.value(x).data());
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            for ch in 0..c {
                for p in 0..plane {
                    let i = (b * c + ch) * plane + p;
                    out[i] = md[b * plane + p] * xd[i];
                }
            }
        }
        let rg = self.needs(map) || self.needs(x);
        let t = Tensor::new(&[batch, c, h, w], out)?;
        Ok(self.push(t, rg, Op::ScaleByMap { map, x }))
    }

    /// Weighted negative log-likelihood of per-pixel labels:
    /// `-(1/normalizer) * sum_i include_i * weight[label_i] * log(max(p_i[label_i], LOG_CLAMP))`.
    ///
    /// `labels` and `include` are indexed by pixel in `[B,H,W]` order. A zero
    /// normalizer (nothing included) yields a zero loss with zero gradient.
    pub fn weighted_nll(
        &mut self,
        probs: Var,
        labels: &[usize],
        include: &[bool],
        class_weights: &[f64],
        normalizer: f64,
    ) -> Result<Var> {
        let [batch, c, h, w] = self.value(probs).dims4("weighted_nll")?;
        let plane = h * w;
        if labels.len() != batch * plane || include.len() != labels.len() {
            return Err(Error::dim(
                "weighted_nll",
                format!("{} labels / {} gates for {batch}x{h}x{w} pixels", labels.len(), include.len()),
            ));
        }
        if class_weights.len() != c {
            return Err(Error::dim("weighted_nll", format!("{} class weights for {c} channels", class_weights.len())));
        }
        let pd = self.value(probs).data();
        let mut loss = 0.0;
        let mut coeffs = Vec::new();
        if normalizer > 0.0 {
            for (i, (&label, &inc)) in labels.iter().zip(include).enumerate() {
                if !inc {
                    continue;
                }
                if label >= c {
                    return Err(Error::dim("weighted_nll", format!("label {label} with {c} channels")));
                }
                let (b, p) = (i / plane, i % plane);
                let idx = (b * c + label) * plane + p;
                let pr = pd[idx];
                let wgt = class_weights[label];
                loss -= wgt * pr.max(LOG_CLAMP).ln();
                let coef = if pr > LOG_CLAMP { -wgt / (normalizer * pr) } else { 0.0 };
                coeffs.push((idx, coef));
            }
            loss /= normalizer;
        }
        let rg = self.needs(probs);
        Ok(self.push(Tensor::scalar(loss), rg, Op::WeightedNll { probs, coeffs }))
    }

    /// Sum of squares of every element of `xs`, as a scalar.
    pub fn sum_squares(&mut self, xs: &[Var]) -> Var {
        let s: f64 = xs
            .iter()
            .map(|&v| self.value(v).data().iter().map(|x| x * x).sum::<f64>())
            .sum();
        let rg = xs.iter().any(|&v| self.needs(v));
        self.push(Tensor::scalar(s), rg, Op::SumSquares(xs.to_vec()))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.needs(x);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let src = self.value(x);
        let t = Tensor::new(src.shape(), src.data().iter().map(|v| v * factor).collect()).expect("same shape");
        let rg = self.needs(x);
        self.push(t, rg, Op::Scale { x, factor })
    }

    /// Reverse pass from a scalar `loss`. Populates gradients on every
    /// trainable leaf reachable from it. A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::StaleGraph);
        }
        let shape = self.value(loss).shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.consumed = true;
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
        if !self.needs(loss) {
            return Ok(());
        }
        self.nodes[loss.0].value.accumulate_grad(&[1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = node.value.grad() else { continue };
            let contributions = self.node_backward(i, dy);
            // Intermediate gradients are no longer needed.
            self.nodes[i].value.zero_grad();
            for (v, g) in contributions {
                if self.needs(v) {
                    self.nodes[v.0].value.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, dy: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, ref geom } => {
                let batch = self.value(x).shape()[0];
                let gr = kernels::conv_backward(
                    self.value(x).data(),
                    batch,
                    self.value(w).data(),
                    dy,
                    geom,
                    self.needs(x),
                    self.needs(w),
                    b.is_some_and(|b| self.needs(b)),
                );
                push_grads(&mut out, x, w, b, gr);
            }
            &Op::ConvTranspose2d { x, w, b, ref geom } => {
                let batch = self.value(x).shape()[0];
                let gr = kernels::conv_transpose_backward(
                    self.value(x).data(),
                    batch,
                    self.value(w).data(),
                    dy,
                    geom,
                    self.needs(x),
                    self.needs(w),
                    b.is_some_and(|b| self.needs(b)),
                );
                push_grads(&mut out, x, w, b, gr);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let [batch, c, h, w] = node.value.dims4("batch_norm").expect("rank 4");
                let plane = h * w;
                let n = (batch * plane) as f64;
                let g = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..batch {
                    for ch in 0..c {
                        let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                        dgamma[ch] += dy[r.clone()].iter().zip(&xhat[r.clone()]).map(|(a, b)| a * b).sum::<f64>();
                        dbeta[ch] += dy[r].iter().sum::<f64>();
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; dy.len()];
                    for b in 0..batch {
                        for ch in 0..c {
                            let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                            for j in r {
                                dx[j] = if *batch_stats {
                                    g[ch] * inv_std[ch] / n * (n * dy[j] - dbeta[ch] - xhat[j] * dgamma[ch])
                                } else {
                                    g[ch] * inv_std[ch] * dy[j]
                                };
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            &Op::Relu(x) => {
                let xd = self.value(x).data();
                let dx = xd.iter().zip(dy).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect();
                out.push((x, dx));
            }
            &Op::Softmax(x) => {
                let [batch, c, h, w] = node.value.dims4("softmax").expect("rank 4");
                let plane = h * w;
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for b in 0..batch {
                    let base = b * c * plane;
                    for p in 0..plane {
                        let dot: f64 = (0..c).map(|ch| dy[base + ch * plane + p] * y[base + ch * plane + p]).sum();
                        for ch in 0..c {
                            let j = base + ch * plane + p;
                            dx[j] = y[j] * (dy[j] - dot);
                        }
                    }
                }
                out.push((x, dx));
            }
            &Op::Add(a, b) => {
                out.push((a, dy.to_vec()));
                out.push((b, dy.to_vec()));
            }
            &Op::SelectChannel { x, channel } => {
                let [batch, c, h, w] = self.value(x).dims4("select").expect("rank 4");
                let plane = h * w;
                let mut dx = vec![0.0; batch * c * plane];
                for b in 0..batch {
                    let start = (b * c + channel) * plane;
                    dx[start..start + plane].copy_from_slice(&dy[b * plane..(b + 1) * plane]);
                }
                out.push((x, dx));
            }
            &Op::ScaleByMap { map, x } => {
                let [batch, c, h, w] = self.value(x).dims4("scale_by_map").expect("rank 4");
                let plane = h * w;
                let (md, xd) = (self.value(map).data(), self.value(x).data());
                let mut dmap = vec![0.0; batch * plane];
                let mut dx = vec![0.0; xd.len()];
                for b in 0..batch {
                    for ch in 0..c {
                        for p in 0..plane {
                            let j = (b * c + ch) * plane + p;
                            dmap[b * plane + p] += dy[j] * xd[j];
                            dx[j] = dy[j] * md[b * plane + p];
                        }
                    }
                }
                out.push((map, dmap));
                out.push((x, dx));
            }
            Op::WeightedNll { probs, coeffs } => {
                let mut dp = vec![0.0; self.value(*probs).len()];
                for &(idx, coef) in coeffs {
                    dp[idx] += coef * dy[0];
                }
                out.push((*probs, dp));
            }
            Op::SumSquares(xs) => {
                for &v in xs {
                    let g = self.value(v).data().iter().map(|x| 2.0 * x * dy[0]).collect();
                    out.push((v, g));
                }
            }
            &Op::Sum(x) => out.push((x, vec![dy[0]; self.value(x).len()])),
            &Op::Scale { x, factor } => out.push((x, dy.iter().map(|g| g * factor).collect())),
        }
        out
    }
}

fn push_grads(out: &mut Vec<(Var, Vec<f64>)>, x: Var, w: Var, b: Option<Var>, gr: kernels::ConvGrads) {
    if let Some(dx) = gr.dx {
        out.push((x, dx));
    }
    if let Some(dw) = gr.dw {
        out.push((w, dw));
    }
    if let (Some(b), Some(db)) = (b, gr.db) {
        out.push((b, db));
    }
}

#[cfg(test)]
mod tests;
