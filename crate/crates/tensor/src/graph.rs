//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node to the graph; nodes are stored in creation order,
//! so the tape is topologically sorted by construction and `backward` is a
//! single reverse sweep.

use crate::error::{config_err, shape_err, usage_err, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::{gemm, MatLayout, Scalar};
use crate::tensor::{check_extents, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EwiseKind {
    Add,
    Mul,
}

/// Running statistics kept by batch normalisation for inference mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels], momentum: 0.1 }
    }
}

/// Normalisation flavour for [`Graph::norm`].
#[derive(Debug)]
pub enum NormKind<'a> {
    /// Normalise over the last axis.
    Layer,
    /// Normalise per channel (axis 1) over all other axes. In training mode
    /// the batch statistics are used and folded into `stats`; otherwise
    /// `stats` is applied as a fixed affine map.
    Batch { stats: &'a mut RunningStats, training: bool },
}

enum Op<E> {
    Leaf,
    MatMul { a: Var, b: Var },
    Conv { x: Var, w: Var, bias: Option<Var>, geom: ConvGeom },
    AddBias { x: Var, bias: Var, axis: usize },
    AddTrailing { x: Var, y: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: E },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<E>, inv_std: Vec<E> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<E>, inv_std: Vec<E> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, mean: Vec<E>, inv_std: Vec<E> },
    Act { x: Var, kind: Activation },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Pad { x: Var, pads: Vec<(usize, usize)> },
    Crop { x: Var, ranges: Vec<(usize, usize)> },
    Repeat { x: Var, axis: usize, factor: usize },
    Sum { x: Var },
    Mean { x: Var },
    BceWithLogits { logits: Var, target: Tensor<E> },
}

struct Node<E> {
    value: Tensor<E>,
    grad: Option<Tensor<E>>,
    requires_grad: bool,
    op: Op<E>,
}

/// A computation graph (tape). Not shared across threads; build one per
/// forward pass.
pub struct Graph<E: Scalar> {
    nodes: Vec<Node<E>>,
    grad_enabled: bool,
    backward_done: bool,
    macs: u64,
}

impl<E: Scalar> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_cdf<E: Scalar>(x: E) -> E {
    let half = E::from_f64_lossy(0.5);
    half * (E::one() + (x * E::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_pdf<E: Scalar>(x: E) -> E {
    let c = E::from_f64_lossy(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    c * (-(x * x) * E::from_f64_lossy(0.5)).exp()
}

fn sigmoid<E: Scalar>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

fn activation_forward<E: Scalar>(x: E, kind: Activation) -> E {
    match kind {
        Activation::Relu => x.max(E::zero()),
        Activation::Gelu => x * gelu_cdf(x),
        Activation::Sigmoid => sigmoid(x),
    }
}

/// Batch decomposition of a matmul operand `[..., rows, cols]`.
fn matmul_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err!("matmul operand needs rank >= 2, got {shape:?}"));
    }
    let r = shape.len();
    Ok((shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1]))
}

impl<E: Scalar> Graph<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true, backward_done: false, macs: 0 }
    }

    /// A graph that records no backward information (inference).
    pub fn no_grad() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates executed by matmul/convolution kernels so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node { value, grad: None, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<E> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(E::zero()))
    }

    /// Drops the value of an intermediate that will not be read again.
    /// Only honoured on graphs without gradient recording; a no-op otherwise.
    pub fn release(&mut self, v: Var) {
        if !self.grad_enabled {
            self.nodes[v.0].value = Tensor::scalar(E::zero());
        }
    }

    /// Discards every node created after the first `len`, so a graph holding
    /// bound parameters can be reused across forward passes. Handles to the
    /// discarded nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor<E>, inputs: &[Var], op: Op<E>) -> Var {
        debug_assert!(
            value.is_finite() || !inputs.iter().all(|&i| self.nodes[i.0].value.is_finite()),
            "non-finite output from finite inputs"
        );
        let requires_grad = self.grad_enabled && inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[E] {
        self.nodes[v.0].value.data()
    }

    // ---------------------------------------------------------------- linear algebra

    /// Batched matrix product `[.., m, k] x [.., k, n]`. Batch extents must be
    /// equal, or one operand must be a plain matrix broadcast over the other's
    /// batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (ba, m, k) = matmul_dims(&sa)?;
        let (bb, k2, n) = matmul_dims(&sb)?;
        if k != k2 {
            return Err(shape_err!("matmul inner extents differ: {sa:?} x {sb:?}"));
        }
        let batch_shape = if sa.len() == 2 {
            sb[..sb.len() - 2].to_vec()
        } else if sb.len() == 2 || sa[..sa.len() - 2] == sb[..sb.len() - 2] {
            sa[..sa.len() - 2].to_vec()
        } else {
            return Err(shape_err!("matmul batch extents not broadcastable: {sa:?} x {sb:?}"));
        };
        let batch = ba.max(bb);
        let mut out = vec![E::zero(); batch * m * n];
        {
            let (da, db) = (self.data(a), self.data(b));
            for i in 0..batch {
                let oa = if ba == 1 { 0 } else { i * m * k };
                let ob = if bb == 1 { 0 } else { i * k * n };
                gemm(
                    m,
                    k,
                    n,
                    E::one(),
                    da,
                    MatLayout::row_major(oa, k),
                    db,
                    MatLayout::row_major(ob, n),
                    E::zero(),
                    &mut out,
                    MatLayout::row_major(i * m * n, n),
                );
            }
        }
        self.macs += (batch * m * k * n) as u64;
        let mut shape = batch_shape;
        shape.extend([m, n]);
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(value, &[a, b], Op::MatMul { a, b }))
    }

    /// `x W + b` over the last axis of `x` with `W: [in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => {
                let axis = self.shape(y).len() - 1;
                self.add_bias(y, b, axis)
            }
            None => Ok(y),
        }
    }

    fn conv_impl(&mut self, x: Var, w: Var, bias: Option<Var>, geom: ConvGeom, out_shape: Vec<usize>) -> Result<Var> {
        if let Some(b) = bias {
            if self.shape(b) != [geom.cout] {
                return Err(shape_err!("bias shape {:?} != [{}]", self.shape(b), geom.cout));
            }
        }
        let out = kernels::conv_forward(self.data(x), self.data(w), bias.map(|b| self.data(b)), &geom);
        self.macs += geom.macs();
        let value = Tensor::from_vec(&out_shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(value, &inputs, Op::Conv { x, w, bias, geom }))
    }

    /// 2D cross-correlation; `x: [B, Cin, H, W]`, `w: [Cout, Cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: [usize; 2], pad: [usize; 2]) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(shape_err!("conv2d expects [B,Cin,H,W] x [Cout,Cin,kh,kw], got {sx:?} x {sw:?}"));
        }
        let geom = ConvGeom::new(
            sx[0],
            sx[1],
            sw[0],
            [1, sx[2], sx[3]],
            [1, sw[2], sw[3]],
            [1, stride[0], stride[1]],
            [0, pad[0], pad[1]],
        )?;
        let out_shape = vec![sx[0], sw[0], geom.output[1], geom.output[2]];
        self.conv_impl(x, w, bias, geom, out_shape)
    }

    /// 3D cross-correlation; `x: [B, Cin, T, H, W]`, `w: [Cout, Cin, kt, kh, kw]`.
    pub fn conv3d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 5 || sw.len() != 5 || sx[1] != sw[1] {
            return Err(shape_err!("conv3d expects [B,Cin,T,H,W] x [Cout,Cin,kt,kh,kw], got {sx:?} x {sw:?}"));
        }
        let geom = ConvGeom::new(
            sx[0],
            sx[1],
            sw[0],
            [sx[2], sx[3], sx[4]],
            [sw[2], sw[3], sw[4]],
            stride,
            pad,
        )?;
        let out_shape = vec![sx[0], sw[0], geom.output[0], geom.output[1], geom.output[2]];
        self.conv_impl(x, w, bias, geom, out_shape)
    }

    // ---------------------------------------------------------------- elementwise

    /// Adds a vector along `axis` (e.g. a per-channel bias).
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || self.shape(bias) != [sx[axis]] {
            return Err(shape_err!("bias {:?} does not match axis {axis} of {sx:?}", self.shape(bias)));
        }
        let (_, len, inner) = kernels::split_axis(&sx, axis);
        let bd = self.data(bias);
        let out: Vec<E> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[(i / inner) % len])
            .collect();
        let value = Tensor::from_vec(&sx, out)?;
        Ok(self.push(value, &[x, bias], Op::AddBias { x, bias, axis }))
    }

    /// Adds `y` to every leading slice of `x` whose trailing shape equals
    /// `y`'s shape (e.g. a positional embedding over a batch).
    pub fn add_trailing(&mut self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x).to_vec(), self.shape(y).to_vec());
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != sy[..] {
            return Err(shape_err!("cannot add {sy:?} onto trailing axes of {sx:?}"));
        }
        let yd = self.data(y);
        let ny = yd.len();
        let out: Vec<E> = self.data(x).iter().enumerate().map(|(i, &v)| v + yd[i % ny]).collect();
        let value = Tensor::from_vec(&sx, out)?;
        Ok(self.push(value, &[x, y], Op::AddTrailing { x, y }))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{what}: shapes differ {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// Elementwise binary op; no implicit broadcasting.
    pub fn ewise(&mut self, a: Var, b: Var, kind: EwiseKind) -> Result<Var> {
        match kind {
            EwiseKind::Add => self.add(a, b),
            EwiseKind::Mul => self.mul(a, b),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<E> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_vec(self.shape(a), out)?;
        Ok(self.push(value, &[a, b], Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out: Vec<E> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x - y).collect();
        let value = Tensor::from_vec(self.shape(a), out)?;
        Ok(self.push(value, &[a, b], Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<E> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_vec(self.shape(a), out)?;
        Ok(self.push(value, &[a, b], Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let factor = E::from_f64_lossy(factor);
        let value = self.value(x).map(|v| v * factor);
        Ok(self.push(value, &[x], Op::Scale { x, factor }))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let value = self.value(x).map(|v| activation_forward(v, kind));
        Ok(self.push(value, &[x], Op::Act { x, kind }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(shape_err!("softmax axis {axis} out of range for {sx:?}"));
        }
        let out = kernels::softmax_forward(self.data(x), &sx, axis);
        let value = Tensor::from_vec(&sx, out)?;
        Ok(self.push(value, &[x], Op::Softmax { x, axis }))
    }

    // ---------------------------------------------------------------- normalisation

    /// Layer or batch normalisation with learned `gamma` (scale) and `beta`
    /// (shift). Biased variance; `eps` must be positive.
    pub fn norm(&mut self, x: Var, kind: NormKind<'_>, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(config_err!("normalisation eps must be positive, got {eps}"));
        }
        match kind {
            NormKind::Layer => self.layer_norm(x, gamma, beta, eps),
            NormKind::Batch { stats, training } => self.batch_norm(x, gamma, beta, eps, stats, training),
        }
    }

    fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| shape_err!("layer norm of a rank-0 tensor"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err!("layer norm affine params must be [{d}]"));
        }
        let eps = E::from_f64_lossy(eps);
        let dn = E::from_usize(d).unwrap();
        let xd = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let rows = xd.len() / d;
        let mut xhat = vec![E::zero(); xd.len()];
        let mut inv_std = vec![E::zero(); rows];
        let mut out = vec![E::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<E>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / dn;
            let is = E::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::from_vec(&sx, out)?;
        Ok(self.push(value, &[x, gamma, beta], Op::LayerNorm { x, gamma, beta, xhat, inv_std }))
    }

    fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        stats: &mut RunningStats,
        training: bool,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(shape_err!("batch norm needs [B, C, ...], got {sx:?}"));
        }
        let c = sx[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.mean.len() != c {
            return Err(shape_err!("batch norm params/statistics must have {c} channels"));
        }
        let inner: usize = sx[2..].iter().product();
        let count = sx[0] * inner;
        let xd = self.data(x);
        let (g, b) = (self.data(gamma).to_vec(), self.data(beta).to_vec());
        let mut mean = vec![E::zero(); c];
        let mut inv_std = vec![E::zero(); c];
        let epse = E::from_f64_lossy(eps);
        if training {
            let n = E::from_usize(count).unwrap();
            for ch in 0..c {
                let mut s = E::zero();
                for bi in 0..sx[0] {
                    let o = (bi * c + ch) * inner;
                    s = s + xd[o..o + inner].iter().copied().sum::<E>();
                }
                let m = s / n;
                let mut v = E::zero();
                for bi in 0..sx[0] {
                    let o = (bi * c + ch) * inner;
                    v = v + xd[o..o + inner].iter().map(|&t| (t - m) * (t - m)).sum::<E>();
                }
                let var = v / n;
                mean[ch] = m;
                inv_std[ch] = E::one() / (var + epse).sqrt();
                let unbiased = if count > 1 { var.as_f64() * count as f64 / (count - 1) as f64 } else { var.as_f64() };
                stats.mean[ch] = (1.0 - stats.momentum) * stats.mean[ch] + stats.momentum * m.as_f64();
                stats.var[ch] = (1.0 - stats.momentum) * stats.var[ch] + stats.momentum * unbiased;
            }
        } else {
            for ch in 0..c {
                mean[ch] = E::from_f64_lossy(stats.mean[ch]);
                inv_std[ch] = E::one() / (E::from_f64_lossy(stats.var[ch]) + epse).sqrt();
            }
        }
        let mut xhat = vec![E::zero(); xd.len()];
        let mut out = vec![E::zero(); xd.len()];
        for (i, &v) in xd.iter().enumerate() {
            let ch = (i / inner) % c;
            let h = (v - mean[ch]) * inv_std[ch];
            xhat[i] = h;
            out[i] = h * g[ch] + b[ch];
        }
        let value = Tensor::from_vec(&sx, out)?;
        let op = if training {
            Op::BatchNorm { x, gamma, beta, xhat, inv_std }
        } else {
            Op::BatchNormEval { x, gamma, beta, mean, inv_std }
        };
        Ok(self.push(value, &[x, gamma, beta], op))
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, &[x], Op::Reshape { x }))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if perm.len() != sx.len() || perm.iter().any(|&p| p >= sx.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err!("{perm:?} is not a permutation of {} axes", sx.len()));
        }
        let (out, shape) = kernels::permute(self.data(x), &sx, perm);
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(value, &[x], Op::Permute { x, perm: perm.to_vec() }))
    }

    /// Zero padding: `pads[i] = (before, after)` for axis `i`.
    pub fn pad(&mut self, x: Var, pads: &[(usize, usize)]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if pads.len() != sx.len() {
            return Err(shape_err!("pad spec has {} axes, tensor has {}", pads.len(), sx.len()));
        }
        if pads.iter().all(|&(a, b)| a == 0 && b == 0) {
            return Ok(x);
        }
        let shape: Vec<usize> = sx.iter().zip(pads).map(|(&d, &(a, b))| d + a + b).collect();
        let mut out = vec![E::zero(); shape.iter().product()];
        let origin: Vec<usize> = pads.iter().map(|p| p.0).collect();
        kernels::copy_block(self.data(x), &sx, &vec![0; sx.len()], &mut out, &shape, &origin, &sx, false);
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(value, &[x], Op::Pad { x, pads: pads.to_vec() }))
    }

    /// Extracts the sub-block `ranges[i] = (start, len)` along every axis.
    pub fn crop(&mut self, x: Var, ranges: &[(usize, usize)]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if ranges.len() != sx.len() || ranges.iter().zip(&sx).any(|(&(s, l), &d)| l == 0 || s + l > d) {
            return Err(shape_err!("crop {ranges:?} invalid for shape {sx:?}"));
        }
        if ranges.iter().zip(&sx).all(|(&(s, l), &d)| s == 0 && l == d) {
            return Ok(x);
        }
        let shape: Vec<usize> = ranges.iter().map(|r| r.1).collect();
        let mut out = vec![E::zero(); shape.iter().product()];
        let origin: Vec<usize> = ranges.iter().map(|r| r.0).collect();
        kernels::copy_block(self.data(x), &sx, &origin, &mut out, &shape, &vec![0; sx.len()], &shape, false);
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(value, &[x], Op::Crop { x, ranges: ranges.to_vec() }))
    }

    /// Slice `[start, start + len)` along one axis.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(shape_err!("narrow axis {axis} out of range for {sx:?}"));
        }
        let ranges: Vec<(usize, usize)> =
            sx.iter().enumerate().map(|(i, &d)| if i == axis { (start, len) } else { (0, d) }).collect();
        self.crop(x, &ranges)
    }

    /// Nearest-neighbour upsampling along `axis`: each slice is repeated
    /// `factor` times.
    pub fn repeat_interleave(&mut self, x: Var, axis: usize, factor: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || factor == 0 {
            return Err(shape_err!("repeat axis {axis} / factor {factor} invalid for {sx:?}"));
        }
        let out = kernels::repeat_interleave(self.data(x), &sx, axis, factor);
        let mut shape = sx;
        shape[axis] *= factor;
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(value, &[x], Op::Repeat { x, axis, factor }))
    }

    // ---------------------------------------------------------------- reductions and losses

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().copied().sum::<E>();
        Ok(self.push(Tensor::scalar(s), &[x], Op::Sum { x }))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = E::from_usize(self.value(x).numel()).unwrap();
        let s = self.data(x).iter().copied().sum::<E>() / n;
        Ok(self.push(Tensor::scalar(s), &[x], Op::Mean { x }))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `target`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<E>) -> Result<Var> {
        if self.shape(logits) != target.shape() {
            return Err(shape_err!("bce: logits {:?} vs target {:?}", self.shape(logits), target.shape()));
        }
        let n = E::from_usize(target.numel()).unwrap();
        let loss = self
            .data(logits)
            .iter()
            .zip(target.data())
            .map(|(&z, &y)| z.max(E::zero()) - z * y + (E::one() + (-z.abs()).exp()).ln())
            .sum::<E>()
            / n;
        Ok(self.push(Tensor::scalar(loss), &[logits], Op::BceWithLogits { logits, target: target.clone() }))
    }

    // ---------------------------------------------------------------- backward

    /// Clears all gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    /// Reverse sweep from a scalar loss; every `requires_grad` node reachable
    /// from `loss` receives `d loss / d node`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(usage_err!("backward already ran; call reset_grads first"));
        }
        if self.value(loss).numel() != 1 {
            return Err(usage_err!("backward needs a scalar loss, got shape {:?}", self.shape(loss)));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(usage_err!("loss does not depend on any tensor requiring grad"));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(Tensor::from_vec(self.shape(loss), vec![E::one()])?);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(dy) = self.nodes[i].grad.take() else { continue };
            let contributions = self.local_grads(i, &dy)?;
            self.nodes[i].grad = Some(dy);
            for (v, g) in contributions {
                self.accumulate(v, g);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<E>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(existing) => existing.data_mut().iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
            None => node.grad = Some(Tensor::from_vec(node.value.shape(), g).expect("gradient shape")),
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, i: usize, dy: &Tensor<E>) -> Result<Vec<(Var, Vec<E>)>> {
        let node = &self.nodes[i];
        let dyd = dy.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (ba, m, k) = matmul_dims(sa)?;
                let (bb, _, n) = matmul_dims(sb)?;
                let batch = ba.max(bb);
                let (da_src, db_src) = (self.data(a), self.data(b));
                if self.rg(a) {
                    let mut da = vec![E::zero(); ba * m * k];
                    for t in 0..batch {
                        let oa = if ba == 1 { 0 } else { t * m * k };
                        let ob = if bb == 1 { 0 } else { t * k * n };
                        // dA = dC * B^T
                        gemm(
                            m,
                            n,
                            k,
                            E::one(),
                            dyd,
                            MatLayout::row_major(t * m * n, n),
                            db_src,
                            MatLayout::transposed(ob, n),
                            E::one(),
                            &mut da,
                            MatLayout::row_major(oa, k),
                        );
                    }
                    out.push((a, da));
                }
                if self.rg(b) {
                    let mut db = vec![E::zero(); bb * k * n];
                    for t in 0..batch {
                        let oa = if ba == 1 { 0 } else { t * m * k };
                        let ob = if bb == 1 { 0 } else { t * k * n };
                        // dB = A^T * dC
                        gemm(
                            k,
                            m,
                            n,
                            E::one(),
                            da_src,
                            MatLayout::transposed(oa, k),
                            dyd,
                            MatLayout::row_major(t * m * n, n),
                            E::one(),
                            &mut db,
                            MatLayout::row_major(ob, n),
                        );
                    }
                    out.push((b, db));
                }
            }
            &Op::Conv { x, w, bias, ref geom } => {
                let need = (self.rg(x), self.rg(w), bias.is_some_and(|b| self.rg(b)));
                let grads = kernels::conv_backward(self.data(x), self.data(w), dyd, geom, need);
                if let Some(dx) = grads.dx {
                    out.push((x, dx));
                }
                if let Some(dw) = grads.dw {
                    out.push((w, dw));
                }
                if let (Some(db), Some(b)) = (grads.db, bias) {
                    out.push((b, db));
                }
            }
            &Op::AddBias { x, bias, axis } => {
                if self.rg(x) {
                    out.push((x, dyd.to_vec()));
                }
                if self.rg(bias) {
                    let (_, len, inner) = kernels::split_axis(dy.shape(), axis);
                    let mut db = vec![E::zero(); len];
                    for (j, &g) in dyd.iter().enumerate() {
                        let c = (j / inner) % len;
                        db[c] = db[c] + g;
                    }
                    out.push((bias, db));
                }
            }
            &Op::AddTrailing { x, y } => {
                if self.rg(x) {
                    out.push((x, dyd.to_vec()));
                }
                if self.rg(y) {
                    let ny = self.value(y).numel();
                    let mut gy = vec![E::zero(); ny];
                    for (j, &g) in dyd.iter().enumerate() {
                        gy[j % ny] = gy[j % ny] + g;
                    }
                    out.push((y, gy));
                }
            }
            &Op::Add { a, b } => {
                if self.rg(a) {
                    out.push((a, dyd.to_vec()));
                }
                if self.rg(b) {
                    out.push((b, dyd.to_vec()));
                }
            }
            &Op::Sub { a, b } => {
                if self.rg(a) {
                    out.push((a, dyd.to_vec()));
                }
                if self.rg(b) {
                    out.push((b, dyd.iter().map(|&g| -g).collect()));
                }
            }
            &Op::Mul { a, b } => {
                if self.rg(a) {
                    out.push((a, dyd.iter().zip(self.data(b)).map(|(&g, &v)| g * v).collect()));
                }
                if self.rg(b) {
                    out.push((b, dyd.iter().zip(self.data(a)).map(|(&g, &v)| g * v).collect()));
                }
            }
            &Op::Scale { x, factor } => out.push((x, dyd.iter().map(|&g| g * factor).collect())),
            &Op::Softmax { x, axis } => {
                out.push((x, kernels::softmax_backward(node.value.data(), dyd, dy.shape(), axis)));
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = *dy.shape().last().unwrap();
                let dn = E::from_usize(d).unwrap();
                let g = self.data(*gamma);
                if self.rg(*x) {
                    let mut dx = vec![E::zero(); dyd.len()];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let rng = r * d..(r + 1) * d;
                        let (dyr, xh) = (&dyd[rng.clone()], &xhat[rng.clone()]);
                        let mut s1 = E::zero();
                        let mut s2 = E::zero();
                        for j in 0..d {
                            let dh = dyr[j] * g[j];
                            s1 = s1 + dh;
                            s2 = s2 + dh * xh[j];
                        }
                        for j in 0..d {
                            let dh = dyr[j] * g[j];
                            dx[r * d + j] = is * (dh - s1 / dn - xh[j] * s2 / dn);
                        }
                    }
                    out.push((*x, dx));
                }
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![E::zero(); d];
                    let mut db = vec![E::zero(); d];
                    for (j, (&gv, &h)) in dyd.iter().zip(xhat).enumerate() {
                        dg[j % d] = dg[j % d] + gv * h;
                        db[j % d] = db[j % d] + gv;
                    }
                    out.push((*gamma, dg));
                    out.push((*beta, db));
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let shape = dy.shape();
                let c = shape[1];
                let inner: usize = shape[2..].iter().product();
                let n = E::from_usize(shape[0] * inner).unwrap();
                let g = self.data(*gamma);
                let mut s1 = vec![E::zero(); c];
                let mut s2 = vec![E::zero(); c];
                for (j, (&gv, &h)) in dyd.iter().zip(xhat).enumerate() {
                    let ch = (j / inner) % c;
                    s1[ch] = s1[ch] + gv;
                    s2[ch] = s2[ch] + gv * h;
                }
                if self.rg(*x) {
                    let dx = dyd
                        .iter()
                        .zip(xhat)
                        .enumerate()
                        .map(|(j, (&gv, &h))| {
                            let ch = (j / inner) % c;
                            g[ch] * inv_std[ch] * (gv - s1[ch] / n - h * s2[ch] / n)
                        })
                        .collect();
                    out.push((*x, dx));
                }
                out.push((*gamma, s2));
                out.push((*beta, s1));
            }
            Op::BatchNormEval { x, gamma, beta, mean, inv_std } => {
                let shape = dy.shape();
                let c = shape[1];
                let inner: usize = shape[2..].iter().product();
                let g = self.data(*gamma);
                let xd = self.data(*x);
                let mut dg = vec![E::zero(); c];
                let mut db = vec![E::zero(); c];
                let mut dx = vec![E::zero(); dyd.len()];
                for (j, &gv) in dyd.iter().enumerate() {
                    let ch = (j / inner) % c;
                    dg[ch] = dg[ch] + gv * (xd[j] - mean[ch]) * inv_std[ch];
                    db[ch] = db[ch] + gv;
                    dx[j] = gv * g[ch] * inv_std[ch];
                }
                out.push((*x, dx));
                out.push((*gamma, dg));
                out.push((*beta, db));
            }
            &Op::Act { x, kind } => {
                let xd = self.data(x);
                let dx = match kind {
                    Activation::Relu => {
                        dyd.iter().zip(xd).map(|(&g, &v)| if v > E::zero() { g } else { E::zero() }).collect()
                    }
                    Activation::Gelu => {
                        dyd.iter().zip(xd).map(|(&g, &v)| g * (gelu_cdf(v) + v * gelu_pdf(v))).collect()
                    }
                    Activation::Sigmoid => {
                        dyd.iter().zip(node.value.data()).map(|(&g, &s)| g * s * (E::one() - s)).collect()
                    }
                };
                out.push((x, dx));
            }
            &Op::Reshape { x } => out.push((x, dyd.to_vec())),
            Op::Permute { x, perm } => {
                let inv = kernels::inverse_permutation(perm);
                let (dx, _) = kernels::permute(dyd, dy.shape(), &inv);
                out.push((*x, dx));
            }
            Op::Pad { x, pads } => {
                let sx = self.shape(*x);
                let mut dx = vec![E::zero(); self.value(*x).numel()];
                let origin: Vec<usize> = pads.iter().map(|p| p.0).collect();
                kernels::copy_block(dyd, dy.shape(), &origin, &mut dx, sx, &vec![0; sx.len()], sx, false);
                out.push((*x, dx));
            }
            Op::Crop { x, ranges } => {
                let sx = self.shape(*x);
                let mut dx = vec![E::zero(); self.value(*x).numel()];
                let origin: Vec<usize> = ranges.iter().map(|r| r.0).collect();
                kernels::copy_block(dyd, dy.shape(), &vec![0; sx.len()], &mut dx, sx, &origin, dy.shape(), true);
                out.push((*x, dx));
            }
            &Op::Repeat { x, axis, factor } => {
                out.push((x, kernels::repeat_interleave_backward(dyd, self.shape(x), axis, factor)));
            }
            &Op::Sum { x } => out.push((x, vec![dyd[0]; self.value(x).numel()])),
            &Op::Mean { x } => {
                let n = self.value(x).numel();
                out.push((x, vec![dyd[0] / E::from_usize(n).unwrap(); n]));
            }
            Op::BceWithLogits { logits, target } => {
                let n = E::from_usize(target.numel()).unwrap();
                let g = dyd[0] / n;
                let dx = self
                    .data(*logits)
                    .iter()
                    .zip(target.data())
                    .map(|(&z, &y)| (sigmoid(z) - y) * g)
                    .collect();
                out.push((*logits, dx));
            }
        }
        Ok(out)
    }
}

/// Validates that a shape has only positive extents.
pub fn validate_shape(shape: &[usize]) -> Result<()> {
    check_extents(shape)
}
