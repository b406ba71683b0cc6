//! Architecture building blocks. Each block comes as a triple: `declare_*`
//! registers its parameters, the forward function runs it on a graph, and
//! `describe_*` lists its layers for the profiler.

use radarformer_tensor::{grid_partition, grid_reverse, window_partition, window_reverse, Graph, NormKind, Scalar, Var};

use crate::error::{config_err, shape_err, Result};
use crate::layers::{LayerDesc, LayerKind};
use crate::params::{Bound, Builder};

pub const NORM_EPS: f64 = 1e-5;

/// "Same" convolution (padding k/2 per axis); rank of the weight picks 2D/3D.
pub fn conv<E: Scalar>(g: &mut Graph<E>, p: &Bound, name: &str, x: Var, stride: &[usize]) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.try_get(&format!("{name}.bias"));
    let ws = g.shape(w).to_vec();
    let pad: Vec<usize> = ws[2..].iter().map(|k| k / 2).collect();
    match ws.len() {
        4 => Ok(g.conv2d(x, w, b, [stride[0], stride[1]], [pad[0], pad[1]])?),
        5 => Ok(g.conv3d(x, w, b, [stride[0], stride[1], stride[2]], [pad[0], pad[1], pad[2]])?),
        r => Err(config_err!("{name}: unsupported weight rank {r}")),
    }
}

pub fn linear<E: Scalar>(g: &mut Graph<E>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.try_get(&format!("{name}.bias"));
    Ok(g.linear(x, w, b)?)
}

pub fn layer_norm<E: Scalar>(g: &mut Graph<E>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let gamma = p.get(&format!("{name}.gamma"))?;
    let beta = p.get(&format!("{name}.beta"))?;
    Ok(g.norm(x, NormKind::Layer, gamma, beta, NORM_EPS)?)
}

/// Output extent of a "same"-padded strided convolution along one axis.
pub fn conv_out(n: usize, k: usize, s: usize) -> usize {
    (n + 2 * (k / 2) - k) / s + 1
}

fn conv_desc(name: &str, cin: usize, cout: usize, kernel: &[usize], positions: usize) -> LayerDesc {
    LayerDesc::new(name, LayerKind::Conv { cin, cout, kernel: kernel.to_vec(), positions, bias: true })
}

// ------------------------------------------------------------------ channel-chirp merge

pub fn declare_mnet<E: Scalar>(b: &mut Builder<E>, chirps: usize, merged: usize) -> Result<()> {
    b.conv("mnet", merged, 2 * chirps, &[1, 1, 1], true)
}

/// Fuses the real/imag and chirp axes: `[B, 2, T, C, H, W] -> [B, C_h, T, H, W]`.
pub fn mnet_merge<E: Scalar>(g: &mut Graph<E>, p: &Bound, x: Var, chirps: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 6 || s[1] != 2 || s[3] != chirps {
        return Err(shape_err!("radar cube must be [B, 2, T, {chirps}, H, W], got {s:?}"));
    }
    let x = g.permute(x, &[0, 1, 3, 2, 4, 5])?;
    let x = g.reshape(x, &[s[0], 2 * chirps, s[2], s[4], s[5]])?;
    conv(g, p, "mnet", x, &[1, 1, 1])
}

pub fn describe_mnet(out: &mut Vec<LayerDesc>, input: &[usize], merged: usize) {
    let (b, t, c, h, w) = (input[0], input[2], input[3], input[4], input[5]);
    out.push(LayerDesc::new("mnet.fold", LayerKind::Elementwise));
    out.push(conv_desc("mnet", 2 * c, merged, &[1, 1, 1], b * t * h * w));
}

// ------------------------------------------------------------------ temporal stream

/// Activations entering each temporal downsampling stage, finest first.
#[derive(Debug, Clone, Default)]
pub struct MergeState {
    pub skips: Vec<Var>,
}

pub fn declare_temporal<E: Scalar>(b: &mut Builder<E>, stages: usize, merged: usize, classes: usize) -> Result<()> {
    for i in 0..stages {
        b.conv(&format!("tdown.{i}"), merged, merged, &[3, 3, 3], true)?;
    }
    for j in 0..stages {
        let cout = if j + 1 == stages { classes } else { merged };
        b.conv(&format!("tup.{j}"), cout, merged, &[3, 3, 3], true)?;
    }
    Ok(())
}

/// `[B, C_h, T, H, W] -> [B, C_h, H, W]` through `stages` stride-2 temporal convolutions.
pub fn temporal_downsample<E: Scalar>(
    g: &mut Graph<E>,
    p: &Bound,
    x: Var,
    stages: usize,
) -> Result<(Var, MergeState)> {
    let s = g.shape(x).to_vec();
    if s.len() != 5 {
        return Err(shape_err!("temporal stream expects [B, C, T, H, W], got {s:?}"));
    }
    if s[2] != 1 << stages {
        return Err(config_err!("{} frames cannot be reduced to 1 by {stages} stride-2 stages", s[2]));
    }
    let mut state = MergeState::default();
    let mut x = x;
    for i in 0..stages {
        state.skips.push(x);
        let y = conv(g, p, &format!("tdown.{i}"), x, &[2, 1, 1])?;
        x = g.gelu(y)?;
    }
    let y = g.reshape(x, &[s[0], s[1], s[3], s[4]])?;
    Ok((y, state))
}

/// Mirrors [`temporal_downsample`]: nearest-repeat in time, add the matching
/// skip, convolve. The last stage emits per-class logits.
pub fn temporal_upsample<E: Scalar>(g: &mut Graph<E>, p: &Bound, y: Var, state: &MergeState) -> Result<Var> {
    let s = g.shape(y).to_vec();
    if s.len() != 4 {
        return Err(shape_err!("temporal upsample expects [B, C, H, W], got {s:?}"));
    }
    let stages = state.skips.len();
    let mut x = g.reshape(y, &[s[0], s[1], 1, s[2], s[3]])?;
    for j in 0..stages {
        x = g.repeat_interleave(x, 2, 2)?;
        let skip = state.skips[stages - 1 - j];
        if g.shape(skip) != g.shape(x) {
            return Err(shape_err!("skip {:?} does not match upsampled {:?}", g.shape(skip), g.shape(x)));
        }
        x = g.add(x, skip)?;
        x = conv(g, p, &format!("tup.{j}"), x, &[1, 1, 1])?;
        if j + 1 < stages {
            x = g.gelu(x)?;
        }
    }
    Ok(x)
}

pub fn describe_temporal(out: &mut Vec<LayerDesc>, b: usize, t: usize, h: usize, w: usize, merged: usize, classes: usize) {
    let stages = t.trailing_zeros() as usize;
    for i in 0..stages {
        let tt = t >> (i + 1);
        out.push(conv_desc(&format!("tdown.{i}"), merged, merged, &[3, 3, 3], b * tt * h * w));
    }
    for j in 0..stages {
        let tt = 1 << (j + 1);
        let cout = if j + 1 == stages { classes } else { merged };
        out.push(LayerDesc::new(format!("tup.{j}.skip"), LayerKind::Elementwise));
        out.push(conv_desc(&format!("tup.{j}"), merged, cout, &[3, 3, 3], b * tt * h * w));
    }
}

// ------------------------------------------------------------------ MBConv

pub fn declare_mbconv<E: Scalar>(b: &mut Builder<E>, name: &str, dim: usize, kernel: usize) -> Result<()> {
    b.conv(&format!("{name}.expand"), dim, dim, &[1, 1], true)?;
    b.conv(&format!("{name}.spatial"), dim / 4, dim, &[kernel, kernel], true)?;
    b.conv(&format!("{name}.project"), dim, dim / 4, &[1, 1], true)
}

/// Wide-narrow-wide convolutions with 1, k, 1 kernels; the first
/// convolution's activation is added to the last convolution's output.
pub fn mbconv<E: Scalar>(g: &mut Graph<E>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let a = conv(g, p, &format!("{name}.expand"), x, &[1, 1])?;
    let a = g.gelu(a)?;
    let n = conv(g, p, &format!("{name}.spatial"), a, &[1, 1])?;
    let n = g.gelu(n)?;
    let y = conv(g, p, &format!("{name}.project"), n, &[1, 1])?;
    Ok(g.add(a, y)?)
}

pub fn describe_mbconv(out: &mut Vec<LayerDesc>, name: &str, dim: usize, kernel: usize, positions: usize) {
    out.push(conv_desc(&format!("{name}.expand"), dim, dim, &[1, 1], positions));
    out.push(conv_desc(&format!("{name}.spatial"), dim, dim / 4, &[kernel, kernel], positions));
    out.push(conv_desc(&format!("{name}.project"), dim / 4, dim, &[1, 1], positions));
    out.push(LayerDesc::new(format!("{name}.residual"), LayerKind::Elementwise));
}

// ------------------------------------------------------------------ attention

pub fn declare_msa<E: Scalar>(b: &mut Builder<E>, name: &str, dim: usize) -> Result<()> {
    b.linear(&format!("{name}.qkv"), dim, 3 * dim)?;
    b.linear(&format!("{name}.proj"), dim, dim)
}

/// Multi-head self-attention over `[groups, N, S]` tokens; per-head width S/m.
pub fn msa<E: Scalar>(g: &mut Graph<E>, p: &Bound, name: &str, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(shape_err!("attention expects [groups, tokens, dim], got {s:?}"));
    }
    let (bw, n, dim) = (s[0], s[1], s[2]);
    if heads == 0 || dim % heads != 0 {
        return Err(config_err!("width {dim} is not divisible by {heads} heads"));
    }
    let sl = dim / heads;
    let qkv = linear(g, p, &format!("{name}.qkv"), x)?;
    let mut split = |i: usize, perm: &[usize]| -> Result<Var> {
        let part = g.narrow(qkv, 2, i * dim, dim)?;
        let part = g.reshape(part, &[bw, n, heads, sl])?;
        Ok(g.permute(part, perm)?)
    };
    let q = split(0, &[0, 2, 1, 3])?;
    let kt = split(1, &[0, 2, 3, 1])?;
    let v = split(2, &[0, 2, 1, 3])?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (sl as f64).sqrt())?;
    let attn = g.softmax(scores, 3)?;
    let heads_out = g.matmul(attn, v)?;
    let merged = g.permute(heads_out, &[0, 2, 1, 3])?;
    let merged = g.reshape(merged, &[bw, n, dim])?;
    linear(g, p, &format!("{name}.proj"), merged)
}

pub fn declare_transformer_layer<E: Scalar>(b: &mut Builder<E>, name: &str, dim: usize, mlp_ratio: usize) -> Result<()> {
    b.norm(&format!("{name}.norm1"), dim)?;
    declare_msa(b, &format!("{name}.attn"), dim)?;
    b.norm(&format!("{name}.norm2"), dim)?;
    b.linear(&format!("{name}.fc1"), dim, mlp_ratio * dim)?;
    b.linear(&format!("{name}.fc2"), mlp_ratio * dim, dim)
}

/// Pre-norm attention and MLP sub-blocks, each with a residual.
pub fn transformer_layer<E: Scalar>(g: &mut Graph<E>, p: &Bound, name: &str, x: Var, heads: usize) -> Result<Var> {
    let h = layer_norm(g, p, &format!("{name}.norm1"), x)?;
    let h = msa(g, p, &format!("{name}.attn"), h, heads)?;
    let x = g.add(x, h)?;
    let h = layer_norm(g, p, &format!("{name}.norm2"), x)?;
    let h = linear(g, p, &format!("{name}.fc1"), h)?;
    let h = g.gelu(h)?;
    let h = linear(g, p, &format!("{name}.fc2"), h)?;
    Ok(g.add(x, h)?)
}

pub fn describe_transformer_layer(out: &mut Vec<LayerDesc>, name: &str, groups: usize, tokens: usize, dim: usize, ratio: usize) {
    let rows = groups * tokens;
    out.push(LayerDesc::new(format!("{name}.norm1"), LayerKind::Norm { width: dim }));
    out.push(LayerDesc::new(format!("{name}.attn"), LayerKind::Attention { groups, tokens, dim }));
    out.push(LayerDesc::new(format!("{name}.norm2"), LayerKind::Norm { width: dim }));
    out.push(LayerDesc::new(
        format!("{name}.fc1"),
        LayerKind::Linear { inp: dim, out: ratio * dim, tokens: rows, bias: true },
    ));
    out.push(LayerDesc::new(
        format!("{name}.fc2"),
        LayerKind::Linear { inp: ratio * dim, out: dim, tokens: rows, bias: true },
    ));
}

// ------------------------------------------------------------------ MaxViT

#[derive(Debug, Clone, Copy)]
pub struct MaxVitParams {
    pub dim: usize,
    pub kernel: usize,
    pub window: usize,
    pub grid: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

pub fn declare_maxvit_block<E: Scalar>(b: &mut Builder<E>, name: &str, m: &MaxVitParams) -> Result<()> {
    declare_mbconv(b, &format!("{name}.mbconv"), m.dim, m.kernel)?;
    declare_transformer_layer(b, &format!("{name}.window"), m.dim, m.mlp_ratio)?;
    declare_transformer_layer(b, &format!("{name}.grid"), m.dim, m.mlp_ratio)
}

/// MBConv, then attention within P x P windows, then attention across a
/// dilated G x G grid. Spatial shape is preserved.
pub fn maxvit_block<E: Scalar>(g: &mut Graph<E>, p: &Bound, name: &str, x: Var, m: &MaxVitParams) -> Result<Var> {
    let x = mbconv(g, p, &format!("{name}.mbconv"), x)?;
    let (t, info) = window_partition(g, x, m.window)?;
    let t = transformer_layer(g, p, &format!("{name}.window"), t, m.heads)?;
    let x = window_reverse(g, t, &info)?;
    let (t, info) = grid_partition(g, x, m.grid)?;
    let t = transformer_layer(g, p, &format!("{name}.grid"), t, m.heads)?;
    Ok(grid_reverse(g, t, &info)?)
}

pub fn describe_maxvit_block(out: &mut Vec<LayerDesc>, name: &str, b: usize, h: usize, w: usize, m: &MaxVitParams) {
    describe_mbconv(out, &format!("{name}.mbconv"), m.dim, m.kernel, b * h * w);
    for (part, size) in [("window", m.window), ("grid", m.grid)] {
        let groups = b * h.div_ceil(size) * w.div_ceil(size);
        out.push(LayerDesc::new(format!("{name}.{part}.partition"), LayerKind::Elementwise));
        describe_transformer_layer(out, &format!("{name}.{part}"), groups, size * size, m.dim, m.mlp_ratio);
    }
}

// ------------------------------------------------------------------ plain conv block

pub fn declare_conv_block<E: Scalar>(b: &mut Builder<E>, name: &str, dim: usize, kernel: usize) -> Result<()> {
    b.conv(&format!("{name}.conv1"), dim, dim, &[kernel, kernel], true)?;
    b.conv(&format!("{name}.conv2"), dim, dim, &[kernel, kernel], true)
}

pub fn conv_block<E: Scalar>(g: &mut Graph<E>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let h = conv(g, p, &format!("{name}.conv1"), x, &[1, 1])?;
    let h = g.gelu(h)?;
    let h = conv(g, p, &format!("{name}.conv2"), h, &[1, 1])?;
    Ok(g.add(x, h)?)
}

pub fn describe_conv_block(out: &mut Vec<LayerDesc>, name: &str, dim: usize, kernel: usize, positions: usize) {
    out.push(conv_desc(&format!("{name}.conv1"), dim, dim, &[kernel, kernel], positions));
    out.push(conv_desc(&format!("{name}.conv2"), dim, dim, &[kernel, kernel], positions));
}

// ------------------------------------------------------------------ ViT encoder + upsample

#[derive(Debug, Clone, Copy)]
pub struct VitParams {
    pub dim: usize,
    pub embed: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
}

pub fn declare_vit<E: Scalar>(b: &mut Builder<E>, name: &str, v: &VitParams, tokens: usize) -> Result<()> {
    let patch_dim = v.dim * v.patch * v.patch;
    b.linear(&format!("{name}.embed"), patch_dim, v.embed)?;
    b.constant(&format!("{name}.pos"), &[tokens, v.embed], 0.0)?;
    for i in 0..v.depth {
        declare_transformer_layer(b, &format!("{name}.layers.{i}"), v.embed, v.mlp_ratio)?;
    }
    b.norm(&format!("{name}.norm"), v.embed)?;
    b.linear(&format!("{name}.unembed"), v.embed, patch_dim)
}

/// Patch embedding plus learned positions and an encoder stack:
/// `[B, C, H, W] -> [B, N, S]` with `N = HW / P^2`.
pub fn vit_block_2d<E: Scalar>(g: &mut Graph<E>, p: &Bound, name: &str, x: Var, v: &VitParams) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s[2] % v.patch != 0 || s[3] % v.patch != 0 {
        return Err(config_err!("patch {} does not divide {}x{}", v.patch, s[2], s[3]));
    }
    let t = radarformer_tensor::patchify(g, x, v.patch)?;
    let t = linear(g, p, &format!("{name}.embed"), t)?;
    let pos = p.get(&format!("{name}.pos"))?;
    let mut t = g.add_trailing(t, pos)?;
    for i in 0..v.depth {
        t = transformer_layer(g, p, &format!("{name}.layers.{i}"), t, v.heads)?;
    }
    layer_norm(g, p, &format!("{name}.norm"), t)
}

/// Per-token linear map to P x P x C followed by un-patching: a transposed
/// convolution with kernel = stride = P. `h` and `w` are the output extents.
pub fn upsample_block<E: Scalar>(
    g: &mut Graph<E>,
    p: &Bound,
    name: &str,
    t: Var,
    h: usize,
    w: usize,
    patch: usize,
) -> Result<Var> {
    let t = linear(g, p, &format!("{name}.unembed"), t)?;
    Ok(radarformer_tensor::unpatchify(g, t, h / patch, w / patch, patch)?)
}

pub fn describe_vit(out: &mut Vec<LayerDesc>, name: &str, b: usize, tokens: usize, v: &VitParams) {
    let patch_dim = v.dim * v.patch * v.patch;
    out.push(LayerDesc::new(format!("{name}.patchify"), LayerKind::Elementwise));
    out.push(LayerDesc::new(
        format!("{name}.embed"),
        LayerKind::Linear { inp: patch_dim, out: v.embed, tokens: b * tokens, bias: true },
    ));
    out.push(LayerDesc::new(format!("{name}.pos"), LayerKind::Embedding { extents: vec![tokens, v.embed] }));
    for i in 0..v.depth {
        describe_transformer_layer(out, &format!("{name}.layers.{i}"), b, tokens, v.embed, v.mlp_ratio);
    }
    out.push(LayerDesc::new(format!("{name}.norm"), LayerKind::Norm { width: v.embed }));
    out.push(LayerDesc::new(
        format!("{name}.unembed"),
        LayerKind::Linear { inp: v.embed, out: patch_dim, tokens: b * tokens, bias: true },
    ));
}
