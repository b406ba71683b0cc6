//! Model assembly: parameters from a [`ModelConfig`], forward passes and
//! analytic layer listings.

use radarformer_tensor::{depth_to_space, Graph, Scalar, Tensor, Var};

use crate::blocks::{self, conv, conv_out, MaxVitParams, VitParams};
use crate::config::{HourglassConfig, ModelConfig, StemConfig, Variant};
use crate::error::{shape_err, Result};
use crate::layers::{LayerDesc, LayerKind};
use crate::params::{Bound, Builder, ParamStore};

/// Initial bias of the per-class output logits; sigmoid(-4) ~ 0.018 matches the
/// sparse positives of a confidence map.
pub const OUTPUT_PRIOR_BIAS: f64 = -4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Model<E> {
    pub config: ModelConfig,
    pub params: ParamStore<E>,
}

fn maxvit_params(c: &crate::config::MaxVitConfig) -> MaxVitParams {
    MaxVitParams {
        dim: c.dim,
        kernel: c.mbconv_kernel,
        window: c.window,
        grid: c.grid,
        heads: c.heads,
        mlp_ratio: c.mlp_ratio,
    }
}

fn vit_params(c: &crate::config::VitConfig) -> VitParams {
    VitParams { dim: c.dim, embed: c.embed, depth: c.depth, heads: c.heads, mlp_ratio: c.mlp_ratio, patch: c.patch }
}

/// Trunk width of a 2D variant.
fn trunk_dim(v: &Variant) -> usize {
    match v {
        Variant::Radarformer(c) => c.dim,
        Variant::Cnn2d(c) => c.dim,
        Variant::Transformer2d(c) => c.dim,
        Variant::Hourglass3d(_) => 0,
    }
}

/// Builds a model with seeded parameters. Configs are validated first.
pub fn build_model<E: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Model<E>> {
    cfg.validate()?;
    let mut params = ParamStore::new();
    let mut b = Builder::new(&mut params, seed);
    let output_bias = match &cfg.model {
        Variant::Hourglass3d(h) => {
            declare_hourglass(&mut b, cfg, h)?;
            "out.bias".to_string()
        }
        v => {
            let stem = v.stem().expect("2D variant");
            let dim = trunk_dim(v);
            let stages = cfg.temporal_stages();
            blocks::declare_mnet(&mut b, cfg.chirps, stem.merged_channels)?;
            blocks::declare_temporal(&mut b, stages, stem.merged_channels, cfg.classes)?;
            b.conv("stem.0", dim, stem.merged_channels, &[stem.kernels[0]; 2], true)?;
            b.conv("stem.1", dim, dim, &[stem.kernels[1]; 2], true)?;
            let (th, tw) = (cfg.height / stem.factor(), cfg.width / stem.factor());
            match v {
                Variant::Radarformer(c) => {
                    let m = maxvit_params(c);
                    for i in 0..c.depth {
                        blocks::declare_maxvit_block(&mut b, &format!("trunk.{i}"), &m)?;
                    }
                }
                Variant::Cnn2d(c) => {
                    for i in 0..c.depth {
                        blocks::declare_conv_block(&mut b, &format!("trunk.{i}"), c.dim, c.kernel)?;
                    }
                }
                Variant::Transformer2d(c) => {
                    let tokens = (th / c.patch) * (tw / c.patch);
                    blocks::declare_vit(&mut b, "trunk", &vit_params(c), tokens)?;
                }
                Variant::Hourglass3d(_) => unreachable!(),
            }
            let f = stem.factor();
            b.conv("head", stem.merged_channels * f * f, dim, &[stem.head_kernel; 2], true)?;
            format!("tup.{}.bias", stages - 1)
        }
    };
    if let Some(bias) = params.get_mut(&output_bias) {
        bias.data_mut().iter_mut().for_each(|v| *v = E::from_f64_lossy(OUTPUT_PRIOR_BIAS));
    }
    Ok(Model { config: cfg.clone(), params })
}

fn declare_hourglass<E: Scalar>(b: &mut Builder<E>, cfg: &ModelConfig, h: &HourglassConfig) -> Result<()> {
    blocks::declare_mnet(b, cfg.chirps, h.merged_channels)?;
    let mut cin = h.merged_channels;
    for (i, &c) in h.channels.iter().enumerate() {
        b.conv(&format!("enc.{i}"), c, cin, &h.encoder_kernel, true)?;
        cin = c;
    }
    for j in 0..h.bottleneck {
        b.conv(&format!("mid.{j}"), cin, cin, &h.encoder_kernel, true)?;
    }
    for i in (0..h.channels.len()).rev() {
        let cout = if i == 0 { h.merged_channels } else { h.channels[i - 1] };
        b.conv(&format!("dec.{i}"), cout, h.channels[i], &h.decoder_kernel, true)?;
    }
    b.conv("out", cfg.classes, h.merged_channels, &[1, 1, 1], true)
}

impl<E: Scalar> Model<E> {
    pub fn cast<F: Scalar>(&self) -> Model<F> {
        Model { config: self.config.clone(), params: self.params.cast() }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        let want = c.input_shape(shape.first().copied().unwrap_or(1));
        if shape != want || shape[0] == 0 {
            return Err(shape_err!("model {} expects input {want:?}, got {shape:?}", c.name));
        }
        Ok(())
    }

    /// `[B, 2, T, C, H, W]` radar cube to `[B, K, T, H, W]` logits.
    pub fn forward_logits(&self, g: &mut Graph<E>, p: &Bound, x: Var) -> Result<Var> {
        self.check_input(g.shape(x))?;
        match &self.config.model {
            Variant::Hourglass3d(h) => self.hourglass_forward(g, p, x, h),
            v => self.pipeline_forward(g, p, x, v),
        }
    }

    /// Confidence maps in [0, 1].
    pub fn forward(&self, g: &mut Graph<E>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.forward_logits(g, p, x)?;
        Ok(g.sigmoid(y)?)
    }

    /// Inference convenience: one no-grad forward pass on a batch.
    pub fn predict(&self, cube: &Tensor<E>) -> Result<Tensor<E>> {
        let mut g = Graph::no_grad();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(cube.clone());
        let y = self.forward(&mut g, &p, x)?;
        Ok(g.take_value(y))
    }

    fn pipeline_forward(&self, g: &mut Graph<E>, p: &Bound, x: Var, v: &Variant) -> Result<Var> {
        let cfg = &self.config;
        let stem = v.stem().expect("2D variant");
        let merged = blocks::mnet_merge(g, p, x, cfg.chirps)?;
        let (flat, state) = blocks::temporal_downsample(g, p, merged, cfg.temporal_stages())?;
        let s0 = conv(g, p, "stem.0", flat, &[stem.strides[0]; 2])?;
        let s0 = g.gelu(s0)?;
        let s1 = conv(g, p, "stem.1", s0, &[stem.strides[1]; 2])?;
        let s1 = g.gelu(s1)?;
        g.release(s0);
        let trunk = match v {
            Variant::Radarformer(c) => {
                let m = maxvit_params(c);
                let mut t = s1;
                for i in 0..c.depth {
                    t = blocks::maxvit_block(g, p, &format!("trunk.{i}"), t, &m)?;
                }
                t
            }
            Variant::Cnn2d(c) => {
                let mut t = s1;
                for i in 0..c.depth {
                    t = blocks::conv_block(g, p, &format!("trunk.{i}"), t)?;
                }
                t
            }
            Variant::Transformer2d(c) => {
                let vp = vit_params(c);
                let (h, w) = (g.shape(s1)[2], g.shape(s1)[3]);
                let tokens = blocks::vit_block_2d(g, p, "trunk", s1, &vp)?;
                blocks::upsample_block(g, p, "trunk", tokens, h, w, c.patch)?
            }
            Variant::Hourglass3d(_) => unreachable!(),
        };
        let t = g.add(s1, trunk)?;
        let head = conv(g, p, "head", t, &[1, 1])?;
        let head = depth_to_space(g, head, stem.factor())?;
        let fused = g.add(flat, head)?;
        blocks::temporal_upsample(g, p, fused, &state)
    }

    fn hourglass_forward(&self, g: &mut Graph<E>, p: &Bound, x: Var, h: &HourglassConfig) -> Result<Var> {
        let mut x = blocks::mnet_merge(g, p, x, self.config.chirps)?;
        let mut skips = Vec::new();
        for (i, s) in h.strides.iter().enumerate() {
            skips.push(x);
            let y = conv(g, p, &format!("enc.{i}"), x, s)?;
            x = g.gelu(y)?;
            g.release(y);
        }
        for j in 0..h.bottleneck {
            let y = conv(g, p, &format!("mid.{j}"), x, &[1, 1, 1])?;
            g.release(x);
            x = g.gelu(y)?;
            g.release(y);
        }
        for i in (0..h.strides.len()).rev() {
            for axis in 0..3 {
                if h.strides[i][axis] == 2 {
                    let up = g.repeat_interleave(x, axis + 2, 2)?;
                    g.release(x);
                    x = up;
                }
            }
            let y = conv(g, p, &format!("dec.{i}"), x, &[1, 1, 1])?;
            g.release(x);
            let a = g.gelu(y)?;
            g.release(y);
            x = g.add(a, skips[i])?;
            g.release(a);
            g.release(skips[i]);
        }
        conv(g, p, "out", x, &[1, 1, 1])
    }

    /// Analytic layer list for one forward pass on `input` (`[B, 2, T, C, H, W]`).
    pub fn layers(&self, input: &[usize]) -> Result<Vec<LayerDesc>> {
        self.check_input(input)?;
        let cfg = &self.config;
        let b = input[0];
        let mut out = Vec::new();
        match &cfg.model {
            Variant::Hourglass3d(h) => describe_hourglass(&mut out, cfg, h, b),
            v => {
                let stem = v.stem().expect("2D variant");
                describe_pipeline(&mut out, cfg, v, stem, b);
            }
        }
        out.push(LayerDesc::new("sigmoid", LayerKind::Elementwise));
        Ok(out)
    }
}

fn describe_pipeline(out: &mut Vec<LayerDesc>, cfg: &ModelConfig, v: &Variant, stem: &StemConfig, b: usize) {
    let (t, h, w) = (cfg.frames, cfg.height, cfg.width);
    let ch = stem.merged_channels;
    let dim = trunk_dim(v);
    blocks::describe_mnet(out, &cfg.input_shape(b), ch);
    let mut temporal = Vec::new();
    blocks::describe_temporal(&mut temporal, b, t, h, w, ch, cfg.classes);
    let split = temporal.iter().position(|l| l.name.starts_with("tup")).unwrap_or(temporal.len());
    out.extend(temporal.drain(..split));
    let (k0, k1) = (stem.kernels[0], stem.kernels[1]);
    let (h0, w0) = (conv_out(h, k0, stem.strides[0]), conv_out(w, k0, stem.strides[0]));
    let (h1, w1) = (conv_out(h0, k1, stem.strides[1]), conv_out(w0, k1, stem.strides[1]));
    out.push(LayerDesc::new(
        "stem.0",
        LayerKind::Conv { cin: ch, cout: dim, kernel: vec![k0, k0], positions: b * h0 * w0, bias: true },
    ));
    out.push(LayerDesc::new(
        "stem.1",
        LayerKind::Conv { cin: dim, cout: dim, kernel: vec![k1, k1], positions: b * h1 * w1, bias: true },
    ));
    match v {
        Variant::Radarformer(c) => {
            let m = maxvit_params(c);
            for i in 0..c.depth {
                blocks::describe_maxvit_block(out, &format!("trunk.{i}"), b, h1, w1, &m);
            }
        }
        Variant::Cnn2d(c) => {
            for i in 0..c.depth {
                blocks::describe_conv_block(out, &format!("trunk.{i}"), c.dim, c.kernel, b * h1 * w1);
            }
        }
        Variant::Transformer2d(c) => {
            let tokens = (h1 / c.patch) * (w1 / c.patch);
            blocks::describe_vit(out, "trunk", b, tokens, &vit_params(c));
        }
        Variant::Hourglass3d(_) => unreachable!(),
    }
    out.push(LayerDesc::new("trunk.residual", LayerKind::Elementwise));
    let f = stem.factor();
    out.push(LayerDesc::new(
        "head",
        LayerKind::Conv {
            cin: dim,
            cout: ch * f * f,
            kernel: vec![stem.head_kernel; 2],
            positions: b * h1 * w1,
            bias: true,
        },
    ));
    out.push(LayerDesc::new("head.depth_to_space", LayerKind::Elementwise));
    out.extend(temporal);
}

fn describe_hourglass(out: &mut Vec<LayerDesc>, cfg: &ModelConfig, h: &HourglassConfig, b: usize) {
    blocks::describe_mnet(out, &cfg.input_shape(b), h.merged_channels);
    let mut ext = [cfg.frames, cfg.height, cfg.width];
    let mut sizes = Vec::new();
    let mut cin = h.merged_channels;
    for (i, (&c, s)) in h.channels.iter().zip(&h.strides).enumerate() {
        sizes.push(ext);
        for a in 0..3 {
            ext[a] = conv_out(ext[a], h.encoder_kernel[a], s[a]);
        }
        let positions = b * ext.iter().product::<usize>();
        out.push(LayerDesc::new(
            format!("enc.{i}"),
            LayerKind::Conv { cin, cout: c, kernel: h.encoder_kernel.to_vec(), positions, bias: true },
        ));
        cin = c;
    }
    let positions = b * ext.iter().product::<usize>();
    for j in 0..h.bottleneck {
        out.push(LayerDesc::new(
            format!("mid.{j}"),
            LayerKind::Conv { cin, cout: cin, kernel: h.encoder_kernel.to_vec(), positions, bias: true },
        ));
    }
    for i in (0..h.channels.len()).rev() {
        let cout = if i == 0 { h.merged_channels } else { h.channels[i - 1] };
        out.push(LayerDesc::new(format!("dec.{i}.upsample"), LayerKind::Elementwise));
        let positions = b * sizes[i].iter().product::<usize>();
        out.push(LayerDesc::new(
            format!("dec.{i}"),
            LayerKind::Conv { cin: h.channels[i], cout, kernel: h.decoder_kernel.to_vec(), positions, bias: true },
        ));
        out.push(LayerDesc::new(format!("dec.{i}.skip"), LayerKind::Elementwise));
    }
    let positions = b * cfg.frames * cfg.height * cfg.width;
    out.push(LayerDesc::new(
        "out",
        LayerKind::Conv { cin: h.merged_channels, cout: cfg.classes, kernel: vec![1, 1, 1], positions, bias: true },
    ));
}
