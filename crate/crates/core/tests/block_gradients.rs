//! Blocks and a toy model against central finite differences (64-bit),
//! differentiating with respect to the input and every parameter.

use radarformer_core::blocks::{
    declare_maxvit_block, declare_mbconv, declare_mnet, declare_msa, declare_temporal, declare_vit, maxvit_block,
    mbconv, mnet_merge, msa, temporal_downsample, temporal_upsample, upsample_block, vit_block_2d, MaxVitParams,
    VitParams,
};
use radarformer_core::config::{MaxVitConfig, StemConfig};
use radarformer_core::{build_model, Bound, Builder, CoreError, ModelConfig, ParamStore, Variant};
use radarformer_tensor::{finite_diff_check_sampled, CheckInput, Graph, Init, Tensor, TensorError, Var};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 5;

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::create(shape, Init::SeededUniform { seed, lo: -1.0, hi: 1.0 }).unwrap()
}

fn te(e: CoreError) -> TensorError {
    TensorError::Usage(e.to_string())
}

/// Runs the check over `store`'s parameters plus one input tensor.
fn check_params<F>(name: &str, store: &ParamStore<f64>, x: Tensor<f64>, seed: u64, coords: usize, f: F)
where
    F: Fn(&mut Graph<f64>, &Bound, Var) -> Result<Var, CoreError>,
{
    let mut inputs = vec![CheckInput::param(x)];
    inputs.extend(store.iter().map(|(_, t)| CheckInput::param(t.clone())));
    let err = finite_diff_check_sampled(
        |g, v| {
            let p = store.attach(v[1..].to_vec()).map_err(te)?;
            let y = f(g, &p, v[0]).map_err(te)?;
            let r = g.constant(rand(g.shape(y), seed ^ 0x5a5a));
            let prod = g.mul(y, r)?;
            g.sum(prod)
        },
        &inputs,
        EPS,
        Some(coords),
        seed,
    )
    .unwrap();
    assert!(err < TOL, "{name} seed {seed}: max rel err {err}");
}

fn declared(seed: u64, declare: impl FnOnce(&mut Builder<f64>) -> Result<(), CoreError>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    declare(&mut Builder::new(&mut s, seed)).unwrap();
    s
}

#[test]
fn mbconv_gradients() {
    for seed in 0..SEEDS {
        let p = declared(seed, |b| declare_mbconv(b, "m", 8, 3));
        check_params("mbconv", &p, rand(&[1, 8, 5, 5], seed + 50), seed, 16, |g, b, x| mbconv(g, b, "m", x));
    }
}

#[test]
fn attention_gradients() {
    for seed in 0..SEEDS {
        let p = declared(seed, |b| declare_msa(b, "a", 4));
        check_params("msa", &p, rand(&[2, 3, 4], seed + 50), seed, 24, |g, b, x| msa(g, b, "a", x, 2));
    }
}

#[test]
fn maxvit_block_gradients() {
    let m = MaxVitParams { dim: 8, kernel: 3, window: 4, grid: 4, heads: 2, mlp_ratio: 20 };
    for seed in 0..SEEDS {
        let p = declared(seed, |b| declare_maxvit_block(b, "b", &m));
        check_params("maxvit", &p, rand(&[1, 8, 8, 8], seed + 50), seed, 8, |g, b, x| maxvit_block(g, b, "b", x, &m));
    }
}

#[test]
fn vit_block_gradients() {
    let v = VitParams { dim: 2, embed: 8, depth: 1, heads: 2, mlp_ratio: 20, patch: 2 };
    for seed in 0..SEEDS {
        let mut p = declared(seed, |b| declare_vit(b, "v", &v, 4));
        // nonzero positions so their gradient is exercised at a generic point
        *p.get_mut("v.pos").unwrap() = rand(&[4, 8], seed + 70);
        check_params("vit", &p, rand(&[1, 2, 4, 4], seed + 50), seed, 8, |g, b, x| {
            let t = vit_block_2d(g, b, "v", x, &v)?;
            upsample_block(g, b, "v", t, 4, 4, 2)
        });
    }
}

#[test]
fn merge_stream_gradients() {
    for seed in 0..SEEDS {
        let p = declared(seed, |b| {
            declare_mnet(b, 2, 4)?;
            declare_temporal(b, 2, 4, 3)
        });
        check_params("merge stream", &p, rand(&[1, 2, 4, 2, 4, 4], seed + 50), seed, 12, |g, b, x| {
            let m = mnet_merge(g, b, x, 2)?;
            let (y, state) = temporal_downsample(g, b, m, 2)?;
            temporal_upsample(g, b, y, &state)
        });
    }
}

#[test]
fn toy_model_gradients() {
    let cfg = ModelConfig {
        name: "toy".into(),
        frames: 4,
        chirps: 2,
        height: 16,
        width: 16,
        classes: 3,
        model: Variant::Radarformer(MaxVitConfig {
            stem: StemConfig { merged_channels: 4, kernels: vec![3, 3], strides: vec![2, 2], head_kernel: 3 },
            dim: 8,
            depth: 1,
            mbconv_kernel: 3,
            window: 2,
            grid: 2,
            heads: 2,
            mlp_ratio: 20,
        }),
    };
    for seed in 0..SEEDS {
        let model = build_model::<f64>(&cfg, seed).unwrap();
        check_params("toy model", &model.params, rand(&cfg.input_shape(1), seed + 50), seed, 4, |g, b, x| {
            model.forward_logits(g, b, x)
        });
    }
}
