//! Building blocks: attention against a hand-computed oracle, residual
//! identities, temporal stream structure and end-to-end shape contracts.

use radarformer_core::blocks::{
    declare_maxvit_block, declare_mbconv, declare_msa, declare_temporal, declare_transformer_layer, declare_vit,
    maxvit_block, mbconv, msa, temporal_downsample, temporal_upsample, transformer_layer, vit_block_2d,
    MaxVitParams, VitParams,
};
use radarformer_core::{build_model, Builder, ModelConfig, ParamStore};
use radarformer_tensor::{Graph, Init, Tensor};

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::create(shape, Init::SeededUniform { seed, lo: -1.0, hi: 1.0 }).unwrap()
}

fn store_with(seed: u64, declare: impl FnOnce(&mut Builder<f64>)) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    declare(&mut Builder::new(&mut s, seed));
    s
}

fn zero(store: &mut ParamStore<f64>, name: &str) {
    store.get_mut(name).unwrap().data_mut().fill(0.0);
}

/// Plain-loop multi-head attention over `[groups, n, s]` rows.
fn msa_oracle(x: &Tensor<f64>, heads: usize, p: &ParamStore<f64>, name: &str) -> Vec<f64> {
    let (groups, n, s) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let wq = p.get(&format!("{name}.qkv.weight")).unwrap();
    let bq = p.get(&format!("{name}.qkv.bias")).unwrap();
    let wp = p.get(&format!("{name}.proj.weight")).unwrap();
    let bp = p.get(&format!("{name}.proj.bias")).unwrap();
    let sl = s / heads;
    let mut out = Vec::new();
    for gi in 0..groups {
        let qkv: Vec<Vec<f64>> = (0..n)
            .map(|t| {
                (0..3 * s)
                    .map(|j| bq.at(&[j]) + (0..s).map(|i| x.at(&[gi, t, i]) * wq.at(&[i, j])).sum::<f64>())
                    .collect()
            })
            .collect();
        let mut o = vec![vec![0.0; s]; n];
        for h in 0..heads {
            for t in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|u| {
                        (0..sl).map(|d| qkv[t][h * sl + d] * qkv[u][s + h * sl + d]).sum::<f64>() / (sl as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for d in 0..sl {
                    o[t][h * sl + d] = (0..n).map(|u| e[u] / z * qkv[u][2 * s + h * sl + d]).sum();
                }
            }
        }
        for row in &o {
            for j in 0..s {
                out.push(bp.at(&[j]) + (0..s).map(|i| row[i] * wp.at(&[i, j])).sum::<f64>());
            }
        }
    }
    out
}

fn run_msa(x: &Tensor<f64>, heads: usize, p: &ParamStore<f64>) -> Tensor<f64> {
    let mut g = Graph::no_grad();
    let b = p.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let y = msa(&mut g, &b, "a", xv, heads).unwrap();
    g.take_value(y)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn attention_matches_hand_oracle() {
    for seed in 0..4 {
        let p = store_with(seed, |b| declare_msa(b, "a", 4).unwrap());
        let x = rand(&[2, 3, 4], seed + 10);
        let got = run_msa(&x, 2, &p);
        assert_eq!(got.shape(), &[2, 3, 4]);
        assert!(max_diff(got.data(), &msa_oracle(&x, 2, &p, "a")) < 1e-12);
    }
}

#[test]
fn attention_single_and_identical_tokens() {
    let p = store_with(3, |b| declare_msa(b, "a", 4).unwrap());
    // one token attends only to itself, so the output is proj(v)
    let x = rand(&[1, 1, 4], 5);
    let wq = p.get("a.qkv.weight").unwrap();
    let bq = p.get("a.qkv.bias").unwrap();
    let v: Vec<f64> = (0..4).map(|j| bq.at(&[8 + j]) + (0..4).map(|i| x.at(&[0, 0, i]) * wq.at(&[i, 8 + j])).sum::<f64>()).collect();
    let wp = p.get("a.proj.weight").unwrap();
    let bp = p.get("a.proj.bias").unwrap();
    let want: Vec<f64> = (0..4).map(|j| bp.at(&[j]) + (0..4).map(|i| v[i] * wp.at(&[i, j])).sum::<f64>()).collect();
    assert!(max_diff(run_msa(&x, 2, &p).data(), &want) < 1e-12);
    // identical tokens give uniform attention and the same single-token output
    let rep = Tensor::from_fn(&[1, 5, 4], |i| x.at(&[0, 0, i[2]])).unwrap();
    let got = run_msa(&rep, 2, &p);
    for t in 0..5 {
        assert!(max_diff(&got.data()[t * 4..t * 4 + 4], &want) < 1e-12);
    }
}

#[test]
fn attention_is_permutation_equivariant() {
    let p = store_with(1, |b| declare_msa(b, "a", 8).unwrap());
    let x = rand(&[2, 6, 8], 2);
    let perm = [3, 0, 5, 1, 4, 2];
    let xp = Tensor::from_fn(&[2, 6, 8], |i| x.at(&[i[0], perm[i[1]], i[2]])).unwrap();
    let y = run_msa(&x, 2, &p);
    let yp = run_msa(&xp, 2, &p);
    let want = Tensor::from_fn(&[2, 6, 8], |i| y.at(&[i[0], perm[i[1]], i[2]])).unwrap();
    assert!(yp.max_abs_diff(&want) < 1e-12);
}

#[test]
fn zeroed_branches_reduce_to_identities() {
    // MBConv with a zero projection returns the expanded activation
    let mut p = store_with(4, |b| declare_mbconv(b, "m", 8, 3).unwrap());
    zero(&mut p, "m.project.weight");
    zero(&mut p, "m.project.bias");
    let x = rand(&[1, 8, 5, 6], 9);
    let mut g = Graph::no_grad();
    let b = p.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let y = mbconv(&mut g, &b, "m", xv).unwrap();
    let w = b.get("m.expand.weight").unwrap();
    let bias = b.get("m.expand.bias").unwrap();
    let a = g.conv2d(xv, w, Some(bias), [1, 1], [0, 0]).unwrap();
    let a = g.gelu(a).unwrap();
    assert!(g.value(y).max_abs_diff(g.value(a)) < 1e-12);

    // a transformer layer with both output projections zeroed is the identity
    let mut p = store_with(5, |b| declare_transformer_layer(b, "l", 8, 20).unwrap());
    for n in ["l.attn.proj.weight", "l.attn.proj.bias", "l.fc2.weight", "l.fc2.bias"] {
        zero(&mut p, n);
    }
    let x = rand(&[3, 4, 8], 6);
    let mut g = Graph::no_grad();
    let b = p.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let y = transformer_layer(&mut g, &b, "l", xv, 2).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn single_stage_fold_of_static_input() {
    // with T = 2 and a constant-over-time input, the first temporal tap only
    // sees padding and the other two see the same frame
    let p = store_with(7, |b| declare_temporal(b, 1, 3, 2).unwrap());
    let frame = rand(&[1, 3, 6, 5], 8);
    let x = Tensor::from_fn(&[1, 3, 2, 6, 5], |i| frame.at(&[i[0], i[1], i[3], i[4]])).unwrap();
    let w = p.get("tdown.0.weight").unwrap();
    let folded = Tensor::from_fn(&[3, 3, 3, 3], |i| w.at(&[i[0], i[1], 1, i[2], i[3]]) + w.at(&[i[0], i[1], 2, i[2], i[3]])).unwrap();
    let mut g = Graph::no_grad();
    let b = p.bind(&mut g, false);
    let xv = g.constant(x);
    let (y, state) = temporal_downsample(&mut g, &b, xv, 1).unwrap();
    assert_eq!(state.skips.len(), 1);
    let fv = g.constant(frame);
    let wv = g.constant(folded);
    let bias = b.get("tdown.0.bias").unwrap();
    let want = g.conv2d(fv, wv, Some(bias), [1, 1], [1, 1]).unwrap();
    let want = g.gelu(want).unwrap();
    assert!(g.value(y).max_abs_diff(g.value(want)) < 1e-12);
}

#[test]
fn skips_carry_information_and_gradients() {
    let stages = 3;
    let p = store_with(11, |b| declare_temporal(b, stages, 4, 3).unwrap());
    let x = rand(&[1, 4, 8, 5, 5], 12);
    let mut g = Graph::new();
    let b = p.bind(&mut g, true);
    let xv = g.leaf(x, true);
    let (y, state) = temporal_downsample(&mut g, &b, xv, stages).unwrap();
    assert_eq!(state.skips.len(), 3);
    let out = temporal_upsample(&mut g, &b, y, &state).unwrap();
    assert_eq!(g.shape(out), &[1, 3, 8, 5, 5]);

    // zeroing every skip reduces the decoder to repeat + convolve
    let mut ablated = state.clone();
    for s in ablated.skips.iter_mut() {
        let z = Tensor::zeros(g.shape(*s)).unwrap();
        *s = g.constant(z);
    }
    let abl = temporal_upsample(&mut g, &b, y, &ablated).unwrap();
    let mut h = g.reshape(y, &[1, 4, 1, 5, 5]).unwrap();
    for j in 0..stages {
        h = g.repeat_interleave(h, 2, 2).unwrap();
        let w = b.get(&format!("tup.{j}.weight")).unwrap();
        let bias = b.get(&format!("tup.{j}.bias")).unwrap();
        h = g.conv3d(h, w, Some(bias), [1, 1, 1], [1, 1, 1]).unwrap();
        if j + 1 < stages {
            h = g.gelu(h).unwrap();
        }
    }
    assert!(g.value(abl).max_abs_diff(g.value(h)) < 1e-12);
    assert!(g.value(out).max_abs_diff(g.value(abl)) > 1e-3);

    let r = g.constant(rand(&[1, 3, 8, 5, 5], 13));
    let prod = g.mul(out, r).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward(loss).unwrap();
    for (i, s) in state.skips.iter().enumerate() {
        let gr = g.grad(*s).expect("skip gradient");
        assert!(gr.data().iter().any(|v| v.abs() > 1e-9), "skip {i} has zero gradient");
    }
}

#[test]
fn maxvit_block_preserves_shape_at_128_with_window_7() {
    let m = MaxVitParams { dim: 8, kernel: 3, window: 7, grid: 7, heads: 2, mlp_ratio: 20 };
    let p: ParamStore<f32> = {
        let mut s = ParamStore::new();
        declare_maxvit_block(&mut Builder::new(&mut s, 0), "b", &m).unwrap();
        s
    };
    let x = Tensor::<f32>::create(&[1, 8, 128, 128], Init::SeededUniform { seed: 1, lo: -1.0, hi: 1.0 }).unwrap();
    let mut g = Graph::no_grad();
    let b = p.bind(&mut g, false);
    let xv = g.constant(x);
    let y = maxvit_block(&mut g, &b, "b", xv, &m).unwrap();
    assert_eq!(g.shape(y), &[1, 8, 128, 128]);
    assert!(g.value(y).is_finite());
}

#[test]
fn vit_tokens_and_patch_permutation() {
    let v = VitParams { dim: 2, embed: 8, depth: 1, heads: 2, mlp_ratio: 20, patch: 16 };
    let p = store_with(2, |b| declare_vit(b, "v", &v, 64).unwrap());
    let x = rand(&[1, 2, 128, 128], 3);
    // swap patch rows/cols by a fixed permutation of the 8x8 patch grid
    let perm: Vec<usize> = (0..64).map(|i| (i * 27 + 5) % 64).collect();
    let xp = Tensor::from_fn(&[1, 2, 128, 128], |i| {
        let (pr, pc) = (i[2] / 16, i[3] / 16);
        let src = perm[pr * 8 + pc];
        x.at(&[0, i[1], (src / 8) * 16 + i[2] % 16, (src % 8) * 16 + i[3] % 16])
    })
    .unwrap();
    let run = |input: &Tensor<f64>| {
        let mut g = Graph::no_grad();
        let b = p.bind(&mut g, false);
        let xv = g.constant(input.clone());
        let t = vit_block_2d(&mut g, &b, "v", xv, &v).unwrap();
        g.take_value(t)
    };
    let t = run(&x);
    assert_eq!(t.shape(), &[1, 64, 8]);
    let tp = run(&xp);
    let want = Tensor::from_fn(&[1, 64, 8], |i| t.at(&[0, perm[i[1]], i[2]])).unwrap();
    assert!(tp.max_abs_diff(&want) < 1e-12);
}

#[test]
fn reference_model_shape_contract() {
    let cfg = ModelConfig::reference("radarformer-ref").unwrap();
    let m = build_model::<f32>(&cfg, 0).unwrap();
    let x = Tensor::<f32>::create(&[1, 2, 32, 4, 128, 128], Init::SeededUniform { seed: 3, lo: -1.0, hi: 1.0 }).unwrap();
    let y = m.predict(&x).unwrap();
    assert_eq!(y.shape(), &[1, 3, 32, 128, 128]);
    assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn planar_baselines_shape_contract() {
    for name in ["cnn2d-ref", "transformer2d-ref"] {
        let cfg = ModelConfig::reference(name).unwrap();
        let m = build_model::<f32>(&cfg, 0).unwrap();
        let x = Tensor::<f32>::create(&cfg.input_shape(1), Init::SeededUniform { seed: 3, lo: -1.0, hi: 1.0 }).unwrap();
        let y = m.predict(&x).unwrap();
        assert_eq!(y.shape(), &[1, 3, cfg.frames, cfg.height, cfg.width], "{name}");
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)), "{name}");
    }
}

#[test]
fn models_are_deterministic_per_seed() {
    let cfg = ModelConfig::reference("radarformer-tiny").unwrap();
    let a = build_model::<f32>(&cfg, 5).unwrap();
    let b = build_model::<f32>(&cfg, 5).unwrap();
    let c = build_model::<f32>(&cfg, 6).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, c.params);
    let x = Tensor::<f32>::create(&cfg.input_shape(1), Init::SeededUniform { seed: 4, lo: -1.0, hi: 1.0 }).unwrap();
    let y1 = a.predict(&x).unwrap();
    let y2 = b.predict(&x).unwrap();
    assert!(y1.data().iter().zip(y2.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}
