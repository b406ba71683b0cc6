//! Forward ops against naive loop oracles and hand-computed values.

use radarformer_tensor::{Activation, EwiseKind, Graph, Init, NormKind, RunningStats, Tensor};

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::create(shape, Init::SeededUniform { seed, lo: -1.0, hi: 1.0 }).unwrap()
}

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.at(&[i, p]) * b.at(&[p, j]);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn naive_conv3d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: &[f64],
    stride: [usize; 3],
    pad: [usize; 3],
) -> (Vec<usize>, Vec<f64>) {
    let s = x.shape();
    let k = w.shape();
    let (b, cin, t, h, wd) = (s[0], s[1], s[2], s[3], s[4]);
    let (cout, kt, kh, kw) = (k[0], k[2], k[3], k[4]);
    let to = (t + 2 * pad[0] - kt) / stride[0] + 1;
    let ho = (h + 2 * pad[1] - kh) / stride[1] + 1;
    let wo = (wd + 2 * pad[2] - kw) / stride[2] + 1;
    let mut out = Vec::new();
    for bi in 0..b {
        for co in 0..cout {
            for ot in 0..to {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            for dt in 0..kt {
                                for dh in 0..kh {
                                    for dw in 0..kw {
                                        let it = (ot * stride[0] + dt) as isize - pad[0] as isize;
                                        let ih = (oh * stride[1] + dh) as isize - pad[1] as isize;
                                        let iw = (ow * stride[2] + dw) as isize - pad[2] as isize;
                                        if it < 0 || ih < 0 || iw < 0 || it >= t as isize || ih >= h as isize || iw >= wd as isize {
                                            continue;
                                        }
                                        acc += x.at(&[bi, ci, it as usize, ih as usize, iw as usize])
                                            * w.at(&[co, ci, dt, dh, dw]);
                                    }
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
    }
    (vec![b, cout, to, ho, wo], out)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn matmul_identity_and_hand_values() {
    let mut g = Graph::<f64>::no_grad();
    let i2 = g.constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let m = g.constant(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let p = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = g.constant(Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap());
    let b = g.constant(Tensor::from_vec(&[2, 1], vec![3.0, 4.0]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    for seed in 0..5 {
        let a = rand(&[5, 4], seed);
        let b = rand(&[4, 3], seed + 100);
        let mut g = Graph::<f64>::no_grad();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(va, vb).unwrap();
        assert!(max_diff(g.value(c).data(), &naive_matmul(&a, &b)) < 1e-12);
    }
}

#[test]
fn batched_matmul_broadcasts_matrix_operand() {
    let a = rand(&[3, 2, 5, 4], 7);
    let b = rand(&[4, 6], 8);
    let mut g = Graph::<f64>::no_grad();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(va, vb).unwrap();
    assert_eq!(g.shape(c), &[3, 2, 5, 6]);
    for batch in 0..6 {
        let slice = Tensor::from_vec(&[5, 4], a.data()[batch * 20..(batch + 1) * 20].to_vec()).unwrap();
        let expect = naive_matmul(&slice, &b);
        assert!(max_diff(&g.value(c).data()[batch * 30..(batch + 1) * 30], &expect) < 1e-12);
    }
}

#[test]
fn matmul_inner_mismatch_is_shape_error() {
    let mut g = Graph::<f64>::no_grad();
    let a = g.constant(rand(&[2, 3], 1));
    let b = g.constant(rand(&[4, 2], 2));
    assert!(matches!(g.matmul(a, b), Err(radarformer_tensor::TensorError::Shape(_))));
}

#[test]
fn conv2d_pointwise_is_channel_mix() {
    let x = rand(&[2, 2, 4, 4], 3);
    // swap the two channels and scale the second by 2
    let w = Tensor::from_vec(&[2, 2, 1, 1], vec![0.0, 1.0, 2.0, 0.0]).unwrap();
    let mut g = Graph::<f64>::no_grad();
    let (vx, vw) = (g.constant(x.clone()), g.constant(w));
    let y = g.conv2d(vx, vw, None, [1, 1], [0, 0]).unwrap();
    for b in 0..2 {
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(g.value(y).at(&[b, 0, r, c]), x.at(&[b, 1, r, c]));
                assert_eq!(g.value(y).at(&[b, 1, r, c]), 2.0 * x.at(&[b, 0, r, c]));
            }
        }
    }
}

#[test]
fn conv2d_ones_kernel_on_constant_image() {
    let (cin, c) = (3, 0.7);
    let x = Tensor::<f64>::create(&[1, cin, 6, 6], Init::Constant(c)).unwrap();
    let w = Tensor::<f64>::create(&[1, cin, 3, 3], Init::Constant(1.0)).unwrap();
    let mut g = Graph::<f64>::no_grad();
    let (vx, vw) = (g.constant(x), g.constant(w));
    let y = g.conv2d(vx, vw, None, [1, 1], [1, 1]).unwrap();
    for r in 1..5 {
        for col in 1..5 {
            assert!((g.value(y).at(&[0, 0, r, col]) - 9.0 * c * cin as f64).abs() < 1e-12);
        }
    }
    // corners see a 2x2 window
    assert!((g.value(y).at(&[0, 0, 0, 0]) - 4.0 * c * cin as f64).abs() < 1e-12);
}

#[test]
fn conv2d_matches_loop_oracle() {
    let cases = [
        ([2, 3, 7, 6], [4, 3, 3, 3], [1, 1], [1, 1]),
        ([1, 2, 9, 8], [3, 2, 5, 3], [2, 1], [2, 0]),
        ([1, 1, 5, 5], [2, 1, 1, 1], [2, 2], [0, 0]),
        ([2, 4, 8, 8], [2, 4, 3, 5], [2, 3], [1, 2]),
    ];
    for (seed, (xs, ws, stride, pad)) in cases.into_iter().enumerate() {
        let x = rand(&xs, seed as u64);
        let w = rand(&ws, 50 + seed as u64);
        let bias = rand(&[ws[0]], 90 + seed as u64);
        let mut g = Graph::<f64>::no_grad();
        let (vx, vw, vb) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(bias.clone()));
        let y = g.conv2d(vx, vw, Some(vb), stride, pad).unwrap();
        let x5 = x.clone().reshaped(&[xs[0], xs[1], 1, xs[2], xs[3]]).unwrap();
        let w5 = w.clone().reshaped(&[ws[0], ws[1], 1, ws[2], ws[3]]).unwrap();
        let (shape, expect) = naive_conv3d(&x5, &w5, bias.data(), [1, stride[0], stride[1]], [0, pad[0], pad[1]]);
        assert_eq!(g.shape(y), &[shape[0], shape[1], shape[3], shape[4]]);
        assert!(max_diff(g.value(y).data(), &expect) < 1e-10);
    }
}

#[test]
fn conv3d_matches_loop_oracle() {
    let cases = [
        ([1, 2, 4, 5, 5], [3, 2, 3, 3, 3], [1, 1, 1], [1, 1, 1]),
        ([2, 3, 8, 4, 6], [2, 3, 3, 3, 3], [2, 1, 1], [1, 1, 1]),
        ([1, 4, 6, 4, 4], [5, 4, 1, 1, 1], [1, 1, 1], [0, 0, 0]),
        ([1, 2, 5, 6, 7], [2, 2, 3, 1, 5], [2, 2, 1], [0, 0, 2]),
    ];
    for (seed, (xs, ws, stride, pad)) in cases.into_iter().enumerate() {
        let x = rand(&xs, 10 + seed as u64);
        let w = rand(&ws, 60 + seed as u64);
        let bias = rand(&[ws[0]], 95 + seed as u64);
        let mut g = Graph::<f64>::no_grad();
        let (vx, vw, vb) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(bias.clone()));
        let y = g.conv3d(vx, vw, Some(vb), stride, pad).unwrap();
        let (shape, expect) = naive_conv3d(&x, &w, bias.data(), stride, pad);
        assert_eq!(g.shape(y), &shape[..]);
        assert!(max_diff(g.value(y).data(), &expect) < 1e-10);
    }
}

#[test]
fn conv3d_unit_kernel_and_temporal_stride() {
    let x = rand(&[1, 2, 8, 3, 3], 1);
    let w = Tensor::from_vec(&[1, 2, 1, 1, 1], vec![1.0, -1.0]).unwrap();
    let mut g = Graph::<f64>::no_grad();
    let (vx, vw) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv3d(vx, vw, None, [1, 1, 1], [0, 0, 0]).unwrap();
    for t in 0..8 {
        assert_eq!(g.value(y).at(&[0, 0, t, 1, 2]), x.at(&[0, 0, t, 1, 2]) - x.at(&[0, 1, t, 1, 2]));
    }
    let z = g.conv3d(vx, vw, None, [2, 1, 1], [0, 0, 0]).unwrap();
    assert_eq!(g.shape(z), &[1, 1, 4, 3, 3]);
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::no_grad();
    let x = g.constant(Tensor::from_vec(&[4], vec![1.0; 4]).unwrap());
    let s = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(s).data(), &[0.25; 4]);

    let y = g.constant(Tensor::from_vec(&[2], vec![0.0, 2f64.ln()]).unwrap());
    let s = g.softmax(y, 0).unwrap();
    assert!((g.value(s).data()[0] - 1.0 / 3.0).abs() < 1e-15);
    assert!((g.value(s).data()[1] - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn softmax_rows_sum_to_one_and_shift_invariant() {
    let x = rand(&[3, 5, 7], 5).map(|v| 30.0 * v);
    let shifted = x.map(|v| v + 123.5);
    for axis in 0..3 {
        let mut g = Graph::<f64>::no_grad();
        let (a, b) = (g.constant(x.clone()), g.constant(shifted.clone()));
        let sa = g.softmax(a, axis).unwrap();
        let sb = g.softmax(b, axis).unwrap();
        let shape = x.shape().to_vec();
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..shape[axis]).map(|j| g.value(sa).data()[(o * shape[axis] + j) * inner + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert!(g.value(sa).max_abs_diff(g.value(sb)) < 1e-12);
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::no_grad();
    let gamma = g.constant(Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap());
    let beta = g.constant(Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap());
    let x = g.constant(Tensor::from_vec(&[1, 2], vec![-1.0, 1.0]).unwrap());
    let y = g.norm(x, NormKind::Layer, gamma, beta, 1e-12).unwrap();
    assert!((g.value(y).data()[0] + 1.0).abs() < 1e-9);
    assert!((g.value(y).data()[1] - 1.0).abs() < 1e-9);

    let c = g.constant(Tensor::from_vec(&[1, 2], vec![3.0, 3.0]).unwrap());
    let y = g.norm(c, NormKind::Layer, gamma, beta, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0]);
}

#[test]
fn layer_norm_centres_and_scales_groups() {
    let x = rand(&[6, 16], 9).map(|v| 5.0 * v + 2.0);
    let mut g = Graph::<f64>::no_grad();
    let vx = g.constant(x);
    let gamma = g.constant(Tensor::create(&[16], Init::Constant(1.0)).unwrap());
    let beta = g.constant(Tensor::zeros(&[16]).unwrap());
    let y = g.norm(vx, NormKind::Layer, gamma, beta, 1e-12).unwrap();
    for row in g.value(y).data().chunks(16) {
        let mean: f64 = row.iter().sum::<f64>() / 16.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-7);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn batch_norm_statistics() {
    let x = rand(&[4, 3, 5, 5], 11).map(|v| 3.0 * v - 1.0);
    let mut stats = RunningStats::new(3);
    let mut g = Graph::<f64>::no_grad();
    let vx = g.constant(x.clone());
    let gamma = g.constant(Tensor::create(&[3], Init::Constant(1.0)).unwrap());
    let beta = g.constant(Tensor::zeros(&[3]).unwrap());
    let y = g
        .norm(vx, NormKind::Batch { stats: &mut stats, training: true }, gamma, beta, 1e-12)
        .unwrap();
    for c in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|b| (0..25).map(move |p| (b, p)))
            .map(|(b, p)| g.value(y).data()[(b * 3 + c) * 25 + p])
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-7);
        assert!((var - 1.0).abs() < 1e-6);
    }
    // running statistics moved towards the batch mean
    assert!(stats.mean.iter().all(|&m| m != 0.0));
    // inference mode applies the running statistics
    let ye = g
        .norm(vx, NormKind::Batch { stats: &mut stats, training: false }, gamma, beta, 1e-5)
        .unwrap();
    let expect = (x.at(&[0, 1, 2, 2]) - stats.mean[1]) / (stats.var[1] + 1e-5).sqrt();
    assert!((g.value(ye).at(&[0, 1, 2, 2]) - expect).abs() < 1e-12);
}

#[test]
fn non_positive_eps_is_config_error() {
    let mut g = Graph::<f64>::no_grad();
    let x = g.constant(rand(&[2, 2], 1));
    let gamma = g.constant(Tensor::create(&[2], Init::Constant(1.0)).unwrap());
    let beta = g.constant(Tensor::zeros(&[2]).unwrap());
    assert!(matches!(
        g.norm(x, NormKind::Layer, gamma, beta, 0.0),
        Err(radarformer_tensor::TensorError::Config(_))
    ));
}

/// erf via the all-positive Kummer series
/// `erf(x) = 2x/sqrt(pi) * exp(-x^2) * sum_n (2x^2)^n / (1*3*...*(2n+1))`.
fn erf_series(x: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    let x2 = 2.0 * x * x;
    for n in 1..400 {
        term *= x2 / (2 * n + 1) as f64;
        sum += term;
        if term < 1e-18 * sum {
            break;
        }
    }
    2.0 * x / std::f64::consts::PI.sqrt() * (-x * x).exp() * sum
}

#[test]
fn activations() {
    let mut g = Graph::<f64>::no_grad();
    let x = g.constant(Tensor::from_vec(&[3], vec![-2.0, 3.0, 0.0]).unwrap());
    let r = g.activation(x, Activation::Relu).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 3.0, 0.0]);
    let s = g.activation(x, Activation::Sigmoid).unwrap();
    assert_eq!(g.value(s).data()[2], 0.5);

    let big = g.constant(Tensor::from_vec(&[2], vec![-800.0, 800.0]).unwrap());
    let s = g.sigmoid(big).unwrap();
    assert!(g.value(s).data()[0] >= 0.0 && g.value(s).data()[1] <= 1.0);

    let pts: Vec<f64> = (0..100).map(|i| -6.0 + 12.0 * i as f64 / 99.0).collect();
    let xs = g.constant(Tensor::from_vec(&[100], pts.clone()).unwrap());
    let ge = g.gelu(xs).unwrap();
    for (i, &p) in pts.iter().enumerate() {
        let oracle = 0.5 * p * (1.0 + erf_series(p / 2f64.sqrt()));
        assert!((g.value(ge).data()[i] - oracle).abs() < 1e-7, "x={p}");
    }
}

#[test]
fn sigmoid_strictly_inside_unit_interval() {
    let mut g = Graph::<f64>::no_grad();
    let x = g.constant(rand(&[1000], 4).map(|v| 30.0 * v));
    let s = g.sigmoid(x).unwrap();
    assert!(g.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn elementwise_identities_and_loop_oracle() {
    let a = rand(&[3, 4], 1);
    let b = rand(&[3, 4], 2);
    let mut g = Graph::<f64>::no_grad();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let zeros = g.constant(Tensor::zeros(&[3, 4]).unwrap());
    let ones = g.constant(Tensor::create(&[3, 4], Init::Constant(1.0)).unwrap());
    let s = g.ewise(va, zeros, EwiseKind::Add).unwrap();
    assert_eq!(g.value(s), &a);
    let m = g.ewise(va, ones, EwiseKind::Mul).unwrap();
    assert_eq!(g.value(m), &a);
    let ab = g.ewise(va, vb, EwiseKind::Add).unwrap();
    let mut expect = Vec::new();
    for i in 0..3 {
        for j in 0..4 {
            expect.push(a.at(&[i, j]) + b.at(&[i, j]));
        }
    }
    assert!(max_diff(g.value(ab).data(), &expect) < 1e-15);

    let wrong = g.constant(rand(&[4, 3], 3));
    assert!(g.add(va, wrong).is_err());
}

#[test]
fn reshape_pad_crop_round_trips() {
    let a = rand(&[2, 3], 1);
    let mut g = Graph::<f64>::no_grad();
    let va = g.constant(a.clone());
    let r = g.reshape(va, &[3, 2]).unwrap();
    let back = g.reshape(r, &[2, 3]).unwrap();
    assert_eq!(g.value(back), &a);

    let img = rand(&[1, 2, 4, 5], 2);
    let vi = g.constant(img.clone());
    let p = g.pad(vi, &[(0, 0), (0, 0), (1, 1), (1, 1)]).unwrap();
    assert_eq!(g.shape(p), &[1, 2, 6, 7]);
    assert_eq!(g.value(p).at(&[0, 1, 0, 0]), 0.0);
    let c = g.crop(p, &[(0, 1), (0, 2), (1, 4), (1, 5)]).unwrap();
    assert_eq!(g.value(c), &img);
}

#[test]
fn backward_examples() {
    let x = rand(&[2, 3], 1);
    let mut g = Graph::<f64>::new();
    let vx = g.leaf(x.clone(), true);
    let s = g.sum(vx).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(vx).unwrap().data(), &[1.0; 6]);
    assert!(matches!(g.backward(s), Err(radarformer_tensor::TensorError::Usage(_))));
    g.reset_grads();
    g.backward(s).unwrap();

    let mut g = Graph::<f64>::new();
    let vx = g.leaf(x.clone(), true);
    let sq = g.mul(vx, vx).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(vx).unwrap().max_abs_diff(&x.map(|v| 2.0 * v)) < 1e-15);

    assert!(matches!(g.backward(vx), Err(radarformer_tensor::TensorError::Usage(_))));
}

#[test]
fn mac_counter_tracks_kernels() {
    let mut g = Graph::<f64>::no_grad();
    let x = g.constant(rand(&[1, 2, 8, 8], 1));
    let w = g.constant(rand(&[4, 2, 3, 3], 2));
    g.conv2d(x, w, None, [1, 1], [1, 1]).unwrap();
    assert_eq!(g.macs(), 8 * 8 * 4 * 2 * 9);
    let before = g.macs();
    let a = g.constant(rand(&[5, 4], 3));
    let b = g.constant(rand(&[4, 3], 4));
    g.matmul(a, b).unwrap();
    assert_eq!(g.macs() - before, 60);
    let before = g.macs();
    g.add(a, a).unwrap();
    assert_eq!(g.macs(), before);
}

#[test]
fn f32_mode_agrees_with_f64() {
    let x = rand(&[1, 3, 9, 9], 1);
    let w = rand(&[4, 3, 3, 3], 2);
    let mut g64 = Graph::<f64>::no_grad();
    let (a, b) = (g64.constant(x.clone()), g64.constant(w.clone()));
    let y64 = g64.conv2d(a, b, None, [1, 1], [1, 1]).unwrap();
    let mut g32 = Graph::<f32>::no_grad();
    let (a, b) = (g32.constant(x.cast()), g32.constant(w.cast()));
    let y32 = g32.conv2d(a, b, None, [1, 1], [1, 1]).unwrap();
    assert!(g64.value(y64).max_abs_diff(&g32.value(y32).cast()) < 1e-5);
}
