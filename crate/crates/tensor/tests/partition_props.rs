//! Partition/reverse identities over the size lattice and random inputs.

use proptest::prelude::*;
use radarformer_tensor::{grid_partition, grid_reverse, window_partition, window_reverse, Graph, Init, Tensor};

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::create(shape, Init::SeededUniform { seed, lo: -1.0, hi: 1.0 }).unwrap()
}

fn bits(t: &Tensor<f64>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn lattice_round_trips_are_bit_exact() {
    for h in [4, 7, 8, 16, 32] {
        for w in [4, 7, 8, 16, 32] {
            for p in [1, 2, 4, 7, 8] {
                let x = rand(&[2, 3, h, w], (h * 100 + w * 10 + p) as u64);
                let mut g = Graph::<f64>::no_grad();
                let vx = g.constant(x.clone());
                let (t, info) = window_partition(&mut g, vx, p).unwrap();
                assert_eq!(g.shape(t)[1], p * p);
                let back = window_reverse(&mut g, t, &info).unwrap();
                assert_eq!(bits(g.value(back)), bits(&x), "window H={h} W={w} P={p}");
                let (t, info) = grid_partition(&mut g, vx, p).unwrap();
                let back = grid_reverse(&mut g, t, &info).unwrap();
                assert_eq!(bits(g.value(back)), bits(&x), "grid H={h} W={w} G={p}");
            }
        }
    }
}

#[test]
fn non_divisible_resolution_with_window_seven() {
    let x = Tensor::<f32>::create(&[1, 4, 128, 128], Init::SeededUniform { seed: 7, lo: -1.0, hi: 1.0 }).unwrap();
    let mut g = Graph::<f32>::no_grad();
    let vx = g.constant(x.clone());
    let (t, info) = window_partition(&mut g, vx, 7).unwrap();
    assert_eq!((info.padded_height, info.padded_width), (133, 133));
    assert_eq!(g.shape(t), &[19 * 19, 49, 4]);
    let back = window_reverse(&mut g, t, &info).unwrap();
    assert_eq!(g.value(back), &x);
    let (t, info) = grid_partition(&mut g, vx, 7).unwrap();
    let back = grid_reverse(&mut g, t, &info).unwrap();
    assert_eq!(g.value(back), &x);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grid_token_indexing(h in 1usize..12, w in 1usize..12, gsize in 1usize..5, seed in 0u64..1000) {
        let x = rand(&[1, 2, h, w], seed);
        let mut g = Graph::<f64>::no_grad();
        let vx = g.constant(x.clone());
        let (t, info) = grid_partition(&mut g, vx, gsize).unwrap();
        let (sh, sw) = (info.padded_height / gsize, info.padded_width / gsize);
        let tokens = g.value(t);
        for group in 0..sh * sw {
            let (hi, wi) = (group / sw, group % sw);
            for tok in 0..gsize * gsize {
                let (gi, gj) = (tok / gsize, tok % gsize);
                let (r, c) = (gi * sh + hi, gj * sw + wi);
                for ch in 0..2 {
                    let expect = if r < h && c < w { x.at(&[0, ch, r, c]) } else { 0.0 };
                    prop_assert_eq!(tokens.at(&[group, tok, ch]), expect);
                }
            }
        }
    }

    #[test]
    fn window_token_indexing(h in 1usize..12, w in 1usize..12, p in 1usize..5, seed in 0u64..1000) {
        let x = rand(&[2, 1, h, w], seed);
        let mut g = Graph::<f64>::no_grad();
        let vx = g.constant(x.clone());
        let (t, info) = window_partition(&mut g, vx, p).unwrap();
        let (nh, nw) = (info.padded_height / p, info.padded_width / p);
        let tokens = g.value(t);
        for b in 0..2 {
            for win in 0..nh * nw {
                let (wr, wc) = (win / nw, win % nw);
                for tok in 0..p * p {
                    let (r, c) = (wr * p + tok / p, wc * p + tok % p);
                    let expect = if r < h && c < w { x.at(&[b, 0, r, c]) } else { 0.0 };
                    prop_assert_eq!(tokens.at(&[b * nh * nw + win, tok, 0]), expect);
                }
            }
        }
    }
}
