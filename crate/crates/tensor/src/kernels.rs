//! Raw buffer kernels shared by forward and backward passes.

use crate::error::{config_err, shape_err, Result};
use crate::scalar::{gemm, MatLayout, Scalar};
use crate::tensor::strides_of;

/// Geometry of a convolution over three spatial axes (T, H, W). 2D
/// convolutions use `T = kt = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    /// Output extents use floor division: `(n + 2p - k) / s + 1`.
    pub fn new(
        batch: usize,
        cin: usize,
        cout: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        let mut output = [0; 3];
        for ax in 0..3 {
            if stride[ax] == 0 {
                return Err(config_err!("convolution stride must be positive"));
            }
            if kernel[ax] % 2 == 0 {
                return Err(config_err!("convolution kernel extents must be odd, got {kernel:?}"));
            }
            let span = input[ax] + 2 * pad[ax];
            if span < kernel[ax] {
                return Err(shape_err!(
                    "kernel {kernel:?} larger than padded input {input:?} (pad {pad:?})"
                ));
            }
            output[ax] = (span - kernel[ax]) / stride[ax] + 1;
        }
        Ok(Self { batch, cin, cout, input, kernel, stride, pad, output })
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    pub fn out_plane(&self) -> usize {
        self.output[1] * self.output[2]
    }

    pub fn in_plane(&self) -> usize {
        self.input[1] * self.input[2]
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.cout * self.output[0] * self.out_plane()
    }

    pub fn in_len(&self) -> usize {
        self.batch * self.cin * self.input[0] * self.in_plane()
    }

    /// Multiply-accumulates executed by one forward pass.
    pub fn macs(&self) -> u64 {
        (self.batch * self.output[0] * self.cout * self.patch_len() * self.out_plane()) as u64
    }

    fn pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `d`.
fn valid_range(n_out: usize, n_in: usize, stride: usize, d: usize, pad: usize) -> (usize, usize) {
    // input index = o * stride + d - pad must lie in [0, n_in)
    let lo = if pad > d { (pad - d).div_ceil(stride) } else { 0 };
    let hi = if n_in + pad > d { (n_in + pad - d).div_ceil(stride).min(n_out) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<E: Scalar>(x: &[E], g: &ConvGeom, b: usize, to: usize, col: &mut [E]) {
    let [t_in, h_in, w_in] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let [_, ho, wo] = g.output;
    let plane = ho * wo;
    for ci in 0..g.cin {
        for dt in 0..kt {
            let ti = (to * st + dt) as isize - pt as isize;
            for dh in 0..kh {
                let (oh_lo, oh_hi) = valid_range(ho, h_in, sh, dh, ph);
                for dw in 0..kw {
                    let row = ((ci * kt + dt) * kh + dh) * kw + dw;
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    if ti < 0 || ti as usize >= t_in {
                        dst.fill(E::zero());
                        continue;
                    }
                    let base = ((b * g.cin + ci) * t_in + ti as usize) * h_in * w_in;
                    let (ow_lo, ow_hi) = valid_range(wo, w_in, sw, dw, pw);
                    for oh in 0..ho {
                        let drow = &mut dst[oh * wo..(oh + 1) * wo];
                        if oh < oh_lo || oh >= oh_hi {
                            drow.fill(E::zero());
                            continue;
                        }
                        let hi = oh * sh + dh - ph;
                        let xrow = &x[base + hi * w_in..base + (hi + 1) * w_in];
                        drow[..ow_lo].fill(E::zero());
                        drow[ow_hi..].fill(E::zero());
                        if sw == 1 {
                            let off = ow_lo + dw - pw;
                            drow[ow_lo..ow_hi].copy_from_slice(&xrow[off..off + ow_hi - ow_lo]);
                        } else {
                            for ow in ow_lo..ow_hi {
                                drow[ow] = xrow[ow * sw + dw - pw];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<E: Scalar>(col: &[E], g: &ConvGeom, b: usize, to: usize, dx: &mut [E]) {
    let [t_in, h_in, w_in] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let [_, ho, wo] = g.output;
    let plane = ho * wo;
    for ci in 0..g.cin {
        for dt in 0..kt {
            let ti = (to * st + dt) as isize - pt as isize;
            if ti < 0 || ti as usize >= t_in {
                continue;
            }
            let base = ((b * g.cin + ci) * t_in + ti as usize) * h_in * w_in;
            for dh in 0..kh {
                let (oh_lo, oh_hi) = valid_range(ho, h_in, sh, dh, ph);
                for dw in 0..kw {
                    let row = ((ci * kt + dt) * kh + dh) * kw + dw;
                    let src = &col[row * plane..(row + 1) * plane];
                    let (ow_lo, ow_hi) = valid_range(wo, w_in, sw, dw, pw);
                    for oh in oh_lo..oh_hi {
                        let hi = oh * sh + dh - ph;
                        let xrow = &mut dx[base + hi * w_in..base + (hi + 1) * w_in];
                        let srow = &src[oh * wo..(oh + 1) * wo];
                        for ow in ow_lo..ow_hi {
                            xrow[ow * sw + dw - pw] = xrow[ow * sw + dw - pw] + srow[ow];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation forward pass. Returns the output buffer laid out as
/// `[B, Cout, To, Ho, Wo]`.
pub fn conv_forward<E: Scalar>(x: &[E], w: &[E], bias: Option<&[E]>, g: &ConvGeom) -> Vec<E> {
    let plane = g.out_plane();
    let to_n = g.output[0];
    let k = g.patch_len();
    let mut out = vec![E::zero(); g.out_len()];
    let mut col = if g.pointwise() { Vec::new() } else { vec![E::zero(); k * plane] };
    for b in 0..g.batch {
        for to in 0..to_n {
            let lc = MatLayout { offset: (b * g.cout * to_n + to) * plane, rs: to_n * plane, cs: 1 };
            if g.pointwise() {
                let lx = MatLayout {
                    offset: (b * g.cin * g.input[0] + to) * plane,
                    rs: g.input[0] * plane,
                    cs: 1,
                };
                gemm(g.cout, k, plane, E::one(), w, MatLayout::row_major(0, k), x, lx, E::zero(), &mut out, lc);
            } else {
                im2col(x, g, b, to, &mut col);
                gemm(
                    g.cout,
                    k,
                    plane,
                    E::one(),
                    w,
                    MatLayout::row_major(0, k),
                    &col,
                    MatLayout::row_major(0, plane),
                    E::zero(),
                    &mut out,
                    lc,
                );
            }
        }
    }
    if let Some(bias) = bias {
        let chunk = to_n * plane;
        for (i, block) in out.chunks_mut(chunk).enumerate() {
            let bv = bias[i % g.cout];
            block.iter_mut().for_each(|v| *v = *v + bv);
        }
    }
    out
}

pub struct ConvGrads<E> {
    pub dx: Option<Vec<E>>,
    pub dw: Option<Vec<E>>,
    pub db: Option<Vec<E>>,
}

pub fn conv_backward<E: Scalar>(
    x: &[E],
    w: &[E],
    dy: &[E],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<E> {
    let (need_dx, need_dw, need_db) = need;
    let plane = g.out_plane();
    let to_n = g.output[0];
    let k = g.patch_len();
    let mut dx = need_dx.then(|| vec![E::zero(); g.in_len()]);
    let mut dw = need_dw.then(|| vec![E::zero(); g.cout * k]);
    let pointwise = g.pointwise();
    let mut col = if pointwise || !need_dw { Vec::new() } else { vec![E::zero(); k * plane] };
    let mut dcol = if pointwise || !need_dx { Vec::new() } else { vec![E::zero(); k * plane] };
    for b in 0..g.batch {
        for to in 0..to_n {
            let ldy = MatLayout { offset: (b * g.cout * to_n + to) * plane, rs: to_n * plane, cs: 1 };
            let lx = MatLayout { offset: (b * g.cin * g.input[0] + to) * plane, rs: g.input[0] * plane, cs: 1 };
            if let Some(dw) = dw.as_mut() {
                // dW[cout x K] += dY[cout x P] * col^T[P x K]
                if pointwise {
                    let lxt = MatLayout { offset: lx.offset, rs: 1, cs: lx.rs };
                    gemm(g.cout, plane, k, E::one(), dy, ldy, x, lxt, E::one(), dw, MatLayout::row_major(0, k));
                } else {
                    im2col(x, g, b, to, &mut col);
                    gemm(
                        g.cout,
                        plane,
                        k,
                        E::one(),
                        dy,
                        ldy,
                        &col,
                        MatLayout::transposed(0, plane),
                        E::one(),
                        dw,
                        MatLayout::row_major(0, k),
                    );
                }
            }
            if let Some(dx) = dx.as_mut() {
                // dcol[K x P] = W^T[K x cout] * dY[cout x P]
                if pointwise {
                    gemm(k, g.cout, plane, E::one(), w, MatLayout::transposed(0, k), dy, ldy, E::one(), dx, lx);
                } else {
                    gemm(
                        k,
                        g.cout,
                        plane,
                        E::one(),
                        w,
                        MatLayout::transposed(0, k),
                        dy,
                        ldy,
                        E::zero(),
                        &mut dcol,
                        MatLayout::row_major(0, plane),
                    );
                    col2im_add(&dcol, g, b, to, dx);
                }
            }
        }
    }
    let db = need_db.then(|| {
        let mut db = vec![E::zero(); g.cout];
        for (i, block) in dy.chunks(to_n * plane).enumerate() {
            db[i % g.cout] = db[i % g.cout] + block.iter().copied().sum::<E>();
        }
        db
    });
    ConvGrads { dx, dw, db }
}

/// Generic axis permutation: output axis `i` is input axis `perm[i]`.
pub fn permute<E: Scalar>(data: &[E], shape: &[usize], perm: &[usize]) -> (Vec<E>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides_of(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if rank == 0 || n == 0 {
        return (data.to_vec(), out_shape);
    }
    let last = rank - 1;
    let inner = out_shape[last];
    let inner_stride = src_strides[last];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    let rows = n / inner;
    for _ in 0..rows {
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            for j in 0..inner {
                out.push(data[base + j * inner_stride]);
            }
        }
        // advance odometer over all but the last axis
        for ax in (0..last).rev() {
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Copies (or accumulates) a hyper-rectangle of extent `extent` from `src`
/// at `src_origin` into `dst` at `dst_origin`.
#[allow(clippy::too_many_arguments)]
pub fn copy_block<E: Scalar>(
    src: &[E],
    src_shape: &[usize],
    src_origin: &[usize],
    dst: &mut [E],
    dst_shape: &[usize],
    dst_origin: &[usize],
    extent: &[usize],
    accumulate: bool,
) {
    let rank = extent.len();
    if rank == 0 || extent.iter().any(|&e| e == 0) {
        return;
    }
    let ss = strides_of(src_shape);
    let ds = strides_of(dst_shape);
    let last = rank - 1;
    let inner = extent[last];
    let mut idx = vec![0usize; rank];
    let rows: usize = extent[..last].iter().product();
    for _ in 0..rows {
        let mut so = 0;
        let mut doff = 0;
        for ax in 0..rank {
            so += (src_origin[ax] + idx[ax]) * ss[ax];
            doff += (dst_origin[ax] + idx[ax]) * ds[ax];
        }
        let s = &src[so..so + inner];
        let d = &mut dst[doff..doff + inner];
        if accumulate {
            d.iter_mut().zip(s).for_each(|(a, &b)| *a = *a + b);
        } else {
            d.copy_from_slice(s);
        }
        for ax in (0..last).rev() {
            idx[ax] += 1;
            if idx[ax] < extent[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax_forward<E: Scalar>(x: &[E], shape: &[usize], axis: usize) -> Vec<E> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![E::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut m = E::neg_infinity();
            for j in 0..len {
                m = m.max(x[base + j * inner]);
            }
            let mut s = E::zero();
            for j in 0..len {
                let e = (x[base + j * inner] - m).exp();
                out[base + j * inner] = e;
                s = s + e;
            }
            for j in 0..len {
                out[base + j * inner] = out[base + j * inner] / s;
            }
        }
    }
    out
}

pub fn softmax_backward<E: Scalar>(y: &[E], dy: &[E], shape: &[usize], axis: usize) -> Vec<E> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut dx = vec![E::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = E::zero();
            for j in 0..len {
                dot = dot + y[base + j * inner] * dy[base + j * inner];
            }
            for j in 0..len {
                let p = base + j * inner;
                dx[p] = y[p] * (dy[p] - dot);
            }
        }
    }
    dx
}

pub fn repeat_interleave<E: Scalar>(x: &[E], shape: &[usize], axis: usize, factor: usize) -> Vec<E> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = Vec::with_capacity(x.len() * factor);
    for o in 0..outer {
        for j in 0..len {
            let row = &x[(o * len + j) * inner..(o * len + j + 1) * inner];
            for _ in 0..factor {
                out.extend_from_slice(row);
            }
        }
    }
    out
}

pub fn repeat_interleave_backward<E: Scalar>(
    dy: &[E],
    in_shape: &[usize],
    axis: usize,
    factor: usize,
) -> Vec<E> {
    let (outer, len, inner) = split_axis(in_shape, axis);
    let mut dx = vec![E::zero(); outer * len * inner];
    for o in 0..outer {
        for j in 0..len {
            let d = &mut dx[(o * len + j) * inner..(o * len + j + 1) * inner];
            for r in 0..factor {
                let src = ((o * len + j) * factor + r) * inner;
                d.iter_mut().zip(&dy[src..src + inner]).for_each(|(a, &b)| *a = *a + b);
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_bruteforce() {
        for n_in in 1..7 {
            for stride in 1..4 {
                for k in [1usize, 3, 5] {
                    for pad in 0..3 {
                        if n_in + 2 * pad < k {
                            continue;
                        }
                        let n_out = (n_in + 2 * pad - k) / stride + 1;
                        for d in 0..k {
                            let (lo, hi) = valid_range(n_out, n_in, stride, d, pad);
                            for o in 0..n_out {
                                let i = (o * stride + d) as isize - pad as isize;
                                let valid = i >= 0 && (i as usize) < n_in;
                                assert_eq!(valid, o >= lo && o < hi, "n_in={n_in} s={stride} k={k} p={pad} d={d} o={o}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn permute_matches_index_formula() {
        let shape = [2, 3, 4];
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let (out, out_shape) = permute(&data, &shape, &[2, 0, 1]);
        assert_eq!(out_shape, vec![4, 2, 3]);
        for a in 0..4 {
            for b in 0..2 {
                for c in 0..3 {
                    assert_eq!(out[(a * 2 + b) * 3 + c], data[(b * 3 + c) * 4 + a]);
                }
            }
        }
    }

    #[test]
    fn strided_time_axis_halves_even_extent() {
        let g = ConvGeom::new(1, 2, 2, [32, 4, 4], [3, 3, 3], [2, 1, 1], [1, 1, 1]).unwrap();
        assert_eq!(g.output, [16, 4, 4]);
        let g = ConvGeom::new(1, 2, 2, [8, 4, 4], [1, 1, 1], [2, 1, 1], [0, 0, 0]).unwrap();
        assert_eq!(g.output, [4, 4, 4]);
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(ConvGeom::new(1, 1, 1, [1, 4, 4], [1, 2, 2], [1, 1, 1], [0, 0, 0]).is_err());
    }
}
