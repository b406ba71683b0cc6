//! Window / grid token partitioning for multi-axis attention, plus the
//! space-to-depth style reshapes used for patch embedding and upsampling.
//!
//! Spatial extents that are not multiples of the partition size are
//! zero-padded at the bottom/right before partitioning; the matching reverse
//! crops the padding away again.

use crate::error::{config_err, shape_err, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;

/// Bookkeeping needed to invert a partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionInfo {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
    pub size: usize,
}

impl PartitionInfo {
    fn new(shape: &[usize], size: usize) -> Result<Self> {
        if size == 0 {
            return Err(config_err!("partition size must be positive"));
        }
        if shape.len() != 4 {
            return Err(shape_err!("partition expects [B, C, H, W], got {shape:?}"));
        }
        let pad_to = |n: usize| n.div_ceil(size) * size;
        Ok(Self {
            batch: shape[0],
            channels: shape[1],
            height: shape[2],
            width: shape[3],
            padded_height: pad_to(shape[2]),
            padded_width: pad_to(shape[3]),
            size,
        })
    }

    /// Number of token groups produced (windows or grid cells).
    pub fn groups(&self) -> usize {
        self.batch * (self.padded_height / self.size) * (self.padded_width / self.size)
    }

    pub fn tokens_per_group(&self) -> usize {
        self.size * self.size
    }
}

fn pad_spatial<E: Scalar>(g: &mut Graph<E>, x: Var, info: &PartitionInfo) -> Result<Var> {
    g.pad(
        x,
        &[(0, 0), (0, 0), (0, info.padded_height - info.height), (0, info.padded_width - info.width)],
    )
}

fn crop_spatial<E: Scalar>(g: &mut Graph<E>, x: Var, info: &PartitionInfo) -> Result<Var> {
    g.crop(x, &[(0, info.batch), (0, info.channels), (0, info.height), (0, info.width)])
}

/// `[B, C, H, W] -> [B * (H/P) * (W/P), P * P, C]`: non-overlapping P x P windows.
pub fn window_partition<E: Scalar>(g: &mut Graph<E>, x: Var, p: usize) -> Result<(Var, PartitionInfo)> {
    let info = PartitionInfo::new(g.shape(x), p)?;
    let (b, c) = (info.batch, info.channels);
    let (nh, nw) = (info.padded_height / p, info.padded_width / p);
    let x = pad_spatial(g, x, &info)?;
    let x = g.reshape(x, &[b, c, nh, p, nw, p])?;
    let x = g.permute(x, &[0, 2, 4, 3, 5, 1])?;
    let x = g.reshape(x, &[b * nh * nw, p * p, c])?;
    Ok((x, info))
}

/// Exact inverse of [`window_partition`].
pub fn window_reverse<E: Scalar>(g: &mut Graph<E>, tokens: Var, info: &PartitionInfo) -> Result<Var> {
    let p = info.size;
    let (b, c) = (info.batch, info.channels);
    let (nh, nw) = (info.padded_height / p, info.padded_width / p);
    if g.shape(tokens) != [info.groups(), p * p, c] {
        return Err(shape_err!("window tokens {:?} do not match partition {info:?}", g.shape(tokens)));
    }
    let x = g.reshape(tokens, &[b, nh, nw, p, p, c])?;
    let x = g.permute(x, &[0, 5, 1, 3, 2, 4])?;
    let x = g.reshape(x, &[b, c, info.padded_height, info.padded_width])?;
    crop_spatial(g, x, info)
}

/// `[B, C, H, W] -> [B * (H/G) * (W/G), G * G, C]`: each group holds the
/// G x G pixels spaced `(H/G, W/G)` apart (a dilated, image-wide mix).
pub fn grid_partition<E: Scalar>(g: &mut Graph<E>, x: Var, grid: usize) -> Result<(Var, PartitionInfo)> {
    let info = PartitionInfo::new(g.shape(x), grid)?;
    let (b, c) = (info.batch, info.channels);
    let (sh, sw) = (info.padded_height / grid, info.padded_width / grid);
    let x = pad_spatial(g, x, &info)?;
    let x = g.reshape(x, &[b, c, grid, sh, grid, sw])?;
    let x = g.permute(x, &[0, 3, 5, 2, 4, 1])?;
    let x = g.reshape(x, &[b * sh * sw, grid * grid, c])?;
    Ok((x, info))
}

/// Exact inverse of [`grid_partition`].
pub fn grid_reverse<E: Scalar>(g: &mut Graph<E>, tokens: Var, info: &PartitionInfo) -> Result<Var> {
    let grid = info.size;
    let (b, c) = (info.batch, info.channels);
    let (sh, sw) = (info.padded_height / grid, info.padded_width / grid);
    if g.shape(tokens) != [info.groups(), grid * grid, c] {
        return Err(shape_err!("grid tokens {:?} do not match partition {info:?}", g.shape(tokens)));
    }
    let x = g.reshape(tokens, &[b, sh, sw, grid, grid, c])?;
    let x = g.permute(x, &[0, 5, 3, 1, 4, 2])?;
    let x = g.reshape(x, &[b, c, info.padded_height, info.padded_width])?;
    crop_spatial(g, x, info)
}

/// `[B, C, H, W] -> [B, (H/P)*(W/P), C*P*P]`: non-overlapping patches, each
/// flattened channel-major.
pub fn patchify<E: Scalar>(g: &mut Graph<E>, x: Var, p: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || p == 0 || s[2] % p != 0 || s[3] % p != 0 {
        return Err(config_err!("patch size {p} does not divide spatial extents of {s:?}"));
    }
    let (b, c, nh, nw) = (s[0], s[1], s[2] / p, s[3] / p);
    let x = g.reshape(x, &[b, c, nh, p, nw, p])?;
    let x = g.permute(x, &[0, 2, 4, 1, 3, 5])?;
    g.reshape(x, &[b, nh * nw, c * p * p])
}

/// `[B, h*w, C*P*P] -> [B, C, h*P, w*P]`: inverse of [`patchify`].
pub fn unpatchify<E: Scalar>(g: &mut Graph<E>, x: Var, h: usize, w: usize, p: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[1] != h * w || p == 0 || s[2] % (p * p) != 0 {
        return Err(shape_err!("cannot unpatchify {s:?} to a {h}x{w} grid of {p}x{p} patches"));
    }
    let (b, c) = (s[0], s[2] / (p * p));
    let x = g.reshape(x, &[b, h, w, c, p, p])?;
    let x = g.permute(x, &[0, 3, 1, 4, 2, 5])?;
    g.reshape(x, &[b, c, h * p, w * p])
}

/// `[B, C*f*f, H, W] -> [B, C, H*f, W*f]` (sub-pixel upsampling).
pub fn depth_to_space<E: Scalar>(g: &mut Graph<E>, x: Var, f: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || f == 0 || s[1] % (f * f) != 0 {
        return Err(shape_err!("depth_to_space factor {f} invalid for {s:?}"));
    }
    if f == 1 {
        return Ok(x);
    }
    let (b, c, h, w) = (s[0], s[1] / (f * f), s[2], s[3]);
    let x = g.reshape(x, &[b, c, f, f, h, w])?;
    let x = g.permute(x, &[0, 1, 4, 2, 5, 3])?;
    g.reshape(x, &[b, c, h * f, w * f])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn iota(shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn window_shape_and_degenerate_window() {
        let mut g = Graph::<f64>::no_grad();
        let x = g.constant(iota(&[1, 4, 8, 8]));
        let (t, _) = window_partition(&mut g, x, 4).unwrap();
        assert_eq!(g.shape(t), &[4, 16, 4]);

        let y = g.constant(iota(&[1, 1, 4, 4]));
        let (t, _) = window_partition(&mut g, y, 4).unwrap();
        assert_eq!(g.shape(t), &[1, 16, 1]);
        assert_eq!(g.value(t).data(), iota(&[16]).data());
    }

    #[test]
    fn grid_groups_are_dilated() {
        let mut g = Graph::<f64>::no_grad();
        let x = g.constant(iota(&[1, 1, 4, 4]));
        let (t, _) = grid_partition(&mut g, x, 2).unwrap();
        assert_eq!(g.shape(t), &[4, 4, 1]);
        // pixel (r, c) holds value 4r + c
        assert_eq!(&g.value(t).data()[..4], &[0.0, 2.0, 8.0, 10.0]);
        assert_eq!(&g.value(t).data()[4..8], &[1.0, 3.0, 9.0, 11.0]);
    }

    #[test]
    fn grid_of_one_is_flatten() {
        let mut g = Graph::<f64>::no_grad();
        let x = g.constant(iota(&[1, 3, 4, 5]));
        let (t, _) = grid_partition(&mut g, x, 1).unwrap();
        assert_eq!(g.shape(t), &[20, 1, 3]);
        for pix in 0..20 {
            for c in 0..3 {
                assert_eq!(g.value(t).data()[pix * 3 + c], (c * 20 + pix) as f64);
            }
        }
    }

    #[test]
    fn zero_partition_size_is_config_error() {
        let mut g = Graph::<f64>::no_grad();
        let x = g.constant(iota(&[1, 1, 4, 4]));
        assert!(matches!(window_partition(&mut g, x, 0), Err(crate::TensorError::Config(_))));
        assert!(matches!(grid_partition(&mut g, x, 0), Err(crate::TensorError::Config(_))));
    }

    #[test]
    fn non_divisible_extent_round_trips() {
        let mut g = Graph::<f64>::no_grad();
        let x = g.constant(iota(&[2, 3, 10, 9]));
        let (t, info) = window_partition(&mut g, x, 4).unwrap();
        assert_eq!((info.padded_height, info.padded_width), (12, 12));
        let back = window_reverse(&mut g, t, &info).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }

    #[test]
    fn depth_to_space_places_subpixels() {
        let mut g = Graph::<f64>::no_grad();
        let x = g.constant(iota(&[1, 4, 1, 1]));
        let y = depth_to_space(&mut g, x, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[0.0, 1.0, 2.0, 3.0]);
    }
}
