//! Temporal windows over sequences: training batches and sliding-window
//! inference with mean fusion.

use radarformer_core::confmap::{encode_confmap, Annotation, CodecParams, ConfMap};
use radarformer_core::dataset::Sequence;
use radarformer_core::error::Result;
use radarformer_core::Model;
use radarformer_tensor::{Graph, Scalar, Tensor};

use crate::data_err;

/// Window start frames with the given stride. When the strided starts leave
/// a tail uncovered, a final window aligned to the end is appended.
pub fn window_starts(frames: usize, window: usize, stride: usize) -> Vec<usize> {
    if frames < window || window == 0 || stride == 0 {
        return Vec::new();
    }
    let mut starts: Vec<usize> = (0..=frames - window).step_by(stride).collect();
    if starts.last().is_some_and(|&s| s + window < frames) {
        starts.push(frames - window);
    }
    starts
}

/// A sequence prepared for training: the radar cube and per-frame encoded
/// confidence maps.
pub struct Prepared<'a> {
    pub seq: &'a Sequence,
    pub frames: usize,
    pub frame_shape: [usize; 3],
    /// `[frames][K * H * W]`.
    pub targets: Vec<ConfMap>,
}

pub fn frame_annotations(anns: &[Annotation], frames: usize) -> Vec<Vec<Annotation>> {
    let mut out = vec![Vec::new(); frames];
    for a in anns {
        if let Some(f) = out.get_mut(a.frame_id as usize) {
            f.push(*a);
        }
    }
    out
}

pub fn prepare<'a>(
    seq: &'a Sequence,
    frame_shape: [usize; 3],
    classes: usize,
    params: &CodecParams,
) -> Result<Prepared<'a>> {
    let frames = seq.meta.frames as usize;
    let [_, h, w] = frame_shape;
    let targets = frame_annotations(&seq.annotations, frames)
        .iter()
        .map(|a| encode_confmap(a, classes, h, w, params))
        .collect::<Result<_>>()?;
    Ok(Prepared { seq, frames, frame_shape, targets })
}

/// Copies frames `start..start + t` of a `[2, N, C, H, W]` cube into a
/// `[2, t, C, H, W]` buffer.
fn slice_cube<E: Scalar>(cube: &[f32], frames: usize, frame_len: usize, start: usize, t: usize, out: &mut Vec<E>) {
    for ri in 0..2 {
        let base = (ri * frames + start) * frame_len;
        out.extend(cube[base..base + t * frame_len].iter().map(|&v| E::from_f64_lossy(v as f64)));
    }
}

/// Stacks windows into a model input `[B, 2, T, C, H, W]`.
pub fn input_batch<E: Scalar>(items: &[(&Prepared<'_>, usize)], t: usize) -> Result<Tensor<E>> {
    let [c, h, w] = items[0].0.frame_shape;
    let frame_len = c * h * w;
    let mut data = Vec::with_capacity(items.len() * 2 * t * frame_len);
    for (p, start) in items {
        slice_cube(&p.seq.cube, p.frames, frame_len, *start, t, &mut data);
    }
    Ok(Tensor::from_vec(&[items.len(), 2, t, c, h, w], data)?)
}

/// Stacks encoded targets into `[B, K, T, H, W]`.
pub fn target_batch<E: Scalar>(items: &[(&Prepared<'_>, usize)], t: usize, classes: usize) -> Result<Tensor<E>> {
    let [_, h, w] = items[0].0.frame_shape;
    let plane = h * w;
    let mut data = Vec::with_capacity(items.len() * classes * t * plane);
    for (p, start) in items {
        for k in 0..classes {
            for f in *start..*start + t {
                data.extend(p.targets[f].plane(k).iter().map(|&v| E::from_f64_lossy(v as f64)));
            }
        }
    }
    Ok(Tensor::from_vec(&[items.len(), classes, t, h, w], data)?)
}

/// Sliding-window prediction over a whole sequence. Each frame's map is the
/// mean of the predictions of every window covering it.
pub fn predict_sequence<E: Scalar>(model: &Model<E>, seq: &Sequence, frame_shape: [usize; 3], stride: usize) -> Result<Vec<ConfMap>> {
    let cfg = &model.config;
    let t = cfg.frames;
    let frames = seq.meta.frames as usize;
    let [c, h, w] = frame_shape;
    if [c, h, w] != [cfg.chirps, cfg.height, cfg.width] {
        return Err(crate::config_err!(
            "model {} expects frames of {}x{}x{}, dataset has {c}x{h}x{w}",
            cfg.name,
            cfg.chirps,
            cfg.height,
            cfg.width
        ));
    }
    if frames < t {
        return Err(data_err!("sequence {} has {frames} frames, window is {t}", seq.meta.name));
    }
    let k = cfg.classes;
    let plane = h * w;
    let mut sums = vec![0.0f64; frames * k * plane];
    let mut counts = vec![0u32; frames];
    let frame_len = c * plane;
    let mut g = Graph::<E>::no_grad();
    let bound = model.params.bind(&mut g, false);
    let mark = g.len();
    for start in window_starts(frames, t, stride) {
        let mut data = Vec::with_capacity(2 * t * frame_len);
        slice_cube(&seq.cube, frames, frame_len, start, t, &mut data);
        let x = Tensor::from_vec(&[1, 2, t, c, h, w], data)?;
        let xv = g.constant(x);
        let y = model.forward(&mut g, &bound, xv)?;
        let y = g.take_value(y);
        let yd = y.data();
        for kk in 0..k {
            for ft in 0..t {
                let src = &yd[(kk * t + ft) * plane..(kk * t + ft + 1) * plane];
                let dst = &mut sums[((start + ft) * k + kk) * plane..((start + ft) * k + kk + 1) * plane];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s.as_f64());
            }
        }
        for c in &mut counts[start..start + t] {
            *c += 1;
        }
        g.truncate(mark);
    }
    (0..frames)
        .map(|f| {
            let n = counts[f] as f64;
            let vals = sums[f * k * plane..(f + 1) * k * plane].iter().map(|s| (s / n) as f32).collect();
            ConfMap::from_values(k, h, w, vals)
        })
        .collect()
}
