//! Sliding-window detection, evaluation against annotations and heatmap export.

use std::path::Path;

use radarformer_core::confmap::{decode, CodecParams, ConfMap, Detection};
use radarformer_core::dataset::Sequence;
use radarformer_core::error::{CoreError, Result};
use radarformer_core::eval::{evaluate, EvalResult, SequenceEval};
use radarformer_core::Model;
use radarformer_tensor::Scalar;

use crate::windows::predict_sequence;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeSettings {
    pub test_stride: usize,
    pub peak_floor: f64,
    pub nms_threshold: f64,
}

/// Orders detections by frame, then descending confidence.
pub fn sort_by_frame(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        a.frame_id
            .cmp(&b.frame_id)
            .then(b.confidence.total_cmp(&a.confidence))
            .then(a.class_id.cmp(&b.class_id))
            .then(a.range_bin.cmp(&b.range_bin))
            .then(a.azimuth_bin.cmp(&b.azimuth_bin))
    });
}

pub fn decode_frames(maps: &[ConfMap], settings: &DecodeSettings, codec: &CodecParams) -> Vec<Detection> {
    let mut dets: Vec<Detection> = maps
        .iter()
        .enumerate()
        .flat_map(|(f, cm)| decode(cm, settings.peak_floor, settings.nms_threshold, codec, f as u32))
        .collect();
    sort_by_frame(&mut dets);
    dets
}

pub struct SequenceOutput {
    pub maps: Vec<ConfMap>,
    pub detections: Vec<Detection>,
}

pub fn detect_sequence<E: Scalar>(
    model: &Model<E>,
    seq: &Sequence,
    frame_shape: [usize; 3],
    settings: &DecodeSettings,
    codec: &CodecParams,
) -> Result<SequenceOutput> {
    let maps = predict_sequence(model, seq, frame_shape, settings.test_stride)?;
    let detections = decode_frames(&maps, settings, codec);
    Ok(SequenceOutput { maps, detections })
}

pub fn sequence_eval(seq: &Sequence, detections: Vec<Detection>) -> SequenceEval {
    SequenceEval {
        name: seq.meta.name.clone(),
        category: seq.meta.scenario.tag().to_string(),
        frames: seq.meta.frames,
        gts: seq.annotations.clone(),
        dets: detections,
    }
}

/// Runs detection on `seqs` and scores the result.
pub fn evaluate_model<'a, E: Scalar>(
    model: &Model<E>,
    seqs: impl IntoIterator<Item = &'a Sequence>,
    frame_shape: [usize; 3],
    settings: &DecodeSettings,
    codec: &CodecParams,
) -> Result<EvalResult> {
    let mut evals = Vec::new();
    for seq in seqs {
        let out = detect_sequence(model, seq, frame_shape, settings, codec)?;
        evals.push(sequence_eval(seq, out.detections));
    }
    evaluate(&evals, codec)
}

/// Binary PGM of one class plane; pixel = round(255 * value), rows are range bins.
pub fn pgm(cm: &ConfMap, class: usize) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", cm.width, cm.height).into_bytes();
    out.extend(cm.plane(class).iter().map(|&v| to_byte(v)));
    out
}

/// Binary PPM with class 0, 1, 2 in the red, green and blue channels.
pub fn ppm(cm: &ConfMap) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", cm.width, cm.height).into_bytes();
    for i in 0..cm.height * cm.width {
        for k in 0..3 {
            out.push(if k < cm.classes { to_byte(cm.plane(k)[i]) } else { 0 });
        }
    }
    out
}

pub fn to_byte(v: f32) -> u8 {
    (255.0 * v.clamp(0.0, 1.0) as f64).round() as u8
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

/// Writes `<dir>/<seq>/<frame>_c<k>.pgm` and `<frame>_rgb.ppm` for every frame.
pub fn write_heatmaps(dir: &Path, seq: &str, maps: &[ConfMap]) -> Result<()> {
    let d = dir.join(seq);
    std::fs::create_dir_all(&d).map_err(|e| CoreError::io(&d, e))?;
    for (f, cm) in maps.iter().enumerate() {
        for k in 0..cm.classes {
            write_file(&d.join(format!("{f:06}_c{k}.pgm")), &pgm(cm, k))?;
        }
        write_file(&d.join(format!("{f:06}_rgb.ppm")), &ppm(cm))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_pixels_are_rounded_values() {
        let cm = ConfMap::from_values(3, 1, 2, vec![0.5, 1.0, 0.0, 0.2, 0.999, 0.001]).unwrap();
        let p = pgm(&cm, 0);
        assert!(p.starts_with(b"P5\n2 1\n255\n"));
        assert_eq!(&p[p.len() - 2..], &[128, 255]);
        let c = ppm(&cm);
        assert_eq!(&c[c.len() - 6..], &[128, 0, 255, 255, 51, 0]);
    }
}
