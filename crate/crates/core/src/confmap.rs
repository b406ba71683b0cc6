//! Gaussian confidence-map encoding and peak / location-NMS decoding.
//!
//! Object location similarity between a detection and a ground truth is
//! `exp(-d^2 / (2 s^2 kappa_c^2))` with `d` the metric distance between the
//! two bins, `s` the mean range of the pair (at least 1 m) and `kappa_c` a
//! per-class tolerance taken from the ground truth's class. Both grid axes
//! use the range resolution as their bin size.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{data_err, CoreError, Result};

/// Metres per range bin.
pub const BIN_M: f64 = 0.23;
pub const CLASS_NAMES: [&str; 3] = ["pedestrian", "cyclist", "car"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Annotation {
    pub frame_id: u32,
    pub class_id: usize,
    pub range_bin: usize,
    pub azimuth_bin: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub frame_id: u32,
    pub class_id: usize,
    pub range_bin: usize,
    pub azimuth_bin: usize,
    pub confidence: f64,
}

impl Detection {
    pub fn location(&self) -> Annotation {
        Annotation {
            frame_id: self.frame_id,
            class_id: self.class_id,
            range_bin: self.range_bin,
            azimuth_bin: self.azimuth_bin,
        }
    }
}

/// Per-class tolerances and the encoding spread rule.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecParams {
    /// OLS tolerance per class, metres.
    pub kappa: Vec<f64>,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for CodecParams {
    fn default() -> Self {
        Self { kappa: vec![0.5, 1.0, 2.0], sigma_min: 2.0, sigma_max: 10.0 }
    }
}

impl CodecParams {
    pub fn kappa(&self, class_id: usize) -> f64 {
        self.kappa[class_id.min(self.kappa.len() - 1)]
    }

    /// Encoding spread in bins: the class tolerance converted to bins, clamped.
    pub fn sigma(&self, class_id: usize) -> f64 {
        (self.kappa(class_id) / BIN_M).clamp(self.sigma_min, self.sigma_max)
    }

    /// OLS tolerance `s * kappa` for a pair, in bins.
    pub fn tolerance_bins(&self, class_id: usize, range_a: usize, range_b: usize) -> f64 {
        scale_m(range_a, range_b) * self.kappa(class_id) / BIN_M
    }
}

fn scale_m(range_a: usize, range_b: usize) -> f64 {
    (0.5 * (range_a + range_b) as f64 * BIN_M).max(1.0)
}

/// Object location similarity in [0, 1]; `kappa` comes from `gt`'s class.
pub fn ols(det: &Detection, gt: &Annotation, params: &CodecParams) -> f64 {
    ols_bins(det.range_bin, det.azimuth_bin, gt.range_bin, gt.azimuth_bin, params.kappa(gt.class_id))
}

pub fn ols_bins(r1: usize, a1: usize, r2: usize, a2: usize, kappa: f64) -> f64 {
    let dr = r1 as f64 - r2 as f64;
    let da = a1 as f64 - a2 as f64;
    let d2 = (dr * dr + da * da) * BIN_M * BIN_M;
    let s = scale_m(r1, r2);
    (-d2 / (2.0 * s * s * kappa * kappa)).exp()
}

/// Per-class `[K, H, W]` confidence values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ConfMap {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl ConfMap {
    pub fn zeros(classes: usize, height: usize, width: usize) -> Self {
        Self { classes, height, width, values: vec![0.0; classes * height * width] }
    }

    pub fn from_values(classes: usize, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != classes * height * width {
            return Err(data_err!("confmap needs {} values, got {}", classes * height * width, values.len()));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(data_err!("confmap values must lie in [0, 1]"));
        }
        Ok(Self { classes, height, width, values })
    }

    pub fn at(&self, k: usize, r: usize, a: usize) -> f32 {
        self.values[(k * self.height + r) * self.width + a]
    }

    pub fn plane(&self, k: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.values[k * n..(k + 1) * n]
    }
}

/// Renders annotations of one frame as Gaussians merged by per-pixel max.
pub fn encode_confmap(
    annotations: &[Annotation],
    classes: usize,
    height: usize,
    width: usize,
    params: &CodecParams,
) -> Result<ConfMap> {
    let mut cm = ConfMap::zeros(classes, height, width);
    for a in annotations {
        if a.class_id >= classes || a.range_bin >= height || a.azimuth_bin >= width {
            return Err(data_err!(
                "annotation {a:?} outside {classes} classes x {height} x {width} grid"
            ));
        }
        let sigma = params.sigma(a.class_id);
        let inv = 1.0 / (2.0 * sigma * sigma);
        let (r0, a0) = (a.range_bin, a.azimuth_bin);
        let plane = a.class_id * height * width;
        for r in 0..height {
            let dr = r as f64 - r0 as f64;
            for c in 0..width {
                let dc = c as f64 - a0 as f64;
                let v = (-(dr * dr + dc * dc) * inv).exp() as f32;
                let slot = &mut cm.values[plane + r * width + c];
                *slot = slot.max(v);
            }
        }
    }
    Ok(cm)
}

fn candidate_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.range_bin.cmp(&b.range_bin))
        .then(a.azimuth_bin.cmp(&b.azimuth_bin))
}

/// Sorts by descending confidence, ties by (class, range, azimuth).
pub fn sort_candidates(c: &mut [Detection]) {
    c.sort_by(candidate_order);
}

/// 3x3 local maxima above `floor`. Equal-valued neighbours are ordered by
/// raster position so a flat-topped peak yields exactly one candidate.
pub fn peak_detect(cm: &ConfMap, floor: f64, frame_id: u32) -> Vec<Detection> {
    let (h, w) = (cm.height, cm.width);
    let mut out = Vec::new();
    for k in 0..cm.classes {
        let plane = cm.plane(k);
        for r in 0..h {
            for a in 0..w {
                let v = plane[r * w + a];
                if (v as f64) <= floor {
                    continue;
                }
                let mut is_peak = true;
                'nb: for nr in r.saturating_sub(1)..(r + 2).min(h) {
                    for na in a.saturating_sub(1)..(a + 2).min(w) {
                        if (nr, na) == (r, a) {
                            continue;
                        }
                        let n = plane[nr * w + na];
                        if n > v || (n == v && (nr, na) < (r, a)) {
                            is_peak = false;
                            break 'nb;
                        }
                    }
                }
                if is_peak {
                    out.push(Detection { frame_id, class_id: k, range_bin: r, azimuth_bin: a, confidence: v as f64 });
                }
            }
        }
    }
    sort_candidates(&mut out);
    out
}

/// Greedy location NMS. `candidates` must already be in [`sort_candidates`]
/// order; a candidate is dropped when its OLS with an accepted candidate of
/// the same class exceeds `threshold`.
pub fn l_nms(candidates: &[Detection], threshold: f64, params: &CodecParams) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for c in candidates {
        let suppressed = kept.iter().any(|k| {
            k.class_id == c.class_id
                && ols_bins(c.range_bin, c.azimuth_bin, k.range_bin, k.azimuth_bin, params.kappa(c.class_id))
                    > threshold
        });
        if !suppressed {
            kept.push(*c);
        }
    }
    kept
}

/// Peak detection followed by location NMS.
pub fn decode(cm: &ConfMap, floor: f64, threshold: f64, params: &CodecParams, frame_id: u32) -> Vec<Detection> {
    l_nms(&peak_detect(cm, floor, frame_id), threshold, params)
}

// ------------------------------------------------------------------ text formats

/// `frame_id class_id range_bin azimuth_bin` per line.
pub fn format_annotations(anns: &[Annotation]) -> String {
    let mut s = String::new();
    for a in anns {
        let _ = writeln!(s, "{} {} {} {}", a.frame_id, a.class_id, a.range_bin, a.azimuth_bin);
    }
    s
}

/// Annotation fields plus confidence with six decimals.
pub fn format_detections(dets: &[Detection]) -> String {
    let mut s = String::new();
    for d in dets {
        let _ =
            writeln!(s, "{} {} {} {} {:.6}", d.frame_id, d.class_id, d.range_bin, d.azimuth_bin, d.confidence);
    }
    s
}

fn parse_lines<T>(
    text: &str,
    file: &Path,
    fields: usize,
    mut make: impl FnMut(&[&str]) -> Option<T>,
) -> Result<Vec<T>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for (lineno, line) in text.split_inclusive('\n').enumerate() {
        let body = line.trim();
        if !body.is_empty() && !body.starts_with('#') {
            let parts: Vec<&str> = body.split_whitespace().collect();
            let record = if parts.len() == fields { make(&parts) } else { None };
            match record {
                Some(r) => out.push(r),
                None => {
                    return Err(CoreError::format(
                        file,
                        offset,
                        format!("line {}: expected {fields} fields, got {body:?}", lineno + 1),
                    ))
                }
            }
        }
        offset += line.len() as u64;
    }
    Ok(out)
}

fn parse_ann(p: &[&str]) -> Option<Annotation> {
    Some(Annotation {
        frame_id: p[0].parse().ok()?,
        class_id: p[1].parse().ok()?,
        range_bin: p[2].parse().ok()?,
        azimuth_bin: p[3].parse().ok()?,
    })
}

pub fn parse_annotations(text: &str, file: &Path) -> Result<Vec<Annotation>> {
    parse_lines(text, file, 4, parse_ann)
}

pub fn parse_detections(text: &str, file: &Path) -> Result<Vec<Detection>> {
    parse_lines(text, file, 5, |p| {
        let a = parse_ann(p)?;
        let confidence: f64 = p[4].parse().ok()?;
        if !(0.0..=1.0).contains(&confidence) {
            return None;
        }
        Some(Detection {
            frame_id: a.frame_id,
            class_id: a.class_id,
            range_bin: a.range_bin,
            azimuth_bin: a.azimuth_bin,
            confidence,
        })
    })
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    parse_annotations(&text, path)
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    parse_detections(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(class_id: usize, r: usize, a: usize) -> Annotation {
        Annotation { frame_id: 0, class_id, range_bin: r, azimuth_bin: a }
    }

    fn det(class_id: usize, r: usize, a: usize, confidence: f64) -> Detection {
        Detection { frame_id: 0, class_id, range_bin: r, azimuth_bin: a, confidence }
    }

    #[test]
    fn single_gaussian_peaks_at_one() {
        let p = CodecParams::default();
        let cm = encode_confmap(&[ann(0, 64, 64)], 3, 128, 128, &p).unwrap();
        assert_eq!(cm.at(0, 64, 64), 1.0);
        let twice = encode_confmap(&[ann(0, 64, 64), ann(0, 64, 64)], 3, 128, 128, &p).unwrap();
        assert_eq!(twice, cm);
        assert!(encode_confmap(&[ann(0, 128, 0)], 3, 128, 128, &p).is_err());
        assert!(encode_confmap(&[ann(3, 1, 1)], 3, 128, 128, &p).is_err());
    }

    #[test]
    fn value_one_sigma_away() {
        // cars: sigma = 2.0 / 0.23 = 8.70 bins, so test along a lattice axis
        // with an integral sigma instead.
        let p = CodecParams { kappa: vec![0.46], sigma_min: 1.0, sigma_max: 10.0 };
        let cm = encode_confmap(&[ann(0, 20, 20)], 1, 40, 40, &p).unwrap();
        assert!((cm.at(0, 22, 20) as f64 - (-0.5f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn ols_examples() {
        let p = CodecParams::default();
        assert_eq!(ols(&det(0, 30, 10, 1.0), &ann(0, 30, 10), &p), 1.0);
        assert_eq!(ols_bins(10, 3, 40, 17, 1.0), ols_bins(40, 17, 10, 3, 1.0));
    }

    #[test]
    fn peak_detection_cases() {
        let p = CodecParams::default();
        let empty = ConfMap::zeros(3, 16, 16);
        assert!(peak_detect(&empty, 0.3, 0).is_empty());
        let cm = encode_confmap(&[ann(1, 30, 10), ann(1, 30, 30)], 3, 64, 64, &p).unwrap();
        let peaks = peak_detect(&cm, 0.3, 0);
        let locs: Vec<_> = peaks.iter().map(|d| (d.class_id, d.range_bin, d.azimuth_bin)).collect();
        assert_eq!(locs, vec![(1, 30, 10), (1, 30, 30)]);
    }

    #[test]
    fn flat_top_gives_one_candidate() {
        let mut cm = ConfMap::zeros(1, 5, 5);
        for (r, a) in [(2, 2), (2, 3), (3, 2)] {
            cm.values[r * 5 + a] = 1.0;
        }
        let peaks = peak_detect(&cm, 0.3, 0);
        assert_eq!(peaks.len(), 1);
        assert_eq!((peaks[0].range_bin, peaks[0].azimuth_bin), (2, 2));
    }

    #[test]
    fn nms_keeps_best_of_colocated() {
        let p = CodecParams::default();
        let kept = l_nms(&[det(0, 10, 10, 0.9), det(0, 10, 10, 0.8)], 0.3, &p);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].confidence, 0.9);
        let kept = l_nms(&[det(0, 10, 10, 0.9), det(0, 60, 60, 0.8)], 0.3, &p);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn text_round_trip_and_errors() {
        let anns = vec![ann(0, 1, 2), ann(2, 5, 6)];
        let path = Path::new("x.ann");
        assert_eq!(parse_annotations(&format_annotations(&anns), path).unwrap(), anns);
        let dets = vec![det(1, 3, 4, 0.123456)];
        assert_eq!(parse_detections(&format_detections(&dets), path).unwrap(), dets);
        let err = parse_annotations("0 1 2 3\n0 1 x 3\n", path).unwrap_err();
        match err {
            CoreError::Format { offset, ref msg, .. } => {
                assert_eq!(offset, 8);
                assert!(msg.contains("line 2"));
            }
            e => panic!("unexpected {e}"),
        }
    }
}
