//! AP / AR over the OLS threshold sweep 0.50, 0.55, ..., 0.90.
//!
//! Per threshold, detections are matched greedily frame by frame, pooled
//! across the dataset in confidence order, and summarised with 101-point
//! interpolated precision (AP) and final recall (AR). Totals are means over
//! the nine thresholds.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::confmap::{ols, sort_candidates, Annotation, CodecParams, Detection};
use crate::error::{config_err, data_err, Result};

/// Slack for OLS values that sit on a threshold up to rounding.
pub const THRESHOLD_SLACK: f64 = 1e-9;
pub const RECALL_POINTS: usize = 101;

pub fn thresholds() -> Vec<f64> {
    (0..9).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Greedy one-to-one matching within a frame. `dets` must be in descending
/// confidence order. Returns a TP flag per detection.
pub fn match_flags(dets: &[Detection], gts: &[Annotation], threshold: f64, params: &CodecParams) -> Vec<bool> {
    let mut gts: Vec<Annotation> = gts.to_vec();
    gts.sort();
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] || g.class_id != d.class_id {
                    continue;
                }
                let s = ols(d, g, params);
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((j, s));
                }
            }
            match best {
                Some((j, s)) if s >= threshold - THRESHOLD_SLACK => {
                    taken[j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

pub fn match_frame(dets: &[Detection], gts: &[Annotation], threshold: f64, params: &CodecParams) -> MatchCounts {
    let tp = match_flags(dets, gts, threshold, params).iter().filter(|&&f| f).count();
    MatchCounts { tp, fp: dets.len() - tp, fn_: gts.len() - tp }
}

/// Ground truth and detections for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceEval {
    pub name: String,
    /// Scenario tag used for the per-category columns.
    pub category: String,
    pub frames: u32,
    pub gts: Vec<Annotation>,
    pub dets: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdCurve {
    pub threshold: f64,
    pub ap: f64,
    pub ar: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApAr {
    pub ap: f64,
    pub ar: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub ap_total: f64,
    pub ar_total: f64,
    pub curves: Vec<ThresholdCurve>,
    pub categories: BTreeMap<String, ApAr>,
}

struct Scored {
    key: (String, u32, usize),
    det: Detection,
    tp: bool,
}

fn interpolated_ap(precision: &[f64], recall: &[f64]) -> f64 {
    // precision envelope from the right
    let mut env = precision.to_vec();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut sum = 0.0;
    let mut idx = 0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        while idx < recall.len() && recall[idx] < r - 1e-12 {
            idx += 1;
        }
        if idx < env.len() {
            sum += env[idx];
        }
    }
    sum / RECALL_POINTS as f64
}

fn curve(scored: &mut [Scored], n_gt: usize, threshold: f64) -> ThresholdCurve {
    scored.sort_by(|a, b| {
        b.det
            .confidence
            .total_cmp(&a.det.confidence)
            .then_with(|| a.key.cmp(&b.key))
            .then(a.det.class_id.cmp(&b.det.class_id))
            .then(a.det.range_bin.cmp(&b.det.range_bin))
            .then(a.det.azimuth_bin.cmp(&b.det.azimuth_bin))
    });
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut precision = Vec::with_capacity(scored.len());
    let mut recall = Vec::with_capacity(scored.len());
    for s in scored.iter() {
        if s.tp {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 });
    }
    let (ap, ar) = if n_gt == 0 {
        // nothing to find: perfect only if nothing was claimed
        let v = if scored.is_empty() { 1.0 } else { 0.0 };
        (v, v)
    } else {
        (interpolated_ap(&precision, &recall), tp as f64 / n_gt as f64)
    };
    ThresholdCurve { threshold, ap, ar, precision, recall }
}

fn by_frame<T>(items: &[T], frame: impl Fn(&T) -> u32) -> BTreeMap<u32, Vec<&T>> {
    let mut m: BTreeMap<u32, Vec<&T>> = BTreeMap::new();
    for it in items {
        m.entry(frame(it)).or_default().push(it);
    }
    m
}

fn evaluate_subset(seqs: &[&SequenceEval], params: &CodecParams, ts: &[f64]) -> Vec<ThresholdCurve> {
    let n_gt: usize = seqs.iter().map(|s| s.gts.len()).sum();
    ts.iter()
        .map(|&t| {
            let mut scored = Vec::new();
            for s in seqs {
                let gts = by_frame(&s.gts, |a| a.frame_id);
                for (frame, dets) in by_frame(&s.dets, |d| d.frame_id) {
                    let mut dets: Vec<Detection> = dets.into_iter().copied().collect();
                    sort_candidates(&mut dets);
                    let g: Vec<Annotation> = gts.get(&frame).map(|v| v.iter().map(|a| **a).collect()).unwrap_or_default();
                    let flags = match_flags(&dets, &g, t, params);
                    for (rank, (d, tp)) in dets.into_iter().zip(flags).enumerate() {
                        scored.push(Scored { key: (s.name.clone(), frame, rank), det: d, tp });
                    }
                }
            }
            curve(&mut scored, n_gt, t)
        })
        .collect()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Dataset-level AP/AR over the standard threshold sweep. Every annotation
/// and detection must reference a frame inside its sequence.
pub fn evaluate(seqs: &[SequenceEval], params: &CodecParams) -> Result<EvalResult> {
    evaluate_at(seqs, params, &thresholds())
}

/// [`evaluate`] over an arbitrary non-empty threshold list.
pub fn evaluate_at(seqs: &[SequenceEval], params: &CodecParams, ts: &[f64]) -> Result<EvalResult> {
    if ts.is_empty() {
        return Err(config_err!("no OLS thresholds"));
    }
    let mut names = BTreeSet::new();
    for s in seqs {
        if !names.insert(&s.name) {
            return Err(data_err!("duplicate sequence {}", s.name));
        }
        if let Some(a) = s.gts.iter().find(|a| a.frame_id >= s.frames) {
            return Err(data_err!("{}: annotation frame {} outside {} frames", s.name, a.frame_id, s.frames));
        }
        if let Some(d) = s.dets.iter().find(|d| d.frame_id >= s.frames) {
            return Err(data_err!("{}: detection frame {} has no ground-truth frame", s.name, d.frame_id));
        }
    }
    let all: Vec<&SequenceEval> = seqs.iter().collect();
    let curves = evaluate_subset(&all, params, ts);
    let mut categories = BTreeMap::new();
    let tags: BTreeSet<&str> = seqs.iter().map(|s| s.category.as_str()).collect();
    for tag in tags {
        let subset: Vec<&SequenceEval> = seqs.iter().filter(|s| s.category == tag).collect();
        let c = evaluate_subset(&subset, params, ts);
        categories.insert(
            tag.to_string(),
            ApAr { ap: mean(c.iter().map(|c| c.ap)), ar: mean(c.iter().map(|c| c.ar)) },
        );
    }
    Ok(EvalResult {
        ap_total: mean(curves.iter().map(|c| c.ap)),
        ar_total: mean(curves.iter().map(|c| c.ar)),
        curves,
        categories,
    })
}

pub const CATEGORY_ORDER: [&str; 4] = ["PL", "CR", "CS", "HW"];

impl EvalResult {
    /// Total / PL / CR / CS / HW by AP / AR, in percent.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let mut cols = vec![("Total", Some(ApAr { ap: self.ap_total, ar: self.ar_total }))];
        for c in CATEGORY_ORDER {
            cols.push((c, self.categories.get(c).copied()));
        }
        let _ = write!(s, "{:<6}", "");
        for (name, _) in &cols {
            let _ = write!(s, " {name:>8}");
        }
        s.push('\n');
        for (label, pick) in [("AP", 0), ("AR", 1)] {
            let _ = write!(s, "{label:<6}");
            for (_, v) in &cols {
                match v {
                    Some(v) => {
                        let x = if pick == 0 { v.ap } else { v.ar };
                        let _ = write!(s, " {:>8.2}", 100.0 * x);
                    }
                    None => {
                        let _ = write!(s, " {:>8}", "-");
                    }
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "ap_total={:.6}", self.ap_total);
        let _ = writeln!(s, "ar_total={:.6}", self.ar_total);
        for (k, v) in &self.categories {
            let _ = writeln!(s, "ap_{k}={:.6}", v.ap);
            let _ = writeln!(s, "ar_{k}={:.6}", v.ar);
        }
        for c in &self.curves {
            let _ = writeln!(s, "ap@{:.2}={:.6}", c.threshold, c.ap);
            let _ = writeln!(s, "ar@{:.2}={:.6}", c.threshold, c.ar);
        }
        s
    }
}
