//! Subcommand bodies. Each returns the text printed on success.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use radarformer_core::checkpoint::load_checkpoint;
use radarformer_core::confmap::{format_detections, read_detections, CodecParams};
use radarformer_core::dataset::{read_dataset, synthesize, write_dataset, Dataset};
use radarformer_core::error::{CoreError, Result};
use radarformer_core::eval::evaluate;
use radarformer_core::profiler::{compare_report, TimingOptions};
use radarformer_core::{build_model, Model};
use radarformer_tensor::Scalar;

use crate::config_err;
use crate::infer::{detect_sequence, sequence_eval, write_heatmaps, DecodeSettings};
use crate::run_config::RunConfig;
use crate::train::{log_header, train, CHECKPOINT_FILE};

pub const DETECTIONS_DIR: &str = "detections";
pub const HEATMAPS_DIR: &str = "heatmaps";

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CoreError::io(path, e))
}

pub fn detections_path(dir: &Path, seq: &str) -> PathBuf {
    dir.join(format!("{seq}.txt"))
}

fn settings(cfg: &RunConfig) -> DecodeSettings {
    DecodeSettings { test_stride: cfg.test_stride, peak_floor: cfg.peak_floor, nms_threshold: cfg.nms_threshold }
}

pub fn synth(cfg: &RunConfig) -> Result<String> {
    let sc = cfg.synth_config();
    sc.validate()?;
    let seqs = synthesize(&sc, cfg.seed, cfg.sequences)?;
    let m = write_dataset(&cfg.data_dir, &seqs, [sc.chirps, sc.height, sc.width])?;
    Ok(format!(
        "wrote {} sequences ({} frames) to {}\n",
        m.sequences.len(),
        m.total_frames,
        cfg.data_dir.display()
    ))
}

pub fn train_cmd(cfg: &RunConfig, progress: &mut dyn FnMut(&str)) -> Result<String> {
    let dataset = read_dataset(&cfg.data_dir)?;
    cfg.write_effective(&cfg.out_dir)?;
    progress(log_header());
    let out = train(cfg, &dataset, &mut |e| progress(&e.line()))?;
    Ok(format!(
        "best epoch {} val_ap={:.4} val_ar={:.4} checkpoint={}\n",
        out.best_epoch,
        out.best_ap,
        out.best_ar,
        out.checkpoint.display()
    ))
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE))
}

/// Loads the checkpoint and checks it against the run's model and dataset.
fn load_for(cfg: &RunConfig, dataset: &Dataset) -> Result<Model<f32>> {
    let model = load_checkpoint(&checkpoint_path(cfg))?;
    let want = cfg.model_config()?;
    if model.config != want {
        return Err(config_err!(
            "checkpoint holds model {} which differs from the configured model {}",
            model.config.name,
            want.name
        ));
    }
    let c = &model.config;
    if dataset.frame_shape() != [c.chirps, c.height, c.width] {
        return Err(config_err!(
            "checkpoint model expects frames of {}x{}x{}, dataset has {:?}",
            c.chirps,
            c.height,
            c.width,
            dataset.frame_shape()
        ));
    }
    Ok(model)
}

pub fn infer(cfg: &RunConfig) -> Result<String> {
    let dataset = read_dataset(&cfg.data_dir)?;
    let model = load_for(cfg, &dataset)?;
    cfg.write_effective(&cfg.out_dir)?;
    if cfg.deterministic {
        infer_typed(cfg, &dataset, &model.cast::<f64>())
    } else {
        infer_typed(cfg, &dataset, &model)
    }
}

fn infer_typed<E: Scalar>(cfg: &RunConfig, dataset: &Dataset, model: &Model<E>) -> Result<String> {
    let codec = CodecParams::default();
    let dir = cfg.out_dir.join(DETECTIONS_DIR);
    std::fs::create_dir_all(&dir).map_err(|e| CoreError::io(&dir, e))?;
    let mut n = 0;
    for seq in &dataset.sequences {
        let out = detect_sequence(model, seq, dataset.frame_shape(), &settings(cfg), &codec)?;
        write_text(&detections_path(&dir, &seq.meta.name), &format_detections(&out.detections))?;
        if cfg.heatmaps {
            write_heatmaps(&cfg.out_dir.join(HEATMAPS_DIR), &seq.meta.name, &out.maps)?;
        }
        n += out.detections.len();
    }
    Ok(format!("wrote {n} detections for {} sequences to {}\n", dataset.sequences.len(), dir.display()))
}

pub fn eval(cfg: &RunConfig) -> Result<String> {
    let dataset = read_dataset(&cfg.data_dir)?;
    let dir = cfg.detections.clone().unwrap_or_else(|| cfg.out_dir.join(DETECTIONS_DIR));
    let mut evals = Vec::new();
    for seq in &dataset.sequences {
        let dets = read_detections(&detections_path(&dir, &seq.meta.name))?;
        evals.push(sequence_eval(seq, dets));
    }
    let res = evaluate(&evals, &CodecParams::default())?;
    let text = format!("{}\n{}", res.to_table(), res.to_kv());
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| CoreError::io(&cfg.out_dir, e))?;
    write_text(&cfg.out_dir.join("eval.txt"), &text)?;
    Ok(format!("AP {:.4}\nAR {:.4}\n{text}", res.ap_total, res.ar_total))
}

pub fn profile(cfg: &RunConfig) -> Result<String> {
    if cfg.profile_models.is_empty() {
        return Err(config_err!("profile_models is empty"));
    }
    let mut models = Vec::new();
    for name in &cfg.profile_models {
        let mut c = crate::run_config::reference_model(name)?;
        if let Some(w) = cfg.window {
            c.frames = w;
        }
        models.push(build_model::<f32>(&c, cfg.seed)?);
    }
    let refs: Vec<&Model<f32>> = models.iter().collect();
    let timing = cfg.timing.then_some(TimingOptions { warmup: cfg.warmup, runs: cfg.runs, backward: false });
    let report = compare_report(&refs, 1, cfg.test_stride, timing)?;
    let mut text = report.to_text();
    let _ = write!(text, "\n{}", report.to_kv());
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| CoreError::io(&cfg.out_dir, e))?;
    write_text(&cfg.out_dir.join("profile.txt"), &text)?;
    Ok(text)
}
