//! Training loop: strided windows, BCE on encoded confidence maps, Adam and
//! best-AP checkpointing.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use radarformer_core::checkpoint::save_checkpoint;
use radarformer_core::confmap::CodecParams;
use radarformer_core::dataset::{Dataset, Split};
use radarformer_core::error::{CoreError, Result};
use radarformer_core::{build_model, Model};
use radarformer_tensor::{Graph, Scalar};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::infer::{evaluate_model, DecodeSettings};
use crate::optim::{learning_rate, Adam};
use crate::run_config::RunConfig;
use crate::windows::{input_batch, prepare, target_batch, window_starts, Prepared};
use crate::{config_err, data_err};

pub const CHECKPOINT_FILE: &str = "best.rfck";
pub const LOG_FILE: &str = "train_log.tsv";

/// Salt separating the shuffle stream from parameter initialization.
const SHUFFLE_SALT: u64 = 0x5eed_0f_a11_5eed;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub val_ap: f64,
    pub val_ar: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_ap: f64,
    pub best_ar: f64,
    pub checkpoint: PathBuf,
    pub best_model: Model<f32>,
}

pub fn log_header() -> &'static str {
    "epoch\tloss\tlr\tval_ap\tval_ar\tseconds"
}

impl EpochLog {
    pub fn line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.3e}\t{:.4}\t{:.4}\t{:.1}",
            self.epoch, self.loss, self.lr, self.val_ap, self.val_ar, self.seconds
        )
    }
}

/// Trains in 64-bit when `cfg.deterministic` is set, 32-bit otherwise.
/// `progress` sees each epoch as it completes.
pub fn train(cfg: &RunConfig, dataset: &Dataset, progress: &mut dyn FnMut(&EpochLog)) -> Result<TrainOutcome> {
    if cfg.deterministic {
        train_typed::<f64>(cfg, dataset, progress)
    } else {
        train_typed::<f32>(cfg, dataset, progress)
    }
}

fn train_typed<E: Scalar>(
    cfg: &RunConfig,
    dataset: &Dataset,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let mcfg = cfg.model_config()?;
    let frame_shape = dataset.frame_shape();
    if frame_shape != [mcfg.chirps, mcfg.height, mcfg.width] {
        return Err(config_err!(
            "model {} expects frames of {}x{}x{}, dataset has {:?}",
            mcfg.name,
            mcfg.chirps,
            mcfg.height,
            mcfg.width,
            frame_shape
        ));
    }
    let codec = CodecParams::default();
    let t = mcfg.frames;
    let classes = mcfg.classes;
    let train: Vec<Prepared> =
        dataset.split(Split::Train).map(|s| prepare(s, frame_shape, classes, &codec)).collect::<Result<_>>()?;
    let val: Vec<_> = dataset.split(Split::Val).collect();
    if val.is_empty() {
        return Err(data_err!("dataset has no validation sequences"));
    }
    let mut items: Vec<(usize, usize)> = Vec::new();
    for (i, p) in train.iter().enumerate() {
        items.extend(window_starts(p.frames, t, cfg.train_stride).into_iter().map(|s| (i, s)));
    }
    if items.is_empty() {
        return Err(data_err!("no training windows of {t} frames"));
    }
    let settings =
        DecodeSettings { test_stride: cfg.test_stride, peak_floor: cfg.peak_floor, nms_threshold: cfg.nms_threshold };

    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| CoreError::io(&cfg.out_dir, e))?;
    let ckpt_path = cfg.out_dir.join(CHECKPOINT_FILE);
    let log_path = cfg.out_dir.join(LOG_FILE);
    let mut log_text = format!("{}\n", log_header());

    let mut model = build_model::<E>(&mcfg, cfg.seed)?;
    let mut opt = Adam::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
    let steps_per_epoch = items.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut step = 0;
    let mut logs = Vec::new();
    let mut best: Option<(usize, f64, f64, Model<f32>)> = None;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        items.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = cfg.lr_start;
        for chunk in items.chunks(cfg.batch_size) {
            let batch: Vec<(&Prepared, usize)> = chunk.iter().map(|&(i, s)| (&train[i], s)).collect();
            let x = input_batch::<E>(&batch, t)?;
            let y = target_batch::<E>(&batch, t, classes)?;
            let mut g = Graph::<E>::new();
            let bound = model.params.bind(&mut g, true);
            let xv = g.constant(x);
            let logits = model.forward_logits(&mut g, &bound, xv)?;
            let loss = g.bce_with_logits(logits, &y)?;
            g.backward(loss)?;
            loss_sum += g.value(loss).data()[0].as_f64() * chunk.len() as f64;
            let grads: Vec<_> = bound.vars().iter().map(|&v| g.grad(v)).collect();
            lr = learning_rate(cfg.schedule, cfg.lr_start, cfg.lr_end, cfg.lr_steps, step, total, cfg.epochs);
            opt.step(&mut model.params, &grads, lr);
            step += 1;
        }
        // Score the weights exactly as they will be stored.
        let stored: Model<f32> = model.cast();
        let scored: Model<E> = stored.cast();
        let res = evaluate_model(&scored, val.iter().copied(), frame_shape, &settings, &codec)?;
        let entry = EpochLog {
            epoch,
            loss: loss_sum / items.len() as f64,
            lr,
            val_ap: res.ap_total,
            val_ar: res.ar_total,
            seconds: started.elapsed().as_secs_f64(),
        };
        if best.as_ref().is_none_or(|b| res.ap_total > b.1) {
            save_checkpoint(&ckpt_path, &stored)?;
            best = Some((epoch, res.ap_total, res.ar_total, stored));
        }
        let _ = writeln!(log_text, "{}", entry.line());
        write_text(&log_path, &log_text)?;
        progress(&entry);
        logs.push(entry);
    }
    let (best_epoch, best_ap, best_ar, best_model) = best.expect("at least one epoch");
    Ok(TrainOutcome { epochs: logs, best_epoch, best_ap, best_ar, checkpoint: ckpt_path, best_model })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CoreError::io(path, e))
}
