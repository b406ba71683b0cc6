//! Parameter / MAC accounting, inference timing and the comparison report.
//!
//! Conventions: a convolution costs `out_cells * Cin * prod(kernel)` MACs per
//! output channel, a dense layer `tokens * in * out`, attention
//! `3NS^2 + 2N^2 S + NS^2` per sequence. Normalisation, softmax, activations
//! and reshapes are free.

use std::cell::Cell;
use std::fmt::Write as _;
use std::time::Instant;

use radarformer_tensor::{Graph, Init, Scalar, Tensor};

use crate::error::{config_err, Result};
use crate::model::Model;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerProfile {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Profile {
    pub layers: Vec<LayerProfile>,
    pub total: u64,
}

fn profile<E: Scalar>(model: &Model<E>, input: &[usize], pick: fn(&crate::LayerDesc) -> u64) -> Result<Profile> {
    let layers: Vec<LayerProfile> = model
        .layers(input)?
        .into_iter()
        .map(|l| LayerProfile { params: l.params(), macs: l.macs(), name: l.name })
        .collect();
    let total = model.layers(input)?.iter().map(pick).sum();
    Ok(Profile { layers, total })
}

/// Per-layer parameter counts; the total equals the stored parameter count.
pub fn count_params<E: Scalar>(model: &Model<E>) -> Result<Profile> {
    profile(model, &model.config.input_shape(1), |l| l.params())
}

/// Per-layer MACs for one forward pass at `input` (`[B, 2, T, C, H, W]`).
pub fn count_macs<E: Scalar>(model: &Model<E>, input: &[usize]) -> Result<Profile> {
    profile(model, input, |l| l.macs())
}

/// Parameters and MACs of the channel-chirp merge alone.
pub fn mnet_counts<E: Scalar>(model: &Model<E>, input: &[usize]) -> Result<(u64, u64)> {
    let layers = model.layers(input)?;
    let m = layers.iter().filter(|l| l.name.starts_with("mnet"));
    Ok(m.fold((0, 0), |(p, c), l| (p + l.params(), c + l.macs())))
}

/// Milliseconds since an arbitrary origin.
pub trait Clock {
    fn now_ms(&self) -> f64;
}

pub struct WallClock(Instant);

impl Default for WallClock {
    fn default() -> Self {
        Self(Instant::now())
    }
}

impl Clock for WallClock {
    fn now_ms(&self) -> f64 {
        self.0.elapsed().as_secs_f64() * 1e3
    }
}

/// A clock that only moves when told to; for testing the timing harness.
#[derive(Default)]
pub struct MockClock(Cell<f64>);

impl MockClock {
    pub fn advance(&self, ms: f64) {
        self.0.set(self.0.get() + ms);
    }
}

impl Clock for MockClock {
    fn now_ms(&self) -> f64 {
        self.0.get()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub mean_ms: f64,
    pub std_ms: f64,
    /// New frames produced per pass (batch x test stride).
    pub frames_per_pass: usize,
    pub per_frame_ms: f64,
    pub runs: usize,
}

/// Times `runs` calls of `f` after `warmup` untimed calls.
pub fn time_runs(
    clock: &dyn Clock,
    warmup: usize,
    runs: usize,
    frames_per_pass: usize,
    mut f: impl FnMut() -> Result<()>,
) -> Result<Timing> {
    if runs < 3 {
        return Err(config_err!("timing needs at least 3 runs, got {runs}"));
    }
    if frames_per_pass == 0 {
        return Err(config_err!("frames per pass must be positive"));
    }
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = clock.now_ms();
        f()?;
        samples.push(clock.now_ms() - start);
    }
    let mean = samples.iter().sum::<f64>() / runs as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (runs - 1) as f64;
    Ok(Timing {
        mean_ms: mean,
        std_ms: var.sqrt(),
        frames_per_pass,
        per_frame_ms: mean / frames_per_pass as f64,
        runs,
    })
}

fn timing_input<E: Scalar>(input: &[usize]) -> Result<Tensor<E>> {
    Ok(Tensor::create(input, Init::SeededUniform { seed: 0, lo: -1.0, hi: 1.0 })?)
}

/// Forward-pass wall time, normalised per frame by `batch * test_stride`.
pub fn time_inference<E: Scalar>(
    model: &Model<E>,
    input: &[usize],
    test_stride: usize,
    warmup: usize,
    runs: usize,
) -> Result<Timing> {
    let x = timing_input::<E>(input)?;
    model.layers(input)?;
    time_runs(&WallClock::default(), warmup, runs, input[0] * test_stride, || model.predict(&x).map(|_| ()))
}

/// Forward plus backward (BCE against an all-zero map) wall time.
pub fn time_backward<E: Scalar>(
    model: &Model<E>,
    input: &[usize],
    test_stride: usize,
    warmup: usize,
    runs: usize,
) -> Result<Timing> {
    let x = timing_input::<E>(input)?;
    model.layers(input)?;
    time_runs(&WallClock::default(), warmup, runs, input[0] * test_stride, || {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, true);
        let xv = g.constant(x.clone());
        let y = model.forward_logits(&mut g, &p, xv)?;
        let target = Tensor::zeros(g.shape(y))?;
        let loss = g.bce_with_logits(y, &target)?;
        g.backward(loss)?;
        Ok(())
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub macs: u64,
    pub params: u64,
    pub bp: Option<Timing>,
    pub infer: Option<Timing>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub input: Vec<usize>,
    pub test_stride: usize,
    pub threads: usize,
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimingOptions {
    pub warmup: usize,
    pub runs: usize,
    pub backward: bool,
}

/// One row per model plus an `M-Net` row (counts only) taken from the first
/// model that has a channel-chirp merge. Inputs are adapted to each model's
/// own geometry at batch `input[0]`.
pub fn compare_report<E: Scalar>(
    models: &[&Model<E>],
    batch: usize,
    test_stride: usize,
    timing: Option<TimingOptions>,
) -> Result<Report> {
    let mut rows = Vec::new();
    let mut mnet = None;
    for m in models {
        let input = m.config.input_shape(batch);
        let macs = count_macs(m, &input)?.total;
        let params = count_params(m)?.total;
        if mnet.is_none() {
            mnet = Some(mnet_counts(m, &input)?);
        }
        let (bp, infer) = match timing {
            Some(t) => {
                let infer = Some(time_inference(m, &input, test_stride, t.warmup, t.runs)?);
                let bp = if t.backward { Some(time_backward(m, &input, test_stride, t.warmup, t.runs)?) } else { None };
                (bp, infer)
            }
            None => (None, None),
        };
        rows.push(ReportRow { model: m.config.name.clone(), macs, params, bp, infer });
    }
    if let Some((params, macs)) = mnet {
        rows.push(ReportRow { model: "M-Net".into(), macs, params, bp: None, infer: None });
    }
    let input = models.first().map(|m| m.config.input_shape(batch).to_vec()).unwrap_or_default();
    Ok(Report { input, test_stride, threads: 1, rows })
}

fn fmt_ms(t: &Option<Timing>) -> String {
    t.map(|t| format!("{:.2}", t.per_frame_ms)).unwrap_or_else(|| "-".into())
}

impl Report {
    pub fn row(&self, model: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# input {:?}, times are ms per frame (pass time / (batch x test stride {})), threads {}",
            self.input, self.test_stride, self.threads
        );
        let _ = writeln!(s, "{:<20} {:>12} {:>11} {:>12} {:>12}", "model", "GMACs", "params(m)", "BP(ms)", "infer(ms)");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<20} {:>12.3} {:>11.3} {:>12} {:>12}",
                r.model,
                r.macs as f64 / 1e9,
                r.params as f64 / 1e6,
                fmt_ms(&r.bp),
                fmt_ms(&r.infer)
            );
        }
        s
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "threads={}", self.threads);
        let _ = writeln!(s, "test_stride={}", self.test_stride);
        for r in &self.rows {
            let _ = writeln!(s, "{}.macs={}", r.model, r.macs);
            let _ = writeln!(s, "{}.params={}", r.model, r.params);
            if let Some(t) = r.infer {
                let _ = writeln!(s, "{}.infer_ms_per_frame={:.6}", r.model, t.per_frame_ms);
                let _ = writeln!(s, "{}.infer_ms_std={:.6}", r.model, t.std_ms);
            }
            if let Some(t) = r.bp {
                let _ = writeln!(s, "{}.bp_ms_per_frame={:.6}", r.model, t.per_frame_ms);
            }
        }
        s
    }
}
