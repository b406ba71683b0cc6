//! Deterministic synthetic range-azimuth radar scenes.
//!
//! Each target is a complex Gaussian blob (2 bins wide in range, 3 in
//! azimuth) centred on an integer bin. Its phase advances with radial
//! velocity `v` as `phi0 + 2 pi * 2 v (t * frame_period + i * chirp_period) / lambda`
//! for frame `t` and chirp slot `i`, where the four chirp slots are chirps
//! 0, 64, 128, 192 of 256 so `chirp_period = frame_period / 4`. Targets also
//! drift slowly across the grid; the drift is independent of `v` so that
//! fast targets stay in view for a whole sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::confmap::{Annotation, BIN_M};
use crate::error::{config_err, Result};

pub const WAVELENGTH_M: f64 = 3.9e-3;
pub const FRAME_PERIOD_S: f64 = 1.0 / 30.0;
pub const CHIRP_SLOTS: [usize; 4] = [0, 64, 128, 192];
pub const CHIRPS_PER_FRAME: usize = 256;
pub const BLOB_SIGMA_RANGE: f64 = 2.0;
pub const BLOB_SIGMA_AZIMUTH: f64 = 3.0;
pub const AZIMUTH_SPAN_DEG: f64 = 45.0;
/// Minimum spacing between targets, in bins, over the whole sequence.
pub const MIN_SEPARATION_BINS: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scenario {
    PL,
    CR,
    CS,
    HW,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::PL, Scenario::CR, Scenario::CS, Scenario::HW];

    pub fn tag(self) -> &'static str {
        match self {
            Scenario::PL => "PL",
            Scenario::CR => "CR",
            Scenario::CS => "CS",
            Scenario::HW => "HW",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.tag() == s)
    }

    pub fn profile(self) -> Profile {
        match self {
            Scenario::PL => Profile { count: (3, 7), mix: [0.5, 0.2, 0.3], speed: (0.0, 2.0) },
            Scenario::CR => Profile { count: (3, 7), mix: [0.5, 0.3, 0.2], speed: (0.5, 4.0) },
            Scenario::CS => Profile { count: (4, 8), mix: [0.3, 0.3, 0.4], speed: (1.0, 8.0) },
            Scenario::HW => Profile { count: (2, 6), mix: [0.1, 0.1, 0.8], speed: (5.0, 20.0) },
        }
    }
}

/// Target count range (inclusive), class probabilities, radial speed range (m/s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Profile {
    pub count: (usize, usize),
    pub mix: [f64; 3],
    pub speed: (f64, f64),
}

/// Reflectivity range per class; classes differ in echo strength.
pub const AMPLITUDE: [(f64, f64); 3] = [(0.8, 1.2), (1.6, 2.2), (3.0, 4.0)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub frames: usize,
    pub chirps: usize,
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f64,
    /// Largest per-frame drift, in bins, along each axis.
    pub max_drift: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { frames: 128, chirps: 4, height: 64, width: 64, noise_sigma: 0.15, max_drift: 0.1 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height < 8 || self.width < 8 {
            return Err(config_err!("synthetic grid needs frames >= 1 and at least 8x8 bins"));
        }
        if self.chirps == 0 || self.chirps > CHIRP_SLOTS.len() {
            return Err(config_err!("chirps must be in 1..={}", CHIRP_SLOTS.len()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.max_drift >= 0.0) {
            return Err(config_err!("noise_sigma and max_drift must be non-negative"));
        }
        Ok(())
    }

    pub fn chirp_period(&self) -> f64 {
        FRAME_PERIOD_S * CHIRP_SLOTS[1] as f64 / CHIRPS_PER_FRAME as f64
    }

    pub fn azimuth_to_bin(&self, deg: f64) -> f64 {
        (deg + AZIMUTH_SPAN_DEG) / (2.0 * AZIMUTH_SPAN_DEG) * (self.width - 1) as f64
    }

    pub fn bin_to_azimuth(&self, bin: f64) -> f64 {
        bin / (self.width - 1) as f64 * 2.0 * AZIMUTH_SPAN_DEG - AZIMUTH_SPAN_DEG
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetSpec {
    pub class_id: usize,
    /// Range at frame 0, metres.
    pub range_m: f64,
    /// Azimuth at frame 0, degrees in [-45, 45].
    pub azimuth_deg: f64,
    /// Radial velocity, m/s (sets the chirp phase progression).
    pub velocity: f64,
    pub amplitude: f64,
    pub phase0: f64,
    /// Grid drift per frame, bins.
    pub range_drift: f64,
    pub azimuth_drift: f64,
}

impl TargetSpec {
    /// Continuous (range, azimuth) bin position at frame `t`.
    pub fn position(&self, cfg: &SynthConfig, t: usize) -> (f64, f64) {
        (
            self.range_m / BIN_M + self.range_drift * t as f64,
            cfg.azimuth_to_bin(self.azimuth_deg) + self.azimuth_drift * t as f64,
        )
    }

    /// Blob centre at frame `t`.
    pub fn bin(&self, cfg: &SynthConfig, t: usize) -> (usize, usize) {
        let (r, a) = self.position(cfg, t);
        (r.round() as usize, a.round() as usize)
    }

    pub fn phase(&self, cfg: &SynthConfig, t: usize, chirp: usize) -> f64 {
        let time = t as f64 * FRAME_PERIOD_S + chirp as f64 * cfg.chirp_period();
        self.phase0 + 2.0 * std::f64::consts::PI * 2.0 * self.velocity * time / WAVELENGTH_M
    }

    fn in_grid(&self, cfg: &SynthConfig) -> bool {
        let lo_range = 1.0 / BIN_M;
        [0, cfg.frames - 1].iter().all(|&t| {
            let (r, a) = self.position(cfg, t);
            r >= lo_range && r <= (cfg.height - 1) as f64 && a >= 0.0 && a <= (cfg.width - 1) as f64
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub scenario: Scenario,
    pub config: SynthConfig,
    pub targets: Vec<TargetSpec>,
}

fn pick_class(rng: &mut ChaCha8Rng, mix: &[f64; 3]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in mix.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    mix.len() - 1
}

fn separated(a: &TargetSpec, b: &TargetSpec, cfg: &SynthConfig) -> bool {
    (0..cfg.frames).all(|t| {
        let (ra, aa) = a.bin(cfg, t);
        let (rb, ab) = b.bin(cfg, t);
        let d = ((ra as f64 - rb as f64).powi(2) + (aa as f64 - ab as f64).powi(2)).sqrt();
        d >= MIN_SEPARATION_BINS
    })
}

/// Samples a scene; identical `(seed, scenario, cfg)` gives an identical scene.
pub fn generate_scene(seed: u64, scenario: Scenario, cfg: &SynthConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prof = scenario.profile();
    let count = rng.random_range(prof.count.0..=prof.count.1);
    let mut targets: Vec<TargetSpec> = Vec::with_capacity(count);
    let max_range = (cfg.height - 1) as f64 * BIN_M;
    for _ in 0..count {
        // rejection sampling; a crowded grid may end up with fewer targets
        for _attempt in 0..200 {
            let class_id = pick_class(&mut rng, &prof.mix);
            let speed = rng.random_range(prof.speed.0..=prof.speed.1);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let (alo, ahi) = AMPLITUDE[class_id];
            let t = TargetSpec {
                class_id,
                range_m: rng.random_range(1.0..max_range),
                azimuth_deg: rng.random_range(-AZIMUTH_SPAN_DEG..=AZIMUTH_SPAN_DEG),
                velocity: sign * speed,
                amplitude: rng.random_range(alo..=ahi),
                phase0: rng.random_range(0.0..2.0 * std::f64::consts::PI),
                range_drift: rng.random_range(-cfg.max_drift..=cfg.max_drift),
                azimuth_drift: rng.random_range(-cfg.max_drift..=cfg.max_drift),
            };
            if t.in_grid(cfg) && targets.iter().all(|o| separated(o, &t, cfg)) {
                targets.push(t);
                break;
            }
        }
    }
    Ok(Scene { seed, scenario, config: cfg.clone(), targets })
}

/// Ground truth for every frame, sorted by (frame, class, range, azimuth).
pub fn annotations(scene: &Scene) -> Vec<Annotation> {
    let cfg = &scene.config;
    let mut out = Vec::new();
    for t in 0..cfg.frames {
        for tg in &scene.targets {
            let (r, a) = tg.bin(cfg, t);
            out.push(Annotation { frame_id: t as u32, class_id: tg.class_id, range_bin: r, azimuth_bin: a });
        }
    }
    out.sort();
    out
}

/// Renders `[2, T, C, H, W]` (real, imaginary) in double precision.
pub fn render_f64(scene: &Scene) -> Vec<f64> {
    let cfg = &scene.config;
    let (t_n, c_n, h, w) = (cfg.frames, cfg.chirps, cfg.height, cfg.width);
    let plane = h * w;
    let half = t_n * c_n * plane;
    let mut out = vec![0.0; 2 * half];
    for t in 0..t_n {
        for tg in &scene.targets {
            let (r0, a0) = tg.bin(cfg, t);
            // blobs are negligible beyond 6 sigma
            let rr = (6.0 * BLOB_SIGMA_RANGE) as usize;
            let ra = (6.0 * BLOB_SIGMA_AZIMUTH) as usize;
            for c in 0..c_n {
                let ph = tg.phase(cfg, t, c);
                let (re, im) = (tg.amplitude * ph.cos(), tg.amplitude * ph.sin());
                let base = (t * c_n + c) * plane;
                for r in r0.saturating_sub(rr)..(r0 + rr + 1).min(h) {
                    let dr = r as f64 - r0 as f64;
                    for a in a0.saturating_sub(ra)..(a0 + ra + 1).min(w) {
                        let da = a as f64 - a0 as f64;
                        let g = (-dr * dr / (2.0 * BLOB_SIGMA_RANGE * BLOB_SIGMA_RANGE)
                            - da * da / (2.0 * BLOB_SIGMA_AZIMUTH * BLOB_SIGMA_AZIMUTH))
                            .exp();
                        out[base + r * w + a] += g * re;
                        out[half + base + r * w + a] += g * im;
                    }
                }
            }
        }
    }
    if scene.config.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0x6e6f_6973_65);
        let normal = Normal::new(0.0, scene.config.noise_sigma / std::f64::consts::SQRT_2).expect("finite sigma");
        for v in out.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    out
}

/// The stored single-precision cube plus per-frame annotations.
pub fn render_ramap(scene: &Scene) -> (Vec<f32>, Vec<Annotation>) {
    let cube = render_f64(scene).into_iter().map(|v| v as f32).collect();
    (cube, annotations(scene))
}

/// Derives the seed of sequence `index` from a dataset seed.
pub fn sequence_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 step
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
