//! Adam and learning-rate schedules.

use radarformer_core::ParamStore;
use radarformer_tensor::{Scalar, Tensor};

use crate::run_config::ScheduleKind;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Learning rate for optimizer step `step` out of `total` steps spread over
/// `epochs` epochs.
pub fn learning_rate(
    kind: ScheduleKind,
    start: f64,
    end: f64,
    lr_steps: usize,
    step: usize,
    total: usize,
    epochs: usize,
) -> f64 {
    match kind {
        ScheduleKind::Cosine => {
            let p = if total <= 1 { 1.0 } else { step.min(total - 1) as f64 / (total - 1) as f64 };
            end + 0.5 * (start - end) * (1.0 + (std::f64::consts::PI * p).cos())
        }
        ScheduleKind::Step => {
            // Piecewise constant: `lr_steps` equal geometric drops at evenly
            // spaced epoch boundaries, reaching `end` in the last segment.
            if lr_steps == 0 {
                return start;
            }
            let per_epoch = total.div_ceil(epochs.max(1)).max(1);
            let epoch = (step / per_epoch).min(epochs.saturating_sub(1));
            let segment = (epoch * (lr_steps + 1) / epochs.max(1)).min(lr_steps);
            start * (end / start).powf(segment as f64 / lr_steps as f64)
        }
    }
}

pub struct Adam<E> {
    m: Vec<Tensor<E>>,
    v: Vec<Tensor<E>>,
    t: i32,
}

impl<E: Scalar> Adam<E> {
    pub fn new(params: &ParamStore<E>) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.shape()).expect("param shape")).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    /// One update; `grads` are in parameter declaration order. Missing
    /// gradients (parameters unreachable from the loss) count as zero.
    pub fn step(&mut self, params: &mut ParamStore<E>, grads: &[Option<&Tensor<E>>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        let (b1, b2) = (E::from_f64_lossy(BETA1), E::from_f64_lossy(BETA2));
        let (one_b1, one_b2) = (E::from_f64_lossy(1.0 - BETA1), E::from_f64_lossy(1.0 - BETA2));
        let step = E::from_f64_lossy(lr / c1);
        let inv_c2 = E::from_f64_lossy(1.0 / c2);
        let eps = E::from_f64_lossy(ADAM_EPS);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = p.data_mut();
            match grads[i] {
                Some(g) => {
                    for (((w, m), v), &g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                        *m = b1 * *m + one_b1 * g;
                        *v = b2 * *v + one_b2 * g * g;
                        *w = *w - step * *m / ((*v * inv_c2).sqrt() + eps);
                    }
                }
                None => {
                    for ((w, m), v) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = b1 * *m;
                        *v = b2 * *v;
                        *w = *w - step * *m / ((*v * inv_c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}
