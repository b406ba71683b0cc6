//! Central finite-difference gradient checker.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{usage_err, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Input to a gradient check.
#[derive(Debug, Clone)]
pub struct CheckInput {
    pub value: Tensor<f64>,
    /// Frozen inputs are fed to `f` but never perturbed or compared.
    pub requires_grad: bool,
}

impl CheckInput {
    pub fn param(value: Tensor<f64>) -> Self {
        Self { value, requires_grad: true }
    }

    pub fn frozen(value: Tensor<f64>) -> Self {
        Self { value, requires_grad: false }
    }
}

fn eval<F>(f: &F, inputs: &[CheckInput]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::no_grad();
    let vars: Vec<Var> = inputs.iter().map(|i| g.constant(i.value.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(usage_err!("gradient check needs a scalar function"));
    }
    Ok(g.value(out).data()[0])
}

/// Maximum over checked coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`, with `numeric` the central
/// difference `(f(x + eps e) - f(x - eps e)) / 2 eps`.
///
/// `max_coords` caps the number of coordinates probed per input; when an
/// input is larger, a seeded random subset is checked.
pub fn finite_diff_check_sampled<F>(
    f: F,
    inputs: &[CheckInput],
    eps: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|i| g.leaf(i.value.clone(), i.requires_grad)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        if !input.requires_grad {
            continue;
        }
        let n = input.value.numel();
        let analytic = g.grad(vars[k]).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        for j in coords {
            let orig = input.value.data()[j];
            probe[k].value.data_mut()[j] = orig + eps;
            let plus = eval(&f, &probe)?;
            probe[k].value.data_mut()[j] = orig - eps;
            let minus = eval(&f, &probe)?;
            probe[k].value.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (analytic[j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Exhaustive variant of [`finite_diff_check_sampled`]: every coordinate of
/// every input requiring grad is probed.
pub fn finite_diff_check<F>(f: F, inputs: &[CheckInput], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    finite_diff_check_sampled(f, inputs, eps, None, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::create(shape, Init::SeededUniform { seed, lo: -1.0, hi: 1.0 }).unwrap()
    }

    #[test]
    fn linear_function_is_exact() {
        let err = finite_diff_check(|g, v| g.sum(v[0]), &[CheckInput::param(rand(&[3, 4], 1))], 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn sigmoid_sum() {
        let err = finite_diff_check(
            |g, v| {
                let s = g.sigmoid(v[0])?;
                g.sum(s)
            },
            &[CheckInput::param(rand(&[10], 2))],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn frozen_inputs_are_skipped() {
        // A wrong "gradient" for the frozen input would be invisible anyway;
        // what matters is that evaluating it does not error and is ignored.
        let inputs = [CheckInput::param(rand(&[4], 3)), CheckInput::frozen(rand(&[4], 4))];
        let err = finite_diff_check(
            |g, v| {
                let p = g.mul(v[0], v[1])?;
                g.sum(p)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9);
    }
}
