use ndarray::Array4;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::network::{Gradients, Network};
use super::CnnSpec;
use crate::error::{Error, Result};

const STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-6;
const MIN_CHECKED: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Compares backprop gradients of a freshly initialized `f64` network with
/// central finite differences on at least 100 sampled parameters.
pub fn gradient_check(spec: CnnSpec, input: &[f64], label: usize, seed: u64) -> Result<GradCheckReport> {
    gradient_check_with(spec, input, label, seed, |_| {})
}

/// Like [`gradient_check`], but `mutate` may tamper with the analytic
/// gradients before comparison.
pub fn gradient_check_with(
    spec: CnnSpec,
    input: &[f64],
    label: usize,
    seed: u64,
    mutate: impl FnOnce(&mut Gradients<f64>),
) -> Result<GradCheckReport> {
    let (c, s) = (spec.input_channels, spec.input_size);
    if input.len() != c * s * s {
        return Err(Error::DataLength {
            expected: c * s * s,
            found: input.len(),
        });
    }
    let x = Array4::from_shape_vec((1, c, s, s), input.to_vec()).expect("length checked");
    let mut net = Network::<f64>::init(spec, seed)?;
    // Small positive biases keep most ReLUs away from their kink.
    for (p, (name, _)) in net.params_mut().iter_mut().zip(spec.parameter_shapes()) {
        if name.ends_with(".bias") {
            p.fill(0.01);
        }
    }
    let labels = [label];
    let (_, mut grads) = net.loss_and_gradients(x.view(), &labels)?;
    mutate(&mut grads);

    let sizes: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
    let total: usize = sizes.iter().sum();
    let count = total.min(MIN_CHECKED.max(total / 50));
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut picks = sample(&mut rng, total, count).into_vec();
    picks.sort_unstable();

    let mut worst = 0.0f64;
    let mut worst_abs = 0.0f64;
    for flat in picks {
        let (tensor, idx) = locate(&sizes, flat);
        let analytic = grads.0[tensor].as_slice().expect("standard layout")[idx];
        let original = net.params()[tensor].as_slice().expect("standard layout")[idx];
        let mut eval = |v: f64| -> Result<f64> {
            net.params_mut()[tensor].as_slice_mut().expect("standard layout")[idx] = v;
            net.loss(x.view(), &labels)
        };
        let plus = eval(original + STEP)?;
        let minus = eval(original - STEP)?;
        eval(original)?;
        let numeric = (plus - minus) / (2.0 * STEP);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
        worst = worst.max(rel);
        worst_abs = worst_abs.max((analytic - numeric).abs());
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        max_abs_error: worst_abs,
        checked: count,
    })
}

fn locate(sizes: &[usize], mut flat: usize) -> (usize, usize) {
    for (i, &n) in sizes.iter().enumerate() {
        if flat < n {
            return (i, flat);
        }
        flat -= n;
    }
    unreachable!("index sampled below the total")
}
