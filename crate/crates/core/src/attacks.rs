//! White-box gradient attacks with an ℓ∞ budget: FGSM and PGD.
//!
//! Only the RGB planes are perturbed. The profile plane is recomputed from
//! the perturbed RGB after every step, so an attacker never edits it directly.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::FourChannelImage;
use crate::color::{epsilon_bound, NormOrder};
use crate::error::{Error, Result};
use crate::model::{Network, Objective};
use crate::profiles::{ProfileKind, ProfileSettings};

/// Shadow strength whose bound sets the default budget.
pub const DEFAULT_BUDGET_STRENGTH: f64 = 0.43;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsBudget {
    /// Radius in normalized [0, 1] pixel units.
    pub epsilon: f64,
    pub p: NormOrder,
}

impl EpsBudget {
    pub fn linf(epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::invalid("epsilon", format!("must be finite and non-negative, got {epsilon}")));
        }
        Ok(Self {
            epsilon,
            p: NormOrder::Inf,
        })
    }

    /// The ℓ∞ shadow bound at strength `k`.
    pub fn from_shadow_strength(k: f64) -> Result<Self> {
        Self::linf(epsilon_bound(k, NormOrder::Inf)?)
    }
}

impl Default for EpsBudget {
    fn default() -> Self {
        Self::from_shadow_strength(DEFAULT_BUDGET_STRENGTH).expect("valid default strength")
    }
}

/// The model under attack and how its input is assembled.
#[derive(Debug, Clone, Copy)]
pub struct Target<'a> {
    pub net: &'a Network<f32>,
    /// `None` for a 3-channel model that sees RGB only.
    pub profile: Option<ProfileKind>,
    pub settings: ProfileSettings,
}

impl<'a> Target<'a> {
    pub fn new(net: &'a Network<f32>, profile: Option<ProfileKind>) -> Result<Self> {
        let expected = if profile.is_some() { 4 } else { 3 };
        if net.spec().input_channels != expected {
            return Err(Error::ChannelMismatch {
                expected,
                found: net.spec().input_channels,
            });
        }
        Ok(Self {
            net,
            profile,
            settings: ProfileSettings::default(),
        })
    }

    fn assemble(&self, width: usize, height: usize, x: &[f64]) -> Result<FourChannelImage> {
        let rgb: Vec<f32> = x.iter().map(|&v| (v * 255.0) as f32).collect();
        match self.profile {
            Some(kind) => FourChannelImage::from_planar_rgb(width, height, rgb, kind, &self.settings),
            None => FourChannelImage::from_planar_parts(width, height, rgb, vec![0; width * height]),
        }
    }

    /// Gradient of the summed cross-entropy with respect to the RGB planes.
    pub fn rgb_gradient(&self, img: &FourChannelImage, label: usize) -> Result<Vec<f32>> {
        let with_profile = self.profile.is_some();
        let c = if with_profile { 4 } else { 3 };
        let x = Array4::from_shape_vec((1, c, img.height(), img.width()), img.to_tensor(with_profile))
            .map_err(|_| Error::DataLength {
                expected: c * img.width() * img.height(),
                found: img.to_tensor(with_profile).len(),
            })?;
        let g = self.net.input_gradient(x.view(), &[label], Objective::CrossEntropy)?;
        let n = 3 * img.width() * img.height();
        Ok(g.iter().take(n).copied().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgdConfig {
    pub steps: usize,
    /// Defaults to ε / 8 when unset.
    pub step_size: Option<f64>,
    pub random_start: bool,
    pub seed: u64,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            step_size: None,
            random_start: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adversarial {
    pub image: FourChannelImage,
    /// Final RGB offset in normalized units, planar like the image.
    pub delta: Vec<f64>,
    /// Largest `|delta|` reached by any iterate.
    pub max_iterate_linf: f64,
}

fn sign(v: f32) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One signed-gradient step of size ε, clipped to the valid range.
pub fn fgsm(target: &Target<'_>, img: &FourChannelImage, label: usize, budget: &EpsBudget) -> Result<Adversarial> {
    let cfg = PgdConfig {
        steps: 1,
        step_size: Some(budget.epsilon),
        random_start: false,
        seed: 0,
    };
    pgd(target, img, label, budget, &cfg)
}

/// Iterated signed-gradient ascent on the loss, projected onto the ℓ∞ ball
/// of radius ε around the original RGB and onto [0, 1].
pub fn pgd(
    target: &Target<'_>,
    img: &FourChannelImage,
    label: usize,
    budget: &EpsBudget,
    cfg: &PgdConfig,
) -> Result<Adversarial> {
    if budget.p != NormOrder::Inf {
        return Err(Error::invalid("p", "gradient attacks use the l-infinity budget"));
    }
    if cfg.steps == 0 {
        return Err(Error::invalid("steps", "must be at least 1"));
    }
    let eps = budget.epsilon;
    let alpha = cfg.step_size.unwrap_or(eps / 8.0);
    if !(alpha > 0.0 || eps == 0.0) {
        return Err(Error::invalid("step_size", "must be positive"));
    }
    let (w, h) = (img.width(), img.height());
    let x0: Vec<f64> = img.rgb().iter().map(|&v| f64::from(v) / 255.0).collect();
    let mut delta = vec![0.0f64; x0.len()];

    let project = |delta: &mut [f64]| {
        for (d, &x) in delta.iter_mut().zip(&x0) {
            *d = d.clamp(-eps, eps).clamp(-x, 1.0 - x);
        }
    };

    if cfg.random_start && eps > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for d in &mut delta {
            *d = rng.random_range(-eps..=eps);
        }
        project(&mut delta);
    }
    let offset = |delta: &[f64]| -> Vec<f64> { x0.iter().zip(delta).map(|(x, d)| x + d).collect() };

    let mut current = if delta.iter().all(|&d| d == 0.0) {
        img.clone()
    } else {
        target.assemble(w, h, &offset(&delta))?
    };
    let mut max_linf = delta.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    for _ in 0..cfg.steps {
        let grad = target.rgb_gradient(&current, label)?;
        if grad.iter().all(|&g| g == 0.0) {
            continue;
        }
        for (d, &g) in delta.iter_mut().zip(&grad) {
            *d += alpha * sign(g);
        }
        project(&mut delta);
        max_linf = delta.iter().fold(max_linf, |m, d| m.max(d.abs()));
        current = target.assemble(w, h, &offset(&delta))?;
    }
    Ok(Adversarial {
        image: current,
        delta,
        max_iterate_linf: max_linf,
    })
}
