//! Shadow application and the black-box PSO search over shadow polygons.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::color::{pixel_to_lab, pixel_to_rgb, RgbImage};
use crate::error::{Error, Result};
use crate::geometry::{intersect, rasterize, Polygon, SignMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowParams {
    k: f64,
    polygon: Polygon,
}

impl ShadowParams {
    pub fn new(k: f64, polygon: Polygon) -> Result<Self> {
        check_strength(k)?;
        Ok(Self { k, polygon })
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn polygon(&self) -> &Polygon {
        &self.polygon
    }
}

pub(crate) fn check_strength(k: f64) -> Result<()> {
    if k > 0.0 && k <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid("k", format!("shadow strength must lie in (0, 1], got {k}")))
    }
}

/// Darkens the L channel by `k` inside `polygon ∩ mask`.
///
/// Pixels outside the region are copied from the source untouched.
pub fn apply_shadow(img: &RgbImage, params: &ShadowParams, mask: &SignMask) -> Result<RgbImage> {
    if img.dims() != mask.dims() {
        return Err(Error::DimensionMismatch {
            expected: img.dims(),
            found: mask.dims(),
        });
    }
    let region = intersect(&rasterize(&params.polygon, img.width(), img.height()), mask)?;
    Ok(shade_region(img, &region, params.k, |x, y| pixel_to_lab(img.pixel(x, y))))
}

fn shade_region(
    img: &RgbImage,
    region: &SignMask,
    k: f64,
    lab_at: impl Fn(usize, usize) -> [f64; 3],
) -> RgbImage {
    let mut out = img.clone();
    if k == 1.0 {
        return out;
    }
    for y in 0..img.height() {
        for x in 0..img.width() {
            if region.get(x, y) {
                let [l, a, b] = lab_at(x, y);
                out.set_pixel(x, y, pixel_to_rgb([l * k, a, b]));
            }
        }
    }
    out
}

/// Shadows one image repeatedly, caching its LAB conversion.
struct Shader<'a> {
    img: &'a RgbImage,
    mask: &'a SignMask,
    lab: Vec<[f64; 3]>,
}

impl<'a> Shader<'a> {
    fn new(img: &'a RgbImage, mask: &'a SignMask) -> Self {
        Self {
            img,
            mask,
            lab: img.pixels().map(pixel_to_lab).collect(),
        }
    }

    fn shade(&self, poly: &Polygon, k: f64) -> RgbImage {
        let (w, h) = self.img.dims();
        let region = intersect(&rasterize(poly, w, h), self.mask).expect("dims checked at construction");
        shade_region(self.img, &region, k, |x, y| self.lab[y * w + x])
    }
}

/// Anything that maps an RGB image to class probabilities.
pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;

    fn predict_proba(&self, img: &RgbImage) -> Vec<f64>;

    fn predict(&self, img: &RgbImage) -> usize {
        argmax(&self.predict_proba(img))
    }
}

impl<C: Classifier + ?Sized> Classifier for &C {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }

    fn predict_proba(&self, img: &RgbImage) -> Vec<f64> {
        (**self).predict_proba(img)
    }
}

/// First index of the maximum; ties resolve to the lowest class id.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Counts every probability request forwarded to the wrapped model.
pub struct QueryingClassifier<'a> {
    inner: &'a dyn Classifier,
    queries: AtomicU64,
}

impl<'a> QueryingClassifier<'a> {
    pub fn new(inner: &'a dyn Classifier) -> Self {
        Self {
            inner,
            queries: AtomicU64::new(0),
        }
    }

    pub fn query_count(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }
}

impl Classifier for QueryingClassifier<'_> {
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn predict_proba(&self, img: &RgbImage) -> Vec<f64> {
        self.queries.fetch_add(1, Ordering::Relaxed);
        self.inner.predict_proba(img)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsoConfig {
    pub particles: usize,
    pub iterations: usize,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    pub vertex_count: usize,
    pub seed: u64,
    /// Vertices may leave the image by this fraction of its size per side.
    pub margin: f64,
    /// Velocity cap as a fraction of each coordinate's range.
    pub velocity_clamp: f64,
}

impl Default for PsoConfig {
    fn default() -> Self {
        Self {
            particles: 10,
            iterations: 50,
            inertia: 0.73,
            cognitive: 1.49,
            social: 1.49,
            vertex_count: 3,
            seed: 0,
            margin: 0.5,
            velocity_clamp: 0.25,
        }
    }
}

impl PsoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 {
            return Err(Error::invalid("particles", "must be at least 1"));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("iterations", "must be at least 1"));
        }
        if self.vertex_count < 3 {
            return Err(Error::invalid("vertex_count", "must be at least 3"));
        }
        for (name, v) in [
            ("inertia", self.inertia),
            ("cognitive", self.cognitive),
            ("social", self.social),
            ("margin", self.margin),
            ("velocity_clamp", self.velocity_clamp),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }

    /// Maximum number of model queries one attack can make.
    pub fn query_budget(&self) -> u64 {
        (self.particles * (self.iterations + 1)) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub success: bool,
    pub best_polygon: Polygon,
    pub queries: u64,
    /// Probability of the true label at `best_polygon`.
    pub final_confidence: f64,
    pub predicted_label: usize,
}

struct Evaluation {
    fitness: f64,
    predicted: usize,
}

/// Untargeted shadow attack: searches polygon vertices minimizing the
/// model's probability of `label`, stopping at the first misclassification.
pub fn pso_attack(
    img: &RgbImage,
    label: usize,
    model: &QueryingClassifier<'_>,
    k: f64,
    mask: &SignMask,
    cfg: &PsoConfig,
) -> Result<AttackResult> {
    check_strength(k)?;
    cfg.validate()?;
    if img.dims() != mask.dims() {
        return Err(Error::DimensionMismatch {
            expected: img.dims(),
            found: mask.dims(),
        });
    }
    let classes = model.num_classes();
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }

    let start_queries = model.query_count();
    let shader = Shader::new(img, mask);
    let evaluate = |pos: &[f64]| -> (Polygon, Evaluation) {
        let poly = Polygon::from_flat(pos).expect("particle positions are finite");
        let probs = model.predict_proba(&shader.shade(&poly, k));
        let eval = Evaluation {
            fitness: probs[label],
            predicted: argmax(&probs),
        };
        (poly, eval)
    };

    let (w, h) = (img.width() as f64, img.height() as f64);
    let dim = cfg.vertex_count * 2;
    let bounds: Vec<(f64, f64)> = (0..dim)
        .map(|d| {
            let extent = if d % 2 == 0 { w } else { h };
            (-cfg.margin * extent, (1.0 + cfg.margin) * extent)
        })
        .collect();
    let vmax: Vec<f64> = bounds.iter().map(|(lo, hi)| cfg.velocity_clamp * (hi - lo)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut positions: Vec<Vec<f64>> = Vec::with_capacity(cfg.particles);
    let mut velocities: Vec<Vec<f64>> = Vec::with_capacity(cfg.particles);
    for _ in 0..cfg.particles {
        positions.push(bounds.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect());
        velocities.push(vmax.iter().map(|&v| rng.random_range(-v..=v)).collect());
    }

    let finish = |poly: Polygon, eval: &Evaluation| AttackResult {
        success: eval.predicted != label,
        best_polygon: poly,
        queries: model.query_count() - start_queries,
        final_confidence: eval.fitness,
        predicted_label: eval.predicted,
    };

    let mut personal_best = positions.clone();
    let mut personal_fit = Vec::with_capacity(cfg.particles);
    let mut global: Option<(usize, Polygon, Evaluation)> = None;
    for (i, pos) in positions.iter().enumerate() {
        let (poly, eval) = evaluate(pos);
        if eval.predicted != label {
            return Ok(finish(poly, &eval));
        }
        personal_fit.push(eval.fitness);
        if global.as_ref().is_none_or(|(_, _, g)| eval.fitness < g.fitness) {
            global = Some((i, poly, eval));
        }
    }
    let (gi, mut global_poly, mut global_eval) = global.expect("at least one particle");
    let mut global_best = positions[gi].clone();

    for _ in 0..cfg.iterations {
        for i in 0..cfg.particles {
            let (x, v) = (&mut positions[i], &mut velocities[i]);
            for d in 0..dim {
                let r1: f64 = rng.random();
                let r2: f64 = rng.random();
                let vel = cfg.inertia * v[d]
                    + cfg.cognitive * r1 * (personal_best[i][d] - x[d])
                    + cfg.social * r2 * (global_best[d] - x[d]);
                v[d] = vel.clamp(-vmax[d], vmax[d]);
                x[d] = (x[d] + v[d]).clamp(bounds[d].0, bounds[d].1);
            }
            let (poly, eval) = evaluate(x);
            if eval.predicted != label {
                return Ok(finish(poly, &eval));
            }
            if eval.fitness < personal_fit[i] {
                personal_fit[i] = eval.fitness;
                personal_best[i].clone_from(x);
            }
            if eval.fitness < global_eval.fitness {
                global_best.clone_from(x);
                global_poly = poly;
                global_eval = eval;
            }
        }
    }
    Ok(finish(global_poly, &global_eval))
}
