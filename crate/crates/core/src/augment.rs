//! The defense's training-time pipeline: random shadows, profile maps,
//! geometric transforms and dataset quadruplication.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::color::{quantize, RgbImage};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::geometry::{Point, Polygon, SignMask};
use crate::model::TrainingExample;
use crate::profiles::{compute_profile, ProfileKind, ProfileMap, ProfileSettings, BACKGROUND, FOREGROUND};
use crate::shadow::{apply_shadow, ShadowParams};

/// RGB planes (real-valued, [0, 255]) plus a binary profile plane.
#[derive(Debug, Clone, PartialEq)]
pub struct FourChannelImage {
    width: usize,
    height: usize,
    rgb: Vec<f32>,
    profile: Vec<u8>,
}

impl FourChannelImage {
    pub fn new(img: &RgbImage, profile: &ProfileMap) -> Result<Self> {
        if img.dims() != (profile.width(), profile.height()) {
            return Err(Error::DimensionMismatch {
                expected: img.dims(),
                found: (profile.width(), profile.height()),
            });
        }
        let (w, h) = img.dims();
        let mut rgb = vec![0.0f32; 3 * w * h];
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                rgb[c * w * h + i] = f32::from(px[c]);
            }
        }
        Ok(Self {
            width: w,
            height: h,
            rgb,
            profile: profile.as_raw().to_vec(),
        })
    }

    /// Builds an image from planar RGB values, recomputing the profile from
    /// their quantized form.
    pub fn from_planar_rgb(
        width: usize,
        height: usize,
        rgb: Vec<f32>,
        kind: ProfileKind,
        settings: &ProfileSettings,
    ) -> Result<Self> {
        if rgb.len() != 3 * width * height {
            return Err(Error::DataLength {
                expected: 3 * width * height,
                found: rgb.len(),
            });
        }
        let quantized = planar_to_rgb(width, height, &rgb);
        let profile = compute_profile(&quantized, kind, settings)?;
        Ok(Self {
            width,
            height,
            rgb,
            profile: profile.as_raw().to_vec(),
        })
    }

    /// Builds an image from planar RGB values and an explicit binary profile.
    pub fn from_planar_parts(width: usize, height: usize, rgb: Vec<f32>, profile: Vec<u8>) -> Result<Self> {
        if rgb.len() != 3 * width * height {
            return Err(Error::DataLength {
                expected: 3 * width * height,
                found: rgb.len(),
            });
        }
        if profile.len() != width * height {
            return Err(Error::DataLength {
                expected: width * height,
                found: profile.len(),
            });
        }
        if profile.iter().any(|&v| v != BACKGROUND && v != FOREGROUND) {
            return Err(Error::invalid("profile", "values must be 0 or 255"));
        }
        Ok(Self {
            width,
            height,
            rgb,
            profile,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Planar `R, G, B` values on the [0, 255] scale.
    pub fn rgb(&self) -> &[f32] {
        &self.rgb
    }

    /// Profile plane with values in {0, 255}.
    pub fn profile(&self) -> &[u8] {
        &self.profile
    }

    /// RGB planes rounded to 8 bits.
    pub fn rgb_image(&self) -> RgbImage {
        planar_to_rgb(self.width, self.height, &self.rgb)
    }

    /// Channel-major tensor scaled to [0, 1]; the profile plane is appended
    /// when `with_profile` is set.
    pub fn to_tensor(&self, with_profile: bool) -> Vec<f32> {
        let mut out: Vec<f32> = self.rgb.iter().map(|v| v / 255.0).collect();
        if with_profile {
            out.extend(self.profile.iter().map(|&v| f32::from(v) / 255.0));
        }
        out
    }
}

fn planar_to_rgb(width: usize, height: usize, rgb: &[f32]) -> RgbImage {
    let n = width * height;
    RgbImage::from_fn(width, height, |x, y| {
        let i = y * width + x;
        [0, 1, 2].map(|c| quantize(f64::from(rgb[c * n + i])))
    })
}

/// Model input for a plain RGB image: 3 channels, or 4 with a freshly
/// computed profile.
pub fn preprocess(img: &RgbImage, kind: Option<ProfileKind>, settings: &ProfileSettings) -> Result<Vec<f32>> {
    match kind {
        Some(kind) => Ok(FourChannelImage::new(img, &compute_profile(img, kind, settings)?)?.to_tensor(true)),
        None => Ok(FourChannelImage::new(img, &ProfileMap::blank(img.width(), img.height()))?.to_tensor(false)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformRanges {
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    /// Maximum absolute horizontal shear factor.
    pub shear: f64,
    /// Maximum absolute shift as a fraction of width and height.
    pub translation: f64,
}

impl Default for TransformRanges {
    fn default() -> Self {
        Self {
            rotation_deg: 15.0,
            shear: 0.1,
            translation: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub profile_kind: ProfileKind,
    pub profile: ProfileSettings,
    pub adv: bool,
    pub transform: bool,
    pub k_range: [f64; 2],
    pub transform_ranges: TransformRanges,
    /// Random shadow vertices are drawn from the image box grown by this
    /// fraction on every side.
    pub margin: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            profile_kind: ProfileKind::AdaThresh,
            profile: ProfileSettings::default(),
            adv: true,
            transform: true,
            k_range: [0.2, 0.7],
            transform_ranges: TransformRanges::default(),
            margin: 0.5,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.k_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid("k_range", format!("need 0 < lo <= hi <= 1, got [{lo}, {hi}]")));
        }
        let t = &self.transform_ranges;
        for (name, v) in [
            ("rotation_deg", t.rotation_deg),
            ("shear", t.shear),
            ("translation", t.translation),
            ("margin", self.margin),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, "must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// A rotation, horizontal shear and translation about the image center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub rotation_deg: f64,
    pub shear: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Affine {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            shear: 0.0,
            tx: 0.0,
            ty: 0.0,
        }
    }

    pub fn sample<R: Rng>(ranges: &TransformRanges, width: usize, height: usize, rng: &mut R) -> Self {
        let mut sym = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        Self {
            rotation_deg: sym(ranges.rotation_deg),
            shear: sym(ranges.shear),
            tx: sym(ranges.translation) * width as f64,
            ty: sym(ranges.translation) * height as f64,
        }
    }

    /// Forward map `p -> R·S·(p - c) + c + t`.
    fn matrix(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        [[c, c * self.shear - s], [s, s * self.shear + c]]
    }

    /// Source position (pixel-center coordinates) for destination `p`.
    pub fn inverse_map(&self, p: Point, width: usize, height: usize) -> Point {
        let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
        let [[a, b], [c, d]] = self.matrix();
        let det = a * d - b * c;
        let (u, v) = (p.x - cx - self.tx, p.y - cy - self.ty);
        Point::new((d * u - b * v) / det + cx, (-c * u + a * v) / det + cy)
    }

    /// Resamples every channel: bilinear on RGB, nearest on the profile.
    /// Destination pixels whose source falls outside the image are zero.
    pub fn apply(&self, img: &FourChannelImage) -> FourChannelImage {
        let (w, h) = (img.width, img.height);
        let n = w * h;
        let mut rgb = vec![0.0f32; 3 * n];
        let mut profile = vec![BACKGROUND; n];
        for y in 0..h {
            for x in 0..w {
                let src = self.inverse_map(Point::new(x as f64 + 0.5, y as f64 + 0.5), w, h);
                let (fx, fy) = (src.x - 0.5, src.y - 0.5);
                let i = y * w + x;
                for c in 0..3 {
                    rgb[c * n + i] = bilinear_zero(&img.rgb[c * n..(c + 1) * n], w, h, fx, fy);
                }
                let (nx, ny) = (fx.round(), fy.round());
                if nx >= 0.0 && ny >= 0.0 && (nx as usize) < w && (ny as usize) < h {
                    profile[i] = img.profile[ny as usize * w + nx as usize];
                }
            }
        }
        debug_assert!(profile.iter().all(|&v| v == BACKGROUND || v == FOREGROUND));
        FourChannelImage {
            width: w,
            height: h,
            rgb,
            profile,
        }
    }
}

fn bilinear_zero(plane: &[f32], w: usize, h: usize, fx: f64, fy: f64) -> f32 {
    let (x0, y0) = (fx.floor(), fy.floor());
    let (ax, ay) = (fx - x0, fy - y0);
    let at = |x: f64, y: f64| -> f64 {
        if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
            0.0
        } else {
            f64::from(plane[y as usize * w + x as usize])
        }
    };
    let top = at(x0, y0) * (1.0 - ax) + at(x0 + 1.0, y0) * ax;
    let bottom = at(x0, y0 + 1.0) * (1.0 - ax) + at(x0 + 1.0, y0 + 1.0) * ax;
    (top * (1.0 - ay) + bottom * ay) as f32
}

/// Random polygon with `vertices` corners drawn uniformly from the image box
/// grown by `margin` on every side.
pub fn random_polygon<R: Rng>(width: usize, height: usize, vertices: usize, margin: f64, rng: &mut R) -> Polygon {
    let (w, h) = (width as f64, height as f64);
    let pts = (0..vertices)
        .map(|_| {
            Point::new(
                rng.random_range(-margin * w..=(1.0 + margin) * w),
                rng.random_range(-margin * h..=(1.0 + margin) * h),
            )
        })
        .collect();
    Polygon::new(pts).expect("at least three finite vertices")
}

/// Shadow (if `adv`), profile, then transform (if `transform`).
pub fn make_example<R: Rng>(
    img: &RgbImage,
    mask: &SignMask,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<FourChannelImage> {
    cfg.validate()?;
    let (w, h) = img.dims();
    let shadowed;
    let source = if cfg.adv {
        let [lo, hi] = cfg.k_range;
        let k = if lo < hi { rng.random_range(lo..=hi) } else { lo };
        let poly = random_polygon(w, h, 3, cfg.margin, rng);
        shadowed = apply_shadow(img, &ShadowParams::new(k, poly)?, mask)?;
        &shadowed
    } else {
        if img.dims() != mask.dims() {
            return Err(Error::DimensionMismatch {
                expected: img.dims(),
                found: mask.dims(),
            });
        }
        img
    };
    let profile = compute_profile(source, cfg.profile_kind, &cfg.profile)?;
    let out = FourChannelImage::new(source, &profile)?;
    if cfg.transform {
        Ok(Affine::sample(&cfg.transform_ranges, w, h, rng).apply(&out))
    } else {
        Ok(out)
    }
}

/// One labeled model input.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub image: FourChannelImage,
    pub label: usize,
    pub adv: bool,
    pub transform: bool,
}

/// One pass over `samples` for every `(adv, transform)` combination the
/// config enables: `(false, false)` always, `(false, true)` when
/// `cfg.transform`, `(true, false)` when `cfg.adv`, and `(true, true)` when
/// both. With both flags set the output is four times the input.
pub fn quadruplicate(samples: &[Sample], cfg: &AugmentConfig) -> Result<Vec<AugmentedSample>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("dataset", "cannot augment an empty dataset"));
    }
    let combos: Vec<(bool, bool)> = [(false, false), (false, true), (true, false), (true, true)]
        .into_iter()
        .filter(|&(a, t)| (!a || cfg.adv) && (!t || cfg.transform))
        .collect();
    let mut out = Vec::with_capacity(samples.len() * combos.len());
    for (pass, &(adv, transform)) in combos.iter().enumerate() {
        let pass_cfg = AugmentConfig {
            adv,
            transform,
            ..cfg.clone()
        };
        for (i, s) in samples.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(((pass as u64) << 32) | i as u64);
            out.push(AugmentedSample {
                image: make_example(&s.image, &s.mask, &pass_cfg, &mut rng)?,
                label: s.label,
                adv,
                transform,
            });
        }
    }
    Ok(out)
}

/// Model-ready tensors; the profile plane is kept only for 4-channel models.
pub fn training_examples(samples: &[AugmentedSample], with_profile: bool) -> Vec<TrainingExample> {
    samples
        .iter()
        .map(|s| TrainingExample {
            data: s.image.to_tensor(with_profile),
            label: s.label,
        })
        .collect()
}
