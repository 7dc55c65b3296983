//! Sample loading and a synthetic road-sign generator.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::color::{quantize, RgbImage};
use crate::error::{Error, Result};
use crate::geometry::{Point, Polygon, SignMask};

/// Canonical side length of every sample.
pub const IMAGE_SIZE: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub label: usize,
    pub mask: SignMask,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: RgbImage, label: usize, mask: SignMask) -> Result<Self> {
        if image.dims() != mask.dims() {
            return Err(Error::DimensionMismatch {
                expected: image.dims(),
                found: mask.dims(),
            });
        }
        Ok(Self {
            id: id.into(),
            image,
            label,
            mask,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn class_count(&self) -> usize {
        self.train
            .iter()
            .chain(&self.test)
            .map(|s| s.label + 1)
            .max()
            .unwrap_or(0)
    }
}

// ---------------------------------------------------------------------------
// Resampling

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(img: &RgbImage, width: usize, height: usize) -> RgbImage {
    let (sw, sh) = img.dims();
    let sx = sw as f64 / width as f64;
    let sy = sh as f64 / height as f64;
    RgbImage::from_fn(width, height, |x, y| {
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f64);
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f64);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(sw - 1), (y0 + 1).min(sh - 1));
        let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
        let (p00, p10, p01, p11) = (img.pixel(x0, y0), img.pixel(x1, y0), img.pixel(x0, y1), img.pixel(x1, y1));
        let mut out = [0u8; 3];
        for c in 0..3 {
            let top = f64::from(p00[c]) * (1.0 - ax) + f64::from(p10[c]) * ax;
            let bottom = f64::from(p01[c]) * (1.0 - ax) + f64::from(p11[c]) * ax;
            out[c] = quantize(top * (1.0 - ay) + bottom * ay);
        }
        out
    })
}

fn resize_mask_nearest(mask: &SignMask, width: usize, height: usize) -> SignMask {
    let (sw, sh) = mask.dims();
    SignMask::from_fn(width, height, |x, y| {
        let sx = (((x as f64 + 0.5) * sw as f64 / width as f64) as usize).min(sw - 1);
        let sy = (((y as f64 + 0.5) * sh as f64 / height as f64) as usize).min(sh - 1);
        mask.get(sx, sy)
    })
}

// ---------------------------------------------------------------------------
// Image files

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_rgb8();
    let (w, h) = img.dimensions();
    RgbImage::new(w as usize, h as usize, img.into_raw())
}

pub fn write_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, img.as_raw().to_vec())
        .expect("buffer length matches dimensions");
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_gray(width: usize, height: usize, data: &[u8], path: &Path) -> Result<()> {
    let buf =
        image::GrayImage::from_raw(width as u32, height as u32, data.to_vec()).expect("buffer length matches dimensions");
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn read_mask(path: &Path) -> Result<SignMask> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_luma8();
    let (w, h) = img.dimensions();
    SignMask::new(w as usize, h as usize, img.into_raw().into_iter().map(|v| v > 127).collect())
}

// ---------------------------------------------------------------------------
// Manifest loading

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub relative_path: String,
    pub label: usize,
    #[serde(default, deserialize_with = "empty_as_none")]
    pub mask_path: Option<String>,
    pub split: Split,
}

fn empty_as_none<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<String>, D::Error> {
    let v: Option<String> = Option::deserialize(d)?;
    Ok(v.filter(|s| !s.trim().is_empty()))
}

/// Reads a manifest CSV (`id,relative_path,label,mask_path,split`) and the
/// images it lists, resized to 32×32. Rows without a mask get a full mask.
pub fn load_dataset(root: &Path, manifest: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(manifest)?;
    let mut out = Dataset::default();
    for (i, record) in reader.deserialize::<ManifestRow>().enumerate() {
        let row_no = i + 1;
        let row = record.map_err(|e| Error::Manifest {
            row: row_no,
            message: e.to_string(),
        })?;
        let path = root.join(&row.relative_path);
        if !path.is_file() {
            return Err(Error::Manifest {
                row: row_no,
                message: format!("missing image file {}", path.display()),
            });
        }
        let image = resize_bilinear(&read_rgb(&path)?, IMAGE_SIZE, IMAGE_SIZE);
        let mask = match &row.mask_path {
            Some(m) => {
                let mpath = root.join(m);
                if !mpath.is_file() {
                    return Err(Error::Manifest {
                        row: row_no,
                        message: format!("missing mask file {}", mpath.display()),
                    });
                }
                resize_mask_nearest(&read_mask(&mpath)?, IMAGE_SIZE, IMAGE_SIZE)
            }
            None => SignMask::full(IMAGE_SIZE, IMAGE_SIZE),
        };
        let sample = Sample::new(row.id, image, row.label, mask)?;
        match row.split {
            Split::Train => out.train.push(sample),
            Split::Test => out.test.push(sample),
        }
    }
    Ok(out)
}

/// Writes images, mask sidecars and `manifest.csv` under `root`.
pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<PathBuf> {
    let images = root.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let manifest = root.join("manifest.csv");
    let mut writer = csv::Writer::from_path(&manifest)?;
    for (split, samples) in [(Split::Train, &dataset.train), (Split::Test, &dataset.test)] {
        for s in samples {
            let rel = format!("images/{}.png", s.id);
            let mrel = format!("images/{}_mask.png", s.id);
            write_rgb(&s.image, &root.join(&rel))?;
            let bits: Vec<u8> = s.mask.as_slice().iter().map(|&b| if b { 255 } else { 0 }).collect();
            write_gray(s.mask.width(), s.mask.height(), &bits, &root.join(&mrel))?;
            writer.serialize(ManifestRow {
                id: s.id.clone(),
                relative_path: rel,
                label: s.label,
                mask_path: Some(mrel),
                split,
            })?;
        }
    }
    writer.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Synthetic signs

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignShape {
    Circle,
    Triangle,
    Octagon,
    Square,
}

impl SignShape {
    pub const ALL: [SignShape; 4] = [SignShape::Circle, SignShape::Triangle, SignShape::Octagon, SignShape::Square];

    /// Outline of the shape with circumradius `r` around `(cx, cy)`, or `None`
    /// for the circle.
    fn polygon(self, cx: f64, cy: f64, r: f64) -> Option<Polygon> {
        let (n, phase) = match self {
            SignShape::Circle => return None,
            SignShape::Triangle => (3, -PI / 2.0),
            SignShape::Octagon => (8, PI / 8.0),
            SignShape::Square => (4, PI / 4.0),
        };
        let vertices = (0..n)
            .map(|i| {
                let a = phase + 2.0 * PI * i as f64 / n as f64;
                Point::new(cx + r * a.cos(), cy + r * a.sin())
            })
            .collect();
        Some(Polygon::new(vertices).expect("regular polygon is valid"))
    }
}

/// A sign outline that can answer point containment.
#[derive(Debug, Clone, PartialEq)]
pub struct SignOutline {
    shape: SignShape,
    cx: f64,
    cy: f64,
    r: f64,
    polygon: Option<Polygon>,
}

impl SignOutline {
    pub fn new(shape: SignShape, cx: f64, cy: f64, r: f64) -> Self {
        Self {
            shape,
            cx,
            cy,
            r,
            polygon: shape.polygon(cx, cy, r),
        }
    }

    pub fn shape(&self) -> SignShape {
        self.shape
    }

    pub fn center(&self) -> Point {
        Point::new(self.cx, self.cy)
    }

    /// Circumradius.
    pub fn radius(&self) -> f64 {
        self.r
    }

    pub fn contains(&self, p: Point) -> bool {
        match &self.polygon {
            None => (p.x - self.cx).powi(2) + (p.y - self.cy).powi(2) <= self.r * self.r,
            Some(poly) => poly.contains(p),
        }
    }

    fn shrunk(&self, factor: f64) -> Self {
        Self::new(self.shape, self.cx, self.cy, self.r * factor)
    }

    /// Pixel (x, y) is sampled at its center (x + 0.5, y + 0.5).
    pub fn mask(&self, width: usize, height: usize) -> SignMask {
        SignMask::from_fn(width, height, |x, y| self.contains(center(x, y)))
    }
}

fn center(x: usize, y: usize) -> Point {
    Point::new(x as f64 + 0.5, y as f64 + 0.5)
}

const GLYPHS: [[u8; 7]; 10] = [
    [0x0e, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0e],
    [0x04, 0x0c, 0x04, 0x04, 0x04, 0x04, 0x0e],
    [0x0e, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1f],
    [0x1f, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0e],
    [0x02, 0x06, 0x0a, 0x12, 0x1f, 0x02, 0x02],
    [0x1f, 0x10, 0x1e, 0x01, 0x01, 0x11, 0x0e],
    [0x06, 0x08, 0x10, 0x1e, 0x11, 0x11, 0x0e],
    [0x1f, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
    [0x0e, 0x11, 0x11, 0x0e, 0x11, 0x11, 0x0e],
    [0x0e, 0x11, 0x11, 0x0f, 0x01, 0x02, 0x0c],
];

/// Digit drawn inside the sign for the two glyph families.
const CLASS_DIGITS: [u8; 2] = [2, 7];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    /// Up to 8: every shape paired with each of two digit glyphs.
    pub class_count: usize,
    pub samples_per_class: usize,
    /// Background channels are drawn uniformly from this range.
    pub background: (u8, u8),
    /// Per-pixel uniform jitter amplitude added to every channel.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            class_count: 8,
            samples_per_class: 63,
            background: (60, 200),
            noise: 6.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.class_count) {
            return Err(Error::invalid("class_count", "must lie in 2..=8"));
        }
        if self.samples_per_class == 0 {
            return Err(Error::invalid("samples_per_class", "must be positive"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("noise", "must be finite and non-negative"));
        }
        if self.background.0 > self.background.1 {
            return Err(Error::invalid("background", "lower bound exceeds upper bound"));
        }
        Ok(())
    }

    pub fn class_shape(class: usize) -> SignShape {
        SignShape::ALL[class % 4]
    }

    pub fn class_digit(class: usize) -> u8 {
        CLASS_DIGITS[class / 4]
    }
}

/// One rendered sign and the outline it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedSign {
    pub image: RgbImage,
    pub outline: SignOutline,
}

pub fn render_sign<R: Rng>(class: usize, background: (u8, u8), noise: f64, rng: &mut R) -> RenderedSign {
    let size = IMAGE_SIZE as f64;
    let shape = SyntheticSpec::class_shape(class);
    let digit = SyntheticSpec::class_digit(class);
    let r = rng.random_range(11.0..14.0);
    let cx = size / 2.0 + rng.random_range(-1.5..1.5);
    let cy = size / 2.0 + rng.random_range(-1.5..1.5);
    let outline = SignOutline::new(shape, cx, cy, r);
    let inner = outline.shrunk(0.78);

    let bg = [(); 3].map(|_| f64::from(rng.random_range(background.0..=background.1)));
    let rim = [rng.random_range(170.0..230.0), rng.random_range(10.0..50.0), rng.random_range(20.0..60.0)];
    let face = rng.random_range(215.0..250.0);
    let ink = rng.random_range(10.0..45.0);

    // Glyph cell size so the 5×7 digit spans about 0.9 r vertically (0.6 r
    // in the triangle, whose inscribed circle is half the circumradius).
    let (cell, drop) = match shape {
        SignShape::Triangle => (0.6 * r / 7.0, 0.2 * r),
        SignShape::Square => (0.75 * r / 7.0, 0.0),
        _ => (0.9 * r / 7.0, 0.0),
    };
    let (gx0, gy0) = (cx - 2.5 * cell, cy - 3.5 * cell + drop);

    let image = RgbImage::from_fn(IMAGE_SIZE, IMAGE_SIZE, |x, y| {
        let p = center(x, y);
        let base = if inner.contains(p) {
            let gx = ((p.x - gx0) / cell).floor();
            let gy = ((p.y - gy0) / cell).floor();
            let on = (0.0..5.0).contains(&gx)
                && (0.0..7.0).contains(&gy)
                && GLYPHS[digit as usize][gy as usize] & (0x10 >> gx as u32) != 0;
            if on {
                [ink; 3]
            } else {
                [face; 3]
            }
        } else if outline.contains(p) {
            rim
        } else {
            bg
        };
        base.map(|v| {
            if noise > 0.0 {
                quantize(v + rng.random_range(-noise..noise))
            } else {
                quantize(v)
            }
        })
    });
    RenderedSign { image, outline }
}

/// Renders `samples_per_class` signs per class; the first 80% of each class
/// (rounded down) go to the training split.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_train = spec.samples_per_class * 4 / 5;
    let mut out = Dataset::default();
    for i in 0..spec.samples_per_class {
        for class in 0..spec.class_count {
            let sign = render_sign(class, spec.background, spec.noise, &mut rng);
            let mask = sign.outline.mask(IMAGE_SIZE, IMAGE_SIZE);
            let sample = Sample::new(format!("c{class}_{i:04}"), sign.image, class, mask)?;
            if i < n_train {
                out.train.push(sample);
            } else {
                out.test.push(sample);
            }
        }
    }
    Ok(out)
}
