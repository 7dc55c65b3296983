//! sRGB / CIELAB conversion, luminance, and the shadow perturbation bound.
//!
//! All conversions use sRGB primaries with the D65 white point and the
//! CIE 1976 L*a*b* formulas (two-piece `f(t)`). 8-bit channels are produced
//! with round-half-away-from-zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// D65 reference white in XYZ, Y normalized to 1.
pub const WHITE_D65: [f64; 3] = [0.95047, 1.0, 1.08883];

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

/// Linear sRGB from XYZ (D65).
pub const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
];

const DELTA: f64 = 6.0 / 29.0;

/// Largest slope of the sRGB companding curve on [0, 1] (its linear toe).
const MAX_GAMMA_SLOPE: f64 = 12.92;

/// Largest slope of `f^{-1}(t)` for `t <= 1`, which covers every in-gamut
/// color and every color reached by scaling L down.
const MAX_FINV_SLOPE: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        let expected = width * height * 3;
        if data.len() != expected {
            return Err(Error::DataLength {
                expected,
                found: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Interleaved RGB bytes, row-major.
    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabImage {
    width: usize,
    height: usize,
    data: Vec<[f64; 3]>,
}

impl LabImage {
    /// Builds a LAB image; L is clamped to [0, 100].
    pub fn new(width: usize, height: usize, mut data: Vec<[f64; 3]>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DataLength {
                expected: width * height,
                found: data.len(),
            });
        }
        for p in &mut data {
            p[0] = p[0].clamp(0.0, 100.0);
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.data
    }

    /// Scales the L channel of one pixel, keeping it inside [0, 100].
    pub fn scale_lightness(&mut self, x: usize, y: usize, factor: f64) {
        let p = &mut self.data[y * self.width + x];
        p[0] = (p[0] * factor).clamp(0.0, 100.0);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DataLength {
                expected: width * height,
                found: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }
}

/// Rounds half away from zero and saturates into a byte.
pub fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Converts one 8-bit sRGB pixel to L*a*b*.
pub fn pixel_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    let lin = rgb.map(|c| srgb_to_linear(f64::from(c) / 255.0));
    let xyz = mat_vec(&RGB_TO_XYZ, lin);
    let fx = lab_f(xyz[0] / WHITE_D65[0]);
    let fy = lab_f(xyz[1] / WHITE_D65[1]);
    let fz = lab_f(xyz[2] / WHITE_D65[2]);
    [
        (116.0 * fy - 16.0).clamp(0.0, 100.0),
        500.0 * (fx - fy),
        200.0 * (fy - fz),
    ]
}

/// Converts one L*a*b* pixel to real-valued sRGB in [0, 255].
///
/// The second value reports whether any linear channel fell outside the
/// gamut and was clamped.
pub fn pixel_to_rgb_f64(lab: [f64; 3]) -> ([f64; 3], bool) {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [
        WHITE_D65[0] * lab_f_inv(fx),
        WHITE_D65[1] * lab_f_inv(fy),
        WHITE_D65[2] * lab_f_inv(fz),
    ];
    let lin = mat_vec(&XYZ_TO_RGB, xyz);
    let clamped = lin.iter().any(|&c| !(-1e-6..=1.0 + 1e-6).contains(&c));
    (lin.map(|c| 255.0 * linear_to_srgb(c.clamp(0.0, 1.0))), clamped)
}

pub fn pixel_to_rgb(lab: [f64; 3]) -> [u8; 3] {
    pixel_to_rgb_f64(lab).0.map(quantize)
}

pub fn rgb_to_lab(img: &RgbImage) -> LabImage {
    LabImage {
        width: img.width,
        height: img.height,
        data: img.pixels().map(pixel_to_lab).collect(),
    }
}

pub fn lab_to_rgb(img: &LabImage) -> RgbImage {
    lab_to_rgb_with_stats(img).0
}

/// Like [`lab_to_rgb`], also returning how many pixels needed gamut clamping.
pub fn lab_to_rgb_with_stats(img: &LabImage) -> (RgbImage, usize) {
    let mut clamped = 0;
    let mut data = Vec::with_capacity(img.data.len() * 3);
    for &p in &img.data {
        let (rgb, c) = pixel_to_rgb_f64(p);
        clamped += usize::from(c);
        data.extend(rgb.map(quantize));
    }
    let out = RgbImage {
        width: img.width,
        height: img.height,
        data,
    };
    (out, clamped)
}

/// Luma with 0.299/0.587/0.114 weights on real-valued channels.
pub fn luma(rgb: [f64; 3]) -> u8 {
    quantize(0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2])
}

pub fn to_gray(img: &RgbImage) -> GrayImage {
    GrayImage {
        width: img.width,
        height: img.height,
        data: img.pixels().map(|p| luma(p.map(f64::from))).collect(),
    }
}

/// Mean L* of the image on the 8-bit scale (L* · 255 / 100).
pub fn mean_l_channel(img: &RgbImage) -> f64 {
    let n = img.width * img.height;
    if n == 0 {
        return 0.0;
    }
    let sum: f64 = img.pixels().map(|p| pixel_to_lab(p)[0]).sum();
    sum * 255.0 / 100.0 / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormOrder {
    L2,
    Inf,
}

impl std::str::FromStr for NormOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2" | "l2" => Ok(NormOrder::L2),
            "inf" | "linf" => Ok(NormOrder::Inf),
            other => Err(Error::invalid("norm", format!("unknown norm order `{other}`"))),
        }
    }
}

/// Entrywise Lipschitz bound of the LAB -> sRGB map, output in [0, 1] units
/// per LAB unit.
///
/// `|XYZ_TO_RGB| · diag(white) · 3 · |J_f|`, scaled by the steepest slope of
/// the sRGB curve, where `J_f` is the constant Jacobian of
/// `(L, a, b) -> (f_x, f_y, f_z)`. Every factor bounds the magnitude of the
/// corresponding stage's derivative, so `|Δrgb_c| <= Σ_j M[c][j] |Δlab_j|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabToRgbMatrix {
    pub m: [[f64; 3]; 3],
}

impl LabToRgbMatrix {
    pub fn srgb_d65() -> Self {
        let jf = [
            [1.0 / 116.0, 1.0 / 500.0, 0.0],
            [1.0 / 116.0, 0.0, 0.0],
            [1.0 / 116.0, 0.0, 1.0 / 200.0],
        ];
        let mut m = [[0.0; 3]; 3];
        for (c, row) in m.iter_mut().enumerate() {
            for (j, out) in row.iter_mut().enumerate() {
                *out = (0..3)
                    .map(|i| {
                        XYZ_TO_RGB[c][i].abs() * WHITE_D65[i] * MAX_FINV_SLOPE * jf[i][j]
                    })
                    .sum::<f64>()
                    * MAX_GAMMA_SLOPE;
            }
        }
        Self { m }
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        self.m
            .iter()
            .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Largest singular value, from the dominant eigenvalue of `MᵀM`.
    pub fn norm_2(&self) -> f64 {
        let m = &self.m;
        let mut mtm = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                mtm[i][j] = (0..3).map(|k| m[k][i] * m[k][j]).sum();
            }
        }
        let mut v = [1.0, 1.0, 1.0];
        let mut lambda = 0.0;
        for _ in 0..500 {
            let w = mat_vec(&mtm, v);
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            v = w.map(|x| x / norm);
            if (norm - lambda).abs() <= 1e-15 * norm {
                lambda = norm;
                break;
            }
            lambda = norm;
        }
        lambda.sqrt()
    }

    pub fn norm(&self, p: NormOrder) -> f64 {
        match p {
            NormOrder::L2 => self.norm_2(),
            NormOrder::Inf => self.norm_inf(),
        }
    }
}

/// Upper bound `‖M‖_p · 100 · |k − 1|` on the per-pixel RGB change caused by
/// a shadow of strength `k`, in [0, 1] pixel units.
pub fn epsilon_bound(k: f64, p: NormOrder) -> Result<f64> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::invalid("k", format!("shadow strength must lie in (0, 1], got {k}")));
    }
    Ok(LabToRgbMatrix::srgb_d65().norm(p) * 100.0 * (k - 1.0).abs())
}

/// Perturbation size between two images in [0, 1] units. Each pixel's
/// channel difference is measured with the ℓp vector norm; `Inf` takes the
/// largest pixel, `L2` sums the pixels in quadrature.
pub fn perturbation_norm(a: &RgbImage, b: &RgbImage, p: NormOrder) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch {
            expected: a.dims(),
            found: b.dims(),
        });
    }
    let per_pixel = a.pixels().zip(b.pixels()).map(|(pa, pb)| {
        let d = [0, 1, 2].map(|c| (f64::from(pa[c]) - f64::from(pb[c])).abs() / 255.0);
        match p {
            NormOrder::L2 => d.iter().map(|v| v * v).sum::<f64>(),
            NormOrder::Inf => d.iter().copied().fold(0.0, f64::max),
        }
    });
    Ok(match p {
        NormOrder::L2 => per_pixel.sum::<f64>().sqrt(),
        NormOrder::Inf => per_pixel.fold(0.0, f64::max),
    })
}
