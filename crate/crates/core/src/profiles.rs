//! Binary profile maps: Gaussian adaptive thresholding and Canny edges.
//!
//! Every windowed operation replicates the border pixels.

use serde::{Deserialize, Serialize};

use crate::color::{to_gray, GrayImage, RgbImage};
use crate::error::{Error, Result};

pub const FOREGROUND: u8 = 255;
pub const BACKGROUND: u8 = 0;

/// Relative size below which a threshold comparison is treated as a tie.
const TIE_TOLERANCE: f64 = 1e-12;

/// Binary map with values in {0, 255}.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProfileMap {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl ProfileMap {
    fn from_bits(width: usize, height: usize, bits: impl IntoIterator<Item = bool>) -> Self {
        let data: Vec<u8> = bits
            .into_iter()
            .map(|b| if b { FOREGROUND } else { BACKGROUND })
            .collect();
        debug_assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            data,
        }
    }

    pub fn blank(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![BACKGROUND; width * height],
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

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == FOREGROUND).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianWindow {
    size: usize,
    weights: Vec<f64>,
}

impl GaussianWindow {
    pub fn size(&self) -> usize {
        self.size
    }

    /// Row-major `size × size` weights summing to one.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.size + col]
    }
}

/// Conventional σ for a `size × size` window: `0.3·((size−1)/2 − 1) + 0.8`.
pub fn default_sigma(size: usize) -> f64 {
    0.3 * ((size as f64 - 1.0) / 2.0 - 1.0) + 0.8
}

pub fn gaussian_window(size: usize, sigma: f64) -> Result<GaussianWindow> {
    if size < 3 || size % 2 == 0 {
        return Err(Error::invalid("window", format!("size must be odd and >= 3, got {size}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("sigma", format!("must be positive, got {sigma}")));
    }
    let c = (size as f64 - 1.0) / 2.0;
    let mut weights: Vec<f64> = (0..size * size)
        .map(|idx| {
            let (i, j) = ((idx / size) as f64, (idx % size) as f64);
            (-((i - c).powi(2) + (j - c).powi(2)) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(GaussianWindow { size, weights })
}

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Adaptive threshold on an 8-bit image: foreground iff `s > T − bias`,
/// with `T` the Gaussian-weighted mean of the `window × window`
/// neighborhood.
pub fn adaptive_threshold(img: &GrayImage, window: usize, bias: f64) -> Result<ProfileMap> {
    let values: Vec<f64> = img.as_raw().iter().map(|&v| f64::from(v)).collect();
    adaptive_threshold_real(&values, img.width(), img.height(), window, bias)
}

/// [`adaptive_threshold`] on real-valued samples.
pub fn adaptive_threshold_real(
    values: &[f64],
    width: usize,
    height: usize,
    window: usize,
    bias: f64,
) -> Result<ProfileMap> {
    if values.len() != width * height {
        return Err(Error::DataLength {
            expected: width * height,
            found: values.len(),
        });
    }
    let g = gaussian_window(window, default_sigma(window))?;
    let r = (window / 2) as isize;
    let mut bits = Vec::with_capacity(values.len());
    for y in 0..height {
        for x in 0..width {
            let center = values[y * width + x];
            // T − s accumulated as Σ G·(s' − s), which is exactly zero on
            // flat neighborhoods and scales linearly with the image.
            let mut diff = 0.0;
            let mut spread = 0.0;
            for dy in -r..=r {
                let yy = clamp_index(y as isize + dy, height);
                for dx in -r..=r {
                    let xx = clamp_index(x as isize + dx, width);
                    let w = g.weight((dy + r) as usize, (dx + r) as usize);
                    let d = values[yy * width + xx] - center;
                    diff += w * d;
                    spread += w * d.abs();
                }
            }
            // Cancellations that leave only rounding residue count as ties.
            let tol = TIE_TOLERANCE * (spread + bias.abs());
            bits.push(bias - diff > tol);
        }
    }
    Ok(ProfileMap::from_bits(width, height, bits))
}

fn convolve(values: &[f64], width: usize, height: usize, kernel: &[f64], size: usize) -> Vec<f64> {
    let r = (size / 2) as isize;
    let mut out = Vec::with_capacity(values.len());
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for ky in 0..size {
                let yy = clamp_index(y as isize + ky as isize - r, height);
                for kx in 0..size {
                    let xx = clamp_index(x as isize + kx as isize - r, width);
                    acc += kernel[ky * size + kx] * values[yy * width + xx];
                }
            }
            out.push(acc);
        }
    }
    out
}

const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// Canny edge map.
///
/// Gradient magnitudes are raw 3×3 Sobel responses on the blurred 0–255
/// image, so thresholds live on that scale (a sharp step of height `h`
/// peaks near `4h` before blurring). Non-maximum suppression keeps a pixel
/// when it is strictly above its backward neighbor and at least its forward
/// neighbor along the gradient, which leaves symmetric ridges one pixel wide.
/// Hysteresis: above `t_hi` seeds an edge, `(t_lo, t_hi]` joins when
/// 8-connected to an edge.
pub fn canny_edges(img: &GrayImage, sigma_blur: f64, t_lo: f64, t_hi: f64) -> Result<ProfileMap> {
    if !(t_lo >= 0.0) || !(t_hi >= 0.0) {
        return Err(Error::invalid("threshold", "thresholds must be non-negative"));
    }
    if t_lo > t_hi {
        return Err(Error::invalid("threshold", format!("t_lo {t_lo} exceeds t_hi {t_hi}")));
    }
    let (w, h) = (img.width(), img.height());
    let g = gaussian_window(5, sigma_blur)?;
    let values: Vec<f64> = img.as_raw().iter().map(|&v| f64::from(v)).collect();
    let blurred = convolve(&values, w, h, g.weights(), 5);
    let gx = convolve(&blurred, w, h, &SOBEL_X, 3);
    let gy = convolve(&blurred, w, h, &SOBEL_Y, 3);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();

    let at = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut thin = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let m = mag[i];
            if m == 0.0 {
                continue;
            }
            let (dx, dy) = quantized_direction(gx[i], gy[i]);
            let (xi, yi) = (x as isize, y as isize);
            let forward = at(xi + dx, yi + dy);
            let backward = at(xi - dx, yi - dy);
            if m > backward && m >= forward {
                thin[i] = m;
            }
        }
    }

    let mut edge = vec![false; w * h];
    let mut stack: Vec<usize> = Vec::new();
    for (i, &m) in thin.iter().enumerate() {
        if m > t_hi {
            edge[i] = true;
            stack.push(i);
        }
    }
    while let Some(i) = stack.pop() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for ny in y - 1..=y + 1 {
            for nx in x - 1..=x + 1 {
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !edge[j] && thin[j] > t_lo {
                    edge[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    Ok(ProfileMap::from_bits(w, h, edge))
}

/// Step toward the forward neighbor for a gradient, one of 0°, 45°, 90°,
/// 135° (y axis pointing down).
fn quantized_direction(gx: f64, gy: f64) -> (isize, isize) {
    let mut angle = gy.atan2(gx).to_degrees();
    if angle < 0.0 {
        angle += 180.0;
    }
    if !(22.5..157.5).contains(&angle) {
        (1, 0)
    } else if angle < 67.5 {
        (1, 1)
    } else if angle < 112.5 {
        (0, 1)
    } else {
        (-1, 1)
    }
}

/// Median-centred hysteresis thresholds `(max(0, μ(1−σ)), min(255, μ(1+σ)))`,
/// with μ the lower median of every channel value in the image.
pub fn auto_canny_thresholds(img: &RgbImage, sigma: f64) -> (f64, f64) {
    let mut values = img.as_raw().to_vec();
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mid = (values.len() - 1) / 2;
    let (_, median, _) = values.select_nth_unstable(mid);
    let mu = f64::from(*median);
    ((mu * (1.0 - sigma)).max(0.0), (mu * (1.0 + sigma)).min(255.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileKind {
    #[serde(alias = "adathresh", alias = "threshold")]
    AdaThresh,
    Edges,
}

impl ProfileKind {
    pub fn label(self) -> &'static str {
        match self {
            ProfileKind::AdaThresh => "AdaThresh",
            ProfileKind::Edges => "Edges",
        }
    }
}

impl std::str::FromStr for ProfileKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adathresh" | "threshold" => Ok(ProfileKind::AdaThresh),
            "edges" | "canny" => Ok(ProfileKind::Edges),
            other => Err(Error::invalid("profile", format!("unknown profile kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileSettings {
    pub window: usize,
    pub bias: f64,
    /// σ of the median-based Canny thresholds.
    pub canny_sigma: f64,
    /// σ of the 5×5 Gaussian blur ahead of Canny.
    pub blur_sigma: f64,
}

impl Default for ProfileSettings {
    fn default() -> Self {
        Self {
            window: 3,
            bias: 0.0,
            canny_sigma: 0.33,
            blur_sigma: 1.4,
        }
    }
}

/// The profile the defense appends, computed from the grayscale image.
pub fn compute_profile(img: &RgbImage, kind: ProfileKind, settings: &ProfileSettings) -> Result<ProfileMap> {
    let gray = to_gray(img);
    match kind {
        ProfileKind::AdaThresh => adaptive_threshold(&gray, settings.window, settings.bias),
        ProfileKind::Edges => {
            let (lo, hi) = auto_canny_thresholds(img, settings.canny_sigma);
            canny_edges(&gray, settings.blur_sigma, lo, hi)
        }
    }
}
