//! Shadow polygons and the binary masks they rasterize to.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Ordered vertex list in image coordinates (x to the right, y down, pixel
/// `(i, j)` covering `[i, i+1) × [j, j+1)`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    vertices: Vec<Point>,
}

impl Polygon {
    pub fn new(vertices: Vec<Point>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::invalid(
                "vertices",
                format!("a polygon needs at least 3 vertices, got {}", vertices.len()),
            ));
        }
        if vertices.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::invalid("vertices", "non-finite coordinate"));
        }
        Ok(Self { vertices })
    }

    /// Builds a polygon from a flat `[x0, y0, x1, y1, ...]` slice.
    pub fn from_flat(coords: &[f64]) -> Result<Self> {
        if coords.len() % 2 != 0 {
            return Err(Error::invalid("coords", "odd number of coordinates"));
        }
        Self::new(coords.chunks_exact(2).map(|c| Point::new(c[0], c[1])).collect())
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    /// Even-odd containment test.
    pub fn contains(&self, p: Point) -> bool {
        let v = &self.vertices;
        let mut inside = false;
        let mut j = v.len() - 1;
        for i in 0..v.len() {
            let (a, b) = (v[i], v[j]);
            if (a.y > p.y) != (b.y > p.y) {
                let x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
                if p.x < x_cross {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }

    /// Whether every vertex lies within the image box grown by `margin`
    /// times its extent on each side.
    pub fn within_extended_bounds(&self, width: usize, height: usize, margin: f64) -> bool {
        let (w, h) = (width as f64, height as f64);
        self.vertices.iter().all(|p| {
            p.x >= -margin * w && p.x <= (1.0 + margin) * w && p.y >= -margin * h && p.y <= (1.0 + margin) * h
        })
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            vertices: self.vertices.iter().map(|p| Point::new(p.x + dx, p.y + dy)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SignMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl SignMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
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

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
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

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Marks every pixel whose center lies inside `poly`.
pub fn rasterize(poly: &Polygon, width: usize, height: usize) -> SignMask {
    let v = poly.vertices();
    let min_y = v.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let max_y = v.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
    let mut data = vec![false; width * height];
    let mut crossings = Vec::with_capacity(v.len());
    for row in 0..height {
        let cy = row as f64 + 0.5;
        if cy < min_y || cy > max_y {
            continue;
        }
        // Scanline: collect edge crossings of the row's center line, then
        // fill between pairs. Matches `Polygon::contains` at pixel centers.
        crossings.clear();
        let mut j = v.len() - 1;
        for i in 0..v.len() {
            let (a, b) = (v[i], v[j]);
            if (a.y > cy) != (b.y > cy) {
                crossings.push(a.x + (cy - a.y) * (b.x - a.x) / (b.y - a.y));
            }
            j = i;
        }
        crossings.sort_by(f64::total_cmp);
        for pair in crossings.chunks_exact(2) {
            // centers cx with pair[0] <= cx < pair[1]
            let first = (pair[0] - 0.5).ceil().max(0.0);
            let last = (pair[1] - 0.5).ceil().min(width as f64);
            let (first, last) = (first as usize, last.max(0.0) as usize);
            for col in first..last.max(first) {
                data[row * width + col] = true;
            }
        }
    }
    SignMask {
        width,
        height,
        data,
    }
}

pub fn intersect(a: &SignMask, b: &SignMask) -> Result<SignMask> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch {
            expected: a.dims(),
            found: b.dims(),
        });
    }
    Ok(SignMask {
        width: a.width,
        height: a.height,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| x && y).collect(),
    })
}
