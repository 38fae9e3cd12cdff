//! Low-order image moments and the normalized feature vector built from them.
//!
//! Two backends produce a [`MomentSet`]: pixel sums over a [`GrayImage`]
//! (column index = x, row index = y, origin top-left) and exact area
//! integrals over a [`ConvexPolygon`] in normalized image coordinates.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Point2, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MomentError {
    #[error("image dimensions {width}x{height} do not match {len} intensities")]
    DimensionMismatch {
        width: usize,
        height: usize,
        len: usize,
    },
    #[error("image must have non-zero width and height")]
    EmptyImage,
    #[error("intensity at index {0} is negative or not finite")]
    InvalidIntensity(usize),
    #[error("region has zero mass, no feature visible")]
    EmptyRegion,
    #[error("polygon needs at least 3 vertices and positive area")]
    DegeneratePolygon,
    #[error("second-moment area measure must be positive, got {0}")]
    NonPositiveArea(f64),
    #[error("desired depth and desired area must be positive")]
    InvalidReference,
}

/// Row-major grayscale image with non-negative real intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, MomentError> {
        if width == 0 || height == 0 {
            return Err(MomentError::EmptyImage);
        }
        if data.len() != width * height {
            return Err(MomentError::DimensionMismatch {
                width,
                height,
                len: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(MomentError::InvalidIntensity(i));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self, MomentError> {
        Self::new(width, height, vec![0.0; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Sets one pixel; negative or non-finite values are clamped to zero.
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        let v = if value.is_finite() { value.max(0.0) } else { 0.0 };
        self.data[y * self.width + x] = v;
    }

    fn nonzero(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > 0.0)
            .map(move |(i, v)| (i % self.width, i / self.width, *v))
    }
}

/// Raw moment `M_pq = sum_x sum_y x^p y^q I(x, y)` over pixel indices.
pub fn raw_moment(img: &GrayImage, p: u32, q: u32) -> f64 {
    img.nonzero()
        .map(|(x, y, v)| (x as f64).powi(p as i32) * (y as f64).powi(q as i32) * v)
        .sum()
}

/// Moments up to second order plus the centroid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentSet {
    pub m00: f64,
    pub m10: f64,
    pub m01: f64,
    pub mu20: f64,
    pub mu02: f64,
    pub mu11: f64,
    pub centroid_x: f64,
    pub centroid_y: f64,
}

impl MomentSet {
    /// Mass-normalized spread `(mu20 + mu02) / m00`, the area measure used by
    /// [`feature_vector`]. It scales with the square of the image size of the
    /// region, so its square root is inversely proportional to depth.
    pub fn area_measure(&self) -> f64 {
        (self.mu20 + self.mu02) / self.m00
    }

    /// Principal-axis orientation in `(-pi/2, pi/2]`.
    pub fn orientation(&self) -> f64 {
        0.5 * (2.0 * self.mu11).atan2(self.mu20 - self.mu02)
    }
}

/// Central moments of a grayscale image about its intensity centroid.
///
/// Second-order sums are accumulated in coordinates local to the bounding box
/// of the non-zero pixels, so integer translations leave them bit-identical.
pub fn central_moments(img: &GrayImage) -> Result<MomentSet, MomentError> {
    let m00 = raw_moment(img, 0, 0);
    if m00 <= 0.0 {
        return Err(MomentError::EmptyRegion);
    }
    let m10 = raw_moment(img, 1, 0);
    let m01 = raw_moment(img, 0, 1);

    let (x0, y0) = img
        .nonzero()
        .fold((usize::MAX, usize::MAX), |(ax, ay), (x, y, _)| {
            (ax.min(x), ay.min(y))
        });
    let (mut lx, mut ly) = (0.0, 0.0);
    for (x, y, v) in img.nonzero() {
        lx += (x - x0) as f64 * v;
        ly += (y - y0) as f64 * v;
    }
    let (cx, cy) = (lx / m00, ly / m00);
    let (mut mu20, mut mu02, mut mu11) = (0.0, 0.0, 0.0);
    for (x, y, v) in img.nonzero() {
        let dx = (x - x0) as f64 - cx;
        let dy = (y - y0) as f64 - cy;
        mu20 += dx * dx * v;
        mu02 += dy * dy * v;
        mu11 += dx * dy * v;
    }

    Ok(MomentSet {
        m00,
        m10,
        m01,
        mu20,
        mu02,
        mu11,
        centroid_x: m10 / m00,
        centroid_y: m01 / m00,
    })
}

/// Simple polygon stored counter-clockwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct ConvexPolygon {
    vertices: Vec<Point2<f64>>,
}

impl ConvexPolygon {
    /// Builds a polygon from vertices in either orientation; clockwise input is
    /// reversed.
    pub fn new(mut vertices: Vec<Point2<f64>>) -> Result<Self, MomentError> {
        if vertices.len() < 3 || vertices.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(MomentError::DegeneratePolygon);
        }
        let area = signed_area(&vertices);
        if area < 0.0 {
            vertices.reverse();
        }
        if area.abs() <= f64::EPSILON {
            return Err(MomentError::DegeneratePolygon);
        }
        Ok(Self { vertices })
    }

    /// Axis-aligned rectangle centered on `(cx, cy)`.
    pub fn rectangle(cx: f64, cy: f64, width: f64, height: f64) -> Result<Self, MomentError> {
        let (hw, hh) = (0.5 * width, 0.5 * height);
        Self::new(vec![
            Point2::new(cx - hw, cy - hh),
            Point2::new(cx + hw, cy - hh),
            Point2::new(cx + hw, cy + hh),
            Point2::new(cx - hw, cy + hh),
        ])
    }

    pub fn vertices(&self) -> &[Point2<f64>] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices)
    }

    /// Applies `p -> s * R(angle) * p + (tx, ty)` to every vertex.
    pub fn transformed(&self, scale: f64, angle: f64, tx: f64, ty: f64) -> Result<Self, MomentError> {
        let (s, c) = angle.sin_cos();
        Self::new(
            self.vertices
                .iter()
                .map(|p| {
                    Point2::new(
                        scale * (c * p.x - s * p.y) + tx,
                        scale * (s * p.x + c * p.y) + ty,
                    )
                })
                .collect(),
        )
    }

    /// Rotation about the polygon's area centroid.
    pub fn rotated_about_centroid(&self, angle: f64) -> Result<Self, MomentError> {
        let m = polygon_moments(self)?;
        let centered = self.transformed(1.0, 0.0, -m.centroid_x, -m.centroid_y)?;
        centered.transformed(1.0, angle, m.centroid_x, m.centroid_y)
    }

    /// Point-in-polygon test for convex polygons (boundary counts as inside).
    pub fn contains(&self, p: Point2<f64>) -> bool {
        let n = self.vertices.len();
        (0..n).all(|i| {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x) >= 0.0
        })
    }
}

impl TryFrom<Vec<[f64; 2]>> for ConvexPolygon {
    type Error = MomentError;

    fn try_from(v: Vec<[f64; 2]>) -> Result<Self, Self::Error> {
        Self::new(v.into_iter().map(|[x, y]| Point2::new(x, y)).collect())
    }
}

impl From<ConvexPolygon> for Vec<[f64; 2]> {
    fn from(p: ConvexPolygon) -> Self {
        p.vertices.iter().map(|v| [v.x, v.y]).collect()
    }
}

fn signed_area(v: &[Point2<f64>]) -> f64 {
    let n = v.len();
    0.5 * (0..n)
        .map(|i| {
            let (a, b) = (v[i], v[(i + 1) % n]);
            a.x * b.y - b.x * a.y
        })
        .sum::<f64>()
}

/// Exact area-integral moments of a uniform unit-density polygon (Green's
/// theorem closed forms).
pub fn polygon_moments(poly: &ConvexPolygon) -> Result<MomentSet, MomentError> {
    let v = &poly.vertices;
    let n = v.len();
    // Integrate about the vertex mean to keep the second-order sums well conditioned.
    let ox = v.iter().map(|p| p.x).sum::<f64>() / n as f64;
    let oy = v.iter().map(|p| p.y).sum::<f64>() / n as f64;

    let (mut a, mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        let (x0, y0) = (v[i].x - ox, v[i].y - oy);
        let (x1, y1) = (v[(i + 1) % n].x - ox, v[(i + 1) % n].y - oy);
        let cross = x0 * y1 - x1 * y0;
        a += cross;
        sx += (x0 + x1) * cross;
        sy += (y0 + y1) * cross;
        sxx += (x0 * x0 + x0 * x1 + x1 * x1) * cross;
        syy += (y0 * y0 + y0 * y1 + y1 * y1) * cross;
        sxy += (x0 * y1 + 2.0 * x0 * y0 + 2.0 * x1 * y1 + x1 * y0) * cross;
    }
    let m00 = a / 2.0;
    if m00 <= 0.0 || !m00.is_finite() {
        return Err(MomentError::DegeneratePolygon);
    }
    let (lm10, lm01) = (sx / 6.0, sy / 6.0);
    let (lm20, lm02, lm11) = (sxx / 12.0, syy / 12.0, sxy / 24.0);
    let (lcx, lcy) = (lm10 / m00, lm01 / m00);

    let centroid_x = lcx + ox;
    let centroid_y = lcy + oy;
    Ok(MomentSet {
        m00,
        m10: centroid_x * m00,
        m01: centroid_y * m00,
        mu20: (lm20 - lcx * lm10).max(0.0),
        mu02: (lm02 - lcy * lm01).max(0.0),
        mu11: lm11 - lcx * lm01,
        centroid_x,
        centroid_y,
    })
}

/// Normalized visual features `[x_n, y_n, a_n, theta]`.
///
/// `x_n`, `y_n` and `a_n` carry length units: for a target plane parallel to
/// the image, `a_n` equals the depth and `(x_n, y_n)` the metric offset of the
/// target centroid in the image axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub x_n: f64,
    pub y_n: f64,
    pub a_n: f64,
    pub theta: f64,
}

impl FeatureVector {
    pub fn new(x_n: f64, y_n: f64, a_n: f64, theta: f64) -> Self {
        Self {
            x_n,
            y_n,
            a_n,
            theta,
        }
    }

    pub fn as_vector(&self) -> Vector4<f64> {
        Vector4::new(self.x_n, self.y_n, self.a_n, self.theta)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    /// Error `self - reference` with the orientation difference wrapped into
    /// `(-pi/2, pi/2]`, since the principal axis is only defined modulo pi.
    pub fn error_from(&self, reference: &FeatureVector) -> Vector4<f64> {
        Vector4::new(
            self.x_n - reference.x_n,
            self.y_n - reference.y_n,
            self.a_n - reference.a_n,
            wrap_half_turn(self.theta - reference.theta),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.as_vector().iter().all(|v| v.is_finite())
    }
}

/// Wraps an angle into `(-pi/2, pi/2]`.
pub fn wrap_half_turn(angle: f64) -> f64 {
    let mut a = angle.rem_euclid(PI);
    if a > FRAC_PI_2 {
        a -= PI;
    }
    a
}

/// Derives `[x_n, y_n, a_n, theta]` from a moment set.
///
/// `a_n = z_star * sqrt(a_star / a)` with `a` = [`MomentSet::area_measure`],
/// `x_n = a_n * centroid_x`, `y_n = a_n * centroid_y`, and `theta` the
/// principal-axis orientation.
pub fn feature_vector(moms: &MomentSet, z_star: f64, a_star: f64) -> Result<FeatureVector, MomentError> {
    if moms.m00 <= 0.0 {
        return Err(MomentError::EmptyRegion);
    }
    if !(z_star > 0.0 && a_star > 0.0) {
        return Err(MomentError::InvalidReference);
    }
    let a = moms.area_measure();
    if !(a > 0.0) {
        return Err(MomentError::NonPositiveArea(a));
    }
    let a_n = z_star * (a_star / a).sqrt();
    Ok(FeatureVector {
        x_n: a_n * moms.centroid_x,
        y_n: a_n * moms.centroid_y,
        a_n,
        theta: moms.orientation(),
    })
}

/// Rasterizes a polygon onto a `width x height` binary image where pixel
/// `(i, j)` samples the point `(x_min + (i + 0.5) * px, y_min + (j + 0.5) * px)`.
pub fn rasterize(
    poly: &ConvexPolygon,
    width: usize,
    height: usize,
    x_min: f64,
    y_min: f64,
    pixel: f64,
) -> Result<GrayImage, MomentError> {
    let mut img = GrayImage::zeros(width, height)?;
    for j in 0..height {
        for i in 0..width {
            let p = Point2::new(x_min + (i as f64 + 0.5) * pixel, y_min + (j as f64 + 0.5) * pixel);
            if poly.contains(p) {
                img.set(i, j, 1.0);
            }
        }
    }
    Ok(img)
}

/// Converts pixel-index moments from a [`rasterize`]d image back to the
/// continuous coordinates of the source polygon.
pub fn pixel_to_continuous(moms: &MomentSet, x_min: f64, y_min: f64, pixel: f64) -> MomentSet {
    let cx = x_min + (moms.centroid_x + 0.5) * pixel;
    let cy = y_min + (moms.centroid_y + 0.5) * pixel;
    let area = moms.m00 * pixel * pixel;
    let s4 = pixel.powi(4);
    MomentSet {
        m00: area,
        m10: cx * area,
        m01: cy * area,
        mu20: moms.mu20 * s4,
        mu02: moms.mu02 * s4,
        mu11: moms.mu11 * s4,
        centroid_x: cx,
        centroid_y: cy,
    }
}
