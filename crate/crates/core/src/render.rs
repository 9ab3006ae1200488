//! Lambertian hillshade of elevation grids.

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Sun position: azimuth clockwise from north, altitude above the horizon,
/// both in degrees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sun {
    pub azimuth: f64,
    pub altitude: f64,
}

impl Default for Sun {
    fn default() -> Self {
        Self {
            azimuth: 315.0,
            altitude: 45.0,
        }
    }
}

impl Sun {
    /// Unit vector in (east, north, up).
    pub fn direction(&self) -> [f64; 3] {
        let (az, alt) = (self.azimuth.to_radians(), self.altitude.to_radians());
        [az.sin() * alt.cos(), az.cos() * alt.cos(), alt.sin()]
    }
}

/// Unit surface normals from central differences (one-sided at borders).
/// Rows run southward, columns eastward.
pub fn surface_normals(dem: &[f64], h: usize, w: usize, pixel_size: f64) -> Vec<[f64; 3]> {
    let at = |r: usize, c: usize| dem[r * w + c];
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (c0, c1) = (c.saturating_sub(1), (c + 1).min(w - 1));
            let (r0, r1) = (r.saturating_sub(1), (r + 1).min(h - 1));
            let dze = if c1 > c0 {
                (at(r, c1) - at(r, c0)) / ((c1 - c0) as f64 * pixel_size)
            } else {
                0.0
            };
            let dzn = if r1 > r0 {
                -(at(r1, c) - at(r0, c)) / ((r1 - r0) as f64 * pixel_size)
            } else {
                0.0
            };
            let norm = (dze * dze + dzn * dzn + 1.0).sqrt();
            out.push([-dze / norm, -dzn / norm, 1.0 / norm]);
        }
    }
    out
}

/// `max(0, n·l)` per pixel, in `[0, 1]`.
pub fn hillshade(dem: &Tensor, pixel_size: f64, sun: Sun) -> Result<Vec<f64>> {
    let (c, h, w) = dem.dims3()?;
    if c != 1 {
        return Err(Error::shape(format!("hillshade needs one channel, got {c}")));
    }
    if !dem.is_finite() {
        return Err(Error::param("elevation grid has non-finite values"));
    }
    if !(pixel_size > 0.0) {
        return Err(Error::param(format!("pixel size {pixel_size} must be > 0")));
    }
    let l = sun.direction();
    Ok(surface_normals(dem.data(), h, w, pixel_size)
        .iter()
        .map(|n| (n[0] * l[0] + n[1] * l[1] + n[2] * l[2]).max(0.0))
        .collect())
}

/// Hillshade quantized to 8 bits.
pub fn render_hillshade(dem: &Tensor, pixel_size: f64, sun: Sun) -> Result<Vec<u8>> {
    Ok(hillshade(dem, pixel_size, sun)?
        .iter()
        .map(|&s| (s * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect())
}
