//! Binary masks, affine pixel→world transforms and georeferenced rasters.

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Row-major binary grid. `true` means set (valid, cloudy, nodata … as the
/// field name says).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "mask {height}x{width} needs {} cells, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.data[row * self.width + col] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.data.len() as f64
        }
    }

    pub fn not(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|b| !b).collect(),
        }
    }

    /// `[1, H, W]` tensor of 0.0 / 1.0.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::from_vec(&[1, self.height, self.width], data).expect("mask dims")
    }

    /// Reads a single-channel tensor, treating values > 0.5 as set.
    pub fn from_tensor(t: &Tensor) -> Result<Mask> {
        let (c, h, w) = t.dims3()?;
        if c != 1 {
            return Err(Error::shape(format!("mask tensor needs 1 channel, got {c}")));
        }
        Mask::from_vec(h, w, t.data().iter().map(|&v| v > 0.5).collect())
    }
}

/// GDAL-style affine map from pixel-centre coordinates `(col, row)` to
/// world `(x, y)`: `x = c0 + c1·col + c2·row`, `y = c3 + c4·col + c5·row`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoTransform(pub [f64; 6]);

impl GeoTransform {
    pub const IDENTITY: GeoTransform = GeoTransform([0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);

    /// North-up grid with square pixels.
    pub fn north_up(origin_x: f64, origin_y: f64, pixel_size: f64) -> Self {
        GeoTransform([origin_x, pixel_size, 0.0, origin_y, 0.0, -pixel_size])
    }

    pub fn apply(&self, col: f64, row: f64) -> (f64, f64) {
        let c = &self.0;
        (c[0] + c[1] * col + c[2] * row, c[3] + c[4] * col + c[5] * row)
    }

    pub fn determinant(&self) -> f64 {
        self.0[1] * self.0[5] - self.0[2] * self.0[4]
    }

    pub fn inverse(&self) -> Result<GeoTransform> {
        let det = self.determinant();
        let c = &self.0;
        let scale = c[1].abs().max(c[2].abs()).max(c[4].abs()).max(c[5].abs());
        if !det.is_finite() || det.abs() <= 1e-14 * scale * scale || scale == 0.0 {
            return Err(Error::param(format!("singular transform {:?}", self.0)));
        }
        let (a, b, d, e) = (c[1] / det, c[2] / det, c[4] / det, c[5] / det);
        // inverse linear part [[e, -b], [-d, a]]
        let (i1, i2, i4, i5) = (e, -b, -d, a);
        let i0 = -(i1 * c[0] + i2 * c[3]);
        let i3 = -(i4 * c[0] + i5 * c[3]);
        Ok(GeoTransform([i0, i1, i2, i3, i4, i5]))
    }

    /// `"c0,c1,c2,c3,c4,c5"`, the manifest serialization.
    pub fn to_row(&self) -> String {
        self.0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }

    pub fn from_row(s: &str) -> Result<Self> {
        let vals: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::param(format!("bad transform row {s:?}")))?;
        let arr: [f64; 6] = vals
            .try_into()
            .map_err(|_| Error::param(format!("transform needs 6 coefficients: {s:?}")))?;
        Ok(GeoTransform(arr))
    }
}

/// A `[C, H, W]` grid with georeferencing and a per-pixel nodata flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub data: Tensor,
    pub transform: GeoTransform,
    pub nodata: Mask,
}

impl Raster {
    pub fn new(data: Tensor, transform: GeoTransform, nodata: Mask) -> Result<Self> {
        let (_, h, w) = data.dims3()?;
        if nodata.dims() != (h, w) {
            return Err(Error::shape(format!(
                "nodata mask {:?} vs raster {h}x{w}",
                nodata.dims()
            )));
        }
        transform.inverse()?;
        Ok(Self {
            data,
            transform,
            nodata,
        })
    }

    pub fn all_valid(data: Tensor, transform: GeoTransform) -> Result<Self> {
        let (_, h, w) = data.dims3()?;
        Self::new(data, transform, Mask::filled(h, w, false))
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dims3().expect("raster is rank 3")
    }
}
