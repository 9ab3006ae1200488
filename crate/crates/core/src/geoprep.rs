//! Tile preprocessing: global grid cells, resampling under coordinate
//! transforms, mask union and histogram matching.

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::raster::{GeoTransform, Mask, Raster};

pub const EARTH_RADIUS_M: f64 = 6_371_008.8;
pub const DEFAULT_CELL_SIZE_M: f64 = 10_000.0;

/// A cell of a regular global grid. Rows are equally spaced in latitude;
/// each row holds as many columns as fit at `cell_size_m` along its
/// central parallel, so neighbours stay roughly one cell size apart at
/// every latitude.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridCell {
    pub row: usize,
    pub col: usize,
    pub center_lon: f64,
    pub center_lat: f64,
    pub cell_size_m: f64,
}

/// Length of one degree of latitude on the sphere.
pub fn metres_per_degree() -> f64 {
    EARTH_RADIUS_M * std::f64::consts::PI / 180.0
}

impl GridCell {
    fn dlat(cell_size_m: f64) -> f64 {
        cell_size_m / metres_per_degree()
    }

    pub fn rows(cell_size_m: f64) -> usize {
        (180.0 / Self::dlat(cell_size_m)).floor() as usize
    }

    fn row_lat(row: usize, cell_size_m: f64) -> f64 {
        let n = Self::rows(cell_size_m);
        // whole rows tile [-90, 90]; spacing exceeds the cell size by < 1/n
        let dlat = 180.0 / n as f64;
        -90.0 + (row as f64 + 0.5) * dlat
    }

    pub fn cols_in_row(row: usize, cell_size_m: f64) -> usize {
        let lat = Self::row_lat(row, cell_size_m).to_radians();
        let circumference = 2.0 * std::f64::consts::PI * EARTH_RADIUS_M * lat.cos();
        ((circumference / cell_size_m).floor() as usize).max(1)
    }

    pub fn new(row: usize, col: usize, cell_size_m: f64) -> Result<Self> {
        if !(cell_size_m > 0.0) {
            return Err(Error::param(format!("cell size {cell_size_m} must be > 0")));
        }
        let rows = Self::rows(cell_size_m);
        if row >= rows {
            return Err(Error::param(format!("row {row} outside grid of {rows} rows")));
        }
        let cols = Self::cols_in_row(row, cell_size_m);
        if col >= cols {
            return Err(Error::param(format!("col {col} outside row {row} of {cols} columns")));
        }
        let dlon = 360.0 / cols as f64;
        Ok(Self {
            row,
            col,
            center_lon: -180.0 + (col as f64 + 0.5) * dlon,
            center_lat: Self::row_lat(row, cell_size_m),
            cell_size_m,
        })
    }

    /// The cell containing `(lon, lat)` in degrees.
    pub fn containing(lon: f64, lat: f64, cell_size_m: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) || !lon.is_finite() {
            return Err(Error::param(format!("coordinate ({lon}, {lat}) out of range")));
        }
        let rows = Self::rows(cell_size_m);
        let row = (((lat + 90.0) / 180.0 * rows as f64).floor() as usize).min(rows - 1);
        let cols = Self::cols_in_row(row, cell_size_m);
        let lon = (lon + 180.0).rem_euclid(360.0);
        let col = ((lon / 360.0 * cols as f64).floor() as usize).min(cols - 1);
        Self::new(row, col, cell_size_m)
    }
}

/// Great-circle distance in metres.
pub fn haversine_m(lon1: f64, lat1: f64, lon2: f64, lat2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().asin()
}

/// Maps target-CRS world coordinates to source-CRS world coordinates.
/// `None` marks points outside the transform's domain.
pub trait CoordTransform {
    fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)>;
}

/// Same CRS on both sides.
#[derive(Clone, Copy, Debug, Default)]
pub struct SameCrs;

impl CoordTransform for SameCrs {
    fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        Some((x, y))
    }
}

impl CoordTransform for GeoTransform {
    fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        Some(GeoTransform::apply(self, x, y))
    }
}

/// Planar homography `[h0 h1 h2; h3 h4 h5; h6 h7 h8]` in homogeneous
/// coordinates, a stand-in for non-affine map projections.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography(pub [f64; 9]);

impl CoordTransform for Homography {
    fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let h = &self.0;
        let w = h[6] * x + h[7] * y + h[8];
        if w.abs() < 1e-12 {
            return None;
        }
        Some(((h[0] * x + h[1] * y + h[2]) / w, (h[3] * x + h[4] * y + h[5]) / w))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    Nearest,
    Bilinear,
}

/// Resamples onto a target grid in the same CRS.
pub fn resample_bilinear(src: &Raster, target: GeoTransform, shape: (usize, usize)) -> Result<Raster> {
    resample(src, target, shape, &SameCrs, Interpolation::Bilinear)
}

pub fn resample_nearest(src: &Raster, target: GeoTransform, shape: (usize, usize)) -> Result<Raster> {
    resample(src, target, shape, &SameCrs, Interpolation::Nearest)
}

/// Inverse-maps every target pixel centre through `target`, `crs` and the
/// inverse of `src.transform`, then interpolates. A target pixel is nodata
/// when any source pixel with nonzero weight is nodata or out of bounds.
pub fn resample(
    src: &Raster,
    target: GeoTransform,
    (th, tw): (usize, usize),
    crs: &dyn CoordTransform,
    method: Interpolation,
) -> Result<Raster> {
    let (c, h, w) = src.dims();
    if h == 0 || w == 0 {
        return Err(Error::param("source raster is empty"));
    }
    target.inverse()?;
    let to_src_px = src.transform.inverse()?;
    let plane = h * w;
    let sdata = src.data.data();
    let mut out = vec![0.0; c * th * tw];
    let mut nodata = Mask::filled(th, tw, true);
    let mut taps: Vec<(usize, f64)> = Vec::with_capacity(4);
    for r in 0..th {
        for col in 0..tw {
            let (x, y) = target.apply(col as f64, r as f64);
            let Some((sx, sy)) = crs.apply(x, y) else {
                continue;
            };
            let (pc, pr) = to_src_px.apply(sx, sy);
            taps.clear();
            let ok = match method {
                Interpolation::Nearest => {
                    let (ic, ir) = (pc.round(), pr.round());
                    let inside = ic >= 0.0 && ir >= 0.0 && ic < w as f64 && ir < h as f64;
                    if inside {
                        taps.push((ir as usize * w + ic as usize, 1.0));
                    }
                    inside
                }
                Interpolation::Bilinear => bilinear_taps(pc, pr, h, w, &mut taps),
            };
            if !ok || taps.iter().any(|&(k, _)| src.nodata.data()[k]) {
                continue;
            }
            nodata.set(r, col, false);
            for ch in 0..c {
                let base = &sdata[ch * plane..(ch + 1) * plane];
                out[(ch * th + r) * tw + col] = taps.iter().map(|&(k, wt)| wt * base[k]).sum();
            }
        }
    }
    Raster::new(Tensor::from_vec(&[c, th, tw], out)?, target, nodata)
}

/// Pushes the pixels with nonzero weight; false when one is out of bounds.
fn bilinear_taps(pc: f64, pr: f64, h: usize, w: usize, taps: &mut Vec<(usize, f64)>) -> bool {
    if !pc.is_finite() || !pr.is_finite() {
        return false;
    }
    // round-trip error through the inverse transform must not split a tap
    let snap = |v: f64| if (v - v.round()).abs() < 1e-12 { v.round() } else { v };
    let (pc, pr) = (snap(pc), snap(pr));
    let (c0, r0) = (pc.floor(), pr.floor());
    let (fc, fr) = (pc - c0, pr - r0);
    for (dr, wr) in [(0.0, 1.0 - fr), (1.0, fr)] {
        for (dc, wc) in [(0.0, 1.0 - fc), (1.0, fc)] {
            let wt = wr * wc;
            if wt == 0.0 {
                continue;
            }
            let (rr, cc) = (r0 + dr, c0 + dc);
            if rr < 0.0 || cc < 0.0 || rr >= h as f64 || cc >= w as f64 {
                return false;
            }
            taps.push((rr as usize * w + cc as usize, wt));
        }
    }
    true
}

/// Valid where neither nodata nor cloud is set.
pub fn union_masks(nodata: &Mask, cloud: &Mask) -> Result<Mask> {
    if nodata.dims() != cloud.dims() {
        return Err(Error::shape(format!(
            "nodata mask {:?} vs cloud mask {:?}",
            nodata.dims(),
            cloud.dims()
        )));
    }
    let data = nodata
        .data()
        .iter()
        .zip(cloud.data())
        .map(|(&n, &c)| !n && !c)
        .collect();
    Mask::from_vec(nodata.height(), nodata.width(), data)
}

const BINS: usize = 1 << 16;

/// Maps valid source pixels through `Q_ref(F_src(·))` using 16-bit
/// quantized cumulative histograms over the joint value range.
///
/// `Q_ref(p)` returns the smallest reference value whose bin reaches
/// cumulative fraction `p`. When all valid values fall in distinct bins
/// and both sides have the same count, the output multiset equals the
/// reference multiset exactly. Invalid pixels are copied through.
pub fn histogram_match(source: &[f64], reference: &[f64], valid: &Mask) -> Result<Vec<f64>> {
    let n = valid.data().len();
    if source.len() != n || reference.len() != n {
        return Err(Error::shape(format!(
            "histogram match needs {n} values, got source {} and reference {}",
            source.len(),
            reference.len()
        )));
    }
    let pick = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .zip(valid.data())
            .filter(|(_, &ok)| ok)
            .map(|(&x, _)| x)
            .collect()
    };
    let (s, r) = (pick(source), pick(reference));
    if s.is_empty() {
        return Err(Error::param("histogram match needs at least one valid pixel"));
    }
    if s.iter().chain(&r).any(|v| !v.is_finite()) {
        return Err(Error::param("histogram match needs finite values"));
    }
    let lo = s.iter().chain(&r).copied().fold(f64::INFINITY, f64::min);
    let hi = s.iter().chain(&r).copied().fold(f64::NEG_INFINITY, f64::max);
    let scale = if hi > lo { (BINS - 1) as f64 / (hi - lo) } else { 0.0 };
    let bin = |v: f64| (((v - lo) * scale).round() as usize).min(BINS - 1);

    let mut src_hist = vec![0u64; BINS];
    for &v in &s {
        src_hist[bin(v)] += 1;
    }
    let mut ref_hist = vec![0u64; BINS];
    let mut ref_min = vec![f64::INFINITY; BINS];
    for &v in &r {
        let b = bin(v);
        ref_hist[b] += 1;
        ref_min[b] = ref_min[b].min(v);
    }
    // cumulative counts
    let cum = |h: &[u64]| -> Vec<u64> {
        h.iter()
            .scan(0u64, |acc, &c| {
                *acc += c;
                Some(*acc)
            })
            .collect()
    };
    let (src_cdf, ref_cdf) = (cum(&src_hist), cum(&ref_hist));
    let (ns, nr) = (s.len() as u128, r.len() as u128);

    // lookup table from source bin to output value; F_src = k / ns and we
    // need the first ref bin with cum_ref / nr >= k / ns (exact integers)
    let mut table = vec![0.0; BINS];
    let mut j = 0usize;
    for b in 0..BINS {
        if src_hist[b] == 0 {
            continue;
        }
        let k = src_cdf[b] as u128;
        while (ref_cdf[j] as u128) * ns < k * nr {
            j += 1;
        }
        table[b] = ref_min[j];
    }
    Ok(source
        .iter()
        .zip(valid.data())
        .map(|(&v, &ok)| if ok { table[bin(v)] } else { v })
        .collect())
}

/// Channel-wise [`histogram_match`] of `[C, H, W]` tensors.
pub fn histogram_match_channels(source: &Tensor, reference: &Tensor, valid: &Mask) -> Result<Tensor> {
    source.ensure_same_shape(reference, "histogram match")?;
    let (c, h, w) = source.dims3()?;
    if valid.dims() != (h, w) {
        return Err(Error::shape("valid mask does not match raster"));
    }
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        out.extend(histogram_match(source.channel(ch), reference.channel(ch), valid)?);
    }
    Tensor::from_vec(&[c, h, w], out)
}

/// Sum of squared second differences along rows and columns of channel 0,
/// over positions whose three taps are valid. Staircase resampling
/// artefacts show up as large spikes in this measure.
pub fn stairway_energy(r: &Raster) -> f64 {
    let (_, h, w) = r.dims();
    let v = r.data.channel(0);
    let ok = |row: usize, col: usize| !r.nodata.get(row, col);
    let mut e = 0.0;
    for row in 0..h {
        for col in 1..w.saturating_sub(1) {
            if ok(row, col - 1) && ok(row, col) && ok(row, col + 1) {
                let d = v[row * w + col + 1] - 2.0 * v[row * w + col] + v[row * w + col - 1];
                e += d * d;
            }
        }
    }
    for row in 1..h.saturating_sub(1) {
        for col in 0..w {
            if ok(row - 1, col) && ok(row, col) && ok(row + 1, col) {
                let d = v[(row + 1) * w + col] - 2.0 * v[row * w + col] + v[(row - 1) * w + col];
                e += d * d;
            }
        }
    }
    e
}
