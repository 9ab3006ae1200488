//! Procedural labelled terrain: fBm heightmaps, biome-tinted hillshaded
//! imagery, cloud masks and caption descriptors from a closed vocabulary.
//!
//! Landform and biome are drawn independently, so each drives its own
//! measurable statistic: elevation range follows the landform, colour
//! follows the biome.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::captioner::{Biome, CaptionDescriptors, Month};
use crate::error::{Error, Result};
use crate::format::{write_gray16_png, write_gray8_png, write_rgb_png, Archive, Manifest};
use crate::geoprep::{union_masks, DEFAULT_CELL_SIZE_M};
use crate::nn::Tensor;
use crate::raster::{GeoTransform, Mask};
use crate::render::{hillshade, Sun};
use crate::rng::{splitmix64, substream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Landform {
    Plains,
    Hills,
    Mountains,
}

impl Landform {
    pub const ALL: [Landform; 3] = [Landform::Plains, Landform::Hills, Landform::Mountains];

    pub fn name(self) -> &'static str {
        match self {
            Landform::Plains => "plains",
            Landform::Hills => "hills",
            Landform::Mountains => "mountains",
        }
    }

    pub fn params(self) -> HeightParams {
        match self {
            Landform::Plains => HeightParams {
                amplitude: 50.0,
                octaves: 2,
                ridged: false,
                base: 100.0,
                base_jitter: 150.0,
                cells: 2.0,
            },
            Landform::Hills => HeightParams {
                amplitude: 300.0,
                octaves: 4,
                ridged: false,
                base: 200.0,
                base_jitter: 300.0,
                cells: 3.0,
            },
            Landform::Mountains => HeightParams {
                amplitude: 1500.0,
                octaves: 6,
                ridged: true,
                base: 600.0,
                base_jitter: 400.0,
                cells: 3.0,
            },
        }
    }

    /// Named ranges used as regional descriptors.
    pub fn regions(self) -> &'static [&'static str] {
        match self {
            Landform::Plains => &["the Great Plains", "the Pannonian Basin", "the Pampas"],
            Landform::Hills => &["the Cotswolds", "the Ozarks", "the Chilterns"],
            Landform::Mountains => &["the Alps", "the Andes", "the Rockies"],
        }
    }
}

impl fmt::Display for Landform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Landform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Landform::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::param(format!("unknown landform {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BiomeKind {
    Forest,
    Desert,
    Tundra,
    Steppe,
}

/// Colours in `[0, 1]` at low and high elevation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Palette {
    pub low: [f64; 3],
    pub high: [f64; 3],
}

impl BiomeKind {
    pub const ALL: [BiomeKind; 4] = [
        BiomeKind::Forest,
        BiomeKind::Desert,
        BiomeKind::Tundra,
        BiomeKind::Steppe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BiomeKind::Forest => "forest",
            BiomeKind::Desert => "desert",
            BiomeKind::Tundra => "tundra",
            BiomeKind::Steppe => "steppe",
        }
    }

    pub fn palette(self) -> Palette {
        match self {
            BiomeKind::Forest => Palette {
                low: [0.18, 0.52, 0.18],
                high: [0.28, 0.47, 0.26],
            },
            BiomeKind::Desert => Palette {
                low: [0.80, 0.44, 0.22],
                high: [0.66, 0.38, 0.26],
            },
            BiomeKind::Tundra => Palette {
                low: [0.46, 0.50, 0.52],
                high: [0.70, 0.72, 0.74],
            },
            BiomeKind::Steppe => Palette {
                low: [0.70, 0.62, 0.28],
                high: [0.60, 0.52, 0.30],
            },
        }
    }

    pub fn ecoregions(self) -> &'static [&'static str] {
        match self {
            BiomeKind::Forest => &["Boreal Forest", "Atlantic Forest", "Central European Forest"],
            BiomeKind::Desert => &["Sahara Desert", "Gobi Desert", "Mojave Desert"],
            BiomeKind::Tundra => &["Arctic Tundra", "Alpine Tundra", "Siberian Tundra"],
            BiomeKind::Steppe => &["Pontic Steppe", "Kazakh Steppe", "Mongolian Steppe"],
        }
    }

    /// Anonymized biome-type label.
    pub fn biome_type(self) -> &'static str {
        match self {
            BiomeKind::Forest => "Temperate Forest",
            BiomeKind::Desert => "Desert and Xeric Shrubland",
            BiomeKind::Tundra => "Tundra",
            BiomeKind::Steppe => "Grassland Steppe",
        }
    }
}

impl fmt::Display for BiomeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BiomeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BiomeKind::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::param(format!("unknown biome {s:?}")))
    }
}

pub const COUNTRIES: [&str; 8] = [
    "Norway",
    "Spain",
    "Kazakhstan",
    "Canada",
    "Chile",
    "Mongolia",
    "Morocco",
    "Finland",
];

/// fBm heightmap parameters in metres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeightParams {
    pub amplitude: f64,
    pub octaves: u32,
    pub ridged: bool,
    pub base: f64,
    /// Per-seed uniform offset added to `base`.
    pub base_jitter: f64,
    /// Lattice cells across the tile at the first octave.
    pub cells: f64,
}

fn lattice(seed: u64, octave: u32, ix: i64, iy: i64) -> f64 {
    let h = splitmix64(
        seed ^ splitmix64(octave as u64 + 1) ^ splitmix64((ix as u64).wrapping_mul(0x9e37_79b9) ^ (iy as u64) << 32),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn value_noise(seed: u64, octave: u32, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (tx, ty) = (smooth(x - x0), smooth(y - y0));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let v00 = lattice(seed, octave, ix, iy);
    let v10 = lattice(seed, octave, ix + 1, iy);
    let v01 = lattice(seed, octave, ix, iy + 1);
    let v11 = lattice(seed, octave, ix + 1, iy + 1);
    let a = v00 + (v10 - v00) * tx;
    let b = v01 + (v11 - v01) * tx;
    a + (b - a) * ty
}

/// Fractal sum in `[0, 1]` over a `size × size` tile.
fn fbm(seed: u64, size: usize, octaves: u32, cells: f64, ridged: bool) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    let mut norm = 0.0;
    for o in 0..octaves {
        let amp = 0.5f64.powi(o as i32);
        let freq = cells * 2f64.powi(o as i32) / size as f64;
        norm += amp;
        for r in 0..size {
            for c in 0..size {
                let n = value_noise(seed, o, (c as f64 + 0.5) * freq, (r as f64 + 0.5) * freq);
                let v = if ridged {
                    (1.0 - n.abs()).powi(2)
                } else {
                    0.5 * (n + 1.0)
                };
                out[r * size + c] += amp * v;
            }
        }
    }
    if norm > 0.0 {
        for v in &mut out {
            *v /= norm;
        }
    }
    out
}

/// `[1, size, size]` elevation in metres.
pub fn gen_heightmap_with(p: &HeightParams, seed: u64, size: usize) -> Tensor {
    let mut rng = substream(seed, "height.base", 0);
    let base = p.base + p.base_jitter * rng.random::<f64>();
    let shape = fbm(seed, size, p.octaves, p.cells, p.ridged);
    let data = shape.into_iter().map(|v| base + p.amplitude * v).collect();
    Tensor::from_vec(&[1, size, size], data).expect("square tile")
}

pub fn gen_heightmap(landform: Landform, seed: u64, size: usize) -> Tensor {
    gen_heightmap_with(&landform.params(), seed, size)
}

const SNOW: [f64; 3] = [0.93, 0.94, 0.96];
const SNOWLINE_M: f64 = 1500.0;
const TINT_TOP_M: f64 = 2500.0;

/// Tinted, hillshaded imagery in `[-1, 1]`. Hillshade is normalized so a
/// flat tile shades to exactly the palette tone.
pub fn gen_rgb(dem: &Tensor, biome: BiomeKind, month: Month, seed: u64, pixel_size: f64) -> Result<Tensor> {
    let (_, h, w) = dem.dims3()?;
    let sun = Sun::default();
    let flat = sun.direction()[2];
    let shade = hillshade(dem, pixel_size, sun)?;
    let pal = biome.palette();
    let mut rng = substream(seed, "rgb.jitter", 0);
    let jitter: [f64; 3] = std::array::from_fn(|_| 0.04 * (rng.random::<f64>() - 0.5));
    // growing-season vigour peaks in July
    let season = (2.0 * std::f64::consts::PI * (month.number() as f64 - 7.0) / 12.0).cos();
    let vigour = match biome {
        BiomeKind::Forest | BiomeKind::Steppe => 1.0 + 0.06 * season,
        _ => 1.0,
    };
    let mut out = vec![0.0; 3 * h * w];
    for k in 0..h * w {
        let e = dem.data()[k];
        let t = (e / TINT_TOP_M).clamp(0.0, 1.0);
        let snow = if month.is_winter() {
            let line = if biome == BiomeKind::Tundra { 0.6 } else { 0.0 };
            let alpine = (((e - SNOWLINE_M) / 500.0).clamp(0.0, 1.0)) * 0.8;
            f64::max(line, alpine)
        } else {
            0.0
        };
        let f = 1.0 + 0.5 * (shade[k] / flat - 1.0);
        for ch in 0..3 {
            let mut v = pal.low[ch] + (pal.high[ch] - pal.low[ch]) * t;
            if ch == 1 {
                v *= vigour;
            }
            v = v + (SNOW[ch] - v) * snow;
            v = v * f + jitter[ch];
            out[ch * h * w + k] = (2.0 * v - 1.0).clamp(-1.0, 1.0);
        }
    }
    Tensor::from_vec(&[3, h, w], out)
}

/// Cloud mask (`true` = cloud) with exactly `round(coverage · size²)`
/// cloudy pixels: smooth noise thresholded at the matching order statistic.
pub fn gen_cloudmask(coverage: f64, seed: u64, size: usize) -> Result<Mask> {
    if !(0.0..=1.0).contains(&coverage) {
        return Err(Error::param(format!("coverage {coverage} outside [0, 1]")));
    }
    let n = size * size;
    let k = (coverage * n as f64).round() as usize;
    let field = fbm(splitmix64(seed ^ 0xc10d), size, 3, 2.0, false);
    let mut order: Vec<usize> = (0..n).collect();
    // highest noise first, index as tie-break
    order.sort_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
    let mut data = vec![false; n];
    for &i in &order[..k] {
        data[i] = true;
    }
    Mask::from_vec(size, size, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub cell_size_m: f64,
    /// Cloud coverage is uniform on `[0, max_cloud]`.
    pub max_cloud: f64,
    /// Probability of a nodata strip along one border.
    pub nodata_prob: f64,
    pub holdout: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            count: 2048,
            size: 64,
            seed: 0,
            cell_size_m: DEFAULT_CELL_SIZE_M,
            max_cloud: 0.3,
            nodata_prob: 0.1,
            holdout: 0.1,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || self.size < 4 {
            return Err(Error::param("corpus needs count >= 1 and size >= 4"));
        }
        let p = |v: f64| (0.0..=1.0).contains(&v);
        if !p(self.max_cloud) || !p(self.nodata_prob) || !p(self.holdout) {
            return Err(Error::param("corpus probabilities must lie in [0, 1]"));
        }
        if !(self.cell_size_m > 0.0) {
            return Err(Error::param("cell size must be > 0"));
        }
        Ok(())
    }

    pub fn pixel_size(&self) -> f64 {
        self.cell_size_m / self.size as f64
    }

    fn to_manifest(&self, m: &mut Manifest) {
        m.set("corpus.count", self.count);
        m.set("corpus.size", self.size);
        m.set("corpus.seed", self.seed);
        m.set("corpus.cell_size_m", self.cell_size_m);
        m.set("corpus.max_cloud", self.max_cloud);
        m.set("corpus.nodata_prob", self.nodata_prob);
        m.set("corpus.holdout", self.holdout);
    }

    fn from_manifest(m: &Manifest) -> Result<Self> {
        Ok(Self {
            count: m.parse_value("corpus.count")?,
            size: m.parse_value("corpus.size")?,
            seed: m.parse_value("corpus.seed")?,
            cell_size_m: m.parse_value("corpus.cell_size_m")?,
            max_cloud: m.parse_value("corpus.max_cloud")?,
            nodata_prob: m.parse_value("corpus.nodata_prob")?,
            holdout: m.parse_value("corpus.holdout")?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TerrainSample {
    pub id: usize,
    pub seed: u64,
    pub landform: Landform,
    pub biome: BiomeKind,
    /// `[3, H, W]` in `[-1, 1]`.
    pub rgb: Tensor,
    /// `[1, H, W]` metres.
    pub dem: Tensor,
    pub cloud: Mask,
    pub nodata: Mask,
    pub valid: Mask,
    pub descriptors: CaptionDescriptors,
    pub transform: GeoTransform,
}

impl TerrainSample {
    pub fn elevation_range(&self) -> (f64, f64) {
        min_max(self.dem.data())
    }

    /// Mean of one RGB channel over valid pixels (all pixels if none are).
    pub fn channel_mean(&self, ch: usize) -> f64 {
        let v = self.rgb.channel(ch);
        let (sum, n) = v
            .iter()
            .zip(self.valid.data())
            .filter(|(_, &ok)| ok)
            .fold((0.0, 0usize), |(s, n), (x, _)| (s + x, n + 1));
        if n == 0 {
            v.iter().sum::<f64>() / v.len() as f64
        } else {
            sum / n as f64
        }
    }
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)))
}

fn nodata_strip<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Mask {
    let width = rng.random_range(1..=(size / 4).max(1));
    let side = rng.random_range(0..4);
    Mask::from_fn(size, size, |r, c| match side {
        0 => r < width,
        1 => r >= size - width,
        2 => c < width,
        _ => c >= size - width,
    })
}

/// Sample `id` of the corpus; a pure function of `(config, id)`.
pub fn gen_sample(config: &CorpusConfig, id: usize) -> Result<TerrainSample> {
    let mut rng = substream(config.seed, "corpus.sample", id as u64);
    let seed: u64 = rng.random();
    let landform = Landform::ALL[rng.random_range(0..3)];
    let biome = BiomeKind::ALL[rng.random_range(0..4)];
    let month = Month::ALL[rng.random_range(0..12)];
    let ecoregion = *biome.ecoregions().choose(&mut rng).expect("vocabulary");
    let regional = *landform.regions().choose(&mut rng).expect("vocabulary");
    let country = *COUNTRIES.choose(&mut rng).expect("vocabulary");
    let coverage = config.max_cloud * rng.random::<f64>();
    let has_nodata = rng.random_bool(config.nodata_prob);

    let size = config.size;
    let dem = gen_heightmap(landform, seed, size);
    let mut rgb = gen_rgb(&dem, biome, month, seed, config.pixel_size())?;
    let cloud = gen_cloudmask(coverage, seed, size)?;
    let nodata = if has_nodata {
        nodata_strip(size, &mut rng)
    } else {
        Mask::filled(size, size, false)
    };
    let plane = size * size;
    for k in 0..plane {
        for ch in 0..3 {
            let v = &mut rgb.data_mut()[ch * plane + k];
            if nodata.data()[k] {
                *v = -1.0;
            } else if cloud.data()[k] {
                *v += (0.9 - *v) * 0.85;
            }
        }
    }
    let valid = union_masks(&nodata, &cloud)?;
    let descriptors = CaptionDescriptors {
        biome: Some(Biome {
            ecoregion: ecoregion.to_string(),
            biome_type: biome.biome_type().to_string(),
        }),
        geological_local: Some(landform.name().to_string()),
        geological_regional: Some(regional.to_string()),
        country: Some(country.to_string()),
        month: Some(month),
    };
    Ok(TerrainSample {
        id,
        seed,
        landform,
        biome,
        rgb,
        dem,
        cloud,
        nodata,
        valid,
        descriptors,
        transform: GeoTransform::north_up(0.0, config.cell_size_m, config.pixel_size()),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub samples: Vec<TerrainSample>,
    /// Elevation bounds over the whole corpus, mapped to `[-1, 1]`.
    pub elevation_bounds: (f64, f64),
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    id: usize,
    seed: u64,
    split: String,
    landform: String,
    biome: String,
    ecoregion: String,
    biome_type: String,
    geological_local: String,
    geological_regional: String,
    country: String,
    month: String,
    elev_min: f64,
    elev_max: f64,
    cloud_coverage: f64,
    nodata_fraction: f64,
    transform: String,
}

impl Corpus {
    pub fn generate(config: &CorpusConfig) -> Result<Self> {
        config.validate()?;
        let samples = (0..config.count)
            .map(|i| gen_sample(config, i))
            .collect::<Result<Vec<_>>>()?;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for s in &samples {
            let (a, b) = s.elevation_range();
            lo = lo.min(a);
            hi = hi.max(b);
        }
        if hi <= lo {
            hi = lo + 1.0;
        }
        Ok(Self {
            config: config.clone(),
            samples,
            elevation_bounds: (lo, hi),
        })
    }

    /// Elevation mapped affinely from the corpus bounds to `[-1, 1]`.
    pub fn normalize_dem(&self, dem: &Tensor) -> Tensor {
        let (lo, hi) = self.elevation_bounds;
        dem.map(|e| 2.0 * (e - lo) / (hi - lo) - 1.0)
    }

    /// Deterministic held-out ids (sorted).
    pub fn test_ids(&self) -> Vec<usize> {
        let n = self.samples.len();
        let k = (self.config.holdout * n as f64).round() as usize;
        let mut rng = substream(self.config.seed, "corpus.split", 0);
        let mut ids = rand::seq::index::sample(&mut rng, n, k.min(n)).into_vec();
        ids.sort_unstable();
        ids
    }

    /// `(train, test)` sample ids.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        let test = self.test_ids();
        let train = (0..self.samples.len())
            .filter(|i| test.binary_search(i).is_err())
            .collect();
        (train, test)
    }

    pub fn sample_dir(dir: &Path, id: usize) -> PathBuf {
        dir.join("samples").join(format!("{id:06}"))
    }

    /// Writes `corpus.cfg`, `manifest.csv` and one directory per sample
    /// holding `sample.bin` plus PNG previews.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("samples")).map_err(|e| Error::io(dir, e))?;
        let mut m = Manifest::new();
        self.config.to_manifest(&mut m);
        m.set("elevation.min", self.elevation_bounds.0);
        m.set("elevation.max", self.elevation_bounds.1);
        m.write(&dir.join("corpus.cfg"))?;

        let test = self.test_ids();
        let mut w = csv::Writer::from_path(dir.join("manifest.csv"))?;
        for s in &self.samples {
            let d = &s.descriptors;
            let b = d.biome.as_ref().expect("generated descriptors are complete");
            let (lo, hi) = s.elevation_range();
            w.serialize(ManifestRow {
                id: s.id,
                seed: s.seed,
                split: if test.binary_search(&s.id).is_ok() {
                    "test"
                } else {
                    "train"
                }
                .into(),
                landform: s.landform.name().into(),
                biome: s.biome.name().into(),
                ecoregion: b.ecoregion.clone(),
                biome_type: b.biome_type.clone(),
                geological_local: d.geological_local.clone().unwrap_or_default(),
                geological_regional: d.geological_regional.clone().unwrap_or_default(),
                country: d.country.clone().unwrap_or_default(),
                month: d.month.map(|m| m.name().to_string()).unwrap_or_default(),
                elev_min: lo,
                elev_max: hi,
                cloud_coverage: s.cloud.fraction(),
                nodata_fraction: s.nodata.fraction(),
                transform: s.transform.to_row(),
            })?;

            let sd = Self::sample_dir(dir, s.id);
            fs::create_dir_all(&sd).map_err(|e| Error::io(&sd, e))?;
            let mut a = Archive::new("terrain-sample", Manifest::new());
            a.manifest.set("units.dem", "metres");
            a.manifest.set("pixel_size", self.config.pixel_size());
            a.push("rgb", s.rgb.clone());
            a.push("dem", s.dem.clone());
            a.push("cloud", s.cloud.to_tensor());
            a.push("nodata", s.nodata.to_tensor());
            a.save(&sd.join("sample.bin"))?;
            write_rgb_png(&s.rgb, &sd.join("rgb.png"))?;
            write_gray16_png(
                &s.dem,
                self.elevation_bounds.0,
                self.elevation_bounds.1,
                &sd.join("dem.png"),
            )?;
            let valid: Vec<u8> = s.valid.data().iter().map(|&v| if v { 255 } else { 0 }).collect();
            write_gray8_png(&valid, self.config.size, self.config.size, &sd.join("valid.png"))?;
        }
        w.flush().map_err(|e| Error::io(dir.join("manifest.csv"), e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join("corpus.cfg");
        if !cfg_path.exists() {
            return Err(Error::Missing {
                what: "corpus",
                path: cfg_path,
            });
        }
        let m = Manifest::read(&cfg_path)?;
        let config = CorpusConfig::from_manifest(&m)?;
        let bounds = (m.parse_value("elevation.min")?, m.parse_value("elevation.max")?);
        let mut rdr = csv::Reader::from_path(dir.join("manifest.csv"))?;
        let mut samples = Vec::new();
        for row in rdr.deserialize() {
            let row: ManifestRow = row?;
            let path = Self::sample_dir(dir, row.id).join("sample.bin");
            let a = Archive::load(&path)?.expect_kind("terrain-sample", &path)?;
            let get = |name: &str| {
                a.tensor(name).cloned().ok_or_else(|| Error::Format {
                    path: path.clone(),
                    message: format!("missing tensor {name}"),
                })
            };
            let cloud = Mask::from_tensor(&get("cloud")?)?;
            let nodata = Mask::from_tensor(&get("nodata")?)?;
            let valid = union_masks(&nodata, &cloud)?;
            samples.push(TerrainSample {
                id: row.id,
                seed: row.seed,
                landform: row.landform.parse()?,
                biome: row.biome.parse()?,
                rgb: get("rgb")?,
                dem: get("dem")?,
                cloud,
                nodata,
                valid,
                descriptors: CaptionDescriptors {
                    biome: Some(Biome {
                        ecoregion: row.ecoregion,
                        biome_type: row.biome_type,
                    }),
                    geological_local: Some(row.geological_local),
                    geological_regional: Some(row.geological_regional),
                    country: Some(row.country),
                    month: Some(row.month.parse()?),
                },
                transform: GeoTransform::from_row(&row.transform)?,
            });
        }
        if samples.len() != config.count {
            return Err(Error::Format {
                path: dir.join("manifest.csv"),
                message: format!("{} rows for a corpus of {}", samples.len(), config.count),
            });
        }
        Ok(Self {
            config,
            samples,
            elevation_bounds: bounds,
        })
    }

    pub fn stats(&self) -> CorpusStats {
        CorpusStats::of(&self.samples)
    }
}

/// Ground-truth class statistics and the accuracy of trivial classifiers
/// built on them.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusStats {
    /// `(landform, count, mean elevation range in metres)`.
    pub landform_range: Vec<(Landform, usize, f64)>,
    /// `(biome, count, mean RGB)`.
    pub biome_color: Vec<(BiomeKind, usize, [f64; 3])>,
    /// Range thresholds at geometric midpoints between adjacent classes.
    pub landform_accuracy: f64,
    /// Nearest class-mean colour.
    pub biome_accuracy: f64,
}

impl CorpusStats {
    pub fn of(samples: &[TerrainSample]) -> Self {
        let range = |s: &TerrainSample| {
            let (a, b) = s.elevation_range();
            b - a
        };
        let color = |s: &TerrainSample| [s.channel_mean(0), s.channel_mean(1), s.channel_mean(2)];
        let landform_range: Vec<_> = Landform::ALL
            .iter()
            .map(|&l| {
                let v: Vec<f64> = samples.iter().filter(|s| s.landform == l).map(range).collect();
                (l, v.len(), v.iter().sum::<f64>() / v.len().max(1) as f64)
            })
            .collect();
        let biome_color: Vec<_> = BiomeKind::ALL
            .iter()
            .map(|&b| {
                let mut acc = [0.0; 3];
                let mut n = 0;
                for s in samples.iter().filter(|s| s.biome == b) {
                    let c = color(s);
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                    n += 1;
                }
                (b, n, acc.map(|v| v / n.max(1) as f64))
            })
            .collect();
        let cuts: Vec<f64> = landform_range
            .windows(2)
            .map(|w| (w[0].2.max(1e-9) * w[1].2.max(1e-9)).sqrt())
            .collect();
        let classify_landform = |r: f64| Landform::ALL[cuts.iter().filter(|&&c| r > c).count()];
        let classify_biome = |c: [f64; 3]| {
            biome_color
                .iter()
                .map(|(b, _, m)| (b, (0..3).map(|k| (c[k] - m[k]).powi(2)).sum::<f64>()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(b, _)| *b)
                .expect("four biomes")
        };
        let n = samples.len().max(1) as f64;
        let lf_ok = samples
            .iter()
            .filter(|s| classify_landform(range(s)) == s.landform)
            .count();
        let bi_ok = samples.iter().filter(|s| classify_biome(color(s)) == s.biome).count();
        Self {
            landform_range,
            biome_color,
            landform_accuracy: lf_ok as f64 / n,
            biome_accuracy: bi_ok as f64 / n,
        }
    }

    pub fn mean_range(&self, l: Landform) -> f64 {
        self.landform_range.iter().find(|r| r.0 == l).map_or(0.0, |r| r.2)
    }

    pub fn mean_color(&self, b: BiomeKind) -> [f64; 3] {
        self.biome_color.iter().find(|r| r.0 == b).map_or([0.0; 3], |r| r.2)
    }

    pub fn report(&self) -> String {
        let mut s = String::new();
        for (l, n, r) in &self.landform_range {
            s.push_str(&format!("landform {l:<10} n={n:<6} mean_range_m={r:.1}\n"));
        }
        for (b, n, c) in &self.biome_color {
            s.push_str(&format!(
                "biome    {b:<10} n={n:<6} mean_rgb=({:.3}, {:.3}, {:.3})\n",
                c[0], c[1], c[2]
            ));
        }
        s.push_str(&format!(
            "landform_accuracy={:.4} biome_accuracy={:.4}\n",
            self.landform_accuracy, self.biome_accuracy
        ));
        s
    }
}
