//! Glue between the corpus, codec, trainer and sampler, including the
//! prompt-separation evaluation.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::codec::{resize_mask, Codec};
use crate::denoiser::DenoiserModel;
use crate::error::{Error, Result};
use crate::sampler::{generate, Generated, SampleConfig};
use crate::schedules::NoiseSchedule;
use crate::synthcorpus::{Corpus, TerrainSample};
use crate::trainer::LatentItem;

/// Encodes one corpus sample: RGB as is, elevation normalized to the
/// corpus bounds, valid mask AND-pooled to the latent grid.
pub fn encode_sample(corpus: &Corpus, codec: &Codec, s: &TerrainSample) -> Result<LatentItem> {
    let z_img = codec.encode_rgb(&s.rgb)?;
    let z_dem = codec.encode_dem(&corpus.normalize_dem(&s.dem))?;
    let mask = resize_mask(&s.valid, codec.downsample_factor())?;
    Ok(LatentItem {
        z_img,
        z_dem,
        mask,
        descriptors: s.descriptors.clone(),
    })
}

pub fn encode_corpus(corpus: &Corpus, codec: &Codec, ids: &[usize]) -> Result<Vec<LatentItem>> {
    ids.iter()
        .map(|&i| encode_sample(corpus, codec, &corpus.samples[i]))
        .collect()
}

/// Max minus min of the elevation raster.
pub fn elevation_range(g: &Generated) -> f64 {
    let d = g.dem_metres.data();
    let (lo, hi) = d
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    hi - lo
}

/// Mean of the green channel in `[-1, 1]` units.
pub fn green_mean(g: &Generated) -> f64 {
    let c = g.rgb.channel(1);
    c.iter().sum::<f64>() / c.len() as f64
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

/// Welch's unequal-variance t-test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Welch {
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p_value: f64,
}

pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<Welch> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::param("t-test needs two observations per group"));
    }
    let (va, vb) = (variance(a) / a.len() as f64, variance(b) / b.len() as f64);
    let se2 = va + vb;
    if se2 == 0.0 {
        let p = if mean(a) == mean(b) { 1.0 } else { 0.0 };
        return Ok(Welch {
            t: if p == 1.0 { 0.0 } else { f64::INFINITY },
            df: f64::INFINITY,
            p_value: p,
        });
    }
    let t = (mean(a) - mean(b)) / se2.sqrt();
    let df = se2 * se2 / (va * va / (a.len() - 1) as f64 + vb * vb / (b.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::param(e.to_string()))?;
    Ok(Welch {
        t,
        df,
        p_value: 2.0 * (1.0 - dist.cdf(t.abs())),
    })
}

/// Prompts and sample count for the separation evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparationConfig {
    pub samples_per_prompt: usize,
    pub prompt_mountains: String,
    pub prompt_plains: String,
    pub prompt_forest: String,
    pub prompt_desert: String,
    pub sample: SampleConfig,
}

impl Default for SeparationConfig {
    fn default() -> Self {
        Self {
            samples_per_prompt: 64,
            prompt_mountains: "A Sentinel-2 image of mountains".into(),
            prompt_plains: "A Sentinel-2 image of plains".into(),
            prompt_forest: "A Sentinel-2 image of forest".into(),
            prompt_desert: "A Sentinel-2 image of desert".into(),
            sample: SampleConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeparationReport {
    pub range_mountains: Vec<f64>,
    pub range_plains: Vec<f64>,
    pub green_forest: Vec<f64>,
    pub green_desert: Vec<f64>,
    pub range_ratio: f64,
    pub green: Welch,
}

impl SeparationReport {
    pub fn passes(&self) -> bool {
        self.range_ratio >= 2.0 && self.green.p_value < 0.01 && self.green.t > 0.0
    }

    pub fn summary(&self) -> String {
        format!(
            "mean range mountains={:.1} plains={:.1} ratio={:.3}; green forest={:.4} desert={:.4} t={:.3} df={:.1} p={:.3e}",
            mean(&self.range_mountains),
            mean(&self.range_plains),
            self.range_ratio,
            mean(&self.green_forest),
            mean(&self.green_desert),
            self.green.t,
            self.green.df,
            self.green.p_value
        )
    }
}

/// Samples `samples_per_prompt` rasters for each of the four prompts with
/// seeds `base, base + 1, ...` and compares their statistics.
pub fn separation(
    model: &DenoiserModel,
    codec: &Codec,
    sched: &NoiseSchedule,
    cfg: &SeparationConfig,
    size: (usize, usize),
    bounds: (f64, f64),
) -> Result<SeparationReport> {
    let run = |prompt: &str, stat: fn(&Generated) -> f64| -> Result<Vec<f64>> {
        (0..cfg.samples_per_prompt)
            .map(|i| {
                let sc = SampleConfig {
                    prompt: prompt.to_string(),
                    seed: cfg.sample.seed.wrapping_add(i as u64),
                    ..cfg.sample.clone()
                };
                Ok(stat(&generate(model, codec, &sc, sched, size, bounds)?))
            })
            .collect()
    };
    let range_mountains = run(&cfg.prompt_mountains, elevation_range)?;
    let range_plains = run(&cfg.prompt_plains, elevation_range)?;
    let green_forest = run(&cfg.prompt_forest, green_mean)?;
    let green_desert = run(&cfg.prompt_desert, green_mean)?;
    let range_ratio = mean(&range_mountains) / mean(&range_plains);
    let green = welch_t_test(&green_forest, &green_desert)?;
    Ok(SeparationReport {
        range_mountains,
        range_plains,
        green_forest,
        green_desert,
        range_ratio,
        green,
    })
}
