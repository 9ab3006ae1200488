//! Run configuration: a closed registry of `key=value` settings with
//! defaults, layered as defaults < file < overrides.

use std::path::{Path, PathBuf};

use crate::codec::{Codec, CodecKind, CodecTrainConfig};
use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::format::Manifest;
use crate::pipeline::SeparationConfig;
use crate::rng::derive_seed;
use crate::sampler::SampleConfig;
use crate::schedules::NoiseSchedule;
use crate::synthcorpus::CorpusConfig;
use crate::trainer::TrainConfig;

/// `(key, default, description)` for every accepted setting.
pub const KEYS: &[(&str, &str, &str)] = &[
    (
        "seed",
        "0",
        "root seed; corpus, train and sample streams derive from it",
    ),
    ("corpus.dir", "out/corpus", "corpus directory"),
    ("corpus.count", "2048", "number of synthetic samples"),
    ("corpus.size", "64", "raster side in pixels"),
    ("corpus.cell_size_m", "10000", "ground size of one tile in metres"),
    ("corpus.max_cloud", "0.3", "cloud coverage is uniform on [0, max_cloud]"),
    ("corpus.nodata_prob", "0.1", "probability of a nodata border strip"),
    ("corpus.holdout", "0.1", "held-out fraction"),
    ("schedule.steps", "1000", "training horizon T"),
    (
        "schedule.beta_start",
        "0.00085",
        "first beta of the scaled-linear schedule",
    ),
    ("schedule.beta_end", "0.012", "last beta of the scaled-linear schedule"),
    ("codec.kind", "identity", "identity or conv"),
    ("codec.factor", "4", "conv codec downsampling factor"),
    ("codec.latent_channels", "4", "conv codec latent channels"),
    ("codec.width", "32", "conv codec hidden width"),
    ("codec.iterations", "300", "conv codec training steps"),
    ("codec.batch_size", "8", "conv codec batch size"),
    ("codec.learning_rate", "0.002", "conv codec learning rate"),
    ("model.stem_channels", "32", "per-modality stem width"),
    ("model.channels", "64,128", "backbone widths at 1/2 and 1/4 resolution"),
    ("model.embed_dim", "128", "caption and time embedding dimension"),
    ("model.hash_buckets", "1024", "caption token hash buckets"),
    ("train.dir", "out/train", "training output directory"),
    ("train.batch_size", "128", "minibatch size"),
    ("train.iterations", "80000", "optimizer steps"),
    ("train.learning_rate", "0.00001", "AdamW learning rate"),
    ("train.weight_decay", "0.01", "AdamW decoupled weight decay"),
    ("train.p_uncond", "0.1", "probability of an empty prompt"),
    ("train.p_partial", "0.5", "probability of dropping 1 to 3 descriptors"),
    ("train.w_img", "1", "RGB loss weight"),
    ("train.w_dem", "1", "elevation loss weight"),
    (
        "train.ema_decay",
        "0",
        "weight moving-average decay (0 keeps the raw weights)",
    ),
    ("train.log_every", "10", "trace row interval"),
    (
        "train.checkpoint_every",
        "1000",
        "checkpoint interval in steps (0 disables)",
    ),
    ("train.parallel", "false", "per-sample passes on the thread pool"),
    ("sample.dir", "out/sample", "sampling output directory"),
    (
        "sample.checkpoint",
        "out/train/model.bin",
        "denoiser checkpoint to sample from",
    ),
    ("sample.prompt", "A Sentinel-2 image of mountains", "text prompt"),
    ("sample.count", "1", "number of samples"),
    ("sample.seed", "", "sample seed (derived from seed when empty)"),
    ("sample.steps", "50", "DDIM steps"),
    ("sample.guidance", "7", "classifier-free guidance scale"),
    ("sample.eta", "0", "DDIM stochasticity"),
    ("eval.samples", "64", "samples per prompt"),
    (
        "eval.prompt_mountains",
        "A Sentinel-2 image of mountains",
        "high-relief prompt",
    ),
    (
        "eval.prompt_plains",
        "A Sentinel-2 image of plains",
        "low-relief prompt",
    ),
    ("eval.prompt_forest", "A Sentinel-2 image of forest", "green prompt"),
    ("eval.prompt_desert", "A Sentinel-2 image of desert", "arid prompt"),
    ("prep.input", "", "input sample archive"),
    (
        "prep.reference",
        "",
        "reference archive for RGB histogram matching (optional)",
    ),
    ("prep.output", "out/prep", "output directory"),
    ("prep.scale", "1", "output pixel size relative to input"),
    ("prep.rotation", "0", "rotation of the output grid in degrees"),
    ("prep.interpolation", "bilinear", "bilinear or nearest"),
    (
        "caption.atlas",
        "",
        "region atlas file; empty captions the corpus instead",
    ),
    ("caption.lon", "0", "longitude for an atlas lookup"),
    ("caption.lat", "0", "latitude for an atlas lookup"),
    ("caption.month", "July", "month for an atlas lookup"),
    (
        "render.input",
        "",
        "elevation source: sample archive, .bin grid or 16-bit PNG",
    ),
    ("render.output", "out/hillshade.png", "rendered PNG"),
    ("render.azimuth", "315", "sun azimuth in degrees clockwise from north"),
    ("render.altitude", "45", "sun altitude in degrees"),
    ("render.pixel_size", "", "metres per pixel (from the corpus when empty)"),
    ("checkgrad.coords", "200", "parameter coordinates compared"),
    ("checkgrad.size", "8", "latent side of the test batch"),
    ("checkgrad.batch", "2", "test batch size"),
];

pub fn default_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|k| k.0 == key).map(|k| k.1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: Manifest,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut values = Manifest::new();
        for (k, v, _) in KEYS {
            values.set(*k, *v);
        }
        Self { values }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if default_of(key).is_none() {
            return Err(Error::param(format!("unknown config key {key:?}")));
        }
        self.values.set(key, value.trim());
        Ok(())
    }

    pub fn apply(&mut self, m: &Manifest) -> Result<()> {
        for (k, v) in m.entries() {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply(&Manifest::parse(text)?)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing {
                what: "config file",
                path: path.to_path_buf(),
            });
        }
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Every key with its current value, in registry order.
    pub fn to_text(&self) -> String {
        self.values.to_text()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.values.write(path)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).expect("registry keys always have a value")
    }

    pub fn value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key);
        raw.parse()
            .map_err(|_| Error::param(format!("config key {key:?}: cannot parse {raw:?}")))
    }

    pub fn path(&self, key: &str) -> PathBuf {
        PathBuf::from(self.get(key))
    }

    /// Path that must be set and exist.
    pub fn existing_path(&self, key: &str, what: &'static str) -> Result<PathBuf> {
        let p = self.path(key);
        if self.get(key).is_empty() {
            return Err(Error::param(format!("{key} must name the {what}")));
        }
        if !p.exists() {
            return Err(Error::Missing { what, path: p });
        }
        Ok(p)
    }

    pub fn seed(&self) -> Result<u64> {
        self.value("seed")
    }

    pub fn corpus(&self) -> Result<CorpusConfig> {
        let c = CorpusConfig {
            count: self.value("corpus.count")?,
            size: self.value("corpus.size")?,
            seed: derive_seed(self.seed()?, "corpus", 0),
            cell_size_m: self.value("corpus.cell_size_m")?,
            max_cloud: self.value("corpus.max_cloud")?,
            nodata_prob: self.value("corpus.nodata_prob")?,
            holdout: self.value("corpus.holdout")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::scaled_linear(
            self.value("schedule.steps")?,
            self.value("schedule.beta_start")?,
            self.value("schedule.beta_end")?,
        )
    }

    pub fn codec_kind(&self) -> Result<CodecKind> {
        self.value("codec.kind")
    }

    /// A fresh codec: the identity, or an untrained conv autoencoder.
    pub fn new_codec(&self) -> Result<Codec> {
        match self.codec_kind()? {
            CodecKind::Identity => Ok(Codec::identity()),
            CodecKind::ConvAutoencoder => Codec::conv(
                self.value("codec.factor")?,
                self.value("codec.latent_channels")?,
                self.value("codec.width")?,
                derive_seed(self.seed()?, "codec", 0),
            ),
        }
    }

    pub fn codec_train(&self) -> Result<CodecTrainConfig> {
        Ok(CodecTrainConfig {
            iterations: self.value("codec.iterations")?,
            batch_size: self.value("codec.batch_size")?,
            learning_rate: self.value("codec.learning_rate")?,
            seed: derive_seed(self.seed()?, "codec.train", 0),
        })
    }

    pub fn model(&self, latent_channels: usize) -> Result<DenoiserConfig> {
        let mut m = Manifest::new();
        m.set("model.latent_channels", latent_channels);
        for k in [
            "model.stem_channels",
            "model.channels",
            "model.embed_dim",
            "model.hash_buckets",
            "schedule.steps",
        ] {
            m.set(k, self.get(k));
        }
        let c = DenoiserConfig::from_manifest(&m)?;
        c.validate()?;
        Ok(c)
    }

    pub fn model_seed(&self) -> Result<u64> {
        Ok(derive_seed(self.seed()?, "model.init", 0))
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let c = TrainConfig {
            batch_size: self.value("train.batch_size")?,
            iterations: self.value("train.iterations")?,
            learning_rate: self.value("train.learning_rate")?,
            timesteps: self.value("schedule.steps")?,
            p_uncond: self.value("train.p_uncond")?,
            p_partial: self.value("train.p_partial")?,
            seed: derive_seed(self.seed()?, "train", 0),
            loss_weights: (self.value("train.w_img")?, self.value("train.w_dem")?),
            weight_decay: self.value("train.weight_decay")?,
            ema_decay: self.value("train.ema_decay")?,
            parallel: self.value("train.parallel")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn sample_seed(&self) -> Result<u64> {
        if self.get("sample.seed").is_empty() {
            Ok(derive_seed(self.seed()?, "sample", 0))
        } else {
            self.value("sample.seed")
        }
    }

    pub fn sample(&self) -> Result<SampleConfig> {
        let c = SampleConfig {
            steps: self.value("sample.steps")?,
            guidance_scale: self.value("sample.guidance")?,
            eta: self.value("sample.eta")?,
            seed: self.sample_seed()?,
            prompt: self.get("sample.prompt").to_string(),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn separation(&self) -> Result<SeparationConfig> {
        Ok(SeparationConfig {
            samples_per_prompt: self.value("eval.samples")?,
            prompt_mountains: self.get("eval.prompt_mountains").into(),
            prompt_plains: self.get("eval.prompt_plains").into(),
            prompt_forest: self.get("eval.prompt_forest").into(),
            prompt_desert: self.get("eval.prompt_desert").into(),
            sample: self.sample()?,
        })
    }
}

/// Markdown table of every key, for the README.
pub fn key_table() -> String {
    let mut s = String::from("| key | default | meaning |\n|---|---|---|\n");
    for (k, v, d) in KEYS {
        let v = if v.is_empty() {
            "empty".to_string()
        } else {
            format!("`{v}`")
        };
        s.push_str(&format!("| `{k}` | {v} | {d} |\n"));
    }
    s
}
